#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dieta/common.hpp"
#include "dieta/tensor.hpp"

namespace dieta {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
  size_t vocab_size = 51200;
  size_t d_model = 2048;
  size_t n_heads = 32;
  size_t n_layers = 6;
  size_t ffn_multiplier = 4;
  double rope_base = 10000.0;
  size_t max_seq_len = 512;
  bool tie_output = false;

  size_t d_head() const { return d_model / n_heads; }

  void validate() const {
    if (n_heads == 0 || d_model % n_heads != 0)
      throw ConfigError("d_model " + std::to_string(d_model) +
                        " must be divisible by n_heads " +
                        std::to_string(n_heads));
    if (d_head() % 2 != 0)
      throw ConfigError("d_head " + std::to_string(d_head()) +
                        " must be even for rotary pairs");
    if (n_layers == 0) throw ConfigError("n_layers must be positive");
    if (ffn_multiplier == 0) throw ConfigError("ffn_multiplier must be positive");
    if (vocab_size < 4) throw ConfigError("vocab_size too small");
    if (max_seq_len == 0) throw ConfigError("max_seq_len must be positive");
  }

  // Weight matrices plus embeddings (and the untied output head).
  size_t projection_param_count() const {
    const size_t per_layer =
        4 * d_model * d_model + 2 * ffn_multiplier * d_model * d_model;
    size_t total = vocab_size * d_model + n_layers * per_layer;
    if (!tie_output) total += d_model * vocab_size;
    return total;
  }

  // Norm gains/biases and the per-head attention scales.
  size_t norm_scale_param_count() const {
    return n_layers * (4 * d_model + n_heads);
  }

  size_t total_param_count() const {
    return projection_param_count() + norm_scale_param_count();
  }

  // The released 0.5B configuration.
  static ModelConfig release_preset() { return ModelConfig{}; }

  // Small enough to gradient-check and train on one core.
  static ModelConfig desk_preset() {
    ModelConfig c;
    c.vocab_size = 512;
    c.d_model = 128;
    c.n_heads = 4;
    c.n_layers = 2;
    c.max_seq_len = 128;
    return c;
  }

  std::map<std::string, std::string> to_kv() const {
    std::map<std::string, std::string> kv;
    kv["vocab_size"] = std::to_string(vocab_size);
    kv["d_model"] = std::to_string(d_model);
    kv["n_heads"] = std::to_string(n_heads);
    kv["n_layers"] = std::to_string(n_layers);
    kv["ffn_multiplier"] = std::to_string(ffn_multiplier);
    kv["rope_base"] = std::to_string(rope_base);
    kv["max_seq_len"] = std::to_string(max_seq_len);
    kv["tie_output"] = tie_output ? "1" : "0";
    return kv;
  }

  static ModelConfig from_kv(const std::map<std::string, std::string>& kv) {
    ModelConfig c;
    auto get = [&](const char* key) -> const std::string& {
      auto it = kv.find(key);
      if (it == kv.end())
        throw IoError(std::string("checkpoint config missing key ") + key);
      return it->second;
    };
    c.vocab_size = std::stoul(get("vocab_size"));
    c.d_model = std::stoul(get("d_model"));
    c.n_heads = std::stoul(get("n_heads"));
    c.n_layers = std::stoul(get("n_layers"));
    c.ffn_multiplier = std::stoul(get("ffn_multiplier"));
    c.rope_base = std::stod(get("rope_base"));
    c.max_seq_len = std::stoul(get("max_seq_len"));
    c.tie_output = get("tie_output") == "1";
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

// Pre-softmax attention logits threaded between layers, one [T x T] matrix
// per (sequence, head). Accumulation happens before masking and softmax; the
// causal mask is re-applied inside every layer.
template <typename S>
using AttentionScores = std::vector<Tensor<S>>;  // indexed by head

constexpr double kLayerNormEps = 1e-5;
constexpr double kQkNormEps = 1e-6;

template <typename S>
struct DietaModel {
  struct Layer {
    Tensor<S> wq, wk, wv, wo;      // [d_model x d_model]
    Tensor<S> ffn_in;              // [d_model x mult*d_model]
    Tensor<S> ffn_out;             // [mult*d_model x d_model]
    Tensor<S> ln1_gain, ln1_bias;  // [d_model]
    Tensor<S> ln2_gain, ln2_bias;  // [d_model]
    Tensor<S> qk_scale;            // [n_heads], learned logit scale
  };

  ModelConfig config;
  Tensor<S> embed;  // [vocab x d_model]
  std::vector<Layer> layers;
  Tensor<S> head;   // [d_model x vocab], absent when tied

  static DietaModel init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    DietaModel m;
    m.config = cfg;
    Xorshift64Star rng(seed);
    const double init_std = 0.02;
    auto mat = [&](size_t r, size_t c) {
      return Tensor<S>::randn({r, c}, rng, init_std).set_requires_grad(true);
    };
    const size_t d = cfg.d_model, f = cfg.ffn_multiplier * cfg.d_model;
    m.embed = mat(cfg.vocab_size, d);
    for (size_t l = 0; l < cfg.n_layers; ++l) {
      Layer layer;
      layer.wq = mat(d, d);
      layer.wk = mat(d, d);
      layer.wv = mat(d, d);
      layer.wo = mat(d, d);
      layer.ffn_in = mat(d, f);
      layer.ffn_out = mat(f, d);
      layer.ln1_gain = Tensor<S>::from_data({d}, std::vector<S>(d, S(1)))
                           .set_requires_grad(true);
      layer.ln1_bias = Tensor<S>::zeros({d}).set_requires_grad(true);
      layer.ln2_gain = Tensor<S>::from_data({d}, std::vector<S>(d, S(1)))
                           .set_requires_grad(true);
      layer.ln2_bias = Tensor<S>::zeros({d}).set_requires_grad(true);
      const S g0 = static_cast<S>(std::sqrt(double(cfg.d_head())));
      layer.qk_scale =
          Tensor<S>::from_data({cfg.n_heads}, std::vector<S>(cfg.n_heads, g0))
              .set_requires_grad(true);
      m.layers.push_back(std::move(layer));
    }
    if (!cfg.tie_output) m.head = mat(d, cfg.vocab_size);
    return m;
  }

  struct NamedParam {
    std::string name;
    Tensor<S>* tensor;
  };

  std::vector<NamedParam> parameters() {
    std::vector<NamedParam> out;
    out.push_back({"embed", &embed});
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      Layer& ly = layers[l];
      out.push_back({p + "wq", &ly.wq});
      out.push_back({p + "wk", &ly.wk});
      out.push_back({p + "wv", &ly.wv});
      out.push_back({p + "wo", &ly.wo});
      out.push_back({p + "ffn_in", &ly.ffn_in});
      out.push_back({p + "ffn_out", &ly.ffn_out});
      out.push_back({p + "ln1.gain", &ly.ln1_gain});
      out.push_back({p + "ln1.bias", &ly.ln1_bias});
      out.push_back({p + "ln2.gain", &ly.ln2_gain});
      out.push_back({p + "ln2.bias", &ly.ln2_bias});
      out.push_back({p + "qk_scale", &ly.qk_scale});
    }
    if (!config.tie_output) out.push_back({"head", &head});
    return out;
  }

  size_t live_param_count() {
    size_t n = 0;
    for (auto& p : parameters()) n += p.tensor->numel();
    return n;
  }

  // One head of one sequence: q/k rows are rotated by position,
  // L2-normalized, and scored with the learned per-head scale. Returns the
  // mixed values and this layer's raw (pre-mask, pre-softmax) logits, which
  // are the residual accumulation handed to the next layer.
  std::pair<Tensor<S>, Tensor<S>> head_attention(
      const Tensor<S>& q_rows, const Tensor<S>& k_rows, const Tensor<S>& v_rows,
      const Tensor<S>& prev_scores, const Tensor<S>& head_scale,
      const std::vector<int32_t>& positions) const {
    Tensor<S> q = l2_normalize_rows(
        rope_apply(q_rows, positions, config.rope_base),
        static_cast<S>(kQkNormEps));
    Tensor<S> k = l2_normalize_rows(
        rope_apply(k_rows, positions, config.rope_base),
        static_cast<S>(kQkNormEps));
    Tensor<S> logits = scale_by(matmul_nt(q, k), head_scale);
    if (prev_scores.numel() > 0) logits = add(logits, prev_scores);
    Tensor<S> weights = softmax(causal_mask(logits), 1);
    return {matmul(weights, v_rows), std::move(logits)};
  }

  // Queries and keys are rotated by position, L2-normalized, and scored with
  // the learned per-head scale. Raw (pre-mask, pre-softmax) logits of this
  // layer are the residual accumulation handed to the next layer.
  std::pair<Tensor<S>, AttentionScores<S>> attention(
      const Tensor<S>& x, const AttentionScores<S>& prev_scores,
      const Layer& layer, const std::vector<int32_t>& positions) const {
    const size_t t = x.rows();
    const size_t dh = config.d_head();
    if (t > config.max_seq_len)
      throw LengthError("attention: sequence length " + std::to_string(t) +
                        " exceeds max_seq_len " +
                        std::to_string(config.max_seq_len));
    Tensor<S> q_all = matmul(x, layer.wq);
    Tensor<S> k_all = matmul(x, layer.wk);
    Tensor<S> v_all = matmul(x, layer.wv);
    AttentionScores<S> raw(config.n_heads);
    std::vector<BlockPlacement<S>> head_outs;
    for (size_t h = 0; h < config.n_heads; ++h) {
      auto [mixed, logits] = head_attention(
          block(q_all, 0, t, h * dh, dh), block(k_all, 0, t, h * dh, dh),
          block(v_all, 0, t, h * dh, dh),
          prev_scores.empty() ? Tensor<S>() : prev_scores[h],
          select(layer.qk_scale, h), positions);
      raw[h] = std::move(logits);
      head_outs.push_back({std::move(mixed), 0, h * dh});
    }
    Tensor<S> merged = paste_blocks<S>(t, config.d_model, head_outs);
    return {matmul(merged, layer.wo), std::move(raw)};
  }

  // Post-norm residual block: y = LN1(x + Attn(x)); x' = LN2(y + FFN(y)).
  std::pair<Tensor<S>, AttentionScores<S>> decoder_layer(
      const Tensor<S>& x, const AttentionScores<S>& prev_scores,
      const Layer& layer, const std::vector<int32_t>& positions) const {
    auto [attn_out, scores] = attention(x, prev_scores, layer, positions);
    Tensor<S> y = layer_norm(add(x, attn_out), layer.ln1_gain, layer.ln1_bias,
                             static_cast<S>(kLayerNormEps));
    Tensor<S> ffn =
        matmul(squared_relu(matmul(y, layer.ffn_in)), layer.ffn_out);
    Tensor<S> out = layer_norm(add(y, ffn), layer.ln2_gain, layer.ln2_bias,
                               static_cast<S>(kLayerNormEps));
    return {std::move(out), std::move(scores)};
  }

  // Full forward over one sequence: [T] token ids -> [T x vocab] logits.
  // Post-norm layers already end in a normalizer, so there is no extra final
  // norm before the output projection.
  Tensor<S> forward(std::span<const int32_t> tokens) const {
    return forward_rows(std::vector<int32_t>(tokens.begin(), tokens.end()), 1,
                        tokens.size());
  }

  // Batched forward: `flat` holds `batch` padded rows of `t` ids each.
  // Attention never crosses row boundaries.
  Tensor<S> forward_rows(const std::vector<int32_t>& flat, size_t batch,
                         size_t t) const {
    if (t == 0) throw LengthError("forward: empty sequence");
    if (t > config.max_seq_len)
      throw LengthError("forward: sequence length " + std::to_string(t) +
                        " exceeds max_seq_len " +
                        std::to_string(config.max_seq_len));
    if (flat.size() != batch * t)
      throw DimensionError("forward_rows: flat token count mismatch");
    Tensor<S> x = embedding_rows(embed, flat);
    std::vector<int32_t> positions(t);
    for (size_t i = 0; i < t; ++i) positions[i] = static_cast<int32_t>(i);

    // Row-local sublayers (projections, norms, FFN) run once on the packed
    // matrix; only the score/softmax/mix stage is per sequence and head.
    const size_t dh = config.d_head();
    std::vector<AttentionScores<S>> scores(batch);
    for (const Layer& layer : layers) {
      Tensor<S> q_all = matmul(x, layer.wq);
      Tensor<S> k_all = matmul(x, layer.wk);
      Tensor<S> v_all = matmul(x, layer.wv);
      std::vector<BlockPlacement<S>> head_outs;
      head_outs.reserve(batch * config.n_heads);
      std::vector<AttentionScores<S>> next_scores(batch);
      for (size_t b = 0; b < batch; ++b) {
        next_scores[b].resize(config.n_heads);
        for (size_t h = 0; h < config.n_heads; ++h) {
          auto [mixed, logits] = head_attention(
              block(q_all, b * t, t, h * dh, dh),
              block(k_all, b * t, t, h * dh, dh),
              block(v_all, b * t, t, h * dh, dh),
              scores[b].empty() ? Tensor<S>() : scores[b][h],
              select(layer.qk_scale, h), positions);
          next_scores[b][h] = std::move(logits);
          head_outs.push_back({std::move(mixed), b * t, h * dh});
        }
      }
      scores = std::move(next_scores);
      Tensor<S> merged = paste_blocks<S>(batch * t, config.d_model, head_outs);
      Tensor<S> attn = matmul(merged, layer.wo);
      Tensor<S> y = layer_norm(add(x, attn), layer.ln1_gain, layer.ln1_bias,
                               static_cast<S>(kLayerNormEps));
      Tensor<S> ffn =
          matmul(squared_relu(matmul(y, layer.ffn_in)), layer.ffn_out);
      x = layer_norm(add(y, ffn), layer.ln2_gain, layer.ln2_bias,
                     static_cast<S>(kLayerNormEps));
    }
    return output_logits(x);
  }

  Tensor<S> output_logits(const Tensor<S>& x) const {
    if (config.tie_output) return matmul_nt(x, embed);
    return matmul(x, head);
  }
};

// ---------------------------------------------------------------------------
// Incremental decoding cache
// ---------------------------------------------------------------------------

// Per-layer, per-head rotated+normalized key rows and value rows. The
// residual score pathway does not need to be materialized across steps: each
// step rebuilds its accumulated score row from the cached keys layer by
// layer. Kernels are shared with the batched forward, so feeding a sequence
// token by token reproduces the full recomputation bit for bit.
template <typename S>
struct DecodeCache {
  size_t pos = 0;
  // [layer][head] -> row-major (pos x d_head)
  std::vector<std::vector<std::vector<S>>> k_hat;
  std::vector<std::vector<std::vector<S>>> v;

  explicit DecodeCache(const ModelConfig& cfg)
      : k_hat(cfg.n_layers, std::vector<std::vector<S>>(cfg.n_heads)),
        v(cfg.n_layers, std::vector<std::vector<S>>(cfg.n_heads)) {}
};

// Feeds one token, returns the next-token logits row.
template <typename S>
std::vector<S> forward_step(const DietaModel<S>& m, DecodeCache<S>& cache,
                            int32_t token) {
  const ModelConfig& cfg = m.config;
  if (token < 0 || static_cast<size_t>(token) >= cfg.vocab_size)
    throw IndexError("forward_step: token id " + std::to_string(token) +
                     " out of range");
  if (cache.pos >= cfg.max_seq_len)
    throw LengthError("forward_step: sequence exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  const size_t d = cfg.d_model, dh = cfg.d_head(), hn = cfg.n_heads;
  const size_t t = cache.pos;  // position of this token
  const double pos = static_cast<double>(t);

  std::vector<S> x(m.embed.data().begin() + static_cast<size_t>(token) * d,
                   m.embed.data().begin() + (static_cast<size_t>(token) + 1) * d);

  std::vector<S> q(d), k(d), vrow(d), rot(dh), norm(dh);
  std::vector<S> concat(d), attn(d), resid(d), x_hat(d), hidden;
  std::vector<std::vector<S>> score_acc(hn);  // accumulated raw row per head

  for (size_t li = 0; li < m.layers.size(); ++li) {
    const auto& layer = m.layers[li];
    detail::linear_row(x.data(), layer.wq.data().data(), q.data(), d, d);
    detail::linear_row(x.data(), layer.wk.data().data(), k.data(), d, d);
    detail::linear_row(x.data(), layer.wv.data().data(), vrow.data(), d, d);

    for (size_t h = 0; h < hn; ++h) {
      S scale_saved;
      detail::rope_row(q.data() + h * dh, rot.data(), dh, pos, cfg.rope_base,
                       false);
      std::vector<S> q_hat(dh);
      detail::l2_normalize_row(rot.data(), q_hat.data(), &scale_saved, dh,
                               static_cast<S>(kQkNormEps));
      detail::rope_row(k.data() + h * dh, rot.data(), dh, pos, cfg.rope_base,
                       false);
      detail::l2_normalize_row(rot.data(), norm.data(), &scale_saved, dh,
                               static_cast<S>(kQkNormEps));
      auto& kh = cache.k_hat[li][h];
      auto& vh = cache.v[li][h];
      kh.insert(kh.end(), norm.begin(), norm.begin() + dh);
      vh.insert(vh.end(), vrow.begin() + h * dh, vrow.begin() + (h + 1) * dh);

      const S g = layer.qk_scale.at(h);
      std::vector<S> row(t + 1);
      for (size_t j = 0; j <= t; ++j)
        row[j] = detail::dot(q_hat.data(), kh.data() + j * dh, dh) * g;
      if (li > 0)
        for (size_t j = 0; j <= t; ++j) row[j] = row[j] + score_acc[h][j];
      score_acc[h] = row;  // pre-mask, pre-softmax accumulation

      std::vector<S> w(t + 1);
      detail::softmax_row(row.data(), w.data(), t + 1);
      S* out = concat.data() + h * dh;
      std::fill(out, out + dh, S(0));
      for (size_t j = 0; j <= t; ++j)
        detail::axpy(w[j], vh.data() + j * dh, out, dh);
    }

    detail::linear_row(concat.data(), layer.wo.data().data(), attn.data(), d, d);
    for (size_t i = 0; i < d; ++i) resid[i] = x[i] + attn[i];
    S rstd;
    detail::layer_norm_row(resid.data(), layer.ln1_gain.data().data(),
                           layer.ln1_bias.data().data(),
                           static_cast<S>(kLayerNormEps), x.data(),
                           x_hat.data(), &rstd, d);

    const size_t f = cfg.ffn_multiplier * d;
    hidden.assign(f, S(0));
    detail::linear_row(x.data(), layer.ffn_in.data().data(), hidden.data(), d,
                       f);
    for (size_t i = 0; i < f; ++i) {
      const S r = std::max(S(0), hidden[i]);
      hidden[i] = r * r;
    }
    detail::linear_row(hidden.data(), layer.ffn_out.data().data(), attn.data(),
                       f, d);
    for (size_t i = 0; i < d; ++i) resid[i] = x[i] + attn[i];
    detail::layer_norm_row(resid.data(), layer.ln2_gain.data().data(),
                           layer.ln2_bias.data().data(),
                           static_cast<S>(kLayerNormEps), x.data(),
                           x_hat.data(), &rstd, d);
  }

  std::vector<S> logits(cfg.vocab_size);
  if (cfg.tie_output) {
    for (size_t vv = 0; vv < cfg.vocab_size; ++vv)
      logits[vv] = detail::dot(x.data(), m.embed.data().data() + vv * d, d);
  } else {
    detail::linear_row(x.data(), m.head.data().data(), logits.data(), d,
                       cfg.vocab_size);
  }
  ++cache.pos;
  return logits;
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------
//
// Section "DIETA1": magic bytes, u32 count of config lines, each line
// length-prefixed UTF-8 "key=value", u32 parameter count, then per parameter
// (u32 name length, name, u32 rank, u32 extents[rank], raw little-endian
// payload). Payload scalar width follows the dtype config key: f32 by
// default, f64 when a double-precision model is saved. Optimizer state is
// appended by the trainer under a second magic section "LION1" with the same
// record layout.

namespace ckpt {

inline void write_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw IoError("checkpoint: truncated u32");
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

inline void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
  const uint32_t n = read_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw IoError("checkpoint: truncated string");
  return s;
}

inline void expect_magic(std::istream& is, const std::string& magic) {
  std::string got(magic.size(), '\0');
  is.read(got.data(), static_cast<std::streamsize>(magic.size()));
  if (!is || got != magic)
    throw IoError("checkpoint: expected magic \"" + magic + "\"");
}

inline void write_config_lines(std::ostream& os,
                               const std::map<std::string, std::string>& kv) {
  write_u32(os, static_cast<uint32_t>(kv.size()));
  for (const auto& [k, v] : kv) write_string(os, k + "=" + v);
}

inline std::map<std::string, std::string> read_config_lines(std::istream& is) {
  std::map<std::string, std::string> kv;
  const uint32_t n = read_u32(is);
  for (uint32_t i = 0; i < n; ++i) {
    const std::string line = read_string(is);
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError("checkpoint: config line without '='");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

// Payload is written in the file dtype; values are converted elementwise.
template <typename S>
void write_named_tensor(std::ostream& os, const std::string& name,
                        const Tensor<S>& t, bool store_f64) {
  write_string(os, name);
  write_u32(os, static_cast<uint32_t>(t.rank()));
  for (size_t d : t.shape()) write_u32(os, static_cast<uint32_t>(d));
  if (store_f64) {
    for (S x : t.data()) {
      double v = static_cast<double>(x);
      uint64_t bits;
      std::memcpy(&bits, &v, 8);
      for (int b = 0; b < 8; ++b)
        os.put(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
  } else {
    for (S x : t.data()) {
      float v = static_cast<float>(x);
      uint32_t bits;
      std::memcpy(&bits, &v, 4);
      for (int b = 0; b < 4; ++b)
        os.put(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
  }
}

template <typename S>
std::pair<std::string, Tensor<S>> read_named_tensor(std::istream& is,
                                                    bool stored_f64) {
  std::string name = read_string(is);
  const uint32_t rank = read_u32(is);
  std::vector<size_t> shape(rank);
  for (uint32_t i = 0; i < rank; ++i) shape[i] = read_u32(is);
  const size_t n = detail::shape_numel(shape);
  std::vector<S> data(n);
  if (stored_f64) {
    for (size_t i = 0; i < n; ++i) {
      uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) {
        const int c = is.get();
        if (c < 0) throw IoError("checkpoint: truncated tensor payload");
        bits |= static_cast<uint64_t>(static_cast<unsigned char>(c)) << (8 * b);
      }
      double v;
      std::memcpy(&v, &bits, 8);
      data[i] = static_cast<S>(v);
    }
  } else {
    for (size_t i = 0; i < n; ++i) {
      uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        const int c = is.get();
        if (c < 0) throw IoError("checkpoint: truncated tensor payload");
        bits |= static_cast<uint32_t>(static_cast<unsigned char>(c)) << (8 * b);
      }
      float v;
      std::memcpy(&v, &bits, 4);
      data[i] = static_cast<S>(v);
    }
  }
  return {std::move(name), Tensor<S>::from_data(std::move(shape), std::move(data))};
}

}  // namespace ckpt

template <typename S>
void write_model(std::ostream& os, DietaModel<S>& m) {
  os.write("DIETA1", 6);
  auto kv = m.config.to_kv();
  kv["dtype"] = sizeof(S) == 8 ? "f64" : "f32";
  ckpt::write_config_lines(os, kv);
  auto params = m.parameters();
  ckpt::write_u32(os, static_cast<uint32_t>(params.size()));
  for (auto& p : params)
    ckpt::write_named_tensor(os, p.name, *p.tensor, sizeof(S) == 8);
}

template <typename S>
DietaModel<S> read_model(std::istream& is) {
  ckpt::expect_magic(is, "DIETA1");
  auto kv = ckpt::read_config_lines(is);
  const bool stored_f64 = kv.count("dtype") && kv.at("dtype") == "f64";
  kv.erase("dtype");
  const ModelConfig cfg = ModelConfig::from_kv(kv);
  DietaModel<S> m = DietaModel<S>::init(cfg, 0);
  auto params = m.parameters();
  std::map<std::string, Tensor<S>*> by_name;
  for (auto& p : params) by_name[p.name] = p.tensor;
  const uint32_t n = ckpt::read_u32(is);
  if (n != params.size())
    throw IoError("checkpoint: expected " + std::to_string(params.size()) +
                  " parameters, found " + std::to_string(n));
  for (uint32_t i = 0; i < n; ++i) {
    auto [name, tensor] = ckpt::read_named_tensor<S>(is, stored_f64);
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw IoError("checkpoint: unknown parameter " + name);
    if (it->second->shape() != tensor.shape())
      throw IoError("checkpoint: shape mismatch for parameter " + name);
    it->second->data() = tensor.data();
  }
  return m;
}

template <typename S>
void save_checkpoint(const std::string& path, DietaModel<S>& m) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write checkpoint " + path);
  write_model(f, m);
  if (!f) throw IoError("failed writing checkpoint " + path);
}

template <typename S>
DietaModel<S> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  return read_model<S>(f);
}

inline ModelConfig read_checkpoint_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  ckpt::expect_magic(f, "DIETA1");
  auto kv = ckpt::read_config_lines(f);
  kv.erase("dtype");
  return ModelConfig::from_kv(kv);
}

inline bool checkpoint_is_f64(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  ckpt::expect_magic(f, "DIETA1");
  auto kv = ckpt::read_config_lines(f);
  return kv.count("dtype") && kv.at("dtype") == "f64";
}

}  // namespace dieta
