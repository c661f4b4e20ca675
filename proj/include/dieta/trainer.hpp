#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "dieta/common.hpp"
#include "dieta/model.hpp"
#include "dieta/tensor.hpp"
#include "dieta/tokenizer.hpp"

namespace dieta {

// ---------------------------------------------------------------------------
// Lion optimizer
// ---------------------------------------------------------------------------

struct LionParams {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double weight_decay = 0.01;  // decoupled, applied inside the update
};

// Update rule:
//   c = beta1 * m + (1 - beta1) * g
//   param <- param - lr * (sign(c) + weight_decay * param)
//   m <- beta2 * m + (1 - beta2) * g
// with sign(0) = 0, so a dead coordinate with no momentum stays put.
template <typename S>
void lion_step(Tensor<S>& param, const std::vector<S>& grad,
               std::vector<S>& momentum, const LionParams& p, double lr) {
  const size_t n = param.numel();
  if (grad.size() != n || momentum.size() != n)
    throw ContractError("lion_step: parameter/gradient/momentum sizes differ (" +
                        std::to_string(n) + ", " + std::to_string(grad.size()) +
                        ", " + std::to_string(momentum.size()) + ")");
  const S b1 = static_cast<S>(p.beta1), b2 = static_cast<S>(p.beta2);
  const S wd = static_cast<S>(p.weight_decay);
  const S step = static_cast<S>(lr);
  S* w = param.data().data();
  for (size_t i = 0; i < n; ++i) {
    const S c = b1 * momentum[i] + (S(1) - b1) * grad[i];
    const S dir = c > S(0) ? S(1) : (c < S(0) ? S(-1) : S(0));
    w[i] = w[i] - step * (dir + wd * w[i]);
    momentum[i] = b2 * momentum[i] + (S(1) - b2) * grad[i];
  }
}

template <typename S>
struct LionState {
  LionParams params;
  std::vector<std::vector<S>> momentum;  // parallel to model.parameters()

  static LionState init(DietaModel<S>& model, const LionParams& p) {
    LionState s;
    s.params = p;
    for (auto& np : model.parameters())
      s.momentum.emplace_back(np.tensor->numel(), S(0));
    return s;
  }
};

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

// Linear 0 -> peak over the warmup steps, then linear peak -> floor over the
// rest. Continuous and piecewise linear; the maximum is hit exactly at the
// warmup boundary.
struct Schedule {
  double peak_lr = 2e-4;
  size_t total_steps = 0;
  double warmup_fraction = 0.10;
  double floor_lr = 0.0;

  void validate() const {
    if (total_steps == 0) throw ConfigError("schedule: total_steps must be positive");
    if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0))
      throw ConfigError("schedule: warmup_fraction must lie in (0,1)");
    if (floor_lr < 0.0) throw ConfigError("schedule: floor_lr must be >= 0");
  }

  size_t warmup_steps() const {
    return static_cast<size_t>(
        std::llround(warmup_fraction * static_cast<double>(total_steps)));
  }
};

inline double lr_at(size_t step, const Schedule& s) {
  s.validate();
  if (step > s.total_steps)
    throw ContractError("lr_at: step " + std::to_string(step) +
                        " beyond total_steps " + std::to_string(s.total_steps));
  const size_t w = s.warmup_steps();
  if (step <= w)
    return s.peak_lr * (static_cast<double>(step) / static_cast<double>(w));
  return s.peak_lr + (s.floor_lr - s.peak_lr) *
                         (static_cast<double>(step - w) /
                          static_cast<double>(s.total_steps - w));
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

struct Batch {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<int32_t> tokens;     // rows*cols, PAD-padded
  std::vector<int32_t> targets;    // next token per position, 0 where masked
  std::vector<uint8_t> loss_mask;  // 1 where a real next token exists
  size_t real_tokens = 0;          // non-PAD entries
};

struct BatchingStats {
  size_t truncated_samples = 0;
  size_t total_tokens = 0;  // encoded tokens incl. EOS across all samples
};

// Every sample is encoded, gets EOS appended, and is truncated at
// max_seq_len (keeping the EOS). Samples are packed greedily in order until
// the token budget would be exceeded; an oversized single sample forms its
// own batch. Loss positions are those with a real next token, so every
// non-initial token of a sample is predicted exactly once.
inline std::vector<Batch> make_batches(const std::vector<std::string>& samples,
                                       const Vocab& vocab,
                                       size_t max_tokens_per_batch,
                                       size_t max_seq_len,
                                       BatchingStats* stats = nullptr) {
  if (max_tokens_per_batch == 0)
    throw ConfigError("make_batches: token budget must be positive");
  if (max_seq_len < 2)
    throw ConfigError("make_batches: max_seq_len must be at least 2");
  std::vector<std::vector<int32_t>> seqs;
  BatchingStats local;
  for (const std::string& text : samples) {
    std::vector<int32_t> ids = vocab.encode(trim_trailing_newline(text));
    if (ids.empty()) continue;
    if (ids.size() + 1 > max_seq_len) {
      ids.resize(max_seq_len - 1);
      ++local.truncated_samples;
    }
    ids.push_back(Vocab::kEosId);
    local.total_tokens += ids.size();
    seqs.push_back(std::move(ids));
  }

  std::vector<Batch> batches;
  size_t i = 0;
  while (i < seqs.size()) {
    size_t budget = 0;
    size_t j = i;
    while (j < seqs.size()) {
      if (j > i && budget + seqs[j].size() > max_tokens_per_batch) break;
      budget += seqs[j].size();
      ++j;
    }
    Batch b;
    b.rows = j - i;
    for (size_t r = i; r < j; ++r) b.cols = std::max(b.cols, seqs[r].size());
    b.tokens.assign(b.rows * b.cols, Vocab::kPadId);
    b.targets.assign(b.rows * b.cols, 0);
    b.loss_mask.assign(b.rows * b.cols, 0);
    for (size_t r = i; r < j; ++r) {
      const auto& seq = seqs[r];
      const size_t row = r - i;
      for (size_t p = 0; p < seq.size(); ++p)
        b.tokens[row * b.cols + p] = seq[p];
      for (size_t p = 0; p + 1 < seq.size(); ++p) {
        b.targets[row * b.cols + p] = seq[p + 1];
        b.loss_mask[row * b.cols + p] = 1;
      }
      b.real_tokens += seq.size();
    }
    batches.push_back(std::move(b));
    i = j;
  }
  if (stats) *stats = local;
  return batches;
}

// ---------------------------------------------------------------------------
// Checkpoints with optimizer state
// ---------------------------------------------------------------------------

// "LION1" section appended after the model: config lines carry the step and
// the optimizer constants, followed by one momentum tensor per parameter.
template <typename S>
void save_train_checkpoint(const std::string& path, DietaModel<S>& model,
                           const LionState<S>& state, size_t step) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write checkpoint " + path);
  write_model(f, model);
  f.write("LION1", 5);
  std::map<std::string, std::string> kv;
  kv["step"] = std::to_string(step);
  kv["beta1"] = std::to_string(state.params.beta1);
  kv["beta2"] = std::to_string(state.params.beta2);
  kv["weight_decay"] = std::to_string(state.params.weight_decay);
  ckpt::write_config_lines(f, kv);
  auto params = model.parameters();
  ckpt::write_u32(f, static_cast<uint32_t>(params.size()));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor<S> m = Tensor<S>::from_data(params[i].tensor->shape(),
                                       state.momentum[i]);
    ckpt::write_named_tensor(f, "m." + params[i].name, m, sizeof(S) == 8);
  }
  if (!f) throw IoError("failed writing checkpoint " + path);
}

template <typename S>
size_t load_train_checkpoint(const std::string& path, DietaModel<S>& model,
                             LionState<S>& state) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  DietaModel<S> loaded = read_model<S>(f);
  if (loaded.config.to_kv() != model.config.to_kv())
    throw ConfigError("resume checkpoint config does not match the run config");
  auto src = loaded.parameters();
  auto dst = model.parameters();
  for (size_t i = 0; i < src.size(); ++i)
    dst[i].tensor->data() = src[i].tensor->data();

  ckpt::expect_magic(f, "LION1");
  auto kv = ckpt::read_config_lines(f);
  state.params.beta1 = std::stod(kv.at("beta1"));
  state.params.beta2 = std::stod(kv.at("beta2"));
  state.params.weight_decay = std::stod(kv.at("weight_decay"));
  const size_t step = std::stoul(kv.at("step"));
  const uint32_t n = ckpt::read_u32(f);
  if (n != dst.size())
    throw IoError("checkpoint: momentum count mismatch");
  const bool stored_f64 = sizeof(S) == 8;
  for (uint32_t i = 0; i < n; ++i) {
    auto [name, tensor] = ckpt::read_named_tensor<S>(f, stored_f64);
    if (name != "m." + dst[i].name)
      throw IoError("checkpoint: unexpected momentum record " + name);
    state.momentum[i] = tensor.data();
  }
  return step;
}

// ---------------------------------------------------------------------------
// Recipes
// ---------------------------------------------------------------------------

// The five released training recipes as configuration presets. Mixtures are
// dataset roles; pair counts document the full-scale mixture sizes.
struct TrainRecipe {
  std::string name;
  std::vector<std::string> mixture;
  std::string start_from;  // empty = trained from scratch
  size_t epochs = 1;
  uint64_t full_scale_pairs = 0;

  bool requires_start() const { return !start_from.empty(); }
};

inline TrainRecipe recipe_preset(const std::string& name) {
  if (name == "DIETA")
    return {"DIETA", {"parallel"}, "", 1, 415728874ull};
  if (name == "+BT")
    return {"+BT", {"parallel", "newscrawl_bt"}, "", 1, 559924569ull};
  if (name == "+cont")
    return {"+cont", {"parallel", "newscrawl_bt"}, "DIETA", 1, 559924569ull};
  if (name == "+nosynth")
    return {"+nosynth", {"parallel"}, "DIETA", 1, 415728874ull};
  if (name == "+allsynth")
    return {"+allsynth", {"parallel", "newscrawl_bt", "fineweb_bt"}, "+cont", 1,
            768440887ull};
  throw ConfigError("unknown training recipe \"" + name + "\"");
}

inline void validate_recipe_start(const TrainRecipe& recipe,
                                  const std::string& start_checkpoint) {
  if (recipe.requires_start() && start_checkpoint.empty())
    throw ConfigError("recipe " + recipe.name + " continues from " +
                      recipe.start_from +
                      " and needs a starting checkpoint (--init-from)");
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainOptions {
  size_t steps = 0;   // optimizer steps; 0 means epochs * batch count
  size_t epochs = 1;
  size_t max_tokens_per_batch = 512;
  size_t max_seq_len = 64;
  Schedule schedule;  // total_steps is filled in from the resolved step count
  LionParams lion;
  size_t checkpoint_interval = 0;  // additionally every N steps when > 0
  std::string checkpoint_path;
  std::string metrics_path;
  std::string init_from;    // warm-start parameters, optimizer restarts
  std::string resume_from;  // parameters + optimizer + step counter
};

struct TrainResult {
  size_t start_step = 0;
  size_t end_step = 0;
  std::vector<double> losses;  // one per executed step
  size_t truncated_samples = 0;
  std::vector<std::string> silent_params;  // never received a nonzero grad
};

template <typename S>
TrainResult train(DietaModel<S>& model, const std::vector<std::string>& samples,
                  const Vocab& vocab, TrainOptions opt) {
  if (vocab.size() > model.config.vocab_size)
    throw ConfigError("vocabulary size " + std::to_string(vocab.size()) +
                      " exceeds model vocab_size " +
                      std::to_string(model.config.vocab_size));
  if (opt.max_seq_len > model.config.max_seq_len)
    throw ConfigError("max_seq_len exceeds the model's limit");
  BatchingStats bstats;
  std::vector<Batch> batches = make_batches(
      samples, vocab, opt.max_tokens_per_batch, opt.max_seq_len, &bstats);
  if (batches.empty()) throw InputError("train: no usable samples");

  if (opt.steps == 0) opt.steps = opt.epochs * batches.size();
  if (opt.schedule.total_steps == 0) opt.schedule.total_steps = opt.steps;
  opt.schedule.validate();

  LionState<S> state = LionState<S>::init(model, opt.lion);
  size_t start_step = 0;
  if (!opt.resume_from.empty()) {
    start_step = load_train_checkpoint(opt.resume_from, model, state);
  } else if (!opt.init_from.empty()) {
    DietaModel<S> warm = load_checkpoint<S>(opt.init_from);
    if (warm.config.to_kv() != model.config.to_kv())
      throw ConfigError("init checkpoint config does not match the run config");
    auto src = warm.parameters();
    auto dst = model.parameters();
    for (size_t i = 0; i < src.size(); ++i)
      dst[i].tensor->data() = src[i].tensor->data();
  }
  if (start_step >= opt.steps)
    throw ConfigError("resume checkpoint is already at step " +
                      std::to_string(start_step));

  std::ofstream metrics;
  if (!opt.metrics_path.empty()) {
    metrics.open(opt.metrics_path, start_step ? std::ios::app : std::ios::trunc);
    if (!metrics) throw IoError("cannot write metrics log " + opt.metrics_path);
    if (start_step == 0) metrics << "#step\tlr\tloss\ttokens_per_sec\n";
  }

  auto params = model.parameters();
  std::vector<bool> grad_seen(params.size(), false);
  TrainResult result;
  result.start_step = start_step;
  result.truncated_samples = bstats.truncated_samples;

  for (size_t step = start_step; step < opt.steps; ++step) {
    const Batch& b = batches[step % batches.size()];
    const auto t0 = std::chrono::steady_clock::now();
    double loss_value;
    {
      TapeScope<S> scope;
      Tensor<S> logits = model.forward_rows(b.tokens, b.rows, b.cols);
      Tensor<S> loss = cross_entropy(logits, b.targets, b.loss_mask);
      loss_value = static_cast<double>(loss.item());
      backward(loss);
    }
    const double lr = lr_at(step + 1, opt.schedule);
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor<S>* t = params[i].tensor;
      if (!t->has_grad()) {
        // untouched this step; momentum still decays toward zero
        static thread_local std::vector<S> zeros;
        zeros.assign(t->numel(), S(0));
        lion_step(*t, zeros, state.momentum[i], state.params, lr);
        continue;
      }
      if (!grad_seen[i]) {
        for (S g : t->grad())
          if (g != S(0)) {
            grad_seen[i] = true;
            break;
          }
      }
      lion_step(*t, t->grad(), state.momentum[i], state.params, lr);
      t->zero_grad();
    }
    result.losses.push_back(loss_value);

    const double dt =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    if (metrics.is_open())
      metrics << (step + 1) << "\t" << lr << "\t" << loss_value << "\t"
              << (dt > 0 ? double(b.real_tokens) / dt : 0.0) << "\n";

    const size_t done = step + 1;
    if (!opt.checkpoint_path.empty() &&
        ((opt.checkpoint_interval && done % opt.checkpoint_interval == 0) ||
         done == opt.steps))
      save_train_checkpoint(opt.checkpoint_path, model, state, done);
  }
  result.end_step = opt.steps;
  for (size_t i = 0; i < params.size(); ++i)
    if (!grad_seen[i]) result.silent_params.push_back(params[i].name);
  return result;
}

}  // namespace dieta
