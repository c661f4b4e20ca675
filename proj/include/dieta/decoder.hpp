#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dieta/common.hpp"
#include "dieta/model.hpp"
#include "dieta/pipeline.hpp"
#include "dieta/tokenizer.hpp"

namespace dieta {

// Anything decodable: a copyable incremental state plus a step function that
// consumes one token and returns next-token logits.
template <typename M>
concept DecoderModel = requires(const M& m, typename M::Cache& cache, int32_t t) {
  { m.vocab_size() } -> std::convertible_to<size_t>;
  { m.make_cache() } -> std::same_as<typename M::Cache>;
  { m.step(cache, t) } -> std::same_as<std::vector<double>>;
};

// DietaModel exposed through the incremental decode cache.
template <typename S>
class ModelDecoder {
 public:
  using Cache = DecodeCache<S>;
  explicit ModelDecoder(const DietaModel<S>& m) : model_(&m) {}
  size_t vocab_size() const { return model_->config.vocab_size; }
  Cache make_cache() const { return Cache(model_->config); }
  std::vector<double> step(Cache& cache, int32_t token) const {
    std::vector<S> logits = forward_step(*model_, cache, token);
    return std::vector<double>(logits.begin(), logits.end());
  }

 private:
  const DietaModel<S>* model_;
};

struct DecodeParams {
  size_t max_new_tokens = 128;
  size_t beam_width = 1;       // 1 degenerates to greedy
  double length_penalty = 0.6; // alpha in score / length^alpha; 0 = raw scores
  int32_t eos_id = Vocab::kEosId;

  void validate() const {
    if (beam_width < 1) throw ContractError("beam_width must be >= 1");
    if (max_new_tokens < 1) throw ContractError("max_new_tokens must be >= 1");
  }
};

struct BeamHypothesis {
  std::vector<int32_t> tokens;  // generated tokens only
  double log_prob = 0.0;        // cumulative, non-increasing with length
  bool finished = false;

  double normalized(double alpha) const {
    const double len = static_cast<double>(std::max<size_t>(tokens.size(), 1));
    return alpha == 0.0 ? log_prob : log_prob / std::pow(len, alpha);
  }
};

namespace detail {

inline std::vector<double> log_softmax(const std::vector<double>& logits) {
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - m);
  const double lse = m + std::log(sum);
  std::vector<double> out(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

inline int32_t argmax_lowest_id(const std::vector<double>& v) {
  size_t best = 0;
  for (size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;  // strict: ties keep the lowest id
  return static_cast<int32_t>(best);
}

}  // namespace detail

// Appends the argmax token each step (ties break to the lowest id); stops at
// EOS or after max_new_tokens. Returns only the generated suffix.
template <DecoderModel M>
std::vector<int32_t> greedy_decode(const M& model,
                                   std::span<const int32_t> prompt,
                                   const DecodeParams& params) {
  params.validate();
  if (prompt.empty()) throw LengthError("greedy_decode: empty prompt");
  auto cache = model.make_cache();
  std::vector<double> logits;
  for (int32_t t : prompt) logits = model.step(cache, t);
  std::vector<int32_t> out;
  for (size_t n = 0; n < params.max_new_tokens; ++n) {
    const int32_t tok = detail::argmax_lowest_id(logits);
    out.push_back(tok);
    if (tok == params.eos_id) break;
    if (n + 1 < params.max_new_tokens) logits = model.step(cache, tok);
  }
  return out;
}

struct BeamSearchResult {
  std::vector<int32_t> tokens;
  double log_prob = 0.0;    // raw cumulative log-probability
  double normalized = 0.0;  // log_prob / length^alpha
};

// Length-normalized beam search. Every live beam is expanded by its top
// beam_width tokens; finished hypotheses compete in the pool and are never
// extended. The best finished hypothesis ever seen is returned (best live on
// budget exhaustion). Expansion and pruning order is deterministic: score
// first, then lexicographically smallest token sequence.
template <DecoderModel M>
BeamSearchResult beam_search(const M& model, std::span<const int32_t> prompt,
                             const DecodeParams& params) {
  params.validate();
  if (prompt.empty()) throw LengthError("beam_search: empty prompt");
  const double alpha = params.length_penalty;

  struct Beam {
    BeamHypothesis hyp;
    typename M::Cache cache;
    std::vector<double> log_probs;  // next-token distribution
  };

  auto base_cache = model.make_cache();
  std::vector<double> logits;
  for (int32_t t : prompt) logits = model.step(base_cache, t);

  std::vector<Beam> live;
  live.push_back(Beam{BeamHypothesis{}, std::move(base_cache),
                      detail::log_softmax(logits)});
  std::vector<BeamHypothesis> finished;

  bool have_best = false;
  BeamHypothesis best_finished;

  struct Candidate {
    size_t parent;       // index into live, or SIZE_MAX for finished carryover
    int32_t token;       // next token when parent != SIZE_MAX
    BeamHypothesis hyp;  // materialized hypothesis
  };

  for (size_t depth = 0; depth < params.max_new_tokens && !live.empty();
       ++depth) {
    std::vector<Candidate> pool;
    for (const BeamHypothesis& h : finished)
      pool.push_back(Candidate{SIZE_MAX, 0, h});
    for (size_t b = 0; b < live.size(); ++b) {
      // top beam_width tokens of this beam by next-token log-probability
      std::vector<int32_t> ids(live[b].log_probs.size());
      for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int32_t>(i);
      const size_t k = std::min<size_t>(params.beam_width, ids.size());
      std::partial_sort(ids.begin(), ids.begin() + k, ids.end(),
                        [&](int32_t a, int32_t c) {
                          if (live[b].log_probs[a] != live[b].log_probs[c])
                            return live[b].log_probs[a] > live[b].log_probs[c];
                          return a < c;
                        });
      for (size_t i = 0; i < k; ++i) {
        Candidate cand;
        cand.parent = b;
        cand.token = ids[i];
        cand.hyp = live[b].hyp;
        cand.hyp.tokens.push_back(ids[i]);
        cand.hyp.log_prob += live[b].log_probs[ids[i]];
        cand.hyp.finished = ids[i] == params.eos_id;
        pool.push_back(std::move(cand));
      }
    }
    std::sort(pool.begin(), pool.end(), [&](const Candidate& a,
                                            const Candidate& c) {
      const double sa = a.hyp.normalized(alpha), sc = c.hyp.normalized(alpha);
      if (sa != sc) return sa > sc;
      return a.hyp.tokens < c.hyp.tokens;
    });
    if (pool.size() > params.beam_width) pool.resize(params.beam_width);

    std::vector<Beam> next_live;
    finished.clear();
    for (Candidate& cand : pool) {
      if (cand.hyp.finished || cand.parent == SIZE_MAX) {
        if (!have_best ||
            cand.hyp.normalized(alpha) > best_finished.normalized(alpha)) {
          best_finished = cand.hyp;
          have_best = true;
        }
        finished.push_back(std::move(cand.hyp));
        continue;
      }
      Beam nb{std::move(cand.hyp), live[cand.parent].cache, {}};
      if (depth + 1 < params.max_new_tokens)
        nb.log_probs = detail::log_softmax(model.step(nb.cache, cand.token));
      next_live.push_back(std::move(nb));
    }
    live = std::move(next_live);
  }

  BeamHypothesis result;
  if (have_best) {
    result = best_finished;
    // a live hypothesis can still outrank every finished one at budget end
    for (const Beam& b : live)
      if (b.hyp.normalized(alpha) > result.normalized(alpha)) result = b.hyp;
  } else if (!live.empty()) {
    result = live.front().hyp;
    for (const Beam& b : live)
      if (b.hyp.normalized(alpha) > result.normalized(alpha)) result = b.hyp;
  } else {
    throw ContractError("beam_search: no hypotheses produced");
  }
  return BeamSearchResult{result.tokens, result.log_prob,
                          result.normalized(alpha)};
}

// ---------------------------------------------------------------------------
// Translation protocol
// ---------------------------------------------------------------------------

inline std::string build_translation_prompt(const std::string& text,
                                            Direction dir) {
  if (dir == Direction::EnToIt) return "ENG: " + text + " IT:";
  return "IT: " + text + " ENG:";
}

inline std::string opposite_tag(Direction dir) {
  return dir == Direction::EnToIt ? "ENG:" : "IT:";
}

// Builds the tagged prompt, decodes, cuts the generation at EOS or at the
// first occurrence of the opposite direction tag, and returns the trimmed
// target-side text.
template <DecoderModel M>
std::string translate(const M& model, const Vocab& vocab,
                      const std::string& text, Direction dir,
                      const DecodeParams& params) {
  if (text.empty()) return "";
  const std::string prompt = build_translation_prompt(text, dir);
  std::vector<int32_t> prompt_ids = vocab.encode(prompt);
  std::vector<int32_t> generated;
  if (params.beam_width == 1) {
    generated = greedy_decode(model, prompt_ids, params);
  } else {
    generated = beam_search(model, prompt_ids, params).tokens;
  }
  std::string out = vocab.decode(generated);  // specials drop out here
  const size_t cut = out.find(opposite_tag(dir));
  if (cut != std::string::npos) out = out.substr(0, cut);
  size_t b = out.find_first_not_of(' ');
  size_t e = out.find_last_not_of(' ');
  if (b == std::string::npos) return "";
  return out.substr(b, e - b + 1);
}

// Batch interface: one sentence per input line, one translation per output
// line, order preserved.
template <DecoderModel M>
std::vector<std::string> translate_lines(const M& model, const Vocab& vocab,
                                         const std::vector<std::string>& lines,
                                         Direction dir,
                                         const DecodeParams& params) {
  std::vector<std::string> out;
  out.reserve(lines.size());
  for (const std::string& line : lines)
    out.push_back(translate(model, vocab, trim_trailing_newline(line), dir,
                            params));
  return out;
}

}  // namespace dieta
