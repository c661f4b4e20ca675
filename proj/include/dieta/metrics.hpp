#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "dieta/clients.hpp"
#include "dieta/common.hpp"

namespace dieta {

namespace detail {

// The "international" tokenization used for reproducible BLEU scores:
// mteval-style normalization, then every ASCII symbol except apostrophe,
// comma, hyphen and period split off; period/comma split unless between
// digits; hyphen split after a digit. Non-ASCII text is left intact.
inline bool split_always_13a(unsigned char c) {
  return (c >= 0x20 && c <= 0x26) || (c >= 0x28 && c <= 0x2B) ||
         (c >= 0x3A && c <= 0x40) || (c >= 0x5B && c <= 0x60) ||
         (c >= 0x7B && c <= 0x7E) || c == '/';
}

inline std::string replace_all(std::string s, const std::string& from,
                               const std::string& to) {
  size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
  return s;
}

inline bool is_digit(char c) { return c >= '0' && c <= '9'; }

// Left-to-right non-overlapping application of a two-character rule.
template <typename Match, typename Emit>
std::string rewrite_pairs(const std::string& s, Match match, Emit emit) {
  std::string out;
  size_t i = 0;
  while (i < s.size()) {
    if (i + 1 < s.size() && match(s[i], s[i + 1])) {
      emit(out, s[i], s[i + 1]);
      i += 2;
    } else {
      out += s[i];
      ++i;
    }
  }
  return out;
}

inline std::vector<std::string> tokenize_13a(const std::string& line) {
  std::string s = replace_all(line, "<skipped>", "");
  s = replace_all(s, "-\n", "");
  s = replace_all(s, "\n", " ");
  if (s.find('&') != std::string::npos) {
    s = replace_all(s, "&quot;", "\"");
    s = replace_all(s, "&amp;", "&");
    s = replace_all(s, "&lt;", "<");
    s = replace_all(s, "&gt;", ">");
  }
  s = " " + s + " ";

  std::string spaced;
  for (char c : s) {
    if (split_always_13a(static_cast<unsigned char>(c)) && c != ' ') {
      spaced += ' ';
      spaced += c;
      spaced += ' ';
    } else {
      spaced += c;
    }
  }
  spaced = rewrite_pairs(
      spaced,
      [](char a, char b) { return !is_digit(a) && (b == '.' || b == ','); },
      [](std::string& out, char a, char b) {
        out += a;
        out += ' ';
        out += b;
        out += ' ';
      });
  spaced = rewrite_pairs(
      spaced,
      [](char a, char b) { return (a == '.' || a == ',') && !is_digit(b); },
      [](std::string& out, char a, char b) {
        out += ' ';
        out += a;
        out += ' ';
        out += b;
      });
  spaced = rewrite_pairs(
      spaced, [](char a, char b) { return is_digit(a) && b == '-'; },
      [](std::string& out, char a, char b) {
        out += a;
        out += ' ';
        out += b;
        out += ' ';
      });

  std::vector<std::string> tokens;
  std::string cur;
  for (char c : spaced) {
    if (c == ' ' || c == '\t') {
      if (!cur.empty()) tokens.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

// UTF-8 string as codepoint-sized byte chunks (invalid bytes pass through as
// single chunks).
inline std::vector<std::string> utf8_codepoints(const std::string& s) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < s.size()) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    size_t len = 1;
    if ((c & 0xE0) == 0xC0) len = 2;
    else if ((c & 0xF0) == 0xE0) len = 3;
    else if ((c & 0xF8) == 0xF0) len = 4;
    if (i + len > s.size()) len = 1;
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

inline void count_ngrams(const std::vector<std::string>& units, size_t n,
                         std::unordered_map<std::string, size_t>& counts) {
  if (units.size() < n) return;
  for (size_t i = 0; i + n <= units.size(); ++i) {
    std::string key;
    for (size_t k = 0; k < n; ++k) {
      key += units[i + k];
      key += '\x1f';
    }
    ++counts[key];
  }
}

inline size_t clipped_matches(
    const std::unordered_map<std::string, size_t>& hyp,
    const std::unordered_map<std::string, size_t>& ref) {
  size_t total = 0;
  for (const auto& [key, count] : hyp) {
    auto it = ref.find(key);
    if (it != ref.end()) total += std::min(count, it->second);
  }
  return total;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

struct BleuBreakdown {
  double score = 0.0;                     // 0..100
  std::array<size_t, 4> correct{};        // clipped n-gram matches
  std::array<size_t, 4> total{};          // hypothesis n-gram counts
  std::array<double, 4> precisions{};     // after smoothing
  size_t hyp_len = 0;
  size_t ref_len = 0;
  double brevity_penalty = 1.0;
};

// Corpus-level BLEU-4: geometric mean of modified n-gram precisions times
// the brevity penalty. Zero counts are exponentially smoothed
// (1 / (2^k * total_n), k incremented per smoothed order) unless smoothing
// is disabled, in which case any zero order collapses the score to 0.
inline BleuBreakdown bleu_breakdown(const std::vector<std::string>& hypotheses,
                                    const std::vector<std::string>& references,
                                    bool smoothing = true) {
  if (hypotheses.size() != references.size())
    throw ContractError("bleu: " + std::to_string(hypotheses.size()) +
                        " hypotheses vs " + std::to_string(references.size()) +
                        " references");
  if (hypotheses.empty()) throw ContractError("bleu: empty corpus");

  BleuBreakdown out;
  for (size_t i = 0; i < hypotheses.size(); ++i) {
    const auto hyp = detail::tokenize_13a(hypotheses[i]);
    const auto ref = detail::tokenize_13a(references[i]);
    out.hyp_len += hyp.size();
    out.ref_len += ref.size();
    for (size_t n = 1; n <= 4; ++n) {
      std::unordered_map<std::string, size_t> hc, rc;
      detail::count_ngrams(hyp, n, hc);
      detail::count_ngrams(ref, n, rc);
      out.total[n - 1] += hyp.size() >= n ? hyp.size() - n + 1 : 0;
      out.correct[n - 1] += detail::clipped_matches(hc, rc);
    }
  }

  if (out.hyp_len == 0) return out;
  out.brevity_penalty =
      out.hyp_len < out.ref_len
          ? std::exp(1.0 - static_cast<double>(out.ref_len) /
                               static_cast<double>(out.hyp_len))
          : 1.0;
  double log_sum = 0.0;
  double smooth = 1.0;
  for (size_t n = 0; n < 4; ++n) {
    double p;
    if (out.total[n] == 0) return out;  // score stays 0
    if (out.correct[n] == 0) {
      if (!smoothing) return out;
      smooth *= 2.0;
      p = 1.0 / (smooth * static_cast<double>(out.total[n]));
    } else {
      p = static_cast<double>(out.correct[n]) /
          static_cast<double>(out.total[n]);
    }
    out.precisions[n] = p;
    log_sum += std::log(p);
  }
  out.score = 100.0 * out.brevity_penalty * std::exp(log_sum / 4.0);
  return out;
}

inline double bleu(const std::vector<std::string>& hypotheses,
                   const std::vector<std::string>& references,
                   bool smoothing = true) {
  return bleu_breakdown(hypotheses, references, smoothing).score;
}

// ---------------------------------------------------------------------------
// chrF
// ---------------------------------------------------------------------------

// Character n-gram F-score, n = 1..6, beta = 2 (recall weighted). Whitespace
// is removed before n-gram extraction; statistics are pooled over the corpus,
// precision and recall are averaged over the orders with any mass, and a
// single F-score is computed from the averages.
inline double chrf(const std::vector<std::string>& hypotheses,
                   const std::vector<std::string>& references) {
  if (hypotheses.size() != references.size())
    throw ContractError("chrf: " + std::to_string(hypotheses.size()) +
                        " hypotheses vs " + std::to_string(references.size()) +
                        " references");
  if (hypotheses.empty()) throw ContractError("chrf: empty corpus");
  constexpr size_t kOrder = 6;
  constexpr double kBeta = 2.0;

  std::array<size_t, kOrder> match{}, hyp_total{}, ref_total{};
  auto strip_ws = [](const std::string& s) {
    std::string out;
    for (char c : s)
      if (c != ' ' && c != '\t' && c != '\n' && c != '\r') out += c;
    return out;
  };
  for (size_t i = 0; i < hypotheses.size(); ++i) {
    const auto hyp = detail::utf8_codepoints(strip_ws(hypotheses[i]));
    const auto ref = detail::utf8_codepoints(strip_ws(references[i]));
    for (size_t n = 1; n <= kOrder; ++n) {
      std::unordered_map<std::string, size_t> hc, rc;
      detail::count_ngrams(hyp, n, hc);
      detail::count_ngrams(ref, n, rc);
      match[n - 1] += detail::clipped_matches(hc, rc);
      hyp_total[n - 1] += hyp.size() >= n ? hyp.size() - n + 1 : 0;
      ref_total[n - 1] += ref.size() >= n ? ref.size() - n + 1 : 0;
    }
  }

  double precision = 0.0, recall = 0.0;
  size_t effective = 0;
  for (size_t n = 0; n < kOrder; ++n) {
    if (hyp_total[n] + ref_total[n] == 0) continue;
    ++effective;
    if (hyp_total[n] > 0)
      precision += static_cast<double>(match[n]) /
                   static_cast<double>(hyp_total[n]);
    if (ref_total[n] > 0)
      recall +=
          static_cast<double>(match[n]) / static_cast<double>(ref_total[n]);
  }
  if (effective == 0) return 0.0;
  precision /= static_cast<double>(effective);
  recall /= static_cast<double>(effective);
  const double denom = kBeta * kBeta * precision + recall;
  if (denom == 0.0) return 0.0;
  return 100.0 * (1.0 + kBeta * kBeta) * precision * recall / denom;
}

// ---------------------------------------------------------------------------
// External neural scorers
// ---------------------------------------------------------------------------

struct ExternalScoreResult {
  std::string scorer;
  std::vector<double> segment_scores;
  double mean = 0.0;
  bool ok = false;
  std::string error;  // set when the endpoint failed; rendered as absent
};

inline ExternalScoreResult score_external(
    const std::vector<std::string>& hypotheses,
    const std::vector<std::string>& sources,
    const std::optional<std::vector<std::string>>& references,
    ScorerClient& scorer) {
  if (hypotheses.size() != sources.size())
    throw ContractError("score_external: hypothesis/source count mismatch");
  if (references && references->size() != hypotheses.size())
    throw ContractError("score_external: reference count mismatch");
  if (scorer.needs_references() && !references)
    throw ContractError("scorer " + scorer.name() +
                        " is reference-based but no references were given");
  ExternalScoreResult out;
  out.scorer = scorer.name();
  try {
    out.segment_scores = scorer.score(sources, hypotheses, references);
    double sum = 0.0;
    for (double s : out.segment_scores) sum += s;
    out.mean = out.segment_scores.empty()
                   ? 0.0
                   : sum / static_cast<double>(out.segment_scores.size());
    out.ok = true;
  } catch (const ProtocolError& e) {
    out.ok = false;
    out.error = e.what();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Leaderboard rendering
// ---------------------------------------------------------------------------

struct MetricReport {
  std::string system;
  // direction ("en->it" / "it->en") -> metric name -> score
  std::map<std::string, std::map<std::string, std::optional<double>>> scores;
};

inline bool metric_higher_is_better(const std::string& metric) {
  return !(metric == "metricx" || metric == "qemetricx");
}

struct RenderedReport {
  std::string tsv;
  std::string text;
};

// System x metric x direction grid. Systems sort lexicographically with the
// DIETA variants grouped at the bottom; each metric header carries its
// polarity arrow; absent scores render as "-", never as zero.
inline RenderedReport render_report(std::vector<MetricReport> reports) {
  if (reports.empty()) throw ContractError("render_report: no reports");
  std::sort(reports.begin(), reports.end(),
            [](const MetricReport& a, const MetricReport& b) {
              const bool da = a.system.rfind("DIETA", 0) == 0;
              const bool db = b.system.rfind("DIETA", 0) == 0;
              if (da != db) return !da;
              return a.system < b.system;
            });

  std::vector<std::string> metrics;
  std::vector<std::string> directions;
  for (const auto& r : reports)
    for (const auto& [dir, by_metric] : r.scores) {
      if (std::find(directions.begin(), directions.end(), dir) ==
          directions.end())
        directions.push_back(dir);
      for (const auto& [metric, _] : by_metric)
        if (std::find(metrics.begin(), metrics.end(), metric) == metrics.end())
          metrics.push_back(metric);
    }
  std::sort(metrics.begin(), metrics.end());
  std::sort(directions.begin(), directions.end());

  std::vector<std::string> headers{"system"};
  for (const auto& metric : metrics)
    for (const auto& dir : directions)
      headers.push_back(metric +
                        (metric_higher_is_better(metric) ? "(↑)" : "(↓)") +
                        " " + dir);

  std::vector<std::vector<std::string>> rows;
  for (const auto& r : reports) {
    std::vector<std::string> row{r.system};
    for (const auto& metric : metrics)
      for (const auto& dir : directions) {
        std::optional<double> v;
        auto dit = r.scores.find(dir);
        if (dit != r.scores.end()) {
          auto mit = dit->second.find(metric);
          if (mit != dit->second.end()) v = mit->second;
        }
        if (v) {
          std::ostringstream os;
          os << std::fixed << std::setprecision(4) << *v;
          row.push_back(os.str());
        } else {
          row.push_back("-");
        }
      }
    rows.push_back(std::move(row));
  }

  RenderedReport out;
  {
    std::ostringstream tsv;
    for (size_t c = 0; c < headers.size(); ++c)
      tsv << (c ? "\t" : "") << headers[c];
    tsv << "\n";
    for (const auto& row : rows) {
      for (size_t c = 0; c < row.size(); ++c) tsv << (c ? "\t" : "") << row[c];
      tsv << "\n";
    }
    out.tsv = tsv.str();
  }
  {
    std::vector<size_t> width(headers.size());
    auto display_width = [](const std::string& s) {
      // arrows are 3 UTF-8 bytes but render one column wide
      size_t w = 0;
      for (size_t i = 0; i < s.size();) {
        const unsigned char c = static_cast<unsigned char>(s[i]);
        i += (c & 0xE0) == 0xC0 ? 2 : (c & 0xF0) == 0xE0 ? 3
             : (c & 0xF8) == 0xF0                        ? 4
                                                         : 1;
        ++w;
      }
      return w;
    };
    for (size_t c = 0; c < headers.size(); ++c)
      width[c] = display_width(headers[c]);
    for (const auto& row : rows)
      for (size_t c = 0; c < row.size(); ++c)
        width[c] = std::max(width[c], display_width(row[c]));
    std::ostringstream text;
    auto emit_row = [&](const std::vector<std::string>& row) {
      for (size_t c = 0; c < row.size(); ++c) {
        text << (c ? "  " : "") << row[c];
        for (size_t pad = display_width(row[c]); pad < width[c]; ++pad)
          text << ' ';
      }
      text << "\n";
    };
    emit_row(headers);
    for (const auto& row : rows) emit_row(row);
    out.text = text.str();
  }
  return out;
}

}  // namespace dieta
