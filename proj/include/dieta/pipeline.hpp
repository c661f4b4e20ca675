#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "dieta/clients.hpp"
#include "dieta/common.hpp"

namespace dieta {

// ---------------------------------------------------------------------------
// Domain types
// ---------------------------------------------------------------------------

struct SentencePair {
  std::string english;
  std::string italian;
  std::string source_tag;

  bool operator==(const SentencePair&) const = default;
};

inline void validate_pair(const SentencePair& p, size_t line_no = 0) {
  auto ctx = [&]() {
    return line_no ? " (line " + std::to_string(line_no) + ")" : std::string();
  };
  if (trim_ws(p.english).empty() || trim_ws(p.italian).empty())
    throw InputError("sentence pair with an empty side" + ctx());
  if (p.english.find('\n') != std::string::npos ||
      p.italian.find('\n') != std::string::npos)
    throw InputError("sentence pair with an interior newline" + ctx());
}

enum class Direction { EnToIt, ItToEn };

inline std::string to_string(Direction d) {
  return d == Direction::EnToIt ? "en->it" : "it->en";
}

struct FormattedSample {
  std::string text;
  Direction direction;

  bool operator==(const FormattedSample&) const = default;
};

struct JudgeVerdict {
  bool keep = false;
  std::string raw_reply;
};

// ---------------------------------------------------------------------------
// Deduplication
// ---------------------------------------------------------------------------

struct DedupResult {
  std::vector<SentencePair> kept;
  size_t duplicates_removed = 0;
};

// First occurrence wins; the key is exact byte equality of (english, italian)
// after newline trimming. No case folding, no whitespace normalization.
inline DedupResult dedup(const std::vector<SentencePair>& pairs) {
  DedupResult out;
  std::unordered_set<std::string> seen;
  for (const SentencePair& p : pairs) {
    // '\n' cannot occur inside a side, so it is a collision-free separator.
    std::string key = trim_trailing_newline(p.english) + "\n" +
                      trim_trailing_newline(p.italian);
    if (seen.insert(std::move(key)).second) {
      out.kept.push_back(p);
    } else {
      ++out.duplicates_removed;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Judge filtering
// ---------------------------------------------------------------------------

inline constexpr const char* kFilterInstruction =
    "Given the English and Italian sentences below, are they translations of "
    "each other? Answer with yes or no only.";

inline std::string build_filter_prompt(const SentencePair& pair) {
  std::string prompt = kFilterInstruction;
  prompt += "\nEnglish: " + trim_trailing_newline(pair.english);
  prompt += "\nItalian: " + trim_trailing_newline(pair.italian);
  return prompt;
}

enum class ReplyClass { Yes, No, Malformed };

// Lowercase, strip punctuation, look at the first token. Real judges drift
// from the yes/no contract, so anything else is handled upstream as
// malformed rather than silently treated as a no.
inline ReplyClass classify_reply(const std::string& raw) {
  std::string token;
  for (char c : raw) {
    const char lc =
        (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
    if (lc == ' ' || lc == '\t' || lc == '\n' || lc == '\r') {
      if (!token.empty()) break;
      continue;
    }
    const bool punct = std::ispunct(static_cast<unsigned char>(lc));
    if (!punct) token += lc;
  }
  if (token == "yes") return ReplyClass::Yes;
  if (token == "no") return ReplyClass::No;
  return ReplyClass::Malformed;
}

inline JudgeVerdict parse_verdict(const std::string& raw) {
  return JudgeVerdict{classify_reply(raw) == ReplyClass::Yes, raw};
}

struct Rejection {
  size_t index = 0;  // position in the input stream
  SentencePair pair;
  std::string reason;  // "no" or "malformed"
  std::string raw_reply;
};

struct FilterResult {
  std::vector<SentencePair> kept;
  std::vector<Rejection> rejections;
};

// Transport faults retry once and then abort with the pair position;
// malformed replies retry once and then reject the pair with a distinct flag
// so rejection statistics separate "no" from garbage.
inline FilterResult llm_filter(const std::vector<SentencePair>& pairs,
                               JudgeClient& judge, int backoff_ms = 50) {
  FilterResult out;
  for (size_t i = 0; i < pairs.size(); ++i) {
    const std::string prompt = build_filter_prompt(pairs[i]);
    std::string reply;
    try {
      reply = with_retry([&]() { return judge.ask(prompt); }, 1, backoff_ms);
    } catch (const ProtocolError& e) {
      throw ProtocolError("judge failed on pair " + std::to_string(i) + ": " +
                          e.what());
    }
    ReplyClass cls = classify_reply(reply);
    if (cls == ReplyClass::Malformed) {
      reply = with_retry([&]() { return judge.ask(prompt); }, 0, backoff_ms);
      cls = classify_reply(reply);
      if (cls == ReplyClass::Malformed) {
        out.rejections.push_back({i, pairs[i], "malformed", reply});
        continue;
      }
    }
    if (cls == ReplyClass::Yes) {
      out.kept.push_back(pairs[i]);
    } else {
      out.rejections.push_back({i, pairs[i], "no", reply});
    }
  }
  return out;
}

inline void write_rejection_log(const std::string& path,
                                const std::vector<Rejection>& rejections) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write rejection log " + path);
  for (const Rejection& r : rejections)
    f << r.reason << "\t" << r.pair.english << "\t" << r.pair.italian << "\t"
      << r.raw_reply << "\n";
}

// ---------------------------------------------------------------------------
// Bidirectional templating
// ---------------------------------------------------------------------------

inline std::string format_en_to_it(const SentencePair& p) {
  return "ENG: " + p.english + " IT: " + p.italian;
}

inline std::string format_it_to_en(const SentencePair& p) {
  return "IT: " + p.italian + " ENG: " + p.english;
}

// Each pair emits exactly two samples, first the EN->IT rendering and then
// the IT->EN one, so N pairs always become 2N samples.
inline std::vector<FormattedSample> format_bidirectional(
    const std::vector<SentencePair>& pairs) {
  std::vector<FormattedSample> out;
  out.reserve(pairs.size() * 2);
  for (const SentencePair& p : pairs) {
    out.push_back({format_en_to_it(p), Direction::EnToIt});
    out.push_back({format_it_to_en(p), Direction::ItToEn});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shuffling
// ---------------------------------------------------------------------------

// Deterministic permutation over an index of the samples (see common.hpp for
// the documented generator); the multiset of samples is preserved.
template <typename T>
std::vector<T> shuffle(const std::vector<T>& items, uint64_t seed) {
  std::vector<size_t> idx = shuffled_indices(items.size(), seed);
  std::vector<T> out;
  out.reserve(items.size());
  for (size_t i : idx) out.push_back(items[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Back-translation
// ---------------------------------------------------------------------------

struct BacktranslateResult {
  std::vector<SentencePair> pairs;
  size_t skipped = 0;
};

// Monolingual lines are the gold target side; the MT output becomes the
// synthetic opposite side. `dir` is the MT client's translation direction,
// so it-en consumes Italian lines and synthesizes English.
inline BacktranslateResult backtranslate(const std::vector<std::string>& lines,
                                         MtClient& mt, MtDirection dir,
                                         int backoff_ms = 50) {
  BacktranslateResult out;
  for (const std::string& raw : lines) {
    const std::string y = trim_trailing_newline(raw);
    if (y.empty()) continue;
    std::string x_hat;
    try {
      x_hat = with_retry([&]() { return mt.translate(y, dir); }, 1, backoff_ms);
    } catch (const ProtocolError&) {
      ++out.skipped;
      continue;
    }
    SentencePair p;
    p.source_tag = "synthetic";
    if (dir == MtDirection::ItEn) {
      p.english = x_hat;
      p.italian = y;
    } else {
      p.english = y;
      p.italian = x_hat;
    }
    out.pairs.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus file I/O
// ---------------------------------------------------------------------------

inline std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(f, line)) out.push_back(trim_trailing_newline(line));
  return out;
}

inline void write_lines(const std::string& path,
                        const std::vector<std::string>& lines) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  for (const std::string& l : lines) f << l << "\n";
  if (!f) throw IoError("failed writing " + path);
}

// Two aligned one-sentence-per-line files.
inline std::vector<SentencePair> read_aligned_corpus(
    const std::string& english_path, const std::string& italian_path,
    const std::string& tag = "") {
  auto en = read_lines(english_path);
  auto it = read_lines(italian_path);
  if (en.size() != it.size())
    throw InputError("aligned corpus files disagree: " + english_path +
                     " has " + std::to_string(en.size()) + " lines, " +
                     italian_path + " has " + std::to_string(it.size()));
  std::vector<SentencePair> out;
  out.reserve(en.size());
  for (size_t i = 0; i < en.size(); ++i) {
    SentencePair p{en[i], it[i], tag};
    validate_pair(p, i + 1);
    out.push_back(std::move(p));
  }
  return out;
}

// Single TSV with columns english<TAB>italian[<TAB>tag].
inline std::vector<SentencePair> read_tsv_corpus(const std::string& path) {
  std::vector<SentencePair> out;
  auto lines = read_lines(path);
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const size_t t1 = lines[i].find('\t');
    if (t1 == std::string::npos)
      throw InputError("corpus TSV " + path + " line " + std::to_string(i + 1) +
                       ": expected english<TAB>italian");
    const size_t t2 = lines[i].find('\t', t1 + 1);
    SentencePair p;
    p.english = lines[i].substr(0, t1);
    if (t2 == std::string::npos) {
      p.italian = lines[i].substr(t1 + 1);
    } else {
      p.italian = lines[i].substr(t1 + 1, t2 - t1 - 1);
      p.source_tag = lines[i].substr(t2 + 1);
    }
    validate_pair(p, i + 1);
    out.push_back(std::move(p));
  }
  return out;
}

inline void write_tsv_corpus(const std::string& path,
                             const std::vector<SentencePair>& pairs) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  for (const SentencePair& p : pairs)
    f << p.english << "\t" << p.italian << "\t" << p.source_tag << "\n";
  if (!f) throw IoError("failed writing " + path);
}

// ---------------------------------------------------------------------------
// Composed preparation
// ---------------------------------------------------------------------------

struct PrepareStats {
  size_t input_pairs = 0;
  size_t duplicates_removed = 0;
  size_t rejected_no = 0;
  size_t rejected_malformed = 0;
  size_t output_samples = 0;

  std::string to_tsv() const {
    std::ostringstream os;
    os << "input_pairs\t" << input_pairs << "\n"
       << "duplicates_removed\t" << duplicates_removed << "\n"
       << "rejected_no\t" << rejected_no << "\n"
       << "rejected_malformed\t" << rejected_malformed << "\n"
       << "output_samples\t" << output_samples << "\n";
    return os.str();
  }
};

struct PrepareResult {
  std::vector<FormattedSample> samples;
  std::vector<Rejection> rejections;
  PrepareStats stats;
};

// dedup -> (optional) judge filter -> bidirectional templating -> shuffle.
inline PrepareResult prepare_corpus(const std::vector<SentencePair>& pairs,
                                    JudgeClient* judge, uint64_t seed) {
  PrepareResult out;
  out.stats.input_pairs = pairs.size();
  DedupResult dd = dedup(pairs);
  out.stats.duplicates_removed = dd.duplicates_removed;
  std::vector<SentencePair> surviving = std::move(dd.kept);
  if (judge) {
    FilterResult fr = llm_filter(surviving, *judge);
    surviving = std::move(fr.kept);
    for (const Rejection& r : fr.rejections) {
      if (r.reason == "no")
        ++out.stats.rejected_no;
      else
        ++out.stats.rejected_malformed;
    }
    out.rejections = std::move(fr.rejections);
  }
  out.samples = shuffle(format_bidirectional(surviving), seed);
  out.stats.output_samples = out.samples.size();
  return out;
}

}  // namespace dieta
