#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "dieta/common.hpp"

namespace dieta {

namespace detail {

// Pre-tokenization: the text is split before every 0x20 byte, so every chunk
// after the first carries its single leading space. Concatenating the chunks
// restores the input byte for byte, which is what makes encode/decode an
// exact round trip.
inline std::vector<std::string> space_chunks(std::string_view text) {
  std::vector<std::string> chunks;
  size_t start = 0;
  for (size_t i = 0; i < text.size(); ++i) {
    if (text[i] == ' ' && i > start) {
      chunks.emplace_back(text.substr(start, i - start));
      start = i;
    }
  }
  if (start < text.size()) chunks.emplace_back(text.substr(start));
  return chunks;
}

inline bool utf8_valid(std::string_view s) {
  size_t i = 0;
  while (i < s.size()) {
    const unsigned char c = static_cast<unsigned char>(s[i]);
    size_t extra;
    if (c < 0x80) extra = 0;
    else if ((c & 0xE0) == 0xC0) extra = 1;
    else if ((c & 0xF0) == 0xE0) extra = 2;
    else if ((c & 0xF8) == 0xF0) extra = 3;
    else return false;
    if (i + extra >= s.size()) return false;
    for (size_t k = 1; k <= extra; ++k)
      if ((static_cast<unsigned char>(s[i + k]) & 0xC0) != 0x80) return false;
    i += extra + 1;
  }
  return true;
}

// Pieces are stored one per line, so control bytes, backslashes, tabs and
// invalid UTF-8 fragments are \xHH-escaped. Valid printable UTF-8 stays raw.
inline std::string escape_piece(std::string_view piece) {
  const bool valid = utf8_valid(piece);
  std::string out;
  static const char* hex = "0123456789abcdef";
  for (unsigned char c : piece) {
    if (c == '\\') out += "\\\\";
    else if (c == '\t') out += "\\t";
    else if (c == '\n') out += "\\n";
    else if (c == '\r') out += "\\r";
    else if (c < 0x20 || c == 0x7f || (c >= 0x80 && !valid)) {
      out += "\\x";
      out += hex[c >> 4];
      out += hex[c & 0xf];
    } else {
      out += static_cast<char>(c);
    }
  }
  return out;
}

inline std::string unescape_piece(std::string_view s) {
  std::string out;
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '\\') {
      out += s[i];
      continue;
    }
    if (i + 1 >= s.size()) throw IoError("vocab file: dangling escape");
    const char c = s[++i];
    if (c == '\\') out += '\\';
    else if (c == 't') out += '\t';
    else if (c == 'n') out += '\n';
    else if (c == 'r') out += '\r';
    else if (c == 'x') {
      if (i + 2 >= s.size()) throw IoError("vocab file: truncated \\x escape");
      auto nib = [](char h) -> int {
        if (h >= '0' && h <= '9') return h - '0';
        if (h >= 'a' && h <= 'f') return h - 'a' + 10;
        if (h >= 'A' && h <= 'F') return h - 'A' + 10;
        throw IoError("vocab file: bad hex digit in escape");
      };
      out += static_cast<char>(nib(s[i + 1]) * 16 + nib(s[i + 2]));
      i += 2;
    } else {
      throw IoError("vocab file: unknown escape sequence");
    }
  }
  return out;
}

inline uint64_t pair_key(int32_t a, int32_t b) {
  return (static_cast<uint64_t>(static_cast<uint32_t>(a)) << 32) |
         static_cast<uint32_t>(b);
}

}  // namespace detail

// Subword vocabulary with byte-pair merges. Ids are laid out as
// specials < byte pieces < merged pieces; encode can therefore never emit a
// special, and with byte fallback every byte sequence is encodable.
struct Vocab {
  static constexpr int32_t kPadId = 0;
  static constexpr int32_t kEosId = 1;
  static constexpr int32_t kUnkId = 2;
  static constexpr size_t kNumSpecials = 3;

  struct Merge {
    int32_t left;
    int32_t right;
    int32_t result;
  };

  std::vector<std::string> pieces;  // id -> bytes ("<pad>" etc. for specials)
  std::vector<int32_t> ranks;       // id -> merge rank, -1 for non-merges
  std::vector<Merge> merges;        // rank order
  std::unordered_map<uint64_t, int32_t> merge_rank_by_pair;
  std::array<int32_t, 256> byte_to_id{};
  size_t declared_size = 0;
  bool byte_fallback = true;

  size_t size() const { return pieces.size(); }

  bool is_special(int32_t id) const {
    return id >= 0 && static_cast<size_t>(id) < kNumSpecials;
  }

  std::vector<int32_t> encode(std::string_view text) const {
    std::vector<int32_t> out;
    if (text.empty()) return out;
    for (const std::string& chunk : detail::space_chunks(text)) {
      std::vector<int32_t> symbols;
      symbols.reserve(chunk.size());
      for (unsigned char c : chunk) {
        const int32_t id = byte_to_id[c];
        symbols.push_back(id >= 0 ? id : kUnkId);
      }
      // Greedy merge application: repeatedly take the lowest-ranked adjacent
      // pair and merge its occurrences left to right, exactly as in training.
      while (symbols.size() > 1) {
        int32_t best_rank = -1;
        for (size_t i = 0; i + 1 < symbols.size(); ++i) {
          auto it = merge_rank_by_pair.find(
              detail::pair_key(symbols[i], symbols[i + 1]));
          if (it == merge_rank_by_pair.end()) continue;
          if (best_rank < 0 || it->second < best_rank) best_rank = it->second;
        }
        if (best_rank < 0) break;
        const Merge& m = merges[static_cast<size_t>(best_rank)];
        std::vector<int32_t> next;
        next.reserve(symbols.size());
        size_t i = 0;
        while (i < symbols.size()) {
          if (i + 1 < symbols.size() && symbols[i] == m.left &&
              symbols[i + 1] == m.right) {
            next.push_back(m.result);
            i += 2;
          } else {
            next.push_back(symbols[i]);
            ++i;
          }
        }
        symbols.swap(next);
      }
      out.insert(out.end(), symbols.begin(), symbols.end());
    }
    return out;
  }

  std::string decode(std::span<const int32_t> ids) const {
    std::string out;
    for (int32_t id : ids) {
      if (id < 0 || static_cast<size_t>(id) >= pieces.size())
        throw IndexError("decode: unknown token id " + std::to_string(id));
      if (is_special(id)) continue;
      out += pieces[static_cast<size_t>(id)];
    }
    return out;
  }

  // Lines are "piece<TAB>rank" in id order; merged pieces carry two extra
  // columns with the ids of the merged pair so the merge table reloads
  // without ambiguity. The header declares the special ids.
  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write vocab file " + path);
    f << "#dieta-vocab v1\tsize=" << declared_size << "\tpad=" << kPadId
      << "\teos=" << kEosId << "\tunk=" << kUnkId
      << "\tbyte_fallback=" << (byte_fallback ? 1 : 0) << "\n";
    for (size_t id = 0; id < pieces.size(); ++id) {
      f << detail::escape_piece(pieces[id]) << "\t" << ranks[id];
      if (ranks[id] >= 0) {
        const Merge& m = merges[static_cast<size_t>(ranks[id])];
        f << "\t" << m.left << "\t" << m.right;
      }
      f << "\n";
    }
    if (!f) throw IoError("failed writing vocab file " + path);
  }

  static Vocab load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open vocab file " + path);
    std::string line;
    if (!std::getline(f, line) || line.rfind("#dieta-vocab v1", 0) != 0)
      throw IoError("vocab file " + path + ": missing header");
    Vocab v;
    v.byte_to_id.fill(-1);
    {
      size_t pos = line.find("size=");
      if (pos != std::string::npos)
        v.declared_size = std::stoul(line.substr(pos + 5));
      pos = line.find("byte_fallback=");
      if (pos != std::string::npos)
        v.byte_fallback = line[pos + 14] == '1';
    }
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cols;
      size_t start = 0;
      for (size_t i = 0; i <= line.size(); ++i) {
        if (i == line.size() || line[i] == '\t') {
          cols.push_back(line.substr(start, i - start));
          start = i + 1;
        }
      }
      if (cols.size() < 2) throw IoError("vocab file: malformed line");
      const int32_t id = static_cast<int32_t>(v.pieces.size());
      v.pieces.push_back(detail::unescape_piece(cols[0]));
      const int32_t rank = std::stoi(cols[1]);
      v.ranks.push_back(rank);
      if (rank >= 0) {
        if (cols.size() < 4)
          throw IoError("vocab file: merged piece missing pair columns");
        const int32_t left = std::stoi(cols[2]);
        const int32_t right = std::stoi(cols[3]);
        if (static_cast<size_t>(rank) != v.merges.size())
          throw IoError("vocab file: merge ranks out of order");
        v.merges.push_back(Merge{left, right, id});
        v.merge_rank_by_pair[detail::pair_key(left, right)] = rank;
      } else if (id >= static_cast<int32_t>(kNumSpecials) &&
                 v.pieces.back().size() == 1) {
        v.byte_to_id[static_cast<unsigned char>(v.pieces.back()[0])] = id;
      }
    }
    if (v.pieces.size() < kNumSpecials)
      throw IoError("vocab file: missing special pieces");
    return v;
  }
};

// Greedy highest-frequency pair merging over space-delimited chunks.
// Deterministic: ties break to the lexicographically smallest
// (left piece, right piece); training stops once the vocabulary is full or no
// adjacent pair occurs twice. A candidate merge whose concatenation collides
// with an existing piece string is skipped so id<->piece stays a bijection.
inline Vocab train_bpe(const std::vector<std::string>& corpus,
                       size_t vocab_size, bool byte_fallback = true) {
  Vocab v;
  v.declared_size = vocab_size;
  v.byte_fallback = byte_fallback;
  v.byte_to_id.fill(-1);
  v.pieces = {"<pad>", "</s>", "<unk>"};
  v.ranks = {-1, -1, -1};

  std::map<std::string, uint64_t> chunk_freq;
  bool any_content = false;
  for (const std::string& raw : corpus) {
    const std::string line = trim_trailing_newline(raw);
    if (line.empty()) continue;
    any_content = true;
    for (const std::string& c : detail::space_chunks(line)) ++chunk_freq[c];
  }
  if (!any_content) throw InputError("train_bpe: empty corpus");

  if (byte_fallback) {
    if (vocab_size <= 256 + Vocab::kNumSpecials)
      throw ConfigError(
          "train_bpe: vocab_size must exceed 256 + specials with byte "
          "fallback, got " +
          std::to_string(vocab_size));
    for (int b = 0; b < 256; ++b) {
      v.byte_to_id[b] = static_cast<int32_t>(v.pieces.size());
      v.pieces.push_back(std::string(1, static_cast<char>(b)));
      v.ranks.push_back(-1);
    }
  } else {
    bool seen[256] = {};
    for (const auto& [chunk, _] : chunk_freq)
      for (unsigned char c : chunk) seen[c] = true;
    for (int b = 0; b < 256; ++b) {
      if (!seen[b]) continue;
      v.byte_to_id[b] = static_cast<int32_t>(v.pieces.size());
      v.pieces.push_back(std::string(1, static_cast<char>(b)));
      v.ranks.push_back(-1);
    }
    if (v.pieces.size() >= vocab_size)
      throw ConfigError("train_bpe: vocab_size too small for base alphabet");
  }

  // Unique chunks as symbol sequences, visited in deterministic (map) order.
  std::vector<std::vector<int32_t>> seqs;
  std::vector<uint64_t> freqs;
  for (const auto& [chunk, n] : chunk_freq) {
    std::vector<int32_t> s;
    s.reserve(chunk.size());
    for (unsigned char c : chunk) s.push_back(v.byte_to_id[c]);
    seqs.push_back(std::move(s));
    freqs.push_back(n);
  }

  std::set<std::string> piece_strings(v.pieces.begin(), v.pieces.end());
  std::set<std::pair<int32_t, int32_t>> banned;

  while (v.pieces.size() < vocab_size) {
    std::map<std::pair<int32_t, int32_t>, uint64_t> pair_count;
    for (size_t s = 0; s < seqs.size(); ++s)
      for (size_t i = 0; i + 1 < seqs[s].size(); ++i)
        pair_count[{seqs[s][i], seqs[s][i + 1]}] += freqs[s];

    std::pair<int32_t, int32_t> best{-1, -1};
    uint64_t best_count = 1;  // a pair must repeat to be merged
    for (const auto& [pair, count] : pair_count) {
      if (banned.count(pair)) continue;
      if (count < best_count) continue;
      if (count > best_count) {
        best = pair;
        best_count = count;
        continue;
      }
      if (best.first < 0) {
        best = pair;
        continue;
      }
      const auto& lp = v.pieces[static_cast<size_t>(pair.first)];
      const auto& rp = v.pieces[static_cast<size_t>(pair.second)];
      const auto& bl = v.pieces[static_cast<size_t>(best.first)];
      const auto& br = v.pieces[static_cast<size_t>(best.second)];
      if (std::tie(lp, rp) < std::tie(bl, br)) best = pair;
    }
    if (best.first < 0) break;

    const std::string merged = v.pieces[static_cast<size_t>(best.first)] +
                               v.pieces[static_cast<size_t>(best.second)];
    if (piece_strings.count(merged)) {
      banned.insert(best);
      continue;
    }

    const int32_t new_id = static_cast<int32_t>(v.pieces.size());
    const int32_t rank = static_cast<int32_t>(v.merges.size());
    v.pieces.push_back(merged);
    v.ranks.push_back(rank);
    v.merges.push_back(Vocab::Merge{best.first, best.second, new_id});
    v.merge_rank_by_pair[detail::pair_key(best.first, best.second)] = rank;
    piece_strings.insert(merged);

    for (auto& s : seqs) {
      if (s.size() < 2) continue;
      std::vector<int32_t> next;
      next.reserve(s.size());
      size_t i = 0;
      while (i < s.size()) {
        if (i + 1 < s.size() && s[i] == best.first && s[i + 1] == best.second) {
          next.push_back(new_id);
          i += 2;
        } else {
          next.push_back(s[i]);
          ++i;
        }
      }
      s.swap(next);
    }
  }
  return v;
}

}  // namespace dieta
