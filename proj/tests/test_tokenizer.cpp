#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "dieta/common.hpp"
#include "dieta/tokenizer.hpp"

using namespace dieta;

namespace {

std::vector<std::string> toy_corpus() {
  return {
      "ENG: the cat sat on the mat IT: il gatto era sul tappeto",
      "IT: la città è bella ENG: the city is beautiful",
      "ENG: seven three zero IT: sette tre zero",
      "perché non parli più con me",
      "lo studente legge il libro ogni sera",
  };
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("first merge on a repeated-letter corpus is the repeated pair") {
  auto v = train_bpe({"aaaa aaaa"}, 256 + 3 + 1);
  REQUIRE(v.merges.size() == 1);
  const auto& m = v.merges[0];
  CHECK(v.pieces[size_t(m.left)] == "a");
  CHECK(v.pieces[size_t(m.right)] == "a");
  CHECK(v.pieces[size_t(m.result)] == "aa");
}

TEST_CASE("vocab never exceeds the requested size") {
  auto v = train_bpe(toy_corpus(), 300);
  CHECK(v.size() <= 300);
  auto big = train_bpe({"ab ab"}, 4096);
  CHECK(big.size() <= 4096);  // runs out of repeating pairs long before 4096
  CHECK(big.size() < 300);
}

TEST_CASE("retraining is bit-identical") {
  auto a = train_bpe(toy_corpus(), 400);
  auto b = train_bpe(toy_corpus(), 400);
  CHECK(a.pieces == b.pieces);
  CHECK(a.ranks == b.ranks);
  REQUIRE(a.merges.size() == b.merges.size());
  for (size_t i = 0; i < a.merges.size(); ++i) {
    CHECK(a.merges[i].left == b.merges[i].left);
    CHECK(a.merges[i].right == b.merges[i].right);
  }
}

TEST_CASE("empty corpus and undersized vocab are rejected") {
  CHECK_THROWS_AS(train_bpe({}, 400), InputError);
  CHECK_THROWS_AS(train_bpe({"", "", "\n"}, 400), InputError);
  CHECK_THROWS_AS(train_bpe({"hello"}, 259), ConfigError);
}

TEST_CASE("encode of empty text and decode of empty ids") {
  auto v = train_bpe(toy_corpus(), 400);
  CHECK(v.encode("").empty());
  CHECK(v.decode(std::vector<int32_t>{}) == "");
}

TEST_CASE("round-trip identity on UTF-8 including emoji and accents") {
  auto v = train_bpe(toy_corpus(), 400);
  const std::vector<std::string> samples = {
      "ENG: Hello IT: Ciao",
      "perché la città è già così",
      "E = mc² 🙂 naïve façade",
      "tabs\tand\ttabs",
      "double  spaces   everywhere",
      " leading and trailing ",
      "日本語のテキスト",
  };
  for (const auto& s : samples) {
    auto ids = v.encode(s);
    CHECK(v.decode(ids) == s);
  }

  // Random byte soups assembled from UTF-8 fragments.
  Xorshift64Star rng(1234);
  const std::vector<std::string> atoms = {"a", "è", "ż", " ",  "🙂",
                                          "ß", "q", "ü", "\t", "€"};
  for (int trial = 0; trial < 200; ++trial) {
    std::string s;
    const size_t len = 1 + rng.next() % 12;
    for (size_t i = 0; i < len; ++i) s += atoms[rng.next() % atoms.size()];
    CHECK(v.decode(v.encode(s)) == s);
  }
}

TEST_CASE("encode is prefix-stable at space boundaries") {
  // 1000 synthetic sentences; any prefix ending at a word boundary encodes to
  // a prefix of the full encoding.
  const std::vector<std::string> words = {"il",    "gatto", "sette", "zero",
                                          "city",  "the",   "tre",   "ENG:",
                                          "IT:",   "mat",   "cat",   "su"};
  Xorshift64Star rng(99);
  std::vector<std::string> sentences;
  for (int i = 0; i < 1000; ++i) {
    std::string s;
    const size_t len = 2 + rng.next() % 8;
    for (size_t w = 0; w < len; ++w) {
      if (w) s += ' ';
      s += words[rng.next() % words.size()];
    }
    sentences.push_back(s);
  }
  auto v = train_bpe(sentences, 600);
  for (const auto& s : sentences) {
    const size_t cut = s.find(' ', s.size() / 2);
    if (cut == std::string::npos) continue;
    auto full = v.encode(s);
    auto prefix = v.encode(s.substr(0, cut));
    REQUIRE(prefix.size() <= full.size());
    for (size_t i = 0; i < prefix.size(); ++i) CHECK(prefix[i] == full[i]);
  }
}

TEST_CASE("specials are never produced by encoding plain text") {
  auto v = train_bpe(toy_corpus(), 400);
  for (const auto& s : toy_corpus())
    for (int32_t id : v.encode(s)) CHECK(id >= int32_t(Vocab::kNumSpecials));
}

TEST_CASE("decode strips specials; PAD-only decodes to empty") {
  auto v = train_bpe(toy_corpus(), 400);
  CHECK(v.decode(std::vector<int32_t>{Vocab::kPadId, Vocab::kPadId}) == "");
  auto ids = v.encode("ciao");
  ids.push_back(Vocab::kEosId);
  CHECK(v.decode(ids) == "ciao");
  CHECK_THROWS_AS(v.decode(std::vector<int32_t>{int32_t(v.size())}),
                  IndexError);
}

TEST_CASE("vocab file round-trips exactly") {
  auto v = train_bpe(toy_corpus(), 400);
  const std::string path = temp_path("dieta_vocab_test.txt");
  v.save(path);
  auto w = Vocab::load(path);
  CHECK(w.pieces == v.pieces);
  CHECK(w.ranks == v.ranks);
  CHECK(w.declared_size == v.declared_size);
  CHECK(w.byte_fallback == v.byte_fallback);
  for (const auto& s : toy_corpus()) {
    CHECK(w.encode(s) == v.encode(s));
    CHECK(w.decode(w.encode(s)) == s);
  }
  std::remove(path.c_str());
}

TEST_CASE("byte fallback covers bytes absent from the training corpus") {
  auto v = train_bpe({"plain ascii only"}, 400);
  const std::string exotic = "żółć 🙂";
  CHECK(v.decode(v.encode(exotic)) == exotic);
}

TEST_CASE("without byte fallback unseen bytes map to UNK") {
  auto v = train_bpe({"abc abc"}, 300, false);
  auto ids = v.encode("abz");
  REQUIRE(!ids.empty());
  bool has_unk = false;
  for (int32_t id : ids) has_unk = has_unk || id == Vocab::kUnkId;
  CHECK(has_unk);
}
