#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <thread>

#include "dieta/http_clients.hpp"
#include "dieta/pipeline.hpp"
#include "oracles.hpp"

using namespace dieta;

namespace {

SentencePair sp(std::string en, std::string it, std::string tag = "") {
  return SentencePair{std::move(en), std::move(it), std::move(tag)};
}

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("dedup keeps first occurrences in order") {
  auto r = dedup({sp("a", "b"), sp("a", "b"), sp("c", "d")});
  REQUIRE(r.kept.size() == 2);
  CHECK(r.kept[0] == sp("a", "b"));
  CHECK(r.kept[1] == sp("c", "d"));
  CHECK(r.duplicates_removed == 1);
}

TEST_CASE("dedup is idempotent") {
  std::vector<SentencePair> pairs = {sp("x", "y"), sp("a", "b"), sp("x", "y"),
                                     sp("x", "z")};
  auto once = dedup(pairs);
  auto twice = dedup(once.kept);
  CHECK(once.kept == twice.kept);
  CHECK(twice.duplicates_removed == 0);
}

TEST_CASE("dedup removes exactly the planted duplicates") {
  std::vector<SentencePair> pairs;
  for (int i = 0; i < 7000; ++i)
    pairs.push_back(sp("en " + std::to_string(i), "it " + std::to_string(i)));
  // plant 3000 duplicates of existing pairs at deterministic positions
  Xorshift64Star rng(5);
  for (int i = 0; i < 3000; ++i) {
    const size_t pick = rng.next() % 7000;
    pairs.push_back(
        sp("en " + std::to_string(pick), "it " + std::to_string(pick)));
  }
  auto r = dedup(pairs);
  CHECK(r.kept.size() == 7000);
  CHECK(r.duplicates_removed == 3000);
}

TEST_CASE("dedup key is byte-exact, no case folding") {
  auto r = dedup({sp("Hello", "Ciao"), sp("hello", "ciao")});
  CHECK(r.kept.size() == 2);
}

TEST_CASE("filter prompt carries the verbatim instruction and raw sentences") {
  const auto pair = sp("A  strange   sentence.", "Una frase (strana)!");
  const std::string prompt = build_filter_prompt(pair);
  CHECK(prompt.find("Given the English and Italian sentences below, are they "
                    "translations of each other? Answer with yes or no "
                    "only.") != std::string::npos);
  CHECK(prompt.find("English: A  strange   sentence.") != std::string::npos);
  CHECK(prompt.find("Italian: Una frase (strana)!") != std::string::npos);
  CHECK(prompt == build_filter_prompt(pair));
}

TEST_CASE("judge reply classification") {
  CHECK(classify_reply("yes") == ReplyClass::Yes);
  CHECK(classify_reply("Yes.") == ReplyClass::Yes);
  CHECK(classify_reply(" YES!! ") == ReplyClass::Yes);
  CHECK(classify_reply("No.") == ReplyClass::No);
  CHECK(classify_reply("no way") == ReplyClass::No);
  CHECK(classify_reply("maybe") == ReplyClass::Malformed);
  CHECK(classify_reply("") == ReplyClass::Malformed);
  CHECK(classify_reply("yesterday") == ReplyClass::Malformed);
  CHECK(parse_verdict("Yes, they match").keep);
  CHECK_FALSE(parse_verdict("No.").keep);
}

TEST_CASE("llm_filter decision table: yes kept, no dropped, garbage flagged") {
  std::vector<SentencePair> pairs = {sp("one", "uno"), sp("two", "cane"),
                                     sp("three", "tre")};
  int call = 0;
  StubJudge judge([&](const std::string&) -> std::string {
    const int n = call++;
    if (n == 0) return "yes";
    if (n == 1) return "No.";
    return "maybe";  // pair 3 stays malformed across the retry
  });
  auto r = llm_filter(pairs, judge, 0);
  REQUIRE(r.kept.size() == 1);
  CHECK(r.kept[0] == pairs[0]);
  REQUIRE(r.rejections.size() == 2);
  CHECK(r.rejections[0].reason == "no");
  CHECK(r.rejections[0].index == 1);
  CHECK(r.rejections[1].reason == "malformed");
  CHECK(r.rejections[1].index == 2);
}

TEST_CASE("llm_filter retries malformed replies once before flagging") {
  std::vector<SentencePair> pairs = {sp("one", "uno")};
  int calls = 0;
  StubJudge judge([&](const std::string&) -> std::string {
    return ++calls == 1 ? "hmm" : "yes";
  });
  auto r = llm_filter(pairs, judge, 0);
  CHECK(calls == 2);
  CHECK(r.kept.size() == 1);
  CHECK(r.rejections.empty());
}

TEST_CASE("llm_filter hard-fails with the pair position after transport retry") {
  std::vector<SentencePair> pairs = {sp("one", "uno"), sp("two", "due")};
  int calls = 0;
  StubJudge judge([&](const std::string&) -> std::string {
    if (calls++ == 0) return "yes";
    throw ProtocolError("connection refused");
  });
  try {
    llm_filter(pairs, judge, 0);
    FAIL("expected ProtocolError");
  } catch (const ProtocolError& e) {
    CHECK(std::string(e.what()).find("pair 1") != std::string::npos);
  }
  CHECK(calls == 3);  // pair 0 once, pair 1 original + one retry
}

TEST_CASE("bidirectional templates are byte-exact") {
  auto samples = format_bidirectional({sp("Hello", "Ciao")});
  REQUIRE(samples.size() == 2);
  CHECK(samples[0].text == "ENG: Hello IT: Ciao");
  CHECK(samples[0].direction == Direction::EnToIt);
  CHECK(samples[1].text == "IT: Ciao ENG: Hello");
  CHECK(samples[1].direction == Direction::ItToEn);
}

TEST_CASE("templating doubles every input size") {
  for (size_t n : {size_t(0), size_t(1), size_t(1000)}) {
    std::vector<SentencePair> pairs;
    for (size_t i = 0; i < n; ++i)
      pairs.push_back(sp("e" + std::to_string(i), "i" + std::to_string(i)));
    CHECK(format_bidirectional(pairs).size() == 2 * n);
  }
}

TEST_CASE("shuffle is seed-deterministic and preserves the multiset") {
  std::vector<int> items;
  for (int i = 1; i <= 100; ++i) items.push_back(i);
  auto a = shuffle(items, 7);
  auto b = shuffle(items, 7);
  CHECK(a == b);
  CHECK(a != items);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == items);
}

TEST_CASE("shuffle of 1..10 with seed 42 matches the reference generator") {
  std::vector<int> items = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  auto got = shuffle(items, 42);

  std::vector<int> expected = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  oracles::ref_shuffle(expected, 42);
  CHECK(got == expected);

  // Frozen output of the documented algorithm.
  CHECK(got == std::vector<int>{2, 5, 4, 9, 10, 3, 8, 7, 6, 1});
}

TEST_CASE("backtranslate orients the human line as the gold target") {
  auto mt = StubMt::uppercase();
  std::vector<std::string> italian(100);
  for (size_t i = 0; i < 100; ++i) italian[i] = "frase numero " + std::to_string(i);
  auto r = backtranslate(italian, *mt, MtDirection::ItEn, 0);
  REQUIRE(r.pairs.size() == 100);
  CHECK(r.skipped == 0);
  for (size_t i = 0; i < 100; ++i) {
    CHECK(r.pairs[i].italian == italian[i]);
    CHECK(r.pairs[i].english == "FRASE NUMERO " + std::to_string(i));
    CHECK(r.pairs[i].source_tag == "synthetic");
  }

  auto east = backtranslate({"the cat"}, *mt, MtDirection::EnIt, 0);
  REQUIRE(east.pairs.size() == 1);
  CHECK(east.pairs[0].english == "the cat");
  CHECK(east.pairs[0].italian == "THE CAT");

  CHECK(backtranslate({}, *mt, MtDirection::ItEn, 0).pairs.empty());
}

TEST_CASE("backtranslate skips failing lines and keeps going") {
  int calls = 0;
  StubMt mt([&](const std::string& s, MtDirection) -> std::string {
    ++calls;
    if (s == "boom") throw ProtocolError("mt down");
    return s + "!";
  });
  auto r = backtranslate({"uno", "boom", "tre"}, mt, MtDirection::ItEn, 0);
  CHECK(r.pairs.size() == 2);
  CHECK(r.skipped == 1);
  CHECK(calls == 4);  // boom is retried once
}

TEST_CASE("prepare composition is deterministic and counts correctly") {
  std::vector<SentencePair> pairs;
  for (int i = 0; i < 10; ++i)
    pairs.push_back(sp("en" + std::to_string(i % 8), "it" + std::to_string(i % 8)));
  // 10 inputs, 2 duplicates (i=8,9 repeat 0,1)
  int call = 0;
  auto judge = StubJudge([&](const std::string&) -> std::string {
    return call++ == 3 ? "no" : "yes";  // reject exactly one pair
  });
  auto a = prepare_corpus(pairs, &judge, 123);
  CHECK(a.stats.input_pairs == 10);
  CHECK(a.stats.duplicates_removed == 2);
  CHECK(a.stats.rejected_no == 1);
  CHECK(a.stats.rejected_malformed == 0);
  CHECK(a.stats.output_samples == 14);  // (8 - 1) * 2

  call = 0;
  auto b = prepare_corpus(pairs, &judge, 123);
  CHECK(a.samples == b.samples);
}

TEST_CASE("corpus loaders trim only trailing newlines") {
  const std::string en = temp_path("dieta_corpus_en.txt");
  const std::string it = temp_path("dieta_corpus_it.txt");
  {
    std::ofstream f(en, std::ios::binary);
    f << "Hello  world\r\n" << " padded \n";
  }
  {
    std::ofstream f(it, std::ios::binary);
    f << "Ciao  mondo\n" << " imbottito \n";
  }
  auto pairs = read_aligned_corpus(en, it, "unit");
  REQUIRE(pairs.size() == 2);
  CHECK(pairs[0].english == "Hello  world");
  CHECK(pairs[0].italian == "Ciao  mondo");
  CHECK(pairs[1].english == " padded ");
  CHECK(pairs[1].italian == " imbottito ");
  CHECK(pairs[0].source_tag == "unit");
  std::remove(en.c_str());
  std::remove(it.c_str());
}

TEST_CASE("aligned corpus loader reports both line counts on mismatch") {
  const std::string en = temp_path("dieta_corpus_en2.txt");
  const std::string it = temp_path("dieta_corpus_it2.txt");
  write_lines(en, {"a", "b", "c"});
  write_lines(it, {"x", "y"});
  try {
    read_aligned_corpus(en, it);
    FAIL("expected InputError");
  } catch (const InputError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("3") != std::string::npos);
    CHECK(msg.find("2") != std::string::npos);
  }
  std::remove(en.c_str());
  std::remove(it.c_str());
}

TEST_CASE("tsv corpus round-trips") {
  const std::string path = temp_path("dieta_corpus.tsv");
  std::vector<SentencePair> pairs = {sp("one", "uno", "opus"),
                                     sp("two words", "due parole", "synthetic")};
  write_tsv_corpus(path, pairs);
  auto got = read_tsv_corpus(path);
  CHECK(got == pairs);
  std::remove(path.c_str());
}

TEST_CASE("rejection log is one TSV line per rejection") {
  const std::string path = temp_path("dieta_rejections.tsv");
  write_rejection_log(path, {{0, sp("a", "b"), "no", "No."},
                             {3, sp("c", "d"), "malformed", "???"}});
  auto lines = read_lines(path);
  REQUIRE(lines.size() == 2);
  CHECK(lines[0] == "no\ta\tb\tNo.");
  CHECK(lines[1] == "malformed\tc\td\t???");
  std::remove(path.c_str());
}

TEST_CASE("http judge and MT clients speak the JSON contract") {
  httplib::Server server;
  std::atomic<int> judge_hits{0};
  server.Post("/judge", [&](const httplib::Request& req, httplib::Response& res) {
    auto body = nlohmann::json::parse(req.body);
    judge_hits++;
    const std::string prompt = body.at("prompt").get<std::string>();
    res.set_content(
        nlohmann::json{{"reply", prompt.find("uno") != std::string::npos
                                     ? "yes"
                                     : "no"}}.dump(),
        "application/json");
  });
  server.Post("/mt", [&](const httplib::Request& req, httplib::Response& res) {
    auto body = nlohmann::json::parse(req.body);
    std::string text = body.at("text").get<std::string>();
    res.set_content(
        nlohmann::json{{"translation", "<" + body.at("direction").get<std::string>() +
                                           ">" + text}}.dump(),
        "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&]() { server.listen_after_bind(); });
  server.wait_until_ready();

  const std::string base = "http://127.0.0.1:" + std::to_string(port);
  auto judge = make_judge_client(base + "/judge", 5);
  CHECK(judge->ask(build_filter_prompt(sp("one", "uno"))) == "yes");
  CHECK(judge->ask(build_filter_prompt(sp("one", "cane"))) == "no");
  CHECK(judge_hits == 2);

  auto mt = make_mt_client(base + "/mt", 5);
  CHECK(mt->translate("gatto", MtDirection::ItEn) == "<it-en>gatto");

  auto dead = make_judge_client("http://127.0.0.1:1/judge", 1);
  CHECK_THROWS_AS(dead->ask("hi"), ProtocolError);

  server.stop();
  t.join();
}

TEST_CASE("stub factories reject unknown stubs and accept known ones") {
  CHECK_NOTHROW(make_judge_client("stub:yes", 1));
  CHECK_NOTHROW(make_mt_client("stub:upper", 1));
  CHECK_NOTHROW(make_scorer_client("stub:constant:0.5", 1, false, "s"));
  CHECK_THROWS_AS(make_judge_client("stub:banana", 1), ConfigError);
  CHECK_THROWS_AS(make_mt_client("stub:banana", 1), ConfigError);
  CHECK_THROWS_AS(make_scorer_client("stub:banana", 1, false, "s"), ConfigError);
}
