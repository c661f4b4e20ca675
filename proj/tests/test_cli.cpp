#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "dieta/metrics.hpp"
#include "dieta/pipeline.hpp"
#include "dieta/tokenizer.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

fs::path work_dir() {
  static fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "dieta_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

RunResult run_cli(const std::string& args) {
  const fs::path out = work_dir() / "stdout.txt";
  const fs::path err = work_dir() / "stderr.txt";
  const std::string cmd = std::string(DIETA_CLI_PATH) + " " + args + " > " +
                          out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  if (WIFEXITED(status)) r.exit_code = WEXITSTATUS(status);
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

void write_file(const fs::path& p, const std::vector<std::string>& lines) {
  std::ofstream f(p, std::ios::binary);
  for (const auto& l : lines) f << l << "\n";
}

}  // namespace

TEST_CASE("help succeeds and unknown flags are fatal usage errors") {
  auto help = run_cli("--help");
  CHECK(help.exit_code == 0);
  CHECK(help.out.find("prepare") != std::string::npos);
  CHECK(help.out.find("eval") != std::string::npos);

  auto sub_help = run_cli("translate --help");
  CHECK(sub_help.exit_code == 0);
  for (const char* flag : {"--model", "--vocab", "--direction", "--input",
                           "--output", "--beam", "--max-new-tokens", "--alpha"})
    CHECK(sub_help.out.find(flag) != std::string::npos);

  auto bad = run_cli("prepare --out x.txt --no-such-flag");
  CHECK(bad.exit_code == 1);
  CHECK(bad.err.find("error:") != std::string::npos);

  auto none = run_cli("");
  CHECK(none.exit_code == 1);
}

TEST_CASE("prepare doubles pairs and reports stats") {
  const fs::path d = work_dir();
  write_file(d / "en.txt", {"one", "two", "three", "four", "five"});
  write_file(d / "it.txt", {"uno", "due", "tre", "quattro", "cinque"});
  auto r = run_cli("prepare --english " + (d / "en.txt").string() +
                   " --italian " + (d / "it.txt").string() + " --out " +
                   (d / "samples.txt").string() + " --stats " +
                   (d / "stats.tsv").string() + " --seed 3");
  CHECK(r.exit_code == 0);
  const std::string stats = slurp(d / "stats.tsv");
  CHECK(stats.find("input_pairs\t5") != std::string::npos);
  CHECK(stats.find("duplicates_removed\t0") != std::string::npos);
  CHECK(stats.find("output_samples\t10") != std::string::npos);
  CHECK(dieta::read_lines((d / "samples.txt").string()).size() == 10);
  // resolved config is logged
  CHECK(r.err.find("config: seed=3") != std::string::npos);
}

TEST_CASE("prepare fails fatally on misaligned corpus files") {
  const fs::path d = work_dir();
  write_file(d / "en3.txt", {"a", "b", "c"});
  write_file(d / "it2.txt", {"x", "y"});
  auto r = run_cli("prepare --english " + (d / "en3.txt").string() +
                   " --italian " + (d / "it2.txt").string() + " --out " +
                   (d / "nope.txt").string());
  CHECK(r.exit_code == 2);
  CHECK(r.err.find("error:") != std::string::npos);
  CHECK(r.err.find("3") != std::string::npos);
  CHECK(r.err.find("2") != std::string::npos);
}

TEST_CASE("config file values are overridden by explicit flags only") {
  const fs::path d = work_dir();
  write_file(d / "en1.txt", {"hello"});
  write_file(d / "it1.txt", {"ciao"});
  write_file(d / "run.cfg", {"# comment", "seed=7"});
  auto from_file = run_cli("prepare --english " + (d / "en1.txt").string() +
                           " --italian " + (d / "it1.txt").string() +
                           " --out " + (d / "s1.txt").string() + " --config " +
                           (d / "run.cfg").string());
  CHECK(from_file.err.find("config: seed=7") != std::string::npos);
  auto overridden = run_cli("prepare --english " + (d / "en1.txt").string() +
                            " --italian " + (d / "it1.txt").string() +
                            " --out " + (d / "s2.txt").string() + " --config " +
                            (d / "run.cfg").string() + " --seed 9");
  CHECK(overridden.err.find("config: seed=9") != std::string::npos);
}

TEST_CASE("prepare with a judge filter: planted duplicates and one rejection") {
  const fs::path d = work_dir();
  // 10 pairs with 2 duplicates; the judge rejects exactly one pair.
  std::vector<std::string> en, it;
  for (int i = 0; i < 8; ++i) {
    en.push_back("sentence " + std::to_string(i));
    it.push_back("frase " + std::to_string(i));
  }
  en.push_back(en[0]);
  it.push_back(it[0]);
  en.push_back(en[1]);
  it.push_back(it[1]);
  write_file(d / "en10.txt", en);
  write_file(d / "it10.txt", it);

  httplib::Server server;
  server.Post("/judge", [](const httplib::Request& req, httplib::Response& res) {
    auto body = nlohmann::json::parse(req.body);
    const std::string prompt = body.at("prompt").get<std::string>();
    const bool reject = prompt.find("sentence 3") != std::string::npos;
    res.set_content(nlohmann::json{{"reply", reject ? "No." : "yes"}}.dump(),
                    "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread t([&]() { server.listen_after_bind(); });
  server.wait_until_ready();

  auto r = run_cli("prepare --english " + (d / "en10.txt").string() +
                   " --italian " + (d / "it10.txt").string() + " --out " +
                   (d / "s10.txt").string() + " --rejections " +
                   (d / "rej.tsv").string() +
                   " --filter --judge-url http://127.0.0.1:" +
                   std::to_string(port) + "/judge");
  server.stop();
  t.join();

  CHECK(r.exit_code == 0);
  CHECK(dieta::read_lines((d / "s10.txt").string()).size() == 14);
  auto rej = dieta::read_lines((d / "rej.tsv").string());
  REQUIRE(rej.size() == 1);
  CHECK(rej[0].find("no\tsentence 3") == 0);
  CHECK(r.err.find("duplicates_removed\t2") != std::string::npos);
  CHECK(r.err.find("rejected_no\t1") != std::string::npos);
  CHECK(r.err.find("output_samples\t14") != std::string::npos);
}

TEST_CASE("backtranslate via the stub MT orients human text as the target") {
  const fs::path d = work_dir();
  write_file(d / "mono.txt", {"una frase", "altra frase"});
  auto r = run_cli("backtranslate --input " + (d / "mono.txt").string() +
                   " --out " + (d / "bt.tsv").string() +
                   " --direction it-en --mt-url stub:upper");
  CHECK(r.exit_code == 0);
  auto pairs = dieta::read_tsv_corpus((d / "bt.tsv").string());
  REQUIRE(pairs.size() == 2);
  CHECK(pairs[0].english == "UNA FRASE");
  CHECK(pairs[0].italian == "una frase");
  CHECK(pairs[0].source_tag == "synthetic");
}

TEST_CASE("eval on identical files prints BLEU 100.00") {
  const fs::path d = work_dir();
  write_file(d / "same.txt",
             {"the cat sat on the mat", "another longer sentence here"});
  auto r = run_cli("eval --hyp " + (d / "same.txt").string() + " --ref " +
                   (d / "same.txt").string());
  CHECK(r.exit_code == 0);
  CHECK(r.out.find("BLEU 100.00") != std::string::npos);
  CHECK(r.out.find("chrF 100.00") != std::string::npos);
}

TEST_CASE("eval with a stub scorer lands in the report") {
  const fs::path d = work_dir();
  write_file(d / "h.txt", {"the cat sat on the mat"});
  write_file(d / "r.txt", {"the cat is on the mat"});
  auto r = run_cli("eval --hyp " + (d / "h.txt").string() + " --ref " +
                   (d / "r.txt").string() + " --report " +
                   (d / "report.tsv").string() +
                   " --scorer-url stub:constant:0.75 --scorer-name comet" +
                   " --system DIETA --direction en->it");
  CHECK(r.exit_code == 0);
  const std::string report = slurp(d / "report.tsv");
  CHECK(report.find("bleu") != std::string::npos);
  CHECK(report.find("comet") != std::string::npos);
  CHECK(report.find("0.7500") != std::string::npos);
  CHECK(report.find("DIETA") != std::string::npos);
}

TEST_CASE("end-to-end smoke: prepare, tokenize, train, translate, eval") {
  const fs::path d = work_dir() / "e2e";
  fs::create_directories(d);
  // small deterministic digit corpus
  static const char* en_w[10] = {"zero", "one", "two",   "three", "four",
                                 "five", "six", "seven", "eight", "nine"};
  static const char* it_w[10] = {"zero",   "uno", "due",   "tre",  "quattro",
                                 "cinque", "sei", "sette", "otto", "nove"};
  dieta::Xorshift64Star rng(99);
  std::vector<std::string> en, it;
  std::set<std::string> seen;
  while (en.size() < 32) {
    const size_t len = 3 + rng.next() % 2;
    std::string e, i;
    for (size_t k = 0; k < len; ++k) {
      const size_t digit = rng.next() % 10;
      if (k) {
        e += ' ';
        i += ' ';
      }
      e += en_w[digit];
      i += it_w[digit];
    }
    if (seen.insert(e).second) {
      en.push_back(e);
      it.push_back(i);
    }
  }
  write_file(d / "en.txt", en);
  write_file(d / "it.txt", it);

  auto prep = run_cli("prepare --english " + (d / "en.txt").string() +
                      " --italian " + (d / "it.txt").string() + " --out " +
                      (d / "samples.txt").string() + " --seed 5");
  REQUIRE(prep.exit_code == 0);

  auto tok = run_cli("train-tokenizer --input " + (d / "samples.txt").string() +
                     " --vocab-size 512 --out " + (d / "vocab.txt").string());
  REQUIRE(tok.exit_code == 0);

  // 200 steps on a 32-pair corpus memorizes it; the short run wants a hotter
  // peak rate than a full-length schedule would use.
  auto train = run_cli(
      "train --data " + (d / "samples.txt").string() + " --vocab " +
      (d / "vocab.txt").string() + " --out " + (d / "model.ckpt").string() +
      " --steps 200 --batch-tokens 512 --max-seq-len 32 --d-model 128 "
      "--n-heads 4 --n-layers 2 --model-vocab 512 --seed 7 --peak-lr 2e-3");
  REQUIRE(train.exit_code == 0);

  auto translate = run_cli("translate --model " + (d / "model.ckpt").string() +
                           " --vocab " + (d / "vocab.txt").string() +
                           " --direction en-it --input " +
                           (d / "en.txt").string() + " --output " +
                           (d / "hyp.txt").string());
  REQUIRE(translate.exit_code == 0);
  CHECK(dieta::read_lines((d / "hyp.txt").string()).size() == en.size());

  auto eval = run_cli("eval --hyp " + (d / "hyp.txt").string() + " --ref " +
                      (d / "it.txt").string());
  REQUIRE(eval.exit_code == 0);
  const size_t pos = eval.out.find("BLEU ");
  REQUIRE(pos != std::string::npos);
  const double score = std::stod(eval.out.substr(pos + 5));
  CHECK(score > 50.0);

  // beam decoding exercises the -b5 policy end to end
  auto beam = run_cli("translate --model " + (d / "model.ckpt").string() +
                      " --vocab " + (d / "vocab.txt").string() +
                      " --direction en-it --beam 5 --input " +
                      (d / "en.txt").string() + " --output " +
                      (d / "hyp_b5.txt").string());
  REQUIRE(beam.exit_code == 0);
  CHECK(dieta::read_lines((d / "hyp_b5.txt").string()).size() == en.size());
}

TEST_CASE("train refuses a continued recipe without a starting checkpoint") {
  const fs::path d = work_dir();
  write_file(d / "tiny_samples.txt", {"ENG: one IT: uno"});
  auto r = run_cli("train --data " + (d / "tiny_samples.txt").string() +
                   " --vocab nowhere.vocab --out " + (d / "x.ckpt").string() +
                   " --recipe +nosynth --steps 1");
  CHECK(r.exit_code == 2);
  CHECK(r.err.find("error:") != std::string::npos);
  CHECK(r.err.find("+nosynth") != std::string::npos);
}
