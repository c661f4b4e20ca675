#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <numeric>

#include "dieta/pipeline.hpp"
#include "dieta/trainer.hpp"
#include "oracles.hpp"

using namespace dieta;

namespace {

std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

// Small bilingual toy corpus: digit words in two languages.
std::vector<std::string> copy_task_samples(size_t n_pairs, uint64_t seed) {
  static const char* en[10] = {"zero", "one", "two",   "three", "four",
                               "five", "six", "seven", "eight", "nine"};
  static const char* it[10] = {"zero", "uno", "due",   "tre",  "quattro",
                               "cinque", "sei", "sette", "otto", "nove"};
  Xorshift64Star rng(seed);
  std::vector<SentencePair> pairs;
  for (size_t i = 0; i < n_pairs; ++i) {
    const size_t len = 2 + rng.next() % 2;
    std::string e, t;
    for (size_t k = 0; k < len; ++k) {
      const size_t d = rng.next() % 10;
      if (k) {
        e += ' ';
        t += ' ';
      }
      e += en[d];
      t += it[d];
    }
    pairs.push_back({e, t, "toy"});
  }
  std::vector<std::string> out;
  for (const auto& s : format_bidirectional(pairs)) out.push_back(s.text);
  return out;
}

ModelConfig small_config(size_t vocab) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 32;
  c.n_heads = 2;
  c.n_layers = 1;
  c.max_seq_len = 64;
  return c;
}

}  // namespace

TEST_CASE("lion scalar update matches the hand computation") {
  auto p = TensorD::from_data({1}, {1.0});
  std::vector<double> grad = {0.5};
  std::vector<double> m = {0.0};
  LionParams lp;
  lp.beta1 = 0.9;
  lp.beta2 = 0.99;
  lp.weight_decay = 0.0;
  lion_step(p, grad, m, lp, 0.1);
  CHECK(p.at(0) == 0.9);  // sign(0.05) = 1, so exactly 1.0 - 0.1
  CHECK(m[0] == doctest::Approx(0.005).epsilon(1e-12));
}

TEST_CASE("lion leaves parameters alone when gradient and momentum are zero") {
  auto p = TensorD::from_data({3}, {1.0, -2.0, 0.25});
  std::vector<double> grad = {0.0, 0.0, 0.0};
  std::vector<double> m = {0.0, 0.0, 0.0};
  LionParams lp;
  lp.weight_decay = 0.0;
  lion_step(p, grad, m, lp, 0.1);
  CHECK(p.data() == std::vector<double>{1.0, -2.0, 0.25});
}

TEST_CASE("lion moves every active coordinate by exactly lr when decay is off") {
  Xorshift64Star rng(3);
  auto p = TensorD::randn({64}, rng, 1.0);
  auto before = p.data();
  std::vector<double> grad(64), m(64, 0.0);
  for (auto& g : grad) g = rng.next_gaussian();
  LionParams lp;
  lp.weight_decay = 0.0;
  lion_step(p, grad, m, lp, 0.01);
  for (size_t i = 0; i < 64; ++i) {
    if (grad[i] == 0.0) continue;
    CHECK(std::abs(p.at(i) - before[i]) == doctest::Approx(0.01).epsilon(1e-12));
  }
}

TEST_CASE("lion per-coordinate movement is bounded by lr * (1 + wd * |p|)") {
  Xorshift64Star rng(5);
  auto p = TensorD::randn({128}, rng, 2.0);
  auto before = p.data();
  std::vector<double> grad(128), m(128);
  for (auto& g : grad) g = rng.next_gaussian();
  for (auto& v : m) v = rng.next_gaussian();
  LionParams lp;  // wd = 0.01
  lion_step(p, grad, m, lp, 0.05);
  for (size_t i = 0; i < 128; ++i)
    CHECK(std::abs(p.at(i) - before[i]) <=
          0.05 * (1.0 + lp.weight_decay * std::abs(before[i])) + 1e-15);
}

TEST_CASE("lion rejects mismatched shapes") {
  auto p = TensorD::zeros({4});
  std::vector<double> grad(3), m(4);
  CHECK_THROWS_AS(lion_step(p, grad, m, LionParams{}, 0.1), ContractError);
}

TEST_CASE("learning-rate schedule hits its landmarks exactly") {
  Schedule s;
  s.peak_lr = 2e-4;
  s.total_steps = 1000;
  s.warmup_fraction = 0.10;
  s.floor_lr = 0.0;
  CHECK(lr_at(0, s) == 0.0);
  CHECK(lr_at(100, s) == 2e-4);             // warmup end
  CHECK(lr_at(550, s) == 1e-4);             // 55% of total, exactly half peak
  CHECK(lr_at(1000, s) == 0.0);
  CHECK_THROWS_AS(lr_at(1001, s), ContractError);

  Schedule bad = s;
  bad.warmup_fraction = 0.0;
  CHECK_THROWS_AS(lr_at(1, bad), ConfigError);
}

TEST_CASE("schedule is continuous, piecewise linear, and peaks at warmup") {
  Schedule s;
  s.peak_lr = 3e-4;
  s.total_steps = 400;
  s.warmup_fraction = 0.25;
  s.floor_lr = 1e-5;
  double max_lr = 0.0;
  size_t argmax = 0;
  double prev = lr_at(0, s);
  const double up = s.peak_lr / 100.0;
  const double down = (s.peak_lr - s.floor_lr) / 300.0;
  for (size_t t = 1; t <= 400; ++t) {
    const double cur = lr_at(t, s);
    const double jump = std::abs(cur - prev);
    CHECK(jump <= std::max(up, down) + 1e-15);
    if (cur > max_lr) {
      max_lr = cur;
      argmax = t;
    }
    prev = cur;
  }
  CHECK(max_lr == s.peak_lr);
  CHECK(argmax == 100);
}

TEST_CASE("batching examples: single sample, conservation, greedy packing") {
  auto vocab = train_bpe({"a b c d e f g h i j"}, 270);  // no merges repeat

  // one 10-token sample -> one [1 x 11] batch including EOS
  const std::string ten = "abcde abcd";  // 10 bytes = 10 tokens with no merges
  REQUIRE(vocab.encode(ten).size() == 10);
  auto batches = make_batches({ten}, vocab, 64, 32);
  REQUIRE(batches.size() == 1);
  CHECK(batches[0].rows == 1);
  CHECK(batches[0].cols == 11);
  CHECK(batches[0].tokens[10] == Vocab::kEosId);
  CHECK(batches[0].real_tokens == 11);
  // 10 loss positions: every token except the first is predicted once
  size_t masked = 0;
  for (uint8_t m : batches[0].loss_mask) masked += m;
  CHECK(masked == 10);

  // greedy packing of lengths {30,30,30} under budget 64 -> sizes {2,1}
  const std::string w29(29, 'a');  // 29 tokens + EOS = 30
  REQUIRE(vocab.encode(w29).size() == 29);
  auto packed = make_batches({w29, w29, w29}, vocab, 64, 40);
  REQUIRE(packed.size() == 2);
  CHECK(packed[0].rows == 2);
  CHECK(packed[1].rows == 1);

  // token conservation across batches
  std::vector<std::string> mixed = {"ab", "a b c", w29, ten, "zz top"};
  BatchingStats stats;
  auto all = make_batches(mixed, vocab, 16, 40, &stats);
  size_t total_real = 0;
  for (const auto& b : all) total_real += b.real_tokens;
  size_t expected = 0;
  for (const auto& s : mixed) expected += vocab.encode(s).size() + 1;
  CHECK(total_real == expected);
  CHECK(stats.total_tokens == expected);
  CHECK(stats.truncated_samples == 0);
}

TEST_CASE("overlong samples are truncated and counted, EOS preserved") {
  auto vocab = train_bpe({"a b c"}, 270);
  const std::string long_text(50, 'a');
  BatchingStats stats;
  auto batches = make_batches({long_text}, vocab, 64, 16, &stats);
  REQUIRE(batches.size() == 1);
  CHECK(stats.truncated_samples == 1);
  CHECK(batches[0].cols == 16);
  CHECK(batches[0].tokens[15] == Vocab::kEosId);
}

TEST_CASE("recipe presets match the release list") {
  auto base = recipe_preset("DIETA");
  CHECK(base.mixture == std::vector<std::string>{"parallel"});
  CHECK_FALSE(base.requires_start());
  CHECK(base.full_scale_pairs == 415728874ull);

  auto bt = recipe_preset("+BT");
  CHECK(bt.mixture ==
        std::vector<std::string>{"parallel", "newscrawl_bt"});
  CHECK(bt.full_scale_pairs == 559924569ull);
  CHECK_FALSE(bt.requires_start());

  auto cont = recipe_preset("+cont");
  CHECK(cont.start_from == "DIETA");
  CHECK(cont.full_scale_pairs == 559924569ull);

  auto nosynth = recipe_preset("+nosynth");
  CHECK(nosynth.start_from == "DIETA");
  CHECK(nosynth.mixture == std::vector<std::string>{"parallel"});

  auto allsynth = recipe_preset("+allsynth");
  CHECK(allsynth.start_from == "+cont");
  CHECK(allsynth.full_scale_pairs == 768440887ull);
  CHECK(allsynth.mixture ==
        std::vector<std::string>{"parallel", "newscrawl_bt", "fineweb_bt"});

  CHECK_THROWS_AS(recipe_preset("DIETA+turbo"), ConfigError);
  CHECK_THROWS_AS(validate_recipe_start(recipe_preset("+nosynth"), ""),
                  ConfigError);
  CHECK_NOTHROW(validate_recipe_start(recipe_preset("+nosynth"), "x.ckpt"));
  CHECK_NOTHROW(validate_recipe_start(recipe_preset("DIETA"), ""));
}

TEST_CASE("short training run descends and exercises every parameter") {
  auto samples = copy_task_samples(16, 7);  // 32 formatted samples
  auto vocab = train_bpe(samples, 300);
  auto model = DietaModel<float>::init(small_config(300), 11);

  TrainOptions opt;
  opt.steps = 200;
  opt.max_tokens_per_batch = 256;
  opt.max_seq_len = 32;
  opt.schedule.peak_lr = 2e-4;
  opt.schedule.warmup_fraction = 0.10;

  auto r = train(model, samples, vocab, opt);
  REQUIRE(r.losses.size() == 200);
  CHECK(r.losses.back() < r.losses.front());

  const double first20 =
      std::accumulate(r.losses.begin(), r.losses.begin() + 20, 0.0) / 20.0;
  const double last20 =
      std::accumulate(r.losses.end() - 20, r.losses.end(), 0.0) / 20.0;
  CHECK(last20 < first20);
  CHECK(r.silent_params.empty());
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run") {
  auto samples = copy_task_samples(8, 13);
  auto vocab = train_bpe(samples, 300);
  const std::string ckpt = temp_path("dieta_resume_test.ckpt");
  const std::string ckpt_b = temp_path("dieta_resume_test_b.ckpt");

  TrainOptions straight;
  straight.steps = 60;
  straight.max_tokens_per_batch = 128;
  straight.max_seq_len = 32;
  straight.checkpoint_path = ckpt;

  auto uninterrupted = DietaModel<double>::init(small_config(300), 17);
  auto full = train(uninterrupted, samples, vocab, straight);

  auto half = DietaModel<double>::init(small_config(300), 17);
  TrainOptions first_half = straight;
  first_half.steps = 60;
  first_half.checkpoint_path = ckpt_b;
  first_half.checkpoint_interval = 30;
  // stop after 30 steps by training a 30-step run with the same schedule
  first_half.steps = 30;
  first_half.schedule.total_steps = 60;
  train(half, samples, vocab, first_half);

  auto resumed = DietaModel<double>::init(small_config(300), 999);  // overwritten
  TrainOptions second_half = straight;
  second_half.resume_from = ckpt_b;
  second_half.checkpoint_path = "";
  auto rest = train(resumed, samples, vocab, second_half);

  CHECK(rest.start_step == 30);
  CHECK(rest.losses.size() == 30);
  CHECK(rest.losses.back() == full.losses.back());

  auto a = uninterrupted.parameters();
  auto b = resumed.parameters();
  for (size_t i = 0; i < a.size(); ++i)
    CHECK(std::memcmp(a[i].tensor->data().data(), b[i].tensor->data().data(),
                      a[i].tensor->numel() * sizeof(double)) == 0);
  std::remove(ckpt.c_str());
  std::remove(ckpt_b.c_str());
}

TEST_CASE("metrics log has one line per step") {
  auto samples = copy_task_samples(4, 19);
  auto vocab = train_bpe(samples, 300);
  auto model = DietaModel<float>::init(small_config(300), 23);
  const std::string metrics = temp_path("dieta_metrics_test.tsv");
  TrainOptions opt;
  opt.steps = 5;
  opt.max_tokens_per_batch = 128;
  opt.max_seq_len = 32;
  opt.metrics_path = metrics;
  train(model, samples, vocab, opt);
  auto lines = read_lines(metrics);
  REQUIRE(lines.size() == 6);  // header + 5 steps
  CHECK(lines[0] == "#step\tlr\tloss\ttokens_per_sec");
  CHECK(lines[1].substr(0, 2) == "1\t");
  std::remove(metrics.c_str());
}

TEST_CASE("train rejects oversized vocabularies and empty corpora") {
  auto samples = copy_task_samples(4, 29);
  auto vocab = train_bpe(samples, 300);
  auto model = DietaModel<float>::init(small_config(280), 31);
  TrainOptions opt;
  opt.steps = 1;
  CHECK_THROWS_AS(train(model, samples, vocab, opt), ConfigError);

  auto ok_model = DietaModel<float>::init(small_config(300), 31);
  CHECK_THROWS_AS(train(ok_model, {}, vocab, opt), InputError);
}
