// dieta: corpus preparation, tokenizer and model training, translation,
// back-translation, and evaluation for the DIETA translation stack.
//
// Exit codes: 0 ok, 1 usage error, 2 runtime error.

#include <CLI11.hpp>
#include <iostream>
#include <optional>

#include "dieta/config.hpp"
#include "dieta/decoder.hpp"
#include "dieta/http_clients.hpp"
#include "dieta/metrics.hpp"
#include "dieta/model.hpp"
#include "dieta/pipeline.hpp"
#include "dieta/tokenizer.hpp"
#include "dieta/trainer.hpp"

namespace {

using namespace dieta;

void log_resolved(const RunConfig& rc) {
  for (const std::string& line : rc.resolved_lines())
    std::cerr << "config: " << line << "\n";
}

std::map<std::string, std::string> file_kv_or_empty(const std::string& path) {
  if (path.empty()) return {};
  return parse_kv_file(path);
}

// ---------------------------------------------------------------------------
// prepare
// ---------------------------------------------------------------------------

struct PrepareArgs {
  std::string english, italian, tsv, out, stats_path, rejections, config;
  std::string judge_url;
  std::string tag = "opus";
  uint64_t seed = 1;
  bool filter = false;
  int timeout = 30;
};

int cmd_prepare(const PrepareArgs& a, const CLI::App* cmd) {
  std::map<std::string, std::string> flags;
  if (cmd->count("--seed")) flags["seed"] = std::to_string(a.seed);
  if (cmd->count("--filter")) flags["filter"] = "1";
  if (!a.judge_url.empty()) flags["judge_url"] = a.judge_url;
  RunConfig rc = RunConfig::resolve({{"seed", "1"}, {"filter", "0"}},
                                    file_kv_or_empty(a.config), flags);
  log_resolved(rc);

  std::vector<SentencePair> pairs;
  if (!a.tsv.empty()) {
    pairs = read_tsv_corpus(a.tsv);
  } else {
    if (a.english.empty() || a.italian.empty())
      throw ConfigError("prepare needs --tsv or both --english and --italian");
    pairs = read_aligned_corpus(a.english, a.italian, a.tag);
  }

  std::unique_ptr<JudgeClient> judge;
  if (rc.get_bool("filter")) {
    if (!rc.has("judge_url"))
      throw ConfigError(
          "--filter requires --judge-url or DIETA_JUDGE_URL (stub:yes for "
          "offline runs)");
    judge = make_judge_client(rc.get("judge_url"), a.timeout);
  }

  PrepareResult r = prepare_corpus(pairs, judge.get(), rc.get_u64("seed"));

  std::vector<std::string> lines;
  lines.reserve(r.samples.size());
  for (const auto& s : r.samples) lines.push_back(s.text);
  write_lines(a.out, lines);
  if (!a.rejections.empty()) write_rejection_log(a.rejections, r.rejections);
  if (!a.stats_path.empty()) {
    std::ofstream f(a.stats_path, std::ios::binary);
    f << r.stats.to_tsv();
  }
  std::cerr << r.stats.to_tsv();
  std::cout << "wrote " << r.samples.size() << " samples to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train-tokenizer
// ---------------------------------------------------------------------------

struct TrainTokArgs {
  std::string input, out;
  size_t vocab_size = 4096;
};

int cmd_train_tokenizer(const TrainTokArgs& a) {
  RunConfig rc = RunConfig::resolve(
      {{"vocab_size", std::to_string(a.vocab_size)}}, {}, {});
  log_resolved(rc);
  auto corpus = read_lines(a.input);
  Vocab v = train_bpe(corpus, a.vocab_size);
  v.save(a.out);
  std::cout << "trained vocab with " << v.size() << " pieces ("
            << v.merges.size() << " merges) to " << a.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::vector<std::string> data;
  std::string vocab, out, recipe = "DIETA", init_from, resume, metrics, config;
  size_t steps = 0, epochs = 1;
  size_t batch_tokens = 512, max_seq_len = 64, checkpoint_interval = 0;
  double peak_lr = 2e-4, warmup = 0.10, floor_lr = 0.0;
  double beta1 = 0.9, beta2 = 0.99, weight_decay = 0.01;
  uint64_t seed = 1;
  bool f64 = false;
  // desk-sized model dims unless a checkpoint dictates them
  size_t d_model = 128, n_heads = 4, n_layers = 2, ffn_mult = 4;
  size_t model_vocab = 0;  // 0: sized from the tokenizer
  size_t model_max_seq = 128;
  bool tie_output = false;
};

template <typename S>
int run_train(const TrainArgs& a, const RunConfig& rc, const Vocab& vocab,
              const std::vector<std::string>& samples) {
  ModelConfig cfg;
  const std::string prior =
      !a.resume.empty() ? a.resume : (!a.init_from.empty() ? a.init_from : "");
  if (!prior.empty()) {
    cfg = read_checkpoint_config(prior);
  } else {
    cfg.d_model = rc.get_u64("d_model");
    cfg.n_heads = rc.get_u64("n_heads");
    cfg.n_layers = rc.get_u64("n_layers");
    cfg.ffn_multiplier = rc.get_u64("ffn_mult");
    cfg.max_seq_len = rc.get_u64("model_max_seq");
    cfg.tie_output = rc.get_bool("tie_output");
    cfg.vocab_size = a.model_vocab ? a.model_vocab : vocab.size();
    cfg.validate();
  }

  DietaModel<S> model = DietaModel<S>::init(cfg, rc.get_u64("seed"));

  TrainOptions opt;
  opt.steps = a.steps;
  opt.epochs = a.epochs;
  opt.max_tokens_per_batch = rc.get_u64("batch_tokens");
  opt.max_seq_len = rc.get_u64("max_seq_len");
  opt.schedule.peak_lr = rc.get_double("peak_lr");
  opt.schedule.warmup_fraction = rc.get_double("warmup");
  opt.schedule.floor_lr = rc.get_double("floor_lr");
  opt.lion.beta1 = rc.get_double("beta1");
  opt.lion.beta2 = rc.get_double("beta2");
  opt.lion.weight_decay = rc.get_double("weight_decay");
  opt.checkpoint_interval = a.checkpoint_interval;
  opt.checkpoint_path = a.out;
  opt.metrics_path = a.metrics;
  opt.init_from = a.init_from;
  opt.resume_from = a.resume;

  TrainResult r = train(model, samples, vocab, opt);
  std::cout << "trained steps " << r.start_step << ".." << r.end_step
            << ", first loss " << r.losses.front() << ", final loss "
            << r.losses.back() << "\n";
  if (!r.silent_params.empty()) {
    std::cerr << "warning: parameters with no gradient signal:";
    for (const auto& n : r.silent_params) std::cerr << " " << n;
    std::cerr << "\n";
  }
  std::cout << "checkpoint written to " << a.out << "\n";
  return 0;
}

int cmd_train(const TrainArgs& a, const CLI::App* cmd) {
  TrainRecipe recipe = recipe_preset(a.recipe);
  validate_recipe_start(recipe, !a.init_from.empty() ? a.init_from : a.resume);

  const std::map<std::string, std::string> defaults = {
      {"seed", "1"},          {"batch_tokens", "512"},
      {"max_seq_len", "64"},  {"peak_lr", "0.000200"},
      {"warmup", "0.100000"}, {"floor_lr", "0.000000"},
      {"beta1", "0.900000"},  {"beta2", "0.990000"},
      {"weight_decay", "0.010000"},
      {"d_model", "128"},     {"n_heads", "4"},
      {"n_layers", "2"},      {"ffn_mult", "4"},
      {"model_max_seq", "128"},
      {"tie_output", "0"}};
  std::map<std::string, std::string> flags;
  auto set_if = [&](const char* opt, const char* key, std::string value) {
    if (cmd->count(opt)) flags[key] = std::move(value);
  };
  set_if("--seed", "seed", std::to_string(a.seed));
  set_if("--batch-tokens", "batch_tokens", std::to_string(a.batch_tokens));
  set_if("--max-seq-len", "max_seq_len", std::to_string(a.max_seq_len));
  set_if("--peak-lr", "peak_lr", std::to_string(a.peak_lr));
  set_if("--warmup", "warmup", std::to_string(a.warmup));
  set_if("--floor-lr", "floor_lr", std::to_string(a.floor_lr));
  set_if("--beta1", "beta1", std::to_string(a.beta1));
  set_if("--beta2", "beta2", std::to_string(a.beta2));
  set_if("--weight-decay", "weight_decay", std::to_string(a.weight_decay));
  set_if("--d-model", "d_model", std::to_string(a.d_model));
  set_if("--n-heads", "n_heads", std::to_string(a.n_heads));
  set_if("--n-layers", "n_layers", std::to_string(a.n_layers));
  set_if("--ffn-mult", "ffn_mult", std::to_string(a.ffn_mult));
  set_if("--model-max-seq", "model_max_seq", std::to_string(a.model_max_seq));
  set_if("--tie-output", "tie_output", "1");
  flags["recipe"] = recipe.name;
  flags["precision"] = a.f64 ? "f64" : "f32";
  RunConfig rc = RunConfig::resolve(defaults, file_kv_or_empty(a.config), flags);
  log_resolved(rc);

  if (a.data.empty()) throw ConfigError("train needs at least one --data file");
  std::vector<std::string> samples;
  for (const std::string& path : a.data) {
    auto lines = read_lines(path);
    samples.insert(samples.end(), lines.begin(), lines.end());
  }
  Vocab vocab = Vocab::load(a.vocab);

  if (a.f64) return run_train<double>(a, rc, vocab, samples);
  return run_train<float>(a, rc, vocab, samples);
}

// ---------------------------------------------------------------------------
// translate
// ---------------------------------------------------------------------------

struct TranslateArgs {
  std::string model, vocab, direction = "en-it", input, output;
  size_t beam = 1, max_new_tokens = 128;
  double alpha = 0.6;
};

template <typename S>
int run_translate(const TranslateArgs& a) {
  auto model = load_checkpoint<S>(a.model);
  Vocab vocab = Vocab::load(a.vocab);
  ModelDecoder<S> decoder(model);
  DecodeParams params;
  params.beam_width = a.beam;
  params.max_new_tokens = a.max_new_tokens;
  params.length_penalty = a.alpha;
  const Direction dir = mt_direction_from_string(a.direction) ==
                                MtDirection::EnIt
                            ? Direction::EnToIt
                            : Direction::ItToEn;
  auto lines = read_lines(a.input);
  auto out = translate_lines(decoder, vocab, lines, dir, params);
  if (a.output.empty() || a.output == "-") {
    for (const auto& l : out) std::cout << l << "\n";
  } else {
    write_lines(a.output, out);
    std::cout << "wrote " << out.size() << " translations to " << a.output
              << "\n";
  }
  return 0;
}

int cmd_translate(const TranslateArgs& a) {
  RunConfig rc = RunConfig::resolve(
      {},
      {},
      {{"beam", std::to_string(a.beam)},
       {"alpha", std::to_string(a.alpha)},
       {"max_new_tokens", std::to_string(a.max_new_tokens)},
       {"direction", a.direction}});
  log_resolved(rc);
  if (checkpoint_is_f64(a.model)) return run_translate<double>(a);
  return run_translate<float>(a);
}

// ---------------------------------------------------------------------------
// backtranslate
// ---------------------------------------------------------------------------

struct BacktranslateArgs {
  std::string input, out, direction = "it-en", mt_url;
  int timeout = 30;
};

int cmd_backtranslate(const BacktranslateArgs& a) {
  RunConfig rc = RunConfig::resolve(
      {}, {}, {{"direction", a.direction}, {"mt_url", a.mt_url}});
  log_resolved(rc);
  if (a.mt_url.empty())
    throw ConfigError(
        "backtranslate requires --mt-url or DIETA_MT_URL (stub:upper for "
        "offline runs)");
  auto mt = make_mt_client(a.mt_url, a.timeout);
  auto lines = read_lines(a.input);
  auto r = backtranslate(lines, *mt, mt_direction_from_string(a.direction));
  write_tsv_corpus(a.out, r.pairs);
  std::cout << "wrote " << r.pairs.size() << " synthetic pairs to " << a.out
            << " (" << r.skipped << " skipped)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string hyp, ref, src, report, system = "system", direction = "en->it";
  std::string scorer_url, scorer_name = "external";
  bool scorer_needs_ref = false;
  bool no_smoothing = false;
  int timeout = 30;
};

int cmd_eval(const EvalArgs& a) {
  RunConfig rc = RunConfig::resolve(
      {}, {},
      {{"system", a.system},
       {"direction", a.direction},
       {"smoothing", a.no_smoothing ? "0" : "1"}});
  log_resolved(rc);
  auto hyp = read_lines(a.hyp);
  auto ref = read_lines(a.ref);
  MetricReport report;
  report.system = a.system;
  const double b = bleu(hyp, ref, !a.no_smoothing);
  const double c = chrf(hyp, ref);
  report.scores[a.direction]["bleu"] = b;
  report.scores[a.direction]["chrf"] = c;
  std::cerr << "signature: BLEU-4|tok:13a|smooth:"
            << (a.no_smoothing ? "none" : "exp") << "|case:mixed"
            << "  chrF2|order:6|beta:2|space:removed\n";
  std::cout << "BLEU " << std::fixed << std::setprecision(2) << b << "\n";
  std::cout << "chrF " << std::fixed << std::setprecision(2) << c << "\n";

  if (!a.scorer_url.empty()) {
    auto scorer = make_scorer_client(a.scorer_url, a.timeout,
                                     a.scorer_needs_ref, a.scorer_name);
    std::vector<std::string> sources =
        a.src.empty() ? std::vector<std::string>(hyp.size(), "")
                      : read_lines(a.src);
    std::optional<std::vector<std::string>> refs;
    if (a.scorer_needs_ref) refs = ref;
    auto ext = score_external(hyp, sources, refs, *scorer);
    if (ext.ok) {
      report.scores[a.direction][a.scorer_name] = ext.mean;
      std::cout << a.scorer_name << " " << std::setprecision(4) << ext.mean
                << "\n";
    } else {
      report.scores[a.direction][a.scorer_name] = std::nullopt;
      std::cerr << "warning: scorer " << a.scorer_name
                << " unavailable: " << ext.error << "\n";
    }
  }

  if (!a.report.empty()) {
    auto rendered = render_report({report});
    std::ofstream f(a.report, std::ios::binary);
    if (!f) throw IoError("cannot write report " + a.report);
    f << rendered.tsv;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DIETA Italian-English translation toolkit"};
  app.require_subcommand(1);

  PrepareArgs prep;
  auto* sp = app.add_subcommand("prepare",
                                "dedup, filter, format and shuffle a corpus");
  sp->add_option("--english", prep.english, "English side, one line per pair");
  sp->add_option("--italian", prep.italian, "Italian side, one line per pair");
  sp->add_option("--tsv", prep.tsv, "single TSV corpus english<TAB>italian[<TAB>tag]");
  sp->add_option("--out", prep.out, "output samples file")->required();
  sp->add_option("--stats", prep.stats_path, "write stats TSV here");
  sp->add_option("--rejections", prep.rejections, "rejection log TSV");
  sp->add_option("--config", prep.config, "key=value config file");
  sp->add_option("--seed", prep.seed, "shuffle seed");
  sp->add_option("--tag", prep.tag, "provenance tag for aligned files");
  sp->add_flag("--filter", prep.filter, "run the judge filter");
  sp->add_option("--judge-url", prep.judge_url, "judge endpoint or stub:yes")
      ->envname("DIETA_JUDGE_URL");
  sp->add_option("--timeout", prep.timeout, "endpoint timeout seconds");

  TrainTokArgs tok;
  auto* st = app.add_subcommand("train-tokenizer", "train the subword vocabulary");
  st->add_option("--input", tok.input, "sample text, one per line")->required();
  st->add_option("--vocab-size", tok.vocab_size, "target vocabulary size");
  st->add_option("--out", tok.out, "output vocab file")->required();

  TrainArgs tr;
  auto* str_ = app.add_subcommand("train", "train or continue a model");
  str_->add_option("--data", tr.data, "prepared samples file(s)")->required();
  str_->add_option("--vocab", tr.vocab, "vocab file")->required();
  str_->add_option("--out", tr.out, "checkpoint output path")->required();
  str_->add_option("--recipe", tr.recipe,
                   "DIETA | +BT | +cont | +nosynth | +allsynth");
  str_->add_option("--init-from", tr.init_from,
                   "starting checkpoint for continued recipes");
  str_->add_option("--resume", tr.resume, "resume an interrupted run");
  str_->add_option("--metrics", tr.metrics, "metrics TSV path");
  str_->add_option("--config", tr.config, "key=value config file");
  str_->add_option("--steps", tr.steps, "optimizer steps (0: epochs*batches)");
  str_->add_option("--epochs", tr.epochs, "epochs when --steps is 0");
  str_->add_option("--batch-tokens", tr.batch_tokens, "token budget per batch");
  str_->add_option("--max-seq-len", tr.max_seq_len, "training length cap");
  str_->add_option("--checkpoint-interval", tr.checkpoint_interval,
                   "also checkpoint every N steps");
  str_->add_option("--peak-lr", tr.peak_lr, "peak learning rate");
  str_->add_option("--warmup", tr.warmup, "warmup fraction of total steps");
  str_->add_option("--floor-lr", tr.floor_lr, "final learning rate");
  str_->add_option("--beta1", tr.beta1, "Lion beta1");
  str_->add_option("--beta2", tr.beta2, "Lion beta2");
  str_->add_option("--weight-decay", tr.weight_decay, "Lion weight decay");
  str_->add_option("--seed", tr.seed, "weight init seed");
  str_->add_flag("--f64", tr.f64, "train in 64-bit determinism mode");
  str_->add_option("--d-model", tr.d_model, "hidden width");
  str_->add_option("--n-heads", tr.n_heads, "attention heads");
  str_->add_option("--n-layers", tr.n_layers, "decoder layers");
  str_->add_option("--ffn-mult", tr.ffn_mult, "feed-forward expansion");
  str_->add_option("--model-vocab", tr.model_vocab,
                   "model vocab size (0: from tokenizer)");
  str_->add_option("--model-max-seq", tr.model_max_seq, "model length limit");
  str_->add_flag("--tie-output", tr.tie_output,
                 "tie the output head to the embedding");

  TranslateArgs tl;
  auto* stl = app.add_subcommand("translate", "translate a file line by line");
  stl->add_option("--model", tl.model, "checkpoint")->required();
  stl->add_option("--vocab", tl.vocab, "vocab file")->required();
  stl->add_option("--direction", tl.direction, "en-it or it-en");
  stl->add_option("--input", tl.input, "input file, one sentence per line")
      ->required();
  stl->add_option("--output", tl.output, "output file (default stdout)");
  stl->add_option("--beam", tl.beam, "beam width (1 = greedy)");
  stl->add_option("--max-new-tokens", tl.max_new_tokens, "generation budget");
  stl->add_option("--alpha", tl.alpha, "length penalty exponent");

  BacktranslateArgs bt;
  auto* sbt = app.add_subcommand("backtranslate",
                                 "synthesize pairs from monolingual text");
  sbt->add_option("--input", bt.input, "monolingual lines")->required();
  sbt->add_option("--out", bt.out, "output TSV corpus")->required();
  sbt->add_option("--direction", bt.direction,
                  "MT direction consuming the input (it-en or en-it)");
  sbt->add_option("--mt-url", bt.mt_url, "MT endpoint or stub:upper")
      ->envname("DIETA_MT_URL");
  sbt->add_option("--timeout", bt.timeout, "endpoint timeout seconds");

  EvalArgs ev;
  auto* sev = app.add_subcommand("eval", "score hypotheses against references");
  sev->add_option("--hyp", ev.hyp, "hypothesis file")->required();
  sev->add_option("--ref", ev.ref, "reference file")->required();
  sev->add_option("--src", ev.src, "source file for QE scorers");
  sev->add_option("--report", ev.report, "write a report TSV here");
  sev->add_option("--system", ev.system, "system name for the report");
  sev->add_option("--direction", ev.direction, "en->it or it->en");
  sev->add_option("--scorer-url", ev.scorer_url,
                  "external scorer endpoint or stub:constant:<v>")
      ->envname("DIETA_SCORER_URL");
  sev->add_option("--scorer-name", ev.scorer_name, "metric name in the report");
  sev->add_flag("--scorer-needs-ref", ev.scorer_needs_ref,
                "scorer is reference-based");
  sev->add_flag("--no-smoothing", ev.no_smoothing, "disable BLEU smoothing");
  sev->add_option("--timeout", ev.timeout, "endpoint timeout seconds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (sp->parsed()) return cmd_prepare(prep, sp);
    if (st->parsed()) return cmd_train_tokenizer(tok);
    if (str_->parsed()) return cmd_train(tr, str_);
    if (stl->parsed()) return cmd_translate(tl);
    if (sbt->parsed()) return cmd_backtranslate(bt);
    if (sev->parsed()) return cmd_eval(ev);
  } catch (const dieta::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
