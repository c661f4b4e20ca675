#pragma once

#include <chrono>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "dieta/common.hpp"

namespace dieta {

// External-service seams. The pipeline and metrics talk to these interfaces;
// process-local stubs back the offline tests and HTTP implementations live in
// http_clients.hpp.

class JudgeClient {
 public:
  virtual ~JudgeClient() = default;
  // Returns the raw reply text; throws ProtocolError on transport failure.
  virtual std::string ask(const std::string& prompt) = 0;
};

enum class MtDirection { EnIt, ItEn };

inline std::string to_string(MtDirection d) {
  return d == MtDirection::EnIt ? "en-it" : "it-en";
}

inline MtDirection mt_direction_from_string(const std::string& s) {
  if (s == "en-it") return MtDirection::EnIt;
  if (s == "it-en") return MtDirection::ItEn;
  throw ConfigError("unknown translation direction \"" + s +
                    "\" (expected en-it or it-en)");
}

class MtClient {
 public:
  virtual ~MtClient() = default;
  virtual std::string translate(const std::string& text, MtDirection dir) = 0;
};

class ScorerClient {
 public:
  virtual ~ScorerClient() = default;
  virtual bool needs_references() const = 0;
  virtual std::vector<double> score(
      const std::vector<std::string>& sources,
      const std::vector<std::string>& hypotheses,
      const std::optional<std::vector<std::string>>& references) = 0;
  virtual std::string name() const = 0;
};

// ---------------------------------------------------------------------------
// Stubs
// ---------------------------------------------------------------------------

class StubJudge : public JudgeClient {
 public:
  explicit StubJudge(std::function<std::string(const std::string&)> fn)
      : fn_(std::move(fn)) {}
  static std::unique_ptr<StubJudge> always(std::string reply) {
    return std::make_unique<StubJudge>(
        [reply](const std::string&) { return reply; });
  }
  std::string ask(const std::string& prompt) override { return fn_(prompt); }

 private:
  std::function<std::string(const std::string&)> fn_;
};

class StubMt : public MtClient {
 public:
  explicit StubMt(std::function<std::string(const std::string&, MtDirection)> fn)
      : fn_(std::move(fn)) {}
  // Uppercases ASCII letters; handy as a visible, invertible "translation".
  static std::unique_ptr<StubMt> uppercase() {
    return std::make_unique<StubMt>([](const std::string& s, MtDirection) {
      std::string out = s;
      for (char& c : out)
        if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
      return out;
    });
  }
  std::string translate(const std::string& text, MtDirection dir) override {
    return fn_(text, dir);
  }

 private:
  std::function<std::string(const std::string&, MtDirection)> fn_;
};

class StubScorer : public ScorerClient {
 public:
  StubScorer(double constant, bool needs_refs)
      : constant_(constant), needs_refs_(needs_refs) {}
  bool needs_references() const override { return needs_refs_; }
  std::vector<double> score(
      const std::vector<std::string>&,
      const std::vector<std::string>& hypotheses,
      const std::optional<std::vector<std::string>>&) override {
    return std::vector<double>(hypotheses.size(), constant_);
  }
  std::string name() const override { return "stub-constant"; }

 private:
  double constant_;
  bool needs_refs_;
};

// One retry with backoff, then rethrow. Transient transport faults should
// not kill a long pipeline run on the spot.
template <typename Fn>
auto with_retry(Fn&& fn, int retries = 1, int backoff_ms = 50)
    -> decltype(fn()) {
  for (int attempt = 0;; ++attempt) {
    try {
      return fn();
    } catch (const ProtocolError&) {
      if (attempt >= retries) throw;
      std::this_thread::sleep_for(std::chrono::milliseconds(backoff_ms));
    }
  }
}

}  // namespace dieta
