#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "dieta/clients.hpp"
#include "dieta/common.hpp"

namespace dieta {

namespace detail {

struct ParsedUrl {
  std::string host_port;  // scheme://host:port
  std::string path;       // leading slash
};

inline ParsedUrl parse_url(const std::string& url) {
  const size_t scheme = url.find("://");
  if (scheme == std::string::npos)
    throw ConfigError("endpoint URL must include a scheme: " + url);
  const size_t path_start = url.find('/', scheme + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

inline nlohmann::json post_json(const std::string& url, int timeout_sec,
                                const nlohmann::json& body) {
  const ParsedUrl parsed = parse_url(url);
  httplib::Client client(parsed.host_port);
  client.set_connection_timeout(timeout_sec, 0);
  client.set_read_timeout(timeout_sec, 0);
  auto res = client.Post(parsed.path, body.dump(), "application/json");
  if (!res)
    throw ProtocolError("no response from " + url + ": " +
                        httplib::to_string(res.error()));
  if (res->status != 200)
    throw ProtocolError("endpoint " + url + " returned status " +
                        std::to_string(res->status));
  nlohmann::json reply = nlohmann::json::parse(res->body, nullptr, false);
  if (reply.is_discarded())
    throw ProtocolError("endpoint " + url + " returned invalid JSON");
  return reply;
}

}  // namespace detail

// {"prompt": string} -> {"reply": string}
class HttpJudgeClient : public JudgeClient {
 public:
  HttpJudgeClient(std::string url, int timeout_sec)
      : url_(std::move(url)), timeout_(timeout_sec) {}
  std::string ask(const std::string& prompt) override {
    auto reply = detail::post_json(url_, timeout_, {{"prompt", prompt}});
    if (!reply.contains("reply") || !reply["reply"].is_string())
      throw ProtocolError("judge endpoint reply missing \"reply\" string");
    return reply["reply"].get<std::string>();
  }

 private:
  std::string url_;
  int timeout_;
};

// {"text": string, "direction": "en-it"|"it-en"} -> {"translation": string}
class HttpMtClient : public MtClient {
 public:
  HttpMtClient(std::string url, int timeout_sec)
      : url_(std::move(url)), timeout_(timeout_sec) {}
  std::string translate(const std::string& text, MtDirection dir) override {
    auto reply = detail::post_json(
        url_, timeout_, {{"text", text}, {"direction", to_string(dir)}});
    if (!reply.contains("translation") || !reply["translation"].is_string())
      throw ProtocolError("MT endpoint reply missing \"translation\" string");
    return reply["translation"].get<std::string>();
  }

 private:
  std::string url_;
  int timeout_;
};

// {"src": [...], "hyp": [...], "ref": [...]?} -> {"scores": [...]}
class HttpScorerClient : public ScorerClient {
 public:
  HttpScorerClient(std::string url, int timeout_sec, bool needs_refs,
                   std::string display_name)
      : url_(std::move(url)),
        timeout_(timeout_sec),
        needs_refs_(needs_refs),
        name_(std::move(display_name)) {}

  bool needs_references() const override { return needs_refs_; }
  std::string name() const override { return name_; }

  std::vector<double> score(
      const std::vector<std::string>& sources,
      const std::vector<std::string>& hypotheses,
      const std::optional<std::vector<std::string>>& references) override {
    nlohmann::json body{{"src", sources}, {"hyp", hypotheses}};
    if (references) body["ref"] = *references;
    auto reply = detail::post_json(url_, timeout_, body);
    if (!reply.contains("scores") || !reply["scores"].is_array())
      throw ProtocolError("scorer endpoint reply missing \"scores\" array");
    std::vector<double> out;
    for (const auto& v : reply["scores"]) out.push_back(v.get<double>());
    if (out.size() != hypotheses.size())
      throw ProtocolError("scorer returned " + std::to_string(out.size()) +
                          " scores for " + std::to_string(hypotheses.size()) +
                          " segments");
    return out;
  }

 private:
  std::string url_;
  int timeout_;
  bool needs_refs_;
  std::string name_;
};

// URL factories. "stub:..." selects a process-local provider so every
// pipeline command can run offline; anything with a scheme is HTTP.
inline std::unique_ptr<JudgeClient> make_judge_client(const std::string& url,
                                                      int timeout_sec) {
  if (url == "stub:yes") return StubJudge::always("yes");
  if (url == "stub:no") return StubJudge::always("no");
  if (url.rfind("stub:", 0) == 0)
    throw ConfigError("unknown judge stub \"" + url + "\"");
  return std::make_unique<HttpJudgeClient>(url, timeout_sec);
}

inline std::unique_ptr<MtClient> make_mt_client(const std::string& url,
                                                int timeout_sec) {
  if (url == "stub:upper") return StubMt::uppercase();
  if (url.rfind("stub:", 0) == 0)
    throw ConfigError("unknown MT stub \"" + url + "\"");
  return std::make_unique<HttpMtClient>(url, timeout_sec);
}

inline std::unique_ptr<ScorerClient> make_scorer_client(const std::string& url,
                                                        int timeout_sec,
                                                        bool needs_refs,
                                                        std::string name) {
  if (url.rfind("stub:constant:", 0) == 0)
    return std::make_unique<StubScorer>(std::stod(url.substr(14)), needs_refs);
  if (url.rfind("stub:", 0) == 0)
    throw ConfigError("unknown scorer stub \"" + url + "\"");
  return std::make_unique<HttpScorerClient>(url, timeout_sec, needs_refs,
                                            std::move(name));
}

}  // namespace dieta
