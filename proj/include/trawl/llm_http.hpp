#pragma once

#include <cstdlib>
#include <stdexcept>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "trawl/encoder.hpp"
#include "trawl/knowledge.hpp"

namespace trawl::knowledge {

struct ParsedUrl {
  std::string base;  // scheme://host[:port]
  std::string path;  // /...
};

inline ParsedUrl parse_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw std::runtime_error("bad endpoint url: " + url);
  auto path_start = url.find('/', scheme_end + 3);
  ParsedUrl out;
  if (path_start == std::string::npos) {
    out.base = url;
    out.path = "/";
  } else {
    out.base = url.substr(0, path_start);
    out.path = url.substr(path_start);
  }
  return out;
}

// Plain JSON-over-HTTP completion client:
//   request  {"prompt": "...", "max_tokens": n, "temperature": t}
//   response {"text": "..."}
// Credentials come from the environment, never from config files.
class HttpLlmClient : public LanguageModelClient {
 public:
  explicit HttpLlmClient(const std::string& url, const std::string& auth_env = {},
                         int timeout_seconds = 60)
      : url_(parse_url(url)) {
    if (!auth_env.empty()) {
      if (const char* token = std::getenv(auth_env.c_str())) token_ = token;
    }
    timeout_seconds_ = timeout_seconds;
  }

  LlmResponse complete(const LlmRequest& request) override {
    httplib::Client client(url_.base);
    client.set_read_timeout(timeout_seconds_, 0);
    client.set_connection_timeout(timeout_seconds_, 0);
    httplib::Headers headers;
    if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);

    nlohmann::json body{{"prompt", request.prompt},
                        {"max_tokens", request.max_tokens},
                        {"temperature", request.temperature}};
    auto res = client.Post(url_.path, headers, body.dump(), "application/json");
    if (!res) return {false, {}, "transport error: " + httplib::to_string(res.error())};
    if (res->status != 200)
      return {false, {}, "endpoint returned status " + std::to_string(res->status)};
    try {
      auto j = nlohmann::json::parse(res->body);
      return {true, j.at("text").get<std::string>(), {}};
    } catch (const std::exception& e) {
      return {false, {}, std::string("bad response body: ") + e.what()};
    }
  }

  std::string name() const override { return "http"; }

 private:
  ParsedUrl url_;
  std::string token_;
  int timeout_seconds_ = 60;
};

}  // namespace trawl::knowledge

namespace trawl::encoder {

// Remote embedding service:
//   request  {"text": "..."}
//   response {"embedding": [f, f, ...]}
class HttpEncoderBackend : public EncoderBackend {
 public:
  HttpEncoderBackend(const std::string& url, int dim, int timeout_seconds = 60)
      : url_(knowledge::parse_url(url)), dim_(dim), timeout_seconds_(timeout_seconds) {}

  int dim() const override { return dim_; }

  std::vector<double> encode(std::int64_t subject_id, const std::string& text) override {
    httplib::Client client(url_.base);
    client.set_read_timeout(timeout_seconds_, 0);
    nlohmann::json body{{"text", text}};
    auto res = client.Post(url_.path, body.dump(), "application/json");
    if (!res || res->status != 200)
      throw std::runtime_error("encoder endpoint failed for subject " +
                               std::to_string(subject_id));
    auto j = nlohmann::json::parse(res->body);
    auto vec = j.at("embedding").get<std::vector<double>>();
    if (static_cast<int>(vec.size()) != dim_)
      throw std::runtime_error("encoder endpoint returned wrong dim for subject " +
                               std::to_string(subject_id));
    return vec;
  }

  std::string parameter_checksum() const override {
    // remote weights are opaque; the identity is the endpoint itself
    return util::sha256_hex("http-encoder " + url_.base + url_.path + " dim=" +
                            std::to_string(dim_));
  }

  std::string name() const override { return "http"; }

 private:
  knowledge::ParsedUrl url_;
  int dim_;
  int timeout_seconds_;
};

}  // namespace trawl::encoder
