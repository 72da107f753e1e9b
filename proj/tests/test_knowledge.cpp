#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "trawl/knowledge.hpp"

using namespace trawl;
using corpus::LabeledInteraction;
namespace fs = std::filesystem;

namespace {

const std::string kItemTemplate =
    "Task for a recommender system.\n"
    "### Knowledge\n{{knowledge}}\n"
    "### Key factors\n{{factors}}\n"
    "### Instructions\nExtract what matters.\n";

const std::string kUserTemplate =
    "Task for a recommender system.\n"
    "### Profile\n{{profile}}\n"
    "### Knowledge\n{{knowledge}}\n"
    "### Key factors\n{{factors}}\n"
    "### Instructions\nSummarize this user's tastes.\n";

fs::path temp_dir(const std::string& tag) {
  auto dir = fs::temp_directory_path() / ("trawl_knowledge_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("user raw knowledge concatenates most recent k docs in ascending time order") {
  std::map<corpus::ItemId, std::string> bodies{{1, "A"}, {2, "B"}, {3, "C"}};
  std::vector<LabeledInteraction> hist{{7, 1, 1, 100}, {7, 2, 1, 200}, {7, 3, 0, 300}};

  CHECK(knowledge::build_user_raw_knowledge(7, hist, bodies, 2, " + ") == "B + C");
  CHECK(knowledge::build_user_raw_knowledge(7, hist, bodies, 5, " + ") == "A + B + C");
  CHECK(knowledge::build_user_raw_knowledge(7, hist, bodies, 1, " + ") == "C");
  CHECK_THROWS(knowledge::build_user_raw_knowledge(7, hist, bodies, 0));
}

TEST_CASE("user raw knowledge skips items without docs and foreign users") {
  std::map<corpus::ItemId, std::string> bodies{{1, "A"}, {3, "C"}};
  std::vector<LabeledInteraction> hist{
      {7, 1, 1, 100}, {7, 2, 1, 200}, {7, 3, 1, 300}, {8, 3, 1, 400}};
  CHECK(knowledge::build_user_raw_knowledge(7, hist, bodies, 2, "|") == "A|C");
  CHECK(knowledge::build_user_raw_knowledge(99, hist, bodies, 3) == "");
}

TEST_CASE("user raw knowledge dedupes repeat items by latest interaction") {
  std::map<corpus::ItemId, std::string> bodies{{1, "A"}, {2, "B"}};
  std::vector<LabeledInteraction> hist{{7, 1, 1, 100}, {7, 2, 1, 200}, {7, 1, 1, 300}};
  // item 1 reappears at ts 300, so order is B (200) then A (300)
  CHECK(knowledge::build_user_raw_knowledge(7, hist, bodies, 2, "|") == "B|A");
}

TEST_CASE("user raw knowledge length is bounded by constituents plus separators") {
  std::map<corpus::ItemId, std::string> bodies;
  std::vector<LabeledInteraction> hist;
  std::size_t sum = 0;
  for (int i = 0; i < 6; ++i) {
    std::string body(static_cast<std::size_t>(10 + i), 'x');
    sum += body.size();
    bodies[i] = body;
    hist.push_back({1, i, 1, i});
  }
  auto text = knowledge::build_user_raw_knowledge(1, hist, bodies, 4, "--");
  CHECK(text.size() <= sum + 2 * 3);
}

TEST_CASE("build_prompt substitutes placeholders and keeps factors verbatim") {
  knowledge::KeyFactorSet factors{{"genres", "themes", "awards"}};
  auto p = knowledge::build_prompt(Target::item, 42, "Some raw body.", std::nullopt, factors,
                                   kItemTemplate);
  CHECK(p.subject_id == 42);
  for (const auto& f : factors.factors) CHECK(p.text.find(f) != std::string::npos);
  CHECK(p.text.find("Some raw body.") != std::string::npos);
  CHECK(p.text.find("{{") == std::string::npos);

  // byte-identical across calls
  auto q = knowledge::build_prompt(Target::item, 42, "Some raw body.", std::nullopt, factors,
                                   kItemTemplate);
  CHECK(p.text == q.text);
}

TEST_CASE("user prompt renders profile when present, omits section when absent") {
  knowledge::KeyFactorSet factors{{"genres"}};
  knowledge::UserProfile profile{9, {{"age", "25-34"}, {"occupation", "writer"}}};
  auto with = knowledge::build_prompt(Target::user, 9, "K", profile, factors, kUserTemplate);
  CHECK(with.text.find("age: 25-34") != std::string::npos);
  CHECK(with.text.find("occupation: writer") != std::string::npos);

  auto without = knowledge::build_prompt(Target::user, 9, "K", std::nullopt, factors,
                                         kUserTemplate);
  CHECK(without.text.find("age:") == std::string::npos);
  CHECK(without.text.find("### Profile") != std::string::npos);
}

TEST_CASE("build_prompt validates template placeholders and factors") {
  knowledge::KeyFactorSet factors{{"genres"}};
  CHECK_THROWS(knowledge::build_prompt(Target::item, 1, "K", std::nullopt, factors,
                                       "no placeholders here"));
  CHECK_THROWS(knowledge::build_prompt(Target::user, 1, "K", std::nullopt, factors,
                                       kItemTemplate));  // user needs {{profile}}
  CHECK_THROWS(knowledge::build_prompt(Target::item, 1, "K", std::nullopt,
                                       knowledge::KeyFactorSet{{}}, kItemTemplate));
  CHECK_THROWS(knowledge::build_prompt(Target::item, 1, "K", std::nullopt,
                                       knowledge::KeyFactorSet{{"a", "a"}}, kItemTemplate));
  // empty knowledge is fine
  auto p = knowledge::build_prompt(Target::item, 1, "", std::nullopt, factors, kItemTemplate);
  CHECK(p.text.find("### Knowledge") != std::string::npos);
}

TEST_CASE("stub client echoes a truncation of the knowledge section") {
  knowledge::KeyFactorSet factors{{"genres"}};
  std::string body(400, 'k');
  auto prompt = knowledge::build_prompt(Target::item, 1, body, std::nullopt, factors,
                                        kItemTemplate);
  knowledge::StubLlmClient stub(200);
  auto rk = knowledge::extract_knowledge(prompt, stub, nullptr, body);
  CHECK(rk.provider_tag == knowledge::ProviderTag::llm);
  CHECK(rk.text == body.substr(0, 200));
}

TEST_CASE("cache makes repeat extraction hit zero client calls") {
  auto dir = temp_dir("cache");
  knowledge::KeyFactorSet factors{{"genres"}};
  auto prompt = knowledge::build_prompt(Target::item, 5, "body text", std::nullopt, factors,
                                        kItemTemplate);
  {
    knowledge::KnowledgeCache cache(dir / "cache.jsonl");
    knowledge::StubLlmClient stub;
    knowledge::ExtractStats stats;
    auto first = knowledge::extract_knowledge(prompt, stub, &cache, "body text", {}, &stats);
    CHECK(stats.client_calls == 1);
    auto second = knowledge::extract_knowledge(prompt, stub, &cache, "body text", {}, &stats);
    CHECK(second.text == first.text);
    CHECK(stats.client_calls == 1);
    CHECK(stats.cache_hits == 1);
    CHECK(stub.calls() == 1);
  }
  {
    // a fresh run sharing the cache file never calls the client
    knowledge::KnowledgeCache cache(dir / "cache.jsonl");
    knowledge::StubLlmClient stub;
    knowledge::ExtractStats stats;
    auto again = knowledge::extract_knowledge(prompt, stub, &cache, "body text", {}, &stats);
    CHECK(stub.calls() == 0);
    CHECK(stats.cache_hits == 1);
    CHECK(again.provider_tag == knowledge::ProviderTag::llm);
  }
  fs::remove_all(dir);
}

TEST_CASE("hard client failure falls back to raw knowledge after bounded retries") {
  knowledge::KeyFactorSet factors{{"genres"}};
  auto prompt = knowledge::build_prompt(Target::user, 2, "the raw text",
                                        knowledge::UserProfile{2, {}}, factors, kUserTemplate);
  knowledge::FailingLlmClient failing;
  knowledge::ExtractOptions options;
  options.max_attempts = 3;
  options.backoff_ms = 0;
  knowledge::ExtractStats stats;
  auto rk = knowledge::extract_knowledge(prompt, failing, nullptr, "the raw text", options,
                                         &stats);
  CHECK(failing.calls() == 3);
  CHECK(stats.failures == 1);
  CHECK(rk.provider_tag == knowledge::ProviderTag::raw);
  CHECK(rk.text == "the raw text");

  options.fallback = knowledge::LlmFallback::empty;
  auto rk2 = knowledge::extract_knowledge(prompt, failing, nullptr, "the raw text", options);
  CHECK(rk2.text.empty());
}

TEST_CASE("knowledge rows round trip through jsonl") {
  std::vector<knowledge::RecKnowledge> rows{
      {Target::user, 1, "likes slow dramas", knowledge::ProviderTag::llm},
      {Target::item, 2, "a heist classic", knowledge::ProviderTag::raw},
      {Target::item, 3, "", knowledge::ProviderTag::external_file}};
  auto text = knowledge::knowledge_to_jsonl(rows);
  auto back = knowledge::knowledge_from_jsonl(text);
  REQUIRE(back.size() == 3);
  CHECK(back[0].target == Target::user);
  CHECK(back[0].text == "likes slow dramas");
  CHECK(back[1].provider_tag == knowledge::ProviderTag::raw);
  CHECK(back[2].provider_tag == knowledge::ProviderTag::external_file);
}

#include <atomic>
#include <thread>

#include <httplib.h>

#include "trawl/llm_http.hpp"

namespace {

struct LocalServer {
  httplib::Server server;
  int port = 0;
  std::thread thread;

  explicit LocalServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
    server.Post("/v1/complete", std::move(handler));
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~LocalServer() {
    server.stop();
    thread.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port) + "/v1/complete"; }
};

}  // namespace

TEST_CASE("http client round trips prompt and decoding parameters") {
  std::string seen_auth;
  LocalServer server([&](const httplib::Request& req, httplib::Response& res) {
    auto j = nlohmann::json::parse(req.body);
    seen_auth = req.get_header_value("Authorization");
    nlohmann::json out{{"text", "echo: " + j.at("prompt").get<std::string>() + " @" +
                                    std::to_string(j.at("max_tokens").get<int>())}};
    res.set_content(out.dump(), "application/json");
  });

  setenv("TRAWL_TEST_TOKEN", "sekrit", 1);
  knowledge::HttpLlmClient client(server.url(), "TRAWL_TEST_TOKEN");
  auto response = client.complete({"hello", 42, 0.0});
  REQUIRE(response.ok);
  CHECK(response.text == "echo: hello @42");
  CHECK(seen_auth == "Bearer sekrit");
  unsetenv("TRAWL_TEST_TOKEN");
}

TEST_CASE("http client reports transport and status failures, retries recover") {
  std::atomic<int> hits{0};
  LocalServer server([&](const httplib::Request&, httplib::Response& res) {
    if (hits.fetch_add(1) < 2) {
      res.status = 503;
      return;
    }
    res.set_content("{\"text\":\"recovered\"}", "application/json");
  });

  knowledge::HttpLlmClient client(server.url());
  auto first = client.complete({"x", 8, 0.0});
  CHECK_FALSE(first.ok);
  CHECK(first.error.find("503") != std::string::npos);

  // extract_knowledge retries through the failure window
  knowledge::KeyFactorSet factors{{"genres"}};
  auto prompt = knowledge::build_prompt(Target::item, 1, "body", std::nullopt, factors,
                                        kItemTemplate);
  knowledge::ExtractOptions options;
  options.max_attempts = 3;
  options.backoff_ms = 0;
  auto rk = knowledge::extract_knowledge(prompt, client, nullptr, "body", options);
  CHECK(rk.provider_tag == knowledge::ProviderTag::llm);
  CHECK(rk.text == "recovered");
  CHECK(hits.load() == 3);
}

TEST_CASE("http encoder backend fetches embeddings of the advertised dim") {
  LocalServer server([](const httplib::Request& req, httplib::Response& res) {
    auto j = nlohmann::json::parse(req.body);
    double seed_val = static_cast<double>(j.at("text").get<std::string>().size());
    nlohmann::json out{{"embedding", {seed_val, 1.0, 2.0, 3.0}}};
    res.set_content(out.dump(), "application/json");
  });
  encoder::HttpEncoderBackend backend(server.url(), 4);
  auto v = backend.encode(9, "abcde");
  REQUIRE(v.size() == 4);
  CHECK(v[0] == 5.0);

  encoder::HttpEncoderBackend wrong(server.url(), 7);
  CHECK_THROWS(wrong.encode(9, "abcde"));
}
