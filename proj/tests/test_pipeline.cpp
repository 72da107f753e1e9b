#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "trawl/pipeline.hpp"

using namespace trawl;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
  auto dir = fs::temp_directory_path() / ("trawl_pipeline_" + tag);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// small synthetic setup so a full run-all stays around a second
config::PipelineConfig mini_config(const fs::path& root, const std::string& provider = "raw") {
  auto cfg = config::validate_config_text(
      "[knowledge]\nprovider = " + provider + "\nllm_stub = true\nk = 5\n" +
      "[encoder]\ndim = 24\n"
      "[behavior]\ncandidate_cap = 50\n"
      "[model]\nid_dim = 8\nmlp_hidden_dims = 16\n"
      "[train]\nbatch_size = 64\nlearning_rate = 0.003\nmax_epochs = 2\npatience = 2\nseed = 11\n"
      "[eval]\narms = " + provider + ":deepfm:full, none:deepfm:full\nnum_seeds = 1\n"
      "[synth]\nnum_users = 120\nnum_items = 40\ninteractions_per_user = 12\nnum_genres = 4\n"
      "seed = 5\n");
  cfg.dataset_dir = (root / "data").string();
  cfg.workdir = (root / "work").string();
  return cfg;
}

}  // namespace

TEST_CASE("run-all produces every artifact on a synthetic dataset") {
  auto root = fresh_dir("runall");
  auto cfg = mini_config(root);
  pipeline::Runner runner(cfg, false, std::nullopt);
  runner.run_stage("synth");
  auto outcomes = runner.run_all();
  REQUIRE(outcomes.size() >= 7);
  for (const auto& o : outcomes) CHECK_FALSE(o.skipped);

  for (const char* f :
       {"interactions.jsonl", "split.jsonl", "ingest_report.json", "links.jsonl",
        "unlinked.jsonl", "knowledge_raw.jsonl", "emb_user_raw.emb", "emb_item_raw.emb",
        "pairs_user.jsonl", "pairs_item.jsonl", "checkpoint.ckpt", "train_log.jsonl",
        "train_summary.json", "reports.jsonl", "manifest.json"})
    CHECK_MESSAGE(fs::exists(root / "work" / f), f);

  // reports: 2 arms x 1 seed + 2 summary rows
  auto reports = eval::reports_from_jsonl(util::read_file(root / "work" / "reports.jsonl"));
  CHECK(reports.size() == 2);
  for (const auto& r : reports) {
    CHECK(r.auc >= 0.0);
    CHECK(r.auc <= 1.0);
    CHECK(r.logloss >= 0.0);
  }

  // train log rows carry the four loss components
  auto lines = util::read_lines(root / "work" / "train_log.jsonl");
  REQUIRE_FALSE(lines.empty());
  auto j = nlohmann::json::parse(lines[0]);
  CHECK(j.contains("L_rec"));
  CHECK(j.contains("L_uu"));
  CHECK(j.contains("L_ii"));
  CHECK(j.contains("total"));
  fs::remove_all(root);
}

TEST_CASE("second run skips all stages via the manifest, force reruns") {
  auto root = fresh_dir("skip");
  auto cfg = mini_config(root);
  {
    pipeline::Runner runner(cfg, false, std::nullopt);
    runner.run_stage("synth");
    runner.run_all();
  }
  {
    pipeline::Runner runner(cfg, false, std::nullopt);
    auto outcomes = runner.run_all();
    for (const auto& o : outcomes) CHECK_MESSAGE(o.skipped, o.stage);
  }
  {
    pipeline::Runner runner(cfg, true, std::nullopt);
    auto outcomes = runner.run_all();
    for (const auto& o : outcomes) CHECK_FALSE(o.skipped);
  }
  fs::remove_all(root);
}

TEST_CASE("changing a stage input re-runs only affected stages") {
  auto root = fresh_dir("invalidate");
  auto cfg = mini_config(root);
  {
    pipeline::Runner runner(cfg, false, std::nullopt);
    runner.run_stage("synth");
    runner.run_all();
  }
  // a behavior-section change must invalidate mine but not ingest/link
  auto cfg2 = cfg;
  cfg2.swing_alpha = 2.0;
  {
    pipeline::Runner runner(cfg2, false, std::nullopt);
    auto i = runner.run_stage("ingest");
    CHECK(i.skipped);
    auto l = runner.run_stage("link");
    CHECK(l.skipped);
    auto m = runner.run_stage("mine");
    CHECK_FALSE(m.skipped);
  }
  fs::remove_all(root);
}

TEST_CASE("two run-alls in distinct workdirs are byte-identical") {
  auto root = fresh_dir("determinism");
  auto cfg1 = mini_config(root);
  cfg1.workdir = (root / "work1").string();
  auto cfg2 = mini_config(root);
  cfg2.workdir = (root / "work2").string();

  pipeline::Runner r1(cfg1, false, std::nullopt);
  r1.run_stage("synth");
  r1.run_all();
  pipeline::Runner r2(cfg2, false, std::nullopt);
  r2.run_all();  // same dataset dir, fresh workdir

  for (const char* f : {"interactions.jsonl", "split.jsonl", "links.jsonl", "knowledge_raw.jsonl",
                        "pairs_user.jsonl", "pairs_item.jsonl", "reports.jsonl",
                        "train_log.jsonl", "checkpoint.ckpt", "emb_user_raw.emb",
                        "emb_item_raw.emb"})
    CHECK_MESSAGE(util::file_sha256_hex(root / "work1" / f) ==
                      util::file_sha256_hex(root / "work2" / f),
                  f);
  fs::remove_all(root);
}

TEST_CASE("missing upstream artifacts name the stage to run first") {
  auto root = fresh_dir("missing");
  auto cfg = mini_config(root);
  pipeline::Runner runner(cfg, false, std::nullopt);
  runner.run_stage("synth");
  CHECK_THROWS_WITH_AS(runner.run_stage("mine"), doctest::Contains("ingest"),
                       std::runtime_error);
  runner.run_stage("ingest");
  CHECK_THROWS_WITH_AS(runner.run_stage("generate"), doctest::Contains("link"),
                       std::runtime_error);
  runner.run_stage("link");
  CHECK_THROWS_WITH_AS(runner.run_stage("encode"), doctest::Contains("generate"),
                       std::runtime_error);
  fs::remove_all(root);
}

TEST_CASE("llm provider with stub client writes cache and knowledge artifacts") {
  auto root = fresh_dir("llm");
  auto cfg = mini_config(root, "llm");
  cfg.synth_config.num_users = 40;
  cfg.synth_config.num_items = 20;
  cfg.eval_arms = {config::EvalArm{config::KnowledgeProvider::llm,
                                   model::BackboneKind::deepfm, config::Ablation::full}};
  pipeline::Runner runner(cfg, false, std::nullopt);
  runner.run_stage("synth");
  runner.run_stage("ingest");
  runner.run_stage("link");
  auto g = runner.run_stage("generate");
  CHECK_FALSE(g.skipped);
  CHECK(fs::exists(root / "work" / "knowledge_llm.jsonl"));
  CHECK(fs::exists(root / "work" / "llm_cache.jsonl"));
  // default templates materialized into the workdir
  CHECK(fs::exists(root / "work" / "templates" / "user_prompt.txt"));
  CHECK(fs::exists(root / "work" / "templates" / "item_prompt.txt"));

  auto rows = knowledge::knowledge_from_jsonl(
      util::read_file(root / "work" / "knowledge_llm.jsonl"));
  bool item_with_text = false;
  for (const auto& r : rows)
    if (r.target == Target::item && !r.text.empty()) item_with_text = true;
  CHECK(item_with_text);

  // one cache line per distinct prompt; identical prompts share an entry
  auto cache_lines = util::read_lines(root / "work" / "llm_cache.jsonl");
  CHECK(cache_lines.size() > 0);
  CHECK(cache_lines.size() <= rows.size());

  // re-running generate with --force hits the cache only
  pipeline::Runner runner2(cfg, true, std::nullopt);
  auto counting = std::make_shared<knowledge::FailingLlmClient>();
  runner2.set_llm_client(counting);
  runner2.run_stage("generate");
  CHECK(counting->calls() == 0);  // everything came from the cache
  fs::remove_all(root);
}

TEST_CASE("external-file provider serves precomputed texts") {
  auto root = fresh_dir("external");
  auto cfg = mini_config(root);
  cfg.provider = config::KnowledgeProvider::external_file;
  cfg.synth_config.num_users = 30;
  cfg.synth_config.num_items = 10;
  cfg.eval_arms.clear();
  cfg.eval_arms.push_back(config::EvalArm{config::KnowledgeProvider::external_file,
                                          model::BackboneKind::deepfm, config::Ablation::full});

  std::vector<knowledge::RecKnowledge> provided;
  for (int i = 0; i < 10; ++i)
    provided.push_back({Target::item, i, "summary of item " + std::to_string(i),
                        knowledge::ProviderTag::external_file});
  for (int u = 0; u < 30; ++u)
    provided.push_back({Target::user, u, "summary of user " + std::to_string(u),
                        knowledge::ProviderTag::external_file});
  util::atomic_write_file(root / "provided.jsonl", knowledge::knowledge_to_jsonl(provided));
  cfg.external_knowledge_file = (root / "provided.jsonl").string();

  pipeline::Runner runner(cfg, false, std::nullopt);
  runner.run_stage("synth");
  runner.run_stage("ingest");
  runner.run_stage("link");
  runner.run_stage("generate");
  auto rows = knowledge::knowledge_from_jsonl(
      util::read_file(root / "work" / "knowledge_external-file.jsonl"));
  bool found = false;
  for (const auto& r : rows)
    if (r.target == Target::item && r.subject_id == 3) {
      CHECK(r.text == "summary of item 3");
      CHECK(r.provider_tag == knowledge::ProviderTag::external_file);
      found = true;
    }
  CHECK(found);
  fs::remove_all(root);
}

TEST_CASE("sweep stage emits one report per grid point plus a table") {
  auto root = fresh_dir("sweep");
  auto cfg = mini_config(root);
  cfg.synth_config.num_users = 60;
  cfg.synth_config.num_items = 24;
  cfg.sweep_parameter = "tau";
  cfg.sweep_grid = {0.05, 0.15, 0.5};
  pipeline::Runner runner(cfg, false, std::nullopt);
  runner.run_stage("synth");
  runner.run_stage("ingest");
  runner.run_stage("link");
  runner.run_stage("generate");
  runner.run_stage("encode");
  runner.run_stage("mine");
  runner.run_stage("sweep");

  auto reports = eval::reports_from_jsonl(
      util::read_file(root / "work" / "sweep_reports.jsonl"));
  CHECK(reports.size() == 3);
  auto table = util::read_lines(root / "work" / "sweep_table.tsv");
  REQUIRE(table.size() == 4);
  CHECK(table[0] == "parameter\tvalue\tval_auc\tval_logloss\tseed");
  fs::remove_all(root);
}

TEST_CASE("run-all equals running the stages individually in order") {
  auto root = fresh_dir("equiv");
  auto cfg_all = mini_config(root);
  cfg_all.workdir = (root / "work_all").string();
  auto cfg_steps = mini_config(root);
  cfg_steps.workdir = (root / "work_steps").string();

  pipeline::Runner all(cfg_all, false, std::nullopt);
  all.run_stage("synth");
  all.run_all();

  pipeline::Runner steps(cfg_steps, false, std::nullopt);
  for (const char* stage : {"ingest", "link", "generate", "encode", "mine", "train", "evaluate"})
    steps.run_stage(stage);

  for (const char* f : {"interactions.jsonl", "split.jsonl", "links.jsonl", "knowledge_raw.jsonl",
                        "emb_user_raw.emb", "emb_item_raw.emb", "pairs_user.jsonl",
                        "pairs_item.jsonl", "checkpoint.ckpt", "train_log.jsonl",
                        "reports.jsonl"})
    CHECK_MESSAGE(util::file_sha256_hex(root / "work_all" / f) ==
                      util::file_sha256_hex(root / "work_steps" / f),
                  f);
  fs::remove_all(root);
}

TEST_CASE("ml1m-format dataset flows through ingest") {
  auto root = fresh_dir("ml1m");
  fs::create_directories(root / "data");
  util::atomic_write_file(root / "data" / "ratings.dat",
                          "1::10::5::100\n1::11::2::200\n2::10::4::300\n3::11::4::400\n"
                          "4::10::1::500\n5::11::5::600\n");
  util::atomic_write_file(root / "data" / "movies.dat",
                          "10::Adventure Film (1994)::Adventure\n11::Quiet Film::Drama\n");
  util::atomic_write_file(root / "data" / "users.dat",
                          "1::F::25::4::00000\n2::M::35::2::00000\n3::F::18::1::00000\n"
                          "4::M::45::3::00000\n5::F::50::5::00000\n");
  util::atomic_write_file(
      root / "data" / "corpus.jsonl",
      "{\"doc_id\":1,\"title\":\"Adventure Film\",\"text\":\"an expedition story\"}\n"
      "{\"doc_id\":2,\"title\":\"Quiet Film\",\"text\":\"family secrets surface\"}\n");

  auto cfg = config::validate_config_text(
      "[paths]\nformat = ml1m\n[split]\nratio = 3, 1, 1\n");
  cfg.dataset_dir = (root / "data").string();
  cfg.workdir = (root / "work").string();
  pipeline::Runner runner(cfg, false, std::nullopt);
  runner.run_stage("ingest");
  runner.run_stage("link");

  auto labeled = corpus::labeled_from_jsonl(util::read_file(root / "work" / "interactions.jsonl"));
  CHECK(labeled.size() == 6);
  auto links = corpus::links_from_jsonl(util::read_file(root / "work" / "links.jsonl"));
  CHECK(links.size() == 2);  // the year-suffixed title still clears min_score
  auto report = nlohmann::json::parse(util::read_file(root / "work" / "ingest_report.json"));
  CHECK(report.at("users").get<int>() == 5);
  CHECK(report.at("items").get<int>() == 2);
  fs::remove_all(root);
}

TEST_CASE("a din arm runs end to end through evaluate") {
  auto root = fresh_dir("din");
  auto cfg = mini_config(root);
  cfg.synth_config.num_users = 80;
  cfg.synth_config.num_items = 24;
  cfg.model_config.backbone.history_len_cap = 6;
  cfg.eval_arms = {config::EvalArm{config::KnowledgeProvider::raw, model::BackboneKind::din,
                                   config::Ablation::full}};
  pipeline::Runner runner(cfg, false, std::nullopt);
  runner.run_stage("synth");
  runner.run_all();
  auto reports = eval::reports_from_jsonl(util::read_file(root / "work" / "reports.jsonl"));
  REQUIRE(reports.size() == 1);
  CHECK(reports[0].backbone == "din");
  CHECK(reports[0].auc > 0.0);
  CHECK(reports[0].auc < 1.0);
  fs::remove_all(root);
}
