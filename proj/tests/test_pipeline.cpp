#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <set>
#include <string>

#include "mcl/checkpoint.hpp"
#include "mcl/pipeline.hpp"

using namespace mcl;
using namespace mcl::pipeline;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

RunConfig tiny_config() {
  RunConfig c;
  c.synthetic.core_vocab = 30;
  c.synthetic.private_vocab = 8;
  c.synthetic.general_sentences = 300;
  c.synthetic.domain_sentences = 120;
  c.synthetic.domains = {"a", "b", "c", "d"};
  c.seen = {"a", "b"};
  c.unseen = {"c", "d"};
  c.nmt.n_layers = 1;
  c.nmt.d_model = 16;
  c.nmt.d_hidden = 32;
  c.lm = c.nmt;
  c.pretrain.epochs = 2;
  c.pretrain.warmup = 20;
  c.general_lm.fit.epochs = 1;
  c.domain_lm.fit.epochs = 1;
  c.schedule.meta_steps = 2;
  c.schedule.tasks_per_step = 2;
  c.schedule.support_tokens = 60;
  c.schedule.query_tokens = 120;
  c.finetune.epochs = 2;
  c.beam = 2;
  c.flip_sign = true;
  return c;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

bool contains(const std::string& s, const std::string& part) {
  return s.find(part) != std::string::npos;
}

std::vector<fs::path> files_under(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("config json round trip and partial overrides") {
  const RunConfig c = tiny_config();
  const RunConfig back = RunConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.hash() == c.hash());

  const RunConfig partial = RunConfig::from_json(
      {{"seed", 9}, {"meta", {{"outer_lr", 0.5}}}, {"schedule", {{"tasks_per_step", 7}}}});
  const RunConfig defaults;
  CHECK(partial.seed == 9);
  CHECK(partial.meta.outer_lr == 0.5);
  CHECK(partial.meta.inner_lr == defaults.meta.inner_lr);
  CHECK(partial.schedule.tasks_per_step == 7);
  CHECK(partial.schedule.meta_steps == defaults.schedule.meta_steps);
  CHECK(partial.nmt == defaults.nmt);
  CHECK(partial.hash() != defaults.hash());
}

TEST_CASE("config validation") {
  CHECK_NOTHROW(tiny_config().validate());
  CHECK_NOTHROW(RunConfig().validate());

  auto overlap = tiny_config();
  overlap.unseen = {"c", "a"};
  CHECK(contains(error_of([&] { overlap.validate(); }), "'a' is listed twice"));

  auto none = tiny_config();
  none.seen.clear();
  CHECK_THROWS_AS(none.validate(), PipelineError);

  auto missing = tiny_config();
  missing.unseen = {"c", "zz"};
  CHECK(contains(error_of([&] { missing.validate(); }), "'zz'"));
}

TEST_CASE("system and sampler names") {
  CHECK(sampler_for(eval::kMetaCurriculum) == "curriculum");
  CHECK(sampler_for(eval::kMetaMt) == "uniform");
  CHECK(system_for("curriculum") == eval::kMetaCurriculum);
  CHECK_THROWS_AS(sampler_for(eval::kVanilla), PipelineError);
  CHECK_THROWS_AS(system_for("random"), PipelineError);
}

TEST_CASE("run directory lock") {
  TempDir tmp("mcl_pipeline_lock");
  const auto c = tiny_config();
  {
    RunDir first(tmp.path, c);
    CHECK(fs::exists(tmp.path / "run.lock"));
    CHECK(contains(error_of([&] { RunDir second(tmp.path, c); }), "locked"));
  }
  CHECK_FALSE(fs::exists(tmp.path / "run.lock"));
  CHECK_NOTHROW(RunDir(tmp.path, c));
}

TEST_CASE("missing prerequisites name the artifact and the command") {
  TempDir tmp("mcl_pipeline_missing");
  const auto c = tiny_config();
  RunDir dir(tmp.path, c);
  const StageOptions opt;
  const auto msg = error_of([&] { stage_pretrain(c, dir, opt); });
  CHECK(contains(msg, "data/manifest.json"));
  CHECK(contains(msg, "metacl gen"));

  stage_gen(c, dir, opt);
  const auto meta = error_of([&] { stage_meta_train(c, dir, "uniform", opt); });
  CHECK(contains(meta, "models/vanilla.ckpt"));
  CHECK(contains(meta, "metacl pretrain"));
  const auto ev = error_of([&] { stage_evaluate(c, dir, eval::kMetaMt, opt); });
  CHECK(contains(ev, "meta/uniform/meta.ckpt"));
  CHECK(contains(ev, "meta-train --sampler uniform"));
  CHECK_FALSE(dir.stage_done("pretrain"));
}

TEST_CASE("tiny pipeline end to end") {
  TempDir tmp("mcl_pipeline_e2e");
  const auto c = tiny_config();
  RunDir dir(tmp.path, c);
  std::vector<std::string> lines;
  StageOptions opt{false, [&](const std::string& s) { lines.push_back(s); }};
  run_all(c, dir, opt);

  for (const char* f : {"config.json", "data/manifest.json", "data/vocab.json", "models/vanilla.ckpt",
                        "lm/general.ckpt", "lm/a.ckpt", "lm/d.ckpt", "scores/a.tsv",
                        "scores/summary.json", "meta/curriculum/meta.ckpt",
                        "meta/curriculum/step_2.ckpt", "meta/uniform/train_log.tsv",
                        "meta/uniform/tasks.json", "finetune/vanilla/c.ckpt",
                        "eval/meta-curriculum/report.json", "eval/vanilla/d.after.hyps.txt",
                        "report.tsv", "report.md"}) {
    CHECK_MESSAGE(fs::exists(tmp.path / f), f);
  }
  const std::string md = read_text(tmp.path / "report.md");
  CHECK(contains(md, "| Meta-Curriculum w/o FT |"));
  CHECK(contains(md, "| Δ Meta-MT |"));
  CHECK(contains(md, "### c (unseen)"));

  SUBCASE("support, query and pool ids are disjoint") {
    const RunData d = load_run_data(dir);
    for (const auto& s : d.manifest.domains) {
      const std::set<int> sup(s.support.begin(), s.support.end());
      const std::set<int> qry(s.query.begin(), s.query.end());
      CHECK(!sup.empty());
      CHECK(!qry.empty());
      for (int id : s.query) CHECK(!sup.contains(id));
      for (int id : s.meta_train_pool) {
        CHECK(!sup.contains(id));
        CHECK(!qry.contains(id));
      }
      const bool seen = s.domain == "a" || s.domain == "b";
      CHECK(seen == !s.meta_train_pool.empty());
      for (const auto& p : d.support(s.domain)) CHECK(p.source.size() <= c.max_len);

      const auto sidecar = nn::load_sidecar(tmp.path / ("finetune/meta-mt/" + s.domain + ".ckpt"));
      CHECK(sidecar.at("support_ids").get<std::vector<int>>() == s.support);
    }
    std::set<int> train_ids;
    for (const auto& p : d.general_train) train_ids.insert(p.id);
    for (const auto& p : d.general_valid) CHECK(!train_ids.contains(p.id));
  }

  SUBCASE("meta-training reads only seen pools") {
    const RunData d = load_run_data(dir);
    const auto tasks = nlohmann::json::parse(read_text(tmp.path / "meta/curriculum/tasks.json"));
    REQUIRE(tasks.size() == 2);
    std::size_t count = 0;
    for (const auto& step : tasks) {
      for (const auto& task : step.at("tasks")) {
        const std::string domain = task.at("domain");
        CHECK((domain == "a" || domain == "b"));
        const auto& pool = d.manifest.find(domain).meta_train_pool;
        const std::set<int> allowed(pool.begin(), pool.end());
        for (const char* key : {"support", "query"}) {
          for (int id : task.at(key).get<std::vector<int>>()) CHECK(allowed.contains(id));
        }
        ++count;
      }
    }
    CHECK(count == 4);
  }

  SUBCASE("completed stages are skipped unless forced") {
    lines.clear();
    CHECK_FALSE(stage_gen(c, dir, opt));
    CHECK_FALSE(stage_report(c, dir, opt));
    CHECK(lines == std::vector<std::string>{"gen: up to date", "report: up to date"});

    const auto before = read_text(tmp.path / "models/vanilla.ckpt");
    CHECK(stage_pretrain(c, dir, StageOptions{true, {}}));
    CHECK(read_text(tmp.path / "models/vanilla.ckpt") == before);
    CHECK(dir.stage_done("score"));
    CHECK_FALSE(dir.stage_done("meta-train-curriculum"));
    CHECK_FALSE(dir.stage_done("evaluate-vanilla"));
    CHECK_FALSE(dir.stage_done("report"));
    CHECK(contains(error_of([&] { stage_finetune(c, dir, eval::kMetaMt, opt); }), "is stale"));
  }
}

TEST_CASE("changed config reruns stages") {
  TempDir tmp("mcl_pipeline_rehash");
  auto c = tiny_config();
  {
    RunDir dir(tmp.path, c);
    stage_gen(c, dir, {});
  }
  c.beam = 1;
  RunDir dir(tmp.path, c);
  CHECK_FALSE(dir.stage_done("gen"));
  CHECK(stage_gen(c, dir, {}));
}

TEST_CASE("identical config and seed give identical artifacts") {
  TempDir a("mcl_pipeline_det_a");
  TempDir b("mcl_pipeline_det_b");
  const auto c = tiny_config();
  {
    RunDir da(a.path, c);
    run_all(c, da, {});
  }
  {
    RunDir db(b.path, c);
    run_all(c, db, {});
  }
  const auto files = files_under(a.path);
  REQUIRE(files == files_under(b.path));
  std::size_t compared = 0;
  for (const auto& f : files) {
    if (f.filename() == "steps.tsv") continue;  // wall-clock timings
    CHECK_MESSAGE(read_text(a.path / f) == read_text(b.path / f), f.string());
    ++compared;
  }
  CHECK(compared > 100);

  auto other = c;
  other.seed = 2;
  TempDir o("mcl_pipeline_det_o");
  RunDir dir(o.path, other);
  stage_gen(other, dir, {});
  CHECK(read_text(o.path / "data/manifest.json") != read_text(a.path / "data/manifest.json"));
}

TEST_CASE("aggregate averages run reports") {
  TempDir a("mcl_pipeline_agg_a");
  TempDir b("mcl_pipeline_agg_b");
  TempDir out("mcl_pipeline_agg_out");
  auto c = tiny_config();
  {
    RunDir d(a.path, c);
    run_all(c, d, {});
  }
  c.schedule.meta_steps = 1;
  {
    RunDir d(b.path, c);
    run_all(c, d, {});
  }
  const std::vector<fs::path> runs{a.path, b.path};
  const auto table = aggregate(runs, out.path);
  const auto ra = load_eval_report(a.path, eval::kMetaCurriculum);
  const auto rb = load_eval_report(b.path, eval::kMetaCurriculum);
  const auto& row = table.row("Meta-Curriculum");
  for (std::size_t i = 0; i < table.unseen.size(); ++i) {
    const auto& dom = table.unseen[i];
    CHECK(row.values[i] ==
          doctest::Approx((ra.domains.at(dom).bleu_after + rb.domains.at(dom).bleu_after) / 2));
  }
  CHECK(fs::exists(out.path / "report.md"));
  CHECK(contains(read_text(out.path / "report.md"), "mean over 2 runs"));

}
