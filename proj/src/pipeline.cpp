#include "mcl/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include "mcl/checkpoint.hpp"
#include "mcl/rng.hpp"

namespace mcl::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Sub-seed salts, one per randomised step of the pipeline.
enum Salt : std::uint64_t {
  kSaltGeneralSplit = 1,
  kSaltDomainSplit,
  kSaltPool,
  kSaltNmtInit,
  kSaltPretrain,
  kSaltLmInit,
  kSaltGeneralLm,
  kSaltDomainLm,
  kSaltTasks,
  kSaltFinetune,
};

json fit_to_json(const nn::FitConfig& f) {
  return {{"optimizer", nn::to_string(f.optimizer)},
          {"lr", f.lr},
          {"noam", f.noam},
          {"warmup", f.warmup},
          {"lr_factor", f.lr_factor},
          {"epochs", f.epochs},
          {"max_steps", f.max_steps},
          {"batch_sentences", f.batch_sentences},
          {"eval_every", f.eval_every},
          {"patience", f.patience},
          {"shuffle", f.shuffle}};
}

nn::FitConfig fit_from_json(const json& j, nn::FitConfig f) {
  if (j.contains("optimizer")) {
    f.optimizer = nn::optimizer_kind_from_string(j.at("optimizer").get<std::string>());
  }
  f.lr = j.value("lr", f.lr);
  f.noam = j.value("noam", f.noam);
  f.warmup = j.value("warmup", f.warmup);
  f.lr_factor = j.value("lr_factor", f.lr_factor);
  f.epochs = j.value("epochs", f.epochs);
  f.max_steps = j.value("max_steps", f.max_steps);
  f.batch_sentences = j.value("batch_sentences", f.batch_sentences);
  f.eval_every = j.value("eval_every", f.eval_every);
  f.patience = j.value("patience", f.patience);
  f.shuffle = j.value("shuffle", f.shuffle);
  return f;
}

json lm_train_to_json(const scoring::LmTrainConfig& c) {
  return {{"fit", fit_to_json(c.fit)}, {"valid_fraction", c.valid_fraction}, {"max_valid", c.max_valid}};
}

scoring::LmTrainConfig lm_train_from_json(const json& j, scoring::LmTrainConfig c) {
  if (j.contains("fit")) c.fit = fit_from_json(j.at("fit"), c.fit);
  c.valid_fraction = j.value("valid_fraction", c.valid_fraction);
  c.max_valid = j.value("max_valid", c.max_valid);
  return c;
}

json schedule_to_json(const curriculum::ScheduleConfig& s) {
  return {{"meta_steps", s.meta_steps},
          {"tasks_per_step", s.tasks_per_step},
          {"width", s.width},
          {"support_tokens", s.support_tokens},
          {"query_tokens", s.query_tokens}};
}

curriculum::ScheduleConfig schedule_from_json(const json& j, curriculum::ScheduleConfig s) {
  s.meta_steps = j.value("meta_steps", s.meta_steps);
  s.tasks_per_step = j.value("tasks_per_step", s.tasks_per_step);
  s.width = j.value("width", s.width);
  s.support_tokens = j.value("support_tokens", s.support_tokens);
  s.query_tokens = j.value("query_tokens", s.query_tokens);
  return s;
}

nn::ModelConfig model_from_json(const json& j, const nn::ModelConfig& defaults) {
  json merged = defaults.to_json();
  merged.update(j);
  return nn::ModelConfig::from_json(merged);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw PipelineError("cannot read " + path.string());
  return json::parse(in);
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

void log(const StageOptions& opt, const std::string& msg) {
  if (opt.log) opt.log(msg);
}

// Stages whose outputs depend on the given stage's outputs.
std::vector<std::string> dependents(const std::string& stage) {
  std::vector<std::string> meta, ft, ev;
  for (const auto& s : systems()) {
    ft.push_back("finetune-" + s);
    ev.push_back("evaluate-" + s);
  }
  meta = {"meta-train-uniform", "meta-train-curriculum"};
  auto cat = [](std::initializer_list<const std::vector<std::string>*> parts) {
    std::vector<std::string> out;
    for (const auto* p : parts) out.insert(out.end(), p->begin(), p->end());
    out.push_back("report");
    return out;
  };
  if (stage == "gen") {
    auto out = cat({&meta, &ft, &ev});
    out.insert(out.begin(), {"pretrain", "train-lm", "score"});
    return out;
  }
  if (stage == "pretrain" || stage == "score") return cat({&meta, &ft, &ev});
  if (stage == "train-lm") {
    auto out = cat({&meta, &ft, &ev});
    out.insert(out.begin(), "score");
    return out;
  }
  for (const auto& s : systems()) {
    if (s != eval::kVanilla && stage == "meta-train-" + sampler_for(s)) {
      return {"finetune-" + s, "evaluate-" + s, "report"};
    }
    if (stage == "finetune-" + s) return {"evaluate-" + s, "report"};
    if (stage == "evaluate-" + s) return {"report"};
  }
  return {};
}

/// Skips a finished stage unless forced; marks it done after `body` and
/// invalidates everything downstream.
bool run_stage(RunDir& dir, const std::string& name, const StageOptions& opt,
               const std::function<void()>& body) {
  if (!opt.force && dir.stage_done(name)) {
    log(opt, name + ": up to date");
    return false;
  }
  const auto t0 = std::chrono::steady_clock::now();
  log(opt, name + ": running");
  dir.clear(name);
  body();
  dir.mark_done(name);
  for (const auto& d : dependents(name)) dir.clear(d);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ostringstream msg;
  msg.precision(3);
  msg << name << ": done in " << secs << " s";
  log(opt, msg.str());
  return true;
}

nn::ModelConfig with_vocab(nn::ModelConfig c, const Vocabulary& vocab) {
  c.vocab_size = static_cast<int>(vocab.size());
  return c;
}

std::vector<TokenIds> source_ids(std::span<const SentencePair> pairs, const Vocabulary& vocab) {
  std::vector<TokenIds> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(vocab.encode(p.source));
  return out;
}

bool within_length(const SentencePair& p, std::size_t max_len) {
  return !p.source.empty() && !p.target.empty() && p.source.size() <= max_len &&
         p.target.size() <= max_len;
}

std::vector<int> ids_of(std::span<const SentencePair> pairs) {
  std::vector<int> out;
  for (const auto& p : pairs) out.push_back(p.id);
  return out;
}

std::vector<std::string> all_domains(const RunConfig& c) {
  std::vector<std::string> out = c.seen;
  out.insert(out.end(), c.unseen.begin(), c.unseen.end());
  return out;
}

bool is_seen(const RunConfig& c, const std::string& domain) {
  return std::find(c.seen.begin(), c.seen.end(), domain) != c.seen.end();
}

fs::path corpus_source(const RunConfig& c, const RunDir& dir) {
  return c.corpus_dir.empty() ? dir.path("corpus") : fs::path(c.corpus_dir);
}

std::string base_checkpoint(const std::string& system) {
  if (system == eval::kVanilla) return "models/vanilla.ckpt";
  return "meta/" + sampler_for(system) + "/meta.ckpt";
}

std::string base_stage(const std::string& system) {
  if (system == eval::kVanilla) return "pretrain";
  return "meta-train-" + sampler_for(system);
}

std::string base_producer(const std::string& system) {
  if (system == eval::kVanilla) return "pretrain";
  return "meta-train --sampler " + sampler_for(system);
}

json history_json(const nn::FitHistory& h) {
  return {{"steps", h.steps},
          {"train_loss", h.train_loss},
          {"valid_loss", h.valid_loss},
          {"early_stopped", h.early_stopped}};
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

RunConfig::RunConfig() {
  nmt.n_layers = 2;
  nmt.d_model = 32;
  nmt.n_heads = 2;
  nmt.d_hidden = 64;
  nmt.max_len = 64;
  nmt.vocab_size = 0;
  lm = nmt;
  lm.n_layers = 1;
  pretrain.noam = true;
  pretrain.warmup = 4000;
  pretrain.epochs = 20;
  pretrain.patience = 3;
  general_lm.fit.lr = 5e-4;
  general_lm.fit.epochs = 20;
  domain_lm.fit.lr = 5e-5;
  domain_lm.fit.epochs = 20;
  schedule.tasks_per_step = 160;
}

void RunConfig::validate() const {
  if (seen.empty()) throw PipelineError("at least one seen domain is required");
  std::set<std::string> names;
  for (const auto& d : all_domains(*this)) {
    if (!names.insert(d).second) {
      throw PipelineError("domain '" + d + "' is listed twice across seen and unseen");
    }
    if (d == general_domain) throw PipelineError("the general domain cannot also be seen/unseen");
  }
  if (corpus_dir.empty()) {
    synthetic.validate();
    if (synthetic.general_domain != general_domain) {
      throw PipelineError("synthetic general domain must equal general_domain");
    }
    for (const auto& d : names) {
      if (std::find(synthetic.domains.begin(), synthetic.domains.end(), d) ==
          synthetic.domains.end()) {
        throw PipelineError("domain '" + d + "' is not generated by the synthetic spec");
      }
    }
  }
  if (!(valid_fraction > 0.0 && valid_fraction < 1.0)) {
    throw PipelineError("valid_fraction must be in (0, 1)");
  }
  if (beam < 1) throw PipelineError("beam must be >= 1");
  schedule.validate();
  meta.validate();
  finetune.validate();
}

json RunConfig::to_json() const {
  return {{"seed", seed},
          {"corpus_dir", corpus_dir},
          {"synthetic", synthetic.to_json()},
          {"general_domain", general_domain},
          {"seen", seen},
          {"unseen", unseen},
          {"max_len", max_len},
          {"min_count", min_count},
          {"valid_fraction", valid_fraction},
          {"max_valid", max_valid},
          {"pool_tokens", pool_tokens},
          {"nmt", nmt.to_json()},
          {"pretrain", fit_to_json(pretrain)},
          {"lm", lm.to_json()},
          {"general_lm", lm_train_to_json(general_lm)},
          {"domain_lm", lm_train_to_json(domain_lm)},
          {"flip_sign", flip_sign},
          {"schedule", schedule_to_json(schedule)},
          {"meta", meta.to_json()},
          {"finetune", finetune.to_json()},
          {"beam", beam},
          {"step_checkpoints", step_checkpoints}};
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  c.seed = j.value("seed", c.seed);
  c.corpus_dir = j.value("corpus_dir", c.corpus_dir);
  if (j.contains("synthetic")) {
    json merged = c.synthetic.to_json();
    merged.update(j.at("synthetic"));
    c.synthetic = synth::SyntheticSpec::from_json(merged);
  }
  c.general_domain = j.value("general_domain", c.general_domain);
  c.seen = j.value("seen", c.seen);
  c.unseen = j.value("unseen", c.unseen);
  c.max_len = j.value("max_len", c.max_len);
  c.min_count = j.value("min_count", c.min_count);
  c.valid_fraction = j.value("valid_fraction", c.valid_fraction);
  c.max_valid = j.value("max_valid", c.max_valid);
  c.pool_tokens = j.value("pool_tokens", c.pool_tokens);
  if (j.contains("nmt")) c.nmt = model_from_json(j.at("nmt"), c.nmt);
  if (j.contains("pretrain")) c.pretrain = fit_from_json(j.at("pretrain"), c.pretrain);
  if (j.contains("lm")) c.lm = model_from_json(j.at("lm"), c.lm);
  if (j.contains("general_lm")) c.general_lm = lm_train_from_json(j.at("general_lm"), c.general_lm);
  if (j.contains("domain_lm")) c.domain_lm = lm_train_from_json(j.at("domain_lm"), c.domain_lm);
  c.flip_sign = j.value("flip_sign", c.flip_sign);
  if (j.contains("schedule")) c.schedule = schedule_from_json(j.at("schedule"), c.schedule);
  if (j.contains("meta")) {
    json merged = c.meta.to_json();
    merged.update(j.at("meta"));
    c.meta = meta::MetaConfig::from_json(merged);
  }
  if (j.contains("finetune")) {
    json merged = c.finetune.to_json();
    merged.update(j.at("finetune"));
    c.finetune = meta::FinetuneConfig::from_json(merged);
  }
  c.beam = j.value("beam", c.beam);
  c.step_checkpoints = j.value("step_checkpoints", c.step_checkpoints);
  return c;
}

std::uint64_t RunConfig::hash() const { return fnv1a(to_json().dump()); }

RunConfig load_config(const fs::path& path) { return RunConfig::from_json(read_json(path)); }

std::string sampler_for(const std::string& system) {
  if (system == eval::kMetaMt) return "uniform";
  if (system == eval::kMetaCurriculum) return "curriculum";
  throw PipelineError("system '" + system + "' is not meta-trained");
}

std::string system_for(const std::string& sampler) {
  if (sampler == "uniform") return eval::kMetaMt;
  if (sampler == "curriculum") return eval::kMetaCurriculum;
  throw PipelineError("unknown sampler '" + sampler + "' (expected curriculum or uniform)");
}

// ---------------------------------------------------------------------------
// Run directory

RunDir::RunDir(fs::path root, const RunConfig& config)
    : root_(std::move(root)), config_hash_(config.hash()) {
  fs::create_directories(root_);
  const fs::path lock = root_ / "run.lock";
  std::FILE* f = std::fopen(lock.string().c_str(), "wx");
  if (!f) {
    throw PipelineError("run directory " + root_.string() +
                        " is locked by another stage; remove " + lock.string() +
                        " if no stage is running");
  }
  std::fclose(f);
  locked_ = true;
  write_json(root_ / "config.json", config.to_json());
}

RunDir::~RunDir() {
  if (locked_) {
    std::error_code ec;
    fs::remove(root_ / "run.lock", ec);
  }
}

bool RunDir::stage_done(const std::string& stage) const {
  const fs::path marker = root_ / "stages" / (stage + ".json");
  if (!fs::exists(marker)) return false;
  return read_json(marker).value("config_hash", std::string()) == hex(config_hash_);
}

void RunDir::mark_done(const std::string& stage) const {
  write_json(root_ / "stages" / (stage + ".json"),
             {{"stage", stage}, {"config_hash", hex(config_hash_)}});
}

void RunDir::clear(const std::string& stage) const {
  std::error_code ec;
  fs::remove(root_ / "stages" / (stage + ".json"), ec);
}

void RunDir::require(const std::string& relative, const std::string& stage,
                     const std::string& producer) const {
  if (!fs::exists(root_ / relative)) {
    throw PipelineError("missing " + (root_ / relative).string() + "; run `metacl " + producer +
                        "` first");
  }
  if (!stage_done(stage)) {
    throw PipelineError((root_ / relative).string() + " is stale (stage '" + stage +
                        "' is not complete for the current config); run `metacl " + producer +
                        "` first");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw PipelineError("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PipelineError("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// ---------------------------------------------------------------------------
// Data

std::vector<SentencePair> RunData::support(const std::string& domain) const {
  return select_pairs(corpora.at(domain), manifest.find(domain).support);
}

std::vector<SentencePair> RunData::query(const std::string& domain) const {
  return select_pairs(corpora.at(domain), manifest.find(domain).query);
}

std::vector<SentencePair> RunData::pool(const std::string& domain) const {
  return select_pairs(corpora.at(domain), manifest.find(domain).meta_train_pool);
}

RunData load_run_data(const RunDir& dir) {
  dir.require("data/manifest.json", "gen", "gen");
  RunData d;
  d.vocab = Vocabulary::from_json(read_json(dir.path("data/vocab.json")));
  d.manifest = SplitManifest::from_json(read_json(dir.path("data/manifest.json")));
  const json general = read_json(dir.path("data/general.json"));
  const std::string corpus_dir = general.at("corpus_dir").get<std::string>();
  const fs::path src = corpus_dir.empty() ? dir.path("corpus") : fs::path(corpus_dir);
  const std::string gname = general.at("domain").get<std::string>();
  d.corpora[gname] = filter_length(
      ingest(src / (gname + ".src"), src / (gname + ".tgt"), gname), d.manifest.max_len);
  for (const auto& s : d.manifest.domains) {
    d.corpora[s.domain] = ingest(src / (s.domain + ".src"), src / (s.domain + ".tgt"), s.domain);
  }
  d.general_train = select_pairs(d.corpora[gname], general.at("train").get<std::vector<int>>());
  d.general_valid = select_pairs(d.corpora[gname], general.at("valid").get<std::vector<int>>());
  return d;
}

// ---------------------------------------------------------------------------
// Stages

bool stage_gen(const RunConfig& c, RunDir& dir, const StageOptions& opt) {
  return run_stage(dir, "gen", opt, [&] {
    c.validate();
    if (c.corpus_dir.empty()) {
      const auto data = synth::generate(c.synthetic, c.seed);
      synth::write_corpus(dir.path("corpus"), data.general);
      for (const auto& d : data.domains) synth::write_corpus(dir.path("corpus"), d);
    }
    const fs::path src = corpus_source(c, dir);
    std::vector<DomainCorpus> corpora;
    const auto general =
        filter_length(ingest(src / (c.general_domain + ".src"), src / (c.general_domain + ".tgt"),
                             c.general_domain),
                      c.max_len);
    if (general.pairs.size() < 2) throw PipelineError("general corpus needs at least 2 pairs");
    corpora.push_back(general);

    Rng rng(derive_seed(c.seed, {kSaltGeneralSplit}));
    std::vector<std::size_t> order(general.pairs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    const auto n_valid = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(c.valid_fraction * static_cast<double>(order.size()))),
        1, std::min(c.max_valid, order.size() - 1));
    std::vector<int> valid, train;
    for (std::size_t i = 0; i < order.size(); ++i) {
      (i < n_valid ? valid : train).push_back(general.pairs[order[i]].id);
    }
    std::sort(train.begin(), train.end());
    std::sort(valid.begin(), valid.end());

    SplitManifest m;
    m.seed = c.seed;
    m.max_len = c.max_len;
    m.support_tokens = c.schedule.support_tokens;
    m.query_tokens = c.schedule.query_tokens;
    m.pool_tokens = c.pool_tokens;
    const auto domains = all_domains(c);
    for (std::size_t i = 0; i < domains.size(); ++i) {
      const auto& name = domains[i];
      auto corpus = ingest(src / (name + ".src"), src / (name + ".tgt"), name);
      const auto split = split_support_query(corpus, c.schedule.support_tokens,
                                             c.schedule.query_tokens,
                                             derive_seed(c.seed, {kSaltDomainSplit, i}));
      DomainSplit s;
      s.domain = name;
      s.role = is_seen(c, name) ? DomainRole::MetaTestSeen : DomainRole::MetaTestUnseen;
      for (const auto& p : split.support) {
        if (within_length(p, c.max_len)) s.support.push_back(p.id);
      }
      if (s.support.empty()) throw PipelineError("domain '" + name + "': empty support set");
      s.query = ids_of(split.query);
      if (is_seen(c, name)) {
        // Over-long support pairs stay out of the pool too.
        std::unordered_set<int> taken(s.query.begin(), s.query.end());
        for (const auto& p : split.support) taken.insert(p.id);
        DomainCorpus rest;
        rest.domain = name;
        for (const auto& p : corpus.pairs) {
          if (!taken.contains(p.id) && within_length(p, c.max_len)) rest.pairs.push_back(p);
        }
        if (rest.pairs.empty()) throw PipelineError("domain '" + name + "': empty meta-train pool");
        if (c.pool_tokens > 0) rest = subsample(rest, c.pool_tokens, derive_seed(c.seed, {kSaltPool, i}));
        s.meta_train_pool = ids_of(rest.pairs);
        std::sort(s.meta_train_pool.begin(), s.meta_train_pool.end());
      }
      m.domains.push_back(std::move(s));
      corpora.push_back(std::move(corpus));
    }
    const Vocabulary vocab = build_vocab(corpora, c.min_count);
    write_json(dir.path("data/vocab.json"), vocab.to_json());
    write_json(dir.path("data/manifest.json"), m.to_json());
    // An empty corpus_dir means the run directory's own corpus/ folder.
    write_json(dir.path("data/general.json"), {{"domain", c.general_domain},
                                               {"corpus_dir", c.corpus_dir},
                                               {"train", train},
                                               {"valid", valid}});
    log(opt, "gen: vocabulary of " + std::to_string(vocab.size()) + " tokens, " +
                 std::to_string(train.size()) + " general training pairs");
  });
}

bool stage_pretrain(const RunConfig& c, RunDir& dir, const StageOptions& opt) {
  return run_stage(dir, "pretrain", opt, [&] {
    const RunData d = load_run_data(dir);
    const auto model = with_vocab(c.nmt, d.vocab);
    auto params = nn::init_params(model, nn::ModelKind::Translator,
                                  derive_seed(c.seed, {kSaltNmtInit}));
    auto fit = c.pretrain;
    fit.seed = derive_seed(c.seed, {kSaltPretrain});
    const auto train = meta::to_examples(d.general_train, d.vocab);
    const auto valid = meta::to_examples(d.general_valid, d.vocab);
    const auto h = meta::vanilla_train(params, model, train, valid, fit);
    nn::save_checkpoint(dir.path("models/vanilla.ckpt"), nn::ModelKind::Translator, model, params);
    nn::save_sidecar(dir.path("models/vanilla.ckpt"),
                     {{"seed", c.seed}, {"fit", fit_to_json(fit)}, {"history", history_json(h)}});
    if (!h.valid_loss.empty()) {
      std::ostringstream msg;
      msg << "pretrain: " << h.steps << " steps, best valid loss "
          << *std::min_element(h.valid_loss.begin(), h.valid_loss.end());
      log(opt, msg.str());
    }
  });
}

bool stage_train_lm(const RunConfig& c, RunDir& dir, const StageOptions& opt) {
  return run_stage(dir, "train-lm", opt, [&] {
    const RunData d = load_run_data(dir);
    const auto model = with_vocab(c.lm, d.vocab);
    auto gcfg = c.general_lm;
    gcfg.fit.seed = derive_seed(c.seed, {kSaltGeneralLm});
    const auto general =
        scoring::train_lm(source_ids(d.general_train, d.vocab), model, gcfg, d.vocab.fingerprint());
    nn::save_checkpoint(dir.path("lm/general.ckpt"), nn::ModelKind::LanguageModel, model, general.lm.params());
    nn::save_sidecar(dir.path("lm/general.ckpt"), {{"trained_on", "general training pairs"},
                                                   {"history", history_json(general.history)}});
    const auto domains = all_domains(c);
    for (std::size_t i = 0; i < domains.size(); ++i) {
      const auto& name = domains[i];
      const bool seen = is_seen(c, name);
      const auto pairs = seen ? d.pool(name) : d.support(name);
      auto dcfg = c.domain_lm;
      dcfg.fit.seed = derive_seed(c.seed, {kSaltDomainLm, i});
      const auto lm = scoring::train_lm(source_ids(pairs, d.vocab), model, dcfg,
                                        d.vocab.fingerprint(), &general.lm.params());
      const auto path = dir.path("lm/" + name + ".ckpt");
      nn::save_checkpoint(path, nn::ModelKind::LanguageModel, model, lm.lm.params());
      nn::save_sidecar(path, {{"trained_on", seen ? "meta-train pool" : "meta-test support"},
                              {"history", history_json(lm.history)}});
    }
  });
}

namespace {

scoring::NeuralLm load_lm(const RunDir& dir, const std::string& name, const Vocabulary& vocab) {
  const std::string rel = "lm/" + name + ".ckpt";
  dir.require(rel, "train-lm", "train-lm");
  auto ck = nn::load_checkpoint(dir.path(rel));
  return scoring::NeuralLm(std::move(ck.params), ck.config, vocab.fingerprint());
}

}  // namespace

bool stage_score(const RunConfig& c, RunDir& dir, const StageOptions& opt) {
  return run_stage(dir, "score", opt, [&] {
    const RunData d = load_run_data(dir);
    const auto general = load_lm(dir, "general", d.vocab);
    json summary = json::object();
    for (const auto& name : all_domains(c)) {
      const auto domain = load_lm(dir, name, d.vocab);
      auto pairs = d.query(name);
      if (is_seen(c, name)) {
        const auto pool = d.pool(name);
        pairs.insert(pairs.begin(), pool.begin(), pool.end());
      }
      const auto scores = scoring::score_pairs(general, domain, pairs, d.vocab, c.flip_sign);
      scoring::write_scores(dir.path("scores/" + name + ".tsv"), scores);
      summary[name] = scoring::summarize(scores).to_json();
    }
    write_json(dir.path("scores/summary.json"),
               {{"flip_sign", c.flip_sign},
                {"definition", c.flip_sign ? "h_general - h_domain" : "h_domain - h_general"},
                {"domains", summary}});
  });
}

bool stage_meta_train(const RunConfig& c, RunDir& dir, const std::string& sampler_name,
                      const StageOptions& opt) {
  const std::string system = system_for(sampler_name);
  return run_stage(dir, "meta-train-" + sampler_name, opt, [&] {
    dir.require("models/vanilla.ckpt", "pretrain", "pretrain");
    dir.require("scores/summary.json", "score", "score");
    const RunData d = load_run_data(dir);
    auto ck = nn::load_checkpoint(dir.path("models/vanilla.ckpt"));
    std::vector<curriculum::DomainPool> pools;
    for (const auto& name : c.seen) {
      const auto scores = scoring::read_scores(dir.path("scores/" + name + ".tsv"), name);
      pools.push_back(curriculum::make_pool(name, d.pool(name), scores));
    }
    const curriculum::CurriculumSchedule schedule(c.schedule, std::move(pools));
    const auto seed = derive_seed(c.seed, {kSaltTasks});
    std::unique_ptr<curriculum::TaskSampler> sampler;
    if (sampler_name == "curriculum") {
      sampler = std::make_unique<curriculum::OrderedSampler>(schedule, seed);
    } else {
      sampler = std::make_unique<curriculum::UniformSampler>(schedule, seed);
    }
    auto mc = c.meta;
    mc.meta_steps = c.schedule.meta_steps;
    mc.tasks_per_step = c.schedule.tasks_per_step;
    const fs::path out = dir.path("meta/" + sampler_name);
    fs::create_directories(out);
    json manifests = json::array();
    const auto log_tasks = meta::meta_train(
        ck.params, *sampler, meta::translation_objective(ck.config, d.vocab), mc,
        [&](int step, const nn::ParamVector& params, const std::vector<curriculum::Task>& tasks) {
          manifests.push_back(curriculum::task_manifest(step, tasks));
          if (c.step_checkpoints) {
            nn::save_checkpoint(out / ("step_" + std::to_string(step) + ".ckpt"),
                                nn::ModelKind::Translator, ck.config, params);
          }
          std::ostringstream msg;
          msg << "meta-train " << sampler_name << ": step " << step << "/" << mc.meta_steps
              << ", mean task divergence " << curriculum::mean_task_divergence(tasks);
          log(opt, msg.str());
        });
    nn::save_checkpoint(out / "meta.ckpt", nn::ModelKind::Translator, ck.config, ck.params);
    nn::save_sidecar(out / "meta.ckpt", {{"sampler", sampler_name},
                                         {"system", system},
                                         {"meta", mc.to_json()},
                                         {"schedule", schedule_to_json(c.schedule)}});
    log_tasks.write_tsv(out / "train_log.tsv");
    log_tasks.write_steps_tsv(out / "steps.tsv");
    write_json(out / "tasks.json", manifests);
  });
}

bool stage_finetune(const RunConfig& c, RunDir& dir, const std::string& system,
                    const StageOptions& opt) {
  return run_stage(dir, "finetune-" + system, opt, [&] {
    dir.require(base_checkpoint(system), base_stage(system), base_producer(system));
    const RunData d = load_run_data(dir);
    const auto base = nn::load_checkpoint(dir.path(base_checkpoint(system)));
    const auto domains = all_domains(c);
    for (std::size_t i = 0; i < domains.size(); ++i) {
      const auto& name = domains[i];
      const auto support = d.support(name);
      const auto& split = d.manifest.find(name);
      const std::unordered_set<int> query(split.query.begin(), split.query.end());
      for (const auto& p : support) {
        if (query.contains(p.id)) {
          throw PipelineError("domain '" + name + "': support pair " + std::to_string(p.id) +
                              " is also a query pair");
        }
      }
      auto params = base.params;
      auto fc = c.finetune;
      fc.seed = derive_seed(c.seed, {kSaltFinetune, i});
      const auto h = meta::fine_tune(params, base.config, meta::to_examples(support, d.vocab), fc);
      const auto path = dir.path("finetune/" + system + "/" + name + ".ckpt");
      nn::save_checkpoint(path, nn::ModelKind::Translator, base.config, params);
      nn::save_sidecar(path, {{"base", base_checkpoint(system)},
                              {"support_ids", split.support},
                              {"finetune", fc.to_json()},
                              {"history", history_json(h)}});
    }
  });
}

bool stage_evaluate(const RunConfig& c, RunDir& dir, const std::string& system,
                    const StageOptions& opt) {
  return run_stage(dir, "evaluate-" + system, opt, [&] {
    dir.require(base_checkpoint(system), base_stage(system), base_producer(system));
    dir.require("scores/summary.json", "score", "score");
    const RunData d = load_run_data(dir);
    const auto base = nn::load_checkpoint(dir.path(base_checkpoint(system)));
    eval::EvalReport report;
    report.system = system;
    const fs::path out = dir.path("eval/" + system);
    for (const auto& name : all_domains(c)) {
      const std::string ft = "finetune/" + system + "/" + name + ".ckpt";
      dir.require(ft, "finetune-" + system, "finetune --system " + system);
      const auto adapted = nn::load_checkpoint(dir.path(ft));
      const auto query = d.query(name);
      const auto before = eval::evaluate_domain(base.params, base.config, d.vocab, query, c.beam);
      const auto after =
          eval::evaluate_domain(adapted.params, adapted.config, d.vocab, query, c.beam);

      std::unordered_map<int, double> div;
      for (const auto& s : scoring::read_scores(dir.path("scores/" + name + ".tsv"), name)) {
        div[s.pair_id] = s.divergence;
      }
      std::vector<double> scores;
      std::vector<Tokens> refs;
      for (const auto& p : query) {
        const auto it = div.find(p.id);
        if (it == div.end()) {
          throw PipelineError("domain '" + name + "': query pair " + std::to_string(p.id) +
                              " has no score");
        }
        scores.push_back(it->second);
        refs.push_back(p.target);
      }

      eval::DomainResult r;
      r.role = is_seen(c, name) ? eval::Exposure::Seen : eval::Exposure::Unseen;
      r.bleu_before = before.bleu.score;
      r.bleu_after = after.bleu.score;
      r.manifest = eval::query_manifest_hash(query);
      if (query.size() >= 3) r.difficulty = eval::difficulty_buckets(scores, after.hypotheses, refs);
      r.lengths = eval::length_buckets(query, after.hypotheses);
      report.domains[name] = std::move(r);

      for (const auto& [tag, result] : {std::pair{"before", &before}, std::pair{"after", &after}}) {
        std::string text;
        for (const auto& h : result->hypotheses) text += detokenize(h) + "\n";
        write_text(out / (name + "." + tag + ".hyps.txt"), text);
      }
      std::ostringstream msg;
      msg.precision(4);
      msg << "evaluate " << system << ": " << name << " BLEU " << before.bleu.score << " -> "
          << after.bleu.score;
      log(opt, msg.str());
    }
    write_json(out / "report.json", report.to_json());
  });
}

eval::EvalReport load_eval_report(const fs::path& run_dir, const std::string& system) {
  const fs::path path = run_dir / "eval" / system / "report.json";
  if (!fs::exists(path)) {
    throw PipelineError("missing " + path.string() + "; run `evaluate --system " + system + "` first");
  }
  return eval::EvalReport::from_json(read_json(path));
}

namespace {

void write_report(const fs::path& out, const eval::ComparisonTable& table,
                  const eval::EvalReport* buckets, const std::string& heading) {
  write_text(out / "report.tsv", table.to_tsv());
  std::string md = "# " + heading + "\n\n" + table.to_markdown();
  md += "\nBLEU is unsmoothed, case-sensitive corpus BLEU over the meta-test query sets. "
        "Rows without fine-tuning evaluate the initial model of each system directly.\n";
  if (buckets) {
    md += "\n## Meta-Curriculum after fine-tuning: difficulty and length buckets\n\n";
    md += eval::bucket_tables_markdown(*buckets);
  }
  write_text(out / "report.md", md);
}

}  // namespace

bool stage_report(const RunConfig& c, RunDir& dir, const StageOptions& opt) {
  (void)c;
  return run_stage(dir, "report", opt, [&] {
    std::map<std::string, eval::EvalReport> runs;
    for (const auto& s : systems()) runs[s] = load_eval_report(dir.root(), s);
    const auto table = eval::comparison_report(runs);
    write_report(dir.root(), table, &runs.at(eval::kMetaCurriculum), "Domain adaptation results");
  });
}

void run_all(const RunConfig& c, RunDir& dir, const StageOptions& opt) {
  stage_gen(c, dir, opt);
  stage_pretrain(c, dir, opt);
  stage_train_lm(c, dir, opt);
  stage_score(c, dir, opt);
  stage_meta_train(c, dir, "uniform", opt);
  stage_meta_train(c, dir, "curriculum", opt);
  for (const auto& s : systems()) {
    stage_finetune(c, dir, s, opt);
    stage_evaluate(c, dir, s, opt);
  }
  stage_report(c, dir, opt);
}

eval::ComparisonTable aggregate(std::span<const fs::path> run_dirs, const fs::path& out_dir) {
  if (run_dirs.empty()) throw PipelineError("aggregate needs at least one run directory");
  std::map<std::string, eval::EvalReport> runs;
  for (const auto& s : systems()) {
    std::vector<eval::EvalReport> reports;
    for (const auto& dir : run_dirs) reports.push_back(load_eval_report(dir, s));
    runs[s] = eval::average_reports(reports);
  }
  const auto table = eval::comparison_report(runs);
  write_report(out_dir, table, nullptr,
               "Domain adaptation results, mean over " + std::to_string(run_dirs.size()) +
                   " runs");
  return table;
}

}  // namespace mcl::pipeline
