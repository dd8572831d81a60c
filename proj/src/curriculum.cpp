#include "mcl/curriculum.hpp"

#include <algorithm>
#include <cmath>

#include "mcl/rng.hpp"

namespace mcl::curriculum {

std::vector<scoring::ScoredSentence> sort_by_divergence(
    std::vector<scoring::ScoredSentence> scored) {
  for (const auto& s : scored) {
    if (!std::isfinite(s.divergence)) throw CurriculumError("non-finite divergence score");
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.divergence != b.divergence) return a.divergence < b.divergence;
    return a.pair_id < b.pair_id;
  });
  return scored;
}

std::pair<double, double> window(int meta_steps, int step, double width) {
  if (meta_steps < 1) throw CurriculumError("meta_steps must be >= 1");
  if (step < 1 || step > meta_steps) {
    throw CurriculumError("step " + std::to_string(step) + " outside 1.." +
                          std::to_string(meta_steps));
  }
  if (!(width > 0.0 && width <= 1.0)) throw CurriculumError("window width must be in (0, 1]");
  if (meta_steps == 1) return {0.0, 1.0};
  const double lo = (1.0 - width) * static_cast<double>(step - 1) /
                    static_cast<double>(meta_steps - 1);
  return {std::clamp(lo, 0.0, 1.0), std::clamp(lo + width, 0.0, 1.0)};
}

DomainPool make_pool(const std::string& domain, std::span<const SentencePair> pairs,
                     std::span<const scoring::ScoredSentence> scores) {
  std::unordered_map<int, const SentencePair*> by_id;
  for (const auto& p : pairs) by_id[p.id] = &p;
  std::vector<scoring::ScoredSentence> relevant;
  for (const auto& s : scores) {
    if (by_id.contains(s.pair_id)) relevant.push_back(s);
  }
  if (relevant.size() != pairs.size()) {
    throw CurriculumError("domain '" + domain + "': " + std::to_string(pairs.size()) +
                          " pool pairs but " + std::to_string(relevant.size()) + " scores");
  }
  DomainPool pool;
  pool.domain = domain;
  for (const auto& s : sort_by_divergence(std::move(relevant))) {
    pool.pairs.push_back(*by_id.at(s.pair_id));
    pool.divergence[s.pair_id] = s.divergence;
  }
  return pool;
}

void ScheduleConfig::validate() const {
  if (meta_steps < 1) throw CurriculumError("meta_steps must be >= 1");
  if (tasks_per_step < 1) throw CurriculumError("tasks_per_step must be >= 1");
  if (!(width > 0.0 && width <= 1.0)) throw CurriculumError("window width must be in (0, 1]");
  // Narrower windows would leave gaps, making some of the pool unreachable.
  if (meta_steps > 1 && width * meta_steps < 1.0 - 1e-9) {
    throw CurriculumError("window width must be at least 1/meta_steps");
  }
  if (support_tokens == 0 || query_tokens == 0) throw CurriculumError("token budgets must be > 0");
}

CurriculumSchedule::CurriculumSchedule(ScheduleConfig config, std::vector<DomainPool> pools)
    : config_(config), pools_(std::move(pools)) {
  config_.validate();
  if (pools_.empty()) throw CurriculumError("curriculum needs at least one seen domain");
}

std::pair<double, double> CurriculumSchedule::window(int step) const {
  return curriculum::window(config_.meta_steps, step, config_.width);
}

std::pair<std::size_t, std::size_t> CurriculumSchedule::slice(int step, std::size_t n) const {
  const auto [lo, hi] = window(step);
  const auto at = [n](double q) {
    return std::min(n, static_cast<std::size_t>(std::llround(q * static_cast<double>(n))));
  };
  return {at(lo), at(hi)};
}

namespace {

Task draw_task(const DomainPool& pool, std::size_t begin, std::size_t end, int task_id,
               int step, std::size_t support_tokens, std::size_t query_tokens,
               std::uint64_t seed) {
  const std::span<const SentencePair> slice(pool.pairs.data() + begin, end - begin);
  SupportQuerySplit split;
  try {
    split = split_support_query(slice, support_tokens, query_tokens, seed);
  } catch (const CorpusError& e) {
    throw CurriculumError("domain '" + pool.domain + "' step " + std::to_string(step) +
                          ": window holds " + std::to_string(slice.size()) +
                          " pairs, too few for one task (" + e.what() + ")");
  }
  Task t;
  t.task_id = task_id;
  t.domain = pool.domain;
  t.support = std::move(split.support);
  t.query = std::move(split.query);
  double sum = 0.0;
  for (const auto& p : t.support) sum += pool.divergence.at(p.id);
  for (const auto& p : t.query) sum += pool.divergence.at(p.id);
  t.mean_divergence = sum / static_cast<double>(t.support.size() + t.query.size());
  return t;
}

}  // namespace

std::vector<Task> assemble_tasks(const CurriculumSchedule& schedule, int step,
                                 std::uint64_t seed) {
  const auto& cfg = schedule.config();
  const auto& pools = schedule.pools();
  std::vector<Task> tasks;
  for (int t = 0; t < cfg.tasks_per_step; ++t) {
    const auto& pool = pools[static_cast<std::size_t>(t) % pools.size()];
    const auto [begin, end] = schedule.slice(step, pool.pairs.size());
    tasks.push_back(draw_task(pool, begin, end, t, step, cfg.support_tokens, cfg.query_tokens,
                              derive_seed(seed, {static_cast<std::uint64_t>(step),
                                                 static_cast<std::uint64_t>(t)})));
  }
  return tasks;
}

std::vector<Task> uniform_tasks(const CurriculumSchedule& schedule, std::uint64_t seed) {
  const auto& cfg = schedule.config();
  const auto& pools = schedule.pools();
  std::vector<Task> tasks;
  for (int t = 0; t < cfg.tasks_per_step; ++t) {
    const auto& pool = pools[static_cast<std::size_t>(t) % pools.size()];
    tasks.push_back(draw_task(pool, 0, pool.pairs.size(), t, 0, cfg.support_tokens,
                              cfg.query_tokens,
                              derive_seed(seed, {0ULL, static_cast<std::uint64_t>(t)})));
  }
  return tasks;
}

double mean_task_divergence(std::span<const Task> tasks) {
  if (tasks.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& t : tasks) sum += t.mean_divergence;
  return sum / static_cast<double>(tasks.size());
}

nlohmann::json task_manifest(int step, std::span<const Task> tasks) {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& t : tasks) {
    std::vector<int> support, query;
    for (const auto& p : t.support) support.push_back(p.id);
    for (const auto& p : t.query) query.push_back(p.id);
    list.push_back({{"task_id", t.task_id},
                    {"domain", t.domain},
                    {"support", support},
                    {"query", query},
                    {"mean_divergence", t.mean_divergence}});
  }
  return {{"step", step}, {"tasks", list}};
}

}  // namespace mcl::curriculum
