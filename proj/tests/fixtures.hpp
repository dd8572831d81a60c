#pragma once

// Shared experiment setups for unit and acceptance tests.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mcl/corpus.hpp"
#include "mcl/curriculum.hpp"
#include "mcl/metatrain.hpp"
#include "mcl/scoring.hpp"
#include "mcl/synthetic.hpp"
#include "oracles.hpp"

namespace mcl::testing {

/// Wraps the count-based bigram oracle as a scoring LanguageModel.
class BigramLm : public scoring::LanguageModel {
 public:
  BigramLm(int vocab_size, double add_k, std::uint64_t fingerprint)
      : oracle_(vocab_size, add_k, kBos, kEos), fingerprint_(fingerprint) {}

  void observe(const TokenIds& s) { oracle_.observe(s); }

  std::vector<double> log_probs(std::span<const int> sentence) const override {
    std::vector<double> out;
    int prev = kBos;
    for (int t : sentence) {
      out.push_back(oracle_.log_prob(prev, t));
      prev = t;
    }
    out.push_back(oracle_.log_prob(prev, kEos));
    return out;
  }
  std::uint64_t vocab_fingerprint() const override { return fingerprint_; }

 private:
  BigramOracle oracle_;
  std::uint64_t fingerprint_;
};

struct RankAgreement {
  std::map<std::string, double> spearman;  // per scored domain
  bool identical_zero = true;              // d == 0 exactly when domain LM == general LM
};

/// Two synthetic domains scored by fine-tuned neural LMs and by bigram oracles
/// trained on the same text; returns the rank agreement per domain.
inline RankAgreement neural_vs_bigram_ranking(std::uint64_t seed) {
  synth::SyntheticSpec spec;
  spec.core_vocab = 30;
  spec.private_vocab = 12;
  spec.general_sentences = 1500;
  spec.domain_sentences = 500;
  spec.domains = {"alpha", "beta"};
  const auto data = synth::generate(spec, seed);
  std::vector<DomainCorpus> all{data.general};
  for (const auto& d : data.domains) all.push_back(d);
  const Vocabulary vocab = build_vocab(all);

  auto encode = [&](const DomainCorpus& c) {
    std::vector<TokenIds> out;
    for (const auto& p : c.pairs) out.push_back(vocab.encode(p.source));
    return out;
  };

  nn::ModelConfig mc;
  mc.n_layers = 1;
  mc.d_model = 32;
  mc.n_heads = 2;
  mc.d_hidden = 64;
  mc.max_len = 32;
  mc.vocab_size = static_cast<int>(vocab.size());

  scoring::LmTrainConfig general_cfg;
  general_cfg.fit.lr = 2e-3;
  general_cfg.fit.epochs = 8;
  general_cfg.fit.seed = seed;
  const auto general_sents = encode(data.general);
  const auto general = scoring::train_lm(general_sents, mc, general_cfg, vocab.fingerprint());

  BigramLm general_bigram(mc.vocab_size, 0.05, vocab.fingerprint());
  for (const auto& s : general_sents) general_bigram.observe(s);

  RankAgreement result;
  for (const auto& dom : data.domains) {
    const auto sents = encode(dom);
    scoring::LmTrainConfig domain_cfg;
    domain_cfg.fit.lr = 2e-3;
    domain_cfg.fit.epochs = 8;
    domain_cfg.fit.seed = seed + 1;
    const auto domain_lm =
        scoring::train_lm(sents, mc, domain_cfg, vocab.fingerprint(), &general.lm.params());
    // The neural domain LM starts from the general one, so its count-based
    // counterpart sees the general text as well.
    BigramLm domain_bigram(mc.vocab_size, 0.05, vocab.fingerprint());
    for (const auto& s : sents) domain_bigram.observe(s);
    for (const auto& s : general_sents) domain_bigram.observe(s);

    const auto neural = scoring::score_pairs(general.lm, domain_lm.lm, dom.pairs, vocab);
    const auto counted = scoring::score_pairs(general_bigram, domain_bigram, dom.pairs, vocab);
    const auto same = scoring::score_pairs(general.lm, general.lm, dom.pairs, vocab);
    std::vector<double> a, b;
    for (std::size_t i = 0; i < neural.size(); ++i) {
      a.push_back(neural[i].divergence);
      b.push_back(counted[i].divergence);
      if (same[i].divergence != 0.0) result.identical_zero = false;
    }
    result.spearman[dom.domain] = spearman(a, b);
  }
  return result;
}

/// Five seen domains of 200 pairs whose divergence strictly increases with
/// pair id; source lengths cycle through 3..7 tokens.
inline std::vector<curriculum::DomainPool> ordered_pools(std::size_t n_per_domain = 200) {
  std::vector<curriculum::DomainPool> pools;
  for (int d = 0; d < 5; ++d) {
    const std::string name = "dom" + std::to_string(d);
    std::vector<SentencePair> pairs;
    std::vector<scoring::ScoredSentence> scores;
    for (std::size_t i = 0; i < n_per_domain; ++i) {
      Tokens src(3 + i % 5, "w");
      pairs.push_back({static_cast<int>(i), src, src, name});
      scoring::ScoredSentence s;
      s.pair_id = static_cast<int>(i);
      s.domain = name;
      s.divergence = static_cast<double>(i) + 0.1 * d;
      scores.push_back(s);
    }
    pools.push_back(curriculum::make_pool(name, pairs, scores));
  }
  return pools;
}

inline curriculum::ScheduleConfig small_schedule(int meta_steps, double width) {
  curriculum::ScheduleConfig c;
  c.meta_steps = meta_steps;
  c.tasks_per_step = 10;
  c.width = width;
  c.support_tokens = 20;
  c.query_tokens = 40;
  return c;
}

/// L(theta) = 1/2 (theta - c)^T A (theta - c) on a single parameter tensor.
struct Quadratic {
  std::vector<std::vector<double>> a;  // symmetric
  std::vector<double> c;

  std::size_t dim() const { return c.size(); }

  std::vector<double> grad(std::span<const double> theta) const {
    std::vector<double> g(dim(), 0.0);
    for (std::size_t i = 0; i < dim(); ++i) {
      for (std::size_t j = 0; j < dim(); ++j) g[i] += a[i][j] * (theta[j] - c[j]);
    }
    return g;
  }
  double loss(std::span<const double> theta) const {
    const auto g = grad(theta);
    double l = 0.0;
    for (std::size_t i = 0; i < dim(); ++i) l += 0.5 * (theta[i] - c[i]) * g[i];
    return l;
  }
  meta::GradFn grad_fn() const {
    return [q = *this](nn::ParamVector& p) {
      const auto g = q.grad(p.values());
      std::copy(g.begin(), g.end(), p.grads().begin());
      return q.loss(p.values());
    };
  }
};

inline Quadratic scalar_quadratic(double a, double c) { return Quadratic{{{a}}, {c}}; }

/// Task i gets support[i] and query[i].
inline meta::ObjectiveFactory quadratic_objective(std::vector<Quadratic> support,
                                                  std::vector<Quadratic> query) {
  return [support, query](const curriculum::Task& t) {
    const auto i = static_cast<std::size_t>(t.task_id);
    return meta::TaskObjective{support.at(i).grad_fn(), query.at(i).grad_fn()};
  };
}

/// One task per step, plain SGD outside, no clipping.
inline meta::MetaConfig sgd_config(int steps, double alpha, double beta) {
  meta::MetaConfig c;
  c.meta_steps = steps;
  c.tasks_per_step = 1;
  c.inner_lr = alpha;
  c.outer_optimizer = nn::OptimizerKind::Sgd;
  c.outer_lr = beta;
  c.clip_norm = 0.0;
  return c;
}

inline nn::ParamVector vector_param(std::vector<double> values) {
  nn::ParamVector p;
  p.add("theta", 1, values.size());
  std::copy(values.begin(), values.end(), p.values().begin());
  return p;
}

/// Exact (second-order) MAML meta-gradient for quadratic support and query
/// losses: (I - alpha A_S) grad L_Q(theta').
inline std::vector<double> exact_maml_grad(const Quadratic& support, const Quadratic& query,
                                           std::span<const double> theta, double alpha) {
  const auto gs = support.grad(theta);
  std::vector<double> adapted(theta.begin(), theta.end());
  for (std::size_t i = 0; i < adapted.size(); ++i) adapted[i] -= alpha * gs[i];
  const auto gq = query.grad(adapted);
  std::vector<double> out(theta.size(), 0.0);
  for (std::size_t i = 0; i < out.size(); ++i) {
    for (std::size_t j = 0; j < out.size(); ++j) {
      const double jac = (i == j ? 1.0 : 0.0) - alpha * support.a[j][i];
      out[i] += jac * gq[j];
    }
  }
  return out;
}

/// Serves a fixed task list at every step.
class FixedSampler : public curriculum::TaskSampler {
 public:
  explicit FixedSampler(std::vector<curriculum::Task> tasks) : tasks_(std::move(tasks)) {}
  std::vector<curriculum::Task> tasks(int) const override { return tasks_; }
  std::string name() const override { return "fixed"; }

 private:
  std::vector<curriculum::Task> tasks_;
};

inline std::vector<curriculum::Task> numbered_tasks(int n) {
  std::vector<curriculum::Task> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)].task_id = i;
  return out;
}

}  // namespace mcl::testing
