#include "mcl/metatrain.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>

namespace mcl::meta {

void MetaConfig::validate() const {
  if (meta_steps < 1) throw MetaError("meta_steps must be >= 1");
  if (tasks_per_step < 1) throw MetaError("tasks_per_step must be >= 1");
  if (inner_lr < 0.0) throw MetaError("inner learning rate must be >= 0");
  if (!(outer_lr > 0.0)) throw MetaError("outer learning rate must be > 0");
  if (inner_steps < 1) throw MetaError("inner_steps must be >= 1");
}

nlohmann::json MetaConfig::to_json() const {
  return {{"meta_steps", meta_steps},
          {"tasks_per_step", tasks_per_step},
          {"inner_lr", inner_lr},
          {"inner_steps", inner_steps},
          {"inner_optimizer", nn::to_string(inner_optimizer)},
          {"outer_optimizer", nn::to_string(outer_optimizer)},
          {"outer_lr", outer_lr},
          {"clip_norm", clip_norm}};
}

MetaConfig MetaConfig::from_json(const nlohmann::json& j) {
  MetaConfig c;
  c.meta_steps = j.value("meta_steps", c.meta_steps);
  c.tasks_per_step = j.value("tasks_per_step", c.tasks_per_step);
  c.inner_lr = j.value("inner_lr", c.inner_lr);
  c.inner_steps = j.value("inner_steps", c.inner_steps);
  if (j.contains("inner_optimizer")) {
    c.inner_optimizer = nn::optimizer_kind_from_string(j.at("inner_optimizer").get<std::string>());
  }
  if (j.contains("outer_optimizer")) {
    c.outer_optimizer = nn::optimizer_kind_from_string(j.at("outer_optimizer").get<std::string>());
  }
  c.outer_lr = j.value("outer_lr", c.outer_lr);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  return c;
}

void FinetuneConfig::validate() const {
  if (epochs < 1) throw MetaError("fine-tuning epochs must be >= 1");
  if (!(lr > 0.0)) throw MetaError("fine-tuning learning rate must be > 0");
  if (batch_sentences == 0) throw MetaError("fine-tuning batch size must be > 0");
}

nlohmann::json FinetuneConfig::to_json() const {
  return {{"epochs", epochs}, {"lr", lr}, {"batch_sentences", batch_sentences}, {"seed", seed}};
}

FinetuneConfig FinetuneConfig::from_json(const nlohmann::json& j) {
  FinetuneConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.lr = j.value("lr", c.lr);
  c.batch_sentences = j.value("batch_sentences", c.batch_sentences);
  c.seed = j.value("seed", c.seed);
  return c;
}

void TrainLog::write_tsv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw MetaError("cannot write " + path.string());
  out << std::setprecision(17);
  out << "step\ttask\tdomain\tsupport_loss_first\tsupport_loss_last\tquery_loss\tgrad_norm\t"
         "mean_divergence\n";
  for (const auto& r : tasks) {
    out << r.step << '\t' << r.task_id << '\t' << r.domain << '\t' << r.support_loss_first
        << '\t' << r.support_loss_last << '\t' << r.query_loss << '\t' << r.grad_norm << '\t'
        << r.mean_divergence << '\n';
  }
}

void TrainLog::write_steps_tsv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw MetaError("cannot write " + path.string());
  out << std::setprecision(17);
  out << "step\tmeta_grad_norm\tclipped\tmean_query_loss\tmean_divergence\tseconds\n";
  for (const auto& r : steps) {
    out << r.step << '\t' << r.meta_grad_norm << '\t' << (r.clipped ? 1 : 0) << '\t'
        << r.mean_query_loss << '\t' << r.mean_divergence << '\t' << std::setprecision(4)
        << r.seconds << std::setprecision(17) << '\n';
  }
}

InnerResult inner_adapt(const nn::ParamVector& theta, const GradFn& support, double alpha,
                        int inner_steps, nn::OptimizerKind kind) {
  if (inner_steps < 1) throw MetaError("inner_steps must be >= 1");
  InnerResult r{theta, {}};
  auto opt = nn::OptimizerState::make(kind, alpha);
  for (int s = 0; s < inner_steps; ++s) {
    const double loss = support(r.adapted);
    if (!std::isfinite(loss)) throw nn::TrainingDiverged("non-finite support loss in inner loop");
    r.support_losses.push_back(loss);
    nn::optimizer_step(r.adapted, opt);
  }
  return r;
}

OuterGrad fomaml_outer_grad(nn::ParamVector& adapted, const GradFn& query) {
  OuterGrad g;
  g.query_loss = query(adapted);
  if (!std::isfinite(g.query_loss)) throw nn::TrainingDiverged("non-finite query loss");
  g.grad.assign(adapted.grads().begin(), adapted.grads().end());
  return g;
}

TrainLog meta_train(nn::ParamVector& params, const curriculum::TaskSampler& sampler,
                    const ObjectiveFactory& objective, const MetaConfig& config,
                    const StepCallback& on_step) {
  config.validate();
  TrainLog log;
  auto outer = nn::OptimizerState::make(config.outer_optimizer, config.outer_lr);
  std::vector<double> acc(params.size());
  for (int step = 1; step <= config.meta_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto tasks = sampler.tasks(step);
    if (tasks.empty()) throw MetaError("sampler produced no tasks at step " + std::to_string(step));
    std::fill(acc.begin(), acc.end(), 0.0);
    StepRecord sr;
    sr.step = step;
    for (const auto& task : tasks) {
      try {
        const TaskObjective obj = objective(task);
        InnerResult inner =
            inner_adapt(params, obj.support, config.inner_lr, config.inner_steps,
                        config.inner_optimizer);
        const OuterGrad g = fomaml_outer_grad(inner.adapted, obj.query);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g.grad[i];
        TaskRecord tr;
        tr.step = step;
        tr.task_id = task.task_id;
        tr.domain = task.domain;
        tr.support_loss_first = inner.support_losses.front();
        tr.support_loss_last = inner.support_losses.back();
        tr.query_loss = g.query_loss;
        tr.grad_norm = nn::l2_norm(g.grad);
        tr.mean_divergence = task.mean_divergence;
        sr.mean_query_loss += g.query_loss;
        sr.mean_divergence += task.mean_divergence;
        log.tasks.push_back(std::move(tr));
      } catch (const std::exception& e) {
        throw MetaError("meta-step " + std::to_string(step) + ", task " +
                        std::to_string(task.task_id) + " (" + task.domain + "): " + e.what());
      }
    }
    sr.mean_query_loss /= static_cast<double>(tasks.size());
    sr.mean_divergence /= static_cast<double>(tasks.size());
    if (config.clip_norm > 0.0) {
      sr.meta_grad_norm = nn::clip_grad_norm(acc, config.clip_norm);
      sr.clipped = sr.meta_grad_norm > config.clip_norm;
    } else {
      sr.meta_grad_norm = nn::l2_norm(acc);
    }
    std::copy(acc.begin(), acc.end(), params.grads().begin());
    nn::optimizer_step(params, outer);
    sr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.steps.push_back(sr);
    if (on_step) on_step(step, params, tasks);
  }
  return log;
}

std::vector<nn::Example> to_examples(std::span<const SentencePair> pairs, const Vocabulary& vocab) {
  std::vector<nn::Example> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back({vocab.encode(p.source), vocab.encode(p.target)});
  return out;
}

ObjectiveFactory translation_objective(const nn::ModelConfig& model, const Vocabulary& vocab) {
  return [model, &vocab](const curriculum::Task& task) {
    auto support = std::make_shared<nn::Batch>(
        nn::make_batch(to_examples(task.support, vocab), nn::ModelKind::Translator));
    auto query = std::make_shared<nn::Batch>(
        nn::make_batch(to_examples(task.query, vocab), nn::ModelKind::Translator));
    TaskObjective obj;
    obj.support = [model, support](nn::ParamVector& p) {
      return nn::backward(p, model, *support, nn::ModelKind::Translator);
    };
    obj.query = [model, query](nn::ParamVector& p) {
      return nn::backward(p, model, *query, nn::ModelKind::Translator);
    };
    return obj;
  };
}

nn::FitHistory vanilla_train(nn::ParamVector& params, const nn::ModelConfig& model,
                             std::span<const nn::Example> train,
                             std::span<const nn::Example> valid, const nn::FitConfig& fit) {
  if (train.empty()) throw MetaError("vanilla training needs a non-empty corpus");
  return nn::fit(params, model, nn::ModelKind::Translator, train, valid, fit);
}

nn::FitHistory fine_tune(nn::ParamVector& params, const nn::ModelConfig& model,
                         std::span<const nn::Example> support, const FinetuneConfig& config) {
  config.validate();
  if (support.empty()) throw MetaError("fine-tuning needs a non-empty support set");
  nn::FitConfig fit;
  fit.optimizer = nn::OptimizerKind::Adam;
  fit.lr = config.lr;
  fit.epochs = config.epochs;
  fit.batch_sentences = config.batch_sentences;
  fit.seed = config.seed;
  fit.patience = 0;
  return nn::fit(params, model, nn::ModelKind::Translator, support, {}, fit);
}

}  // namespace mcl::meta
