#include "mcl/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

#include "mcl/rng.hpp"

namespace mcl::nn {

std::string_view to_string(ModelKind kind) {
  return kind == ModelKind::LanguageModel ? "lm" : "translator";
}

ModelKind model_kind_from_string(std::string_view s) {
  if (s == "lm") return ModelKind::LanguageModel;
  if (s == "translator") return ModelKind::Translator;
  throw ModelError("unknown model kind '" + std::string(s) + "'");
}

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_hidden < 1 || max_len < 1 ||
      vocab_size < 1) {
    throw ModelError("model dimensions must all be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ModelError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                     std::to_string(n_heads));
  }
  if (dropout < 0.0 || dropout >= 1.0) throw ModelError("dropout must be in [0, 1)");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"n_layers", n_layers}, {"d_model", d_model},   {"n_heads", n_heads},
          {"d_hidden", d_hidden}, {"max_len", max_len},   {"vocab_size", vocab_size},
          {"dropout", dropout}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.d_model = j.value("d_model", c.d_model);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_hidden = j.value("d_hidden", c.d_hidden);
  c.max_len = j.value("max_len", c.max_len);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.dropout = j.value("dropout", c.dropout);
  return c;
}

namespace detail {

struct LinearIdx {
  std::size_t w = 0, b = 0;
};
struct NormIdx {
  std::size_t gain = 0, bias = 0;
};
struct AttnIdx {
  LinearIdx q, k, v, o;
};
struct FfnIdx {
  LinearIdx in, out;
};
struct LayerIdx {
  NormIdx ln_self;
  AttnIdx self;
  bool has_cross = false;
  NormIdx ln_cross;
  AttnIdx cross;
  NormIdx ln_ffn;
  FfnIdx ffn;
};
struct ModelIdx {
  std::size_t embed = 0;
  std::vector<LayerIdx> encoder;
  NormIdx encoder_norm;
  std::vector<LayerIdx> decoder;
  NormIdx decoder_norm;
  LinearIdx out;
};

}  // namespace detail

namespace {

using detail::AttnIdx;
using detail::FfnIdx;
using detail::LayerIdx;
using detail::LinearIdx;
using detail::ModelIdx;
using detail::NormIdx;

constexpr double kNormEps = 1e-5;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

using AddFn = std::function<std::size_t(const std::string&, std::size_t, std::size_t)>;

ModelIdx build_layout(const ModelConfig& c, ModelKind kind, const AddFn& add) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto h = static_cast<std::size_t>(c.d_hidden);
  const auto v = static_cast<std::size_t>(c.vocab_size);
  auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    LinearIdx l;
    l.w = add(name + ".w", in, out);
    l.b = add(name + ".b", 1, out);
    return l;
  };
  auto norm = [&](const std::string& name) {
    NormIdx n;
    n.gain = add(name + ".gain", 1, d);
    n.bias = add(name + ".bias", 1, d);
    return n;
  };
  auto attn = [&](const std::string& name) {
    AttnIdx a;
    a.q = linear(name + ".q", d, d);
    a.k = linear(name + ".k", d, d);
    a.v = linear(name + ".v", d, d);
    a.o = linear(name + ".o", d, d);
    return a;
  };
  auto layer = [&](const std::string& name, bool cross) {
    LayerIdx l;
    l.ln_self = norm(name + ".ln_self");
    l.self = attn(name + ".self");
    l.has_cross = cross;
    if (cross) {
      l.ln_cross = norm(name + ".ln_cross");
      l.cross = attn(name + ".cross");
    }
    l.ln_ffn = norm(name + ".ln_ffn");
    l.ffn.in = linear(name + ".ffn.in", d, h);
    l.ffn.out = linear(name + ".ffn.out", h, d);
    return l;
  };

  ModelIdx m;
  m.embed = add("embed", v, d);
  if (kind == ModelKind::Translator) {
    for (int i = 0; i < c.n_layers; ++i) m.encoder.push_back(layer("enc." + std::to_string(i), false));
    m.encoder_norm = norm("enc.norm");
  }
  const bool cross = kind == ModelKind::Translator;
  for (int i = 0; i < c.n_layers; ++i) m.decoder.push_back(layer("dec." + std::to_string(i), cross));
  m.decoder_norm = norm("dec.norm");
  m.out = linear("out", d, v);
  return m;
}

ModelIdx index_for(const ParamVector& params, const ModelConfig& config, ModelKind kind) {
  std::size_t next = 0;
  std::size_t total = 0;
  ModelIdx idx = build_layout(config, kind, [&](const std::string&, std::size_t r, std::size_t c) {
    total += r * c;
    return next++;
  });
  if (next != params.layout().size() || total != params.size()) {
    throw ModelError("parameter layout does not match the model config");
  }
  return idx;
}

// ---------------------------------------------------------------------------
// Building blocks. Gradients are accumulated into params.grads().

double positional(int pos, int i, int d) {
  const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / d);
  return (i % 2 == 0) ? std::sin(pos * rate) : std::cos(pos * rate);
}

Matrix embed(const ParamVector& p, std::size_t slot, std::span<const int> ids, int d) {
  const auto table = p.value(slot);
  const double scale = std::sqrt(static_cast<double>(d));
  Matrix x(static_cast<Eigen::Index>(ids.size()), d);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    for (int i = 0; i < d; ++i) {
      x(static_cast<Eigen::Index>(t), i) =
          table(ids[t], i) * scale + positional(static_cast<int>(t), i, d);
    }
  }
  return x;
}

void embed_backward(ParamVector& p, std::size_t slot, std::span<const int> ids, const Matrix& dx) {
  auto g = p.grad(slot);
  const double scale = std::sqrt(static_cast<double>(dx.cols()));
  for (std::size_t t = 0; t < ids.size(); ++t) {
    g.row(ids[t]) += dx.row(static_cast<Eigen::Index>(t)) * scale;
  }
}

Matrix linear(const Matrix& x, const ParamVector& p, LinearIdx l) {
  Matrix y = x * p.value(l.w);
  y.rowwise() += p.value_row(l.b);
  return y;
}

Matrix linear_backward(const Matrix& x, const Matrix& dy, ParamVector& p, LinearIdx l) {
  p.grad(l.w).noalias() += x.transpose() * dy;
  p.grad_row(l.b) += dy.colwise().sum();
  return dy * p.value(l.w).transpose();
}

struct NormCache {
  Matrix xhat;
  Eigen::VectorXd rstd;
};

Matrix layer_norm(const Matrix& x, const ParamVector& p, NormIdx n, NormCache* cache) {
  const Eigen::Index rows = x.rows();
  Matrix xhat(rows, x.cols());
  Eigen::VectorXd rstd(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mu = x.row(r).mean();
    const RowVector centered = x.row(r).array() - mu;
    const double var = centered.squaredNorm() / static_cast<double>(x.cols());
    rstd(r) = 1.0 / std::sqrt(var + kNormEps);
    xhat.row(r) = centered * rstd(r);
  }
  Matrix y = xhat.array().rowwise() * p.value_row(n.gain).array();
  y.rowwise() += p.value_row(n.bias);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const NormCache& c, ParamVector& p, NormIdx n) {
  p.grad_row(n.gain) += (dy.array() * c.xhat.array()).matrix().colwise().sum();
  p.grad_row(n.bias) += dy.colwise().sum();
  const Matrix dxhat = dy.array().rowwise() * p.value_row(n.gain).array();
  Matrix dx(dy.rows(), dy.cols());
  const double inv_d = 1.0 / static_cast<double>(dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double m1 = dxhat.row(r).sum() * inv_d;
    const double m2 = dxhat.row(r).dot(c.xhat.row(r)) * inv_d;
    dx.row(r) = c.rstd(r) * (dxhat.row(r).array() - m1 - c.xhat.row(r).array() * m2).matrix();
  }
  return dx;
}

void softmax_rows(Matrix& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double mx = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - mx).exp();
    s.row(r) /= s.row(r).sum();
  }
}

struct AttnCache {
  Matrix xq, xkv, q, k, v, context;
  std::vector<Matrix> probs;
};

Matrix attention(const Matrix& xq, const Matrix& xkv, bool causal, const ParamVector& p,
                 const AttnIdx& a, int heads, AttnCache* cache) {
  Matrix q = linear(xq, p, a.q);
  Matrix k = linear(xkv, p, a.k);
  Matrix v = linear(xkv, p, a.v);
  const Eigen::Index dk = q.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  Matrix context(q.rows(), q.cols());
  std::vector<Matrix> probs;
  for (int h = 0; h < heads; ++h) {
    Matrix s = q.middleCols(h * dk, dk) * k.middleCols(h * dk, dk).transpose() * scale;
    if (causal) {
      for (Eigen::Index i = 0; i < s.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < s.cols(); ++j) s(i, j) = kNegInf;
      }
    }
    softmax_rows(s);
    context.middleCols(h * dk, dk).noalias() = s * v.middleCols(h * dk, dk);
    if (cache) probs.push_back(std::move(s));
  }
  Matrix out = linear(context, p, a.o);
  if (cache) {
    cache->xq = xq;
    cache->xkv = xkv;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->context = std::move(context);
    cache->probs = std::move(probs);
  }
  return out;
}

/// Returns (dxq, dxkv).
std::pair<Matrix, Matrix> attention_backward(const Matrix& dout, const AttnCache& c,
                                             ParamVector& p, const AttnIdx& a, int heads) {
  const Matrix dcontext = linear_backward(c.context, dout, p, a.o);
  const Eigen::Index dk = c.q.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  Matrix dq = Matrix::Zero(c.q.rows(), c.q.cols());
  Matrix dkm = Matrix::Zero(c.k.rows(), c.k.cols());
  Matrix dv = Matrix::Zero(c.v.rows(), c.v.cols());
  for (int h = 0; h < heads; ++h) {
    const Matrix& prob = c.probs[static_cast<std::size_t>(h)];
    const auto dctx = dcontext.middleCols(h * dk, dk);
    const Matrix dprob = dctx * c.v.middleCols(h * dk, dk).transpose();
    dv.middleCols(h * dk, dk).noalias() += prob.transpose() * dctx;
    Matrix ds = prob.array() * (dprob.array().colwise() -
                                (dprob.array() * prob.array()).rowwise().sum());
    ds *= scale;
    dq.middleCols(h * dk, dk).noalias() += ds * c.k.middleCols(h * dk, dk);
    dkm.middleCols(h * dk, dk).noalias() += ds.transpose() * c.q.middleCols(h * dk, dk);
  }
  Matrix dxq = linear_backward(c.xq, dq, p, a.q);
  Matrix dxkv = linear_backward(c.xkv, dkm, p, a.k);
  dxkv += linear_backward(c.xkv, dv, p, a.v);
  return {std::move(dxq), std::move(dxkv)};
}

struct FfnCache {
  Matrix x, pre;
};

Matrix feed_forward(const Matrix& x, const ParamVector& p, const FfnIdx& f, FfnCache* cache) {
  Matrix pre = linear(x, p, f.in);
  const Matrix act = pre.cwiseMax(0.0);
  Matrix out = linear(act, p, f.out);
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
  }
  return out;
}

Matrix feed_forward_backward(const Matrix& dy, const FfnCache& c, ParamVector& p,
                             const FfnIdx& f) {
  const Matrix act = c.pre.cwiseMax(0.0);
  Matrix dact = linear_backward(act, dy, p, f.out);
  dact = (c.pre.array() > 0.0).select(dact, 0.0);
  return linear_backward(c.x, dact, p, f.in);
}

/// Inverted dropout; an empty mask means identity.
struct Dropper {
  Rng* rng = nullptr;
  double rate = 0.0;

  bool active() const { return rng != nullptr && rate > 0.0; }

  void apply(Matrix& x, Matrix& mask) const {
    if (!active()) {
      mask.resize(0, 0);
      return;
    }
    mask.resize(x.rows(), x.cols());
    const double keep = 1.0 / (1.0 - rate);
    for (Eigen::Index i = 0; i < mask.size(); ++i) {
      mask.data()[i] = rng->bernoulli(rate) ? 0.0 : keep;
    }
    x.array() *= mask.array();
  }
};

void dropout_backward(Matrix& dx, const Matrix& mask) {
  if (mask.size() != 0) dx.array() *= mask.array();
}

struct LayerCache {
  NormCache ln_self;
  AttnCache self;
  Matrix drop_self;
  NormCache ln_cross;
  AttnCache cross;
  Matrix drop_cross;
  NormCache ln_ffn;
  FfnCache ffn;
  Matrix drop_ffn;
};

/// Pre-norm residual block: self-attention, optional cross-attention, FFN.
Matrix layer_forward(Matrix x, const Matrix* memory, bool causal, const ParamVector& p,
                     const LayerIdx& l, int heads, const Dropper& drop, LayerCache* c) {
  {
    Matrix n = layer_norm(x, p, l.ln_self, c ? &c->ln_self : nullptr);
    Matrix a = attention(n, n, causal, p, l.self, heads, c ? &c->self : nullptr);
    Matrix mask;
    drop.apply(a, mask);
    if (c) c->drop_self = std::move(mask);
    x += a;
  }
  if (l.has_cross) {
    Matrix n = layer_norm(x, p, l.ln_cross, c ? &c->ln_cross : nullptr);
    Matrix a = attention(n, *memory, false, p, l.cross, heads, c ? &c->cross : nullptr);
    Matrix mask;
    drop.apply(a, mask);
    if (c) c->drop_cross = std::move(mask);
    x += a;
  }
  {
    Matrix n = layer_norm(x, p, l.ln_ffn, c ? &c->ln_ffn : nullptr);
    Matrix f = feed_forward(n, p, l.ffn, c ? &c->ffn : nullptr);
    Matrix mask;
    drop.apply(f, mask);
    if (c) c->drop_ffn = std::move(mask);
    x += f;
  }
  return x;
}

/// Returns dx; adds the cross-attention memory gradient into *dmemory.
Matrix layer_backward(Matrix dy, const LayerCache& c, ParamVector& p, const LayerIdx& l,
                      int heads, Matrix* dmemory) {
  {
    Matrix df = dy;
    dropout_backward(df, c.drop_ffn);
    const Matrix dn = feed_forward_backward(df, c.ffn, p, l.ffn);
    dy += layer_norm_backward(dn, c.ln_ffn, p, l.ln_ffn);
  }
  if (l.has_cross) {
    Matrix da = dy;
    dropout_backward(da, c.drop_cross);
    auto [dq, dkv] = attention_backward(da, c.cross, p, l.cross, heads);
    *dmemory += dkv;
    dy += layer_norm_backward(dq, c.ln_cross, p, l.ln_cross);
  }
  {
    Matrix da = dy;
    dropout_backward(da, c.drop_self);
    auto [dq, dkv] = attention_backward(da, c.self, p, l.self, heads);
    dq += dkv;
    dy += layer_norm_backward(dq, c.ln_self, p, l.ln_self);
  }
  return dy;
}

struct StackCache {
  Matrix drop_embed;
  std::vector<LayerCache> layers;
  NormCache final_norm;
};

Matrix stack_forward(std::span<const int> ids, const Matrix* memory, bool causal,
                     const ParamVector& p, std::size_t embed_slot,
                     const std::vector<LayerIdx>& layers, NormIdx final_norm, int d, int heads,
                     const Dropper& drop, StackCache* c) {
  Matrix x = embed(p, embed_slot, ids, d);
  Matrix mask;
  drop.apply(x, mask);
  if (c) {
    c->drop_embed = std::move(mask);
    c->layers.resize(layers.size());
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = layer_forward(std::move(x), memory, causal, p, layers[i], heads, drop,
                      c ? &c->layers[i] : nullptr);
  }
  return layer_norm(x, p, final_norm, c ? &c->final_norm : nullptr);
}

void stack_backward(const Matrix& dout, std::span<const int> ids, const StackCache& c,
                    ParamVector& p, std::size_t embed_slot, const std::vector<LayerIdx>& layers,
                    NormIdx final_norm, int heads, Matrix* dmemory) {
  Matrix dx = layer_norm_backward(dout, c.final_norm, p, final_norm);
  for (std::size_t i = layers.size(); i-- > 0;) {
    dx = layer_backward(std::move(dx), c.layers[i], p, layers[i], heads, dmemory);
  }
  dropout_backward(dx, c.drop_embed);
  embed_backward(p, embed_slot, ids, dx);
}

void check_ids(std::span<const int> ids, int vocab, const char* side) {
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw ModelError(std::string(side) + " token id " + std::to_string(id) +
                       " out of range for vocabulary of " + std::to_string(vocab));
    }
  }
}

/// Forward (and optionally backward) for one batch row. Returns per-position
/// NLL. When `grad_scale` > 0 gradients of grad_scale * sum(NLL) are added.
std::vector<double> row_pass(const ParamVector& params, ParamVector* grads_into,
                             const ModelConfig& cfg, const ModelIdx& idx, ModelKind kind,
                             std::span<const int> source, std::span<const int> target,
                             const Dropper& drop, double grad_scale) {
  const int d = cfg.d_model;
  const int heads = cfg.n_heads;
  const bool need_grad = grads_into != nullptr;

  std::vector<int> dec_in(target.size());
  if (!target.empty()) {
    dec_in[0] = kBos;
    for (std::size_t t = 1; t < target.size(); ++t) dec_in[t] = target[t - 1];
  }

  StackCache enc_cache, dec_cache;
  Matrix memory;
  const Matrix* mem_ptr = nullptr;
  if (kind == ModelKind::Translator) {
    memory = stack_forward(source, nullptr, false, params, idx.embed, idx.encoder,
                           idx.encoder_norm, d, heads, drop, need_grad ? &enc_cache : nullptr);
    mem_ptr = &memory;
  }
  const Matrix z = stack_forward(dec_in, mem_ptr, true, params, idx.embed, idx.decoder,
                                 idx.decoder_norm, d, heads, drop,
                                 need_grad ? &dec_cache : nullptr);
  Matrix logits = linear(z, params, idx.out);

  std::vector<double> nll(target.size());
  for (Eigen::Index t = 0; t < logits.rows(); ++t) {
    const double mx = logits.row(t).maxCoeff();
    RowVector e = (logits.row(t).array() - mx).exp();
    const double sum = e.sum();
    const double log_z = mx + std::log(sum);
    nll[static_cast<std::size_t>(t)] = log_z - logits(t, target[static_cast<std::size_t>(t)]);
    if (need_grad) {
      // d(nll)/d(logits) = softmax - onehot
      logits.row(t) = e / sum;
      logits(t, target[static_cast<std::size_t>(t)]) -= 1.0;
    }
  }
  if (!need_grad) return nll;

  ParamVector& g = *grads_into;
  const Matrix dlogits = logits * grad_scale;
  const Matrix dz = linear_backward(z, dlogits, g, idx.out);
  Matrix dmemory;
  if (kind == ModelKind::Translator) dmemory = Matrix::Zero(memory.rows(), memory.cols());
  stack_backward(dz, dec_in, dec_cache, g, idx.embed, idx.decoder, idx.decoder_norm, heads,
                 kind == ModelKind::Translator ? &dmemory : nullptr);
  if (kind == ModelKind::Translator) {
    stack_backward(dmemory, source, enc_cache, g, idx.embed, idx.encoder, idx.encoder_norm,
                   heads, nullptr);
  }
  return nll;
}

void check_batch(const Batch& batch, const ModelConfig& config, ModelKind kind) {
  for (std::size_t r = 0; r < batch.rows; ++r) {
    check_ids(batch.target_row(r), config.vocab_size, "target");
    if (kind == ModelKind::Translator) check_ids(batch.source_row(r), config.vocab_size, "source");
    if (batch.target_lengths[r] > static_cast<std::size_t>(config.max_len) + 1 ||
        (kind == ModelKind::Translator &&
         batch.source_lengths[r] > static_cast<std::size_t>(config.max_len) + 1)) {
      throw ModelError("sequence longer than max_len " + std::to_string(config.max_len));
    }
    if (kind == ModelKind::Translator && batch.target_lengths[r] > 0 &&
        batch.source_lengths[r] == 0) {
      throw ModelError("translator row " + std::to_string(r) + " has an empty source");
    }
  }
}

}  // namespace

ParamVector init_params(const ModelConfig& config, ModelKind kind, std::uint64_t seed) {
  config.validate();
  ParamVector params;
  build_layout(config, kind, [&](const std::string& name, std::size_t r, std::size_t c) {
    return params.add(name, r, c);
  });
  Rng rng(seed);
  for (std::size_t s = 0; s < params.layout().size(); ++s) {
    const TensorSlot& slot = params.slot(s);
    auto v = params.value(s);
    const bool is_bias = slot.name.ends_with(".b") || slot.name.ends_with(".bias");
    if (slot.name.ends_with(".gain")) {
      v.setOnes();
    } else if (is_bias) {
      v.setZero();
    } else {
      const double std_dev = slot.name == "embed"
                                 ? 1.0 / std::sqrt(static_cast<double>(config.d_model))
                                 : std::sqrt(2.0 / static_cast<double>(slot.rows + slot.cols));
      for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = rng.normal() * std_dev;
    }
  }
  return params;
}

Batch make_batch(std::span<const Example> examples, ModelKind kind) {
  Batch b;
  b.rows = examples.size();
  for (const auto& e : examples) {
    if (kind == ModelKind::Translator) b.source_cols = std::max(b.source_cols, e.source.size() + 1);
    b.target_cols = std::max(b.target_cols, e.target.size() + 1);
  }
  b.source.assign(b.rows * b.source_cols, kPad);
  b.target.assign(b.rows * b.target_cols, kPad);
  for (std::size_t r = 0; r < b.rows; ++r) {
    const auto& e = examples[r];
    if (kind == ModelKind::Translator) {
      std::copy(e.source.begin(), e.source.end(), b.source.begin() + static_cast<std::ptrdiff_t>(r * b.source_cols));
      b.source[r * b.source_cols + e.source.size()] = kEos;
      b.source_lengths.push_back(e.source.size() + 1);
    } else {
      b.source_lengths.push_back(0);
    }
    std::copy(e.target.begin(), e.target.end(), b.target.begin() + static_cast<std::ptrdiff_t>(r * b.target_cols));
    b.target[r * b.target_cols + e.target.size()] = kEos;
    b.target_lengths.push_back(e.target.size() + 1);
    b.target_tokens += e.target.size() + 1;
  }
  return b;
}

void append_padding_row(Batch& batch) {
  batch.source.resize(batch.source.size() + batch.source_cols, kPad);
  batch.target.resize(batch.target.size() + batch.target_cols, kPad);
  batch.source_lengths.push_back(0);
  batch.target_lengths.push_back(0);
  ++batch.rows;
}

LossResult forward_loss(const ParamVector& params, const ModelConfig& config, const Batch& batch,
                        ModelKind kind) {
  config.validate();
  const ModelIdx idx = index_for(params, config, kind);
  check_batch(batch, config, kind);
  LossResult result;
  result.per_token_nll = Matrix::Zero(static_cast<Eigen::Index>(batch.rows),
                                      static_cast<Eigen::Index>(batch.target_cols));
  double total = 0.0;
  for (std::size_t r = 0; r < batch.rows; ++r) {
    if (batch.target_lengths[r] == 0) continue;
    const auto nll = row_pass(params, nullptr, config, idx, kind, batch.source_row(r),
                              batch.target_row(r), Dropper{}, 0.0);
    for (std::size_t t = 0; t < nll.size(); ++t) {
      result.per_token_nll(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(t)) = nll[t];
      total += nll[t];
    }
    result.tokens += nll.size();
  }
  result.loss = result.tokens ? total / static_cast<double>(result.tokens) : 0.0;
  return result;
}

double backward(ParamVector& params, const ModelConfig& config, const Batch& batch,
                ModelKind kind, const DropoutContext* dropout) {
  config.validate();
  const ModelIdx idx = index_for(params, config, kind);
  check_batch(batch, config, kind);
  params.zero_grad();
  std::size_t tokens = 0;
  for (std::size_t r = 0; r < batch.rows; ++r) tokens += batch.target_lengths[r];
  if (tokens == 0) return 0.0;
  const double scale = 1.0 / static_cast<double>(tokens);
  double total = 0.0;
  for (std::size_t r = 0; r < batch.rows; ++r) {
    if (batch.target_lengths[r] == 0) continue;
    std::optional<Rng> rng;
    Dropper drop;
    if (dropout && config.dropout > 0.0) {
      rng.emplace(derive_seed(dropout->seed, {r}));
      drop = Dropper{&*rng, config.dropout};
    }
    const auto nll = row_pass(params, &params, config, idx, kind, batch.source_row(r),
                              batch.target_row(r), drop, scale);
    for (double v : nll) total += v;
  }
  return total * scale;
}

std::vector<double> lm_token_log_probs(const ParamVector& params, const ModelConfig& config,
                                       std::span<const int> sentence) {
  config.validate();
  const ModelIdx idx = index_for(params, config, ModelKind::LanguageModel);
  std::vector<int> target(sentence.begin(), sentence.end());
  target.push_back(kEos);
  check_ids(target, config.vocab_size, "target");
  auto nll = row_pass(params, nullptr, config, idx, ModelKind::LanguageModel, {}, target,
                      Dropper{}, 0.0);
  for (double& v : nll) v = -v;
  return nll;
}

// ---------------------------------------------------------------------------
// Incremental decoding

TranslatorDecoder::TranslatorDecoder(const ParamVector& params, const ModelConfig& config,
                                     std::span<const int> source)
    : params_(params),
      config_(config),
      index_(std::make_shared<const ModelIdx>(index_for(params, config, ModelKind::Translator))) {
  config.validate();
  const ModelIdx& idx = *index_;
  std::vector<int> src(source.begin(), source.end());
  src.push_back(kEos);
  check_ids(src, config.vocab_size, "source");
  const Matrix memory = stack_forward(src, nullptr, false, params, idx.embed, idx.encoder,
                                      idx.encoder_norm, config.d_model, config.n_heads,
                                      Dropper{}, nullptr);
  for (const auto& layer : idx.decoder) {
    cross_keys_.push_back(linear(memory, params, layer.cross.k));
    cross_values_.push_back(linear(memory, params, layer.cross.v));
  }
}

TranslatorDecoder::State TranslatorDecoder::initial_state() const {
  State s;
  s.keys.assign(cross_keys_.size(), Matrix(0, config_.d_model));
  s.values.assign(cross_keys_.size(), Matrix(0, config_.d_model));
  return s;
}

namespace {

RowVector attend(const RowVector& q, const Matrix& keys, const Matrix& values, int heads) {
  const Eigen::Index dk = q.cols() / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  RowVector out(q.cols());
  for (int h = 0; h < heads; ++h) {
    RowVector s = q.segment(h * dk, dk) * keys.middleCols(h * dk, dk).transpose() * scale;
    const double mx = s.maxCoeff();
    s = (s.array() - mx).exp();
    s /= s.sum();
    out.segment(h * dk, dk).noalias() = s * values.middleCols(h * dk, dk);
  }
  return out;
}

void append_row(Matrix& m, const Matrix& row) {
  m.conservativeResize(m.rows() + 1, Eigen::NoChange);
  m.row(m.rows() - 1) = row.row(0);
}

}  // namespace

RowVector TranslatorDecoder::step(State& state, int token) const {
  const ModelIdx& idx = *index_;
  const int heads = config_.n_heads;
  const int d = config_.d_model;
  if (token < 0 || token >= config_.vocab_size) throw ModelError("decoder token out of range");
  const auto table = params_.value(idx.embed);
  const double scale = std::sqrt(static_cast<double>(d));
  Matrix x(1, d);
  for (int i = 0; i < d; ++i) x(0, i) = table(token, i) * scale + positional(state.length, i, d);
  for (std::size_t l = 0; l < idx.decoder.size(); ++l) {
    const LayerIdx& layer = idx.decoder[l];
    {
      const Matrix n = layer_norm(x, params_, layer.ln_self, nullptr);
      const Matrix q = linear(n, params_, layer.self.q);
      append_row(state.keys[l], linear(n, params_, layer.self.k));
      append_row(state.values[l], linear(n, params_, layer.self.v));
      const Matrix ctx = attend(q.row(0), state.keys[l], state.values[l], heads);
      x += linear(ctx, params_, layer.self.o);
    }
    {
      const Matrix n = layer_norm(x, params_, layer.ln_cross, nullptr);
      const Matrix q = linear(n, params_, layer.cross.q);
      const Matrix ctx = attend(q.row(0), cross_keys_[l], cross_values_[l], heads);
      x += linear(ctx, params_, layer.cross.o);
    }
    {
      const Matrix n = layer_norm(x, params_, layer.ln_ffn, nullptr);
      x += feed_forward(n, params_, layer.ffn, nullptr);
    }
  }
  ++state.length;
  const Matrix z = layer_norm(x, params_, idx.decoder_norm, nullptr);
  RowVector logits = linear(z, params_, idx.out).row(0);
  const double mx = logits.maxCoeff();
  const double log_z = mx + std::log((logits.array() - mx).exp().sum());
  return logits.array() - log_z;
}

BeamResult beam_search(const ParamVector& params, const ModelConfig& config,
                       std::span<const int> source, int beam, int max_out) {
  if (beam < 1) throw ModelError("beam must be >= 1");
  if (max_out < 1) throw ModelError("max_out must be >= 1");
  const TranslatorDecoder decoder(params, config, source);

  struct Hyp {
    TokenIds tokens;
    double log_prob = 0.0;
    TranslatorDecoder::State state;
  };
  struct Candidate {
    std::size_t beam_index;
    int token;
    double log_prob;
  };

  std::vector<Hyp> alive;
  alive.push_back(Hyp{{}, 0.0, decoder.initial_state()});
  std::vector<BeamResult> finished;

  for (int t = 1; t <= max_out && !alive.empty(); ++t) {
    std::vector<Candidate> candidates;
    std::vector<RowVector> step_log_probs;
    for (std::size_t b = 0; b < alive.size(); ++b) {
      const int prev = alive[b].tokens.empty() ? kBos : alive[b].tokens.back();
      RowVector lp = decoder.step(alive[b].state, prev);
      for (int tok = 0; tok < config.vocab_size; ++tok) {
        if (tok == kPad || tok == kBos) continue;
        if (t == max_out && tok != kEos) continue;
        candidates.push_back({b, tok, alive[b].log_prob + lp(tok)});
      }
    }
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Candidate& a, const Candidate& b) { return a.log_prob > b.log_prob; });
    if (candidates.size() > static_cast<std::size_t>(beam)) candidates.resize(static_cast<std::size_t>(beam));

    std::vector<Hyp> next;
    for (const auto& c : candidates) {
      const Hyp& parent = alive[c.beam_index];
      if (c.token == kEos) {
        const double len = static_cast<double>(parent.tokens.size() + 1);
        finished.push_back(BeamResult{parent.tokens, c.log_prob, c.log_prob / len});
      } else {
        Hyp h{parent.tokens, c.log_prob, parent.state};
        h.tokens.push_back(c.token);
        next.push_back(std::move(h));
      }
    }
    alive = std::move(next);
    if (finished.size() >= static_cast<std::size_t>(beam)) break;
  }

  auto best = finished.begin();
  for (auto it = finished.begin(); it != finished.end(); ++it) {
    if (it->score > best->score) best = it;
  }
  return *best;
}

}  // namespace mcl::nn
