#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "mcl/checkpoint.hpp"
#include "mcl/model.hpp"
#include "mcl/optim.hpp"
#include "mcl/rng.hpp"
#include "mcl/train.hpp"
#include "oracles.hpp"

using namespace mcl;
using namespace mcl::nn;

namespace {

ModelConfig tiny_config(int vocab = 11) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_hidden = 12;
  c.max_len = 20;
  c.vocab_size = vocab;
  return c;
}

TokenIds random_sentence(Rng& rng, int vocab, int min_len, int max_len) {
  const auto len = static_cast<int>(min_len + rng.uniform_index(static_cast<std::uint64_t>(max_len - min_len + 1)));
  TokenIds s;
  for (int i = 0; i < len; ++i) {
    s.push_back(kNumReserved + static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(vocab - kNumReserved))));
  }
  return s;
}

std::vector<Example> random_examples(std::uint64_t seed, int vocab, ModelKind kind, int n) {
  Rng rng(seed);
  std::vector<Example> out;
  for (int i = 0; i < n; ++i) {
    Example e;
    if (kind == ModelKind::Translator) e.source = random_sentence(rng, vocab, 1, 5);
    e.target = random_sentence(rng, vocab, 1, 5);
    out.push_back(std::move(e));
  }
  return out;
}

void zero_output_projection(ParamVector& p) {
  p.value(p.find("out.w")).setZero();
  p.value(p.find("out.b")).setZero();
}

/// Greedy argmax decoding through the incremental decoder; ties to smaller id.
TokenIds greedy(const ParamVector& p, const ModelConfig& c, const TokenIds& src, int max_out) {
  TranslatorDecoder dec(p, c, src);
  auto state = dec.initial_state();
  TokenIds out;
  int prev = kBos;
  for (int t = 1; t <= max_out; ++t) {
    const RowVector lp = dec.step(state, prev);
    int best = kEos;
    if (t < max_out) {
      double best_lp = -std::numeric_limits<double>::infinity();
      for (int tok = 0; tok < c.vocab_size; ++tok) {
        if (tok == kPad || tok == kBos) continue;
        if (lp(tok) > best_lp) {
          best_lp = lp(tok);
          best = tok;
        }
      }
    }
    if (best == kEos) break;
    out.push_back(best);
    prev = best;
  }
  return out;
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ModelError);
  c = tiny_config();
  c.d_hidden = 0;
  CHECK_THROWS_AS(c.validate(), ModelError);
}

TEST_CASE("layout offsets tile the parameter array") {
  for (auto kind : {ModelKind::LanguageModel, ModelKind::Translator}) {
    const ParamVector p = init_params(tiny_config(), kind, 1);
    std::size_t expected = 0;
    for (const auto& s : p.layout()) {
      CHECK(s.offset == expected);
      expected += s.size();
    }
    CHECK(expected == p.size());
    CHECK(p.grads().size() == p.size());
  }
}

TEST_CASE("zeroed output projection gives uniform predictions") {
  const ModelConfig c = tiny_config(13);
  for (auto kind : {ModelKind::LanguageModel, ModelKind::Translator}) {
    ParamVector p = init_params(c, kind, 7);
    zero_output_projection(p);
    const auto ex = random_examples(3, c.vocab_size, kind, 4);
    const Batch b = make_batch(ex, kind);
    const LossResult r = forward_loss(p, c, b, kind);
    CHECK(r.loss == doctest::Approx(std::log(13.0)).epsilon(1e-12));
    for (std::size_t row = 0; row < b.rows; ++row) {
      for (std::size_t col = 0; col < b.target_cols; ++col) {
        if (b.target_mask(row, col)) {
          CHECK(r.per_token_nll(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(col)) ==
                doctest::Approx(std::log(13.0)).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("loss is the masked mean of the per-token NLL") {
  const ModelConfig c = tiny_config();
  const ParamVector p = init_params(c, ModelKind::LanguageModel, 5);
  const auto ex = random_examples(9, c.vocab_size, ModelKind::LanguageModel, 6);
  const Batch b = make_batch(ex, ModelKind::LanguageModel);
  const LossResult r = lm_forward_loss(p, c, b);
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t row = 0; row < b.rows; ++row) {
    for (std::size_t col = 0; col < b.target_cols; ++col) {
      const double v = r.per_token_nll(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(col));
      if (b.target_mask(row, col)) {
        CHECK(v >= 0.0);
        CHECK(std::isfinite(v));
        sum += v;
        ++n;
      } else {
        CHECK(v == 0.0);
      }
    }
  }
  CHECK(n == b.target_tokens);
  CHECK(r.loss == doctest::Approx(sum / static_cast<double>(n)).epsilon(1e-14));

  SUBCASE("single pair batch is the mean over that pair") {
    const auto one = random_examples(4, c.vocab_size, ModelKind::Translator, 1);
    const ParamVector pt = init_params(c, ModelKind::Translator, 2);
    const Batch bt = make_batch(one, ModelKind::Translator);
    const LossResult rt = forward_loss(pt, c, bt, ModelKind::Translator);
    CHECK(rt.loss == doctest::Approx(rt.per_token_nll.sum() / static_cast<double>(bt.target_tokens)));
  }
}

TEST_CASE("out of range ids are rejected") {
  const ModelConfig c = tiny_config();
  const ParamVector p = init_params(c, ModelKind::Translator, 1);
  std::vector<Example> ex{{{4, 5}, {4, 99}}};
  const Batch b = make_batch(ex, ModelKind::Translator);
  CHECK_THROWS_AS(forward_loss(p, c, b, ModelKind::Translator), ModelError);
}

TEST_CASE("analytic gradients match central finite differences") {
  for (auto kind : {ModelKind::LanguageModel, ModelKind::Translator}) {
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
      CAPTURE(seed);
      const ModelConfig c = tiny_config();
      ParamVector p = init_params(c, kind, seed);
      const auto ex = random_examples(seed + 100, c.vocab_size, kind, 3);
      const Batch b = make_batch(ex, kind);
      backward(p, c, b, kind);
      const std::vector<double> analytic(p.grads().begin(), p.grads().end());
      const auto numeric = testing::finite_difference_grad(
          p, [&] { return forward_loss(p, c, b, kind).loss; });
      CHECK(testing::max_relative_error(numeric, analytic) < 1e-4);
    }
  }
}

TEST_CASE("gradient check holds with a fixed dropout mask") {
  ModelConfig c = tiny_config();
  c.dropout = 0.2;
  ParamVector p = init_params(c, ModelKind::Translator, 11);
  const auto ex = random_examples(12, c.vocab_size, ModelKind::Translator, 2);
  const Batch b = make_batch(ex, ModelKind::Translator);
  const DropoutContext drop{42};
  backward(p, c, b, ModelKind::Translator, &drop);
  const std::vector<double> analytic(p.grads().begin(), p.grads().end());
  ParamVector scratch = p;
  const auto numeric = testing::finite_difference_grad(
      p, [&] {
        scratch.assign_values(p.values());
        return backward(scratch, c, b, ModelKind::Translator, &drop);
      });
  CHECK(testing::max_relative_error(numeric, analytic) < 1e-4);
  // dropout changes the loss relative to eval mode
  CHECK(backward(scratch, c, b, ModelKind::Translator, &drop) !=
        doctest::Approx(nmt_forward_loss(p, c, b)));
}

TEST_CASE("padding contributes nothing") {
  const ModelConfig c = tiny_config();
  for (auto kind : {ModelKind::LanguageModel, ModelKind::Translator}) {
    ParamVector p = init_params(c, kind, 21);

    Batch empty;
    append_padding_row(empty);
    append_padding_row(empty);
    CHECK(backward(p, c, empty, kind) == 0.0);
    for (double g : p.grads()) CHECK(g == 0.0);

    const auto ex = random_examples(22, c.vocab_size, kind, 3);
    Batch b = make_batch(ex, kind);
    const double loss = backward(p, c, b, kind);
    const std::vector<double> g1(p.grads().begin(), p.grads().end());
    append_padding_row(b);
    CHECK(backward(p, c, b, kind) == loss);
    CHECK(std::equal(g1.begin(), g1.end(), p.grads().begin()));
  }
}

TEST_CASE("gradients are deterministic and loss is permutation invariant") {
  const ModelConfig c = tiny_config();
  ParamVector p = init_params(c, ModelKind::Translator, 31);
  auto ex = random_examples(32, c.vocab_size, ModelKind::Translator, 5);
  const Batch b = make_batch(ex, ModelKind::Translator);
  backward(p, c, b, ModelKind::Translator);
  const std::vector<double> g1(p.grads().begin(), p.grads().end());
  backward(p, c, b, ModelKind::Translator);
  CHECK(std::equal(g1.begin(), g1.end(), p.grads().begin()));

  const double loss = nmt_forward_loss(p, c, b);
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    rng.shuffle(ex);
    CHECK(nmt_forward_loss(p, c, make_batch(ex, ModelKind::Translator)) ==
          doctest::Approx(loss).epsilon(1e-13));
  }
}

TEST_CASE("sgd and adam updates") {
  ParamVector p;
  const auto s = p.add("theta", 1, 2);
  p.value(s) << 1.0, 2.0;
  p.grad(s) << 0.5, -0.5;

  SUBCASE("sgd") {
    auto opt = OptimizerState::sgd(0.1);
    optimizer_step(p, opt);
    CHECK(p.value(s)(0, 0) == doctest::Approx(0.95).epsilon(1e-15));
    CHECK(p.value(s)(0, 1) == doctest::Approx(2.05).epsilon(1e-15));
    CHECK(opt.step == 1);
  }
  SUBCASE("adam with a constant gradient moves lr * g / (|g| + eps) per step") {
    auto opt = OptimizerState::adam(0.1);
    optimizer_step(p, opt);
    // m_hat = 0.5, v_hat = 0.25 after bias correction
    const double delta = 0.1 * 0.5 / (0.5 + 1e-8);
    CHECK(p.value(s)(0, 0) == doctest::Approx(1.0 - delta).epsilon(1e-15));
    CHECK(p.value(s)(0, 1) == doctest::Approx(2.0 + delta).epsilon(1e-15));
    optimizer_step(p, opt);
    CHECK(p.value(s)(0, 0) == doctest::Approx(1.0 - 2 * delta).epsilon(1e-14));
    CHECK(opt.m[0] == doctest::Approx(0.095));
    CHECK(opt.v[0] == doctest::Approx(0.0099));
  }
  SUBCASE("zero gradient") {
    p.zero_grad();
    auto sgd = OptimizerState::sgd(0.1);
    optimizer_step(p, sgd);
    CHECK(p.value(s)(0, 0) == 1.0);
    auto adam = OptimizerState::adam(0.1);
    p.grad(s) << 0.5, 0.0;
    optimizer_step(p, adam);
    p.zero_grad();
    const double before = p.value(s)(0, 1);
    optimizer_step(p, adam);
    CHECK(adam.m[1] == 0.0);
    CHECK(p.value(s)(0, 1) == before);
  }
  SUBCASE("non-finite gradient names the tensor") {
    ParamVector q;
    q.add("a", 1, 1);
    const auto b = q.add("b.w", 2, 2);
    q.grad(b)(1, 0) = std::numeric_limits<double>::quiet_NaN();
    auto opt = OptimizerState::adam(0.1);
    try {
      optimizer_step(q, opt);
      FAIL("expected NonFiniteGradient");
    } catch (const NonFiniteGradient& e) {
      CHECK(e.tensor() == "b.w");
    }
  }
}

TEST_CASE("warm-up schedule closed form") {
  const int d = 64;
  const std::int64_t warmup = 200;
  for (std::int64_t s : {1, 50, 199}) {
    const double expected = std::pow(64.0, -0.5) * static_cast<double>(s) * std::pow(200.0, -1.5);
    CHECK(noam_lr(d, s, warmup) == doctest::Approx(expected).epsilon(1e-14));
  }
  // linear during warm-up
  CHECK(noam_lr(d, 100, warmup) == doctest::Approx(2 * noam_lr(d, 50, warmup)).epsilon(1e-14));
  CHECK(noam_lr(d, 800, warmup) == doctest::Approx(std::pow(64.0, -0.5) / std::sqrt(800.0)).epsilon(1e-14));
}

TEST_CASE("incremental decoder matches the full forward pass") {
  const ModelConfig c = tiny_config();
  const ParamVector p = init_params(c, ModelKind::Translator, 41);
  const TokenIds src{4, 7, 9, 5};
  const TokenIds tgt{6, 8, 4};
  std::vector<Example> ex{{src, tgt}};
  const LossResult full = forward_loss(p, c, make_batch(ex, ModelKind::Translator), ModelKind::Translator);

  TranslatorDecoder dec(p, c, src);
  auto state = dec.initial_state();
  int prev = kBos;
  TokenIds with_eos = tgt;
  with_eos.push_back(kEos);
  for (std::size_t t = 0; t < with_eos.size(); ++t) {
    const RowVector lp = dec.step(state, prev);
    CHECK(-lp(with_eos[t]) == doctest::Approx(full.per_token_nll(0, static_cast<Eigen::Index>(t))).epsilon(1e-12));
    CHECK(lp.array().exp().sum() == doctest::Approx(1.0).epsilon(1e-12));
    prev = with_eos[t];
  }
}

TEST_CASE("beam search") {
  const ModelConfig c = tiny_config(9);
  SUBCASE("beam 1 is greedy") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const ParamVector p = init_params(c, ModelKind::Translator, seed);
      const TokenIds src{4, 5, 6};
      CHECK(beam_decode(p, c, src, 1, 6) == greedy(p, c, src, 6));
    }
  }
  SUBCASE("full-width beam on two steps equals exhaustive search") {
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      const ParamVector p = init_params(c, ModelKind::Translator, seed);
      const TokenIds src{4, 8};
      // Brute force over outputs of length <= 2: [EOS] and [a, EOS].
      TranslatorDecoder dec(p, c, src);
      auto s0 = dec.initial_state();
      const RowVector first = dec.step(s0, kBos);
      double best = first(kEos);
      TokenIds best_tokens;
      for (int a = 0; a < c.vocab_size; ++a) {
        if (a == kPad || a == kBos || a == kEos) continue;
        auto s1 = s0;
        const RowVector second = dec.step(s1, a);
        const double score = (first(a) + second(kEos)) / 2.0;
        if (score > best) {
          best = score;
          best_tokens = {a};
        }
      }
      const BeamResult r = beam_search(p, c, src, c.vocab_size, 2);
      CHECK(r.tokens == best_tokens);
      CHECK(r.score == doctest::Approx(best).epsilon(1e-12));
    }
  }
  SUBCASE("invalid beam") {
    const ParamVector p = init_params(c, ModelKind::Translator, 1);
    CHECK_THROWS_AS(beam_search(p, c, TokenIds{4}, 0, 3), ModelError);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  const ModelConfig c = tiny_config();
  const ParamVector p = init_params(c, ModelKind::Translator, 77);
  const auto dir = std::filesystem::temp_directory_path() / "mcl_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.ckpt";
  save_checkpoint(path, ModelKind::Translator, c, p);
  save_sidecar(path, {{"seed", 77}, {"step", 0}, {"loss_history", std::vector<double>{}}});
  const Checkpoint ck = load_checkpoint(path);
  CHECK(ck.kind == ModelKind::Translator);
  CHECK(ck.config == c);
  CHECK(ck.params.same_layout(p));
  CHECK(ck.params.value_hash() == p.value_hash());
  CHECK(load_sidecar(path).at("seed") == 77);

  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
  }
  CHECK_THROWS_AS(load_checkpoint(path), CheckpointError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("training reduces loss to zero on degenerate data") {
  SUBCASE("language model memorizes a single-token vocabulary") {
    ModelConfig c = tiny_config(kNumReserved + 1);
    ParamVector p = init_params(c, ModelKind::LanguageModel, 3);
    std::vector<Example> data(8, Example{{}, {4, 4, 4, 4, 4}});
    FitConfig fc;
    fc.lr = 1e-2;
    fc.epochs = 150;
    fc.batch_sentences = 8;
    fit(p, c, ModelKind::LanguageModel, data, {}, fc);
    CHECK(dataset_loss(p, c, ModelKind::LanguageModel, data) < 0.01);
  }
  SUBCASE("zero step budget leaves parameters unchanged") {
    const ModelConfig c = tiny_config();
    ParamVector p = init_params(c, ModelKind::Translator, 3);
    const auto before = p.value_hash();
    FitConfig fc;
    fc.max_steps = 0;
    const auto h = fit(p, c, ModelKind::Translator, random_examples(1, c.vocab_size, ModelKind::Translator, 4), {}, fc);
    CHECK(h.steps == 0);
    CHECK(p.value_hash() == before);
  }
}

TEST_CASE("copy task converges and beam search reproduces the input") {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.n_heads = 2;
  c.d_hidden = 64;
  c.max_len = 20;
  c.vocab_size = kNumReserved + 10;
  Rng rng(2024);
  std::vector<Example> data;
  for (int i = 0; i < 200; ++i) {
    TokenIds s = random_sentence(rng, c.vocab_size, 3, 7);
    data.push_back({s, s});
  }
  ParamVector p = init_params(c, ModelKind::Translator, 9);
  FitConfig fc;
  fc.lr = 3e-3;
  fc.epochs = 120;
  fc.batch_sentences = 20;
  fc.seed = 1;
  const FitHistory h = fit(p, c, ModelKind::Translator, data, {}, fc);
  const double loss = dataset_loss(p, c, ModelKind::Translator, data);
  MESSAGE("copy-task loss after " << h.steps << " steps: " << loss);
  CHECK(loss < 0.1);
  int exact = 0;
  for (int i = 0; i < 20; ++i) {
    const auto& src = data[static_cast<std::size_t>(i)].source;
    const auto out = beam_decode(p, c, src, 5, 16);
    if (out != src) {
      std::string a, b;
      for (int t : src) a += std::to_string(t) + " ";
      for (int t : out) b += std::to_string(t) + " ";
      MESSAGE("src " << a << " out " << b << " greedy " << (greedy(p, c, src, 16) == src));
    }
    exact += out == src;
  }
  CHECK(exact == 20);
}
