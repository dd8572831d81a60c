#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcl/corpus.hpp"
#include "mcl/param_vector.hpp"

namespace mcl::nn {

namespace detail {
struct ModelIdx;
}

class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ModelKind { LanguageModel, Translator };

std::string_view to_string(ModelKind kind);
ModelKind model_kind_from_string(std::string_view s);

struct ModelConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 2;
  int d_hidden = 128;
  int max_len = static_cast<int>(kDefaultMaxLen);
  int vocab_size = 0;
  double dropout = 0.0;

  void validate() const;
  int head_dim() const { return d_model / n_heads; }

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

/// Allocates the parameter layout for `kind` and draws initial values.
ParamVector init_params(const ModelConfig& config, ModelKind kind, std::uint64_t seed);

/// One training example. For language models `source` is empty and `target`
/// is the sentence. EOS is appended by make_batch, never stored here.
struct Example {
  TokenIds source;
  TokenIds target;
};

/// PAD-padded id matrices (row-major). Source rows carry tokens + EOS; target
/// rows carry tokens + EOS and the decoder input is BOS + target[0..n-1).
struct Batch {
  std::size_t rows = 0;
  std::size_t source_cols = 0;
  std::size_t target_cols = 0;
  std::vector<int> source;
  std::vector<int> target;
  std::vector<std::size_t> source_lengths;
  std::vector<std::size_t> target_lengths;
  std::size_t target_tokens = 0;

  std::span<const int> source_row(std::size_t r) const {
    return {source.data() + r * source_cols, source_lengths[r]};
  }
  std::span<const int> target_row(std::size_t r) const {
    return {target.data() + r * target_cols, target_lengths[r]};
  }
  bool target_mask(std::size_t r, std::size_t c) const {
    return target[r * target_cols + c] != kPad;
  }
};

/// `kind` decides whether source rows are materialised.
Batch make_batch(std::span<const Example> examples, ModelKind kind);

/// Appends an all-PAD row (used to test that padding is inert).
void append_padding_row(Batch& batch);

struct LossResult {
  double loss = 0.0;          // mean NLL over non-PAD target positions
  Matrix per_token_nll;       // rows x target_cols, zero at PAD
  std::size_t tokens = 0;
};

LossResult forward_loss(const ParamVector& params, const ModelConfig& config, const Batch& batch,
                        ModelKind kind);

inline LossResult lm_forward_loss(const ParamVector& params, const ModelConfig& config,
                                  const Batch& batch) {
  return forward_loss(params, config, batch, ModelKind::LanguageModel);
}

inline double nmt_forward_loss(const ParamVector& params, const ModelConfig& config,
                               const Batch& batch) {
  return forward_loss(params, config, batch, ModelKind::Translator).loss;
}

/// Dropout masks are drawn from (seed, row) so a given seed makes the loss a
/// deterministic function of the parameters.
struct DropoutContext {
  std::uint64_t seed = 0;
};

/// Recomputes the forward pass and overwrites params.grads() with the exact
/// gradient of the token-mean loss. Returns the loss. Dropout is only active
/// when `dropout` is given and config.dropout > 0.
double backward(ParamVector& params, const ModelConfig& config, const Batch& batch,
                ModelKind kind, const DropoutContext* dropout = nullptr);

/// Log-probability of every token of `sentence` followed by EOS, conditioned
/// on BOS, under a language model. Length is sentence.size() + 1.
std::vector<double> lm_token_log_probs(const ParamVector& params, const ModelConfig& config,
                                       std::span<const int> sentence);

/// Incremental translator decoder: runs the encoder once and keeps per-layer
/// self-attention keys/values for each hypothesis.
class TranslatorDecoder {
 public:
  struct State {
    std::vector<Matrix> keys;
    std::vector<Matrix> values;
    int length = 0;
  };

  TranslatorDecoder(const ParamVector& params, const ModelConfig& config,
                    std::span<const int> source);

  State initial_state() const;

  /// Feeds `token` at the next position and returns next-token log-probs.
  RowVector step(State& state, int token) const;

 private:
  const ParamVector& params_;
  const ModelConfig& config_;
  std::shared_ptr<const detail::ModelIdx> index_;
  std::vector<Matrix> cross_keys_;
  std::vector<Matrix> cross_values_;
};

struct BeamResult {
  TokenIds tokens;          // without EOS
  double log_prob = 0.0;    // sum over tokens + EOS
  double score = 0.0;       // log_prob / (tokens.size() + 1)
};

/// Beam search over the translator. Ranks finished hypotheses by mean token
/// log-probability; ties go to the earlier beam slot. EOS is forced at
/// `max_out` steps. PAD and BOS are never emitted.
BeamResult beam_search(const ParamVector& params, const ModelConfig& config,
                       std::span<const int> source, int beam, int max_out);

inline TokenIds beam_decode(const ParamVector& params, const ModelConfig& config,
                            std::span<const int> source, int beam, int max_out) {
  return beam_search(params, config, source, beam, max_out).tokens;
}

}  // namespace mcl::nn
