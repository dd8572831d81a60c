#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mcl/corpus.hpp"
#include "mcl/model.hpp"

namespace mcl::eval {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

constexpr int kMaxOrder = 4;

/// Clipped n-gram match counts and lengths; sums over sentences.
struct BleuStats {
  std::array<std::size_t, kMaxOrder> matches{};
  std::array<std::size_t, kMaxOrder> totals{};
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;

  BleuStats& operator+=(const BleuStats& o);
};

BleuStats sentence_stats(std::span<const std::string> hyp, std::span<const std::string> ref);

struct Bleu {
  double score = 0.0;  // 0..100
  std::array<double, kMaxOrder> precisions{};
  double brevity_penalty = 0.0;
  std::size_t hyp_len = 0;
  std::size_t ref_len = 0;
};

/// Unsmoothed: zero as soon as any precision is zero (including 0/0).
Bleu bleu_from_stats(const BleuStats& stats);

/// Case-sensitive corpus BLEU over tokenized text.
Bleu corpus_bleu(std::span<const Tokens> hypotheses, std::span<const Tokens> references);

/// Sentence BLEU with add-one smoothing on orders 2..4, 0..100. Only used
/// for bucket diagnostics.
double sentence_bleu_proxy(std::span<const std::string> hyp, std::span<const std::string> ref);

struct Bucket {
  std::string label;
  std::vector<std::size_t> members;  // indices into the evaluated set
  std::optional<double> bleu;        // corpus BLEU over members; empty bucket: none
  double mean_proxy = 0.0;

  nlohmann::json to_json() const;
  static Bucket from_json(const nlohmann::json& j);
};

struct DifficultyBuckets {
  std::vector<Bucket> buckets;  // easy, medium, hard
  double q33 = 0.0;
  double q67 = 0.0;
  bool degenerate = false;      // some bucket is empty

  nlohmann::json to_json() const;
  static DifficultyBuckets from_json(const nlohmann::json& j);
};

/// Tercile split on divergence; a score equal to a cut point goes to the lower
/// bucket. Needs at least three sentences.
DifficultyBuckets difficulty_buckets(std::span<const double> divergence,
                                     std::span<const Tokens> hypotheses,
                                     std::span<const Tokens> references);

/// Source-length bin: 0 for [1,10), 1 for [10,20), ..., 5 for [50,inf).
int length_bin(std::size_t length);
std::string length_label(int bin);

/// Non-empty source-length bins in ascending order.
std::vector<Bucket> length_buckets(std::span<const SentencePair> pairs,
                                   std::span<const Tokens> hypotheses);

struct DomainEval {
  Bleu bleu;
  std::vector<Tokens> hypotheses;
};

/// Beam-decodes every query source and scores against the targets.
DomainEval evaluate_domain(const nn::ParamVector& params, const nn::ModelConfig& model,
                           const Vocabulary& vocab, std::span<const SentencePair> query,
                           int beam = 5);

/// Order-sensitive hash of query pair ids; reports must agree on it to be compared.
std::uint64_t query_manifest_hash(std::span<const SentencePair> query);

/// Whether a domain was seen during meta-training.
enum class Exposure { Seen, Unseen };
std::string to_string(Exposure role);
Exposure exposure_from_string(const std::string& s);

struct DomainResult {
  Exposure role = Exposure::Unseen;
  double bleu_before = 0.0;
  double bleu_after = 0.0;
  std::uint64_t manifest = 0;
  std::optional<DifficultyBuckets> difficulty;  // after adaptation
  std::vector<Bucket> lengths;                  // after adaptation

  double delta() const { return bleu_after - bleu_before; }
};

/// One system's before/after adaptation results per domain.
struct EvalReport {
  std::string system;
  std::map<std::string, DomainResult> domains;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

/// Per-domain mean of BLEU before/after over runs of the same system. Bucket
/// tables are dropped.
EvalReport average_reports(std::span<const EvalReport> runs);

struct TableRow {
  std::string label;
  std::vector<double> values;  // one per column
  double unseen_avg = 0.0;
  double seen_avg = 0.0;
  bool is_delta = false;
};

struct ComparisonTable {
  std::vector<std::string> unseen;
  std::vector<std::string> seen;
  std::vector<TableRow> rows;

  const TableRow& row(const std::string& label) const;
  std::string to_tsv() const;
  std::string to_markdown() const;
};

/// System keys expected by comparison_report.
inline constexpr const char* kVanilla = "vanilla";
inline constexpr const char* kMetaMt = "meta-mt";
inline constexpr const char* kMetaCurriculum = "meta-curriculum";

/// Rows Vanilla, Traditional FT, Meta-MT w/o FT, Meta-MT, Meta-Curriculum w/o
/// FT, Meta-Curriculum and a delta row per adapted system; unseen columns
/// first. All runs must share domain roles and query manifests.
ComparisonTable comparison_report(const std::map<std::string, EvalReport>& runs);

/// Difficulty and length tables per domain, with a footer on the per-sentence proxy.
std::string bucket_tables_markdown(const EvalReport& report);

}  // namespace mcl::eval
