#include "mcl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "mcl/rng.hpp"
#include "mcl/scoring.hpp"

namespace mcl::eval {

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(std::span<const std::string> tokens, std::size_t n) {
  NgramCounts counts;
  if (tokens.size() < n) return counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
    ++counts[std::vector<std::string>(tokens.begin() + static_cast<std::ptrdiff_t>(i),
                                      tokens.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

double brevity_penalty(std::size_t hyp_len, std::size_t ref_len) {
  if (hyp_len == 0) return 0.0;
  if (hyp_len >= ref_len) return 1.0;
  return std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
}

std::string fixed2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

Bucket make_bucket(std::string label, std::vector<std::size_t> members,
                   std::span<const Tokens> hyps, std::span<const Tokens> refs) {
  Bucket b;
  b.label = std::move(label);
  b.members = std::move(members);
  if (b.members.empty()) return b;
  std::vector<Tokens> h, r;
  double proxy = 0.0;
  for (auto i : b.members) {
    h.push_back(hyps[i]);
    r.push_back(refs[i]);
    proxy += sentence_bleu_proxy(hyps[i], refs[i]);
  }
  b.bleu = corpus_bleu(h, r).score;
  b.mean_proxy = proxy / static_cast<double>(b.members.size());
  return b;
}

}  // namespace

BleuStats& BleuStats::operator+=(const BleuStats& o) {
  for (int n = 0; n < kMaxOrder; ++n) {
    matches[static_cast<std::size_t>(n)] += o.matches[static_cast<std::size_t>(n)];
    totals[static_cast<std::size_t>(n)] += o.totals[static_cast<std::size_t>(n)];
  }
  hyp_len += o.hyp_len;
  ref_len += o.ref_len;
  return *this;
}

BleuStats sentence_stats(std::span<const std::string> hyp, std::span<const std::string> ref) {
  BleuStats s;
  s.hyp_len = hyp.size();
  s.ref_len = ref.size();
  for (std::size_t n = 1; n <= kMaxOrder; ++n) {
    const auto h = ngrams(hyp, n);
    const auto r = ngrams(ref, n);
    std::size_t match = 0, total = 0;
    for (const auto& [gram, count] : h) {
      total += count;
      const auto it = r.find(gram);
      if (it != r.end()) match += std::min(count, it->second);
    }
    s.matches[n - 1] = match;
    s.totals[n - 1] = total;
  }
  return s;
}

Bleu bleu_from_stats(const BleuStats& stats) {
  Bleu b;
  b.hyp_len = stats.hyp_len;
  b.ref_len = stats.ref_len;
  b.brevity_penalty = brevity_penalty(stats.hyp_len, stats.ref_len);
  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 0; n < kMaxOrder; ++n) {
    if (stats.totals[n] == 0 || stats.matches[n] == 0) {
      zero = true;
      continue;
    }
    b.precisions[n] = static_cast<double>(stats.matches[n]) / static_cast<double>(stats.totals[n]);
    log_sum += std::log(b.precisions[n]);
  }
  b.score = zero ? 0.0 : 100.0 * b.brevity_penalty * std::exp(log_sum / kMaxOrder);
  return b;
}

Bleu corpus_bleu(std::span<const Tokens> hypotheses, std::span<const Tokens> references) {
  if (hypotheses.size() != references.size()) {
    throw EvalError("BLEU: " + std::to_string(hypotheses.size()) + " hypotheses but " +
                    std::to_string(references.size()) + " references");
  }
  if (hypotheses.empty()) throw EvalError("BLEU needs at least one sentence pair");
  BleuStats total;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    total += sentence_stats(hypotheses[i], references[i]);
  }
  return bleu_from_stats(total);
}

double sentence_bleu_proxy(std::span<const std::string> hyp, std::span<const std::string> ref) {
  const BleuStats s = sentence_stats(hyp, ref);
  if (s.totals[0] == 0 || s.matches[0] == 0) return 0.0;
  double log_sum = std::log(static_cast<double>(s.matches[0]) / static_cast<double>(s.totals[0]));
  for (std::size_t n = 1; n < kMaxOrder; ++n) {
    log_sum += std::log(static_cast<double>(s.matches[n] + 1) / static_cast<double>(s.totals[n] + 1));
  }
  return 100.0 * brevity_penalty(s.hyp_len, s.ref_len) * std::exp(log_sum / kMaxOrder);
}

nlohmann::json Bucket::to_json() const {
  nlohmann::json j = {{"label", label}, {"members", members}, {"mean_proxy", mean_proxy}};
  j["bleu"] = bleu ? nlohmann::json(*bleu) : nlohmann::json(nullptr);
  return j;
}

Bucket Bucket::from_json(const nlohmann::json& j) {
  Bucket b;
  b.label = j.at("label").get<std::string>();
  b.members = j.at("members").get<std::vector<std::size_t>>();
  b.mean_proxy = j.at("mean_proxy").get<double>();
  if (!j.at("bleu").is_null()) b.bleu = j.at("bleu").get<double>();
  return b;
}

nlohmann::json DifficultyBuckets::to_json() const {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& b : buckets) list.push_back(b.to_json());
  return {{"buckets", list}, {"q33", q33}, {"q67", q67}, {"degenerate", degenerate}};
}

DifficultyBuckets DifficultyBuckets::from_json(const nlohmann::json& j) {
  DifficultyBuckets d;
  for (const auto& b : j.at("buckets")) d.buckets.push_back(Bucket::from_json(b));
  d.q33 = j.at("q33").get<double>();
  d.q67 = j.at("q67").get<double>();
  d.degenerate = j.at("degenerate").get<bool>();
  return d;
}

DifficultyBuckets difficulty_buckets(std::span<const double> divergence,
                                     std::span<const Tokens> hypotheses,
                                     std::span<const Tokens> references) {
  if (divergence.size() != hypotheses.size() || hypotheses.size() != references.size()) {
    throw EvalError("difficulty buckets: scores, hypotheses and references differ in size");
  }
  if (divergence.size() < 3) throw EvalError("difficulty buckets need at least 3 sentences");
  DifficultyBuckets out;
  const std::vector<double> values(divergence.begin(), divergence.end());
  out.q33 = scoring::quantile(values, 1.0 / 3.0);
  out.q67 = scoring::quantile(values, 2.0 / 3.0);
  std::vector<std::size_t> easy, medium, hard;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] <= out.q33) {
      easy.push_back(i);
    } else if (values[i] <= out.q67) {
      medium.push_back(i);
    } else {
      hard.push_back(i);
    }
  }
  out.degenerate = easy.empty() || medium.empty() || hard.empty();
  out.buckets.push_back(make_bucket("easy", std::move(easy), hypotheses, references));
  out.buckets.push_back(make_bucket("medium", std::move(medium), hypotheses, references));
  out.buckets.push_back(make_bucket("hard", std::move(hard), hypotheses, references));
  return out;
}

int length_bin(std::size_t length) {
  return static_cast<int>(std::min<std::size_t>(length / 10, 5));
}

std::string length_label(int bin) {
  if (bin >= 5) return "[50,inf)";
  return "[" + std::to_string(std::max(1, bin * 10)) + "," + std::to_string(bin * 10 + 10) + ")";
}

std::vector<Bucket> length_buckets(std::span<const SentencePair> pairs,
                                   std::span<const Tokens> hypotheses) {
  if (pairs.size() != hypotheses.size()) {
    throw EvalError("length buckets: pairs and hypotheses differ in size");
  }
  std::vector<Tokens> refs;
  std::array<std::vector<std::size_t>, 6> bins;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    refs.push_back(pairs[i].target);
    bins[static_cast<std::size_t>(length_bin(pairs[i].source.size()))].push_back(i);
  }
  std::vector<Bucket> out;
  for (int b = 0; b < 6; ++b) {
    auto& members = bins[static_cast<std::size_t>(b)];
    if (!members.empty()) out.push_back(make_bucket(length_label(b), std::move(members), hypotheses, refs));
  }
  return out;
}

DomainEval evaluate_domain(const nn::ParamVector& params, const nn::ModelConfig& model,
                           const Vocabulary& vocab, std::span<const SentencePair> query,
                           int beam) {
  if (query.empty()) throw EvalError("evaluation needs a non-empty query set");
  DomainEval out;
  std::vector<Tokens> refs;
  for (const auto& p : query) {
    const TokenIds src = vocab.encode(p.source);
    const int max_out = std::min(2 * static_cast<int>(src.size()) + 10, model.max_len + 1);
    out.hypotheses.push_back(vocab.decode(nn::beam_decode(params, model, src, beam, max_out)));
    refs.push_back(p.target);
  }
  out.bleu = corpus_bleu(out.hypotheses, refs);
  return out;
}

std::uint64_t query_manifest_hash(std::span<const SentencePair> query) {
  std::uint64_t h = mix64(query.size());
  for (const auto& p : query) h = mix64(h ^ static_cast<std::uint64_t>(p.id));
  return h;
}

std::string to_string(Exposure role) { return role == Exposure::Seen ? "seen" : "unseen"; }

Exposure exposure_from_string(const std::string& s) {
  if (s == "seen") return Exposure::Seen;
  if (s == "unseen") return Exposure::Unseen;
  throw EvalError("unknown domain role '" + s + "'");
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json doms = nlohmann::json::object();
  for (const auto& [name, r] : domains) {
    nlohmann::json lengths = nlohmann::json::array();
    for (const auto& b : r.lengths) lengths.push_back(b.to_json());
    doms[name] = {{"role", to_string(r.role)},
                  {"bleu_before", r.bleu_before},
                  {"bleu_after", r.bleu_after},
                  {"delta", r.delta()},
                  {"manifest", r.manifest},
                  {"difficulty", r.difficulty ? r.difficulty->to_json() : nlohmann::json(nullptr)},
                  {"lengths", lengths}};
  }
  return {{"system", system}, {"domains", doms}};
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport rep;
  rep.system = j.at("system").get<std::string>();
  for (const auto& [name, d] : j.at("domains").items()) {
    DomainResult r;
    r.role = exposure_from_string(d.at("role").get<std::string>());
    r.bleu_before = d.at("bleu_before").get<double>();
    r.bleu_after = d.at("bleu_after").get<double>();
    r.manifest = d.at("manifest").get<std::uint64_t>();
    if (!d.at("difficulty").is_null()) r.difficulty = DifficultyBuckets::from_json(d.at("difficulty"));
    for (const auto& b : d.at("lengths")) r.lengths.push_back(Bucket::from_json(b));
    rep.domains[name] = std::move(r);
  }
  return rep;
}

EvalReport average_reports(std::span<const EvalReport> runs) {
  if (runs.empty()) throw EvalError("nothing to average");
  EvalReport out;
  out.system = runs.front().system;
  for (const auto& [name, first] : runs.front().domains) {
    DomainResult avg;
    avg.role = first.role;
    for (const auto& run : runs) {
      const auto it = run.domains.find(name);
      if (it == run.domains.end()) throw EvalError("run is missing domain '" + name + "'");
      avg.bleu_before += it->second.bleu_before;
      avg.bleu_after += it->second.bleu_after;
    }
    avg.bleu_before /= static_cast<double>(runs.size());
    avg.bleu_after /= static_cast<double>(runs.size());
    out.domains[name] = avg;
  }
  return out;
}

const TableRow& ComparisonTable::row(const std::string& label) const {
  for (const auto& r : rows) {
    if (r.label == label) return r;
  }
  throw EvalError("no row '" + label + "'");
}

std::string ComparisonTable::to_tsv() const {
  std::ostringstream out;
  out << "system";
  for (const auto& d : unseen) out << '\t' << d;
  for (const auto& d : seen) out << '\t' << d;
  out << "\tunseen_avg\tseen_avg\n";
  for (const auto& r : rows) {
    out << r.label;
    for (double v : r.values) out << '\t' << fixed2(v);
    out << '\t' << fixed2(r.unseen_avg) << '\t' << fixed2(r.seen_avg) << '\n';
  }
  return out.str();
}

std::string ComparisonTable::to_markdown() const {
  std::ostringstream out;
  out << "| System |";
  for (const auto& d : unseen) out << ' ' << d << " (unseen) |";
  for (const auto& d : seen) out << ' ' << d << " (seen) |";
  out << " Unseen avg | Seen avg |\n|---|";
  for (std::size_t i = 0; i < unseen.size() + seen.size() + 2; ++i) out << "---:|";
  out << '\n';
  for (const auto& r : rows) {
    out << "| " << r.label << " |";
    for (double v : r.values) out << ' ' << (r.is_delta && v >= 0 ? "+" : "") << fixed2(v) << " |";
    out << ' ' << fixed2(r.unseen_avg) << " | " << fixed2(r.seen_avg) << " |\n";
  }
  return out.str();
}

ComparisonTable comparison_report(const std::map<std::string, EvalReport>& runs) {
  for (const char* key : {kVanilla, kMetaMt, kMetaCurriculum}) {
    if (!runs.contains(key)) throw EvalError(std::string("comparison needs a '") + key + "' run");
  }
  const EvalReport& reference = runs.at(kVanilla);
  ComparisonTable table;
  for (const auto& [name, r] : reference.domains) {
    (r.role == Exposure::Unseen ? table.unseen : table.seen).push_back(name);
  }
  for (const auto& [system, rep] : runs) {
    if (rep.domains.size() != reference.domains.size()) {
      throw EvalError("system '" + system + "' covers a different domain set");
    }
    for (const auto& [name, r] : reference.domains) {
      const auto it = rep.domains.find(name);
      if (it == rep.domains.end()) {
        throw EvalError("system '" + system + "' has no results for domain '" + name + "'");
      }
      if (it->second.manifest != r.manifest || it->second.role != r.role) {
        throw EvalError("query manifest mismatch for domain '" + name + "' in system '" +
                        system + "'");
      }
    }
  }

  std::vector<std::string> columns = table.unseen;
  columns.insert(columns.end(), table.seen.begin(), table.seen.end());
  const auto make_row = [&](std::string label, const EvalReport& rep, auto value, bool delta) {
    TableRow row;
    row.label = std::move(label);
    row.is_delta = delta;
    for (const auto& d : columns) row.values.push_back(value(rep.domains.at(d)));
    const auto mean = [&](std::size_t begin, std::size_t end) {
      if (begin == end) return 0.0;
      double s = 0.0;
      for (std::size_t i = begin; i < end; ++i) s += row.values[i];
      return s / static_cast<double>(end - begin);
    };
    row.unseen_avg = mean(0, table.unseen.size());
    row.seen_avg = mean(table.unseen.size(), columns.size());
    table.rows.push_back(std::move(row));
  };
  const auto before = [](const DomainResult& r) { return r.bleu_before; };
  const auto after = [](const DomainResult& r) { return r.bleu_after; };
  const auto delta = [](const DomainResult& r) { return r.delta(); };
  make_row("Vanilla", runs.at(kVanilla), before, false);
  make_row("Traditional FT", runs.at(kVanilla), after, false);
  make_row("Meta-MT w/o FT", runs.at(kMetaMt), before, false);
  make_row("Meta-MT", runs.at(kMetaMt), after, false);
  make_row("Meta-Curriculum w/o FT", runs.at(kMetaCurriculum), before, false);
  make_row("Meta-Curriculum", runs.at(kMetaCurriculum), after, false);
  make_row("Δ Traditional FT", runs.at(kVanilla), delta, true);
  make_row("Δ Meta-MT", runs.at(kMetaMt), delta, true);
  make_row("Δ Meta-Curriculum", runs.at(kMetaCurriculum), delta, true);
  return table;
}

std::string bucket_tables_markdown(const EvalReport& report) {
  std::ostringstream out;
  const auto bleu_cell = [](const Bucket& b) { return b.bleu ? fixed2(*b.bleu) : std::string("-"); };
  for (const auto& [name, r] : report.domains) {
    out << "### " << name << " (" << to_string(r.role) << ")\n\n";
    if (r.difficulty) {
      out << "| Difficulty | Sentences | BLEU | Mean sentence proxy |\n|---|---:|---:|---:|\n";
      for (const auto& b : r.difficulty->buckets) {
        out << "| " << b.label << " | " << b.members.size() << " | " << bleu_cell(b) << " | "
            << fixed2(b.mean_proxy) << " |\n";
      }
      if (r.difficulty->degenerate) out << "\nDegenerate split: at least one bucket is empty.\n";
      out << '\n';
    }
    if (!r.lengths.empty()) {
      out << "| Source length | Sentences | BLEU | Mean sentence proxy |\n|---|---:|---:|---:|\n";
      for (const auto& b : r.lengths) {
        out << "| " << b.label << " | " << b.members.size() << " | " << bleu_cell(b) << " | "
            << fixed2(b.mean_proxy) << " |\n";
      }
      out << '\n';
    }
  }
  out << "Bucket BLEU is unsmoothed corpus BLEU over the bucket members. The sentence proxy is "
         "sentence-level BLEU with add-one smoothing on 2- to 4-grams, used only in these "
         "tables.\n";
  return out.str();
}

}  // namespace mcl::eval
