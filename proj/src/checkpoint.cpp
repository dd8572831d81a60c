#include "mcl/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>

namespace mcl::nn {

namespace {

constexpr std::array<char, 8> kMagic{'M', 'C', 'L', 'C', 'K', 'P', 'T', '\0'};

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw CheckpointError("truncated checkpoint " + path.string());
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, ModelKind kind, const ModelConfig& config,
                     const ParamVector& params) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp);
    out.write(kMagic.data(), kMagic.size());
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint32_t>(out, kind == ModelKind::LanguageModel ? 0U : 1U);
    for (int v : {config.n_layers, config.d_model, config.n_heads, config.d_hidden,
                  config.max_len, config.vocab_size}) {
      put<std::int32_t>(out, v);
    }
    put<double>(out, config.dropout);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(params.layout().size()));
    for (const auto& s : params.layout()) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(s.name.size()));
      out.write(s.name.data(), static_cast<std::streamsize>(s.name.size()));
      put<std::uint64_t>(out, s.rows);
      put<std::uint64_t>(out, s.cols);
      put<std::uint64_t>(out, s.offset);
    }
    put<std::uint64_t>(out, params.size());
    for (double v : params.values()) put<double>(out, v);
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw CheckpointError(path.string() + " is not a checkpoint");
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  const auto kind = get<std::uint32_t>(in, path);
  if (kind > 1) throw CheckpointError(path.string() + ": bad model kind");
  ck.kind = kind == 0 ? ModelKind::LanguageModel : ModelKind::Translator;
  ck.config.n_layers = get<std::int32_t>(in, path);
  ck.config.d_model = get<std::int32_t>(in, path);
  ck.config.n_heads = get<std::int32_t>(in, path);
  ck.config.d_hidden = get<std::int32_t>(in, path);
  ck.config.max_len = get<std::int32_t>(in, path);
  ck.config.vocab_size = get<std::int32_t>(in, path);
  ck.config.dropout = get<double>(in, path);
  ck.config.validate();

  const auto slots = get<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < slots; ++i) {
    const auto len = get<std::uint32_t>(in, path);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw CheckpointError("truncated checkpoint " + path.string());
    const auto rows = get<std::uint64_t>(in, path);
    const auto cols = get<std::uint64_t>(in, path);
    const auto offset = get<std::uint64_t>(in, path);
    ck.params.add(name, rows, cols);
    if (ck.params.layout().back().offset != offset) {
      throw CheckpointError(path.string() + ": non-contiguous layout at '" + name + "'");
    }
  }
  const auto count = get<std::uint64_t>(in, path);
  if (count != ck.params.size()) throw CheckpointError(path.string() + ": parameter count mismatch");
  std::vector<double> values(count);
  for (auto& v : values) v = get<double>(in, path);
  ck.params.assign_values(values);

  // The layout must be exactly what the config produces.
  const ParamVector expected = init_params(ck.config, ck.kind, 0);
  if (!expected.same_layout(ck.params)) {
    throw CheckpointError(path.string() + ": layout does not match its model config");
  }
  return ck;
}

void save_sidecar(const std::filesystem::path& checkpoint_path, const nlohmann::json& metadata) {
  std::ofstream out(checkpoint_path.string() + ".json", std::ios::trunc);
  if (!out) throw CheckpointError("cannot write sidecar for " + checkpoint_path.string());
  out << metadata.dump(2) << '\n';
}

nlohmann::json load_sidecar(const std::filesystem::path& checkpoint_path) {
  std::ifstream in(checkpoint_path.string() + ".json");
  if (!in) throw CheckpointError("missing sidecar for " + checkpoint_path.string());
  return nlohmann::json::parse(in);
}

}  // namespace mcl::nn
