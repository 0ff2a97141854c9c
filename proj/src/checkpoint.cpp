#include "pdse/checkpoint.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pdse/config.hpp"
#include "pdse/rng.hpp"

namespace pdse {

namespace {

constexpr char kMagic[8] = {'P', 'D', 'S', 'E', 'C', 'K', 'P', 'T'};

template <typename U>
void put(std::ostream& out, U v) {
  unsigned char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), sizeof(U));
}

template <typename U>
U get(std::istream& in, const std::string& what) {
  unsigned char b[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(U))) throw CheckpointError("checkpoint truncated in " + what);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return v;
}

nlohmann::ordered_json tensor_entry(const std::string& name, const char* kind, const Shape& shape) {
  return {{"name", name}, {"kind", kind}, {"shape", shape}};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelConfig& config, const ParameterStore<float>& store,
                     const nlohmann::ordered_json& metadata) {
  nlohmann::ordered_json header;
  header["format_version"] = kCheckpointVersion;
  header["model"] = model_config_to_json(config);
  header["metadata"] = metadata;
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  for (const auto& p : store.parameters()) table.push_back(tensor_entry(p.name, "parameter", p.tensor.shape()));
  for (const auto& b : store.buffers()) table.push_back(tensor_entry(b.name, "buffer", b.tensor.shape()));
  header["tensors"] = std::move(table);
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Written to a sibling file first so a crash never leaves a torn checkpoint.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : store.parameters()) write_tensor(out, p.tensor);
    for (const auto& b : store.buffers()) write_tensor(out, b.tensor);
    if (!out.flush()) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void save_checkpoint(const std::filesystem::path& path, const LoadedModel& model) {
  save_checkpoint(path, model.config, model.store, model.metadata);
}

LoadedModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw CheckpointError(path.string() + ": not a checkpoint file");
  }
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": checkpoint format version " + std::to_string(version) +
                          " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto length = get<std::uint64_t>(in, "header length");
  if (length > (1ull << 30)) throw CheckpointError(path.string() + ": implausible header length");
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) throw CheckpointError("checkpoint truncated in header");

  LoadedModel model;
  nlohmann::ordered_json header;
  try {
    header = nlohmann::ordered_json::parse(text);
    model.config = model_config_from_json(nlohmann::json::parse(header.at("model").dump()));
    model.metadata = header.at("metadata");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": bad header: " + e.what());
  }
  model.store = ParameterStore<float>(0);
  model.params = build_model(model.config, model.store);

  std::vector<BasicTensor<float>> targets;
  std::vector<std::string> names;
  for (const auto& p : model.store.parameters()) {
    targets.push_back(p.tensor);
    names.push_back(p.name);
  }
  for (const auto& b : model.store.buffers()) {
    targets.push_back(b.tensor);
    names.push_back(b.name);
  }
  const auto& table = header.at("tensors");
  if (table.size() != targets.size()) {
    throw CheckpointError(path.string() + ": checkpoint holds " + std::to_string(table.size()) +
                          " tensors, configuration needs " + std::to_string(targets.size()));
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (table[i].at("name").get<std::string>() != names[i]) {
      throw CheckpointError(path.string() + ": tensor " + std::to_string(i) + " is '" +
                            table[i].at("name").get<std::string>() + "', expected '" + names[i] + "'");
    }
    BasicTensor<float> stored;
    try {
      stored = read_tensor<float>(in);
    } catch (const std::runtime_error& e) {
      throw CheckpointError(path.string() + ": " + names[i] + ": " + e.what());
    }
    if (stored.shape() != targets[i].shape()) {
      throw CheckpointError(path.string() + ": " + names[i] + " has shape " + shape_str(stored.shape()) +
                            ", expected " + shape_str(targets[i].shape()));
    }
    std::copy(stored.data().begin(), stored.data().end(), targets[i].mutable_data().begin());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError(path.string() + ": trailing bytes");
  return model;
}

std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a64(ss.str())));
  return hex;
}

}  // namespace pdse
