#pragma once

// Single-file checkpoints: "DMCK" | u64 header length | JSON header | f64
// payload. The header indexes every tensor by name with its shape and byte
// offset into the payload, and carries the experiment config and step.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualmode/layers.hpp"

namespace dualmode {

inline constexpr int kCheckpointFormatVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'D', 'M', 'C', 'K'};

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(const std::string& what, const std::filesystem::path& path)
      : std::runtime_error(what + " [" + path.string() + "]") {}
};

struct StoredTensor {
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  nlohmann::json config;
  std::size_t step = 0;
  std::map<std::string, StoredTensor> tensors;
};

inline void save_checkpoint(const std::filesystem::path& path, const ParameterList& params,
                            const ParameterList& buffers, const nlohmann::json& config, std::size_t step) {
  nlohmann::json index = nlohmann::json::object();
  std::vector<const NamedTensor*> order;
  std::size_t offset = 0;
  for (const auto* list : {&params, &buffers})
    for (const auto& nt : *list) {
      if (index.contains(nt.name)) throw CheckpointError("duplicate tensor name " + nt.name, path);
      index[nt.name] = {{"shape", nt.tensor.shape()}, {"offset", offset}};
      offset += nt.tensor.size() * sizeof(double);
      order.push_back(&nt);
    }
  const nlohmann::json header = {{"format_version", kCheckpointFormatVersion},
                                 {"dtype", "f64"},
                                 {"step", step},
                                 {"config", config},
                                 {"tensors", index},
                                 {"payload_bytes", offset}};
  const std::string text = header.dump();
  const std::uint64_t len = text.size();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot open checkpoint for writing", tmp);
    os.write(kCheckpointMagic, 4);
    os.write(reinterpret_cast<const char*>(&len), sizeof(len));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto* nt : order)
      os.write(reinterpret_cast<const char*>(nt->tensor.data().data()),
               static_cast<std::streamsize>(nt->tensor.size() * sizeof(double)));
    if (!os) throw CheckpointError("failed writing checkpoint", tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError("cannot move checkpoint into place: " + ec.message(), path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("missing checkpoint", path);
  char magic[4];
  std::uint64_t len = 0;
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw CheckpointError("bad checkpoint magic", path);
  if (!is.read(reinterpret_cast<char*>(&len), sizeof(len)) || len > (1u << 30))
    throw CheckpointError("bad checkpoint header length", path);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len)))
    throw CheckpointError("truncated checkpoint header", path);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is not JSON: ") + e.what(), path);
  }
  if (header.value("format_version", 0) != kCheckpointFormatVersion)
    throw CheckpointError("unsupported checkpoint format_version", path);
  const auto payload_bytes = header.at("payload_bytes").get<std::size_t>();
  std::vector<char> payload(payload_bytes);
  if (!is.read(payload.data(), static_cast<std::streamsize>(payload_bytes)))
    throw CheckpointError("truncated checkpoint payload", path);
  if (is.peek() != std::ifstream::traits_type::eof())
    throw CheckpointError("trailing bytes after checkpoint payload", path);

  Checkpoint ck;
  ck.config = header.at("config");
  ck.step = header.at("step").get<std::size_t>();
  for (const auto& [name, entry] : header.at("tensors").items()) {
    StoredTensor st;
    st.shape = entry.at("shape").get<Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    st.values.resize(numel(st.shape));
    const std::size_t bytes = st.values.size() * sizeof(double);
    if (offset + bytes > payload_bytes) throw CheckpointError("tensor " + name + " exceeds payload", path);
    std::memcpy(st.values.data(), payload.data() + offset, bytes);
    ck.tensors.emplace(name, std::move(st));
  }
  return ck;
}

// Copies stored values into the given tensors; names and shapes must match
// exactly in both directions.
inline void restore_checkpoint(const Checkpoint& ck, const ParameterList& params, const ParameterList& buffers,
                               const std::filesystem::path& path = {}) {
  std::size_t matched = 0;
  for (const auto* list : {&params, &buffers})
    for (const auto& nt : *list) {
      auto it = ck.tensors.find(nt.name);
      if (it == ck.tensors.end()) throw CheckpointError("checkpoint lacks tensor " + nt.name, path);
      if (it->second.shape != nt.tensor.shape())
        throw CheckpointError("tensor " + nt.name + " has shape " + to_string(it->second.shape) +
                                  " but the model expects " + to_string(nt.tensor.shape()),
                              path);
      Tensor t = nt.tensor;
      auto dst = t.mutable_data();
      std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
      ++matched;
    }
  if (matched != ck.tensors.size())
    throw CheckpointError("checkpoint holds " + std::to_string(ck.tensors.size() - matched) +
                              " tensors the model does not have",
                          path);
}

}  // namespace dualmode
