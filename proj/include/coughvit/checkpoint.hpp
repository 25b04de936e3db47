#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <zlib.h>

#include <nlohmann/json.hpp>

#include "coughvit/config.hpp"
#include "coughvit/dataset.hpp"
#include "coughvit/error.hpp"
#include "coughvit/tensor.hpp"
#include "coughvit/vit.hpp"

namespace coughvit {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in native little-endian order");

// Layout:
//   8 bytes   magic "CVITCKPT"
//   u32       format version
//   u64       header length H
//   H bytes   JSON header (kind, model config, mel config, stats, epoch, manifest)
//   u32       CRC-32 over header and payload
//   payload   parameters as little-endian doubles in manifest order
inline constexpr char kCheckpointMagic[8] = {'C', 'V', 'I', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string kind;  // "mae" or "classifier"
  ModelConfig model;
  MelConfig mel;
  std::optional<DatasetStats> stats;
  std::size_t epoch = 0;
  std::string pooling;  // classifier checkpoints only
  std::vector<std::string> names;
  std::map<std::string, Tensor> tensors;
};

namespace detail {

inline nlohmann::json stats_json(const std::optional<DatasetStats>& s) {
  if (!s) return nullptr;
  return {{"mean", s->mean}, {"std", s->std}, {"degenerate", s->degenerate}};
}

template <class T>
void put_raw(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T get_raw(const std::string& in, std::size_t& pos, const std::string& what) {
  if (pos + sizeof(T) > in.size()) throw InputError("checkpoint " + what + ": file truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

inline std::uint32_t crc_of(const char* data, std::size_t n, std::uint32_t crc = 0) {
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = static_cast<std::uint32_t>(::crc32(crc, reinterpret_cast<const Bytef*>(data), chunk));
    data += chunk;
    n -= chunk;
  }
  return crc;
}

}  // namespace detail

/// Serializes named parameters; bytes depend only on their values and the metadata.
template <class Model>
std::string encode_checkpoint(Model& model, const std::string& kind, const ModelConfig& mcfg, const MelConfig& mel,
                              const std::optional<DatasetStats>& stats, std::size_t epoch,
                              const std::string& pooling = "") {
  nlohmann::json manifest = nlohmann::json::array();
  std::string payload;
  std::uint64_t offset = 0;
  model.for_each([&](Parameter& p) {
    manifest.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}});
    const auto& d = p.value.storage();
    payload.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
    offset += d.size();
  });
  nlohmann::json header = {{"kind", kind},   {"model", to_json(mcfg)}, {"mel", to_json(mel)},
                           {"stats", detail::stats_json(stats)}, {"epoch", epoch},
                           {"pooling", pooling}, {"parameters", manifest}};
  const std::string text = header.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_raw<std::uint32_t>(out, kCheckpointVersion);
  detail::put_raw<std::uint64_t>(out, text.size());
  out += text;
  std::uint32_t crc = detail::crc_of(text.data(), text.size());
  crc = detail::crc_of(payload.data(), payload.size(), crc);
  detail::put_raw<std::uint32_t>(out, crc);
  out += payload;
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& what = "<memory>") {
  if (bytes.size() < sizeof kCheckpointMagic || std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0)
    throw InputError("checkpoint " + what + ": not a checkpoint file (bad magic)");
  std::size_t pos = sizeof kCheckpointMagic;
  const auto version = detail::get_raw<std::uint32_t>(bytes, pos, what);
  if (version != kCheckpointVersion)
    throw InputError("checkpoint " + what + ": format version " + std::to_string(version) + ", expected " +
                     std::to_string(kCheckpointVersion));
  const auto hlen = detail::get_raw<std::uint64_t>(bytes, pos, what);
  if (hlen > bytes.size() - pos) throw InputError("checkpoint " + what + ": file truncated (checksum mismatch)");
  const std::string text = bytes.substr(pos, hlen);
  pos += hlen;
  const auto stored_crc = detail::get_raw<std::uint32_t>(bytes, pos, what);
  std::uint32_t crc = detail::crc_of(text.data(), text.size());
  crc = detail::crc_of(bytes.data() + pos, bytes.size() - pos, crc);
  if (crc != stored_crc) throw InputError("checkpoint " + what + ": checksum mismatch (file corrupt or truncated)");

  Checkpoint ck;
  std::size_t total = 0;
  try {
    const auto h = nlohmann::json::parse(text);
    ck.kind = h.at("kind").get<std::string>();
    ck.model = model_config_from(h.at("model"));
    ck.mel = mel_config_from(h.at("mel"));
    if (!h.at("stats").is_null())
      ck.stats = DatasetStats{h["stats"].at("mean").get<double>(), h["stats"].at("std").get<double>(),
                              h["stats"].at("degenerate").get<bool>()};
    ck.epoch = h.at("epoch").get<std::size_t>();
    ck.pooling = h.at("pooling").get<std::string>();
    for (const auto& e : h.at("parameters")) {
      const auto name = e.at("name").get<std::string>();
      const auto shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<std::size_t>();
      const std::size_t n = shape_size(shape);
      if (offset != total) throw InputError("checkpoint " + what + ": parameter offsets out of order at " + name);
      if ((pos + (offset + n) * sizeof(double)) > bytes.size())
        throw InputError("checkpoint " + what + ": payload shorter than manifest");
      Tensor t(shape);
      std::memcpy(t.storage().data(), bytes.data() + pos + offset * sizeof(double), n * sizeof(double));
      if (!ck.tensors.emplace(name, std::move(t)).second)
        throw InputError("checkpoint " + what + ": duplicate parameter " + name);
      ck.names.push_back(name);
      total += n;
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError("checkpoint " + what + ": malformed header: " + e.what());
  }
  if (pos + total * sizeof(double) != bytes.size())
    throw InputError("checkpoint " + what + ": payload length does not match manifest");
  return ck;
}

template <class Model>
void save_checkpoint(const std::filesystem::path& path, Model& model, const std::string& kind, const ModelConfig& mcfg,
                     const MelConfig& mel, const std::optional<DatasetStats>& stats, std::size_t epoch,
                     const std::string& pooling = "") {
  const std::string bytes = encode_checkpoint(model, kind, mcfg, mel, stats, epoch, pooling);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("failed writing checkpoint " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path.string());
}

/// Copies stored tensors into every parameter whose name starts with `prefix`.
/// Missing names and shape disagreements are errors.
template <class Model>
void assign_parameters(Model& model, const Checkpoint& ck, const std::string& prefix = "") {
  model.for_each([&](Parameter& p) {
    if (p.name.rfind(prefix, 0) != 0) return;
    const auto it = ck.tensors.find(p.name);
    if (it == ck.tensors.end()) throw InputError("checkpoint lacks parameter " + p.name);
    if (it->second.shape() != p.value.shape())
      throw InputError("checkpoint shape mismatch for " + p.name + ": stored " + shape_str(it->second.shape()) +
                       ", model expects " + shape_str(p.value.shape()));
    p.value = it->second;
  });
}

/// Encoder weights of a checkpoint, checked against the requested model config.
inline EncoderParams encoder_from_checkpoint(const Checkpoint& ck, const ModelConfig& requested) {
  if (ck.model.d_model != requested.d_model)
    throw InputError("checkpoint has d_model=" + std::to_string(ck.model.d_model) + " but the config requests d_model=" +
                     std::to_string(requested.d_model) + " (shape mismatch)");
  EncoderParams enc = EncoderParams::init(requested, seeded_rng(0, "checkpoint-shell"));
  assign_parameters(enc, ck, "encoder.");
  return enc;
}

}  // namespace coughvit
