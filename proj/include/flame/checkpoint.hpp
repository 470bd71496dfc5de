#pragma once

// Checkpoint file layout:
//
//   [0, 8)        magic "FLAMECKP"
//   [8, 16)       manifest length L, u64 little-endian
//   [16, 16 + L)  JSON manifest: format_version, dtype, tensor table
//                 (name, shape, byte offset into the blob), blob size and
//                 FNV-1a 64 checksum
//   [16 + L, ..)  blob of little-endian IEEE-754 doubles, row-major
//
// Every floating-point value (adapter matrices, LoRA alphas, client
// rescalers) lives in the blob so a load/save cycle is bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "flame/errors.hpp"
#include "flame/federation_types.hpp"

namespace flame {

inline constexpr std::uint64_t kCheckpointVersion = 1;

struct Checkpoint {
  GlobalState state;
  std::map<std::size_t, double> rescalers;  // client id -> last local rescaler
  std::string config_hash;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

namespace detail {

inline constexpr char kMagic[8] = {'F', 'L', 'A', 'M', 'E', 'C', 'K', 'P'};

inline std::uint64_t fnv1a64(const std::string& bytes, std::size_t begin, std::size_t end) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (std::size_t i = begin; i < end; ++i) {
    h ^= static_cast<unsigned char>(bytes[i]);
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return v;
}

inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

struct TensorEntry {
  std::string name;
  std::size_t rows, cols, offset;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  using nlohmann::json;
  std::string blob;
  json tensors = json::array();
  auto add_tensor = [&](const std::string& name, std::size_t rows, std::size_t cols, std::span<const double> values) {
    tensors.push_back({{"name", name}, {"shape", {rows, cols}}, {"offset", blob.size()}});
    for (double v : values) detail::put_f64(blob, v);
  };

  std::vector<double> alphas;
  for (std::size_t j = 0; j < ck.state.loras.size(); ++j) {
    const LoraPair& p = ck.state.loras[j];
    add_tensor("expert_" + std::to_string(j) + ".lora_a", p.a.rows(), p.a.cols(), p.a.data());
    add_tensor("expert_" + std::to_string(j) + ".lora_b", p.b.rows(), p.b.cols(), p.b.data());
    alphas.push_back(p.alpha);
  }
  add_tensor("lora_alpha", alphas.size(), 1, alphas);
  std::vector<double> rescaler_values;
  json rescaler_ids = json::array();
  for (const auto& [id, s] : ck.rescalers) {
    rescaler_ids.push_back(id);
    rescaler_values.push_back(s);
  }
  add_tensor("client_rescalers", rescaler_values.size(), 1, rescaler_values);

  const json manifest = {
      {"format_version", kCheckpointVersion},
      {"dtype", "f64le"},
      {"experts", ck.state.loras.size()},
      {"round_index", ck.state.round_index},
      {"config_hash", ck.config_hash},
      {"rescaler_client_ids", rescaler_ids},
      {"tensors", tensors},
      {"blob_bytes", blob.size()},
      {"blob_fnv1a64", detail::hex64(detail::fnv1a64(blob, 0, blob.size()))},
  };
  const std::string text = manifest.dump(1);

  std::string out(detail::kMagic, detail::kMagic + 8);
  detail::put_u64(out, text.size());
  out += text;
  out += blob;
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  using nlohmann::json;
  if (bytes.size() < 16) throw IntegrityError("checkpoint: file shorter than its 16-byte header", bytes.size());
  if (std::memcmp(bytes.data(), detail::kMagic, 8) != 0) throw IntegrityError("checkpoint: bad magic", 0);
  const std::uint64_t manifest_len = detail::get_u64(bytes, 8);
  if (manifest_len > bytes.size() - 16) throw IntegrityError("checkpoint: manifest truncated", bytes.size());

  json manifest;
  try {
    manifest = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(manifest_len));
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint: unreadable manifest: ") + e.what(), 16);
  }

  try {
    const auto version = manifest.at("format_version").get<std::uint64_t>();
    if (version > kCheckpointVersion) {
      throw IoError("checkpoint: format version " + std::to_string(version) + " is newer than supported version " +
                    std::to_string(kCheckpointVersion));
    }
    if (manifest.at("dtype").get<std::string>() != "f64le") throw IntegrityError("checkpoint: unsupported dtype", 16);

    const std::size_t blob_start = 16 + manifest_len;
    const auto blob_bytes = manifest.at("blob_bytes").get<std::size_t>();
    if (bytes.size() - blob_start < blob_bytes) {
      throw IntegrityError("checkpoint: blob truncated, expected " + std::to_string(blob_bytes) + " bytes", bytes.size());
    }
    if (bytes.size() - blob_start > blob_bytes) throw IntegrityError("checkpoint: trailing bytes after blob", blob_start + blob_bytes);
    const std::uint64_t sum = detail::fnv1a64(bytes, blob_start, blob_start + blob_bytes);
    if (detail::hex64(sum) != manifest.at("blob_fnv1a64").get<std::string>()) {
      throw IntegrityError("checkpoint: blob checksum mismatch", blob_start);
    }

    std::map<std::string, Matrix> tensors;
    for (const auto& t : manifest.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto rows = t.at("shape").at(0).get<std::size_t>();
      const auto cols = t.at("shape").at(1).get<std::size_t>();
      const auto offset = t.at("offset").get<std::size_t>();
      if (offset > blob_bytes || rows * cols > (blob_bytes - offset) / 8) {
        throw IntegrityError("checkpoint: tensor '" + name + "' extends past the blob", blob_start + offset);
      }
      Matrix m(rows, cols);
      auto d = m.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = std::bit_cast<double>(detail::get_u64(bytes, blob_start + offset + 8 * i));
      tensors.emplace(name, std::move(m));
    }

    auto take = [&](const std::string& name) -> Matrix& {
      const auto it = tensors.find(name);
      if (it == tensors.end()) throw IntegrityError("checkpoint: missing tensor '" + name + "'", 16);
      return it->second;
    };

    Checkpoint ck;
    ck.config_hash = manifest.at("config_hash").get<std::string>();
    ck.state.round_index = manifest.at("round_index").get<std::size_t>();
    const auto experts = manifest.at("experts").get<std::size_t>();
    const Matrix& alphas = take("lora_alpha");
    if (alphas.rows() != experts) throw IntegrityError("checkpoint: alpha table does not match expert count", 16);
    for (std::size_t j = 0; j < experts; ++j) {
      LoraPair p{take("expert_" + std::to_string(j) + ".lora_a"), take("expert_" + std::to_string(j) + ".lora_b"), alphas(j, 0)};
      try {
        p.validate();
      } catch (const DimensionError& e) {
        throw IntegrityError(std::string("checkpoint: ") + e.what(), 16);
      }
      ck.state.loras.push_back(std::move(p));
    }
    const Matrix& rs = take("client_rescalers");
    const auto& ids = manifest.at("rescaler_client_ids");
    if (ids.size() != rs.rows()) throw IntegrityError("checkpoint: rescaler ids do not match values", 16);
    for (std::size_t i = 0; i < ids.size(); ++i) ck.rescalers[ids[i].get<std::size_t>()] = rs(i, 0);
    if (!ck.state.all_finite()) throw IntegrityError("checkpoint: non-finite adapter values", blob_start);
    return ck;
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint: malformed manifest: ") + e.what(), 16);
  }
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  const std::string bytes = serialize_checkpoint(ck);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw NotFoundError("cannot open checkpoint " + path);
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace flame
