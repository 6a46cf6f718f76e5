#pragma once

// Versioned binary checkpoint archive.
//
//   "SKNTCKPT" | u32 version | str kind | str meta-json | u32 n |
//   n x (str name | u32 rows | u32 cols | rows*cols float32)
//
// Strings are u32 length-prefixed; integers and floats little-endian. The
// checkpoint id is a prefix of the SHA-256 of the whole file.

#include <openssl/evp.h>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sketchnet/errors.hpp"
#include "sketchnet/nn/layers.hpp"

namespace sketchnet {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'S', 'K', 'N', 'T', 'C', 'K', 'P', 'T'};

inline std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 digest failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return out.str();
}

/// Digest over parameter names, shapes and values.
template <class T>
std::string parameter_hash(const nn::ParamStore<T>& store) {
  std::vector<unsigned char> buf;
  for (const auto* p : store.all()) {
    buf.insert(buf.end(), p->name.begin(), p->name.end());
    const std::int64_t shape[2] = {p->value.rows(), p->value.cols()};
    const auto* s = reinterpret_cast<const unsigned char*>(shape);
    buf.insert(buf.end(), s, s + sizeof(shape));
    const auto* d = reinterpret_cast<const unsigned char*>(p->value.data());
    buf.insert(buf.end(), d, d + sizeof(T) * static_cast<std::size_t>(p->value.size()));
  }
  return sha256_hex(buf.data(), buf.size());
}

struct Checkpoint {
  std::string kind;
  nlohmann::json meta;  // {"hyper": {...}, "parents": {...}}
  std::map<std::string, nn::Matrix<float>> tensors;
  std::string id;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

inline void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& data) : data_(data) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, data_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  std::string str() {
    const auto n = u32();
    need(n);
    auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void floats(float* dst, std::size_t n) {
    need(n * sizeof(float));
    std::memcpy(dst, data_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw CheckpointMismatch("truncated checkpoint");
  }
  std::size_t pos_ = 0;

 private:
  const std::string& data_;
};

}  // namespace detail

inline std::string checkpoint_id_of(const std::string& bytes) { return sha256_hex(bytes.data(), bytes.size()).substr(0, 16); }

template <class T>
std::string serialize_checkpoint(const std::string& kind, const nlohmann::json& meta,
                                 const nn::ParamStore<T>& store) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u32(out, kCheckpointVersion);
  detail::put_str(out, kind);
  detail::put_str(out, meta.dump());
  const auto params = store.all();
  detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto* p : params) {
    detail::put_str(out, p->name);
    detail::put_u32(out, static_cast<std::uint32_t>(p->value.rows()));
    detail::put_u32(out, static_cast<std::uint32_t>(p->value.cols()));
    const nn::Matrix<float> f = p->value.template cast<float>();
    out.append(reinterpret_cast<const char*>(f.data()), sizeof(float) * static_cast<std::size_t>(f.size()));
  }
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointMismatch("not a checkpoint archive");
  }
  detail::ByteReader r(bytes);
  r.pos_ = sizeof(kCheckpointMagic);
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointMismatch("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.kind = r.str();
  ck.meta = nlohmann::json::parse(r.str());
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    auto name = r.str();
    const auto rows = r.u32();
    const auto cols = r.u32();
    nn::Matrix<float> m(rows, cols);
    r.floats(m.data(), static_cast<std::size_t>(rows) * cols);
    ck.tensors.emplace(std::move(name), std::move(m));
  }
  ck.id = checkpoint_id_of(bytes);
  return ck;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(read_file(path)); }

/// Copies tensors into a store whose layout must match exactly.
template <class T>
void restore_parameters(const Checkpoint& ck, nn::ParamStore<T>& store) {
  const auto params = store.all();
  if (params.size() != ck.tensors.size()) {
    throw CheckpointMismatch("checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, model expects " +
                             std::to_string(params.size()));
  }
  for (auto* p : params) {
    auto it = ck.tensors.find(p->name);
    if (it == ck.tensors.end()) throw CheckpointMismatch("checkpoint lacks tensor " + p->name);
    if (it->second.rows() != p->value.rows() || it->second.cols() != p->value.cols()) {
      throw CheckpointMismatch("tensor " + p->name + " has a different shape");
    }
    p->value = it->second.template cast<T>();
  }
}

}  // namespace sketchnet
