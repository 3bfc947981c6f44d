#pragma once

// Tensor checkpoint: u64 little-endian header length, a JSON header
// {"format_version", "metadata", "tensors": {name: {dtype, shape, offset, nbytes}}},
// then the raw little-endian payload. Entries are stored in name order so equal
// contents always produce equal bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "crystalign/error.hpp"
#include "crystalign/tensor.hpp"

namespace crystalign {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written little-endian");

inline constexpr int kCheckpointFormatVersion = 1;

class Checkpoint {
 public:
  struct Entry {
    std::string dtype;  // "f32" | "f64"
    tensor::Shape shape;
    std::vector<unsigned char> bytes;
  };

  template <class T>
  void put(const std::string& name, const tensor::Tensor<T>& t) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    Entry e;
    e.dtype = std::is_same_v<T, float> ? "f32" : "f64";
    e.shape = t.shape();
    e.bytes.resize(t.numel() * sizeof(T));
    std::memcpy(e.bytes.data(), t.data().data(), e.bytes.size());
    entries_[name] = std::move(e);
  }

  /// Copies a stored tensor into `t`, converting dtype if needed. Shapes must match.
  template <class T>
  void get_into(const std::string& name, tensor::Tensor<T>& t) const {
    const Entry& e = entry(name);
    if (e.shape != t.shape()) {
      throw Error(Errc::ShapeMismatch, "checkpoint tensor '" + name + "' has shape " + tensor::shape_str(e.shape) +
                                           ", model expects " + tensor::shape_str(t.shape()));
    }
    auto dst = t.data();
    if (e.dtype == "f32") {
      for (std::size_t i = 0; i < dst.size(); ++i) {
        float v;
        std::memcpy(&v, e.bytes.data() + i * sizeof(float), sizeof v);
        dst[i] = static_cast<T>(v);
      }
    } else {
      for (std::size_t i = 0; i < dst.size(); ++i) {
        double v;
        std::memcpy(&v, e.bytes.data() + i * sizeof(double), sizeof v);
        dst[i] = static_cast<T>(v);
      }
    }
  }

  template <class T>
  tensor::Tensor<T> get(const std::string& name) const {
    auto t = tensor::Tensor<T>::zeros(entry(name).shape);
    get_into(name, t);
    return t;
  }

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  const Entry& entry(const std::string& name) const;
  const std::map<std::string, Entry>& entries() const { return entries_; }

  nlohmann::json& metadata() { return metadata_; }
  const nlohmann::json& metadata() const { return metadata_; }

  std::vector<unsigned char> serialize() const;
  static Checkpoint deserialize(const std::vector<unsigned char>& bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);

 private:
  std::map<std::string, Entry> entries_;
  nlohmann::json metadata_ = nlohmann::json::object();
};

/// 64-bit FNV-1a over bytes, rendered as 16 hex digits.
std::string fnv1a_hex(const unsigned char* data, std::size_t size);
std::string file_checksum(const std::filesystem::path& path);

}  // namespace crystalign
