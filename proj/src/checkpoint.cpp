#include "crystalign/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <iterator>

namespace crystalign {

const Checkpoint::Entry& Checkpoint::entry(const std::string& name) const {
  const auto it = entries_.find(name);
  if (it == entries_.end()) throw Error(Errc::Checkpoint, "missing tensor '" + name + "'");
  return it->second;
}

std::vector<unsigned char> Checkpoint::serialize() const {
  nlohmann::json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["metadata"] = metadata_;
  header["tensors"] = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, e] : entries_) {
    header["tensors"][name] = {{"dtype", e.dtype}, {"shape", e.shape}, {"offset", offset}, {"nbytes", e.bytes.size()}};
    offset += e.bytes.size();
  }
  const std::string text = header.dump();
  std::vector<unsigned char> out;
  out.reserve(8 + text.size() + offset);
  const std::uint64_t len = text.size();
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((len >> (8 * i)) & 0xff));
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, e] : entries_) out.insert(out.end(), e.bytes.begin(), e.bytes.end());
  return out;
}

Checkpoint Checkpoint::deserialize(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 8) throw Error(Errc::Checkpoint, "truncated checkpoint");
  std::uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  if (8 + len > bytes.size()) throw Error(Errc::Checkpoint, "header length exceeds file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::Checkpoint, std::string("bad header: ") + e.what());
  }
  if (header.value("format_version", 0) != kCheckpointFormatVersion) {
    throw Error(Errc::Checkpoint, "unsupported format_version");
  }
  Checkpoint ckpt;
  ckpt.metadata_ = header.value("metadata", nlohmann::json::object());
  const std::size_t base = 8 + len;
  for (const auto& [name, info] : header.at("tensors").items()) {
    Entry e;
    e.dtype = info.at("dtype").get<std::string>();
    e.shape = info.at("shape").get<tensor::Shape>();
    const auto off = info.at("offset").get<std::uint64_t>();
    const auto nbytes = info.at("nbytes").get<std::uint64_t>();
    const std::size_t width = e.dtype == "f32" ? 4 : e.dtype == "f64" ? 8 : 0;
    if (width == 0) throw Error(Errc::Checkpoint, "unknown dtype " + e.dtype);
    if (nbytes != tensor::numel_of(e.shape) * width) throw Error(Errc::Checkpoint, "size mismatch for " + name);
    if (base + off + nbytes > bytes.size()) throw Error(Errc::Checkpoint, "payload truncated for " + name);
    e.bytes.assign(bytes.begin() + static_cast<std::ptrdiff_t>(base + off),
                   bytes.begin() + static_cast<std::ptrdiff_t>(base + off + nbytes));
    ckpt.entries_[name] = std::move(e);
  }
  return ckpt;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  // write-then-rename so readers never observe a partial file
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error(Errc::Io, "cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

std::string fnv1a_hex(const unsigned char* data, std::size_t size) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::Io, "cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a_hex(bytes.data(), bytes.size());
}

}  // namespace crystalign
