#pragma once

// Named, ordered parameter collection and its binary checkpoint format:
//   magic "SBCIT1\0", u32 entry count, then per entry
//   u16 name length, UTF-8 name, u8 rank, u32 dims[rank], f32 payload,
//   trailing u32 CRC-32 of all preceding bytes. All integers little-endian.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <zlib.h>

#include "cers/tensor.hpp"

namespace cers {

inline constexpr char kCheckpointMagic[7] = {'S', 'B', 'C', 'I', 'T', '1', '\0'};

template <typename T>
struct ParamEntry {
  std::string name;
  TensorT<T> tensor;
  bool trainable;
};

template <typename T>
class ParameterStore {
 public:
  TensorT<T> add(const std::string& name, TensorT<T> t, bool trainable = true) {
    if (index_.count(name)) fail("parameter store: duplicate name " + name);
    t.set_requires_grad(trainable);
    index_[name] = entries_.size();
    entries_.push_back({name, t, trainable});
    return t;
  }

  const std::vector<ParamEntry<T>>& entries() const { return entries_; }
  std::vector<ParamEntry<T>>& entries() { return entries_; }

  const TensorT<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second].tensor;
  }

  void zero_grad() {
    for (auto& e : entries_)
      if (e.trainable) e.tensor.zero_grad();
  }

  Dim total_parameters() const {
    Dim n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.tensor.numel();
    return n;
  }

  // Snapshot / restore of raw values (used for best-checkpoint retention).
  std::vector<std::vector<T>> snapshot() const {
    std::vector<std::vector<T>> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_)
      out.emplace_back(e.tensor.data().begin(), e.tensor.data().end());
    return out;
  }
  void restore(const std::vector<std::vector<T>>& snap) {
    if (snap.size() != entries_.size())
      fail("parameter store: snapshot entry count mismatch");
    for (size_t i = 0; i < snap.size(); ++i) {
      auto dst = entries_[i].tensor.mut();
      if (snap[i].size() != dst.size())
        fail("parameter store: snapshot size mismatch for " + entries_[i].name);
      std::copy(snap[i].begin(), snap[i].end(), dst.begin());
    }
  }

 private:
  std::vector<ParamEntry<T>> entries_;
  std::map<std::string, size_t> index_;
};

namespace detail {

inline void put_u16(std::string& buf, std::uint16_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
}
inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct ByteReader {
  const unsigned char* p;
  size_t n, pos = 0;
  explicit ByteReader(const std::string& s)
      : p(reinterpret_cast<const unsigned char*>(s.data())), n(s.size()) {}
  void need(size_t k, const char* what) {
    if (pos + k > n)
      throw IoError(std::string("checkpoint: truncated while reading ") + what);
  }
  std::uint16_t u16(const char* what) {
    need(2, what);
    std::uint16_t v = static_cast<std::uint16_t>(p[pos] | (p[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return p[pos++];
  }
};

}  // namespace detail

template <typename T>
void save_checkpoint(const ParameterStore<T>& store, const std::string& path) {
  std::string buf;
  buf.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_u32(buf, static_cast<std::uint32_t>(store.entries().size()));
  for (const auto& e : store.entries()) {
    if (e.name.size() > 0xffff)
      fail("checkpoint: parameter name too long: " + e.name);
    detail::put_u16(buf, static_cast<std::uint16_t>(e.name.size()));
    buf.append(e.name);
    const Shape& s = e.tensor.shape();
    if (s.size() > 0xff) fail("checkpoint: rank too large for " + e.name);
    buf.push_back(static_cast<char>(s.size()));
    for (Dim d : s) detail::put_u32(buf, static_cast<std::uint32_t>(d));
    for (T v : e.tensor.data()) {
      float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::put_u32(buf, bits);
    }
  }
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(buf.data()),
              static_cast<uInt>(buf.size()));
  detail::put_u32(buf, static_cast<std::uint32_t>(crc));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("checkpoint: cannot open for writing: " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("checkpoint: write failed: " + path);
}

struct RawCheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

inline std::vector<RawCheckpointEntry> read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)),
                    std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(kCheckpointMagic) + 8)
    throw IoError("checkpoint: file too short: " + path);
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw IoError("checkpoint: bad magic in " + path);

  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()),
              static_cast<uInt>(bytes.size() - 4));
  detail::ByteReader tail(bytes);
  tail.pos = bytes.size() - 4;
  if (static_cast<std::uint32_t>(crc) != tail.u32("crc"))
    throw IoError("checkpoint: CRC-32 mismatch in " + path);

  detail::ByteReader r(bytes);
  r.pos = sizeof(kCheckpointMagic);
  std::uint32_t count = r.u32("entry count");
  std::vector<RawCheckpointEntry> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    RawCheckpointEntry e;
    std::uint16_t len = r.u16("name length");
    r.need(len, "name");
    e.name.assign(bytes.data() + r.pos, len);
    r.pos += len;
    std::uint8_t rank = r.u8("rank");
    Dim n = 1;
    for (std::uint8_t d = 0; d < rank; ++d) {
      std::uint32_t ext = r.u32("dimension");
      e.shape.push_back(static_cast<Dim>(ext));
      n *= ext;
    }
    e.values.resize(static_cast<size_t>(n));
    for (Dim j = 0; j < n; ++j) {
      std::uint32_t bits = r.u32("payload");
      float v;
      std::memcpy(&v, &bits, 4);
      e.values[static_cast<size_t>(j)] = v;
    }
    out.push_back(std::move(e));
  }
  if (r.pos != bytes.size() - 4)
    throw IoError("checkpoint: trailing bytes after last entry in " + path);
  return out;
}

// Loads values into an existing store. Every store entry must be present with
// matching shape; entries in the file that the store does not declare are
// rejected (they indicate a config mismatch).
template <typename T>
void load_checkpoint(ParameterStore<T>& store, const std::string& path) {
  auto raw = read_checkpoint(path);
  std::map<std::string, const RawCheckpointEntry*> by_name;
  for (const auto& e : raw) by_name[e.name] = &e;
  if (raw.size() != by_name.size())
    throw IoError("checkpoint: duplicate entry names in " + path);
  for (auto& e : store.entries()) {
    auto it = by_name.find(e.name);
    if (it == by_name.end())
      throw IoError("checkpoint: missing entry '" + e.name + "' in " + path);
    const RawCheckpointEntry& src = *it->second;
    if (src.shape != e.tensor.shape())
      throw IoError("checkpoint: shape mismatch for entry '" + e.name + "': file " +
                    shape_str(src.shape) + " vs model " + shape_str(e.tensor.shape()));
    auto dst = e.tensor.mut();
    for (size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src.values[i]);
    by_name.erase(it);
  }
  if (!by_name.empty())
    throw IoError("checkpoint: unexpected entry '" + by_name.begin()->first +
                  "' not present in the model (config mismatch?)");
}

}  // namespace cers
