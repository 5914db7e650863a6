#include "tocom/artifact.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace tocom {

namespace {

class Writer {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void bytes(std::string_view s) { out.insert(out.end(), s.begin(), s.end()); }

  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8, "u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::span<const std::uint8_t> take(std::uint64_t n, const char* what) {
    need(n, what);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(std::uint64_t n, const char* what) {
    if (n > remaining()) throw FormatError(std::string("artifact truncated while reading ") + what);
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
    crc = crc32(crc, bytes.data() + done, chunk);
    done += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void put_f32(std::vector<std::uint8_t>& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

float get_f32(const std::uint8_t* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= std::uint32_t(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace

const Tensor<float>& Artifact::tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t.value;
  throw FormatError("artifact has no tensor '" + name + "'");
}

std::vector<std::uint8_t> encode_artifact(const Artifact& a) {
  if (a.magic.size() != 4) throw ValidationError("artifact magic must be 4 bytes");
  Writer w;
  w.bytes(a.magic);
  w.u32(kArtifactVersion);
  const std::string meta = a.metadata.dump();
  w.u32(static_cast<std::uint32_t>(meta.size()));
  w.bytes(meta);

  std::vector<std::uint8_t> payload;
  w.u32(static_cast<std::uint32_t>(a.tensors.size()));
  for (const auto& t : a.tensors) {
    if (!t.value.all_finite()) throw ValidationError("artifact tensor '" + t.name + "' is not finite");
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name);
    w.u32(kDtypeF32);
    w.u32(static_cast<std::uint32_t>(t.value.rank()));
    for (std::size_t d : t.value.shape()) w.u64(d);
    w.u64(payload.size());
    for (float f : t.value.values()) put_f32(payload, f);
  }
  w.u64(payload.size());
  w.out.insert(w.out.end(), payload.begin(), payload.end());
  w.u32(crc32_of(payload));
  return std::move(w.out);
}

Artifact decode_artifact(std::span<const std::uint8_t> bytes, std::string_view expected_magic) {
  Reader r(bytes);
  Artifact a;
  const auto magic = r.take(4, "magic");
  a.magic.assign(magic.begin(), magic.end());
  if (a.magic != expected_magic)
    throw FormatError("bad magic: expected '" + std::string(expected_magic) + "'");
  const std::uint32_t version = r.u32();
  if (version != kArtifactVersion) throw FormatError("unsupported artifact version " + std::to_string(version));
  const auto meta = r.take(r.u32(), "metadata");
  try {
    a.metadata = nlohmann::json::parse(meta.begin(), meta.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("artifact metadata is not valid JSON: ") + e.what());
  }

  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset, length;
  };
  const std::uint32_t count = r.u32();
  // every directory entry takes at least 20 bytes
  if (count > r.remaining() / 20) throw FormatError("directory overflow: tensor count exceeds file size");
  std::vector<Entry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const auto name = r.take(r.u32(), "tensor name");
    e.name.assign(name.begin(), name.end());
    if (r.u32() != kDtypeF32) throw FormatError("tensor '" + e.name + "' has an unsupported dtype");
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw FormatError("tensor '" + e.name + "' has rank " + std::to_string(rank));
    std::uint64_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint64_t d = r.u64();
      if (d != 0 && numel > std::numeric_limits<std::uint64_t>::max() / 8 / d)
        throw FormatError("directory overflow: tensor '" + e.name + "' is too large");
      numel *= d;
      e.shape.push_back(d);
    }
    e.offset = r.u64();
    e.length = numel * 4;
    entries.push_back(std::move(e));
  }
  const std::uint64_t payload_len = r.u64();
  const auto payload = r.take(payload_len, "payload");
  const std::uint32_t stored_crc = r.u32();
  if (r.remaining() != 0) throw FormatError("trailing bytes after artifact");
  if (crc32_of(payload) != stored_crc) throw FormatError("checksum mismatch: payload CRC-32 does not match");

  std::vector<const Entry*> by_offset;
  for (const auto& e : entries) {
    if (e.offset > payload_len || e.length > payload_len - e.offset)
      throw FormatError("directory overflow: tensor '" + e.name + "' extends past the payload");
    by_offset.push_back(&e);
  }
  std::sort(by_offset.begin(), by_offset.end(), [](auto* x, auto* y) { return x->offset < y->offset; });
  for (std::size_t i = 1; i < by_offset.size(); ++i)
    if (by_offset[i - 1]->offset + by_offset[i - 1]->length > by_offset[i]->offset)
      throw FormatError("directory entries '" + by_offset[i - 1]->name + "' and '" + by_offset[i]->name +
                        "' overlap");

  for (const auto& e : entries) {
    Tensor<float> t(e.shape, 0.0f);
    const std::uint8_t* p = payload.data() + e.offset;
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = get_f32(p + 4 * i);
    if (!t.all_finite()) throw FormatError("tensor '" + e.name + "' holds non-finite values");
    a.tensors.push_back({e.name, std::move(t)});
  }
  return a;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write to '" + path + "' failed");
}

void write_artifact(const std::string& path, const Artifact& a) { write_file(path, encode_artifact(a)); }

Artifact read_artifact(const std::string& path, std::string_view expected_magic) {
  return decode_artifact(read_file(path), expected_magic);
}

}  // namespace tocom
