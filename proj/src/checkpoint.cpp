#include "hyperloop/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "hyperloop/error.hpp"

namespace hyperloop {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'H', 'L', 'T', 'C'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  void bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() {
    need(1);
    return in_[pos_++];
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    bytes(&v, sizeof v);
    return v;
  }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<std::uint8_t> block(std::size_t n) {
    need(n);
    std::vector<std::uint8_t> v(in_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                in_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return v;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw IoError("checkpoint: truncated at byte " + std::to_string(pos_));
  }
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

void write_records(Writer& w, const std::vector<TensorRecord>& records) {
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (r.payload.size() != payload_size(r.dtype, r.shape)) {
      throw ContractError("checkpoint: record " + r.name + " payload is " + std::to_string(r.payload.size()) +
                          " bytes, expected " + std::to_string(payload_size(r.dtype, r.shape)));
    }
    w.str(r.name);
    w.u8(static_cast<std::uint8_t>(r.dtype));
    w.u8(static_cast<std::uint8_t>(r.shape.size()));
    for (Index d : r.shape) w.u32(static_cast<std::uint32_t>(d));
    w.bytes(r.payload.data(), r.payload.size());
  }
}

std::vector<TensorRecord> read_records(Reader& r) {
  const auto count = r.u32();
  std::vector<TensorRecord> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord rec;
    rec.name = r.str();
    const auto code = r.u8();
    if (code < 1 || code > 5) throw IoError("checkpoint: record " + rec.name + " has unknown dtype " + std::to_string(code));
    rec.dtype = static_cast<DType>(code);
    const auto rank = r.u8();
    for (std::uint8_t d = 0; d < rank; ++d) rec.shape.push_back(static_cast<Index>(r.u32()));
    rec.payload = r.block(payload_size(rec.dtype, rec.shape));
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace

std::size_t payload_size(DType dtype, const Shape& shape) {
  const auto n = static_cast<std::size_t>(numel(shape));
  switch (dtype) {
    case DType::f32: return 4 * n;
    case DType::f64: return 8 * n;
    case DType::i32: return 4 * n;
    case DType::u8: return n;
    case DType::int4: {
      if (shape.empty()) return 0;
      const auto cols = static_cast<std::size_t>(shape.back());
      return (n / std::max<std::size_t>(cols, 1)) * ((cols + 1) / 2);
    }
  }
  return 0;
}

const TensorRecord* Checkpoint::find(std::string_view name) const {
  for (const auto& r : tensors)
    if (r.name == name) return &r;
  return nullptr;
}

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(ckpt.version);
  w.str(ckpt.document.dump());
  write_records(w, ckpt.tensors);
  write_records(w, ckpt.optimizer);
  return w.take();
}

Checkpoint deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw IoError("checkpoint: bad magic");
  Checkpoint ckpt;
  ckpt.version = r.u32();
  if (ckpt.version != kCheckpointVersion) {
    throw IoError("checkpoint: unsupported version " + std::to_string(ckpt.version));
  }
  try {
    ckpt.document = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(std::string("checkpoint: config document: ") + e.what());
  }
  ckpt.tensors = read_records(r);
  ckpt.optimizer = read_records(r);
  if (!r.done()) throw IoError("checkpoint: trailing bytes");
  return ckpt;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) { write_file(path, serialize(ckpt)); }

Checkpoint read_checkpoint(const std::filesystem::path& path) { return deserialize(read_file(path)); }

TensorRecord float_record(std::string name, const Shape& shape, std::span<const float> values) {
  TensorRecord r{std::move(name), DType::f32, shape, {}};
  r.payload.resize(values.size() * sizeof(float));
  std::memcpy(r.payload.data(), values.data(), r.payload.size());
  return r;
}

std::vector<float> float_values(const TensorRecord& rec) {
  if (rec.dtype != DType::f32) throw IoError("checkpoint: record " + rec.name + " is not float32");
  std::vector<float> v(rec.payload.size() / sizeof(float));
  std::memcpy(v.data(), rec.payload.data(), rec.payload.size());
  return v;
}

}  // namespace hyperloop
