// SPDX-License-Identifier: Apache-2.0
#include "homnet/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace homnet {

namespace {

constexpr char magic[8] = {'H', 'O', 'M', 'N', 'E', 'T', 'C', 'K'};

enum DType : std::uint8_t { f32 = 0, f64 = 1, i64 = 2, str = 3 };

class Writer {
 public:
  void u8(std::uint8_t v) { bytes.push_back(v); }
  void le(std::uint64_t v, int width)
  {
    for (int i = 0; i < width; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void raw(const void* p, std::size_t n)
  {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

  std::uint64_t le(int width)
  {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t{data_[pos_ + static_cast<std::size_t>(i)]} << (8 * i);
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  const std::uint8_t* take(std::size_t n)
  {
    need(n);
    const std::uint8_t* p = data_ + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == size_; }

 private:
  void need(std::size_t n) const
  {
    if (size_ - pos_ < n) throw CheckpointError(CheckpointError::Kind::corrupt, "checkpoint: truncated payload");
  }

  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::uint8_t* p, std::size_t n)
{
  return static_cast<std::uint32_t>(crc32(crc32(0L, Z_NULL, 0), p, static_cast<uInt>(n)));
}

}  // namespace

void Checkpoint::add(Entry e)
{
  if (e.name.size() > 0xffff) throw std::invalid_argument("checkpoint: entry name too long");
  for (auto& existing : entries_)
    if (existing.name == e.name) {
      existing = std::move(e);
      return;
    }
  entries_.push_back(std::move(e));
}

void Checkpoint::put(const std::string& name, const Tensor<float>& t)
{
  add({name, t.shape(), std::vector<float>(t.data().data(), t.data().data() + t.size())});
}

void Checkpoint::put(const std::string& name, Shape shape, std::vector<float> values)
{
  if (shape_size(shape) != static_cast<Index>(values.size())) throw ShapeError("checkpoint: '" + name + "' shape/data mismatch");
  add({name, std::move(shape), std::move(values)});
}

void Checkpoint::put(const std::string& name, Shape shape, std::vector<double> values)
{
  if (shape_size(shape) != static_cast<Index>(values.size())) throw ShapeError("checkpoint: '" + name + "' shape/data mismatch");
  add({name, std::move(shape), std::move(values)});
}

void Checkpoint::put_real(const std::string& name, double v) { add({name, {1}, std::vector<double>{v}}); }
void Checkpoint::put_int(const std::string& name, std::int64_t v) { add({name, {1}, std::vector<std::int64_t>{v}}); }
void Checkpoint::put_string(const std::string& name, std::string v)
{
  const auto n = static_cast<Index>(v.size());
  add({name, {n}, std::move(v)});
}

bool Checkpoint::contains(const std::string& name) const
{
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

const Checkpoint::Entry& Checkpoint::at(const std::string& name) const
{
  for (const auto& e : entries_)
    if (e.name == name) return e;
  throw CheckpointError(CheckpointError::Kind::missing, "checkpoint: missing entry '" + name + "'");
}

namespace {

template <typename T>
const T& typed(const Checkpoint::Entry& e)
{
  if (const T* v = std::get_if<T>(&e.data)) return *v;
  throw CheckpointError(CheckpointError::Kind::type, "checkpoint: entry '" + e.name + "' has unexpected type");
}

}  // namespace

Tensor<float> Checkpoint::tensor(const std::string& name) const
{
  const Entry& e = at(name);
  const auto& v = typed<std::vector<float>>(e);
  return Tensor<float>(e.shape, Eigen::Map<const Eigen::VectorXf>(v.data(), static_cast<Index>(v.size())));
}

std::vector<double> Checkpoint::reals(const std::string& name) const { return typed<std::vector<double>>(at(name)); }

double Checkpoint::real(const std::string& name) const
{
  const auto& v = typed<std::vector<double>>(at(name));
  if (v.size() != 1) throw CheckpointError(CheckpointError::Kind::type, "checkpoint: '" + name + "' is not a scalar");
  return v[0];
}

std::int64_t Checkpoint::integer(const std::string& name) const
{
  const auto& v = typed<std::vector<std::int64_t>>(at(name));
  if (v.size() != 1) throw CheckpointError(CheckpointError::Kind::type, "checkpoint: '" + name + "' is not a scalar");
  return v[0];
}

const std::string& Checkpoint::string(const std::string& name) const { return typed<std::string>(at(name)); }

std::vector<std::uint8_t> Checkpoint::serialize() const
{
  Writer payload;
  payload.le(entries_.size(), 4);
  for (const auto& e : entries_) {
    payload.le(e.name.size(), 2);
    payload.raw(e.name.data(), e.name.size());
    payload.u8(static_cast<std::uint8_t>(e.data.index()));
    payload.u8(static_cast<std::uint8_t>(e.shape.size()));
    for (Index d : e.shape) payload.le(static_cast<std::uint64_t>(d), 8);
    std::visit(
        [&](const auto& v) {
          using V = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<V, std::string>) {
            payload.raw(v.data(), v.size());
          } else {
            for (auto x : v) {
              if constexpr (std::is_same_v<V, std::vector<float>>)
                payload.le(std::bit_cast<std::uint32_t>(x), 4);
              else if constexpr (std::is_same_v<V, std::vector<double>>)
                payload.le(std::bit_cast<std::uint64_t>(x), 8);
              else
                payload.le(static_cast<std::uint64_t>(x), 8);
            }
          }
        },
        e.data);
  }

  Writer out;
  out.raw(magic, sizeof magic);
  out.le(checkpoint_version, 4);
  out.le(payload.bytes.size(), 8);
  out.raw(payload.bytes.data(), payload.bytes.size());
  out.le(crc_of(payload.bytes.data(), payload.bytes.size()), 4);
  return std::move(out.bytes);
}

Checkpoint Checkpoint::deserialize(const std::vector<std::uint8_t>& bytes)
{
  if (bytes.size() < sizeof magic || std::memcmp(bytes.data(), magic, sizeof magic) != 0)
    throw CheckpointError(CheckpointError::Kind::bad_magic, "checkpoint: bad magic");
  Reader header(bytes.data() + sizeof magic, bytes.size() - sizeof magic);
  const auto version = static_cast<std::uint32_t>(header.le(4));
  if (version != checkpoint_version)
    throw CheckpointError(CheckpointError::Kind::version, "checkpoint: unsupported version " + std::to_string(version) +
                                                              " (this build reads version " + std::to_string(checkpoint_version) + ")");
  const std::uint64_t length = header.le(8);
  const std::size_t offset = sizeof magic + 12;
  if (bytes.size() != offset + length + 4)
    throw CheckpointError(CheckpointError::Kind::corrupt, "checkpoint: length mismatch (header says " + std::to_string(length) +
                                                              " payload bytes, file has " + std::to_string(bytes.size()) + " bytes)");
  const std::uint8_t* payload = bytes.data() + offset;
  Reader tail(payload + length, 4);
  if (crc_of(payload, length) != static_cast<std::uint32_t>(tail.le(4)))
    throw CheckpointError(CheckpointError::Kind::checksum, "checkpoint: checksum mismatch");

  Reader in(payload, length);
  Checkpoint ckpt;
  const auto count = in.le(4);
  for (std::uint64_t i = 0; i < count; ++i) {
    Entry e;
    const auto name_len = static_cast<std::size_t>(in.le(2));
    const std::uint8_t* name = in.take(name_len);
    e.name.assign(reinterpret_cast<const char*>(name), name_len);
    const auto dtype = static_cast<std::uint8_t>(in.le(1));
    const auto rank = static_cast<std::size_t>(in.le(1));
    for (std::size_t r = 0; r < rank; ++r) e.shape.push_back(static_cast<Index>(in.le(8)));
    const auto n = static_cast<std::size_t>(shape_size(e.shape));
    switch (dtype) {
      case f32: {
        std::vector<float> v(n);
        for (auto& x : v) x = std::bit_cast<float>(static_cast<std::uint32_t>(in.le(4)));
        e.data = std::move(v);
        break;
      }
      case f64: {
        std::vector<double> v(n);
        for (auto& x : v) x = std::bit_cast<double>(in.le(8));
        e.data = std::move(v);
        break;
      }
      case i64: {
        std::vector<std::int64_t> v(n);
        for (auto& x : v) x = static_cast<std::int64_t>(in.le(8));
        e.data = std::move(v);
        break;
      }
      case str: {
        const std::uint8_t* s = in.take(n);
        e.data = std::string(reinterpret_cast<const char*>(s), n);
        break;
      }
      default:
        throw CheckpointError(CheckpointError::Kind::corrupt, "checkpoint: unknown dtype " + std::to_string(dtype));
    }
    ckpt.entries_.push_back(std::move(e));
  }
  if (!in.done()) throw CheckpointError(CheckpointError::Kind::corrupt, "checkpoint: trailing bytes in payload");
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt)
{
  const auto bytes = ckpt.serialize();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "write error in " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return Checkpoint::deserialize(bytes);
}

}  // namespace homnet
