// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "homnet/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace homnet {

// Binary layout (all integers little-endian):
//
//   "HOMNETCK"            8-byte magic
//   u32 version           currently 1
//   u64 payload_length
//   payload:
//     u32 entry_count
//     entry*: u16 name_length, name bytes, u8 dtype, u8 rank, u64 dims[rank], data
//   u32 crc32(payload)
//
// dtype: 0 = f32, 1 = f64, 2 = i64, 3 = utf-8 string (rank 1, dim = byte count).
class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version, corrupt, checksum, missing, type };

  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::uint32_t checkpoint_version = 1;

class Checkpoint {
 public:
  using Data = std::variant<std::vector<float>, std::vector<double>, std::vector<std::int64_t>, std::string>;

  struct Entry {
    std::string name;
    Shape shape;
    Data data;
  };

  void put(const std::string& name, const Tensor<float>& t);
  void put(const std::string& name, Shape shape, std::vector<float> values);
  void put(const std::string& name, Shape shape, std::vector<double> values);
  void put_real(const std::string& name, double v);
  void put_int(const std::string& name, std::int64_t v);
  void put_string(const std::string& name, std::string v);

  bool contains(const std::string& name) const;
  const Entry& at(const std::string& name) const;
  Tensor<float> tensor(const std::string& name) const;
  std::vector<double> reals(const std::string& name) const;
  double real(const std::string& name) const;
  std::int64_t integer(const std::string& name) const;
  const std::string& string(const std::string& name) const;

  const std::vector<Entry>& entries() const { return entries_; }

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(const std::vector<std::uint8_t>& bytes);

 private:
  void add(Entry e);

  std::vector<Entry> entries_;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace homnet
