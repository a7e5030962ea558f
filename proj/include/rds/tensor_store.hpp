#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rds/numcore.hpp"

namespace rds {

// Named dense f32 tensors. On disk:
//   [u64 little-endian header length][JSON header][raw little-endian f32 blob]
// The header maps each name to {"dtype":"f32","shape":[...],"byte_offset":o,"byte_length":l},
// offsets relative to the start of the blob. Entries are laid out in name order,
// so identical contents always serialize to identical bytes.
class TensorStore {
 public:
  struct Entry {
    std::vector<std::size_t> shape;
    std::vector<float> data;
  };

  void put(const std::string& name, std::vector<std::size_t> shape, std::vector<float> data);
  void put(const std::string& name, const Matrix& m);
  void put(const std::string& name, const Vector& v);
  void put_scalar(const std::string& name, double value);

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  const Entry& at(const std::string& name) const;
  Matrix matrix(const std::string& name) const;
  Vector vector(const std::string& name) const;
  double scalar(const std::string& name) const;

  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  std::vector<std::uint8_t> to_bytes() const;
  static TensorStore from_bytes(const std::vector<std::uint8_t>& bytes);

  void save(const std::filesystem::path& path) const;
  static TensorStore load(const std::filesystem::path& path);

  bool operator==(const TensorStore& other) const;

 private:
  std::map<std::string, Entry> entries_;
};

/// FNV-1a over the serialized bytes, hex-encoded. Used to fingerprint artifacts.
std::string content_hash(const std::vector<std::uint8_t>& bytes);

}  // namespace rds
