#include "rds/tensor_store.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "rds/errors.hpp"

namespace rds {

static_assert(sizeof(float) == 4, "f32 storage assumes 4-byte float");

namespace {

std::size_t element_count(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void append_u64_le(std::vector<std::uint8_t>& out, std::uint64_t value) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

std::uint64_t read_u64_le(const std::uint8_t* p) {
  std::uint64_t value = 0;
  for (int i = 7; i >= 0; --i) value = (value << 8) | p[i];
  return value;
}

void append_f32_le(std::vector<std::uint8_t>& out, float value) {
  const auto bits = std::bit_cast<std::uint32_t>(value);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

float read_f32_le(const std::uint8_t* p) {
  std::uint32_t bits = 0;
  for (int i = 3; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<float>(bits);
}

}  // namespace

void TensorStore::put(const std::string& name, std::vector<std::size_t> shape,
                      std::vector<float> data) {
  if (name.empty()) {
    throw std::invalid_argument("TensorStore: empty tensor name");
  }
  if (element_count(shape) != data.size()) {
    throw std::invalid_argument("TensorStore: shape/data size mismatch for '" + name + "'");
  }
  entries_[name] = Entry{std::move(shape), std::move(data)};
}

void TensorStore::put(const std::string& name, const Matrix& m) {
  std::vector<float> data(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      data[static_cast<std::size_t>(r * m.cols() + c)] = static_cast<float>(m(r, c));
    }
  }
  put(name, {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
      std::move(data));
}

void TensorStore::put(const std::string& name, const Vector& v) {
  std::vector<float> data(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) data[static_cast<std::size_t>(i)] = static_cast<float>(v[i]);
  put(name, {static_cast<std::size_t>(v.size())}, std::move(data));
}

void TensorStore::put_scalar(const std::string& name, double value) {
  put(name, {1}, {static_cast<float>(value)});
}

const TensorStore::Entry& TensorStore::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw std::invalid_argument("TensorStore: no tensor named '" + name + "'");
  }
  return it->second;
}

Matrix TensorStore::matrix(const std::string& name) const {
  const Entry& e = at(name);
  if (e.shape.size() != 2) {
    throw std::invalid_argument("TensorStore: '" + name + "' is not rank 2");
  }
  Matrix m(static_cast<Eigen::Index>(e.shape[0]), static_cast<Eigen::Index>(e.shape[1]));
  for (std::size_t i = 0; i < e.data.size(); ++i) m.data()[i] = e.data[i];
  return m;
}

Vector TensorStore::vector(const std::string& name) const {
  const Entry& e = at(name);
  if (e.shape.size() != 1) {
    throw std::invalid_argument("TensorStore: '" + name + "' is not rank 1");
  }
  Vector v(static_cast<Eigen::Index>(e.shape[0]));
  for (std::size_t i = 0; i < e.data.size(); ++i) v[static_cast<Eigen::Index>(i)] = e.data[i];
  return v;
}

double TensorStore::scalar(const std::string& name) const {
  const Entry& e = at(name);
  if (e.data.size() != 1) {
    throw std::invalid_argument("TensorStore: '" + name + "' is not a scalar");
  }
  return e.data[0];
}

std::vector<std::uint8_t> TensorStore::to_bytes() const {
  nlohmann::json header = nlohmann::json::object();
  std::size_t offset = 0;
  for (const auto& [name, entry] : entries_) {
    const std::size_t length = entry.data.size() * sizeof(float);
    header[name] = {{"dtype", "f32"},
                    {"shape", entry.shape},
                    {"byte_offset", offset},
                    {"byte_length", length}};
    offset += length;
  }
  const std::string header_text = header.dump();

  std::vector<std::uint8_t> out;
  out.reserve(8 + header_text.size() + offset);
  append_u64_le(out, header_text.size());
  out.insert(out.end(), header_text.begin(), header_text.end());
  for (const auto& [name, entry] : entries_) {
    for (float x : entry.data) append_f32_le(out, x);
  }
  return out;
}

TensorStore TensorStore::from_bytes(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) {
    throw IoError("TensorStore: truncated header length");
  }
  const std::uint64_t header_len = read_u64_le(bytes.data());
  if (header_len > bytes.size() - 8) {
    throw IoError("TensorStore: header length exceeds file size");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8,
                                   bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("TensorStore: malformed header: ") + e.what());
  }
  if (!header.is_object()) {
    throw IoError("TensorStore: header is not a JSON object");
  }
  const std::size_t blob_start = 8 + header_len;
  const std::size_t blob_size = bytes.size() - blob_start;

  TensorStore store;
  for (const auto& [name, meta] : header.items()) {
    if (meta.value("dtype", "") != "f32") {
      throw IoError("TensorStore: unsupported dtype for '" + name + "'");
    }
    const auto shape = meta.at("shape").get<std::vector<std::size_t>>();
    const auto offset = meta.at("byte_offset").get<std::size_t>();
    const auto length = meta.at("byte_length").get<std::size_t>();
    if (length != element_count(shape) * sizeof(float) || offset > blob_size ||
        length > blob_size - offset) {
      throw IoError("TensorStore: inconsistent extent for '" + name + "'");
    }
    std::vector<float> data(length / sizeof(float));
    const std::uint8_t* base = bytes.data() + blob_start + offset;
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = read_f32_le(base + 4 * i);
    store.put(name, shape, std::move(data));
  }
  return store;
}

void TensorStore::save(const std::filesystem::path& path) const {
  const auto bytes = to_bytes();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("cannot open for writing: " + path.string());
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw IoError("write failed: " + path.string());
  }
}

TensorStore TensorStore::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw MissingArtifact(path.string());
  }
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return from_bytes(bytes);
}

bool TensorStore::operator==(const TensorStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (const auto& [name, entry] : entries_) {
    auto it = other.entries_.find(name);
    if (it == other.entries_.end() || it->second.shape != entry.shape) return false;
    if (std::memcmp(entry.data.data(), it->second.data.data(), entry.data.size() * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

std::string content_hash(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace rds
