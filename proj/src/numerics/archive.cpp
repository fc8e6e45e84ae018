#include "deshadow/numerics/archive.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

#include "deshadow/errors.hpp"

namespace deshadow {

namespace {

constexpr char kMagic[8] = {'D', 'S', 'H', 'W', 'A', 'R', 'C', 'H'};

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::uint8_t bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.insert(out.end(), bytes, bytes + sizeof(T));
}

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, const std::string& context) : bytes_(bytes), context_(context) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint8_t bytes[sizeof(T)];
    std::memcpy(bytes, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
  }

  std::string string(std::uint64_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), static_cast<std::size_t>(n));
    pos_ += static_cast<std::size_t>(n);
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

  [[noreturn]] void fail(const std::string& what) const { throw IoError(context_ + ": " + what); }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) fail("truncated data");
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::string context_;
};

}  // namespace

const Tensor* Archive::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t.value;
  return nullptr;
}

std::vector<std::uint8_t> serialize_archive(const Archive& archive) {
  std::vector<std::uint8_t> out(kMagic, kMagic + sizeof(kMagic));
  put<std::uint32_t>(out, Archive::kVersion);
  put<std::uint64_t>(out, archive.header_json.size());
  out.insert(out.end(), archive.header_json.begin(), archive.header_json.end());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(archive.tensors.size()));
  for (const auto& [name, value] : archive.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint32_t>(out, static_cast<std::uint32_t>(value.rank()));
    for (auto d : value.shape()) put<std::uint64_t>(out, d);
    for (double v : value.data()) put<double>(out, v);
  }
  return out;
}

Archive parse_archive(std::span<const std::uint8_t> bytes, const std::string& context) {
  Reader in(bytes, context);
  if (in.string(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) in.fail("bad magic, not an archive");
  const auto version = in.get<std::uint32_t>();
  if (version != Archive::kVersion) in.fail("unsupported archive version " + std::to_string(version));
  Archive archive;
  archive.header_json = in.string(in.get<std::uint64_t>());
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor t;
    t.name = in.string(in.get<std::uint32_t>());
    const auto rank = in.get<std::uint32_t>();
    if (rank > 8) in.fail("implausible rank for '" + t.name + "'");
    Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& d : shape) {
      d = in.get<std::uint64_t>();
      n *= d;
      if (n > (std::uint64_t{1} << 32)) in.fail("implausible size for '" + t.name + "'");
    }
    std::vector<double> data(static_cast<std::size_t>(n));
    for (auto& v : data) v = in.get<double>();
    t.value = Tensor(std::move(shape), std::move(data));
    archive.tensors.push_back(std::move(t));
  }
  if (!in.done()) in.fail("trailing bytes after last blob");
  return archive;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for " + path.string());
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  write_file_bytes(path, serialize_archive(archive));
}

Archive read_archive(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_archive(bytes, path.string());
}

}  // namespace deshadow
