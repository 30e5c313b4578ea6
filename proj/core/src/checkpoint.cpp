#include "midl/checkpoint.hpp"

#include <bit>
#include <filesystem>
#include <fstream>

namespace midl {

namespace {

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<uint64_t>(v)); }

struct Cursor {
  std::string_view bytes;
  size_t pos = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw ParseError("checkpoint parse error at byte " + std::to_string(pos) + ": " + what);
  }

  void need(size_t n, const char* what) const {
    if (bytes.size() - pos < n)
      fail(std::string("truncated ") + what + " (need " + std::to_string(n) +
           " bytes, " + std::to_string(bytes.size() - pos) + " left)");
  }

  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }

  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }

  std::string_view raw(size_t n, const char* what) {
    need(n, what);
    std::string_view v = bytes.substr(pos, n);
    pos += n;
    return v;
  }

  bool done() const { return pos == bytes.size(); }
};

constexpr uint32_t kMaxNameLen = 1u << 16;
constexpr uint32_t kMaxRank = 8;
constexpr uint64_t kMaxNumel = uint64_t{1} << 33;  // 64 GiB of doubles, far past sane

}  // namespace

std::string serialize_tensors(
    const std::vector<std::pair<std::string, Tensor>>& tensors,
    std::string_view magic) {
  if (magic.size() != 4) throw ContractError("checkpoint magic must be 4 bytes");
  std::string out;
  out.append(magic);
  put_u32(out, kCheckpointVersion);
  for (const auto& [name, t] : tensors) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out.append(name);
    const Shape& s = t.shape();
    put_u32(out, static_cast<uint32_t>(s.size()));
    for (int64_t d : s) put_u64(out, static_cast<uint64_t>(d));
    for (double v : t.data()) put_f64(out, v);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> parse_tensors(
    std::string_view bytes, std::string_view expected_magic) {
  Cursor c{bytes};
  std::string_view magic = c.raw(4, "magic");
  if (magic != expected_magic)
    throw ParseError("checkpoint parse error at byte 0: magic \"" + std::string(magic) +
                     "\" (expected \"" + std::string(expected_magic) + "\")");
  uint32_t version = c.u32("version");
  if (version != kCheckpointVersion)
    c.fail("unsupported version " + std::to_string(version));

  std::vector<std::pair<std::string, Tensor>> out;
  while (!c.done()) {
    uint32_t name_len = c.u32("record name length");
    if (name_len == 0 || name_len > kMaxNameLen)
      c.fail("implausible name length " + std::to_string(name_len));
    std::string name(c.raw(name_len, "record name"));
    uint32_t rank = c.u32("record rank");
    if (rank == 0 || rank > kMaxRank) c.fail("implausible rank " + std::to_string(rank));
    Shape shape(rank);
    uint64_t numel = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      uint64_t d = c.u64("record dims");
      if (d == 0 || d > kMaxNumel || numel > kMaxNumel / d)
        c.fail("implausible tensor size in \"" + name + "\"");
      numel *= d;
      shape[i] = static_cast<int64_t>(d);
    }
    std::string_view payload = c.raw(static_cast<size_t>(numel) * 8, "record payload");
    std::vector<double> values(numel);
    for (uint64_t i = 0; i < numel; ++i) {
      uint64_t bits = 0;
      for (int b = 0; b < 8; ++b)
        bits |= static_cast<uint64_t>(static_cast<unsigned char>(payload[i * 8 + b]))
                << (8 * b);
      values[i] = std::bit_cast<double>(bits);
    }
    out.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(values)));
  }
  return out;
}

void write_file_atomic(const std::string& path, std::string_view contents) {
  std::filesystem::path target(path);
  if (target.has_parent_path()) std::filesystem::create_directories(target.parent_path());
  std::filesystem::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open for writing: " + tmp.string());
    f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!f) throw DataError("short write: " + tmp.string());
  }
  std::filesystem::rename(tmp, target);
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (f.bad()) throw DataError("read failure: " + path);
  return bytes;
}

void save_tensors(const std::string& path,
                  const std::vector<std::pair<std::string, Tensor>>& tensors,
                  std::string_view magic) {
  write_file_atomic(path, serialize_tensors(tensors, magic));
}

std::vector<std::pair<std::string, Tensor>> load_tensors(const std::string& path,
                                                         std::string_view expected_magic) {
  return parse_tensors(read_file(path), expected_magic);
}

}  // namespace midl
