#include "bedseg/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <unordered_set>

namespace bedseg {

namespace {

constexpr char kMagic[4] = {'B', 'E', 'D', 'T'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

struct Reader {
  std::string_view bytes;
  std::size_t pos = 0;

  void need(std::size_t n) {
    if (pos + n > bytes.size()) throw LengthError("checkpoint: truncated stream");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes[pos++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  std::string_view span(std::size_t n) {
    need(n);
    auto s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

template <typename S>
void put_values(std::string& out, const Tensor<S>& t, const std::string& name) {
  using Bits = std::conditional_t<sizeof(S) == 4, std::uint32_t, std::uint64_t>;
  for (S v : t.data) {
    if (!std::isfinite(static_cast<double>(v)))
      throw std::invalid_argument("checkpoint: non-finite value in tensor " + name);
    const Bits b = std::bit_cast<Bits>(v);
    if constexpr (sizeof(S) == 4)
      put_u32(out, b);
    else
      put_u64(out, b);
  }
}

template <typename S>
Tensor<S> read_values(Reader& r, std::vector<std::size_t> dims, const std::string& name) {
  using Bits = std::conditional_t<sizeof(S) == 4, std::uint32_t, std::uint64_t>;
  Tensor<S> t(std::move(dims));
  for (std::size_t i = 0; i < t.size(); ++i) {
    Bits b;
    if constexpr (sizeof(S) == 4)
      b = r.u32();
    else
      b = r.u64();
    t.data[i] = std::bit_cast<S>(b);
    if (!std::isfinite(static_cast<double>(t.data[i])))
      throw FormatError("checkpoint: non-finite value in tensor " + name);
  }
  return t;
}

}  // namespace

TensorEntry* Checkpoint::find(std::string_view name) {
  for (auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

const TensorEntry* Checkpoint::find(std::string_view name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

std::string checkpoint_to_bytes(const Checkpoint& ckpt) {
  std::unordered_set<std::string_view> seen;
  for (const auto& e : ckpt.entries)
    if (!seen.insert(e.name).second)
      throw std::invalid_argument("checkpoint: duplicate tensor name " + e.name);

  std::string out;
  out.append(kMagic, 4);
  put_u32(out, ckpt.version);
  put_u32(out, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out.append(e.name);
    std::visit(
        [&](const auto& t) {
          using S = typename std::decay_t<decltype(t.data)>::value_type;
          if (t.rank() == 0) throw std::invalid_argument("checkpoint: rank-0 tensor " + e.name);
          out.push_back(sizeof(S) == 4 ? '\x00' : '\x01');  // dtype tag 0=f32, 1=f64
          put_u32(out, static_cast<std::uint32_t>(t.rank()));
          for (auto d : t.dims) put_u64(out, d);
          put_values(out, t, e.name);
        },
        e.tensor);
  }
  return out;
}

Checkpoint checkpoint_from_bytes(std::string_view bytes) {
  Reader r{bytes};
  const auto magic = r.span(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("checkpoint: bad magic");

  Checkpoint ckpt;
  ckpt.version = r.u32();
  const std::uint32_t count = r.u32();
  ckpt.entries.reserve(count);
  std::unordered_set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    std::string name(r.span(name_len));
    if (!seen.insert(name).second) throw FormatError("checkpoint: duplicate tensor name " + name);
    const std::uint8_t dtype = r.u8();
    if (dtype > 1) throw DtypeError("checkpoint: unknown dtype tag " + std::to_string(dtype));
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 32) throw FormatError("checkpoint: bad rank for tensor " + name);
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims) d = static_cast<std::size_t>(r.u64());
    TensorEntry entry;
    entry.name = std::move(name);
    if (dtype == 0)
      entry.tensor = read_values<float>(r, std::move(dims), entry.name);
    else
      entry.tensor = read_values<double>(r, std::move(dims), entry.name);
    ckpt.entries.push_back(std::move(entry));
  }
  if (r.pos != bytes.size()) throw LengthError("checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const std::string bytes = checkpoint_to_bytes(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return checkpoint_from_bytes(bytes);
}

}  // namespace bedseg
