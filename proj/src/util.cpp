#include "xmmp/util.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iostream>

#include <zlib.h>

#include "xmmp/record.hpp"

namespace xmmp {

namespace {

constexpr std::string_view kMagic = "XMMP-CONTAINER\n";

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(const unsigned char* b) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void append_le(std::vector<unsigned char>& out, double d) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(bits >> (8 * i)));
}

}  // namespace

std::uint32_t crc32(std::span<const unsigned char> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = ::crc32(crc, bytes.data() + off, chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view component) {
  // FNV-1a over the component name, mixed with the base seed.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : component) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::uint64_t state = base ^ h;
  return splitmix64(state);
}

void write_container(const std::filesystem::path& path, const Container& c) {
  std::vector<unsigned char> payload;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& [name, t] : c.tensors) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}});
    for (double v : t.values()) append_le(payload, v);
  }
  nlohmann::json header = c.header;
  header["tensors"] = std::move(index);
  header["payload_bytes"] = payload.size();
  header["payload_crc32"] = crc32(payload);
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ContainerError("cannot open '" + path.string() + "' for writing");
  os.write(kMagic.data(), static_cast<std::streamsize>(kMagic.size()));
  put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!os) throw ContainerError("write to '" + path.string() + "' failed");
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContainerError("cannot open '" + path.string() + "'");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::string where = " in '" + path.string() + "'";
  if (bytes.size() < kMagic.size() + 8 || std::memcmp(bytes.data(), kMagic.data(), kMagic.size()) != 0) {
    throw ContainerError("not an xmmp container" + where);
  }
  const std::uint64_t header_len = get_u64(bytes.data() + kMagic.size());
  const std::size_t header_start = kMagic.size() + 8;
  if (bytes.size() < header_start + header_len) throw ContainerError("truncated header" + where);

  Container c;
  try {
    c.header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(header_start),
                                     bytes.begin() + static_cast<std::ptrdiff_t>(header_start + header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ContainerError(std::string("malformed header") + where + ": " + e.what());
  }
  const std::size_t payload_start = header_start + header_len;
  const auto payload_bytes = c.header.at("payload_bytes").get<std::size_t>();
  if (bytes.size() < payload_start + payload_bytes) throw ContainerError("truncated payload" + where);
  if (bytes.size() > payload_start + payload_bytes) throw ContainerError("trailing bytes after payload" + where);
  std::span<const unsigned char> payload(bytes.data() + payload_start, payload_bytes);
  if (crc32(payload) != c.header.at("payload_crc32").get<std::uint32_t>()) {
    throw ContainerError("checksum mismatch" + where);
  }
  for (const auto& entry : c.header.at("tensors")) {
    auto shape = entry.at("shape").get<ad::Shape>();
    const auto offset = entry.at("offset").get<std::size_t>();
    const std::size_t n = ad::element_count(shape);
    if (offset + 8 * n > payload.size()) throw ContainerError("tensor extends past payload" + where);
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      values[i] = std::bit_cast<double>(get_u64(payload.data() + offset + 8 * i));
    }
    c.tensors.emplace_back(entry.at("name").get<std::string>(), ad::Tensor(std::move(shape), std::move(values)));
  }
  c.header.erase("tensors");
  c.header.erase("payload_bytes");
  c.header.erase("payload_crc32");
  return c;
}

std::string_view build_version() { return "xmmp 0.1.0"; }

void log_warning(std::string_view message) { std::cerr << "warning: " << message << '\n'; }

// ---- record.hpp helpers --------------------------------------------------------

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::events: return "events";
    case Modality::notes: return "notes";
    case Modality::vitals: return "vitals";
  }
  return "unknown";
}

Modality parse_modality(std::string_view name) {
  for (Modality m : kAllModalities) {
    if (modality_name(m) == name) return m;
  }
  throw std::invalid_argument("unknown modality '" + std::string(name) + "'");
}

std::string modality_set_name(ModalitySet set) {
  std::string out;
  for (Modality m : kAllModalities) {
    if (!set.contains(m)) continue;
    if (!out.empty()) out += '+';
    out += modality_name(m);
  }
  return out.empty() ? "none" : out;
}

ModalitySet parse_modality_set(std::string_view text) {
  if (text == "all") return ModalitySet::all();
  std::uint8_t bits = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t plus = text.find('+', start);
    const std::string_view part = text.substr(start, plus == std::string_view::npos ? text.npos : plus - start);
    const Modality m = parse_modality(part);
    bits |= static_cast<std::uint8_t>(1u << static_cast<unsigned>(m));
    if (plus == std::string_view::npos) break;
    start = plus + 1;
  }
  return ModalitySet::from_bits(bits);
}

}  // namespace xmmp
