#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "xmmp/autodiff.hpp"

namespace xmmp {

std::uint32_t crc32(std::span<const unsigned char> bytes);

// Deterministic child seed for a named component of a run.
std::uint64_t derive_seed(std::uint64_t base, std::string_view component);

class ContainerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Single-file container: a magic line, a length-prefixed JSON header and a
// little-endian float64 payload. The header lists every named tensor with
// its shape and payload offset, and the CRC-32 of the payload.
struct Container {
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, ad::Tensor>> tensors;
};

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

// Version string recorded in run manifests.
std::string_view build_version();

void log_warning(std::string_view message);

}  // namespace xmmp
