#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include "xmmp/autodiff.hpp"

namespace xmmp {

// Reserved note-token ids.
inline constexpr std::int32_t kPadToken = 0;
inline constexpr std::int32_t kClsToken = 1;
inline constexpr std::int32_t kUnkToken = 2;

// Hourly event grid. `values` is the model input (L x D) and already holds
// the missingness-mask columns; `mask` keeps the per-feature observed flags
// (L x F) for inspection.
struct EventSequence {
  ad::Tensor values;
  ad::Tensor mask;
};

// [CLS] followed by word ids, optionally trailed by [PAD].
struct NoteTokens {
  std::vector<std::int32_t> ids;
};

// (M timesteps x N channels).
struct VitalSigns {
  ad::Tensor values;
};

struct MultimodalRecord {
  std::int64_t id = 0;
  EventSequence events;
  NoteTokens notes;
  VitalSigns vitals;
  int label = 0;
};

enum class Modality : std::uint8_t { events = 0, notes = 1, vitals = 2 };

inline constexpr std::array<Modality, 3> kAllModalities{Modality::events, Modality::notes, Modality::vitals};

std::string_view modality_name(Modality m);
Modality parse_modality(std::string_view name);

// Bitmask over the three modalities.
class ModalitySet {
 public:
  constexpr ModalitySet() = default;
  static constexpr ModalitySet all() { return ModalitySet(0b111); }
  static constexpr ModalitySet from_bits(std::uint8_t bits) { return ModalitySet(bits & 0b111); }
  static constexpr ModalitySet of(std::initializer_list<Modality> ms) {
    std::uint8_t b = 0;
    for (Modality m : ms) b |= static_cast<std::uint8_t>(1u << static_cast<unsigned>(m));
    return ModalitySet(b);
  }
  constexpr bool contains(Modality m) const { return bits_ & (1u << static_cast<unsigned>(m)); }
  constexpr std::size_t count() const { return (bits_ & 1u) + ((bits_ >> 1) & 1u) + ((bits_ >> 2) & 1u); }
  constexpr std::uint8_t bits() const { return bits_; }
  constexpr bool operator==(const ModalitySet&) const = default;

 private:
  constexpr explicit ModalitySet(std::uint8_t bits) : bits_(bits) {}
  std::uint8_t bits_ = 0;
};

// "events+notes" style label.
std::string modality_set_name(ModalitySet set);
ModalitySet parse_modality_set(std::string_view text);

}  // namespace xmmp
