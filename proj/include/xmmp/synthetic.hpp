#pragma once

// Synthetic multimodal cohorts with planted, known-salient signals: an event
// feature pushed over a threshold, an inserted note token and a spike in one
// vital channel. Values are generated directly as z-scores.

#include <cstdint>
#include <string>

#include "json.hpp"
#include "xmmp/dataset.hpp"

namespace xmmp::data {

enum class Planting {
  // Every planted record carries all three signals.
  all,
  // Every planted record carries exactly one signal, chosen uniformly.
  complementary,
};

std::string_view planting_name(Planting p);
Planting parse_planting(std::string_view name);

struct SyntheticSpec {
  std::size_t records = 2000;
  double positive_rate = 0.1;
  // Probability that a record's planted status disagrees with its label.
  double noise_rate = 0.05;
  Planting planting = Planting::all;

  std::size_t hours = 24;
  std::size_t note_words = 32;
  std::size_t background_words = 200;
  std::size_t vital_steps = 48;

  std::string event_feature = "Glucose";
  double event_threshold = 2.5;
  std::string token = "vasopressors";
  std::string vital_channel = "HR";
  double spike_amplitude = 4.0;

  // Chance that an event feature is charted in a given hour.
  double observe_probability = 0.5;

  void validate(const NormalValueTable& table) const;
};

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

// Dataset with ground_truth holding the generator settings, the planted event column,
// token id and vitals channel, and per record the planted (modality, index)
// cells. Event indices are hour * width + column, note indices are token
// positions, vitals indices are step * channels + channel.
Dataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

}  // namespace xmmp::data
