#include "xmmp/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "xmmp/util.hpp"

namespace xmmp::data {

using ad::Tensor;

std::string_view planting_name(Planting p) { return p == Planting::all ? "all" : "complementary"; }

Planting parse_planting(std::string_view name) {
  if (name == "all") return Planting::all;
  if (name == "complementary") return Planting::complementary;
  throw std::invalid_argument("unknown planting mode '" + std::string(name) + "'");
}

void SyntheticSpec::validate(const NormalValueTable& table) const {
  if (records == 0) throw std::invalid_argument("synthetic cohort must hold at least one record");
  if (!(positive_rate > 0.0 && positive_rate < 1.0)) {
    throw std::invalid_argument("positive rate must lie strictly between 0 and 1 when signals are planted");
  }
  if (!(noise_rate >= 0.0 && noise_rate < 0.5)) throw std::invalid_argument("noise rate must lie in [0, 0.5)");
  if (hours < 3) throw std::invalid_argument("need at least 3 hours to plant the event signal");
  if (note_words < 3) throw std::invalid_argument("need at least 3 note words to plant the token");
  if (vital_steps < 3) throw std::invalid_argument("need at least 3 vital steps to plant the spike");
  if (background_words == 0) throw std::invalid_argument("background vocabulary is empty");
  if (!(observe_probability > 0.0 && observe_probability <= 1.0)) {
    throw std::invalid_argument("observe probability must lie in (0, 1]");
  }
  if (table.events.at(table.feature_index(event_feature)).categorical()) {
    throw std::invalid_argument("planted event feature must be continuous");
  }
  table.channel_index(vital_channel);
  if (token.empty() || tokenize(token) != std::vector<std::string>{token}) {
    throw std::invalid_argument("planted token must be a single lowercase word");
  }
}

void to_json(nlohmann::json& j, const SyntheticSpec& s) {
  j = {{"records", s.records},
       {"positive_rate", s.positive_rate},
       {"noise_rate", s.noise_rate},
       {"planting", planting_name(s.planting)},
       {"hours", s.hours},
       {"note_words", s.note_words},
       {"background_words", s.background_words},
       {"vital_steps", s.vital_steps},
       {"event_feature", s.event_feature},
       {"event_threshold", s.event_threshold},
       {"token", s.token},
       {"vital_channel", s.vital_channel},
       {"spike_amplitude", s.spike_amplitude},
       {"observe_probability", s.observe_probability}};
}

void from_json(const nlohmann::json& j, SyntheticSpec& s) {
  j.at("records").get_to(s.records);
  j.at("positive_rate").get_to(s.positive_rate);
  j.at("noise_rate").get_to(s.noise_rate);
  s.planting = parse_planting(j.at("planting").get<std::string>());
  j.at("hours").get_to(s.hours);
  j.at("note_words").get_to(s.note_words);
  j.at("background_words").get_to(s.background_words);
  j.at("vital_steps").get_to(s.vital_steps);
  j.at("event_feature").get_to(s.event_feature);
  j.at("event_threshold").get_to(s.event_threshold);
  j.at("token").get_to(s.token);
  j.at("vital_channel").get_to(s.vital_channel);
  j.at("spike_amplitude").get_to(s.spike_amplitude);
  j.at("observe_probability").get_to(s.observe_probability);
}

namespace {

std::string background_word(std::size_t i) {
  std::string digits = std::to_string(i);
  return "w" + std::string(digits.size() < 3 ? 3 - digits.size() : 0, '0') + digits;
}

// k distinct values from [0, n), ascending.
std::vector<std::size_t> pick_distinct(std::size_t n, std::size_t k, std::mt19937_64& rng) {
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> d(i, n - 1);
    std::swap(all[i], all[d(rng)]);
  }
  all.resize(k);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  Dataset d;
  spec.validate(d.table);
  d.normalized = true;
  std::vector<std::string> words;
  for (std::size_t i = 0; i < spec.background_words; ++i) words.push_back(background_word(i));
  words.push_back(spec.token);
  d.vocabulary = Vocabulary::from_words(words);

  const NormalValueTable& table = d.table;
  const std::size_t width = table.event_width();
  const std::size_t values = table.value_columns();
  const std::size_t features = table.events.size();
  const std::size_t channels = table.vitals.size();
  const auto offsets = table.feature_offsets();
  const std::size_t planted_feature = table.feature_index(spec.event_feature);
  const std::size_t planted_column = offsets[planted_feature];
  const std::size_t planted_channel = table.channel_index(spec.vital_channel);
  const std::int32_t planted_token = d.vocabulary.id(spec.token);

  std::mt19937_64 rng(derive_seed(seed, "synthetic"));
  std::bernoulli_distribution label_draw(spec.positive_rate), noise_draw(spec.noise_rate),
      observed(spec.observe_probability);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Zipf-like background word frequencies.
  std::vector<double> weights(spec.background_words);
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = 1.0 / (1.0 + static_cast<double>(i) / 10.0);
  std::discrete_distribution<std::size_t> word_draw(weights.begin(), weights.end());
  std::uniform_int_distribution<std::size_t> length_draw(spec.note_words / 2, spec.note_words);

  nlohmann::json planted_records = nlohmann::json::array();
  for (std::size_t n = 0; n < spec.records; ++n) {
    MultimodalRecord r;
    r.id = static_cast<std::int64_t>(n);
    r.label = label_draw(rng) ? 1 : 0;
    const bool planted = (r.label == 1) != noise_draw(rng);
    bool plant_event = planted, plant_token = planted, plant_vital = planted;
    if (planted && spec.planting == Planting::complementary) {
      const auto which = std::uniform_int_distribution<int>(0, 2)(rng);
      plant_event = which == 0;
      plant_token = which == 1;
      plant_vital = which == 2;
    }

    // Events: charted with probability observe_probability, forward filled,
    // starting from the normal value (z-score 0 or the normal category).
    r.events.values = Tensor({spec.hours, width});
    r.events.mask = Tensor({spec.hours, features});
    for (std::size_t f = 0; f < features; ++f) {
      const EventFeature& feat = table.events[f];
      std::size_t category = 0;
      if (feat.categorical()) {
        category = static_cast<std::size_t>(
            std::find(feat.categories.begin(), feat.categories.end(), feat.normal) - feat.categories.begin());
      }
      double value = 0.0;
      std::uniform_int_distribution<std::size_t> cat_draw(0, feat.categorical() ? feat.categories.size() - 1 : 0);
      for (std::size_t h = 0; h < spec.hours; ++h) {
        if (observed(rng)) {
          r.events.mask.at(h, f) = 1.0;
          r.events.values.at(h, values + f) = 1.0;
          if (feat.categorical()) {
            category = cat_draw(rng);
          } else {
            value = normal(rng);
          }
        }
        if (feat.categorical()) {
          r.events.values.at(h, offsets[f] + category) = 1.0;
        } else {
          r.events.values.at(h, offsets[f]) = value;
        }
      }
    }

    // Notes: [CLS] then Zipf background words.
    const std::size_t length = length_draw(rng);
    r.notes.ids.push_back(kClsToken);
    for (std::size_t i = 0; i < length; ++i) {
      r.notes.ids.push_back(d.vocabulary.id(background_word(word_draw(rng))));
    }

    // Vitals: AR(1) noise with unit stationary variance per channel.
    r.vitals.values = Tensor({spec.vital_steps, channels});
    for (std::size_t c = 0; c < channels; ++c) {
      double x = normal(rng);
      for (std::size_t t = 0; t < spec.vital_steps; ++t) {
        if (t > 0) x = 0.8 * x + 0.6 * normal(rng);
        r.vitals.values.at(t, c) = x;
      }
    }

    nlohmann::json cells = nlohmann::json::array();
    if (plant_event) {
      const std::size_t k = std::uniform_int_distribution<std::size_t>(3, std::min<std::size_t>(5, spec.hours))(rng);
      for (std::size_t h : pick_distinct(spec.hours, k, rng)) {
        r.events.values.at(h, planted_column) = spec.event_threshold + 0.5 + unit(rng);
        r.events.values.at(h, values + planted_feature) = 1.0;
        r.events.mask.at(h, planted_feature) = 1.0;
        cells.push_back({{"modality", "events"}, {"index", h * width + planted_column}});
      }
    }
    if (plant_token) {
      const std::size_t k = std::uniform_int_distribution<std::size_t>(1, std::min<std::size_t>(3, length))(rng);
      for (std::size_t pos : pick_distinct(length, k, rng)) {
        r.notes.ids[pos + 1] = planted_token;
        cells.push_back({{"modality", "notes"}, {"index", pos + 1}});
      }
    }
    if (plant_vital) {
      const std::size_t start = std::uniform_int_distribution<std::size_t>(0, spec.vital_steps - 3)(rng);
      for (std::size_t t = start; t < start + 3; ++t) {
        r.vitals.values.at(t, planted_channel) += spec.spike_amplitude;
        cells.push_back({{"modality", "vitals"}, {"index", t * channels + planted_channel}});
      }
    }
    planted_records.push_back({{"id", r.id}, {"planted", planted}, {"cells", std::move(cells)}});
    d.records.push_back(std::move(r));
  }

  d.ground_truth = {{"spec", spec},
                    {"seed", seed},
                    {"event_feature", spec.event_feature},
                    {"event_feature_index", planted_feature},
                    {"event_column", planted_column},
                    {"token", spec.token},
                    {"token_id", planted_token},
                    {"vital_channel", spec.vital_channel},
                    {"vital_channel_index", planted_channel},
                    {"records", std::move(planted_records)}};
  return d;
}

}  // namespace xmmp::data
