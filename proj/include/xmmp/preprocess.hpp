#pragma once

// Per-stay preprocessing of raw ICU exports into model records: hourly event
// grids with missingness masks, cleaned note token ids and 3-minute vital
// sign grids. Statistics for z-normalisation are fitted on training records
// only and applied afterwards.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "xmmp/record.hpp"

namespace xmmp::data {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A stay dropped by a quality rule, as opposed to malformed input.
class RecordRejected : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- feature tables ----------------------------------------------------------------

struct EventFeature {
  std::string name;
  // Empty for continuous features.
  std::vector<std::string> categories;
  // Number for continuous features, category string otherwise.
  std::string normal;

  bool categorical() const { return !categories.empty(); }
  std::size_t width() const { return categorical() ? categories.size() : 1; }
};

struct VitalChannel {
  std::string name;
  double normal = 0.0;
};

struct NormalValueTable {
  std::vector<EventFeature> events;
  std::vector<VitalChannel> vitals;

  // 17 event features (76 input columns) and 21 vital channels.
  static NormalValueTable defaults();
  static NormalValueTable load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  static NormalValueTable from_json(const nlohmann::json& j);

  // Value columns plus one mask column per feature.
  std::size_t event_width() const;
  std::size_t value_columns() const;
  // First value column of each feature.
  std::vector<std::size_t> feature_offsets() const;
  // Named feature owning each input column (mask columns included).
  std::vector<std::size_t> column_feature() const;
  std::vector<std::string> column_names() const;
  std::size_t feature_index(std::string_view name) const;
  std::size_t channel_index(std::string_view name) const;
};

// ---- events -------------------------------------------------------------------------

struct RawEventRow {
  std::int64_t stay_id = 0;
  // Hours since ICU admission.
  double time = 0.0;
  std::string feature;
  std::string value;
};

struct EventOptions {
  std::size_t hours = 24;
};

// Hourly grid (hours x event_width) of raw (unnormalised) values: latest
// observation per hour, forward fill, normal values before the first
// observation, one-hot categoricals, mask columns last.
EventSequence preprocess_events(std::span<const RawEventRow> rows, const NormalValueTable& table,
                                const EventOptions& options = {});

// Observed cells of a grid as raw rows (inverse of preprocess_events on the
// observed cells). Times fall at the start of each hour.
std::vector<RawEventRow> event_rows_from_grid(const EventSequence& grid, const NormalValueTable& table,
                                              std::int64_t stay_id = 0);

// ---- notes --------------------------------------------------------------------------

struct RawNote {
  std::int64_t stay_id = 0;
  double time = 0.0;
  std::string text;
  std::string category;
  bool is_error = false;
};

struct NoteOptions {
  double window_hours = 24.0;
  std::size_t max_words = 512;
  // Words naming the prediction target, removed before tokenisation.
  std::vector<std::string> stoplist = default_stoplist();

  static std::vector<std::string> default_stoplist();
};

// Lowercased word tokens of one text: de-identification placeholders and
// special characters removed, split on whitespace and punctuation.
std::vector<std::string> tokenize(std::string_view text);

// Words of the stay's notes in time order after cleaning and stoplist
// removal, keeping the last max_words.
std::vector<std::string> clean_notes(std::span<const RawNote> notes, const NoteOptions& options = {});

class Vocabulary {
 public:
  // Reserved entries only.
  Vocabulary();
  // Words with at least min_count occurrences, most frequent first, ties
  // alphabetical.
  static Vocabulary build(std::span<const std::vector<std::string>> documents, std::size_t min_count = 2);
  static Vocabulary from_words(std::vector<std::string> words);

  std::size_t size() const { return words_.size(); }
  std::int32_t id(std::string_view word) const;
  const std::string& word(std::int32_t id) const;
  const std::vector<std::string>& words() const { return words_; }
  // [CLS] followed by the word ids; unknown words map to [UNK].
  NoteTokens encode(std::span<const std::string> words) const;

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::int32_t> index_;
};

// ---- vitals -------------------------------------------------------------------------

struct VitalSample {
  std::int64_t stay_id = 0;
  std::string channel;
  double time = 0.0;
  double value = 0.0;
};

struct VitalOptions {
  double window_hours = 24.0;
  double bin_minutes = 3.0;
  double max_missing_fraction = 0.5;

  std::size_t bins() const;
};

// (bins x channels) grid of the last sample per bin, forward filled with
// normal values before the first sample. Throws RecordRejected when any
// channel has more than max_missing_fraction empty bins.
VitalSigns preprocess_vitals(std::span<const VitalSample> samples, const NormalValueTable& table,
                             const VitalOptions& options = {});

// ---- normalisation ----------------------------------------------------------------

// Per-column z-normalisation for the continuous event columns and every
// vital channel. A zero standard deviation maps the column to zero.
struct Normalizer {
  std::vector<std::size_t> event_columns;
  std::vector<double> event_mean, event_std;
  std::vector<double> vital_mean, vital_std;

  static Normalizer fit(std::span<const MultimodalRecord> train, const NormalValueTable& table);
  void apply(MultimodalRecord& record) const;
  nlohmann::json to_json() const;
  static Normalizer from_json(const nlohmann::json& j);
};

// ---- matching -----------------------------------------------------------------------

struct StayModalities {
  std::vector<std::pair<std::int64_t, EventSequence>> events;
  std::vector<std::pair<std::int64_t, NoteTokens>> notes;
  std::vector<std::pair<std::int64_t, VitalSigns>> vitals;
  std::map<std::int64_t, int> labels;
};

struct MatchResult {
  std::vector<MultimodalRecord> records;
  // Stay ids present in some modality but not all (or without a label).
  std::vector<std::int64_t> unmatched;
};

// Inner join on stay id, ordered by id. Throws DataError on a duplicate id
// within one modality.
MatchResult match_modalities(StayModalities stays);

// ---- raw readers --------------------------------------------------------------------

// events CSV: stay_id,time,feature,value
std::vector<RawEventRow> read_event_csv(const std::filesystem::path& path);
// notes JSONL: {"stay_id","time","text","category","iserror"}
std::vector<RawNote> read_notes_jsonl(const std::filesystem::path& path);
// vitals CSV: stay_id,channel,time,value
std::vector<VitalSample> read_vitals_csv(const std::filesystem::path& path);
// labels CSV: stay_id,label
std::map<std::int64_t, int> read_labels_csv(const std::filesystem::path& path);

// Splits one CSV line, honouring double quotes.
std::vector<std::string> split_csv_line(std::string_view line);

}  // namespace xmmp::data
