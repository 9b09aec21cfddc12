#include "xmmp/preprocess.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "xmmp/util.hpp"

namespace xmmp::data {

using ad::Tensor;

namespace {

std::optional<double> parse_number(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  if (!s.empty() && s.front() == '+') s.remove_prefix(1);
  if (s.empty()) return std::nullopt;
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

std::string format_number(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

// Category index of a raw value: exact match, then numeric equality.
std::size_t category_index(const EventFeature& f, std::string_view value) {
  for (std::size_t c = 0; c < f.categories.size(); ++c) {
    if (f.categories[c] == value) return c;
  }
  if (const auto v = parse_number(value)) {
    for (std::size_t c = 0; c < f.categories.size(); ++c) {
      const auto cv = parse_number(f.categories[c]);
      if (cv && *cv == *v) return c;
    }
  }
  throw DataError("unparseable value '" + std::string(value) + "' for categorical feature '" + f.name + "'");
}

double continuous_value(const EventFeature& f, std::string_view value) {
  const auto v = parse_number(value);
  if (!v) throw DataError("unparseable value '" + std::string(value) + "' for feature '" + f.name + "'");
  return *v;
}

std::ifstream open_input(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open '" + path.string() + "'");
  return is;
}

std::int64_t parse_id(const std::string& s, const std::filesystem::path& path, std::size_t line) {
  const auto v = parse_number(s);
  if (!v || *v != std::floor(*v)) {
    throw DataError(path.string() + ":" + std::to_string(line) + ": bad stay id '" + s + "'");
  }
  return static_cast<std::int64_t>(*v);
}

double parse_field(const std::string& s, const std::filesystem::path& path, std::size_t line, const char* what) {
  const auto v = parse_number(s);
  if (!v) throw DataError(path.string() + ":" + std::to_string(line) + ": bad " + what + " '" + s + "'");
  return *v;
}

// Reads CSV records with the given column count, skipping a header line
// that starts with "stay_id".
template <typename F>
void for_each_csv_row(const std::filesystem::path& path, std::size_t columns, F&& f) {
  auto is = open_input(path);
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    if (n == 1 && !fields.empty() && fields[0] == "stay_id") continue;
    if (fields.size() != columns) {
      throw DataError(path.string() + ":" + std::to_string(n) + ": expected " + std::to_string(columns) +
                      " fields, got " + std::to_string(fields.size()));
    }
    f(fields, n);
  }
}

}  // namespace

// ---- feature tables ----------------------------------------------------------------

NormalValueTable NormalValueTable::defaults() {
  NormalValueTable t;
  auto cont = [&](std::string name, std::string normal) { t.events.push_back({std::move(name), {}, std::move(normal)}); };
  auto cat = [&](std::string name, std::vector<std::string> cats, std::string normal) {
    t.events.push_back({std::move(name), std::move(cats), std::move(normal)});
  };
  cat("Capillary refill rate", {"0.0", "1.0"}, "0.0");
  cont("Diastolic blood pressure", "59.0");
  cont("Fraction inspired oxygen", "0.21");
  cat("Glascow coma scale eye opening",
      {"To Pain", "3 To speech", "1 No Response", "4 Spontaneously", "None", "To Speech", "Spontaneously",
       "2 To pain"},
      "4 Spontaneously");
  cat("Glascow coma scale motor response",
      {"1 No Response", "3 Abnorm flexion", "Abnormal extension", "No response", "4 Flex-withdraws",
       "Localizes Pain", "Flex-withdraws", "Obeys Commands", "Abnormal Flexion", "6 Obeys Commands",
       "5 Localizes Pain", "2 Abnorm extensn"},
      "6 Obeys Commands");
  cat("Glascow coma scale total", {"11", "10", "13", "12", "15", "14", "3", "5", "4", "7", "6", "9", "8"}, "15");
  cat("Glascow coma scale verbal response",
      {"1 No Response", "No Response", "Confused", "Inappropriate Words", "Oriented", "No Response-ETT",
       "5 Oriented", "Incomprehensible sounds", "1.0 ET/Trach", "4 Confused", "2 Incomp sounds",
       "3 Inapprop words"},
      "5 Oriented");
  cont("Glucose", "128.0");
  cont("Heart Rate", "86");
  cont("Height", "170.0");
  cont("Mean blood pressure", "77.0");
  cont("Oxygen saturation", "98.0");
  cont("Respiratory rate", "19");
  cont("Systolic blood pressure", "118.0");
  cont("Temperature", "36.6");
  cont("Weight", "81.0");
  cont("pH", "7.4");

  const std::vector<std::pair<std::string, double>> vitals{
      {"HR", 86.0},      {"PULSE", 86.0},   {"SpO2", 98.0},   {"RESP", 19.0},   {"ABPSys", 118.0},
      {"ABPDias", 59.0}, {"ABPMean", 77.0}, {"NBPSys", 118.0}, {"NBPDias", 59.0}, {"NBPMean", 77.0},
      {"PAPSys", 25.0},  {"PAPDias", 10.0}, {"PAPMean", 15.0}, {"CVP", 8.0},      {"CO", 5.0},
      {"CI", 3.0},       {"Temp", 36.6},    {"ST II", 0.0},   {"ST V", 0.0},     {"PVC Rate", 0.0},
      {"ICP", 10.0}};
  for (const auto& [name, normal] : vitals) t.vitals.push_back({name, normal});
  return t;
}

nlohmann::json NormalValueTable::to_json() const {
  nlohmann::json j;
  j["events"] = nlohmann::json::array();
  for (const auto& f : events) {
    nlohmann::json e = {{"name", f.name}, {"normal", f.normal}};
    if (f.categorical()) e["categories"] = f.categories;
    j["events"].push_back(std::move(e));
  }
  j["vitals"] = nlohmann::json::array();
  for (const auto& c : vitals) j["vitals"].push_back({{"name", c.name}, {"normal", c.normal}});
  return j;
}

NormalValueTable NormalValueTable::from_json(const nlohmann::json& j) {
  NormalValueTable t;
  try {
    for (const auto& e : j.at("events")) {
      EventFeature f;
      f.name = e.at("name").get<std::string>();
      f.categories = e.value("categories", std::vector<std::string>{});
      f.normal = e.at("normal").get<std::string>();
      if (f.categorical()) {
        category_index(f, f.normal);
      } else {
        continuous_value(f, f.normal);
      }
      t.events.push_back(std::move(f));
    }
    for (const auto& c : j.at("vitals")) t.vitals.push_back({c.at("name").get<std::string>(), c.at("normal")});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad normal-value table: ") + e.what());
  }
  if (t.events.empty() || t.vitals.empty()) throw DataError("normal-value table lists no features");
  return t;
}

NormalValueTable NormalValueTable::load(const std::filesystem::path& path) {
  auto is = open_input(path);
  try {
    return from_json(nlohmann::json::parse(is));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("cannot parse '" + path.string() + "': " + e.what());
  }
}

std::size_t NormalValueTable::value_columns() const {
  std::size_t n = 0;
  for (const auto& f : events) n += f.width();
  return n;
}

std::size_t NormalValueTable::event_width() const { return value_columns() + events.size(); }

std::vector<std::size_t> NormalValueTable::feature_offsets() const {
  std::vector<std::size_t> off;
  std::size_t o = 0;
  for (const auto& f : events) {
    off.push_back(o);
    o += f.width();
  }
  return off;
}

std::vector<std::size_t> NormalValueTable::column_feature() const {
  std::vector<std::size_t> owner;
  for (std::size_t f = 0; f < events.size(); ++f) owner.insert(owner.end(), events[f].width(), f);
  for (std::size_t f = 0; f < events.size(); ++f) owner.push_back(f);
  return owner;
}

std::vector<std::string> NormalValueTable::column_names() const {
  std::vector<std::string> names;
  for (const auto& f : events) {
    if (!f.categorical()) {
      names.push_back(f.name);
    } else {
      for (const auto& c : f.categories) names.push_back(f.name + "->" + c);
    }
  }
  for (const auto& f : events) names.push_back("mask->" + f.name);
  return names;
}

std::size_t NormalValueTable::feature_index(std::string_view name) const {
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (events[i].name == name) return i;
  }
  throw DataError("unknown feature name '" + std::string(name) + "'");
}

std::size_t NormalValueTable::channel_index(std::string_view name) const {
  for (std::size_t i = 0; i < vitals.size(); ++i) {
    if (vitals[i].name == name) return i;
  }
  throw DataError("unknown vital channel '" + std::string(name) + "'");
}

// ---- events -------------------------------------------------------------------------

EventSequence preprocess_events(std::span<const RawEventRow> rows, const NormalValueTable& table,
                                const EventOptions& options) {
  const std::size_t hours = options.hours;
  const std::size_t features = table.events.size();
  if (hours == 0) throw std::invalid_argument("event window must cover at least one hour");

  // Latest in-window observation per (hour, feature).
  struct Obs {
    double time;
    std::size_t order;
    const std::string* value;
  };
  std::vector<std::optional<Obs>> latest(hours * features);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const std::size_t f = table.feature_index(r.feature);
    if (!(r.time >= 0.0) || r.time >= static_cast<double>(hours)) continue;
    const auto h = static_cast<std::size_t>(std::floor(r.time));
    auto& slot = latest[h * features + f];
    if (!slot || r.time >= slot->time) slot = Obs{r.time, i, &r.value};
  }

  const auto offsets = table.feature_offsets();
  const std::size_t values = table.value_columns();
  EventSequence seq;
  seq.values = Tensor({hours, table.event_width()});
  seq.mask = Tensor({hours, features});
  for (std::size_t f = 0; f < features; ++f) {
    const EventFeature& feat = table.events[f];
    std::string_view current = feat.normal;
    for (std::size_t h = 0; h < hours; ++h) {
      if (const auto& obs = latest[h * features + f]) {
        current = *obs->value;
        seq.mask.at(h, f) = 1.0;
        seq.values.at(h, values + f) = 1.0;
      }
      if (feat.categorical()) {
        seq.values.at(h, offsets[f] + category_index(feat, current)) = 1.0;
      } else {
        seq.values.at(h, offsets[f]) = continuous_value(feat, current);
      }
    }
  }
  return seq;
}

std::vector<RawEventRow> event_rows_from_grid(const EventSequence& grid, const NormalValueTable& table,
                                              std::int64_t stay_id) {
  const auto offsets = table.feature_offsets();
  std::vector<RawEventRow> rows;
  const std::size_t hours = grid.values.dim(0);
  for (std::size_t h = 0; h < hours; ++h) {
    for (std::size_t f = 0; f < table.events.size(); ++f) {
      if (grid.mask.at(h, f) != 1.0) continue;
      const EventFeature& feat = table.events[f];
      RawEventRow r{stay_id, static_cast<double>(h), feat.name, {}};
      if (feat.categorical()) {
        for (std::size_t c = 0; c < feat.categories.size(); ++c) {
          if (grid.values.at(h, offsets[f] + c) == 1.0) r.value = feat.categories[c];
        }
      } else {
        r.value = format_number(grid.values.at(h, offsets[f]));
      }
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

// ---- notes --------------------------------------------------------------------------

std::vector<std::string> NoteOptions::default_stoplist() {
  return {"die",      "died",   "dies",   "dying",     "death",    "deaths",  "dead",
          "deceased", "expire", "expired", "expiring", "mortality", "morgue"};
}

std::vector<std::string> tokenize(std::string_view text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (std::size_t i = 0; i < text.size();) {
    // De-identification placeholders look like [**Hospital 123**].
    if (text.compare(i, 3, "[**") == 0) {
      const std::size_t close = text.find("**]", i + 3);
      if (close != std::string_view::npos) {
        cleaned.push_back(' ');
        i = close + 3;
        continue;
      }
    }
    const auto c = static_cast<unsigned char>(text[i]);
    cleaned.push_back(std::isalnum(c) ? static_cast<char>(std::tolower(c)) : ' ');
    ++i;
  }
  std::vector<std::string> words;
  std::istringstream is(cleaned);
  for (std::string w; is >> w;) words.push_back(std::move(w));
  return words;
}

std::vector<std::string> clean_notes(std::span<const RawNote> notes, const NoteOptions& options) {
  std::vector<const RawNote*> kept;
  for (const auto& n : notes) {
    if (n.is_error || !(n.time >= 0.0) || n.time > options.window_hours) continue;
    kept.push_back(&n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const RawNote* a, const RawNote* b) { return a->time < b->time; });
  const std::set<std::string, std::less<>> stop(options.stoplist.begin(), options.stoplist.end());
  std::vector<std::string> words;
  for (const RawNote* n : kept) {
    for (auto& w : tokenize(n->text)) {
      if (!stop.contains(w)) words.push_back(std::move(w));
    }
  }
  if (words.size() > options.max_words) {
    words.erase(words.begin(), words.end() - static_cast<std::ptrdiff_t>(options.max_words));
  }
  return words;
}

Vocabulary::Vocabulary() : words_{"[PAD]", "[CLS]", "[UNK]"}, index_{{"[PAD]", 0}, {"[CLS]", 1}, {"[UNK]", 2}} {}

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
  Vocabulary v;
  v.index_.clear();
  for (auto& w : words) {
    if (w == "[PAD]" || w == "[CLS]" || w == "[UNK]") continue;
    v.words_.push_back(std::move(w));
  }
  for (std::size_t i = 0; i < v.words_.size(); ++i) {
    if (!v.index_.emplace(v.words_[i], static_cast<std::int32_t>(i)).second) {
      throw DataError("duplicate vocabulary word '" + v.words_[i] + "'");
    }
  }
  return v;
}

Vocabulary Vocabulary::build(std::span<const std::vector<std::string>> documents, std::size_t min_count) {
  std::map<std::string, std::size_t> counts;
  for (const auto& doc : documents) {
    for (const auto& w : doc) ++counts[w];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (const auto& [w, n] : counts) {
    if (n >= min_count) kept.emplace_back(w, n);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> words;
  for (auto& [w, n] : kept) words.push_back(std::move(w));
  return from_words(std::move(words));
}

std::int32_t Vocabulary::id(std::string_view word) const {
  const auto it = index_.find(std::string(word));
  return it == index_.end() ? kUnkToken : it->second;
}

const std::string& Vocabulary::word(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  return words_[static_cast<std::size_t>(id)];
}

NoteTokens Vocabulary::encode(std::span<const std::string> words) const {
  NoteTokens t;
  t.ids.reserve(words.size() + 1);
  t.ids.push_back(kClsToken);
  for (const auto& w : words) t.ids.push_back(id(w));
  return t;
}

// ---- vitals -------------------------------------------------------------------------

std::size_t VitalOptions::bins() const {
  return static_cast<std::size_t>(std::llround(window_hours * 60.0 / bin_minutes));
}

VitalSigns preprocess_vitals(std::span<const VitalSample> samples, const NormalValueTable& table,
                             const VitalOptions& options) {
  const std::size_t bins = options.bins();
  const std::size_t channels = table.vitals.size();
  if (bins == 0) throw std::invalid_argument("vital window must hold at least one bin");
  struct Obs {
    double time;
    double value;
  };
  std::vector<std::optional<Obs>> last(bins * channels);
  for (const auto& s : samples) {
    const std::size_t c = table.channel_index(s.channel);
    if (!std::isfinite(s.value)) throw DataError("non-finite value in channel '" + s.channel + "'");
    if (!(s.time >= 0.0) || s.time >= options.window_hours) continue;
    // The tolerance keeps samples stamped exactly on a bin edge in that bin.
    auto b = static_cast<std::size_t>(std::floor(s.time * 60.0 / options.bin_minutes + 1e-9));
    b = std::min(b, bins - 1);
    auto& slot = last[b * channels + c];
    if (!slot || s.time >= slot->time) slot = Obs{s.time, s.value};
  }

  VitalSigns v;
  v.values = Tensor({bins, channels});
  for (std::size_t c = 0; c < channels; ++c) {
    std::size_t missing = 0;
    double current = table.vitals[c].normal;
    for (std::size_t b = 0; b < bins; ++b) {
      if (const auto& o = last[b * channels + c]) {
        current = o->value;
      } else {
        ++missing;
      }
      v.values.at(b, c) = current;
    }
    const double fraction = static_cast<double>(missing) / static_cast<double>(bins);
    if (fraction > options.max_missing_fraction) {
      throw RecordRejected("vital channel '" + table.vitals[c].name + "' is " +
                           std::to_string(static_cast<int>(std::lround(100.0 * fraction))) + "% missing");
    }
  }
  return v;
}

// ---- normalisation ----------------------------------------------------------------

namespace {

void mean_std(const std::vector<double>& sum, const std::vector<double>& sq, double n, std::vector<double>& mean,
              std::vector<double>& sd) {
  mean.resize(sum.size());
  sd.resize(sum.size());
  for (std::size_t i = 0; i < sum.size(); ++i) {
    mean[i] = n > 0 ? sum[i] / n : 0.0;
    const double var = n > 0 ? sq[i] / n - mean[i] * mean[i] : 0.0;
    sd[i] = var > 1e-24 * std::max(1.0, mean[i] * mean[i]) ? std::sqrt(var) : 0.0;
  }
}

}  // namespace

Normalizer Normalizer::fit(std::span<const MultimodalRecord> train, const NormalValueTable& table) {
  Normalizer z;
  const auto offsets = table.feature_offsets();
  for (std::size_t f = 0; f < table.events.size(); ++f) {
    if (!table.events[f].categorical()) z.event_columns.push_back(offsets[f]);
  }
  const std::size_t channels = table.vitals.size();
  std::vector<double> es(z.event_columns.size()), eq(z.event_columns.size()), vs(channels), vq(channels);
  double en = 0.0, vn = 0.0;
  for (const auto& r : train) {
    const Tensor& e = r.events.values;
    for (std::size_t h = 0; h < e.dim(0); ++h) {
      for (std::size_t k = 0; k < z.event_columns.size(); ++k) {
        const double x = e.at(h, z.event_columns[k]);
        es[k] += x;
        eq[k] += x * x;
      }
      en += 1.0;
    }
    const Tensor& v = r.vitals.values;
    if (v.rank() == 2 && v.dim(1) != channels) {
      throw DataError("vitals grid has " + std::to_string(v.dim(1)) + " channels, expected " +
                      std::to_string(channels));
    }
    for (std::size_t t = 0; v.rank() == 2 && t < v.dim(0); ++t) {
      for (std::size_t c = 0; c < channels; ++c) {
        vs[c] += v.at(t, c);
        vq[c] += v.at(t, c) * v.at(t, c);
      }
      vn += 1.0;
    }
  }
  mean_std(es, eq, en, z.event_mean, z.event_std);
  mean_std(vs, vq, vn, z.vital_mean, z.vital_std);
  return z;
}

void Normalizer::apply(MultimodalRecord& r) const {
  Tensor& e = r.events.values;
  for (std::size_t h = 0; e.rank() == 2 && h < e.dim(0); ++h) {
    for (std::size_t k = 0; k < event_columns.size(); ++k) {
      double& x = e.at(h, event_columns[k]);
      x = event_std[k] > 0.0 ? (x - event_mean[k]) / event_std[k] : 0.0;
    }
  }
  Tensor& v = r.vitals.values;
  for (std::size_t t = 0; v.rank() == 2 && t < v.dim(0); ++t) {
    for (std::size_t c = 0; c < vital_mean.size(); ++c) {
      double& x = v.at(t, c);
      x = vital_std[c] > 0.0 ? (x - vital_mean[c]) / vital_std[c] : 0.0;
    }
  }
}

nlohmann::json Normalizer::to_json() const {
  return {{"event_columns", event_columns}, {"event_mean", event_mean}, {"event_std", event_std},
          {"vital_mean", vital_mean},       {"vital_std", vital_std}};
}

Normalizer Normalizer::from_json(const nlohmann::json& j) {
  Normalizer z;
  j.at("event_columns").get_to(z.event_columns);
  j.at("event_mean").get_to(z.event_mean);
  j.at("event_std").get_to(z.event_std);
  j.at("vital_mean").get_to(z.vital_mean);
  j.at("vital_std").get_to(z.vital_std);
  return z;
}

// ---- matching -----------------------------------------------------------------------

MatchResult match_modalities(StayModalities stays) {
  auto index = [](auto& items, const char* what) {
    std::map<std::int64_t, std::size_t> idx;
    for (std::size_t i = 0; i < items.size(); ++i) {
      if (!idx.emplace(items[i].first, i).second) {
        throw DataError(std::string("duplicate stay id ") + std::to_string(items[i].first) + " in " + what);
      }
    }
    return idx;
  };
  const auto ei = index(stays.events, "events");
  const auto ni = index(stays.notes, "notes");
  const auto vi = index(stays.vitals, "vitals");

  std::set<std::int64_t> all;
  for (const auto* m : {&ei, &ni, &vi}) {
    for (const auto& [id, i] : *m) all.insert(id);
  }
  MatchResult out;
  for (std::int64_t id : all) {
    const auto e = ei.find(id);
    const auto n = ni.find(id);
    const auto v = vi.find(id);
    const auto l = stays.labels.find(id);
    if (e == ei.end() || n == ni.end() || v == vi.end() || l == stays.labels.end()) {
      out.unmatched.push_back(id);
      continue;
    }
    MultimodalRecord r;
    r.id = id;
    r.events = std::move(stays.events[e->second].second);
    r.notes = std::move(stays.notes[n->second].second);
    r.vitals = std::move(stays.vitals[v->second].second);
    r.label = l->second;
    out.records.push_back(std::move(r));
  }
  if (!out.unmatched.empty()) {
    log_warning(std::to_string(out.unmatched.size()) + " stay ids lack at least one modality or label");
  }
  if (out.records.empty()) log_warning("no stay has all three modalities; dataset is empty");
  return out;
}

// ---- raw readers --------------------------------------------------------------------

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> fields(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        fields.back().push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        fields.back().push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.emplace_back();
    } else {
      fields.back().push_back(c);
    }
  }
  return fields;
}

std::vector<RawEventRow> read_event_csv(const std::filesystem::path& path) {
  std::vector<RawEventRow> rows;
  for_each_csv_row(path, 4, [&](const std::vector<std::string>& f, std::size_t line) {
    rows.push_back({parse_id(f[0], path, line), parse_field(f[1], path, line, "time"), f[2], f[3]});
  });
  return rows;
}

std::vector<RawNote> read_notes_jsonl(const std::filesystem::path& path) {
  auto is = open_input(path);
  std::vector<RawNote> notes;
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      RawNote note;
      note.stay_id = j.at("stay_id").get<std::int64_t>();
      note.time = j.at("time").get<double>();
      note.text = j.at("text").get<std::string>();
      note.category = j.value("category", "");
      const auto& err = j.value("iserror", nlohmann::json(false));
      note.is_error = err.is_boolean() ? err.get<bool>() : (err.is_number() ? err.get<double>() != 0.0 : false);
      notes.push_back(std::move(note));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return notes;
}

std::vector<VitalSample> read_vitals_csv(const std::filesystem::path& path) {
  std::vector<VitalSample> samples;
  for_each_csv_row(path, 4, [&](const std::vector<std::string>& f, std::size_t line) {
    samples.push_back({parse_id(f[0], path, line), f[1], parse_field(f[2], path, line, "time"),
                       parse_field(f[3], path, line, "value")});
  });
  return samples;
}

std::map<std::int64_t, int> read_labels_csv(const std::filesystem::path& path) {
  std::map<std::int64_t, int> labels;
  for_each_csv_row(path, 2, [&](const std::vector<std::string>& f, std::size_t line) {
    const double y = parse_field(f[1], path, line, "label");
    if (y != 0.0 && y != 1.0) throw DataError(path.string() + ":" + std::to_string(line) + ": label must be 0 or 1");
    if (!labels.emplace(parse_id(f[0], path, line), static_cast<int>(y)).second) {
      throw DataError(path.string() + ":" + std::to_string(line) + ": duplicate stay id");
    }
  });
  return labels;
}

}  // namespace xmmp::data
