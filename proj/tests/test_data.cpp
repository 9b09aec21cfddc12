#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "xmmp/dataset.hpp"
#include "xmmp/metrics.hpp"
#include "xmmp/synthetic.hpp"

using namespace xmmp;
using namespace xmmp::data;

namespace {

const NormalValueTable& table() {
  static const NormalValueTable t = NormalValueTable::defaults();
  return t;
}

std::size_t glucose_column() { return table().feature_offsets()[table().feature_index("Glucose")]; }

std::filesystem::path temp_file(const std::string& name) { return std::filesystem::temp_directory_path() / name; }

std::vector<VitalSample> full_vitals(std::int64_t stay, double step_hours) {
  std::vector<VitalSample> s;
  for (const auto& c : table().vitals) {
    const auto n = static_cast<int>(std::lround(24.0 / step_hours));
    for (int i = 0; i < n; ++i) s.push_back({stay, c.name, i * step_hours, c.normal});
  }
  return s;
}

}  // namespace

TEST_CASE("normal value table shape") {
  CHECK(table().events.size() == 17);
  CHECK(table().vitals.size() == 21);
  CHECK(table().event_width() == 76);
  CHECK(table().column_names().size() == 76);
  const auto j = table().to_json();
  const auto back = NormalValueTable::from_json(j);
  CHECK(back.to_json() == j);
  CHECK_THROWS_AS(table().feature_index("Shoe size"), DataError);
}

TEST_CASE("event golden: latest value within the hour wins") {
  const std::vector<RawEventRow> rows{{7, 3.0 + 10.0 / 60.0, "Glucose", "100"},
                                      {7, 3.0 + 40.0 / 60.0, "Glucose", "120"}};
  const auto seq = preprocess_events(rows, table());
  CHECK(seq.values.dim(0) == 24);
  CHECK(seq.values.dim(1) == 76);
  CHECK(seq.values.at(3, glucose_column()) == 120.0);
  CHECK(seq.mask.at(3, table().feature_index("Glucose")) == 1.0);
  // Order of the input rows does not matter.
  const std::vector<RawEventRow> swapped{rows[1], rows[0]};
  CHECK(preprocess_events(swapped, table()).values == seq.values);
}

TEST_CASE("event golden: forward fill keeps mask at zero") {
  const std::vector<RawEventRow> rows{{1, 4.5, "Glucose", "98"}};
  const auto seq = preprocess_events(rows, table());
  const std::size_t f = table().feature_index("Glucose");
  CHECK(seq.values.at(5, glucose_column()) == 98.0);
  CHECK(seq.mask.at(5, f) == 0.0);
  CHECK(seq.values.at(5, table().value_columns() + f) == 0.0);
  CHECK(seq.mask.at(4, f) == 1.0);
  CHECK(seq.values.at(4, table().value_columns() + f) == 1.0);
}

TEST_CASE("event golden: normal value before the first observation") {
  const std::vector<RawEventRow> rows{{1, 10.0, "Glucose", "150"}};
  const auto seq = preprocess_events(rows, table());
  const std::size_t f = table().feature_index("Glucose");
  for (std::size_t h = 0; h < 10; ++h) {
    CHECK(seq.values.at(h, glucose_column()) == 128.0);
    CHECK(seq.mask.at(h, f) == 0.0);
  }
  // A feature never observed holds its normal value everywhere; categoricals
  // are one-hot on the normal category.
  const std::size_t eye = table().feature_index("Glascow coma scale eye opening");
  const auto& feat = table().events[eye];
  const std::size_t normal_pos =
      std::find(feat.categories.begin(), feat.categories.end(), feat.normal) - feat.categories.begin();
  for (std::size_t c = 0; c < feat.categories.size(); ++c) {
    CHECK(seq.values.at(0, table().feature_offsets()[eye] + c) == (c == normal_pos ? 1.0 : 0.0));
  }
}

TEST_CASE("event errors and window") {
  CHECK_THROWS_AS(preprocess_events(std::vector<RawEventRow>{{1, 1.0, "Shoe size", "9"}}, table()), DataError);
  CHECK_THROWS_AS(preprocess_events(std::vector<RawEventRow>{{1, 1.0, "Glucose", "high"}}, table()), DataError);
  CHECK_THROWS_AS(
      preprocess_events(std::vector<RawEventRow>{{1, 1.0, "Glascow coma scale total", "99"}}, table()), DataError);
  // Outside the window: ignored.
  const auto seq = preprocess_events(std::vector<RawEventRow>{{1, 30.0, "Glucose", "300"}}, table());
  CHECK(seq.values.at(23, glucose_column()) == 128.0);
  // Categorical values given numerically match numeric category labels.
  const auto gcs = preprocess_events(std::vector<RawEventRow>{{1, 0.0, "Capillary refill rate", "1"}}, table());
  CHECK(gcs.values.at(0, table().feature_offsets()[0] + 1) == 1.0);
}

TEST_CASE("mask marks exactly the observed hours") {
  std::mt19937_64 rng(5);
  std::vector<RawEventRow> rows;
  std::set<std::pair<std::size_t, std::size_t>> observed;
  for (int i = 0; i < 60; ++i) {
    const std::size_t f = rng() % table().events.size();
    const double t = std::uniform_real_distribution<double>(0.0, 24.0)(rng);
    const auto& feat = table().events[f];
    const std::string v = feat.categorical() ? feat.categories[rng() % feat.categories.size()]
                                             : std::to_string(std::uniform_real_distribution<double>(1, 200)(rng));
    rows.push_back({3, t, feat.name, v});
    observed.insert({static_cast<std::size_t>(t), f});
  }
  const auto seq = preprocess_events(rows, table());
  for (std::size_t h = 0; h < 24; ++h) {
    for (std::size_t f = 0; f < table().events.size(); ++f) {
      CHECK(seq.mask.at(h, f) == (observed.count({h, f}) ? 1.0 : 0.0));
    }
  }
  // Idempotence: re-preprocessing the grid's own observations gives the grid.
  const auto again = preprocess_events(event_rows_from_grid(seq, table(), 3), table());
  CHECK(again.values == seq.values);
  CHECK(again.mask == seq.mask);
}

TEST_CASE("tokenizer") {
  const auto w = tokenize("Pt [**Hospital 123**] given 2mg Morphine; BP=120/80.");
  CHECK(w == std::vector<std::string>{"pt", "given", "2mg", "morphine", "bp", "120", "80"});
  CHECK(tokenize("  ").empty());
}

TEST_CASE("notes golden: final 512 words retained") {
  std::ostringstream a, b;
  for (int i = 0; i < 300; ++i) a << "a" << i << ' ';
  for (int i = 300; i < 600; ++i) b << "a" << i << ' ';
  const std::vector<RawNote> notes{{1, 5.0, b.str(), "Nursing", false}, {1, 2.0, a.str(), "Nursing", false}};
  const auto words = clean_notes(notes);
  REQUIRE(words.size() == 512);
  CHECK(words.front() == "a88");
  CHECK(words.back() == "a599");
}

TEST_CASE("notes golden: target words removed") {
  const std::vector<RawNote> notes{{1, 1.0, "Patient dying, family at bedside. Risk of death.", "Physician", false}};
  const auto words = clean_notes(notes);
  CHECK(std::find(words.begin(), words.end(), "dying") == words.end());
  CHECK(std::find(words.begin(), words.end(), "death") == words.end());
  CHECK(words == std::vector<std::string>{"patient", "family", "at", "bedside", "risk", "of"});
}

TEST_CASE("notes: window, error flag and empty input") {
  const std::vector<RawNote> notes{{1, 1.0, "kept", "Nursing", false},
                                   {1, 2.0, "wrong", "Nursing", true},
                                   {1, 30.0, "late", "Nursing", false}};
  CHECK(clean_notes(notes) == std::vector<std::string>{"kept"});
  const auto empty = clean_notes(std::vector<RawNote>{});
  CHECK(empty.empty());
  const Vocabulary v;
  const auto ids = v.encode(empty);
  CHECK(ids.ids == std::vector<std::int32_t>{kClsToken});
}

TEST_CASE("vocabulary") {
  const std::vector<std::vector<std::string>> docs{{"b", "a", "c", "b"}, {"a", "b", "d"}};
  const auto v = Vocabulary::build(docs, 2);
  CHECK(v.size() == 5);
  CHECK(v.word(3) == "b");
  CHECK(v.word(4) == "a");
  CHECK(v.id("d") == kUnkToken);
  CHECK(v.word(kPadToken) == "[PAD]");
  CHECK(v.word(kClsToken) == "[CLS]");
  const std::vector<std::string> doc{"a", "zzz"};
  CHECK(v.encode(doc).ids == std::vector<std::int32_t>{kClsToken, 4, kUnkToken});
  CHECK(Vocabulary::from_words(v.words()).words() == v.words());
}

TEST_CASE("vitals golden: 1 Hz channel gives 480 values") {
  auto samples = full_vitals(1, 0.05);
  std::erase_if(samples, [](const VitalSample& s) { return s.channel == "HR"; });
  for (int sec = 0; sec < 24 * 3600; ++sec) samples.push_back({1, "HR", sec / 3600.0, 60.0 + (sec % 180) / 10.0});
  const auto v = preprocess_vitals(samples, table());
  CHECK(v.values.dim(0) == 480);
  CHECK(v.values.dim(1) == 21);
  const std::size_t hr = table().channel_index("HR");
  // Last sample of every bin is at second 179 of that bin.
  for (std::size_t b = 0; b < 480; ++b) CHECK(v.values.at(b, hr) == 60.0 + 17.9);
}

TEST_CASE("vitals golden: a 60% missing channel rejects the record") {
  auto samples = full_vitals(1, 0.05);
  std::erase_if(samples, [](const VitalSample& s) { return s.channel == "SpO2" && s.time >= 24.0 * 0.4; });
  CHECK_THROWS_AS(preprocess_vitals(samples, table()), RecordRejected);
  // Exactly half missing is kept.
  auto half = full_vitals(1, 0.05);
  std::erase_if(half, [](const VitalSample& s) { return s.channel == "SpO2" && s.time >= 12.0; });
  CHECK_NOTHROW(preprocess_vitals(half, table()));
  CHECK_THROWS_AS(preprocess_vitals(std::vector<VitalSample>{{1, "Shoe", 0.0, 1.0}}, table()), DataError);
}

TEST_CASE("vitals golden: a constant channel normalises to zeros") {
  std::vector<MultimodalRecord> recs(3);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    recs[i].events = preprocess_events(std::vector<RawEventRow>{}, table());
    auto s = full_vitals(1, 0.05);
    for (auto& x : s) {
      if (x.channel != "CVP") x.value += static_cast<double>(i) + x.time;
    }
    recs[i].vitals = preprocess_vitals(s, table());
  }
  const auto z = Normalizer::fit(recs, table());
  auto r = recs[0];
  z.apply(r);
  const std::size_t cvp = table().channel_index("CVP");
  for (std::size_t b = 0; b < 480; ++b) CHECK(r.vitals.values.at(b, cvp) == 0.0);
  CHECK(r.vitals.values.at(0, table().channel_index("HR")) != 0.0);
}

TEST_CASE("vitals idempotence") {
  std::mt19937_64 rng(2);
  auto samples = full_vitals(1, 0.05);
  for (auto& s : samples) s.value += std::normal_distribution<double>()(rng);
  const auto v = preprocess_vitals(samples, table());
  std::vector<VitalSample> replay;
  for (std::size_t b = 0; b < 480; ++b) {
    for (std::size_t c = 0; c < 21; ++c) replay.push_back({1, table().vitals[c].name, b * 0.05, v.values.at(b, c)});
  }
  CHECK(preprocess_vitals(replay, table()).values == v.values);
}

TEST_CASE("normalisation statistics come from the training split only") {
  const auto d = [] {
    SyntheticSpec s;
    s.records = 30;
    s.hours = 4;
    s.vital_steps = 5;
    s.note_words = 6;
    return generate_synthetic(s, 4);
  }();
  std::vector<MultimodalRecord> train(d.records.begin(), d.records.begin() + 20);
  std::vector<MultimodalRecord> test(d.records.begin() + 20, d.records.end());
  const auto z = Normalizer::fit(train, d.table);

  // Independent recomputation of one continuous column and one channel.
  const std::size_t col = glucose_column();
  double s = 0, q = 0, n = 0;
  for (const auto& r : train) {
    for (std::size_t h = 0; h < r.events.values.dim(0); ++h) {
      const double x = r.events.values.at(h, col);
      s += x;
      q += x * x;
      n += 1;
    }
  }
  const std::size_t k = std::find(z.event_columns.begin(), z.event_columns.end(), col) - z.event_columns.begin();
  REQUIRE(k < z.event_columns.size());
  CHECK(z.event_mean[k] == doctest::Approx(s / n).epsilon(1e-12));
  CHECK(z.event_std[k] == doctest::Approx(std::sqrt(q / n - (s / n) * (s / n))).epsilon(1e-9));

  // Stored statistics equal recomputed ones, and adding test data changes them.
  const auto stored = Normalizer::from_json(z.to_json());
  const auto recomputed = Normalizer::fit(train, d.table);
  CHECK(stored.event_mean == recomputed.event_mean);
  CHECK(stored.vital_std == recomputed.vital_std);
  const auto leaked = Normalizer::fit(d.records, d.table);
  CHECK(leaked.event_mean != z.event_mean);

  // Categorical and mask columns are untouched.
  auto r = test[0];
  z.apply(r);
  for (std::size_t h = 0; h < r.events.values.dim(0); ++h) {
    for (std::size_t c = table().value_columns(); c < 76; ++c) CHECK(r.events.values.at(h, c) == test[0].events.values.at(h, c));
  }
}

TEST_CASE("modality matching") {
  StayModalities s;
  const auto ev = preprocess_events(std::vector<RawEventRow>{}, table());
  const NoteTokens nt{{kClsToken}};
  VitalSigns vs;
  vs.values = ad::Tensor({2, 21});
  s.events = {{1, ev}, {2, ev}};
  s.notes = {{2, nt}, {3, nt}};
  s.vitals = {{2, vs}};
  s.labels = {{1, 0}, {2, 1}, {3, 0}};
  const auto m = match_modalities(s);
  REQUIRE(m.records.size() == 1);
  CHECK(m.records[0].id == 2);
  CHECK(m.records[0].label == 1);
  CHECK(m.unmatched == std::vector<std::int64_t>{1, 3});

  StayModalities dup = s;
  dup.events.push_back({2, ev});
  CHECK_THROWS_AS(match_modalities(dup), DataError);

  StayModalities none = s;
  none.vitals = {{9, vs}};
  CHECK(match_modalities(none).records.empty());
}

TEST_CASE("synthetic data is byte-reproducible") {
  SyntheticSpec s;
  s.records = 50;
  const auto a = temp_file("xmmp_syn_a.bin"), b = temp_file("xmmp_syn_b.bin");
  save_dataset(a, generate_synthetic(s, 77));
  save_dataset(b, generate_synthetic(s, 77));
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  CHECK(slurp(a) == slurp(b));
  save_dataset(b, generate_synthetic(s, 78));
  CHECK(slurp(a) != slurp(b));
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

TEST_CASE("synthetic prevalence within the binomial interval") {
  SyntheticSpec s;
  s.records = 5000;
  s.hours = 3;
  s.vital_steps = 3;
  s.note_words = 4;
  const auto d = generate_synthetic(s, 12);
  double positives = 0;
  for (int y : d.labels()) positives += y;
  const double p = 0.1;
  const double half_width = 3.29 * std::sqrt(p * (1 - p) / 5000.0);
  CHECK(std::abs(positives / 5000.0 - p) < half_width);
}

TEST_CASE("synthetic: with no noise a linear probe on planted indicators is perfect") {
  SyntheticSpec s;
  s.records = 300;
  s.noise_rate = 0.0;
  s.positive_rate = 0.3;
  const auto d = generate_synthetic(s, 3);
  const auto& gt = d.ground_truth;
  const std::size_t col = gt.at("event_column");
  const std::int32_t token = gt.at("token_id");
  const std::size_t channel = gt.at("vital_channel_index");
  std::vector<double> scores;
  for (const auto& r : d.records) {
    double ev = 0, tok = 0, vit = 0;
    for (std::size_t h = 0; h < r.events.values.dim(0); ++h) ev = std::max(ev, r.events.values.at(h, col));
    for (auto id : r.notes.ids) tok += id == token ? 1.0 : 0.0;
    for (std::size_t t = 0; t < r.vitals.values.dim(0); ++t) vit = std::max(vit, r.vitals.values.at(t, channel));
    const double ind_ev = ev > s.event_threshold ? 1.0 : 0.0;
    const double ind_tok = tok > 0 ? 1.0 : 0.0;
    const double ind_vit = vit > s.spike_amplitude / 2 ? 1.0 : 0.0;
    scores.push_back(ind_ev + 3.0 * ind_tok + ind_vit);
  }
  CHECK(metrics::auc_roc(d.labels(), scores) == 1.0);

  // Every ground-truth cell is planted where the record says.
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    const auto& rec = gt.at("records")[i];
    CHECK(rec.at("planted").get<bool>() == (d.records[i].label == 1));
    for (const auto& c : rec.at("cells")) {
      const std::size_t idx = c.at("index");
      if (c.at("modality") == "notes") CHECK(d.records[i].notes.ids.at(idx) == token);
      if (c.at("modality") == "events") CHECK(d.records[i].events.values[idx] > s.event_threshold);
    }
  }
}

TEST_CASE("synthetic complementary planting gives one signal per record") {
  SyntheticSpec s;
  s.records = 200;
  s.positive_rate = 0.5;
  s.planting = Planting::complementary;
  const auto d = generate_synthetic(s, 9);
  std::size_t planted = 0;
  std::array<std::size_t, 3> counts{};
  for (const auto& rec : d.ground_truth.at("records")) {
    if (!rec.at("planted").get<bool>()) continue;
    ++planted;
    std::set<std::string> mods;
    for (const auto& c : rec.at("cells")) mods.insert(c.at("modality").get<std::string>());
    CHECK(mods.size() == 1);
    counts[static_cast<std::size_t>(parse_modality(*mods.begin()))]++;
  }
  for (auto c : counts) CHECK(c > planted / 6);
}

TEST_CASE("synthetic spec validation") {
  SyntheticSpec s;
  s.positive_rate = 0.0;
  CHECK_THROWS_AS(generate_synthetic(s, 1), std::invalid_argument);
  s = SyntheticSpec{};
  s.event_feature = "Glascow coma scale total";
  CHECK_THROWS(generate_synthetic(s, 1));
  s = SyntheticSpec{};
  s.noise_rate = 1.5;
  CHECK_THROWS(generate_synthetic(s, 1));
  const nlohmann::json j = SyntheticSpec{};
  CHECK(j.get<SyntheticSpec>().records == 2000);
}

TEST_CASE("dataset round trip") {
  SyntheticSpec s;
  s.records = 12;
  const auto d = generate_synthetic(s, 21);
  const auto path = temp_file("xmmp_ds.bin");
  save_dataset(path, d);
  const auto back = load_dataset(path);
  REQUIRE(back.records.size() == d.records.size());
  for (std::size_t i = 0; i < d.records.size(); ++i) {
    CHECK(back.records[i].id == d.records[i].id);
    CHECK(back.records[i].label == d.records[i].label);
    CHECK(back.records[i].events.values == d.records[i].events.values);
    CHECK(back.records[i].events.mask == d.records[i].events.mask);
    CHECK(back.records[i].notes.ids == d.records[i].notes.ids);
    CHECK(back.records[i].vitals.values == d.records[i].vitals.values);
  }
  CHECK(back.vocabulary.words() == d.vocabulary.words());
  CHECK(back.ground_truth == d.ground_truth);
  CHECK(back.normalized);

  // Corruption is detected.
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-5, std::ios::end);
    f.put('\x7f');
  }
  CHECK_THROWS(load_dataset(path));
  std::filesystem::remove(path);
  CHECK_THROWS(load_dataset(temp_file("xmmp_no_such_file.bin")));
}

TEST_CASE("raw readers") {
  const auto ev = temp_file("xmmp_ev.csv"), nt = temp_file("xmmp_nt.jsonl"), vt = temp_file("xmmp_vt.csv"),
             lb = temp_file("xmmp_lb.csv");
  std::ofstream(ev) << "stay_id,time,feature,value\n5,1.5,Glucose,110\n5,2.0,\"Glascow coma scale total\",15\n";
  std::ofstream(nt) << R"({"stay_id":5,"time":1.0,"text":"hello, world","category":"Nursing","iserror":false})"
                    << "\n\n"
                    << R"({"stay_id":5,"time":2.0,"text":"x","category":"Nursing","iserror":1})" << "\n";
  std::ofstream(vt) << "stay_id,channel,time,value\n5,HR,0.1,80\n";
  std::ofstream(lb) << "stay_id,label\n5,1\n6,0\n";
  const auto rows = read_event_csv(ev);
  REQUIRE(rows.size() == 2);
  CHECK(rows[1].feature == "Glascow coma scale total");
  CHECK(rows[0].time == 1.5);
  const auto notes = read_notes_jsonl(nt);
  REQUIRE(notes.size() == 2);
  CHECK(notes[0].text == "hello, world");
  CHECK(notes[1].is_error);
  CHECK(read_vitals_csv(vt).at(0).value == 80.0);
  CHECK(read_labels_csv(lb) == std::map<std::int64_t, int>{{5, 1}, {6, 0}});
  std::ofstream(lb) << "stay_id,label\n5,maybe\n";
  CHECK_THROWS_AS(read_labels_csv(lb), DataError);
  CHECK(split_csv_line("a,\"b,c\",d") == std::vector<std::string>{"a", "b,c", "d"});
  for (const auto& p : {ev, nt, vt, lb}) std::filesystem::remove(p);
}
