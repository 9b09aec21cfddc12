#include "xmmp/runner.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "xmmp/attribution.hpp"
#include "xmmp/dataset.hpp"
#include "xmmp/metrics.hpp"
#include "xmmp/perturbation.hpp"
#include "xmmp/synthetic.hpp"
#include "xmmp/training.hpp"
#include "xmmp/util.hpp"

namespace xmmp::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Usage problems detected after parsing (bad option values).
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::ofstream open_for_write(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw data::DataError("cannot write '" + path.string() + "'");
  os << std::setprecision(17);
  return os;
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw data::DataError("missing " + what + ": '" + path.string() + "'");
}

fs::path dataset_file(const fs::path& p) { return fs::is_directory(p) ? p / "dataset.bin" : p; }
fs::path model_file(const fs::path& p) { return fs::is_directory(p) ? p / "model.ckpt" : p; }

// Appends one JSON object per line.
class RunLog {
 public:
  explicit RunLog(const fs::path& dir) {
    fs::create_directories(dir);
    os_.open(dir / "log.jsonl", std::ios::app);
    if (!os_) throw data::DataError("cannot write '" + (dir / "log.jsonl").string() + "'");
  }
  void write(const std::string& event, json fields = json::object()) {
    json line = {{"event", event}};
    line.update(fields);
    os_ << line.dump() << '\n';
    os_.flush();
  }

 private:
  std::ofstream os_;
};

// manifest.json maps each subcommand run in the directory to the arguments,
// resolved configuration and seed needed to repeat it.
void write_manifest(const fs::path& dir, const std::string& command, const std::vector<std::string>& args,
                    const std::string& resolved_config, std::uint64_t seed) {
  const fs::path path = dir / "manifest.json";
  json manifest = json::object();
  if (fs::is_regular_file(path)) {
    std::ifstream is(path);
    manifest = json::parse(is, nullptr, false);
    if (manifest.is_discarded() || !manifest.is_object()) manifest = json::object();
  }
  manifest[command] = {{"arguments", args}, {"config", resolved_config}, {"seed", seed},
                       {"version", std::string(build_version())}};
  auto os = open_for_write(path);
  os << manifest.dump(2) << '\n';
}

std::vector<attr::ExplainerKind> parse_explainers(const std::vector<std::string>& names) {
  std::vector<attr::ExplainerKind> kinds;
  for (const auto& n : names) {
    if (n == "all") {
      kinds.assign(attr::kAllExplainers.begin(), attr::kAllExplainers.end());
      return kinds;
    }
    try {
      kinds.push_back(attr::parse_explainer(n));
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  if (kinds.empty()) throw UsageError("no explainer selected");
  return kinds;
}

json feature_table_to_json(const attr::FeatureTable& t) {
  auto list = [](const std::vector<attr::FeatureScore>& v) {
    json a = json::array();
    for (const auto& s : v) a.push_back({{"name", s.name}, {"mean", s.mean}, {"count", s.count}});
    return a;
  };
  return {{"events", list(t.events)}, {"tokens", list(t.tokens)}, {"vitals", list(t.vitals)}};
}

// ---- shared loading -----------------------------------------------------------------

struct Loaded {
  model::XmmpModel model;
  data::Dataset dataset;
  std::vector<MultimodalRecord> records;
};

Loaded load_for_inference(const fs::path& model_path, const fs::path& data_path, const std::string& split) {
  const fs::path mp = model_file(model_path), dp = dataset_file(data_path);
  require_file(mp, "checkpoint");
  require_file(dp, "dataset");
  auto cp = model::load_checkpoint(mp);
  model::XmmpModel m(cp.config, std::move(cp.parameters));
  data::Dataset d = data::load_dataset(dp);

  std::vector<MultimodalRecord> records;
  if (split == "all") {
    records = d.records;
  } else if (split == "test") {
    if (!cp.preprocessing.contains("test_ids")) {
      throw UsageError("checkpoint carries no test split; use --split all");
    }
    const auto ids = cp.preprocessing.at("test_ids").get<std::set<std::int64_t>>();
    for (const auto& r : d.records) {
      if (ids.count(r.id)) records.push_back(r);
    }
    if (records.size() != ids.size()) {
      throw data::DataError("dataset lacks " + std::to_string(ids.size() - records.size()) +
                            " of the checkpoint's test records");
    }
  } else {
    throw UsageError("--split must be 'test' or 'all'");
  }
  if (const auto it = cp.preprocessing.find("normalizer"); it != cp.preprocessing.end() && !it->is_null()) {
    const auto z = data::Normalizer::from_json(*it);
    for (auto& r : records) z.apply(r);
  }
  return {std::move(m), std::move(d), std::move(records)};
}

// ---- synth --------------------------------------------------------------------------

struct SynthOptions {
  std::string out;
  std::uint64_t seed = 1;
  data::SyntheticSpec spec;
  std::string planting = "all";
};

void run_synth(const SynthOptions& o, RunLog& log, std::ostream& out) {
  data::SyntheticSpec spec = o.spec;
  try {
    spec.planting = data::parse_planting(o.planting);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const auto d = data::generate_synthetic(spec, o.seed);
  const fs::path dir = o.out;
  data::save_dataset(dir / "dataset.bin", d);
  auto gt = open_for_write(dir / "ground_truth.json");
  gt << d.ground_truth.dump(2) << '\n';
  std::size_t positives = 0;
  for (int y : d.labels()) positives += static_cast<std::size_t>(y);
  log.write("synth", {{"records", d.records.size()}, {"positives", positives}, {"seed", o.seed},
                      {"spec", spec}});
  out << "wrote " << d.records.size() << " records (" << positives << " positive) to " << dir.string() << '\n';
}

// ---- preprocess ---------------------------------------------------------------------

struct PreprocessOptions {
  std::string events, notes, vitals, labels, normal_values, out;
  std::size_t min_count = 2;
  std::size_t hours = 24;
  std::size_t max_words = 512;
};

void run_preprocess(const PreprocessOptions& o, RunLog& log, std::ostream& out) {
  for (const auto& [p, what] : std::vector<std::pair<std::string, std::string>>{
           {o.events, "events file"}, {o.notes, "notes file"}, {o.vitals, "vitals file"}, {o.labels, "labels file"}}) {
    require_file(p, what);
  }
  const data::NormalValueTable table =
      o.normal_values.empty() ? data::NormalValueTable::defaults() : data::NormalValueTable::load(o.normal_values);

  std::map<std::int64_t, std::vector<data::RawEventRow>> events;
  for (auto& r : data::read_event_csv(o.events)) events[r.stay_id].push_back(std::move(r));
  std::map<std::int64_t, std::vector<data::RawNote>> notes;
  for (auto& n : data::read_notes_jsonl(o.notes)) notes[n.stay_id].push_back(std::move(n));
  std::map<std::int64_t, std::vector<data::VitalSample>> vitals;
  for (auto& s : data::read_vitals_csv(o.vitals)) vitals[s.stay_id].push_back(std::move(s));

  data::StayModalities stays;
  stays.labels = data::read_labels_csv(o.labels);

  data::EventOptions eo;
  eo.hours = o.hours;
  for (const auto& [id, rows] : events) stays.events.emplace_back(id, data::preprocess_events(rows, table, eo));

  data::NoteOptions no;
  no.window_hours = static_cast<double>(o.hours);
  no.max_words = o.max_words;
  std::vector<std::pair<std::int64_t, std::vector<std::string>>> words;
  for (const auto& [id, list] : notes) {
    auto w = data::clean_notes(list, no);
    if (w.empty()) {
      log.write("empty_notes", {{"stay_id", id}});
      log_warning("stay " + std::to_string(id) + " has no note words left after cleaning");
    }
    words.emplace_back(id, std::move(w));
  }
  std::vector<std::vector<std::string>> docs;
  for (const auto& [id, w] : words) docs.push_back(w);
  const auto vocab = data::Vocabulary::build(docs, o.min_count);
  for (const auto& [id, w] : words) stays.notes.emplace_back(id, vocab.encode(w));

  data::VitalOptions vo;
  vo.window_hours = static_cast<double>(o.hours);
  std::size_t rejected = 0;
  for (const auto& [id, samples] : vitals) {
    try {
      stays.vitals.emplace_back(id, data::preprocess_vitals(samples, table, vo));
    } catch (const data::RecordRejected& e) {
      ++rejected;
      log.write("rejected", {{"stay_id", id}, {"reason", e.what()}});
    }
  }

  auto matched = data::match_modalities(std::move(stays));
  log.write("unmatched", {{"stay_ids", matched.unmatched}});
  data::Dataset d;
  d.records = std::move(matched.records);
  d.vocabulary = vocab;
  d.table = table;
  d.normalized = false;
  data::save_dataset(fs::path(o.out) / "dataset.bin", d);
  log.write("preprocess", {{"records", d.records.size()}, {"rejected", rejected},
                           {"unmatched", matched.unmatched.size()}, {"vocabulary", vocab.size()}});
  out << "wrote " << d.records.size() << " matched records (" << rejected << " rejected, " << matched.unmatched.size()
      << " unmatched) to " << o.out << '\n';
}

// ---- train --------------------------------------------------------------------------

struct TrainOptions {
  std::string data, out;
  std::uint64_t seed = 1;
  train::TrainConfig train;
  bool no_upsample = false;
  std::size_t hidden = 64, ffn = 128, fusion_hidden = 64;
  std::string modalities = "events+notes+vitals";
  bool bias_free = false;
  std::size_t folds = 5, fold = 0;
  double validation_fraction = 0.2;
  bool cross_validate = false;
  std::vector<std::uint64_t> seeds;
};

model::ModelConfig model_config_for(const TrainOptions& o, const data::Dataset& d) {
  model::ModelConfig mc;
  mc.event_width = d.table.event_width();
  mc.vitals_channels = d.table.vitals.size();
  mc.vocab_size = d.vocabulary.size();
  std::size_t longest = 1;
  for (const auto& r : d.records) longest = std::max(longest, r.notes.ids.size());
  mc.max_note_len = std::max<std::size_t>(513, longest);
  mc.hidden = o.hidden;
  mc.ffn = o.ffn;
  mc.fusion_hidden = o.fusion_hidden;
  mc.bias_free = o.bias_free;
  try {
    mc.modalities = parse_modality_set(o.modalities);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  o.train.apply(mc);
  mc.validate();
  return mc;
}

std::vector<MultimodalRecord> gather(const data::Dataset& d, const std::vector<std::size_t>& idx) {
  std::vector<MultimodalRecord> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(d.records[i]);
  return out;
}

void run_train(const TrainOptions& o, RunLog& log, std::ostream& out) {
  const fs::path dp = dataset_file(o.data);
  require_file(dp, "dataset");
  const data::Dataset d = data::load_dataset(dp);
  train::TrainConfig tc = o.train;
  tc.upsample = !o.no_upsample;
  tc.validate();
  if (o.folds < 2) throw UsageError("--folds must be at least 2");
  if (o.fold >= o.folds) throw UsageError("--fold must be below --folds");
  const model::ModelConfig mc = model_config_for(o, d);
  const fs::path dir = o.out;
  log.write("config", {{"train", tc}, {"model", mc}, {"seed", o.seed}});

  const auto normalise = [&](std::vector<MultimodalRecord>& tr, std::vector<MultimodalRecord>& va,
                             std::vector<MultimodalRecord>& te) {
    if (d.normalized) return;
    const auto z = data::Normalizer::fit(tr, d.table);
    for (auto* part : {&tr, &va, &te}) {
      for (auto& r : *part) z.apply(r);
    }
  };

  if (o.cross_validate) {
    const std::vector<std::uint64_t> seeds = o.seeds.empty() ? std::vector<std::uint64_t>{o.seed} : o.seeds;
    tc.seed = o.seed;
    const auto rows = train::cross_validate(mc, tc, d.records, o.folds, seeds, 0, normalise);
    const std::vector<train::TrainConfig> configs{tc};
    train::write_cv_csv(dir / "cv.csv", rows, configs);
    std::vector<double> roc, pr;
    for (const auto& r : rows) {
      roc.push_back(r.auc_roc);
      pr.push_back(r.auc_pr);
      log.write("fold", {{"fold", r.fold}, {"seed", r.seed}, {"auc_roc", r.auc_roc}, {"auc_pr", r.auc_pr}});
    }
    const auto sr = metrics::summarize(roc), sp = metrics::summarize(pr);
    auto os = open_for_write(dir / "cv_summary.csv");
    os << "metric,mean,sd,ci_low,ci_high\n";
    os << "auc_roc," << sr.mean << ',' << sr.sd << ',' << sr.ci_low << ',' << sr.ci_high << '\n';
    os << "auc_pr," << sp.mean << ',' << sp.sd << ',' << sp.ci_low << ',' << sp.ci_high << '\n';
    out << "cross-validation AUC-ROC " << std::setprecision(4) << sr.mean << " +/- " << sr.sd << ", AUC-PR "
        << sp.mean << " +/- " << sp.sd << '\n';
    return;
  }

  const auto labels = d.labels();
  const auto plan = train::stratified_folds(labels, o.folds, derive_seed(o.seed, "folds"));
  const auto test_idx = plan.test_indices(o.fold);
  const auto tv = train::split_validation(plan.train_indices(o.fold), labels, o.validation_fraction,
                                          derive_seed(o.seed, "validation"));
  auto tr = gather(d, tv.train), va = gather(d, tv.validation), te = gather(d, test_idx);
  json normalizer = nullptr;
  if (!d.normalized) {
    const auto z = data::Normalizer::fit(tr, d.table);
    for (auto* part : {&tr, &va}) {
      for (auto& r : *part) z.apply(r);
    }
    normalizer = z.to_json();
  }
  tc.seed = derive_seed(o.seed, "train");

  auto history = open_for_write(dir / "history.csv");
  history << "epoch,learning_rate,train_loss,validation_loss,validation_auc_roc\n";
  const auto result = train::train_model(mc, tc, tr, va, [&](const train::EpochLog& e) {
    history << e.epoch << ',' << e.learning_rate << ',' << e.train_loss << ',' << e.validation_loss << ','
            << e.validation_auc_roc << '\n';
    log.write("epoch", {{"epoch", e.epoch},
                        {"learning_rate", e.learning_rate},
                        {"train_loss", e.train_loss},
                        {"validation_loss", e.validation_loss},
                        {"validation_auc_roc", e.validation_auc_roc}});
  });

  std::vector<std::int64_t> test_ids;
  for (const auto& r : te) test_ids.push_back(r.id);
  const json preprocessing = {{"table", d.table.to_json()},
                              {"normalizer", normalizer},
                              {"split",
                               {{"folds", o.folds},
                                {"fold", o.fold},
                                {"seed", o.seed},
                                {"validation_fraction", o.validation_fraction}}},
                              {"test_ids", test_ids},
                              {"train", tc}};
  model::save_checkpoint(result.model, dir / "model.ckpt", d.vocabulary.words(), preprocessing);
  log.write("trained", {{"epochs", result.history.size()},
                        {"best_epoch", result.best_epoch},
                        {"best_validation_auc_roc", result.best_validation_auc_roc}});
  out << "trained " << result.history.size() << " epochs, best epoch " << result.best_epoch
      << " (validation AUC-ROC " << std::setprecision(4) << result.best_validation_auc_roc << "); checkpoint "
      << (dir / "model.ckpt").string() << '\n';
}

// ---- eval ---------------------------------------------------------------------------

struct InferenceOptions {
  std::string model, data, out, split = "test";
  std::uint64_t seed = 1;
};

void run_eval(const InferenceOptions& o, RunLog& log, std::ostream& out) {
  const auto loaded = load_for_inference(o.model, o.data, o.split);
  const auto ev = train::evaluate(loaded.model, loaded.records);
  const fs::path dir = o.out;
  std::size_t positives = 0;
  for (int y : ev.labels) positives += static_cast<std::size_t>(y);
  {
    auto os = open_for_write(dir / "metrics.csv");
    os << "split,records,positives,auc_roc,auc_pr\n";
    os << o.split << ',' << ev.labels.size() << ',' << positives << ',' << ev.auc_roc << ',' << ev.auc_pr << '\n';
  }
  {
    auto os = open_for_write(dir / "scores.csv");
    os << "record_id,label,death_probability\n";
    for (std::size_t i = 0; i < loaded.records.size(); ++i) {
      os << loaded.records[i].id << ',' << ev.labels[i] << ',' << ev.scores[i] << '\n';
    }
  }
  log.write("eval", {{"split", o.split}, {"records", ev.labels.size()}, {"auc_roc", ev.auc_roc},
                     {"auc_pr", ev.auc_pr}});
  out << o.split << " AUC-ROC " << std::setprecision(4) << ev.auc_roc << ", AUC-PR " << ev.auc_pr << " over "
      << ev.labels.size() << " records\n";
}

// ---- explain ------------------------------------------------------------------------

struct ExplainCliOptions {
  InferenceOptions io;
  std::vector<std::string> explainers{"lrptrans"};
  int target = 1;
  std::size_t ig_steps = 20;
  double lrp_epsilon = 1e-6;
  std::string cohort = "positive";
  std::size_t min_token_count = 100;
  std::size_t max_records = 0;
};

void run_explain(const ExplainCliOptions& o, RunLog& log, std::ostream& out) {
  const auto kinds = parse_explainers(o.explainers);
  if (o.cohort != "positive" && o.cohort != "predicted" && o.cohort != "all") {
    throw UsageError("--cohort must be 'positive', 'predicted' or 'all'");
  }
  auto loaded = load_for_inference(o.io.model, o.io.data, o.io.split);
  if (o.max_records > 0 && loaded.records.size() > o.max_records) loaded.records.resize(o.max_records);
  const auto& records = loaded.records;
  attr::ExplainOptions eo;
  eo.ig_steps = o.ig_steps;
  eo.lrp_epsilon = o.lrp_epsilon;
  eo.seed = derive_seed(o.io.seed, "explain");

  std::vector<bool> in_cohort;
  for (const auto& r : records) {
    if (o.cohort == "all") in_cohort.push_back(true);
    if (o.cohort == "positive") in_cohort.push_back(r.label == 1);
    if (o.cohort == "predicted") in_cohort.push_back(loaded.model.predict(r).death_probability() >= 0.5);
  }

  const fs::path dir = o.io.out;
  auto csv = open_for_write(dir / "attributions.csv");
  attr::write_report_csv_header(csv);
  auto jsonl = open_for_write(dir / "reports.jsonl");
  attr::AggregateOptions ao;
  ao.min_token_count = o.min_token_count;
  for (auto kind : kinds) {
    std::vector<attr::AttributionReport> cohort_reports;
    std::vector<MultimodalRecord> cohort_records;
    for (std::size_t i = 0; i < records.size(); ++i) {
      auto rep = attr::explain(kind, loaded.model, records[i], o.target, eo);
      attr::write_report_csv(csv, rep, records[i]);
      json line = attr::report_to_json(rep, records[i].id);
      std::vector<std::string> tokens;
      for (auto id : records[i].notes.ids) tokens.push_back(loaded.dataset.vocabulary.word(id));
      line["tokens"] = tokens;
      line["label"] = records[i].label;
      jsonl << line.dump() << '\n';
      if (in_cohort[i]) {
        cohort_reports.push_back(std::move(rep));
        cohort_records.push_back(records[i]);
      }
    }
    const std::string name(attr::explainer_name(kind));
    if (cohort_reports.empty()) {
      log_warning("no " + o.cohort + " records to aggregate for " + name);
      log.write("aggregate_skipped", {{"explainer", name}, {"cohort", o.cohort}});
      continue;
    }
    const auto table = attr::aggregate_feature_attributions(cohort_reports, cohort_records, loaded.dataset.table,
                                                            loaded.dataset.vocabulary, ao);
    auto fo = open_for_write(dir / ("features_" + name + ".json"));
    fo << feature_table_to_json(table).dump(2) << '\n';
    log.write("explain", {{"explainer", name}, {"records", records.size()}, {"cohort", cohort_reports.size()}});
    out << name << ": explained " << records.size() << " records, aggregated " << cohort_reports.size() << '\n';
  }
}

// ---- perturb ------------------------------------------------------------------------

struct PerturbCliOptions {
  InferenceOptions io;
  std::vector<std::string> explainers{"all"};
  std::vector<double> fractions = perturb::default_fractions();
  int target = 1;
  std::size_t ig_steps = 20;
  double lrp_epsilon = 1e-6;
  std::string order = "ascending";
};

void run_perturb(const PerturbCliOptions& o, RunLog& log, std::ostream& out) {
  const auto kinds = parse_explainers(o.explainers);
  if (o.order != "ascending" && o.order != "descending") throw UsageError("--order must be ascending or descending");
  const auto loaded = load_for_inference(o.io.model, o.io.data, o.io.split);
  perturb::CurveOptions co;
  co.fractions = o.fractions;
  co.target_class = o.target;
  co.order = o.order == "ascending" ? perturb::Order::ascending : perturb::Order::descending;
  co.explain.ig_steps = o.ig_steps;
  co.explain.lrp_epsilon = o.lrp_epsilon;
  co.explain.seed = derive_seed(o.io.seed, "explain");
  const auto curves = perturb::compare_explainers(loaded.model, loaded.records, kinds, co, [&](const auto& c) {
    log.write("curve", {{"explainer", std::string(attr::explainer_name(c.kind))},
                        {"fractions", c.fractions},
                        {"auc_roc", c.auc_roc},
                        {"au", c.au}});
    out << attr::explainer_name(c.kind) << ": AU " << std::setprecision(4) << c.au << '\n';
  });
  const fs::path dir = o.io.out;
  perturb::write_curves_csv(dir / "curves.csv", curves);
  perturb::write_summary_csv(dir / "au_summary.csv", curves);
  perturb::write_plot_table(dir / "curves.dat", curves);
}

// ---- report -------------------------------------------------------------------------

struct ReportOptions {
  std::string run;
  std::string out;
  std::size_t top = 5;
  std::size_t heat_records = 3;
};

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw data::DataError("cannot read '" + path.string() + "'");
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(is, line);) {
    if (!line.empty()) rows.push_back(data::split_csv_line(line));
  }
  if (rows.empty()) throw data::DataError("'" + path.string() + "' is empty");
  return rows;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

void markdown_table(std::ostream& os, const std::vector<std::string>& header,
                    const std::vector<std::vector<std::string>>& rows) {
  os << '|';
  for (const auto& h : header) os << ' ' << h << " |";
  os << "\n|";
  for (std::size_t i = 0; i < header.size(); ++i) os << "---|";
  os << '\n';
  for (const auto& r : rows) {
    os << '|';
    for (const auto& c : r) os << ' ' << c << " |";
    os << '\n';
  }
  os << '\n';
}

void report_features(std::ostream& md, const std::string& explainer, const json& table, std::size_t top) {
  md << "### " << explainer << "\n\n";
  for (const char* modality : {"events", "tokens", "vitals"}) {
    const auto& list = table.at(modality);
    std::vector<std::vector<std::string>> pos, neg;
    for (std::size_t i = 0; i < list.size() && pos.size() < top; ++i) {
      if (list[i].at("mean").get<double>() > 0.0) {
        pos.push_back({list[i].at("name").get<std::string>(), fmt(list[i].at("mean").get<double>()),
                       std::to_string(list[i].at("count").get<std::size_t>())});
      }
    }
    for (std::size_t i = list.size(); i-- > 0 && neg.size() < top;) {
      if (list[i].at("mean").get<double>() < 0.0) {
        neg.push_back({list[i].at("name").get<std::string>(), fmt(list[i].at("mean").get<double>()),
                       std::to_string(list[i].at("count").get<std::size_t>())});
      }
    }
    md << "Top positive " << modality << ":\n\n";
    markdown_table(md, {"feature", "mean attribution", "count"}, pos);
    md << "Top negative " << modality << ":\n\n";
    markdown_table(md, {"feature", "mean attribution", "count"}, neg);
  }
}

void run_report(const ReportOptions& o, std::ostream& out) {
  const fs::path dir = o.run;
  if (!fs::is_directory(dir)) throw data::DataError("missing run directory: '" + dir.string() + "'");
  const fs::path summary = dir / "au_summary.csv", curves = dir / "curves.csv";
  require_file(summary, "perturbation summary");
  require_file(curves, "perturbation curves");

  const fs::path target = o.out.empty() ? dir / "report.md" : fs::path(o.out);
  auto md = open_for_write(target);
  md << "# Run report\n\n";

  if (fs::is_regular_file(dir / "metrics.csv")) {
    const auto rows = read_csv(dir / "metrics.csv");
    md << "## Test metrics\n\n";
    std::vector<std::vector<std::string>> body;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (rows[i].size() < 5) throw data::DataError("malformed metrics.csv");
      body.push_back({rows[i][0], rows[i][1], fmt(std::stod(rows[i][3])), fmt(std::stod(rows[i][4]))});
    }
    markdown_table(md, {"split", "records", "AUC-ROC", "AUC-PR"}, body);
  }

  md << "## Faithfulness under input removal\n\n";
  md << "Area under the AUC-ROC curve as the least relevant inputs are removed (higher is better).\n\n";
  {
    const auto rows = read_csv(summary);
    std::vector<std::vector<std::string>> body;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (rows[i].size() != 2) throw data::DataError("malformed au_summary.csv");
      body.push_back({rows[i][0], fmt(std::stod(rows[i][1]))});
    }
    markdown_table(md, {"explainer", "AU"}, body);
  }
  {
    const auto rows = read_csv(curves);
    std::vector<std::string> explainers;
    std::map<std::string, std::map<std::string, std::string>> cells;
    std::vector<std::string> fractions;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (rows[i].size() != 3) throw data::DataError("malformed curves.csv");
      const auto& [e, f, v] = std::tie(rows[i][0], rows[i][1], rows[i][2]);
      if (std::find(explainers.begin(), explainers.end(), e) == explainers.end()) explainers.push_back(e);
      if (std::find(fractions.begin(), fractions.end(), f) == fractions.end()) fractions.push_back(f);
      cells[f][e] = fmt(std::stod(v));
    }
    std::vector<std::string> header{"removed fraction"};
    header.insert(header.end(), explainers.begin(), explainers.end());
    std::vector<std::vector<std::string>> body;
    for (const auto& f : fractions) {
      std::vector<std::string> row{fmt(std::stod(f))};
      for (const auto& e : explainers) row.push_back(cells[f].count(e) ? cells[f][e] : "");
      body.push_back(row);
    }
    md << "AUC-ROC at each removal fraction:\n\n";
    markdown_table(md, header, body);
  }

  std::vector<fs::path> feature_files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("features_", 0) == 0 && entry.path().extension() == ".json") feature_files.push_back(entry.path());
  }
  std::sort(feature_files.begin(), feature_files.end());
  if (!feature_files.empty()) {
    md << "## Cohort feature attributions\n\n";
    for (const auto& p : feature_files) {
      std::ifstream is(p);
      const json table = json::parse(is, nullptr, false);
      if (table.is_discarded()) throw data::DataError("malformed '" + p.string() + "'");
      const std::string stem = p.stem().string();
      report_features(md, stem.substr(std::string("features_").size()), table, o.top);
    }
  }

  if (fs::is_regular_file(dir / "reports.jsonl")) {
    std::ifstream is(dir / "reports.jsonl");
    auto heat = open_for_write(dir / "heat_tables.csv");
    heat << "record_id,explainer,modality,time_index,attribution\n";
    md << "## Per-record attribution by time\n\n";
    md << "Relevance summed over features at each time index; full tables in heat_tables.csv.\n\n";
    std::size_t shown = 0;
    for (std::string line; std::getline(is, line);) {
      if (line.empty()) continue;
      const json j = json::parse(line, nullptr, false);
      if (j.is_discarded()) throw data::DataError("malformed reports.jsonl");
      const auto rep = attr::report_from_json(j);
      const auto id = j.at("record_id").get<std::int64_t>();
      const std::string name(attr::explainer_name(rep.kind));
      auto row_sums = [](const ad::Tensor& t) {
        std::vector<double> s(t.rank() == 2 ? t.dim(0) : 0, 0.0);
        for (std::size_t r = 0; r < s.size(); ++r) {
          for (std::size_t c = 0; c < t.dim(1); ++c) s[r] += t.at(r, c);
        }
        return s;
      };
      const auto ev = row_sums(rep.events), vi = row_sums(rep.vitals);
      for (std::size_t t = 0; t < ev.size(); ++t) heat << id << ',' << name << ",events," << t << ',' << ev[t] << '\n';
      for (std::size_t t = 0; t < rep.notes.size(); ++t) {
        heat << id << ',' << name << ",notes," << t << ',' << rep.notes[t] << '\n';
      }
      for (std::size_t t = 0; t < vi.size(); ++t) heat << id << ',' << name << ",vitals," << t << ',' << vi[t] << '\n';
      if (shown >= o.heat_records) continue;
      ++shown;
      md << "### Record " << id << " (" << name << ", logit " << fmt(rep.target_value) << ")\n\n";
      std::vector<std::vector<std::string>> body;
      for (std::size_t t = 0; t < ev.size(); ++t) body.push_back({std::to_string(t), fmt(ev[t])});
      markdown_table(md, {"hour", "event relevance"}, body);
      const auto tokens = j.value("tokens", std::vector<std::string>{});
      std::vector<std::size_t> order(rep.notes.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return rep.notes[a] > rep.notes[b]; });
      body.clear();
      for (std::size_t k = 0; k < order.size() && body.size() < o.top; ++k) {
        const std::size_t t = order[k];
        body.push_back({std::to_string(t), t < tokens.size() ? tokens[t] : "?", fmt(rep.notes[t])});
      }
      markdown_table(md, {"position", "token", "relevance"}, body);
    }
  }
  out << "wrote " << target.string() << '\n';
}

std::vector<std::string> to_args(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 0; i < argc; ++i) args.emplace_back(argv[i]);
  return args;
}

void add_inference_options(CLI::App* sub, InferenceOptions& o) {
  sub->add_option("--model", o.model, "checkpoint file or training output directory")->required();
  sub->add_option("--data", o.data, "dataset file or directory")->required();
  sub->add_option("--out", o.out, "output directory")->required();
  sub->add_option("--split", o.split, "records to use: test (the checkpoint's held-out fold) or all")
      ->capture_default_str();
  sub->add_option("--seed", o.seed, "run seed")->capture_default_str();
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Explainable multimodal mortality prediction: data, training, attribution and evaluation"};
  app.set_config("--config", "", "INI configuration file; command-line flags override it");
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", std::string(build_version()));

  SynthOptions so;
  auto* synth = app.add_subcommand("synth", "generate a synthetic cohort with planted signals");
  synth->add_option("--out", so.out, "output directory")->required();
  synth->add_option("--seed", so.seed, "generator seed")->capture_default_str();
  synth->add_option("--records", so.spec.records, "cohort size")->capture_default_str();
  synth->add_option("--positive-rate", so.spec.positive_rate)->capture_default_str();
  synth->add_option("--noise-rate", so.spec.noise_rate, "label noise")->capture_default_str();
  synth->add_option("--planting", so.planting, "all or complementary")->capture_default_str();
  synth->add_option("--hours", so.spec.hours)->capture_default_str();
  synth->add_option("--note-words", so.spec.note_words)->capture_default_str();
  synth->add_option("--background-words", so.spec.background_words)->capture_default_str();
  synth->add_option("--vital-steps", so.spec.vital_steps)->capture_default_str();

  PreprocessOptions po;
  auto* prep = app.add_subcommand("preprocess", "turn raw CSV/JSONL exports into a dataset");
  prep->add_option("--events", po.events, "events CSV: stay_id,time,feature,value")->required();
  prep->add_option("--notes", po.notes, "notes JSONL")->required();
  prep->add_option("--vitals", po.vitals, "vitals CSV: stay_id,channel,time,value")->required();
  prep->add_option("--labels", po.labels, "labels CSV: stay_id,label")->required();
  prep->add_option("--normal-values", po.normal_values, "normal-value table JSON (default: built-in)");
  prep->add_option("--min-count", po.min_count, "minimum word frequency for the vocabulary")->capture_default_str();
  prep->add_option("--hours", po.hours, "observation window")->capture_default_str();
  prep->add_option("--max-words", po.max_words)->capture_default_str();
  prep->add_option("--out", po.out, "output directory")->required();

  TrainOptions to;
  auto* trn = app.add_subcommand("train", "train on one stratified fold, or cross-validate");
  trn->add_option("--data", to.data, "dataset file or directory")->required();
  trn->add_option("--out", to.out, "output directory")->required();
  trn->add_option("--seed", to.seed, "run seed")->capture_default_str();
  trn->add_option("--batch-size", to.train.batch_size)->capture_default_str();
  trn->add_option("--learning-rate", to.train.learning_rate)->capture_default_str();
  trn->add_option("--dropout", to.train.dropout)->capture_default_str();
  trn->add_option("--layers", to.train.layers, "transformer blocks per encoder")->capture_default_str();
  trn->add_option("--heads", to.train.heads)->capture_default_str();
  trn->add_option("--positive-weight", to.train.positive_weight, "class weight of deaths, in [1, 3]")
      ->capture_default_str();
  trn->add_option("--epochs", to.train.epochs)->capture_default_str();
  trn->add_option("--patience", to.train.patience, "early-stopping patience in epochs")->capture_default_str();
  trn->add_option("--clip-norm", to.train.clip_norm)->capture_default_str();
  trn->add_flag("--no-upsample", to.no_upsample, "train on the raw class balance");
  trn->add_option("--hidden", to.hidden)->capture_default_str();
  trn->add_option("--ffn", to.ffn)->capture_default_str();
  trn->add_option("--fusion-hidden", to.fusion_hidden)->capture_default_str();
  trn->add_option("--modalities", to.modalities, "e.g. events+vitals")->capture_default_str();
  trn->add_flag("--bias-free", to.bias_free, "drop every additive intercept");
  trn->add_option("--folds", to.folds)->capture_default_str();
  trn->add_option("--fold", to.fold, "held-out test fold")->capture_default_str();
  trn->add_option("--validation-fraction", to.validation_fraction)->capture_default_str();
  trn->add_flag("--cross-validate", to.cross_validate, "score every fold instead of saving a model");
  trn->add_option("--seeds", to.seeds, "cross-validation seeds");

  InferenceOptions eo;
  auto* evl = app.add_subcommand("eval", "score a checkpoint: AUC-ROC and AUC-PR");
  add_inference_options(evl, eo);

  ExplainCliOptions xo;
  auto* exp = app.add_subcommand("explain", "attribute predictions and aggregate per feature");
  add_inference_options(exp, xo.io);
  exp->add_option("--explainers", xo.explainers, "explainer names or 'all'")->capture_default_str();
  exp->add_option("--target", xo.target, "class to explain")->capture_default_str();
  exp->add_option("--ig-steps", xo.ig_steps)->capture_default_str();
  exp->add_option("--lrp-epsilon", xo.lrp_epsilon)->capture_default_str();
  exp->add_option("--cohort", xo.cohort, "records aggregated: positive, predicted or all")->capture_default_str();
  exp->add_option("--min-token-count", xo.min_token_count)->capture_default_str();
  exp->add_option("--max-records", xo.max_records, "explain at most this many records (0: all)")
      ->capture_default_str();

  PerturbCliOptions pxo;
  auto* per = app.add_subcommand("perturb", "compare explainers by removing inputs");
  add_inference_options(per, pxo.io);
  per->add_option("--explainers", pxo.explainers, "explainer names or 'all'")->capture_default_str();
  per->add_option("--fractions", pxo.fractions, "removal fractions")->capture_default_str();
  per->add_option("--target", pxo.target)->capture_default_str();
  per->add_option("--ig-steps", pxo.ig_steps)->capture_default_str();
  per->add_option("--lrp-epsilon", pxo.lrp_epsilon)->capture_default_str();
  per->add_option("--order", pxo.order, "ascending removes the least relevant first")->capture_default_str();

  ReportOptions ro;
  auto* rep = app.add_subcommand("report", "markdown summary of a run directory");
  rep->add_option("--run", ro.run, "directory holding perturb (and optionally eval/explain) outputs")->required();
  rep->add_option("--out", ro.out, "report path (default RUN/report.md)");
  rep->add_option("--top", ro.top, "rows per feature table")->capture_default_str();
  rep->add_option("--heat-records", ro.heat_records)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    app.exit(e, out, err);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\nrun with --help for usage\n";
    return kExitUsage;
  }

  const auto args = to_args(argc, argv);
  const std::string resolved = app.config_to_str(true, false);
  try {
    auto with_log = [&](const std::string& name, const std::string& dir, std::uint64_t seed, auto&& body) {
      RunLog log(dir);
      write_manifest(dir, name, args, resolved, seed);
      log.write("start", {{"command", name}, {"arguments", args}, {"version", std::string(build_version())}});
      body(log);
      log.write("done", {{"command", name}});
    };
    if (*synth) with_log("synth", so.out, so.seed, [&](RunLog& l) { run_synth(so, l, out); });
    if (*prep) with_log("preprocess", po.out, 0, [&](RunLog& l) { run_preprocess(po, l, out); });
    if (*trn) with_log("train", to.out, to.seed, [&](RunLog& l) { run_train(to, l, out); });
    if (*evl) with_log("eval", eo.out, eo.seed, [&](RunLog& l) { run_eval(eo, l, out); });
    if (*exp) with_log("explain", xo.io.out, xo.io.seed, [&](RunLog& l) { run_explain(xo, l, out); });
    if (*per) with_log("perturb", pxo.io.out, pxo.io.seed, [&](RunLog& l) { run_perturb(pxo, l, out); });
    if (*rep) run_report(ro, out);
    return kExitOk;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const data::DataError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const data::RecordRejected& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const model::CheckpointError& e) {
    err << "checkpoint error: " << e.what() << '\n';
    return kExitData;
  } catch (const ContainerError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const metrics::MetricError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ad::ShapeError& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::invalid_argument& e) {
    // Out-of-range option values rejected by a component's validation.
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
}

}  // namespace xmmp::cli
