#include "xmmp/perturbation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "xmmp/metrics.hpp"

namespace xmmp::perturb {

std::vector<FeatureRef> removal_units(const MultimodalRecord& record) {
  std::vector<FeatureRef> units;
  for (std::size_t i = 0; i < record.events.values.size(); ++i) units.push_back({Modality::events, i});
  for (std::size_t t = 1; t < record.notes.ids.size(); ++t) units.push_back({Modality::notes, t});
  for (std::size_t i = 0; i < record.vitals.values.size(); ++i) units.push_back({Modality::vitals, i});
  return units;
}

namespace {

double attribution_of(const attr::AttributionReport& r, const FeatureRef& f) {
  switch (f.modality) {
    case Modality::events: return r.events[f.index];
    case Modality::notes: return r.notes.at(f.index);
    case Modality::vitals: return r.vitals[f.index];
  }
  return 0.0;
}

}  // namespace

std::vector<FeatureRef> rank_features(const attr::AttributionReport& report, const MultimodalRecord& record) {
  if (report.events.size() != record.events.values.size() || report.notes.size() != record.notes.ids.size() ||
      report.vitals.size() != record.vitals.values.size()) {
    throw ad::ShapeError("attribution report does not match the record's shape");
  }
  auto units = removal_units(record);
  std::vector<std::pair<double, FeatureRef>> keyed;
  keyed.reserve(units.size());
  for (const auto& u : units) keyed.emplace_back(std::abs(attribution_of(report, u)), u);
  // Units are generated in (modality, index) order, so a stable sort keeps
  // that order among ties.
  std::stable_sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t i = 0; i < keyed.size(); ++i) units[i] = keyed[i].second;
  return units;
}

MultimodalRecord perturb(const MultimodalRecord& record, std::span<const FeatureRef> removed) {
  MultimodalRecord out = record;
  for (const auto& f : removed) {
    switch (f.modality) {
      case Modality::events:
        if (f.index >= out.events.values.size()) throw std::out_of_range("event cell index out of range");
        out.events.values[f.index] = 0.0;
        break;
      case Modality::notes:
        if (f.index >= out.notes.ids.size()) throw std::out_of_range("token position out of range");
        if (f.index == 0) throw std::out_of_range("the [CLS] token cannot be removed");
        out.notes.ids[f.index] = kPadToken;
        break;
      case Modality::vitals:
        if (f.index >= out.vitals.values.size()) throw std::out_of_range("vitals cell index out of range");
        out.vitals.values[f.index] = 0.0;
        break;
    }
  }
  return out;
}

std::vector<double> default_fractions() {
  std::vector<double> f;
  for (int i = 0; i <= 9; ++i) f.push_back(i / 10.0);
  return f;
}

double area_under(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("area needs at least two matching points");
  double area = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    if (!(x[i] > x[i - 1])) throw std::invalid_argument("fractions must be strictly increasing");
    area += 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]);
  }
  return area / (x.back() - x.front());
}

PerturbationCurve perturbation_curve(const model::XmmpModel& model, std::span<const MultimodalRecord> test,
                                     std::span<const attr::AttributionReport> reports, const CurveOptions& options) {
  if (reports.size() != test.size()) throw std::invalid_argument("one report per test record is required");
  for (double f : options.fractions) {
    if (f < 0.0 || f > 1.0) throw std::invalid_argument("removal fractions must lie in [0, 1]");
  }
  std::vector<int> labels;
  for (const auto& r : test) labels.push_back(r.label);

  std::vector<std::vector<FeatureRef>> rankings;
  rankings.reserve(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    auto order = rank_features(reports[i], test[i]);
    if (options.order == Order::descending) std::reverse(order.begin(), order.end());
    rankings.push_back(std::move(order));
  }

  PerturbationCurve curve;
  curve.kind = reports.empty() ? attr::ExplainerKind::lrptrans : reports.front().kind;
  curve.fractions = options.fractions;
  curve.seed = options.explain.seed;
  for (double f : options.fractions) {
    std::vector<double> scores;
    scores.reserve(test.size());
    for (std::size_t i = 0; i < test.size(); ++i) {
      const auto& ranked = rankings[i];
      const auto k = static_cast<std::size_t>(std::floor(f * static_cast<double>(ranked.size()) + 1e-9));
      if (k == 0) {
        scores.push_back(model.predict(test[i]).death_probability());
      } else {
        const auto removed = std::span<const FeatureRef>(ranked).first(std::min(k, ranked.size()));
        scores.push_back(model.predict(perturb(test[i], removed)).death_probability());
      }
    }
    curve.auc_roc.push_back(metrics::auc_roc(labels, scores));
  }
  curve.au = area_under(curve.fractions, curve.auc_roc);
  return curve;
}

PerturbationCurve perturbation_curve(const model::XmmpModel& model, std::span<const MultimodalRecord> test,
                                     attr::ExplainerKind kind, const CurveOptions& options) {
  std::vector<attr::AttributionReport> reports;
  reports.reserve(test.size());
  for (const auto& r : test) reports.push_back(attr::explain(kind, model, r, options.target_class, options.explain));
  auto curve = perturbation_curve(model, test, reports, options);
  curve.kind = kind;
  return curve;
}

std::vector<PerturbationCurve> compare_explainers(const model::XmmpModel& model,
                                                  std::span<const MultimodalRecord> test,
                                                  std::span<const attr::ExplainerKind> kinds,
                                                  const CurveOptions& options, const ProgressFn& progress) {
  std::vector<PerturbationCurve> curves;
  for (auto kind : kinds) {
    curves.push_back(perturbation_curve(model, test, kind, options));
    if (progress) progress(curves.back());
  }
  return curves;
}

namespace {

std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os << std::setprecision(17);
  return os;
}

}  // namespace

void write_curves_csv(const std::filesystem::path& path, std::span<const PerturbationCurve> curves) {
  auto os = open_output(path);
  os << "explainer,fraction,auc_roc\n";
  for (const auto& c : curves) {
    for (std::size_t i = 0; i < c.fractions.size(); ++i) {
      os << attr::explainer_name(c.kind) << ',' << c.fractions[i] << ',' << c.auc_roc[i] << '\n';
    }
  }
}

void write_summary_csv(const std::filesystem::path& path, std::span<const PerturbationCurve> curves) {
  auto os = open_output(path);
  os << "explainer,au\n";
  for (const auto& c : curves) os << attr::explainer_name(c.kind) << ',' << c.au << '\n';
}

void write_plot_table(const std::filesystem::path& path, std::span<const PerturbationCurve> curves) {
  auto os = open_output(path);
  os << std::setprecision(6) << "# fraction";
  for (const auto& c : curves) os << ' ' << attr::explainer_name(c.kind);
  os << '\n';
  if (curves.empty()) return;
  for (std::size_t i = 0; i < curves.front().fractions.size(); ++i) {
    os << curves.front().fractions[i];
    for (const auto& c : curves) os << ' ' << c.auc_roc.at(i);
    os << '\n';
  }
}

}  // namespace xmmp::perturb
