#pragma once

// Deletion-style faithfulness: remove the least relevant inputs of every
// test record in growing fractions and track test AUC-ROC.

#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "xmmp/attribution.hpp"
#include "xmmp/model.hpp"

namespace xmmp::perturb {

// One removal unit: an (hour, column) event cell, a token position or a
// (step, channel) vitals cell. index is row-major within its modality.
struct FeatureRef {
  Modality modality = Modality::events;
  std::size_t index = 0;
  bool operator==(const FeatureRef&) const = default;
};

// Removal units of a record. The leading [CLS] token is never removed.
std::vector<FeatureRef> removal_units(const MultimodalRecord& record);

// Units sorted by |attribution| ascending; ties by modality then index.
std::vector<FeatureRef> rank_features(const attr::AttributionReport& report, const MultimodalRecord& record);

// Copy of the record with the given units set to their baseline: 0 for
// event and vitals cells, [PAD] for tokens.
MultimodalRecord perturb(const MultimodalRecord& record, std::span<const FeatureRef> removed);

struct PerturbationCurve {
  attr::ExplainerKind kind = attr::ExplainerKind::lrptrans;
  std::vector<double> fractions;
  std::vector<double> auc_roc;
  double au = 0.0;
  std::uint64_t seed = 0;
};

std::vector<double> default_fractions();

// Trapezoid area under (fractions, values) divided by the fraction span.
double area_under(std::span<const double> fractions, std::span<const double> values);

enum class Order { ascending, descending };

struct CurveOptions {
  std::vector<double> fractions = default_fractions();
  attr::ExplainOptions explain;
  int target_class = 1;
  // ascending removes the least relevant units first.
  Order order = Order::ascending;
};

// Explains each record once, then for every fraction f removes the first
// floor(f * units) ranked units of each record and scores the test set.
PerturbationCurve perturbation_curve(const model::XmmpModel& model, std::span<const MultimodalRecord> test,
                                     attr::ExplainerKind kind, const CurveOptions& options = {});

// Same, from precomputed reports (one per record).
PerturbationCurve perturbation_curve(const model::XmmpModel& model, std::span<const MultimodalRecord> test,
                                     std::span<const attr::AttributionReport> reports, const CurveOptions& options);

using ProgressFn = std::function<void(const PerturbationCurve&)>;

std::vector<PerturbationCurve> compare_explainers(const model::XmmpModel& model,
                                                  std::span<const MultimodalRecord> test,
                                                  std::span<const attr::ExplainerKind> kinds,
                                                  const CurveOptions& options = {}, const ProgressFn& progress = {});

// (explainer, fraction, auc_roc) rows.
void write_curves_csv(const std::filesystem::path& path, std::span<const PerturbationCurve> curves);
// (explainer, au) rows.
void write_summary_csv(const std::filesystem::path& path, std::span<const PerturbationCurve> curves);
// Whitespace table: fraction column then one column per explainer.
void write_plot_table(const std::filesystem::path& path, std::span<const PerturbationCurve> curves);

}  // namespace xmmp::perturb
