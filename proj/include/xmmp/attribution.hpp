#pragma once

// Per-record explanations of the class logit. LRPTrans is Gradient x Input
// on the attribution-mode network; the baselines are random scores, raw
// last-layer attention, attention rollout, integrated gradients and
// epsilon-LRP.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "xmmp/model.hpp"
#include "xmmp/preprocess.hpp"

namespace xmmp::attr {

enum class ExplainerKind { random, attention_last, attention_rollout, integrated_gradients, lrp_epsilon, lrptrans };

inline constexpr std::array<ExplainerKind, 6> kAllExplainers{
    ExplainerKind::random,           ExplainerKind::attention_last, ExplainerKind::attention_rollout,
    ExplainerKind::integrated_gradients, ExplainerKind::lrp_epsilon, ExplainerKind::lrptrans};

std::string_view explainer_name(ExplainerKind k);
ExplainerKind parse_explainer(std::string_view name);

struct AttributionReport {
  ExplainerKind kind = ExplainerKind::lrptrans;
  int target_class = 1;
  // Logit of target_class on the unperturbed record.
  double target_value = 0.0;
  ad::Tensor events;           // hours x event width
  std::vector<double> notes;   // one value per token position
  ad::Tensor vitals;           // steps x channels
  std::array<double, 3> modality_sums{};

  double total() const { return modality_sums[0] + modality_sums[1] + modality_sums[2]; }
  // Recomputes modality_sums from the element attributions.
  void update_sums();
};

// target_value - sum of all element attributions.
double conservation_residual(const AttributionReport& report);

struct ExplainOptions {
  std::size_t ig_steps = 20;
  double lrp_epsilon = 1e-6;
  // Mixed with the record id to seed the random explainer.
  std::uint64_t seed = 0;
};

// R = x * d(logit_target)/dx at every input leaf. Token relevance sums the
// embedding dimensions. mode = attribution gives LRPTrans.
AttributionReport gi_attribute(const model::XmmpModel& model, const MultimodalRecord& record, int target_class,
                               nn::Mode mode = nn::Mode::attribution, double lrp_epsilon = 0.0);

AttributionReport explain(ExplainerKind kind, const model::XmmpModel& model, const MultimodalRecord& record,
                          int target_class, const ExplainOptions& options = {});

// The same two rules on a plain scalar function of one tensor, which is how
// they are checked against closed forms.
using ScalarGraph = std::function<ad::Var(const ad::Var& x)>;
ad::Tensor gradient_x_input(const ScalarGraph& f, const ad::Tensor& x);
// x * (1/S) sum_s grad f(alpha_s x), alpha_s = (s - 0.5) / S.
ad::Tensor integrated_gradients(const ScalarGraph& f, const ad::Tensor& x, std::size_t steps);

// Logit of target_class at input scale alpha (standard mode).
double scaled_logit(const model::XmmpModel& model, const MultimodalRecord& record, int target_class, double alpha);

// Attention rollout: row-normalised 0.5 (A + I) per layer, multiplied from
// the first layer up; returns the product.
ad::Tensor attention_rollout(std::span<const ad::Tensor> head_averaged);

// ---- cohort aggregation -------------------------------------------------------

struct FeatureScore {
  std::string name;
  double mean = 0.0;
  std::size_t count = 0;
};

struct FeatureTable {
  // Each list sorted by mean descending, ties by name.
  std::vector<FeatureScore> events;
  std::vector<FeatureScore> tokens;
  std::vector<FeatureScore> vitals;
};

struct AggregateOptions {
  std::size_t min_token_count = 100;
};

// Events: per named feature (value and mask columns), summed over hours,
// averaged over the cohort. Vitals: per channel, summed over steps, averaged
// over the cohort. Tokens: per vocabulary entry, mean attribution per
// occurrence, keeping entries seen at least min_token_count times.
FeatureTable aggregate_feature_attributions(std::span<const AttributionReport> reports,
                                            std::span<const MultimodalRecord> records,
                                            const data::NormalValueTable& table, const data::Vocabulary& vocabulary,
                                            const AggregateOptions& options = {});

// ---- serialisation ------------------------------------------------------------

nlohmann::json report_to_json(const AttributionReport& report, std::int64_t record_id);
AttributionReport report_from_json(const nlohmann::json& j);

// Rows of (record_id, explainer, modality, feature_id, time_index, attribution).
void write_report_csv_header(std::ostream& os);
void write_report_csv(std::ostream& os, const AttributionReport& report, const MultimodalRecord& record);

}  // namespace xmmp::attr
