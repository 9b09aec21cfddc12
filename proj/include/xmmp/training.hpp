#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "xmmp/metrics.hpp"
#include "xmmp/model.hpp"
#include "xmmp/record.hpp"

namespace xmmp::train {

struct TrainConfig {
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double dropout = 0.1;
  // Blocks per encoder and heads per block.
  std::size_t layers = 2;
  std::size_t heads = 4;
  // w+ on the positive term of the loss, in [1, 3].
  double positive_weight = 1.0;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  bool upsample = true;
  std::size_t patience = 10;
  double clip_norm = 1.0;

  void validate() const;
  // Copies dropout/layers/heads into a model configuration.
  model::ModelConfig apply(model::ModelConfig base) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// -[w y log p + (1 - y) log(1 - p)] with p clamped to [1e-12, 1 - 1e-12].
double cross_entropy(int label, double death_probability, double positive_weight);

// Gradient of cross_entropy with respect to the two class logits.
ad::Tensor cross_entropy_logit_grad(int label, const ad::Tensor& probabilities, double positive_weight);

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::map<std::string, ad::Tensor, std::less<>> m;
  std::map<std::string, ad::Tensor, std::less<>> v;
};

using Gradients = std::map<std::string, ad::Tensor, std::less<>>;

// One bias-corrected Adam update. Parameters without an entry in grads are
// left unchanged. Throws NumericError on a non-finite gradient.
void adam_step(nn::Parameters& params, const Gradients& grads, AdamState& state, double lr);

// lr0 * 0.98^floor(epoch / 10)
double lr_schedule(double lr0, std::size_t epoch);

// Rescales grads in place so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_global_norm(Gradients& grads, double max_norm);

// Indices of a training pass: all records plus positives drawn with
// replacement until both classes have equal counts, shuffled.
std::vector<std::size_t> upsample_positives(std::span<const int> labels, std::mt19937_64& rng);

// ---- splits -------------------------------------------------------------------

struct SplitPlan {
  // fold[i] is the test fold of record i.
  std::vector<std::size_t> fold;
  std::size_t folds = 5;
  double validation_fraction = 0.2;
  std::uint64_t seed = 0;

  std::vector<std::size_t> test_indices(std::size_t k) const;
  std::vector<std::size_t> train_indices(std::size_t k) const;
};

// Label-stratified fold assignment.
SplitPlan stratified_folds(std::span<const int> labels, std::size_t folds, std::uint64_t seed);

struct TrainValidation {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

// Stratified split of `indices` holding out `fraction` of each class.
TrainValidation split_validation(std::span<const std::size_t> indices, std::span<const int> labels, double fraction,
                                 std::uint64_t seed);

// ---- training -----------------------------------------------------------------

struct EpochLog {
  std::size_t epoch = 0;
  double learning_rate = 0.0;
  double train_loss = 0.0;
  double validation_auc_roc = 0.0;
  double validation_loss = 0.0;
};

struct TrainResult {
  model::XmmpModel model;
  std::vector<EpochLog> history;
  std::size_t best_epoch = 0;
  double best_validation_auc_roc = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Mini-batch Adam with early stopping on validation AUC-ROC. The returned
// model holds the best-validation weights. An empty validation set disables
// early stopping and keeps the final weights.
TrainResult train_model(const model::ModelConfig& model_config, const TrainConfig& config,
                        std::span<const MultimodalRecord> train, std::span<const MultimodalRecord> validation,
                        const EpochCallback& on_epoch = {});

// Weighted cross-entropy averaged over records (eval mode).
double mean_loss(const model::XmmpModel& model, std::span<const MultimodalRecord> records, double positive_weight);

struct Evaluation {
  double auc_roc = 0.0;
  double auc_pr = 0.0;
  std::vector<double> scores;
  std::vector<int> labels;
};

Evaluation evaluate(const model::XmmpModel& model, std::span<const MultimodalRecord> records);

// ---- cross-validation and grid search ---------------------------------------

struct CvRow {
  std::size_t config_id = 0;
  std::size_t fold = 0;
  std::uint64_t seed = 0;
  double auc_roc = 0.0;
  double auc_pr = 0.0;
};

// Called once per fold before training, e.g. to fit normalisation on the
// training part and apply it to all three parts.
using FoldPrepare = std::function<void(std::vector<MultimodalRecord>& train, std::vector<MultimodalRecord>& validation,
                                       std::vector<MultimodalRecord>& test)>;

// For each seed and fold: split the fold's training part into train and
// validation, train, and score on the held-out fold.
std::vector<CvRow> cross_validate(const model::ModelConfig& model_config, const TrainConfig& config,
                                  std::span<const MultimodalRecord> records, std::size_t folds,
                                  std::span<const std::uint64_t> seeds, std::size_t config_id = 0,
                                  const FoldPrepare& prepare = {});

void write_cv_csv(const std::filesystem::path& path, std::span<const CvRow> rows,
                  std::span<const TrainConfig> configs);

struct SearchSpace {
  std::vector<std::size_t> batch_sizes;
  std::vector<double> learning_rates;
  std::vector<double> dropouts;
  std::vector<std::size_t> layers;
  std::vector<std::size_t> heads;
  std::vector<double> positive_weights;

  std::size_t size() const;
  // Cartesian product in a fixed nesting order; unset fields come from base.
  std::vector<TrainConfig> expand(const TrainConfig& base) const;
};

// Discretised hyperparameter ranges per modality.
SearchSpace table_space(Modality m);

struct GridResult {
  TrainConfig best;
  std::size_t best_id = 0;
  metrics::Summary best_auc_roc;
  metrics::Summary best_auc_pr;
  std::vector<TrainConfig> configs;
  std::vector<CvRow> rows;
};

// Best configuration by mean cross-validated AUC-ROC; the first config wins
// ties.
GridResult grid_search(const SearchSpace& space, const TrainConfig& base, const model::ModelConfig& model_config,
                       std::span<const MultimodalRecord> records, std::size_t folds,
                       std::span<const std::uint64_t> seeds);

}  // namespace xmmp::train
