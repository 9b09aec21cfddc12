#include "xmmp/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "xmmp/util.hpp"

namespace xmmp::train {

using ad::Tensor;

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("learning_rate must be positive");
  }
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must lie in [0, 1)");
  if (layers == 0) throw std::invalid_argument("layers must be positive");
  if (heads == 0) throw std::invalid_argument("heads must be positive");
  if (positive_weight < 1.0 || positive_weight > 3.0) {
    throw std::invalid_argument("positive_weight must lie in [1, 3]");
  }
  if (epochs == 0) throw std::invalid_argument("epochs must be positive");
  if (!(clip_norm > 0.0)) throw std::invalid_argument("clip_norm must be positive");
}

model::ModelConfig TrainConfig::apply(model::ModelConfig base) const {
  base.dropout = dropout;
  base.event_blocks = base.note_blocks = base.vital_blocks = layers;
  base.heads = heads;
  return base;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
       {"dropout", c.dropout},       {"layers", c.layers},
       {"heads", c.heads},           {"positive_weight", c.positive_weight},
       {"epochs", c.epochs},         {"seed", c.seed},
       {"upsample", c.upsample},     {"patience", c.patience},
       {"clip_norm", c.clip_norm}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("batch_size").get_to(c.batch_size);
  j.at("learning_rate").get_to(c.learning_rate);
  j.at("dropout").get_to(c.dropout);
  j.at("layers").get_to(c.layers);
  j.at("heads").get_to(c.heads);
  j.at("positive_weight").get_to(c.positive_weight);
  j.at("epochs").get_to(c.epochs);
  j.at("seed").get_to(c.seed);
  j.at("upsample").get_to(c.upsample);
  j.at("patience").get_to(c.patience);
  j.at("clip_norm").get_to(c.clip_norm);
}

// ---- loss and optimiser -----------------------------------------------------------

double cross_entropy(int label, double p, double w) {
  constexpr double kClamp = 1e-12;
  p = std::clamp(p, kClamp, 1.0 - kClamp);
  return -(w * label * std::log(p) + (1 - label) * std::log(1.0 - p));
}

Tensor cross_entropy_logit_grad(int label, const Tensor& probabilities, double w) {
  // d/dz of -w_y log softmax(z)_y is w_y (p - onehot(y)).
  const double wy = label == 1 ? w : 1.0;
  Tensor g({2});
  g[0] = wy * (probabilities[0] - (label == 0 ? 1.0 : 0.0));
  g[1] = wy * (probabilities[1] - (label == 1 ? 1.0 : 0.0));
  return g;
}

void adam_step(nn::Parameters& params, const Gradients& grads, AdamState& s, double lr) {
  for (const auto& [name, g] : grads) {
    if (!g.all_finite()) throw ad::NumericError("non-finite gradient for '" + name + "'");
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (const auto& [name, g] : grads) {
    Tensor& p = params.at(name);
    if (p.shape() != g.shape()) throw ad::ShapeError("gradient shape mismatch for '" + name + "'");
    auto [mit, m_new] = s.m.try_emplace(name, Tensor(g.shape()));
    auto [vit, v_new] = s.v.try_emplace(name, Tensor(g.shape()));
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + s.eps);
    }
  }
}

double lr_schedule(double lr0, std::size_t epoch) { return lr0 * std::pow(0.98, static_cast<double>(epoch / 10)); }

double clip_global_norm(Gradients& grads, double max_norm) {
  double ss = 0.0;
  for (const auto& [name, g] : grads) {
    for (double v : g.values()) ss += v * v;
  }
  const double norm = std::sqrt(ss);
  if (norm > max_norm) {
    const double f = max_norm / norm;
    for (auto& [name, g] : grads) {
      for (double& v : g.values()) v *= f;
    }
  }
  return norm;
}

std::vector<std::size_t> upsample_positives(std::span<const int> labels, std::mt19937_64& rng) {
  std::vector<std::size_t> pos, out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 1) pos.push_back(i);
    out.push_back(i);
  }
  if (pos.empty()) throw std::invalid_argument("cannot upsample: no positive records");
  const std::size_t neg = labels.size() - pos.size();
  std::uniform_int_distribution<std::size_t> pick(0, pos.size() - 1);
  for (std::size_t n = pos.size(); n < neg; ++n) out.push_back(pos[pick(rng)]);
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

// ---- splits -------------------------------------------------------------------

std::vector<std::size_t> SplitPlan::test_indices(std::size_t k) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold.size(); ++i) {
    if (fold[i] == k) out.push_back(i);
  }
  return out;
}

std::vector<std::size_t> SplitPlan::train_indices(std::size_t k) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < fold.size(); ++i) {
    if (fold[i] != k) out.push_back(i);
  }
  return out;
}

SplitPlan stratified_folds(std::span<const int> labels, std::size_t folds, std::uint64_t seed) {
  if (folds < 2) throw std::invalid_argument("need at least two folds");
  if (labels.size() < folds) throw std::invalid_argument("fewer records than folds");
  SplitPlan plan;
  plan.folds = folds;
  plan.seed = seed;
  plan.fold.assign(labels.size(), 0);
  std::mt19937_64 rng(seed);
  // Deal each class round-robin after shuffling; the negative deal starts
  // where the positive one stopped so fold sizes differ by at most one.
  std::size_t next = 0;
  for (int cls : {1, 0}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == cls) members.push_back(i);
    }
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t i : members) {
      plan.fold[i] = next;
      next = (next + 1) % folds;
    }
  }
  return plan;
}

TrainValidation split_validation(std::span<const std::size_t> indices, std::span<const int> labels, double fraction,
                                 std::uint64_t seed) {
  if (fraction < 0.0 || fraction >= 1.0) throw std::invalid_argument("validation fraction must lie in [0, 1)");
  std::mt19937_64 rng(seed);
  TrainValidation out;
  for (int cls : {1, 0}) {
    std::vector<std::size_t> members;
    for (std::size_t i : indices) {
      if (labels[i] == cls) members.push_back(i);
    }
    std::shuffle(members.begin(), members.end(), rng);
    const auto held = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(members.size())));
    out.validation.insert(out.validation.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(held));
    out.train.insert(out.train.end(), members.begin() + static_cast<std::ptrdiff_t>(held), members.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.validation.begin(), out.validation.end());
  return out;
}

// ---- training -----------------------------------------------------------------

namespace {

std::vector<int> labels_of(std::span<const MultimodalRecord> records) {
  std::vector<int> y;
  y.reserve(records.size());
  for (const auto& r : records) y.push_back(r.label);
  return y;
}

bool both_classes(std::span<const int> labels) {
  const auto pos = std::count(labels.begin(), labels.end(), 1);
  return pos > 0 && static_cast<std::size_t>(pos) < labels.size();
}

// Forward and backward for one record; adds parameter gradients into acc and
// returns the loss.
double accumulate_record(const model::XmmpModel& m, const MultimodalRecord& r, const TrainConfig& config,
                         std::mt19937_64& rng, Gradients& acc) {
  ad::Tape tape;
  nn::Bindings bind(tape, m.parameters());
  model::ForwardOptions opt;
  opt.training = true;
  opt.rng = &rng;
  const auto pass = m.forward(bind, r, opt);
  const Tensor& p = pass.probabilities.value();
  const double loss = cross_entropy(r.label, p[1], config.positive_weight);
  tape.backward(pass.logits, cross_entropy_logit_grad(r.label, p, config.positive_weight));
  for (const auto& [name, var] : bind.bound()) {
    const Tensor& g = tape.grad(var);
    auto [it, fresh] = acc.try_emplace(name, g);
    if (!fresh) {
      Tensor& a = it->second;
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += g[i];
    }
  }
  return loss;
}

}  // namespace

TrainResult train_model(const model::ModelConfig& model_config, const TrainConfig& config,
                        std::span<const MultimodalRecord> train, std::span<const MultimodalRecord> validation,
                        const EpochCallback& on_epoch) {
  config.validate();
  if (train.empty()) throw std::invalid_argument("training set is empty");
  const model::ModelConfig mc = config.apply(model_config);
  TrainResult result{model::XmmpModel(mc, derive_seed(config.seed, "init")), {}, 0, 0.0};
  model::XmmpModel& m = result.model;

  const std::vector<int> train_labels = labels_of(train);
  const std::vector<int> val_labels = labels_of(validation);
  const bool early_stopping = !validation.empty();
  const bool val_auc = both_classes(val_labels);

  std::mt19937_64 order_rng(derive_seed(config.seed, "order"));
  std::mt19937_64 dropout_rng(derive_seed(config.seed, "dropout"));
  AdamState adam;
  nn::Parameters best = m.parameters();
  double best_score = -std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order;
    if (config.upsample && both_classes(train_labels)) {
      order = upsample_positives(train_labels, order_rng);
    } else {
      order.resize(train.size());
      std::iota(order.begin(), order.end(), 0);
      std::shuffle(order.begin(), order.end(), order_rng);
    }
    const double lr = lr_schedule(config.learning_rate, epoch);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      Gradients grads;
      for (std::size_t b = start; b < end; ++b) {
        loss_sum += accumulate_record(m, train[order[b]], config, dropout_rng, grads);
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      for (auto& [name, g] : grads) {
        for (double& v : g.values()) v *= inv;
      }
      clip_global_norm(grads, config.clip_norm);
      adam_step(m.parameters(), grads, adam, lr);
    }

    EpochLog log;
    log.epoch = epoch;
    log.learning_rate = lr;
    log.train_loss = loss_sum / static_cast<double>(order.size());
    if (early_stopping) {
      const Evaluation ev = [&] {
        if (val_auc) return evaluate(m, validation);
        Evaluation e;
        return e;
      }();
      log.validation_auc_roc = ev.auc_roc;
      log.validation_loss = mean_loss(m, validation, config.positive_weight);
    }
    result.history.push_back(log);
    if (on_epoch) on_epoch(log);

    if (!early_stopping) continue;
    // Single-class validation sets fall back to validation loss.
    const double score = val_auc ? log.validation_auc_roc : -log.validation_loss;
    if (score > best_score) {
      best_score = score;
      best = m.parameters();
      result.best_epoch = epoch;
      result.best_validation_auc_roc = log.validation_auc_roc;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  if (early_stopping) {
    m.parameters() = std::move(best);
  } else {
    result.best_epoch = config.epochs - 1;
  }
  return result;
}

double mean_loss(const model::XmmpModel& m, std::span<const MultimodalRecord> records, double positive_weight) {
  if (records.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& r : records) sum += cross_entropy(r.label, m.predict(r).death_probability(), positive_weight);
  return sum / static_cast<double>(records.size());
}

Evaluation evaluate(const model::XmmpModel& m, std::span<const MultimodalRecord> records) {
  Evaluation ev;
  ev.labels = labels_of(records);
  ev.scores.reserve(records.size());
  for (const auto& r : records) ev.scores.push_back(m.predict(r).death_probability());
  ev.auc_roc = metrics::auc_roc(ev.labels, ev.scores);
  ev.auc_pr = metrics::auc_pr(ev.labels, ev.scores);
  return ev;
}

// ---- cross-validation and grid search ---------------------------------------

std::vector<CvRow> cross_validate(const model::ModelConfig& model_config, const TrainConfig& config,
                                  std::span<const MultimodalRecord> records, std::size_t folds,
                                  std::span<const std::uint64_t> seeds, std::size_t config_id,
                                  const FoldPrepare& prepare) {
  if (seeds.empty()) throw std::invalid_argument("cross-validation needs at least one seed");
  const std::vector<int> labels = labels_of(records);
  std::vector<CvRow> rows;
  for (std::uint64_t seed : seeds) {
    const SplitPlan plan = stratified_folds(labels, folds, derive_seed(seed, "folds"));
    for (std::size_t k = 0; k < folds; ++k) {
      const auto train_idx = plan.train_indices(k);
      const auto test_idx = plan.test_indices(k);
      const auto tv = split_validation(train_idx, labels, plan.validation_fraction,
                                       derive_seed(seed, "validation" + std::to_string(k)));
      auto gather = [&](const std::vector<std::size_t>& idx) {
        std::vector<MultimodalRecord> out;
        out.reserve(idx.size());
        for (std::size_t i : idx) out.push_back(records[i]);
        return out;
      };
      TrainConfig run = config;
      run.seed = derive_seed(seed, "train" + std::to_string(k));
      auto train = gather(tv.train), validation = gather(tv.validation), test = gather(test_idx);
      if (prepare) prepare(train, validation, test);
      const auto trained = train_model(model_config, run, train, validation);
      const auto ev = evaluate(trained.model, test);
      rows.push_back({config_id, k, seed, ev.auc_roc, ev.auc_pr});
    }
  }
  return rows;
}

void write_cv_csv(const std::filesystem::path& path, std::span<const CvRow> rows,
                  std::span<const TrainConfig> configs) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  os << "config_id,batch_size,learning_rate,dropout,layers,heads,positive_weight,fold,seed,auc_roc,auc_pr\n";
  os << std::setprecision(17);
  for (const auto& r : rows) {
    const TrainConfig& c = configs[r.config_id];
    os << r.config_id << ',' << c.batch_size << ',' << c.learning_rate << ',' << c.dropout << ',' << c.layers << ','
       << c.heads << ',' << c.positive_weight << ',' << r.fold << ',' << r.seed << ',' << r.auc_roc << ','
       << r.auc_pr << '\n';
  }
}

std::size_t SearchSpace::size() const {
  auto n = [](std::size_t k) { return std::max<std::size_t>(k, 1); };
  return n(batch_sizes.size()) * n(learning_rates.size()) * n(dropouts.size()) * n(layers.size()) *
         n(heads.size()) * n(positive_weights.size());
}

std::vector<TrainConfig> SearchSpace::expand(const TrainConfig& base) const {
  auto or_base = [](const auto& values, auto fallback) {
    using T = std::decay_t<decltype(fallback)>;
    return values.empty() ? std::vector<T>{fallback} : std::vector<T>(values.begin(), values.end());
  };
  std::vector<TrainConfig> out;
  for (auto b : or_base(batch_sizes, base.batch_size))
    for (auto lr : or_base(learning_rates, base.learning_rate))
      for (auto d : or_base(dropouts, base.dropout))
        for (auto l : or_base(layers, base.layers))
          for (auto h : or_base(heads, base.heads))
            for (auto w : or_base(positive_weights, base.positive_weight)) {
              TrainConfig c = base;
              c.batch_size = b;
              c.learning_rate = lr;
              c.dropout = d;
              c.layers = l;
              c.heads = h;
              c.positive_weight = w;
              out.push_back(c);
            }
  return out;
}

SearchSpace table_space(Modality m) {
  SearchSpace s;
  s.dropouts = {0.1, 0.3, 0.5};
  s.heads = {4, 8, 16, 32};
  s.positive_weights = {1.0, 2.0, 3.0};
  switch (m) {
    case Modality::vitals:
      s.batch_sizes = {8, 16, 32};
      s.learning_rates = {1e-5, 1e-4, 1e-3};
      s.layers = {1, 2, 3, 4};
      break;
    case Modality::notes:
      s.batch_sizes = {8, 16, 32};
      s.learning_rates = {1e-5, 3e-5, 1e-4};
      s.layers = {5, 6, 7, 8, 9, 10};
      break;
    case Modality::events:
      s.batch_sizes = {128, 256, 512};
      s.learning_rates = {1e-5, 1e-4, 1e-3, 1e-2};
      s.layers = {1, 2, 3, 4, 5, 6};
      break;
  }
  return s;
}

GridResult grid_search(const SearchSpace& space, const TrainConfig& base, const model::ModelConfig& model_config,
                       std::span<const MultimodalRecord> records, std::size_t folds,
                       std::span<const std::uint64_t> seeds) {
  if (space.batch_sizes.empty() && space.learning_rates.empty() && space.dropouts.empty() && space.layers.empty() &&
      space.heads.empty() && space.positive_weights.empty()) {
    throw std::invalid_argument("empty search space");
  }
  GridResult g;
  g.configs = space.expand(base);
  double best = -1.0;
  for (std::size_t id = 0; id < g.configs.size(); ++id) {
    auto rows = cross_validate(model_config, g.configs[id], records, folds, seeds, id);
    std::vector<double> roc, pr;
    for (const auto& r : rows) {
      roc.push_back(r.auc_roc);
      pr.push_back(r.auc_pr);
    }
    const auto s_roc = metrics::summarize(roc);
    if (s_roc.mean > best) {
      best = s_roc.mean;
      g.best = g.configs[id];
      g.best_id = id;
      g.best_auc_roc = s_roc;
      g.best_auc_pr = metrics::summarize(pr);
    }
    g.rows.insert(g.rows.end(), rows.begin(), rows.end());
  }
  return g;
}

}  // namespace xmmp::train
