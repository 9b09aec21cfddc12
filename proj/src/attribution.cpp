#include "xmmp/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <ostream>
#include <random>

#include "xmmp/util.hpp"

namespace xmmp::attr {

using ad::Tensor;

std::string_view explainer_name(ExplainerKind k) {
  switch (k) {
    case ExplainerKind::random: return "random";
    case ExplainerKind::attention_last: return "attention-last";
    case ExplainerKind::attention_rollout: return "attention-rollout";
    case ExplainerKind::integrated_gradients: return "integrated-gradients";
    case ExplainerKind::lrp_epsilon: return "lrp-epsilon";
    case ExplainerKind::lrptrans: return "lrptrans";
  }
  return "unknown";
}

ExplainerKind parse_explainer(std::string_view name) {
  for (ExplainerKind k : kAllExplainers) {
    if (explainer_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown explainer '" + std::string(name) + "'");
}

void AttributionReport::update_sums() {
  modality_sums = {0.0, 0.0, 0.0};
  for (double v : events.values()) modality_sums[0] += v;
  for (double v : notes) modality_sums[1] += v;
  for (double v : vitals.values()) modality_sums[2] += v;
}

double conservation_residual(const AttributionReport& report) {
  double sum = 0.0;
  for (double v : report.events.values()) sum += v;
  for (double v : report.notes) sum += v;
  for (double v : report.vitals.values()) sum += v;
  return report.target_value - sum;
}

namespace {

void check_target(int target_class) {
  if (target_class != 0 && target_class != 1) throw std::invalid_argument("target class must be 0 or 1");
}

Tensor one_hot(int target_class) {
  Tensor seed({2});
  seed[static_cast<std::size_t>(target_class)] = 1.0;
  return seed;
}

// Zero-filled report shaped like the record.
AttributionReport empty_report(ExplainerKind kind, const MultimodalRecord& record, int target_class) {
  AttributionReport r;
  r.kind = kind;
  r.target_class = target_class;
  r.events = Tensor(record.events.values.shape());
  r.notes.assign(record.notes.ids.size(), 0.0);
  r.vitals = Tensor(record.vitals.values.shape());
  return r;
}

void require_finite(const Tensor& g, const char* what) {
  if (!g.all_finite()) throw ad::NumericError(std::string("non-finite gradient for ") + what);
}

// Token relevance: row sums of embedding * gradient.
std::vector<double> token_relevance(const Tensor& embeddings, const Tensor& grad) {
  const std::size_t len = embeddings.dim(0), width = embeddings.dim(1);
  std::vector<double> out(len, 0.0);
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t k = 0; k < width; ++k) out[t] += embeddings.at(t, k) * grad.at(t, k);
  }
  return out;
}

}  // namespace

AttributionReport gi_attribute(const model::XmmpModel& m, const MultimodalRecord& record, int target_class,
                               nn::Mode mode, double lrp_epsilon) {
  check_target(target_class);
  const auto& cfg = m.config();
  ad::Tape tape;
  nn::Bindings bind(tape, m.parameters());
  model::ForwardOptions opt;
  opt.mode = mode;
  opt.lrp_epsilon = lrp_epsilon;
  const auto pass = m.forward(bind, record, opt);
  tape.backward(pass.logits, one_hot(target_class));

  const ExplainerKind kind = mode == nn::Mode::standard
                                 ? ExplainerKind::lrptrans
                                 : (lrp_epsilon > 0.0 ? ExplainerKind::lrp_epsilon : ExplainerKind::lrptrans);
  AttributionReport r = empty_report(kind, record, target_class);
  r.target_value = pass.logits.value()[static_cast<std::size_t>(target_class)];
  if (cfg.modalities.contains(Modality::events)) {
    const Tensor& g = tape.grad(pass.events_input);
    require_finite(g, "events");
    const Tensor& x = pass.events_input.value();
    for (std::size_t i = 0; i < x.size(); ++i) r.events[i] = x[i] * g[i];
  }
  if (cfg.modalities.contains(Modality::notes)) {
    const Tensor& g = tape.grad(pass.note_embeddings);
    require_finite(g, "notes");
    r.notes = token_relevance(pass.note_embeddings.value(), g);
  }
  if (cfg.modalities.contains(Modality::vitals)) {
    const Tensor& g = tape.grad(pass.vitals_input);
    require_finite(g, "vitals");
    const Tensor& x = pass.vitals_input.value();
    for (std::size_t i = 0; i < x.size(); ++i) r.vitals[i] = x[i] * g[i];
  }
  r.update_sums();
  return r;
}

namespace {

Tensor scalar_gradient(const ScalarGraph& f, const Tensor& at) {
  ad::Tape tape;
  const ad::Var x = tape.leaf(at);
  const ad::Var y = f(x);
  if (y.value().size() != 1) throw ad::ShapeError("attribution target must be a single value");
  tape.backward(y, Tensor(y.value().shape(), 1.0));
  const Tensor& g = tape.grad(x);
  if (!g.all_finite()) throw ad::NumericError("non-finite gradient");
  return g;
}

}  // namespace

Tensor gradient_x_input(const ScalarGraph& f, const Tensor& x) {
  Tensor r = scalar_gradient(f, x);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] *= x[i];
  return r;
}

Tensor integrated_gradients(const ScalarGraph& f, const Tensor& x, std::size_t steps) {
  if (steps == 0) throw std::invalid_argument("integrated gradients needs at least one step");
  Tensor acc(x.shape());
  for (std::size_t s = 1; s <= steps; ++s) {
    const double alpha = (static_cast<double>(s) - 0.5) / static_cast<double>(steps);
    Tensor point = x;
    for (double& v : point.values()) v *= alpha;
    const Tensor g = scalar_gradient(f, point);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
  }
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] *= x[i] / static_cast<double>(steps);
  return acc;
}

double scaled_logit(const model::XmmpModel& m, const MultimodalRecord& record, int target_class, double alpha) {
  check_target(target_class);
  ad::Tape tape;
  nn::Bindings bind(tape, m.parameters());
  model::ForwardOptions opt;
  opt.input_scale = alpha;
  return m.forward(bind, record, opt).logits.value()[static_cast<std::size_t>(target_class)];
}

Tensor attention_rollout(std::span<const Tensor> head_averaged) {
  if (head_averaged.empty()) throw std::invalid_argument("rollout needs at least one attention map");
  const std::size_t n = head_averaged.front().dim(0);
  Tensor result({n, n});
  for (std::size_t i = 0; i < n; ++i) result.at(i, i) = 1.0;
  for (const Tensor& a : head_averaged) {
    if (a.shape() != ad::Shape{n, n}) throw ad::ShapeError("attention maps differ in shape");
    Tensor mixed({n, n});
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        mixed.at(i, j) = 0.5 * (a.at(i, j) + (i == j ? 1.0 : 0.0));
        row += mixed.at(i, j);
      }
      for (std::size_t j = 0; j < n; ++j) mixed.at(i, j) /= row;
    }
    // Later layers act on the output of earlier ones: R <- A_l R.
    Tensor next({n, n});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < n; ++k) {
        const double v = mixed.at(i, k);
        if (v == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) next.at(i, j) += v * result.at(k, j);
      }
    }
    result = std::move(next);
  }
  return result;
}

namespace {

AttributionReport explain_random(const model::XmmpModel& m, const MultimodalRecord& record, int target_class,
                                 const ExplainOptions& options) {
  AttributionReport r = empty_report(ExplainerKind::random, record, target_class);
  r.target_value = m.predict(record).logits[static_cast<std::size_t>(target_class)];
  std::mt19937_64 rng(derive_seed(options.seed, "random-explainer:" + std::to_string(record.id)));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& v : r.events.values()) v = u(rng);
  for (double& v : r.notes) v = u(rng);
  for (double& v : r.vitals.values()) v = u(rng);
  r.update_sums();
  return r;
}

// Relevance per sequence position from the pooled (first) row of either the
// last head-averaged attention map or the rollout product, broadcast over
// feature columns.
AttributionReport explain_attention(ExplainerKind kind, const model::XmmpModel& m, const MultimodalRecord& record,
                                    int target_class) {
  std::array<std::vector<nn::AttentionState>, 3> states;
  ad::Tape tape;
  nn::Bindings bind(tape, m.parameters());
  model::ForwardOptions opt;
  opt.attention = &states;
  const auto pass = m.forward(bind, record, opt);

  AttributionReport r = empty_report(kind, record, target_class);
  r.target_value = pass.logits.value()[static_cast<std::size_t>(target_class)];
  auto pooled_row = [&](Modality mod) -> std::vector<double> {
    const auto& layers = states[static_cast<std::size_t>(mod)];
    if (layers.empty()) return {};
    Tensor map;
    if (kind == ExplainerKind::attention_last) {
      map = layers.back().head_average;
    } else {
      std::vector<Tensor> maps;
      for (const auto& s : layers) maps.push_back(s.head_average);
      map = attention_rollout(maps);
    }
    std::vector<double> row(map.dim(1));
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = map.at(0, j);
    return row;
  };
  auto broadcast_rows = [](Tensor& target, const std::vector<double>& row) {
    if (row.empty()) return;
    for (std::size_t t = 0; t < target.dim(0); ++t) {
      for (std::size_t c = 0; c < target.dim(1); ++c) target.at(t, c) = row[t];
    }
  };
  broadcast_rows(r.events, pooled_row(Modality::events));
  if (const auto row = pooled_row(Modality::notes); !row.empty()) r.notes = row;
  broadcast_rows(r.vitals, pooled_row(Modality::vitals));
  r.update_sums();
  return r;
}

AttributionReport explain_integrated_gradients(const model::XmmpModel& m, const MultimodalRecord& record,
                                               int target_class, std::size_t steps) {
  if (steps == 0) throw std::invalid_argument("integrated gradients needs at least one step");
  const auto& cfg = m.config();
  AttributionReport r = empty_report(ExplainerKind::integrated_gradients, record, target_class);
  Tensor g_events(record.events.values.shape()), g_vitals(record.vitals.values.shape());
  Tensor g_notes;
  Tensor embeddings;
  for (std::size_t s = 1; s <= steps; ++s) {
    const double alpha = (static_cast<double>(s) - 0.5) / static_cast<double>(steps);
    ad::Tape tape;
    nn::Bindings bind(tape, m.parameters());
    model::ForwardOptions opt;
    opt.input_scale = alpha;
    const auto pass = m.forward(bind, record, opt);
    tape.backward(pass.logits, one_hot(target_class));
    auto add = [&](Tensor& acc, const ad::Var& v, const char* what) {
      const Tensor& g = tape.grad(v);
      if (!g.all_finite()) {
        throw ad::NumericError(std::string("integrated gradients: non-finite gradient for ") + what +
                               " at alpha=" + std::to_string(alpha));
      }
      if (acc.size() == 0) acc = Tensor(g.shape());
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    };
    if (cfg.modalities.contains(Modality::events)) add(g_events, pass.events_input, "events");
    if (cfg.modalities.contains(Modality::notes)) add(g_notes, pass.note_embeddings, "notes");
    if (cfg.modalities.contains(Modality::vitals)) add(g_vitals, pass.vitals_input, "vitals");
  }
  const double inv = 1.0 / static_cast<double>(steps);
  if (cfg.modalities.contains(Modality::events)) {
    for (std::size_t i = 0; i < r.events.size(); ++i) r.events[i] = record.events.values[i] * g_events[i] * inv;
  }
  if (cfg.modalities.contains(Modality::notes)) {
    ad::Tape tape;
    nn::Bindings bind(tape, m.parameters());
    const Tensor emb = model::embed_tokens(bind, cfg, record.notes.ids).value();
    for (double& v : g_notes.values()) v *= inv;
    r.notes = token_relevance(emb, g_notes);
  }
  if (cfg.modalities.contains(Modality::vitals)) {
    for (std::size_t i = 0; i < r.vitals.size(); ++i) r.vitals[i] = record.vitals.values[i] * g_vitals[i] * inv;
  }
  r.target_value = m.predict(record).logits[static_cast<std::size_t>(target_class)];
  r.update_sums();
  return r;
}

}  // namespace

AttributionReport explain(ExplainerKind kind, const model::XmmpModel& m, const MultimodalRecord& record,
                          int target_class, const ExplainOptions& options) {
  check_target(target_class);
  switch (kind) {
    case ExplainerKind::random: return explain_random(m, record, target_class, options);
    case ExplainerKind::attention_last:
    case ExplainerKind::attention_rollout: return explain_attention(kind, m, record, target_class);
    case ExplainerKind::integrated_gradients:
      return explain_integrated_gradients(m, record, target_class, options.ig_steps);
    case ExplainerKind::lrp_epsilon: {
      if (!(options.lrp_epsilon > 0.0)) throw std::invalid_argument("lrp-epsilon needs a positive epsilon");
      auto r = gi_attribute(m, record, target_class, nn::Mode::attribution, options.lrp_epsilon);
      r.kind = ExplainerKind::lrp_epsilon;
      return r;
    }
    case ExplainerKind::lrptrans: return gi_attribute(m, record, target_class, nn::Mode::attribution);
  }
  throw std::invalid_argument("unknown explainer kind");
}

// ---- cohort aggregation -------------------------------------------------------

FeatureTable aggregate_feature_attributions(std::span<const AttributionReport> reports,
                                            std::span<const MultimodalRecord> records,
                                            const data::NormalValueTable& table, const data::Vocabulary& vocabulary,
                                            const AggregateOptions& options) {
  if (reports.empty()) throw std::invalid_argument("cannot aggregate an empty cohort");
  if (reports.size() != records.size()) throw std::invalid_argument("reports and records differ in count");
  const auto owner = table.column_feature();
  const std::size_t features = table.events.size();
  const std::size_t channels = table.vitals.size();
  std::vector<double> event_sum(features, 0.0), vital_sum(channels, 0.0);
  std::map<std::int32_t, std::pair<double, std::size_t>> tokens;

  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    if (r.events.rank() == 2 && r.events.size() > 0) {
      if (r.events.dim(1) != owner.size()) {
        throw ad::ShapeError("event attributions have " + std::to_string(r.events.dim(1)) + " columns, table has " +
                             std::to_string(owner.size()));
      }
      for (std::size_t h = 0; h < r.events.dim(0); ++h) {
        for (std::size_t c = 0; c < owner.size(); ++c) event_sum[owner[c]] += r.events.at(h, c);
      }
    }
    if (r.vitals.rank() == 2 && r.vitals.size() > 0) {
      if (r.vitals.dim(1) != channels) throw ad::ShapeError("vital attributions do not match the channel table");
      for (std::size_t t = 0; t < r.vitals.dim(0); ++t) {
        for (std::size_t c = 0; c < channels; ++c) vital_sum[c] += r.vitals.at(t, c);
      }
    }
    const auto& ids = records[i].notes.ids;
    if (r.notes.size() != ids.size()) throw ad::ShapeError("note attributions do not match the record's tokens");
    for (std::size_t t = 0; t < ids.size(); ++t) {
      if (ids[t] == kPadToken || ids[t] == kClsToken) continue;
      auto& [sum, count] = tokens[ids[t]];
      sum += r.notes[t];
      ++count;
    }
  }

  const double n = static_cast<double>(reports.size());
  FeatureTable out;
  for (std::size_t f = 0; f < features; ++f) out.events.push_back({table.events[f].name, event_sum[f] / n, reports.size()});
  for (std::size_t c = 0; c < channels; ++c) out.vitals.push_back({table.vitals[c].name, vital_sum[c] / n, reports.size()});
  for (const auto& [id, sc] : tokens) {
    if (sc.second < options.min_token_count) continue;
    out.tokens.push_back({vocabulary.word(id), sc.first / static_cast<double>(sc.second), sc.second});
  }
  auto by_mean = [](const FeatureScore& a, const FeatureScore& b) {
    return a.mean != b.mean ? a.mean > b.mean : a.name < b.name;
  };
  std::sort(out.events.begin(), out.events.end(), by_mean);
  std::sort(out.tokens.begin(), out.tokens.end(), by_mean);
  std::sort(out.vitals.begin(), out.vitals.end(), by_mean);
  return out;
}

// ---- serialisation ------------------------------------------------------------

namespace {

nlohmann::json grid_to_json(const Tensor& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; t.rank() == 2 && i < t.dim(0); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t j = 0; j < t.dim(1); ++j) row.push_back(t.at(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Tensor grid_from_json(const nlohmann::json& j) {
  const std::size_t rows = j.size();
  const std::size_t cols = rows ? j[0].size() : 0;
  Tensor t({rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    if (j[i].size() != cols) throw std::invalid_argument("ragged attribution grid");
    for (std::size_t k = 0; k < cols; ++k) t.at(i, k) = j[i][k].get<double>();
  }
  return t;
}

}  // namespace

nlohmann::json report_to_json(const AttributionReport& r, std::int64_t record_id) {
  return {{"record_id", record_id},
          {"explainer", explainer_name(r.kind)},
          {"target_class", r.target_class},
          {"target_value", r.target_value},
          {"modality_sums", {{"events", r.modality_sums[0]}, {"notes", r.modality_sums[1]}, {"vitals", r.modality_sums[2]}}},
          {"residual", conservation_residual(r)},
          {"events", grid_to_json(r.events)},
          {"notes", r.notes},
          {"vitals", grid_to_json(r.vitals)}};
}

AttributionReport report_from_json(const nlohmann::json& j) {
  AttributionReport r;
  r.kind = parse_explainer(j.at("explainer").get<std::string>());
  r.target_class = j.at("target_class").get<int>();
  r.target_value = j.at("target_value").get<double>();
  r.events = grid_from_json(j.at("events"));
  r.notes = j.at("notes").get<std::vector<double>>();
  r.vitals = grid_from_json(j.at("vitals"));
  r.update_sums();
  return r;
}

void write_report_csv_header(std::ostream& os) {
  os << "record_id,explainer,modality,feature_id,time_index,attribution\n";
}

void write_report_csv(std::ostream& os, const AttributionReport& r, const MultimodalRecord& record) {
  const auto name = explainer_name(r.kind);
  os << std::setprecision(17);
  auto grid = [&](const char* modality, const Tensor& t) {
    for (std::size_t i = 0; t.rank() == 2 && i < t.dim(0); ++i) {
      for (std::size_t k = 0; k < t.dim(1); ++k) {
        os << record.id << ',' << name << ',' << modality << ',' << k << ',' << i << ',' << t.at(i, k) << '\n';
      }
    }
  };
  grid("events", r.events);
  for (std::size_t t = 0; t < r.notes.size(); ++t) {
    os << record.id << ',' << name << ",notes," << record.notes.ids.at(t) << ',' << t << ',' << r.notes[t] << '\n';
  }
  grid("vitals", r.vitals);
}

}  // namespace xmmp::attr
