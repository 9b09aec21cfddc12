#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "xmmp/attribution.hpp"

using namespace xmmp;
using ad::Tensor;

namespace {

model::ModelConfig small_config(bool bias_free = false) {
  model::ModelConfig c;
  c.event_width = 6;
  c.vitals_channels = 3;
  c.vocab_size = 10;
  c.max_note_len = 16;
  c.hidden = 8;
  c.heads = 2;
  c.ffn = 12;
  c.event_blocks = c.note_blocks = c.vital_blocks = 1;
  c.fusion_hidden = 6;
  c.dropout = 0.0;
  c.bias_free = bias_free;
  return c;
}

MultimodalRecord random_record(std::mt19937_64& rng, std::int64_t id = 0) {
  std::normal_distribution<double> n(0.0, 1.0);
  MultimodalRecord r;
  r.id = id;
  r.events.values = Tensor({4, 6});
  r.events.mask = Tensor({4, 2});
  for (double& v : r.events.values.values()) v = n(rng);
  r.notes.ids = {kClsToken};
  const std::size_t len = 3 + rng() % 6;
  for (std::size_t i = 0; i < len; ++i) r.notes.ids.push_back(static_cast<std::int32_t>(2 + rng() % 8));
  r.vitals.values = Tensor({5, 3});
  for (double& v : r.vitals.values.values()) v = n(rng);
  return r;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

std::vector<double> flatten(const attr::AttributionReport& r) {
  std::vector<double> out(r.events.values().begin(), r.events.values().end());
  out.insert(out.end(), r.notes.begin(), r.notes.end());
  out.insert(out.end(), r.vitals.values().begin(), r.vitals.values().end());
  return out;
}

}  // namespace

TEST_CASE("explainer names round trip") {
  for (auto k : attr::kAllExplainers) CHECK(attr::parse_explainer(attr::explainer_name(k)) == k);
  CHECK_THROWS_AS(attr::parse_explainer("shap"), std::invalid_argument);
}

TEST_CASE("gradient times input on a linear map") {
  const Tensor w = Tensor::vector({2.0, -1.0});
  const auto f = [&](const ad::Var& x) {
    return ad::sum_all(ad::mul(x, x.tape().constant(w)));
  };
  const Tensor r = attr::gradient_x_input(f, Tensor::vector({1.0, 4.0}));
  CHECK(r[0] == 2.0);
  CHECK(r[1] == -4.0);
  CHECK(r[0] + r[1] == -2.0);
  const Tensor zero = attr::gradient_x_input(f, Tensor::vector({0.0, 0.0}));
  CHECK(zero[0] == 0.0);
  CHECK(zero[1] == 0.0);
}

TEST_CASE("integrated gradients closed forms") {
  // Linear without intercept: constant gradient, so IG equals GI for any S.
  const Tensor w = Tensor::vector({0.5, -3.0, 1.25});
  const auto lin = [&](const ad::Var& x) { return ad::sum_all(ad::mul(x, x.tape().constant(w))); };
  const Tensor x = Tensor::vector({1.5, 2.0, -4.0});
  const Tensor gi = attr::gradient_x_input(lin, x);
  for (std::size_t s : {1u, 2u, 7u, 20u}) {
    const Tensor ig = attr::integrated_gradients(lin, x, s);
    for (std::size_t i = 0; i < 3; ++i) CHECK(ig[i] == doctest::Approx(gi[i]).epsilon(1e-14));
  }
  // x^2 at 3 with three midpoints: gradients 1, 3, 5 average to 3, times 3.
  const auto sq = [](const ad::Var& x) { return ad::sum_all(ad::mul(x, x)); };
  CHECK(attr::integrated_gradients(sq, Tensor::vector({3.0}), 3)[0] == doctest::Approx(9.0).epsilon(1e-14));
  CHECK_THROWS_AS(attr::integrated_gradients(sq, Tensor::vector({3.0}), 0), std::invalid_argument);
}

TEST_CASE("zero event and vitals inputs get zero attribution") {
  const model::XmmpModel m(small_config(), 3);
  std::mt19937_64 rng(1);
  auto r = random_record(rng);
  r.events.values = Tensor({4, 6});
  r.vitals.values = Tensor({5, 3});
  for (auto kind : {attr::ExplainerKind::lrptrans, attr::ExplainerKind::lrp_epsilon,
                    attr::ExplainerKind::integrated_gradients}) {
    const auto rep = attr::explain(kind, m, r, 1);
    for (double v : rep.events.values()) CHECK(v == 0.0);
    for (double v : rep.vitals.values()) CHECK(v == 0.0);
  }
}

TEST_CASE("bias-free configuration conserves the logit") {
  const model::XmmpModel m(small_config(true), 11);
  std::mt19937_64 rng(2);
  for (int i = 0; i < 20; ++i) {
    const auto r = random_record(rng, i);
    for (int target : {0, 1}) {
      const auto rep = attr::gi_attribute(m, r, target);
      const double logit = m.predict(r).logits[static_cast<std::size_t>(target)];
      CHECK(rep.target_value == doctest::Approx(logit).epsilon(1e-12));
      // A logit of exactly zero (every fusion unit inactive) leaves nothing to share.
      CHECK(std::abs(attr::conservation_residual(rep)) <= 1e-6 * std::abs(logit));
      // The stabiliser absorbs a little relevance.
      const auto eps = attr::explain(attr::ExplainerKind::lrp_epsilon, m, r, target);
      CHECK(std::abs(attr::conservation_residual(eps)) <= 1e-2 * std::abs(logit));
    }
  }
}

TEST_CASE("biased model: residual is nonzero and the detach rules shrink it") {
  const model::XmmpModel m(small_config(false), 12);
  std::mt19937_64 rng(3);
  std::vector<double> attribution_mode, standard_mode;
  for (int i = 0; i < 40; ++i) {
    const auto r = random_record(rng, i);
    attribution_mode.push_back(std::abs(attr::conservation_residual(attr::gi_attribute(m, r, 1))));
    standard_mode.push_back(
        std::abs(attr::conservation_residual(attr::gi_attribute(m, r, 1, nn::Mode::standard))));
  }
  CHECK(median(attribution_mode) > 1e-6);
  CHECK(median(attribution_mode) <= median(standard_mode));
}

TEST_CASE("modality sums equal the element sums exactly") {
  const model::XmmpModel m(small_config(), 4);
  std::mt19937_64 rng(4);
  const auto r = random_record(rng);
  for (auto kind : attr::kAllExplainers) {
    const auto rep = attr::explain(kind, m, r, 1);
    double e = 0, n = 0, v = 0;
    for (double x : rep.events.values()) e += x;
    for (double x : rep.notes) n += x;
    for (double x : rep.vitals.values()) v += x;
    CHECK(rep.modality_sums[0] == e);
    CHECK(rep.modality_sums[1] == n);
    CHECK(rep.modality_sums[2] == v);
    // Identical shapes across explainers.
    CHECK(rep.events.shape() == r.events.values.shape());
    CHECK(rep.notes.size() == r.notes.ids.size());
    CHECK(rep.vitals.shape() == r.vitals.values.shape());
    CHECK(rep.kind == kind);
  }
}

TEST_CASE("lrptrans is deterministic") {
  const model::XmmpModel m(small_config(), 5);
  std::mt19937_64 rng(5);
  const auto r = random_record(rng);
  CHECK(flatten(attr::gi_attribute(m, r, 1)) == flatten(attr::gi_attribute(m, r, 1)));
}

TEST_CASE("integrated gradients with one step is the midpoint gradient") {
  // Single-modality models, where input scaling acts on the record itself:
  // IG(S=1) = x * g(x/2) = 2 * GI(x/2).
  for (auto mod : {Modality::events, Modality::vitals}) {
    auto cfg = small_config();
    cfg.modalities = ModalitySet::of({mod});
    const model::XmmpModel m(cfg, 6);
    std::mt19937_64 rng(6);
    const auto r = random_record(rng);
    attr::ExplainOptions opt;
    opt.ig_steps = 1;
    const auto ig = attr::explain(attr::ExplainerKind::integrated_gradients, m, r, 1, opt);
    auto half = r;
    for (double& v : half.events.values.values()) v *= 0.5;
    for (double& v : half.vitals.values.values()) v *= 0.5;
    const auto gi = attr::gi_attribute(m, half, 1, nn::Mode::standard);
    const auto a = flatten(ig), b = flatten(gi);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(2.0 * b[i]).epsilon(1e-12));
  }
}

TEST_CASE("integrated gradients approach completeness with many steps") {
  const model::XmmpModel m(small_config(false), 7);
  std::mt19937_64 rng(7);
  const auto r = random_record(rng);
  attr::ExplainOptions opt;
  opt.ig_steps = 6400;
  const auto ig = attr::explain(attr::ExplainerKind::integrated_gradients, m, r, 1, opt);
  const double gap = attr::scaled_logit(m, r, 1, 1.0) - attr::scaled_logit(m, r, 1, 0.0);
  CHECK(ig.total() == doctest::Approx(gap).epsilon(1e-3));
}

TEST_CASE("structurally ignored inputs get exactly zero") {
  model::XmmpModel m(small_config(), 8);
  auto& w = m.parameters().at("events.input.weight");
  for (std::size_t h = 0; h < w.dim(1); ++h) w.at(2, h) = 0.0;
  auto& v = m.parameters().at("vitals.input.weight");
  for (std::size_t h = 0; h < v.dim(1); ++h) v.at(1, h) = 0.0;
  std::mt19937_64 rng(8);
  const auto r = random_record(rng);
  for (auto kind : {attr::ExplainerKind::lrptrans, attr::ExplainerKind::lrp_epsilon,
                    attr::ExplainerKind::integrated_gradients}) {
    const auto rep = attr::explain(kind, m, r, 1);
    for (std::size_t t = 0; t < 4; ++t) {
      CHECK(rep.events.at(t, 2) == 0.0);
      CHECK(rep.events.at(t, 1) != 0.0);
    }
    for (std::size_t t = 0; t < 5; ++t) CHECK(rep.vitals.at(t, 1) == 0.0);
  }
}

TEST_CASE("scaling the output layer scales the attributions") {
  model::XmmpModel m(small_config(), 9);
  std::mt19937_64 rng(9);
  const auto r = random_record(rng);
  const auto before = flatten(attr::gi_attribute(m, r, 1));
  for (double& x : m.parameters().at("fusion.output.weight").values()) x *= 2.0;
  const auto after = flatten(attr::gi_attribute(m, r, 1));
  REQUIRE(before.size() == after.size());
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(after[i] == 2.0 * before[i]);
  auto rank = [](const std::vector<double>& a) {
    std::vector<std::size_t> idx(a.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto i, auto j) { return std::abs(a[i]) < std::abs(a[j]); });
    return idx;
  };
  CHECK(rank(before) == rank(after));
}

TEST_CASE("attention rollout") {
  const std::vector<Tensor> identity(3, Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}));
  const Tensor r = attr::attention_rollout(identity);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 3; ++j) CHECK(r.at(i, j) == (i == j ? 1.0 : 0.0));
  }
  // Hand-computed: 0.5(A + I) with A = [[0,1],[1,0]] is uniform, and stays so.
  const std::vector<Tensor> swap(2, Tensor::matrix({{0, 1}, {1, 0}}));
  const Tensor u = attr::attention_rollout(swap);
  for (double v : u.values()) CHECK(v == doctest::Approx(0.5));
  // Order: R = A2 * A1 after mixing.
  const Tensor a1 = Tensor::matrix({{1, 0}, {1, 0}});
  const Tensor a2 = Tensor::matrix({{0, 1}, {0, 1}});
  const std::vector<Tensor> seq{a1, a2};
  const Tensor p = attr::attention_rollout(seq);
  // mixed a1 = [[1,0],[.5,.5]], mixed a2 = [[.5,.5],[0,1]]; a2m * a1m.
  CHECK(p.at(0, 0) == doctest::Approx(0.75));
  CHECK(p.at(0, 1) == doctest::Approx(0.25));
  CHECK(p.at(1, 0) == doctest::Approx(0.5));
  CHECK(p.at(1, 1) == doctest::Approx(0.5));
  CHECK_THROWS(attr::attention_rollout(std::vector<Tensor>{}));
}

TEST_CASE("attention explainers broadcast the pooled row") {
  const model::XmmpModel m(small_config(), 10);
  std::mt19937_64 rng(10);
  const auto r = random_record(rng);
  for (auto kind : {attr::ExplainerKind::attention_last, attr::ExplainerKind::attention_rollout}) {
    const auto rep = attr::explain(kind, m, r, 1);
    double row = 0.0;
    for (std::size_t t = 0; t < 4; ++t) {
      row += rep.events.at(t, 0);
      for (std::size_t c = 1; c < 6; ++c) CHECK(rep.events.at(t, c) == rep.events.at(t, 0));
    }
    CHECK(row == doctest::Approx(1.0));
    double notes = 0.0;
    for (double v : rep.notes) notes += v;
    CHECK(notes == doctest::Approx(1.0));
  }
}

TEST_CASE("random explainer is seeded per record") {
  const model::XmmpModel m(small_config(), 11);
  std::mt19937_64 rng(11);
  const auto a = random_record(rng, 1);
  auto b = a;
  b.id = 2;
  attr::ExplainOptions opt;
  opt.seed = 5;
  const auto ra = flatten(attr::explain(attr::ExplainerKind::random, m, a, 1, opt));
  CHECK(ra == flatten(attr::explain(attr::ExplainerKind::random, m, a, 1, opt)));
  CHECK(ra != flatten(attr::explain(attr::ExplainerKind::random, m, b, 1, opt)));
  for (double v : ra) {
    CHECK(v >= 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("target class is validated") {
  const model::XmmpModel m(small_config(), 12);
  std::mt19937_64 rng(12);
  const auto r = random_record(rng);
  CHECK_THROWS_AS(attr::gi_attribute(m, r, 2), std::invalid_argument);
  CHECK_THROWS_AS(attr::explain(attr::ExplainerKind::random, m, r, -1), std::invalid_argument);
}

TEST_CASE("aggregation over a cohort") {
  // A two-feature, two-channel table over the six event columns: feature A
  // has two categories, feature B is continuous, then two mask columns...
  data::NormalValueTable table;
  table.events = {{"A", {"x", "y", "z"}, "x"}, {"B", {}, "0"}};
  table.vitals = {{"HR", 80.0}, {"SpO2", 98.0}, {"RESP", 18.0}};
  REQUIRE(table.event_width() == 6);
  const auto vocab = data::Vocabulary::from_words({"w3", "w4", "w5", "w6", "w7", "w8", "w9"});

  const model::XmmpModel m(small_config(), 13);
  std::mt19937_64 rng(13);
  const auto r = random_record(rng);
  const auto rep = attr::gi_attribute(m, r, 1);
  const std::vector<attr::AttributionReport> reps{rep};
  const std::vector<MultimodalRecord> recs{r};
  attr::AggregateOptions opt;
  opt.min_token_count = 1;
  const auto t = attr::aggregate_feature_attributions(reps, recs, table, vocab, opt);

  double a = 0, b = 0;
  for (std::size_t h = 0; h < 4; ++h) {
    a += rep.events.at(h, 0) + rep.events.at(h, 1) + rep.events.at(h, 2) + rep.events.at(h, 4);
    b += rep.events.at(h, 3) + rep.events.at(h, 5);
  }
  auto find = [](const std::vector<attr::FeatureScore>& v, const std::string& name) {
    return *std::find_if(v.begin(), v.end(), [&](const auto& s) { return s.name == name; });
  };
  CHECK(find(t.events, "A").mean == doctest::Approx(a).epsilon(1e-13));
  CHECK(find(t.events, "B").mean == doctest::Approx(b).epsilon(1e-13));
  double hr = 0;
  for (std::size_t s = 0; s < 5; ++s) hr += rep.vitals.at(s, 0);
  CHECK(find(t.vitals, "HR").mean == doctest::Approx(hr).epsilon(1e-13));
  CHECK(std::is_sorted(t.events.begin(), t.events.end(), [](auto& x, auto& y) { return x.mean > y.mean; }));

  // Tokens: mean per occurrence, CLS never listed.
  std::map<std::int32_t, std::pair<double, std::size_t>> tok;
  for (std::size_t i = 1; i < r.notes.ids.size(); ++i) {
    tok[r.notes.ids[i]].first += rep.notes[i];
    tok[r.notes.ids[i]].second++;
  }
  CHECK(t.tokens.size() == tok.size());
  for (const auto& [id, sc] : tok) {
    CHECK(find(t.tokens, vocab.word(id)).mean == doctest::Approx(sc.first / sc.second).epsilon(1e-13));
  }
  opt.min_token_count = 2;
  const auto filtered = attr::aggregate_feature_attributions(reps, recs, table, vocab, opt);
  for (const auto& s : filtered.tokens) CHECK(s.count >= 2);
  std::size_t frequent = 0;
  for (const auto& [id, sc] : tok) frequent += sc.second >= 2 ? 1 : 0;
  CHECK(filtered.tokens.size() == frequent);

  CHECK_THROWS_AS(attr::aggregate_feature_attributions({}, {}, table, vocab), std::invalid_argument);
}

TEST_CASE("report serialisation") {
  const model::XmmpModel m(small_config(), 14);
  std::mt19937_64 rng(14);
  const auto r = random_record(rng, 77);
  const auto rep = attr::gi_attribute(m, r, 0);
  const auto back = attr::report_from_json(attr::report_to_json(rep, 77));
  CHECK(flatten(back) == flatten(rep));
  CHECK(back.kind == rep.kind);
  CHECK(back.target_class == 0);
  CHECK(back.target_value == rep.target_value);
  CHECK(back.modality_sums == rep.modality_sums);

  std::ostringstream os;
  attr::write_report_csv_header(os);
  attr::write_report_csv(os, rep, r);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line == "record_id,explainer,modality,feature_id,time_index,attribution");
  std::size_t rows = 0;
  while (std::getline(is, line)) ++rows;
  CHECK(rows == 24 + r.notes.ids.size() + 15);
}
