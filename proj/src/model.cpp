#include "xmmp/model.hpp"

#include <cmath>
#include <stdexcept>

namespace xmmp::model {

using ad::Tensor;
using ad::Var;

nn::BlockConfig ModelConfig::block_config() const {
  nn::BlockConfig b;
  b.hidden = hidden;
  b.heads = heads;
  b.ffn = ffn;
  b.dropout = dropout;
  b.bias = !bias_free;
  b.affine = !bias_free;
  return b;
}

void ModelConfig::validate() const {
  block_config().validate();
  if (modalities.count() == 0) throw std::invalid_argument("model needs at least one modality");
  if (hidden % 2 != 0) throw std::invalid_argument("hidden width must be even for sinusoidal positions");
  if (event_width == 0 || vitals_channels == 0) throw std::invalid_argument("input widths must be positive");
  if (vocab_size < 3) throw std::invalid_argument("vocabulary must hold the reserved [PAD]/[CLS]/[UNK] ids");
  if (max_note_len == 0) throw std::invalid_argument("max_note_len must be positive");
  if (fusion_hidden == 0) throw std::invalid_argument("fusion_hidden must be positive");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"event_width", c.event_width},
       {"vitals_channels", c.vitals_channels},
       {"vocab_size", c.vocab_size},
       {"max_note_len", c.max_note_len},
       {"hidden", c.hidden},
       {"heads", c.heads},
       {"ffn", c.ffn},
       {"event_blocks", c.event_blocks},
       {"note_blocks", c.note_blocks},
       {"vital_blocks", c.vital_blocks},
       {"fusion_hidden", c.fusion_hidden},
       {"dropout", c.dropout},
       {"bias_free", c.bias_free},
       {"modalities", modality_set_name(c.modalities)}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("event_width").get_to(c.event_width);
  j.at("vitals_channels").get_to(c.vitals_channels);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_note_len").get_to(c.max_note_len);
  j.at("hidden").get_to(c.hidden);
  j.at("heads").get_to(c.heads);
  j.at("ffn").get_to(c.ffn);
  j.at("event_blocks").get_to(c.event_blocks);
  j.at("note_blocks").get_to(c.note_blocks);
  j.at("vital_blocks").get_to(c.vital_blocks);
  j.at("fusion_hidden").get_to(c.fusion_hidden);
  j.at("dropout").get_to(c.dropout);
  j.at("bias_free").get_to(c.bias_free);
  c.modalities = parse_modality_set(j.at("modalities").get<std::string>());
}

const Var& ForwardPass::input(Modality m) const {
  switch (m) {
    case Modality::events: return events_input;
    case Modality::notes: return note_embeddings;
    case Modality::vitals: return vitals_input;
  }
  throw std::invalid_argument("unknown modality");
}

// ---- construction ------------------------------------------------------------

XmmpModel::XmmpModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const nn::BlockConfig block = config_.block_config();
  const bool bias = !config_.bias_free;
  std::normal_distribution<double> normal(0.0, 1.0);

  if (config_.modalities.contains(Modality::events)) {
    nn::init_linear(params_, "events.input", config_.event_width, config_.hidden, bias, rng);
    for (std::size_t b = 0; b < config_.event_blocks; ++b) {
      nn::init_block(params_, "events.block" + std::to_string(b), block, rng);
    }
  }
  if (config_.modalities.contains(Modality::notes)) {
    Tensor tokens({config_.vocab_size, config_.hidden});
    for (double& v : tokens.values()) v = normal(rng);
    params_.add("notes.token", std::move(tokens));
    if (!config_.bias_free) {
      Tensor positions({config_.max_note_len, config_.hidden});
      for (double& v : positions.values()) v = 0.1 * normal(rng);
      params_.add("notes.position", std::move(positions));
    }
    for (std::size_t b = 0; b < config_.note_blocks; ++b) {
      nn::init_block(params_, "notes.block" + std::to_string(b), block, rng);
    }
  }
  if (config_.modalities.contains(Modality::vitals)) {
    nn::init_linear(params_, "vitals.input", config_.vitals_channels, config_.hidden, bias, rng);
    for (std::size_t b = 0; b < config_.vital_blocks; ++b) {
      nn::init_block(params_, "vitals.block" + std::to_string(b), block, rng);
    }
  }
  nn::init_linear(params_, "fusion.hidden", 3 * config_.hidden, config_.fusion_hidden, bias, rng);
  nn::init_linear(params_, "fusion.output", config_.fusion_hidden, 2, bias, rng);
}

XmmpModel::XmmpModel(ModelConfig config, nn::Parameters params)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
  // Shape check against a freshly initialised reference.
  const XmmpModel reference(config_, 0);
  for (const auto& [name, t] : reference.parameters().all()) {
    if (!params_.contains(name)) throw std::invalid_argument("missing parameter tensor '" + name + "'");
    if (params_.at(name).shape() != t.shape()) {
      throw ad::ShapeError("parameter tensor '" + name + "' has shape " + ad::to_string(params_.at(name).shape()) +
                           ", expected " + ad::to_string(t.shape()));
    }
  }
  if (params_.all().size() != reference.parameters().all().size()) {
    throw std::invalid_argument("unexpected extra parameter tensors");
  }
}

// ---- encoders ----------------------------------------------------------------

namespace {

Var run_blocks(nn::Bindings& bind, const std::string& prefix, std::size_t count, const ModelConfig& config, Var x,
               const nn::ForwardContext& ctx, const Tensor* key_bias = nullptr) {
  const nn::BlockConfig block = config.block_config();
  for (std::size_t b = 0; b < count; ++b) {
    x = nn::transformer_block(bind, prefix + ".block" + std::to_string(b), x, block, ctx, key_bias);
  }
  return x;
}

Var add_sinusoidal(const Var& x) {
  const ad::Shape& s = x.shape();
  return ad::add(x, x.tape().constant(nn::sinusoidal_positions(s[0], s[1])));
}

}  // namespace

Var embed_tokens(nn::Bindings& bind, const ModelConfig& config, std::span<const std::int32_t> ids) {
  if (ids.empty()) throw std::invalid_argument("note sequence is empty; it must start with [CLS]");
  if (ids.front() != kClsToken) throw std::invalid_argument("note sequence must start with the [CLS] token");
  if (ids.size() > config.max_note_len) {
    throw std::invalid_argument("note sequence of " + std::to_string(ids.size()) + " tokens exceeds max_note_len " +
                                std::to_string(config.max_note_len));
  }
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= config.vocab_size) {
      throw std::invalid_argument("unknown token id " + std::to_string(ids[i]) + " (vocabulary size " +
                                  std::to_string(config.vocab_size) + ")");
    }
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  return ad::gather_rows(bind("notes.token"), rows);
}

Var encode_events(nn::Bindings& bind, const ModelConfig& config, const Var& events, const nn::ForwardContext& ctx) {
  if (events.shape().size() != 2 || events.shape()[0] == 0) {
    throw ad::ShapeError("event sequence must be a non-empty (hours x features) grid, got " +
                         ad::to_string(events.shape()));
  }
  Var x = nn::linear(bind, "events.input", events, ctx);
  if (!config.bias_free) x = nn::lrp_stabilize(add_sinusoidal(x), ctx.lrp_epsilon);
  x = run_blocks(bind, "events", config.event_blocks, config, x, ctx);
  return nn::pool_first(x);
}

Var encode_notes(nn::Bindings& bind, const ModelConfig& config, const Var& token_embeddings,
                 std::span<const std::int32_t> ids, const nn::ForwardContext& ctx) {
  const std::size_t len = ids.size();
  if (token_embeddings.shape() != ad::Shape{len, config.hidden}) {
    throw ad::ShapeError("token embeddings " + ad::to_string(token_embeddings.shape()) + " do not match " +
                         std::to_string(len) + " ids");
  }
  Var x = token_embeddings;
  if (!config.bias_free) {
    std::vector<std::size_t> positions(len);
    for (std::size_t i = 0; i < len; ++i) positions[i] = i;
    x = nn::lrp_stabilize(ad::add(x, ad::gather_rows(bind("notes.position"), positions)), ctx.lrp_epsilon);
  }
  // Padded keys receive a score offset large enough to underflow to exactly
  // zero probability, so trailing pads never change non-pad rows.
  Tensor key_bias({len, len});
  bool any_pad = false;
  for (std::size_t k = 0; k < len; ++k) {
    if (ids[k] != kPadToken) continue;
    any_pad = true;
    for (std::size_t q = 0; q < len; ++q) key_bias.at(q, k) = -1e30;
  }
  x = run_blocks(bind, "notes", config.note_blocks, config, x, ctx, any_pad ? &key_bias : nullptr);
  return nn::pool_first(x);
}

Var encode_vitals(nn::Bindings& bind, const ModelConfig& config, const Var& vitals, const nn::ForwardContext& ctx) {
  if (vitals.shape().size() != 2 || vitals.shape()[0] == 0) {
    throw ad::ShapeError("vital signs must be a non-empty (timesteps x channels) grid, got " +
                         ad::to_string(vitals.shape()));
  }
  Var x = nn::linear(bind, "vitals.input", vitals, ctx);
  if (!config.bias_free) x = nn::lrp_stabilize(add_sinusoidal(x), ctx.lrp_epsilon);
  x = run_blocks(bind, "vitals", config.vital_blocks, config, x, ctx);
  return nn::pool_first(x);
}

Var fuse_and_classify(nn::Bindings& bind, const ModelConfig& config, std::span<const Var> representations,
                      const nn::ForwardContext& ctx) {
  if (representations.size() != 3) throw std::invalid_argument("fusion expects three modality representations");
  for (const Var& r : representations) {
    if (r.shape() != ad::Shape{config.hidden}) {
      throw ad::ShapeError("modality representation " + ad::to_string(r.shape()) + " does not match hidden width " +
                           std::to_string(config.hidden));
    }
  }
  Var joint = ad::reshape(ad::concat(representations, 0), {1, 3 * config.hidden});
  Var hidden = ad::relu(nn::linear(bind, "fusion.hidden", joint, ctx));
  hidden = nn::dropout(hidden, config.dropout, ctx);
  Var logits = nn::linear(bind, "fusion.output", hidden, ctx);
  return ad::reshape(logits, {2});
}

ForwardPass XmmpModel::forward(nn::Bindings& bind, const MultimodalRecord& record,
                               const ForwardOptions& options) const {
  ad::Tape& tape = bind.tape();
  ForwardPass pass;
  nn::ForwardContext ctx;
  ctx.mode = options.mode;
  ctx.training = options.training && options.mode == nn::Mode::standard;
  ctx.rng = options.rng;
  ctx.lrp_epsilon = options.lrp_epsilon;

  auto scaled = [&](Var v) { return options.input_scale == 1.0 ? v : ad::scale(v, options.input_scale); };
  auto attention_sink = [&](Modality m) {
    return options.attention ? &(*options.attention)[static_cast<std::size_t>(m)] : nullptr;
  };

  for (Modality m : kAllModalities) {
    auto& rep = pass.representations[static_cast<std::size_t>(m)];
    if (!config_.modalities.contains(m)) {
      rep = tape.constant(Tensor({config_.hidden}));
      continue;
    }
    nn::ForwardContext mctx = ctx;
    mctx.attention = attention_sink(m);
    switch (m) {
      case Modality::events:
        pass.events_input = scaled(tape.leaf(record.events.values));
        rep = encode_events(bind, config_, pass.events_input, mctx);
        break;
      case Modality::notes:
        pass.note_embeddings = scaled(embed_tokens(bind, config_, record.notes.ids));
        rep = encode_notes(bind, config_, pass.note_embeddings, record.notes.ids, mctx);
        break;
      case Modality::vitals:
        pass.vitals_input = scaled(tape.leaf(record.vitals.values));
        rep = encode_vitals(bind, config_, pass.vitals_input, mctx);
        break;
    }
  }
  pass.logits = fuse_and_classify(bind, config_, pass.representations, ctx);
  pass.probabilities = ad::softmax(pass.logits, 0);
  return pass;
}

Prediction to_prediction(const ForwardPass& pass) {
  Prediction p;
  for (std::size_t c = 0; c < 2; ++c) {
    p.logits[c] = pass.logits.value()[c];
    p.probabilities[c] = pass.probabilities.value()[c];
  }
  return p;
}

Prediction XmmpModel::predict(const MultimodalRecord& record) const {
  ad::Tape tape;
  nn::Bindings bind(tape, params_);
  return to_prediction(forward(bind, record));
}

}  // namespace xmmp::model
