#include "xmmp/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace xmmp::nn {

using ad::Tensor;
using ad::Var;

std::string_view mode_name(Mode mode) { return mode == Mode::standard ? "standard" : "attribution"; }

void BlockConfig::validate() const {
  if (hidden == 0 || heads == 0 || ffn == 0) throw std::invalid_argument("block widths must be positive");
  if (hidden % heads != 0) {
    throw std::invalid_argument("hidden width " + std::to_string(hidden) + " is not divisible by " +
                                std::to_string(heads) + " heads");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("dropout must lie in [0, 1)");
  if (!(norm_eps > 0.0)) throw std::invalid_argument("layer-norm epsilon must be positive");
}

// ---- Parameters / Bindings ---------------------------------------------------

void Parameters::add(std::string name, Tensor value) {
  if (tensors_.contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  tensors_.emplace(std::move(name), std::move(value));
}

bool Parameters::contains(std::string_view name) const { return tensors_.find(name) != tensors_.end(); }

const Tensor& Parameters::at(std::string_view name) const {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  return it->second;
}

Tensor& Parameters::at(std::string_view name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  return it->second;
}

std::size_t Parameters::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors_) n += t.size();
  return n;
}

Var Bindings::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var v = tape_.parameter(params_.at(name));
  bound_.emplace(name, v);
  return v;
}

void Bindings::override_with(const std::string& name, const Var& v) {
  if (v.shape() != params_.at(name).shape()) {
    throw ad::ShapeError("override for '" + name + "' has shape " + ad::to_string(v.shape()));
  }
  bound_[name] = v;
}

// ---- initialisation ------------------------------------------------------------

Tensor sinusoidal_positions(std::size_t seq_len, std::size_t width) {
  if (width % 2 != 0) throw std::invalid_argument("sinusoidal positions need an even width");
  Tensor out({seq_len, width});
  for (std::size_t pos = 0; pos < seq_len; ++pos) {
    for (std::size_t i = 0; i < width / 2; ++i) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(width));
      out.at(pos, 2 * i) = std::sin(angle);
      out.at(pos, 2 * i + 1) = std::cos(angle);
    }
  }
  return out;
}

void init_linear(Parameters& params, const std::string& prefix, std::size_t in, std::size_t out, bool bias,
                 std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> u(-limit, limit);
  Tensor w({in, out});
  for (double& v : w.values()) v = u(rng);
  params.add(prefix + ".weight", std::move(w));
  if (bias) params.add(prefix + ".bias", Tensor({1, out}));
}

void init_norm(Parameters& params, const std::string& prefix, std::size_t width, bool affine) {
  if (!affine) return;
  params.add(prefix + ".gain", Tensor({1, width}, 1.0));
  params.add(prefix + ".shift", Tensor({1, width}));
}

void init_block(Parameters& params, const std::string& prefix, const BlockConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  for (const char* proj : {"query", "key", "value", "output"}) {
    init_linear(params, prefix + ".attn." + proj, cfg.hidden, cfg.hidden, cfg.bias, rng);
  }
  init_norm(params, prefix + ".norm1", cfg.hidden, cfg.affine);
  init_linear(params, prefix + ".ffn.inner", cfg.hidden, cfg.ffn, cfg.bias, rng);
  init_linear(params, prefix + ".ffn.outer", cfg.ffn, cfg.hidden, cfg.bias, rng);
  init_norm(params, prefix + ".norm2", cfg.hidden, cfg.affine);
}

// ---- layers ----------------------------------------------------------------------

Var lrp_stabilize(const Var& z, double eps) {
  if (eps <= 0.0) return z;
  ad::Tape& tape = z.tape();
  const Tensor& zv = z.value();
  Tensor ratio(zv.shape());
  Tensor rest(zv.shape());
  for (std::size_t i = 0; i < zv.size(); ++i) {
    const double s = zv[i] >= 0.0 ? 1.0 : -1.0;
    ratio[i] = zv[i] / (zv[i] + eps * s);
    rest[i] = (1.0 - ratio[i]) * zv[i];
  }
  return ad::add(ad::mul(tape.constant(std::move(ratio)), z), tape.constant(std::move(rest)));
}

Var dropout(const Var& x, double rate, const ForwardContext& ctx) {
  if (!ctx.training || ctx.mode != Mode::standard || rate <= 0.0) return x;
  if (!ctx.rng) throw std::invalid_argument("dropout in training needs an rng");
  std::bernoulli_distribution keep(1.0 - rate);
  Tensor mask(x.shape());
  const double s = 1.0 / (1.0 - rate);
  for (double& m : mask.values()) m = keep(*ctx.rng) ? s : 0.0;
  return ad::mul(x, x.tape().constant(std::move(mask)));
}

Var linear(Bindings& bind, const std::string& prefix, const Var& x, const ForwardContext& ctx) {
  const std::string wname = prefix + ".weight";
  const Tensor& w = bind.parameters().at(wname);
  if (x.shape().size() != 2 || x.shape()[1] != w.dim(0)) {
    throw ad::ShapeError("tensor '" + wname + "' expects " + std::to_string(w.dim(0)) + " input columns, got " +
                         ad::to_string(x.shape()));
  }
  Var y = ad::matmul(x, bind(wname));
  const std::string bname = prefix + ".bias";
  if (bind.parameters().contains(bname)) y = ad::add(y, ad::broadcast(bind(bname), y.shape()));
  return lrp_stabilize(y, ctx.lrp_epsilon);
}

Var layer_norm(const Var& x, const Var& gain, const Var& shift, double eps, Mode mode, NormState* state) {
  const ad::Shape& s = x.shape();
  if (s.size() != 2 || s[1] == 0) throw ad::ShapeError("layer_norm needs a (rows x features) input with features > 0");
  ad::Tape& tape = x.tape();
  Var mu = ad::mean(x, 1);
  Var centered = ad::sub(x, ad::broadcast(mu, s));
  Var var = ad::mean(ad::mul(centered, centered), 1);
  Var denom = ad::sqrt(ad::add(var, tape.constant(Tensor(var.shape(), eps))));
  if (mode == Mode::attribution) denom = ad::detach(denom);
  Var y = ad::div(centered, ad::broadcast(denom, s));
  if (gain.valid()) y = ad::mul(y, ad::broadcast(gain, s));
  if (shift.valid()) y = ad::add(y, ad::broadcast(shift, s));
  if (state) {
    state->mean = mu.value();
    state->variance = var.value();
    state->eps = eps;
  }
  return y;
}

Var multi_head_attention(Bindings& bind, const std::string& prefix, const Var& x, const BlockConfig& cfg,
                         const ForwardContext& ctx, const Tensor* key_bias, AttentionState* state) {
  cfg.validate();
  const ad::Shape& s = x.shape();
  if (s.size() != 2 || s[0] == 0) throw ad::ShapeError("attention needs a non-empty (seq x hidden) input");
  const std::size_t seq = s[0];
  const std::size_t head_width = cfg.hidden / cfg.heads;
  ad::Tape& tape = x.tape();

  // Projections stay unstabilised; the ε-rule applies at the mixing output.
  ForwardContext plain = ctx;
  plain.lrp_epsilon = 0.0;
  Var q = linear(bind, prefix + ".query", x, plain);
  Var k = linear(bind, prefix + ".key", x, plain);
  Var v = linear(bind, prefix + ".value", x, ctx);

  Var bias;
  if (key_bias) {
    if (key_bias->shape() != ad::Shape{seq, seq}) throw ad::ShapeError("attention key bias must be (seq x seq)");
    bias = tape.constant(*key_bias);
  }

  AttentionState local;
  AttentionState* st = state ? state : (ctx.attention ? &local : nullptr);
  if (st) {
    st->probabilities.clear();
    st->head_average = Tensor({seq, seq});
  }

  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_width));
  std::vector<Var> heads;
  heads.reserve(cfg.heads);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const std::size_t b = h * head_width, e = b + head_width;
    Var qh = ad::slice(q, 1, b, e);
    Var kh = ad::slice(k, 1, b, e);
    Var vh = ad::slice(v, 1, b, e);
    Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
    if (bias.valid()) scores = ad::add(scores, bias);
    Var p = ad::softmax(scores, 1);
    if (st) {
      st->probabilities.push_back(p.value());
      for (std::size_t i = 0; i < p.value().size(); ++i) st->head_average[i] += p.value()[i] / cfg.heads;
    }
    if (ctx.mode == Mode::attribution) p = ad::detach(p);
    p = dropout(p, cfg.dropout, ctx);
    heads.push_back(lrp_stabilize(ad::matmul(p, vh), ctx.lrp_epsilon));
  }
  Var mixed = cfg.heads == 1 ? heads.front() : ad::concat(heads, 1);
  if (st && ctx.attention) ctx.attention->push_back(*st);
  return linear(bind, prefix + ".output", mixed, ctx);
}

namespace {

Var bound_or_empty(Bindings& bind, const std::string& name) {
  return bind.parameters().contains(name) ? bind(name) : Var();
}

Var norm(Bindings& bind, const std::string& prefix, const Var& x, const BlockConfig& cfg, const ForwardContext& ctx) {
  Var y = layer_norm(x, bound_or_empty(bind, prefix + ".gain"), bound_or_empty(bind, prefix + ".shift"), cfg.norm_eps,
                     ctx.mode);
  return lrp_stabilize(y, ctx.lrp_epsilon);
}

}  // namespace

Var transformer_block(Bindings& bind, const std::string& prefix, const Var& x, const BlockConfig& cfg,
                      const ForwardContext& ctx, const Tensor* key_bias) {
  Var attended = multi_head_attention(bind, prefix + ".attn", x, cfg, ctx, key_bias);
  Var h = norm(bind, prefix + ".norm1", lrp_stabilize(ad::add(x, attended), ctx.lrp_epsilon), cfg, ctx);
  Var inner = ad::relu(linear(bind, prefix + ".ffn.inner", h, ctx));
  inner = dropout(inner, cfg.dropout, ctx);
  Var outer = linear(bind, prefix + ".ffn.outer", inner, ctx);
  return norm(bind, prefix + ".norm2", lrp_stabilize(ad::add(h, outer), ctx.lrp_epsilon), cfg, ctx);
}

Var pool_first(const Var& x) {
  const ad::Shape& s = x.shape();
  if (s.size() != 2 || s[0] == 0) throw ad::ShapeError("pool_first needs a non-empty (seq x hidden) input");
  return ad::reshape(ad::slice(x, 0, 0, 1), {s[1]});
}

}  // namespace xmmp::nn
