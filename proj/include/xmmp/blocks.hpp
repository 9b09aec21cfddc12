#pragma once

// Transformer building blocks over the tape in autodiff.hpp.
//
// Every block runs in one of two modes. Standard mode is the ordinary
// differentiable network. Attribution mode computes the identical forward
// values but detaches the attention probabilities and the layer-norm
// standard deviation, so the backward pass sees both layers as locally
// linear maps and Gradient x Input through them conserves relevance.

#include <cstddef>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "xmmp/autodiff.hpp"

namespace xmmp::nn {

enum class Mode { standard, attribution };

std::string_view mode_name(Mode mode);

struct BlockConfig {
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ffn = 128;
  double dropout = 0.1;
  // Linear biases; cleared by the model-wide bias-free flag.
  bool bias = true;
  // Layer-norm gain and shift; cleared by the same flag.
  bool affine = true;
  double norm_eps = 1e-5;

  void validate() const;
};

// Named parameter tensors, iterated in name order.
class Parameters {
 public:
  void add(std::string name, ad::Tensor value);
  bool contains(std::string_view name) const;
  const ad::Tensor& at(std::string_view name) const;
  ad::Tensor& at(std::string_view name);
  const std::map<std::string, ad::Tensor, std::less<>>& all() const noexcept { return tensors_; }
  std::map<std::string, ad::Tensor, std::less<>>& all() noexcept { return tensors_; }
  std::size_t scalar_count() const;

 private:
  std::map<std::string, ad::Tensor, std::less<>> tensors_;
};

// Binds parameters onto one tape on first use. A binding can be overridden
// with an arbitrary Var, which is how gradient checks differentiate with
// respect to a single weight matrix.
class Bindings {
 public:
  Bindings(ad::Tape& tape, const Parameters& params) : tape_(tape), params_(params) {}

  ad::Var operator()(const std::string& name);
  void override_with(const std::string& name, const ad::Var& v);
  ad::Tape& tape() noexcept { return tape_; }
  const Parameters& parameters() const noexcept { return params_; }
  const std::map<std::string, ad::Var>& bound() const noexcept { return bound_; }

 private:
  ad::Tape& tape_;
  const Parameters& params_;
  std::map<std::string, ad::Var> bound_;
};

struct AttentionState {
  // Per head, (query x key) probabilities.
  std::vector<ad::Tensor> probabilities;
  ad::Tensor head_average;
};

struct NormState {
  ad::Tensor mean;
  ad::Tensor variance;
  double eps = 1e-5;
};

struct ForwardContext {
  Mode mode = Mode::standard;
  // Enables dropout (standard mode only).
  bool training = false;
  std::mt19937_64* rng = nullptr;
  // When > 0, epsilon-LRP stabilizers are inserted after every linear map,
  // skip connection, layer norm and attention mixing.
  double lrp_epsilon = 0.0;
  // When set, each attention layer appends its state in call order.
  std::vector<AttentionState>* attention = nullptr;
};

ad::Tensor sinusoidal_positions(std::size_t seq_len, std::size_t width);

// Xavier-uniform initialisation helpers.
void init_linear(Parameters& params, const std::string& prefix, std::size_t in, std::size_t out, bool bias,
                 std::mt19937_64& rng);
void init_norm(Parameters& params, const std::string& prefix, std::size_t width, bool affine);
void init_block(Parameters& params, const std::string& prefix, const BlockConfig& cfg, std::mt19937_64& rng);

// x (n x in) -> (n x out) using "<prefix>.weight" and, if present, "<prefix>.bias".
ad::Var linear(Bindings& bind, const std::string& prefix, const ad::Var& x, const ForwardContext& ctx);

// Row-wise layer normalisation. gain/shift may be unbound Vars.
ad::Var layer_norm(const ad::Var& x, const ad::Var& gain, const ad::Var& shift, double eps, Mode mode,
                   NormState* state = nullptr);

// key_bias, when given, is a (seq x seq) additive score offset (use a large
// negative value to mask keys).
ad::Var multi_head_attention(Bindings& bind, const std::string& prefix, const ad::Var& x, const BlockConfig& cfg,
                             const ForwardContext& ctx, const ad::Tensor* key_bias = nullptr,
                             AttentionState* state = nullptr);

// Post-norm block: LN(x + MHA(x)) followed by LN(h + FFN(h)).
ad::Var transformer_block(Bindings& bind, const std::string& prefix, const ad::Var& x, const BlockConfig& cfg,
                          const ForwardContext& ctx, const ad::Tensor* key_bias = nullptr);

// Row 0 of an (L x H) sequence as an (H) vector.
ad::Var pool_first(const ad::Var& x);

// Forward identity whose backward multiplies by z / (z + eps * sign(z)).
ad::Var lrp_stabilize(const ad::Var& z, double eps);

ad::Var dropout(const ad::Var& x, double rate, const ForwardContext& ctx);

}  // namespace xmmp::nn
