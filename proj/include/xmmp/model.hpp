#pragma once

// X-MMP: three transformer encoders (hourly events, note tokens, vital
// signs), each pooled at its first position, concatenated and classified by
// a one-hidden-layer feed-forward head over two classes (survival, death).

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "xmmp/autodiff.hpp"
#include "xmmp/blocks.hpp"
#include "xmmp/record.hpp"

namespace xmmp::model {

struct ModelConfig {
  std::size_t event_width = 76;
  std::size_t vitals_channels = 21;
  std::size_t vocab_size = 3;
  // [CLS] plus up to 512 words.
  std::size_t max_note_len = 513;

  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ffn = 128;
  std::size_t event_blocks = 2;
  std::size_t note_blocks = 2;
  std::size_t vital_blocks = 2;
  std::size_t fusion_hidden = 64;
  double dropout = 0.1;

  // Removes every additive intercept: linear biases, layer-norm gain/shift
  // and the position encodings added to the inputs.
  bool bias_free = false;

  ModalitySet modalities = ModalitySet::all();

  nn::BlockConfig block_config() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct Prediction {
  std::array<double, 2> logits{};
  std::array<double, 2> probabilities{};
  double death_probability() const { return probabilities[1]; }
};

struct ForwardOptions {
  nn::Mode mode = nn::Mode::standard;
  bool training = false;
  std::mt19937_64* rng = nullptr;
  // Multiplies every modality input (events, token embeddings, vitals);
  // integrated gradients walks this from 0 to 1.
  double input_scale = 1.0;
  double lrp_epsilon = 0.0;
  // Per modality, the attention state of each block in order.
  std::array<std::vector<nn::AttentionState>, 3>* attention = nullptr;
};

// Handles into one recorded forward pass. The *_input Vars are the
// attribution leaves: event grid, token embedding rows and vitals grid after
// input scaling. Disabled modalities leave their Vars unbound.
struct ForwardPass {
  ad::Var events_input;
  ad::Var note_embeddings;
  ad::Var vitals_input;
  std::array<ad::Var, 3> representations;
  ad::Var logits;
  ad::Var probabilities;

  const ad::Var& input(Modality m) const;
};

class XmmpModel {
 public:
  XmmpModel(ModelConfig config, std::uint64_t seed);
  XmmpModel(ModelConfig config, nn::Parameters params);

  const ModelConfig& config() const noexcept { return config_; }
  const nn::Parameters& parameters() const noexcept { return params_; }
  nn::Parameters& parameters() noexcept { return params_; }

  ForwardPass forward(nn::Bindings& bind, const MultimodalRecord& record, const ForwardOptions& options = {}) const;
  Prediction predict(const MultimodalRecord& record) const;

 private:
  ModelConfig config_;
  nn::Parameters params_;
};

// Stand-alone pieces of the forward pass.
ad::Var embed_tokens(nn::Bindings& bind, const ModelConfig& config, std::span<const std::int32_t> ids);
ad::Var encode_events(nn::Bindings& bind, const ModelConfig& config, const ad::Var& events,
                      const nn::ForwardContext& ctx);
ad::Var encode_notes(nn::Bindings& bind, const ModelConfig& config, const ad::Var& token_embeddings,
                     std::span<const std::int32_t> ids, const nn::ForwardContext& ctx);
ad::Var encode_vitals(nn::Bindings& bind, const ModelConfig& config, const ad::Var& vitals,
                      const nn::ForwardContext& ctx);
// Returns the two class logits.
ad::Var fuse_and_classify(nn::Bindings& bind, const ModelConfig& config, std::span<const ad::Var> representations,
                          const nn::ForwardContext& ctx);

Prediction to_prediction(const ForwardPass& pass);

// ---- checkpoints ------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ModelConfig config;
  nn::Parameters parameters;
  // Free-form sections carried alongside the weights.
  nlohmann::json vocabulary = nlohmann::json::array();
  nlohmann::json preprocessing = nlohmann::json::object();
};

void save_checkpoint(const XmmpModel& model, const std::filesystem::path& path,
                     const nlohmann::json& vocabulary = nlohmann::json::array(),
                     const nlohmann::json& preprocessing = nlohmann::json::object());
Checkpoint load_checkpoint(const std::filesystem::path& path);
XmmpModel load_model(const std::filesystem::path& path);

}  // namespace xmmp::model
