#pragma once

// Configuration, base-model pretraining, guarded fine-tuning with per-item
// loss routing, and resumable training state.

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "idguard/checkpoint.hpp"
#include "idguard/conditioning.hpp"
#include "idguard/diffusion.hpp"
#include "idguard/losses.hpp"
#include "idguard/synthdata.hpp"
#include "idguard/watermark.hpp"

namespace idguard::training {

using conditioning::ConceptVocabulary;
using conditioning::RestrictionMode;
using diffusion::DenoiserModel;

enum class Baseline { None, Erasure };

struct GuardConfig {
  // Objective weights.
  double lambda_r = 0.2;
  double lambda_w = 0.1;
  double lambda_prior = 1.0;
  double lambda_e = 1.0;  // erasure baseline only
  RestrictionMode mode = RestrictionMode::Target;
  std::vector<std::string> blacklist{"hazard"};
  std::string message = "10110010011101001011100001101101";
  std::int64_t seed = 0;

  // Schedules.
  int steps_base = 30000;
  int steps_finetune = 4000;
  int batch = 32;
  int batch_finetune = 16;
  double lr_base = 2e-4;
  double lr_finetune = 5e-5;
  bool wm_on_malicious = true;
  double malicious_batch_fraction = 0.25;
  double null_dropout = 0.1;  // base pretraining: share of items trained on the null prompt
  Baseline baseline = Baseline::None;
  std::string cip_xt_source = "instance";      // "instance" | "noise"
  std::string finetune_embeddings = "all";     // "all" | "identity"

  // Auxiliary models.
  int steps_codec = 3000;
  int batch_codec = 32;
  double lr_codec = 1e-3;
  int steps_classifier = 600;
  int batch_classifier = 32;
  double lr_classifier = 2e-3;

  // Denoiser and schedule.
  int base_width = 16;
  int timesteps = 200;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  // Evaluation.
  int eval_n = 100;
  int frechet_n = 128;
  int sample_batch = 64;

  int log_every = 50;

  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
  /// Unknown keys are rejected.
  static GuardConfig from_json(const nlohmann::json& j);
  /// `key=value`; the value is parsed as JSON when possible, else taken as a string.
  void apply_override(const std::string& assignment);

  [[nodiscard]] losses::LossWeights weights() const { return {lambda_r, lambda_w, lambda_prior}; }
  [[nodiscard]] ConceptVocabulary vocabulary() const { return ConceptVocabulary::standard(blacklist); }
  [[nodiscard]] diffusion::DenoiserConfig denoiser_config() const;
  [[nodiscard]] diffusion::NoiseSchedule schedule() const;
  [[nodiscard]] watermark::Message watermark_message() const { return watermark::Message::parse(message); }
};

GuardConfig load_config(const std::filesystem::path& path);

/// Per prompt kind, how many items were seen and how often each loss ran.
class RouteCounters {
 public:
  void record(const std::string& kind, const conditioning::LossRoute& computed, int items);
  [[nodiscard]] nlohmann::json to_json() const;
  static RouteCounters from_json(const nlohmann::json& j);
  [[nodiscard]] const std::map<std::string, std::map<std::string, long>>& counts() const { return counts_; }

 private:
  std::map<std::string, std::map<std::string, long>> counts_;
};

/// Prompt kind label used by the counters: "identity", "identity+prohibited",
/// "plain", or "prohibited".
std::string prompt_kind(const conditioning::Prompt& p);

struct TrainState {
  std::string stage;  // "base" or "finetune"
  GuardConfig config;
  nn::ParamStore<float> params;
  std::optional<nn::ParamStore<float>> frozen_base;
  std::vector<Tensor<float>> adam_m;
  std::vector<Tensor<float>> adam_v;
  long adam_t = 0;
  int step = 0;
  std::string rng_state;
  RouteCounters counters;

  [[nodiscard]] DenoiserModel<float> model() const;
};

TrainState init_base_state(const GuardConfig& config);
/// Snapshots `base` as the frozen reference before any update.
TrainState init_finetune_state(const DenoiserModel<float>& base, const GuardConfig& config);

struct StepLog {
  int step = 0;
  double loss = 0;
  double db = 0;
  double cip = 0;
  double wm = 0;
};

/// Runs base-model steps until state.step == until_step. Prompts are each
/// scene's token set; a `null_dropout` share of items uses the null prompt.
std::vector<StepLog> train_base(TrainState& state, const synthdata::Corpus& corpus, int until_step,
                                std::ostream* log = nullptr);

/// Runs guarded fine-tuning steps until state.step == until_step.
std::vector<StepLog> train_finetune(TrainState& state, const watermark::WatermarkCodec& codec,
                                    const synthdata::Corpora& corpora, int until_step, std::ostream* log = nullptr);

DenoiserModel<float> pretrain_base(const synthdata::Corpus& corpus, const GuardConfig& config,
                                   std::ostream* log = nullptr);
DenoiserModel<float> finetune(const DenoiserModel<float>& base, const watermark::WatermarkCodec& codec,
                              const synthdata::Corpora& corpora, const GuardConfig& config,
                              std::ostream* log = nullptr);

checkpoint::Checkpoint to_checkpoint(const TrainState& state);
TrainState from_checkpoint(const checkpoint::Checkpoint& ck);
void checkpoint_save(const TrainState& state, const std::filesystem::path& path);
TrainState checkpoint_load(const std::filesystem::path& path);

}  // namespace idguard::training
