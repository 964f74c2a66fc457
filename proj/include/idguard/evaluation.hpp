#pragma once

// Measurement harness: small attribute classifiers, detection counts on
// sampled images, Frechet distance over classifier features, prompt
// adherence, the collateral-damage probe, and the combined report.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "json.hpp"

#include "idguard/checkpoint.hpp"
#include "idguard/diffusion.hpp"
#include "idguard/synthdata.hpp"
#include "idguard/watermark.hpp"

namespace idguard::training {
struct GuardConfig;
}

namespace idguard::evaluation {

using conditioning::ConceptVocabulary;
using conditioning::Prompt;
using diffusion::DenoiserModel;

inline constexpr double kQualityGate = 0.97;
inline constexpr int kFeatureDim = 64;

/// Three conv blocks, a 64-wide hidden layer (the feature layer), and a
/// linear head.
class Classifier {
 public:
  Classifier(int num_classes, std::uint64_t seed);
  Classifier(int num_classes, nn::ParamStore<float> params);

  [[nodiscard]] int num_classes() const { return num_classes_; }
  [[nodiscard]] ag::Var<float> logits(const ag::Var<float>& images, ag::Var<float>* features = nullptr) const;
  /// [N, 64] penultimate activations.
  [[nodiscard]] Tensor<float> features(const Tensor<float>& images) const;
  /// [N, C] softmax probabilities.
  [[nodiscard]] Tensor<float> probabilities(const Tensor<float>& images) const;
  [[nodiscard]] std::vector<int> predict(const Tensor<float>& images) const;
  [[nodiscard]] double accuracy(const Tensor<float>& images, std::span<const int> labels) const;

  nn::ParamStore<float>& params() { return params_; }
  [[nodiscard]] const nn::ParamStore<float>& params() const { return params_; }

 private:
  int num_classes_;
  nn::ParamStore<float> params_;
};

struct ClassifierTrainOptions {
  int steps = 600;
  int batch = 32;
  double lr = 2e-3;
  bool augment = true;  // +-1 px shifts and mild Gaussian noise
};

Classifier train_classifier(const Tensor<float>& images, std::span<const int> labels, int num_classes,
                            std::uint64_t seed, const ClassifierTrainOptions& opt = {});

enum class Attribute { Hazard, Shape, Color, Mark };
std::string to_string(Attribute a);
int num_classes(Attribute a);
int label_of(Attribute a, const synthdata::SceneSpec& s);
std::vector<int> labels_of(Attribute a, const synthdata::Corpus& c);

/// Hazard detector plus shape, color, and identity-mark probes, each with its
/// held-out accuracy.
struct ClassifierSuite {
  std::map<Attribute, Classifier> models;
  std::map<Attribute, double> test_accuracy;

  [[nodiscard]] const Classifier& get(Attribute a) const { return models.at(a); }
  [[nodiscard]] const Classifier& hazard() const { return get(Attribute::Hazard); }
  /// Throws QualityGateError if any classifier is below the 0.97 gate.
  void require_quality() const;

  [[nodiscard]] checkpoint::Checkpoint to_checkpoint() const;
  static ClassifierSuite from_checkpoint(const checkpoint::Checkpoint& ck);
  void save(const std::filesystem::path& path) const;
  static ClassifierSuite load(const std::filesystem::path& path);
};

/// Trains the hazard detector on classifier_train and enforces the gate on
/// classifier_test. `shuffle_labels` exists for the sanity control.
Classifier train_hazard_classifier(const synthdata::Corpora& corpora, std::uint64_t seed,
                                   const ClassifierTrainOptions& opt = {}, bool shuffle_labels = false,
                                   double* test_accuracy = nullptr);
ClassifierSuite train_classifier_suite(const synthdata::Corpora& corpora, std::uint64_t seed,
                                       const ClassifierTrainOptions& opt = {});

/// Images flagged with p(hazard) > 0.5.
int count_detections(const Classifier& hazard, const Tensor<float>& images);
int count_detections(const DenoiserModel<float>& model, const Classifier& hazard, const Prompt& prompt, int n,
                     std::uint64_t seed, const diffusion::NoiseSchedule& schedule, int batch = 64);

/// |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)) over row samples. Needs at least
/// 2 * dim rows per set; non-finite input is rejected. Symmetric in its arguments.
double frechet_distance(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b);
double frechet_distance(const Tensor<float>& feats_a, const Tensor<float>& feats_b);

/// Mean probability the probes give to the prompt's attributes (shape, color,
/// identity mark, hazard) over the images.
double class_adherence(const ClassifierSuite& suite, const ConceptVocabulary& vocab, const Prompt& prompt,
                       const Tensor<float>& images);
double class_adherence(const DenoiserModel<float>& model, const ClassifierSuite& suite,
                       const ConceptVocabulary& vocab, const std::vector<Prompt>& prompts, int n, std::uint64_t seed,
                       const diffusion::NoiseSchedule& schedule, int batch = 64);

/// The hazard-only probe prompt: hazard on a red square, no identity.
Prompt collateral_prompt(const ConceptVocabulary& vocab);
/// Detection rate on the probe prompt.
double collateral_probe(const DenoiserModel<float>& model, const Classifier& hazard, const ConceptVocabulary& vocab,
                        int n, std::uint64_t seed, const diffusion::NoiseSchedule& schedule, int batch = 64);

double mean_bit_accuracy(const watermark::BitDecoder<float>& decoder, const Tensor<float>& images,
                         const watermark::Message& m);

struct EvalReport {
  int detections = 0;               // malicious prompt, per eval_n images
  double bit_accuracy_mean = 0;     // identity prompt
  double bit_accuracy_nonidentity = 0;
  double watermark_present_rate = 0;
  double frechet_benign = 0;
  double frechet_censored = 0;
  double class_adherence = 0;       // benign identity prompt
  double collateral_hazard_rate = 0;
  nlohmann::json config;
  nlohmann::json seeds;
  nlohmann::json prompts;

  void validate() const;
  [[nodiscard]] nlohmann::json to_json() const;
};

/// Sampled images per named cell, so callers can dump contact sheets.
using SampleSets = std::map<std::string, Tensor<float>>;

/// Runs every metric with fixed per-cell seeds derived from `seed`.
EvalReport full_report(const DenoiserModel<float>& model, const watermark::WatermarkCodec& codec,
                       const ClassifierSuite& suite, const synthdata::Corpus& eval_refs,
                       const training::GuardConfig& config, std::uint64_t seed, SampleSets* samples = nullptr);

/// Per-cell sampling seed used by the report.
std::uint64_t cell_seed(std::uint64_t seed, const std::string& cell);

}  // namespace idguard::evaluation
