#pragma once

// Training objectives: reconstruction with prior preservation, the
// identity-preserving redirection loss in its three restriction modes, the
// identity-gated watermark loss, a global-erasure baseline, and the weighted
// total.

#include <span>
#include <vector>

#include "idguard/conditioning.hpp"
#include "idguard/diffusion.hpp"
#include "idguard/watermark.hpp"

namespace idguard::losses {

using ag::Var;
using conditioning::ConceptVocabulary;
using conditioning::Prompt;
using conditioning::RestrictionMode;
using diffusion::NoisePredictor;
using diffusion::NoiseSchedule;

enum class DbKind { Instance, Prior };

struct LossWeights {
  double lambda_r = 0.2;
  double lambda_w = 0.1;
  double lambda_prior = 1.0;
  void validate() const;
};

/// MSE between predicted and true noise on forward-diffused x0.
template <typename T>
Var<T> db_loss(const NoisePredictor<T>& model, const Var<T>& x0, std::span<const int> t, const Var<T>& noise,
               const Var<T>& cond, const NoiseSchedule& schedule, DbKind kind = DbKind::Instance);

/// Which branch a redirection/erasure target is treated as.
enum class TargetBranch {
  StopGradient,  // sg(): the normal objective
  Detached,      // a constant copy computed separately (test oracle)
  Live,          // no stop-gradient (ablation / test contrast)
};

/// Redirection loss for malicious prompts (identity + prohibited):
///   Target:       MSE(eps(x_t, p), sg(eps(x_t, p minus prohibited)))
///   Untarget:     MSE(eps(x_t, p), sg(eps(x_t, null)))
///   Conditioning: Target term + MSE(eps(x_t, prohibited only), sg(base(x_t, prohibited only)))
/// Both branches of the first term use the current model. `frozen_base` is
/// required in Conditioning mode. `malicious_eps`, if given, receives the
/// prediction for the malicious prompt.
template <typename T>
Var<T> cip_loss(const NoisePredictor<T>& model, const NoisePredictor<T>* frozen_base, const Var<T>& x_t,
                std::span<const int> t, const ConceptVocabulary& vocab, const Prompt& malicious, RestrictionMode mode,
                TargetBranch branch = TargetBranch::StopGradient, Var<T>* malicious_eps = nullptr);

/// Mean-over-bits BCE of the decoder's logits on x_gen against m when the
/// prompt holds the identity token; exactly 0, without touching the decoder,
/// otherwise.
template <typename T>
Var<T> wm_loss(const watermark::BitDecoder<T>& decoder, const Var<T>& x_gen, const watermark::Message& m,
               const Prompt& prompt);

/// Global-erasure baseline: MSE(eps(x_t, prohibited only), sg(base(x_t, null))).
template <typename T>
Var<T> erasure_loss(const NoisePredictor<T>& model, const NoisePredictor<T>& frozen_base, const Var<T>& x_t,
                    std::span<const int> t, const ConceptVocabulary& vocab);

/// Absent parts are undefined Vars and count as zero.
template <typename T>
struct LossParts {
  Var<T> db;
  Var<T> cip;
  Var<T> wm;
};

/// db + lambda_r * cip + lambda_w * wm.
template <typename T>
Var<T> total_loss(const LossParts<T>& parts, const LossWeights& w);
double total_loss(double db, double cip, double wm, const LossWeights& w);

}  // namespace idguard::losses
