#include "idguard/losses.hpp"

#include "idguard/errors.hpp"

namespace idguard::losses {

void LossWeights::validate() const {
  if (!(lambda_r >= 0) || !(lambda_w >= 0) || !(lambda_prior >= 0)) {
    throw ValidationError("loss weights must be non-negative");
  }
}

template <typename T>
Var<T> db_loss(const NoisePredictor<T>& model, const Var<T>& x0, std::span<const int> t, const Var<T>& noise,
               const Var<T>& cond, const NoiseSchedule& schedule, DbKind kind) {
  (void)kind;  // both terms share the form; the trainer weights them
  auto x_t = diffusion::forward_diffuse(x0, t, noise, schedule);
  return ag::mse(model.predict_noise(x_t, t, cond), noise);
}

namespace {

template <typename T>
Var<T> target_branch(const NoisePredictor<T>& model, const Var<T>& x_t, std::span<const int> t, const Prompt& p,
                     TargetBranch branch) {
  const std::vector<Prompt> prompts(static_cast<std::size_t>(x_t.dim(0)), p);
  switch (branch) {
    case TargetBranch::StopGradient:
      return ag::stop_gradient(model.predict_noise(x_t, t, model.embed(prompts)));
    case TargetBranch::Detached: {
      ag::NoGradGuard ng;
      Tensor<T> copy = model.predict_noise(ag::constant(x_t.value()), t, model.embed(prompts)).value();
      return ag::constant(std::move(copy));
    }
    case TargetBranch::Live: return model.predict_noise(x_t, t, model.embed(prompts));
  }
  return {};
}

template <typename T>
Var<T> predict(const NoisePredictor<T>& model, const Var<T>& x_t, std::span<const int> t, const Prompt& p) {
  return model.predict_noise(x_t, t, model.embed(std::vector<Prompt>(static_cast<std::size_t>(x_t.dim(0)), p)));
}

}  // namespace

template <typename T>
Var<T> cip_loss(const NoisePredictor<T>& model, const NoisePredictor<T>* frozen_base, const Var<T>& x_t,
                std::span<const int> t, const ConceptVocabulary& vocab, const Prompt& malicious, RestrictionMode mode,
                TargetBranch branch, Var<T>* malicious_eps) {
  if (!malicious.has_identity() || !malicious.has_prohibited()) {
    throw ValidationError("cip_loss needs a prompt with both the identity and a prohibited token");
  }
  if (mode == RestrictionMode::Conditioning && frozen_base == nullptr) {
    throw ValidationError("Conditioning mode needs the frozen pre-fine-tune snapshot");
  }
  const Prompt target = mode == RestrictionMode::Untarget ? vocab.null_prompt() : vocab.without_prohibited(malicious);
  auto eps = predict(model, x_t, t, malicious);
  if (malicious_eps) *malicious_eps = eps;
  auto loss = ag::mse(eps, target_branch(model, x_t, t, target, branch));
  if (mode == RestrictionMode::Conditioning) {
    const Prompt cp = vocab.prohibited_only(malicious);
    auto keep = target_branch(*frozen_base, x_t, t, cp, branch == TargetBranch::Live ? TargetBranch::StopGradient : branch);
    loss = ag::add(loss, ag::mse(predict(model, x_t, t, cp), keep));
  }
  return loss;
}

template <typename T>
Var<T> wm_loss(const watermark::BitDecoder<T>& decoder, const Var<T>& x_gen, const watermark::Message& m,
               const Prompt& prompt) {
  if (m.size() != decoder.bits()) {
    throw ValidationError("message has " + std::to_string(m.size()) + " bits, decoder reads " +
                          std::to_string(decoder.bits()));
  }
  if (!decoder.frozen()) throw ValidationError("wm_loss requires a frozen decoder");
  if (!prompt.has_identity()) return ag::constant(Tensor<T>::scalar(T(0)));
  return ag::bce_with_logits(decoder.decode(x_gen), m.template targets<T>(x_gen.dim(0)));
}

template <typename T>
Var<T> erasure_loss(const NoisePredictor<T>& model, const NoisePredictor<T>& frozen_base, const Var<T>& x_t,
                    std::span<const int> t, const ConceptVocabulary& vocab) {
  if (vocab.blacklist_ids().empty()) throw ValidationError("erasure needs a non-empty blacklist");
  const Prompt cp = vocab.prompt(vocab.blacklist_ids());
  return ag::mse(predict(model, x_t, t, cp),
                 target_branch(frozen_base, x_t, t, vocab.null_prompt(), TargetBranch::StopGradient));
}

template <typename T>
Var<T> total_loss(const LossParts<T>& parts, const LossWeights& w) {
  w.validate();
  Var<T> out = parts.db.defined() ? parts.db : ag::constant(Tensor<T>::scalar(T(0)));
  if (parts.cip.defined()) out = ag::add(out, ag::scale(parts.cip, static_cast<T>(w.lambda_r)));
  if (parts.wm.defined()) out = ag::add(out, ag::scale(parts.wm, static_cast<T>(w.lambda_w)));
  return out;
}

double total_loss(double db, double cip, double wm, const LossWeights& w) {
  w.validate();
  if (db < 0 || cip < 0 || wm < 0) throw ValidationError("loss parts must be non-negative");
  return db + w.lambda_r * cip + w.lambda_w * wm;
}

#define IDGUARD_INSTANTIATE_LOSSES(T)                                                                              \
  template Var<T> db_loss<T>(const NoisePredictor<T>&, const Var<T>&, std::span<const int>, const Var<T>&,       \
                             const Var<T>&, const NoiseSchedule&, DbKind);                                       \
  template Var<T> cip_loss<T>(const NoisePredictor<T>&, const NoisePredictor<T>*, const Var<T>&,                 \
                              std::span<const int>, const ConceptVocabulary&, const Prompt&, RestrictionMode,    \
                              TargetBranch, Var<T>*);                                                                     \
  template Var<T> wm_loss<T>(const watermark::BitDecoder<T>&, const Var<T>&, const watermark::Message&,          \
                             const Prompt&);                                                                     \
  template Var<T> erasure_loss<T>(const NoisePredictor<T>&, const NoisePredictor<T>&, const Var<T>&,            \
                                  std::span<const int>, const ConceptVocabulary&);                               \
  template Var<T> total_loss<T>(const LossParts<T>&, const LossWeights&);

IDGUARD_INSTANTIATE_LOSSES(float)
IDGUARD_INSTANTIATE_LOSSES(double)

}  // namespace idguard::losses
