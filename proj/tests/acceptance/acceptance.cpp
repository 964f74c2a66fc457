// Acceptance suite: one PASS/FAIL line per criterion.
//
// Criteria 6-10 need trained models. The pipeline (base denoiser, codec,
// classifiers, three fine-tunes, reports) is built once into --work and reused
// on later runs while the profile config is unchanged; --fresh rebuilds it.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "idguard/checkpoint.hpp"
#include "idguard/errors.hpp"
#include "idguard/evaluation.hpp"
#include "idguard/image_io.hpp"
#include "idguard/kernels.hpp"
#include "idguard/losses.hpp"
#include "idguard/training.hpp"
#include "support/gradcheck.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace idguard;
using conditioning::ConceptVocabulary;
using conditioning::LossKind;
using conditioning::LossRoute;
using conditioning::RestrictionMode;
using training::GuardConfig;

namespace {

constexpr std::uint64_t kReportSeed = 2024;
const RestrictionMode kModes[] = {RestrictionMode::Target, RestrictionMode::Untarget, RestrictionMode::Conditioning};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", prec, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void progress(const std::string& msg) {
  static const auto t0 = std::chrono::steady_clock::now();
  std::cerr << "[" << fmt(seconds_since(t0), 5) << "s] " << msg << std::endl;
}

// ---------------------------------------------------------------------------
// Desk-scale profile and the cached pipeline.

GuardConfig profile() {
  GuardConfig c;
  c.seed = 7;
  c.steps_base = 6000;
  c.batch = 16;
  c.lr_base = 5e-4;
  c.steps_finetune = 1000;
  c.batch_finetune = 16;
  c.lr_finetune = 1e-4;
  c.steps_codec = 3000;
  c.steps_classifier = 600;
  c.log_every = 100;
  return c;
}

GuardConfig plain_variant(GuardConfig c) {
  c.lambda_r = 0;
  c.lambda_w = 0;
  c.blacklist.clear();
  return c;
}

GuardConfig erasure_variant(GuardConfig c) {
  c.baseline = training::Baseline::Erasure;
  return c;
}

class Pipeline {
 public:
  Pipeline(fs::path work, GuardConfig guard) : work_(std::move(work)), guard_(std::move(guard)) {
    fs::create_directories(work_);
  }

  const GuardConfig& guard_config() const { return guard_; }
  GuardConfig plain_config() const { return plain_variant(guard_); }
  GuardConfig erasure_config() const { return erasure_variant(guard_); }

  const synthdata::Corpora& corpora() {
    if (!corpora_) corpora_ = synthdata::build_corpora(guard_.seed);
    return *corpora_;
  }

  const training::TrainState& base() {
    if (!base_) {
      auto cfg = guard_;
      base_ = cached_state("base", base_key(cfg), [&] {
        auto s = training::init_base_state(cfg);
        auto log = open_log("base");
        training::train_base(s, corpora().base_train, cfg.steps_base, &log);
        return s;
      });
    }
    return *base_;
  }

  const watermark::WatermarkCodec& codec() {
    if (!codec_) {
      const auto path = work_ / "codec.ckpt";
      const json key = {{"seed", guard_.seed},     {"steps", guard_.steps_codec}, {"batch", guard_.batch_codec},
                        {"lr", guard_.lr_codec}, {"message", guard_.message}};
      if (fresh_key(path, key)) {
        codec_ = watermark::WatermarkCodec::load(path);
        codec_seconds_ = sidecar(path).value("seconds", -1.0);
      } else {
        progress("training watermark codec");
        const auto t0 = std::chrono::steady_clock::now();
        watermark::CodecTrainOptions opt;
        opt.steps = guard_.steps_codec;
        opt.batch = guard_.batch_codec;
        opt.lr = guard_.lr_codec;
        auto log = open_log("codec");
        codec_ = watermark::pretrain_codec(corpora().base_train, guard_.watermark_message().size(),
                                           static_cast<std::uint64_t>(guard_.seed), opt, &log);
        codec_seconds_ = seconds_since(t0);
        codec_->save(path);
        write_key(path, key, {{"seconds", codec_seconds_}});
      }
    }
    return *codec_;
  }

  const evaluation::ClassifierSuite& suite() {
    if (!suite_) {
      const auto path = work_ / "classifiers.ckpt";
      const json key = {{"seed", guard_.seed},
                        {"steps", guard_.steps_classifier},
                        {"batch", guard_.batch_classifier},
                        {"lr", guard_.lr_classifier}};
      if (fresh_key(path, key)) {
        suite_ = evaluation::ClassifierSuite::load(path);
      } else {
        progress("training attribute classifiers");
        evaluation::ClassifierTrainOptions opt;
        opt.steps = guard_.steps_classifier;
        opt.batch = guard_.batch_classifier;
        opt.lr = guard_.lr_classifier;
        suite_ = evaluation::train_classifier_suite(corpora(), static_cast<std::uint64_t>(guard_.seed), opt);
        suite_->save(path);
        write_key(path, key);
      }
    }
    return *suite_;
  }

  /// Fine-tuned state for "plain", "guard", or "erasure".
  const training::TrainState& finetuned(const std::string& variant) {
    auto it = finetuned_.find(variant);
    if (it != finetuned_.end()) return it->second;
    const GuardConfig cfg = variant == "plain" ? plain_config() : variant == "erasure" ? erasure_config() : guard_;
    json relevant = cfg.to_json();
    for (const char* k : {"steps_classifier", "batch_classifier", "lr_classifier", "eval_n", "frechet_n", "sample_batch",
                          "log_every"}) {
      relevant.erase(k);
    }
    json key = {{"base", base_key(cfg)}, {"config", relevant}, {"codec", codec().decoder_hash()}};
    const auto& b = base();
    auto s = cached_state("ft_" + variant, key, [&] {
      auto st = training::init_finetune_state(b.model(), cfg);
      auto log = open_log("ft_" + variant);
      training::train_finetune(st, codec(), corpora(), cfg.steps_finetune, &log);
      return st;
    });
    return finetuned_.emplace(variant, std::move(s)).first->second;
  }

  const evaluation::EvalReport& report(const std::string& variant) {
    auto it = reports_.find(variant);
    if (it != reports_.end()) return it->second;
    const auto& s = finetuned(variant);
    progress("evaluating " + variant);
    const auto r = evaluation::full_report(s.model(), codec(), suite(), corpora().eval_refs, s.config, kReportSeed);
    checkpoint::write_file(work_ / ("report_" + variant + ".json"), r.to_json().dump(2) + "\n");
    return reports_.emplace(variant, r).first->second;
  }

  double collateral(const std::string& variant) {
    auto it = collateral_.find(variant);
    if (it != collateral_.end()) return it->second;
    const auto model = variant == "base" ? base().model() : finetuned(variant).model();
    const auto& cfg = guard_;
    progress("collateral probe on " + variant);
    const double rate =
        evaluation::collateral_probe(model, suite().hazard(), cfg.vocabulary(), cfg.eval_n,
                                     evaluation::cell_seed(kReportSeed, "collateral"), cfg.schedule(), cfg.sample_batch);
    return collateral_.emplace(variant, rate).first->second;
  }

  const fs::path& work() const { return work_; }
  /// Wall time of the codec training run, also when loaded from the cache.
  double codec_seconds() {
    (void)codec();
    return codec_seconds_;
  }

 private:
  static json base_key(const GuardConfig& c) {
    return {{"seed", c.seed},         {"steps", c.steps_base},    {"batch", c.batch},
            {"lr", c.lr_base},        {"width", c.base_width},    {"T", c.timesteps},
            {"beta", {c.beta_start, c.beta_end}}, {"null_dropout", c.null_dropout}};
  }

  std::ofstream open_log(const std::string& name) const { return std::ofstream(work_ / (name + ".jsonl")); }

  static json sidecar(const fs::path& artifact) {
    const auto side = fs::path(artifact.string() + ".key.json");
    if (!fs::exists(side)) return json::object();
    try {
      return json::parse(checkpoint::read_file(side));
    } catch (const std::exception&) {
      return json::object();
    }
  }

  static bool fresh_key(const fs::path& artifact, const json& key) {
    if (!fs::exists(artifact)) return false;
    const auto side = sidecar(artifact);
    return side.contains("key") && side["key"] == key;
  }

  static void write_key(const fs::path& artifact, const json& key, json extra = json::object()) {
    extra["key"] = key;
    checkpoint::write_file(fs::path(artifact.string() + ".key.json"), extra.dump(2));
  }

  training::TrainState cached_state(const std::string& name, const json& key,
                                    const std::function<training::TrainState()>& build) {
    const auto path = work_ / (name + ".ckpt");
    if (fresh_key(path, key)) return training::checkpoint_load(path);
    progress("training " + name);
    const auto t0 = std::chrono::steady_clock::now();
    auto s = build();
    training::checkpoint_save(s, path);
    write_key(path, key);
    progress(name + " done in " + fmt(seconds_since(t0), 5) + "s");
    return s;
  }

  fs::path work_;
  GuardConfig guard_;
  std::optional<synthdata::Corpora> corpora_;
  std::optional<training::TrainState> base_;
  std::optional<watermark::WatermarkCodec> codec_;
  double codec_seconds_ = -1;
  std::optional<evaluation::ClassifierSuite> suite_;
  std::map<std::string, training::TrainState> finetuned_;
  std::map<std::string, evaluation::EvalReport> reports_;
  std::map<std::string, double> collateral_;
};

// ---------------------------------------------------------------------------
// Property criteria (1-5).

struct Probe {
  ConceptVocabulary vocab = ConceptVocabulary::standard();
  diffusion::NoiseSchedule sched = diffusion::make_schedule(200, 1e-4, 0.02);
  diffusion::ProbeDenoiser<double> model;
  diffusion::ProbeDenoiser<double> base;
  std::vector<int> t{7, 64, 190};
  ag::Var<double> x_t;

  explicit Probe(std::uint64_t seed)
      : model(ConceptVocabulary::standard().size(), seed), base(ConceptVocabulary::standard().size(), seed + 100) {
    base.params().freeze();
    x_t = ag::constant(testing::randn({3, 3, 4, 4}, seed + 1, 0.8));
  }

  std::vector<ag::Var<double>*> leaves() {
    std::vector<ag::Var<double>*> out;
    for (auto& [n, v] : model.params().items()) out.push_back(&v);
    return out;
  }

  /// The stop-gradient loss with every target branch replaced by its value at
  /// the current parameters: the function whose derivative cip_loss returns.
  std::function<ag::Var<double>()> frozen_target_cip(const conditioning::Prompt& mal, RestrictionMode mode) {
    const auto target_prompt = mode == RestrictionMode::Untarget ? vocab.null_prompt() : vocab.without_prohibited(mal);
    ag::NoGradGuard ng;
    const auto target = ag::constant(model.predict_noise(x_t, t, target_prompt).value());
    const auto only = vocab.prohibited_only(mal);
    const auto base_target = ag::constant(base.predict_noise(x_t, t, only).value());
    return [=, this] {
      auto l = ag::mse(model.predict_noise(x_t, t, mal), target);
      if (mode == RestrictionMode::Conditioning) l = ag::add(l, ag::mse(model.predict_noise(x_t, t, only), base_target));
      return l;
    };
  }

  std::vector<double> cip_grad(const conditioning::Prompt& mal, RestrictionMode mode, losses::TargetBranch branch) {
    model.params().zero_grad();
    ag::backward(losses::cip_loss(model, &base, x_t, t, vocab, mal, mode, branch));
    std::vector<double> g;
    for (auto& [n, v] : model.params().items()) {
      for (std::size_t i = 0; i < v.value().size(); ++i) g.push_back(v.grad().empty() ? 0.0 : v.grad()[i]);
    }
    model.params().zero_grad();
    return g;
  }
};

Outcome criterion_gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  Probe p(11);
  const double h = 1e-5, floor = 1e-6;
  std::ostringstream d;
  double worst = 0;
  const auto params = p.model.params().scalar_count();
  d << "probe " << params << " params; max rel err";
  auto record = [&](const std::string& name, const testing::GradCheck& g) {
    worst = std::max(worst, g.max_error);
    d << " " << name << "=" << fmt(g.max_error, 2);
  };

  const auto x0 = ag::constant(testing::randn({3, 3, 4, 4}, 12, 0.5));
  const auto noise = ag::constant(testing::randn({3, 3, 4, 4}, 13));
  const std::vector<conditioning::Prompt> prompts{p.vocab.parse("sks circle blue"), p.vocab.parse("square red"),
                                                  p.vocab.parse("sks triangle")};
  auto db = [&] { return losses::db_loss(p.model, x0, p.t, noise, p.model.embed(prompts), p.sched); };
  record("db", testing::gradcheck(p.leaves(), db, h, floor));

  const auto mal = p.vocab.parse("sks circle blue hazard");
  for (auto mode : kModes) {
    auto analytic = [&] { return losses::cip_loss(p.model, &p.base, p.x_t, p.t, p.vocab, mal, mode); };
    record("cip_" + conditioning::to_string(mode),
           testing::gradcheck_split(p.leaves(), analytic, p.frozen_target_cip(mal, mode), h, floor));
  }

  // Watermark loss through the training path: eps -> estimate_x0 -> decoder.
  const watermark::ProbeDecoder<double> dec(8, 14);
  const auto m = watermark::Message::random(8, 15);
  const std::vector<int> t_small{3, 10, 25};
  auto wm = [&] {
    const auto eps = p.model.predict_noise(p.x_t, t_small, p.vocab.parse("sks circle"));
    const auto x0_hat = diffusion::estimate_x0(p.x_t, t_small, eps, p.sched);
    return losses::wm_loss(dec, x0_hat, m, p.vocab.parse("sks circle"));
  };
  record("wm", testing::gradcheck(p.leaves(), wm, h, floor));
  bool decoder_untouched = true;
  for (const auto& [n, v] : dec.params().items()) decoder_untouched &= v.grad().empty();

  const double secs = seconds_since(t0);
  d << "; decoder grads empty=" << (decoder_untouched ? "yes" : "no") << "; " << fmt(secs, 3) << "s";
  return {params <= 100 && worst <= 1e-4 && decoder_untouched && secs < 60, d.str()};
}

Outcome criterion_stop_gradient() {
  std::ostringstream d;
  bool ok = true;
  double worst_detached = 0, least_live = 1e300;
  for (std::uint64_t seed : {21, 22, 23}) {
    Probe p(seed);
    for (auto mode : kModes) {
      const auto mal = p.vocab.parse("sks square hazard");
      const auto sg = p.cip_grad(mal, mode, losses::TargetBranch::StopGradient);
      const auto det = p.cip_grad(mal, mode, losses::TargetBranch::Detached);
      const auto live = p.cip_grad(mal, mode, losses::TargetBranch::Live);
      double dd = 0, dl = 0;
      for (std::size_t i = 0; i < sg.size(); ++i) {
        dd = std::max(dd, std::abs(sg[i] - det[i]));
        dl = std::max(dl, std::abs(sg[i] - live[i]));
      }
      worst_detached = std::max(worst_detached, dd);
      least_live = std::min(least_live, dl);
      ok &= dd <= 1e-12 && dl > 1e-8;
    }
  }
  d << "max |sg - detached| = " << fmt(worst_detached, 3) << " (<= 1e-12); min max|sg - live| = " << fmt(least_live, 3)
    << " (> 0)";
  return {ok, d.str()};
}

Outcome criterion_routing(const training::TrainState* guard_state) {
  const auto v = ConceptVocabulary::standard();
  const std::vector<std::pair<std::string, std::string>> categories{{"identity", "sks circle blue"},
                                                                    {"identity+prohibited", "sks circle blue hazard"},
                                                                    {"plain", "circle blue"},
                                                                    {"prohibited", "hazard square red"}};
  int rows = 0, correct = 0;
  for (auto mode : kModes) {
    for (const auto& [kind, text] : categories) {
      LossRoute expect;
      if (kind == "identity") expect = {LossKind::DbInstance, LossKind::Wm};
      if (kind == "identity+prohibited") expect = {LossKind::Cip, LossKind::Wm};
      if (kind == "plain") expect = {LossKind::DbPrior};
      if (kind == "prohibited" && mode == RestrictionMode::Conditioning) expect = {LossKind::Preserve};
      ++rows;
      correct += conditioning::route_prompt(v, v.parse(text), mode) == expect;
    }
  }
  // Watermark gate: no identity, no decoder call, exact zero.
  watermark::WatermarkCodec codec({}, 3);
  codec.freeze();
  const auto m = watermark::Message::random(32, 4);
  auto x = ag::Var<float>(Tensor<float>({2, 3, 32, 32}, 0.1f), true);
  bool gate = true;
  for (const char* text : {"circle blue", "hazard square red", "null"}) {
    const long before = codec.calls();
    const auto l = losses::wm_loss(codec, x, m, v.parse(text));
    gate &= l.item() == 0.0f && codec.calls() == before && !l.requires_grad();
  }
  const long before = codec.calls();
  (void)losses::wm_loss(codec, x, m, v.parse("sks circle blue"));
  gate &= codec.calls() == before + 1;

  // The guarded fine-tune's own counters honour the same contract.
  bool counters = true;
  std::string counter_note = "no fine-tune counters";
  if (guard_state) {
    const auto& c = guard_state->counters.counts();
    auto get = [&](const std::string& kind, const std::string& key) -> long {
      auto it = c.find(kind);
      if (it == c.end()) return 0;
      auto jt = it->second.find(key);
      return jt == it->second.end() ? 0 : jt->second;
    };
    const long id = get("identity", "items"), mal = get("identity+prohibited", "items"), pl = get("plain", "items");
    counters = id > 0 && mal > 0 && pl > 0 && get("identity", "DB_instance") == id && get("identity", "WM") == id &&
               get("identity", "CIP") == 0 && get("identity+prohibited", "CIP") == mal &&
               get("identity+prohibited", "WM") == mal && get("identity+prohibited", "DB_instance") == 0 &&
               get("plain", "DB_prior") == pl && get("plain", "WM") == 0 && get("plain", "CIP") == 0;
    counter_note = "fine-tune counters identity=" + std::to_string(id) + " malicious=" + std::to_string(mal) +
                   " plain=" + std::to_string(pl) + (counters ? " consistent" : " INCONSISTENT");
  }
  std::ostringstream d;
  d << correct << "/" << rows << " routes exact; wm gate " << (gate ? "exact zero, no decoder call" : "VIOLATED") << "; "
    << counter_note;
  return {correct == rows && gate && counters, d.str()};
}

Outcome criterion_schedule() {
  const auto s = diffusion::make_schedule(200, 1e-4, 0.02);
  double worst_ratio = 0;
  long double prod = 1.0L;
  for (int t = 1; t <= s.T; ++t) {
    const long double beta = 1e-4L + (0.02L - 1e-4L) * static_cast<long double>(t - 1) / 199.0L;
    prod *= 1.0L - beta;
    worst_ratio = std::max(worst_ratio, static_cast<double>(std::abs(s.ab(t) / prod - 1.0L)));
  }
  // Round trip at 32-bit for every timestep.
  Rng rng(5);
  const int n = s.T;
  Tensor<float> x0({n, 3, 8, 8}), eps({n, 3, 8, 8});
  for (auto& v : x0.vec()) v = static_cast<float>(rng.uniform(-1, 1));
  for (auto& v : eps.vec()) v = static_cast<float>(rng.normal());
  std::vector<int> t(n);
  for (int i = 0; i < n; ++i) t[i] = i + 1;
  const auto xt = diffusion::forward_diffuse(ag::constant(x0), t, ag::constant(eps), s);
  const auto back = diffusion::estimate_x0(xt, t, ag::constant(eps), s, false).value();
  double worst_rt = 0;
  for (std::size_t i = 0; i < back.size(); ++i) worst_rt = std::max(worst_rt, double(std::abs(back[i] - x0[i])));
  std::ostringstream d;
  d << "max |alpha_bar / prod(1 - beta) - 1| = " << fmt(worst_ratio, 3) << " (<= 1e-10); max round-trip residual "
    << fmt(worst_rt, 3) << " over t=1..200 at 32-bit (<= 1e-6)";
  return {worst_ratio <= 1e-10 && worst_rt <= 1e-6, d.str()};
}

Outcome criterion_frechet() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(31);
  Eigen::MatrixXd a(500, 64);
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) a(i, j) = rng.normal() + 0.1 * j;
  const double self = evaluation::frechet_distance(a, a);
  // N(0, I) vs N(0, 4I) in 4 dimensions: 4 * (1 + 4 - 2 * 2) = 4.
  Eigen::MatrixXd p(10000, 4), q(10000, 4);
  for (int i = 0; i < 10000; ++i) {
    for (int j = 0; j < 4; ++j) {
      p(i, j) = rng.normal();
      q(i, j) = 2.0 * rng.normal();
    }
  }
  const double fd = evaluation::frechet_distance(p, q);
  const double secs = seconds_since(t0);
  std::ostringstream d;
  d << "identical sets " << fmt(self, 3) << " (<= 1e-8); N(0,I) vs N(0,4I) dim 4: " << fmt(fd) << " vs 4.0 (rel err "
    << fmt(std::abs(fd - 4) / 4, 3) << " <= 0.1); " << fmt(secs, 3) << "s";
  return {self <= 1e-8 && std::abs(fd - 4.0) <= 0.4 && secs < 60, d.str()};
}

// ---------------------------------------------------------------------------
// Pipeline criteria (6-10).

Outcome criterion_codec(Pipeline& pl) {
  const auto& codec = pl.codec();
  const double train_secs = pl.codec_seconds();
  const auto hash_before = codec.decoder_hash();
  const auto& held_out = pl.corpora().classifier_test.images;
  const auto m = watermark::evaluate_codec(codec, held_out, 41);
  watermark::WatermarkCodec untrained(codec.config(), 99);
  untrained.freeze();
  const auto chance = watermark::evaluate_codec(untrained, held_out, 41);
  bool hash_ok = true;
  for (const char* v : {"guard", "plain", "erasure"}) {
    (void)pl.finetuned(v);
    hash_ok &= pl.codec().decoder_hash() == hash_before;
  }
  const auto reloaded = watermark::WatermarkCodec::load(pl.work() / "codec.ckpt");
  hash_ok &= reloaded.decoder_hash() == hash_before;
  std::ostringstream d;
  d << "held-out clean " << fmt(m.clean_bit_accuracy) << " (>= 0.98), sigma=0.05 " << fmt(m.noisy_bit_accuracy)
    << " (>= 0.90), untrained " << fmt(chance.clean_bit_accuracy) << " (0.5 +- 0.05), mean |perturbation| "
    << fmt(m.mean_abs_perturbation, 3) << "; decoder hash " << (hash_ok ? "unchanged" : "CHANGED")
    << " across fine-tunes; codec stage " << fmt(train_secs, 4) << "s";
  return {m.clean_bit_accuracy >= 0.98 && m.noisy_bit_accuracy >= 0.90 &&
              std::abs(chance.clean_bit_accuracy - 0.5) <= 0.05 && hash_ok && train_secs >= 0 && train_secs <= 1200,
          d.str()};
}

Outcome criterion_restriction(Pipeline& pl) {
  const auto& g = pl.report("guard");
  const auto& u = pl.report("plain");
  std::ostringstream d;
  d << "detections per 100 on 'sks circle blue hazard': guard " << g.detections << ", unprotected " << u.detections
    << " (guard <= 10% of unprotected, unprotected >= 50)";
  return {u.detections >= 50 && g.detections * 10 <= u.detections, d.str()};
}

Outcome criterion_binding(Pipeline& pl) {
  const auto& g = pl.report("guard");
  std::ostringstream d;
  d << "bit accuracy identity prompts " << fmt(g.bit_accuracy_mean) << " (>= 0.90), non-identity "
    << fmt(g.bit_accuracy_nonidentity) << " (<= 0.65); present rate " << fmt(g.watermark_present_rate);
  return {g.bit_accuracy_mean >= 0.90 && g.bit_accuracy_nonidentity <= 0.65, d.str()};
}

Outcome criterion_collateral(Pipeline& pl) {
  const double base = pl.collateral("base");
  const double guard = pl.report("guard").collateral_hazard_rate;
  const double erasure = pl.collateral("erasure");
  std::ostringstream d;
  d << "hazard detection rate on 'hazard square red': base " << fmt(base) << " (>= 0.6), guard " << fmt(guard)
    << " (>= 0.5), erasure baseline " << fmt(erasure) << " (< 0.2)";
  return {base >= 0.6 && guard >= 0.5 && erasure < 0.2, d.str()};
}

Outcome criterion_fidelity(Pipeline& pl) {
  const auto& g = pl.report("guard");
  const auto& u = pl.report("plain");
  const double dadh = std::abs(g.class_adherence - u.class_adherence);
  const double rel = std::abs(g.frechet_benign - u.frechet_benign) / u.frechet_benign;
  std::ostringstream d;
  d << "class adherence guard " << fmt(g.class_adherence) << " vs plain " << fmt(u.class_adherence) << " (|diff| "
    << fmt(dadh, 3) << " <= 0.05); frechet_benign guard " << fmt(g.frechet_benign) << " vs plain "
    << fmt(u.frechet_benign) << " (rel " << fmt(rel, 3) << " <= 0.25)";
  return {dadh <= 0.05 && rel <= 0.25, d.str()};
}

// ---------------------------------------------------------------------------
// Determinism and persistence (11).

struct TinyRun {
  std::string base_bytes, codec_bytes, finetune_bytes, report, png;
};

TinyRun tiny_pipeline(const evaluation::ClassifierSuite& suite, const fs::path& dir) {
  GuardConfig c;
  c.seed = 3;
  c.steps_base = 6;
  c.batch = 4;
  c.steps_finetune = 4;
  c.batch_finetune = 8;
  c.timesteps = 8;
  c.frechet_n = 128;
  c.eval_n = 16;
  const auto corpora = synthdata::build_corpora(c.seed);
  auto base = training::init_base_state(c);
  training::train_base(base, corpora.base_train, c.steps_base);
  watermark::CodecTrainOptions opt;
  opt.steps = 5;
  opt.batch = 4;
  const auto codec = watermark::pretrain_codec(corpora.base_train, 32, c.seed, opt);
  auto ft = training::init_finetune_state(base.model(), c);
  training::train_finetune(ft, codec, corpora, c.steps_finetune);
  const auto report =
      evaluation::full_report(ft.model(), codec, suite, corpora.eval_refs, c, 5);
  const auto imgs = diffusion::sample(ft.model(), c.vocabulary().parse("sks circle blue"), c.schedule(), 4, 9);
  fs::create_directories(dir);
  image_io::write_png(dir / "sheet.png", image_io::contact_sheet(imgs, 2));
  return {checkpoint::serialize(training::to_checkpoint(base)),
          checkpoint::serialize(codec.to_checkpoint()),
          checkpoint::serialize(training::to_checkpoint(ft)),
          report.to_json().dump(2),
          checkpoint::read_file(dir / "sheet.png")};
}

Outcome criterion_determinism(Pipeline& pl) {
  std::ostringstream d;
  bool ok = true;

  // Two complete fixed-seed runs of a reduced pipeline.
  const auto a = tiny_pipeline(pl.suite(), pl.work() / "det_a");
  const auto b = tiny_pipeline(pl.suite(), pl.work() / "det_b");
  const bool same = a.base_bytes == b.base_bytes && a.codec_bytes == b.codec_bytes &&
                    a.finetune_bytes == b.finetune_bytes && a.report == b.report && a.png == b.png;
  ok &= same;
  d << "repeat run checkpoints/report/PNG " << (same ? "identical" : "DIFFER");

  // Persistence of the full guard state.
  const auto& guard = pl.finetuned("guard");
  const auto bytes = checkpoint::serialize(training::to_checkpoint(guard));
  const auto path = pl.work() / "roundtrip.ckpt";
  training::checkpoint_save(guard, path);
  const auto reread = checkpoint::serialize(training::to_checkpoint(training::checkpoint_load(path)));
  const bool rt = reread == bytes && checkpoint::read_file(path) == bytes;
  ok &= rt;
  d << "; save/load " << (rt ? "byte-identical" : "DIFFERS");

  // Resume: split training at the midpoint through a checkpoint file.
  GuardConfig c;
  c.seed = 4;
  c.batch = 4;
  c.batch_finetune = 8;
  c.timesteps = 20;
  const auto& corpora = pl.corpora();
  auto straight = training::init_base_state(c);
  auto s_base = training::train_base(straight, corpora.base_train, 6);
  auto half = training::init_base_state(c);
  auto h1 = training::train_base(half, corpora.base_train, 3);
  training::checkpoint_save(half, pl.work() / "resume.ckpt");
  auto resumed = training::checkpoint_load(pl.work() / "resume.ckpt");
  auto h2 = training::train_base(resumed, corpora.base_train, 6);
  h1.insert(h1.end(), h2.begin(), h2.end());

  const auto& codec = pl.codec();
  auto ft_straight = training::init_finetune_state(straight.model(), c);
  auto f_all = training::train_finetune(ft_straight, codec, corpora, 4);
  auto ft_half = training::init_finetune_state(straight.model(), c);
  auto f1 = training::train_finetune(ft_half, codec, corpora, 2);
  training::checkpoint_save(ft_half, pl.work() / "resume_ft.ckpt");
  auto ft_resumed = training::checkpoint_load(pl.work() / "resume_ft.ckpt");
  auto f2 = training::train_finetune(ft_resumed, codec, corpora, 4);
  f1.insert(f1.end(), f2.begin(), f2.end());

  double worst = 0;
  bool aligned = s_base.size() == h1.size() && f_all.size() == f1.size();
  if (aligned) {
    for (std::size_t i = 0; i < s_base.size(); ++i) worst = std::max(worst, std::abs(s_base[i].loss - h1[i].loss));
    for (std::size_t i = 0; i < f_all.size(); ++i) worst = std::max(worst, std::abs(f_all[i].loss - f1[i].loss));
  }
  const bool params_same = nn::fingerprint(resumed.params) == nn::fingerprint(straight.params) &&
                           nn::fingerprint(ft_resumed.params) == nn::fingerprint(ft_straight.params);
  ok &= aligned && worst <= 1e-9 && params_same;
  d << "; resume max |loss diff| " << fmt(worst, 3) << " (<= 1e-9), final weights "
    << (params_same ? "identical" : "DIFFER") << "; " << kernels::max_threads() << " thread(s)";
  return {ok, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string work = "acceptance_work";
  bool fresh = false;
  std::vector<int> only;
  std::vector<std::string> overrides;
  app.add_option("--work", work, "artifact cache directory");
  app.add_flag("--fresh", fresh, "discard cached artifacts");
  app.add_option("--only", only, "run only these criteria");
  app.add_option("--set", overrides, "override a profile config field (key=value)");
  CLI11_PARSE(app, argc, argv);

  if (fresh) fs::remove_all(work);
  GuardConfig cfg = profile();
  for (const auto& o : overrides) cfg.apply_override(o);
  Pipeline pl(work, cfg);

  auto wanted = [&](int id) { return only.empty() || std::find(only.begin(), only.end(), id) != only.end(); };
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient correctness", criterion_gradients},
      {"stop-gradient semantics", criterion_stop_gradient},
      {"routing truth table",
       [&] { return criterion_routing(wanted(7) || wanted(11) ? &pl.finetuned("guard") : nullptr); }},
      {"schedule and round-trip algebra", criterion_schedule},
      {"Frechet oracle", criterion_frechet},
      {"watermark codec", [&] { return criterion_codec(pl); }},
      {"restriction (detections per 100)", [&] { return criterion_restriction(pl); }},
      {"watermark binding", [&] { return criterion_binding(pl); }},
      {"collateral damage ordering", [&] { return criterion_collateral(pl); }},
      {"fidelity preservation", [&] { return criterion_fidelity(pl); }},
      {"determinism and persistence", [&] { return criterion_determinism(pl); }},
  };

  int failed = 0;
  json summary = json::array();
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!wanted(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  [" << id << "] " << criteria[i].first << ": " << o.detail
              << std::endl;
    summary.push_back({{"criterion", id}, {"name", criteria[i].first}, {"pass", o.pass}, {"detail", o.detail}});
  }
  checkpoint::write_file(fs::path(work) / "acceptance_summary.json", summary.dump(2) + "\n");
  return failed == 0 ? 0 : 1;
}
