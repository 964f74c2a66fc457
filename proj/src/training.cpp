#include "idguard/training.hpp"

#include <cmath>
#include <fstream>

#include "idguard/errors.hpp"
#include "idguard/rng.hpp"

namespace idguard::training {

using conditioning::LossKind;
using conditioning::LossRoute;
using conditioning::Prompt;

namespace {

std::string to_string(Baseline b) { return b == Baseline::Erasure ? "erasure" : "none"; }

Baseline baseline_from_string(const std::string& s) {
  if (s == "none") return Baseline::None;
  if (s == "erasure") return Baseline::Erasure;
  throw ValidationError("unknown baseline '" + s + "' (none|erasure)");
}

}  // namespace

nlohmann::json GuardConfig::to_json() const {
  return {
      {"lambda_r", lambda_r},
      {"lambda_w", lambda_w},
      {"lambda_prior", lambda_prior},
      {"lambda_e", lambda_e},
      {"mode", conditioning::to_string(mode)},
      {"blacklist", blacklist},
      {"message", message},
      {"seed", seed},
      {"steps_base", steps_base},
      {"steps_finetune", steps_finetune},
      {"batch", batch},
      {"batch_finetune", batch_finetune},
      {"lr_base", lr_base},
      {"lr_finetune", lr_finetune},
      {"wm_on_malicious", wm_on_malicious},
      {"malicious_batch_fraction", malicious_batch_fraction},
      {"null_dropout", null_dropout},
      {"baseline", to_string(baseline)},
      {"cip_xt_source", cip_xt_source},
      {"finetune_embeddings", finetune_embeddings},
      {"steps_codec", steps_codec},
      {"batch_codec", batch_codec},
      {"lr_codec", lr_codec},
      {"steps_classifier", steps_classifier},
      {"batch_classifier", batch_classifier},
      {"lr_classifier", lr_classifier},
      {"base_width", base_width},
      {"timesteps", timesteps},
      {"beta_start", beta_start},
      {"beta_end", beta_end},
      {"eval_n", eval_n},
      {"frechet_n", frechet_n},
      {"sample_batch", sample_batch},
      {"log_every", log_every},
  };
}

GuardConfig GuardConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  GuardConfig c;
  const auto known = c.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ValidationError("unknown config key '" + key + "'");
  }
  auto get = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(field);
    } catch (const nlohmann::json::exception&) {
      throw ValidationError(std::string("config key '") + key + "' has the wrong type");
    }
  };
  get("lambda_r", c.lambda_r);
  get("lambda_w", c.lambda_w);
  get("lambda_prior", c.lambda_prior);
  get("lambda_e", c.lambda_e);
  std::string mode = conditioning::to_string(c.mode);
  get("mode", mode);
  c.mode = conditioning::restriction_mode_from_string(mode);
  get("blacklist", c.blacklist);
  get("message", c.message);
  get("seed", c.seed);
  get("steps_base", c.steps_base);
  get("steps_finetune", c.steps_finetune);
  get("batch", c.batch);
  get("batch_finetune", c.batch_finetune);
  get("lr_base", c.lr_base);
  get("lr_finetune", c.lr_finetune);
  get("wm_on_malicious", c.wm_on_malicious);
  get("malicious_batch_fraction", c.malicious_batch_fraction);
  get("null_dropout", c.null_dropout);
  std::string baseline = to_string(c.baseline);
  get("baseline", baseline);
  c.baseline = baseline_from_string(baseline);
  get("cip_xt_source", c.cip_xt_source);
  get("finetune_embeddings", c.finetune_embeddings);
  get("steps_codec", c.steps_codec);
  get("batch_codec", c.batch_codec);
  get("lr_codec", c.lr_codec);
  get("steps_classifier", c.steps_classifier);
  get("batch_classifier", c.batch_classifier);
  get("lr_classifier", c.lr_classifier);
  get("base_width", c.base_width);
  get("timesteps", c.timesteps);
  get("beta_start", c.beta_start);
  get("beta_end", c.beta_end);
  get("eval_n", c.eval_n);
  get("frechet_n", c.frechet_n);
  get("sample_batch", c.sample_batch);
  get("log_every", c.log_every);
  c.validate();
  return c;
}

void GuardConfig::validate() const {
  weights().validate();
  if (lambda_e < 0) throw ValidationError("lambda_e must be non-negative");
  for (double f : {malicious_batch_fraction, null_dropout}) {
    if (!(f >= 0 && f <= 1)) throw ValidationError("fractions must lie in [0, 1]");
  }
  for (int s : {steps_base, steps_finetune, steps_codec, steps_classifier}) {
    if (s < 0) throw ValidationError("step counts must be non-negative");
  }
  for (int b : {batch, batch_finetune, batch_codec, batch_classifier, sample_batch, eval_n, log_every}) {
    if (b < 1) throw ValidationError("batch sizes and counts must be positive");
  }
  for (double lr : {lr_base, lr_finetune, lr_codec, lr_classifier}) {
    if (!(lr > 0)) throw ValidationError("learning rates must be positive");
  }
  if (seed < 0) throw ValidationError("seed must be non-negative");
  if (cip_xt_source != "instance" && cip_xt_source != "noise") {
    throw ValidationError("cip_xt_source must be 'instance' or 'noise'");
  }
  if (finetune_embeddings != "all" && finetune_embeddings != "identity") {
    throw ValidationError("finetune_embeddings must be 'all' or 'identity'");
  }
  if (base_width < 8 || base_width % 8 != 0) throw ValidationError("base_width must be a positive multiple of 8");
  (void)vocabulary();
  (void)watermark_message();
  (void)schedule();
}

void GuardConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  auto j = to_json();
  if (!j.contains(key)) throw ValidationError("unknown config key '" + key + "'");
  nlohmann::json value;
  if (j[key].is_string()) {
    value = raw;
  } else if (j[key].is_array() && !raw.empty() && raw.front() != '[') {
    // Comma-separated shorthand for token lists.
    value = nlohmann::json::array();
    std::size_t start = 0;
    while (start <= raw.size()) {
      const auto comma = raw.find(',', start);
      const auto tok = raw.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
      if (!tok.empty()) value.push_back(tok);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  } else {
    try {
      value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("override value for '" + key + "' is not valid: " + raw);
    }
  }
  j[key] = value;
  *this = from_json(j);
}

diffusion::DenoiserConfig GuardConfig::denoiser_config() const {
  diffusion::DenoiserConfig d;
  d.base_width = base_width;
  d.vocab_size = vocabulary().size();
  return d;
}

diffusion::NoiseSchedule GuardConfig::schedule() const {
  return diffusion::make_schedule(timesteps, beta_start, beta_end);
}

GuardConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return GuardConfig::from_json(j);
}

void RouteCounters::record(const std::string& kind, const LossRoute& computed, int items) {
  auto& row = counts_[kind];
  row["items"] += items;
  for (auto k : {LossKind::DbInstance, LossKind::DbPrior, LossKind::Cip, LossKind::Wm, LossKind::Preserve}) {
    if (computed.has(k)) row[conditioning::to_string(k)] += items;
  }
}

nlohmann::json RouteCounters::to_json() const { return counts_; }

RouteCounters RouteCounters::from_json(const nlohmann::json& j) {
  RouteCounters c;
  c.counts_ = j.get<std::map<std::string, std::map<std::string, long>>>();
  return c;
}

std::string prompt_kind(const Prompt& p) {
  if (p.has_identity()) return p.has_prohibited() ? "identity+prohibited" : "identity";
  return p.has_prohibited() ? "prohibited" : "plain";
}

DenoiserModel<float> TrainState::model() const { return DenoiserModel<float>(config.denoiser_config(), params); }

TrainState init_base_state(const GuardConfig& config) {
  config.validate();
  TrainState s;
  s.stage = "base";
  s.config = config;
  s.params = DenoiserModel<float>(config.denoiser_config(), mix_seed(config.seed, 1)).params();
  s.rng_state = Rng(mix_seed(config.seed, 2)).state();
  return s;
}

TrainState init_finetune_state(const DenoiserModel<float>& base, const GuardConfig& config) {
  config.validate();
  if ((config.lambda_r > 0 || config.baseline == Baseline::Erasure) && config.blacklist.empty()) {
    throw ValidationError("a guarded fine-tune needs a non-empty blacklist");
  }
  if (base.config().base_width != config.base_width) {
    throw ValidationError("base model width differs from the config's base_width");
  }
  TrainState s;
  s.stage = "finetune";
  s.config = config;
  s.params = base.params();
  s.frozen_base = base.params();
  s.frozen_base->freeze();
  s.rng_state = Rng(mix_seed(config.seed, 3)).state();
  return s;
}

namespace {

// Moves the state's parameters into a model for the duration of a run and
// hands them back (with optimizer moments and RNG state) afterwards.
class Session {
 public:
  Session(TrainState& s, double lr)
      : state_(s), model_(s.config.denoiser_config(), std::move(s.params)), adam_(model_.params(), {lr}) {
    if (s.adam_t > 0) adam_.restore(s.adam_m, s.adam_v, s.adam_t);
    rng_.set_state(s.rng_state);
  }
  ~Session() {
    state_.params = std::move(model_.params());
    state_.adam_m = adam_.first_moments();
    state_.adam_v = adam_.second_moments();
    state_.adam_t = adam_.steps_taken();
    state_.rng_state = rng_.state();
  }
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  DenoiserModel<float>& model() { return model_; }
  nn::Adam<float>& adam() { return adam_; }
  Rng& rng() { return rng_; }

 private:
  TrainState& state_;
  DenoiserModel<float> model_;
  nn::Adam<float> adam_;
  Rng rng_;
};

std::vector<int> draw_indices(Rng& rng, int n, int size) {
  std::vector<int> idx(n);
  for (int& i : idx) i = rng.uniform_int(0, size - 1);
  return idx;
}

std::vector<int> draw_timesteps(Rng& rng, int n, int T) {
  std::vector<int> t(n);
  for (int& v : t) v = rng.uniform_int(1, T);
  return t;
}

Tensor<float> draw_noise(Rng& rng, std::vector<int> shape) {
  Tensor<float> z(std::move(shape));
  for (auto& v : z.vec()) v = static_cast<float>(rng.normal());
  return z;
}

std::vector<int> image_shape(int n) { return {n, synthdata::kChannels, synthdata::kImageSize, synthdata::kImageSize}; }

void write_log(std::ostream* log, const std::string& stage, const StepLog& s, const RouteCounters* counters) {
  if (!log) return;
  nlohmann::json j{{"stage", stage}, {"step", s.step}, {"loss", s.loss}, {"db", s.db}, {"cip", s.cip}, {"wm", s.wm}};
  if (counters) j["routes"] = counters->to_json();
  *log << j.dump() << "\n";
  log->flush();
}

}  // namespace

std::vector<StepLog> train_base(TrainState& state, const synthdata::Corpus& corpus, int until_step, std::ostream* log) {
  using namespace ag;
  if (state.stage != "base") throw ValidationError("train_base needs a base-stage state");
  if (corpus.size() == 0) throw ValidationError("base corpus is empty");
  const GuardConfig& cfg = state.config;
  const auto vocab = cfg.vocabulary();
  const auto schedule = cfg.schedule();
  std::vector<StepLog> out;
  Session session(state, cfg.lr_base);
  auto& model = session.model();
  auto& rng = session.rng();
  const int B = cfg.batch;
  for (; state.step < until_step; ++state.step) {
    const auto idx = draw_indices(rng, B, corpus.size());
    const auto t = draw_timesteps(rng, B, schedule.T);
    std::vector<Prompt> prompts;
    for (int i : idx) {
      prompts.push_back(rng.uniform() < cfg.null_dropout ? vocab.null_prompt() : corpus.specs[i].prompt(vocab));
    }
    auto noise = constant(draw_noise(rng, image_shape(B)));
    auto x0 = constant(corpus.gather(idx));
    auto loss = losses::db_loss(model, x0, t, noise, model.embed(prompts), schedule);
    model.params().zero_grad();
    backward(loss);
    session.adam().step();
    StepLog s{state.step, loss.item(), loss.item(), 0, 0};
    out.push_back(s);
    if (state.step % cfg.log_every == 0 || state.step + 1 == until_step) write_log(log, "base", s, nullptr);
  }
  model.params().zero_grad();
  return out;
}

std::vector<StepLog> train_finetune(TrainState& state, const watermark::WatermarkCodec& codec,
                                    const synthdata::Corpora& corpora, int until_step, std::ostream* log) {
  using namespace ag;
  if (state.stage != "finetune" || !state.frozen_base) throw ValidationError("train_finetune needs a finetune-stage state");
  if (!codec.frozen()) throw ValidationError("fine-tuning requires a frozen watermark codec");
  const GuardConfig& cfg = state.config;
  const auto vocab = cfg.vocabulary();
  const auto schedule = cfg.schedule();
  const auto message = cfg.watermark_message();
  if (message.size() != codec.bits()) throw ValidationError("config message length differs from the codec's k");
  const auto weights = cfg.weights();
  const DenoiserModel<float> base(cfg.denoiser_config(), *state.frozen_base);

  const auto& inst = corpora.subject_instances;
  const auto& prior = corpora.class_prior;
  if (inst.size() == 0 || prior.size() == 0) throw ValidationError("fine-tuning corpora are empty");
  const Prompt p_inst = inst.specs.front().prompt(vocab);
  const Prompt p_prior = prior.specs.front().prompt(vocab);
  const bool guarded = !vocab.blacklist_ids().empty();
  const Prompt p_mal = guarded ? vocab.with_prohibited(p_inst) : p_inst;
  const auto mode = cfg.mode;
  const LossRoute r_inst = conditioning::route_prompt(vocab, p_inst, mode);
  const LossRoute r_prior = conditioning::route_prompt(vocab, p_prior, mode);
  LossRoute r_mal = conditioning::route_prompt(vocab, p_mal, mode);
  if (!cfg.wm_on_malicious) r_mal.remove(LossKind::Wm);
  const bool erasure = cfg.baseline == Baseline::Erasure;

  const int B = cfg.batch_finetune;
  const int n_mal = guarded ? static_cast<int>(std::lround(B * cfg.malicious_batch_fraction)) : 0;
  const int n_inst = (B - n_mal + 1) / 2;
  const int n_prior = B - n_mal - n_inst;
  const int id_row = vocab.identity_id();

  std::vector<StepLog> out;
  Session session(state, cfg.lr_finetune);
  auto& model = session.model();
  auto& rng = session.rng();
  for (; state.step < until_step; ++state.step) {
    Var<float> db, cip, wm, extra;
    double wm_items = 0;
    Var<float> wm_sum;
    auto add_wm = [&](const Var<float>& part, int items) {
      auto scaled = scale(part, static_cast<float>(items));
      wm_sum = wm_sum.defined() ? add(wm_sum, scaled) : scaled;
      wm_items += items;
    };

    // Benign personalized items.
    if (n_inst > 0) {
      const auto idx = draw_indices(rng, n_inst, inst.size());
      const auto t = draw_timesteps(rng, n_inst, schedule.T);
      auto noise = constant(draw_noise(rng, image_shape(n_inst)));
      auto x_t = diffusion::forward_diffuse(constant(inst.gather(idx)), t, noise, schedule);
      auto eps = model.predict_noise(x_t, t, model.embed(std::vector<Prompt>(n_inst, p_inst)));
      LossRoute done;
      if (r_inst.has(LossKind::DbInstance)) {
        db = mse(eps, noise);
        done.add(LossKind::DbInstance);
      }
      if (r_inst.has(LossKind::Wm) && weights.lambda_w > 0) {
        add_wm(losses::wm_loss(codec, diffusion::estimate_x0(x_t, t, eps, schedule), message, p_inst), n_inst);
        done.add(LossKind::Wm);
      }
      state.counters.record(prompt_kind(p_inst), done, n_inst);
    }

    // Class-prior items.
    if (n_prior > 0) {
      const auto idx = draw_indices(rng, n_prior, prior.size());
      const auto t = draw_timesteps(rng, n_prior, schedule.T);
      auto noise = constant(draw_noise(rng, image_shape(n_prior)));
      LossRoute done;
      if (r_prior.has(LossKind::DbPrior)) {
        auto lp = losses::db_loss(model, constant(prior.gather(idx)), t, noise,
                                  model.embed(std::vector<Prompt>(n_prior, p_prior)), schedule, losses::DbKind::Prior);
        lp = scale(lp, static_cast<float>(weights.lambda_prior));
        db = db.defined() ? add(db, lp) : lp;
        done.add(LossKind::DbPrior);
      }
      state.counters.record(prompt_kind(p_prior), done, n_prior);
    }

    // Malicious items: identity plus the prohibited concept. No ground truth.
    if (n_mal > 0) {
      const auto t = draw_timesteps(rng, n_mal, schedule.T);
      Var<float> x_t;
      if (cfg.cip_xt_source == "noise") {
        x_t = constant(draw_noise(rng, image_shape(n_mal)));
      } else {
        const auto idx = draw_indices(rng, n_mal, inst.size());
        auto noise = constant(draw_noise(rng, image_shape(n_mal)));
        x_t = diffusion::forward_diffuse(constant(inst.gather(idx)), t, noise, schedule);
      }
      if (erasure) {
        extra = scale(losses::erasure_loss(model, base, x_t, t, vocab), static_cast<float>(cfg.lambda_e));
        state.counters.record("erasure", {}, n_mal);
      } else {
        LossRoute done;
        Var<float> eps_mal;
        if (r_mal.has(LossKind::Cip) && weights.lambda_r > 0) {
          cip = losses::cip_loss(model, &base, x_t, t, vocab, p_mal, mode, losses::TargetBranch::StopGradient,
                                 &eps_mal);
          done.add(LossKind::Cip);
          if (mode == RestrictionMode::Conditioning) {
            LossRoute keep;
            keep.add(LossKind::Preserve);
            state.counters.record(prompt_kind(vocab.prohibited_only(p_mal)), keep, n_mal);
          }
        }
        if (r_mal.has(LossKind::Wm) && weights.lambda_w > 0) {
          if (!eps_mal.defined()) eps_mal = model.predict_noise(x_t, t, model.embed(std::vector<Prompt>(n_mal, p_mal)));
          add_wm(losses::wm_loss(codec, diffusion::estimate_x0(x_t, t, eps_mal, schedule), message, p_mal), n_mal);
          done.add(LossKind::Wm);
        }
        state.counters.record(prompt_kind(p_mal), done, n_mal);
      }
    }

    if (wm_sum.defined()) wm = scale(wm_sum, static_cast<float>(1.0 / wm_items));
    auto loss = losses::total_loss<float>({db, cip, wm}, weights);
    if (extra.defined()) loss = add(loss, extra);
    model.params().zero_grad();
    backward(loss);
    if (cfg.finetune_embeddings == "identity") {
      auto& table = model.params().get("embed.weight");
      if (!table.grad().empty()) {
        auto& g = table.grad_mut();
        const int D = table.dim(1);
        for (int r = 0; r < table.dim(0); ++r) {
          if (r != id_row) std::fill_n(g.data() + r * D, D, 0.0f);
        }
      }
    }
    session.adam().step();
    StepLog s{state.step, loss.item(), db.defined() ? db.item() : 0.0, cip.defined() ? cip.item() : 0.0,
              wm.defined() ? wm.item() : 0.0};
    out.push_back(s);
    if (state.step % cfg.log_every == 0 || state.step + 1 == until_step) {
      write_log(log, "finetune", s, &state.counters);
    }
  }
  model.params().zero_grad();
  return out;
}

DenoiserModel<float> pretrain_base(const synthdata::Corpus& corpus, const GuardConfig& config, std::ostream* log) {
  auto state = init_base_state(config);
  train_base(state, corpus, config.steps_base, log);
  return state.model();
}

DenoiserModel<float> finetune(const DenoiserModel<float>& base, const watermark::WatermarkCodec& codec,
                              const synthdata::Corpora& corpora, const GuardConfig& config, std::ostream* log) {
  auto state = init_finetune_state(base, config);
  train_finetune(state, codec, corpora, config.steps_finetune, log);
  return state.model();
}

checkpoint::Checkpoint to_checkpoint(const TrainState& state) {
  checkpoint::Checkpoint ck;
  ck.meta = {{"kind", "train_state"},
             {"stage", state.stage},
             {"step", state.step},
             {"adam_t", state.adam_t},
             {"rng_state", state.rng_state},
             {"config", state.config.to_json()},
             {"denoiser", state.config.denoiser_config().to_json()},
             {"vocabulary", state.config.vocabulary().to_json()},
             {"schedule", state.config.schedule().to_json()},
             {"counters", state.counters.to_json()},
             {"has_frozen_base", state.frozen_base.has_value()}};
  ck.add_params("model", state.params);
  if (state.adam_t > 0) {
    const auto& items = state.params.items();
    for (std::size_t i = 0; i < items.size(); ++i) ck.add("adam_m/" + items[i].first, state.adam_m.at(i));
    for (std::size_t i = 0; i < items.size(); ++i) ck.add("adam_v/" + items[i].first, state.adam_v.at(i));
  }
  if (state.frozen_base) ck.add_params("base", *state.frozen_base);
  return ck;
}

TrainState from_checkpoint(const checkpoint::Checkpoint& ck) {
  TrainState s;
  try {
    if (ck.meta.at("kind").get<std::string>() != "train_state") throw FormatError("not a denoiser training checkpoint");
    s.stage = ck.meta.at("stage").get<std::string>();
    s.step = ck.meta.at("step").get<int>();
    s.adam_t = ck.meta.at("adam_t").get<long>();
    s.rng_state = ck.meta.at("rng_state").get<std::string>();
    s.config = GuardConfig::from_json(ck.meta.at("config"));
    s.counters = RouteCounters::from_json(ck.meta.at("counters"));
    s.params = ck.params("model");
    if (ck.meta.at("has_frozen_base").get<bool>()) {
      s.frozen_base = ck.params("base");
      s.frozen_base->freeze();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed training checkpoint header: ") + e.what());
  }
  (void)s.model();  // validates names and shapes
  if (s.adam_t > 0) {
    for (const auto& [name, v] : s.params.items()) {
      s.adam_m.push_back(ck.get("adam_m/" + name));
      s.adam_v.push_back(ck.get("adam_v/" + name));
    }
  }
  return s;
}

void checkpoint_save(const TrainState& state, const std::filesystem::path& path) {
  checkpoint::save(path, to_checkpoint(state));
}

TrainState checkpoint_load(const std::filesystem::path& path) { return from_checkpoint(checkpoint::load(path)); }

}  // namespace idguard::training
