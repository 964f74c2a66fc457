#include "cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "idguard/checkpoint.hpp"
#include "idguard/errors.hpp"
#include "idguard/evaluation.hpp"
#include "idguard/image_io.hpp"
#include "idguard/synthdata.hpp"
#include "idguard/training.hpp"
#include "idguard/watermark.hpp"

namespace idguard::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Artifact layout inside out_dir.
constexpr const char* kDataDir = "data";
constexpr const char* kBaseCkpt = "base.ckpt";
constexpr const char* kCodecCkpt = "codec.ckpt";
constexpr const char* kClassifierCkpt = "classifiers.ckpt";
constexpr const char* kFinetuneCkpt = "finetune.ckpt";
constexpr const char* kReport = "report.json";

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::optional<std::int64_t> seed;
  bool force = false;
};

struct Extra {
  bool resume = false;
  int checkpoint_every = 1000;
  std::string prompt;
  int n = 4;
  std::string checkpoint;
  std::string image;
  std::string message;
  std::string codec;
  bool sheets = false;
};

class Run {
 public:
  Run(std::string subcommand, const Common& c, std::ostream& out)
      : subcommand_(std::move(subcommand)), out_(out) {
    if (!c.config_path.empty()) config_ = training::load_config(c.config_path);
    for (const auto& o : c.overrides) config_.apply_override(o);
    if (c.seed) config_.seed = *c.seed;
    config_.validate();
    std::string dir = c.out_dir;
    if (dir.empty()) {
      const char* env = std::getenv("IDGUARD_OUT");
      dir = env && *env ? env : "idguard_out";
    }
    root_ = dir;
    fs::create_directories(root_);
    force_ = c.force;
  }

  [[nodiscard]] const training::GuardConfig& config() const { return config_; }
  [[nodiscard]] fs::path path(const std::string& rel) const { return root_ / rel; }
  [[nodiscard]] std::ostream& out() const { return out_; }

  void seed(const std::string& name, std::uint64_t v) { seeds_[name] = v; }
  void input(const fs::path& p) { inputs_[rel(p)] = hash_path(p); }
  void output(const fs::path& p) { outputs_[rel(p)] = hash_path(p); }
  void note(const std::string& k, json v) { notes_[k] = std::move(v); }

  /// Refuses to clobber an existing artifact without --force.
  void claim(const fs::path& p) const {
    if (fs::exists(p) && !force_) {
      throw ValidationError(p.string() + " already exists; pass --force to overwrite");
    }
  }

  std::ofstream open_log(const std::string& name, bool append = false) const {
    fs::create_directories(root_ / "logs");
    std::ofstream log(root_ / "logs" / (name + ".jsonl"), append ? std::ios::app : std::ios::trunc);
    if (!log) throw std::runtime_error("cannot open log for " + name);
    return log;
  }

  synthdata::Corpora corpora() {
    const auto dir = path(kDataDir);
    if (!fs::exists(dir / "base_train" / "manifest.json")) {
      throw PrerequisiteError("no corpora under " + dir.string(), "make-data");
    }
    auto c = synthdata::load_corpora(dir);
    inputs_[std::string(kDataDir)] = "corpora";
    return c;
  }

  watermark::WatermarkCodec codec(const std::string& override_path = {}) {
    const fs::path p = override_path.empty() ? path(kCodecCkpt) : fs::path(override_path);
    if (!fs::exists(p)) throw PrerequisiteError("no frozen watermark codec at " + p.string(), "pretrain-watermark");
    input(p);
    return watermark::WatermarkCodec::load(p);
  }

  evaluation::ClassifierSuite classifiers() {
    const auto p = path(kClassifierCkpt);
    if (!fs::exists(p)) throw PrerequisiteError("no classifier suite at " + p.string(), "train-classifier");
    input(p);
    return evaluation::ClassifierSuite::load(p);
  }

  training::TrainState state(const fs::path& p, const std::string& producer) {
    if (!fs::exists(p)) throw PrerequisiteError("no checkpoint at " + p.string(), producer);
    input(p);
    auto s = training::checkpoint_load(p);
    const int target = s.stage == "base" ? s.config.steps_base : s.config.steps_finetune;
    if (s.step < target) {
      throw PrerequisiteError(p.string() + " stopped at step " + std::to_string(s.step) + " of " +
                                  std::to_string(target) + "; finish it with --resume",
                              producer);
    }
    return s;
  }

  void write_run_json() const {
    json j = {{"subcommand", subcommand_},
              {"config", config_.to_json()},
              {"seeds", seeds_},
              {"inputs", inputs_},
              {"artifacts", outputs_}};
    if (!notes_.empty()) j["results"] = notes_;
    checkpoint::write_file(root_ / "run.json", j.dump(2) + "\n");
  }

 private:
  std::string rel(const fs::path& p) const {
    const auto r = fs::relative(p, root_);
    return r.empty() || r.native().starts_with("..") ? p.string() : r.generic_string();
  }

  static std::string hash_path(const fs::path& p) {
    if (!fs::is_directory(p)) return checkpoint::hash_file(p);
    // Directory: hash of sorted (name, file hash) pairs.
    std::vector<std::string> entries;
    for (const auto& e : fs::recursive_directory_iterator(p)) {
      if (e.is_regular_file()) {
        entries.push_back(fs::relative(e.path(), p).generic_string() + ":" + checkpoint::hash_file(e.path()));
      }
    }
    std::sort(entries.begin(), entries.end());
    std::string all;
    for (const auto& e : entries) all += e + "\n";
    return checkpoint::hash_bytes(all);
  }

  std::string subcommand_;
  std::ostream& out_;
  training::GuardConfig config_;
  fs::path root_;
  bool force_ = false;
  json seeds_ = json::object();
  json inputs_ = json::object();
  json outputs_ = json::object();
  json notes_ = json::object();
};

std::uint64_t seed_of(const training::GuardConfig& c) { return static_cast<std::uint64_t>(c.seed); }

void make_data(Run& r, const Extra&) {
  const auto dir = r.path(kDataDir);
  r.claim(dir / "base_train" / "manifest.json");
  if (fs::exists(dir)) fs::remove_all(dir);
  r.seed("data", seed_of(r.config()));
  const auto c = synthdata::build_corpora(seed_of(r.config()));
  synthdata::save_corpora(c, dir);
  r.output(dir);
  r.out() << "wrote " << c.base_train.size() + c.subject_instances.size() + c.class_prior.size() +
                             c.classifier_train.size() + c.classifier_test.size() + c.eval_refs.size()
          << " images to " << dir.string() << "\n";
}

// Shared driver for both denoiser stages: fresh start or --resume, periodic
// state checkpoints, final artifact hash.
void run_training(Run& r, const Extra& x, const fs::path& ckpt, const std::string& stage,
                  const std::function<training::TrainState()>& fresh,
                  const std::function<void(training::TrainState&, int, std::ostream*)>& advance) {
  training::TrainState state;
  if (x.resume && fs::exists(ckpt)) {
    state = training::checkpoint_load(ckpt);
    if (state.stage != stage) throw ValidationError(ckpt.string() + " holds a " + state.stage + " state");
    // Only the step budget may change on resume.
    auto saved = state.config.to_json(), now = r.config().to_json();
    for (auto* j : {&saved, &now}) {
      j->erase("steps_base");
      j->erase("steps_finetune");
    }
    if (saved != now) throw ValidationError("--resume with a config that differs from the checkpoint's");
    state.config.steps_base = r.config().steps_base;
    state.config.steps_finetune = r.config().steps_finetune;
    r.out() << "resuming " << stage << " from step " << state.step << "\n";
  } else {
    r.claim(ckpt);
    state = fresh();
  }
  const int target = stage == "base" ? state.config.steps_base : state.config.steps_finetune;
  auto log = r.open_log(stage == "base" ? "pretrain-base" : "finetune", x.resume);
  while (state.step < target) {
    advance(state, std::min(target, state.step + std::max(1, x.checkpoint_every)), &log);
    training::checkpoint_save(state, ckpt);
  }
  if (target == 0 || !fs::exists(ckpt)) training::checkpoint_save(state, ckpt);
  r.output(ckpt);
  r.note("step", state.step);
  r.out() << stage << " training done at step " << state.step << "; wrote " << ckpt.string() << "\n";
}

void pretrain_base(Run& r, const Extra& x) {
  const auto corpora = r.corpora();
  r.seed("model_init", mix_seed(seed_of(r.config()), 1));
  r.seed("training", mix_seed(seed_of(r.config()), 2));
  run_training(
      r, x, r.path(kBaseCkpt), "base", [&] { return training::init_base_state(r.config()); },
      [&](training::TrainState& s, int until, std::ostream* log) {
        training::train_base(s, corpora.base_train, until, log);
      });
}

void pretrain_watermark(Run& r, const Extra&) {
  const auto corpora = r.corpora();
  const auto& cfg = r.config();
  const auto ckpt = r.path(kCodecCkpt);
  r.claim(ckpt);
  watermark::CodecTrainOptions opt;
  opt.steps = cfg.steps_codec;
  opt.batch = cfg.batch_codec;
  opt.lr = cfg.lr_codec;
  const int k = static_cast<int>(cfg.watermark_message().size());
  r.seed("codec", seed_of(cfg));
  auto log = r.open_log("pretrain-watermark");
  const auto codec = watermark::pretrain_codec(corpora.base_train, k, seed_of(cfg), opt, &log);
  codec.save(ckpt);
  r.output(ckpt);
  const auto m = watermark::evaluate_codec(codec, corpora.classifier_test.images, mix_seed(seed_of(cfg), 7));
  r.note("clean_bit_accuracy", m.clean_bit_accuracy);
  r.note("noisy_bit_accuracy", m.noisy_bit_accuracy);
  r.note("mean_abs_perturbation", m.mean_abs_perturbation);
  r.note("decoder_hash", codec.decoder_hash());
  r.out() << "codec k=" << k << " clean " << m.clean_bit_accuracy << " noisy " << m.noisy_bit_accuracy
          << " perturbation " << m.mean_abs_perturbation << "\n";
}

void train_classifier(Run& r, const Extra&) {
  const auto corpora = r.corpora();
  const auto& cfg = r.config();
  const auto ckpt = r.path(kClassifierCkpt);
  r.claim(ckpt);
  evaluation::ClassifierTrainOptions opt;
  opt.steps = cfg.steps_classifier;
  opt.batch = cfg.batch_classifier;
  opt.lr = cfg.lr_classifier;
  r.seed("classifiers", seed_of(cfg));
  const auto suite = evaluation::train_classifier_suite(corpora, seed_of(cfg), opt);
  suite.save(ckpt);
  r.output(ckpt);
  for (const auto& [a, acc] : suite.test_accuracy) {
    r.note(evaluation::to_string(a) + "_test_accuracy", acc);
    r.out() << evaluation::to_string(a) << " held-out accuracy " << acc << "\n";
  }
}

void finetune(Run& r, const Extra& x) {
  // Check every prerequisite before any work.
  const auto corpora = r.corpora();
  const auto codec = r.codec(x.codec);
  const auto base = r.state(r.path(kBaseCkpt), "pretrain-base");
  r.seed("training", mix_seed(seed_of(r.config()), 3));
  run_training(
      r, x, r.path(kFinetuneCkpt), "finetune",
      [&] { return training::init_finetune_state(base.model(), r.config()); },
      [&](training::TrainState& s, int until, std::ostream* log) {
        training::train_finetune(s, codec, corpora, until, log);
      });
}

training::TrainState model_state(Run& r, const Extra& x) {
  if (!x.checkpoint.empty()) {
    return r.state(x.checkpoint, "finetune");
  }
  return r.state(r.path(kFinetuneCkpt), "finetune");
}

std::string slug(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) ? c : '_';
  return out;
}

void generate(Run& r, const Extra& x) {
  if (x.prompt.empty()) throw ValidationError("generate needs --prompt");
  if (x.n < 1) throw ValidationError("--n must be at least 1");
  const auto state = model_state(r, x);
  const auto vocab = state.config.vocabulary();
  const auto prompt = vocab.parse(x.prompt);
  const auto model = state.model();
  const auto seed = seed_of(r.config());
  r.seed("sampling", seed);
  const auto imgs = diffusion::sample(model, prompt, state.config.schedule(), x.n, seed, r.config().sample_batch);
  const auto dir = r.path("samples") / (slug(vocab.render(prompt)) + "_seed" + std::to_string(seed));
  fs::create_directories(dir);
  for (int i = 0; i < x.n; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "img_%03d.png", i);
    const auto p = dir / name;
    r.claim(p);
    image_io::write_png(p, imgs, i);
    r.output(p);
  }
  if (x.sheets) {
    const auto p = dir / "sheet.png";
    image_io::write_png(p, image_io::contact_sheet(imgs));
    r.output(p);
  }
  r.out() << "wrote " << x.n << " images to " << dir.string() << "\n";
}

void evaluate(Run& r, const Extra& x) {
  const auto corpora = r.corpora();
  const auto codec = r.codec(x.codec);
  const auto suite = r.classifiers();
  const auto state = model_state(r, x);
  // Sampling settings come from the command line; everything that shaped the
  // model comes from its checkpoint.
  auto cfg = state.config;
  cfg.eval_n = r.config().eval_n;
  cfg.frechet_n = r.config().frechet_n;
  cfg.sample_batch = r.config().sample_batch;
  const auto seed = seed_of(r.config());
  r.seed("report", seed);
  evaluation::SampleSets samples;
  const auto report =
      evaluation::full_report(state.model(), codec, suite, corpora.eval_refs, cfg, seed, x.sheets ? &samples : nullptr);
  const auto p = r.path(kReport);
  r.claim(p);
  checkpoint::write_file(p, report.to_json().dump(2) + "\n");
  r.output(p);
  for (const auto& [cell, imgs] : samples) {
    const auto sp = r.path("sheets") / (cell + ".png");
    fs::create_directories(sp.parent_path());
    image_io::write_png(sp, image_io::contact_sheet(imgs.slice0(0, std::min(64, imgs.dim(0)))));
    r.output(sp);
  }
  r.out() << report.to_json().dump(2) << "\n";
}

void verify(Run& r, const Extra& x) {
  if (x.image.empty()) throw ValidationError("verify needs --image");
  if (!fs::exists(x.image)) throw ValidationError("no image at " + x.image);
  const auto codec = r.codec(x.codec);
  const auto m = watermark::Message::parse(x.message.empty() ? r.config().message : x.message);
  if (m.size() != codec.bits()) {
    throw ValidationError("message has " + std::to_string(m.size()) + " bits but the codec carries " +
                          std::to_string(codec.bits()));
  }
  r.input(x.image);
  const auto v = watermark::verify(codec, image_io::read_png_tensor(x.image), m);
  r.note("bit_accuracy", v.bit_accuracy);
  r.note("present", v.present);
  r.out() << "bit_accuracy " << v.bit_accuracy << "\npresent " << (v.present ? "true" : "false") << "\n";
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "JSON config file")->check(CLI::ExistingFile);
  sub->add_option("--set", c.overrides, "override one config field, key=value (repeatable)");
  sub->add_option("--out", c.out_dir, "output directory (default: $IDGUARD_OUT or ./idguard_out)");
  sub->add_option("--seed", c.seed, "master seed");
  sub->add_flag("--force", c.force, "overwrite existing artifacts");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Identity-bound restriction and watermarking for a toy diffusion model", "idguard"};
  app.require_subcommand(1, 1);
  Common common;
  Extra extra;
  using Handler = void (*)(Run&, const Extra&);
  const std::vector<std::tuple<std::string, std::string, Handler>> commands = {
      {"make-data", "render the synthetic corpora", make_data},
      {"pretrain-base", "train the base denoiser", pretrain_base},
      {"pretrain-watermark", "train and freeze the watermark codec", pretrain_watermark},
      {"train-classifier", "train the attribute classifiers", train_classifier},
      {"finetune", "guarded fine-tune on the identity subject", finetune},
      {"generate", "sample images for a prompt", generate},
      {"evaluate", "write the evaluation report", evaluate},
      {"verify", "check an image for the watermark", verify},
  };
  std::map<CLI::App*, std::pair<std::string, Handler>> handlers;
  for (const auto& [name, help, fn] : commands) {
    auto* sub = app.add_subcommand(name, help);
    add_common(sub, common);
    handlers[sub] = {name, fn};
    if (name == "pretrain-base" || name == "finetune") {
      sub->add_flag("--resume", extra.resume, "continue from the stage checkpoint");
      sub->add_option("--checkpoint-every", extra.checkpoint_every, "steps between state checkpoints");
    }
    if (name == "finetune" || name == "evaluate" || name == "verify") {
      sub->add_option("--codec", extra.codec, "codec checkpoint (default: <out>/codec.ckpt)");
    }
    if (name == "generate" || name == "evaluate") {
      sub->add_option("--checkpoint", extra.checkpoint, "model checkpoint (default: <out>/finetune.ckpt)");
      sub->add_flag("--sheets", extra.sheets, "also write 8x8 contact sheets");
    }
    if (name == "generate") {
      sub->add_option("--prompt", extra.prompt, "space-separated vocabulary tokens")->required();
      sub->add_option("--n", extra.n, "number of images");
    }
    if (name == "verify") {
      sub->add_option("--image", extra.image, "PNG to check")->required();
      sub->add_option("--message", extra.message, "expected bit string (default: config message)");
    }
  }

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const auto& [name, fn] = handlers.at(chosen);
  std::unique_ptr<Run> r;
  auto fail = [&](const std::string& what, int code) {
    err << (code == kValidation ? "error: " : "failed: ") << what << "\n";
    if (r) {
      r->note("error", what);
      r->note("exit_code", code);
      try {
        r->write_run_json();
      } catch (const std::exception&) {
      }
    }
    return code;
  };
  try {
    r = std::make_unique<Run>(name, common, out);
    fn(*r, extra);
    r->note("exit_code", static_cast<int>(kOk));
    r->write_run_json();
    return kOk;
  } catch (const ValidationError& e) {
    return fail(e.what(), kValidation);
  } catch (const std::exception& e) {
    return fail(e.what(), kRuntime);
  }
}

}  // namespace idguard::cli
