#include "doctest.h"

#include <filesystem>
#include <sstream>

#include "idguard/errors.hpp"
#include "idguard/training.hpp"

using namespace idguard;
using namespace idguard::training;

namespace {

GuardConfig tiny() {
  GuardConfig c;
  c.batch = 4;
  c.batch_finetune = 8;
  c.steps_base = 4;
  c.steps_finetune = 3;
  c.timesteps = 20;
  c.log_every = 1;
  return c;
}

const synthdata::Corpora& corpora() {
  static const auto c = synthdata::build_corpora(0);
  return c;
}

const watermark::WatermarkCodec& frozen_codec() {
  static const auto codec = [] {
    watermark::WatermarkCodec c({}, 1);
    c.freeze();
    return c;
  }();
  return codec;
}

}  // namespace

TEST_CASE("config defaults, JSON round trip, and overrides") {
  GuardConfig c;
  CHECK(c.lambda_r == 0.2);
  CHECK(c.lambda_w == 0.1);
  CHECK(c.timesteps == 200);
  CHECK(GuardConfig::from_json(c.to_json()).to_json() == c.to_json());
  c.apply_override("lambda_r=0.5");
  c.apply_override("mode=untarget");
  c.apply_override("blacklist=hazard,red");
  c.apply_override("wm_on_malicious=false");
  CHECK(c.lambda_r == 0.5);
  CHECK(c.mode == RestrictionMode::Untarget);
  CHECK(c.blacklist == std::vector<std::string>{"hazard", "red"});
  CHECK_FALSE(c.wm_on_malicious);
  c.apply_override("blacklist=[]");
  CHECK(c.blacklist.empty());
  CHECK_THROWS_AS(c.apply_override("lambda_q=1"), ValidationError);
  CHECK_THROWS_AS(c.apply_override("lambda_r"), ValidationError);
  CHECK_THROWS_AS(c.apply_override("lambda_r=abc"), ValidationError);
  CHECK_THROWS_AS(c.apply_override("mode=erase"), ValidationError);
  auto j = GuardConfig().to_json();
  j["surprise"] = 1;
  CHECK_THROWS_AS(GuardConfig::from_json(j), ValidationError);
  CHECK_THROWS_AS(GuardConfig().apply_override("message=0101"), ValidationError);
}

TEST_CASE("prompt kinds") {
  const auto v = conditioning::ConceptVocabulary::standard();
  CHECK(prompt_kind(v.parse("sks circle")) == "identity");
  CHECK(prompt_kind(v.parse("sks hazard")) == "identity+prohibited");
  CHECK(prompt_kind(v.parse("circle")) == "plain");
  CHECK(prompt_kind(v.parse("hazard")) == "prohibited");
}

TEST_CASE("base training is deterministic and resumes exactly") {
  const auto cfg = tiny();
  auto a = init_base_state(cfg);
  std::ostringstream log;
  const auto steps = train_base(a, corpora().base_train, 4, &log);
  CHECK(steps.size() == 4);
  CHECK(a.step == 4);
  CHECK(log.str().find("\"step\"") != std::string::npos);

  auto b = init_base_state(cfg);
  train_base(b, corpora().base_train, 2);
  const auto path = std::filesystem::temp_directory_path() / "idguard_resume.ckpt";
  checkpoint_save(b, path);
  auto c = checkpoint_load(path);
  CHECK(checkpoint::serialize(to_checkpoint(c)) == checkpoint::serialize(to_checkpoint(b)));
  train_base(c, corpora().base_train, 4);
  CHECK(nn::fingerprint(c.params) == nn::fingerprint(a.params));
  CHECK(checkpoint::serialize(to_checkpoint(c)) == checkpoint::serialize(to_checkpoint(a)));
  std::filesystem::remove(path);
}

TEST_CASE("guarded fine-tuning routes every prompt kind and never touches frozen weights") {
  const auto cfg = tiny();
  auto base = init_base_state(cfg);
  const auto frozen_hash = nn::fingerprint(base.params);
  const auto codec_hash = frozen_codec().decoder_hash();
  auto s = init_finetune_state(base.model(), cfg);
  train_finetune(s, frozen_codec(), corpora(), 3);
  CHECK(s.step == 3);
  CHECK(nn::fingerprint(*s.frozen_base) == frozen_hash);
  CHECK(nn::fingerprint(s.params) != frozen_hash);
  CHECK(frozen_codec().decoder_hash() == codec_hash);
  const auto& counts = s.counters.counts();
  CHECK(counts.at("identity").at("items") > 0);
  CHECK(counts.at("identity").at("WM") > 0);
  CHECK(counts.at("identity+prohibited").at("CIP") > 0);
  CHECK(counts.at("plain").at("DB_prior") > 0);
  CHECK_FALSE(counts.at("identity").count("CIP"));
  CHECK_FALSE(counts.at("plain").count("WM"));
}

TEST_CASE("fine-tuning preconditions") {
  auto cfg = tiny();
  const auto base = init_base_state(cfg).model();
  watermark::WatermarkCodec unfrozen({}, 1);
  auto s = init_finetune_state(base, cfg);
  CHECK_THROWS_AS(train_finetune(s, unfrozen, corpora(), 1), ValidationError);
  cfg.blacklist.clear();
  CHECK_THROWS_AS(init_finetune_state(base, cfg), ValidationError);
  cfg.lambda_r = 0;
  cfg.lambda_w = 0;
  CHECK_NOTHROW(init_finetune_state(base, cfg));
}

TEST_CASE("identity-only embedding updates leave other token rows fixed") {
  auto cfg = tiny();
  cfg.finetune_embeddings = "identity";
  const auto base = init_base_state(cfg).model();
  auto s = init_finetune_state(base, cfg);
  train_finetune(s, frozen_codec(), corpora(), 2);
  const auto& before = base.params().get("embed.weight").value();
  const auto& after = s.params.get("embed.weight").value();
  const int d = before.dim(1);
  const int id = cfg.vocabulary().identity_id();
  bool identity_moved = false;
  for (int r = 0; r < before.dim(0); ++r) {
    for (int j = 0; j < d; ++j) {
      if (r == id) {
        identity_moved |= before[r * d + j] != after[r * d + j];
      } else {
        CHECK(before[r * d + j] == after[r * d + j]);
      }
    }
  }
  CHECK(identity_moved);
}
