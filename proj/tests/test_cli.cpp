#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "idguard/checkpoint.hpp"
#include "json.hpp"

using namespace idguard;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST_CASE("misuse exits with 1") {
  CHECK(run({}).code == cli::kValidation);
  CHECK(run({"bake"}).code == cli::kValidation);
  const auto r = run({"make-data", "--nope"});
  CHECK(r.code == cli::kValidation);
  CHECK(r.err.find("--nope") != std::string::npos);
  CHECK(run({"make-data", "--set", "lambda_q=1", "--out", fresh_dir("idguard_cli_x").string()}).code ==
        cli::kValidation);
  CHECK(run({"--help"}).code == cli::kOk);
}

TEST_CASE("missing prerequisites name the producing subcommand") {
  const auto dir = fresh_dir("idguard_cli_prereq");
  auto r = run({"pretrain-base", "--out", dir.string()});
  CHECK(r.code == cli::kValidation);
  CHECK(r.err.find("make-data") != std::string::npos);
  REQUIRE(run({"make-data", "--out", dir.string()}).code == cli::kOk);
  r = run({"finetune", "--out", dir.string()});
  CHECK(r.code == cli::kValidation);
  CHECK(r.err.find("pretrain-watermark") != std::string::npos);
  r = run({"generate", "--out", dir.string(), "--prompt", "sks circle"});
  CHECK(r.err.find("finetune") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("tiny end-to-end run: determinism, run.json, overwrite guard, verify") {
  const auto dir = fresh_dir("idguard_cli_e2e");
  const std::vector<std::string> tiny{"--out",        dir.string(),          "--set", "steps_base=2",
                                      "--set",        "steps_finetune=2",    "--set", "batch=4",
                                      "--set",        "batch_finetune=4",    "--set", "timesteps=10",
                                      "--set",        "steps_codec=3",       "--set", "batch_codec=4"};
  auto with = [&](std::vector<std::string> a) {
    a.insert(a.end(), tiny.begin(), tiny.end());
    return run(a);
  };
  REQUIRE(with({"make-data"}).code == cli::kOk);
  CHECK(with({"make-data"}).code == cli::kValidation);  // refuses to overwrite
  CHECK(with({"make-data", "--force"}).code == cli::kOk);
  REQUIRE(with({"pretrain-base"}).code == cli::kOk);
  REQUIRE(with({"pretrain-watermark"}).code == cli::kOk);
  const auto ft = with({"finetune"});
  REQUIRE_MESSAGE(ft.code == cli::kOk, ft.err);

  const auto run_json = nlohmann::json::parse(checkpoint::read_file(dir / "run.json"));
  CHECK(run_json["subcommand"] == "finetune");
  CHECK(run_json["config"]["steps_finetune"] == 2);
  CHECK(run_json["artifacts"].contains("finetune.ckpt"));
  CHECK(run_json["inputs"].contains("codec.ckpt"));

  auto gen = [&] {
    auto r = with({"generate", "--prompt", "sks circle blue", "--n", "2", "--seed", "7", "--force"});
    REQUIRE_MESSAGE(r.code == cli::kOk, r.err);
    const auto d = dir / "samples" / "circle_blue_sks_seed7";
    return std::make_pair(checkpoint::read_file(d / "img_000.png"), checkpoint::read_file(d / "img_001.png"));
  };
  const auto first = gen();
  CHECK(first == gen());

  auto v = with({"verify", "--image", (dir / "samples" / "circle_blue_sks_seed7" / "img_000.png").string()});
  CHECK(v.code == cli::kOk);
  CHECK(v.out.find("bit_accuracy") != std::string::npos);
  CHECK(v.out.find("present") != std::string::npos);
  CHECK(with({"verify", "--image", (dir / "nothing.png").string()}).code == cli::kValidation);
  CHECK(with({"generate", "--prompt", "sks dog"}).code == cli::kValidation);
  fs::remove_all(dir);
}

TEST_CASE("IDGUARD_OUT supplies the default output directory") {
  const auto dir = fresh_dir("idguard_cli_env");
  setenv("IDGUARD_OUT", dir.string().c_str(), 1);
  CHECK(run({"make-data"}).code == cli::kOk);
  unsetenv("IDGUARD_OUT");
  CHECK(fs::exists(dir / "run.json"));
  CHECK(fs::exists(dir / "data" / "eval_refs" / "manifest.json"));
  fs::remove_all(dir);
}
