#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <string>

#include "icf/config.hpp"

using namespace icf;
namespace fs = std::filesystem;

namespace {

const fs::path kDir = fs::temp_directory_path() / "icf_cli_test";

int run(const std::string& args) {
  const std::string cmd = std::string(ICF_BINARY) + " " + args + " > " + (kDir / "last.log").string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string path(const char* name) { return (kDir / name).string(); }

const char* kTinyConfig =
    "seed = 5\n"
    "corpus_tokens = 20000\n"
    "context_length = 16\n"
    "lm.hidden = 16\nlm.layers = 1\nlm.heads = 2\nlm.intermediate = 32\nlm.max_positions = 64\n"
    "lm_train.steps = 0\nlm_train.window = 32\nlm_train.repeat_fraction = 0\nlm_train.kv_fraction = 0\n"
    "icf.hidden = 16\nicf.layers = 1\nicf.heads = 2\nicf.intermediate = 32\nicf.digest_tokens = 4\nicf.window = 32\n"
    "pretrain.steps = 0\npretrain.chunk_size = 32\nfinetune.steps = 0\nfinetune.chunk_size = 32\n";

}  // namespace

TEST_CASE("flops subcommand") {
  fs::create_directories(kDir);
  CHECK(run("flops") == 0);
  const auto out = read_file(path("last.log"));
  CHECK(out.find("32.3896") != std::string::npos);
  CHECK(run("flops --s 0 --k 0") == 0);
  CHECK(run("flops --csv " + path("flops.csv")) == 0);
  CHECK(read_file(path("flops.csv")).starts_with("method,term,flops\n"));
}

TEST_CASE("bad arguments exit with status 1") {
  fs::create_directories(kDir);
  CHECK(run("flops --s banana") == 1);
  CHECK(run("no-such-command") == 1);
  CHECK(run("pretrain --lm " + path("missing.icf") + " --out " + path("x.icf")) == 1);
  CHECK(read_file(path("last.log")).find("error:") != std::string::npos);
}

TEST_CASE("zero-step pretraining writes the initial parameters") {
  fs::create_directories(kDir);
  write_file(path("tiny.conf"), kTinyConfig);
  const auto cfg = load_run_config(path("tiny.conf"));
  REQUIRE(run("train-lm --config " + path("tiny.conf") + " --out " + path("lm.icf")) == 0);
  REQUIRE(run("pretrain --config " + path("tiny.conf") + " --lm " + path("lm.icf") + " --out " + path("pre.icf")) == 0);
  const auto saved = load_icformer(path("pre.icf"));
  CHECK(fingerprint(saved.tensors) == fingerprint(init_icformer(cfg.icf, cfg.seed).tensors));
  CHECK(fs::exists(path("pre.icf.loss.csv")));
  CHECK(fs::exists(path("pre.icf.config")));
  fs::remove_all(kDir);
}
