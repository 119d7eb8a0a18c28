// Command-line driver: data generation, training, evaluation and analysis.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "icf/analysis.hpp"
#include "icf/config.hpp"
#include "icf/training.hpp"

namespace fs = std::filesystem;
using namespace icf;

namespace {

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string beside(const std::string& path, const std::string& suffix) { return path + suffix; }

void ensure_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
}

LMParams<float> frozen_lm(const std::string& path) {
  auto lm = load_lm(path);
  lm.set_trainable(false);
  return lm;
}

void check_pairing(const ICFormerParams<float>& params, const LMParams<float>& lm) {
  if (params.config.hidden != lm.config.hidden) throw Failure("compressor and LM hidden sizes differ");
}

std::vector<TokenSeq> read_lines(const std::string& path) {
  std::vector<TokenSeq> out;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(encode(line));
  }
  if (out.empty()) throw Failure(path + " holds no text");
  return out;
}

TokenSeq read_text(const std::string& path) {
  std::string text = read_file(path);
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
  if (text.empty()) throw Failure(path + " is empty");
  return encode(text);
}

TrainHooks progress_hooks(const std::string& out, std::size_t total) {
  TrainHooks hooks;
  const std::size_t every = std::max<std::size_t>(1, total / 20);
  hooks.on_step = [every](const LossRecord& r) {
    if (r.step % every == 0) std::fprintf(stderr, "step %zu loss %.4f grad_norm %.4f\n", r.step, r.loss, r.grad_norm);
  };
  hooks.on_checkpoint = [out](std::size_t step, const ICFormerParams<float>& p) {
    save_icformer(out + ".step" + std::to_string(step), p);
  };
  return hooks;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"compress contexts into digest vectors for a frozen language model"};
  app.require_subcommand(1);

  // gen-data
  std::uint64_t seed = 0;
  std::size_t tokens = 2'000'000;
  std::string out;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic corpus");
  gen->add_option("--seed", seed);
  gen->add_option("--tokens", tokens);
  gen->add_option("--out", out)->required();

  // train-lm / pretrain / finetune
  std::string config_path, lm_path, icf_path;
  auto* train_lm_cmd = app.add_subcommand("train-lm", "train the target LM and freeze it");
  train_lm_cmd->add_option("--config", config_path);
  train_lm_cmd->add_option("--out", out)->required();

  auto* pretrain_cmd = app.add_subcommand("pretrain", "autoencoding pretraining of the compressor");
  pretrain_cmd->add_option("--config", config_path);
  pretrain_cmd->add_option("--lm", lm_path)->required();
  pretrain_cmd->add_option("--out", out)->required();

  auto* finetune_cmd = app.add_subcommand("finetune", "key/value fine-tuning of the compressor");
  finetune_cmd->add_option("--config", config_path);
  finetune_cmd->add_option("--lm", lm_path)->required();
  finetune_cmd->add_option("--icformer", icf_path, "starting checkpoint; omit to start from random init");
  finetune_cmd->add_option("--out", out)->required();

  // evaluation
  std::string in_path, prompt, template_name = "desk";
  auto* recon = app.add_subcommand("reconstruct", "reconstruct each line of a text file from its digests");
  recon->add_option("--lm", lm_path)->required();
  recon->add_option("--icformer", icf_path)->required();
  recon->add_option("--in", in_path)->required();
  recon->add_option("--out", out, "also write the transcript here");

  auto* ask_cmd = app.add_subcommand("ask", "answer a prompt about a compressed context");
  ask_cmd->add_option("--lm", lm_path)->required();
  ask_cmd->add_option("--icformer", icf_path)->required();
  ask_cmd->add_option("--context", in_path)->required();
  ask_cmd->add_option("--prompt", prompt)->required();
  ask_cmd->add_option("--template", template_name)->check(CLI::IsMember({"desk", "full"}));

  std::size_t count = 20;
  auto* ladder_cmd = app.add_subcommand("ladder", "reconstruction at four randomness levels");
  ladder_cmd->add_option("--config", config_path);
  ladder_cmd->add_option("--lm", lm_path)->required();
  ladder_cmd->add_option("--icformer", icf_path)->required();
  ladder_cmd->add_option("--seed", seed);
  ladder_cmd->add_option("--count", count);

  // analysis
  FlopsParams fp;
  std::string csv_path;
  auto* flops_cmd = app.add_subcommand("flops", "analytic FLOPs of both compressors");
  flops_cmd->set_help_flag("--help", "print this help and exit");
  flops_cmd->add_option("--b", fp.b);
  flops_cmd->add_option("--s", fp.s);
  flops_cmd->add_option("--k", fp.k);
  flops_cmd->add_option("--h", fp.h);
  flops_cmd->add_option("--m", fp.m);
  flops_cmd->add_option("--l1", fp.l1);
  flops_cmd->add_option("--l2", fp.l2);
  flops_cmd->add_option("--csv", csv_path, "write the CSV here instead of stdout");

  std::vector<std::size_t> lengths{64, 128, 256, 512};
  std::size_t k = 16, repeats = 5;
  auto* bench_cmd = app.add_subcommand("bench", "measured FLOPs and wall time against context length");
  bench_cmd->add_option("--lengths", lengths)->delimiter(',');
  bench_cmd->add_option("--k", k);
  bench_cmd->add_option("--repeats", repeats);
  bench_cmd->add_option("--out", out)->required();

  std::size_t layer = 0, top_n = 5;
  std::string out_prefix;
  auto* attn_cmd = app.add_subcommand("attn-map", "head-averaged digest attention of one layer");
  attn_cmd->add_option("--lm", lm_path)->required();
  attn_cmd->add_option("--icformer", icf_path)->required();
  attn_cmd->add_option("--layer", layer);
  attn_cmd->add_option("--in", in_path)->required();
  attn_cmd->add_option("--out-prefix", out_prefix)->required();
  attn_cmd->add_option("--top", top_n);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  try {
    if (*gen) {
      ensure_parent(out);
      write_file(out, decode(gen_corpus(seed, tokens)));
    } else if (*train_lm_cmd) {
      auto cfg = resolve_run_config(config_path);
      cfg.lm_train.seed = cfg.seed;
      ensure_parent(out);
      write_file(beside(out, ".config"), resolved_text(cfg));
      auto result = train_lm(load_corpus(cfg), cfg.lm, cfg.lm_train, [](const LMTrainLog& l) {
        std::fprintf(stderr, "step %zu loss %.4f\n", l.step, l.loss);
      });
      save_lm(out, result.params);
      write_file(beside(out, ".sha256"), result.fingerprint + "\n");
      std::printf("heldout loss %.4f -> %.4f\nfingerprint %s\n", result.initial_heldout_loss,
                  result.final_heldout_loss, result.fingerprint.c_str());
    } else if (*pretrain_cmd) {
      auto cfg = resolve_run_config(config_path);
      cfg.pretrain.seed = cfg.seed;
      const auto lm = frozen_lm(lm_path);
      auto params = init_icformer(cfg.icf, cfg.seed);
      check_pairing(params, lm);
      ensure_parent(out);
      write_file(beside(out, ".config"), resolved_text(cfg));
      const ContextSampler sampler(load_corpus(cfg), cfg.context_length, 0.0, 0.9);
      const auto result = train(pretrain_stream(sampler, cfg.seed), cfg.pretrain, params, lm,
                                progress_hooks(out, cfg.pretrain.steps));
      save_icformer(out, params, {{"stage", "pretrain"}, {"lm_fingerprint", result.lm_fingerprint}});
      write_file(beside(out, ".loss.csv"), loss_csv(result.log));
    } else if (*finetune_cmd) {
      auto cfg = resolve_run_config(config_path);
      cfg.finetune.seed = cfg.seed;
      const auto lm = frozen_lm(lm_path);
      auto params = icf_path.empty() ? init_icformer(cfg.icf, cfg.seed) : load_icformer(icf_path);
      check_pairing(params, lm);
      ensure_parent(out);
      write_file(beside(out, ".config"), resolved_text(cfg));
      const auto result = train(kv_stream(cfg.seed, cfg.kv, params.config.window), cfg.finetune, params, lm,
                                progress_hooks(out, cfg.finetune.steps));
      save_icformer(out, params, {{"stage", "finetune"}, {"lm_fingerprint", result.lm_fingerprint}});
      write_file(beside(out, ".loss.csv"), loss_csv(result.log));
    } else if (*recon) {
      const auto lm = frozen_lm(lm_path);
      const auto params = load_icformer(icf_path);
      check_pairing(params, lm);
      const auto text = transcript_text(reconstruct_eval(read_lines(in_path), params, lm));
      std::cout << text;
      if (!out.empty()) write_file(out, text);
    } else if (*ask_cmd) {
      const auto lm = frozen_lm(lm_path);
      const auto params = load_icformer(icf_path);
      check_pairing(params, lm);
      const auto tmpl = template_name == "full" ? PromptTemplate::kFull : PromptTemplate::kDesk;
      std::cout << render(ask(read_text(in_path), encode(prompt), params, lm, tmpl)) << "\n";
    } else if (*ladder_cmd) {
      auto cfg = resolve_run_config(config_path);
      const auto lm = frozen_lm(lm_path);
      const auto params = load_icformer(icf_path);
      check_pairing(params, lm);
      const ContextSampler heldout(load_corpus(cfg), cfg.context_length, 0.9, 1.0);
      std::cout << ladder_text(ladder_eval(heldout.evenly(count), params, lm, seed));
    } else if (*flops_cmd) {
      const auto b = flops_baseline(fp), c = flops_icformer(fp);
      std::cout << flops_text(b, c, fp);
      if (csv_path.empty()) {
        std::cout << "\n" << flops_csv(b, c);
      } else {
        write_file(csv_path, flops_csv(b, c));
      }
    } else if (*bench_cmd) {
      const auto rows = scaling_bench(lengths, k, ICFormerConfig{}, BaselineConfig{}, repeats);
      ensure_parent(out);
      write_file(out, scaling_csv(rows));
      std::cout << scaling_csv(rows);
    } else if (*attn_cmd) {
      const auto lm = frozen_lm(lm_path);
      const auto params = load_icformer(icf_path);
      check_pairing(params, lm);
      const auto ctx = read_text(in_path);
      const auto map = attn_map(layer, ctx, params, lm.embed());
      const auto top = top_attended(layer, ctx, params, lm.embed(), top_n);
      ensure_parent(out_prefix);
      write_file(out_prefix + ".pgm", attn_pgm(map));
      write_file(out_prefix + ".csv", attn_csv(map));
      write_file(out_prefix + ".top.csv", top_attended_csv(top));
      std::printf("backslash %.4f\ncoverage %.4f\n", backslash_score(map, ctx.size()), top.coverage);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
