#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "diger/metrics.hpp"
#include "diger/trainer.hpp"

using namespace diger;

namespace {

struct Overrides {
  std::string config_path;
  std::string variant, seed, lambda, ratio_r, beta, tau, beam_width, out;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "key = value config file");
    cmd->add_option("--variant", variant, "training regime");
    cmd->add_option("--seed", seed, "run seed");
    cmd->add_option("--lambda", lambda, "SDUD offset");
    cmd->add_option("--ratio-r", ratio_r, "FrqUD hot-code threshold ratio");
    cmd->add_option("--beta", beta, "FrqUD frequency EMA decay");
    cmd->add_option("--tau", tau, "Gumbel-Softmax temperature");
    cmd->add_option("--beam-width", beam_width, "beam width at evaluation");
    cmd->add_option("--out", out, "output directory");
  }

  TrainConfig resolve() const {
    KvConfig kv = config_path.empty() ? KvConfig() : KvConfig::parse_file(config_path);
    if (!variant.empty()) kv.set("variant", variant);
    if (!seed.empty()) kv.set("seed", seed);
    if (!lambda.empty()) kv.set("lambda", lambda);
    if (!ratio_r.empty()) kv.set("ratio_r", ratio_r);
    if (!beta.empty()) kv.set("beta", beta);
    if (!tau.empty()) kv.set("tau", tau);
    if (!beam_width.empty()) kv.set("beam_width", beam_width);
    if (!out.empty()) kv.set("out", out);
    return TrainConfig::from_kv(kv);
  }
};

std::vector<uint64_t> parse_seed_list(const std::string& text) {
  std::vector<uint64_t> out;
  std::istringstream in(text);
  std::string cell;
  while (std::getline(in, cell, ',')) out.push_back(std::stoull(cell));
  return out;
}

std::vector<Variant> parse_variant_list(const std::string& text) {
  std::vector<Variant> out;
  std::istringstream in(text);
  std::string cell;
  while (std::getline(in, cell, ',')) out.push_back(parse_variant(cell));
  return out;
}

int cmd_pretrain(const Overrides& opts) {
  TrainConfig cfg = opts.resolve();
  if (cfg.out_dir.empty()) throw std::runtime_error("pretrain: --out (or `out` in the config) is required");
  Workbench bench = load_dataset(cfg);
  PretrainOutput pre = run_pretrain(cfg, bench);
  std::filesystem::create_directories(cfg.out_dir);
  save_tokenizer_checkpoint(cfg.out_dir + "/tokenizer.json", cfg, pre.tokenizer, pre.index, pre.baseline);
  std::printf("pretrain: %d items, recon %.6f -> %.6f, checkpoint %s/tokenizer.json\n", bench.log.num_items(),
              pre.report.initial_recon, pre.report.final_recon, cfg.out_dir.c_str());
  return 0;
}

int cmd_train(const Overrides& opts, const std::string& tokenizer_ckpt) {
  TrainConfig cfg = opts.resolve();
  Workbench bench = load_dataset(cfg);
  PretrainOutput pre = tokenizer_ckpt.empty() ? run_pretrain(cfg, bench) : load_tokenizer_checkpoint(tokenizer_ckpt);
  TrainResult result = run_train(cfg, bench, pre);
  if (!cfg.out_dir.empty()) {
    save_checkpoint(cfg.out_dir + "/checkpoint.json", cfg, result);
  }
  std::fputs(result.report_text.c_str(), stdout);
  if (result.best_epoch < 0) throw std::runtime_error("train: diverged before the first evaluation");
  std::printf("train: best epoch %d, validation ndcg@10 %.6f%s\n", result.best_epoch, result.best_val_ndcg,
              result.diverged ? " (aborted on divergence; last good checkpoint kept)" : "");
  return result.diverged ? 2 : 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& split, const std::string& k_csv,
             const std::string& beam) {
  LoadedCheckpoint ckpt = load_checkpoint(checkpoint);
  Workbench bench = load_dataset(ckpt.config);
  std::vector<int> ks;
  {
    std::istringstream in(k_csv);
    std::string cell;
    while (std::getline(in, cell, ',')) ks.push_back(std::stoi(cell));
  }
  const int beam_width = beam.empty() ? ckpt.config.recommender.beam_width : std::stoi(beam);
  const auto metrics = run_eval(ckpt.model, ckpt.index, bench, split == "test", ks, beam_width);
  std::printf("{");
  bool first = true;
  for (const auto& [key, value] : metrics) {
    std::printf("%s\"%s\": %.10g", first ? "" : ", ", key.c_str(), value);
    first = false;
  }
  std::printf("}\n");
  return 0;
}

int cmd_matrix(const Overrides& opts, const std::string& variants_csv, const std::string& seeds_csv) {
  TrainConfig cfg = opts.resolve();
  if (cfg.out_dir.empty()) throw std::runtime_error("matrix: --out (or `out` in the config) is required");
  const auto rows = run_matrix(cfg, parse_variant_list(variants_csv), parse_seed_list(seeds_csv), cfg.out_dir);
  std::fputs(matrix_csv(rows, cfg.tokenizer.m).c_str(), stdout);
  return 0;
}

int cmd_demo_mismatch(double m_scale) {
  const MismatchResult analytic = mismatch_demo_analytic(m_scale);
  const MismatchResult descent = mismatch_demo_descent(m_scale);
  std::printf("objective-mismatch demo, scale M = %g\n", m_scale);
  std::printf("  route            two-stage        joint              gap\n");
  std::printf("  analytic   %16.9f %16.9f %16.9f\n", analytic.two_stage, analytic.joint, analytic.gap);
  std::printf("  descent    %16.9f %16.9f %16.9f\n", descent.two_stage, descent.joint, descent.gap);
  std::printf("  |descent - analytic| max: %.3g\n",
              std::max({std::abs(descent.two_stage - analytic.two_stage), std::abs(descent.joint - analytic.joint),
                        std::abs(descent.gap - analytic.gap)}));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"joint training of a residual-quantization semantic-ID tokenizer and a generative recommender"};
  app.require_subcommand(1);

  Overrides pretrain_opts, train_opts, matrix_opts;
  std::string tokenizer_ckpt, eval_ckpt, eval_split = "test", eval_k = "5,10", eval_beam;
  std::string variants_csv = "two-stage,ste,diger-frqud", seeds_csv = "1,2,3";
  double m_scale = 1.0;

  CLI::App* pre = app.add_subcommand("pretrain", "reconstruction-pretrain the tokenizer and write its checkpoint");
  pretrain_opts.attach(pre);

  CLI::App* train = app.add_subcommand("train", "joint training under the configured regime");
  train_opts.attach(train);
  train->add_option("--tokenizer", tokenizer_ckpt, "pretrained tokenizer checkpoint (default: pretrain in-process)");

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint with constrained beam search");
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint.json path")->required();
  eval->add_option("--split", eval_split, "test|validation");
  eval->add_option("--k", eval_k, "comma-separated cutoffs");
  eval->add_option("--beam-width", eval_beam, "beam width override");

  CLI::App* matrix = app.add_subcommand("matrix", "run a variant x seed comparison table");
  matrix_opts.attach(matrix);
  matrix->add_option("--variants", variants_csv, "comma-separated training regimes");
  matrix->add_option("--seeds", seeds_csv, "comma-separated seeds");

  CLI::App* demo = app.add_subcommand("demo-mismatch", "two-stage vs joint optimization gap demo");
  demo->add_option("--m-scale", m_scale, "gap scale M (> 0)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (pre->parsed()) return cmd_pretrain(pretrain_opts);
    if (train->parsed()) return cmd_train(train_opts, tokenizer_ckpt);
    if (eval->parsed()) return cmd_eval(eval_ckpt, eval_split, eval_k, eval_beam);
    if (matrix->parsed()) return cmd_matrix(matrix_opts, variants_csv, seeds_csv);
    if (demo->parsed()) return cmd_demo_mismatch(m_scale);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
