#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "diger/config.hpp"
#include "diger/data.hpp"
#include "diger/decay.hpp"
#include "diger/metrics.hpp"
#include "diger/recommender.hpp"
#include "diger/tokenizer.hpp"

namespace diger {

struct TrainConfig {
  Variant variant = Variant::DigerFrqUd;
  uint64_t seed = 1;
  int epochs = 15;
  int patience = 10;
  int batch_size = 32;
  double rec_lr = 1e-3;
  double tok_lr = 1e-4;
  double weight_decay = 0.05;

  TokenizerConfig tokenizer;
  RecConfig recommender;

  double lambda = 1.4;
  double ratio_r = 1.5;
  double beta = 0.25;
  double loss_ema_decay = 0.9;
  bool noise_per_epoch = false;  // default: fresh Gumbel draws every step

  int pretrain_epochs = 30;
  double pretrain_lr = 3e-3;

  std::string data_path;     // TSV interactions; empty -> synthetic benchmark
  std::string content_path;  // .csv or .bin item features (required with data_path)
  int min_interactions = 5;
  SynthParams synth;

  std::vector<int> k_list = {5, 10};
  std::string out_dir;

  // Reads every recognized key and rejects unknown leftovers.
  static TrainConfig from_kv(KvConfig& kv);
  std::string to_json() const;  // resolved values, deterministic key order
};

// Fully prepared dataset: filtered log, aligned content, leave-one-out split.
struct Workbench {
  InteractionLog log;
  ContentTable content;
  SplitDataset split;
  uint64_t split_digest = 0;
};

Workbench load_dataset(const TrainConfig& cfg);

struct PretrainOutput {
  RqTokenizer tokenizer;
  AssignmentSnapshot baseline;  // post-pretraining assignments, drift reference
  SidIndex index;
  PretrainReport report;
};

PretrainOutput run_pretrain(const TrainConfig& cfg, const Workbench& bench);

struct EpochRow {
  int epoch = 0;
  std::string variant;
  std::map<int, double> recall;  // k -> value (validation)
  std::map<int, double> ndcg;
  std::vector<double> coverage_per_level;
  double coverage_mean = 0.0, coverage_std = 0.0;
  std::vector<double> eff_codes_per_level;
  double incr_drift = 0.0, cum_drift = 0.0, agreement = 1.0;
  double sigma = 0.0;
  std::vector<int> hot_count_per_level;
  double l_gen = 0.0, l_vq = 0.0, l_recon = 0.0;

  std::string to_jsonl() const;
};

struct OptimizerState {
  long long steps = 0;
  std::vector<std::vector<double>> m, v;
};

struct TrainResult {
  RqTokenizer tokenizer;  // best-validation state
  SeqRecModel model;
  SidIndex index;
  SdudState sdud;  // decay and optimizer state as of the best epoch
  FrqState frq;
  OptimizerState opt_rec, opt_tok;
  int best_epoch = -1;
  double best_val_ndcg = -1.0;
  std::vector<EpochRow> rows;
  std::string report_text;  // header line + one JSON line per epoch
  bool diverged = false;
  AssignmentSnapshot best_snapshot;
};

TrainResult run_train(const TrainConfig& cfg, const Workbench& bench, const PretrainOutput& pre);

// Zero-noise constrained evaluation over the requested split.
std::map<std::string, double> run_eval(const SeqRecModel& model, const SidIndex& index, const Workbench& bench,
                                       bool test_split, const std::vector<int>& k_list, int beam_width);

struct MatrixRow {
  std::string variant;
  uint64_t seed = 0;
  std::string status;  // "ok" or the error message
  uint64_t split_digest = 0;
  int best_epoch = -1;
  std::map<std::string, double> test_metrics;
  double coverage_mean = 0.0, coverage_std = 0.0;
  std::vector<double> eff_codes;  // per level, at the best epoch
  double agreement_mean = 0.0;
  double cum_drift_final = 0.0;
  std::vector<EpochRow> rows;
};

// Shared data and pretraining per seed; one row per (variant, seed).
// Failures are recorded in the row and the sweep continues.
std::vector<MatrixRow> run_matrix(const TrainConfig& base, const std::vector<Variant>& variants,
                                  const std::vector<uint64_t>& seeds, const std::string& out_dir);
std::string matrix_csv(const std::vector<MatrixRow>& rows, int levels);

// --- checkpoint files --------------------------------------------------------

void save_tokenizer_checkpoint(const std::string& path, const TrainConfig& cfg, RqTokenizer& tok,
                               const SidIndex& index, const AssignmentSnapshot& baseline);
PretrainOutput load_tokenizer_checkpoint(const std::string& path);

void save_checkpoint(const std::string& path, const TrainConfig& cfg, TrainResult& result);
struct LoadedCheckpoint {
  TrainConfig config;
  RqTokenizer tokenizer;
  SeqRecModel model;
  SidIndex index;
  SdudState sdud;
  FrqState frq;
  OptimizerState opt_rec, opt_tok;
  int epoch = -1;
  double best_val_ndcg = -1.0;
};
LoadedCheckpoint load_checkpoint(const std::string& path);

std::string usage_heatmap_csv(const AssignmentSnapshot& snap, int levels, int k);

uint64_t fnv1a(const std::string& bytes);

}  // namespace diger
