#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "diger/decay.hpp"
#include "diger/rng.hpp"
#include "diger/tape.hpp"

namespace diger {

enum class Similarity { NegSqEuclidean, DotProduct };

Similarity parse_similarity(const std::string& name);
std::string similarity_name(Similarity s);

struct TokenizerConfig {
  int input_dim = 16;
  int k = 32;  // codebook entries per level
  int m = 3;   // code levels
  int d = 16;  // latent / code dimension
  double tau = 2.0;
  Similarity similarity = Similarity::NegSqEuclidean;
  std::vector<int> encoder_widths;  // MLP hidden sizes; empty = one linear layer
  double commit_coef = 0.25;

  void validate() const;
};

// Per-item discrete code tuple. Codes are 1-based (1..K); the conflict token
// is a 0-based disambiguator among items sharing the same codes.
struct SemanticId {
  std::vector<int> codes;
  int conflict = 0;

  bool codes_equal(const SemanticId& o) const { return codes == o.codes; }
  bool operator==(const SemanticId& o) const { return codes == o.codes && conflict == o.conflict; }
};

// Everything recorded while assigning one level: the logits and noise draws
// that produced the hard code, plus the live tensors the losses and the
// recommender coupling need.
struct LevelAssignment {
  std::vector<double> logits;
  std::vector<double> noise;
  Tensor logits_t;        // similarity logits (live)
  Tensor probs;           // Gumbel-Softmax probabilities (live)
  int code = 0;           // 1-based hard code = argmax(logits + noise)
  Tensor soft_embedding;  // probability-weighted codebook mixture (live)
  Tensor hard_entry;      // selected codebook row (live)
  Tensor output;          // straight-through level output: hard forward, soft backward
  Tensor residual_in;     // residual entering this level (live)
};

struct Quantization {
  SemanticId sid;    // codes only; conflict stays 0 here
  Tensor quantized;  // sum of level outputs; forward value is sum of selected entries
  std::vector<LevelAssignment> levels;
};

struct VqLosses {
  Tensor vq;
  Tensor recon;
};

// Gumbel-Softmax distribution over noisy logits: softmax((l + s*G)/tau) with
// G i.i.d. standard Gumbel; noise_scale 0 gives exactly softmax(l/tau). At
// noise_scale 1 the argmax of the noisy logits is a sample from softmax(l).
Tensor gumbel_softmax_probs(Tape& t, const Tensor& logits, double noise_scale, double tau, const RngStream& rng,
                            uint64_t counter_base, std::vector<double>* noise_out = nullptr);

// 1-based argmax of logits+noise; ties break to the lowest index.
int assign_hard(const std::vector<double>& logits, const std::vector<double>& noise);

struct PretrainReport {
  double initial_recon = 0.0;  // mean reconstruction loss at entry
  double final_recon = 0.0;
  std::vector<double> epoch_recon;  // per-epoch mean reconstruction loss
};

class RqTokenizer {
 public:
  RqTokenizer() = default;
  RqTokenizer(TokenizerConfig cfg, uint64_t seed);

  const TokenizerConfig& config() const { return cfg_; }

  // Deterministic MLP encoder, differentiable through the tape.
  Tensor encode(Tape& t, const Tensor& content) const;

  // Similarity of a residual to every level entry; level is 1-based.
  Tensor similarity_logits(Tape& t, const Tensor& r, int level) const;

  // Probability-weighted mixture of one level's entries.
  Tensor soft_embedding(Tape& t, const Tensor& probs, int level) const;

  // Residual quantization over all m levels under the given noise directive.
  // soft_update=true uses the probability-mixture backward path on every
  // level output; false uses the classic straight-through path (gradient
  // copied to the residual, codebook trained by the VQ loss alone).
  Quantization quantize(Tape& t, const Tensor& r, const NoiseContext& noise, const RngStream& rng,
                        bool soft_update = true) const;

  // Zero-noise assignment used at validation/inference.
  SemanticId assign_deterministic(const std::vector<double>& content) const;

  VqLosses vq_losses(Tape& t, const Tensor& r, const Quantization& q) const;

  // Classic residual-quantizer pretraining: deterministic nearest-code
  // assignment, straight-through gradients, recon + VQ loss. Codebooks are
  // seeded from the encoded corpus (greedy spread seeding) when epochs >= 1.
  PretrainReport pretrain(const std::vector<std::vector<double>>& corpus, int epochs, double lr, uint64_t seed);

  std::vector<std::pair<std::string, Tensor>> params();
  Tensor codebook(int level) const;  // 1-based
  bool all_finite() const;

  // Deep copy: fresh parameter storage, same values. Plain copies share
  // storage, which is wrong for anything that keeps training.
  RqTokenizer clone() const;

 private:
  Tensor encode_stack(Tape& t, Tensor h) const;
  void seed_codebooks(const std::vector<std::vector<double>>& corpus, uint64_t seed);

  TokenizerConfig cfg_;
  std::vector<Tensor> enc_w_, enc_b_;
  std::vector<Tensor> codebooks_;  // m tensors of shape [K, d]
};

// Item -> SemanticId index with conflict tokens resolved, plus the inverse map.
struct SidIndex {
  int conflict_cap = 0;
  std::vector<SemanticId> item_to_sid;
  std::map<std::vector<int>, int> to_item;  // key: codes with conflict appended

  int sid_to_item(const SemanticId& sid) const;  // -1 when unassigned
  static std::vector<int> key(const SemanticId& sid);
};

// Assigns conflict tokens 0,1,2,... within each group of items sharing the
// same codes, in ascending item order. Throws when a group exceeds the cap.
SidIndex resolve_conflicts(const std::vector<SemanticId>& det_codes, int conflict_cap);

}  // namespace diger
