#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "diger/tokenizer.hpp"

namespace diger {

struct RecConfig {
  int enc_layers = 2;
  int dec_layers = 2;
  int hidden = 64;
  int heads = 4;
  int max_history = 8;   // items kept from the end of a history
  int beam_width = 20;
  int k = 32;            // codes per level (vocab layout)
  int m = 3;             // code levels
  int conflict_cap = 64; // conflict vocabulary size
  bool constrained = true;
  bool soft_targets = false;

  void validate() const;
};

// Disjoint per-level token slices. Code tokens are offset_j + code with codes
// 1-based, the conflict slice follows the code slices, and global id 0 (never
// produced by any item) doubles as the decoder start token.
struct VocabLayout {
  int k = 0, m = 0, cap = 0;

  int offset(int level) const { return (level - 1) * k; }  // level 1-based
  int conflict_offset() const { return m * k; }
  int bos() const { return 0; }
  int total() const { return m * k + cap; }

  int token(int level, int code) const;         // level 1..m, code 1..K
  int conflict_token(int conflict) const;       // conflict 0-based
  std::vector<int> item_tokens(const SemanticId& sid) const;  // m+1 tokens

  // Decoder position p in [0, m]: positions 0..m-1 emit level p+1 codes,
  // position m emits the conflict token.
  int slice_begin(int pos) const { return pos < m ? offset(pos + 1) + 1 : conflict_offset(); }
  int slice_size(int pos) const { return pos < m ? k : cap; }
};

struct SidSequence {
  std::vector<int> tokens;      // flat global token ids
  std::vector<int> boundaries;  // start offset of each item block
};

// Chronological concatenation of each history item's (codes..., conflict)
// tokens, truncated to the most recent max_history items.
SidSequence build_input(const std::vector<SemanticId>& history, const VocabLayout& layout, int max_history);

struct Candidate {
  SemanticId sid;
  double logp = 0.0;
};
using RankedCandidates = std::vector<Candidate>;

// Gradient coupling between the tokenizer's assignments and the token
// embeddings used by the recommender. input_items runs parallel to the input
// sequence's item blocks; null entries fall back to plain lookups.
//  - soft (default): forward uses the hard token row, backward routes through
//    the probability-weighted mixture of the slice rows, so gradients reach
//    every slice row and the tokenizer's logits.
//  - ste_identity: forward uses the hard row; the assignment probabilities
//    are bypassed and the gradient w.r.t. the one-hot selection is copied
//    straight onto the similarity logits, while only the selected embedding
//    row is updated.
struct Coupling {
  std::vector<const Quantization*> input_items;
  const Quantization* target = nullptr;
  bool ste_identity = false;
  // Diagnostic mode: feed the soft mixture value itself instead of the
  // straight-through output, making the forward equal to the differentiable
  // surrogate the backward pass follows. Used by gradient checks.
  bool soft_value = false;
};

class SeqRecModel {
 public:
  SeqRecModel() = default;
  SeqRecModel(RecConfig cfg, uint64_t seed);

  const RecConfig& config() const { return cfg_; }
  const VocabLayout& layout() const { return layout_; }

  // Encoder over the input token sequence; rows are token+position embeddings.
  Tensor encode_input(Tape& t, const SidSequence& input, const Coupling* coupling) const;

  // Teacher-forced decoder: given decoder input tokens (BOS + emitted target
  // tokens), returns each position's logits over that position's slice.
  std::vector<Tensor> decode_positions(Tape& t, const Tensor& enc_out, const std::vector<int>& decoder_tokens,
                                       const Coupling* coupling) const;

  // Autoregressive negative log-likelihood of the target over m+1 positions.
  Tensor forward_nll(Tape& t, const SidSequence& input, const SemanticId& target, const Coupling* coupling) const;

  // Level-by-level beam search; with an index, decoding is constrained to
  // assigned SIDs. Ranked by total log-probability, ties lexicographic.
  RankedCandidates generate(const SidSequence& input, int beam_width, const SidIndex* index) const;

  std::vector<std::pair<std::string, Tensor>> params();
  bool all_finite() const;

 private:
  struct AttnBlock {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  };
  struct Norm {
    Tensor gain, bias;
  };
  struct Ffn {
    Tensor w1, b1, w2, b2;
  };
  struct EncLayer {
    Norm n1, n2;
    AttnBlock attn;
    Ffn ffn;
  };
  struct DecLayer {
    Norm n1, n2, n3;
    AttnBlock self_attn, cross_attn;
    Ffn ffn;
  };

  Tensor embed_tokens(Tape& t, const std::vector<int>& tokens, const Coupling* coupling, bool decoder_side) const;
  Tensor attention(Tape& t, const AttnBlock& blk, const Tensor& queries, const Tensor& keys_values, bool causal) const;
  Tensor ffn_forward(Tape& t, const Ffn& f, const Tensor& x) const;
  Tensor norm(Tape& t, const Norm& n, const Tensor& x) const;

  RecConfig cfg_;
  VocabLayout layout_;
  Tensor embedding_;  // [vocab, hidden]
  Tensor enc_pos_, dec_pos_;
  std::vector<EncLayer> enc_layers_;
  std::vector<DecLayer> dec_layers_;
  Norm enc_final_, dec_final_;
  std::vector<Tensor> out_w_, out_b_;  // per decoder position
  mutable bool warned_beam_clamp_ = false;
};

}  // namespace diger
