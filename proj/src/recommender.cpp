#include "diger/recommender.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace diger {

void RecConfig::validate() const {
  if (enc_layers < 1 || dec_layers < 1) throw std::invalid_argument("recommender: layer counts must be positive");
  if (hidden < 1 || heads < 1 || hidden % heads != 0)
    throw std::invalid_argument("recommender: hidden must be a positive multiple of heads");
  if (max_history < 1) throw std::invalid_argument("recommender: max_history must be >= 1");
  if (beam_width < 1) throw std::invalid_argument("recommender: beam_width must be >= 1");
  if (k < 2 || m < 1 || conflict_cap < 1) throw std::invalid_argument("recommender: bad vocab layout");
}

int VocabLayout::token(int level, int code) const {
  if (level < 1 || level > m || code < 1 || code > k)
    throw std::invalid_argument("vocab: code " + std::to_string(code) + " at level " + std::to_string(level) +
                                " outside layout (K=" + std::to_string(k) + ", m=" + std::to_string(m) + ")");
  return offset(level) + code;
}

int VocabLayout::conflict_token(int conflict) const {
  if (conflict < 0 || conflict >= cap)
    throw std::invalid_argument("vocab: conflict token " + std::to_string(conflict) + " outside cap " +
                                std::to_string(cap));
  return conflict_offset() + conflict;
}

std::vector<int> VocabLayout::item_tokens(const SemanticId& sid) const {
  if (static_cast<int>(sid.codes.size()) != m)
    throw std::invalid_argument("vocab: semantic id has " + std::to_string(sid.codes.size()) + " codes, layout has m=" +
                                std::to_string(m));
  std::vector<int> toks;
  for (int j = 0; j < m; ++j) toks.push_back(token(j + 1, sid.codes[static_cast<std::size_t>(j)]));
  toks.push_back(conflict_token(sid.conflict));
  return toks;
}

SidSequence build_input(const std::vector<SemanticId>& history, const VocabLayout& layout, int max_history) {
  if (history.empty()) throw std::invalid_argument("build_input: empty history");
  if (max_history < 1) throw std::invalid_argument("build_input: max_history must be >= 1");
  const std::size_t keep = std::min<std::size_t>(history.size(), static_cast<std::size_t>(max_history));
  SidSequence seq;
  for (std::size_t i = history.size() - keep; i < history.size(); ++i) {
    seq.boundaries.push_back(static_cast<int>(seq.tokens.size()));
    for (int tok : layout.item_tokens(history[i])) seq.tokens.push_back(tok);
  }
  return seq;
}

SeqRecModel::SeqRecModel(RecConfig cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  layout_ = VocabLayout{cfg_.k, cfg_.m, cfg_.conflict_cap};
  RngStream init(seed, {0x7265636f6d6dull});
  uint64_t ctr = 0;
  const auto uniform_init = [&](std::vector<int> shape, double s) {
    Tensor w = Tensor::zeros(std::move(shape));
    for (auto& x : w.values()) x = (2.0 * init.uniform(ctr++) - 1.0) * s;
    return w;
  };
  const auto xavier = [&](int fan_out, int fan_in) {
    return uniform_init({fan_in, fan_out}, std::sqrt(6.0 / (fan_in + fan_out)));  // used as x @ W
  };
  const auto make_norm = [&] { return Norm{Tensor::full({cfg_.hidden}, 1.0), Tensor::zeros({cfg_.hidden})}; };
  const auto make_attn = [&] {
    AttnBlock b;
    b.wq = xavier(cfg_.hidden, cfg_.hidden);
    b.bq = Tensor::zeros({cfg_.hidden});
    b.wk = xavier(cfg_.hidden, cfg_.hidden);
    b.bk = Tensor::zeros({cfg_.hidden});
    b.wv = xavier(cfg_.hidden, cfg_.hidden);
    b.bv = Tensor::zeros({cfg_.hidden});
    b.wo = xavier(cfg_.hidden, cfg_.hidden);
    b.bo = Tensor::zeros({cfg_.hidden});
    return b;
  };
  const auto make_ffn = [&] {
    Ffn f;
    f.w1 = xavier(4 * cfg_.hidden, cfg_.hidden);
    f.b1 = Tensor::zeros({4 * cfg_.hidden});
    f.w2 = xavier(cfg_.hidden, 4 * cfg_.hidden);
    f.b2 = Tensor::zeros({cfg_.hidden});
    return f;
  };

  embedding_ = uniform_init({layout_.total(), cfg_.hidden}, 0.05);
  enc_pos_ = uniform_init({cfg_.max_history * (cfg_.m + 1), cfg_.hidden}, 0.05);
  dec_pos_ = uniform_init({cfg_.m + 1, cfg_.hidden}, 0.05);
  for (int l = 0; l < cfg_.enc_layers; ++l) enc_layers_.push_back({make_norm(), make_norm(), make_attn(), make_ffn()});
  for (int l = 0; l < cfg_.dec_layers; ++l)
    dec_layers_.push_back({make_norm(), make_norm(), make_norm(), make_attn(), make_attn(), make_ffn()});
  enc_final_ = make_norm();
  dec_final_ = make_norm();
  for (int p = 0; p <= cfg_.m; ++p) {
    const int v = layout_.slice_size(p);
    out_w_.push_back(xavier(v, cfg_.hidden));  // used as h @ W -> [v]... stored [hidden, v]
    out_b_.push_back(Tensor::zeros({v}));
  }
}

Tensor SeqRecModel::norm(Tape& t, const Norm& n, const Tensor& x) const { return layer_norm(t, x, n.gain, n.bias); }

Tensor SeqRecModel::ffn_forward(Tape& t, const Ffn& f, const Tensor& x) const {
  return add(t, matmul(t, relu(t, add(t, matmul(t, x, f.w1), f.b1)), f.w2), f.b2);
}

Tensor SeqRecModel::attention(Tape& t, const AttnBlock& blk, const Tensor& queries, const Tensor& keys_values,
                              bool causal) const {
  const int dh = cfg_.hidden / cfg_.heads;
  const int qn = queries.rows(), kn = keys_values.rows();
  Tensor q = add(t, matmul(t, queries, blk.wq), blk.bq);
  Tensor k = add(t, matmul(t, keys_values, blk.wk), blk.bk);
  Tensor v = add(t, matmul(t, keys_values, blk.wv), blk.bv);

  std::vector<uint8_t> mask;
  if (causal) {
    mask.assign(static_cast<std::size_t>(qn) * kn, 0);
    for (int i = 0; i < qn; ++i)
      for (int j = 0; j <= i && j < kn; ++j) mask[static_cast<std::size_t>(i) * kn + j] = 1;
  }

  std::vector<Tensor> heads;
  for (int h = 0; h < cfg_.heads; ++h) {
    Tensor qh = slice_cols(t, q, h * dh, dh);
    Tensor kh = slice_cols(t, k, h * dh, dh);
    Tensor vh = slice_cols(t, v, h * dh, dh);
    Tensor scores = scale(t, matmul_nt(t, qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
    Tensor att = causal ? masked_softmax(t, scores, mask) : softmax(t, scores);
    heads.push_back(matmul(t, att, vh));
  }
  return add(t, matmul(t, concat_cols(t, heads), blk.wo), blk.bo);
}

namespace {
// In the identity straight-through path the forward contribution is exactly
// zero while the backward pass copies the one-hot-space gradient onto the
// logits, so only the selected embedding row is updated.
Tensor zero_forward_identity(Tape& t, const Tensor& live) { return sub(t, live, stop_gradient(t, live)); }
}  // namespace

Tensor SeqRecModel::embed_tokens(Tape& t, const std::vector<int>& tokens, const Coupling* coupling,
                                 bool decoder_side) const {
  const int block = cfg_.m + 1;
  std::vector<Tensor> slice_cache(static_cast<std::size_t>(cfg_.m + 1));  // per level, gathered once
  std::vector<Tensor> rows;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const int tok = tokens[i];
    if (tok < 0 || tok >= layout_.total())
      throw std::invalid_argument("embed: token " + std::to_string(tok) + " outside vocabulary");
    Tensor hard = row(t, embedding_, tok);
    const Quantization* q = nullptr;
    int level = 0;  // 1-based level for code positions; 0 = plain lookup
    if (coupling) {
      if (!decoder_side) {
        const int item = static_cast<int>(i) / block, pos = static_cast<int>(i) % block;
        if (pos < cfg_.m && item < static_cast<int>(coupling->input_items.size())) {
          q = coupling->input_items[static_cast<std::size_t>(item)];
          level = pos + 1;
        }
      } else if (i >= 1) {
        const int pos = static_cast<int>(i) - 1;  // decoder token i was emitted at position i-1
        if (pos < cfg_.m && coupling->target) {
          q = coupling->target;
          level = pos + 1;
        }
      }
    }
    if (!q || level < 1) {
      rows.push_back(hard);
      continue;
    }
    const auto& lvl = q->levels[static_cast<std::size_t>(level - 1)];
    if (!slice_cache[static_cast<std::size_t>(level)].defined()) {
      std::vector<int> slice_ids(static_cast<std::size_t>(cfg_.k));
      std::iota(slice_ids.begin(), slice_ids.end(), layout_.offset(level) + 1);
      slice_cache[static_cast<std::size_t>(level)] = gather_rows(t, embedding_, slice_ids);
    }
    const Tensor& slice = slice_cache[static_cast<std::size_t>(level)];
    if (coupling->ste_identity) {
      rows.push_back(add(t, hard, matmul(t, zero_forward_identity(t, lvl.logits_t), slice)));
    } else if (coupling->soft_value) {
      rows.push_back(matmul(t, lvl.probs, slice));
    } else {
      rows.push_back(straight_through(t, hard, matmul(t, lvl.probs, slice)));
    }
  }
  return stack_rows(t, rows);
}

Tensor SeqRecModel::encode_input(Tape& t, const SidSequence& input, const Coupling* coupling) const {
  if (input.tokens.empty()) throw std::invalid_argument("encode_input: empty input sequence");
  const int n = static_cast<int>(input.tokens.size());
  if (n > enc_pos_.rows())
    throw std::invalid_argument("encode_input: sequence of " + std::to_string(n) + " tokens exceeds position table (" +
                                std::to_string(enc_pos_.rows()) + "); apply build_input truncation");
  std::vector<int> positions(static_cast<std::size_t>(n));
  std::iota(positions.begin(), positions.end(), 0);
  Tensor x = add(t, embed_tokens(t, input.tokens, coupling, false), gather_rows(t, enc_pos_, positions));
  for (const auto& layer : enc_layers_) {
    Tensor ned = norm(t, layer.n1, x);
    x = add(t, x, attention(t, layer.attn, ned, ned, false));
    x = add(t, x, ffn_forward(t, layer.ffn, norm(t, layer.n2, x)));
  }
  return norm(t, enc_final_, x);
}

std::vector<Tensor> SeqRecModel::decode_positions(Tape& t, const Tensor& enc_out,
                                                  const std::vector<int>& decoder_tokens,
                                                  const Coupling* coupling) const {
  const int p_n = static_cast<int>(decoder_tokens.size());
  if (p_n < 1 || p_n > cfg_.m + 1)
    throw std::invalid_argument("decode_positions: decoder length " + std::to_string(p_n) + " outside [1," +
                                std::to_string(cfg_.m + 1) + "]");
  std::vector<int> positions(static_cast<std::size_t>(p_n));
  std::iota(positions.begin(), positions.end(), 0);
  Tensor y = add(t, embed_tokens(t, decoder_tokens, coupling, true), gather_rows(t, dec_pos_, positions));
  for (const auto& layer : dec_layers_) {
    Tensor ned = norm(t, layer.n1, y);
    y = add(t, y, attention(t, layer.self_attn, ned, ned, true));
    y = add(t, y, attention(t, layer.cross_attn, norm(t, layer.n2, y), enc_out, false));
    y = add(t, y, ffn_forward(t, layer.ffn, norm(t, layer.n3, y)));
  }
  y = norm(t, dec_final_, y);
  std::vector<Tensor> logits;
  for (int p = 0; p < p_n; ++p)
    logits.push_back(add(t, matmul(t, row(t, y, p), out_w_[static_cast<std::size_t>(p)]), out_b_[static_cast<std::size_t>(p)]));
  return logits;
}

Tensor SeqRecModel::forward_nll(Tape& t, const SidSequence& input, const SemanticId& target,
                                const Coupling* coupling) const {
  const std::vector<int> target_tokens = layout_.item_tokens(target);  // validates ranges
  std::vector<int> decoder_tokens{layout_.bos()};
  decoder_tokens.insert(decoder_tokens.end(), target_tokens.begin(), target_tokens.end() - 1);

  Tensor enc_out = encode_input(t, input, coupling);
  std::vector<Tensor> logits = decode_positions(t, enc_out, decoder_tokens, coupling);

  Tensor loss;
  for (int p = 0; p <= cfg_.m; ++p) {
    Tensor term;
    const bool soft = cfg_.soft_targets && coupling && coupling->target && p < cfg_.m;
    if (soft) {
      term = cross_entropy_soft(t, logits[static_cast<std::size_t>(p)],
                                coupling->target->levels[static_cast<std::size_t>(p)].probs);
    } else {
      const int local = p < cfg_.m ? target.codes[static_cast<std::size_t>(p)] - 1 : target.conflict;
      term = cross_entropy_indices(t, logits[static_cast<std::size_t>(p)], {local});
    }
    loss = p == 0 ? term : add(t, loss, term);
  }
  return loss;
}

RankedCandidates SeqRecModel::generate(const SidSequence& input, int beam_width, const SidIndex* index) const {
  if (beam_width < 1) throw std::invalid_argument("generate: beam width must be >= 1");
  for (int p = 0; p <= cfg_.m; ++p) {
    if (beam_width > layout_.slice_size(p) && !warned_beam_clamp_) {
      std::fprintf(stderr, "generate: beam width %d exceeds level vocabulary %d; expansion is clamped\n", beam_width,
                   layout_.slice_size(p));
      warned_beam_clamp_ = true;
    }
  }

  Tape t(false);
  Tensor enc_out = encode_input(t, input, nullptr);

  struct Beam {
    std::vector<int> values;  // emitted so far: codes (1-based) then conflict
    double logp = 0.0;
    std::vector<int> matching;  // constrained mode: items consistent with the prefix
  };
  std::vector<Beam> beams(1);
  if (index) {
    beams[0].matching.resize(index->item_to_sid.size());
    std::iota(beams[0].matching.begin(), beams[0].matching.end(), 0);
  }

  for (int p = 0; p <= cfg_.m; ++p) {
    std::vector<Beam> next;
    for (const Beam& b : beams) {
      std::vector<int> decoder_tokens{layout_.bos()};
      for (int q = 0; q < p; ++q)
        decoder_tokens.push_back(q < cfg_.m ? layout_.token(q + 1, b.values[static_cast<std::size_t>(q)])
                                            : layout_.conflict_token(b.values[static_cast<std::size_t>(q)]));
      Tape local(false);
      Tensor logits = decode_positions(local, enc_out, decoder_tokens, nullptr).back();
      const std::vector<double> logp = log_softmax(local, logits).values();

      std::vector<int> allowed;
      if (index) {
        int prev = -1;
        for (int item : b.matching) {
          const auto& sid = index->item_to_sid[static_cast<std::size_t>(item)];
          const int v = p < cfg_.m ? sid.codes[static_cast<std::size_t>(p)] : sid.conflict;
          if (v != prev) {
            allowed.push_back(v);
            prev = v;
          }
        }
        std::sort(allowed.begin(), allowed.end());
        allowed.erase(std::unique(allowed.begin(), allowed.end()), allowed.end());
      } else {
        allowed.resize(static_cast<std::size_t>(layout_.slice_size(p)));
        std::iota(allowed.begin(), allowed.end(), p < cfg_.m ? 1 : 0);
      }

      for (int v : allowed) {
        Beam nb;
        nb.values = b.values;
        nb.values.push_back(v);
        nb.logp = b.logp + logp[static_cast<std::size_t>(p < cfg_.m ? v - 1 : v)];
        if (index) {
          for (int item : b.matching) {
            const auto& sid = index->item_to_sid[static_cast<std::size_t>(item)];
            const int iv = p < cfg_.m ? sid.codes[static_cast<std::size_t>(p)] : sid.conflict;
            if (iv == v) nb.matching.push_back(item);
          }
        }
        next.push_back(std::move(nb));
      }
    }
    std::stable_sort(next.begin(), next.end(), [](const Beam& a, const Beam& b) {
      if (a.logp != b.logp) return a.logp > b.logp;
      return a.values < b.values;
    });
    if (static_cast<int>(next.size()) > beam_width) next.resize(static_cast<std::size_t>(beam_width));
    beams = std::move(next);
  }

  // Rescore survivors with one full teacher-forced pass each. The summed
  // per-position log-probabilities then negate the forward_nll value exactly,
  // so full-width beam order reproduces exhaustive NLL enumeration.
  RankedCandidates out;
  for (const Beam& b : beams) {
    Candidate c;
    c.sid.codes.assign(b.values.begin(), b.values.end() - 1);
    c.sid.conflict = b.values.back();
    std::vector<int> decoder_tokens{layout_.bos()};
    const std::vector<int> item_toks = layout_.item_tokens(c.sid);
    decoder_tokens.insert(decoder_tokens.end(), item_toks.begin(), item_toks.end() - 1);
    Tape rescore(false);
    const std::vector<Tensor> logits = decode_positions(rescore, enc_out, decoder_tokens, nullptr);
    c.logp = 0.0;
    for (int p = 0; p <= cfg_.m; ++p) {
      const int local = p < cfg_.m ? c.sid.codes[static_cast<std::size_t>(p)] - 1 : c.sid.conflict;
      c.logp += log_softmax(rescore, logits[static_cast<std::size_t>(p)]).values()[static_cast<std::size_t>(local)];
    }
    out.push_back(std::move(c));
  }
  std::stable_sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    if (a.logp != b.logp) return a.logp > b.logp;
    if (a.sid.codes != b.sid.codes) return a.sid.codes < b.sid.codes;
    return a.sid.conflict < b.sid.conflict;
  });
  return out;
}

std::vector<std::pair<std::string, Tensor>> SeqRecModel::params() {
  std::vector<std::pair<std::string, Tensor>> out;
  const auto norm_params = [&](const std::string& prefix, Norm& n) {
    out.emplace_back(prefix + ".gain", n.gain);
    out.emplace_back(prefix + ".bias", n.bias);
  };
  const auto attn_params = [&](const std::string& prefix, AttnBlock& b) {
    out.emplace_back(prefix + ".wq", b.wq);
    out.emplace_back(prefix + ".bq", b.bq);
    out.emplace_back(prefix + ".wk", b.wk);
    out.emplace_back(prefix + ".bk", b.bk);
    out.emplace_back(prefix + ".wv", b.wv);
    out.emplace_back(prefix + ".bv", b.bv);
    out.emplace_back(prefix + ".wo", b.wo);
    out.emplace_back(prefix + ".bo", b.bo);
  };
  const auto ffn_params = [&](const std::string& prefix, Ffn& f) {
    out.emplace_back(prefix + ".w1", f.w1);
    out.emplace_back(prefix + ".b1", f.b1);
    out.emplace_back(prefix + ".w2", f.w2);
    out.emplace_back(prefix + ".b2", f.b2);
  };
  out.emplace_back("embedding", embedding_);
  out.emplace_back("enc_pos", enc_pos_);
  out.emplace_back("dec_pos", dec_pos_);
  for (std::size_t l = 0; l < enc_layers_.size(); ++l) {
    const std::string p = "enc" + std::to_string(l);
    norm_params(p + ".n1", enc_layers_[l].n1);
    norm_params(p + ".n2", enc_layers_[l].n2);
    attn_params(p + ".attn", enc_layers_[l].attn);
    ffn_params(p + ".ffn", enc_layers_[l].ffn);
  }
  for (std::size_t l = 0; l < dec_layers_.size(); ++l) {
    const std::string p = "dec" + std::to_string(l);
    norm_params(p + ".n1", dec_layers_[l].n1);
    norm_params(p + ".n2", dec_layers_[l].n2);
    norm_params(p + ".n3", dec_layers_[l].n3);
    attn_params(p + ".self", dec_layers_[l].self_attn);
    attn_params(p + ".cross", dec_layers_[l].cross_attn);
    ffn_params(p + ".ffn", dec_layers_[l].ffn);
  }
  norm_params("enc_final", enc_final_);
  norm_params("dec_final", dec_final_);
  for (std::size_t p = 0; p < out_w_.size(); ++p) {
    out.emplace_back("out_w" + std::to_string(p), out_w_[p]);
    out.emplace_back("out_b" + std::to_string(p), out_b_[p]);
  }
  return out;
}

bool SeqRecModel::all_finite() const {
  for (auto& [name, p] : const_cast<SeqRecModel*>(this)->params())
    for (double x : p.values())
      if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace diger
