#include "diger/tokenizer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "diger/optimizer.hpp"

namespace diger {

Similarity parse_similarity(const std::string& name) {
  if (name == "neg-sq-euclidean") return Similarity::NegSqEuclidean;
  if (name == "dot-product") return Similarity::DotProduct;
  throw std::invalid_argument("unknown similarity '" + name + "' (expected neg-sq-euclidean|dot-product)");
}

std::string similarity_name(Similarity s) {
  return s == Similarity::NegSqEuclidean ? "neg-sq-euclidean" : "dot-product";
}

void TokenizerConfig::validate() const {
  if (k < 1) throw std::invalid_argument("tokenizer: K must be >= 1");
  if (m < 1) throw std::invalid_argument("tokenizer: m must be >= 1");
  if (!(tau > 0.0)) throw std::invalid_argument("tokenizer: tau must be positive");
  if (input_dim < 1 || d < 1) throw std::invalid_argument("tokenizer: dimensions must be positive");
  for (int w : encoder_widths)
    if (w < 1) throw std::invalid_argument("tokenizer: encoder widths must be positive");
}

Tensor gumbel_softmax_probs(Tape& t, const Tensor& logits, double noise_scale, double tau, const RngStream& rng,
                            uint64_t counter_base, std::vector<double>* noise_out) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel_softmax_probs: tau must be positive");
  if (noise_scale < 0.0) throw std::invalid_argument("gumbel_softmax_probs: noise scale must be non-negative");
  const int k = static_cast<int>(logits.numel());
  std::vector<double> g = draw_noise(k, NoiseSpec::standard(noise_scale), nullptr, rng, counter_base);
  if (noise_out) *noise_out = g;
  Tensor noisy = noise_scale == 0.0 ? logits : add(t, logits, Tensor::from(logits.shape(), g));
  return softmax(t, scale(t, noisy, 1.0 / tau));
}

int assign_hard(const std::vector<double>& logits, const std::vector<double>& noise) {
  if (logits.empty() || logits.size() != noise.size())
    throw std::invalid_argument("assign_hard: logits and noise must be equal-length and non-empty");
  int best = 0;
  double best_v = logits[0] + noise[0];
  for (std::size_t i = 1; i < logits.size(); ++i) {
    const double v = logits[i] + noise[i];
    if (v > best_v) {
      best_v = v;
      best = static_cast<int>(i);
    }
  }
  return best + 1;
}

RqTokenizer::RqTokenizer(TokenizerConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  RngStream init(seed, {0x746f6b656e697aull});
  uint64_t ctr = 0;
  const auto xavier = [&](int fan_out, int fan_in) {
    const double s = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor w = Tensor::zeros({fan_out, fan_in});
    for (auto& x : w.values()) x = (2.0 * init.uniform(ctr++) - 1.0) * s;
    return w;
  };
  int in = cfg_.input_dim;
  for (int width : cfg_.encoder_widths) {
    enc_w_.push_back(xavier(width, in));
    enc_b_.push_back(Tensor::zeros({width}));
    in = width;
  }
  enc_w_.push_back(xavier(cfg_.d, in));
  enc_b_.push_back(Tensor::zeros({cfg_.d}));
  for (int j = 0; j < cfg_.m; ++j) {
    Tensor cb = Tensor::zeros({cfg_.k, cfg_.d});
    for (auto& x : cb.values()) x = (2.0 * init.uniform(ctr++) - 1.0) * 0.1;
    codebooks_.push_back(cb);
  }
}

Tensor RqTokenizer::encode_stack(Tape& t, Tensor h) const {
  for (std::size_t l = 0; l < enc_w_.size(); ++l) {
    h = add(t, matmul(t, enc_w_[l], h), enc_b_[l]);
    if (l + 1 < enc_w_.size()) h = relu(t, h);
  }
  return h;
}

Tensor RqTokenizer::encode(Tape& t, const Tensor& content) const {
  if (content.ndim() != 1 || content.shape()[0] != cfg_.input_dim)
    throw std::invalid_argument("encode: expected content of shape [" + std::to_string(cfg_.input_dim) + "], got " +
                                shape_str(content.shape()));
  return encode_stack(t, content);
}

Tensor RqTokenizer::similarity_logits(Tape& t, const Tensor& r, int level) const {
  if (level < 1 || level > cfg_.m)
    throw std::invalid_argument("similarity_logits: level " + std::to_string(level) + " outside [1," +
                                std::to_string(cfg_.m) + "]");
  const Tensor& cb = codebooks_[static_cast<std::size_t>(level - 1)];
  if (cfg_.similarity == Similarity::NegSqEuclidean) return neg_sqdist(t, r, cb);
  return matmul(t, cb, r);
}

Tensor RqTokenizer::soft_embedding(Tape& t, const Tensor& probs, int level) const {
  if (level < 1 || level > cfg_.m) throw std::invalid_argument("soft_embedding: level out of range");
  return matmul(t, probs, codebooks_[static_cast<std::size_t>(level - 1)]);
}

Quantization RqTokenizer::quantize(Tape& t, const Tensor& r, const NoiseContext& noise, const RngStream& rng,
                                   bool soft_update) const {
  Quantization q;
  Tensor residual = r;
  for (int j = 0; j < cfg_.m; ++j) {
    LevelAssignment rec;
    rec.residual_in = residual;
    Tensor logits = similarity_logits(t, residual, j + 1);
    const std::vector<uint8_t>* mask = noise.hot_only ? noise.mask(j) : nullptr;
    rec.noise = draw_noise(cfg_.k, noise.spec, mask, rng, static_cast<uint64_t>(j) * cfg_.k);
    rec.logits = logits.values();
    rec.logits_t = logits;
    rec.code = assign_hard(rec.logits, rec.noise);

    bool noisy_any = false;
    for (double g : rec.noise) noisy_any = noisy_any || g != 0.0;
    Tensor noisy = noisy_any ? add(t, logits, Tensor::from({cfg_.k}, rec.noise)) : logits;
    rec.probs = softmax(t, scale(t, noisy, 1.0 / cfg_.tau));
    rec.soft_embedding = soft_embedding(t, rec.probs, j + 1);
    rec.hard_entry = row(t, codebooks_[static_cast<std::size_t>(j)], rec.code - 1);
    rec.output = straight_through(t, rec.hard_entry, soft_update ? rec.soft_embedding : residual);

    residual = sub(t, residual, rec.output);
    q.quantized = j == 0 ? rec.output : add(t, q.quantized, rec.output);
    q.sid.codes.push_back(rec.code);
    q.levels.push_back(std::move(rec));
  }
  return q;
}

SemanticId RqTokenizer::assign_deterministic(const std::vector<double>& content) const {
  Tape t(false);
  Tensor c = Tensor::from({cfg_.input_dim}, content);
  NoiseContext off;
  RngStream unused(0);
  return quantize(t, encode(t, c), off, unused).sid;
}

VqLosses RqTokenizer::vq_losses(Tape& t, const Tensor& r, const Quantization& q) const {
  VqLosses out;
  out.recon = squared_error_sum(t, r, q.quantized);
  for (const auto& lvl : q.levels) {
    Tensor codebook_pull = squared_error_sum(t, stop_gradient(t, lvl.residual_in), lvl.hard_entry);
    Tensor commit = squared_error_sum(t, lvl.residual_in, stop_gradient(t, lvl.hard_entry));
    Tensor term = add(t, codebook_pull, scale(t, commit, cfg_.commit_coef));
    out.vq = out.vq.defined() ? add(t, out.vq, term) : term;
  }
  return out;
}

PretrainReport RqTokenizer::pretrain(const std::vector<std::vector<double>>& corpus, int epochs, double lr,
                                     uint64_t seed) {
  if (corpus.empty()) throw std::invalid_argument("pretrain: corpus is empty");
  for (const auto& c : corpus)
    if (static_cast<int>(c.size()) != cfg_.input_dim)
      throw std::invalid_argument("pretrain: content vector width " + std::to_string(c.size()) + " != input_dim");

  const NoiseContext off;
  const RngStream unused(0);
  const auto mean_recon = [&] {
    double acc = 0.0;
    for (const auto& c : corpus) {
      Tape t(false);
      Tensor x = Tensor::from({cfg_.input_dim}, c);
      Tensor r = encode(t, x);
      Quantization q = quantize(t, r, off, unused, false);
      acc += squared_error_sum(t, r, q.quantized).value();
    }
    return acc / static_cast<double>(corpus.size());
  };

  PretrainReport report;
  report.initial_recon = mean_recon();
  report.final_recon = report.initial_recon;
  if (epochs <= 0) return report;

  seed_codebooks(corpus, seed);

  AdamW opt(lr);
  std::vector<Tensor> ps;
  for (auto& [name, p] : params()) ps.push_back(p);
  opt.attach(ps);

  std::vector<int> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  constexpr int kBatch = 32;

  for (int e = 0; e < epochs; ++e) {
    shuffle_stream(order, RngStream(seed, {0x70726574726e00ull, static_cast<uint64_t>(e)}));
    double epoch_recon = 0.0;
    int in_batch = 0;
    opt.zero_grad();
    for (int idx : order) {
      Tape t;
      Tensor x = Tensor::from({cfg_.input_dim}, corpus[static_cast<std::size_t>(idx)]);
      Tensor r = encode(t, x);
      Quantization q = quantize(t, r, off, unused, false);
      VqLosses losses = vq_losses(t, r, q);
      Tensor loss = add(t, losses.recon, losses.vq);
      t.backward(loss);
      epoch_recon += losses.recon.value();
      if (++in_batch == kBatch) {
        opt.step();
        opt.zero_grad();
        in_batch = 0;
      }
    }
    if (in_batch > 0) {
      opt.step();
      opt.zero_grad();
    }
    report.epoch_recon.push_back(epoch_recon / static_cast<double>(corpus.size()));
  }
  report.final_recon = mean_recon();
  return report;
}

void RqTokenizer::seed_codebooks(const std::vector<std::vector<double>>& corpus, uint64_t seed) {
  // Greedy squared-distance spread seeding over the encoded corpus, applied
  // level by level on the residuals left by the previous levels.
  const int n = static_cast<int>(corpus.size());
  const int d = cfg_.d;
  std::vector<std::vector<double>> residuals(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Tape t(false);
    Tensor x = Tensor::from({cfg_.input_dim}, corpus[static_cast<std::size_t>(i)]);
    residuals[static_cast<std::size_t>(i)] = encode(t, x).values();
  }
  const auto sqdist = [d](const std::vector<double>& a, const double* b) {
    double acc = 0.0;
    for (int j = 0; j < d; ++j) {
      const double diff = a[static_cast<std::size_t>(j)] - b[j];
      acc += diff * diff;
    }
    return acc;
  };
  RngStream rng(seed, {0x736565646362ull});
  uint64_t ctr = 0;
  for (int level = 0; level < cfg_.m; ++level) {
    auto& cb = codebooks_[static_cast<std::size_t>(level)].values();
    const int first = static_cast<int>(rng.below(ctr++, static_cast<uint64_t>(n)));
    std::copy_n(residuals[static_cast<std::size_t>(first)].data(), d, cb.data());
    std::vector<double> dist(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) dist[static_cast<std::size_t>(i)] = sqdist(residuals[static_cast<std::size_t>(i)], cb.data());
    for (int c = 1; c < cfg_.k; ++c) {
      double total = std::accumulate(dist.begin(), dist.end(), 0.0);
      int pick;
      if (total <= 0.0) {
        pick = static_cast<int>(rng.below(ctr++, static_cast<uint64_t>(n)));
      } else {
        const double u = rng.uniform(ctr++) * total;
        double cum = 0.0;
        pick = n - 1;
        for (int i = 0; i < n; ++i) {
          cum += dist[static_cast<std::size_t>(i)];
          if (u < cum) {
            pick = i;
            break;
          }
        }
      }
      std::copy_n(residuals[static_cast<std::size_t>(pick)].data(), d, cb.data() + static_cast<std::size_t>(c) * d);
      for (int i = 0; i < n; ++i)
        dist[static_cast<std::size_t>(i)] =
            std::min(dist[static_cast<std::size_t>(i)], sqdist(residuals[static_cast<std::size_t>(i)], cb.data() + static_cast<std::size_t>(c) * d));
    }
    // Subtract each residual's nearest entry before seeding the next level.
    for (int i = 0; i < n; ++i) {
      auto& r = residuals[static_cast<std::size_t>(i)];
      int best = 0;
      double best_d = sqdist(r, cb.data());
      for (int c = 1; c < cfg_.k; ++c) {
        const double dd = sqdist(r, cb.data() + static_cast<std::size_t>(c) * d);
        if (dd < best_d) {
          best_d = dd;
          best = c;
        }
      }
      for (int j = 0; j < d; ++j) r[static_cast<std::size_t>(j)] -= cb[static_cast<std::size_t>(best) * d + j];
    }
  }
}

std::vector<std::pair<std::string, Tensor>> RqTokenizer::params() {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t l = 0; l < enc_w_.size(); ++l) {
    out.emplace_back("enc_w" + std::to_string(l), enc_w_[l]);
    out.emplace_back("enc_b" + std::to_string(l), enc_b_[l]);
  }
  for (int j = 0; j < cfg_.m; ++j) out.emplace_back("codebook" + std::to_string(j), codebooks_[static_cast<std::size_t>(j)]);
  return out;
}

Tensor RqTokenizer::codebook(int level) const {
  if (level < 1 || level > cfg_.m) throw std::invalid_argument("codebook: level out of range");
  return codebooks_[static_cast<std::size_t>(level - 1)];
}

RqTokenizer RqTokenizer::clone() const {
  RqTokenizer copy = *this;
  for (auto& w : copy.enc_w_) w = Tensor::from(w.shape(), w.values());
  for (auto& b : copy.enc_b_) b = Tensor::from(b.shape(), b.values());
  for (auto& cb : copy.codebooks_) cb = Tensor::from(cb.shape(), cb.values());
  return copy;
}

bool RqTokenizer::all_finite() const {
  const auto ok = [](const Tensor& t) {
    for (double x : t.values())
      if (!std::isfinite(x)) return false;
    return true;
  };
  for (const auto& w : enc_w_)
    if (!ok(w)) return false;
  for (const auto& b : enc_b_)
    if (!ok(b)) return false;
  for (const auto& cb : codebooks_)
    if (!ok(cb)) return false;
  return true;
}

std::vector<int> SidIndex::key(const SemanticId& sid) {
  std::vector<int> k = sid.codes;
  k.push_back(sid.conflict);
  return k;
}

int SidIndex::sid_to_item(const SemanticId& sid) const {
  auto it = to_item.find(key(sid));
  return it == to_item.end() ? -1 : it->second;
}

SidIndex resolve_conflicts(const std::vector<SemanticId>& det_codes, int conflict_cap) {
  if (conflict_cap < 1) throw std::invalid_argument("resolve_conflicts: conflict cap must be >= 1");
  SidIndex idx;
  idx.conflict_cap = conflict_cap;
  idx.item_to_sid.resize(det_codes.size());
  std::map<std::vector<int>, std::vector<int>> groups;  // codes -> items, ascending
  for (std::size_t v = 0; v < det_codes.size(); ++v) groups[det_codes[v].codes].push_back(static_cast<int>(v));
  for (const auto& [codes, items] : groups) {
    if (static_cast<int>(items.size()) > conflict_cap) {
      std::ostringstream os;
      os << "resolve_conflicts: " << items.size() << " items share codes (";
      for (std::size_t i = 0; i < codes.size(); ++i) os << (i ? "," : "") << codes[i];
      os << ") but conflict cap is " << conflict_cap << "; items:";
      for (int v : items) os << " " << v;
      throw std::runtime_error(os.str());
    }
    for (std::size_t rank = 0; rank < items.size(); ++rank) {
      SemanticId sid;
      sid.codes = codes;
      sid.conflict = static_cast<int>(rank);
      idx.item_to_sid[static_cast<std::size_t>(items[rank])] = sid;
      idx.to_item[SidIndex::key(sid)] = items[rank];
    }
  }
  return idx;
}

}  // namespace diger
