#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "diger/rng.hpp"
#include "diger/tape.hpp"

namespace diger {

// How Gumbel noise is drawn for one assignment.
//  - None:     g = 0 exactly.
//  - Standard: g = scale * Gumbel(0,1), the literal noisy-logit form.
//  - Scaled:   g = sigma * (sqrt(6)/pi) * (Gumbel(0,1) - EulerGamma), i.e.
//              mean 0 and standard deviation exactly sigma.
struct NoiseSpec {
  enum class Kind { None, Standard, Scaled };
  Kind kind = Kind::Standard;
  double scale = 1.0;  // Standard: multiplier; Scaled: sigma

  static NoiseSpec none() { return {Kind::None, 0.0}; }
  static NoiseSpec standard(double s = 1.0) { return {Kind::Standard, s}; }
  static NoiseSpec scaled(double sigma) { return {Kind::Scaled, sigma}; }
};

// Draw a length-k noise vector; entry i uses counter counter_base+i. With a
// hot mask, cold entries are exactly 0 while hot entries still consume their
// own counters, so masking never shifts other draws.
std::vector<double> draw_noise(int k, const NoiseSpec& spec, const std::vector<uint8_t>* hot_mask,
                               const RngStream& rng, uint64_t counter_base);

// --- SDUD: sigma tied to the generation loss by a closed form ---------------

struct SdudState {
  double sigma = 0.0;
  double lambda = 1.4;
  double loss_ema = 0.0;
  double loss_ema_decay = 0.9;
  bool ema_primed = false;

  // Seeds the EMA (and sigma) before the first observed loss.
  void prime(double initial_loss);
};

// L_gen / (2 (sigma+lambda)^2) + log(sigma+lambda)
double sdud_loss(double l_gen, double sigma, double lambda);

// Stationary point of sdud_loss clamped to be non-negative.
double sdud_sigma(double l_gen, double lambda);

// Folds one observed loss into the EMA and re-applies the closed form.
void sdud_step(SdudState& state, double observed_l_gen);

// --- FrqUD: noise gated by per-level EMA usage frequencies ------------------

struct FrqState {
  int levels = 0;
  int k = 0;
  double beta = 0.25;    // EMA decay
  double ratio = 1.5;    // hot-code threshold ratio r
  std::vector<std::vector<double>> freq;  // per level, K entries, sums to 1
  std::vector<std::vector<uint8_t>> hot;  // per level hot-code mask

  FrqState() = default;
  FrqState(int levels, int k, double beta, double ratio);

  double gamma() const { return ratio / k; }
  int hot_count(int level) const;  // level 0-based
};

// freq <- beta * freq + (1-beta) * raw, then re-partition. Each raw row must
// be non-negative and sum to 1 within 1e-6.
void frq_update(FrqState& state, const std::vector<std::vector<double>>& raw);

// Recomputes hot = { i : freq_i > gamma } per level.
void frq_partition(FrqState& state);

// Softmax((l+g)/tau) where g is drawn only on hot entries; the hard
// assignment for this distribution is argmax over the same combined vector.
// With an all-false mask this is exactly softmax(l/tau).
Tensor frq_probs(Tape& t, const Tensor& logits, const std::vector<uint8_t>& hot_mask, double tau,
                 const NoiseSpec& spec, const RngStream& rng, uint64_t counter_base,
                 std::vector<double>* noise_out = nullptr);

// --- training-regime noise directive ----------------------------------------

enum class Variant { TwoStage, Ste, DigerNoUd, DigerFrqUd, DigerSdud, DigerBoth };

Variant parse_variant(const std::string& name);
std::string variant_name(Variant v);

// Per-assignment noise directive for the active regime. hot_only directives
// carry the FrqState whose masks gate the noise.
struct NoiseContext {
  NoiseSpec spec = NoiseSpec::none();
  bool hot_only = false;
  const FrqState* frq = nullptr;

  const std::vector<uint8_t>* mask(int level) const {  // level 0-based
    return hot_only ? &frq->hot[static_cast<std::size_t>(level)] : nullptr;
  }
};

NoiseContext decay_policy(Variant v, const SdudState* sdud, const FrqState* frq);

}  // namespace diger
