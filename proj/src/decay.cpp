#include "diger/decay.hpp"

#include <cmath>
#include <stdexcept>

namespace diger {

std::vector<double> draw_noise(int k, const NoiseSpec& spec, const std::vector<uint8_t>* hot_mask,
                               const RngStream& rng, uint64_t counter_base) {
  std::vector<double> g(static_cast<std::size_t>(k), 0.0);
  if (spec.kind == NoiseSpec::Kind::None || spec.scale == 0.0) return g;
  for (int i = 0; i < k; ++i) {
    if (hot_mask && !(*hot_mask)[static_cast<std::size_t>(i)]) continue;
    const double raw = rng.gumbel(counter_base + static_cast<uint64_t>(i));
    if (spec.kind == NoiseSpec::Kind::Standard) {
      g[static_cast<std::size_t>(i)] = spec.scale * raw;
    } else {
      g[static_cast<std::size_t>(i)] = spec.scale * (raw - kEulerGamma) / kGumbelStd;
    }
  }
  return g;
}

void SdudState::prime(double initial_loss) {
  if (!(initial_loss >= 0.0)) throw std::invalid_argument("sdud: initial loss must be non-negative");
  loss_ema = initial_loss;
  ema_primed = true;
  sigma = sdud_sigma(loss_ema, lambda);
}

double sdud_loss(double l_gen, double sigma, double lambda) {
  if (!(sigma + lambda > 0.0)) throw std::invalid_argument("sdud_loss: sigma + lambda must be positive");
  const double s = sigma + lambda;
  return l_gen / (2.0 * s * s) + std::log(s);
}

double sdud_sigma(double l_gen, double lambda) { return std::max(0.0, std::sqrt(l_gen) - lambda); }

void sdud_step(SdudState& state, double observed_l_gen) {
  if (!(observed_l_gen >= 0.0) || !std::isfinite(observed_l_gen))
    throw std::invalid_argument("sdud_step: observed loss must be finite and non-negative");
  if (!state.ema_primed) {
    state.loss_ema = observed_l_gen;
    state.ema_primed = true;
  } else {
    state.loss_ema = state.loss_ema_decay * state.loss_ema + (1.0 - state.loss_ema_decay) * observed_l_gen;
  }
  state.sigma = sdud_sigma(state.loss_ema, state.lambda);
}

FrqState::FrqState(int levels_, int k_, double beta_, double ratio_)
    : levels(levels_), k(k_), beta(beta_), ratio(ratio_) {
  if (levels <= 0 || k <= 0) throw std::invalid_argument("frq: levels and K must be positive");
  if (beta < 0.0 || beta >= 1.0) throw std::invalid_argument("frq: beta must lie in [0,1)");
  if (!(ratio > 0.0)) throw std::invalid_argument("frq: threshold ratio must be positive");
  freq.assign(static_cast<std::size_t>(levels), std::vector<double>(static_cast<std::size_t>(k), 1.0 / k));
  frq_partition(*this);
}

int FrqState::hot_count(int level) const {
  int n = 0;
  for (uint8_t h : hot[static_cast<std::size_t>(level)]) n += h ? 1 : 0;
  return n;
}

void frq_update(FrqState& state, const std::vector<std::vector<double>>& raw) {
  if (static_cast<int>(raw.size()) != state.levels)
    throw std::invalid_argument("frq_update: expected " + std::to_string(state.levels) + " levels, got " +
                                std::to_string(raw.size()));
  for (int l = 0; l < state.levels; ++l) {
    const auto& r = raw[static_cast<std::size_t>(l)];
    if (static_cast<int>(r.size()) != state.k) throw std::invalid_argument("frq_update: frequency vector size mismatch");
    double total = 0.0;
    for (double x : r) {
      if (x < 0.0) throw std::invalid_argument("frq_update: negative frequency entry");
      total += x;
    }
    if (std::abs(total - 1.0) > 1e-6)
      throw std::invalid_argument("frq_update: raw frequencies sum to " + std::to_string(total) + ", expected 1");
  }
  for (int l = 0; l < state.levels; ++l) {
    auto& f = state.freq[static_cast<std::size_t>(l)];
    const auto& r = raw[static_cast<std::size_t>(l)];
    for (int i = 0; i < state.k; ++i)
      f[static_cast<std::size_t>(i)] = state.beta * f[static_cast<std::size_t>(i)] + (1.0 - state.beta) * r[static_cast<std::size_t>(i)];
  }
  frq_partition(state);
}

void frq_partition(FrqState& state) {
  const double gamma = state.gamma();
  state.hot.assign(static_cast<std::size_t>(state.levels), std::vector<uint8_t>(static_cast<std::size_t>(state.k), 0));
  for (int l = 0; l < state.levels; ++l)
    for (int i = 0; i < state.k; ++i)
      if (state.freq[static_cast<std::size_t>(l)][static_cast<std::size_t>(i)] > gamma)
        state.hot[static_cast<std::size_t>(l)][static_cast<std::size_t>(i)] = 1;
}

Tensor frq_probs(Tape& t, const Tensor& logits, const std::vector<uint8_t>& hot_mask, double tau,
                 const NoiseSpec& spec, const RngStream& rng, uint64_t counter_base,
                 std::vector<double>* noise_out) {
  if (!(tau > 0.0)) throw std::invalid_argument("frq_probs: tau must be positive");
  if (logits.ndim() != 1 || logits.numel() != hot_mask.size())
    throw std::invalid_argument("frq_probs: logits/mask size mismatch");
  const int k = static_cast<int>(logits.numel());
  std::vector<double> g = draw_noise(k, spec, &hot_mask, rng, counter_base);
  if (noise_out) *noise_out = g;
  bool any = false;
  for (double x : g) any = any || x != 0.0;
  Tensor noisy = any ? add(t, logits, Tensor::from(logits.shape(), g)) : logits;
  return softmax(t, scale(t, noisy, 1.0 / tau));
}

Variant parse_variant(const std::string& name) {
  if (name == "two-stage") return Variant::TwoStage;
  if (name == "ste") return Variant::Ste;
  if (name == "diger-no-ud") return Variant::DigerNoUd;
  if (name == "diger-frqud") return Variant::DigerFrqUd;
  if (name == "diger-sdud") return Variant::DigerSdud;
  if (name == "diger-both") return Variant::DigerBoth;
  throw std::invalid_argument("unknown variant '" + name +
                              "' (expected two-stage|ste|diger-no-ud|diger-frqud|diger-sdud|diger-both)");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::TwoStage: return "two-stage";
    case Variant::Ste: return "ste";
    case Variant::DigerNoUd: return "diger-no-ud";
    case Variant::DigerFrqUd: return "diger-frqud";
    case Variant::DigerSdud: return "diger-sdud";
    case Variant::DigerBoth: return "diger-both";
  }
  throw std::invalid_argument("unknown variant enum value");
}

NoiseContext decay_policy(Variant v, const SdudState* sdud, const FrqState* frq) {
  NoiseContext ctx;
  switch (v) {
    case Variant::TwoStage:
    case Variant::Ste:
      ctx.spec = NoiseSpec::none();
      return ctx;
    case Variant::DigerNoUd:
      ctx.spec = NoiseSpec::standard();
      return ctx;
    case Variant::DigerSdud:
      if (!sdud) throw std::invalid_argument("decay_policy: sdud state required for diger-sdud");
      ctx.spec = NoiseSpec::scaled(sdud->sigma);
      return ctx;
    case Variant::DigerFrqUd:
      if (!frq) throw std::invalid_argument("decay_policy: frq state required for diger-frqud");
      ctx.spec = NoiseSpec::standard();
      ctx.hot_only = true;
      ctx.frq = frq;
      return ctx;
    case Variant::DigerBoth:
      if (!sdud || !frq) throw std::invalid_argument("decay_policy: sdud and frq state required for diger-both");
      ctx.spec = NoiseSpec::scaled(sdud->sigma);
      ctx.hot_only = true;
      ctx.frq = frq;
      return ctx;
  }
  throw std::invalid_argument("decay_policy: unknown variant");
}

}  // namespace diger
