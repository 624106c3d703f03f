#include "diger/metrics.hpp"

#include <cmath>
#include <stdexcept>

#include "diger/gradcheck.hpp"

namespace diger {

namespace {
int rank_of(const std::vector<int>& ranked, int target) {
  for (std::size_t i = 0; i < ranked.size(); ++i)
    if (ranked[i] == target) return static_cast<int>(i) + 1;
  return -1;
}

void check_catalogs(const AssignmentSnapshot& a, const AssignmentSnapshot& b, const char* op) {
  if (a.deterministic.size() != b.deterministic.size())
    throw std::invalid_argument(std::string(op) + ": snapshots cover different catalogs (" +
                                std::to_string(a.deterministic.size()) + " vs " +
                                std::to_string(b.deterministic.size()) + " items)");
  if (a.deterministic.empty()) throw std::invalid_argument(std::string(op) + ": empty snapshot");
}
}  // namespace

int recall_at_k(const std::vector<int>& ranked, int target, int k) {
  if (k <= 0) throw std::invalid_argument("recall_at_k: k must be positive");
  const int r = rank_of(ranked, target);
  return (r > 0 && r <= k) ? 1 : 0;
}

double ndcg_at_k(const std::vector<int>& ranked, int target, int k) {
  if (k <= 0) throw std::invalid_argument("ndcg_at_k: k must be positive");
  const int r = rank_of(ranked, target);
  if (r <= 0 || r > k) return 0.0;
  return 1.0 / std::log2(static_cast<double>(r) + 1.0);
}

double code_coverage(const AssignmentSnapshot& snap, int level, int k) {
  if (snap.deterministic.empty()) throw std::invalid_argument("code_coverage: empty snapshot");
  std::vector<uint8_t> used(static_cast<std::size_t>(k), 0);
  for (const auto& sid : snap.deterministic) {
    const int c = sid.codes.at(static_cast<std::size_t>(level - 1));
    if (c < 1 || c > k) throw std::invalid_argument("code_coverage: code " + std::to_string(c) + " outside [1,K]");
    used[static_cast<std::size_t>(c - 1)] = 1;
  }
  int n = 0;
  for (uint8_t u : used) n += u;
  return static_cast<double>(n) / static_cast<double>(k);
}

CoverageStats coverage_stats(const AssignmentSnapshot& snap, int levels, int k) {
  CoverageStats st;
  for (int l = 1; l <= levels; ++l) st.per_level.push_back(code_coverage(snap, l, k));
  for (double c : st.per_level) st.mean += c;
  st.mean /= static_cast<double>(levels);
  for (double c : st.per_level) st.stddev += (c - st.mean) * (c - st.mean);
  st.stddev = std::sqrt(st.stddev / static_cast<double>(levels));
  return st;
}

std::vector<double> usage_distribution(const AssignmentSnapshot& snap, int level, int k) {
  if (snap.deterministic.empty()) throw std::invalid_argument("usage_distribution: empty snapshot");
  std::vector<double> q(static_cast<std::size_t>(k), 0.0);
  for (const auto& sid : snap.deterministic) q.at(static_cast<std::size_t>(sid.codes.at(static_cast<std::size_t>(level - 1)) - 1)) += 1.0;
  for (double& x : q) x /= static_cast<double>(snap.deterministic.size());
  return q;
}

double effective_codes(const std::vector<double>& q) {
  double h = 0.0;
  for (double p : q) {
    if (p < 0.0) throw std::invalid_argument("effective_codes: negative probability");
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::exp(h);
}

double incremental_drift(const AssignmentSnapshot& prev, const AssignmentSnapshot& cur) {
  check_catalogs(prev, cur, "incremental_drift");
  int changed = 0;
  for (std::size_t v = 0; v < cur.deterministic.size(); ++v)
    if (!cur.deterministic[v].codes_equal(prev.deterministic[v])) ++changed;
  return static_cast<double>(changed) / static_cast<double>(cur.deterministic.size());
}

double cumulative_drift(const AssignmentSnapshot& init, const AssignmentSnapshot& cur) {
  check_catalogs(init, cur, "cumulative_drift");
  return incremental_drift(init, cur);
}

double train_inference_agreement(const AssignmentSnapshot& snap) {
  if (snap.deterministic.empty()) throw std::invalid_argument("train_inference_agreement: empty snapshot");
  if (snap.sampled.size() != snap.deterministic.size())
    throw std::invalid_argument("train_inference_agreement: missing sampled assignment record");
  int agree = 0;
  for (std::size_t v = 0; v < snap.deterministic.size(); ++v)
    if (snap.sampled[v].codes_equal(snap.deterministic[v])) ++agree;
  return static_cast<double>(agree) / static_cast<double>(snap.deterministic.size());
}

MismatchResult mismatch_demo_analytic(double m_scale) {
  if (!(m_scale > 0.0)) throw std::invalid_argument("mismatch_demo: scale must be positive");
  MismatchResult r;
  r.two_stage = m_scale;  // freeze phi at the auxiliary optimum 1, best theta is 0
  r.joint = 0.0;
  r.gap = r.two_stage - r.joint;
  return r;
}

MismatchResult mismatch_demo_descent(double m_scale) {
  if (!(m_scale > 0.0)) throw std::invalid_argument("mismatch_demo: scale must be positive");
  const auto minimize = [](const std::vector<Tensor>& free_params, const auto& loss_fn, double lr, int iters) {
    double last = 0.0;
    for (int it = 0; it < iters; ++it) {
      Tape t;
      Tensor loss = loss_fn(t);
      for (const auto& p : free_params) p.zero_grad();
      t.backward(loss);
      for (const auto& p : free_params)
        for (std::size_t i = 0; i < p.numel(); ++i) p.values()[i] -= lr * p.grad()[i];
      last = loss.value();
    }
    return last;
  };

  // Stage one: fit phi to the auxiliary objective alone.
  Tensor phi = Tensor::scalar(-0.3);
  minimize({phi}, [&](Tape& t) {
    Tensor diff = sub(t, phi, Tensor::scalar(1.0));
    return mul(t, diff, diff);
  }, 0.25, 200);

  const auto rec_loss = [&](Tape& t, const Tensor& ph, const Tensor& th) {
    return scale(t, add(t, mul(t, ph, ph), mul(t, th, th)), m_scale);
  };

  // Stage two: theta alone, phi frozen at the stage-one optimum.
  Tensor theta = Tensor::scalar(0.8);
  MismatchResult r;
  Tensor phi_frozen = Tensor::scalar(phi.value());
  r.two_stage = minimize({theta}, [&](Tape& t) { return rec_loss(t, phi_frozen, theta); }, 0.25 / m_scale, 400);

  // Joint route: both parameters free.
  Tensor phi_j = Tensor::scalar(-0.3);
  Tensor theta_j = Tensor::scalar(0.8);
  r.joint = minimize({phi_j, theta_j}, [&](Tape& t) { return rec_loss(t, phi_j, theta_j); }, 0.25 / m_scale, 400);

  r.gap = r.two_stage - r.joint;
  return r;
}

}  // namespace diger
