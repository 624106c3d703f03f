#pragma once

#include <vector>

#include "diger/tokenizer.hpp"

namespace diger {

// Per-epoch record of every catalog item's deterministic (inference-time)
// assignment and the assignment last sampled during training.
struct AssignmentSnapshot {
  int epoch = 0;
  std::vector<SemanticId> deterministic;
  std::vector<SemanticId> sampled;
};

// Leave-one-out ranking metrics: one ground-truth target per ranked list.
int recall_at_k(const std::vector<int>& ranked, int target, int k);
double ndcg_at_k(const std::vector<int>& ranked, int target, int k);

// Fraction of level codes used by at least one item; level is 1-based.
double code_coverage(const AssignmentSnapshot& snap, int level, int k);

struct CoverageStats {
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<double> per_level;
};
CoverageStats coverage_stats(const AssignmentSnapshot& snap, int levels, int k);

// Empirical code-usage distribution over one level's deterministic codes.
std::vector<double> usage_distribution(const AssignmentSnapshot& snap, int level, int k);

// exp(H(q)) with 0*log(0) = 0; at most K, equal to K only for uniform q.
double effective_codes(const std::vector<double>& q);

// Fraction of items whose codes (conflict excluded) changed between snapshots.
double incremental_drift(const AssignmentSnapshot& prev, const AssignmentSnapshot& cur);
double cumulative_drift(const AssignmentSnapshot& init, const AssignmentSnapshot& cur);

// Fraction of items whose last-sampled codes equal the deterministic codes.
double train_inference_agreement(const AssignmentSnapshot& snap);

// Two-stage vs joint minimization of a pair of quadratic objectives whose
// minimizers disagree: the auxiliary loss (phi-1)^2 picks phi=1, while the
// target loss M(phi^2+theta^2) has its joint optimum at 0 with value 0, so
// freezing phi after stage one leaves a gap of exactly M.
struct MismatchResult {
  double two_stage = 0.0;
  double joint = 0.0;
  double gap = 0.0;
};
MismatchResult mismatch_demo_analytic(double m_scale);
MismatchResult mismatch_demo_descent(double m_scale);

}  // namespace diger
