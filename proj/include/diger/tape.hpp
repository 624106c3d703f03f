#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "diger/tensor.hpp"

namespace diger {

// Define-by-run tape. Forward ops append their backward rule as they execute,
// so the recorded order is already topological; backward() replays it in
// reverse. A tape is built per training step and discarded afterwards.
// Construct with recording=false for evaluation-only forward passes.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  void push(const Tensor& output, std::function<void()> backward_step);
  std::size_t size() const { return steps_.size(); }
  void clear() { steps_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays all recorded rules in reverse.
  // Grads of tensors produced on this tape are reset first, so leaf gradients
  // accumulate one full contribution per call.
  void backward(const Tensor& loss);

 private:
  struct Step {
    Tensor output;
    std::function<void()> fn;
  };
  std::vector<Step> steps_;
  bool recording_ = true;
};

// ---- primitive forward ops -------------------------------------------------
// All ops validate shapes and throw std::invalid_argument naming the op and
// the offending shapes. Every op records its backward rule on the tape.

Tensor matmul(Tape& t, const Tensor& a, const Tensor& b);     // [n,k]x[k,m]; also [n,k]x[k] and [k]x[k,m]
Tensor matmul_nt(Tape& t, const Tensor& a, const Tensor& b);  // [n,d]x[m,d]^T -> [n,m]
Tensor add(Tape& t, const Tensor& a, const Tensor& b);        // same shape, or [n,m]+[m] bias over last axis
Tensor sub(Tape& t, const Tensor& a, const Tensor& b);
Tensor mul(Tape& t, const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(Tape& t, const Tensor& a, double s);
Tensor sum(Tape& t, const Tensor& a);      // -> scalar
Tensor softmax(Tape& t, const Tensor& a);  // over last axis
Tensor log_softmax(Tape& t, const Tensor& a);
// Softmax over the last axis restricted to mask!=0 entries; masked entries get
// probability 0. Every row must keep at least one live entry.
Tensor masked_softmax(Tape& t, const Tensor& a, const std::vector<uint8_t>& mask);
Tensor gather_rows(Tape& t, const Tensor& m, const std::vector<int>& idx);  // embedding lookup
Tensor row(Tape& t, const Tensor& m, int i);                                // [d] view copy of one row
Tensor slice_cols(Tape& t, const Tensor& m, int c0, int len);
Tensor concat_cols(Tape& t, const std::vector<Tensor>& parts);
Tensor stack_rows(Tape& t, const std::vector<Tensor>& vecs);  // n vectors [d] -> [n,d]
Tensor concat(Tape& t, const std::vector<Tensor>& vecs);      // 1-D concatenation
Tensor layer_norm(Tape& t, const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor relu(Tape& t, const Tensor& x);
Tensor gelu(Tape& t, const Tensor& x);
Tensor squared_error_sum(Tape& t, const Tensor& a, const Tensor& b);  // sum((a-b)^2) -> scalar
Tensor cross_entropy_indices(Tape& t, const Tensor& logits, const std::vector<int>& targets);  // sum NLL
Tensor cross_entropy_soft(Tape& t, const Tensor& logits, const Tensor& soft_targets);          // sum NLL
Tensor stop_gradient(Tape& t, const Tensor& x);
// Forward value is a bitwise copy of `hard`; the full gradient flows to
// `soft` and none to `hard`.
Tensor straight_through(Tape& t, const Tensor& hard, const Tensor& soft);
Tensor neg_sqdist(Tape& t, const Tensor& r, const Tensor& entries);  // [d],[K,d] -> [K], l_i = -|r-e_i|^2

}  // namespace diger
