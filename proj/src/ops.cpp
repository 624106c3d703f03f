#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "diger/tape.hpp"

namespace diger {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapCM = Eigen::Map<const MatRM>;
using MapV = Eigen::Map<Eigen::VectorXd>;
using MapCV = Eigen::Map<const Eigen::VectorXd>;

[[noreturn]] void bad_shapes(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                              shape_str(b.shape()));
}

[[noreturn]] void bad_shape(const char* op, const Tensor& a, const char* what) {
  throw std::invalid_argument(std::string(op) + ": " + what + ", got shape " + shape_str(a.shape()));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) bad_shapes(op, a, b);
}

// Rows/cols view of a tensor treated as a matrix: 1-D tensors act as a single
// row so the softmax/norm family can share one code path.
std::pair<int, int> as_rows_cols(const Tensor& x, const char* op) {
  if (x.ndim() == 1) return {1, x.shape()[0]};
  if (x.ndim() == 2) return {x.shape()[0], x.shape()[1]};
  bad_shape(op, x, "expected 1-D or 2-D input");
}

}  // namespace

void Tape::push(const Tensor& output, std::function<void()> backward_step) {
  if (recording_) steps_.push_back({output, std::move(backward_step)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  for (const auto& s : steps_) s.output.zero_grad();
  loss.grad()[0] += 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) it->fn();
}

Tensor matmul(Tape& t, const Tensor& a, const Tensor& b) {
  if (a.ndim() == 2 && b.ndim() == 2) {
    if (a.cols() != b.rows()) bad_shapes("matmul", a, b);
    const int n = a.rows(), k = a.cols(), m = b.cols();
    Tensor out = Tensor::zeros({n, m});
    MapM(out.values().data(), n, m).noalias() =
        MapCM(a.values().data(), n, k) * MapCM(b.values().data(), k, m);
    t.push(out, [a, b, out, n, k, m] {
      MapM(a.grad().data(), n, k).noalias() +=
          MapCM(out.grad().data(), n, m) * MapCM(b.values().data(), k, m).transpose();
      MapM(b.grad().data(), k, m).noalias() +=
          MapCM(a.values().data(), n, k).transpose() * MapCM(out.grad().data(), n, m);
    });
    return out;
  }
  if (a.ndim() == 2 && b.ndim() == 1) {
    if (a.cols() != b.shape()[0]) bad_shapes("matmul", a, b);
    const int n = a.rows(), k = a.cols();
    Tensor out = Tensor::zeros({n});
    MapV(out.values().data(), n).noalias() = MapCM(a.values().data(), n, k) * MapCV(b.values().data(), k);
    t.push(out, [a, b, out, n, k] {
      MapM(a.grad().data(), n, k).noalias() +=
          MapCV(out.grad().data(), n) * MapCV(b.values().data(), k).transpose();
      MapV(b.grad().data(), k).noalias() +=
          MapCM(a.values().data(), n, k).transpose() * MapCV(out.grad().data(), n);
    });
    return out;
  }
  if (a.ndim() == 1 && b.ndim() == 2) {
    if (a.shape()[0] != b.rows()) bad_shapes("matmul", a, b);
    const int k = b.rows(), m = b.cols();
    Tensor out = Tensor::zeros({m});
    MapV(out.values().data(), m).noalias() =
        MapCM(b.values().data(), k, m).transpose() * MapCV(a.values().data(), k);
    t.push(out, [a, b, out, k, m] {
      MapV(a.grad().data(), k).noalias() += MapCM(b.values().data(), k, m) * MapCV(out.grad().data(), m);
      MapM(b.grad().data(), k, m).noalias() +=
          MapCV(a.values().data(), k) * MapCV(out.grad().data(), m).transpose();
    });
    return out;
  }
  bad_shapes("matmul", a, b);
}

Tensor matmul_nt(Tape& t, const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols()) bad_shapes("matmul_nt", a, b);
  const int n = a.rows(), d = a.cols(), m = b.rows();
  Tensor out = Tensor::zeros({n, m});
  MapM(out.values().data(), n, m).noalias() =
      MapCM(a.values().data(), n, d) * MapCM(b.values().data(), m, d).transpose();
  t.push(out, [a, b, out, n, d, m] {
    MapM(a.grad().data(), n, d).noalias() += MapCM(out.grad().data(), n, m) * MapCM(b.values().data(), m, d);
    MapM(b.grad().data(), m, d).noalias() +=
        MapCM(out.grad().data(), n, m).transpose() * MapCM(a.values().data(), n, d);
  });
  return out;
}

Tensor add(Tape& t, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) {
    Tensor out = Tensor::from(a.shape(), a.values());
    auto& o = out.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += bv[i];
    t.push(out, [a, b, out] {
      const auto& g = out.grad();
      auto& ga = a.grad();
      auto& gb = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i];
        gb[i] += g[i];
      }
    });
    return out;
  }
  if (a.ndim() == 2 && b.ndim() == 1 && a.cols() == b.shape()[0]) {  // bias over last axis
    const int n = a.rows(), m = a.cols();
    Tensor out = Tensor::from(a.shape(), a.values());
    auto& o = out.values();
    const auto& bv = b.values();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) o[static_cast<std::size_t>(i) * m + j] += bv[j];
    t.push(out, [a, b, out, n, m] {
      const auto& g = out.grad();
      auto& ga = a.grad();
      auto& gb = b.grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
          ga[static_cast<std::size_t>(i) * m + j] += g[static_cast<std::size_t>(i) * m + j];
          gb[j] += g[static_cast<std::size_t>(i) * m + j];
        }
    });
    return out;
  }
  bad_shapes("add", a, b);
}

Tensor sub(Tape& t, const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Tensor out = Tensor::from(a.shape(), a.values());
  auto& o = out.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] -= bv[i];
  t.push(out, [a, b, out] {
    const auto& g = out.grad();
    auto& ga = a.grad();
    auto& gb = b.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] -= g[i];
    }
  });
  return out;
}

Tensor mul(Tape& t, const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out = Tensor::zeros(a.shape());
  auto& o = out.values();
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  t.push(out, [a, b, out] {
    const auto& g = out.grad();
    auto& ga = a.grad();
    auto& gb = b.grad();
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i] * bv[i];
      gb[i] += g[i] * av[i];
    }
  });
  return out;
}

Tensor scale(Tape& t, const Tensor& a, double s) {
  Tensor out = Tensor::zeros(a.shape());
  auto& o = out.values();
  const auto& av = a.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * s;
  t.push(out, [a, out, s] {
    const auto& g = out.grad();
    auto& ga = a.grad();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
  return out;
}

Tensor sum(Tape& t, const Tensor& a) {
  double acc = 0.0;
  for (double x : a.values()) acc += x;
  Tensor out = Tensor::scalar(acc);
  t.push(out, [a, out] {
    const double g = out.grad()[0];
    auto& ga = a.grad();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
  return out;
}

namespace {

// Shared stable softmax kernel over one row (live entries only).
void softmax_row(const double* x, double* y, int n, const uint8_t* live) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i)
    if (!live || live[i]) mx = std::max(mx, x[i]);
  double z = 0.0;
  for (int i = 0; i < n; ++i) {
    if (!live || live[i]) {
      y[i] = std::exp(x[i] - mx);
      z += y[i];
    } else {
      y[i] = 0.0;
    }
  }
  for (int i = 0; i < n; ++i) y[i] /= z;
}

Tensor softmax_impl(Tape& t, const Tensor& a, const std::vector<uint8_t>* mask, const char* op) {
  auto [n, m] = as_rows_cols(a, op);
  if (mask && mask->size() != a.numel())
    throw std::invalid_argument(std::string(op) + ": mask size " + std::to_string(mask->size()) +
                                " does not match tensor shape " + shape_str(a.shape()));
  Tensor out = Tensor::zeros(a.shape());
  const auto& xv = a.values();
  auto& yv = out.values();
  for (int i = 0; i < n; ++i) {
    const uint8_t* live = mask ? mask->data() + static_cast<std::size_t>(i) * m : nullptr;
    if (live && std::all_of(live, live + m, [](uint8_t b) { return b == 0; }))
      throw std::invalid_argument(std::string(op) + ": fully masked row " + std::to_string(i));
    softmax_row(xv.data() + static_cast<std::size_t>(i) * m, yv.data() + static_cast<std::size_t>(i) * m, m, live);
  }
  t.push(out, [a, out, n = n, m = m] {
    const auto& y = out.values();
    const auto& g = out.grad();
    auto& ga = a.grad();
    for (int i = 0; i < n; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * m;
      double dot = 0.0;
      for (int j = 0; j < m; ++j) dot += g[off + j] * y[off + j];
      for (int j = 0; j < m; ++j) ga[off + j] += y[off + j] * (g[off + j] - dot);
    }
  });
  return out;
}

}  // namespace

Tensor softmax(Tape& t, const Tensor& a) { return softmax_impl(t, a, nullptr, "softmax"); }

Tensor masked_softmax(Tape& t, const Tensor& a, const std::vector<uint8_t>& mask) {
  return softmax_impl(t, a, &mask, "masked_softmax");
}

Tensor log_softmax(Tape& t, const Tensor& a) {
  auto [n, m] = as_rows_cols(a, "log_softmax");
  Tensor out = Tensor::zeros(a.shape());
  const auto& xv = a.values();
  auto& yv = out.values();
  for (int i = 0; i < n; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * m;
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < m; ++j) mx = std::max(mx, xv[off + j]);
    double z = 0.0;
    for (int j = 0; j < m; ++j) z += std::exp(xv[off + j] - mx);
    const double lse = mx + std::log(z);
    for (int j = 0; j < m; ++j) yv[off + j] = xv[off + j] - lse;
  }
  t.push(out, [a, out, n = n, m = m] {
    const auto& y = out.values();
    const auto& g = out.grad();
    auto& ga = a.grad();
    for (int i = 0; i < n; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * m;
      double gsum = 0.0;
      for (int j = 0; j < m; ++j) gsum += g[off + j];
      for (int j = 0; j < m; ++j) ga[off + j] += g[off + j] - std::exp(y[off + j]) * gsum;
    }
  });
  return out;
}

Tensor gather_rows(Tape& t, const Tensor& m, const std::vector<int>& idx) {
  if (m.ndim() != 2) bad_shape("gather_rows", m, "expected 2-D table");
  const int rows = m.rows(), d = m.cols();
  for (int i : idx)
    if (i < 0 || i >= rows)
      throw std::invalid_argument("gather_rows: index " + std::to_string(i) + " out of range for " +
                                  shape_str(m.shape()));
  Tensor out = Tensor::zeros({static_cast<int>(idx.size()), d});
  const auto& mv = m.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(mv.data() + static_cast<std::size_t>(idx[i]) * d, d, ov.data() + i * d);
  t.push(out, [m, out, idx, d] {
    const auto& g = out.grad();
    auto& gm = m.grad();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (int j = 0; j < d; ++j) gm[static_cast<std::size_t>(idx[i]) * d + j] += g[i * d + j];
  });
  return out;
}

Tensor row(Tape& t, const Tensor& m, int i) {
  if (m.ndim() != 2) bad_shape("row", m, "expected 2-D table");
  const int rows = m.rows(), d = m.cols();
  if (i < 0 || i >= rows) throw std::invalid_argument("row: index " + std::to_string(i) + " out of range");
  Tensor out = Tensor::zeros({d});
  std::copy_n(m.values().data() + static_cast<std::size_t>(i) * d, d, out.values().data());
  t.push(out, [m, out, i, d] {
    const auto& g = out.grad();
    auto& gm = m.grad();
    for (int j = 0; j < d; ++j) gm[static_cast<std::size_t>(i) * d + j] += g[j];
  });
  return out;
}

Tensor slice_cols(Tape& t, const Tensor& m, int c0, int len) {
  if (m.ndim() != 2) bad_shape("slice_cols", m, "expected 2-D input");
  const int n = m.rows(), d = m.cols();
  if (c0 < 0 || len <= 0 || c0 + len > d)
    throw std::invalid_argument("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c0 + len) +
                                ") out of " + shape_str(m.shape()));
  Tensor out = Tensor::zeros({n, len});
  const auto& mv = m.values();
  auto& ov = out.values();
  for (int i = 0; i < n; ++i)
    std::copy_n(mv.data() + static_cast<std::size_t>(i) * d + c0, len, ov.data() + static_cast<std::size_t>(i) * len);
  t.push(out, [m, out, n, d, c0, len] {
    const auto& g = out.grad();
    auto& gm = m.grad();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < len; ++j)
        gm[static_cast<std::size_t>(i) * d + c0 + j] += g[static_cast<std::size_t>(i) * len + j];
  });
  return out;
}

Tensor concat_cols(Tape& t, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty input list");
  const int n = parts[0].rows();
  int total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.rows() != n) bad_shape("concat_cols", p, "row-count mismatch");
    total += p.cols();
  }
  Tensor out = Tensor::zeros({n, total});
  auto& ov = out.values();
  int c0 = 0;
  for (const auto& p : parts) {
    const int len = p.cols();
    for (int i = 0; i < n; ++i)
      std::copy_n(p.values().data() + static_cast<std::size_t>(i) * len, len,
                  ov.data() + static_cast<std::size_t>(i) * total + c0);
    c0 += len;
  }
  t.push(out, [parts, out, n, total] {
    const auto& g = out.grad();
    int c0 = 0;
    for (const auto& p : parts) {
      const int len = p.cols();
      auto& gp = p.grad();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < len; ++j)
          gp[static_cast<std::size_t>(i) * len + j] += g[static_cast<std::size_t>(i) * total + c0 + j];
      c0 += len;
    }
  });
  return out;
}

Tensor stack_rows(Tape& t, const std::vector<Tensor>& vecs) {
  if (vecs.empty()) throw std::invalid_argument("stack_rows: empty input list");
  const int d = vecs[0].ndim() == 1 ? vecs[0].shape()[0] : -1;
  for (const auto& v : vecs)
    if (v.ndim() != 1 || v.shape()[0] != d) bad_shape("stack_rows", v, "expected matching 1-D inputs");
  Tensor out = Tensor::zeros({static_cast<int>(vecs.size()), d});
  auto& ov = out.values();
  for (std::size_t i = 0; i < vecs.size(); ++i) std::copy_n(vecs[i].values().data(), d, ov.data() + i * d);
  t.push(out, [vecs, out, d] {
    const auto& g = out.grad();
    for (std::size_t i = 0; i < vecs.size(); ++i) {
      auto& gv = vecs[i].grad();
      for (int j = 0; j < d; ++j) gv[j] += g[i * d + j];
    }
  });
  return out;
}

Tensor concat(Tape& t, const std::vector<Tensor>& vecs) {
  if (vecs.empty()) throw std::invalid_argument("concat: empty input list");
  int total = 0;
  for (const auto& v : vecs) {
    if (v.ndim() != 1) bad_shape("concat", v, "expected 1-D inputs");
    total += v.shape()[0];
  }
  Tensor out = Tensor::zeros({total});
  auto& ov = out.values();
  int off = 0;
  for (const auto& v : vecs) {
    std::copy_n(v.values().data(), v.shape()[0], ov.data() + off);
    off += v.shape()[0];
  }
  t.push(out, [vecs, out] {
    const auto& g = out.grad();
    int off = 0;
    for (const auto& v : vecs) {
      auto& gv = v.grad();
      for (int j = 0; j < v.shape()[0]; ++j) gv[j] += g[off + j];
      off += v.shape()[0];
    }
  });
  return out;
}

Tensor layer_norm(Tape& t, const Tensor& x, const Tensor& gain, const Tensor& bias) {
  auto [n, m] = as_rows_cols(x, "layer_norm");
  if (gain.ndim() != 1 || gain.shape()[0] != m) bad_shapes("layer_norm", x, gain);
  if (bias.ndim() != 1 || bias.shape()[0] != m) bad_shapes("layer_norm", x, bias);
  constexpr double kEps = 1e-5;
  Tensor out = Tensor::zeros(x.shape());
  // Cache per-row mean and inverse std for the backward rule.
  auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * 2);
  const auto& xv = x.values();
  auto& yv = out.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  for (int i = 0; i < n; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * m;
    double mean = 0.0;
    for (int j = 0; j < m; ++j) mean += xv[off + j];
    mean /= m;
    double var = 0.0;
    for (int j = 0; j < m; ++j) var += (xv[off + j] - mean) * (xv[off + j] - mean);
    var /= m;
    const double inv_std = 1.0 / std::sqrt(var + kEps);
    (*stats)[2 * i] = mean;
    (*stats)[2 * i + 1] = inv_std;
    for (int j = 0; j < m; ++j) yv[off + j] = (xv[off + j] - mean) * inv_std * gv[j] + bv[j];
  }
  t.push(out, [x, gain, bias, out, stats, n = n, m = m] {
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& g = out.grad();
    auto& gx = x.grad();
    auto& ggain = gain.grad();
    auto& gbias = bias.grad();
    for (int i = 0; i < n; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * m;
      const double mean = (*stats)[2 * i], inv_std = (*stats)[2 * i + 1];
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (int j = 0; j < m; ++j) {
        const double xhat = (xv[off + j] - mean) * inv_std;
        const double dxhat = g[off + j] * gv[j];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        ggain[j] += g[off + j] * xhat;
        gbias[j] += g[off + j];
      }
      for (int j = 0; j < m; ++j) {
        const double xhat = (xv[off + j] - mean) * inv_std;
        const double dxhat = g[off + j] * gv[j];
        gx[off + j] += inv_std * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m);
      }
    }
  });
  return out;
}

Tensor relu(Tape& t, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  t.push(out, [x, out] {
    const auto& xv = x.values();
    const auto& g = out.grad();
    auto& gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) gx[i] += g[i];
  });
  return out;
}

Tensor gelu(Tape& t, const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440084436210485;
  constexpr double kInvSqrt2Pi = 0.39894228040143267793994605993438;
  Tensor out = Tensor::zeros(x.shape());
  const auto& xv = x.values();
  auto& ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * 0.5 * (1.0 + std::erf(xv[i] * kInvSqrt2));
  t.push(out, [x, out] {
    const auto& xv = x.values();
    const auto& g = out.grad();
    auto& gx = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double cdf = 0.5 * (1.0 + std::erf(xv[i] * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * xv[i] * xv[i]);
      gx[i] += g[i] * (cdf + xv[i] * pdf);
    }
  });
  return out;
}

Tensor squared_error_sum(Tape& t, const Tensor& a, const Tensor& b) {
  require_same_shape("squared_error_sum", a, b);
  double acc = 0.0;
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = av[i] - bv[i];
    acc += d * d;
  }
  Tensor out = Tensor::scalar(acc);
  t.push(out, [a, b, out] {
    const double g = out.grad()[0];
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ga = a.grad();
    auto& gb = b.grad();
    for (std::size_t i = 0; i < av.size(); ++i) {
      const double d = 2.0 * (av[i] - bv[i]) * g;
      ga[i] += d;
      gb[i] -= d;
    }
  });
  return out;
}

namespace {
// Row-wise logsumexp with max subtraction; fills softmax into `probs`.
double row_lse(const double* x, int m, double* probs) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < m; ++j) mx = std::max(mx, x[j]);
  double z = 0.0;
  for (int j = 0; j < m; ++j) z += std::exp(x[j] - mx);
  for (int j = 0; j < m; ++j) probs[j] = std::exp(x[j] - mx) / z;
  return mx + std::log(z);
}
}  // namespace

Tensor cross_entropy_indices(Tape& t, const Tensor& logits, const std::vector<int>& targets) {
  auto [n, m] = as_rows_cols(logits, "cross_entropy_indices");
  if (static_cast<int>(targets.size()) != n)
    throw std::invalid_argument("cross_entropy_indices: " + std::to_string(targets.size()) + " targets for " +
                                std::to_string(n) + " rows");
  for (int tgt : targets)
    if (tgt < 0 || tgt >= m)
      throw std::invalid_argument("cross_entropy_indices: target " + std::to_string(tgt) + " outside vocab of " +
                                  std::to_string(m));
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  const auto& xv = logits.values();
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * m;
    const double lse = row_lse(xv.data() + off, m, probs->data() + off);
    loss += lse - xv[off + targets[i]];
  }
  Tensor out = Tensor::scalar(loss);
  t.push(out, [logits, out, targets, probs, n = n, m = m] {
    const double g = out.grad()[0];
    auto& gx = logits.grad();
    for (int i = 0; i < n; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * m;
      for (int j = 0; j < m; ++j) gx[off + j] += g * (*probs)[off + j];
      gx[off + targets[i]] -= g;
    }
  });
  return out;
}

Tensor cross_entropy_soft(Tape& t, const Tensor& logits, const Tensor& soft_targets) {
  require_same_shape("cross_entropy_soft", logits, soft_targets);
  auto [n, m] = as_rows_cols(logits, "cross_entropy_soft");
  auto probs = std::make_shared<std::vector<double>>(logits.numel());
  auto logp = std::make_shared<std::vector<double>>(logits.numel());
  const auto& xv = logits.values();
  const auto& tv = soft_targets.values();
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const std::size_t off = static_cast<std::size_t>(i) * m;
    const double lse = row_lse(xv.data() + off, m, probs->data() + off);
    for (int j = 0; j < m; ++j) {
      (*logp)[off + j] = xv[off + j] - lse;
      loss -= tv[off + j] * (*logp)[off + j];
    }
  }
  Tensor out = Tensor::scalar(loss);
  t.push(out, [logits, soft_targets, out, probs, logp, n = n, m = m] {
    const double g = out.grad()[0];
    const auto& tv = soft_targets.values();
    auto& gx = logits.grad();
    auto& gt = soft_targets.grad();
    for (int i = 0; i < n; ++i) {
      const std::size_t off = static_cast<std::size_t>(i) * m;
      double trow = 0.0;
      for (int j = 0; j < m; ++j) trow += tv[off + j];
      for (int j = 0; j < m; ++j) {
        gx[off + j] += g * ((*probs)[off + j] * trow - tv[off + j]);
        gt[off + j] -= g * (*logp)[off + j];
      }
    }
  });
  return out;
}

Tensor stop_gradient(Tape& t, const Tensor& x) {
  (void)t;
  return Tensor::from(x.shape(), x.values());
}

Tensor straight_through(Tape& t, const Tensor& hard, const Tensor& soft) {
  require_same_shape("straight_through", hard, soft);
  Tensor out = Tensor::from(hard.shape(), hard.values());
  t.push(out, [soft, out] {
    const auto& g = out.grad();
    auto& gs = soft.grad();
    for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
  });
  return out;
}

Tensor neg_sqdist(Tape& t, const Tensor& r, const Tensor& entries) {
  if (r.ndim() != 1 || entries.ndim() != 2 || entries.cols() != r.shape()[0]) bad_shapes("neg_sqdist", r, entries);
  const int K = entries.rows(), d = entries.cols();
  Tensor out = Tensor::zeros({K});
  const auto& rv = r.values();
  const auto& ev = entries.values();
  auto& ov = out.values();
  for (int i = 0; i < K; ++i) {
    double acc = 0.0;
    for (int j = 0; j < d; ++j) {
      const double diff = rv[j] - ev[static_cast<std::size_t>(i) * d + j];
      acc += diff * diff;
    }
    ov[i] = -acc;
  }
  t.push(out, [r, entries, out, K, d] {
    const auto& rv = r.values();
    const auto& ev = entries.values();
    const auto& g = out.grad();
    auto& gr = r.grad();
    auto& ge = entries.grad();
    for (int i = 0; i < K; ++i) {
      const double gi = g[i];
      if (gi == 0.0) continue;
      for (int j = 0; j < d; ++j) {
        const double diff = rv[j] - ev[static_cast<std::size_t>(i) * d + j];
        gr[j] -= 2.0 * gi * diff;
        ge[static_cast<std::size_t>(i) * d + j] += 2.0 * gi * diff;
      }
    }
  });
  return out;
}

}  // namespace diger
