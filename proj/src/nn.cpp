#include "songgen/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "songgen/error.hpp"

namespace songgen::nn {

// --- parameters ------------------------------------------------------------------

Parameter& ParameterStore::create(const std::string& name, int rows, int cols, double stddev, Rng& rng) {
  if (find(name)) throw InvalidInput("duplicate parameter " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value.resize(rows, cols);
  for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = stddev * standard_normal(rng);
  p->grad = Mat::Zero(rows, cols);
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter& ParameterStore::create_constant(const std::string& name, int rows, int cols, double value) {
  if (find(name)) throw InvalidInput("duplicate parameter " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = Mat::Constant(rows, cols, value);
  p->grad = Mat::Zero(rows, cols);
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter* ParameterStore::find(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->grad.setZero();
}

double ParameterStore::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_) s += p->grad.squaredNorm();
  return std::sqrt(s);
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

// --- graph ---------------------------------------------------------------------------

Var Graph::push(Mat value, bool needs_grad, Backward fn) {
  nodes_.push_back(Node{std::move(value), Mat{}, std::move(fn), needs_grad});
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::constant(Mat value) { return push(std::move(value), false, {}); }

Var Graph::param(Parameter& p) {
  if (!requires_grad_) return push(p.value, false, {});
  Parameter* ptr = &p;
  return push(p.value, true, [ptr](Graph& g, int self) { ptr->grad += g.grad(self); });
}

void Graph::backward(Var loss, double scale) {
  if (loss.graph != this) throw InvalidInput("loss belongs to another graph");
  if (loss.rows() != 1 || loss.cols() != 1) throw InvalidInput("backward() needs a scalar loss");
  if (!needs_grad(loss.id)) return;
  accumulate(loss.id, Mat::Constant(1, 1, scale));
  for (int i = loss.id; i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.needs_grad || !n.backward || n.grad.size() == 0) continue;
    n.backward(*this, i);
  }
}

// --- ops -----------------------------------------------------------------------------

namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InvalidInput(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                       std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw InvalidInput("matmul: inner dimension mismatch");
  Graph& g = *a.graph;
  Mat out = a.value() * b.value();
  return g.emit(std::move(out), {a, b}, [a, b](Graph& gr, int self) {
    const Mat& d = gr.grad(self);
    if (gr.needs_grad(a.id)) gr.accumulate(a.id, d * gr.value(b.id).transpose());
    if (gr.needs_grad(b.id)) gr.accumulate(b.id, gr.value(a.id).transpose() * d);
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Mat out = a.value() + b.value();
  return a.graph->emit(std::move(out), {a, b}, [a, b](Graph& g, int self) {
    g.accumulate(a.id, g.grad(self));
    g.accumulate(b.id, g.grad(self));
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a, b, "sub");
  Mat out = a.value() - b.value();
  return a.graph->emit(std::move(out), {a, b}, [a, b](Graph& g, int self) {
    g.accumulate(a.id, g.grad(self));
    g.accumulate(b.id, -g.grad(self));
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a, b, "mul");
  Mat out = a.value().cwiseProduct(b.value());
  return a.graph->emit(std::move(out), {a, b}, [a, b](Graph& g, int self) {
    const Mat& d = g.grad(self);
    if (g.needs_grad(a.id)) g.accumulate(a.id, d.cwiseProduct(g.value(b.id)));
    if (g.needs_grad(b.id)) g.accumulate(b.id, d.cwiseProduct(g.value(a.id)));
  });
}

Var scale(Var a, double s) {
  Mat out = a.value() * s;
  return a.graph->emit(std::move(out), {a}, [a, s](Graph& g, int self) { g.accumulate(a.id, g.grad(self) * s); });
}

Var add_row(Var x, Var row) {
  if (row.rows() != 1 || row.cols() != x.cols()) throw InvalidInput("add_row: row must be 1 x cols");
  Mat out = x.value();
  out.rowwise() += row.value().row(0);
  return x.graph->emit(std::move(out), {x, row}, [x, row](Graph& g, int self) {
    g.accumulate(x.id, g.grad(self));
    if (g.needs_grad(row.id)) g.accumulate(row.id, g.grad(self).colwise().sum());
  });
}

Var mul_row(Var x, Var row) {
  if (row.rows() != 1 || row.cols() != x.cols()) throw InvalidInput("mul_row: row must be 1 x cols");
  Mat out = x.value().array().rowwise() * row.value().row(0).array();
  return x.graph->emit(std::move(out), {x, row}, [x, row](Graph& g, int self) {
    const Mat& d = g.grad(self);
    if (g.needs_grad(x.id)) {
      Mat dx = d.array().rowwise() * g.value(row.id).row(0).array();
      g.accumulate(x.id, dx);
    }
    if (g.needs_grad(row.id)) g.accumulate(row.id, d.cwiseProduct(g.value(x.id)).colwise().sum());
  });
}

Mat gelu_plain(const Mat& x) {
  return x.unaryExpr([](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + 0.044715 * v * v * v))); });
}

Var gelu(Var a) {
  Mat out = gelu_plain(a.value());
  return a.graph->emit(std::move(out), {a}, [a](Graph& g, int self) {
    const Mat deriv = g.value(a.id).unaryExpr([](double v) {
      const double t = std::tanh(kGeluC * (v + 0.044715 * v * v * v));
      return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * v * v);
    });
    g.accumulate(a.id, g.grad(self).cwiseProduct(deriv));
  });
}

Var silu(Var a) {
  Mat out = a.value().unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); });
  return a.graph->emit(std::move(out), {a}, [a](Graph& g, int self) {
    const Mat deriv = g.value(a.id).unaryExpr([](double v) {
      const double s = 1.0 / (1.0 + std::exp(-v));
      return s * (1.0 + v * (1.0 - s));
    });
    g.accumulate(a.id, g.grad(self).cwiseProduct(deriv));
  });
}

Var relu(Var a) {
  Mat out = a.value().cwiseMax(0.0);
  return a.graph->emit(std::move(out), {a}, [a](Graph& g, int self) {
    const Mat mask = (g.value(a.id).array() > 0.0).cast<double>();
    g.accumulate(a.id, g.grad(self).cwiseProduct(mask));
  });
}

Var tanh(Var a) {
  Mat out = a.value().array().tanh();
  return a.graph->emit(std::move(out), {a}, [a](Graph& g, int self) {
    const Mat& y = g.value(self);
    g.accumulate(a.id, g.grad(self).cwiseProduct((1.0 - y.array().square()).matrix()));
  });
}

Var exp(Var a) {
  Mat out = a.value().array().exp();
  return a.graph->emit(std::move(out), {a}, [a](Graph& g, int self) {
    g.accumulate(a.id, g.grad(self).cwiseProduct(g.value(self)));
  });
}

Mat layer_norm_plain(const Mat& x, const Mat& gamma, const Mat& beta, double eps) {
  Mat out(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).sum() / n;
    const double var = (x.row(r).array() - mu).square().sum() / n;
    const double inv = 1.0 / std::sqrt(var + eps);
    out.row(r) = ((x.row(r).array() - mu) * inv) * gamma.row(0).array() + beta.row(0).array();
  }
  return out;
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Mat& xv = x.value();
  const Eigen::Index rows = xv.rows(), cols = xv.cols();
  if (gamma.cols() != cols || beta.cols() != cols) throw InvalidInput("layer_norm: gain/bias width mismatch");
  Mat xhat(rows, cols);
  Eigen::VectorXd inv_std(rows);
  const double n = static_cast<double>(cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mu = xv.row(r).sum() / n;
    const double var = (xv.row(r).array() - mu).square().sum() / n;
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  Mat out = xhat.array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return x.graph->emit(std::move(out), {x, gamma, beta},
                       [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Graph& g, int self) {
                         const Mat& d = g.grad(self);
                         if (g.needs_grad(gamma.id)) g.accumulate(gamma.id, d.cwiseProduct(xhat).colwise().sum());
                         if (g.needs_grad(beta.id)) g.accumulate(beta.id, d.colwise().sum());
                         if (!g.needs_grad(x.id)) return;
                         const Mat dxhat = d.array().rowwise() * g.value(gamma.id).row(0).array();
                         const double n = static_cast<double>(d.cols());
                         Mat dx(d.rows(), d.cols());
                         for (Eigen::Index r = 0; r < d.rows(); ++r) {
                           const double m1 = dxhat.row(r).sum() / n;
                           const double m2 = dxhat.row(r).dot(xhat.row(r)) / n;
                           dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                         }
                         g.accumulate(x.id, dx);
                       });
}

Var attention(Var q, Var k, Var v, int heads, bool causal, int block) {
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const Eigen::Index t = q.rows(), d = q.cols();
  if (heads < 1 || d % heads != 0) throw InvalidInput("attention: width not divisible by heads");
  const Eigen::Index bsz = block > 0 ? block : t;
  if (t % bsz != 0) throw InvalidInput("attention: rows not divisible by block");
  const Eigen::Index dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const Eigen::Index nblocks = t / bsz;

  const Mat& qv = q.value();
  const Mat& kv = k.value();
  const Mat& vv = v.value();
  Mat out(t, d);
  std::vector<Mat> probs(static_cast<std::size_t>(nblocks * heads));
  for (Eigen::Index b = 0; b < nblocks; ++b) {
    const Eigen::Index s = b * bsz;
    for (int h = 0; h < heads; ++h) {
      Mat scores = (qv.block(s, h * dh, bsz, dh) * kv.block(s, h * dh, bsz, dh).transpose()) * sc;
      for (Eigen::Index i = 0; i < bsz; ++i) {
        const Eigen::Index lim = causal ? i + 1 : bsz;
        const double mx = scores.row(i).head(lim).maxCoeff();
        double z = 0.0;
        for (Eigen::Index j = 0; j < bsz; ++j) {
          const double e = j < lim ? std::exp(scores(i, j) - mx) : 0.0;
          scores(i, j) = e;
          z += e;
        }
        scores.row(i) /= z;
      }
      out.block(s, h * dh, bsz, dh) = scores * vv.block(s, h * dh, bsz, dh);
      probs[static_cast<std::size_t>(b * heads + h)] = std::move(scores);
    }
  }
  return q.graph->emit(
      std::move(out), {q, k, v},
      [q, k, v, heads, bsz, nblocks, dh, sc, probs = std::move(probs)](Graph& g, int self) {
        const Mat& dout = g.grad(self);
        const Mat& qv = g.value(q.id);
        const Mat& kv = g.value(k.id);
        const Mat& vv = g.value(v.id);
        Mat dq = Mat::Zero(qv.rows(), qv.cols());
        Mat dk = Mat::Zero(qv.rows(), qv.cols());
        Mat dv = Mat::Zero(qv.rows(), qv.cols());
        for (Eigen::Index b = 0; b < nblocks; ++b) {
          const Eigen::Index s = b * bsz;
          for (int h = 0; h < heads; ++h) {
            const Mat& a = probs[static_cast<std::size_t>(b * heads + h)];
            const auto d_o = dout.block(s, h * dh, bsz, dh);
            dv.block(s, h * dh, bsz, dh) += a.transpose() * d_o;
            const Mat da = d_o * vv.block(s, h * dh, bsz, dh).transpose();
            Mat ds = a.cwiseProduct(da);
            const Eigen::VectorXd rowsum = ds.rowwise().sum();
            ds.array() -= a.array().colwise() * rowsum.array();
            ds *= sc;
            dq.block(s, h * dh, bsz, dh) += ds * kv.block(s, h * dh, bsz, dh);
            dk.block(s, h * dh, bsz, dh) += ds.transpose() * qv.block(s, h * dh, bsz, dh);
          }
        }
        g.accumulate(q.id, dq);
        g.accumulate(k.id, dk);
        g.accumulate(v.id, dv);
      });
}

Var gather_rows(Var table, std::span<const int> ids) {
  const Mat& tv = table.value();
  Mat out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows())
      throw InvalidInput("gather_rows: index " + std::to_string(ids[i]) + " outside table of " +
                         std::to_string(tv.rows()) + " rows");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return table.graph->emit(std::move(out), {table}, [table, idx = std::move(idx)](Graph& g, int self) {
    const Mat& d = g.grad(self);
    Mat dt = Mat::Zero(g.value(table.id).rows(), g.value(table.id).cols());
    for (std::size_t i = 0; i < idx.size(); ++i) dt.row(idx[i]) += d.row(static_cast<Eigen::Index>(i));
    g.accumulate(table.id, dt);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidInput("concat_cols: nothing to concatenate");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw InvalidInput("concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts[0].graph->emit(std::move(out), parts, [ps](Graph& g, int self) {
    const Mat& d = g.grad(self);
    Eigen::Index c0 = 0;
    for (const auto& p : ps) {
      const Eigen::Index w = g.value(p.id).cols();
      if (g.needs_grad(p.id)) g.accumulate(p.id, d.middleCols(c0, w));
      c0 += w;
    }
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw InvalidInput("concat_rows: nothing to concatenate");
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw InvalidInput("concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return parts[0].graph->emit(std::move(out), parts, [ps](Graph& g, int self) {
    const Mat& d = g.grad(self);
    Eigen::Index r0 = 0;
    for (const auto& p : ps) {
      const Eigen::Index h = g.value(p.id).rows();
      if (g.needs_grad(p.id)) g.accumulate(p.id, d.middleRows(r0, h));
      r0 += h;
    }
  });
}

Var slice_rows(Var x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > x.rows()) throw InvalidInput("slice_rows: out of range");
  Mat out = x.value().middleRows(start, count);
  return x.graph->emit(std::move(out), {x}, [x, start, count](Graph& g, int self) {
    Mat d = Mat::Zero(g.value(x.id).rows(), g.value(x.id).cols());
    d.middleRows(start, count) = g.grad(self);
    g.accumulate(x.id, d);
  });
}

Var slice_cols(Var x, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) throw InvalidInput("slice_cols: out of range");
  Mat out = x.value().middleCols(start, count);
  return x.graph->emit(std::move(out), {x}, [x, start, count](Graph& g, int self) {
    Mat d = Mat::Zero(g.value(x.id).rows(), g.value(x.id).cols());
    d.middleCols(start, count) = g.grad(self);
    g.accumulate(x.id, d);
  });
}

Var unfold1d(Var x, int kernel, int stride, int pad_left, int pad_right) {
  const Eigen::Index t = x.rows(), c = x.cols();
  const Eigen::Index padded = t + pad_left + pad_right;
  if (kernel < 1 || stride < 1 || padded < kernel) throw InvalidInput("unfold1d: bad geometry");
  const Eigen::Index t_out = (padded - kernel) / stride + 1;
  Mat out = Mat::Zero(t_out, kernel * c);
  const Mat& xv = x.value();
  for (Eigen::Index o = 0; o < t_out; ++o)
    for (int j = 0; j < kernel; ++j) {
      const Eigen::Index src = o * stride + j - pad_left;
      if (src >= 0 && src < t) out.block(o, j * c, 1, c) = xv.row(src);
    }
  return x.graph->emit(std::move(out), {x}, [x, kernel, stride, pad_left, t_out, t, c](Graph& g, int self) {
    const Mat& d = g.grad(self);
    Mat dx = Mat::Zero(t, c);
    for (Eigen::Index o = 0; o < t_out; ++o)
      for (int j = 0; j < kernel; ++j) {
        const Eigen::Index src = o * stride + j - pad_left;
        if (src >= 0 && src < t) dx.row(src) += d.block(o, j * c, 1, c);
      }
    g.accumulate(x.id, dx);
  });
}

Var sum_all(Var x) {
  Mat out = Mat::Constant(1, 1, x.value().sum());
  return x.graph->emit(std::move(out), {x}, [x](Graph& g, int self) {
    g.accumulate(x.id, Mat::Constant(g.value(x.id).rows(), g.value(x.id).cols(), g.grad(self)(0, 0)));
  });
}

Var mean_all(Var x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.value().size())); }

void softmax_inplace(std::span<double> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double& v : logits) {
    v = std::isinf(v) && v < 0 ? 0.0 : std::exp(v - mx);
    z += v;
  }
  for (double& v : logits) v /= z;
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  const Mat& lv = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != lv.rows()) throw InvalidInput("cross_entropy: target count");
  if (targets.empty()) throw InvalidInput("cross_entropy: no targets");
  Mat probs(lv.rows(), lv.cols());
  double loss = 0.0;
  for (Eigen::Index r = 0; r < lv.rows(); ++r) {
    const int tgt = targets[static_cast<std::size_t>(r)];
    if (tgt < 0 || tgt >= lv.cols()) throw InvalidInput("cross_entropy: target out of vocabulary");
    const double mx = lv.row(r).maxCoeff();
    probs.row(r) = (lv.row(r).array() - mx).exp();
    const double z = probs.row(r).sum();
    probs.row(r) /= z;
    loss += std::log(z) + mx - lv(r, tgt);
  }
  const double n = static_cast<double>(lv.rows());
  std::vector<int> tg(targets.begin(), targets.end());
  return logits.graph->emit(Mat::Constant(1, 1, loss / n), {logits},
                            [logits, tg = std::move(tg), probs = std::move(probs), n](Graph& g, int self) {
                              Mat d = probs;
                              for (std::size_t r = 0; r < tg.size(); ++r) d(static_cast<Eigen::Index>(r), tg[r]) -= 1.0;
                              g.accumulate(logits.id, d * (g.grad(self)(0, 0) / n));
                            });
}

Var mse(Var pred, const Mat& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw InvalidInput("mse: shape mismatch");
  Mat diff = pred.value() - target;
  const double n = static_cast<double>(diff.size());
  Mat out = Mat::Constant(1, 1, diff.squaredNorm() / n);
  return pred.graph->emit(std::move(out), {pred}, [pred, diff = std::move(diff), n](Graph& g, int self) {
    g.accumulate(pred.id, diff * (2.0 * g.grad(self)(0, 0) / n));
  });
}

// --- optimiser -------------------------------------------------------------------------

void Adam::step(ParameterStore& store, double grad_scale) {
  ++t_;
  double clip = 1.0;
  if (opts_.clip_norm > 0.0) {
    const double norm = store.grad_norm() * grad_scale;
    if (norm > opts_.clip_norm) clip = opts_.clip_norm / norm;
  }
  const double gscale = grad_scale * clip;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (const auto& p : store.all()) {
    if (p->adam_m.size() == 0) {
      p->adam_m = Mat::Zero(p->value.rows(), p->value.cols());
      p->adam_v = Mat::Zero(p->value.rows(), p->value.cols());
    }
    const Mat gr = p->grad * gscale;
    p->adam_m = opts_.beta1 * p->adam_m + (1.0 - opts_.beta1) * gr;
    p->adam_v = opts_.beta2 * p->adam_v + (1.0 - opts_.beta2) * gr.cwiseProduct(gr);
    if (opts_.weight_decay > 0.0) p->value *= (1.0 - opts_.lr * opts_.weight_decay);
    p->value.array() -= opts_.lr * (p->adam_m.array() / bc1) / ((p->adam_v.array() / bc2).sqrt() + opts_.eps);
    p->grad.setZero();
  }
}

double cosine_lr(double base, long step, long total, double floor) {
  if (total <= 0) return base;
  const double p = std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
  return base * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * p)));
}

}  // namespace songgen::nn
