/**
 * @file nn.hpp
 * @brief Minimal reverse-mode autodiff over row-major double matrices.
 *
 * Every activation is a 2-D matrix (time x channels). A Graph records the forward pass
 * as a tape of nodes; backward() walks the tape in reverse. Parameters live outside the
 * graph in a ParameterStore and receive accumulated gradients.
 */
#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "songgen/random.hpp"

namespace songgen::nn {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Parameter {
  std::string name;
  Mat value;
  Mat grad;
  Mat adam_m;
  Mat adam_v;
};

class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  /// Normal(0, stddev) initialisation drawn from `rng`.
  Parameter& create(const std::string& name, int rows, int cols, double stddev, Rng& rng);
  Parameter& create_constant(const std::string& name, int rows, int cols, double value);

  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  std::span<const std::unique_ptr<Parameter>> all() const { return params_; }

  void zero_grad();
  double grad_norm() const;
  std::size_t scalar_count() const;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

class Graph;

/// Handle to a node in a Graph.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

class Graph {
 public:
  explicit Graph(bool requires_grad = true) : requires_grad_(requires_grad) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Mat value);
  Var param(Parameter& p);

  /// Seeds d(loss)/d(loss) = scale and propagates. loss must be 1x1.
  void backward(Var loss, double scale = 1.0);

  bool requires_grad() const { return requires_grad_; }
  const Mat& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  /// Gradient of a node, or an empty matrix if nothing flowed into it.
  const Mat& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

  /// Accumulates into a node's gradient (no-op for nodes that do not need one).
  template <typename Expr>
  void accumulate(int id, const Expr& delta) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
      n.grad = delta;
    else
      n.grad += delta;
  }

  /// Appends an op node. `fn(graph, self_id)` runs during backward when gradient reached it.
  template <typename F>
  Var emit(Mat value, std::initializer_list<Var> inputs, F&& fn) {
    bool ng = false;
    if (requires_grad_)
      for (const auto& v : inputs) ng = ng || needs_grad(v.id);
    return push(std::move(value), ng, ng ? Backward(std::forward<F>(fn)) : Backward{});
  }
  template <typename F>
  Var emit(Mat value, std::span<const Var> inputs, F&& fn) {
    bool ng = false;
    if (requires_grad_)
      for (const auto& v : inputs) ng = ng || needs_grad(v.id);
    return push(std::move(value), ng, ng ? Backward(std::forward<F>(fn)) : Backward{});
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  using Backward = std::function<void(Graph&, int)>;
  struct Node {
    Mat value;
    Mat grad;
    Backward backward;
    bool needs_grad = false;
  };
  Var push(Mat value, bool needs_grad, Backward fn);

  std::deque<Node> nodes_;  // stable references across push_back
  bool requires_grad_;
};

inline const Mat& Var::value() const { return graph->value(id); }

// --- elementwise and structural ops ---------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// x + row, broadcasting a 1 x C row over all rows.
Var add_row(Var x, Var row);
/// x * row elementwise, broadcasting a 1 x C row.
Var mul_row(Var x, Var row);
Var gelu(Var a);
Var silu(Var a);
Var relu(Var a);
Var tanh(Var a);
Var exp(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

/// Multi-head scaled dot-product attention over (q, k, v), each T x d. Rows are split
/// into consecutive independent blocks of `block` rows (0 = one block of T).
Var attention(Var q, Var k, Var v, int heads, bool causal, int block = 0);

/// out[i] = table[ids[i]]; gradient scatters back. Used for embeddings and resampling.
Var gather_rows(Var table, std::span<const int> ids);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var x, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var x, Eigen::Index start, Eigen::Index count);

/// 1-D patch extraction for convolutions: out(t, j*C + c) = x(t*stride + j - pad_left, c).
Var unfold1d(Var x, int kernel, int stride, int pad_left, int pad_right);

Var sum_all(Var x);
Var mean_all(Var x);
/// Mean token cross-entropy of row-wise logits against integer targets.
Var cross_entropy(Var logits, std::span<const int> targets);
/// Mean squared error against a constant target.
Var mse(Var pred, const Mat& target);

// --- plain (non-graph) helpers shared by inference paths ---------------------------

Mat gelu_plain(const Mat& x);
Mat layer_norm_plain(const Mat& x, const Mat& gamma, const Mat& beta, double eps = 1e-5);
void softmax_inplace(std::span<double> logits);

// --- optimiser ---------------------------------------------------------------------

struct AdamOptions {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW)
  double clip_norm = 1.0;     // <= 0 disables
};

/// Cosine decay from `base` at step 0 to `base * floor` at `total`.
double cosine_lr(double base, long step, long total, double floor = 0.02);

class Adam {
 public:
  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}
  /// Applies one update from the accumulated gradients, then zeroes them.
  void step(ParameterStore& store, double grad_scale = 1.0);
  long steps() const { return t_; }
  void set_steps(long t) { t_ = t; }
  AdamOptions& options() { return opts_; }

 private:
  AdamOptions opts_;
  long t_ = 0;
};

}  // namespace songgen::nn
