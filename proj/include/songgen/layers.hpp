#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "songgen/nn.hpp"

namespace songgen::nn {

class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& ps, const std::string& name, int in, int out, double stddev, Rng& rng, bool bias = true);

  Var operator()(Graph& g, Var x) const;
  Mat apply(const Mat& x) const;
  int in_features() const { return static_cast<int>(w_->value.rows()); }
  int out_features() const { return static_cast<int>(w_->value.cols()); }
  Parameter& weight() const { return *w_; }
  Parameter* bias() const { return b_; }

 private:
  Parameter* w_ = nullptr;
  Parameter* b_ = nullptr;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore& ps, const std::string& name, int width);

  Var operator()(Graph& g, Var x) const;
  Mat apply(const Mat& x) const;

 private:
  Parameter* gamma_ = nullptr;
  Parameter* beta_ = nullptr;
};

/// Per-layer key/value rows for incremental causal decoding.
struct KvCache {
  std::vector<Mat> keys;
  std::vector<Mat> values;
  Eigen::Index length() const { return keys.empty() ? 0 : keys.front().rows(); }
};

/// Pre-LN transformer block: x + MHA(LN(x)), then x + FFN(LN(x)) with a GELU FFN of width 4d.
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParameterStore& ps, const std::string& name, int width, int heads, Rng& rng);

  Var forward(Graph& g, Var x, bool causal, int block) const;
  /// Causal step over new rows given cached keys/values of earlier rows.
  Mat step(Mat& keys, Mat& values, const Mat& x) const;

 private:
  int width_ = 0;
  int heads_ = 1;
  LayerNorm ln1_, ln2_;
  Linear qkv_, out_, ff1_, ff2_;
};

class TransformerStack {
 public:
  TransformerStack() = default;
  TransformerStack(ParameterStore& ps, const std::string& name, int layers, int width, int heads, Rng& rng);

  /// Runs all layers plus the final LayerNorm. `block` > 0 splits rows into independent groups.
  Var forward(Graph& g, Var x, bool causal, int block = 0) const;
  /// Appends rows to the cache and returns their outputs; equals the causal forward of the full prefix.
  Mat step(KvCache& cache, const Mat& x) const;
  int layers() const { return static_cast<int>(blocks_.size()); }
  int width() const { return width_; }

 private:
  int width_ = 0;
  std::vector<TransformerBlock> blocks_;
  LayerNorm final_;
};

/// 1-D convolution over time (rows) implemented as unfold + matmul.
class Conv1d {
 public:
  Conv1d() = default;
  Conv1d(ParameterStore& ps, const std::string& name, int in, int out, int kernel, int stride, Rng& rng);

  /// "same"-style padding: output length is ceil(T / stride).
  Var operator()(Graph& g, Var x) const;

 private:
  int kernel_ = 1;
  int stride_ = 1;
  Linear lin_;
};

/// Nearest-neighbour index map from `from` rows to `to` rows.
std::vector<int> nearest_resample_index(int from, int to);

// --- checkpoints ---------------------------------------------------------------------

/// Writes a named-parameter archive with a JSON header. Adam moments are stored when present.
void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& header, const ParameterStore& ps,
                     long optimizer_steps = 0);

/// Reads only the header of a checkpoint.
nlohmann::json read_checkpoint_header(const std::filesystem::path& path);

/// Loads values (and Adam moments) into an already constructed store. Every stored name must
/// exist with a matching shape and every store parameter must be present.
long load_checkpoint(const std::filesystem::path& path, ParameterStore& ps);

}  // namespace songgen::nn
