#include "songgen/layers.hpp"

#include <cmath>

#include "songgen/binary_io.hpp"
#include "songgen/error.hpp"

namespace songgen::nn {

Linear::Linear(ParameterStore& ps, const std::string& name, int in, int out, double stddev, Rng& rng, bool bias)
    : w_(&ps.create(name + ".w", in, out, stddev, rng)),
      b_(bias ? &ps.create_constant(name + ".b", 1, out, 0.0) : nullptr) {}

Var Linear::operator()(Graph& g, Var x) const {
  Var y = matmul(x, g.param(*w_));
  return b_ ? add_row(y, g.param(*b_)) : y;
}

Mat Linear::apply(const Mat& x) const {
  Mat y = x * w_->value;
  if (b_) y.rowwise() += b_->value.row(0);
  return y;
}

LayerNorm::LayerNorm(ParameterStore& ps, const std::string& name, int width)
    : gamma_(&ps.create_constant(name + ".gamma", 1, width, 1.0)),
      beta_(&ps.create_constant(name + ".beta", 1, width, 0.0)) {}

Var LayerNorm::operator()(Graph& g, Var x) const { return layer_norm(x, g.param(*gamma_), g.param(*beta_)); }

Mat LayerNorm::apply(const Mat& x) const { return layer_norm_plain(x, gamma_->value, beta_->value); }

TransformerBlock::TransformerBlock(ParameterStore& ps, const std::string& name, int width, int heads, Rng& rng)
    : width_(width), heads_(heads) {
  if (heads < 1 || width % heads != 0) throw ConfigError("width " + std::to_string(width) + " not divisible by heads");
  const double sd = 0.02;
  ln1_ = LayerNorm(ps, name + ".ln1", width);
  qkv_ = Linear(ps, name + ".qkv", width, 3 * width, sd, rng);
  out_ = Linear(ps, name + ".out", width, width, sd, rng);
  ln2_ = LayerNorm(ps, name + ".ln2", width);
  ff1_ = Linear(ps, name + ".ff1", width, 4 * width, sd, rng);
  ff2_ = Linear(ps, name + ".ff2", 4 * width, width, sd, rng);
}

Var TransformerBlock::forward(Graph& g, Var x, bool causal, int block) const {
  Var qkv = qkv_(g, ln1_(g, x));
  Var a = attention(slice_cols(qkv, 0, width_), slice_cols(qkv, width_, width_), slice_cols(qkv, 2 * width_, width_),
                    heads_, causal, block);
  x = add(x, out_(g, a));
  return add(x, ff2_(g, gelu(ff1_(g, ln2_(g, x)))));
}

Mat TransformerBlock::step(Mat& keys, Mat& values, const Mat& x) const {
  const Eigen::Index m = x.rows(), d = width_;
  const Mat qkv = qkv_.apply(ln1_.apply(x));
  const Eigen::Index n0 = keys.rows();
  keys.conservativeResize(n0 + m, d);
  values.conservativeResize(n0 + m, d);
  keys.bottomRows(m) = qkv.middleCols(d, d);
  values.bottomRows(m) = qkv.middleCols(2 * d, d);
  const Eigen::Index dh = d / heads_;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat att(m, d);
  Eigen::RowVectorXd scores;
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::Index lim = n0 + i + 1;
    for (int h = 0; h < heads_; ++h) {
      scores = (keys.block(0, h * dh, lim, dh) * qkv.block(i, h * dh, 1, dh).transpose()).transpose() * sc;
      const double mx = scores.maxCoeff();
      scores = (scores.array() - mx).exp();
      scores /= scores.sum();
      att.block(i, h * dh, 1, dh) = scores * values.block(0, h * dh, lim, dh);
    }
  }
  Mat y = x + out_.apply(att);
  return y + ff2_.apply(gelu_plain(ff1_.apply(ln2_.apply(y))));
}

TransformerStack::TransformerStack(ParameterStore& ps, const std::string& name, int layers, int width, int heads,
                                   Rng& rng)
    : width_(width) {
  for (int l = 0; l < layers; ++l)
    blocks_.emplace_back(ps, name + ".layer" + std::to_string(l), width, heads, rng);
  final_ = LayerNorm(ps, name + ".ln_f", width);
}

Var TransformerStack::forward(Graph& g, Var x, bool causal, int block) const {
  for (const auto& b : blocks_) x = b.forward(g, x, causal, block);
  return final_(g, x);
}

Mat TransformerStack::step(KvCache& cache, const Mat& x) const {
  if (cache.keys.empty()) {
    cache.keys.assign(blocks_.size(), Mat(0, width_));
    cache.values.assign(blocks_.size(), Mat(0, width_));
  }
  Mat h = x;
  for (std::size_t l = 0; l < blocks_.size(); ++l) h = blocks_[l].step(cache.keys[l], cache.values[l], h);
  return final_.apply(h);
}

Conv1d::Conv1d(ParameterStore& ps, const std::string& name, int in, int out, int kernel, int stride, Rng& rng)
    : kernel_(kernel), stride_(stride), lin_(ps, name, in * kernel, out, 1.0 / std::sqrt(double(in * kernel)), rng) {}

Var Conv1d::operator()(Graph& g, Var x) const {
  const int t = static_cast<int>(x.rows());
  const int t_out = (t + stride_ - 1) / stride_;
  const int total_pad = std::max(0, (t_out - 1) * stride_ + kernel_ - t);
  const int left = total_pad / 2;
  return lin_(g, unfold1d(x, kernel_, stride_, left, total_pad - left));
}

std::vector<int> nearest_resample_index(int from, int to) {
  if (from < 1 || to < 0) throw InvalidInput("nearest_resample_index: empty source");
  std::vector<int> idx(static_cast<std::size_t>(to));
  for (int i = 0; i < to; ++i) {
    const double src = (i + 0.5) * static_cast<double>(from) / to - 0.5;
    idx[static_cast<std::size_t>(i)] = std::clamp(static_cast<int>(std::lround(src)), 0, from - 1);
  }
  return idx;
}

// --- checkpoints ---------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'S', 'G', 'C', 'K', 'P', 'T', '0', '1'};

void write_mat(BinaryWriter& w, const Mat& m) {
  w.pod(static_cast<std::uint32_t>(m.rows()));
  w.pod(static_cast<std::uint32_t>(m.cols()));
  w.bytes(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
}

Mat read_mat(BinaryReader& r) {
  const auto rows = r.pod<std::uint32_t>();
  const auto cols = r.pod<std::uint32_t>();
  if (std::uint64_t(rows) * cols > (1ULL << 31)) throw FormatError("implausible tensor shape in checkpoint");
  Mat m(rows, cols);
  r.bytes(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
  return m;
}

nlohmann::json read_header(BinaryReader& r, const std::filesystem::path& path) {
  char magic[8];
  r.bytes(magic, 8);
  if (!std::equal(magic, magic + 8, kMagic)) throw FormatError("not a checkpoint: " + path.string());
  try {
    return nlohmann::json::parse(r.string());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad checkpoint header in " + path.string() + ": " + e.what());
  }
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& header, const ParameterStore& ps,
                     long optimizer_steps) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    BinaryWriter w(tmp);
    w.bytes(kMagic, 8);
    w.string(header.dump());
    w.pod(static_cast<std::int64_t>(optimizer_steps));
    w.pod(static_cast<std::uint32_t>(ps.all().size()));
    for (const auto& p : ps.all()) {
      w.string(p->name);
      write_mat(w, p->value);
      const bool moments = p->adam_m.size() != 0;
      w.pod(static_cast<std::uint8_t>(moments));
      if (moments) {
        write_mat(w, p->adam_m);
        write_mat(w, p->adam_v);
      }
    }
    w.close();
  }
  std::filesystem::rename(tmp, path);
}

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
  BinaryReader r(path);
  return read_header(r, path);
}

long load_checkpoint(const std::filesystem::path& path, ParameterStore& ps) {
  BinaryReader r(path);
  read_header(r, path);
  const long steps = static_cast<long>(r.pod<std::int64_t>());
  const auto count = r.pod<std::uint32_t>();
  if (count != ps.all().size())
    throw FormatError("checkpoint " + path.string() + " holds " + std::to_string(count) + " parameters, model has " +
                      std::to_string(ps.all().size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.string();
    Parameter* p = ps.find(name);
    if (!p) throw FormatError("checkpoint parameter not in model: " + name);
    Mat v = read_mat(r);
    if (v.rows() != p->value.rows() || v.cols() != p->value.cols()) throw FormatError("shape mismatch for " + name);
    p->value = std::move(v);
    p->grad.setZero();
    if (r.pod<std::uint8_t>()) {
      p->adam_m = read_mat(r);
      p->adam_v = read_mat(r);
    } else {
      p->adam_m.resize(0, 0);
      p->adam_v.resize(0, 0);
    }
  }
  return steps;
}

}  // namespace songgen::nn
