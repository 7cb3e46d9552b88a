#include "songgen/rvq.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include "songgen/binary_io.hpp"
#include "songgen/error.hpp"
#include "songgen/random.hpp"

namespace songgen {

namespace {

constexpr char kCodebookMagic[8] = {'S', 'G', 'R', 'V', 'Q', 'C', 'B', '1'};

std::uint64_t hash_books(const std::vector<MatrixRM>& books) {
  Fnv1a h;
  const auto n = static_cast<std::uint32_t>(books.size());
  const auto k = static_cast<std::uint32_t>(books.empty() ? 0 : books[0].rows());
  const auto d = static_cast<std::uint32_t>(books.empty() ? 0 : books[0].cols());
  h.add_pod(n);
  h.add_pod(k);
  h.add_pod(d);
  for (const auto& b : books)
    for (Eigen::Index i = 0; i < b.size(); ++i) h.add_pod(static_cast<float>(b.data()[i]));
  return h.value();
}

// Squared distances from every row of x to every codeword, via the expanded form.
MatrixRM pairwise_sq(const MatrixRM& x, const MatrixRM& c) {
  MatrixRM d = -2.0 * x * c.transpose();
  d.colwise() += x.rowwise().squaredNorm();
  d.rowwise() += c.rowwise().squaredNorm().transpose();
  return d;
}

}  // namespace

Codebooks::Codebooks(std::vector<MatrixRM> books) : books_(std::move(books)) {
  if (books_.empty()) throw InvalidInput("codebooks need at least one book");
  for (auto& b : books_) {
    if (b.rows() != books_[0].rows() || b.cols() != books_[0].cols())
      throw InvalidInput("all codebooks must share K and d");
    if (!b.allFinite()) throw InvalidInput("codewords must be finite");
    // Stored precision is float32; keep memory and file identical.
    b = b.cast<float>().cast<double>();
  }
  if (books_[0].rows() > 65536) throw InvalidInput("codebook size exceeds 16-bit codes");
  hash_ = hash_books(books_);
}

void Codebooks::save(const std::filesystem::path& path) const {
  BinaryWriter w(path);
  w.bytes(kCodebookMagic, sizeof kCodebookMagic);
  w.pod(static_cast<std::uint32_t>(num_books()));
  w.pod(static_cast<std::uint32_t>(book_size()));
  w.pod(static_cast<std::uint32_t>(dim()));
  w.pod(hash_);
  for (const auto& b : books_)
    for (Eigen::Index i = 0; i < b.size(); ++i) w.pod(static_cast<float>(b.data()[i]));
  w.close();
}

Codebooks Codebooks::load(const std::filesystem::path& path) {
  BinaryReader r(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCodebookMagic, sizeof magic) != 0) throw FormatError("not a codebook file: " + path.string());
  const auto n = r.pod<std::uint32_t>();
  const auto k = r.pod<std::uint32_t>();
  const auto d = r.pod<std::uint32_t>();
  const auto stored_hash = r.pod<std::uint64_t>();
  std::vector<MatrixRM> books(n, MatrixRM(k, d));
  for (auto& b : books)
    for (Eigen::Index i = 0; i < b.size(); ++i) b.data()[i] = r.pod<float>();
  Codebooks cb(std::move(books));
  if (cb.hash() != stored_hash) throw CodecMismatch("codebook content hash does not match header in " + path.string());
  return cb;
}

AcousticFrameCodes::AcousticFrameCodes(int codes_per_frame, std::vector<std::uint16_t> codes)
    : width_(codes_per_frame), codes_(std::move(codes)) {
  if (width_ < 1) throw InvalidInput("codes per frame must be positive");
  if (codes_.size() % static_cast<std::size_t>(width_) != 0) throw InvalidInput("ragged code matrix");
}

int nearest_codeword(const MatrixRM& book, std::span<const double> x) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < book.rows(); ++k) {
    double d = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double diff = x[j] - book(k, static_cast<Eigen::Index>(j));
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

RvqFitResult fit_rvq(const MatrixRM& features, const RvqFitOptions& opts) {
  const Eigen::Index t = features.rows();
  const Eigen::Index d = features.cols();
  const int k = opts.book_size;
  if (opts.num_books < 1 || k < 1 || k > 65536) throw InvalidInput("bad RVQ shape");
  if (t < k) throw InsufficientData("need at least K=" + std::to_string(k) + " frames, got " + std::to_string(t));
  if (!features.allFinite()) throw InvalidInput("features must be finite");

  MatrixRM residual = features;
  std::vector<MatrixRM> books;
  RvqFitResult result;
  Rng rng(mix_seed(opts.seed, 0x5251));

  for (int q = 0; q < opts.num_books; ++q) {
    const bool pin_zero = q > 0;
    std::vector<Eigen::Index> order(static_cast<std::size_t>(t));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    for (std::size_t i = order.size() - 1; i > 0; --i)
      std::swap(order[i], order[static_cast<std::size_t>(uniform_int(rng, static_cast<int>(i + 1)))]);
    MatrixRM book(k, d);
    for (int c = 0; c < k; ++c) book.row(c) = residual.row(order[static_cast<std::size_t>(c)]);
    if (pin_zero) book.row(0).setZero();

    std::vector<int> assign(static_cast<std::size_t>(t));
    for (int it = 0; it < opts.iterations; ++it) {
      const MatrixRM dist = pairwise_sq(residual, book);
      for (Eigen::Index i = 0; i < t; ++i) {
        Eigen::Index arg;
        dist.row(i).minCoeff(&arg);
        assign[static_cast<std::size_t>(i)] = static_cast<int>(arg);
      }
      MatrixRM sums = MatrixRM::Zero(k, d);
      std::vector<int> counts(static_cast<std::size_t>(k), 0);
      for (Eigen::Index i = 0; i < t; ++i) {
        sums.row(assign[static_cast<std::size_t>(i)]) += residual.row(i);
        ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
      }
      for (int c = 0; c < k; ++c) {
        if (pin_zero && c == 0) continue;
        if (counts[static_cast<std::size_t>(c)] > 0) book.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
      }
    }
    book = book.cast<float>().cast<double>();
    for (Eigen::Index i = 0; i < t; ++i) {
      const std::span<const double> row(residual.row(i).data(), static_cast<std::size_t>(d));
      residual.row(i) -= book.row(nearest_codeword(book, row));
    }
    result.mean_residual_norm.push_back(residual.rowwise().norm().mean());
    books.push_back(std::move(book));
  }
  result.codebooks = Codebooks(std::move(books));
  return result;
}

std::vector<std::uint16_t> rvq_encode(std::span<const double> frame, const Codebooks& cb) {
  if (static_cast<int>(frame.size()) != cb.dim())
    throw InvalidInput("frame dimension " + std::to_string(frame.size()) + " != codebook dimension " +
                       std::to_string(cb.dim()));
  std::vector<double> residual(frame.begin(), frame.end());
  std::vector<std::uint16_t> codes;
  codes.reserve(static_cast<std::size_t>(cb.num_books()));
  for (int q = 0; q < cb.num_books(); ++q) {
    const int idx = nearest_codeword(cb.book(q), residual);
    codes.push_back(static_cast<std::uint16_t>(idx));
    for (std::size_t j = 0; j < residual.size(); ++j) residual[j] -= cb.book(q)(idx, static_cast<Eigen::Index>(j));
  }
  return codes;
}

Eigen::VectorXd rvq_decode(std::span<const std::uint16_t> codes, const Codebooks& cb) {
  if (static_cast<int>(codes.size()) > cb.num_books()) throw InvalidInput("more codes than codebooks");
  Eigen::VectorXd out = Eigen::VectorXd::Zero(cb.dim());
  for (std::size_t q = 0; q < codes.size(); ++q) {
    if (codes[q] >= cb.book_size()) throw InvalidInput("code " + std::to_string(codes[q]) + " out of range");
    out += cb.book(static_cast<int>(q)).row(codes[q]).transpose();
  }
  return out;
}

AcousticFrameCodes rvq_encode_frames(const MatrixRM& frames, const Codebooks& cb) {
  std::vector<std::uint16_t> all;
  all.reserve(static_cast<std::size_t>(frames.rows() * cb.num_books()));
  for (Eigen::Index i = 0; i < frames.rows(); ++i) {
    const auto codes = rvq_encode({frames.row(i).data(), static_cast<std::size_t>(frames.cols())}, cb);
    all.insert(all.end(), codes.begin(), codes.end());
  }
  return AcousticFrameCodes(cb.num_books(), std::move(all));
}

MatrixRM rvq_decode_frames(const AcousticFrameCodes& codes, const Codebooks& cb) {
  MatrixRM out(codes.frames(), cb.dim());
  for (int i = 0; i < codes.frames(); ++i) out.row(i) = rvq_decode(codes.frame(i), cb).transpose();
  return out;
}

AcousticFrameCodes truncate_codes(const AcousticFrameCodes& codes, int k) {
  if (k < 1 || k > codes.codes_per_frame())
    throw InvalidInput("truncation depth " + std::to_string(k) + " outside [1, " +
                       std::to_string(codes.codes_per_frame()) + "]");
  std::vector<std::uint16_t> out;
  out.reserve(static_cast<std::size_t>(codes.frames() * k));
  for (int i = 0; i < codes.frames(); ++i) {
    const auto f = codes.frame(i);
    out.insert(out.end(), f.begin(), f.begin() + k);
  }
  return AcousticFrameCodes(k, std::move(out));
}

FeatureProjection::FeatureProjection(int mel_bins, int feature_dim, double floor, std::uint64_t seed)
    : floor_(floor) {
  if (feature_dim > mel_bins) throw InvalidInput("feature dimension exceeds mel bins");
  Rng rng(mix_seed(seed, 0x50524f4a));
  MatrixRM g(mel_bins, feature_dim);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = standard_normal(rng);
  Eigen::HouseholderQR<MatrixRM> qr(g);
  basis_ = qr.householderQ() * MatrixRM::Identity(mel_bins, feature_dim);
}

MatrixRM FeatureProjection::to_features(const MatrixRM& log_mel) const {
  return (log_mel.array() - floor_).matrix() * basis_;
}

MatrixRM FeatureProjection::to_log_mel(const MatrixRM& features) const {
  return ((features * basis_.transpose()).array() + floor_).matrix();
}

}  // namespace songgen
