/**
 * @file rvq.hpp
 * @brief Toy residual vector quantizer: k-means codebooks fit on residuals, greedy
 *        encode, sum-of-codewords decode.
 */
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Dense>

namespace songgen {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr int kDefaultCodebooks = 8;
inline constexpr int kDefaultCodebookSize = 1024;
inline constexpr int kDefaultFeatureDim = 32;
inline constexpr int kLmCodebooks = 3;

/// N_q books of K x d codewords. Books after the first keep codeword 0 pinned at the
/// origin, so every greedy stage can leave the residual untouched.
class Codebooks {
 public:
  Codebooks() = default;
  explicit Codebooks(std::vector<MatrixRM> books);

  int num_books() const { return static_cast<int>(books_.size()); }
  int book_size() const { return books_.empty() ? 0 : static_cast<int>(books_[0].rows()); }
  int dim() const { return books_.empty() ? 0 : static_cast<int>(books_[0].cols()); }
  const MatrixRM& book(int q) const { return books_.at(static_cast<std::size_t>(q)); }
  /// FNV-1a over the shape and the float32 codeword bytes.
  std::uint64_t hash() const { return hash_; }

  void save(const std::filesystem::path& path) const;
  static Codebooks load(const std::filesystem::path& path);

  friend bool operator==(const Codebooks& a, const Codebooks& b) { return a.hash_ == b.hash_ && a.books_ == b.books_; }

 private:
  std::vector<MatrixRM> books_;
  std::uint64_t hash_ = 0;
};

/// Time-major code matrix: frames x codes_per_frame.
class AcousticFrameCodes {
 public:
  AcousticFrameCodes() = default;
  AcousticFrameCodes(int codes_per_frame, std::vector<std::uint16_t> codes);

  int codes_per_frame() const { return width_; }
  int frames() const { return width_ == 0 ? 0 : static_cast<int>(codes_.size()) / width_; }
  std::uint16_t at(int frame, int q) const {
    return codes_[static_cast<std::size_t>(frame) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(q)];
  }
  std::span<const std::uint16_t> frame(int i) const {
    return {codes_.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(width_), static_cast<std::size_t>(width_)};
  }
  const std::vector<std::uint16_t>& data() const { return codes_; }
  friend bool operator==(const AcousticFrameCodes&, const AcousticFrameCodes&) = default;

 private:
  int width_ = 0;
  std::vector<std::uint16_t> codes_;
};

struct RvqFitOptions {
  int num_books = kDefaultCodebooks;
  int book_size = kDefaultCodebookSize;
  int iterations = 10;
  std::uint64_t seed = 0;
};

struct RvqFitResult {
  Codebooks codebooks;
  /// Mean L2 residual norm over the training frames after q+1 books.
  std::vector<double> mean_residual_norm;
};

/// Fits books one after another by k-means on the running residual.
/// Throws InsufficientData when there are fewer frames than codewords.
RvqFitResult fit_rvq(const MatrixRM& features, const RvqFitOptions& opts);

/// Index of the nearest codeword (squared L2); ties resolve to the lowest index.
int nearest_codeword(const MatrixRM& book, std::span<const double> x);

std::vector<std::uint16_t> rvq_encode(std::span<const double> frame, const Codebooks& cb);
/// Sum of the selected codewords. Fewer codes than books decodes the leading books only.
Eigen::VectorXd rvq_decode(std::span<const std::uint16_t> codes, const Codebooks& cb);

AcousticFrameCodes rvq_encode_frames(const MatrixRM& frames, const Codebooks& cb);
MatrixRM rvq_decode_frames(const AcousticFrameCodes& codes, const Codebooks& cb);

/// Keeps the first k codes of every frame.
AcousticFrameCodes truncate_codes(const AcousticFrameCodes& codes, int k = kLmCodebooks);

/// Fixed random orthogonal map between log-mel frames and codec feature frames,
/// centred on the silence floor so silent frames map to the origin.
class FeatureProjection {
 public:
  FeatureProjection(int mel_bins, int feature_dim, double floor, std::uint64_t seed);

  MatrixRM to_features(const MatrixRM& log_mel) const;
  MatrixRM to_log_mel(const MatrixRM& features) const;
  const MatrixRM& basis() const { return basis_; }

 private:
  MatrixRM basis_;  // mel_bins x feature_dim, orthonormal columns
  double floor_;
};

}  // namespace songgen
