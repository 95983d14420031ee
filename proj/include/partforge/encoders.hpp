#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "partforge/geometry.hpp"

namespace partforge {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

struct ModelDims {
  int point_hidden = 64;  // H
  int point_feat = 64;    // D_pt
  int feat = 64;          // D, even: each GRU direction has D/2 units
  int embed = 32;         // E
  int classes = 5;        // K
  int vocab = 2;          // V

  void validate() const;
  bool operator==(const ModelDims&) const = default;
};

struct GruWeights {
  Mat w;  // 3h x E, gate rows ordered [update; reset; candidate]
  Mat u;  // 3h x h
  Mat b;  // 3h x 1
};

// Every trainable tensor. Biases are stored as n x 1 matrices so all tensors
// share one type.
struct ModelParams {
  ModelDims dims;
  Mat point_w1, point_b1;  // H x 3
  Mat point_w2, point_b2;  // D_pt x H
  Mat fuse_w1, fuse_b1;    // D x 2 D_pt
  Mat fuse_w2, fuse_b2;    // D x D
  Mat seg_w, seg_b;        // K x D
  Mat embedding;           // E x V, one column per token id
  GruWeights gru_fwd, gru_bwd;

  static ModelParams zeros(const ModelDims& dims);
  // Weights uniform in +-1/sqrt(fan_in); biases zero. Embedding columns are
  // one-hot lookups (fan_in 1), so they draw from +-1.
  static ModelParams init(const ModelDims& dims, std::uint64_t seed);

  // Stable name order; used by the optimizer, checkpoints and gradient checks.
  std::vector<std::pair<std::string, Mat*>> tensors();
  std::vector<std::pair<std::string, const Mat*>> tensors() const;

  std::size_t parameter_count() const;
  bool all_finite() const;
  void set_zero();
  void add_scaled(const ModelParams& other, double scale);
};

// ---------------------------------------------------------------------------
// Vocabulary and tokenisation

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;

  Vocab();
  // Sorted unique tokens of `texts` after reserved ids.
  static Vocab build(std::span<const std::string> texts);
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int id(std::string_view token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  void add(std::string token);
  std::vector<std::string> tokens_;
  std::map<std::string, int, std::less<>> ids_;
};

// Lowercase, punctuation to spaces, whitespace split.
std::vector<std::string> normalize_words(std::string_view text);
// Empty text yields a single unknown token.
std::vector<int> tokenize(std::string_view text, const Vocab& vocab);

// ---------------------------------------------------------------------------
// Shape encoder

// Layouts are feature x point (one column per point).
struct ShapeCache {
  Mat points;  // 3 x Np
  Mat z1, a1;  // H x Np
  Mat z2, a2;  // D_pt x Np, a2 holds the per-point features
  Eigen::VectorXi argmax;  // D_pt, point achieving each channel of the global max
  Mat fused_in;            // 2 D_pt x Np
  Mat z3, a3;              // D x Np
  Mat y;                   // D x Np, fused per-point features
  std::vector<int> labels;                   // grouping label per point
  std::vector<int> group_labels;             // ascending
  std::vector<std::vector<int>> group_members;
};

struct ShapeEncoding {
  Mat part_features;  // N x D, rows in ascending label order
  Mat seg_logits;     // K x Np
  Vec global;         // D_pt
  ShapeCache cache;
};

// Groups points by `labels` when given, otherwise by argmax of the
// segmentation logits (ties to the lowest class id).
ShapeEncoding encode_shape(const PointCloud& cloud, const ModelParams& params);

// Accumulates into `grads`. `d_seg_logits` may be empty (no segmentation loss).
void backward_shape(const ShapeCache& cache, const Mat& d_part_features, const Mat& d_seg_logits,
                    const ModelParams& params, ModelParams& grads);

// ---------------------------------------------------------------------------
// Text encoder

struct GruStep {
  Vec h_prev, z, r, n, h;
};

struct TextCache {
  std::vector<int> tokens;
  Mat x;  // E x M
  std::vector<GruStep> fwd;  // indexed by position
  std::vector<GruStep> bwd;  // indexed by position
};

struct TextEncoding {
  Mat word_features;  // M x D, row i = [h_i^f; h_i^b]
  TextCache cache;
};

TextEncoding encode_text(std::span<const int> tokens, const ModelParams& params);
void backward_text(const TextCache& cache, const Mat& d_word_features, const ModelParams& params,
                   ModelParams& grads);

// Fingerprint of every piecewise-linear branch taken in a forward pass (ReLU
// masks and max-pool winners). Finite differences are only meaningful when a
// perturbation leaves it unchanged.
std::uint64_t branch_signature(const ShapeCache& cache);

}  // namespace partforge
