#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "partforge/encoders.hpp"
#include "partforge/matching.hpp"
#include "partforge/parallel.hpp"

namespace partforge {

// Each loss optionally accumulates dL/dinput into `grad` (sized like the input).

// Rows of sim / tau against diagonal targets, averaged over B.
double infonce_s2t(const Mat& sim, double tau, Mat* grad = nullptr);
// Same on the transpose.
double infonce_t2s(const Mat& sim, double tau, Mat* grad = nullptr);

// logits are K x Np (one column per point); mean cross-entropy over points.
double seg_cross_entropy(const Mat& logits, std::span<const int> labels, Mat* grad = nullptr);

// Both directions; per anchor the hardest negative below pos + margin, else
// the hardest overall; hinge averaged over the 2B anchors.
double semi_hard_triplet(const Mat& sim, double margin, Mat* grad = nullptr);

struct LossComponents {
  double seg = 0.0;
  double s2t = 0.0;
  double t2s = 0.0;
};

struct LossToggles {
  bool seg = true;
  bool s2t = true;
  bool t2s = true;
};

// Unweighted sum of the enabled components. Throws naming the first
// non-finite enabled component.
double total_loss(const LossComponents& parts, const LossToggles& toggles = {});

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  ModelParams m;
  ModelParams v;
  std::int64_t step = 0;

  static AdamState zeros_like(const ModelParams& params);
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

double global_norm(const ModelParams& grads);

// Clips `grads` to global norm `clip` (0 disables), then one bias-corrected
// Adam update. Returns the pre-clip norm.
double adam_step(ModelParams& params, ModelParams& grads, AdamState& state, double lr, double clip,
                 const AdamOptions& opts = {});

// ---------------------------------------------------------------------------
// Batch loss and gradient

enum class SimilarityMode { emd, cosine };
enum class LossMode { infonce, triplet };

const char* to_string(SimilarityMode m);
const char* to_string(LossMode m);
SimilarityMode similarity_mode_from_string(const std::string& s);
LossMode loss_mode_from_string(const std::string& s);

struct LossConfig {
  SimilarityMode similarity = SimilarityMode::emd;
  LossMode loss = LossMode::infonce;
  double tau = 0.1;
  double margin = 0.2;
  LossToggles toggles;
  SinkhornOptions sinkhorn;
};

struct TrainingItem {
  PointCloud shape;  // labelled
  std::vector<int> tokens;
};

struct BatchResult {
  LossComponents parts;
  double total = 0.0;
  Mat sim;
  ModelParams grads;  // empty dims unless requested
};

// Per-item forward/backward may fan out; gradients are reduced in item order
// so serial and parallel runs agree bit for bit.
BatchResult batch_loss(const ModelParams& params, std::span<const TrainingItem> items,
                       const LossConfig& cfg, bool with_grad, Exec exec = Exec::parallel);

// ---------------------------------------------------------------------------
// Gradient verification

struct FdCoordinate {
  std::string tensor;
  Eigen::Index row = 0;
  Eigen::Index col = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct FdReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  // Coordinates whose perturbation flipped a ReLU or max-pool branch; the
  // loss is not differentiable across such a flip, so they were redrawn.
  std::size_t skipped = 0;
  std::vector<FdCoordinate> worst_per_tensor;  // tensor order
  std::vector<std::string> tensors_covered;
};

struct FdOptions {
  double step = 1e-5;
  std::size_t coordinates = 240;
  std::uint64_t seed = 7;
};

// |a - n| / max(|a|, |n|, 1e-6) on central differences of the total loss.
// Sinkhorn runs a fixed iteration count (tol 0) so the computation is smooth.
FdReport finite_difference_check(const ModelParams& params, std::span<const TrainingItem> items,
                                 const LossConfig& cfg, const FdOptions& opts = {});

std::string format_fd_report(const FdReport& report);

}  // namespace partforge
