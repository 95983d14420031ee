#pragma once

#include <span>
#include <vector>

#include "partforge/encoders.hpp"
#include "partforge/parallel.hpp"

namespace partforge {

inline constexpr double kNormGuard = 1e-8;

// c_ij = 1 - s_i.w_j / ((|s_i| + d)(|w_j| + d)), rows of S against rows of W.
Mat cost_matrix(const Mat& s, const Mat& w);

struct SinkhornOptions {
  double epsilon = 0.05;
  int max_iter = 200;
  double tol = 1e-6;  // 0 runs exactly max_iter iterations
};

struct TransportPlan {
  Mat flow;
  Vec row_marginal;
  Vec col_marginal;
  double epsilon = 0.0;
  int iterations = 0;
  double residual = 0.0;  // L-infinity marginal violation
  bool converged = false;
};

// Log-domain dual potentials after every iteration; needed to differentiate
// through the unrolled solver.
struct SinkhornTrace {
  std::vector<Vec> u;
  std::vector<Vec> v;
};

TransportPlan sinkhorn(const Mat& cost, const Vec& r, const Vec& c, const SinkhornOptions& opts,
                       SinkhornTrace* trace = nullptr);

// Gradient with respect to the cost matrix given dL/dflow, backpropagated
// through every recorded iteration.
Mat sinkhorn_backward(const Mat& cost, const TransportPlan& plan, const SinkhornTrace& trace,
                      const Mat& d_flow);

// -sum(C .* X)
double emd_similarity(const Mat& cost, const Mat& flow);

Vec uniform_marginal(Eigen::Index n);

struct PairForward {
  Mat cost;
  TransportPlan plan;
  SinkhornTrace trace;
  Vec s_norm, w_norm;  // row norms
  Mat cosine;          // guarded cosines, N x M
  double similarity = 0.0;
};

PairForward pair_similarity_forward(const Mat& s, const Mat& w, const SinkhornOptions& opts);

// Accumulates d(similarity)*g into ds and dw (which must be sized like s, w).
void pair_similarity_backward(const PairForward& fwd, const Mat& s, const Mat& w, double g, Mat& ds,
                              Mat& dw);

double pair_similarity(const Mat& s, const Mat& w, const SinkhornOptions& opts);

// entry (i, j) = pair_similarity(shapes[i], texts[j])
Mat score_matrix(std::span<const Mat> shapes, std::span<const Mat> texts,
                 const SinkhornOptions& opts, Exec exec = Exec::parallel);

// Cosine between the mean part feature and the mean word feature.
double cosine_global_similarity(const Mat& s, const Mat& w);
void cosine_global_backward(const Mat& s, const Mat& w, double g, Mat& ds, Mat& dw);
Mat cosine_score_matrix(std::span<const Mat> shapes, std::span<const Mat> texts,
                        Exec exec = Exec::parallel);

}  // namespace partforge
