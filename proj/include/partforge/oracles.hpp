#pragma once

// Independent reference computations. They share no code with the kernels
// they check: brute-force enumeration and plain loops only.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace partforge::oracle {

using Mat = Eigen::MatrixXd;

// Minimum over all permutations sigma of sum_i C(i, sigma(i)); square C, N <= 8.
double min_assignment_cost(const Mat& cost);
// Exact optimal EMD similarity under uniform marginals 1/N: -min / N.
double exact_emd_similarity(const Mat& cost);

// Full stable sort per query.
double rr_at_k(const Mat& scores, const std::vector<std::vector<int>>& relevant, int k);
double ndcg_at_k(const Mat& scores, const std::vector<std::vector<int>>& relevant, int k);

// -log(exp(x_y) / sum exp(x)) evaluated directly, averaged.
double seg_cross_entropy(const Mat& logits_k_by_n, const std::vector<int>& labels);
double infonce_rows(const Mat& sim, double tau);

// Aggregate checks shared by `partforge selfcheck` and the acceptance suite.
struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
};

// 100 random 3x3 uniform-marginal instances at epsilon 1e-3 against the
// permutation optimum, plus marginal residuals on random 17x32 instances.
CheckResult check_sinkhorn(std::uint64_t seed, int trials = 100);
// Central differences of the full training loss at toy scale
// (D=8, B=3, N_p=32, captions truncated to 12 tokens).
CheckResult check_gradients(std::uint64_t seed);
// rr_at_k / ndcg_at_k against the sort-based oracle on random matrices.
CheckResult check_metrics(std::uint64_t seed, int trials = 200);
// Uniform similarities give ln B; uniform logits give ln K.
CheckResult check_closed_form_losses();

}  // namespace partforge::oracle
