#include "partforge/oracles.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "partforge/augment.hpp"
#include "partforge/evalharness.hpp"
#include "partforge/library.hpp"
#include "partforge/matching.hpp"
#include "partforge/objective.hpp"
#include "partforge/rng.hpp"

namespace partforge::oracle {

double min_assignment_cost(const Mat& cost) {
  if (cost.rows() != cost.cols() || cost.rows() < 1 || cost.rows() > 8) {
    throw std::invalid_argument("min_assignment_cost: square matrix with 1..8 rows required");
  }
  std::vector<int> perm(static_cast<std::size_t>(cost.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (std::size_t i = 0; i < perm.size(); ++i) c += cost(static_cast<Eigen::Index>(i), perm[i]);
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

double exact_emd_similarity(const Mat& cost) {
  return -min_assignment_cost(cost) / static_cast<double>(cost.rows());
}

namespace {

std::vector<int> sorted_order(const Mat& scores, Eigen::Index q) {
  std::vector<int> order(static_cast<std::size_t>(scores.cols()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return scores(q, a) > scores(q, b); });
  return order;
}

bool contains(const std::vector<int>& v, int x) { return std::find(v.begin(), v.end(), x) != v.end(); }

}  // namespace

double rr_at_k(const Mat& scores, const std::vector<std::vector<int>>& relevant, int k) {
  int hits = 0;
  for (Eigen::Index q = 0; q < scores.rows(); ++q) {
    const auto order = sorted_order(scores, q);
    for (int r = 0; r < k && r < static_cast<int>(order.size()); ++r) {
      if (contains(relevant[static_cast<std::size_t>(q)], order[static_cast<std::size_t>(r)])) {
        ++hits;
        break;
      }
    }
  }
  return 100.0 * hits / static_cast<double>(scores.rows());
}

double ndcg_at_k(const Mat& scores, const std::vector<std::vector<int>>& relevant, int k) {
  double total = 0.0;
  for (Eigen::Index q = 0; q < scores.rows(); ++q) {
    const auto order = sorted_order(scores, q);
    const auto& rel = relevant[static_cast<std::size_t>(q)];
    double dcg = 0.0;
    for (int r = 0; r < k && r < static_cast<int>(order.size()); ++r) {
      if (contains(rel, order[static_cast<std::size_t>(r)])) dcg += 1.0 / std::log2(r + 2.0);
    }
    std::vector<int> uniq = rel;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    double idcg = 0.0;
    for (int r = 0; r < k && r < static_cast<int>(uniq.size()); ++r) idcg += 1.0 / std::log2(r + 2.0);
    total += dcg / idcg;
  }
  return 100.0 * total / static_cast<double>(scores.rows());
}

double seg_cross_entropy(const Mat& logits, const std::vector<int>& labels) {
  double total = 0.0;
  for (Eigen::Index p = 0; p < logits.cols(); ++p) {
    double denom = 0.0;
    for (Eigen::Index k = 0; k < logits.rows(); ++k) denom += std::exp(logits(k, p));
    total += -std::log(std::exp(logits(labels[static_cast<std::size_t>(p)], p)) / denom);
  }
  return total / static_cast<double>(logits.cols());
}

double infonce_rows(const Mat& sim, double tau) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < sim.rows(); ++i) {
    double denom = 0.0;
    for (Eigen::Index j = 0; j < sim.cols(); ++j) denom += std::exp(sim(i, j) / tau);
    total += -std::log(std::exp(sim(i, i) / tau) / denom);
  }
  return total / static_cast<double>(sim.rows());
}

// ---------------------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string sci(double v) {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific << v;
  return os.str();
}

}  // namespace

CheckResult check_sinkhorn(std::uint64_t seed, int trials) {
  const auto t0 = Clock::now();
  Rng rng = make_rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  SinkhornOptions sharp;
  sharp.epsilon = 1e-3;
  sharp.max_iter = 20000;
  sharp.tol = 1e-9;
  double worst_gap = 0.0;
  for (int t = 0; t < trials; ++t) {
    Mat c(3, 3);
    for (Eigen::Index i = 0; i < c.size(); ++i) c.data()[i] = unit(rng);
    const auto plan = sinkhorn(c, uniform_marginal(3), uniform_marginal(3), sharp);
    worst_gap = std::max(worst_gap, std::abs(emd_similarity(c, plan.flow) - exact_emd_similarity(c)));
  }

  SinkhornOptions wide;
  wide.max_iter = 2000;
  int converged = 0;
  double worst_residual = 0.0;
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int t = 0; t < 20; ++t) {
    Mat s(17, 16);
    Mat w(32, 16);
    for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = normal(rng);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = normal(rng);
    const auto plan = sinkhorn(cost_matrix(s, w), uniform_marginal(17), uniform_marginal(32), wide);
    if (plan.converged) {
      ++converged;
      worst_residual = std::max(worst_residual, plan.residual);
    }
  }

  CheckResult r;
  r.name = "sinkhorn-oracle";
  r.seconds = seconds_since(t0);
  r.pass = worst_gap < 1e-2 && converged > 0 && worst_residual < 1e-6 && r.seconds < 10.0;
  r.detail = "max |emd - exact| " + sci(worst_gap) + " over " + std::to_string(trials) +
             " 3x3 instances; 17x32 converged " + std::to_string(converged) + "/20, max residual " +
             sci(worst_residual);
  return r;
}

CheckResult check_gradients(std::uint64_t seed) {
  const auto t0 = Clock::now();
  SyntheticLibraryOptions so;
  so.seed = seed;
  so.points_per_part = 64;
  const auto corpus = build_synthetic_library(so);
  std::vector<std::string> texts;
  for (const auto& rec : corpus.library.records()) texts.push_back(rec.caption);
  for (const auto& s : corpus.schemas) texts.push_back(s.category);
  texts.push_back(CaptionTemplate{}.pattern);
  const Vocab vocab = Vocab::build(texts);

  ModelDims dims;
  dims.feat = 8;
  dims.point_hidden = 8;
  dims.point_feat = 8;
  dims.embed = 8;
  dims.classes = 5;
  dims.vocab = vocab.size();
  const ModelParams params = ModelParams::init(dims, seed);

  AugmentOptions ao;
  ao.n_points = 32;
  std::vector<TrainingItem> items;
  for (int k = 0; k < 3; ++k) {
    const auto pair = generate_pair(corpus.library, corpus.schemas, ao, derive_seed(seed, static_cast<std::uint64_t>(k)));
    auto tokens = tokenize(pair.caption, vocab);
    if (tokens.size() > 12) tokens.resize(12);
    items.push_back({pair.shape, tokens});
  }

  LossConfig cfg;
  cfg.sinkhorn.max_iter = 30;
  FdOptions fo;
  fo.seed = seed;
  const FdReport rep = finite_difference_check(params, items, cfg, fo);

  CheckResult r;
  r.name = "gradient-check";
  r.seconds = seconds_since(t0);
  const std::size_t n_tensors = params.tensors().size();
  r.pass = rep.max_rel_error < 1e-4 && rep.tensors_covered.size() == n_tensors && rep.checked >= 200 &&
           r.seconds < 60.0;
  r.detail = "max rel err " + sci(rep.max_rel_error) + " over " + std::to_string(rep.checked) +
             " coordinates in " + std::to_string(rep.tensors_covered.size()) + "/" +
             std::to_string(n_tensors) + " tensors (" + std::to_string(rep.skipped) +
             " redrawn at branch flips)";
  return r;
}

CheckResult check_metrics(std::uint64_t seed, int trials) {
  const auto t0 = Clock::now();
  Rng rng = make_rng(seed);
  int rr_mismatch = 0;
  double worst_ndcg = 0.0;
  for (int t = 0; t < trials; ++t) {
    const int q = std::uniform_int_distribution<int>(1, 12)(rng);
    const int g = std::uniform_int_distribution<int>(1, 20)(rng);
    Mat scores(q, g);
    const bool coarse = t % 2 == 0;  // coarse scores force ties
    for (Eigen::Index i = 0; i < scores.size(); ++i) {
      scores.data()[i] = coarse ? std::uniform_int_distribution<int>(0, 3)(rng)
                                : std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
    }
    std::vector<std::vector<int>> relevant(static_cast<std::size_t>(q));
    for (auto& rel : relevant) {
      const int n = std::uniform_int_distribution<int>(1, std::min(g, 5))(rng);
      std::vector<int> all(static_cast<std::size_t>(g));
      std::iota(all.begin(), all.end(), 0);
      std::shuffle(all.begin(), all.end(), rng);
      rel.assign(all.begin(), all.begin() + n);
    }
    for (int k : {1, 5, 10}) {
      if (partforge::rr_at_k(scores, relevant, k) != rr_at_k(scores, relevant, k)) ++rr_mismatch;
      worst_ndcg = std::max(worst_ndcg,
                            std::abs(partforge::ndcg_at_k(scores, relevant, k) - ndcg_at_k(scores, relevant, k)));
    }
  }
  CheckResult r;
  r.name = "metric-oracle";
  r.seconds = seconds_since(t0);
  r.pass = rr_mismatch == 0 && worst_ndcg < 1e-9;
  r.detail = std::to_string(trials) + " random matrices: RR mismatches " + std::to_string(rr_mismatch) +
             ", max |dNDCG| " + sci(worst_ndcg);
  return r;
}

CheckResult check_closed_form_losses() {
  const auto t0 = Clock::now();
  double worst_nce = 0.0;
  for (int b : {2, 3, 16, 64}) {
    for (double v : {-1.3, 0.0, 0.7}) {
      const Mat sim = Mat::Constant(b, b, v);
      worst_nce = std::max({worst_nce, std::abs(infonce_s2t(sim, 0.1) - std::log(b)),
                            std::abs(infonce_t2s(sim, 0.1) - std::log(b))});
    }
  }
  double worst_seg = 0.0;
  for (int k : {2, 5, 17}) {
    const Mat logits = Mat::Constant(k, 40, 0.25);
    std::vector<int> labels(40);
    for (int p = 0; p < 40; ++p) labels[static_cast<std::size_t>(p)] = p % k;
    worst_seg = std::max(worst_seg, std::abs(partforge::seg_cross_entropy(logits, labels) - std::log(k)));
  }
  CheckResult r;
  r.name = "closed-form-losses";
  r.seconds = seconds_since(t0);
  r.pass = worst_nce < 1e-9 && worst_seg < 1e-9;
  r.detail = "max |InfoNCE - ln B| " + sci(worst_nce) + ", max |L_SEG - ln K| " + sci(worst_seg);
  return r;
}

}  // namespace partforge::oracle
