#include "partforge/matching.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace partforge {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_sum_exp(const Vec& x) {
  const double m = x.maxCoeff();
  if (m == kNegInf) return kNegInf;
  return m + std::log((x.array() - m).exp().sum());
}

Vec row_norms(const Mat& m) { return m.rowwise().norm(); }

void check_marginal(const Vec& m, const char* name) {
  if ((m.array() < 0.0).any() || !m.allFinite()) {
    throw std::invalid_argument(std::string("sinkhorn: ") + name + " marginal must be nonnegative");
  }
  if (std::abs(m.sum() - 1.0) > 1e-9) {
    throw std::invalid_argument(std::string("sinkhorn: ") + name + " marginal must sum to 1");
  }
}

Mat plan_from_potentials(const Mat& k, const Vec& u, const Vec& v) {
  Mat x(k.rows(), k.cols());
  for (Eigen::Index j = 0; j < k.cols(); ++j) {
    for (Eigen::Index i = 0; i < k.rows(); ++i) {
      const double e = u(i) + v(j) + k(i, j);
      x(i, j) = e == kNegInf || std::isnan(e) ? 0.0 : std::exp(e);
    }
  }
  return x;
}

// u_i = log r_i - LSE_j(v_j + K_ij)
Vec update_u(const Mat& k, const Vec& log_r, const Vec& v) {
  Vec u(k.rows());
  for (Eigen::Index i = 0; i < k.rows(); ++i) {
    u(i) = log_r(i) == kNegInf ? kNegInf : log_r(i) - log_sum_exp(k.row(i).transpose() + v);
  }
  return u;
}

// v_j = log c_j - LSE_i(u_i + K_ij)
Vec update_v(const Mat& k, const Vec& log_c, const Vec& u) {
  Vec v(k.cols());
  for (Eigen::Index j = 0; j < k.cols(); ++j) {
    v(j) = log_c(j) == kNegInf ? kNegInf : log_c(j) - log_sum_exp(k.col(j) + u);
  }
  return v;
}

// softmax over the entries of x, zero where x is -inf
Vec softmax_or_zero(const Vec& x) {
  const double lse = log_sum_exp(x);
  Vec p(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    p(i) = (x(i) == kNegInf || lse == kNegInf) ? 0.0 : std::exp(x(i) - lse);
  }
  return p;
}

}  // namespace

Mat cost_matrix(const Mat& s, const Mat& w) {
  if (s.cols() != w.cols()) throw std::invalid_argument("cost_matrix: feature widths differ");
  const Vec a = (row_norms(s).array() + kNormGuard).inverse().matrix();
  const Vec b = (row_norms(w).array() + kNormGuard).inverse().matrix();
  return (Mat::Ones(s.rows(), w.rows()) - a.asDiagonal() * (s * w.transpose()) * b.asDiagonal());
}

Vec uniform_marginal(Eigen::Index n) {
  if (n < 1) throw std::invalid_argument("uniform_marginal: empty side");
  return Vec::Constant(n, 1.0 / static_cast<double>(n));
}

TransportPlan sinkhorn(const Mat& cost, const Vec& r, const Vec& c, const SinkhornOptions& opts,
                       SinkhornTrace* trace) {
  if (!cost.allFinite()) throw std::invalid_argument("sinkhorn: non-finite cost");
  if (cost.rows() != r.size() || cost.cols() != c.size() || cost.size() == 0) {
    throw std::invalid_argument("sinkhorn: marginals do not match the cost matrix");
  }
  if (!(opts.epsilon > 0.0)) throw std::invalid_argument("sinkhorn: epsilon must be positive");
  if (opts.max_iter < 1) throw std::invalid_argument("sinkhorn: max_iter must be >= 1");
  check_marginal(r, "row");
  check_marginal(c, "column");

  const Mat k = -cost / opts.epsilon;
  const Vec log_r = r.array().log().matrix();
  const Vec log_c = c.array().log().matrix();
  Vec u = Vec::Zero(r.size());
  Vec v = Vec::Zero(c.size());
  if (trace) {
    trace->u.clear();
    trace->v.clear();
  }

  TransportPlan plan;
  plan.row_marginal = r;
  plan.col_marginal = c;
  plan.epsilon = opts.epsilon;
  for (int it = 1; it <= opts.max_iter; ++it) {
    u = update_u(k, log_r, v);
    v = update_v(k, log_c, u);
    if (trace) {
      trace->u.push_back(u);
      trace->v.push_back(v);
    }
    plan.iterations = it;
    plan.flow = plan_from_potentials(k, u, v);
    plan.residual = std::max((plan.flow.rowwise().sum() - r).cwiseAbs().maxCoeff(),
                             (plan.flow.colwise().sum().transpose() - c).cwiseAbs().maxCoeff());
    if (plan.residual < opts.tol) {
      plan.converged = true;
      break;
    }
  }
  return plan;
}

Mat sinkhorn_backward(const Mat& cost, const TransportPlan& plan, const SinkhornTrace& trace,
                      const Mat& d_flow) {
  const auto t_count = static_cast<int>(trace.u.size());
  if (t_count == 0 || t_count != plan.iterations || trace.v.size() != trace.u.size()) {
    throw std::logic_error("sinkhorn_backward: trace does not match the plan");
  }
  if (d_flow.rows() != cost.rows() || d_flow.cols() != cost.cols()) {
    throw std::invalid_argument("sinkhorn_backward: gradient shape mismatch");
  }
  const Mat k = -cost / plan.epsilon;
  const Eigen::Index n = cost.rows();
  const Eigen::Index m = cost.cols();

  // X = exp(u + v + K)
  const Mat gx = d_flow.cwiseProduct(plan.flow);
  Mat gk = gx;
  Vec gu = gx.rowwise().sum();
  Vec gv = gx.colwise().sum().transpose();

  for (int t = t_count - 1; t >= 0; --t) {
    const Vec& u = trace.u[static_cast<std::size_t>(t)];
    // v_t = log c - LSE_i(u_t + K): derivative -softmax_i
    for (Eigen::Index j = 0; j < m; ++j) {
      if (gv(j) == 0.0) continue;
      const Vec p = softmax_or_zero(k.col(j) + u);
      gu -= gv(j) * p;
      gk.col(j) -= gv(j) * p;
    }
    // u_t = log r - LSE_j(v_{t-1} + K): derivative -softmax_j
    const Vec v_prev = t > 0 ? trace.v[static_cast<std::size_t>(t - 1)] : Vec::Zero(m);
    Vec gv_prev = Vec::Zero(m);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (gu(i) == 0.0) continue;
      const Vec q = softmax_or_zero(k.row(i).transpose() + v_prev);
      gv_prev -= gu(i) * q;
      gk.row(i) -= gu(i) * q.transpose();
    }
    gv = gv_prev;
    gu.setZero();
  }
  return gk / -plan.epsilon;
}

double emd_similarity(const Mat& cost, const Mat& flow) {
  if (cost.rows() != flow.rows() || cost.cols() != flow.cols()) {
    throw std::invalid_argument("emd_similarity: cost and flow shapes differ");
  }
  return -cost.cwiseProduct(flow).sum();
}

PairForward pair_similarity_forward(const Mat& s, const Mat& w, const SinkhornOptions& opts) {
  if (s.rows() < 1 || w.rows() < 1) throw std::invalid_argument("pair_similarity: empty side");
  PairForward f;
  f.cost = cost_matrix(s, w);
  f.s_norm = row_norms(s);
  f.w_norm = row_norms(w);
  f.cosine = Mat::Ones(f.cost.rows(), f.cost.cols()) - f.cost;
  f.plan = sinkhorn(f.cost, uniform_marginal(s.rows()), uniform_marginal(w.rows()), opts, &f.trace);
  f.similarity = emd_similarity(f.cost, f.plan.flow);
  return f;
}

namespace {

// d/dS of sum(gc .* C) with C the guarded cosine cost; rows of `a` against `b`.
Mat cost_grad_side(const Mat& gc, const Mat& cosine, const Mat& a, const Vec& a_norm,
                   const Mat& b, const Vec& b_norm) {
  const Vec inv_a = (a_norm.array() + kNormGuard).inverse().matrix();
  const Vec inv_b = (b_norm.array() + kNormGuard).inverse().matrix();
  const Mat b_hat = inv_b.asDiagonal() * b;
  Mat unit_a = Mat::Zero(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    if (a_norm(i) > 0.0) unit_a.row(i) = a.row(i) / a_norm(i);
  }
  const Vec weight = gc.cwiseProduct(cosine).rowwise().sum();
  return inv_a.asDiagonal() * (-gc * b_hat + weight.asDiagonal() * unit_a);
}

}  // namespace

void pair_similarity_backward(const PairForward& f, const Mat& s, const Mat& w, double g, Mat& ds,
                              Mat& dw) {
  if (ds.rows() != s.rows() || ds.cols() != s.cols() || dw.rows() != w.rows() ||
      dw.cols() != w.cols()) {
    throw std::invalid_argument("pair_similarity_backward: gradient buffers mis-sized");
  }
  if (g == 0.0) return;
  // sim = -sum(C .* X(C))
  Mat gc = -g * f.plan.flow;
  gc += sinkhorn_backward(f.cost, f.plan, f.trace, -g * f.cost);
  ds += cost_grad_side(gc, f.cosine, s, f.s_norm, w, f.w_norm);
  const Mat gct = gc.transpose();
  const Mat cost_t = f.cosine.transpose();
  dw += cost_grad_side(gct, cost_t, w, f.w_norm, s, f.s_norm);
}

double pair_similarity(const Mat& s, const Mat& w, const SinkhornOptions& opts) {
  if (s.rows() < 1 || w.rows() < 1) throw std::invalid_argument("pair_similarity: empty side");
  const Mat c = cost_matrix(s, w);
  const TransportPlan plan = sinkhorn(c, uniform_marginal(s.rows()), uniform_marginal(w.rows()), opts);
  return emd_similarity(c, plan.flow);
}

Mat score_matrix(std::span<const Mat> shapes, std::span<const Mat> texts,
                 const SinkhornOptions& opts, Exec exec) {
  const std::size_t rows = shapes.size();
  const std::size_t cols = texts.size();
  Mat out(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for_each_index(rows * cols, exec, [&](std::size_t cell) {
    const std::size_t i = cell / cols;
    const std::size_t j = cell % cols;
    out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
        pair_similarity(shapes[i], texts[j], opts);
  });
  return out;
}

double cosine_global_similarity(const Mat& s, const Mat& w) {
  if (s.rows() < 1 || w.rows() < 1) throw std::invalid_argument("cosine_global: empty side");
  const Vec ms = s.colwise().mean().transpose();
  const Vec mw = w.colwise().mean().transpose();
  return ms.dot(mw) / ((ms.norm() + kNormGuard) * (mw.norm() + kNormGuard));
}

void cosine_global_backward(const Mat& s, const Mat& w, double g, Mat& ds, Mat& dw) {
  const Vec ms = s.colwise().mean().transpose();
  const Vec mw = w.colwise().mean().transpose();
  const double ns = ms.norm();
  const double nw = mw.norm();
  const double a = ns + kNormGuard;
  const double b = nw + kNormGuard;
  const double cosv = ms.dot(mw) / (a * b);
  Vec gms = mw / (a * b);
  if (ns > 0.0) gms -= cosv / a * ms / ns;
  Vec gmw = ms / (a * b);
  if (nw > 0.0) gmw -= cosv / b * mw / nw;
  ds.rowwise() += (g / static_cast<double>(s.rows()) * gms).transpose();
  dw.rowwise() += (g / static_cast<double>(w.rows()) * gmw).transpose();
}

Mat cosine_score_matrix(std::span<const Mat> shapes, std::span<const Mat> texts, Exec exec) {
  const std::size_t rows = shapes.size();
  const std::size_t cols = texts.size();
  Mat out(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for_each_index(rows * cols, exec, [&](std::size_t cell) {
    const std::size_t i = cell / cols;
    const std::size_t j = cell % cols;
    out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
        cosine_global_similarity(shapes[i], texts[j]);
  });
  return out;
}

}  // namespace partforge
