#include "partforge/objective.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "partforge/rng.hpp"

namespace partforge {

namespace {

double log_sum_exp(const Vec& x) {
  const double m = x.maxCoeff();
  return m + std::log((x.array() - m).exp().sum());
}

Vec softmax(const Vec& x) {
  const Vec e = (x.array() - x.maxCoeff()).exp().matrix();
  return e / e.sum();
}

void require_square(const Mat& sim, const char* who) {
  if (sim.rows() != sim.cols() || sim.rows() == 0) {
    throw std::invalid_argument(std::string(who) + ": similarity matrix must be square and non-empty");
  }
}

// Row-wise InfoNCE with diagonal targets; grad is accumulated in row layout.
double infonce_rows(const Mat& sim, double tau, Mat* grad) {
  if (!(tau > 0.0)) throw std::invalid_argument("infonce: tau must be positive");
  const Eigen::Index b = sim.rows();
  double loss = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const Vec logits = sim.row(i).transpose() / tau;
    loss += log_sum_exp(logits) - logits(i);
    if (grad) {
      Vec g = softmax(logits);
      g(i) -= 1.0;
      grad->row(i) += (g / (tau * static_cast<double>(b))).transpose();
    }
  }
  return loss / static_cast<double>(b);
}

// One retrieval direction of the semi-hard triplet loss, anchors on rows.
double triplet_rows(const Mat& sim, double margin, double scale, Mat* grad) {
  const Eigen::Index b = sim.rows();
  double loss = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const double pos = sim(i, i);
    Eigen::Index semi = -1;
    Eigen::Index hardest = -1;
    for (Eigen::Index j = 0; j < b; ++j) {
      if (j == i) continue;
      if (hardest < 0 || sim(i, j) > sim(i, hardest)) hardest = j;
      if (sim(i, j) < pos + margin && (semi < 0 || sim(i, j) > sim(i, semi))) semi = j;
    }
    const Eigen::Index neg = semi >= 0 ? semi : hardest;
    const double h = sim(i, neg) - pos + margin;
    if (h > 0.0) {
      loss += h;
      if (grad) {
        (*grad)(i, neg) += scale;
        (*grad)(i, i) -= scale;
      }
    }
  }
  return loss * scale;
}

}  // namespace

double infonce_s2t(const Mat& sim, double tau, Mat* grad) {
  require_square(sim, "infonce_s2t");
  return infonce_rows(sim, tau, grad);
}

double infonce_t2s(const Mat& sim, double tau, Mat* grad) {
  require_square(sim, "infonce_t2s");
  if (!grad) return infonce_rows(sim.transpose(), tau, nullptr);
  Mat gt = Mat::Zero(sim.cols(), sim.rows());
  const double loss = infonce_rows(sim.transpose(), tau, &gt);
  *grad += gt.transpose();
  return loss;
}

double seg_cross_entropy(const Mat& logits, std::span<const int> labels, Mat* grad) {
  const Eigen::Index np = logits.cols();
  if (np == 0 || static_cast<std::size_t>(np) != labels.size()) {
    throw std::invalid_argument("seg_cross_entropy: one label per point required");
  }
  double loss = 0.0;
  for (Eigen::Index p = 0; p < np; ++p) {
    const int l = labels[static_cast<std::size_t>(p)];
    if (l < 0 || l >= logits.rows()) {
      throw std::invalid_argument("seg_cross_entropy: label " + std::to_string(l) +
                                  " outside [0, " + std::to_string(logits.rows()) + ")");
    }
    const Vec col = logits.col(p);
    loss += log_sum_exp(col) - col(l);
    if (grad) {
      Vec g = softmax(col);
      g(l) -= 1.0;
      grad->col(p) += g / static_cast<double>(np);
    }
  }
  return loss / static_cast<double>(np);
}

double semi_hard_triplet(const Mat& sim, double margin, Mat* grad) {
  require_square(sim, "semi_hard_triplet");
  if (sim.rows() < 2) throw std::invalid_argument("semi_hard_triplet: needs B >= 2");
  const double scale = 1.0 / (2.0 * static_cast<double>(sim.rows()));
  double loss = triplet_rows(sim, margin, scale, grad);
  if (!grad) return loss + triplet_rows(sim.transpose(), margin, scale, nullptr);
  Mat gt = Mat::Zero(sim.cols(), sim.rows());
  loss += triplet_rows(sim.transpose(), margin, scale, &gt);
  *grad += gt.transpose();
  return loss;
}

double total_loss(const LossComponents& parts, const LossToggles& toggles) {
  double total = 0.0;
  const std::pair<const char*, std::pair<bool, double>> terms[] = {
      {"L_SEG", {toggles.seg, parts.seg}},
      {"L_S2T", {toggles.s2t, parts.s2t}},
      {"L_T2S", {toggles.t2s, parts.t2s}}};
  for (const auto& [name, term] : terms) {
    if (!term.first) continue;
    if (!std::isfinite(term.second)) throw std::runtime_error(std::string(name) + " is not finite");
    total += term.second;
  }
  return total;
}

// ---------------------------------------------------------------------------

AdamState AdamState::zeros_like(const ModelParams& params) {
  AdamState s;
  s.m = ModelParams::zeros(params.dims);
  s.v = ModelParams::zeros(params.dims);
  return s;
}

double global_norm(const ModelParams& grads) {
  double sq = 0.0;
  for (const auto& [name, m] : grads.tensors()) sq += m->squaredNorm();
  return std::sqrt(sq);
}

double adam_step(ModelParams& params, ModelParams& grads, AdamState& state, double lr, double clip,
                 const AdamOptions& opts) {
  if (!(grads.dims == params.dims) || !(state.m.dims == params.dims) ||
      !(state.v.dims == params.dims)) {
    throw std::invalid_argument("adam_step: parameter, gradient and state shapes differ");
  }
  const double norm = global_norm(grads);
  if (clip > 0.0 && norm > clip) {
    const double s = clip / norm;
    for (auto& [name, m] : grads.tensors()) *m *= s;
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(opts.beta1, t);
  const double c2 = 1.0 - std::pow(opts.beta2, t);
  auto p = params.tensors();
  auto g = grads.tensors();
  auto m = state.m.tensors();
  auto v = state.v.tensors();
  for (std::size_t k = 0; k < p.size(); ++k) {
    Mat& pk = *p[k].second;
    const Mat& gk = *g[k].second;
    Mat& mk = *m[k].second;
    Mat& vk = *v[k].second;
    mk = opts.beta1 * mk + (1.0 - opts.beta1) * gk;
    vk = opts.beta2 * vk + (1.0 - opts.beta2) * gk.cwiseProduct(gk);
    pk.array() -= lr * (mk.array() / c1) / ((vk.array() / c2).sqrt() + opts.eps);
  }
  return norm;
}

// ---------------------------------------------------------------------------

const char* to_string(SimilarityMode m) { return m == SimilarityMode::emd ? "emd" : "cosine"; }
const char* to_string(LossMode m) { return m == LossMode::infonce ? "infonce" : "triplet"; }

SimilarityMode similarity_mode_from_string(const std::string& s) {
  if (s == "emd") return SimilarityMode::emd;
  if (s == "cosine") return SimilarityMode::cosine;
  throw std::invalid_argument("unknown similarity mode '" + s + "' (emd|cosine)");
}

LossMode loss_mode_from_string(const std::string& s) {
  if (s == "infonce") return LossMode::infonce;
  if (s == "triplet") return LossMode::triplet;
  throw std::invalid_argument("unknown loss mode '" + s + "' (infonce|triplet)");
}

BatchResult batch_loss(const ModelParams& params, std::span<const TrainingItem> items,
                       const LossConfig& cfg, bool with_grad, Exec exec) {
  const std::size_t b = items.size();
  if (b == 0) throw std::invalid_argument("batch_loss: empty batch");
  if (cfg.loss == LossMode::triplet && b < 2) throw std::invalid_argument("batch_loss: triplet needs B >= 2");

  std::vector<ShapeEncoding> shapes(b);
  std::vector<TextEncoding> texts(b);
  for_each_index(2 * b, exec, [&](std::size_t k) {
    if (k < b) {
      if (!items[k].shape.has_labels()) throw std::invalid_argument("batch_loss: shapes need part labels");
      shapes[k] = encode_shape(items[k].shape, params);
    } else {
      texts[k - b] = encode_text(items[k - b].tokens, params);
    }
  });

  const auto bi = static_cast<Eigen::Index>(b);
  BatchResult out;
  out.sim.resize(bi, bi);
  std::vector<PairForward> cells(cfg.similarity == SimilarityMode::emd && with_grad ? b * b : 0);
  for_each_index(b * b, exec, [&](std::size_t cell) {
    const std::size_t i = cell / b;
    const std::size_t j = cell % b;
    const Mat& s = shapes[i].part_features;
    const Mat& w = texts[j].word_features;
    double v = 0.0;
    if (cfg.similarity == SimilarityMode::cosine) {
      v = cosine_global_similarity(s, w);
    } else if (with_grad) {
      cells[cell] = pair_similarity_forward(s, w, cfg.sinkhorn);
      v = cells[cell].similarity;
    } else {
      v = pair_similarity(s, w, cfg.sinkhorn);
    }
    out.sim(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
  });

  Mat d_sim = Mat::Zero(bi, bi);
  Mat* dsp = with_grad ? &d_sim : nullptr;
  if (cfg.loss == LossMode::infonce) {
    if (cfg.toggles.s2t) out.parts.s2t = infonce_s2t(out.sim, cfg.tau, dsp);
    if (cfg.toggles.t2s) out.parts.t2s = infonce_t2s(out.sim, cfg.tau, dsp);
  } else {
    // Each direction's share of the semi-hard triplet average.
    const double scale = 1.0 / (2.0 * static_cast<double>(b));
    if (cfg.toggles.s2t) out.parts.s2t = triplet_rows(out.sim, cfg.margin, scale, dsp);
    if (cfg.toggles.t2s) {
      Mat gt = Mat::Zero(bi, bi);
      out.parts.t2s = triplet_rows(out.sim.transpose(), cfg.margin, scale, with_grad ? &gt : nullptr);
      if (with_grad) d_sim += gt.transpose();
    }
  }

  std::vector<Mat> d_logits(b);
  if (cfg.toggles.seg) {
    double seg = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      Mat* g = nullptr;
      if (with_grad) {
        d_logits[i] = Mat::Zero(shapes[i].seg_logits.rows(), shapes[i].seg_logits.cols());
        g = &d_logits[i];
      }
      seg += seg_cross_entropy(shapes[i].seg_logits, shapes[i].cache.labels, g);
    }
    out.parts.seg = seg / static_cast<double>(b);
    if (with_grad) {
      for (auto& g : d_logits) g /= static_cast<double>(b);
    }
  }
  out.total = total_loss(out.parts, cfg.toggles);
  if (!with_grad) return out;

  // Per-cell feature gradients, then reduced in a fixed order.
  std::vector<Mat> ds_cell(b * b);
  std::vector<Mat> dw_cell(b * b);
  for_each_index(b * b, exec, [&](std::size_t cell) {
    const std::size_t i = cell / b;
    const std::size_t j = cell % b;
    const Mat& s = shapes[i].part_features;
    const Mat& w = texts[j].word_features;
    ds_cell[cell] = Mat::Zero(s.rows(), s.cols());
    dw_cell[cell] = Mat::Zero(w.rows(), w.cols());
    const double g = d_sim(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    if (g == 0.0) return;
    if (cfg.similarity == SimilarityMode::cosine) {
      cosine_global_backward(s, w, g, ds_cell[cell], dw_cell[cell]);
    } else {
      pair_similarity_backward(cells[cell], s, w, g, ds_cell[cell], dw_cell[cell]);
    }
  });

  std::vector<ModelParams> item_grads(2 * b);
  for_each_index(2 * b, exec, [&](std::size_t k) {
    item_grads[k] = ModelParams::zeros(params.dims);
    if (k < b) {
      Mat ds = Mat::Zero(shapes[k].part_features.rows(), shapes[k].part_features.cols());
      for (std::size_t j = 0; j < b; ++j) ds += ds_cell[k * b + j];
      backward_shape(shapes[k].cache, ds, d_logits[k], params, item_grads[k]);
    } else {
      const std::size_t j = k - b;
      Mat dw = Mat::Zero(texts[j].word_features.rows(), texts[j].word_features.cols());
      for (std::size_t i = 0; i < b; ++i) dw += dw_cell[i * b + j];
      backward_text(texts[j].cache, dw, params, item_grads[k]);
    }
  });
  out.grads = ModelParams::zeros(params.dims);
  for (const auto& g : item_grads) out.grads.add_scaled(g, 1.0);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::uint64_t> shape_signatures(const ModelParams& params,
                                            std::span<const TrainingItem> items) {
  std::vector<std::uint64_t> sig;
  for (const auto& it : items) sig.push_back(branch_signature(encode_shape(it.shape, params).cache));
  return sig;
}

}  // namespace

FdReport finite_difference_check(const ModelParams& params, std::span<const TrainingItem> items,
                                 const LossConfig& cfg_in, const FdOptions& opts) {
  LossConfig cfg = cfg_in;
  cfg.sinkhorn.tol = 0.0;
  const BatchResult base = batch_loss(params, items, cfg, true, Exec::serial);
  const auto base_sig = shape_signatures(params, items);

  std::vector<int> used_tokens;
  for (const auto& it : items) used_tokens.insert(used_tokens.end(), it.tokens.begin(), it.tokens.end());
  std::sort(used_tokens.begin(), used_tokens.end());
  used_tokens.erase(std::unique(used_tokens.begin(), used_tokens.end()), used_tokens.end());

  ModelParams probe = params;
  auto probe_tensors = probe.tensors();
  const auto grad_tensors = base.grads.tensors();
  const std::size_t per_tensor =
      (opts.coordinates + probe_tensors.size() - 1) / probe_tensors.size();

  Rng rng = make_rng(opts.seed);
  FdReport report;
  for (std::size_t t = 0; t < probe_tensors.size(); ++t) {
    const std::string& name = probe_tensors[t].first;
    Mat& tensor = *probe_tensors[t].second;
    std::uniform_int_distribution<Eigen::Index> row_d(0, tensor.rows() - 1);
    std::uniform_int_distribution<Eigen::Index> col_d(0, tensor.cols() - 1);
    std::uniform_int_distribution<std::size_t> tok_d(0, used_tokens.empty() ? 0 : used_tokens.size() - 1);
    FdCoordinate worst;
    worst.tensor = name;
    std::size_t done = 0;
    for (std::size_t attempt = 0; done < per_tensor && attempt < per_tensor * 20; ++attempt) {
      const Eigen::Index r = row_d(rng);
      const Eigen::Index c =
          name == "embedding" && !used_tokens.empty() ? used_tokens[tok_d(rng)] : col_d(rng);
      const double orig = tensor(r, c);
      tensor(r, c) = orig + opts.step;
      const double lp = batch_loss(probe, items, cfg, false, Exec::serial).total;
      const bool same_p = shape_signatures(probe, items) == base_sig;
      tensor(r, c) = orig - opts.step;
      const double lm = batch_loss(probe, items, cfg, false, Exec::serial).total;
      const bool same_m = shape_signatures(probe, items) == base_sig;
      tensor(r, c) = orig;
      if (!same_p || !same_m) {
        ++report.skipped;
        continue;
      }
      FdCoordinate fc;
      fc.tensor = name;
      fc.row = r;
      fc.col = c;
      fc.analytic = (*grad_tensors[t].second)(r, c);
      fc.numeric = (lp - lm) / (2.0 * opts.step);
      fc.rel_error = std::abs(fc.analytic - fc.numeric) /
                     std::max({std::abs(fc.analytic), std::abs(fc.numeric), 1e-6});
      if (done == 0 || fc.rel_error > worst.rel_error) worst = fc;
      ++done;
      ++report.checked;
      report.max_rel_error = std::max(report.max_rel_error, fc.rel_error);
    }
    if (done > 0) {
      report.tensors_covered.push_back(name);
      report.worst_per_tensor.push_back(worst);
    }
  }
  return report;
}

std::string format_fd_report(const FdReport& report) {
  std::ostringstream os;
  os << "checked " << report.checked << " coordinates (" << report.skipped
     << " skipped at branch flips), max relative error " << std::scientific << std::setprecision(3)
     << report.max_rel_error << '\n';
  for (const auto& w : report.worst_per_tensor) {
    os << "  " << std::left << std::setw(12) << w.tensor << " [" << w.row << ',' << w.col
       << "] analytic " << w.analytic << " numeric " << w.numeric << " rel " << w.rel_error << '\n';
  }
  return os.str();
}

}  // namespace partforge
