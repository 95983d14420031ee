#include "partforge/encoders.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include "partforge/rng.hpp"

namespace partforge {

void ModelDims::validate() const {
  if (point_hidden < 1 || point_feat < 1 || feat < 2 || embed < 1 || classes < 1 || vocab < 2) {
    throw std::invalid_argument("model dimensions must be positive (vocab >= 2)");
  }
  if (feat % 2 != 0) throw std::invalid_argument("feature dimension D must be even");
}

ModelParams ModelParams::zeros(const ModelDims& d) {
  d.validate();
  const int h = d.feat / 2;
  ModelParams p;
  p.dims = d;
  p.point_w1 = Mat::Zero(d.point_hidden, 3);
  p.point_b1 = Mat::Zero(d.point_hidden, 1);
  p.point_w2 = Mat::Zero(d.point_feat, d.point_hidden);
  p.point_b2 = Mat::Zero(d.point_feat, 1);
  p.fuse_w1 = Mat::Zero(d.feat, 2 * d.point_feat);
  p.fuse_b1 = Mat::Zero(d.feat, 1);
  p.fuse_w2 = Mat::Zero(d.feat, d.feat);
  p.fuse_b2 = Mat::Zero(d.feat, 1);
  p.seg_w = Mat::Zero(d.classes, d.feat);
  p.seg_b = Mat::Zero(d.classes, 1);
  p.embedding = Mat::Zero(d.embed, d.vocab);
  for (GruWeights* g : {&p.gru_fwd, &p.gru_bwd}) {
    g->w = Mat::Zero(3 * h, d.embed);
    g->u = Mat::Zero(3 * h, h);
    g->b = Mat::Zero(3 * h, 1);
  }
  return p;
}

ModelParams ModelParams::init(const ModelDims& d, std::uint64_t seed) {
  ModelParams p = zeros(d);
  Rng rng = make_rng(seed);
  auto fill = [&rng](Mat& m, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = u(rng);
    }
  };
  auto fan_in = [](const Mat& m) { return 1.0 / std::sqrt(static_cast<double>(m.cols())); };
  for (Mat* w : {&p.point_w1, &p.point_w2, &p.fuse_w1, &p.fuse_w2, &p.seg_w, &p.gru_fwd.w,
                 &p.gru_fwd.u, &p.gru_bwd.w, &p.gru_bwd.u}) {
    fill(*w, fan_in(*w));
  }
  fill(p.embedding, 1.0);
  return p;
}

std::vector<std::pair<std::string, Mat*>> ModelParams::tensors() {
  return {{"point.w1", &point_w1},   {"point.b1", &point_b1},   {"point.w2", &point_w2},
          {"point.b2", &point_b2},   {"fuse.w1", &fuse_w1},     {"fuse.b1", &fuse_b1},
          {"fuse.w2", &fuse_w2},     {"fuse.b2", &fuse_b2},     {"seg.w", &seg_w},
          {"seg.b", &seg_b},         {"embedding", &embedding}, {"gru_fwd.w", &gru_fwd.w},
          {"gru_fwd.u", &gru_fwd.u}, {"gru_fwd.b", &gru_fwd.b}, {"gru_bwd.w", &gru_bwd.w},
          {"gru_bwd.u", &gru_bwd.u}, {"gru_bwd.b", &gru_bwd.b}};
}

std::vector<std::pair<std::string, const Mat*>> ModelParams::tensors() const {
  std::vector<std::pair<std::string, const Mat*>> out;
  for (auto& [name, m] : const_cast<ModelParams*>(this)->tensors()) out.emplace_back(name, m);
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, m] : tensors()) n += static_cast<std::size_t>(m->size());
  return n;
}

bool ModelParams::all_finite() const {
  for (const auto& [name, m] : tensors()) {
    if (!m->allFinite()) return false;
  }
  return true;
}

void ModelParams::set_zero() {
  for (auto& [name, m] : tensors()) m->setZero();
}

void ModelParams::add_scaled(const ModelParams& other, double scale) {
  auto mine = tensors();
  auto theirs = other.tensors();
  for (std::size_t i = 0; i < mine.size(); ++i) *mine[i].second += scale * *theirs[i].second;
}

// ---------------------------------------------------------------------------

Vocab::Vocab() {
  add("<pad>");
  add("<unk>");
}

void Vocab::add(std::string token) {
  if (ids_.count(token)) return;
  ids_.emplace(token, static_cast<int>(tokens_.size()));
  tokens_.push_back(std::move(token));
}

Vocab Vocab::build(std::span<const std::string> texts) {
  std::set<std::string> words;
  for (const auto& t : texts) {
    for (auto& w : normalize_words(t)) words.insert(std::move(w));
  }
  Vocab v;
  for (const auto& w : words) v.add(w);
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open vocab " + path.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  if (lines.size() < 2 || lines[0] != "<pad>" || lines[1] != "<unk>") {
    throw std::runtime_error(path.string() + ": vocab must start with <pad> and <unk>");
  }
  Vocab v;
  for (std::size_t i = 2; i < lines.size(); ++i) {
    if (lines[i].empty() || v.ids_.count(lines[i])) {
      throw std::runtime_error(path.string() + ": empty or duplicate token at line " +
                               std::to_string(i + 1));
    }
    v.add(lines[i]);
  }
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

int Vocab::id(std::string_view token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

std::vector<std::string> normalize_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c) || std::ispunct(c)) {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

std::vector<int> tokenize(std::string_view text, const Vocab& vocab) {
  std::vector<int> ids;
  for (const auto& w : normalize_words(text)) ids.push_back(vocab.id(w));
  if (ids.empty()) ids.push_back(Vocab::kUnk);
  return ids;
}

// ---------------------------------------------------------------------------

namespace {

Mat relu(const Mat& z) { return z.cwiseMax(0.0); }

Mat relu_mask(const Mat& z) { return (z.array() > 0.0).cast<double>().matrix(); }

}  // namespace

ShapeEncoding encode_shape(const PointCloud& cloud, const ModelParams& params) {
  if (cloud.empty()) throw std::invalid_argument("encode_shape: empty point cloud");
  cloud.validate();
  const auto& d = params.dims;
  const Eigen::Index np = static_cast<Eigen::Index>(cloud.size());

  ShapeEncoding out;
  ShapeCache& c = out.cache;
  c.points.resize(3, np);
  for (Eigen::Index i = 0; i < np; ++i) c.points.col(i) = cloud.points[static_cast<std::size_t>(i)];

  c.z1 = params.point_w1 * c.points;
  c.z1.colwise() += params.point_b1.col(0);
  c.a1 = relu(c.z1);
  c.z2 = params.point_w2 * c.a1;
  c.z2.colwise() += params.point_b2.col(0);
  c.a2 = relu(c.z2);

  // Global max-pool; ties go to the lowest point index.
  out.global.resize(d.point_feat);
  c.argmax.resize(d.point_feat);
  for (int ch = 0; ch < d.point_feat; ++ch) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < np; ++i) {
      if (c.a2(ch, i) > c.a2(ch, best)) best = i;
    }
    c.argmax(ch) = static_cast<int>(best);
    out.global(ch) = c.a2(ch, best);
  }

  c.fused_in.resize(2 * d.point_feat, np);
  c.fused_in.topRows(d.point_feat) = c.a2;
  c.fused_in.bottomRows(d.point_feat) = out.global.replicate(1, np);
  c.z3 = params.fuse_w1 * c.fused_in;
  c.z3.colwise() += params.fuse_b1.col(0);
  c.a3 = relu(c.z3);
  c.y = params.fuse_w2 * c.a3;
  c.y.colwise() += params.fuse_b2.col(0);

  out.seg_logits = params.seg_w * c.y;
  out.seg_logits.colwise() += params.seg_b.col(0);

  c.labels.resize(static_cast<std::size_t>(np));
  if (cloud.has_labels()) {
    for (Eigen::Index i = 0; i < np; ++i) {
      const int l = cloud.labels[static_cast<std::size_t>(i)];
      if (l < 0 || l >= d.classes) {
        throw std::invalid_argument("encode_shape: label " + std::to_string(l) +
                                    " outside [0, " + std::to_string(d.classes) + ")");
      }
      c.labels[static_cast<std::size_t>(i)] = l;
    }
  } else {
    for (Eigen::Index i = 0; i < np; ++i) {
      Eigen::Index best = 0;
      for (Eigen::Index k = 1; k < out.seg_logits.rows(); ++k) {
        if (out.seg_logits(k, i) > out.seg_logits(best, i)) best = k;
      }
      c.labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
    }
  }

  std::vector<std::vector<int>> members(static_cast<std::size_t>(d.classes));
  for (Eigen::Index i = 0; i < np; ++i) {
    members[static_cast<std::size_t>(c.labels[static_cast<std::size_t>(i)])].push_back(
        static_cast<int>(i));
  }
  for (int l = 0; l < d.classes; ++l) {
    if (members[static_cast<std::size_t>(l)].empty()) continue;
    c.group_labels.push_back(l);
    c.group_members.push_back(std::move(members[static_cast<std::size_t>(l)]));
  }

  out.part_features.resize(static_cast<Eigen::Index>(c.group_labels.size()), d.feat);
  for (std::size_t g = 0; g < c.group_members.size(); ++g) {
    Vec sum = Vec::Zero(d.feat);
    for (int i : c.group_members[g]) sum += c.y.col(i);
    out.part_features.row(static_cast<Eigen::Index>(g)) =
        (sum / static_cast<double>(c.group_members[g].size())).transpose();
  }
  return out;
}

void backward_shape(const ShapeCache& c, const Mat& d_part_features, const Mat& d_seg_logits,
                    const ModelParams& params, ModelParams& grads) {
  if (c.points.cols() == 0 || c.y.cols() != c.points.cols()) {
    throw std::logic_error("backward_shape: missing forward cache");
  }
  const auto& d = params.dims;
  const Eigen::Index np = c.points.cols();
  if (d_part_features.rows() != static_cast<Eigen::Index>(c.group_members.size()) ||
      d_part_features.cols() != d.feat) {
    throw std::invalid_argument("backward_shape: part-feature gradient has the wrong shape");
  }

  Mat dy = Mat::Zero(d.feat, np);
  for (std::size_t g = 0; g < c.group_members.size(); ++g) {
    const Vec share = d_part_features.row(static_cast<Eigen::Index>(g)).transpose() /
                      static_cast<double>(c.group_members[g].size());
    for (int i : c.group_members[g]) dy.col(i) += share;
  }
  if (d_seg_logits.size() > 0) {
    if (d_seg_logits.rows() != d.classes || d_seg_logits.cols() != np) {
      throw std::invalid_argument("backward_shape: logit gradient has the wrong shape");
    }
    grads.seg_w += d_seg_logits * c.y.transpose();
    grads.seg_b += d_seg_logits.rowwise().sum();
    dy += params.seg_w.transpose() * d_seg_logits;
  }

  grads.fuse_w2 += dy * c.a3.transpose();
  grads.fuse_b2 += dy.rowwise().sum();
  const Mat dz3 = (params.fuse_w2.transpose() * dy).cwiseProduct(relu_mask(c.z3));
  grads.fuse_w1 += dz3 * c.fused_in.transpose();
  grads.fuse_b1 += dz3.rowwise().sum();
  const Mat d_fused = params.fuse_w1.transpose() * dz3;

  Mat da2 = d_fused.topRows(d.point_feat);
  const Vec d_global = d_fused.bottomRows(d.point_feat).rowwise().sum();
  for (int ch = 0; ch < d.point_feat; ++ch) da2(ch, c.argmax(ch)) += d_global(ch);

  const Mat dz2 = da2.cwiseProduct(relu_mask(c.z2));
  grads.point_w2 += dz2 * c.a1.transpose();
  grads.point_b2 += dz2.rowwise().sum();
  const Mat dz1 = (params.point_w2.transpose() * dz2).cwiseProduct(relu_mask(c.z1));
  grads.point_w1 += dz1 * c.points.transpose();
  grads.point_b1 += dz1.rowwise().sum();
}

// ---------------------------------------------------------------------------

namespace {

Vec sigmoid(const Vec& x) { return (1.0 / (1.0 + (-x.array()).exp())).matrix(); }

GruStep gru_forward(const GruWeights& g, const Vec& x, const Vec& h_prev) {
  const Eigen::Index h = h_prev.size();
  const Vec a = g.w * x + g.b.col(0);
  GruStep s;
  s.h_prev = h_prev;
  s.z = sigmoid(a.segment(0, h) + g.u.middleRows(0, h) * h_prev);
  s.r = sigmoid(a.segment(h, h) + g.u.middleRows(h, h) * h_prev);
  s.n = (a.segment(2 * h, h) + g.u.middleRows(2 * h, h) * s.r.cwiseProduct(h_prev))
            .array()
            .tanh()
            .matrix();
  s.h = (Vec::Ones(h) - s.z).cwiseProduct(h_prev) + s.z.cwiseProduct(s.n);
  return s;
}

// Returns dL/dh_prev; accumulates weight gradients and writes dL/dx.
Vec gru_backward(const GruWeights& g, const GruStep& s, const Vec& x, const Vec& dh,
                 GruWeights& grad, Vec& dx) {
  const Eigen::Index h = dh.size();
  const Vec ones = Vec::Ones(h);
  const Vec dz = dh.cwiseProduct(s.n - s.h_prev);
  const Vec dn = dh.cwiseProduct(s.z);
  Vec dh_prev = dh.cwiseProduct(ones - s.z);

  const Vec dn_pre = dn.cwiseProduct(ones - s.n.cwiseProduct(s.n));
  const Vec rh = s.r.cwiseProduct(s.h_prev);
  grad.u.middleRows(2 * h, h) += dn_pre * rh.transpose();
  const Vec drh = g.u.middleRows(2 * h, h).transpose() * dn_pre;
  const Vec dr = drh.cwiseProduct(s.h_prev);
  dh_prev += drh.cwiseProduct(s.r);

  const Vec dz_pre = dz.cwiseProduct(s.z.cwiseProduct(ones - s.z));
  const Vec dr_pre = dr.cwiseProduct(s.r.cwiseProduct(ones - s.r));
  grad.u.middleRows(0, h) += dz_pre * s.h_prev.transpose();
  grad.u.middleRows(h, h) += dr_pre * s.h_prev.transpose();
  dh_prev += g.u.middleRows(0, h).transpose() * dz_pre + g.u.middleRows(h, h).transpose() * dr_pre;

  Vec da(3 * h);
  da << dz_pre, dr_pre, dn_pre;
  grad.w += da * x.transpose();
  grad.b.col(0) += da;
  dx = g.w.transpose() * da;
  return dh_prev;
}

}  // namespace

TextEncoding encode_text(std::span<const int> tokens, const ModelParams& params) {
  if (tokens.empty()) throw std::invalid_argument("encode_text: no tokens");
  const auto& d = params.dims;
  const int h = d.feat / 2;
  const auto m = static_cast<Eigen::Index>(tokens.size());

  TextEncoding out;
  TextCache& c = out.cache;
  c.tokens.assign(tokens.begin(), tokens.end());
  c.x.resize(d.embed, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const int t = tokens[static_cast<std::size_t>(i)];
    if (t < 0 || t >= d.vocab) {
      throw std::invalid_argument("encode_text: token id " + std::to_string(t) +
                                  " outside vocabulary of size " + std::to_string(d.vocab));
    }
    c.x.col(i) = params.embedding.col(t);
  }

  c.fwd.resize(static_cast<std::size_t>(m));
  c.bwd.resize(static_cast<std::size_t>(m));
  Vec state = Vec::Zero(h);
  for (Eigen::Index i = 0; i < m; ++i) {
    c.fwd[static_cast<std::size_t>(i)] = gru_forward(params.gru_fwd, c.x.col(i), state);
    state = c.fwd[static_cast<std::size_t>(i)].h;
  }
  state = Vec::Zero(h);
  for (Eigen::Index i = m - 1; i >= 0; --i) {
    c.bwd[static_cast<std::size_t>(i)] = gru_forward(params.gru_bwd, c.x.col(i), state);
    state = c.bwd[static_cast<std::size_t>(i)].h;
  }

  out.word_features.resize(m, d.feat);
  for (Eigen::Index i = 0; i < m; ++i) {
    out.word_features.row(i).head(h) = c.fwd[static_cast<std::size_t>(i)].h.transpose();
    out.word_features.row(i).tail(h) = c.bwd[static_cast<std::size_t>(i)].h.transpose();
  }
  return out;
}

void backward_text(const TextCache& c, const Mat& d_word_features, const ModelParams& params,
                   ModelParams& grads) {
  if (c.tokens.empty() || c.fwd.size() != c.tokens.size()) {
    throw std::logic_error("backward_text: missing forward cache");
  }
  const int h = params.dims.feat / 2;
  const auto m = static_cast<Eigen::Index>(c.tokens.size());
  if (d_word_features.rows() != m || d_word_features.cols() != params.dims.feat) {
    throw std::invalid_argument("backward_text: gradient has the wrong shape");
  }

  Mat dx = Mat::Zero(params.dims.embed, m);
  Vec dx_step;
  Vec carry = Vec::Zero(h);
  for (Eigen::Index i = m - 1; i >= 0; --i) {
    const Vec dh = d_word_features.row(i).head(h).transpose() + carry;
    carry = gru_backward(params.gru_fwd, c.fwd[static_cast<std::size_t>(i)], c.x.col(i), dh,
                         grads.gru_fwd, dx_step);
    dx.col(i) += dx_step;
  }
  carry = Vec::Zero(h);
  for (Eigen::Index i = 0; i < m; ++i) {
    const Vec dh = d_word_features.row(i).tail(h).transpose() + carry;
    carry = gru_backward(params.gru_bwd, c.bwd[static_cast<std::size_t>(i)], c.x.col(i), dh,
                         grads.gru_bwd, dx_step);
    dx.col(i) += dx_step;
  }
  for (Eigen::Index i = 0; i < m; ++i) grads.embedding.col(c.tokens[static_cast<std::size_t>(i)]) += dx.col(i);
}

std::uint64_t branch_signature(const ShapeCache& c) {
  std::uint64_t hash = 1469598103934665603ULL;
  auto mix = [&hash](std::uint64_t v) {
    hash ^= v;
    hash *= 1099511628211ULL;
  };
  for (const Mat* z : {&c.z1, &c.z2, &c.z3}) {
    for (Eigen::Index i = 0; i < z->size(); ++i) mix((*z)(i) > 0.0 ? 1u : 0u);
  }
  for (Eigen::Index i = 0; i < c.argmax.size(); ++i) mix(static_cast<std::uint64_t>(c.argmax(i)));
  return hash;
}

}  // namespace partforge
