#include "partforge/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace partforge {

RetrievalGround RetrievalGround::from_owners(std::span<const int> owner, std::size_t n_shapes) {
  RetrievalGround g;
  g.shape_to_captions.resize(n_shapes);
  g.caption_to_shape.assign(owner.begin(), owner.end());
  for (std::size_t k = 0; k < owner.size(); ++k) {
    if (owner[k] < 0 || static_cast<std::size_t>(owner[k]) >= n_shapes) {
      throw std::invalid_argument("caption " + std::to_string(k) + " names a missing shape");
    }
    g.shape_to_captions[static_cast<std::size_t>(owner[k])].push_back(static_cast<int>(k));
  }
  return g;
}

RetrievalGround RetrievalGround::one_to_one(std::size_t n) {
  std::vector<int> owner(n);
  for (std::size_t i = 0; i < n; ++i) owner[i] = static_cast<int>(i);
  return from_owners(owner, n);
}

void RetrievalGround::validate() const {
  for (std::size_t s = 0; s < shape_to_captions.size(); ++s) {
    if (shape_to_captions[s].empty()) {
      throw std::invalid_argument("shape " + std::to_string(s) + " has no caption");
    }
    for (int c : shape_to_captions[s]) {
      if (c < 0 || static_cast<std::size_t>(c) >= caption_to_shape.size() ||
          caption_to_shape[static_cast<std::size_t>(c)] != static_cast<int>(s)) {
        throw std::invalid_argument("ground truth is inconsistent for shape " + std::to_string(s));
      }
    }
  }
}

Relevance RetrievalGround::t2s() const {
  Relevance r;
  r.reserve(caption_to_shape.size());
  for (int s : caption_to_shape) r.push_back({s});
  return r;
}

namespace {

// Zero-based rank of gallery item g for query row q.
std::size_t rank_of(const Mat& scores, Eigen::Index q, Eigen::Index g) {
  const double v = scores(q, g);
  std::size_t rank = 0;
  for (Eigen::Index j = 0; j < scores.cols(); ++j) {
    const double o = scores(q, j);
    if (o > v || (o == v && j < g)) ++rank;
  }
  return rank;
}

void check_inputs(const Mat& scores, const Relevance& relevant, int k) {
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  if (static_cast<std::size_t>(scores.rows()) != relevant.size()) {
    throw std::invalid_argument("one relevance list per query required");
  }
  if (scores.rows() == 0) throw std::invalid_argument("no queries");
  if (scores.array().isNaN().any()) throw std::invalid_argument("score matrix contains NaN");
  for (std::size_t q = 0; q < relevant.size(); ++q) {
    if (relevant[q].empty()) {
      throw std::invalid_argument("query " + std::to_string(q) + " has no relevant item");
    }
    for (int g : relevant[q]) {
      if (g < 0 || g >= scores.cols()) {
        throw std::invalid_argument("query " + std::to_string(q) + " names a missing gallery item");
      }
    }
  }
}

}  // namespace

double rr_at_k(const Mat& scores, const Relevance& relevant, int k) {
  check_inputs(scores, relevant, k);
  std::size_t hits = 0;
  for (std::size_t q = 0; q < relevant.size(); ++q) {
    for (int g : relevant[q]) {
      if (rank_of(scores, static_cast<Eigen::Index>(q), g) < static_cast<std::size_t>(k)) {
        ++hits;
        break;
      }
    }
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(relevant.size());
}

double ndcg_at_k(const Mat& scores, const Relevance& relevant, int k) {
  check_inputs(scores, relevant, k);
  double sum = 0.0;
  for (std::size_t q = 0; q < relevant.size(); ++q) {
    std::vector<int> rel = relevant[q];
    std::sort(rel.begin(), rel.end());
    rel.erase(std::unique(rel.begin(), rel.end()), rel.end());
    double dcg = 0.0;
    for (int g : rel) {
      const std::size_t r = rank_of(scores, static_cast<Eigen::Index>(q), g);
      if (r < static_cast<std::size_t>(k)) dcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
    }
    double idcg = 0.0;
    const std::size_t ideal = std::min(rel.size(), static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < ideal; ++i) idcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
    sum += dcg / idcg;
  }
  return 100.0 * sum / static_cast<double>(relevant.size());
}

MetricsReport metrics_for(const Mat& scores, const Relevance& relevant, std::string direction) {
  MetricsReport m;
  m.direction = std::move(direction);
  m.rr1 = rr_at_k(scores, relevant, 1);
  m.rr5 = rr_at_k(scores, relevant, 5);
  m.ndcg5 = ndcg_at_k(scores, relevant, 5);
  m.queries = static_cast<std::size_t>(scores.rows());
  m.gallery = static_cast<std::size_t>(scores.cols());
  return m;
}

Mat gallery_scores(const ModelParams& params, std::span<const PointCloud> shapes,
                   std::span<const std::vector<int>> captions, const EvalOptions& opts) {
  if (shapes.empty() || captions.empty()) throw std::invalid_argument("evaluate: empty gallery");
  std::vector<Mat> parts(shapes.size());
  std::vector<Mat> words(captions.size());
  for_each_index(shapes.size() + captions.size(), opts.exec, [&](std::size_t k) {
    if (k < shapes.size()) {
      parts[k] = encode_shape(shapes[k], params).part_features;
    } else {
      words[k - shapes.size()] = encode_text(captions[k - shapes.size()], params).word_features;
    }
  });

  const auto rows = static_cast<Eigen::Index>(shapes.size());
  const auto cols = static_cast<Eigen::Index>(captions.size());
  const auto chunk = static_cast<Eigen::Index>(std::max<std::size_t>(1, opts.chunk_rows));
  Mat scores(rows, cols);
  for (Eigen::Index r0 = 0; r0 < rows; r0 += chunk) {
    const Eigen::Index n = std::min(chunk, rows - r0);
    const std::span<const Mat> block(parts.data() + r0, static_cast<std::size_t>(n));
    scores.middleRows(r0, n) = opts.similarity == SimilarityMode::emd
                                   ? score_matrix(block, words, opts.sinkhorn, opts.exec)
                                   : cosine_score_matrix(block, words, opts.exec);
  }
  return scores;
}

EvalReport evaluate(const ModelParams& params, std::span<const PointCloud> shapes,
                    std::span<const std::vector<int>> captions, const RetrievalGround& ground,
                    const EvalOptions& opts, const std::string& checkpoint_id) {
  ground.validate();
  if (ground.shape_to_captions.size() != shapes.size() ||
      ground.caption_to_shape.size() != captions.size()) {
    throw std::invalid_argument("evaluate: ground truth does not match the gallery size");
  }
  const Mat scores = gallery_scores(params, shapes, captions, opts);
  EvalReport r;
  r.s2t = metrics_for(scores, ground.s2t(), "S2T");
  r.t2s = metrics_for(scores.transpose(), ground.t2s(), "T2S");
  r.s2t.checkpoint = r.t2s.checkpoint = checkpoint_id;
  return r;
}

nlohmann::json report_to_json(const EvalReport& report) {
  return nlohmann::json{{"checkpoint", report.s2t.checkpoint},
                        {"num_shapes", report.s2t.queries},
                        {"num_captions", report.t2s.queries},
                        {"s2t_rr1", report.s2t.rr1},
                        {"s2t_rr5", report.s2t.rr5},
                        {"s2t_ndcg5", report.s2t.ndcg5},
                        {"t2s_rr1", report.t2s.rr1},
                        {"t2s_rr5", report.t2s.rr5},
                        {"t2s_ndcg5", report.t2s.ndcg5}};
}

}  // namespace partforge
