#pragma once

#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "partforge/encoders.hpp"
#include "partforge/matching.hpp"
#include "partforge/objective.hpp"
#include "partforge/parallel.hpp"

namespace partforge {

// Relevance lists per query; each query needs at least one relevant item.
using Relevance = std::vector<std::vector<int>>;

struct RetrievalGround {
  std::vector<std::vector<int>> shape_to_captions;
  std::vector<int> caption_to_shape;

  // Caption k belongs to shape owner[k].
  static RetrievalGround from_owners(std::span<const int> owner, std::size_t n_shapes);
  static RetrievalGround one_to_one(std::size_t n);

  // Every shape has a caption and both directions agree.
  void validate() const;
  Relevance s2t() const { return shape_to_captions; }
  Relevance t2s() const;
};

// Scores are queries x gallery; higher is better; ties rank the lower
// gallery index first. Results are percentages.
double rr_at_k(const Mat& scores, const Relevance& relevant, int k);
double ndcg_at_k(const Mat& scores, const Relevance& relevant, int k);

struct MetricsReport {
  std::string direction;  // "S2T" or "T2S"
  double rr1 = 0.0;
  double rr5 = 0.0;
  double ndcg5 = 0.0;
  std::size_t queries = 0;
  std::size_t gallery = 0;
  std::string checkpoint;
};

struct EvalReport {
  MetricsReport s2t;
  MetricsReport t2s;
};

MetricsReport metrics_for(const Mat& scores, const Relevance& relevant, std::string direction);

struct EvalOptions {
  SimilarityMode similarity = SimilarityMode::emd;
  SinkhornOptions sinkhorn;
  std::size_t chunk_rows = 16;
  Exec exec = Exec::parallel;
};

// shapes x captions score matrix, computed in row chunks.
Mat gallery_scores(const ModelParams& params, std::span<const PointCloud> shapes,
                   std::span<const std::vector<int>> captions, const EvalOptions& opts);

EvalReport evaluate(const ModelParams& params, std::span<const PointCloud> shapes,
                    std::span<const std::vector<int>> captions, const RetrievalGround& ground,
                    const EvalOptions& opts, const std::string& checkpoint_id = "");

// Flat object: checkpoint, num_shapes, num_captions, s2t_rr1 ... t2s_ndcg5.
nlohmann::json report_to_json(const EvalReport& report);

}  // namespace partforge
