#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "partforge/augment.hpp"
#include "partforge/config.hpp"
#include "partforge/encoders.hpp"
#include "partforge/evalharness.hpp"
#include "partforge/library.hpp"
#include "partforge/objective.hpp"

namespace partforge {

struct TrainConfig {
  // Data: "synthetic" or a library directory. `schemas` is a directory of
  // *.json files or a comma-separated file list; empty means the library's
  // sibling "schemas" directory.
  std::string library = "synthetic";
  std::string schemas;
  std::uint64_t synthetic_seed = 1;
  std::size_t synthetic_instances = 2;
  std::size_t synthetic_points = 384;

  std::uint64_t seed = 1;
  std::size_t batch_size = 16;
  std::size_t epochs = 20;
  std::size_t steps_per_epoch = 25;
  double lr = 4e-4;
  double clip = 2.0;
  double tau = 0.1;
  double margin = 0.2;
  SimilarityMode similarity = SimilarityMode::emd;
  LossMode loss = LossMode::infonce;
  bool use_seg = true;
  bool use_s2t = true;
  bool use_t2s = true;

  bool augment = true;        // false: sample batches from a fixed pregenerated pool
  std::size_t pool_size = 0;  // 0: batch_size * steps_per_epoch
  bool inter = true;
  bool intra = true;
  double theta = 0.95;
  std::size_t n_points = 256;

  int feat = 64;
  int point_hidden = 64;
  int point_feat = 0;  // 0: same as feat
  int embed = 32;
  int classes = 0;     // 0: largest slot count over the schemas

  double epsilon = 0.05;
  int sinkhorn_iters = 200;
  double sinkhorn_tol = 1e-6;

  std::size_t gallery_size = 64;
  std::size_t eval_every = 5;  // epochs; the final epoch is always evaluated
  bool write_gallery = true;
  std::string resume;  // checkpoint to continue from
  int threads = 0;

  static const std::vector<std::string>& keys();
  // Unknown keys and malformed values throw, naming the key.
  static TrainConfig from_key_values(const KeyValues& kv);
  KeyValues to_key_values() const;
  void validate() const;

  LossConfig loss_config() const;
  SinkhornOptions sinkhorn() const;
};

std::string format_double(double v);

SyntheticCorpus load_corpus(const TrainConfig& cfg);
std::vector<AssemblySchema> load_schemas(const std::string& spec);
Vocab build_vocab(const SyntheticCorpus& corpus, const CaptionTemplate& tmpl);

double learning_rate_at(const TrainConfig& cfg, std::int64_t step);

// Seeds for the generated batches and the held-out gallery.
std::uint64_t batch_seed(std::uint64_t seed, std::int64_t step);
std::uint64_t gallery_seed(std::uint64_t seed);

struct Gallery {
  std::vector<GeneratedPair> pairs;
  std::vector<PointCloud> shapes;
  std::vector<std::vector<int>> captions;
  RetrievalGround ground;
};

// Always uses both adjustments, independent of the training toggles.
Gallery make_gallery(const SyntheticCorpus& corpus, const Vocab& vocab, const TrainConfig& cfg);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  LossComponents loss;
  double total = 0.0;
  std::optional<EvalReport> eval;
};

struct TrainResult {
  ModelParams params;
  AdamState adam;
  std::vector<EpochRecord> epochs;
  std::int64_t final_step = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Writes run.json, loss.csv, metrics.csv, checkpoint.bin, vocab.txt and
// (optionally) gallery/ under out_dir.
TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir,
                  std::ostream* log = nullptr);

}  // namespace partforge
