#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "partforge/geometry.hpp"
#include "partforge/library.hpp"
#include "partforge/parallel.hpp"

namespace partforge {

struct CaptionTemplate {
  std::string pattern = "a {category} with {part_captions}";
  std::string separator = ", ";
  std::string conjunction = " and ";

  // Both placeholders must occur exactly once.
  void validate() const;
};

// "x", "x and y", "x, y and z", ... substituted into the pattern.
std::string fill_template(const CaptionTemplate& tmpl, std::string_view category,
                          std::span<const std::string> captions);

std::vector<PointCloud> center_parts(std::span<const PointCloud> parts);

// N x N x 3 signed gaps between part bounding boxes.
class GapTensor {
 public:
  explicit GapTensor(std::size_t n) : n_(n), data_(n * n * 3, 0.0) {}
  std::size_t size() const { return n_; }
  double operator()(std::size_t i, std::size_t j, int axis) const {
    return data_[(i * n_ + j) * 3 + axis];
  }
  double& operator()(std::size_t i, std::size_t j, int axis) { return data_[(i * n_ + j) * 3 + axis]; }

 private:
  std::size_t n_;
  std::vector<double> data_;
};

GapTensor pairwise_axis_distances(std::span<const PointCloud> parts);

// `slots[k]` is the schema slot index of parts[k]; parts come in slot order.
std::vector<PointCloud> adjust_inter(std::span<const PointCloud> parts, std::span<const int> slots,
                                     const AssemblySchema& schema);

// XY-shrinks each cover pair's support toward the origin until it lies inside
// the cover's XY box, when its containment is below `theta`.
std::vector<PointCloud> adjust_intra(std::span<const PointCloud> parts, std::span<const int> slots,
                                     const AssemblySchema& schema, double theta);

// Largest s <= 1 with s * support_xy inside cover's XY box (both centred).
double intra_scale_factor(const Aabb& support, const Aabb& cover);

struct AugmentOptions {
  std::size_t n_points = 2500;
  double theta = 0.95;
  bool inter = true;
  bool intra = true;
  CaptionTemplate tmpl;
};

struct Provenance {
  std::string category;
  std::vector<std::string> part_ids;
  std::uint64_t seed = 0;
};

struct GeneratedPair {
  PointCloud shape;  // labels are placed-part indices 0..N-1 in slot order
  std::string caption;
  Provenance provenance;
  // Full-resolution parts after adjustment, for geometric checks.
  std::vector<PointCloud> placed_parts;
  std::vector<int> slots;
  std::vector<std::string> part_captions;
};

// Deterministic in (lib, schema, options, seed).
GeneratedPair generate_pair(const ComponentLibrary& lib, const AssemblySchema& schema,
                            const AugmentOptions& options, std::uint64_t seed);

// Picks the category uniformly from `schemas` (seeded), then generates.
GeneratedPair generate_pair(const ComponentLibrary& lib, std::span<const AssemblySchema> schemas,
                            const AugmentOptions& options, std::uint64_t seed);

// Pair k uses seed derive_seed(base_seed, k).
std::vector<GeneratedPair> generate_stream(const ComponentLibrary& lib,
                                           std::span<const AssemblySchema> schemas,
                                           const AugmentOptions& options, std::size_t count,
                                           std::uint64_t base_seed, Exec exec = Exec::parallel);

// pairs/<run>/pair_<k>.xyz + pairs.jsonl
void write_pairs(const std::filesystem::path& dir, std::span<const GeneratedPair> pairs);
std::string pair_json_line(const GeneratedPair& pair, std::size_t index);

struct StoredPair {
  PointCloud shape;
  std::vector<std::string> captions;  // first is the generated caption
  Provenance provenance;
};

std::vector<StoredPair> read_pairs(const std::filesystem::path& dir);

}  // namespace partforge
