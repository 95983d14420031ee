#include "partforge/augment.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace partforge {

using nlohmann::json;

namespace {

constexpr std::string_view kCategoryKey = "{category}";
constexpr std::string_view kCaptionsKey = "{part_captions}";

std::size_t count_occurrences(std::string_view s, std::string_view needle) {
  std::size_t n = 0;
  for (auto pos = s.find(needle); pos != std::string_view::npos; pos = s.find(needle, pos + 1)) ++n;
  return n;
}

int position_of_slot(std::span<const int> slots, int slot) {
  auto it = std::find(slots.begin(), slots.end(), slot);
  return it == slots.end() ? -1 : static_cast<int>(it - slots.begin());
}

void check_parallel_inputs(std::span<const PointCloud> parts, std::span<const int> slots,
                           const AssemblySchema& schema) {
  if (parts.size() != slots.size()) {
    throw std::invalid_argument("parts and slot indices differ in length");
  }
  for (int s : slots) {
    if (s < 0 || static_cast<std::size_t>(s) >= schema.slots.size()) {
      throw std::invalid_argument("slot index out of range for schema " + schema.category);
    }
  }
}

}  // namespace

void CaptionTemplate::validate() const {
  if (count_occurrences(pattern, kCategoryKey) != 1 ||
      count_occurrences(pattern, kCaptionsKey) != 1) {
    throw std::invalid_argument("caption template must contain {category} and {part_captions} "
                                "exactly once");
  }
}

std::string fill_template(const CaptionTemplate& tmpl, std::string_view category,
                          std::span<const std::string> captions) {
  tmpl.validate();
  if (captions.empty()) throw std::invalid_argument("fill_template: no part captions");
  std::string joined;
  for (std::size_t i = 0; i < captions.size(); ++i) {
    if (i > 0) joined += (i + 1 == captions.size()) ? tmpl.conjunction : tmpl.separator;
    joined += captions[i];
  }
  // Placeholder positions come from the pattern alone, so substituted text is
  // never rescanned.
  const std::string_view pattern = tmpl.pattern;
  auto first = pattern.find(kCategoryKey);
  auto second = pattern.find(kCaptionsKey);
  std::string_view first_key = kCategoryKey, second_key = kCaptionsKey;
  std::string_view first_val = category, second_val = joined;
  if (second < first) {
    std::swap(first, second);
    std::swap(first_key, second_key);
    std::swap(first_val, second_val);
  }
  std::string out;
  out.append(pattern.substr(0, first));
  out.append(first_val);
  out.append(pattern.substr(first + first_key.size(), second - first - first_key.size()));
  out.append(second_val);
  out.append(pattern.substr(second + second_key.size()));
  return out;
}

std::vector<PointCloud> center_parts(std::span<const PointCloud> parts) {
  std::vector<PointCloud> out;
  out.reserve(parts.size());
  for (const auto& p : parts) out.push_back(translate(p, -centroid(p)));
  return out;
}

GapTensor pairwise_axis_distances(std::span<const PointCloud> parts) {
  std::vector<Aabb> boxes;
  boxes.reserve(parts.size());
  for (const auto& p : parts) boxes.push_back(aabb(p));
  GapTensor gaps(parts.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    for (std::size_t j = 0; j < boxes.size(); ++j) {
      for (int axis = 0; axis < 3; ++axis) gaps(i, j, axis) = axis_gap(boxes[i], boxes[j], axis);
    }
  }
  return gaps;
}

std::vector<PointCloud> adjust_inter(std::span<const PointCloud> parts, std::span<const int> slots,
                                     const AssemblySchema& schema) {
  check_parallel_inputs(parts, slots, schema);
  std::vector<PointCloud> placed(parts.begin(), parts.end());
  for (std::size_t k = 0; k < placed.size(); ++k) {
    const Slot& slot = schema.slots[slots[k]];
    if (slot.relation == Relation::root) continue;
    const int anchor_slot = schema.slot_index(slot.anchor);
    const int a = position_of_slot(slots.first(k), anchor_slot);
    if (anchor_slot < 0 || a < 0) {
      throw std::invalid_argument("adjust_inter: slot '" + slot.name + "' has unknown anchor '" +
                                  slot.anchor + "'");
    }
    const Aabb anchor = aabb(placed[a]);
    const Aabb part = aabb(placed[k]);
    Vec3 t = Vec3::Zero();
    switch (slot.relation) {
      case Relation::below:
        t.z() = (anchor.min.z() - slot.margin) - part.max.z();
        break;
      case Relation::above:
        t.z() = (anchor.max.z() + slot.margin) - part.min.z();
        break;
      case Relation::beside_pos_x:
        t.x() = (anchor.max.x() + slot.margin) - part.min.x();
        break;
      case Relation::beside_neg_x:
        t.x() = (anchor.min.x() - slot.margin) - part.max.x();
        break;
      case Relation::root:
        break;
    }
    if (slot.relation == Relation::beside_pos_x || slot.relation == Relation::beside_neg_x) {
      const double f = slot.align.value_or(0.5);
      t.z() = (anchor.min.z() + f * anchor.extent().z()) - part.center().z();
    } else if (slot.align) {
      const double f = *slot.align;
      t.y() = (anchor.min.y() + f * (anchor.extent().y() - part.extent().y())) - part.min.y();
    }
    placed[k] = translate(placed[k], t);
  }
  return placed;
}

double intra_scale_factor(const Aabb& support, const Aabb& cover) {
  for (int axis : {kAxisX, kAxisY}) {
    if (!(cover.max[axis] > 0.0) || !(cover.min[axis] < 0.0)) {
      throw std::invalid_argument("adjust_intra: degenerate cover (no XY extent around the origin)");
    }
  }
  double s = 1.0;
  for (int axis : {kAxisX, kAxisY}) {
    if (support.max[axis] > 0.0) s = std::min(s, cover.max[axis] / support.max[axis]);
    if (support.min[axis] < 0.0) s = std::min(s, cover.min[axis] / support.min[axis]);
  }
  return s;
}

std::vector<PointCloud> adjust_intra(std::span<const PointCloud> parts, std::span<const int> slots,
                                     const AssemblySchema& schema, double theta) {
  check_parallel_inputs(parts, slots, schema);
  std::vector<PointCloud> out(parts.begin(), parts.end());
  for (const auto& [support_name, cover_name] : schema.cover_pairs) {
    const int si = position_of_slot(slots, schema.slot_index(support_name));
    const int ci = position_of_slot(slots, schema.slot_index(cover_name));
    if (si < 0 || ci < 0) continue;  // optional slot not drawn
    const Aabb cover = aabb(out[ci]);
    if (containment_fraction(out[si], cover) >= theta) continue;
    double s = intra_scale_factor(aabb(out[si]), cover);
    PointCloud scaled = scale_xy_about_origin(out[si], s);
    // Rounding in s * x can leave boundary points one ulp outside.
    for (int attempt = 0; attempt < 8 && containment_fraction(scaled, cover) < 1.0; ++attempt) {
      s *= 1.0 - 1e-12;
      scaled = scale_xy_about_origin(out[si], s);
    }
    out[si] = std::move(scaled);
  }
  return out;
}

namespace {

// Proportional point quotas with at least one point per part.
std::vector<std::size_t> part_quotas(std::span<const PointCloud> parts, std::size_t total) {
  const std::size_t n = parts.size();
  if (total < n) {
    throw std::invalid_argument("n_points (" + std::to_string(total) + ") below part count (" +
                                std::to_string(n) + ")");
  }
  std::size_t sum_points = 0;
  for (const auto& p : parts) sum_points += p.size();
  std::vector<std::size_t> quota(n, 1);
  std::size_t remaining = total - n;
  std::vector<std::pair<double, std::size_t>> fractional;
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < n; ++k) {
    const double exact = static_cast<double>(remaining) * static_cast<double>(parts[k].size()) /
                         static_cast<double>(sum_points);
    const auto whole = static_cast<std::size_t>(exact);
    quota[k] += whole;
    assigned += whole;
    fractional.emplace_back(-(exact - static_cast<double>(whole)), k);
  }
  std::sort(fractional.begin(), fractional.end());
  for (std::size_t i = 0; assigned < remaining; ++i, ++assigned) ++quota[fractional[i].second];
  return quota;
}

}  // namespace

GeneratedPair generate_pair(const ComponentLibrary& lib, const AssemblySchema& schema,
                            const AugmentOptions& options, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  const auto sampled = sample_parts(lib, schema, rng);

  GeneratedPair pair;
  pair.provenance.category = schema.category;
  pair.provenance.seed = seed;
  std::vector<PointCloud> clouds;
  for (const auto& s : sampled) {
    clouds.push_back(s.record->cloud);
    clouds.back().labels.clear();
    pair.slots.push_back(s.slot);
    pair.provenance.part_ids.push_back(s.record->part_id);
    pair.part_captions.push_back(s.record->caption);
  }

  clouds = center_parts(clouds);
  if (options.intra) clouds = adjust_intra(clouds, pair.slots, schema, options.theta);
  if (options.inter) clouds = adjust_inter(clouds, pair.slots, schema);

  const auto quota = part_quotas(clouds, options.n_points);
  PointCloud merged;
  merged.points.reserve(options.n_points);
  merged.labels.reserve(options.n_points);
  for (std::size_t k = 0; k < clouds.size(); ++k) {
    PointCloud labeled = clouds[k];
    labeled.labels.assign(labeled.size(), static_cast<int>(k));
    PointCloud picked = downsample(labeled, quota[k], rng);
    merged.points.insert(merged.points.end(), picked.points.begin(), picked.points.end());
    merged.labels.insert(merged.labels.end(), picked.labels.begin(), picked.labels.end());
  }
  // A full-size downsample is a uniform shuffle; hides part order in storage.
  pair.shape = downsample(merged, merged.size(), rng);
  pair.placed_parts = std::move(clouds);
  pair.caption = fill_template(options.tmpl, schema.category, pair.part_captions);
  return pair;
}

GeneratedPair generate_pair(const ComponentLibrary& lib, std::span<const AssemblySchema> schemas,
                            const AugmentOptions& options, std::uint64_t seed) {
  if (schemas.empty()) throw std::invalid_argument("generate_pair: no schemas");
  std::size_t pick = 0;
  if (schemas.size() > 1) {
    Rng category_rng = make_rng(seed ^ 0x6361746567ULL);
    pick = std::uniform_int_distribution<std::size_t>(0, schemas.size() - 1)(category_rng);
  }
  return generate_pair(lib, schemas[pick], options, seed);
}

std::vector<GeneratedPair> generate_stream(const ComponentLibrary& lib,
                                           std::span<const AssemblySchema> schemas,
                                           const AugmentOptions& options, std::size_t count,
                                           std::uint64_t base_seed, Exec exec) {
  if (count == 0) throw std::invalid_argument("generate_stream: count must be >= 1");
  std::vector<GeneratedPair> out(count);
  for_each_index(count, exec, [&](std::size_t k) {
    out[k] = generate_pair(lib, schemas, options, derive_seed(base_seed, k));
  });
  return out;
}

std::string pair_json_line(const GeneratedPair& pair, std::size_t index) {
  json aabbs = json::array();
  for (const auto& part : pair.placed_parts) {
    const Aabb b = aabb(part);
    aabbs.push_back({b.min.x(), b.min.y(), b.min.z(), b.max.x(), b.max.y(), b.max.z()});
  }
  json j{{"index", index},
         {"file", "pair_" + std::to_string(index) + ".xyz"},
         {"caption", pair.caption},
         {"category", pair.provenance.category},
         {"part_ids", pair.provenance.part_ids},
         {"slots", pair.slots},
         {"seed", pair.provenance.seed},
         {"part_aabbs", aabbs}};
  return j.dump();
}

void write_pairs(const std::filesystem::path& dir, std::span<const GeneratedPair> pairs) {
  std::filesystem::create_directories(dir);
  std::ofstream index(dir / "pairs.jsonl", std::ios::trunc | std::ios::binary);
  if (!index) throw std::runtime_error("cannot write " + (dir / "pairs.jsonl").string());
  for (std::size_t k = 0; k < pairs.size(); ++k) {
    write_xyz(dir / ("pair_" + std::to_string(k) + ".xyz"), pairs[k].shape);
    index << pair_json_line(pairs[k], k) << '\n';
  }
}

std::vector<StoredPair> read_pairs(const std::filesystem::path& dir) {
  std::ifstream index(dir / "pairs.jsonl");
  if (!index) throw std::runtime_error("cannot open " + (dir / "pairs.jsonl").string());
  std::vector<StoredPair> out;
  std::string line;
  while (std::getline(index, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const json j = json::parse(line);
    StoredPair p;
    p.shape = read_xyz(dir / j.at("file").get<std::string>());
    if (j.contains("captions")) {
      p.captions = j.at("captions").get<std::vector<std::string>>();
    } else {
      p.captions.push_back(j.at("caption").get<std::string>());
    }
    if (p.captions.empty()) throw std::runtime_error("pair without captions in " + dir.string());
    p.provenance.category = j.value("category", std::string());
    if (j.contains("part_ids")) p.provenance.part_ids = j.at("part_ids").get<std::vector<std::string>>();
    p.provenance.seed = j.value("seed", std::uint64_t{0});
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace partforge
