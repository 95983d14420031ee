#include "partforge/library.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace partforge {

using nlohmann::json;

const char* to_string(Relation r) {
  switch (r) {
    case Relation::root: return "root";
    case Relation::below: return "below";
    case Relation::above: return "above";
    case Relation::beside_pos_x: return "beside_pos_x";
    case Relation::beside_neg_x: return "beside_neg_x";
  }
  return "?";
}

Relation relation_from_string(const std::string& s) {
  for (auto r : {Relation::root, Relation::below, Relation::above, Relation::beside_pos_x,
                 Relation::beside_neg_x}) {
    if (s == to_string(r)) return r;
  }
  throw std::invalid_argument("unknown relation '" + s + "'");
}

const char* to_string(CaptionSource s) { return s == CaptionSource::mllm ? "mllm" : "human"; }

CaptionSource caption_source_from_string(const std::string& s) {
  if (s == "human") return CaptionSource::human;
  if (s == "mllm") return CaptionSource::mllm;
  throw std::invalid_argument("unknown caption source '" + s + "'");
}

// ---------------------------------------------------------------------------

int AssemblySchema::slot_index(const std::string& name) const {
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

void AssemblySchema::validate() const {
  if (category.empty()) throw std::invalid_argument("schema: empty category");
  if (slots.empty()) throw std::invalid_argument("schema " + category + ": no slots");
  int roots = 0;
  std::set<std::string> seen;
  for (const auto& s : slots) {
    if (s.name.empty() || s.part_type.empty()) {
      throw std::invalid_argument("schema " + category + ": slot without name or part_type");
    }
    if (!seen.insert(s.name).second) {
      throw std::invalid_argument("schema " + category + ": duplicate slot '" + s.name + "'");
    }
    if (s.inclusion <= 0.0 || s.inclusion > 1.0) {
      throw std::invalid_argument("schema " + category + ": inclusion of '" + s.name +
                                  "' must lie in (0, 1]");
    }
    if (s.relation == Relation::root) {
      ++roots;
      if (s.inclusion != 1.0) {
        throw std::invalid_argument("schema " + category + ": root slot cannot be optional");
      }
      continue;
    }
    // `seen` holds this slot and the earlier ones; an anchor must be earlier.
    if (s.anchor == s.name || !seen.count(s.anchor)) {
      throw std::invalid_argument("schema " + category + ": slot '" + s.name +
                                  "' anchors on '" + s.anchor + "', which is not an earlier slot");
    }
  }
  if (roots != 1) {
    throw std::invalid_argument("schema " + category + ": expected exactly one root slot");
  }
  for (const auto& [support, cover] : cover_pairs) {
    if (slot_index(support) < 0 || slot_index(cover) < 0) {
      throw std::invalid_argument("schema " + category + ": cover pair (" + support + ", " + cover +
                                  ") names an undeclared slot");
    }
  }
}

AssemblySchema schema_from_json(const json& j) {
  AssemblySchema schema;
  schema.category = j.at("category").get<std::string>();
  for (const auto& js : j.at("slots")) {
    Slot s;
    s.name = js.at("name").get<std::string>();
    s.part_type = js.value("part_type", s.name);
    s.relation = relation_from_string(js.value("relation", std::string("root")));
    s.anchor = js.value("anchor", std::string());
    s.margin = js.value("margin", 0.0);
    if (js.contains("align")) s.align = js.at("align").get<double>();
    s.inclusion = js.value("inclusion", 1.0);
    s.group = js.value("group", std::string());
    schema.slots.push_back(std::move(s));
  }
  if (j.contains("cover_pairs")) {
    for (const auto& p : j.at("cover_pairs")) {
      schema.cover_pairs.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
    }
  }
  schema.validate();
  return schema;
}

json schema_to_json(const AssemblySchema& schema) {
  json slots = json::array();
  for (const auto& s : schema.slots) {
    json js{{"name", s.name}, {"part_type", s.part_type}, {"relation", to_string(s.relation)}};
    if (s.relation != Relation::root) {
      js["anchor"] = s.anchor;
      js["margin"] = s.margin;
    }
    if (s.align) js["align"] = *s.align;
    if (s.inclusion != 1.0) js["inclusion"] = s.inclusion;
    if (!s.group.empty()) js["group"] = s.group;
    slots.push_back(std::move(js));
  }
  json pairs = json::array();
  for (const auto& [a, b] : schema.cover_pairs) pairs.push_back(json::array({a, b}));
  return json{{"category", schema.category}, {"slots", slots}, {"cover_pairs", pairs}};
}

AssemblySchema load_schema(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open schema " + path.string());
  try {
    return schema_from_json(json::parse(in));
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void save_schema(const std::filesystem::path& path, const AssemblySchema& schema) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << schema_to_json(schema).dump(2) << '\n';
}

AssemblySchema default_table_schema() {
  AssemblySchema s;
  s.category = "table";
  s.slots.push_back({"tabletop", "tabletop", Relation::root, "", 0.0, std::nullopt, 1.0, ""});
  s.slots.push_back({"base", "base", Relation::below, "tabletop", 0.0, std::nullopt, 1.0, ""});
  s.cover_pairs.emplace_back("base", "tabletop");
  return s;
}

AssemblySchema default_chair_schema() {
  AssemblySchema s;
  s.category = "chair";
  s.slots.push_back({"seat", "seat", Relation::root, "", 0.0, std::nullopt, 1.0, ""});
  s.slots.push_back({"base", "base", Relation::below, "seat", 0.0, std::nullopt, 1.0, ""});
  s.slots.push_back({"back", "back", Relation::above, "seat", 0.0, 0.0, 1.0, ""});
  s.slots.push_back({"arm_right", "arm", Relation::beside_pos_x, "seat", 0.02, 0.5, 0.5, "arms"});
  s.slots.push_back({"arm_left", "arm", Relation::beside_neg_x, "seat", 0.02, 0.5, 0.5, "arms"});
  s.cover_pairs.emplace_back("base", "seat");
  return s;
}

Taxonomy taxonomy_from_schemas(std::span<const AssemblySchema> schemas) {
  Taxonomy tax;
  for (const auto& schema : schemas) {
    auto& types = tax[schema.category];
    for (const auto& slot : schema.slots) {
      if (std::find(types.begin(), types.end(), slot.part_type) == types.end()) {
        types.push_back(slot.part_type);
      }
    }
  }
  return tax;
}

// ---------------------------------------------------------------------------

std::string relative_part_path(const std::string& category, const std::string& part_type,
                               const std::string& part_id) {
  return category + "/" + part_type + "/" + part_id + ".xyz";
}

LibraryManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  LibraryManifest manifest;
  manifest.version.clear();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    if (!j.contains("part_id") && j.contains("version")) {
      manifest.version = j.at("version").get<std::string>();
      continue;
    }
    ManifestEntry e;
    e.part_id = j.at("part_id").get<std::string>();
    e.category = j.value("category", std::string());
    e.part_type = j.value("part_type", std::string());
    e.caption = j.value("caption", std::string());
    e.path = j.value("path", relative_part_path(e.category, e.part_type, e.part_id));
    e.source = caption_source_from_string(j.value("source", std::string("human")));
    if (j.contains("seed")) e.seed = j.at("seed").get<std::uint64_t>();
    e.shape_caption = j.value("shape_caption", std::string());
    manifest.entries.push_back(std::move(e));
  }
  if (manifest.version.empty()) manifest.version = kManifestVersion;
  return manifest;
}

void write_manifest(const std::filesystem::path& path, const LibraryManifest& manifest) {
  // Write-then-rename so readers never observe a truncated manifest.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << json{{"version", manifest.version}}.dump() << '\n';
    for (const auto& e : manifest.entries) {
      json j{{"part_id", e.part_id},     {"category", e.category}, {"part_type", e.part_type},
             {"caption", e.caption},     {"path", e.path},         {"source", to_string(e.source)}};
      if (e.seed) j["seed"] = *e.seed;
      if (!e.shape_caption.empty()) j["shape_caption"] = e.shape_caption;
      out << j.dump() << '\n';
    }
  }
  std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------

void ComponentLibrary::add(PartRecord record) {
  if (record.part_id.empty()) throw std::invalid_argument("record without part_id");
  if (by_id_.count(record.part_id)) {
    throw std::invalid_argument("duplicate part_id '" + record.part_id + "'");
  }
  if (record.cloud.empty()) throw std::invalid_argument(record.part_id + ": empty cloud");
  if (record.caption.empty()) throw std::invalid_argument(record.part_id + ": missing caption");
  record.cloud.validate();
  auto cat = taxonomy_.find(record.category);
  if (cat == taxonomy_.end()) {
    throw std::invalid_argument(record.part_id + ": unknown category '" + record.category + "'");
  }
  const auto& types = cat->second;
  if (std::find(types.begin(), types.end(), record.part_type) == types.end()) {
    throw std::invalid_argument(record.part_id + ": unknown part_type '" + record.part_type +
                                "' for category '" + record.category + "'");
  }
  by_id_[record.part_id] = records_.size();
  buckets_[{record.category, record.part_type}].push_back(records_.size());
  records_.push_back(std::move(record));
}

std::vector<const PartRecord*> ComponentLibrary::bucket(const std::string& category,
                                                        const std::string& part_type) const {
  std::vector<const PartRecord*> out;
  if (auto it = buckets_.find({category, part_type}); it != buckets_.end()) {
    for (auto i : it->second) out.push_back(&records_[i]);
  }
  return out;
}

std::size_t ComponentLibrary::bucket_size(const std::string& category,
                                          const std::string& part_type) const {
  auto it = buckets_.find({category, part_type});
  return it == buckets_.end() ? 0 : it->second.size();
}

const PartRecord* ComponentLibrary::find(const std::string& part_id) const {
  auto it = by_id_.find(part_id);
  return it == by_id_.end() ? nullptr : &records_[it->second];
}

LibraryManifest ComponentLibrary::manifest() const {
  LibraryManifest m;
  for (const auto& r : records_) {
    m.entries.push_back({r.part_id, r.category, r.part_type, r.caption,
                         relative_part_path(r.category, r.part_type, r.part_id), r.source, r.seed,
                         r.shape_caption});
  }
  return m;
}

ComponentLibrary ingest(const std::filesystem::path& root, const Taxonomy& taxonomy,
                        IngestReport* report) {
  IngestReport local;
  IngestReport& rep = report ? *report : local;
  rep = {};
  const auto manifest = read_manifest(root / "manifest.jsonl");

  ComponentLibrary lib(taxonomy);
  for (const auto& e : manifest.entries) {
    const auto file = (root / e.path).string();
    try {
      if (e.caption.empty()) throw std::invalid_argument("missing caption");
      PartRecord r;
      r.part_id = e.part_id;
      r.category = e.category;
      r.part_type = e.part_type;
      r.caption = e.caption;
      r.source = e.source;
      r.seed = e.seed;
      r.shape_caption = e.shape_caption;
      r.cloud = read_xyz(root / e.path);
      if (r.cloud.empty()) throw std::invalid_argument("empty cloud");
      r.cloud.labels.clear();
      lib.add(std::move(r));
      ++rep.counts[{e.category, e.part_type}];
    } catch (const std::exception& ex) {
      rep.errors.push_back({file, ex.what()});
    }
  }
  if (lib.size() == 0) {
    throw std::runtime_error("ingest: no valid records under " + root.string() + " (" +
                             std::to_string(rep.errors.size()) + " rejected)");
  }
  return lib;
}

void save_library(const ComponentLibrary& lib, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root);
  auto manifest = lib.manifest();
  for (std::size_t i = 0; i < lib.size(); ++i) {
    const auto path = root / manifest.entries[i].path;
    fs::create_directories(path.parent_path());
    write_xyz(path, lib.records()[i].cloud);
  }
  write_manifest(root / "manifest.jsonl", manifest);
}

std::vector<SampledPart> sample_parts(const ComponentLibrary& lib, const AssemblySchema& schema,
                                      Rng& rng) {
  std::vector<SampledPart> out;
  std::map<std::string, bool> group_draws;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  for (std::size_t i = 0; i < schema.slots.size(); ++i) {
    const auto& slot = schema.slots[i];
    if (slot.inclusion < 1.0) {
      bool include = false;
      if (!slot.group.empty()) {
        auto it = group_draws.find(slot.group);
        if (it == group_draws.end()) {
          it = group_draws.emplace(slot.group, coin(rng) < slot.inclusion).first;
        }
        include = it->second;
      } else {
        include = coin(rng) < slot.inclusion;
      }
      if (!include) continue;
    }
    auto bucket = lib.bucket(schema.category, slot.part_type);
    if (bucket.empty()) {
      throw std::runtime_error("sample_parts: empty bucket (" + schema.category + ", " +
                               slot.part_type + ")");
    }
    std::uniform_int_distribution<std::size_t> pick(0, bucket.size() - 1);
    out.push_back({static_cast<int>(i), bucket[pick(rng)]});
  }
  return out;
}

// ---------------------------------------------------------------------------

namespace {

bool is_frame_type(const std::string& part_type) {
  return part_type == "base" || part_type == "leg" || part_type == "legs";
}

// Uniform sample on the surface of the box [lo, hi].
Vec3 sample_box_surface(const Vec3& lo, const Vec3& hi, Rng& rng) {
  const Vec3 e = hi - lo;
  const std::array<double, 3> areas{e.y() * e.z(), e.x() * e.z(), e.x() * e.y()};
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double total = areas[0] + areas[1] + areas[2];
  double pick = u(rng) * total;
  int fixed_axis = 2;
  if (pick < areas[0]) {
    fixed_axis = 0;
  } else if (pick < areas[0] + areas[1]) {
    fixed_axis = 1;
  }
  Vec3 p;
  for (int k = 0; k < 3; ++k) p[k] = lo[k] + u(rng) * e[k];
  p[fixed_axis] = u(rng) < 0.5 ? lo[fixed_axis] : hi[fixed_axis];
  return p;
}

}  // namespace

PartRecord synth_part(const SynthPartSpec& spec, Rng& rng) {
  if (!(spec.extents.array() > 0.0).all() || !spec.extents.allFinite()) {
    throw std::invalid_argument("synth_part: extents must be positive");
  }
  if (spec.point_count < 8) throw std::invalid_argument("synth_part: point_count must be >= 8");

  const Vec3 half = 0.5 * spec.extents;
  PartRecord r;
  r.part_type = spec.part_type;
  r.caption = spec.caption_phrase;
  auto& pts = r.cloud.points;
  pts.reserve(spec.point_count);
  for (int corner = 0; corner < 8; ++corner) {
    pts.emplace_back((corner & 1) ? half.x() : -half.x(), (corner & 2) ? half.y() : -half.y(),
                     (corner & 4) ? half.z() : -half.z());
  }

  if (is_frame_type(spec.part_type)) {
    // Four square posts in the corners of the footprint.
    const double w = 0.12 * std::min(spec.extents.x(), spec.extents.y());
    std::uniform_int_distribution<int> post(0, 3);
    while (pts.size() < spec.point_count) {
      const int k = post(rng);
      const double x0 = (k & 1) ? half.x() - w : -half.x();
      const double y0 = (k & 2) ? half.y() - w : -half.y();
      pts.push_back(sample_box_surface(Vec3(x0, y0, -half.z()), Vec3(x0 + w, y0 + w, half.z()), rng));
    }
  } else {
    while (pts.size() < spec.point_count) pts.push_back(sample_box_surface(-half, half, rng));
  }
  return r;
}

namespace {

struct Variant {
  const char* caption;
  double x, y, z;
};

struct BucketSpec {
  const char* category;
  const char* part_type;
  std::array<Variant, 4> variants;
};

// Captions describe the geometry so the pairing is learnable.
const std::array<BucketSpec, 6> kSyntheticBuckets{{
    {"table", "tabletop",
     {{{"a wide rectangular wooden top", 1.6, 0.9, 0.06},
       {"a small square glass top", 0.7, 0.7, 0.04},
       {"a thick heavy stone top", 1.0, 1.0, 0.18},
       {"a long narrow plank top", 2.0, 0.45, 0.05}}}},
    {"table", "base",
     {{{"four tall slender metal legs", 0.8, 0.6, 0.95},
       {"four short stubby legs", 0.9, 0.9, 0.35},
       {"a wide splayed base", 1.8, 1.4, 0.6},
       {"a narrow pedestal base", 0.35, 0.35, 0.8}}}},
    {"chair", "seat",
     {{{"a broad cushioned seat", 0.7, 0.65, 0.12},
       {"a small hard seat", 0.45, 0.45, 0.05},
       {"a deep padded seat", 0.6, 0.8, 0.16},
       {"a thin flat seat", 0.55, 0.5, 0.03}}}},
    {"chair", "base",
     {{{"four tall thin legs", 0.5, 0.5, 0.75},
       {"four short sturdy legs", 0.6, 0.6, 0.35},
       {"a wide splayed frame", 1.0, 0.9, 0.55},
       {"a compact post frame", 0.3, 0.3, 0.6}}}},
    {"chair", "back",
     {{{"a tall straight backrest", 0.55, 0.06, 0.8},
       {"a low curved backrest", 0.5, 0.08, 0.3},
       {"a wide slatted backrest", 0.8, 0.05, 0.55},
       {"a narrow tall backrest", 0.3, 0.05, 0.9}}}},
    {"chair", "arm",
     {{{"a thick padded armrest", 0.12, 0.55, 0.2},
       {"a thin metal armrest", 0.03, 0.5, 0.25},
       {"a high armrest", 0.06, 0.45, 0.45},
       {"a short low armrest", 0.08, 0.3, 0.12}}}},
}};

}  // namespace

SyntheticCorpus build_synthetic_library(const SyntheticLibraryOptions& options) {
  SyntheticCorpus corpus;
  corpus.schemas = {default_table_schema(), default_chair_schema()};
  corpus.library = ComponentLibrary(taxonomy_from_schemas(corpus.schemas));

  std::uint64_t counter = 0;
  for (const auto& b : kSyntheticBuckets) {
    for (std::size_t v = 0; v < b.variants.size(); ++v) {
      const auto& var = b.variants[v];
      for (std::size_t inst = 0; inst < options.instances_per_variant; ++inst) {
        const std::uint64_t seed = splitmix64(options.seed) ^ counter++;
        Rng rng = make_rng(seed);
        std::uniform_real_distribution<double> jitter(1.0 - options.extent_jitter,
                                                      1.0 + options.extent_jitter);
        SynthPartSpec spec;
        spec.part_type = b.part_type;
        spec.extents = Vec3(var.x * jitter(rng), var.y * jitter(rng), var.z * jitter(rng));
        spec.point_count = options.points_per_part;
        spec.caption_phrase = var.caption;
        PartRecord r = synth_part(spec, rng);
        r.category = b.category;
        r.part_id = std::string(b.category) + "-" + b.part_type + "-v" + std::to_string(v) + "-" +
                    std::to_string(inst);
        r.seed = seed;
        r.source = CaptionSource::human;
        corpus.library.add(std::move(r));
      }
    }
  }
  return corpus;
}

}  // namespace partforge
