#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "partforge/geometry.hpp"
#include "partforge/rng.hpp"

namespace partforge {

// ---------------------------------------------------------------------------
// Assembly schemas

enum class Relation { root, below, above, beside_pos_x, beside_neg_x };

const char* to_string(Relation r);
Relation relation_from_string(const std::string& s);

struct Slot {
  std::string name;
  std::string part_type;
  Relation relation = Relation::root;
  std::string anchor;  // empty for the root slot
  double margin = 0.0;
  // beside_*: Z position of the part centre as a fraction of the anchor's Z
  // extent (default 0.5). above/below: Y placement, 0 flushes the rear faces,
  // 1 the front faces; absent keeps the part centred on Y.
  std::optional<double> align;
  double inclusion = 1.0;
  // Slots sharing a non-empty group share one inclusion draw.
  std::string group;
};

struct AssemblySchema {
  std::string category;
  std::vector<Slot> slots;
  // (support slot, cover slot)
  std::vector<std::pair<std::string, std::string>> cover_pairs;

  // Exactly one root, anchors name earlier slots, cover pairs name slots.
  void validate() const;
  int slot_index(const std::string& name) const;  // -1 if absent
};

AssemblySchema schema_from_json(const nlohmann::json& j);
nlohmann::json schema_to_json(const AssemblySchema& schema);
AssemblySchema load_schema(const std::filesystem::path& path);
void save_schema(const std::filesystem::path& path, const AssemblySchema& schema);

AssemblySchema default_table_schema();
AssemblySchema default_chair_schema();

// category -> ordered part types
using Taxonomy = std::map<std::string, std::vector<std::string>>;
Taxonomy taxonomy_from_schemas(std::span<const AssemblySchema> schemas);

// ---------------------------------------------------------------------------
// Records and manifest

enum class CaptionSource { human, mllm };

const char* to_string(CaptionSource s);
CaptionSource caption_source_from_string(const std::string& s);

struct PartRecord {
  std::string part_id;
  std::string category;
  std::string part_type;
  PointCloud cloud;
  std::string caption;
  CaptionSource source = CaptionSource::human;
  std::optional<std::uint64_t> seed;  // set for synthetic parts
  std::string shape_caption;          // caption of the source shape, if known
};

struct ManifestEntry {
  std::string part_id;
  std::string category;
  std::string part_type;
  std::string caption;
  std::string path;  // relative to the library root
  CaptionSource source = CaptionSource::human;
  std::optional<std::uint64_t> seed;
  std::string shape_caption;

  bool operator==(const ManifestEntry&) const = default;
};

inline constexpr const char* kManifestVersion = "partforge-library/1";

// manifest.jsonl: a {"version": ...} header line, then one record per line.
struct LibraryManifest {
  std::string version = kManifestVersion;
  std::vector<ManifestEntry> entries;

  bool operator==(const LibraryManifest&) const = default;
};

LibraryManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const LibraryManifest& manifest);
std::string relative_part_path(const std::string& category, const std::string& part_type,
                               const std::string& part_id);

// ---------------------------------------------------------------------------
// Library

class ComponentLibrary {
 public:
  ComponentLibrary() = default;
  explicit ComponentLibrary(Taxonomy taxonomy) : taxonomy_(std::move(taxonomy)) {}

  // Throws on duplicate ids, empty cloud/caption, or a part type outside the
  // taxonomy.
  void add(PartRecord record);

  std::size_t size() const { return records_.size(); }
  const std::vector<PartRecord>& records() const { return records_; }
  const Taxonomy& taxonomy() const { return taxonomy_; }

  // Records in one (category, part_type) bucket, in insertion order.
  std::vector<const PartRecord*> bucket(const std::string& category,
                                        const std::string& part_type) const;
  std::size_t bucket_size(const std::string& category, const std::string& part_type) const;

  const PartRecord* find(const std::string& part_id) const;

  LibraryManifest manifest() const;

 private:
  Taxonomy taxonomy_;
  std::vector<PartRecord> records_;
  std::map<std::pair<std::string, std::string>, std::vector<std::size_t>> buckets_;
  std::map<std::string, std::size_t> by_id_;
};

struct IngestError {
  std::string path;
  std::string message;
};

struct IngestReport {
  std::vector<IngestError> errors;
  std::map<std::pair<std::string, std::string>, std::size_t> counts;
};

// Loads <root>/manifest.jsonl and the referenced clouds. Bad records are
// reported and skipped; throws only if nothing valid remains.
ComponentLibrary ingest(const std::filesystem::path& root, const Taxonomy& taxonomy,
                        IngestReport* report = nullptr);

// Writes <root>/<category>/<part_type>/<part_id>.xyz and <root>/manifest.jsonl.
void save_library(const ComponentLibrary& lib, const std::filesystem::path& root);

struct SampledPart {
  int slot = 0;
  const PartRecord* record = nullptr;
};

// One uniform draw per included slot, in slot order. Optional slots are
// included with their inclusion probability (one draw per group).
std::vector<SampledPart> sample_parts(const ComponentLibrary& lib, const AssemblySchema& schema,
                                      Rng& rng);

// ---------------------------------------------------------------------------
// Synthetic parts

struct SynthPartSpec {
  std::string part_type;
  Vec3 extents = Vec3::Ones();
  std::size_t point_count = 256;
  std::string caption_phrase;
};

// Surface samples of a box (or a four-post frame for "base"/"leg" types)
// centred on the origin. The first 8 points are the bounding-box corners.
PartRecord synth_part(const SynthPartSpec& spec, Rng& rng);

struct SyntheticLibraryOptions {
  std::uint64_t seed = 1;
  std::size_t instances_per_variant = 2;
  std::size_t points_per_part = 384;
  double extent_jitter = 0.06;
};

struct SyntheticCorpus {
  ComponentLibrary library;
  std::vector<AssemblySchema> schemas;
};

// Two categories (table, chair), four captioned geometric variants per
// bucket.
SyntheticCorpus build_synthetic_library(const SyntheticLibraryOptions& options);

}  // namespace partforge
