#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "partforge/augment.hpp"
#include "partforge/captioner.hpp"
#include "partforge/checkpoint.hpp"
#include "partforge/config.hpp"
#include "partforge/evalharness.hpp"
#include "partforge/library.hpp"
#include "partforge/matching.hpp"
#include "partforge/oracles.hpp"
#include "partforge/parallel.hpp"
#include "partforge/train.hpp"

using namespace partforge;
using nlohmann::json;

namespace {

struct ModelBundle {
  Checkpoint ck;
  Vocab vocab;
  SimilarityMode similarity = SimilarityMode::emd;
  SinkhornOptions sinkhorn;
};

ModelBundle load_model(const std::string& ckpt) {
  ModelBundle m;
  m.ck = load_checkpoint(ckpt);
  m.vocab = Vocab::load(vocab_path_for(ckpt));
  if (m.vocab.size() != m.ck.params.dims.vocab) {
    throw std::runtime_error("vocab.txt has " + std::to_string(m.vocab.size()) +
                             " tokens but the checkpoint expects " + std::to_string(m.ck.params.dims.vocab));
  }
  KeyValues kv;
  for (const auto& [k, v] : m.ck.meta) {
    if (k.rfind("config.", 0) == 0) kv[k.substr(7)] = v;
  }
  const TrainConfig cfg = TrainConfig::from_key_values(kv);
  m.similarity = cfg.similarity;
  m.sinkhorn = cfg.sinkhorn();
  return m;
}

std::vector<AssemblySchema> schemas_for(const std::string& library, const std::vector<std::string>& files) {
  if (!files.empty()) {
    std::vector<AssemblySchema> out;
    for (const auto& f : files) out.push_back(load_schema(f));
    return out;
  }
  return load_schemas((std::filesystem::path(library).parent_path() / "schemas").string());
}

int run_library_build(bool synthetic, const std::string& out, const std::string& library,
                      const std::string& schemas, std::uint64_t seed, std::size_t points,
                      std::size_t instances) {
  if (synthetic) {
    if (out.empty()) throw CLI::RequiredError("--out");
    SyntheticLibraryOptions o;
    o.seed = seed;
    o.points_per_part = points;
    o.instances_per_variant = instances;
    const auto corpus = build_synthetic_library(o);
    const std::filesystem::path root = out;
    save_library(corpus.library, root / "library");
    std::filesystem::create_directories(root / "schemas");
    for (const auto& s : corpus.schemas) save_schema(root / "schemas" / (s.category + ".json"), s);
    std::ofstream(root / "run.json") << json{{"command", "library build"},
                                             {"synthetic", true},
                                             {"seed", seed},
                                             {"points_per_part", points},
                                             {"instances_per_variant", instances}}
                                            .dump(2)
                                     << '\n';
    std::cout << "wrote " << corpus.library.size() << " parts to " << (root / "library").string() << '\n';
    return 0;
  }
  if (library.empty()) throw CLI::RequiredError("--library");
  const auto schema_list = load_schemas(
      schemas.empty() ? (std::filesystem::path(library).parent_path() / "schemas").string() : schemas);
  IngestReport report;
  const auto lib = ingest(library, taxonomy_from_schemas(schema_list), &report);
  for (const auto& [bucket, n] : report.counts) {
    std::cout << bucket.first << '/' << bucket.second << ": " << n << '\n';
  }
  for (const auto& e : report.errors) std::cerr << "skipped " << e.path << ": " << e.message << '\n';
  std::cout << lib.size() << " parts loaded, " << report.errors.size() << " rejected\n";
  return 0;
}

int run_caption(const std::string& library, const std::string& endpoint, int concurrency,
                const std::string& model, int max_retries, int resolution) {
  EndpointConfig ec;
  ec.url = endpoint;
  ec.model = model;
  ec.max_retries = max_retries;
  if (const char* key = std::getenv("PARTFORGE_API_KEY")) ec.api_key = key;
  if (ec.api_key.empty()) throw std::runtime_error("PARTFORGE_API_KEY is not set");
  CaptionRunOptions opts;
  opts.concurrency = concurrency;
  opts.resolution = resolution;
  const auto report = caption_library(library, ec, opts);
  std::cout << report.pending << " pending, " << report.resumed << " resumed, " << report.requested
            << " requested, " << report.captioned << " captioned, " << report.retries << " retries\n";
  for (const auto& f : report.failures) std::cerr << f << '\n';
  return report.failures.empty() ? 0 : 1;
}

int run_augment(const std::string& library, const std::vector<std::string>& schema_files,
                std::size_t count, std::uint64_t seed, const std::string& out, std::size_t points,
                bool no_inter, bool no_intra, double theta) {
  const auto schemas = schemas_for(library, schema_files);
  const auto lib = ingest(library, taxonomy_from_schemas(schemas));
  AugmentOptions opts;
  opts.n_points = points;
  opts.inter = !no_inter;
  opts.intra = !no_intra;
  opts.theta = theta;
  const auto pairs = generate_stream(lib, schemas, opts, count, seed);
  write_pairs(out, pairs);
  json schema_names = json::array();
  for (const auto& s : schemas) schema_names.push_back(s.category);
  std::ofstream(std::filesystem::path(out) / "run.json")
      << json{{"command", "augment"}, {"library", library},    {"schema_files", schema_files},
              {"categories", schema_names}, {"count", count},  {"seed", seed},
              {"n_points", points},    {"inter", opts.inter}, {"intra", opts.intra},
              {"theta", theta}}
             .dump(2)
      << '\n';
  std::cout << "wrote " << pairs.size() << " pairs to " << out << '\n';
  return 0;
}

int run_train(const std::string& config, const std::vector<std::string>& sets, const std::string& out) {
  KeyValues file = config.empty() ? KeyValues{} : read_key_values(config);
  KeyValues flags;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw CLI::ValidationError("--set", "expected key=value, got '" + s + "'");
    flags[s.substr(0, eq)] = s.substr(eq + 1);
  }
  const auto cfg = TrainConfig::from_key_values(merge_config(file, env_overrides(TrainConfig::keys()), flags));
  if (cfg.threads > 0) set_thread_cap(cfg.threads);
  const auto result = train(cfg, out, &std::cout);
  std::cout << "trained " << result.final_step << " steps; checkpoint at "
            << (std::filesystem::path(out) / "checkpoint.bin").string() << '\n';
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& gallery, const std::string& out) {
  const auto model = load_model(ckpt);
  const auto stored = read_pairs(gallery);
  std::vector<PointCloud> shapes;
  std::vector<std::vector<int>> captions;
  std::vector<int> owner;
  for (std::size_t i = 0; i < stored.size(); ++i) {
    shapes.push_back(stored[i].shape);
    for (const auto& c : stored[i].captions) {
      captions.push_back(tokenize(c, model.vocab));
      owner.push_back(static_cast<int>(i));
    }
  }
  EvalOptions eo;
  eo.similarity = model.similarity;
  eo.sinkhorn = model.sinkhorn;
  const auto ground = RetrievalGround::from_owners(owner, shapes.size());
  const std::string id = std::filesystem::path(ckpt).filename().string() + "@step-" +
                         (model.ck.meta.count("step") ? model.ck.meta.at("step") : "0");
  const auto report = evaluate(model.ck.params, shapes, captions, ground, eo, id);
  const json j = report_to_json(report);
  std::ofstream(out) << j.dump(2) << '\n';
  std::cout << j.dump() << '\n';
  return 0;
}

int run_score(const std::string& shape, const std::string& text, const std::string& ckpt) {
  const auto model = load_model(ckpt);
  const auto cloud = read_xyz(shape);
  const auto s = encode_shape(cloud, model.ck.params).part_features;
  const auto w = encode_text(tokenize(text, model.vocab), model.ck.params).word_features;
  const double v = model.similarity == SimilarityMode::emd ? pair_similarity(s, w, model.sinkhorn)
                                                           : cosine_global_similarity(s, w);
  std::cout << format_double(v) << '\n';
  return 0;
}

int run_selfcheck(std::uint64_t seed) {
  const oracle::CheckResult checks[] = {oracle::check_sinkhorn(seed), oracle::check_gradients(seed),
                                        oracle::check_metrics(seed), oracle::check_closed_form_losses()};
  bool ok = true;
  for (const auto& c : checks) {
    std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
    ok = ok && c.pass;
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"partforge: online shape-caption augmentation and part-word matching"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Cap on worker threads (0: runtime default)");

  auto* lib_cmd = app.add_subcommand("library", "Build or caption a component library");
  lib_cmd->require_subcommand(1);

  auto* build = lib_cmd->add_subcommand("build", "Write a synthetic library or validate an existing one");
  bool synthetic = false;
  std::string build_out, build_lib, build_schemas;
  std::uint64_t build_seed = 1;
  std::size_t build_points = 384, build_instances = 2;
  build->add_flag("--synthetic", synthetic, "Generate the procedural two-category library");
  build->add_option("--out", build_out, "Project directory (library/ and schemas/ are created)");
  build->add_option("--library", build_lib, "Existing library directory to ingest and report on");
  build->add_option("--schemas", build_schemas, "Schema directory or comma-separated files");
  build->add_option("--seed", build_seed, "Synthetic library seed");
  build->add_option("--points", build_points, "Points per synthetic part");
  build->add_option("--instances", build_instances, "Synthetic instances per caption variant");

  auto* caption = lib_cmd->add_subcommand("caption", "Caption parts through a chat-completions endpoint");
  std::string cap_lib, cap_endpoint, cap_model = "llava";
  int cap_concurrency = 4, cap_retries = 4, cap_resolution = 128;
  caption->add_option("--library", cap_lib, "Library directory")->required();
  caption->add_option("--endpoint", cap_endpoint, "Endpoint URL")->required();
  caption->add_option("--concurrency", cap_concurrency, "Requests in flight")->check(CLI::PositiveNumber);
  caption->add_option("--model", cap_model, "Model name sent with each request");
  caption->add_option("--max-retries", cap_retries, "Retries per job on transient failures");
  caption->add_option("--resolution", cap_resolution, "Rendered view size in pixels");

  auto* augment = app.add_subcommand("augment", "Generate shape-caption pairs");
  std::string aug_lib, aug_out = "pairs";
  std::vector<std::string> aug_schemas;
  std::size_t aug_count = 100, aug_points = 2500;
  std::uint64_t aug_seed = 0;
  bool no_inter = false, no_intra = false;
  double aug_theta = 0.95;
  augment->add_option("--library", aug_lib, "Library directory")->required();
  augment->add_option("--schema", aug_schemas, "Schema file (repeatable; default: ../schemas)");
  augment->add_option("--count", aug_count, "Number of pairs")->check(CLI::PositiveNumber);
  augment->add_option("--seed", aug_seed, "Base seed");
  augment->add_option("--out", aug_out, "Output directory");
  augment->add_option("--points", aug_points, "Points per generated shape")->check(CLI::PositiveNumber);
  augment->add_option("--theta", aug_theta, "Containment threshold for cover pairs");
  augment->add_flag("--no-inter", no_inter, "Disable inter-part placement");
  augment->add_flag("--no-intra", no_intra, "Disable support rescaling");

  auto* train_cmd = app.add_subcommand("train", "Train the encoders on online-augmented batches");
  std::string train_config, train_out;
  std::vector<std::string> train_sets;
  train_cmd->add_option("--config", train_config, "key=value config file");
  train_cmd->add_option("--set", train_sets, "Override one config key (key=value, repeatable)");
  train_cmd->add_option("--out", train_out, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Retrieval metrics over a generated gallery");
  std::string eval_ckpt, eval_gallery, eval_out;
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--gallery", eval_gallery, "Directory written by augment")->required();
  eval->add_option("--out", eval_out, "Report path")->required();

  auto* score = app.add_subcommand("score", "Similarity of one shape and one caption");
  std::string score_shape, score_text, score_ckpt;
  score->add_option("--shape", score_shape, "xyz file")->required();
  score->add_option("--text", score_text, "Caption")->required();
  score->add_option("--ckpt", score_ckpt, "Checkpoint file")->required();

  auto* selfcheck = app.add_subcommand("selfcheck", "Run the numeric oracles");
  std::uint64_t check_seed = 2024;
  selfcheck->add_option("--seed", check_seed, "Seed for the random instances");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    set_thread_cap(threads);
    if (*build) {
      return run_library_build(synthetic, build_out, build_lib, build_schemas, build_seed, build_points,
                               build_instances);
    }
    if (*caption) return run_caption(cap_lib, cap_endpoint, cap_concurrency, cap_model, cap_retries, cap_resolution);
    if (*augment) {
      return run_augment(aug_lib, aug_schemas, aug_count, aug_seed, aug_out, aug_points, no_inter, no_intra,
                         aug_theta);
    }
    if (*train_cmd) return run_train(train_config, train_sets, train_out);
    if (*eval) return run_eval(eval_ckpt, eval_gallery, eval_out);
    if (*score) return run_score(score_shape, score_text, score_ckpt);
    if (*selfcheck) return run_selfcheck(check_seed);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << '\n' << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
