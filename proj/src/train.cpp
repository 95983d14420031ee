#include "partforge/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "partforge/checkpoint.hpp"
#include "partforge/rng.hpp"

namespace partforge {

namespace {

struct Field {
  std::string key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

template <class T>
Field field(const char* key, T TrainConfig::*member) {
  Field f;
  f.key = key;
  if constexpr (std::is_same_v<T, std::string>) {
    f.get = [member](const TrainConfig& c) { return c.*member; };
    f.set = [member](TrainConfig& c, const std::string& v) { c.*member = v; };
  } else if constexpr (std::is_same_v<T, bool>) {
    f.get = [member](const TrainConfig& c) { return std::string(c.*member ? "true" : "false"); };
    f.set = [member, key](TrainConfig& c, const std::string& v) { c.*member = parse_bool(key, v); };
  } else if constexpr (std::is_same_v<T, double>) {
    f.get = [member](const TrainConfig& c) { return format_double(c.*member); };
    f.set = [member, key](TrainConfig& c, const std::string& v) { c.*member = parse_double(key, v); };
  } else if constexpr (std::is_same_v<T, int>) {
    f.get = [member](const TrainConfig& c) { return std::to_string(c.*member); };
    f.set = [member, key](TrainConfig& c, const std::string& v) {
      c.*member = static_cast<int>(parse_int(key, v));
    };
  } else {
    f.get = [member](const TrainConfig& c) { return std::to_string(c.*member); };
    f.set = [member, key](TrainConfig& c, const std::string& v) {
      c.*member = static_cast<T>(parse_uint(key, v));
    };
  }
  return f;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f{
        field("library", &TrainConfig::library),
        field("schemas", &TrainConfig::schemas),
        field("synthetic_seed", &TrainConfig::synthetic_seed),
        field("synthetic_instances", &TrainConfig::synthetic_instances),
        field("synthetic_points", &TrainConfig::synthetic_points),
        field("seed", &TrainConfig::seed),
        field("batch_size", &TrainConfig::batch_size),
        field("epochs", &TrainConfig::epochs),
        field("steps_per_epoch", &TrainConfig::steps_per_epoch),
        field("lr", &TrainConfig::lr),
        field("clip", &TrainConfig::clip),
        field("tau", &TrainConfig::tau),
        field("margin", &TrainConfig::margin),
        field("use_seg", &TrainConfig::use_seg),
        field("use_s2t", &TrainConfig::use_s2t),
        field("use_t2s", &TrainConfig::use_t2s),
        field("augment", &TrainConfig::augment),
        field("pool_size", &TrainConfig::pool_size),
        field("inter", &TrainConfig::inter),
        field("intra", &TrainConfig::intra),
        field("theta", &TrainConfig::theta),
        field("n_points", &TrainConfig::n_points),
        field("feat", &TrainConfig::feat),
        field("point_hidden", &TrainConfig::point_hidden),
        field("point_feat", &TrainConfig::point_feat),
        field("embed", &TrainConfig::embed),
        field("classes", &TrainConfig::classes),
        field("epsilon", &TrainConfig::epsilon),
        field("sinkhorn_iters", &TrainConfig::sinkhorn_iters),
        field("sinkhorn_tol", &TrainConfig::sinkhorn_tol),
        field("gallery_size", &TrainConfig::gallery_size),
        field("eval_every", &TrainConfig::eval_every),
        field("write_gallery", &TrainConfig::write_gallery),
        field("resume", &TrainConfig::resume),
        field("threads", &TrainConfig::threads),
    };
    f.push_back({"similarity", [](const TrainConfig& c) { return std::string(to_string(c.similarity)); },
                 [](TrainConfig& c, const std::string& v) { c.similarity = similarity_mode_from_string(v); }});
    f.push_back({"loss", [](const TrainConfig& c) { return std::string(to_string(c.loss)); },
                 [](TrainConfig& c, const std::string& v) { c.loss = loss_mode_from_string(v); }});
    return f;
  }();
  return table;
}

std::string csv_row(std::initializer_list<std::string> cells) {
  std::string row;
  for (const auto& c : cells) {
    if (!row.empty()) row += ',';
    row += c;
  }
  return row + '\n';
}

std::vector<TrainingItem> to_items(std::span<const GeneratedPair> pairs, const Vocab& vocab) {
  std::vector<TrainingItem> items;
  items.reserve(pairs.size());
  for (const auto& p : pairs) items.push_back({p.shape, tokenize(p.caption, vocab)});
  return items;
}

AugmentOptions augment_options(const TrainConfig& cfg, bool inter, bool intra) {
  AugmentOptions o;
  o.n_points = cfg.n_points;
  o.theta = cfg.theta;
  o.inter = inter;
  o.intra = intra;
  return o;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

const std::vector<std::string>& TrainConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
  }();
  return k;
}

TrainConfig TrainConfig::from_key_values(const KeyValues& kv) {
  TrainConfig c;
  for (const auto& [key, value] : kv) {
    auto it = std::find_if(fields().begin(), fields().end(), [&](const Field& f) { return f.key == key; });
    if (it == fields().end()) throw std::invalid_argument("unknown config key '" + key + "'");
    it->set(c, value);
  }
  c.validate();
  return c;
}

KeyValues TrainConfig::to_key_values() const {
  KeyValues kv;
  for (const auto& f : fields()) kv[f.key] = f.get(*this);
  return kv;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("config: " + m); };
  if (batch_size < 2 && (loss == LossMode::triplet || use_s2t || use_t2s)) {
    fail("batch_size must be >= 2 for contrastive terms");
  }
  if (!(tau > 0.0)) fail("tau must be positive");
  if (epochs < 1 || steps_per_epoch < 1) fail("epochs and steps_per_epoch must be >= 1");
  if (!(lr >= 0.0) || !(clip >= 0.0)) fail("lr and clip must be non-negative");
  if (n_points < 1) fail("n_points must be >= 1");
  if (!(epsilon > 0.0) || sinkhorn_iters < 1 || !(sinkhorn_tol >= 0.0)) fail("bad Sinkhorn settings");
  if (gallery_size < 1) fail("gallery_size must be >= 1");
  if (!(theta > 0.0 && theta <= 1.0)) fail("theta must be in (0, 1]");
  if (!use_seg && !use_s2t && !use_t2s) fail("every loss term is disabled");
}

LossConfig TrainConfig::loss_config() const {
  LossConfig l;
  l.similarity = similarity;
  l.loss = loss;
  l.tau = tau;
  l.margin = margin;
  l.toggles = {use_seg, use_s2t, use_t2s};
  l.sinkhorn = sinkhorn();
  return l;
}

SinkhornOptions TrainConfig::sinkhorn() const { return {epsilon, sinkhorn_iters, sinkhorn_tol}; }

std::vector<AssemblySchema> load_schemas(const std::string& spec) {
  std::vector<std::filesystem::path> files;
  if (std::filesystem::is_directory(spec)) {
    for (const auto& e : std::filesystem::directory_iterator(spec)) {
      if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
  } else {
    std::stringstream ss(spec);
    for (std::string item; std::getline(ss, item, ',');) {
      if (!item.empty()) files.emplace_back(item);
    }
  }
  if (files.empty()) throw std::invalid_argument("no schema files found in '" + spec + "'");
  std::vector<AssemblySchema> out;
  for (const auto& f : files) out.push_back(load_schema(f));
  return out;
}

SyntheticCorpus load_corpus(const TrainConfig& cfg) {
  if (cfg.library == "synthetic") {
    SyntheticLibraryOptions o;
    o.seed = cfg.synthetic_seed;
    o.instances_per_variant = cfg.synthetic_instances;
    o.points_per_part = cfg.synthetic_points;
    return build_synthetic_library(o);
  }
  const std::filesystem::path root = cfg.library;
  const std::string spec =
      cfg.schemas.empty() ? (root.parent_path() / "schemas").string() : cfg.schemas;
  SyntheticCorpus c;
  c.schemas = load_schemas(spec);
  c.library = ingest(root, taxonomy_from_schemas(c.schemas));
  return c;
}

Vocab build_vocab(const SyntheticCorpus& corpus, const CaptionTemplate& tmpl) {
  std::vector<std::string> texts;
  for (const auto& r : corpus.library.records()) texts.push_back(r.caption);
  for (const auto& s : corpus.schemas) texts.push_back(s.category);
  texts.push_back(tmpl.pattern);
  texts.push_back(tmpl.separator);
  texts.push_back(tmpl.conjunction);
  return Vocab::build(texts);
}

double learning_rate_at(const TrainConfig& cfg, std::int64_t step) {
  const double total = static_cast<double>(cfg.epochs * cfg.steps_per_epoch);
  return cfg.lr * std::max(0.0, 1.0 - static_cast<double>(step) / total);
}

std::uint64_t batch_seed(std::uint64_t seed, std::int64_t step) {
  return splitmix64(splitmix64(seed) + static_cast<std::uint64_t>(step));
}

std::uint64_t gallery_seed(std::uint64_t seed) { return splitmix64(seed ^ 0x67616c6c657279ULL); }

Gallery make_gallery(const SyntheticCorpus& corpus, const Vocab& vocab, const TrainConfig& cfg) {
  Gallery g;
  g.pairs = generate_stream(corpus.library, corpus.schemas, augment_options(cfg, true, true),
                            cfg.gallery_size, gallery_seed(cfg.seed));
  for (const auto& p : g.pairs) {
    g.shapes.push_back(p.shape);
    g.captions.push_back(tokenize(p.caption, vocab));
  }
  g.ground = RetrievalGround::one_to_one(g.pairs.size());
  return g;
}

TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir, std::ostream* log) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  const SyntheticCorpus corpus = load_corpus(cfg);
  const CaptionTemplate tmpl;
  const Vocab vocab = build_vocab(corpus, tmpl);

  ModelDims dims;
  dims.feat = cfg.feat;
  dims.point_hidden = cfg.point_hidden;
  dims.point_feat = cfg.point_feat > 0 ? cfg.point_feat : cfg.feat;
  dims.embed = cfg.embed;
  dims.vocab = vocab.size();
  dims.classes = cfg.classes;
  if (dims.classes == 0) {
    for (const auto& s : corpus.schemas) dims.classes = std::max(dims.classes, static_cast<int>(s.slots.size()));
  }
  dims.validate();

  TrainResult result;
  std::int64_t step = 0;
  if (!cfg.resume.empty()) {
    Checkpoint ck = load_checkpoint(cfg.resume);
    if (!(ck.params.dims == dims)) throw std::invalid_argument("resume: checkpoint dimensions differ from config");
    if (!ck.adam) throw std::invalid_argument("resume: checkpoint carries no optimizer state");
    result.params = std::move(ck.params);
    result.adam = std::move(*ck.adam);
    step = result.adam.step;
  } else {
    result.params = ModelParams::init(dims, splitmix64(cfg.seed ^ 0x696e6974ULL));
    result.adam = AdamState::zeros_like(result.params);
  }
  const std::int64_t total_steps = static_cast<std::int64_t>(cfg.epochs * cfg.steps_per_epoch);

  {
    nlohmann::json run;
    for (const auto& [k, v] : cfg.to_key_values()) run["config"][k] = v;
    run["resolved"] = {{"point_feat", dims.point_feat},
                       {"classes", dims.classes},
                       {"vocab_size", dims.vocab},
                       {"parameter_count", result.params.parameter_count()},
                       {"total_steps", total_steps},
                       {"start_step", step},
                       {"library_parts", corpus.library.size()}};
    std::ofstream(out_dir / "run.json") << run.dump(2) << '\n';
  }
  vocab.save(out_dir / "vocab.txt");

  const Gallery gallery = make_gallery(corpus, vocab, cfg);
  if (cfg.write_gallery) write_pairs(out_dir / "gallery", gallery.pairs);

  std::vector<TrainingItem> pool;
  if (!cfg.augment) {
    const std::size_t n = cfg.pool_size > 0 ? cfg.pool_size : cfg.batch_size * cfg.steps_per_epoch;
    if (n < cfg.batch_size) throw std::invalid_argument("pool_size must be >= batch_size");
    pool = to_items(generate_stream(corpus.library, corpus.schemas,
                                    augment_options(cfg, cfg.inter, cfg.intra), n,
                                    splitmix64(cfg.seed ^ 0x706f6f6cULL)),
                    vocab);
  }

  const bool appending = step > 0 && std::filesystem::exists(out_dir / "loss.csv");
  std::ofstream loss_csv(out_dir / "loss.csv", appending ? std::ios::app : std::ios::trunc);
  std::ofstream metrics_csv(out_dir / "metrics.csv", appending ? std::ios::app : std::ios::trunc);
  if (!appending) {
    loss_csv << "epoch,L_SEG,L_S2T,L_T2S,total\n";
    metrics_csv << "epoch,s2t_rr1,s2t_rr5,s2t_ndcg5,t2s_rr1,t2s_rr5,t2s_ndcg5\n";
  }

  std::map<std::string, std::string> meta;
  for (const auto& [k, v] : cfg.to_key_values()) meta["config." + k] = v;
  const auto ckpt_path = out_dir / "checkpoint.bin";
  auto save = [&](const ModelParams& p, const AdamState& a) {
    auto m = meta;
    m["step"] = std::to_string(a.step);
    save_checkpoint(ckpt_path, p, &a, m);
  };

  const LossConfig loss_cfg = cfg.loss_config();
  EvalOptions eval_opts;
  eval_opts.similarity = cfg.similarity;
  eval_opts.sinkhorn = cfg.sinkhorn();

  LossComponents epoch_sum;
  double epoch_total = 0.0;
  std::size_t epoch_steps = 0;
  ModelParams good = result.params;
  AdamState good_adam = result.adam;
  bool any_step = false;
  while (step < total_steps) {
    std::vector<TrainingItem> items;
    if (cfg.augment) {
      items = to_items(generate_stream(corpus.library, corpus.schemas,
                                       augment_options(cfg, cfg.inter, cfg.intra), cfg.batch_size,
                                       batch_seed(cfg.seed, step)),
                       vocab);
    } else {
      Rng rng = make_rng(batch_seed(cfg.seed, step));
      std::vector<std::size_t> idx(pool.size());
      std::iota(idx.begin(), idx.end(), 0);
      for (std::size_t k = 0; k < cfg.batch_size; ++k) {
        std::uniform_int_distribution<std::size_t> d(k, idx.size() - 1);
        std::swap(idx[k], idx[d(rng)]);
        items.push_back(pool[idx[k]]);
      }
    }

    BatchResult br;
    try {
      br = batch_loss(result.params, items, loss_cfg, true);
    } catch (const std::exception& e) {
      // A failure on the very first batch is an input problem, not divergence.
      if (!any_step) throw;
      save(good, good_adam);
      throw TrainingDiverged("step " + std::to_string(step) + ": " + e.what() +
                             "; last good checkpoint kept at " + ckpt_path.string());
    }
    // The loss was finite here, so these are the newest weights worth keeping.
    good = result.params;
    good_adam = result.adam;
    any_step = true;
    adam_step(result.params, br.grads, result.adam, learning_rate_at(cfg, step), cfg.clip);
    if (!result.params.all_finite()) {
      save(good, good_adam);
      throw TrainingDiverged("step " + std::to_string(step) + ": parameters became non-finite; " +
                             "last good checkpoint kept at " + ckpt_path.string());
    }
    ++step;
    epoch_sum.seg += br.parts.seg;
    epoch_sum.s2t += br.parts.s2t;
    epoch_sum.t2s += br.parts.t2s;
    epoch_total += br.total;
    ++epoch_steps;

    if (step % static_cast<std::int64_t>(cfg.steps_per_epoch) == 0 || step == total_steps) {
      EpochRecord rec;
      rec.epoch = static_cast<std::size_t>((step - 1) / static_cast<std::int64_t>(cfg.steps_per_epoch)) + 1;
      const double n = static_cast<double>(epoch_steps);
      rec.loss = {epoch_sum.seg / n, epoch_sum.s2t / n, epoch_sum.t2s / n};
      rec.total = epoch_total / n;
      loss_csv << csv_row({std::to_string(rec.epoch), format_double(rec.loss.seg),
                           format_double(rec.loss.s2t), format_double(rec.loss.t2s),
                           format_double(rec.total)});
      loss_csv.flush();
      const bool last = step == total_steps;
      if (last || (cfg.eval_every > 0 && rec.epoch % cfg.eval_every == 0)) {
        rec.eval = evaluate(result.params, gallery.shapes, gallery.captions, gallery.ground, eval_opts,
                            "step-" + std::to_string(step));
        const auto& e = *rec.eval;
        metrics_csv << csv_row({std::to_string(rec.epoch), format_double(e.s2t.rr1),
                                format_double(e.s2t.rr5), format_double(e.s2t.ndcg5),
                                format_double(e.t2s.rr1), format_double(e.t2s.rr5),
                                format_double(e.t2s.ndcg5)});
        metrics_csv.flush();
      }
      save(result.params, result.adam);
      if (log) {
        *log << "epoch " << rec.epoch << " loss " << format_double(rec.total) << " (seg "
             << format_double(rec.loss.seg) << ", s2t " << format_double(rec.loss.s2t) << ", t2s "
             << format_double(rec.loss.t2s) << ")";
        if (rec.eval) {
          *log << " held-out S2T RR@1 " << format_double(rec.eval->s2t.rr1) << " T2S RR@1 "
               << format_double(rec.eval->t2s.rr1);
        }
        *log << '\n';
      }
      result.epochs.push_back(rec);
      epoch_sum = {};
      epoch_total = 0.0;
      epoch_steps = 0;
    }
  }
  result.final_step = step;
  return result;
}

}  // namespace partforge
