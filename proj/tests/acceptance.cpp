// End-to-end acceptance suite: one PASS/FAIL line per check, non-zero exit on
// any failure.

#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "partforge/augment.hpp"
#include "partforge/captioner.hpp"
#include "partforge/oracles.hpp"
#include "partforge/train.hpp"
#include "stub_server.hpp"

using namespace partforge;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream ss;
  ss.precision(precision);
  ss << v;
  return ss.str();
}

fs::path work_dir() {
  static const fs::path p = [] {
    const fs::path d = fs::path(TEST_TMP_DIR) / "acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_tree(const fs::path& a, const fs::path& b, std::string& why) {
  std::vector<fs::path> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(a)) fa.push_back(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b)) fb.push_back(fs::relative(e.path(), b));
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb) {
    why = "file lists differ";
    return false;
  }
  for (const auto& rel : fa) {
    if (fs::is_regular_file(a / rel) && slurp(a / rel) != slurp(b / rel)) {
      why = rel.string() + " differs";
      return false;
    }
  }
  why = std::to_string(fa.size()) + " files identical";
  return true;
}

int run_cli(const std::string& args) {
  const std::string cmd = "'" + std::string(PARTFORGE_BIN) + "' " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

struct Outcome {
  std::string name;
  bool pass = false;
  std::string detail;
};

Outcome from_check(const oracle::CheckResult& r) {
  return {r.name, r.pass, r.detail + " in " + fmt(r.seconds, 3) + " s"};
}

// Gaps, containment, caption wording and point counts over generated pairs.
Outcome check_augmentation() {
  const auto t0 = Clock::now();
  const SyntheticCorpus corpus = build_synthetic_library({});
  AugmentOptions opts;
  opts.n_points = 1024;
  double worst_gap = 0.0;
  double worst_containment = 1.0;
  std::size_t gap_checks = 0, cover_checks = 0, caption_failures = 0, count_failures = 0;
  const std::size_t per_schema = 1000;
  for (std::size_t s = 0; s < corpus.schemas.size(); ++s) {
    const AssemblySchema& schema = corpus.schemas[s];
    std::vector<GeneratedPair> pairs(per_schema);
    for_each_index(per_schema, Exec::parallel, [&](std::size_t k) {
      pairs[k] = generate_pair(corpus.library, schema, opts, derive_seed(1000 + s, k));
    });
    for (const auto& p : pairs) {
      std::vector<int> where(schema.slots.size(), -1);
      for (std::size_t k = 0; k < p.slots.size(); ++k) where[static_cast<std::size_t>(p.slots[k])] = static_cast<int>(k);
      for (std::size_t k = 0; k < p.slots.size(); ++k) {
        const Slot& slot = schema.slots[static_cast<std::size_t>(p.slots[k])];
        if (slot.relation != Relation::above && slot.relation != Relation::below) continue;
        const int anchor = where[static_cast<std::size_t>(schema.slot_index(slot.anchor))];
        if (anchor < 0) continue;
        const Aabb part = aabb(p.placed_parts[k]);
        const Aabb base = aabb(p.placed_parts[static_cast<std::size_t>(anchor)]);
        const double gap = slot.relation == Relation::above ? part.min.z() - base.max.z()
                                                            : base.min.z() - part.max.z();
        worst_gap = std::max(worst_gap, std::abs(gap - slot.margin));
        ++gap_checks;
      }
      for (const auto& [support, cover] : schema.cover_pairs) {
        const int si = where[static_cast<std::size_t>(schema.slot_index(support))];
        const int ci = where[static_cast<std::size_t>(schema.slot_index(cover))];
        if (si < 0 || ci < 0) continue;
        const double c = containment_fraction(p.placed_parts[static_cast<std::size_t>(si)],
                                               aabb(p.placed_parts[static_cast<std::size_t>(ci)]));
        worst_containment = std::min(worst_containment, c);
        ++cover_checks;
      }
      bool caption_ok = p.caption.find(schema.category) != std::string::npos;
      for (const auto& pc : p.part_captions) caption_ok = caption_ok && p.caption.find(pc) != std::string::npos;
      caption_failures += caption_ok ? 0 : 1;
      count_failures += p.shape.size() == opts.n_points ? 0 : 1;
    }
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.name = "augmentation-geometry";
  o.pass = worst_gap <= 1e-6 && worst_containment >= 0.95 && caption_failures == 0 && count_failures == 0 &&
           gap_checks > 0 && cover_checks > 0 && secs < 30.0;
  o.detail = std::to_string(per_schema) + " pairs per schema: max |gap - margin| " + fmt(worst_gap) + " over " +
             std::to_string(gap_checks) + " relations, min containment " + fmt(worst_containment) + " over " +
             std::to_string(cover_checks) + " cover pairs, caption failures " + std::to_string(caption_failures) +
             ", point-count failures " + std::to_string(count_failures) + " in " + fmt(secs, 3) + " s";
  return o;
}

struct RunSummary {
  double final_contrastive = 0.0;  // (S2T + T2S) / 2 at the last epoch
  double t2s_rr1 = 0.0;
  double s2t_rr1 = 0.0;
};

RunSummary train_run(std::uint64_t seed, bool adjust, const std::string& tag) {
  TrainConfig cfg;
  cfg.seed = seed;
  cfg.feat = 32;
  cfg.n_points = 256;
  cfg.batch_size = 16;
  cfg.epochs = 20;
  cfg.steps_per_epoch = 25;
  cfg.gallery_size = 64;
  cfg.eval_every = 0;
  cfg.write_gallery = false;
  cfg.inter = adjust;
  cfg.intra = adjust;
  const auto r = train(cfg, work_dir() / ("train-" + tag + "-" + std::to_string(seed)));
  const EpochRecord& last = r.epochs.back();
  RunSummary s;
  s.final_contrastive = (last.loss.s2t + last.loss.t2s) / 2.0;
  s.t2s_rr1 = last.eval->t2s.rr1;
  s.s2t_rr1 = last.eval->s2t.rr1;
  return s;
}

std::vector<Outcome> check_training() {
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  auto t0 = Clock::now();
  std::vector<RunSummary> on;
  for (auto s : seeds) on.push_back(train_run(s, true, "adjusted"));
  const double secs_on = seconds_since(t0);
  t0 = Clock::now();
  std::vector<RunSummary> off;
  for (auto s : seeds) off.push_back(train_run(s, false, "raw"));
  const double secs_off = seconds_since(t0);

  auto mean = [](const std::vector<RunSummary>& v, double RunSummary::*f) {
    double sum = 0.0;
    for (const auto& r : v) sum += r.*f;
    return sum / static_cast<double>(v.size());
  };
  const double loss = mean(on, &RunSummary::final_contrastive);
  const double t2s = mean(on, &RunSummary::t2s_rr1);
  const double bound = std::log(16.0) - 0.5;
  Outcome learn;
  learn.name = "training-learns";
  learn.pass = loss < bound && t2s >= 7.8 && secs_on < 600.0;
  learn.detail = "3 seeds: mean final (S2T+T2S)/2 " + fmt(loss) + " (bound " + fmt(bound) +
                 "), mean held-out T2S RR@1 " + fmt(t2s) + "% on 64 items, " + fmt(secs_on, 4) + " s";

  auto both = [&](const std::vector<RunSummary>& v) {
    return (mean(v, &RunSummary::s2t_rr1) + mean(v, &RunSummary::t2s_rr1)) / 2.0;
  };
  const double with = both(on);
  const double without = both(off);
  Outcome ablation;
  ablation.name = "adjustment-ablation";
  ablation.pass = with >= without;
  ablation.detail = "mean RR@1 with inter+intra " + fmt(with) + "%, without " + fmt(without) + "% (" +
                    fmt(secs_off, 4) + " s for the disabled runs)";
  return {learn, ablation};
}

Outcome check_determinism() {
  const fs::path root = work_dir() / "cli";
  Outcome o;
  o.name = "cli-determinism";
  if (run_cli("library build --synthetic --out '" + root.string() + "' --points 128 --instances 1") != 0) {
    o.detail = "library build failed";
    return o;
  }
  const std::string lib = (root / "library").string();
  const std::string aug = "augment --library '" + lib + "' --count 32 --seed 7 --points 256 --out ";
  const fs::path cfg = root / "train.cfg";
  std::ofstream(cfg) << "batch_size = 8\nepochs = 2\nsteps_per_epoch = 4\nfeat = 16\n"
                        "gallery_size = 16\nn_points = 128\nsynthetic_points = 128\n";
  const std::string tr = "train --config '" + cfg.string() + "' --out ";
  const bool ran = run_cli(aug + "'" + (root / "aug-a").string() + "'") == 0 &&
                   run_cli(aug + "'" + (root / "aug-b").string() + "'") == 0 &&
                   run_cli(tr + "'" + (root / "train-a").string() + "'") == 0 &&
                   run_cli(tr + "'" + (root / "train-b").string() + "'") == 0;
  if (!ran) {
    o.detail = "a CLI invocation failed";
    return o;
  }
  std::string why_aug, why_train;
  const bool aug_same = same_tree(root / "aug-a", root / "aug-b", why_aug);
  const bool train_same = same_tree(root / "train-a", root / "train-b", why_train);
  o.pass = aug_same && train_same;
  o.detail = "augment: " + why_aug + "; train: " + why_train;
  return o;
}

Outcome check_captioner() {
  Outcome o;
  o.name = "captioner-retry-resume";
  const fs::path root = work_dir() / "caption";
  SyntheticLibraryOptions lo;
  lo.points_per_part = 64;
  lo.instances_per_variant = 1;
  save_library(build_synthetic_library(lo).library, root);
  const auto entries = read_manifest(root / "manifest.jsonl").entries;

  EndpointConfig ep;
  ep.api_key = "acceptance";
  ep.backoff_initial = std::chrono::milliseconds(5);
  ep.backoff_max = std::chrono::milliseconds(20);

  // Transient throttling followed by success.
  stub::Server throttled;
  ep.url = throttled.url();
  const std::string job = entries[0].part_id;
  throttled.script(job, {{429, "{}"}, {429, "{}"}, {200, stub::caption_body("a throttled caption")}});
  CaptionRunOptions single;
  single.concurrency = 1;
  single.interrupt_after = 1;
  try {
    caption_library(root, ep, single);
  } catch (const CaptionInterrupted&) {
  }
  const int job_requests = throttled.requests(job);
  const int others = throttled.total() - job_requests;

  // Resume the interrupted run against a fresh endpoint.
  stub::Server resumed;
  ep.url = resumed.url();
  const auto report = caption_library(root, ep);
  int duplicates = resumed.requests(job);
  for (const auto& [id, n] : resumed.all_requests()) duplicates += n > 1 ? n - 1 : 0;
  const auto after = read_manifest(root / "manifest.jsonl").entries;
  const bool kept = after[0].caption == "a throttled caption";
  const bool all_done = std::all_of(after.begin(), after.end(),
                                    [](const ManifestEntry& e) { return e.source == CaptionSource::mllm; });

  o.pass = job_requests == 3 && others == 0 && duplicates == 0 && kept && all_done && report.failures.empty() &&
           report.resumed == 1 && report.requested == entries.size() - 1;
  o.detail = "429,429,200 took " + std::to_string(job_requests) + " requests (" +
             std::to_string(job_requests - 1) + " retries); resumed run: " + std::to_string(report.resumed) +
             " resumed, " + std::to_string(report.requested) + " requested, " + std::to_string(duplicates) +
             " duplicate requests";
  return o;
}

}  // namespace

int main() {
  std::vector<std::function<std::vector<Outcome>()>> checks{
      [] { return std::vector<Outcome>{from_check(oracle::check_sinkhorn(2024))}; },
      [] { return std::vector<Outcome>{from_check(oracle::check_gradients(2024))}; },
      [] { return std::vector<Outcome>{check_augmentation()}; },
      [] { return std::vector<Outcome>{from_check(oracle::check_metrics(2024))}; },
      [] { return std::vector<Outcome>{from_check(oracle::check_closed_form_losses())}; },
      check_training,
      [] { return std::vector<Outcome>{check_determinism()}; },
      [] { return std::vector<Outcome>{check_captioner()}; },
  };
  bool ok = true;
  for (const auto& check : checks) {
    std::vector<Outcome> outcomes;
    try {
      outcomes = check();
    } catch (const std::exception& e) {
      outcomes = {{"check", false, std::string("threw: ") + e.what()}};
    }
    for (const auto& o : outcomes) {
      std::cout << (o.pass ? "PASS " : "FAIL ") << o.name << ": " << o.detail << std::endl;
      ok = ok && o.pass;
    }
  }
  return ok ? 0 : 1;
}
