#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "partforge/checkpoint.hpp"
#include "partforge/train.hpp"

using namespace partforge;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::path(TEST_TMP_DIR) / "train" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.synthetic_points = 64;
  c.synthetic_instances = 1;
  c.batch_size = 4;
  c.epochs = 2;
  c.steps_per_epoch = 3;
  c.n_points = 48;
  c.feat = 8;
  c.point_hidden = 8;
  c.embed = 8;
  c.gallery_size = 6;
  c.eval_every = 1;
  c.sinkhorn_iters = 50;
  c.lr = 1e-3;
  return c;
}

// Copies the checkpoint when the trainer reports the given epoch.
class SnapshotBuf : public std::stringbuf {
 public:
  SnapshotBuf(fs::path src, fs::path dst, std::string marker)
      : src_(std::move(src)), dst_(std::move(dst)), marker_(std::move(marker)) {}

 protected:
  std::streamsize xsputn(const char* s, std::streamsize n) override {
    const auto r = std::stringbuf::xsputn(s, n);
    if (!done_ && str().find(marker_) != std::string::npos) {
      fs::copy_file(src_, dst_, fs::copy_options::overwrite_existing);
      done_ = true;
    }
    return r;
  }

 private:
  fs::path src_, dst_;
  std::string marker_;
  bool done_ = false;
};

}  // namespace

TEST_CASE("config parsing rejects duplicates and unknown keys") {
  const auto kv = parse_key_values("# comment\nlr = 0.5\n\nseed=3  # trailing\n");
  CHECK(kv.at("lr") == "0.5");
  CHECK(kv.at("seed") == "3");
  CHECK_THROWS(parse_key_values("lr=1\nlr=2\n"));
  CHECK_THROWS(parse_key_values("novalue\n"));
  CHECK_THROWS(TrainConfig::from_key_values({{"learning_rate", "1"}}));
  CHECK_THROWS(TrainConfig::from_key_values({{"epochs", "many"}}));
  CHECK_THROWS(TrainConfig::from_key_values({{"use_seg", "false"}, {"use_s2t", "false"}, {"use_t2s", "false"}}));
  CHECK(parse_bool("x", "true"));
  CHECK_FALSE(parse_bool("x", "0"));
  CHECK_THROWS(parse_bool("x", "maybe"));
}

TEST_CASE("flags beat environment which beats the file") {
  CHECK(env_name_for("lr") == "PARTFORGE_LR");
  CHECK(env_name_for("a.b") == "PARTFORGE_A_B");
  ::setenv("PARTFORGE_SEED", "11", 1);
  ::setenv("PARTFORGE_TAU", "0.3", 1);
  const auto env = env_overrides(TrainConfig::keys());
  ::unsetenv("PARTFORGE_SEED");
  ::unsetenv("PARTFORGE_TAU");
  const KeyValues file{{"seed", "5"}, {"tau", "0.2"}, {"lr", "0.01"}};
  const KeyValues flags{{"seed", "7"}};
  const auto merged = merge_config(file, env, flags);
  CHECK(merged.at("seed") == "7");
  CHECK(merged.at("tau") == "0.3");
  CHECK(merged.at("lr") == "0.01");
  const auto cfg = TrainConfig::from_key_values(merged);
  CHECK(cfg.seed == 7);
  CHECK(TrainConfig::from_key_values(cfg.to_key_values()).to_key_values() == cfg.to_key_values());
}

TEST_CASE("learning rate decays linearly to zero") {
  auto c = tiny_config();
  CHECK(learning_rate_at(c, 0) == c.lr);
  CHECK(learning_rate_at(c, 3) == doctest::Approx(c.lr / 2));
  CHECK(learning_rate_at(c, 6) == 0.0);
  CHECK(batch_seed(1, 0) != batch_seed(1, 1));
  CHECK(gallery_seed(1) != gallery_seed(2));
}

TEST_CASE("identical training runs write identical files") {
  const auto cfg = tiny_config();
  const auto a = fresh_dir("det-a");
  const auto b = fresh_dir("det-b");
  const auto ra = train(cfg, a);
  train(cfg, b);
  for (const char* f : {"run.json", "loss.csv", "metrics.csv", "checkpoint.bin", "vocab.txt"}) {
    CHECK_MESSAGE(slurp(a / f) == slurp(b / f), f);
  }
  CHECK(ra.epochs.size() == 2);
  CHECK(ra.final_step == 6);
  CHECK(fs::exists(a / "gallery" / "pairs.jsonl"));

  const auto run = nlohmann::json::parse(slurp(a / "run.json"));
  CHECK(run["config"]["batch_size"] == "4");
  CHECK(run["resolved"]["total_steps"] == 6);
  CHECK(run["resolved"]["classes"] == 5);

  std::ifstream loss(a / "loss.csv");
  std::string header;
  std::getline(loss, header);
  CHECK(header == "epoch,L_SEG,L_S2T,L_T2S,total");
}

TEST_CASE("resuming continues the schedule from the saved step") {
  auto cfg = tiny_config();
  cfg.epochs = 3;
  cfg.write_gallery = false;
  const auto full = fresh_dir("resume-full");
  const auto snap = fresh_dir("resume-snap") / "epoch1.bin";
  SnapshotBuf buf(full / "checkpoint.bin", snap, "epoch 1 loss");
  std::ostream log(&buf);
  const auto straight = train(cfg, full, &log);
  REQUIRE(fs::exists(snap));
  fs::copy_file(full / "vocab.txt", snap.parent_path() / "vocab.txt");

  const auto ck = load_checkpoint(snap);
  CHECK(ck.meta.at("step") == "3");
  REQUIRE(ck.adam);
  CHECK(ck.adam->step == 3);

  auto resumed_cfg = cfg;
  resumed_cfg.resume = snap.string();
  const auto resumed = train(resumed_cfg, fresh_dir("resume-rest"));
  REQUIRE(resumed.epochs.size() == 2);
  CHECK(resumed.epochs[0].epoch == 2);
  CHECK(resumed.final_step == 9);
  // Float32 storage perturbs the weights slightly; the trajectory must stay close.
  CHECK(resumed.epochs[1].total == doctest::Approx(straight.epochs[2].total).epsilon(1e-3));

  auto wrong = resumed_cfg;
  wrong.feat = 10;
  CHECK_THROWS(train(wrong, fresh_dir("resume-wrong")));
}

TEST_CASE("fixed pool mode trains without online augmentation") {
  auto cfg = tiny_config();
  cfg.augment = false;
  cfg.pool_size = 8;
  cfg.write_gallery = false;
  const auto r = train(cfg, fresh_dir("pool"));
  CHECK(r.epochs.size() == 2);
  cfg.pool_size = 2;
  CHECK_THROWS(train(cfg, fresh_dir("pool-small")));
}

TEST_CASE("divergence keeps the last good checkpoint") {
  auto cfg = tiny_config();
  cfg.write_gallery = false;
  cfg.lr = 1e300;
  cfg.clip = 0.0;
  const auto dir = fresh_dir("diverge");
  CHECK_THROWS_AS(train(cfg, dir), TrainingDiverged);
  const auto ck = load_checkpoint(dir / "checkpoint.bin");
  CHECK(ck.params.all_finite());
  CHECK(ck.params.point_w1.cwiseAbs().maxCoeff() < 1e3);
}

TEST_CASE("checkpoints round-trip and reject corruption") {
  ModelDims d;
  d.point_hidden = 4;
  d.point_feat = 4;
  d.feat = 4;
  d.embed = 3;
  d.classes = 2;
  d.vocab = 5;
  const auto p = ModelParams::init(d, 1);
  auto adam = AdamState::zeros_like(p);
  adam.step = 12;
  adam.m.seg_w.setConstant(0.25);
  const auto dir = fresh_dir("ckpt");
  const auto path = dir / "c.bin";
  save_checkpoint(path, p, &adam, {{"note", "x"}});
  const auto ck = load_checkpoint(path);
  CHECK(ck.params.dims == d);
  CHECK(ck.meta.at("note") == "x");
  REQUIRE(ck.adam);
  CHECK(ck.adam->step == 12);
  CHECK(ck.adam->m.seg_w(0, 0) == 0.25);
  const auto tp = p.tensors();
  const auto tc = ck.params.tensors();
  for (std::size_t k = 0; k < tp.size(); ++k) {
    CHECK(*tc[k].second == tp[k].second->cast<float>().cast<double>());
  }
  CHECK(vocab_path_for(path) == dir / "vocab.txt");

  const auto bytes = slurp(path);
  std::ofstream(dir / "short.bin", std::ios::binary) << bytes.substr(0, bytes.size() - 3);
  CHECK_THROWS(load_checkpoint(dir / "short.bin"));
  std::ofstream(dir / "long.bin", std::ios::binary) << bytes << "xx";
  CHECK_THROWS(load_checkpoint(dir / "long.bin"));
  std::string bad = bytes;
  bad[0] = 'Q';
  std::ofstream(dir / "magic.bin", std::ios::binary) << bad;
  CHECK_THROWS(load_checkpoint(dir / "magic.bin"));
  CHECK_THROWS(load_checkpoint(dir / "absent.bin"));
}
