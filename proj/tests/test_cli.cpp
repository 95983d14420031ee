#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "stub_server.hpp"

namespace fs = std::filesystem;

namespace {

const fs::path& work() {
  static const fs::path p = [] {
    const fs::path d = fs::path(TEST_TMP_DIR) / "cli";
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

struct Run {
  int code = -1;
  std::string out;
  std::string err;
};

Run run(const std::string& args, const std::string& env = "") {
  const fs::path out = work() / "stdout.txt";
  const fs::path err = work() / "stderr.txt";
  const std::string cmd = env + " '" + std::string(PARTFORGE_BIN) + "' " + args + " >'" + out.string() +
                          "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

const fs::path& project() {
  static const fs::path p = [] {
    const fs::path d = work() / "proj";
    const auto r = run("library build --synthetic --out '" + d.string() + "' --points 48 --instances 1");
    REQUIRE(r.code == 0);
    return d;
  }();
  return p;
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::vector<fs::path> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(a)) fa.push_back(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b)) fb.push_back(fs::relative(e.path(), b));
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb) return false;
  for (const auto& rel : fa) {
    if (fs::is_regular_file(a / rel) && slurp(a / rel) != slurp(b / rel)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("selfcheck passes every oracle") {
  const auto r = run("selfcheck");
  CHECK(r.code == 0);
  CHECK(r.out.find("FAIL") == std::string::npos);
  int passes = 0;
  for (std::size_t at = r.out.find("PASS"); at != std::string::npos; at = r.out.find("PASS", at + 1)) ++passes;
  CHECK(passes == 4);
}

TEST_CASE("library build writes a library and schemas that ingest cleanly") {
  const auto& p = project();
  CHECK(fs::exists(p / "library" / "manifest.jsonl"));
  CHECK(fs::exists(p / "schemas" / "chair.json"));
  const auto r = run("library build --library '" + (p / "library").string() + "'");
  CHECK(r.code == 0);
  CHECK(r.out.find("0 rejected") != std::string::npos);
}

TEST_CASE("augment output is byte identical across runs") {
  const auto lib = (project() / "library").string();
  const auto a = work() / "aug-a";
  const auto b = work() / "aug-b";
  const std::string common = "augment --library '" + lib + "' --count 12 --seed 4 --points 96 --out ";
  REQUIRE(run(common + "'" + a.string() + "'").code == 0);
  REQUIRE(run("--threads 1 " + common + "'" + b.string() + "'").code == 0);
  CHECK(same_tree(a, b));
  const auto meta = nlohmann::json::parse(slurp(a / "run.json"));
  CHECK(meta["count"] == 12);
  CHECK(meta["inter"] == true);
}

TEST_CASE("argument errors exit with status 2") {
  CHECK(run("augment --count 3").code == 2);
  CHECK(run("augment --library x --bogus").code == 2);
  CHECK(run("nonsense").code == 2);
  CHECK(run("train --out '" + (work() / "t").string() + "' --set nokey").code == 2);
}

TEST_CASE("runtime errors exit with status 1 and a message") {
  const auto r = run("augment --library '" + (work() / "missing").string() + "' --out '" +
                     (work() / "o").string() + "'");
  CHECK(r.code == 1);
  CHECK(r.err.rfind("error: ", 0) == 0);
  const auto bad_key = run("train --out '" + (work() / "t").string() + "' --set colour=red");
  CHECK(bad_key.code == 1);
  CHECK(bad_key.err.find("colour") != std::string::npos);
}

TEST_CASE("train, eval and score run end to end deterministically") {
  const fs::path cfg = work() / "tiny.cfg";
  std::ofstream(cfg) << "batch_size = 4\nepochs = 2\nsteps_per_epoch = 2\nn_points = 48\n"
                        "feat = 8\npoint_hidden = 8\nembed = 8\ngallery_size = 6\n"
                        "synthetic_points = 48\nsynthetic_instances = 1\nsinkhorn_iters = 40\n";
  const auto a = work() / "train-a";
  const auto b = work() / "train-b";
  REQUIRE(run("train --config '" + cfg.string() + "' --out '" + a.string() + "'").code == 0);
  REQUIRE(run("train --config '" + cfg.string() + "' --out '" + b.string() + "'").code == 0);
  CHECK(same_tree(a, b));

  const auto over = run("train --config '" + cfg.string() + "' --set seed=9 --out '" +
                            (work() / "train-c").string() + "'",
                        "PARTFORGE_SEED=5");
  REQUIRE(over.code == 0);
  CHECK(nlohmann::json::parse(slurp(work() / "train-c" / "run.json"))["config"]["seed"] == "9");
  REQUIRE(run("train --config '" + cfg.string() + "' --out '" + (work() / "train-d").string() + "'",
              "PARTFORGE_SEED=5")
              .code == 0);
  CHECK(nlohmann::json::parse(slurp(work() / "train-d" / "run.json"))["config"]["seed"] == "5");

  const auto report = work() / "eval.json";
  const auto e = run("eval --ckpt '" + (a / "checkpoint.bin").string() + "' --gallery '" +
                     (a / "gallery").string() + "' --out '" + report.string() + "'");
  REQUIRE(e.code == 0);
  const auto j = nlohmann::json::parse(slurp(report));
  CHECK(j["num_shapes"] == 6);
  CHECK(j["checkpoint"] == "checkpoint.bin@step-4");

  // The report matches the held-out metrics the trainer logged at the last epoch.
  std::ifstream metrics(a / "metrics.csv");
  std::string line, last;
  while (std::getline(metrics, line)) last = line;
  std::stringstream ss(last);
  std::string cell;
  std::vector<std::string> cells;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  REQUIRE(cells.size() == 7);
  CHECK(j["s2t_rr1"].get<double>() == doctest::Approx(std::stod(cells[1])));
  CHECK(j["t2s_ndcg5"].get<double>() == doctest::Approx(std::stod(cells[6])));

  const auto s = run("score --ckpt '" + (a / "checkpoint.bin").string() + "' --shape '" +
                     (a / "gallery" / "pair_0.xyz").string() + "' --text 'a chair with a seat'");
  REQUIRE(s.code == 0);
  const double v = std::stod(s.out);
  CHECK(v <= 0.0);
  CHECK(v >= -2.0);
}

TEST_CASE("library caption talks to the endpoint with the environment key") {
  stub::Server server;
  const fs::path root = work() / "cap";
  REQUIRE(run("library build --synthetic --out '" + root.string() + "' --points 16 --instances 1").code == 0);
  const auto lib = (root / "library").string();
  CHECK(run("library caption --library '" + lib + "' --endpoint " + server.url(), "env -u PARTFORGE_API_KEY").code == 1);
  const auto r = run("library caption --library '" + lib + "' --endpoint " + server.url(), "PARTFORGE_API_KEY=sk-test");
  CHECK(r.code == 0);
  CHECK(server.last_auth() == "Bearer sk-test");
  CHECK(r.out.find(" 0 retries") != std::string::npos);
}
