#include "doctest.h"

#include <filesystem>
#include <set>

#include <zlib.h>

#include "partforge/captioner.hpp"
#include "partforge/library.hpp"
#include "stub_server.hpp"

using namespace partforge;
namespace fs = std::filesystem;

namespace {

PointCloud surface_box(double sx, double sy, double sz) {
  PointCloud c;
  const int n = 60;
  for (int i = 0; i <= n; ++i) {
    for (int j = 0; j <= n; ++j) {
      const double a = static_cast<double>(i) / n - 0.5;
      const double b = static_cast<double>(j) / n - 0.5;
      for (double s : {-0.5, 0.5}) {
        c.points.emplace_back(s * sx, a * sy, b * sz);
        c.points.emplace_back(a * sx, s * sy, b * sz);
        c.points.emplace_back(a * sx, b * sy, s * sz);
      }
    }
  }
  return c;
}

// Extent of lit pixels as (columns, rows).
std::pair<int, int> lit_extent(const ViewImage& img) {
  int x0 = img.width, x1 = -1, y0 = img.height, y1 = -1;
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      if (img.at(x, y) == 0) continue;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  return {x1 - x0 + 1, y1 - y0 + 1};
}

std::uint32_t be32(const std::string& s, std::size_t at) {
  std::uint32_t v = 0;
  for (int k = 0; k < 4; ++k) v = (v << 8) | static_cast<unsigned char>(s[at + static_cast<std::size_t>(k)]);
  return v;
}

fs::path make_library(const std::string& name) {
  const fs::path root = fs::path(TEST_TMP_DIR) / "captioner" / name;
  fs::remove_all(root);
  SyntheticLibraryOptions o;
  o.points_per_part = 24;
  o.instances_per_variant = 1;
  save_library(build_synthetic_library(o).library, root);
  return root;
}

EndpointConfig endpoint_for(stub::Server& server) {
  EndpointConfig e;
  e.url = server.url();
  e.api_key = "test-key";
  e.backoff_initial = std::chrono::milliseconds(1);
  e.backoff_max = std::chrono::milliseconds(4);
  e.timeout = std::chrono::seconds(5);
  return e;
}

CaptionJob sample_job() {
  CaptionJob job;
  job.part_id = "job-1";
  job.category = "chair";
  job.part_type = "seat";
  job.shape_caption = "a chair with a seat";
  job.views = render_views(surface_box(1, 1, 1), 16);
  return job;
}

}  // namespace

TEST_CASE("a single point lands in the centre pixel of every view") {
  PointCloud c;
  c.points = {{3, -2, 1}};
  const auto views = render_views(c, 128);
  for (const auto& v : views) {
    CHECK(v.at(64, 63) == 168);
    int lit = 0;
    for (auto p : v.pixels) lit += p != 0;
    CHECK(lit == 1);
  }
  CHECK_THROWS(render_views(PointCloud{}, 128));
}

TEST_CASE("views preserve the box aspect ratio") {
  const auto views = render_views(surface_box(2.0, 1.0, 0.5), 128);
  // Side view from +X sees Y across and Z up.
  const auto [w1, h1] = lit_extent(views[0]);
  CHECK(std::abs(w1 - 2 * h1) <= 2);
  // Top view sees X across and Y up.
  const auto [w5, h5] = lit_extent(views[4]);
  CHECK(std::abs(w5 - 2 * h5) <= 2);
  CHECK(std::abs(w5 - static_cast<int>(0.9 * 128)) <= 2);
  CHECK(views[0].camera == 1);
  CHECK(views[5].camera == 6);
  const auto again = render_views(surface_box(2.0, 1.0, 0.5), 128);
  for (int k = 0; k < 6; ++k) CHECK(views[k].pixels == again[k].pixels);
}

TEST_CASE("png bytes decode back to the image") {
  const auto img = render_views(surface_box(1, 2, 3), 32)[2];
  const std::string png = encode_png(img);
  REQUIRE(png.substr(0, 8) == std::string("\x89PNG\r\n\x1a\n", 8));
  CHECK(png.substr(12, 4) == "IHDR");
  CHECK(be32(png, 16) == 32);
  CHECK(be32(png, 20) == 32);
  CHECK(png[24] == 8);
  CHECK(png[25] == 0);
  const std::size_t idat_len = be32(png, 33);
  CHECK(png.substr(37, 4) == "IDAT");
  const std::string idat = png.substr(41, idat_len);
  const std::uint32_t crc = static_cast<std::uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(png.data() + 37), static_cast<uInt>(idat_len + 4)));
  CHECK(be32(png, 41 + idat_len) == crc);
  std::string raw(33 * 32, '\0');
  uLongf raw_len = raw.size();
  REQUIRE(uncompress(reinterpret_cast<Bytef*>(raw.data()), &raw_len,
                     reinterpret_cast<const Bytef*>(idat.data()), static_cast<uLong>(idat.size())) == Z_OK);
  REQUIRE(raw_len == raw.size());
  for (int y = 0; y < 32; ++y) {
    CHECK(raw[static_cast<std::size_t>(y * 33)] == 0);
    for (int x = 0; x < 32; ++x) {
      CHECK(static_cast<unsigned char>(raw[static_cast<std::size_t>(y * 33 + 1 + x)]) == img.at(x, y));
    }
  }
  CHECK(png.substr(png.size() - 8, 4) == "IEND");
}

TEST_CASE("base64 matches the standard alphabet") {
  CHECK(base64_encode("") == "");
  CHECK(base64_encode("f") == "Zg==");
  CHECK(base64_encode("fo") == "Zm8=");
  CHECK(base64_encode("foobar") == "Zm9vYmFy");
}

TEST_CASE("prompt names the category, part and diversity instruction") {
  const auto job = sample_job();
  const auto p = build_prompt(job);
  CHECK(p.find("chair") != std::string::npos);
  CHECK(p.find("seat") != std::string::npos);
  CHECK(p.find(job.shape_caption) != std::string::npos);
  CHECK(p.find(kDiversityInstruction) != std::string::npos);

  const auto body = nlohmann::json::parse(build_request_body(job, "llava"));
  CHECK(body["model"] == "llava");
  const auto& content = body["messages"][0]["content"];
  REQUIRE(content.size() == 7);
  CHECK(content[0]["text"] == p);
  CHECK(content[1]["image_url"]["url"].get<std::string>().rfind("data:image/png;base64,iVBOR", 0) == 0);
}

TEST_CASE("response parsing accepts strings and text blocks") {
  CHECK(parse_caption_response(stub::caption_body("  a red seat \n"), "j") == "a red seat");
  const std::string blocks =
      R"({"choices":[{"message":{"content":[{"type":"image"},{"type":"text","text":"tall legs"}]}}]})";
  CHECK(parse_caption_response(blocks, "j") == "tall legs");
  CHECK_THROWS_AS(parse_caption_response("{", "j"), CaptionError);
  CHECK_THROWS_AS(parse_caption_response(R"({"choices":[]})", "j"), CaptionError);
  CHECK_THROWS_AS(parse_caption_response(stub::caption_body("   "), "j"), CaptionError);
}

TEST_CASE("requests carry credentials and retry transient failures") {
  stub::Server server;
  auto ep = endpoint_for(server);
  const auto job = sample_job();
  const auto ok = request_caption(job, ep);
  CHECK(ok.text == "caption for job-1");
  CHECK(ok.retries == 0);
  CHECK(server.last_auth() == "Bearer test-key");
  CHECK(server.last_body() == build_request_body(job, "llava"));

  server.script("job-1", {{429, "{}"}, {429, "{}"}, {200, stub::caption_body("third time")}});
  const auto r = request_caption(job, ep);
  CHECK(r.text == "third time");
  CHECK(r.retries == 2);
  CHECK(server.requests("job-1") == 4);

  server.script("job-1", {{503, "{}"}, {500, "{}"}, {502, "{}"}});
  ep.max_retries = 2;
  CHECK_THROWS_AS(request_caption(job, ep), CaptionError);
  CHECK(server.requests("job-1") == 7);

  server.script("job-1", {{401, "{}"}});
  CHECK_THROWS_AS(request_caption(job, ep), CaptionError);
  server.script("job-1", {{400, "{}"}});
  CHECK_THROWS_AS(request_caption(job, ep), CaptionError);
  CHECK(server.requests("job-1") == 9);

  server.script("job-1", {{200, "not json"}});
  CHECK_THROWS_AS(request_caption(job, ep), CaptionError);

  auto no_key = endpoint_for(server);
  no_key.api_key.clear();
  CHECK_THROWS_AS(request_caption(job, no_key), CaptionError);
  CHECK(server.requests("job-1") == 10);
}

TEST_CASE("transport errors are retried then reported") {
  int port = 0;
  {
    httplib::Server probe;
    port = probe.bind_to_any_port("127.0.0.1");
  }
  EndpointConfig ep;
  ep.url = "http://127.0.0.1:" + std::to_string(port) + "/v1/chat/completions";
  ep.api_key = "k";
  ep.max_retries = 2;
  ep.backoff_initial = std::chrono::milliseconds(1);
  ep.timeout = std::chrono::seconds(2);
  try {
    request_caption(sample_job(), ep);
    FAIL("expected a failure");
  } catch (const CaptionError& e) {
    CHECK(e.job_id() == "job-1");
    CHECK(std::string(e.what()).find("transport") != std::string::npos);
  }
}

TEST_CASE("captioning a library updates the manifest and is idempotent") {
  stub::Server server;
  const auto root = make_library("full");
  const auto before = read_manifest(root / "manifest.jsonl");
  const auto report = caption_library(root, endpoint_for(server));
  CHECK(report.pending == before.entries.size());
  CHECK(report.captioned == before.entries.size());
  CHECK(report.failures.empty());
  CHECK_FALSE(fs::exists(root / kCaptionProgressFile));
  const auto after = read_manifest(root / "manifest.jsonl");
  for (const auto& e : after.entries) {
    CHECK(e.source == CaptionSource::mllm);
    CHECK(e.caption == "caption for " + e.part_id);
  }
  CHECK(server.max_in_flight() <= 4);

  const int total = server.total();
  const auto again = caption_library(root, endpoint_for(server));
  CHECK(again.pending == 0);
  CHECK(server.total() == total);
}

TEST_CASE("failed jobs are reported and left for the next run") {
  stub::Server server;
  const auto root = make_library("partial");
  const auto entries = read_manifest(root / "manifest.jsonl").entries;
  const std::string bad = entries[1].part_id;
  server.script(bad, {{401, "{}"}});
  auto ep = endpoint_for(server);
  const auto r = caption_library(root, ep);
  REQUIRE(r.failures.size() == 1);
  CHECK(r.failures[0].find(bad) != std::string::npos);
  CHECK(r.captioned == entries.size() - 1);
  CHECK(fs::exists(root / kCaptionProgressFile));

  const auto second = caption_library(root, ep);
  CHECK(second.pending == 1);
  CHECK(second.requested == 1);
  CHECK(second.failures.empty());
  CHECK(server.requests(bad) == 2);
}

TEST_CASE("an interrupted run resumes without repeating requests") {
  stub::Server server;
  server.set_delay(std::chrono::milliseconds(2));
  const auto root = make_library("resume");
  const auto n = read_manifest(root / "manifest.jsonl").entries.size();
  auto ep = endpoint_for(server);
  CaptionRunOptions o;
  o.interrupt_after = 5;
  CHECK_THROWS_AS(caption_library(root, ep, o), CaptionInterrupted);
  CHECK(fs::exists(root / kCaptionProgressFile));
  const int first = server.total();
  CHECK(first >= 5);

  const auto r = caption_library(root, ep);
  CHECK(r.resumed == static_cast<std::size_t>(first));
  CHECK(r.captioned == n);
  CHECK(server.total() == static_cast<int>(n));
  for (const auto& [job, count] : server.all_requests()) CHECK_MESSAGE(count == 1, job);
}
