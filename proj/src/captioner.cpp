#include "partforge/captioner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include <Eigen/Geometry>
#include <openssl/evp.h>
#include <zlib.h>

#include "httplib.h"
#include "json.hpp"

#include "partforge/library.hpp"

namespace partforge {

using nlohmann::json;

namespace {

struct Camera {
  Vec3 dir;  // camera sits along +dir, looking at the origin
  Vec3 up;
};

const std::array<Camera, 6>& cameras() {
  static const std::array<Camera, 6> c{{{Vec3::UnitX(), Vec3::UnitZ()},
                                        {-Vec3::UnitX(), Vec3::UnitZ()},
                                        {Vec3::UnitY(), Vec3::UnitZ()},
                                        {-Vec3::UnitY(), Vec3::UnitZ()},
                                        {Vec3::UnitZ(), Vec3::UnitY()},
                                        {-Vec3::UnitZ(), Vec3::UnitY()}}};
  return c;
}

int to_pixel(double u, int size) {
  const int p = static_cast<int>(std::floor((u * 0.45 + 0.5) * size));
  return std::clamp(p, 0, size - 1);
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<char>((v >> s) & 0xff));
}

void put_chunk(std::string& out, const char* type, const std::string& data) {
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  put_u32(out, static_cast<std::uint32_t>(
                   crc32(0, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// "http://host:port/path" -> ("http://host:port", "/path")
std::pair<std::string, std::string> split_url(const std::string& url) {
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw std::invalid_argument("endpoint URL needs a scheme: " + url);
  const auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

std::array<ViewImage, 6> render_views(const PointCloud& cloud, int resolution) {
  if (cloud.empty()) throw std::invalid_argument("render_views: empty point cloud");
  if (resolution < 2) throw std::invalid_argument("render_views: resolution must be >= 2");
  const Aabb box = aabb(cloud);
  const Vec3 center = box.center();
  const double half = 0.5 * box.extent().maxCoeff();
  const double scale = half > 0.0 ? 1.0 / half : 1.0;

  std::array<ViewImage, 6> views;
  for (int k = 0; k < 6; ++k) {
    const Camera& cam = cameras()[static_cast<std::size_t>(k)];
    const Vec3 forward = -cam.dir;
    const Vec3 right = forward.cross(cam.up);
    ViewImage& img = views[static_cast<std::size_t>(k)];
    img.camera = k + 1;
    img.width = img.height = resolution;
    img.pixels.assign(static_cast<std::size_t>(resolution * resolution), 0);
    std::vector<double> depth(img.pixels.size(), -std::numeric_limits<double>::infinity());
    for (const Vec3& p : cloud.points) {
      const Vec3 q = (p - center) * scale;
      const int x = to_pixel(q.dot(right), resolution);
      const int y = resolution - 1 - to_pixel(q.dot(cam.up), resolution);
      const double d = q.dot(cam.dir);  // larger is nearer the camera
      const auto idx = static_cast<std::size_t>(y * resolution + x);
      if (d > depth[idx]) {
        depth[idx] = d;
        const double t = std::clamp((d + 1.0) / 2.0, 0.0, 1.0);
        img.pixels[idx] = static_cast<std::uint8_t>(std::lround(80.0 + 175.0 * t));
      }
    }
  }
  return views;
}

std::string encode_png(const ViewImage& image) {
  std::string raw;
  raw.reserve(static_cast<std::size_t>((image.width + 1) * image.height));
  for (int y = 0; y < image.height; ++y) {
    raw.push_back('\0');  // filter: none
    raw.append(reinterpret_cast<const char*>(image.pixels.data()) + y * image.width,
               static_cast<std::size_t>(image.width));
  }
  uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
  std::string packed(packed_size, '\0');
  if (compress2(reinterpret_cast<Bytef*>(packed.data()), &packed_size,
                reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                Z_BEST_COMPRESSION) != Z_OK) {
    throw std::runtime_error("encode_png: zlib compression failed");
  }
  packed.resize(packed_size);

  std::string png("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32(ihdr, static_cast<std::uint32_t>(image.width));
  put_u32(ihdr, static_cast<std::uint32_t>(image.height));
  ihdr += std::string("\x08\x00\x00\x00\x00", 5);  // 8-bit grayscale, no interlace
  put_chunk(png, "IHDR", ihdr);
  put_chunk(png, "IDAT", packed);
  put_chunk(png, "IEND", "");
  return png;
}

std::string base64_encode(const std::string& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string build_prompt(const CaptionJob& job) {
  std::string p;
  p += "The six images show one part of a 3D " + job.category +
       ", rendered from the front, back, left, right, top and bottom. ";
  p += "The whole shape is described as: \"" + job.shape_caption + "\". ";
  p += "The highlighted part is the " + job.part_type + ". ";
  p += "Write one short noun phrase describing this " + job.part_type +
       ", covering its shape, proportions, material and style. ";
  p += kDiversityInstruction;
  p += " Reply with the phrase only.";
  return p;
}

std::string build_request_body(const CaptionJob& job, const std::string& model) {
  json content = json::array();
  content.push_back({{"type", "text"}, {"text", build_prompt(job)}});
  for (const auto& view : job.views) {
    content.push_back({{"type", "image_url"},
                       {"image_url", {{"url", "data:image/png;base64," + base64_encode(encode_png(view))}}}});
  }
  json body{{"model", model}, {"messages", json::array({{{"role", "user"}, {"content", content}}})}};
  return body.dump();
}

std::string parse_caption_response(const std::string& body, const std::string& job_id) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    throw CaptionError(job_id, std::string("malformed response body: ") + e.what());
  }
  std::string text;
  try {
    const json& content = j.at("choices").at(0).at("message").at("content");
    if (content.is_string()) {
      text = content.get<std::string>();
    } else if (content.is_array()) {
      for (const auto& block : content) {
        if (block.value("type", "") == "text") {
          text = block.at("text").get<std::string>();
          break;
        }
      }
    } else {
      throw CaptionError(job_id, "malformed response: message content is neither text nor blocks");
    }
  } catch (const json::exception& e) {
    throw CaptionError(job_id, std::string("malformed response: ") + e.what());
  }
  text = trim(text);
  if (text.empty()) throw CaptionError(job_id, "empty caption in response");
  return text;
}

CaptionResult request_caption(const CaptionJob& job, const EndpointConfig& endpoint) {
  if (endpoint.url.empty()) throw CaptionError(job.part_id, "no endpoint URL configured");
  if (endpoint.api_key.empty()) throw CaptionError(job.part_id, "no API credential configured");
  const auto [base, path] = split_url(endpoint.url);
  const std::string body = build_request_body(job, endpoint.model);
  const httplib::Headers headers{{"Authorization", "Bearer " + endpoint.api_key},
                                 {"X-Job-Id", job.part_id}};

  CaptionResult result;
  std::string last_error;
  for (int attempt = 0; attempt <= endpoint.max_retries; ++attempt) {
    if (attempt > 0) {
      const std::chrono::milliseconds wait = std::min<std::chrono::milliseconds>(
          endpoint.backoff_max, endpoint.backoff_initial * (1LL << (attempt - 1)));
      std::this_thread::sleep_for(wait);
      ++result.retries;
    }
    httplib::Client client(base);
    client.set_connection_timeout(endpoint.timeout);
    client.set_read_timeout(endpoint.timeout);
    client.set_write_timeout(endpoint.timeout);
    auto res = client.Post(path, headers, body, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    const int status = res->status;
    if (status == 200) {
      result.text = parse_caption_response(res->body, job.part_id);
      return result;
    }
    if (status == 401 || status == 403) {
      throw CaptionError(job.part_id, "authentication rejected (HTTP " + std::to_string(status) + ")");
    }
    if (status == 429 || status >= 500) {
      last_error = "HTTP " + std::to_string(status);
      continue;
    }
    throw CaptionError(job.part_id, "request rejected (HTTP " + std::to_string(status) + ")");
  }
  throw CaptionError(job.part_id, "gave up after " + std::to_string(endpoint.max_retries) +
                                      " retries, last error " + last_error);
}

CaptionRunReport caption_library(const std::filesystem::path& root, const EndpointConfig& endpoint,
                                 const CaptionRunOptions& options) {
  if (options.concurrency < 1) throw std::invalid_argument("concurrency must be >= 1");
  const auto manifest_path = root / "manifest.jsonl";
  const auto progress_path = root / kCaptionProgressFile;
  LibraryManifest manifest = read_manifest(manifest_path);

  // Captions finished by an earlier, interrupted run.
  std::map<std::string, std::string> done;
  if (std::ifstream in(progress_path); in) {
    for (std::string line; std::getline(in, line);) {
      try {
        const json j = json::parse(line);
        done[j.at("part_id").get<std::string>()] = j.at("caption").get<std::string>();
      } catch (const json::exception&) {
        // a torn final line from an interrupted write
      }
    }
  }

  CaptionRunReport report;
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& e = manifest.entries[i];
    if (e.source == CaptionSource::mllm) continue;
    ++report.pending;
    if (done.count(e.part_id)) {
      ++report.resumed;
    } else {
      todo.push_back(i);
    }
  }

  std::mutex mu;
  std::ofstream progress;
  if (!todo.empty()) {
    progress.open(progress_path, std::ios::app);
    if (!progress) throw std::runtime_error("cannot write " + progress_path.string());
  }
  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> completed{0};
  std::atomic<bool> interrupted{false};
  auto worker = [&] {
    for (;;) {
      if (interrupted) return;
      const std::size_t k = next.fetch_add(1);
      if (k >= todo.size()) return;
      const ManifestEntry& e = manifest.entries[todo[k]];
      CaptionJob job;
      job.part_id = e.part_id;
      job.category = e.category;
      job.part_type = e.part_type;
      job.shape_caption = !e.shape_caption.empty() ? e.shape_caption
                          : !e.caption.empty()     ? e.caption
                                                   : "a " + e.category;
      try {
        job.views = render_views(read_xyz(root / e.path), options.resolution);
        {
          std::lock_guard<std::mutex> lock(mu);
          ++report.requested;
        }
        const CaptionResult r = request_caption(job, endpoint);
        std::lock_guard<std::mutex> lock(mu);
        report.retries += static_cast<std::size_t>(r.retries);
        done[e.part_id] = r.text;
        progress << json{{"part_id", e.part_id}, {"caption", r.text}}.dump() << '\n';
        progress.flush();
      } catch (const std::exception& ex) {
        std::lock_guard<std::mutex> lock(mu);
        report.failures.push_back(ex.what());
        continue;
      }
      if (options.interrupt_after > 0 && completed.fetch_add(1) + 1 >= options.interrupt_after) {
        interrupted = true;
      }
    }
  };
  std::vector<std::thread> pool;
  const std::size_t n_workers = std::min<std::size_t>(static_cast<std::size_t>(options.concurrency), todo.size());
  for (std::size_t t = 0; t < n_workers; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (progress.is_open()) progress.close();
  if (interrupted) throw CaptionInterrupted("captioning interrupted; progress kept in " + progress_path.string());

  for (auto& e : manifest.entries) {
    if (e.source == CaptionSource::mllm) continue;
    auto it = done.find(e.part_id);
    if (it == done.end()) continue;
    e.caption = it->second;
    e.source = CaptionSource::mllm;
    ++report.captioned;
  }
  if (report.captioned > 0) write_manifest(manifest_path, manifest);
  std::sort(report.failures.begin(), report.failures.end());
  if (report.failures.empty()) std::filesystem::remove(progress_path);
  return report;
}

}  // namespace partforge
