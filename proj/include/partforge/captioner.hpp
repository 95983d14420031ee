#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "partforge/geometry.hpp"

namespace partforge {

struct ViewImage {
  int camera = 0;  // 1..6: +X, -X, +Y, -Y, +Z, -Z
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major, 0 = background

  std::uint8_t at(int x, int y) const { return pixels[static_cast<std::size_t>(y * width + x)]; }
};

// Orthographic point splats from the six axis directions. The cloud is
// centred on its box and scaled uniformly so its largest extent spans 90% of
// the frame; nearer points overwrite farther ones and are drawn brighter.
std::array<ViewImage, 6> render_views(const PointCloud& cloud, int resolution = 128);

// 8-bit grayscale PNG.
std::string encode_png(const ViewImage& image);
std::string base64_encode(const std::string& bytes);

struct CaptionJob {
  std::string part_id;
  std::string category;
  std::string part_type;
  std::string shape_caption;
  std::array<ViewImage, 6> views;
};

inline constexpr const char* kDiversityInstruction =
    "Use varied vocabulary and cover as many distinct descriptive words and phrases as you can.";

std::string build_prompt(const CaptionJob& job);

struct EndpointConfig {
  std::string url;  // http(s)://host[:port]/path of a chat-completions endpoint
  std::string api_key;
  std::string model = "llava";
  int max_retries = 4;
  std::chrono::milliseconds backoff_initial{500};
  std::chrono::milliseconds backoff_max{8000};
  std::chrono::seconds timeout{60};
};

// Thrown after retries are exhausted or on a non-retryable failure.
class CaptionError : public std::runtime_error {
 public:
  CaptionError(std::string job_id, const std::string& what)
      : std::runtime_error("job " + job_id + ": " + what), job_id_(std::move(job_id)) {}
  const std::string& job_id() const { return job_id_; }

 private:
  std::string job_id_;
};

struct CaptionResult {
  std::string text;
  int retries = 0;
};

// JSON request body: one user message with the prompt and six PNG data URIs.
std::string build_request_body(const CaptionJob& job, const std::string& model);
// First text block of the first choice, trimmed; throws on malformed bodies.
std::string parse_caption_response(const std::string& body, const std::string& job_id);

// Sends X-Job-Id and a bearer token. Retries 429, 5xx and transport errors
// with exponential backoff; 401/403, other 4xx, and malformed or empty
// replies are terminal.
CaptionResult request_caption(const CaptionJob& job, const EndpointConfig& endpoint);

struct CaptionRunOptions {
  int concurrency = 4;
  int resolution = 128;
  // Stop (throwing) once this many jobs completed in this run, leaving the
  // progress file behind as an interrupted run would. 0 disables.
  std::size_t interrupt_after = 0;
};

struct CaptionRunReport {
  std::size_t pending = 0;    // records lacking an MLLM caption at start
  std::size_t resumed = 0;    // taken from an earlier run's progress file
  std::size_t requested = 0;  // jobs sent this run
  std::size_t captioned = 0;  // records updated in the manifest
  std::size_t retries = 0;
  std::vector<std::string> failures;  // one line per terminal job failure
};

inline constexpr const char* kCaptionProgressFile = "caption_progress.jsonl";

class CaptionInterrupted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Captions every record whose source is not "mllm", records each success in
// caption_progress.jsonl as it lands, then rewrites manifest.jsonl.
CaptionRunReport caption_library(const std::filesystem::path& root, const EndpointConfig& endpoint,
                                 const CaptionRunOptions& options = {});

}  // namespace partforge
