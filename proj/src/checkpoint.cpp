#include "partforge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace partforge {

namespace {

constexpr char kMagic[6] = {'P', 'F', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

class Writer {
 public:
  explicit Writer(std::ofstream& out) : out_(out) {}
  void u32(std::uint32_t v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void f32(float v) { out_.write(reinterpret_cast<const char*>(&v), sizeof v); }

 private:
  std::ofstream& out_;
};

class Reader {
 public:
  Reader(std::ifstream& in, std::string path) : in_(in), path_(std::move(path)) {}
  std::uint32_t u32() {
    std::uint32_t v = 0;
    read(&v, sizeof v);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > (1u << 20)) fail("implausible string length");
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }
  float f32() {
    float v = 0;
    read(&v, sizeof v);
    return v;
  }
  void read(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (!in_) fail("truncated file");
  }
  [[noreturn]] void fail(const std::string& why) const {
    throw std::runtime_error(path_ + ": " + why);
  }

 private:
  std::ifstream& in_;
  std::string path_;
};

void put_dims(std::map<std::string, std::string>& meta, const ModelDims& d) {
  meta["dims.point_hidden"] = std::to_string(d.point_hidden);
  meta["dims.point_feat"] = std::to_string(d.point_feat);
  meta["dims.feat"] = std::to_string(d.feat);
  meta["dims.embed"] = std::to_string(d.embed);
  meta["dims.classes"] = std::to_string(d.classes);
  meta["dims.vocab"] = std::to_string(d.vocab);
}

ModelDims get_dims(const std::map<std::string, std::string>& meta, const Reader& r) {
  auto get = [&](const std::string& key) {
    auto it = meta.find(key);
    if (it == meta.end()) r.fail("metadata lacks " + key);
    return std::stoi(it->second);
  };
  ModelDims d;
  d.point_hidden = get("dims.point_hidden");
  d.point_feat = get("dims.point_feat");
  d.feat = get("dims.feat");
  d.embed = get("dims.embed");
  d.classes = get("dims.classes");
  d.vocab = get("dims.vocab");
  d.validate();
  return d;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const AdamState* adam, std::map<std::string, std::string> meta) {
  put_dims(meta, params.dims);
  meta["adam"] = adam ? "1" : "0";
  if (adam) meta["adam.step"] = std::to_string(adam->step);

  std::vector<std::pair<std::string, const Mat*>> tensors = params.tensors();
  if (adam) {
    for (const auto& [name, m] : adam->m.tensors()) tensors.emplace_back("adam.m." + name, m);
    for (const auto& [name, m] : adam->v.tensors()) tensors.emplace_back("adam.v." + name, m);
  }

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    Writer w(out);
    out.write(kMagic, sizeof kMagic);
    w.u32(kCheckpointVersion);
    w.u32(static_cast<std::uint32_t>(meta.size()));
    for (const auto& [k, v] : meta) {
      w.str(k);
      w.str(v);
    }
    w.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, m] : tensors) {
      w.str(name);
      w.u32(static_cast<std::uint32_t>(m->rows()));
      w.u32(static_cast<std::uint32_t>(m->cols()));
    }
    for (const auto& [name, m] : tensors) {
      for (Eigen::Index i = 0; i < m->size(); ++i) w.f32(static_cast<float>(m->data()[i]));
    }
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  Reader r(in, path.string());
  char magic[sizeof kMagic];
  r.read(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) r.fail("not a partforge checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) r.fail("unsupported checkpoint version " + std::to_string(version));

  Checkpoint ck;
  const std::uint32_t n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    ck.meta[k] = r.str();
  }
  const ModelDims dims = get_dims(ck.meta, r);
  ck.params = ModelParams::zeros(dims);
  const bool has_adam = ck.meta.count("adam") && ck.meta.at("adam") == "1";

  std::vector<std::pair<std::string, Mat*>> expected = ck.params.tensors();
  if (has_adam) {
    ck.adam = AdamState::zeros_like(ck.params);
    ck.adam->step = std::stoll(ck.meta.at("adam.step"));
    for (auto& [name, m] : ck.adam->m.tensors()) expected.emplace_back("adam.m." + name, m);
    for (auto& [name, m] : ck.adam->v.tensors()) expected.emplace_back("adam.v." + name, m);
  }

  const std::uint32_t n_tensors = r.u32();
  if (n_tensors != expected.size()) r.fail("tensor count does not match the model dimensions");
  for (const auto& [name, m] : expected) {
    const std::string got = r.str();
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (got != name || rows != m->rows() || cols != m->cols()) {
      r.fail("tensor " + got + " does not match expected " + name + " " +
             std::to_string(m->rows()) + "x" + std::to_string(m->cols()));
    }
  }
  for (const auto& [name, m] : expected) {
    for (Eigen::Index i = 0; i < m->size(); ++i) m->data()[i] = static_cast<double>(r.f32());
  }
  if (in.peek() != std::char_traits<char>::eof()) r.fail("trailing bytes");
  if (!ck.params.all_finite()) r.fail("non-finite parameters");
  return ck;
}

std::filesystem::path vocab_path_for(const std::filesystem::path& checkpoint) {
  return checkpoint.parent_path() / "vocab.txt";
}

}  // namespace partforge
