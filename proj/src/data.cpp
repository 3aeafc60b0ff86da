#include "pfsm/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "pfsm/errors.hpp"
#include "pfsm/rng.hpp"

namespace pfsm {

namespace {

constexpr double kBackgroundLevel = 0.25;
constexpr double kForegroundLevel = 0.85;
constexpr double kEdgeSoftness = 1.5;  // pixels of linear boundary falloff
constexpr double kGradientAmp = 0.08;
constexpr double kSpeckleAmp = 0.06;
constexpr int kSpeckleCells = 8;
constexpr double kMinForeground = 0.02;
constexpr double kMaxForeground = 0.6;
constexpr int kMaxPoseAttempts = 100;

constexpr double kPi = 3.14159265358979323846;

double clip01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

struct Pose {
  ShapeFamily family = ShapeFamily::ellipse;
  double cx = 0.5, cy = 0.5;
  // ellipse
  double a = 0.2, b = 0.2, theta = 0.0;
  // blob
  double r0 = 0.2;
  double amp[3] = {0, 0, 0};
  double phase[3] = {0, 0, 0};
  // ring
  double rc = 0.2, hw = 0.05;
};

Pose draw_pose(ShapeFamily family, Pcg32& rng) {
  Pose p;
  p.family = family;
  p.cx = rng.uniform(0.35, 0.65);
  p.cy = rng.uniform(0.35, 0.65);
  switch (family) {
    case ShapeFamily::ellipse:
      p.a = rng.uniform(0.12, 0.30);
      p.b = rng.uniform(0.12, 0.30);
      p.theta = rng.uniform(0.0, kPi);
      break;
    case ShapeFamily::blob:
      p.r0 = rng.uniform(0.14, 0.28);
      for (int k = 0; k < 3; ++k) {
        p.amp[k] = rng.uniform(-0.12, 0.12);
        p.phase[k] = rng.uniform(0.0, 2.0 * kPi);
      }
      break;
    case ShapeFamily::ring:
      p.rc = rng.uniform(0.16, 0.30);
      p.hw = rng.uniform(0.04, 0.09);
      break;
  }
  return p;
}

// Signed distance proxy in normalized units: negative inside the shape.
double signed_distance(const Pose& p, double px, double py) {
  double dx = px - p.cx;
  double dy = py - p.cy;
  double rho = std::sqrt(dx * dx + dy * dy);
  switch (p.family) {
    case ShapeFamily::ellipse: {
      double u = std::cos(p.theta) * dx + std::sin(p.theta) * dy;
      double v = -std::sin(p.theta) * dx + std::cos(p.theta) * dy;
      double phi = std::atan2(v, u);
      double c = std::cos(phi), s = std::sin(phi);
      double rb = p.a * p.b / std::sqrt(p.b * p.b * c * c + p.a * p.a * s * s);
      return rho - rb;
    }
    case ShapeFamily::blob: {
      double phi = std::atan2(dy, dx);
      double rb = p.r0;
      for (int k = 0; k < 3; ++k) {
        rb += p.r0 * p.amp[k] * std::cos((k + 2) * phi + p.phase[k]);
      }
      return rho - rb;
    }
    case ShapeFamily::ring:
      return std::fabs(rho - p.rc) - p.hw;
  }
  return rho;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  std::size_t offset() const { return off_; }

  void need(std::size_t n, const char* field) {
    if (off_ + n > bytes_.size()) {
      throw FormatError(what_ + ": truncated while reading " + field + " at byte offset " +
                        std::to_string(off_) + " (need " + std::to_string(n) + " bytes, have " +
                        std::to_string(bytes_.size() - off_) + ")");
    }
  }

  std::uint8_t u8(const char* field) {
    need(1, field);
    return static_cast<std::uint8_t>(bytes_[off_++]);
  }

  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[off_ + i])) << (8 * i);
    }
    off_ += 4;
    return v;
  }

  double f64(const char* field) {
    need(8, field);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
      bits |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes_[off_ + i])) << (8 * i);
    }
    off_ += 8;
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }

  void expect_magic(const char* magic, const char* field) {
    std::size_t n = std::strlen(magic);
    need(n, field);
    if (bytes_.compare(off_, n, magic) != 0) {
      throw FormatError(what_ + ": bad magic at byte offset " + std::to_string(off_) +
                        ", expected \"" + magic + "\"");
    }
    off_ += n;
  }

  void expect_end() {
    if (off_ != bytes_.size()) {
      throw FormatError(what_ + ": " + std::to_string(bytes_.size() - off_) +
                        " trailing bytes at byte offset " + std::to_string(off_));
    }
  }

 private:
  const std::string& bytes_;
  std::string what_;
  std::size_t off_ = 0;
};

std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open file: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open file for writing: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path);
}

}  // namespace

std::string shape_family_name(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::ellipse: return "ellipse";
    case ShapeFamily::blob: return "blob";
    case ShapeFamily::ring: return "ring";
  }
  throw ValidationError("unknown shape family value");
}

ShapeFamily shape_family_from_name(const std::string& s) {
  if (s == "ellipse") return ShapeFamily::ellipse;
  if (s == "blob") return ShapeFamily::blob;
  if (s == "ring") return ShapeFamily::ring;
  throw ValidationError("unknown shape_family \"" + s + "\" (expected ellipse, blob or ring)");
}

std::string background_name(BackgroundTexture b) {
  switch (b) {
    case BackgroundTexture::flat: return "flat";
    case BackgroundTexture::gradient: return "gradient";
    case BackgroundTexture::speckle: return "speckle";
  }
  throw ValidationError("unknown background value");
}

BackgroundTexture background_from_name(const std::string& s) {
  if (s == "flat") return BackgroundTexture::flat;
  if (s == "gradient") return BackgroundTexture::gradient;
  if (s == "speckle") return BackgroundTexture::speckle;
  throw ValidationError("unknown background_texture \"" + s +
                        "\" (expected flat, gradient or speckle)");
}

void DatasetSpec::validate() const {
  if (client_id.empty()) throw ValidationError("client_id must be non-empty");
  if (n_samples < 10) {
    throw ValidationError("n_samples must be at least 10, got " + std::to_string(n_samples));
  }
  if (!(gamma > 0.0)) throw ValidationError("gamma must be positive");
  if (!(noise_sigma >= 0.0)) throw ValidationError("noise_sigma must be non-negative");
  if (!std::isfinite(gain) || !std::isfinite(bias) || !std::isfinite(gamma)) {
    throw ValidationError("gain, bias and gamma must be finite");
  }
}

Tensor majority_pool(const Tensor& mask, int factor) {
  if (mask.shape().size() != 2) throw ShapeError("majority_pool expects a rank-2 mask");
  if (factor <= 0) throw ValidationError("pool factor must be positive");
  int h = static_cast<int>(mask.shape()[0]);
  int w = static_cast<int>(mask.shape()[1]);
  if (h % factor != 0 || w % factor != 0) {
    throw ShapeError("mask side not divisible by pool factor " + std::to_string(factor));
  }
  const auto& v = mask.values();
  int oh = h / factor, ow = w / factor;
  std::vector<double> out(static_cast<std::size_t>(oh) * ow, 0.0);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      int count = 0;
      for (int fy = 0; fy < factor; ++fy) {
        for (int fx = 0; fx < factor; ++fx) {
          double m = v[static_cast<std::size_t>(oy * factor + fy) * w + ox * factor + fx];
          if (m != 0.0 && m != 1.0) {
            throw ValidationError("majority_pool input is not binary");
          }
          if (m == 1.0) ++count;
        }
      }
      // ties go to foreground
      out[static_cast<std::size_t>(oy) * ow + ox] = (2 * count >= factor * factor) ? 1.0 : 0.0;
    }
  }
  return Tensor::from_vector({oh, ow}, std::move(out));
}

std::vector<Sample> generate_client(const DatasetSpec& spec, int image_size, int mask_scale) {
  spec.validate();
  if (image_size <= 0 || mask_scale <= 0 || image_size % mask_scale != 0) {
    throw ValidationError("image_size must be a positive multiple of mask_scale");
  }
  const int S = image_size;
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(spec.n_samples));

  for (int idx = 0; idx < spec.n_samples; ++idx) {
    Pcg32 rng = make_stream(spec.seed, "sample/" + std::to_string(idx));

    // redraw the pose until the foreground fraction is reasonable
    Pose pose;
    std::vector<double> dist(static_cast<std::size_t>(S) * S);
    bool placed = false;
    for (int attempt = 0; attempt < kMaxPoseAttempts && !placed; ++attempt) {
      pose = draw_pose(spec.shape_family, rng);
      int fg = 0;
      for (int y = 0; y < S; ++y) {
        for (int x = 0; x < S; ++x) {
          double d = signed_distance(pose, (x + 0.5) / S, (y + 0.5) / S);
          dist[static_cast<std::size_t>(y) * S + x] = d;
          if (d <= 0.0) ++fg;
        }
      }
      double frac = static_cast<double>(fg) / (static_cast<double>(S) * S);
      placed = frac >= kMinForeground && frac <= kMaxForeground;
    }
    if (!placed) {
      throw ValidationError("client " + spec.client_id + " sample " + std::to_string(idx) +
                            ": no acceptable shape placement in " +
                            std::to_string(kMaxPoseAttempts) + " attempts");
    }

    // texture parameters are drawn after the pose is accepted
    double grad_angle = 0.0;
    std::vector<double> speckle;
    if (spec.background_texture == BackgroundTexture::gradient) {
      grad_angle = rng.uniform(0.0, 2.0 * kPi);
    } else if (spec.background_texture == BackgroundTexture::speckle) {
      speckle.resize(static_cast<std::size_t>(kSpeckleCells) * kSpeckleCells);
      for (auto& c : speckle) c = rng.uniform(-kSpeckleAmp, kSpeckleAmp);
    }

    std::vector<double> image(static_cast<std::size_t>(S) * S);
    std::vector<double> mask(static_cast<std::size_t>(S) * S);
    for (int y = 0; y < S; ++y) {
      for (int x = 0; x < S; ++x) {
        std::size_t i = static_cast<std::size_t>(y) * S + x;
        double d = dist[i];
        mask[i] = d <= 0.0 ? 1.0 : 0.0;
        double cov = clip01(0.5 - d * S / kEdgeSoftness);
        double clean = kBackgroundLevel + (kForegroundLevel - kBackgroundLevel) * cov;
        double v = clip01(spec.gain * std::pow(clean, spec.gamma) + spec.bias);
        if (spec.noise_sigma > 0.0) v += spec.noise_sigma * rng.normal();
        switch (spec.background_texture) {
          case BackgroundTexture::flat:
            break;
          case BackgroundTexture::gradient: {
            double proj = ((x + 0.5) / S - 0.5) * std::cos(grad_angle) +
                          ((y + 0.5) / S - 0.5) * std::sin(grad_angle);
            v += kGradientAmp * 2.0 * proj;
            break;
          }
          case BackgroundTexture::speckle: {
            int cx = x * kSpeckleCells / S;
            int cy = y * kSpeckleCells / S;
            v += speckle[static_cast<std::size_t>(cy) * kSpeckleCells + cx];
            break;
          }
        }
        image[i] = clip01(v);
      }
    }

    Sample s;
    s.image = Tensor::from_vector({1, S, S}, std::move(image));
    s.mask = Tensor::from_vector({S, S}, std::move(mask));
    s.downsampled_mask = majority_pool(s.mask, mask_scale);
    out.push_back(std::move(s));
  }
  return out;
}

std::pair<std::vector<Sample>, std::vector<Sample>> split(const std::vector<Sample>& dataset,
                                                          double train_fraction,
                                                          std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ValidationError("train_fraction must be in (0, 1)");
  }
  std::size_t n = dataset.size();
  if (n < 2) throw ValidationError("need at least 2 samples to split");
  auto n_test = static_cast<std::size_t>(std::lround((1.0 - train_fraction) * static_cast<double>(n)));
  if (n_test < 1) n_test = 1;
  if (n_test >= n) n_test = n - 1;

  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  Pcg32 rng = make_stream(seed, "split");
  rng.shuffle(idx);

  std::pair<std::vector<Sample>, std::vector<Sample>> parts;
  for (std::size_t i = 0; i < n; ++i) {
    (i < n_test ? parts.second : parts.first).push_back(dataset[idx[i]]);
  }
  return parts;
}

void write_sample(const Sample& sample, const std::string& path) {
  if (sample.image.shape().size() != 3 || sample.image.shape()[0] != 1) {
    throw ShapeError("write_sample expects a (1, S, S) image");
  }
  int S = sample.image.shape()[1];
  if (sample.image.shape()[2] != S || sample.mask.shape() != Shape{S, S}) {
    throw ShapeError("write_sample expects a square image with a matching (S, S) mask");
  }
  std::string bytes;
  bytes.reserve(9 + static_cast<std::size_t>(S) * S * 9);
  bytes += "PFSD";
  bytes.push_back(1);  // version
  put_u32(bytes, static_cast<std::uint32_t>(S));
  for (double v : sample.image.values()) put_f64(bytes, v);
  for (double m : sample.mask.values()) {
    if (m != 0.0 && m != 1.0) throw ValidationError("write_sample mask is not binary");
    bytes.push_back(m == 1.0 ? 1 : 0);
  }
  write_file_bytes(path, bytes);
}

Sample read_sample(const std::string& path, int mask_scale) {
  std::string bytes = read_file_bytes(path);
  ByteReader r(bytes, path);
  r.expect_magic("PFSD", "magic");
  std::uint8_t version = r.u8("version");
  if (version != 1) {
    throw FormatError(path + ": unsupported version " + std::to_string(version) +
                      " at byte offset 4");
  }
  std::uint32_t S = r.u32("image side");
  if (S == 0 || S > 4096) {
    throw FormatError(path + ": implausible image side " + std::to_string(S) +
                      " at byte offset 5");
  }
  std::size_t n = static_cast<std::size_t>(S) * S;
  std::vector<double> image(n);
  for (std::size_t i = 0; i < n; ++i) image[i] = r.f64("image values");
  std::vector<double> mask(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t off = r.offset();
    std::uint8_t m = r.u8("mask bytes");
    if (m > 1) {
      throw FormatError(path + ": invalid mask byte " + std::to_string(m) +
                        " at byte offset " + std::to_string(off) + " (must be 0 or 1)");
    }
    mask[i] = m;
  }
  r.expect_end();

  int side = static_cast<int>(S);
  Sample s;
  s.image = Tensor::from_vector({1, side, side}, std::move(image));
  s.mask = Tensor::from_vector({side, side}, std::move(mask));
  if (mask_scale > 0 && side % mask_scale == 0) {
    s.downsampled_mask = majority_pool(s.mask, mask_scale);
  } else {
    throw ValidationError("mask_scale must divide the stored image side");
  }
  return s;
}

void write_dataset(const DatasetSpec& spec, const std::vector<Sample>& samples,
                   const std::string& dir) {
  spec.validate();
  if (samples.size() != static_cast<std::size_t>(spec.n_samples)) {
    throw ValidationError("sample count does not match spec.n_samples");
  }
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["client_id"] = spec.client_id;
  j["n_samples"] = spec.n_samples;
  j["shape_family"] = shape_family_name(spec.shape_family);
  j["gain"] = spec.gain;
  j["bias"] = spec.bias;
  j["gamma"] = spec.gamma;
  j["noise_sigma"] = spec.noise_sigma;
  j["background_texture"] = background_name(spec.background_texture);
  j["seed"] = spec.seed;
  write_file_bytes(dir + "/spec.json", j.dump(2) + "\n");
  char name[32];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::snprintf(name, sizeof(name), "sample_%04zu.pfsd", i);
    write_sample(samples[i], dir + "/" + name);
  }
}

std::pair<DatasetSpec, std::vector<Sample>> read_dataset(const std::string& dir, int mask_scale) {
  std::string spec_path = dir + "/spec.json";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_bytes(spec_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(spec_path + ": " + e.what());
  }
  DatasetSpec spec;
  try {
    spec.client_id = j.at("client_id").get<std::string>();
    spec.n_samples = j.at("n_samples").get<int>();
    spec.shape_family = shape_family_from_name(j.at("shape_family").get<std::string>());
    spec.gain = j.at("gain").get<double>();
    spec.bias = j.at("bias").get<double>();
    spec.gamma = j.at("gamma").get<double>();
    spec.noise_sigma = j.at("noise_sigma").get<double>();
    spec.background_texture = background_from_name(j.at("background_texture").get<std::string>());
    spec.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(spec_path + ": " + e.what());
  }
  spec.validate();
  std::vector<Sample> samples;
  samples.reserve(static_cast<std::size_t>(spec.n_samples));
  char name[32];
  for (int i = 0; i < spec.n_samples; ++i) {
    std::snprintf(name, sizeof(name), "sample_%04d.pfsd", i);
    samples.push_back(read_sample(dir + "/" + name, mask_scale));
  }
  return {spec, samples};
}

std::vector<double> intensity_histogram(const std::vector<Sample>& samples, int bins) {
  if (bins <= 0) throw ValidationError("bins must be positive");
  std::vector<double> hist(static_cast<std::size_t>(bins), 0.0);
  std::size_t total = 0;
  for (const auto& s : samples) {
    for (double v : s.image.values()) {
      int b = static_cast<int>(v * bins);
      if (b < 0) b = 0;
      if (b >= bins) b = bins - 1;
      hist[static_cast<std::size_t>(b)] += 1.0;
      ++total;
    }
  }
  if (total > 0) {
    for (auto& h : hist) h /= static_cast<double>(total);
  }
  return hist;
}

}  // namespace pfsm
