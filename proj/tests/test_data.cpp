#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <doctest.h>

#include "pfsm/data.hpp"
#include "pfsm/errors.hpp"
#include "pfsm/tensor.hpp"

using namespace pfsm;
namespace fs = std::filesystem;

namespace {

DatasetSpec spec_for(ShapeFamily family, std::uint64_t seed) {
  DatasetSpec s;
  s.client_id = "t_" + shape_family_name(family);
  s.n_samples = 12;
  s.shape_family = family;
  s.seed = seed;
  return s;
}

double foreground_fraction(const Sample& s) {
  double fg = std::accumulate(s.mask.values().begin(), s.mask.values().end(), 0.0);
  return fg / static_cast<double>(s.mask.numel());
}

// mean image intensity over mask==1 vs mask==0 pixels
std::pair<double, double> region_means(const Sample& s) {
  double fg = 0.0, bg = 0.0;
  int nfg = 0, nbg = 0;
  for (int i = 0; i < s.mask.numel(); ++i) {
    if (s.mask.values()[static_cast<std::size_t>(i)] > 0.5) {
      fg += s.image.values()[static_cast<std::size_t>(i)];
      ++nfg;
    } else {
      bg += s.image.values()[static_cast<std::size_t>(i)];
      ++nbg;
    }
  }
  return {fg / nfg, bg / nbg};
}

fs::path temp_dir(const char* tag) {
  static int counter = 0;
  fs::path p = fs::temp_directory_path() /
               ("pfsm_data_" + std::string(tag) + "_" + std::to_string(counter++));
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("generation is bitwise deterministic and per-index stable") {
  DatasetSpec spec = spec_for(ShapeFamily::blob, 77);
  auto a = generate_client(spec, 32);
  auto b = generate_client(spec, 32);
  REQUIRE(a.size() == 12);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image.values() == b[i].image.values());
    CHECK(a[i].mask.values() == b[i].mask.values());
  }

  // growing the dataset must not disturb earlier samples
  DatasetSpec longer = spec;
  longer.n_samples = 15;
  auto c = generate_client(longer, 32);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image.values() == c[i].image.values());
  }

  DatasetSpec reseeded = spec;
  reseeded.seed = 78;
  auto d = generate_client(reseeded, 32);
  CHECK(a[0].image.values() != d[0].image.values());
}

TEST_CASE("every family lands inside the foreground budget") {
  for (ShapeFamily family :
       {ShapeFamily::ellipse, ShapeFamily::blob, ShapeFamily::ring}) {
    auto samples = generate_client(spec_for(family, 5), 32);
    for (const auto& s : samples) {
      INFO(shape_family_name(family));
      double frac = foreground_fraction(s);
      CHECK(frac >= 0.02);
      CHECK(frac <= 0.6);
      CHECK(s.image.shape() == Shape{1, 32, 32});
      CHECK(s.mask.shape() == Shape{32, 32});
      CHECK(s.downsampled_mask.shape() == Shape{8, 8});
      for (double v : s.image.values()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
      for (double v : s.mask.values()) CHECK((v == 0.0 || v == 1.0));
    }
  }
}

TEST_CASE("the intensity transform can invert the contrast polarity") {
  DatasetSpec plain = spec_for(ShapeFamily::ellipse, 42);
  auto ps = generate_client(plain, 32);
  double plain_margin = 0.0;
  for (const auto& s : ps) {
    auto [fg, bg] = region_means(s);
    plain_margin += fg - bg;
  }
  CHECK(plain_margin / ps.size() > 0.2);

  DatasetSpec inverted = plain;
  inverted.gain = -0.9;
  inverted.bias = 0.95;
  auto is = generate_client(inverted, 32);
  double inv_margin = 0.0;
  for (const auto& s : is) {
    auto [fg, bg] = region_means(s);
    inv_margin += fg - bg;
  }
  CHECK(inv_margin / is.size() < -0.2);
}

TEST_CASE("majority pooling follows the ties-go-foreground count rule") {
  // crafted 4x4 mask, factor 2: cells with 0, 1, 2 and 4 foreground pixels
  Tensor mask = Tensor::from_vector({4, 4},
                                    {0, 0, 1, 0,   //
                                     0, 0, 0, 0,   //
                                     1, 1, 1, 1,   //
                                     0, 0, 1, 1});
  Tensor pooled = majority_pool(mask, 2);
  REQUIRE(pooled.shape() == Shape{2, 2});
  CHECK(pooled.values()[0] == 0.0);  // 0 of 4
  CHECK(pooled.values()[1] == 0.0);  // 1 of 4
  CHECK(pooled.values()[2] == 1.0);  // 2 of 4, tie
  CHECK(pooled.values()[3] == 1.0);  // 4 of 4

  // factor 1 is the identity
  CHECK(majority_pool(mask, 1).values() == mask.values());

  CHECK_THROWS_AS(majority_pool(mask, 3), ShapeError);
  Tensor soft = Tensor::full({4, 4}, 0.5);
  CHECK_THROWS_AS(majority_pool(soft, 2), ValidationError);
  CHECK_THROWS_AS(majority_pool(Tensor::zeros({2, 2, 2}), 2), ShapeError);
}

TEST_CASE("split sizes, determinism and disjointness") {
  auto samples = generate_client(spec_for(ShapeFamily::ellipse, 9), 32);
  REQUIRE(samples.size() == 12);

  auto [train, test] = split(samples, 0.9, 123);
  CHECK(train.size() == 11);
  CHECK(test.size() == 1);

  auto [train2, test2] = split(samples, 0.9, 123);
  CHECK(train[0].image.values() == train2[0].image.values());
  CHECK(test[0].image.values() == test2[0].image.values());

  auto [train3, test3] = split(samples, 0.5, 123);
  CHECK(train3.size() == 6);
  CHECK(test3.size() == 6);

  // every sample appears exactly once across the two halves
  auto key = [](const Sample& s) { return s.image.values()[0]; };
  std::vector<double> seen;
  for (const auto& s : train3) seen.push_back(key(s));
  for (const auto& s : test3) seen.push_back(key(s));
  std::vector<double> orig;
  for (const auto& s : samples) orig.push_back(key(s));
  std::sort(seen.begin(), seen.end());
  std::sort(orig.begin(), orig.end());
  CHECK(seen == orig);

  CHECK_THROWS_AS(split(samples, 0.0, 1), ValidationError);
  CHECK_THROWS_AS(split(samples, 1.0, 1), ValidationError);
  std::vector<Sample> one(samples.begin(), samples.begin() + 1);
  CHECK_THROWS_AS(split(one, 0.9, 1), ValidationError);
}

TEST_CASE("sample files round-trip bitwise") {
  auto samples = generate_client(spec_for(ShapeFamily::ring, 31), 32);
  fs::path dir = temp_dir("sample_io");
  fs::path path = dir / "s.pfsd";
  write_sample(samples[0], path.string());
  Sample back = read_sample(path.string(), 4);
  CHECK(back.image.values() == samples[0].image.values());
  CHECK(back.mask.values() == samples[0].mask.values());
  CHECK(back.downsampled_mask.values() == samples[0].downsampled_mask.values());
  fs::remove_all(dir);
}

TEST_CASE("malformed sample files name the problem") {
  auto samples = generate_client(spec_for(ShapeFamily::ellipse, 55), 16);
  fs::path dir = temp_dir("sample_bad");
  fs::path good = dir / "good.pfsd";
  write_sample(samples[0], good.string());
  std::string bytes = slurp(good);
  fs::path bad = dir / "bad.pfsd";

  spit(bad, bytes.substr(0, 40));
  CHECK_THROWS_AS(read_sample(bad.string()), FormatError);

  spit(bad, bytes + "z");
  CHECK_THROWS_AS(read_sample(bad.string()), FormatError);

  std::string magic = bytes;
  magic[1] = 'X';
  spit(bad, magic);
  CHECK_THROWS_AS(read_sample(bad.string()), FormatError);

  // mask byte outside {0,1}; the error should point at the byte offset
  std::string corrupt = bytes;
  std::size_t mask_start = 9 + 16 * 16 * 8;
  corrupt[mask_start] = 2;
  spit(bad, corrupt);
  CHECK_THROWS_WITH_AS(read_sample(bad.string()), doctest::Contains("offset"),
                       FormatError);

  CHECK_THROWS_AS(read_sample((dir / "missing.pfsd").string()), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("dataset directories round-trip spec and samples") {
  DatasetSpec spec = spec_for(ShapeFamily::blob, 88);
  spec.gain = 0.8;
  spec.bias = -0.05;
  spec.gamma = 1.6;
  spec.noise_sigma = 0.03;
  spec.background_texture = BackgroundTexture::gradient;
  auto samples = generate_client(spec, 32);
  fs::path dir = temp_dir("dataset_io");
  write_dataset(spec, samples, dir.string());
  auto [back_spec, back_samples] = read_dataset(dir.string(), 4);
  CHECK(back_spec.client_id == spec.client_id);
  CHECK(back_spec.n_samples == spec.n_samples);
  CHECK(back_spec.shape_family == spec.shape_family);
  CHECK(back_spec.gain == spec.gain);
  CHECK(back_spec.bias == spec.bias);
  CHECK(back_spec.gamma == spec.gamma);
  CHECK(back_spec.noise_sigma == spec.noise_sigma);
  CHECK(back_spec.background_texture == spec.background_texture);
  CHECK(back_spec.seed == spec.seed);
  REQUIRE(back_samples.size() == samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    CHECK(back_samples[i].image.values() == samples[i].image.values());
    CHECK(back_samples[i].mask.values() == samples[i].mask.values());
  }
  fs::remove_all(dir);
}

TEST_CASE("spec validation rejects out-of-range fields") {
  DatasetSpec s = spec_for(ShapeFamily::ellipse, 1);
  s.n_samples = 9;
  CHECK_THROWS_AS(s.validate(), ValidationError);
  s = spec_for(ShapeFamily::ellipse, 1);
  s.gamma = 0.0;
  CHECK_THROWS_AS(s.validate(), ValidationError);
  s = spec_for(ShapeFamily::ellipse, 1);
  s.noise_sigma = -1.0;
  CHECK_THROWS_AS(s.validate(), ValidationError);
  s = spec_for(ShapeFamily::ellipse, 1);
  s.client_id = "";
  CHECK_THROWS_AS(s.validate(), ValidationError);

  CHECK_THROWS_AS(shape_family_from_name("square"), ValidationError);
  CHECK_THROWS_AS(background_from_name("plaid"), ValidationError);
  CHECK(shape_family_from_name("ring") == ShapeFamily::ring);
  CHECK(background_from_name("speckle") == BackgroundTexture::speckle);
}

TEST_CASE("intensity histograms are normalized and shifted by bias") {
  DatasetSpec dim = spec_for(ShapeFamily::ellipse, 66);
  dim.gain = 0.5;
  auto dim_samples = generate_client(dim, 32);
  auto hist = intensity_histogram(dim_samples, 10);
  REQUIRE(hist.size() == 10);
  double total = std::accumulate(hist.begin(), hist.end(), 0.0);
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
  // gain 0.5 caps intensities at ~0.5, so the top bins stay empty
  CHECK(hist[9] == 0.0);
}

TEST_CASE("PFSD header offsets match the documented layout") {
  auto samples = generate_client(spec_for(ShapeFamily::ellipse, 3), 16);
  fs::path dir = temp_dir("layout");
  fs::path path = dir / "s.pfsd";
  write_sample(samples[0], path.string());
  std::string bytes = slurp(path);
  REQUIRE(bytes.size() == 9 + 16 * 16 * 8 + 16 * 16);
  CHECK(bytes.substr(0, 4) == "PFSD");
  CHECK(bytes[4] == 1);  // version
  std::uint32_t side = 0;
  for (int i = 0; i < 4; ++i) {
    side |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[5 + i]))
            << (8 * i);
  }
  CHECK(side == 16);
  fs::remove_all(dir);
}
