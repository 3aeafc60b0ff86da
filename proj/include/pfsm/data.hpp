#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pfsm/tensor.hpp"

namespace pfsm {

enum class ShapeFamily { ellipse, blob, ring };
enum class BackgroundTexture { flat, gradient, speckle };

std::string shape_family_name(ShapeFamily f);
ShapeFamily shape_family_from_name(const std::string& s);
std::string background_name(BackgroundTexture b);
BackgroundTexture background_from_name(const std::string& s);

// One synthetic client domain. Heterogeneity lives in the intensity transform
// clip(gain * x^gamma + bias), the noise level and the background texture.
struct DatasetSpec {
  std::string client_id;
  int n_samples = 20;
  ShapeFamily shape_family = ShapeFamily::ellipse;
  double gain = 1.0;
  double bias = 0.0;
  double gamma = 1.0;
  double noise_sigma = 0.02;
  BackgroundTexture background_texture = BackgroundTexture::flat;
  std::uint64_t seed = 0;

  void validate() const;
};

struct Sample {
  Tensor image;             // (1, S, S), values in [0,1]
  Tensor mask;              // (S, S), exactly 0/1
  Tensor downsampled_mask;  // (S/mask_scale, S/mask_scale), majority-pooled
};

// Majority pooling of a binary (S, S) mask by `factor`; ties go foreground.
Tensor majority_pool(const Tensor& mask, int factor);

// Deterministic: sample i is fully determined by (spec.seed, i). Foreground
// fraction is kept inside [0.02, 0.6] by redrawing the pose, at most 100
// times per sample.
std::vector<Sample> generate_client(const DatasetSpec& spec, int image_size,
                                    int mask_scale = 4);

// Deterministic shuffled split; |test| = round((1 - train_fraction) * n),
// at least 1.
std::pair<std::vector<Sample>, std::vector<Sample>> split(
    const std::vector<Sample>& dataset, double train_fraction, std::uint64_t seed);

// Binary sample format: magic "PFSD", version byte, u32 side, side^2
// little-endian float64 image values, side^2 mask bytes of {0,1}.
void write_sample(const Sample& sample, const std::string& path);
Sample read_sample(const std::string& path, int mask_scale = 4);

// Dataset directory = spec.json + sample_0000.pfsd ... sample_NNNN.pfsd.
void write_dataset(const DatasetSpec& spec, const std::vector<Sample>& samples,
                   const std::string& dir);
std::pair<DatasetSpec, std::vector<Sample>> read_dataset(const std::string& dir,
                                                         int mask_scale = 4);

// Normalized intensity histogram over all pixels of a sample set.
std::vector<double> intensity_histogram(const std::vector<Sample>& samples, int bins);

}  // namespace pfsm
