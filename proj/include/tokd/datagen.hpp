// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tokd/frequency.hpp"
#include "tokd/tensor.hpp"

namespace tokd {

enum class Split { kTrain, kVal, kTest };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

/// Paired spatial images, precomputed high-pass images, and binary labels
/// (0 = real, 1 = fake).
struct LabeledDataset {
  Tensor images;       // N×C×H×W, values in [0,1]
  Tensor freq_images;  // N×C×H×W
  std::vector<int> labels;
  std::vector<Split> splits;

  std::size_t size() const { return labels.size(); }
  std::vector<std::size_t> indices_of(Split s) const;
  LabeledDataset subset(const std::vector<std::size_t>& idx) const;
};

/// Synthetic forgery-analog generator settings. Real images are smoothed
/// random fields plus a low-frequency sinusoidal texture; fake images add a
/// soft-blended patch from a donor image (spatial boundary cue) and a
/// low-amplitude high-frequency checkerboard inside the patch (frequency
/// cue). artifact_strength in [0,1] scales both cues.
struct GenSpec {
  std::size_t n_samples = 2000;
  std::size_t image_size = 64;
  std::size_t channels = 3;
  double artifact_strength = 0.8;
  // Per-image difficulty grading: each fake draws an effective strength in
  // [artifact_strength·(1−strength_jitter), artifact_strength]. 0 = uniform
  // difficulty (every fake uses artifact_strength exactly).
  double strength_jitter = 0.0;
  double blend_radius_min = 0.15;  // fraction of image size
  double blend_radius_max = 0.30;
  double checker_band_min = 1.50;  // u/H + v/W range of the checkerboard
  double checker_band_max = 1.90;  // (top quartile of the DCT anti-diagonal)
  double val_fraction = 1.0 / 6.0;
  double test_fraction = 1.0 / 6.0;
  std::uint64_t seed = 0;
  HighPassSpec highpass;

  void validate() const;
};

/// Deterministic from spec.seed; per-image RNG streams keyed by (seed, index).
LabeledDataset generate(const GenSpec& spec);

// Raster format: width u32, height u32, channels u8, then u8 pixels in
// channel-planar row-major order (matching tensor layout), little-endian.
void write_raster(const std::string& path, const Tensor& chw_image);
Tensor read_raster(const std::string& path);

/// Writes one raster file per image plus manifest.csv (filename,label,split).
void write_dataset_dir(const LabeledDataset& data, const std::string& dir);

/// Loads rasters listed in a manifest CSV; pixels scaled to [0,1], resized
/// by nearest neighbor to target_size, freq_images recomputed.
LabeledDataset load_image_dir(const std::string& dir,
                              const std::string& manifest_path,
                              std::size_t target_size,
                              const HighPassSpec& highpass);

}  // namespace tokd
