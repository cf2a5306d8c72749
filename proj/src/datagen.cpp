// SPDX-License-Identifier: Apache-2.0
#include "tokd/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "tokd/rng.hpp"

namespace tokd {

namespace fs = std::filesystem;

std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  throw ConfigError("split_name: bad split");
}

Split split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw DataError("unknown split name: " + name);
}

std::vector<std::size_t> LabeledDataset::indices_of(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i)
    if (splits[i] == s) out.push_back(i);
  return out;
}

LabeledDataset LabeledDataset::subset(const std::vector<std::size_t>& idx) const {
  const std::size_t C = images.dim(1), H = images.dim(2), W = images.dim(3);
  const std::size_t per = C * H * W;
  LabeledDataset out;
  out.images = Tensor({idx.size(), C, H, W});
  out.freq_images = Tensor({idx.size(), C, H, W});
  for (std::size_t k = 0; k < idx.size(); ++k) {
    std::copy_n(images.data() + idx[k] * per, per, out.images.data() + k * per);
    std::copy_n(freq_images.data() + idx[k] * per, per,
                out.freq_images.data() + k * per);
    out.labels.push_back(labels[idx[k]]);
    out.splits.push_back(splits[idx[k]]);
  }
  return out;
}

void GenSpec::validate() const {
  if (n_samples < 4) throw ConfigError("GenSpec: n_samples must be >= 4");
  if (image_size < 8) throw ConfigError("GenSpec: image_size must be >= 8");
  if (channels < 1) throw ConfigError("GenSpec: channels must be >= 1");
  if (!(artifact_strength >= 0.0 && artifact_strength <= 1.0)) {
    throw ConfigError("GenSpec: artifact_strength must be in [0,1]");
  }
  if (!(strength_jitter >= 0.0 && strength_jitter <= 1.0)) {
    throw ConfigError("GenSpec: strength_jitter must be in [0,1]");
  }
  if (!(blend_radius_min > 0.0 && blend_radius_max >= blend_radius_min &&
        blend_radius_max <= 0.5)) {
    throw ConfigError("GenSpec: invalid blend radius range");
  }
  if (!(checker_band_min >= 1.0 && checker_band_max > checker_band_min &&
        checker_band_max < 2.0)) {
    throw ConfigError("GenSpec: invalid checkerboard band range");
  }
  if (!(val_fraction >= 0.0 && test_fraction >= 0.0 &&
        val_fraction + test_fraction < 1.0)) {
    throw ConfigError("GenSpec: invalid split fractions");
  }
  highpass.validate();
}

namespace {

// Smoothed random field plus a low-frequency sinusoid, one image worth of
// "natural" texture. Normalized per image to [0,1].
Tensor base_image(const GenSpec& spec, Rng& rng) {
  const std::size_t C = spec.channels, S = spec.image_size;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  Tensor img({C, S, S});
  for (std::size_t i = 0; i < img.size(); ++i) img[i] = uni(rng);
  // Three passes of 3x3 box blur per channel (clamped borders).
  Tensor tmp({S, S});
  for (std::size_t c = 0; c < C; ++c) {
    for (int pass = 0; pass < 3; ++pass) {
      for (std::size_t y = 0; y < S; ++y) {
        for (std::size_t x = 0; x < S; ++x) {
          double acc = 0.0;
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const long yy = std::clamp<long>(static_cast<long>(y) + dy, 0,
                                               static_cast<long>(S) - 1);
              const long xx = std::clamp<long>(static_cast<long>(x) + dx, 0,
                                               static_cast<long>(S) - 1);
              acc += img.at(c, static_cast<std::size_t>(yy),
                            static_cast<std::size_t>(xx));
            }
          }
          tmp.at(y, x) = acc / 9.0;
        }
      }
      for (std::size_t i = 0; i < S * S; ++i) img[c * S * S + i] = tmp[i];
    }
  }
  // Low-frequency sinusoid shared across channels with per-channel weight.
  std::uniform_real_distribution<double> freq(0.5, 2.5);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::acos(-1.0));
  const double fx = freq(rng), fy = freq(rng), ph = phase(rng);
  std::vector<double> cw(C);
  for (auto& w : cw) w = uni(rng);
  const double two_pi = 2.0 * std::acos(-1.0);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < S; ++y) {
      for (std::size_t x = 0; x < S; ++x) {
        img.at(c, y, x) +=
            0.25 * cw[c] *
            std::sin(two_pi * (fx * static_cast<double>(x) +
                               fy * static_cast<double>(y)) /
                         static_cast<double>(S) +
                     ph);
      }
    }
  }
  double lo = img[0], hi = img[0];
  for (std::size_t i = 0; i < img.size(); ++i) {
    lo = std::min(lo, img[i]);
    hi = std::max(hi, img[i]);
  }
  const double range = hi - lo;
  for (std::size_t i = 0; i < img.size(); ++i) {
    img[i] = range > 0.0 ? (img[i] - lo) / range : 0.5;
  }
  return img;
}

void apply_forgery(Tensor& img, const Tensor& donor, const GenSpec& spec,
                   Rng& rng) {
  const std::size_t C = spec.channels, S = spec.image_size;
  std::uniform_real_distribution<double> rad(spec.blend_radius_min,
                                             spec.blend_radius_max);
  const double r = rad(rng) * static_cast<double>(S);
  std::uniform_real_distribution<double> pos(r, static_cast<double>(S) - r);
  const double cx = pos(rng), cy = pos(rng);
  // Checkerboard DCT frequency from the requested high band.
  std::uniform_real_distribution<double> band(spec.checker_band_min,
                                              spec.checker_band_max);
  const double target = band(rng);
  std::uniform_real_distribution<double> split_uni(0.75, 1.25);
  const double half = target / 2.0 * split_uni(rng);
  const std::size_t fu = std::min<std::size_t>(
      S - 1, static_cast<std::size_t>(half * static_cast<double>(S)));
  const std::size_t fv = std::min<std::size_t>(
      S - 1,
      static_cast<std::size_t>((target - half) * static_cast<double>(S)));
  const double pi = std::acos(-1.0);
  double strength = spec.artifact_strength;
  if (spec.strength_jitter > 0.0) {
    std::uniform_real_distribution<double> jit(1.0 - spec.strength_jitter,
                                               1.0);
    strength *= jit(rng);
  }
  for (std::size_t y = 0; y < S; ++y) {
    for (std::size_t x = 0; x < S; ++x) {
      const double dx = static_cast<double>(x) - cx;
      const double dy = static_cast<double>(y) - cy;
      const double dist = std::sqrt(dx * dx + dy * dy);
      if (dist >= r) continue;
      // Raised-cosine radial falloff, scaled by artifact strength.
      const double mask =
          strength * 0.5 * (1.0 + std::cos(pi * dist / r));
      const double checker =
          std::cos(pi * (static_cast<double>(x) + 0.5) *
                   static_cast<double>(fu) / static_cast<double>(S)) *
          std::cos(pi * (static_cast<double>(y) + 0.5) *
                   static_cast<double>(fv) / static_cast<double>(S));
      for (std::size_t c = 0; c < C; ++c) {
        double v = (1.0 - mask) * img.at(c, y, x) + mask * donor.at(c, y, x);
        v += 0.35 * mask * checker;
        img.at(c, y, x) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
}

}  // namespace

LabeledDataset generate(const GenSpec& spec) {
  spec.validate();
  const std::size_t n = spec.n_samples;
  const std::size_t C = spec.channels, S = spec.image_size;
  LabeledDataset data;
  data.images = Tensor({n, C, S, S});
  data.freq_images = Tensor({n, C, S, S});
  data.labels.resize(n);
  data.splits.resize(n);
  const std::size_t n_val =
      static_cast<std::size_t>(std::lround(spec.val_fraction * static_cast<double>(n)));
  const std::size_t n_test =
      static_cast<std::size_t>(std::lround(spec.test_fraction * static_cast<double>(n)));
  const std::size_t n_train = n - n_val - n_test;
  const std::size_t per = C * S * S;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng = make_rng(spec.seed, "image", i);
    Tensor img = base_image(spec, rng);
    const int label = static_cast<int>(i % 2);
    if (label == 1) {
      Rng donor_rng = make_rng(spec.seed, "donor", i);
      Tensor donor = base_image(spec, donor_rng);
      apply_forgery(img, donor, spec, rng);
    }
    Tensor freq = frequency_transform(img, spec.highpass);
    std::copy_n(img.data(), per, data.images.data() + i * per);
    std::copy_n(freq.data(), per, data.freq_images.data() + i * per);
    data.labels[i] = label;
    data.splits[i] = i < n_train ? Split::kTrain
                     : i < n_train + n_val ? Split::kVal
                                           : Split::kTest;
  }
  return data;
}

void write_raster(const std::string& path, const Tensor& chw_image) {
  if (chw_image.rank() != 3) throw ShapeError("write_raster: expected C×H×W");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("write_raster: cannot open " + path);
  const std::uint32_t w = static_cast<std::uint32_t>(chw_image.dim(2));
  const std::uint32_t h = static_cast<std::uint32_t>(chw_image.dim(1));
  const std::uint8_t c = static_cast<std::uint8_t>(chw_image.dim(0));
  out.write(reinterpret_cast<const char*>(&w), 4);
  out.write(reinterpret_cast<const char*>(&h), 4);
  out.write(reinterpret_cast<const char*>(&c), 1);
  std::vector<std::uint8_t> buf(chw_image.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    buf[i] = static_cast<std::uint8_t>(
        std::lround(std::clamp(chw_image[i], 0.0, 1.0) * 255.0));
  }
  out.write(reinterpret_cast<const char*>(buf.data()),
            static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("write_raster: write failed: " + path);
}

Tensor read_raster(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("read_raster: cannot open " + path);
  std::uint32_t w = 0, h = 0;
  std::uint8_t c = 0;
  in.read(reinterpret_cast<char*>(&w), 4);
  in.read(reinterpret_cast<char*>(&h), 4);
  in.read(reinterpret_cast<char*>(&c), 1);
  if (!in || w == 0 || h == 0 || c == 0) {
    throw DataError("read_raster: bad header in " + path);
  }
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(w) * h * c);
  in.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(buf.size()));
  if (!in) throw DataError("read_raster: truncated pixels in " + path);
  Tensor img({static_cast<std::size_t>(c), static_cast<std::size_t>(h),
              static_cast<std::size_t>(w)});
  for (std::size_t i = 0; i < img.size(); ++i) {
    img[i] = static_cast<double>(buf[i]) / 255.0;
  }
  return img;
}

void write_dataset_dir(const LabeledDataset& data, const std::string& dir) {
  fs::create_directories(dir);
  std::ofstream manifest(fs::path(dir) / "manifest.csv");
  if (!manifest) throw DataError("write_dataset_dir: cannot write manifest");
  manifest << "filename,label,split\n";
  const std::size_t C = data.images.dim(1), H = data.images.dim(2),
                    W = data.images.dim(3);
  const std::size_t per = C * H * W;
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::ostringstream name;
    name << "img_" << std::setw(6) << std::setfill('0') << i << ".tkr";
    Tensor img({C, H, W});
    std::copy_n(data.images.data() + i * per, per, img.data());
    write_raster((fs::path(dir) / name.str()).string(), img);
    manifest << name.str() << "," << data.labels[i] << ","
             << split_name(data.splits[i]) << "\n";
  }
}

namespace {

Tensor resize_nearest(const Tensor& img, std::size_t target) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (H == target && W == target) return img;
  Tensor out({C, target, target});
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < target; ++y) {
      const std::size_t sy = std::min(H - 1, y * H / target);
      for (std::size_t x = 0; x < target; ++x) {
        const std::size_t sx = std::min(W - 1, x * W / target);
        out.at(c, y, x) = img.at(c, sy, sx);
      }
    }
  }
  return out;
}

}  // namespace

LabeledDataset load_image_dir(const std::string& dir,
                              const std::string& manifest_path,
                              std::size_t target_size,
                              const HighPassSpec& highpass) {
  std::ifstream manifest(manifest_path);
  if (!manifest) throw DataError("load_image_dir: cannot open " + manifest_path);
  std::string line;
  std::vector<std::string> files;
  std::vector<int> labels;
  std::vector<Split> splits;
  std::vector<std::string> offenders;
  bool first = true;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    if (first && line.rfind("filename", 0) == 0) {
      first = false;
      continue;
    }
    first = false;
    std::istringstream row(line);
    std::string fname, label_str, split_str;
    if (!std::getline(row, fname, ',') || !std::getline(row, label_str, ',') ||
        !std::getline(row, split_str)) {
      throw DataError("load_image_dir: malformed manifest row: " + line);
    }
    const fs::path p = fs::path(dir) / fname;
    if (!fs::exists(p)) {
      offenders.push_back(fname);
      continue;
    }
    files.push_back(p.string());
    labels.push_back(std::stoi(label_str));
    splits.push_back(split_from_name(split_str));
  }
  if (!offenders.empty()) {
    std::string msg = "load_image_dir: missing files:";
    for (const auto& f : offenders) msg += " " + f;
    throw DataError(msg);
  }
  if (files.empty()) throw DataError("load_image_dir: empty manifest");
  LabeledDataset data;
  Tensor first_img = resize_nearest(read_raster(files[0]), target_size);
  const std::size_t C = first_img.dim(0);
  const std::size_t per = C * target_size * target_size;
  data.images = Tensor({files.size(), C, target_size, target_size});
  data.freq_images = Tensor(data.images.shape());
  data.labels = labels;
  data.splits = splits;
  for (std::size_t i = 0; i < files.size(); ++i) {
    Tensor img = i == 0 ? first_img : resize_nearest(read_raster(files[i]), target_size);
    if (img.dim(0) != C) {
      throw DataError("load_image_dir: channel mismatch in " + files[i]);
    }
    Tensor freq = frequency_transform(img, highpass);
    std::copy_n(img.data(), per, data.images.data() + i * per);
    std::copy_n(freq.data(), per, data.freq_images.data() + i * per);
  }
  return data;
}

}  // namespace tokd
