// SPDX-License-Identifier: Apache-2.0
//
// Acceptance gate: one pass/fail line per criterion, nonzero exit on any
// failure. argv[1] = path to the tokd_cli binary (used by the sweep
// criterion), argv[2] = optional scratch directory.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tokd/distill.hpp"

namespace fs = std::filesystem;
using namespace tokd;

namespace {

std::string g_cli_path;
fs::path g_scratch;

Tensor random_tensor(const std::vector<std::size_t>& shape, std::uint64_t seed,
                     double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
  return t;
}

Tensor random_rotation(std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Tensor q({d, d});
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = dist(rng);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double proj = 0.0;
      for (std::size_t k = 0; k < d; ++k) proj += q.at(i, k) * q.at(j, k);
      for (std::size_t k = 0; k < d; ++k) q.at(i, k) -= proj * q.at(j, k);
    }
    double norm = 0.0;
    for (std::size_t k = 0; k < d; ++k) norm += q.at(i, k) * q.at(i, k);
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < d; ++k) q.at(i, k) /= norm;
  }
  if (determinant(q) < 0.0)
    for (std::size_t k = 0; k < d; ++k) q.at(0, k) = -q.at(0, k);
  return q;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// Central finite-difference check of every parameter of a graph against the
// analytic backward, plus the input gradient. Loss = <forward(x), w>.
bool fd_check_graph(NetworkGraph& g, Tensor x, double tol,
                    std::uint64_t seed, std::string& why) {
  g.zero_grad();
  Tensor out = g.forward(x, Mode::kTrain);
  Tensor w = random_tensor(out.shape(), seed);
  Tensor d_in = g.backward(w);
  auto loss = [&]() { return dot(g.forward(x, Mode::kTrain), w); };
  const double h = 1e-5;
  auto check_slot = [&](double* value, double analytic,
                        const std::string& name) {
    const double orig = *value;
    *value = orig + h;
    const double up = loss();
    *value = orig - h;
    const double down = loss();
    *value = orig;
    const double fd = (up - down) / (2 * h);
    const double denom = std::max({std::abs(fd), std::abs(analytic), 1e-4});
    if (std::abs(fd - analytic) / denom >= tol) {
      std::ostringstream msg;
      msg << name << ": fd " << fd << " vs analytic " << analytic;
      why = msg.str();
      return false;
    }
    return true;
  };
  for (auto& p : g.parameters()) {
    const std::size_t n = p.value->size();
    const std::size_t stride = std::max<std::size_t>(1, n / 4);
    for (std::size_t i = 0; i < n; i += stride) {
      if (!check_slot(&(*p.value)[i], (*p.grad)[i], p.name)) return false;
    }
  }
  const std::size_t nx = x.size();
  const std::size_t stride = std::max<std::size_t>(1, nx / 4);
  for (std::size_t i = 0; i < nx; i += stride) {
    if (!check_slot(&x[i], d_in[i], "input")) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// 1. Numeric core oracles.
bool criterion_numeric_core(std::string& why) {
  // DCT round trip on 100 random 32x32 images.
  for (std::uint64_t s = 0; s < 100; ++s) {
    Tensor x = random_tensor({32, 32}, 1000 + s, 0.0, 1.0);
    Tensor back = idct2(dct2(x));
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (std::abs(back[i] - x[i]) >= 1e-9) {
        why = "DCT round trip error >= 1e-9";
        return false;
      }
    }
  }
  // dct2 against the quartic-loop orthonormal definition on 8x8.
  {
    const std::size_t n = 8;
    Tensor x = random_tensor({n, n}, 7);
    Tensor got = dct2(x);
    const double pi = std::acos(-1.0);
    for (std::size_t u = 0; u < n; ++u) {
      for (std::size_t v = 0; v < n; ++v) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j)
            acc += x.at(i, j) *
                   std::cos(pi * (2.0 * i + 1.0) * u / (2.0 * n)) *
                   std::cos(pi * (2.0 * j + 1.0) * v / (2.0 * n));
        const double au = u == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
        const double av = v == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
        if (std::abs(got.at(u, v) - au * av * acc) >= 1e-10) {
          why = "dct2 deviates from the definition oracle";
          return false;
        }
      }
    }
  }
  // conv2d against a direct loop oracle.
  {
    Tensor in = random_tensor({2, 3, 7, 7}, 21);
    Tensor k = random_tensor({4, 3, 3, 3}, 22);
    for (long stride : {1L, 2L}) {
      Tensor got = conv2d(in, k, stride, 1);
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t co = 0; co < 4; ++co)
          for (std::size_t oy = 0; oy < got.dim(2); ++oy)
            for (std::size_t ox = 0; ox < got.dim(3); ++ox) {
              double acc = 0.0;
              for (std::size_t ci = 0; ci < 3; ++ci)
                for (std::size_t ky = 0; ky < 3; ++ky)
                  for (std::size_t kx = 0; kx < 3; ++kx) {
                    const long iy = static_cast<long>(oy) * stride +
                                    static_cast<long>(ky) - 1;
                    const long ix = static_cast<long>(ox) * stride +
                                    static_cast<long>(kx) - 1;
                    if (iy < 0 || ix < 0 || iy >= 7 || ix >= 7) continue;
                    acc += in.at(n, ci, static_cast<std::size_t>(iy),
                                 static_cast<std::size_t>(ix)) *
                           k.at(co, ci, ky, kx);
                  }
              if (std::abs(got.at(n, co, oy, ox) - acc) >= 1e-12) {
                why = "conv2d deviates from the loop oracle";
                return false;
              }
            }
    }
  }
  // matmul against a triple loop.
  {
    Tensor a = random_tensor({5, 7}, 31);
    Tensor b = random_tensor({7, 4}, 32);
    Tensor got = matmul(a, b);
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 4; ++j) {
        double acc = 0.0;
        for (std::size_t k2 = 0; k2 < 7; ++k2)
          acc += a.at(i, k2) * b.at(k2, j);
        if (std::abs(got.at(i, j) - acc) >= 1e-12) {
          why = "matmul deviates from the loop oracle";
          return false;
        }
      }
  }
  return true;
}

// ---------------------------------------------------------------------------
// 2. Gradient correctness across layer kinds, attention, projectors, losses.
bool criterion_gradients(std::string& why) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    // Individual layer kinds.
    Rng rng = make_rng(seed, "acceptance_layers", 0);
    struct Case {
      std::string name;
      NetworkGraph g;
      Tensor x;
    };
    std::vector<Case> cases;
    {
      Case c{"conv_s1", {}, random_tensor({2, 3, 5, 5}, seed * 11)};
      c.g.add("conv", std::make_unique<Conv2dLayer>(3, 4, 3, 1, 1, rng));
      cases.push_back(std::move(c));
    }
    {
      Case c{"conv_s2", {}, random_tensor({2, 3, 6, 6}, seed * 13)};
      c.g.add("conv", std::make_unique<Conv2dLayer>(3, 2, 3, 2, 1, rng));
      cases.push_back(std::move(c));
    }
    {
      Case c{"batch_norm", {}, random_tensor({3, 4, 3, 3}, seed * 17)};
      c.g.add("bn", std::make_unique<BatchNormLayer>(4));
      cases.push_back(std::move(c));
    }
    {
      Case c{"relu", {}, random_tensor({2, 3, 4, 4}, seed * 19)};
      c.g.add("relu", std::make_unique<ReluLayer>());
      cases.push_back(std::move(c));
    }
    {
      Case c{"sigmoid", {}, random_tensor({2, 3, 4, 4}, seed * 23)};
      c.g.add("sig", std::make_unique<SigmoidLayer>());
      cases.push_back(std::move(c));
    }
    {
      Case c{"linear", {}, random_tensor({3, 6}, seed * 29)};
      c.g.add("lin", std::make_unique<LinearLayer>(6, 4, rng));
      cases.push_back(std::move(c));
    }
    {
      Case c{"global_avg_pool", {}, random_tensor({2, 3, 4, 4}, seed * 31)};
      c.g.add("gap", std::make_unique<GlobalAvgPoolLayer>());
      cases.push_back(std::move(c));
    }
    {
      Case c{"flatten", {}, random_tensor({2, 3, 2, 2}, seed * 37)};
      c.g.add("flat", std::make_unique<FlattenLayer>());
      cases.push_back(std::move(c));
    }
    for (auto& c : cases) {
      std::string detail;
      if (!fd_check_graph(c.g, c.x, 1e-4, seed * 41, detail)) {
        why = c.name + " (seed " + std::to_string(seed) + "): " + detail;
        return false;
      }
    }

    // Dual-branch teacher (covers the cross-branch attention blocks and the
    // fusion head) through the classification loss.
    {
      TeacherConfig tc;
      tc.in_channels = 1;
      tc.stage_channels = {3, 4};
      tc.rfam_blocks = 2;
      tc.proj_channels = 3;
      tc.seed = seed;
      TeacherNet t = make_teacher(tc);
      Tensor x = random_tensor({2, 1, 8, 8}, seed * 43, 0.0, 1.0);
      HighPassSpec hp;
      Tensor xf({2, 1, 8, 8});
      for (std::size_t n = 0; n < 2; ++n) {
        Tensor img({1, 8, 8});
        std::copy_n(x.data() + n * 64, 64, img.data());
        Tensor f = frequency_transform(img, hp);
        std::copy_n(f.data(), 64, xf.data() + n * 64);
      }
      const std::vector<int> labels{0, 1};
      auto loss = [&]() {
        TeacherForward out = teacher_forward(t, x, xf, Mode::kTrain);
        return cross_entropy(out.logits, labels).first;
      };
      t.zero_grad();
      TeacherForward out = teacher_forward(t, x, xf, Mode::kTrain);
      auto [l, d_logits] = cross_entropy(out.logits, labels);
      teacher_backward(t, d_logits);
      const double h = 1e-5;
      for (auto& p : t.backbone_params()) {
        const std::size_t n = p.value->size();
        const std::size_t stride = std::max<std::size_t>(1, n / 3);
        for (std::size_t i = 0; i < n; i += stride) {
          const double orig = (*p.value)[i];
          (*p.value)[i] = orig + h;
          const double up = loss();
          (*p.value)[i] = orig - h;
          const double down = loss();
          (*p.value)[i] = orig;
          const double fd = (up - down) / (2 * h);
          const double analytic = (*p.grad)[i];
          const double denom =
              std::max({std::abs(fd), std::abs(analytic), 1e-4});
          if (std::abs(fd - analytic) / denom >= 1e-4) {
            why = "teacher " + p.name + " (seed " + std::to_string(seed) + ")";
            return false;
          }
        }
      }
    }

    // Full student training loss: classification + both feature-matching
    // terms, gradients through projectors on both sides.
    {
      GenSpec gs;
      gs.n_samples = 36;
      gs.image_size = 8;
      gs.channels = 1;
      gs.artifact_strength = 0.9;
      gs.seed = 150 + seed;
      LabeledDataset data = generate(gs);
      TeacherConfig tc;
      tc.in_channels = 1;
      tc.stage_channels = {4, 6};
      tc.rfam_blocks = 2;
      tc.proj_channels = 4;
      tc.seed = 160 + seed;
      TeacherNet t = make_teacher(tc);
      StudentConfig sc;
      sc.in_channels = 1;
      sc.stage_channels = {4, 6};
      sc.proj_channels = 4;
      sc.rotation_d = 4;
      sc.seed = 170 + seed;
      StudentNet s = make_student(sc, 8);
      DistillConfig cfg;
      cfg.mode = DistillMode::kTokd;
      cfg.alpha1 = 10.0;
      cfg.alpha2 = 10.0;
      TeacherForward tf =
          teacher_forward(t, data.images, data.freq_images, Mode::kInfer);
      auto loss = [&]() {
        StudentForward out =
            student_forward_train(s, data.images, Mode::kTrain, true, true);
        Tensor f_tr = t.proj_rgb.forward(tf.feat_rgb, Mode::kTrain);
        Tensor f_tf = t.proj_fre.forward(tf.feat_fre, Mode::kTrain);
        return total_loss(cross_entropy(out.logits, data.labels).first,
                          kd_loss(out.f_sr, f_tr).first,
                          kd_loss(out.f_sf, f_tf).first, cfg);
      };
      s.zero_grad();
      t.zero_grad();
      {
        StudentForward out =
            student_forward_train(s, data.images, Mode::kTrain, true, true);
        Tensor f_tr = t.proj_rgb.forward(tf.feat_rgb, Mode::kTrain);
        Tensor f_tf = t.proj_fre.forward(tf.feat_fre, Mode::kTrain);
        auto [cls, d_logits] = cross_entropy(out.logits, data.labels);
        Tensor d_fsr = scale(kd_loss(out.f_sr, f_tr).second, cfg.alpha1);
        Tensor d_fsf = scale(kd_loss(out.f_sf, f_tf).second, cfg.alpha2);
        t.proj_rgb.backward(scale(kd_loss(f_tr, out.f_sr).second, cfg.alpha1));
        t.proj_fre.backward(scale(kd_loss(f_tf, out.f_sf).second, cfg.alpha2));
        student_backward(s, d_logits, &d_fsr, &d_fsf);
      }
      std::vector<ParamRef> params = s.backbone_params();
      for (auto& p : s.classifier_params()) params.push_back(p);
      for (auto& p : s.projector_rgb_params()) params.push_back(p);
      for (auto& p : s.projector_fre_params()) params.push_back(p);
      for (auto& p : t.projector_params()) params.push_back(p);
      const double h = 1e-5;
      for (auto& p : params) {
        const std::size_t n = p.value->size();
        const std::size_t stride = std::max<std::size_t>(1, n / 2);
        for (std::size_t i = 0; i < n; i += stride) {
          const double orig = (*p.value)[i];
          (*p.value)[i] = orig + h;
          const double up = loss();
          (*p.value)[i] = orig - h;
          const double down = loss();
          (*p.value)[i] = orig;
          const double fd = (up - down) / (2 * h);
          const double analytic = (*p.grad)[i];
          const double denom =
              std::max({std::abs(fd), std::abs(analytic), 1e-4});
          if (std::abs(fd - analytic) / denom >= 1e-4) {
            why = "student loss " + p.name + " (seed " +
                  std::to_string(seed) + ")";
            return false;
          }
        }
      }
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// 3. Rotation-loss gradient against finite differences.
bool criterion_rotation_grad(std::string& why) {
  std::mt19937_64 meta(99);
  for (int rep = 0; rep < 8; ++rep) {
    const std::size_t d = 4 + meta() % 13;   // 4..16
    const std::size_t n = 2 + meta() % 7;    // 2..8
    const std::size_t m = d + meta() % 5;
    RotationPair rot(d, StepLrSchedule{});
    rot.r_rgb = random_rotation(d, 500 + rep);
    rot.r_fre = random_rotation(d, 600 + rep);
    Tensor g_rgb = random_tensor({n, m}, 700 + rep);
    Tensor g_fre = random_tensor({n, m}, 800 + rep);
    GradientRecord rec = make_gradient_record(g_rgb, g_fre, rot);
    for (BranchKind k : {BranchKind::kRgb, BranchKind::kFre}) {
      Tensor r = k == BranchKind::kRgb ? rot.r_rgb : rot.r_fre;
      auto [l, grad] = rotation_loss(rec, r, k);
      const double h = 1e-6;
      for (std::size_t i = 0; i < r.size();
           i += std::max<std::size_t>(1, r.size() / 24)) {
        const double orig = r[i];
        r[i] = orig + h;
        const double up = rotation_loss(rec, r, k).first;
        r[i] = orig - h;
        const double down = rotation_loss(rec, r, k).first;
        r[i] = orig;
        const double fd = (up - down) / (2 * h);
        if (std::abs(fd - grad[i]) >= 1e-5) {
          std::ostringstream msg;
          msg << "instance " << rep << " entry " << i << ": fd " << fd
              << " vs " << grad[i];
          why = msg.str();
          return false;
        }
      }
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// 4. Manifold maintenance and rotation isometry.
bool criterion_manifold(std::string& why) {
  const std::size_t d = 8;
  Tensor r = Tensor::identity(d);
  std::mt19937_64 rng(4242);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  for (int step = 0; step < 10000; ++step) {
    Tensor g({d, d});
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = dist(rng);
    r = manifold_update(r, g, 1e-2);
  }
  const double orth = orthogonality_error(r);
  const double det = determinant(r);
  if (orth >= 1e-6 || std::abs(det - 1.0) > 1e-6) {
    std::ostringstream msg;
    msg << "after 10000 updates: orth " << orth << ", det " << det;
    why = msg.str();
    return false;
  }
  // rotate preserves the leading-subspace row norms and the tail exactly.
  Tensor rr = random_rotation(6, 777);
  Tensor z = random_tensor({5, 10}, 778);
  Tensor out = rotate(z, rr);
  for (std::size_t i = 0; i < 5; ++i) {
    double before = 0.0, after = 0.0;
    for (std::size_t j = 0; j < 6; ++j) {
      before += z.at(i, j) * z.at(i, j);
      after += out.at(i, j) * out.at(i, j);
    }
    if (std::abs(std::sqrt(before) - std::sqrt(after)) >= 1e-9) {
      why = "rotate changed a leading-subspace row norm";
      return false;
    }
    for (std::size_t j = 6; j < 10; ++j) {
      if (out.at(i, j) != z.at(i, j)) {
        why = "rotate touched the pass-through tail";
        return false;
      }
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// 5. Metric oracles.
bool criterion_metrics(std::string& why) {
  std::mt19937_64 rng(31337);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int rep = 0; rep < 5; ++rep) {
    ScoredPredictions p;
    for (int i = 0; i < 200; ++i) {
      p.scores.push_back(uni(rng));
      p.labels.push_back(static_cast<int>(rng() % 2));
    }
    // All-pairs comparison oracle with half credit for ties.
    double wins = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < 200; ++i) {
      if (p.labels[i] != 1) continue;
      for (std::size_t j = 0; j < 200; ++j) {
        if (p.labels[j] != 0) continue;
        ++pairs;
        if (p.scores[i] > p.scores[j]) wins += 1.0;
        else if (p.scores[i] == p.scores[j]) wins += 0.5;
      }
    }
    const double oracle = wins / static_cast<double>(pairs);
    if (roc_auc(p) != oracle) {
      why = "roc_auc deviates from the all-pairs oracle";
      return false;
    }
    // Geometric EER oracle: intersect the piecewise-linear curve of ROC
    // operating points with the FPR + TPR = 1 anti-diagonal. FPR - FNR is
    // monotone in the threshold, so the crossing is unique.
    std::vector<double> thr = p.scores;
    std::sort(thr.begin(), thr.end());
    thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
    thr.push_back(thr.back() + 1.0);
    double n_pos = 0.0, n_neg = 0.0;
    for (int l : p.labels) (l == 1 ? n_pos : n_neg) += 1.0;
    auto point = [&](double t) {  // (FPR, TPR) when predicting score >= t
      double fp = 0.0, tp = 0.0;
      for (std::size_t i = 0; i < 200; ++i) {
        if (p.scores[i] < t) continue;
        (p.labels[i] == 1 ? tp : fp) += 1.0;
      }
      return std::pair<double, double>(fp / n_neg, tp / n_pos);
    };
    double geo = -1.0;
    auto [x0, y0] = point(thr[0]);
    for (std::size_t k = 1; k < thr.size() && geo < 0.0; ++k) {
      auto [x1, y1] = point(thr[k]);
      const double f0 = x0 + y0 - 1.0, f1 = x1 + y1 - 1.0;
      if (f0 == 0.0) geo = x0;
      else if (f1 == 0.0 || (f0 > 0.0) != (f1 > 0.0)) {
        const double t = f0 / (f0 - f1);
        geo = x0 + t * (x1 - x0);
      }
      x0 = x1;
      y0 = y1;
    }
    if (std::abs(eer(p) - geo) >= 1e-9) {
      std::ostringstream msg;
      msg << "eer " << eer(p) << " vs geometric oracle " << geo;
      why = msg.str();
      return false;
    }
  }
  // Hand-computed instances.
  ScoredPredictions sep;  // perfectly separated
  sep.scores = {0.2, 0.4, 0.6, 0.8};
  sep.labels = {0, 0, 1, 1};
  ScoredPredictions rev;  // fully reversed
  rev.scores = {0.6, 0.4};
  rev.labels = {0, 1};
  ScoredPredictions third;  // FPR = FNR = 1/3 exactly at threshold 0.6
  third.scores = {0.1, 0.5, 0.7, 0.3, 0.6, 0.9};
  third.labels = {0, 0, 0, 1, 1, 1};
  ScoredPredictions half;  // interpolated crossing at FPR = 1/2
  half.scores = {0.1, 0.6, 0.3, 0.5, 0.9};
  half.labels = {0, 0, 1, 1, 1};
  if (std::abs(eer(sep)) >= 1e-12 || std::abs(eer(rev) - 1.0) >= 1e-12 ||
      std::abs(eer(third) - 1.0 / 3.0) >= 1e-12 ||
      std::abs(eer(half) - 0.5) >= 1e-12) {
    why = "eer deviates on a hand-computed instance";
    return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// 6. Mode reduction exactness.
bool criterion_mode_reduction(std::string& why) {
  GenSpec gs;
  gs.n_samples = 60;
  gs.image_size = 8;
  gs.channels = 1;
  gs.artifact_strength = 0.9;
  gs.seed = 606;
  LabeledDataset data = generate(gs);
  DistillConfig cfg;
  cfg.mode = DistillMode::kVanilla;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.eta_s = StepLrSchedule{1e-3, 5, 0.1};
  cfg.seed = 607;
  cfg.student.in_channels = 1;
  cfg.student.stage_channels = {4, 6};
  cfg.student.proj_channels = 4;
  cfg.d = 4;
  ExperimentResult run = run_distillation(cfg, nullptr, data);
  StudentNet plain = train_supervised(cfg, data);
  ScoredPredictions val =
      evaluate_student(plain, data, Split::kVal, cfg.batch_size);
  if (accuracy(val) != run.epochs.back().val_acc) {
    why = "vanilla run and supervised trainer disagree on validation";
    return false;
  }
  if (run.best_epoch == cfg.epochs - 1) {
    auto sa = run.student.inference_state();
    auto sb = plain.inference_state();
    for (std::size_t k = 0; k < sa.size(); ++k)
      for (std::size_t i = 0; i < sa[k].second->size(); ++i)
        if ((*sa[k].second)[i] != (*sb[k].second)[i]) {
          why = "vanilla weights differ from supervised training";
          return false;
        }
  }
  // Zero-weight distillation never moves the rotations.
  TeacherConfig tc;
  tc.in_channels = 1;
  tc.stage_channels = {4, 6};
  tc.rfam_blocks = 1;
  tc.proj_channels = 4;
  tc.seed = 608;
  TeacherNet t = make_teacher(tc);
  DistillConfig zero = cfg;
  zero.mode = DistillMode::kTokd;
  zero.alpha1 = 0.0;
  zero.alpha2 = 0.0;
  zero.epochs = 1;
  zero.eta_r = StepLrSchedule{1e-2, 5, 0.01};
  ExperimentResult rz = run_distillation(zero, &t, data);
  Tensor id = Tensor::identity(zero.d);
  for (std::size_t i = 0; i < id.size(); ++i) {
    if (rz.student.rotation.r_rgb[i] != id[i] ||
        rz.student.rotation.r_fre[i] != id[i]) {
      why = "rotations moved despite zero distillation weights";
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Shared protocol runs for the comparative criteria: 2000 train / 500 val /
// 500 test synthetic images at strength 0.6, d = 64, 10 epochs, 5 seeds.
struct ProtocolResults {
  LabeledDataset data;
  TeacherNet teacher;
  std::vector<double> acc_vanilla, acc_rgb, acc_naive, acc_tokd;
  std::vector<double> tokd_cos_rotated, naive_cos_raw;
  fs::path data_dir, teacher_path, tokd_run_dir;
  bool ready = false;
};

DistillConfig protocol_config(DistillMode mode, std::uint64_t seed) {
  DistillConfig cfg;
  cfg.mode = mode;
  cfg.alpha1 = 10.0;
  cfg.alpha2 = 10.0;
  cfg.d = 64;
  cfg.epochs = 10;
  cfg.batch_size = 32;
  cfg.eta_s = StepLrSchedule{1e-3, 5, 0.1};
  cfg.eta_r = StepLrSchedule{1e-2, 5, 0.01};
  cfg.teacher_proj_lr_scale = 0.1;
  cfg.seed = seed;
  cfg.student.in_channels = 1;
  cfg.student.stage_channels = {8, 16};
  cfg.student.proj_channels = 8;
  return cfg;
}

ProtocolResults run_protocol() {
  ProtocolResults pr;
  GenSpec gs;
  gs.n_samples = 3000;  // 2000 train + 500 val + 500 test
  gs.image_size = 16;
  gs.channels = 1;
  gs.artifact_strength = 0.6;
  gs.strength_jitter = 0.8;
  gs.seed = 42;
  pr.data_dir = g_scratch / "protocol_data";
  fs::remove_all(pr.data_dir);
  write_dataset_dir(generate(gs), pr.data_dir.string());
  // Round trip through the on-disk raster format, as an external experiment
  // would consume the dataset.
  pr.data = load_image_dir(pr.data_dir.string(),
                           (pr.data_dir / "manifest.csv").string(), 16,
                           HighPassSpec{});

  TeacherConfig tc;
  tc.in_channels = 1;
  tc.stage_channels = {8, 16};
  tc.rfam_blocks = 2;
  tc.proj_channels = 8;
  tc.seed = 1;
  pr.teacher = make_teacher(tc);
  TeacherTrainConfig ttc;
  ttc.epochs = 10;
  ttc.batch_size = 32;
  ttc.lr_schedule = StepLrSchedule{3e-3, 5, 0.1};
  ttc.seed = 1;
  train_teacher(pr.teacher, pr.data, ttc);
  pr.teacher_path = g_scratch / "protocol_teacher.ckpt";
  save_teacher(pr.teacher, pr.teacher_path.string());

  for (std::uint64_t seed : {11u, 12u, 13u, 14u, 15u}) {
    // A fresh teacher per run: its projectors train during distillation.
    TeacherNet t_rgb = load_teacher(pr.teacher_path.string());
    TeacherNet t_naive = load_teacher(pr.teacher_path.string());
    TeacherNet t_tokd = load_teacher(pr.teacher_path.string());
    ExperimentResult vanilla = run_distillation(
        protocol_config(DistillMode::kVanilla, seed), nullptr, pr.data);
    ExperimentResult rgb = run_distillation(
        protocol_config(DistillMode::kRgbOnly, seed), &t_rgb, pr.data);
    ExperimentResult naive = run_distillation(
        protocol_config(DistillMode::kNaiveBoth, seed), &t_naive, pr.data);
    fs::path out;
    if (seed == 11) {
      out = g_scratch / "tokd_seed11";
      fs::create_directories(out);
      pr.tokd_run_dir = out;
    }
    ExperimentResult tokd =
        run_distillation(protocol_config(DistillMode::kTokd, seed), &t_tokd,
                         pr.data, out.empty() ? "" : out.string());
    pr.acc_vanilla.push_back(vanilla.test_acc);
    pr.acc_rgb.push_back(rgb.test_acc);
    pr.acc_naive.push_back(naive.test_acc);
    pr.acc_tokd.push_back(tokd.test_acc);
    pr.naive_cos_raw.push_back(naive.epochs.back().cos_raw);
    pr.tokd_cos_rotated.push_back(tokd.epochs.back().cos_rotated);
    std::cout << "    seed " << seed << ": vanilla " << vanilla.test_acc
              << ", rgb_only " << rgb.test_acc << ", naive_both "
              << naive.test_acc << ", tokd " << tokd.test_acc
              << ", naive cos_raw " << naive.epochs.back().cos_raw
              << ", tokd cos_rot " << tokd.epochs.back().cos_rotated << "\n";
  }
  pr.ready = true;
  return pr;
}

bool criterion_conflict(const ProtocolResults& pr, std::string& why) {
  const double naive = median(pr.acc_naive);
  const double rgb = median(pr.acc_rgb);
  std::ostringstream msg;
  msg << "median naive_both " << naive << " vs rgb_only " << rgb;
  why = msg.str();
  return naive <= rgb;
}

bool criterion_improvement(const ProtocolResults& pr, std::string& why) {
  const double tokd = median(pr.acc_tokd);
  const double naive = median(pr.acc_naive);
  const double vanilla = median(pr.acc_vanilla);
  std::ostringstream msg;
  msg << "median tokd " << tokd << ", naive_both " << naive << ", vanilla "
      << vanilla;
  why = msg.str();
  return tokd >= naive && tokd >= vanilla + 0.01;
}

bool criterion_homogenization(const ProtocolResults& pr, std::string& why) {
  const double rotated = median(pr.tokd_cos_rotated);
  const double raw = median(pr.naive_cos_raw);
  std::ostringstream msg;
  msg << "median rotated cosine " << rotated << " vs unrotated " << raw;
  why = msg.str();
  return rotated >= raw + 0.05 && rotated >= -0.05;
}

// ---------------------------------------------------------------------------
// 10. Rotation-size sweep through the command-line harness.
bool criterion_d_sweep(const ProtocolResults& pr, std::string& why) {
  if (g_cli_path.empty()) {
    why = "cli binary path not supplied";
    return false;
  }
  const fs::path out = g_scratch / "sweep_d";
  fs::remove_all(out);
  std::ostringstream cmd;
  cmd << g_cli_path << " sweep-d --data " << pr.data_dir.string()
      << " --size 16 --teacher " << pr.teacher_path.string()
      << " --ds 8,16,32,64,128 --alpha1 10 --alpha2 10 --epochs 3"
      << " --batch 32 --student-stages 8,16 --lr-s 1e-3 --lr-r 1e-2"
      << " --teacher-proj-lr-scale 0.1 --seed 11 --out " << out.string();
  if (std::system(cmd.str().c_str()) != 0) {
    why = "sweep-d invocation failed";
    return false;
  }
  std::ifstream csv(out / "sweep_d.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(csv, line))
    if (!line.empty()) ++rows;
  if (rows != 6) {  // header + one row per d
    why = "sweep_d.csv has " + std::to_string(rows) + " lines, expected 6";
    return false;
  }
  for (int d : {8, 16, 32, 64, 128}) {
    const fs::path ckpt =
        out / ("d_" + std::to_string(d)) / "student_full.ckpt";
    StudentNet s = load_student(ckpt.string());
    for (const Tensor* r : {&s.rotation.r_rgb, &s.rotation.r_fre}) {
      const double orth = orthogonality_error(*r);
      const double det = determinant(*r);
      if (orth >= 1e-6 || std::abs(det - 1.0) > 1e-6) {
        std::ostringstream msg;
        msg << "d=" << d << ": orth " << orth << ", det " << det;
        why = msg.str();
        return false;
      }
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// 11. Inference-path contract.
bool criterion_inference(const ProtocolResults& pr, std::string& why) {
  StudentNet full =
      load_student((pr.tokd_run_dir / "student_full.ckpt").string());
  StudentNet infer =
      load_student((pr.tokd_run_dir / "student_infer.ckpt").string());
  ScoredPredictions a = evaluate_student(full, pr.data, Split::kTest, 32);
  ScoredPredictions b = evaluate_student(infer, pr.data, Split::kTest, 32);
  for (std::size_t i = 0; i < a.scores.size(); ++i) {
    if (a.scores[i] != b.scores[i]) {
      why = "full and inference checkpoints score differently";
      return false;
    }
  }
  if (accuracy(a) != accuracy(b) || roc_auc(a) != roc_auc(b) ||
      eer(a) != eer(b)) {
    why = "metric mismatch between checkpoints";
    return false;
  }
  if (infer.proj_rgb.forward_count() != 0 ||
      infer.proj_fre.forward_count() != 0 ||
      infer.rotation_eval_count != 0) {
    why = "projectors or rotations were evaluated during prediction";
    return false;
  }
  std::ostringstream msg;
  msg << "test acc " << accuracy(a) << ", auc " << roc_auc(a) << ", eer "
      << eer(a);
  why = msg.str();
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc > 1) g_cli_path = argv[1];
  g_scratch = argc > 2 ? fs::path(argv[2])
                       : fs::temp_directory_path() / "tokd_acceptance";
  fs::create_directories(g_scratch);

  int failures = 0;
  auto report = [&](int id, const std::string& name, bool pass,
                    const std::string& detail, double seconds) {
    std::cout << (pass ? "PASS" : "FAIL") << " " << id << ": " << name;
    if (!detail.empty()) std::cout << " — " << detail;
    std::cout << " (" << seconds << "s)\n";
    if (!pass) ++failures;
  };
  auto timed = [&](int id, const std::string& name, auto&& fn) {
    const auto start = std::chrono::steady_clock::now();
    std::string detail;
    bool pass = false;
    try {
      pass = fn(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
            .count();
    report(id, name, pass, detail, secs);
  };

  timed(1, "numeric core oracles", criterion_numeric_core);
  timed(2, "gradient correctness", criterion_gradients);
  timed(3, "rotation-loss gradient", criterion_rotation_grad);
  timed(4, "manifold maintenance", criterion_manifold);
  timed(5, "metric oracles", criterion_metrics);
  timed(6, "mode-reduction exactness", criterion_mode_reduction);

  std::cout << "  running the comparative protocol (4 modes x 5 seeds)...\n";
  ProtocolResults pr;
  try {
    pr = run_protocol();
  } catch (const std::exception& e) {
    std::cout << "  protocol failed: " << e.what() << "\n";
  }
  auto guarded = [&](auto&& fn) {
    return [&pr, fn](std::string& detail) {
      if (!pr.ready) {
        detail = "protocol runs unavailable";
        return false;
      }
      return fn(pr, detail);
    };
  };
  timed(7, "conflict baseline ordering", guarded(criterion_conflict));
  timed(8, "distillation improvement", guarded(criterion_improvement));
  timed(9, "gradient homogenization", guarded(criterion_homogenization));
  timed(10, "rotation-size sweep", guarded(criterion_d_sweep));
  timed(11, "inference-path contract", guarded(criterion_inference));

  if (failures == 0) {
    std::cout << "acceptance: all 11 criteria passed\n";
    return 0;
  }
  std::cout << "acceptance: " << failures << " criteria FAILED\n";
  return 1;
}
