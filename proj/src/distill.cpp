// SPDX-License-Identifier: Apache-2.0
#include "tokd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "tokd/rng.hpp"

namespace tokd {

namespace fs = std::filesystem;

std::string mode_name(DistillMode m) {
  switch (m) {
    case DistillMode::kVanilla: return "vanilla";
    case DistillMode::kRgbOnly: return "rgb_only";
    case DistillMode::kFreOnly: return "fre_only";
    case DistillMode::kNaiveBoth: return "naive_both";
    case DistillMode::kTokd: return "tokd";
  }
  throw ConfigError("mode_name: bad mode");
}

DistillMode mode_from_name(const std::string& name) {
  if (name == "vanilla") return DistillMode::kVanilla;
  if (name == "rgb_only" || name == "rgb") return DistillMode::kRgbOnly;
  if (name == "fre_only" || name == "fre") return DistillMode::kFreOnly;
  if (name == "naive_both" || name == "both") return DistillMode::kNaiveBoth;
  if (name == "tokd") return DistillMode::kTokd;
  throw ConfigError("unknown distillation mode: " + name);
}

void DistillConfig::validate() const {
  if (alpha1 < 0.0 || alpha2 < 0.0) {
    throw ConfigError("DistillConfig: alpha weights must be >= 0");
  }
  if (d == 0) throw ConfigError("DistillConfig: d >= 1");
  if (epochs < 0) throw ConfigError("DistillConfig: epochs >= 0");
  if (batch_size == 0) throw ConfigError("DistillConfig: batch_size >= 1");
  if (teacher_proj_lr_scale < 0.0) {
    throw ConfigError("DistillConfig: teacher_proj_lr_scale must be >= 0");
  }
  if (distance_metric != "mse") {
    throw ConfigError("DistillConfig: unsupported distance metric: " +
                      distance_metric);
  }
  highpass.validate();
  if (mode == DistillMode::kTokd) {
    // Leader must not regain ground on the follower at any schedule step.
    double prev = eta_r.lr(0) / eta_s.lr(0);
    for (int e = 1; e < std::max(epochs, 1); ++e) {
      const double ratio = eta_r.lr(e) / eta_s.lr(e);
      if (ratio > prev * (1.0 + 1e-12)) {
        throw ConfigError(
            "DistillConfig: eta_r/eta_s must be non-increasing over epochs");
      }
      prev = ratio;
    }
  }
}

std::string DistillConfig::to_json() const {
  nlohmann::json j;
  j["mode"] = mode_name(mode);
  j["alpha1"] = alpha1;
  j["alpha2"] = alpha2;
  j["d"] = d;
  j["eta_s"] = {{"base_lr", eta_s.base_lr},
                {"step_epochs", eta_s.step_epochs},
                {"gamma", eta_s.gamma}};
  j["eta_r"] = {{"base_lr", eta_r.base_lr},
                {"step_epochs", eta_r.step_epochs},
                {"gamma", eta_r.gamma}};
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["highpass_cutoff"] = highpass.cutoff_fraction;
  j["seed"] = seed;
  j["distance_metric"] = distance_metric;
  j["normalize_grads"] = normalize_grads;
  j["teacher_proj_lr_scale"] = teacher_proj_lr_scale;
  j["student"] = {{"in_channels", student.in_channels},
                  {"stage_channels", student.stage_channels},
                  {"proj_channels", student.proj_channels},
                  {"seed", student.seed}};
  return j.dump();
}

std::uint64_t DistillConfig::config_hash() const { return fnv1a(to_json()); }

std::pair<double, Tensor> kd_loss(const Tensor& f_s, const Tensor& f_t) {
  if (!f_s.same_shape(f_t)) throw ShapeError("kd_loss: feature shapes differ");
  if (f_s.rank() < 2) throw ShapeError("kd_loss: expected batched features");
  const std::size_t n = f_s.dim(0);
  const std::size_t dim = f_s.size() / n;
  Tensor grad(f_s.shape());
  double loss = 0.0;
  const double scale_term = 1.0 / (static_cast<double>(n) * dim);
  for (std::size_t i = 0; i < n; ++i) {
    const double* u = f_s.data() + i * dim;
    const double* t = f_t.data() + i * dim;
    double nu = 0.0, nt = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      nu += u[k] * u[k];
      nt += t[k] * t[k];
    }
    nu = std::sqrt(nu);
    nt = std::sqrt(nt);
    if (nu == 0.0 || nt == 0.0) {
      throw NumericError("kd_loss: zero-norm feature for sample " +
                         std::to_string(i));
    }
    // a = u/nu, b = t/nt; per-sample loss ||a-b||^2 * scale_term.
    double sq = 0.0, a_dot_g = 0.0;
    std::vector<double> g(dim);  // dL/da
    for (std::size_t k = 0; k < dim; ++k) {
      const double a = u[k] / nu, b = t[k] / nt;
      const double diff = a - b;
      sq += diff * diff;
      g[k] = 2.0 * diff * scale_term;
      a_dot_g += a * g[k];
    }
    loss += sq * scale_term;
    double* out = grad.data() + i * dim;
    for (std::size_t k = 0; k < dim; ++k) {
      const double a = u[k] / nu;
      out[k] = (g[k] - a * a_dot_g) / nu;
    }
  }
  return {loss, std::move(grad)};
}

double total_loss(double cls, double kd_rgb, double kd_fre,
                  const DistillConfig& cfg) {
  if (cfg.alpha1 < 0.0 || cfg.alpha2 < 0.0) {
    throw ConfigError("total_loss: alpha weights must be >= 0");
  }
  double total = cls;
  if (mode_uses_rgb(cfg.mode)) total += cfg.alpha1 * kd_rgb;
  if (mode_uses_fre(cfg.mode)) total += cfg.alpha2 * kd_fre;
  return total;
}

namespace {

Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& idx) {
  const std::size_t per = t.size() / t.dim(0);
  std::vector<std::size_t> shape = t.shape();
  shape[0] = idx.size();
  Tensor out(shape);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    std::copy_n(t.data() + idx[k] * per, per, out.data() + k * per);
  }
  return out;
}

std::vector<ParamRef> student_follower_params(StudentNet& s,
                                              const DistillConfig& cfg) {
  std::vector<ParamRef> params = s.backbone_params();
  for (auto& p : s.classifier_params()) params.push_back(p);
  if (mode_uses_rgb(cfg.mode)) {
    for (auto& p : s.projector_rgb_params()) params.push_back(p);
  }
  if (mode_uses_fre(cfg.mode)) {
    for (auto& p : s.projector_fre_params()) params.push_back(p);
  }
  return params;
}

std::vector<ParamRef> teacher_follower_params(TeacherNet& teacher,
                                              const DistillConfig& cfg) {
  std::vector<ParamRef> params;
  for (auto& p : teacher.projector_params()) {
    const bool rgb = p.name.rfind("t_proj_rgb.", 0) == 0;
    if ((rgb && mode_uses_rgb(cfg.mode)) ||
        (!rgb && mode_uses_fre(cfg.mode))) {
      params.push_back(p);
    }
  }
  return params;
}

}  // namespace

StepReport distill_step(StudentNet& s, TeacherNet* teacher, const Batch& batch,
                        const DistillConfig& cfg, AdamState& adam, int epoch) {
  const bool use_rgb = mode_uses_rgb(cfg.mode);
  const bool use_fre = mode_uses_fre(cfg.mode);
  if ((use_rgb || use_fre) && teacher == nullptr) {
    throw ConfigError("distill_step: mode requires a teacher");
  }
  StepReport rep;

  // Follower: student + projectors under the combined loss.
  s.zero_grad();
  if (teacher != nullptr) teacher->zero_grad();
  StudentForward out =
      student_forward_train(s, batch.x, Mode::kTrain, use_rgb, use_fre);
  auto [cls, d_logits] = cross_entropy(out.logits, batch.labels);
  rep.loss_cls = cls;
  Tensor d_fsr, d_fsf;
  if (use_rgb) {
    Tensor f_tr = teacher->proj_rgb.forward(batch.t_feat_rgb, Mode::kTrain);
    auto [l, g_s] = kd_loss(out.f_sr, f_tr);
    rep.loss_kd_rgb = l;
    d_fsr = scale(g_s, cfg.alpha1);
    Tensor g_t = kd_loss(f_tr, out.f_sr).second;
    teacher->proj_rgb.backward(scale(g_t, cfg.alpha1));
  }
  if (use_fre) {
    Tensor f_tf = teacher->proj_fre.forward(batch.t_feat_fre, Mode::kTrain);
    auto [l, g_s] = kd_loss(out.f_sf, f_tf);
    rep.loss_kd_fre = l;
    d_fsf = scale(g_s, cfg.alpha2);
    Tensor g_t = kd_loss(f_tf, out.f_sf).second;
    teacher->proj_fre.backward(scale(g_t, cfg.alpha2));
  }
  rep.total = total_loss(cls, rep.loss_kd_rgb, rep.loss_kd_fre, cfg);
  if (!std::isfinite(rep.total)) {
    throw NumericError("distill_step: non-finite training loss");
  }
  student_backward(s, d_logits, use_rgb ? &d_fsr : nullptr,
                   use_fre ? &d_fsf : nullptr);
  adam.lr = cfg.eta_s.lr(epoch);
  adam_step(adam, student_follower_params(s, cfg));
  if (teacher != nullptr && cfg.mode != DistillMode::kVanilla) {
    adam.lr = cfg.eta_s.lr(epoch) * cfg.teacher_proj_lr_scale;
    adam_step(adam, teacher_follower_params(*teacher, cfg));
  }

  // Leader: per-sample gradient diagnostics and (tokd) rotation updates.
  if (cfg.mode == DistillMode::kNaiveBoth || cfg.mode == DistillMode::kTokd) {
    s.zero_grad();
    teacher->zero_grad();
    const std::size_t n = batch.x.dim(0);
    StudentForward probe = student_forward_train(
        s, batch.x, Mode::kTrainFrozenStats, true, true);
    Tensor f_tr =
        teacher->proj_rgb.forward(batch.t_feat_rgb, Mode::kTrainFrozenStats);
    Tensor f_tf =
        teacher->proj_fre.forward(batch.t_feat_fre, Mode::kTrainFrozenStats);
    Tensor g_rgb = scale(kd_loss(probe.f_sr, f_tr).second, cfg.alpha1);
    Tensor g_fre = scale(kd_loss(probe.f_sf, f_tf).second, cfg.alpha2);
    const std::vector<std::size_t> flat{n, s.flat_features()};
    Tensor d_m_rgb = s.proj_rgb.backward(g_rgb).reshaped(flat);
    Tensor d_m_fre = s.proj_fre.backward(g_fre).reshaped(flat);
    GradientRecord rec = make_gradient_record(d_m_rgb, d_m_fre, s.rotation,
                                              cfg.normalize_grads);
    rep.cos_raw = rec.mean_cos_raw;
    rep.cos_rotated = rec.mean_cos_rotated;
    if (cfg.mode == DistillMode::kTokd) {
      const double lr_r = cfg.eta_r.lr(epoch);
      auto [l_rr, grad_rr] =
          rotation_loss(rec, s.rotation.r_rgb, BranchKind::kRgb);
      auto [l_rf, grad_rf] =
          rotation_loss(rec, s.rotation.r_fre, BranchKind::kFre);
      rep.loss_rot_rgb = l_rr;
      rep.loss_rot_fre = l_rf;
      s.rotation.r_rgb = manifold_update(s.rotation.r_rgb, grad_rr, lr_r);
      s.rotation.r_fre = manifold_update(s.rotation.r_fre, grad_rf, lr_r);
      s.rotation.check_invariants();
    }
    s.zero_grad();
    teacher->zero_grad();
  }
  return rep;
}

ScoredPredictions evaluate_student(StudentNet& s, const LabeledDataset& data,
                                   Split split, std::size_t batch_size) {
  ScoredPredictions p;
  const std::vector<std::size_t> idx = data.indices_of(split);
  for (std::size_t start = 0; start < idx.size(); start += batch_size) {
    const std::size_t end = std::min(idx.size(), start + batch_size);
    std::vector<std::size_t> slice(idx.begin() + static_cast<long>(start),
                                   idx.begin() + static_cast<long>(end));
    Tensor probs = student_predict(s, gather_rows(data.images, slice));
    for (std::size_t k = 0; k < slice.size(); ++k) {
      p.scores.push_back(probs.at(k, 1));
      p.labels.push_back(data.labels[slice[k]]);
    }
  }
  return p;
}

namespace {

// Frozen-backbone teacher branch features for every sample.
std::pair<Tensor, Tensor> cache_teacher_features(TeacherNet& teacher,
                                                 const LabeledDataset& data,
                                                 std::size_t batch_size) {
  Tensor feat_rgb, feat_fre;
  const std::size_t n = data.size();
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    std::vector<std::size_t> slice(end - start);
    for (std::size_t k = 0; k < slice.size(); ++k) slice[k] = start + k;
    TeacherForward out =
        teacher_forward(teacher, gather_rows(data.images, slice),
                        gather_rows(data.freq_images, slice), Mode::kInfer);
    if (feat_rgb.size() == 0) {
      std::vector<std::size_t> shape = out.feat_rgb.shape();
      shape[0] = n;
      feat_rgb = Tensor(shape);
      feat_fre = Tensor(shape);
    }
    const std::size_t per = feat_rgb.size() / n;
    std::copy_n(out.feat_rgb.data(), (end - start) * per,
                feat_rgb.data() + start * per);
    std::copy_n(out.feat_fre.data(), (end - start) * per,
                feat_fre.data() + start * per);
  }
  return {std::move(feat_rgb), std::move(feat_fre)};
}

double safe_auc(const ScoredPredictions& p) {
  bool has0 = false, has1 = false;
  for (int y : p.labels) (y == 0 ? has0 : has1) = true;
  if (!has0 || !has1 || p.labels.empty()) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  return roc_auc(p);
}

void write_csvs(const ExperimentResult& result, const std::string& out_dir) {
  std::ofstream metrics(fs::path(out_dir) / "metrics.csv");
  metrics << "epoch,lr_S,lr_R,L_Cls,L_KD_RGB,L_KD_Fre,L_Rr,L_Rf,"
             "mean_grad_cosine_raw,mean_grad_cosine_rotated,val_acc,val_auc\n";
  metrics.precision(17);
  for (const EpochRow& r : result.epochs) {
    metrics << r.epoch << ',' << r.lr_s << ',' << r.lr_r << ',' << r.l_cls
            << ',' << r.l_kd_rgb << ',' << r.l_kd_fre << ',' << r.l_rr << ','
            << r.l_rf << ',' << r.cos_raw << ',' << r.cos_rotated << ','
            << r.val_acc << ',' << r.val_auc << '\n';
  }
  std::ofstream steps(fs::path(out_dir) / "steps.csv");
  steps << "step,L_Cls,L_KD_RGB,L_KD_Fre,L_Rr,L_Rf,total,"
           "grad_cosine_raw,grad_cosine_rotated\n";
  steps.precision(17);
  for (std::size_t i = 0; i < result.steps.size(); ++i) {
    const StepReport& r = result.steps[i];
    steps << i << ',' << r.loss_cls << ',' << r.loss_kd_rgb << ','
          << r.loss_kd_fre << ',' << r.loss_rot_rgb << ',' << r.loss_rot_fre
          << ',' << r.total << ',' << r.cos_raw << ',' << r.cos_rotated
          << '\n';
  }
}

}  // namespace

ExperimentResult run_distillation(const DistillConfig& cfg,
                                  TeacherNet* teacher,
                                  const LabeledDataset& data,
                                  const std::string& out_dir) {
  cfg.validate();
  if (cfg.mode != DistillMode::kVanilla && teacher == nullptr) {
    throw ConfigError("run_distillation: mode requires a trained teacher");
  }
  if (data.size() == 0) throw DataError("run_distillation: empty dataset");
  std::vector<std::size_t> train_idx = data.indices_of(Split::kTrain);
  if (train_idx.empty() && cfg.epochs > 0) {
    throw DataError("run_distillation: empty training split");
  }

  StudentConfig scfg = cfg.student;
  scfg.in_channels = data.images.dim(1);
  scfg.rotation_d = cfg.d;
  scfg.rotation_lr = cfg.eta_r;
  scfg.seed = cfg.seed;
  const std::size_t image_size = data.images.dim(2);

  ExperimentResult result;
  result.config_hash = cfg.config_hash();
  result.student = make_student(scfg, image_size);
  StudentNet& s = result.student;

  Tensor t_feat_rgb, t_feat_fre;
  if (cfg.mode != DistillMode::kVanilla) {
    auto cached = cache_teacher_features(*teacher, data, cfg.batch_size);
    t_feat_rgb = std::move(cached.first);
    t_feat_fre = std::move(cached.second);
  }

  AdamState adam;
  std::vector<Tensor> best_state;
  auto snapshot = [&]() {
    best_state.clear();
    for (auto& slot : s.state()) best_state.push_back(*slot.second);
  };
  auto restore = [&]() {
    auto slots = s.state();
    for (std::size_t k = 0; k < slots.size(); ++k)
      *slots[k].second = best_state[k];
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng =
        make_rng(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch));
    std::shuffle(train_idx.begin(), train_idx.end(), shuffle_rng);
    EpochRow row;
    row.epoch = epoch;
    row.lr_s = cfg.eta_s.lr(epoch);
    row.lr_r = cfg.eta_r.lr(epoch);
    double cos_raw_sum = 0.0, cos_rot_sum = 0.0;
    std::size_t cos_count = 0, steps_in_epoch = 0;
    for (std::size_t start = 0; start < train_idx.size();
         start += cfg.batch_size) {
      const std::size_t end =
          std::min(train_idx.size(), start + cfg.batch_size);
      std::vector<std::size_t> slice(
          train_idx.begin() + static_cast<long>(start),
          train_idx.begin() + static_cast<long>(end));
      Batch batch;
      batch.x = gather_rows(data.images, slice);
      if (cfg.mode != DistillMode::kVanilla) {
        batch.x_f = gather_rows(data.freq_images, slice);
        batch.t_feat_rgb = gather_rows(t_feat_rgb, slice);
        batch.t_feat_fre = gather_rows(t_feat_fre, slice);
      }
      for (std::size_t i : slice) batch.labels.push_back(data.labels[i]);
      StepReport rep = distill_step(s, teacher, batch, cfg, adam, epoch);
      row.l_cls += rep.loss_cls;
      row.l_kd_rgb += rep.loss_kd_rgb;
      row.l_kd_fre += rep.loss_kd_fre;
      row.l_rr += rep.loss_rot_rgb;
      row.l_rf += rep.loss_rot_fre;
      if (std::isfinite(rep.cos_raw) && std::isfinite(rep.cos_rotated)) {
        cos_raw_sum += rep.cos_raw;
        cos_rot_sum += rep.cos_rotated;
        ++cos_count;
      }
      ++steps_in_epoch;
      result.steps.push_back(rep);
    }
    const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(
                                 1, steps_in_epoch));
    row.l_cls *= inv;
    row.l_kd_rgb *= inv;
    row.l_kd_fre *= inv;
    row.l_rr *= inv;
    row.l_rf *= inv;
    if (cos_count > 0) {
      row.cos_raw = cos_raw_sum / static_cast<double>(cos_count);
      row.cos_rotated = cos_rot_sum / static_cast<double>(cos_count);
    }
    ScoredPredictions val = evaluate_student(s, data, Split::kVal,
                                             cfg.batch_size);
    row.val_acc = val.labels.empty() ? 0.0 : accuracy(val);
    row.val_auc = safe_auc(val);
    result.epochs.push_back(row);
    // Earliest best epoch wins ties.
    if (result.best_epoch < 0 || row.val_acc > result.best_val_acc) {
      result.best_epoch = epoch;
      result.best_val_acc = row.val_acc;
      snapshot();
    }
  }
  if (!best_state.empty()) restore();

  ScoredPredictions test = evaluate_student(s, data, Split::kTest,
                                            cfg.batch_size);
  if (!test.labels.empty()) {
    result.test_acc = accuracy(test);
    result.test_auc = safe_auc(test);
    bool has0 = false, has1 = false;
    for (int y : test.labels) (y == 0 ? has0 : has1) = true;
    result.test_eer = (has0 && has1)
                          ? eer(test)
                          : std::numeric_limits<double>::quiet_NaN();
  }

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_csvs(result, out_dir);
    nlohmann::json summary;
    summary["config"] = nlohmann::json::parse(cfg.to_json());
    summary["config_hash"] = result.config_hash;
    summary["best_epoch"] = result.best_epoch;
    summary["best_val_acc"] = result.best_val_acc;
    summary["test_acc"] = result.test_acc;
    summary["test_auc"] = result.test_auc;
    summary["test_eer"] = result.test_eer;
    summary["final_cos_raw"] =
        result.epochs.empty() ? 0.0 : result.epochs.back().cos_raw;
    summary["final_cos_rotated"] =
        result.epochs.empty() ? 0.0 : result.epochs.back().cos_rotated;
    std::ofstream json_out(fs::path(out_dir) / "summary.json");
    json_out << summary.dump(2) << '\n';
    save_student(s, (fs::path(out_dir) / "student_full.ckpt").string(), false);
    save_student(s, (fs::path(out_dir) / "student_infer.ckpt").string(), true);
  }
  return result;
}

StudentNet train_supervised(const DistillConfig& cfg,
                            const LabeledDataset& data) {
  StudentConfig scfg = cfg.student;
  scfg.in_channels = data.images.dim(1);
  scfg.rotation_d = cfg.d;
  scfg.rotation_lr = cfg.eta_r;
  scfg.seed = cfg.seed;
  StudentNet s = make_student(scfg, data.images.dim(2));
  std::vector<std::size_t> train_idx = data.indices_of(Split::kTrain);
  if (train_idx.empty()) throw DataError("train_supervised: empty train split");
  AdamState adam;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng =
        make_rng(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch));
    std::shuffle(train_idx.begin(), train_idx.end(), shuffle_rng);
    adam.lr = cfg.eta_s.lr(epoch);
    for (std::size_t start = 0; start < train_idx.size();
         start += cfg.batch_size) {
      const std::size_t end =
          std::min(train_idx.size(), start + cfg.batch_size);
      std::vector<std::size_t> slice(
          train_idx.begin() + static_cast<long>(start),
          train_idx.begin() + static_cast<long>(end));
      Tensor x = gather_rows(data.images, slice);
      std::vector<int> labels;
      for (std::size_t i : slice) labels.push_back(data.labels[i]);
      s.zero_grad();
      StudentForward out =
          student_forward_train(s, x, Mode::kTrain, false, false);
      auto [loss, d_logits] = cross_entropy(out.logits, labels);
      student_backward(s, d_logits, nullptr, nullptr);
      std::vector<ParamRef> params = s.backbone_params();
      for (auto& p : s.classifier_params()) params.push_back(p);
      adam_step(adam, params);
    }
  }
  return s;
}

}  // namespace tokd
