// SPDX-License-Identifier: Apache-2.0
#include "tokd/student.hpp"

#include <memory>

#include "json.hpp"
#include "tokd/rng.hpp"

namespace tokd {

void StudentConfig::validate() const {
  if (in_channels == 0) throw ConfigError("StudentConfig: in_channels >= 1");
  if (stage_channels.empty()) {
    throw ConfigError("StudentConfig: at least one stage required");
  }
  for (std::size_t c : stage_channels) {
    if (c == 0) throw ConfigError("StudentConfig: zero-width stage");
  }
  if (rotation_d == 0) throw ConfigError("StudentConfig: rotation_d >= 1");
}

namespace {

NetworkGraph make_backbone(const StudentConfig& cfg) {
  NetworkGraph g;
  std::size_t c = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.stage_channels.size(); ++i) {
    Rng rng = make_rng(cfg.seed, "s_backbone", i);
    const std::string tag = std::to_string(i);
    g.add("conv" + tag, std::make_unique<Conv2dLayer>(c, cfg.stage_channels[i],
                                                      3, 2, 1, rng));
    g.add("bn" + tag, std::make_unique<BatchNormLayer>(cfg.stage_channels[i]));
    g.add("relu" + tag, std::make_unique<ReluLayer>());
    c = cfg.stage_channels[i];
  }
  return g;
}

NetworkGraph make_conv_projector(std::size_t c_in, std::size_t c_out,
                                 std::size_t convs, Rng& rng) {
  NetworkGraph g;
  std::size_t c = c_in;
  for (std::size_t i = 0; i < convs; ++i) {
    const std::string tag = std::to_string(i + 1);
    g.add("conv" + tag, std::make_unique<Conv2dLayer>(c, c_out, 3, 1, 1, rng));
    g.add("bn" + tag, std::make_unique<BatchNormLayer>(c_out));
    g.add("relu" + tag, std::make_unique<ReluLayer>());
    c = c_out;
  }
  return g;
}

}  // namespace

StudentNet make_student(const StudentConfig& cfg, std::size_t image_size) {
  cfg.validate();
  StudentNet s;
  s.config = cfg;
  s.backbone = make_backbone(cfg);
  std::vector<std::size_t> out =
      s.backbone.validate({1, cfg.in_channels, image_size, image_size});
  s.feature_shape = {out[1], out[2], out[3]};
  s.image_size = image_size;
  if (cfg.rotation_d > s.flat_features()) {
    throw ConfigError(
        "StudentConfig: rotation_d exceeds flattened backbone feature length");
  }
  const std::size_t c_s = cfg.stage_channels.back();
  {
    Rng rng = make_rng(cfg.seed, "s_proj_rgb");
    s.proj_rgb = make_conv_projector(c_s, cfg.distill_channels(), 2, rng);
  }
  {
    Rng rng = make_rng(cfg.seed, "s_proj_fre");
    s.proj_fre = make_conv_projector(c_s, cfg.distill_channels(), 3, rng);
  }
  {
    Rng rng = make_rng(cfg.seed, "s_cls");
    s.classifier.add("pool", std::make_unique<GlobalAvgPoolLayer>());
    s.classifier.add("fc", std::make_unique<LinearLayer>(c_s, 2, rng));
  }
  s.rotation = RotationPair(cfg.rotation_d, cfg.rotation_lr);
  return s;
}

std::vector<ParamRef> StudentNet::backbone_params() {
  return backbone.parameters("backbone.");
}
std::vector<ParamRef> StudentNet::classifier_params() {
  return classifier.parameters("classifier.");
}
std::vector<ParamRef> StudentNet::projector_rgb_params() {
  return proj_rgb.parameters("proj_rgb.");
}
std::vector<ParamRef> StudentNet::projector_fre_params() {
  return proj_fre.parameters("proj_fre.");
}

std::vector<std::pair<std::string, Tensor*>> StudentNet::inference_state() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& s : backbone.state("backbone.")) out.push_back(s);
  for (auto& s : classifier.state("classifier.")) out.push_back(s);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> StudentNet::state() {
  std::vector<std::pair<std::string, Tensor*>> out = inference_state();
  for (auto& s : proj_rgb.state("proj_rgb.")) out.push_back(s);
  for (auto& s : proj_fre.state("proj_fre.")) out.push_back(s);
  out.emplace_back("rotation.r_rgb", &rotation.r_rgb);
  out.emplace_back("rotation.r_fre", &rotation.r_fre);
  return out;
}

void StudentNet::zero_grad() {
  backbone.zero_grad();
  proj_rgb.zero_grad();
  proj_fre.zero_grad();
  classifier.zero_grad();
}

StudentForward student_forward_train(StudentNet& s, const Tensor& x, Mode mode,
                                     bool use_rgb, bool use_fre) {
  StudentForward out;
  out.z = s.backbone.forward(x, mode);
  out.logits = s.classifier.forward(out.z, mode);
  if (!use_rgb && !use_fre) return out;
  const std::size_t n = out.z.dim(0);
  const std::vector<std::size_t> feat4 = out.z.shape();
  Tensor z_flat = out.z.reshaped({n, s.flat_features()});
  if (use_rgb) {
    out.m_rgb = rotate(z_flat, s.rotation.r_rgb);
    ++s.rotation_eval_count;
    out.f_sr = s.proj_rgb.forward(out.m_rgb.reshaped(feat4), mode);
  }
  if (use_fre) {
    out.m_fre = rotate(z_flat, s.rotation.r_fre);
    ++s.rotation_eval_count;
    out.f_sf = s.proj_fre.forward(out.m_fre.reshaped(feat4), mode);
  }
  return out;
}

Tensor student_backward(StudentNet& s, const Tensor& d_logits,
                        const Tensor* d_f_sr, const Tensor* d_f_sf) {
  Tensor d_z = s.classifier.backward(d_logits);
  const std::size_t n = d_z.dim(0);
  const std::vector<std::size_t> feat4 = d_z.shape();
  const std::vector<std::size_t> flat{n, s.flat_features()};
  if (d_f_sr != nullptr) {
    Tensor d_m = s.proj_rgb.backward(*d_f_sr).reshaped(flat);
    d_z = add(d_z, rotate_backward(d_m, s.rotation.r_rgb).reshaped(feat4));
  }
  if (d_f_sf != nullptr) {
    Tensor d_m = s.proj_fre.backward(*d_f_sf).reshaped(flat);
    d_z = add(d_z, rotate_backward(d_m, s.rotation.r_fre).reshaped(feat4));
  }
  return s.backbone.backward(d_z);
}

Tensor student_predict(StudentNet& s, const Tensor& x) {
  Tensor z = s.backbone.forward(x, Mode::kInfer);
  return softmax_rows(s.classifier.forward(z, Mode::kInfer));
}

void save_student(StudentNet& s, const std::string& path,
                  bool inference_only) {
  nlohmann::json meta;
  meta["kind"] = inference_only ? "student_inference" : "student";
  meta["in_channels"] = s.config.in_channels;
  meta["stage_channels"] = s.config.stage_channels;
  meta["proj_channels"] = s.config.proj_channels;
  meta["rotation_d"] = s.config.rotation_d;
  meta["rotation_lr"] = {{"base_lr", s.config.rotation_lr.base_lr},
                         {"step_epochs", s.config.rotation_lr.step_epochs},
                         {"gamma", s.config.rotation_lr.gamma}};
  meta["seed"] = s.config.seed;
  meta["image_size"] = s.image_size;
  save_checkpoint(path, meta.dump(),
                  inference_only ? s.inference_state() : s.state());
}

StudentNet load_student(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  nlohmann::json meta = nlohmann::json::parse(ckpt.meta);
  const std::string kind = meta.value("kind", "");
  if (kind != "student" && kind != "student_inference") {
    throw DataError("load_student: checkpoint is not a student: " + path);
  }
  StudentConfig cfg;
  cfg.in_channels = meta.at("in_channels").get<std::size_t>();
  cfg.stage_channels = meta.at("stage_channels").get<std::vector<std::size_t>>();
  cfg.proj_channels = meta.at("proj_channels").get<std::size_t>();
  cfg.rotation_d = meta.at("rotation_d").get<std::size_t>();
  cfg.rotation_lr.base_lr = meta.at("rotation_lr").at("base_lr").get<double>();
  cfg.rotation_lr.step_epochs =
      meta.at("rotation_lr").at("step_epochs").get<int>();
  cfg.rotation_lr.gamma = meta.at("rotation_lr").at("gamma").get<double>();
  cfg.seed = meta.at("seed").get<std::uint64_t>();
  StudentNet s = make_student(cfg, meta.at("image_size").get<std::size_t>());
  if (kind == "student") {
    restore_state(ckpt, s.state());
  } else {
    restore_state(ckpt, s.inference_state());
  }
  return s;
}

}  // namespace tokd
