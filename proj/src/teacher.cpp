// SPDX-License-Identifier: Apache-2.0
#include "tokd/teacher.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "tokd/rng.hpp"

namespace tokd {

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() != 4 || b.rank() != 4) {
    throw ShapeError("concat_channels: expected N×C×H×W inputs");
  }
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: non-channel dims differ");
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::size_t hw = a.dim(2) * a.dim(3);
  Tensor out({n, ca + cb, a.dim(2), a.dim(3)});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data() + i * ca * hw, ca * hw,
                out.data() + i * (ca + cb) * hw);
    std::copy_n(b.data() + i * cb * hw, cb * hw,
                out.data() + i * (ca + cb) * hw + ca * hw);
  }
  return out;
}

std::pair<Tensor, Tensor> split_channels(const Tensor& x) {
  if (x.rank() != 4 || x.dim(1) % 2 != 0) {
    throw ShapeError("split_channels: expected N×2C×H×W input");
  }
  const std::size_t n = x.dim(0), c = x.dim(1) / 2;
  const std::size_t hw = x.dim(2) * x.dim(3);
  Tensor a({n, c, x.dim(2), x.dim(3)}), b(a.shape());
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(x.data() + i * 2 * c * hw, c * hw, a.data() + i * c * hw);
    std::copy_n(x.data() + i * 2 * c * hw + c * hw, c * hw,
                b.data() + i * c * hw);
  }
  return {std::move(a), std::move(b)};
}

void TeacherConfig::validate() const {
  if (in_channels == 0) throw ConfigError("TeacherConfig: in_channels >= 1");
  if (stage_channels.empty()) {
    throw ConfigError("TeacherConfig: at least one stage required");
  }
  for (std::size_t c : stage_channels) {
    if (c == 0) throw ConfigError("TeacherConfig: zero-width stage");
  }
  if (rfam_blocks > stage_channels.size()) {
    throw ConfigError("TeacherConfig: more attention blocks than stages");
  }
}

namespace {

NetworkGraph make_stage(std::size_t c_in, std::size_t c_out, Rng& rng) {
  NetworkGraph g;
  g.add("conv", std::make_unique<Conv2dLayer>(c_in, c_out, 3, 2, 1, rng));
  g.add("bn", std::make_unique<BatchNormLayer>(c_out));
  g.add("relu", std::make_unique<ReluLayer>());
  return g;
}

RfamBlock make_rfam(std::size_t channels, Rng& rng) {
  RfamBlock block;
  block.channels = channels;
  const std::size_t c2 = 2 * channels;
  block.attn.add("conv1", std::make_unique<Conv2dLayer>(c2, c2, 3, 1, 1, rng));
  block.attn.add("bn1", std::make_unique<BatchNormLayer>(c2));
  block.attn.add("relu1", std::make_unique<ReluLayer>());
  block.attn.add("conv2", std::make_unique<Conv2dLayer>(c2, c2, 3, 1, 1, rng));
  block.attn.add("bn2", std::make_unique<BatchNormLayer>(c2));
  block.attn.add("relu2", std::make_unique<ReluLayer>());
  block.attn.add("sigmoid", std::make_unique<SigmoidLayer>());
  return block;
}

// Three convolutions, each followed by BN and ReLU.
NetworkGraph make_proj_rgb(std::size_t c_in, std::size_t c_out, Rng& rng) {
  NetworkGraph g;
  std::size_t c = c_in;
  for (int i = 0; i < 3; ++i) {
    const std::string tag = std::to_string(i + 1);
    g.add("conv" + tag, std::make_unique<Conv2dLayer>(c, c_out, 3, 1, 1, rng));
    g.add("bn" + tag, std::make_unique<BatchNormLayer>(c_out));
    g.add("relu" + tag, std::make_unique<ReluLayer>());
    c = c_out;
  }
  return g;
}

// Five convolutions with BN and ReLU after the second and fourth.
NetworkGraph make_proj_fre(std::size_t c_in, std::size_t c_out, Rng& rng) {
  NetworkGraph g;
  g.add("conv1", std::make_unique<Conv2dLayer>(c_in, c_out, 3, 1, 1, rng));
  g.add("conv2", std::make_unique<Conv2dLayer>(c_out, c_out, 3, 1, 1, rng));
  g.add("bn2", std::make_unique<BatchNormLayer>(c_out));
  g.add("relu2", std::make_unique<ReluLayer>());
  g.add("conv3", std::make_unique<Conv2dLayer>(c_out, c_out, 3, 1, 1, rng));
  g.add("conv4", std::make_unique<Conv2dLayer>(c_out, c_out, 3, 1, 1, rng));
  g.add("bn4", std::make_unique<BatchNormLayer>(c_out));
  g.add("relu4", std::make_unique<ReluLayer>());
  g.add("conv5", std::make_unique<Conv2dLayer>(c_out, c_out, 3, 1, 1, rng));
  return g;
}

}  // namespace

TeacherNet make_teacher(const TeacherConfig& cfg) {
  cfg.validate();
  TeacherNet t;
  t.config = cfg;
  std::size_t c = cfg.in_channels;
  for (std::size_t i = 0; i < cfg.stage_channels.size(); ++i) {
    Rng rng_r = make_rng(cfg.seed, "t_rgb", i);
    Rng rng_f = make_rng(cfg.seed, "t_fre", i);
    t.rgb_stages.push_back(make_stage(c, cfg.stage_channels[i], rng_r));
    t.fre_stages.push_back(make_stage(c, cfg.stage_channels[i], rng_f));
    if (i < cfg.rfam_blocks) {
      Rng rng_a = make_rng(cfg.seed, "t_rfam", i);
      t.rfam.push_back(make_rfam(cfg.stage_channels[i], rng_a));
    }
    c = cfg.stage_channels[i];
  }
  {
    Rng rng = make_rng(cfg.seed, "t_head");
    t.fusion_head.add("pool", std::make_unique<GlobalAvgPoolLayer>());
    t.fusion_head.add("fc", std::make_unique<LinearLayer>(2 * c, 2, rng));
  }
  {
    Rng rng = make_rng(cfg.seed, "t_proj_rgb");
    t.proj_rgb = make_proj_rgb(c, cfg.distill_channels(), rng);
  }
  {
    Rng rng = make_rng(cfg.seed, "t_proj_fre");
    t.proj_fre = make_proj_fre(c, cfg.distill_channels(), rng);
  }
  return t;
}

std::vector<ParamRef> TeacherNet::backbone_params() {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < rgb_stages.size(); ++i) {
    for (auto& p : rgb_stages[i].parameters("rgb." + std::to_string(i) + "."))
      out.push_back(p);
    for (auto& p : fre_stages[i].parameters("fre." + std::to_string(i) + "."))
      out.push_back(p);
  }
  for (std::size_t i = 0; i < rfam.size(); ++i) {
    for (auto& p : rfam[i].attn.parameters("rfam." + std::to_string(i) + "."))
      out.push_back(p);
  }
  for (auto& p : fusion_head.parameters("head.")) out.push_back(p);
  return out;
}

std::vector<ParamRef> TeacherNet::projector_params() {
  // Prefixed distinctly from the student projectors: both families can sit
  // in one optimizer state during distillation.
  std::vector<ParamRef> out;
  for (auto& p : proj_rgb.parameters("t_proj_rgb.")) out.push_back(p);
  for (auto& p : proj_fre.parameters("t_proj_fre.")) out.push_back(p);
  return out;
}

std::vector<std::pair<std::string, Tensor*>> TeacherNet::state() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (std::size_t i = 0; i < rgb_stages.size(); ++i) {
    for (auto& s : rgb_stages[i].state("rgb." + std::to_string(i) + "."))
      out.push_back(s);
    for (auto& s : fre_stages[i].state("fre." + std::to_string(i) + "."))
      out.push_back(s);
  }
  for (std::size_t i = 0; i < rfam.size(); ++i) {
    for (auto& s : rfam[i].attn.state("rfam." + std::to_string(i) + "."))
      out.push_back(s);
  }
  for (auto& s : fusion_head.state("head.")) out.push_back(s);
  for (auto& s : proj_rgb.state("proj_rgb.")) out.push_back(s);
  for (auto& s : proj_fre.state("proj_fre.")) out.push_back(s);
  return out;
}

void TeacherNet::zero_grad() {
  for (auto& g : rgb_stages) g.zero_grad();
  for (auto& g : fre_stages) g.zero_grad();
  for (auto& b : rfam) b.attn.zero_grad();
  fusion_head.zero_grad();
  proj_rgb.zero_grad();
  proj_fre.zero_grad();
}

std::pair<Tensor, Tensor> rfam_forward(RfamBlock& block, const Tensor& f_rgb,
                                       const Tensor& f_fre, Mode mode) {
  if (!f_rgb.same_shape(f_fre)) {
    throw ShapeError("rfam_forward: branch feature shapes differ");
  }
  if (f_rgb.dim(1) != block.channels) {
    throw ShapeError("rfam_forward: channel count mismatch");
  }
  Tensor attn = block.attn.forward(concat_channels(f_rgb, f_fre), mode);
  auto [a_rgb, a_fre] = split_channels(attn);
  Tensor out_rgb = hadamard(f_rgb, a_rgb);
  Tensor out_fre = hadamard(f_fre, a_fre);
  if (mode != Mode::kInfer) {
    block.in_rgb_cache = f_rgb;
    block.in_fre_cache = f_fre;
    block.attn_rgb_cache = std::move(a_rgb);
    block.attn_fre_cache = std::move(a_fre);
    block.has_cache = true;
  }
  return {std::move(out_rgb), std::move(out_fre)};
}

std::pair<Tensor, Tensor> rfam_backward(RfamBlock& block, const Tensor& up_rgb,
                                        const Tensor& up_fre) {
  if (!block.has_cache) {
    throw StateError("rfam_backward: no cached training forward");
  }
  Tensor d_attn = concat_channels(hadamard(up_rgb, block.in_rgb_cache),
                                  hadamard(up_fre, block.in_fre_cache));
  Tensor d_cat = block.attn.backward(d_attn);
  auto [d_rgb_attn, d_fre_attn] = split_channels(d_cat);
  Tensor d_rgb = add(hadamard(up_rgb, block.attn_rgb_cache), d_rgb_attn);
  Tensor d_fre = add(hadamard(up_fre, block.attn_fre_cache), d_fre_attn);
  block.has_cache = false;
  return {std::move(d_rgb), std::move(d_fre)};
}

TeacherForward teacher_forward(TeacherNet& t, const Tensor& x,
                               const Tensor& x_f, Mode mode) {
  if (!x.same_shape(x_f)) {
    throw ShapeError("teacher_forward: x and x_f shapes differ");
  }
  Tensor f_rgb = x, f_fre = x_f;
  for (std::size_t i = 0; i < t.rgb_stages.size(); ++i) {
    f_rgb = t.rgb_stages[i].forward(f_rgb, mode);
    f_fre = t.fre_stages[i].forward(f_fre, mode);
    if (i < t.rfam.size()) {
      auto [r, f] = rfam_forward(t.rfam[i], f_rgb, f_fre, mode);
      f_rgb = std::move(r);
      f_fre = std::move(f);
    }
  }
  Tensor logits = t.fusion_head.forward(concat_channels(f_rgb, f_fre), mode);
  return {std::move(logits), std::move(f_rgb), std::move(f_fre)};
}

std::pair<Tensor, Tensor> teacher_backward(TeacherNet& t,
                                           const Tensor& d_logits) {
  Tensor d_cat = t.fusion_head.backward(d_logits);
  auto [d_rgb, d_fre] = split_channels(d_cat);
  for (std::size_t i = t.rgb_stages.size(); i-- > 0;) {
    if (i < t.rfam.size()) {
      auto [r, f] = rfam_backward(t.rfam[i], d_rgb, d_fre);
      d_rgb = std::move(r);
      d_fre = std::move(f);
    }
    d_rgb = t.rgb_stages[i].backward(d_rgb);
    d_fre = t.fre_stages[i].backward(d_fre);
  }
  return {std::move(d_rgb), std::move(d_fre)};
}

std::pair<Tensor, Tensor> teacher_project(TeacherNet& t, const Tensor& feat_rgb,
                                          const Tensor& feat_fre, Mode mode) {
  Tensor f_tr = t.proj_rgb.forward(feat_rgb, mode);
  Tensor f_tf = t.proj_fre.forward(feat_fre, mode);
  if (!f_tr.same_shape(f_tf)) {
    throw ShapeError("teacher_project: projector output shapes differ");
  }
  return {std::move(f_tr), std::move(f_tf)};
}

namespace {

std::size_t argmax_row(const Tensor& logits, std::size_t n) {
  const std::size_t k = logits.dim(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j) {
    if (logits.at(n, j) > logits.at(n, best)) best = j;
  }
  return best;
}

}  // namespace

TeacherTrainReport train_teacher(TeacherNet& t, const LabeledDataset& data,
                                 const TeacherTrainConfig& cfg) {
  std::vector<std::size_t> train_idx = data.indices_of(Split::kTrain);
  std::vector<std::size_t> val_idx = data.indices_of(Split::kVal);
  if (train_idx.empty()) throw DataError("train_teacher: empty training split");
  if (cfg.batch_size == 0) throw ConfigError("train_teacher: batch_size >= 1");

  AdamState adam;
  TeacherTrainReport report;
  std::vector<ParamRef> params = t.backbone_params();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    adam.lr = cfg.lr_schedule.lr(epoch);
    Rng shuffle_rng = make_rng(cfg.seed, "teacher_shuffle",
                               static_cast<std::uint64_t>(epoch));
    std::shuffle(train_idx.begin(), train_idx.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t steps = 0, correct = 0;
    for (std::size_t start = 0; start < train_idx.size();
         start += cfg.batch_size) {
      const std::size_t end =
          std::min(train_idx.size(), start + cfg.batch_size);
      LabeledDataset batch = data.subset(std::vector<std::size_t>(
          train_idx.begin() + static_cast<long>(start),
          train_idx.begin() + static_cast<long>(end)));
      t.zero_grad();
      TeacherForward out =
          teacher_forward(t, batch.images, batch.freq_images, Mode::kTrain);
      auto [loss, d_logits] = cross_entropy(out.logits, batch.labels);
      if (!std::isfinite(loss)) {
        throw NumericError("train_teacher: non-finite loss");
      }
      teacher_backward(t, d_logits);
      adam_step(adam, params);
      loss_sum += loss;
      ++steps;
      for (std::size_t n = 0; n < batch.size(); ++n) {
        if (static_cast<int>(argmax_row(out.logits, n)) == batch.labels[n])
          ++correct;
      }
    }
    report.train_loss.push_back(loss_sum / static_cast<double>(steps));
    report.train_acc.push_back(static_cast<double>(correct) /
                               static_cast<double>(train_idx.size()));
    double val_acc = 0.0;
    if (!val_idx.empty()) {
      std::size_t val_correct = 0;
      for (std::size_t start = 0; start < val_idx.size();
           start += cfg.batch_size) {
        const std::size_t end =
            std::min(val_idx.size(), start + cfg.batch_size);
        LabeledDataset batch = data.subset(std::vector<std::size_t>(
            val_idx.begin() + static_cast<long>(start),
            val_idx.begin() + static_cast<long>(end)));
        TeacherForward out =
            teacher_forward(t, batch.images, batch.freq_images, Mode::kInfer);
        for (std::size_t n = 0; n < batch.size(); ++n) {
          if (static_cast<int>(argmax_row(out.logits, n)) == batch.labels[n])
            ++val_correct;
        }
      }
      val_acc =
          static_cast<double>(val_correct) / static_cast<double>(val_idx.size());
    }
    report.val_acc.push_back(val_acc);
  }
  return report;
}

void save_teacher(TeacherNet& t, const std::string& path) {
  nlohmann::json meta;
  meta["kind"] = "teacher";
  meta["in_channels"] = t.config.in_channels;
  meta["stage_channels"] = t.config.stage_channels;
  meta["rfam_blocks"] = t.config.rfam_blocks;
  meta["proj_channels"] = t.config.proj_channels;
  meta["seed"] = t.config.seed;
  save_checkpoint(path, meta.dump(), t.state());
}

TeacherNet load_teacher(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  nlohmann::json meta = nlohmann::json::parse(ckpt.meta);
  if (meta.value("kind", "") != "teacher") {
    throw DataError("load_teacher: checkpoint is not a teacher: " + path);
  }
  TeacherConfig cfg;
  cfg.in_channels = meta.at("in_channels").get<std::size_t>();
  cfg.stage_channels = meta.at("stage_channels").get<std::vector<std::size_t>>();
  cfg.rfam_blocks = meta.at("rfam_blocks").get<std::size_t>();
  cfg.proj_channels = meta.at("proj_channels").get<std::size_t>();
  cfg.seed = meta.at("seed").get<std::uint64_t>();
  TeacherNet t = make_teacher(cfg);
  restore_state(ckpt, t.state());
  return t;
}

}  // namespace tokd
