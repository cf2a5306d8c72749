// SPDX-License-Identifier: Apache-2.0
//
// Experiment harness: generate synthetic data, train the dual-branch
// teacher, distill students in any mode, evaluate checkpoints, and run the
// alpha / rotation-size sweeps. All outputs are CSV/JSON files.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tokd/distill.hpp"

namespace fs = std::filesystem;
using namespace tokd;

namespace {

// Exit code contract: 0 success, 2 usage/config error, 3 data error,
// 4 numeric error.
constexpr int kUsageError = 2;
constexpr int kDataError = 3;
constexpr int kNumericError = 4;

std::size_t thread_budget() {
  const char* env = std::getenv("TOKD_THREADS");
  if (env == nullptr) return 1;
  const long v = std::strtol(env, nullptr, 10);
  if (v < 1) throw ConfigError("TOKD_THREADS must be a positive integer");
  return static_cast<std::size_t>(v);
}

std::vector<std::size_t> parse_stage_list(const std::string& csv) {
  std::vector<std::size_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const long v = std::stol(item);
    if (v < 1) throw ConfigError("stage channels must be positive: " + csv);
    out.push_back(static_cast<std::size_t>(v));
  }
  if (out.empty()) throw ConfigError("empty stage channel list");
  return out;
}

LabeledDataset load_data(const std::string& dir, std::size_t image_size,
                         double cutoff) {
  HighPassSpec hp;
  hp.cutoff_fraction = cutoff;
  return load_image_dir(dir, (fs::path(dir) / "manifest.csv").string(),
                        image_size, hp);
}

// Shared flags for the distill / sweep subcommands.
struct DistillArgs {
  std::string data_dir;
  std::string teacher_path;
  std::string out_dir = "out";
  std::string mode = "tokd";
  std::string student_stages = "16,32,64";
  std::size_t image_size = 32;
  std::size_t proj_channels = 0;  // 0 = inherit the teacher width
  double alpha1 = 10.0, alpha2 = 10.0;
  std::size_t d = 64;
  int epochs = 15;
  std::size_t batch = 32;
  double lr_s = 1e-4, lr_r = 1e-4;
  int lr_step_s = 5, lr_step_r = 5;
  double lr_gamma_s = 0.1, lr_gamma_r = 0.01;
  double cutoff = 1.0 / 3.0;
  std::uint64_t seed = 0;
  bool normalize_grads = false;
  double teacher_proj_lr_scale = 1.0;
};

void add_distill_options(CLI::App* cmd, DistillArgs& a, bool with_mode,
                         bool with_alpha, bool with_d) {
  cmd->add_option("--data", a.data_dir, "Dataset directory (with manifest.csv)")
      ->required();
  cmd->add_option("--teacher", a.teacher_path, "Teacher checkpoint path");
  cmd->add_option("--out", a.out_dir, "Output directory");
  cmd->add_option("--size", a.image_size, "Image side length");
  cmd->add_option("--student-stages", a.student_stages,
                  "Student backbone widths, comma-separated");
  cmd->add_option("--proj-channels", a.proj_channels,
                  "Distillation feature width (0 = teacher width)");
  if (with_mode) {
    cmd->add_option("--mode", a.mode,
                    "vanilla | rgb_only | fre_only | naive_both | tokd");
  }
  if (with_alpha) {
    cmd->add_option("--alpha1", a.alpha1, "Spatial-branch loss weight");
    cmd->add_option("--alpha2", a.alpha2, "Frequency-branch loss weight");
  }
  if (with_d) cmd->add_option("--d", a.d, "Rotation matrix size");
  cmd->add_option("--epochs", a.epochs, "Training epochs");
  cmd->add_option("--batch", a.batch, "Batch size");
  cmd->add_option("--lr-s", a.lr_s, "Follower (student) base learning rate");
  cmd->add_option("--lr-r", a.lr_r, "Leader (rotation) base learning rate");
  cmd->add_option("--lr-step-s", a.lr_step_s, "Follower LR decay interval");
  cmd->add_option("--lr-step-r", a.lr_step_r, "Leader LR decay interval");
  cmd->add_option("--lr-gamma-s", a.lr_gamma_s, "Follower LR decay factor");
  cmd->add_option("--lr-gamma-r", a.lr_gamma_r, "Leader LR decay factor");
  cmd->add_option("--cutoff", a.cutoff, "High-pass cutoff fraction");
  cmd->add_option("--seed", a.seed, "Run seed");
  cmd->add_option("--teacher-proj-lr-scale", a.teacher_proj_lr_scale,
                  "LR multiplier for the teacher-side projectors");
  cmd->add_flag("--normalize-grads", a.normalize_grads,
                "L2-normalize per-sample gradients before averaging");
  cmd->set_config("--config", "", "Plain-text key=value config file");
}

DistillConfig build_config(const DistillArgs& a, const TeacherNet* teacher) {
  DistillConfig cfg;
  cfg.mode = mode_from_name(a.mode);
  cfg.alpha1 = a.alpha1;
  cfg.alpha2 = a.alpha2;
  cfg.d = a.d;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch;
  cfg.eta_s = StepLrSchedule{a.lr_s, a.lr_step_s, a.lr_gamma_s};
  cfg.eta_r = StepLrSchedule{a.lr_r, a.lr_step_r, a.lr_gamma_r};
  cfg.highpass.cutoff_fraction = a.cutoff;
  cfg.seed = a.seed;
  cfg.normalize_grads = a.normalize_grads;
  cfg.teacher_proj_lr_scale = a.teacher_proj_lr_scale;
  cfg.student.stage_channels = parse_stage_list(a.student_stages);
  cfg.student.proj_channels =
      a.proj_channels != 0 ? a.proj_channels
      : teacher != nullptr ? teacher->config.distill_channels()
                           : 0;
  return cfg;
}

void write_manifest(const std::string& out_dir, const CLI::App* cmd,
                    const DistillConfig& cfg) {
  nlohmann::json m;
  m["config_file"] = cmd->get_config_ptr() != nullptr
                         ? cmd->get_config_ptr()->as<std::string>()
                         : "";
  m["output_dir"] = out_dir;
  m["config"] = nlohmann::json::parse(cfg.to_json());
  std::ostringstream hash;
  hash << std::hex << cfg.config_hash();
  m["config_hash"] = hash.str();
  std::ofstream out(fs::path(out_dir) / "manifest.json");
  out << m.dump(2) << '\n';
}

int cmd_gen_data(const GenSpec& spec, const std::string& out_dir) {
  spec.validate();
  LabeledDataset data = generate(spec);
  write_dataset_dir(data, out_dir);
  std::cout << "wrote " << data.size() << " images to " << out_dir << "\n";
  return 0;
}

struct TeacherArgs {
  std::string data_dir;
  std::string out_path = "teacher.ckpt";
  std::string metrics_path;
  std::string stages = "16,32,64";
  std::size_t image_size = 32;
  std::size_t rfam = 3;
  std::size_t proj_channels = 0;
  int epochs = 10;
  std::size_t batch = 32;
  double lr = 1e-3;
  int lr_step = 5;
  double lr_gamma = 0.1;
  double cutoff = 1.0 / 3.0;
  std::uint64_t seed = 0;
};

int cmd_train_teacher(const TeacherArgs& a) {
  LabeledDataset data = load_data(a.data_dir, a.image_size, a.cutoff);
  TeacherConfig tcfg;
  tcfg.in_channels = data.images.dim(1);
  tcfg.stage_channels = parse_stage_list(a.stages);
  tcfg.rfam_blocks = a.rfam;
  tcfg.proj_channels = a.proj_channels;
  tcfg.seed = a.seed;
  TeacherNet teacher = make_teacher(tcfg);
  TeacherTrainConfig train_cfg;
  train_cfg.epochs = a.epochs;
  train_cfg.batch_size = a.batch;
  train_cfg.lr_schedule = StepLrSchedule{a.lr, a.lr_step, a.lr_gamma};
  train_cfg.seed = a.seed;
  TeacherTrainReport report = train_teacher(teacher, data, train_cfg);
  save_teacher(teacher, a.out_path);
  const std::string metrics =
      a.metrics_path.empty() ? a.out_path + ".metrics.csv" : a.metrics_path;
  std::ofstream csv(metrics);
  csv << "epoch,train_loss,train_acc,val_acc\n";
  for (std::size_t e = 0; e < report.train_loss.size(); ++e) {
    csv << e << ',' << report.train_loss[e] << ',' << report.train_acc[e]
        << ',' << report.val_acc[e] << '\n';
  }
  std::cout << "teacher saved to " << a.out_path;
  if (!report.val_acc.empty())
    std::cout << " (final val acc " << report.val_acc.back() << ")";
  std::cout << "\n";
  return 0;
}

int cmd_distill(const DistillArgs& a, const CLI::App* cmd) {
  LabeledDataset data = load_data(a.data_dir, a.image_size, a.cutoff);
  DistillMode mode = mode_from_name(a.mode);
  TeacherNet teacher;
  const bool needs_teacher = mode != DistillMode::kVanilla;
  if (needs_teacher) {
    if (a.teacher_path.empty())
      throw ConfigError("--teacher is required for mode " + a.mode);
    teacher = load_teacher(a.teacher_path);
  }
  DistillConfig cfg = build_config(a, needs_teacher ? &teacher : nullptr);
  fs::create_directories(a.out_dir);
  write_manifest(a.out_dir, cmd, cfg);
  ExperimentResult r = run_distillation(cfg, needs_teacher ? &teacher : nullptr,
                                        data, a.out_dir);
  std::cout << mode_name(cfg.mode) << " seed " << cfg.seed << ": test acc "
            << r.test_acc << ", auc " << r.test_auc << ", eer " << r.test_eer
            << " (best epoch " << r.best_epoch << ")\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data_dir;
  std::string split = "test";
  std::string out_path;
  std::size_t image_size = 32;
  std::size_t batch = 32;
  double cutoff = 1.0 / 3.0;
};

int cmd_eval(const EvalArgs& a) {
  LabeledDataset data = load_data(a.data_dir, a.image_size, a.cutoff);
  StudentNet s = load_student(a.checkpoint);
  ScoredPredictions p =
      evaluate_student(s, data, split_from_name(a.split), a.batch);
  nlohmann::json out;
  out["checkpoint"] = a.checkpoint;
  out["split"] = a.split;
  out["n"] = p.scores.size();
  out["acc"] = accuracy(p);
  out["auc"] = roc_auc(p);
  out["eer"] = eer(p);
  const std::string text = out.dump(2);
  if (!a.out_path.empty()) {
    std::ofstream f(a.out_path);
    f << text << '\n';
  }
  std::cout << text << "\n";
  return 0;
}

// Runs one sweep point into out_dir/<tag> and returns the summary row.
struct SweepRow {
  std::string tag;
  double value = 0.0;
  ExperimentResult result;
};

template <typename ConfigureFn>
std::vector<SweepRow> run_sweep(const DistillArgs& base,
                                const std::vector<double>& values,
                                const std::string& prefix,
                                ConfigureFn configure) {
  LabeledDataset data = load_data(base.data_dir, base.image_size, base.cutoff);
  if (base.teacher_path.empty())
    throw ConfigError("--teacher is required for sweeps");
  std::vector<SweepRow> rows(values.size());
  std::mutex failure_mutex;
  std::exception_ptr failure;
  const std::size_t workers = std::min(thread_budget(), values.size());
  std::size_t next = 0;
  std::mutex next_mutex;
  auto worker = [&]() {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard<std::mutex> lock(next_mutex);
        if (next >= values.size() || failure) return;
        i = next++;
      }
      try {
        TeacherNet teacher = load_teacher(base.teacher_path);
        DistillConfig cfg = build_config(base, &teacher);
        configure(cfg, values[i]);
        std::ostringstream tag;
        tag << prefix << '_' << values[i];
        const fs::path dir = fs::path(base.out_dir) / tag.str();
        fs::create_directories(dir);
        rows[i].tag = tag.str();
        rows[i].value = values[i];
        rows[i].result = run_distillation(cfg, &teacher, data, dir.string());
        // Rotation manifold invariants must hold at the end of every point.
        rows[i].result.student.rotation.check_invariants();
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w + 1 < workers; ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return rows;
}

void write_sweep_csv(const std::string& path, const std::string& key,
                     const std::vector<SweepRow>& rows) {
  std::ofstream csv(path);
  csv << key
      << ",test_acc,test_auc,test_eer,best_val_acc,best_epoch,"
         "final_cos_raw,final_cos_rotated\n";
  for (const SweepRow& r : rows) {
    const EpochRow* last =
        r.result.epochs.empty() ? nullptr : &r.result.epochs.back();
    csv << r.value << ',' << r.result.test_acc << ',' << r.result.test_auc
        << ',' << r.result.test_eer << ',' << r.result.best_val_acc << ','
        << r.result.best_epoch << ','
        << (last != nullptr ? last->cos_raw : 0.0) << ','
        << (last != nullptr ? last->cos_rotated : 0.0) << '\n';
  }
}

int run_app(int argc, char** argv) {
  CLI::App app{"Two-in-one knowledge distillation lab"};
  app.require_subcommand(1);

  // gen-data
  GenSpec gen;
  std::string gen_out = "data";
  CLI::App* c_gen =
      app.add_subcommand("gen-data", "Generate a synthetic forgery dataset");
  c_gen->add_option("--n", gen.n_samples, "Number of images");
  c_gen->add_option("--size", gen.image_size, "Image side length");
  c_gen->add_option("--channels", gen.channels, "Image channels");
  c_gen->add_option("--artifact-strength", gen.artifact_strength,
                    "Forgery cue strength in [0,1]");
  c_gen->add_option("--strength-jitter", gen.strength_jitter,
                    "Per-image strength variation in [0,1]");
  c_gen->add_option("--seed", gen.seed, "Generator seed");
  c_gen->add_option("--cutoff", gen.highpass.cutoff_fraction,
                    "High-pass cutoff fraction");
  c_gen->add_option("--out", gen_out, "Output directory");
  c_gen->set_config("--config", "", "Plain-text key=value config file");

  // train-teacher
  TeacherArgs teach;
  CLI::App* c_teach =
      app.add_subcommand("train-teacher", "Train the dual-branch teacher");
  c_teach->add_option("--data", teach.data_dir, "Dataset directory")
      ->required();
  c_teach->add_option("--out", teach.out_path, "Checkpoint output path");
  c_teach->add_option("--metrics", teach.metrics_path, "Metrics CSV path");
  c_teach->add_option("--size", teach.image_size, "Image side length");
  c_teach->add_option("--stages", teach.stages,
                      "Backbone widths, comma-separated");
  c_teach->add_option("--rfam", teach.rfam,
                      "Cross-attention block count (0 disables)");
  c_teach->add_option("--proj-channels", teach.proj_channels,
                      "Distillation feature width (0 = last stage)");
  c_teach->add_option("--epochs", teach.epochs, "Training epochs");
  c_teach->add_option("--batch", teach.batch, "Batch size");
  c_teach->add_option("--lr", teach.lr, "Base learning rate");
  c_teach->add_option("--lr-step", teach.lr_step, "LR decay interval");
  c_teach->add_option("--lr-gamma", teach.lr_gamma, "LR decay factor");
  c_teach->add_option("--cutoff", teach.cutoff, "High-pass cutoff fraction");
  c_teach->add_option("--seed", teach.seed, "Training seed");
  c_teach->set_config("--config", "", "Plain-text key=value config file");

  // distill
  DistillArgs dist;
  CLI::App* c_dist =
      app.add_subcommand("distill", "Distill the teacher into a student");
  add_distill_options(c_dist, dist, true, true, true);

  // eval
  EvalArgs ev;
  CLI::App* c_eval =
      app.add_subcommand("eval", "Evaluate a student checkpoint");
  c_eval->add_option("--checkpoint", ev.checkpoint, "Student checkpoint")
      ->required();
  c_eval->add_option("--data", ev.data_dir, "Dataset directory")->required();
  c_eval->add_option("--split", ev.split, "train | val | test");
  c_eval->add_option("--out", ev.out_path, "Metrics JSON output path");
  c_eval->add_option("--size", ev.image_size, "Image side length");
  c_eval->add_option("--batch", ev.batch, "Batch size");
  c_eval->add_option("--cutoff", ev.cutoff, "High-pass cutoff fraction");
  c_eval->set_config("--config", "", "Plain-text key=value config file");

  // sweep-alpha
  DistillArgs sa;
  std::vector<double> alphas{1, 10, 100, 200, 1000};
  CLI::App* c_sa = app.add_subcommand(
      "sweep-alpha", "Loss-weight sensitivity sweep (ties alpha1 = alpha2)");
  add_distill_options(c_sa, sa, false, false, true);
  c_sa->add_option("--alphas", alphas, "Alpha values to sweep")
      ->delimiter(',');

  // sweep-d
  DistillArgs sd;
  std::vector<std::size_t> ds{8, 16, 32, 64, 128};
  CLI::App* c_sd = app.add_subcommand(
      "sweep-d", "Rotation-size sensitivity sweep");
  add_distill_options(c_sd, sd, false, true, false);
  c_sd->add_option("--ds", ds, "Rotation sizes to sweep")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  if (c_gen->parsed()) return cmd_gen_data(gen, gen_out);
  if (c_teach->parsed()) return cmd_train_teacher(teach);
  if (c_dist->parsed()) return cmd_distill(dist, c_dist);
  if (c_eval->parsed()) return cmd_eval(ev);
  if (c_sa->parsed()) {
    sa.mode = "tokd";
    std::vector<SweepRow> rows =
        run_sweep(sa, alphas, "alpha", [](DistillConfig& cfg, double a) {
          cfg.alpha1 = a;
          cfg.alpha2 = a;
        });
    fs::create_directories(sa.out_dir);
    write_sweep_csv((fs::path(sa.out_dir) / "sweep_alpha.csv").string(),
                    "alpha", rows);
    std::cout << "sweep-alpha: " << rows.size() << " points -> " << sa.out_dir
              << "/sweep_alpha.csv\n";
    return 0;
  }
  if (c_sd->parsed()) {
    sd.mode = "tokd";
    std::vector<double> values(ds.begin(), ds.end());
    std::vector<SweepRow> rows =
        run_sweep(sd, values, "d", [](DistillConfig& cfg, double d) {
          cfg.d = static_cast<std::size_t>(d);
        });
    fs::create_directories(sd.out_dir);
    write_sweep_csv((fs::path(sd.out_dir) / "sweep_d.csv").string(), "d",
                    rows);
    std::cout << "sweep-d: " << rows.size() << " points -> " << sd.out_dir
              << "/sweep_d.csv\n";
    return 0;
  }
  return kUsageError;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_app(argc, argv);
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumericError;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::logic_error& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  }
}
