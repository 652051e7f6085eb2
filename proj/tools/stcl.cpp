// stcl: data generation, training, evaluation and verification front end.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <string>
#include <vector>

#include "stcl/errors.hpp"
#include "stcl/eval.hpp"
#include "stcl/gradsuite.hpp"
#include "stcl/trainer.hpp"

namespace fs = std::filesystem;

namespace {

enum ExitCode { ok = 0, failure = 1, usage = 2, config_error = 3, numeric_error = 4, io_error = 5 };

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
};

stcl::TrainConfig resolve_config(const Common& common) {
  stcl::TrainConfig config = common.config_path.empty() ? stcl::TrainConfig{} : stcl::load_config(common.config_path);
  for (const auto& o : common.overrides) stcl::apply_override(config, o);
  stcl::validate_config(config);
  return config;
}

void ensure_directory(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw stcl::IoError(dir, "cannot create output directory");
}

void write_split(const std::string& dir, const std::string& split, const stcl::TrainConfig& config,
                 const std::vector<stcl::VideoClip>& clips) {
  ensure_directory(dir);
  std::vector<stcl::ManifestEntry> entries;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "clip_%04zu", i);
    stcl::ManifestEntry e;
    e.name = name;
    e.seed = clips[i].seed;
    e.files = stcl::write_clip_files(dir, name, clips[i]);
    stcl::write_proposals((fs::path(dir) / (e.name + ".proposals")).string(), clips[i].proposals);
    e.files.push_back(e.name + ".proposals");
    entries.push_back(std::move(e));
  }
  stcl::write_manifest((fs::path(dir) / "manifest.txt").string(), split, stcl::clip_spec(config), entries);
}

int cmd_gen_data(const Common& common) {
  const auto config = resolve_config(common);
  const auto data = stcl::make_datasets(config);
  write_split((fs::path(common.out) / "train").string(), "train", config, data.train);
  write_split((fs::path(common.out) / "eval").string(), "eval", config, data.eval);
  std::cout << "wrote " << data.train.size() << " train and " << data.eval.size() << " eval clips to " << common.out
            << '\n';
  return ok;
}

void print_report(const stcl::EvalReport& r) {
  std::cout << std::fixed << std::setprecision(4) << "J " << r.J_mean << "  F " << r.F_mean << "  JF " << r.JF_mean
            << "  corr_acc " << r.corr_acc << "  clips " << r.clip_ids.size() << '\n';
}

int cmd_train(const Common& common, const std::string& resume_path, std::size_t log_every) {
  const auto config = resolve_config(common);
  ensure_directory(common.out);
  {
    const std::string path = (fs::path(common.out) / "config.txt").string();
    std::ofstream cfg(path);
    cfg << stcl::config_to_string(config);
    if (!cfg) throw stcl::IoError(path, "write failed");
  }
  stcl::TrainState resume;
  const stcl::TrainState* resume_ptr = nullptr;
  if (!resume_path.empty()) {
    resume = stcl::load_state(resume_path, config);
    resume_ptr = &resume;
    std::cout << "resuming at step " << resume.step << '\n';
  }
  const auto start = std::chrono::steady_clock::now();
  auto progress = [&](const stcl::LossReport& r) {
    if (log_every == 0 || (r.step + 1) % log_every != 0) return;
    std::cout << "step " << r.step + 1 << "  alpha " << r.alpha << "  seg " << r.l_seg << "  pcl " << r.l_pcl
              << "  ocl " << r.l_ocl << "  total " << r.l_total << '\n';
  };
  const auto result = stcl::run_training(config, common.out, nullptr, resume_ptr, progress);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << "trained to step " << result.state.step << " in " << seconds << " s; parameters "
            << result.state.net.parameter_count() << '\n';
  if (!result.evals.empty()) print_report(result.evals.back().second);
  return ok;
}

int cmd_eval(const Common& common, const std::string& checkpoint, bool dump_masks) {
  const auto config = resolve_config(common);
  const auto state = stcl::load_state(checkpoint, config);
  const auto data = stcl::make_datasets(config);
  std::vector<std::vector<stcl::Mask>> predictions;
  const auto report = stcl::evaluate_clips(state.net, data.eval, {stcl::infer_options(config), config.corr_tolerance},
                                           stcl::config_hash(config), dump_masks ? &predictions : nullptr);
  print_report(report);
  if (!common.out.empty()) {
    ensure_directory(common.out);
    const std::string path = (fs::path(common.out) / "eval.csv").string();
    std::ofstream csv(path);
    stcl::write_eval_csv(csv, report);
    if (!csv) throw stcl::IoError(path, "write failed");
    for (std::size_t c = 0; c < predictions.size(); ++c)
      for (std::size_t t = 0; t < predictions[c].size(); ++t) {
        char name[48];
        std::snprintf(name, sizeof name, "pred_%04zu_f%02zu.pgm", c, t + 1);
        stcl::write_pgm((fs::path(common.out) / name).string(), predictions[c][t]);
      }
  }
  return ok;
}

int cmd_gradcheck(std::size_t seeds, std::uint64_t first_seed) {
  const auto start = std::chrono::steady_clock::now();
  const auto entries = stcl::run_gradient_suite(seeds, first_seed);
  bool all = true;
  for (const auto& e : entries) {
    std::cout << std::left << std::setw(8) << e.name << " trials " << e.trials << "  failures " << e.failures
              << "  max_rel_err " << std::scientific << std::setprecision(3) << e.max_rel_error << std::defaultfloat
              << "  " << (e.passed() ? "PASS" : "FAIL") << '\n';
    all = all && e.passed();
  }
  std::cout << "elapsed " << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() << " s\n";
  return all ? ok : numeric_error;
}

int cmd_ablate(const Common& common) {
  const auto config = resolve_config(common);
  ensure_directory(common.out);
  const auto variants = stcl::ablation_variants(config.ablation);
  const auto rows = stcl::run_ablation(config, variants, common.out);
  const std::string path = (fs::path(common.out) / "summary.csv").string();
  std::ofstream summary(path);
  stcl::write_ablation_summary(summary, rows);
  if (!summary) throw stcl::IoError(path, "write failed");
  stcl::write_ablation_summary(std::cout, rows);
  return ok;
}

int cmd_infer(const Common& common, const std::string& checkpoint, std::size_t clip_index, bool static_clip) {
  auto config = resolve_config(common);
  const auto state = stcl::load_state(checkpoint, config);
  stcl::ClipSpec spec = stcl::clip_spec(config);
  if (static_clip) spec.motion_range = 0;
  const std::uint64_t seed = stcl::clip_seed(config, true, clip_index);
  const stcl::VideoClip clip = stcl::generate_clip(spec, seed);
  const auto masks = stcl::infer_sequence(state.net, clip.frames, clip.masks.front(), stcl::infer_options(config));
  ensure_directory(common.out);
  for (std::size_t t = 0; t < masks.size(); ++t) {
    char name[32];
    std::snprintf(name, sizeof name, "pred_f%02zu.pgm", t + 1);
    stcl::write_pgm((fs::path(common.out) / name).string(), masks[t]);
  }
  const auto report = stcl::evaluate_clips(state.net, {clip}, {stcl::infer_options(config), config.corr_tolerance},
                                           stcl::config_hash(config));
  const std::string path = (fs::path(common.out) / "eval.csv").string();
  std::ofstream csv(path);
  stcl::write_eval_csv(csv, report);
  if (!csv) throw stcl::IoError(path, "write failed");
  std::cout << "wrote " << masks.size() << " masks for clip seed " << seed << '\n';
  print_report(report);
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"space-time correspondence training lab"};
  app.require_subcommand(1);
  Common common;
  std::string checkpoint, resume;
  std::size_t log_every = 50, seeds = 100, clip_index = 0;
  std::uint64_t first_seed = 1;
  bool dump_masks = false, static_clip = false;

  auto add_common = [&](CLI::App* cmd, bool config_required, const std::string& default_out) {
    auto* opt = cmd->add_option("--config", common.config_path, "key = value config file");
    if (config_required) opt->required();
    cmd->add_option("--set", common.overrides, "override, key=value (repeatable)");
    cmd->add_option("--out", common.out, "output directory")->default_val(default_out);
  };

  auto* gen = app.add_subcommand("gen-data", "generate train and eval clips as PPM/PGM");
  add_common(gen, false, "data");
  auto* train = app.add_subcommand("train", "train and write checkpoints plus metrics.csv");
  add_common(train, true, "run");
  train->add_option("--resume", resume, "checkpoint to continue from");
  train->add_option("--log-every", log_every, "progress line interval (0 = quiet)");
  auto* eval = app.add_subcommand("eval", "score a checkpoint on the held-out clips");
  add_common(eval, true, "");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_flag("--dump-masks", dump_masks, "write predicted masks as PGM");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every loss");
  grad->add_option("--seeds", seeds, "trials per loss");
  grad->add_option("--first-seed", first_seed, "first trial seed");
  auto* ablate = app.add_subcommand("ablate", "run the variant matrix named by the `ablation` key");
  add_common(ablate, true, "ablation");
  auto* infer = app.add_subcommand("infer", "propagate the first mask through one held-out clip");
  add_common(infer, true, "infer");
  infer->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  infer->add_option("--clip", clip_index, "held-out clip index");
  infer->add_flag("--static", static_clip, "render the clip without motion");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return usage;
  }

  try {
    if (*gen) return cmd_gen_data(common);
    if (*train) return cmd_train(common, resume, log_every);
    if (*eval) return cmd_eval(common, checkpoint, dump_masks);
    if (*grad) return cmd_gradcheck(seeds, first_seed);
    if (*ablate) return cmd_ablate(common);
    if (*infer) return cmd_infer(common, checkpoint, clip_index, static_clip);
  } catch (const stcl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return config_error;
  } catch (const stcl::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return numeric_error;
  } catch (const stcl::IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return io_error;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return failure;
  }
  return usage;
}
