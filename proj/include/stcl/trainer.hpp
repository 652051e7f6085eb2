#pragma once

// Combined objective, warmup schedule, batch construction and training loop.

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "stcl/eval.hpp"
#include "stcl/segnet.hpp"
#include "stcl/synthvid.hpp"

namespace stcl {

struct TrainConfig {
  std::uint64_t seed = 1;
  std::uint64_t data_seed = 0;  // 0: use `seed`

  // data
  std::size_t train_clips = 64;
  std::size_t eval_clips = 16;
  std::size_t clip_length = 6;
  std::size_t width = 64;
  std::size_t height = 64;
  std::size_t n_objects = 2;
  int motion_range = 3;
  std::string texture = "noise";
  std::size_t object_min_size = 20;
  std::size_t object_max_size = 30;
  double photometric = 0.0;
  double pixel_noise = 0.0;
  std::size_t distractors = 4;
  int jitter = 2;

  // network
  std::size_t max_objects = 8;
  std::size_t key_channels = 16;
  std::size_t value_channels = 32;
  std::size_t hidden1 = 8;
  std::size_t hidden2 = 16;
  std::size_t decoder_channels = 16;
  std::string measure = "neg_l2";
  std::size_t memory_capacity = 8;
  std::size_t memory_stride = 1;

  // objective
  double alpha_max = 0.2;
  long warmup_steps = -1;  // -1: 10% of total_steps
  double beta = 0.5;
  bool use_pcl = true;
  bool use_ocl = true;
  std::string pcl_negatives = "both";  // both | inter | intra
  std::string ocl_sources = "both";    // both | annotated | discovered
  std::string loss_form = "mean";      // mean | verbatim
  double temperature = 1.0;
  std::size_t anchor_rows = 8;
  std::size_t anchor_cols = 8;
  std::size_t anchor_cell = 0;  // > 0 switches to square cells of this side
  double p_view = 0.5;
  double crop_scale_min = 0.6;
  double crop_scale_max = 1.0;
  double flip_probability = 0.5;
  std::size_t q_size = 3;
  std::size_t cluster_cell = 32;
  std::size_t roi_pool = 3;
  std::size_t max_negatives = 50000;

  // optimisation
  std::size_t batch_clips = 4;
  std::size_t frames_per_clip = 3;
  double learning_rate = 0.05;
  double momentum = 0.9;
  double grad_clip = 1.0;  // global L2 norm; 0 disables
  std::size_t total_steps = 200;

  // bookkeeping
  std::size_t checkpoint_every = 0;
  std::size_t eval_every = 0;
  std::size_t corr_tolerance = 1;

  // ablation
  std::string ablation = "component";  // component | negatives | sources | all
  std::size_t ablation_seeds = 5;
};

// `key = value` lines with '#' comments; unknown keys and bad values raise ConfigError.
TrainConfig parse_config(std::istream& in, const std::string& origin = "config");
TrainConfig load_config(const std::string& path);
void apply_override(TrainConfig& config, const std::string& assignment);
void set_config_value(TrainConfig& config, const std::string& key, const std::string& value);
std::string config_to_string(const TrainConfig& config);
std::uint64_t config_hash(const TrainConfig& config);
void validate_config(const TrainConfig& config);

ClipSpec clip_spec(const TrainConfig& config);
NetConfig net_config(const TrainConfig& config);
InferOptions infer_options(const TrainConfig& config);

// Train seeds come from [base, base + 50000) and eval seeds from
// [base + 50000, base + 100000) with base = 100000 · data seed.
std::uint64_t clip_seed(const TrainConfig& config, bool eval_split, std::size_t index);

struct Datasets {
  std::vector<VideoClip> train;
  std::vector<VideoClip> eval;
};
// Clips with proposals attached; generation fans out over STCL_THREADS workers.
Datasets make_datasets(const TrainConfig& config);
std::size_t worker_count();

std::size_t effective_warmup(const TrainConfig& config);
double alpha_schedule(std::size_t step, const TrainConfig& config);
// l_seg + alpha (l_pcl + beta l_ocl); returns l_seg itself when alpha is 0.
Tensor total_loss(Tape& tape, const Tensor& l_seg, const Tensor& l_pcl, const Tensor& l_ocl, double alpha, double beta);

struct ClipSample {
  std::size_t clip = 0;
  std::size_t t = 0;    // consecutive pair (t, t+1)
  std::size_t tau = 0;  // anchor frame, not t or t+1
  std::vector<std::size_t> frames;  // sorted mini-sequence
  bool cross_view = false;
  std::uint64_t view_seed = 0;
  std::uint64_t anchor_seed = 0;
  std::uint64_t query_seed = 0;
};

struct Batch {
  std::size_t step = 0;
  std::vector<ClipSample> clips;
};

Batch build_batch(std::size_t dataset_size, std::size_t clip_length, const TrainConfig& config, std::size_t step);

struct TrainState {
  Network net;
  std::vector<Tensor> momentum;  // parallel to net.params
  std::size_t step = 0;
  std::uint64_t seed = 0;
};

TrainState init_state(const TrainConfig& config);
std::vector<NamedTensor> state_tensors(const TrainState& state);
void save_state(const std::string& path, const TrainState& state);
TrainState load_state(const std::string& path, const TrainConfig& config);

struct LossReport {
  std::size_t step = 0;
  double alpha = 0.0;
  double l_seg = 0.0;
  double l_pcl = 0.0;
  double l_ocl = 0.0;
  double l_total = 0.0;
  std::size_t ocl_pairs = 0;
  bool fallback_negatives = false;
};

struct Objective {
  Tensor l_seg;
  Tensor l_pcl;
  Tensor l_ocl;
  Tensor total;
  double alpha = 0.0;
  std::size_t ocl_pairs = 0;
  bool fallback_negatives = false;
};

// Forward pass of the whole objective for one batch; alpha follows batch.step.
Objective compute_objective(Tape& tape, const Network& net, const std::vector<VideoClip>& data, const Batch& batch,
                            const TrainConfig& config);

LossReport train_step(TrainState& state, const std::vector<VideoClip>& data, const Batch& batch,
                      const TrainConfig& config);

struct TrainResult {
  TrainState state;
  std::vector<LossReport> losses;
  std::vector<std::pair<std::size_t, EvalReport>> evals;
};

using ProgressFn = std::function<void(const LossReport&)>;

// Runs from `resume` (or a fresh state) up to total_steps. When `out_dir` is
// non-empty, writes metrics.csv, periodic checkpoints and final.ckpt there.
// The held-out set is scored every eval_every steps and after the last step.
TrainResult run_training(const TrainConfig& config, const std::string& out_dir = "", const Datasets* data = nullptr,
                         const TrainState* resume = nullptr, const ProgressFn& progress = {});

void write_metrics_header(std::ostream& out);
void write_metrics_row(std::ostream& out, const LossReport& loss, const EvalReport* eval);

struct Variant {
  std::string name;
  std::vector<std::pair<std::string, std::string>> overrides;
};

std::vector<Variant> ablation_variants(const std::string& matrix);

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  double first_l_seg = 0.0;
  EvalReport report;
};

// Every variant runs with seeds seed, seed+1, ...; a seed's datasets are shared by all variants.
std::vector<AblationRow> run_ablation(const TrainConfig& config, const std::vector<Variant>& variants,
                                      const std::string& out_dir = "");
void write_ablation_summary(std::ostream& out, const std::vector<AblationRow>& rows);

// Baseline builds compile the correspondence objectives out.
bool correspondence_compiled_in();

void log_warning(const std::string& message);

}  // namespace stcl
