#include "stcl/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "stcl/errors.hpp"
#include "stcl/objectcorr.hpp"
#include "stcl/pixelcorr.hpp"

namespace stcl {

void log_warning(const std::string& message) { std::cerr << "warning: " << message << '\n'; }

bool correspondence_compiled_in() {
#ifdef STCL_BASELINE_ONLY
  return false;
#else
  return true;
#endif
}

// ---- configuration -----------------------------------------------------------

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* first = text.data();
  const char* last = first + text.size();
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) throw ConfigError("bad value '" + text + "' for " + key);
  return value;
}

bool parse_flag(const std::string& key, const std::string& text) {
  if (text == "1" || text == "true" || text == "on" || text == "yes") return true;
  if (text == "0" || text == "false" || text == "off" || text == "no") return false;
  throw ConfigError("bad boolean '" + text + "' for " + key);
}

std::string format_double(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

struct Field {
  const char* name;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename T>
Field number_field(const char* name, T TrainConfig::*member) {
  return Field{name,
               [name, member](TrainConfig& c, const std::string& v) { c.*member = parse_number<T>(name, v); },
               [member](const TrainConfig& c) {
                 if constexpr (std::is_floating_point_v<T>) {
                   return format_double(c.*member);
                 } else {
                   return std::to_string(c.*member);
                 }
               }};
}

Field flag_field(const char* name, bool TrainConfig::*member) {
  return Field{name, [name, member](TrainConfig& c, const std::string& v) { c.*member = parse_flag(name, v); },
               [member](const TrainConfig& c) { return std::string(c.*member ? "1" : "0"); }};
}

Field text_field(const char* name, std::string TrainConfig::*member) {
  return Field{name, [member](TrainConfig& c, const std::string& v) { c.*member = v; },
               [member](const TrainConfig& c) { return c.*member; }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      number_field("seed", &TrainConfig::seed),
      number_field("data_seed", &TrainConfig::data_seed),
      number_field("train_clips", &TrainConfig::train_clips),
      number_field("eval_clips", &TrainConfig::eval_clips),
      number_field("clip_length", &TrainConfig::clip_length),
      number_field("width", &TrainConfig::width),
      number_field("height", &TrainConfig::height),
      number_field("n_objects", &TrainConfig::n_objects),
      number_field("motion_range", &TrainConfig::motion_range),
      text_field("texture", &TrainConfig::texture),
      number_field("object_min_size", &TrainConfig::object_min_size),
      number_field("object_max_size", &TrainConfig::object_max_size),
      number_field("photometric", &TrainConfig::photometric),
      number_field("pixel_noise", &TrainConfig::pixel_noise),
      number_field("distractors", &TrainConfig::distractors),
      number_field("jitter", &TrainConfig::jitter),
      number_field("max_objects", &TrainConfig::max_objects),
      number_field("key_channels", &TrainConfig::key_channels),
      number_field("value_channels", &TrainConfig::value_channels),
      number_field("hidden1", &TrainConfig::hidden1),
      number_field("hidden2", &TrainConfig::hidden2),
      number_field("decoder_channels", &TrainConfig::decoder_channels),
      text_field("measure", &TrainConfig::measure),
      number_field("memory_capacity", &TrainConfig::memory_capacity),
      number_field("memory_stride", &TrainConfig::memory_stride),
      number_field("alpha_max", &TrainConfig::alpha_max),
      number_field("warmup_steps", &TrainConfig::warmup_steps),
      number_field("beta", &TrainConfig::beta),
      flag_field("use_pcl", &TrainConfig::use_pcl),
      flag_field("use_ocl", &TrainConfig::use_ocl),
      text_field("pcl_negatives", &TrainConfig::pcl_negatives),
      text_field("ocl_sources", &TrainConfig::ocl_sources),
      text_field("loss_form", &TrainConfig::loss_form),
      number_field("temperature", &TrainConfig::temperature),
      number_field("anchor_rows", &TrainConfig::anchor_rows),
      number_field("anchor_cols", &TrainConfig::anchor_cols),
      number_field("anchor_cell", &TrainConfig::anchor_cell),
      number_field("p_view", &TrainConfig::p_view),
      number_field("crop_scale_min", &TrainConfig::crop_scale_min),
      number_field("crop_scale_max", &TrainConfig::crop_scale_max),
      number_field("flip_probability", &TrainConfig::flip_probability),
      number_field("q_size", &TrainConfig::q_size),
      number_field("cluster_cell", &TrainConfig::cluster_cell),
      number_field("roi_pool", &TrainConfig::roi_pool),
      number_field("max_negatives", &TrainConfig::max_negatives),
      number_field("batch_clips", &TrainConfig::batch_clips),
      number_field("frames_per_clip", &TrainConfig::frames_per_clip),
      number_field("learning_rate", &TrainConfig::learning_rate),
      number_field("momentum", &TrainConfig::momentum),
      number_field("grad_clip", &TrainConfig::grad_clip),
      number_field("total_steps", &TrainConfig::total_steps),
      number_field("checkpoint_every", &TrainConfig::checkpoint_every),
      number_field("eval_every", &TrainConfig::eval_every),
      number_field("corr_tolerance", &TrainConfig::corr_tolerance),
      text_field("ablation", &TrainConfig::ablation),
      number_field("ablation_seeds", &TrainConfig::ablation_seeds),
  };
  return table;
}

}  // namespace

void set_config_value(TrainConfig& config, const std::string& key, const std::string& value) {
  for (const auto& f : fields()) {
    if (key == f.name) {
      f.set(config, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

TrainConfig parse_config(std::istream& in, const std::string& origin) {
  TrainConfig config;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key = value");
    try {
      set_config_value(config, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return config;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open config");
  return parse_config(in, path);
}

void apply_override(TrainConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set_config_value(config, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::string config_to_string(const TrainConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.name) + " = " + f.get(config) + "\n";
  return out;
}

std::uint64_t config_hash(const TrainConfig& config) {
  const std::string text = config_to_string(config);
  return fnv1a64(text.data(), text.size());
}

void validate_config(const TrainConfig& c) {
  auto fail = [](const std::string& what) { throw ConfigError(what); };
  parse_similarity(c.measure);
  parse_texture_mode(c.texture);
  if (c.alpha_max < 0.0) fail("alpha_max must be non-negative");
  if (c.alpha_max > 0.2) log_warning("alpha_max above the 0.2 range");
  if (c.beta < 0.0) fail("beta must be non-negative");
  if (c.warmup_steps < -1) fail("warmup_steps must be >= 0 (or -1 for 10% of total_steps)");
  if (c.pcl_negatives != "both" && c.pcl_negatives != "inter" && c.pcl_negatives != "intra") {
    fail("pcl_negatives must be both, inter or intra");
  }
  if (c.ocl_sources != "both" && c.ocl_sources != "annotated" && c.ocl_sources != "discovered") {
    fail("ocl_sources must be both, annotated or discovered");
  }
  if (c.loss_form != "mean" && c.loss_form != "verbatim") fail("loss_form must be mean or verbatim");
  if (!(c.temperature > 0.0)) fail("temperature must be positive");
  if (c.frames_per_clip != 2 && c.frames_per_clip != 3) fail("frames_per_clip must be 2 or 3");
  if ((c.use_pcl || c.use_ocl) && c.frames_per_clip < 3) fail("correspondence losses need 3 frames per clip");
  if (c.clip_length < c.frames_per_clip) fail("clip_length is shorter than frames_per_clip");
  if (c.batch_clips == 0) fail("batch_clips must be at least 1");
  if (c.train_clips == 0 && c.total_steps > 0) fail("training needs at least one clip");
  if (c.train_clips >= 50000 || c.eval_clips >= 50000) fail("at most 49999 clips per split");
  if (c.memory_capacity == 0 || c.memory_stride == 0) fail("memory capacity and stride must be positive");
  if (c.n_objects > c.max_objects) fail("n_objects exceeds max_objects");
  if (c.p_view < 0.0 || c.p_view > 1.0) fail("p_view must be in [0, 1]");
  if (c.crop_scale_min <= 0.0 || c.crop_scale_min > c.crop_scale_max || c.crop_scale_max > 1.0) {
    fail("crop scale range must satisfy 0 < min <= max <= 1");
  }
  if (c.learning_rate <= 0.0) fail("learning_rate must be positive");
  if (c.momentum < 0.0 || c.momentum >= 1.0) fail("momentum must be in [0, 1)");
  if (c.roi_pool == 0 || c.cluster_cell == 0) fail("roi_pool and cluster_cell must be positive");
}

ClipSpec clip_spec(const TrainConfig& c) {
  ClipSpec s;
  s.frames = c.clip_length;
  s.width = c.width;
  s.height = c.height;
  s.n_objects = c.n_objects;
  s.motion_range = c.motion_range;
  s.texture_mode = parse_texture_mode(c.texture);
  s.max_objects = c.max_objects;
  s.min_size = c.object_min_size;
  s.max_size = c.object_max_size;
  s.photometric = c.photometric;
  s.pixel_noise = c.pixel_noise;
  return s;
}

NetConfig net_config(const TrainConfig& c) {
  NetConfig n;
  n.key_channels = c.key_channels;
  n.value_channels = c.value_channels;
  n.hidden1 = c.hidden1;
  n.hidden2 = c.hidden2;
  n.decoder_channels = c.decoder_channels;
  n.max_objects = c.max_objects;
  return n;
}

InferOptions infer_options(const TrainConfig& c) {
  return InferOptions{parse_similarity(c.measure), c.memory_capacity, c.memory_stride};
}

std::uint64_t clip_seed(const TrainConfig& config, bool eval_split, std::size_t index) {
  const std::uint64_t base = 100000ULL * (config.data_seed == 0 ? config.seed : config.data_seed);
  return base + (eval_split ? 50000ULL : 0ULL) + index;
}

std::size_t worker_count() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("STCL_THREADS")) {
    try {
      n = std::min(n, std::max<std::size_t>(1, std::stoul(env)));
    } catch (const std::exception&) {
      log_warning("ignoring malformed STCL_THREADS");
    }
  }
  return n;
}

namespace {

// Runs fn(i) for i in [0, n) on up to worker_count() threads; results are
// written by index, so the merge order is fixed.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

std::vector<VideoClip> make_split(const TrainConfig& config, bool eval_split, std::size_t count) {
  std::vector<VideoClip> clips(count);
  const ClipSpec spec = clip_spec(config);
  ProposalConfig pc;
  pc.distractors_per_frame = config.distractors;
  pc.jitter = config.jitter;
  pc.rules.cluster_cell = config.cluster_cell;
  parallel_for(count, [&](std::size_t i) {
    const std::uint64_t seed = clip_seed(config, eval_split, i);
    clips[i] = generate_clip(spec, seed);
    clips[i].proposals = generate_proposals(clips[i], pc, seed);
  });
  return clips;
}

}  // namespace

Datasets make_datasets(const TrainConfig& config) {
  Datasets d;
  d.train = make_split(config, false, config.train_clips);
  d.eval = make_split(config, true, config.eval_clips);
  return d;
}

// ---- objective ---------------------------------------------------------------

std::size_t effective_warmup(const TrainConfig& config) {
  if (config.warmup_steps >= 0) return static_cast<std::size_t>(config.warmup_steps);
  return config.total_steps / 10;
}

double alpha_schedule(std::size_t step, const TrainConfig& config) {
  const std::size_t warmup = effective_warmup(config);
  if (warmup == 0 || step >= warmup) return config.alpha_max;
  return config.alpha_max * static_cast<double>(step) / static_cast<double>(warmup);
}

Tensor total_loss(Tape& tape, const Tensor& l_seg, const Tensor& l_pcl, const Tensor& l_ocl, double alpha, double beta) {
  for (const Tensor* t : {&l_seg, &l_pcl, &l_ocl}) {
    if (!std::isfinite(t->item())) throw NumericError("non-finite loss component");
  }
  if (alpha == 0.0) return l_seg;
  Tensor aux = add(tape, l_pcl, scale(tape, l_ocl, beta));
  return add(tape, l_seg, scale(tape, aux, alpha));
}

// ---- batches -----------------------------------------------------------------

Batch build_batch(std::size_t dataset_size, std::size_t clip_length, const TrainConfig& config, std::size_t step) {
  if (dataset_size == 0) throw StateError("batch from an empty dataset");
  if (config.frames_per_clip >= 3 && clip_length < 3) throw ConfigError("clips shorter than 3 frames cannot supply an anchor");
  auto rng = make_rng(config.seed, 0xba7c, step);
  Batch batch;
  batch.step = step;
  std::vector<std::size_t> order(dataset_size);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t k = 0; k < config.batch_clips; ++k) {
    std::size_t pick;
    if (config.batch_clips <= dataset_size) {
      // Partial Fisher-Yates: distinct clips.
      std::uniform_int_distribution<std::size_t> d(k, dataset_size - 1);
      std::swap(order[k], order[d(rng)]);
      pick = order[k];
    } else {
      pick = std::uniform_int_distribution<std::size_t>(0, dataset_size - 1)(rng);
    }
    ClipSample s;
    s.clip = pick;
    s.t = std::uniform_int_distribution<std::size_t>(0, clip_length - 2)(rng);
    if (config.frames_per_clip >= 3) {
      // Anchor frames whose mini-sequence spans at least half the clip.
      std::vector<std::size_t> taus;
      for (std::size_t f = 0; f < clip_length; ++f) {
        if (f == s.t || f == s.t + 1) continue;
        const std::size_t lo = std::min(f, s.t), hi = std::max(f, s.t + 1);
        if (2 * (hi - lo) >= clip_length) taus.push_back(f);
      }
      s.tau = taus[std::uniform_int_distribution<std::size_t>(0, taus.size() - 1)(rng)];
      s.frames = {s.t, s.t + 1, s.tau};
    } else {
      s.tau = s.t;
      s.frames = {s.t, s.t + 1};
    }
    std::sort(s.frames.begin(), s.frames.end());
    s.cross_view = std::bernoulli_distribution(config.p_view)(rng);
    s.view_seed = rng();
    s.anchor_seed = rng();
    s.query_seed = rng();
    batch.clips.push_back(std::move(s));
  }
  return batch;
}

// ---- state -------------------------------------------------------------------

TrainState init_state(const TrainConfig& config) {
  TrainState state;
  state.net = init_network(net_config(config), config.seed);
  for (const auto& p : state.net.params) state.momentum.push_back(Tensor::zeros(p.second.shape()));
  state.seed = config.seed;
  return state;
}

namespace {

Tensor u64_tensor(std::uint64_t v) {
  return Tensor::from({2}, {static_cast<double>(v >> 32), static_cast<double>(v & 0xffffffffULL)});
}

std::uint64_t tensor_u64(const Tensor& t) {
  return (static_cast<std::uint64_t>(t.at(0)) << 32) | static_cast<std::uint64_t>(t.at(1));
}

}  // namespace

std::vector<NamedTensor> state_tensors(const TrainState& state) {
  std::vector<NamedTensor> out = state.net.params;
  for (std::size_t i = 0; i < state.momentum.size(); ++i) out.emplace_back("momentum/" + state.net.params[i].first, state.momentum[i]);
  out.emplace_back("meta/step", u64_tensor(state.step));
  out.emplace_back("meta/seed", u64_tensor(state.seed));
  return out;
}

void save_state(const std::string& path, const TrainState& state) { write_checkpoint(path, state_tensors(state)); }

TrainState load_state(const std::string& path, const TrainConfig& config) {
  const auto stored = read_checkpoint(path);
  auto find = [&](const std::string& name) -> const Tensor& {
    for (const auto& [n, t] : stored)
      if (n == name) return t;
    throw IoError(path, "checkpoint lacks '" + name + "'");
  };
  TrainState state;
  try {
    state.net = network_from_params(net_config(config), stored);
  } catch (const DimensionError& e) {
    throw ConfigError(path + " does not fit the configured network: " + e.what());
  }
  for (const auto& p : state.net.params) {
    const Tensor& m = find("momentum/" + p.first);
    if (m.shape() != p.second.shape()) throw IoError(path, "momentum extents differ for " + p.first);
    state.momentum.push_back(m.clone(false));
  }
  state.step = static_cast<std::size_t>(tensor_u64(find("meta/step")));
  state.seed = tensor_u64(find("meta/seed"));
  return state;
}

// ---- one step ----------------------------------------------------------------

namespace {

Tensor mean_of(Tape& tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) return Tensor::scalar(0.0);
  Tensor acc = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) acc = add(tape, acc, parts[i]);
  return parts.size() == 1 ? acc : scale(tape, acc, 1.0 / static_cast<double>(parts.size()));
}

struct ClipForward {
  std::map<std::size_t, FeatureGrid> keys;  // frame -> key grid
};

#ifndef STCL_BASELINE_ONLY

Tensor cap_columns(Tape& tape, const Tensor& pool, std::size_t cap) {
  if (!pool.defined() || pool.dim(1) <= cap) return pool;
  std::vector<std::size_t> keep(cap);
  std::iota(keep.begin(), keep.end(), 0);
  return gather_columns(tape, pool, keep);
}

Tensor concat_others(Tape& tape, const std::vector<Tensor>& items, std::size_t skip) {
  std::vector<Tensor> parts;
  for (std::size_t k = 0; k < items.size(); ++k)
    if (k != skip && items[k].defined() && items[k].dim(1) > 0) parts.push_back(items[k]);
  if (parts.empty()) return Tensor();
  return parts.size() == 1 ? parts.front() : concat_columns(tape, parts);
}

bool source_allowed(const Proposal& p, const std::string& sources) {
  if (sources == "both") return true;
  return (sources == "annotated") == (p.source == ProposalSource::annotated);
}

ProposalSet restrict_sources(const ProposalSet& set, const std::string& sources) {
  ProposalSet out = set;
  out.proposals.clear();
  out.cluster_ids.clear();
  for (std::size_t i = 0; i < set.proposals.size(); ++i) {
    if (!source_allowed(set.proposals[i], sources)) continue;
    out.proposals.push_back(set.proposals[i]);
    out.cluster_ids.push_back(set.cluster_ids[i]);
  }
  return out;
}

struct ObjectTerms {
  Tensor queries;     // C × |Q|
  Tensor candidates;  // C × |P'|
  std::map<std::size_t, std::size_t> positives;
};

ObjectTerms object_terms(Tape& tape, const VideoClip& clip, const ClipSample& s, const ClipForward& fwd,
                         const TrainConfig& config) {
  ObjectTerms out;
  const std::size_t a = s.frames.front(), c = s.frames.back();
  const ProposalSet qset = restrict_sources(clip.proposals.at(a), config.ocl_sources);
  const ProposalSet pset = restrict_sources(clip.proposals.at(c), config.ocl_sources);
  const auto picked = cluster_and_sample_q(qset, config.q_size, s.query_seed);
  if (picked.empty() || pset.proposals.empty()) return out;

  std::vector<Proposal> qboxes;
  for (std::size_t i : picked) qboxes.push_back(qset.proposals[i]);
  out.queries = roi_embed_all(tape, fwd.keys.at(a), qboxes, kEncoderStride, config.roi_pool);
  out.candidates = roi_embed_all(tape, fwd.keys.at(c), pset.proposals, kEncoderStride, config.roi_pool);

  // Annotated queries: known identity. Discovered queries: exclusive matching
  // against discovered candidates by cosine similarity of their embeddings.
  std::vector<std::size_t> dq, dp;
  for (std::size_t i = 0; i < qboxes.size(); ++i) {
    if (qboxes[i].source == ProposalSource::annotated) {
      for (std::size_t j = 0; j < pset.proposals.size(); ++j) {
        const Proposal& p = pset.proposals[j];
        if (p.source == ProposalSource::annotated && p.object_id == qboxes[i].object_id) {
          out.positives[i] = j;
          break;
        }
      }
    } else {
      dq.push_back(i);
    }
  }
  for (std::size_t j = 0; j < pset.proposals.size(); ++j)
    if (pset.proposals[j].source == ProposalSource::discovered) dp.push_back(j);
  if (!dq.empty() && !dp.empty()) {
    Tape scratch(Tape::Mode::inference);
    const Tensor qv = gather_columns(scratch, out.queries, dq);
    const Tensor pv = gather_columns(scratch, out.candidates, dp);
    const Tensor sim = pairwise_similarity(scratch, qv, pv, Similarity::cosine);
    const std::vector<double> table(sim.data().begin(), sim.data().end());
    for (const auto& [qi, pj] : positive_indices(hungarian_match(table, dq.size(), dp.size()))) {
      out.positives[dq[qi]] = dp[pj];
    }
  }
  return out;
}

#endif

}  // namespace

Objective compute_objective(Tape& tape, const Network& net, const std::vector<VideoClip>& data, const Batch& batch,
                            const TrainConfig& config) {
  const Similarity measure = parse_similarity(config.measure);
  std::vector<Tensor> seg_terms;
  std::vector<ClipForward> forwards(batch.clips.size());

  for (std::size_t k = 0; k < batch.clips.size(); ++k) {
    const ClipSample& s = batch.clips[k];
    const VideoClip& clip = data.at(s.clip);
    MemoryBank memory(config.memory_capacity, config.memory_stride);
    std::vector<Tensor> frame_losses;
    for (std::size_t i = 0; i < s.frames.size(); ++i) {
      const std::size_t f = s.frames[i];
      const Tensor image = image_tensor(clip.frames.at(f));
      if (i == 0) {
        KeyFeatures key = encode_key(tape, net, image);
        memory.insert(key.key, encode_value(tape, net, image, clip.masks.at(f)), f);
        forwards[k].keys.emplace(f, key.key);
        continue;
      }
      FramePrediction pred = predict_frame(tape, net, memory, image, measure);
      frame_losses.push_back(segmentation_loss(tape, pred.logits, clip.masks.at(f)));
      forwards[k].keys.emplace(f, pred.features.key);
      if (i + 1 < s.frames.size()) {
        memory.insert(pred.features.key, encode_value(tape, net, image, argmax_mask(pred.logits)), f);
      }
    }
    seg_terms.push_back(mean_of(tape, frame_losses));
  }
  Objective report;
  report.l_seg = mean_of(tape, seg_terms);
  report.l_pcl = Tensor::scalar(0.0);
  report.l_ocl = Tensor::scalar(0.0);

#ifndef STCL_BASELINE_ONLY
  const bool lone_clip = batch.clips.size() < 2;
  if (config.use_pcl && config.frames_per_clip >= 3) {
    std::vector<AnchorSet> anchors(batch.clips.size());
    for (std::size_t k = 0; k < batch.clips.size(); ++k) {
      const ClipSample& s = batch.clips[k];
      FeatureGrid anchor_grid;
      if (s.cross_view) {
        CrossViewOptions opts{config.crop_scale_min, config.crop_scale_max, config.flip_probability};
        const CrossView view = cross_view_anchor(data.at(s.clip).frames.at(s.t), s.view_seed, opts);
        anchor_grid = encode_key(tape, net, image_tensor(view.image)).key;
      } else {
        anchor_grid = forwards[k].keys.at(s.tau);
      }
      anchors[k] = config.anchor_cell > 0
                       ? sample_anchor_cells(tape, anchor_grid, config.anchor_cell, s.anchor_seed, s.tau)
                       : sample_anchor_grid(tape, anchor_grid, config.anchor_rows, config.anchor_cols, s.anchor_seed, s.tau);
    }
    std::vector<Tensor> anchor_features;
    for (const auto& a : anchors) anchor_features.push_back(a.features);
    PclOptions opts;
    opts.measure = measure;
    opts.temperature = config.temperature;
    opts.form = config.loss_form == "verbatim" ? LossForm::verbatim : LossForm::mean_log;
    opts.intra_negatives = config.pcl_negatives != "inter" || lone_clip;
    const bool inter = config.pcl_negatives != "intra";
    std::vector<Tensor> terms;
    Tape scratch(Tape::Mode::inference);
    for (std::size_t k = 0; k < batch.clips.size(); ++k) {
      const ClipSample& s = batch.clips[k];
      Tensor negatives = inter ? cap_columns(tape, concat_others(tape, anchor_features, k), config.max_negatives) : Tensor();
      const PseudoLabels labels =
          pseudo_labels(anchor_affinity(scratch, forwards[k].keys.at(s.t), anchors[k], measure, config.temperature));
      terms.push_back(pcl_loss(tape, forwards[k].keys.at(s.t + 1), anchors[k], labels, negatives, opts));
    }
    report.l_pcl = mean_of(tape, terms);
    report.fallback_negatives = lone_clip;
  }
  if (config.use_ocl && config.frames_per_clip >= 3) {
    std::vector<ObjectTerms> objects;
    for (std::size_t k = 0; k < batch.clips.size(); ++k) {
      objects.push_back(object_terms(tape, data.at(batch.clips[k].clip), batch.clips[k], forwards[k], config));
    }
    std::vector<Tensor> queries;
    for (const auto& o : objects) queries.push_back(o.queries);
    OclOptions opts;
    opts.form = config.loss_form == "verbatim" ? LossForm::verbatim : LossForm::mean_log;
    opts.temperature = config.temperature;
    std::vector<Tensor> terms;
    for (std::size_t k = 0; k < objects.size(); ++k) {
      const ObjectTerms& o = objects[k];
      if (o.positives.empty()) continue;
      Tensor negatives;
      if (!lone_clip) {
        negatives = cap_columns(tape, concat_others(tape, queries, k), config.max_negatives);
      } else {
        // Candidates nobody matched stand in for other videos' objects.
        std::vector<std::size_t> unused;
        std::vector<bool> taken(o.candidates.dim(1), false);
        for (const auto& [qi, pj] : o.positives) taken[pj] = true;
        for (std::size_t j = 0; j < taken.size(); ++j)
          if (!taken[j]) unused.push_back(j);
        if (!unused.empty()) negatives = gather_columns(tape, o.candidates, unused);
        report.fallback_negatives = true;
      }
      report.ocl_pairs += o.positives.size();
      terms.push_back(ocl_loss(tape, o.queries, o.candidates, o.positives, negatives, opts));
    }
    report.l_ocl = mean_of(tape, terms);
  }
#endif

  report.alpha = alpha_schedule(batch.step, config);
  report.total = total_loss(tape, report.l_seg, report.l_pcl, report.l_ocl, report.alpha, config.beta);
  return report;
}

LossReport train_step(TrainState& state, const std::vector<VideoClip>& data, const Batch& batch,
                      const TrainConfig& config) {
  if (batch.step != state.step) throw StateError("batch was built for a different step");
  Tape tape;
  Network& net = state.net;
  const Objective objective = compute_objective(tape, net, data, batch, config);
  LossReport report;
  report.step = state.step;
  report.alpha = objective.alpha;
  report.l_seg = objective.l_seg.item();
  report.l_pcl = objective.l_pcl.item();
  report.l_ocl = objective.l_ocl.item();
  report.l_total = objective.total.item();
  report.ocl_pairs = objective.ocl_pairs;
  report.fallback_negatives = objective.fallback_negatives;

  net.zero_grad();
  tape.backward(objective.total);
  double scale_factor = 1.0;
  if (config.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& p : net.params)
      for (double g : p.second.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw NumericError("non-finite gradient norm at step " + std::to_string(state.step));
    if (norm > config.grad_clip) scale_factor = config.grad_clip / norm;
  }
  for (std::size_t i = 0; i < net.params.size(); ++i) {
    auto values = net.params[i].second.mutable_data();
    auto grads = net.params[i].second.grad();
    auto velocity = state.momentum[i].mutable_data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      velocity[j] = config.momentum * velocity[j] + scale_factor * grads[j];
      values[j] -= config.learning_rate * velocity[j];
    }
  }
  net.zero_grad();
  ++state.step;
  return report;
}

// ---- loop --------------------------------------------------------------------

void write_metrics_header(std::ostream& out) { out << "step,alpha,l_seg,l_pcl,l_ocl,l_total,J,F,JF_mean,corr_acc\n"; }

void write_metrics_row(std::ostream& out, const LossReport& loss, const EvalReport* eval) {
  out << std::setprecision(10) << loss.step << ',' << loss.alpha << ',' << loss.l_seg << ',' << loss.l_pcl << ','
      << loss.l_ocl << ',' << loss.l_total;
  if (eval) {
    out << ',' << eval->J_mean << ',' << eval->F_mean << ',' << eval->JF_mean << ',' << eval->corr_acc;
  } else {
    out << ",,,,";
  }
  out << '\n';
}

TrainResult run_training(const TrainConfig& config, const std::string& out_dir, const Datasets* data,
                         const TrainState* resume, const ProgressFn& progress) {
  validate_config(config);
  Datasets owned;
  if (!data) {
    owned = make_datasets(config);
    data = &owned;
  }
  TrainResult result;
  result.state = resume ? *resume : init_state(config);
  if (resume) {
    // Work on private copies so the caller's state stays untouched.
    result.state.net = network_from_params(net_config(config), resume->net.params);
    for (auto& m : result.state.momentum) m = m.clone(false);
  }

  std::ofstream metrics;
  if (!out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    const std::string path = (std::filesystem::path(out_dir) / "metrics.csv").string();
    metrics.open(path);
    if (!metrics) throw IoError(path, "cannot open for writing");
    write_metrics_header(metrics);
  }
  auto checkpoint = [&](const std::string& name) {
    if (out_dir.empty()) return;
    save_state((std::filesystem::path(out_dir) / name).string(), result.state);
  };
  const EvalOptions eval_opts{infer_options(config), config.corr_tolerance};
  const std::uint64_t hash = config_hash(config);

  if (result.state.step >= config.total_steps) {
    checkpoint("final.ckpt");
    return result;
  }
  bool warned = false;
  while (result.state.step < config.total_steps) {
    const Batch batch = build_batch(data->train.size(), config.clip_length, config, result.state.step);
    LossReport loss = train_step(result.state, data->train, batch, config);
    if (loss.fallback_negatives && !warned) {
      log_warning("batch holds a single clip; negatives fall back to the clip itself");
      warned = true;
    }
    const std::size_t done = result.state.step;
    const bool last = done == config.total_steps;
    const bool periodic = config.eval_every > 0 && done % config.eval_every == 0;
    const EvalReport* eval = nullptr;
    if ((periodic || last) && !data->eval.empty()) {
      result.evals.emplace_back(done, evaluate_clips(result.state.net, data->eval, eval_opts, hash));
      eval = &result.evals.back().second;
    }
    if (metrics.is_open()) write_metrics_row(metrics, loss, eval);
    if (progress) progress(loss);
    result.losses.push_back(loss);
    if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && !last) {
      checkpoint("step_" + std::to_string(done) + ".ckpt");
    }
  }
  checkpoint("final.ckpt");
  if (metrics.is_open() && !metrics) throw IoError(out_dir + "/metrics.csv", "write failed");
  return result;
}

// ---- ablation ----------------------------------------------------------------

std::vector<Variant> ablation_variants(const std::string& matrix) {
  std::vector<Variant> out;
  const bool all = matrix == "all";
  if (all || matrix == "component") {
    out.push_back({"baseline", {{"use_pcl", "0"}, {"use_ocl", "0"}}});
    out.push_back({"pcl_only", {{"use_pcl", "1"}, {"use_ocl", "0"}}});
    out.push_back({"ocl_only", {{"use_pcl", "0"}, {"use_ocl", "1"}}});
    out.push_back({"full", {{"use_pcl", "1"}, {"use_ocl", "1"}}});
  }
  if (all || matrix == "negatives") {
    out.push_back({"neg_inter", {{"use_pcl", "1"}, {"use_ocl", "1"}, {"pcl_negatives", "inter"}}});
    out.push_back({"neg_intra", {{"use_pcl", "1"}, {"use_ocl", "1"}, {"pcl_negatives", "intra"}}});
    if (!all) out.push_back({"neg_both", {{"use_pcl", "1"}, {"use_ocl", "1"}, {"pcl_negatives", "both"}}});
  }
  if (all || matrix == "sources") {
    out.push_back({"src_annotated", {{"use_pcl", "1"}, {"use_ocl", "1"}, {"ocl_sources", "annotated"}}});
    out.push_back({"src_discovered", {{"use_pcl", "1"}, {"use_ocl", "1"}, {"ocl_sources", "discovered"}}});
    if (!all) out.push_back({"src_both", {{"use_pcl", "1"}, {"use_ocl", "1"}, {"ocl_sources", "both"}}});
  }
  if (out.empty()) throw ConfigError("unknown ablation matrix '" + matrix + "'");
  return out;
}

std::vector<AblationRow> run_ablation(const TrainConfig& config, const std::vector<Variant>& variants,
                                      const std::string& out_dir) {
  std::vector<AblationRow> rows;
  for (std::size_t k = 0; k < config.ablation_seeds; ++k) {
    TrainConfig seeded = config;
    seeded.seed = config.seed + k;
    if (config.data_seed != 0) seeded.data_seed = config.data_seed + k;
    validate_config(seeded);
    const Datasets data = make_datasets(seeded);
    for (const auto& v : variants) {
      TrainConfig run = seeded;
      for (const auto& [key, value] : v.overrides) set_config_value(run, key, value);
      const std::string dir =
          out_dir.empty() ? "" : (std::filesystem::path(out_dir) / (v.name + "_seed" + std::to_string(run.seed))).string();
      const TrainResult result = run_training(run, dir, &data);
      AblationRow row;
      row.variant = v.name;
      row.seed = run.seed;
      row.first_l_seg = result.losses.empty() ? 0.0 : result.losses.front().l_seg;
      if (!result.evals.empty()) row.report = result.evals.back().second;
      rows.push_back(row);
    }
  }
  return rows;
}

void write_ablation_summary(std::ostream& out, const std::vector<AblationRow>& rows) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const AblationRow*>> by_variant;
  for (const auto& r : rows) {
    if (!by_variant.contains(r.variant)) order.push_back(r.variant);
    by_variant[r.variant].push_back(&r);
  }
  out << "variant,seeds,J_mean,F_mean,JF_mean,corr_acc\n" << std::setprecision(6);
  for (const auto& name : order) {
    const auto& list = by_variant[name];
    double j = 0, f = 0, jf = 0, corr = 0;
    for (const auto* r : list) {
      j += r->report.J_mean;
      f += r->report.F_mean;
      jf += r->report.JF_mean;
      corr += r->report.corr_acc;
    }
    const auto n = static_cast<double>(list.size());
    out << name << ',' << list.size() << ',' << j / n << ',' << f / n << ',' << jf / n << ',' << corr / n << '\n';
  }
}

}  // namespace stcl
