#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "stcl/errors.hpp"
#include "stcl/trainer.hpp"

using namespace stcl;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.train_clips = 4;
  c.eval_clips = 2;
  c.clip_length = 4;
  c.width = 32;
  c.height = 32;
  c.object_min_size = 8;
  c.object_max_size = 12;
  c.batch_clips = 2;
  c.total_steps = 4;
  c.anchor_rows = 4;
  c.anchor_cols = 4;
  c.cluster_cell = 16;
  return c;
}

std::vector<std::uint8_t> param_bytes(const Network& net) { return encode_checkpoint(net.params); }

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("stcl_trainer_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::vector<char> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TrainConfig smoke_config() {
  TrainConfig c;
  c.train_clips = 8;
  c.eval_clips = 0;
  c.total_steps = 200;
  return c;
}

// 200 steps on 8 clips, shared by the cases that inspect a trained network.
const TrainResult& smoke_run() {
  static const TrainResult result = run_training(smoke_config());
  return result;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("config parsing, overrides and validation") {
  std::istringstream text("# comment\nseed = 7\n  alpha_max=0.1 # trailing\nuse_pcl = off\nmeasure = cosine\n\n");
  const TrainConfig c = parse_config(text);
  CHECK(c.seed == 7);
  CHECK(c.alpha_max == 0.1);
  CHECK_FALSE(c.use_pcl);
  CHECK(c.measure == "cosine");

  std::istringstream unknown("no_such_key = 1\n");
  CHECK_THROWS_AS(parse_config(unknown), ConfigError);
  std::istringstream malformed("seed 7\n");
  CHECK_THROWS_AS(parse_config(malformed), ConfigError);
  std::istringstream bad_number("seed = seven\n");
  CHECK_THROWS_AS(parse_config(bad_number), ConfigError);

  TrainConfig o;
  apply_override(o, "total_steps=12");
  CHECK(o.total_steps == 12);
  CHECK_THROWS_AS(apply_override(o, "total_steps"), ConfigError);
  CHECK_THROWS_AS(apply_override(o, "bogus=1"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/stcl.cfg"), IoError);

  std::istringstream round(config_to_string(c));
  const TrainConfig back = parse_config(round);
  CHECK(config_to_string(back) == config_to_string(c));
  CHECK(config_hash(back) == config_hash(c));
  CHECK(config_hash(o) != config_hash(c));

  auto rejects = [](const std::string& assignment) {
    TrainConfig v;
    apply_override(v, assignment);
    CHECK_THROWS_AS(validate_config(v), ConfigError);
  };
  rejects("alpha_max=-0.1");
  rejects("frames_per_clip=4");
  rejects("frames_per_clip=2");
  rejects("pcl_negatives=none");
  rejects("ocl_sources=all");
  rejects("measure=manhattan");
  rejects("p_view=1.5");
  rejects("crop_scale_min=0");
  rejects("batch_clips=0");
  rejects("temperature=0");
  rejects("warmup_steps=-2");
  TrainConfig pair_only;
  apply_override(pair_only, "frames_per_clip=2");
  apply_override(pair_only, "use_pcl=0");
  apply_override(pair_only, "use_ocl=0");
  CHECK_NOTHROW(validate_config(pair_only));
}

TEST_CASE("warmup schedule is exact") {
  TrainConfig c;
  c.alpha_max = 0.2;
  c.warmup_steps = 100;
  CHECK(alpha_schedule(0, c) == 0.0);
  CHECK(alpha_schedule(100, c) == 0.2);
  CHECK(alpha_schedule(5000, c) == 0.2);
  for (std::size_t s = 0; s <= 100; ++s) CHECK(alpha_schedule(s, c) == 0.2 * static_cast<double>(s) / 100.0);
  CHECK(alpha_schedule(50, c) == 0.1);
  c.warmup_steps = 0;
  CHECK(alpha_schedule(0, c) == 0.2);
  c.warmup_steps = -1;
  c.total_steps = 2000;
  CHECK(effective_warmup(c) == 200);
  CHECK(alpha_schedule(100, c) == 0.1);
}

TEST_CASE("combined objective arithmetic") {
  Tape tape;
  const Tensor seg = Tensor::scalar(1.0, true), pcl = Tensor::scalar(2.0, true), ocl = Tensor::scalar(4.0, true);
  const Tensor total = total_loss(tape, seg, pcl, ocl, 0.2, 0.5);
  CHECK(total.item() == doctest::Approx(1.8).epsilon(1e-15));
  tape.backward(total);
  CHECK(seg.grad()[0] == 1.0);
  CHECK(pcl.grad()[0] == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(ocl.grad()[0] == doctest::Approx(0.1).epsilon(1e-15));
  Tape plain;
  CHECK(total_loss(plain, seg, pcl, ocl, 0.0, 0.5).item() == 1.0);
  CHECK_THROWS_AS(total_loss(plain, seg, Tensor::scalar(std::nan("")), ocl, 0.2, 0.5), NumericError);
  // Linear in each component.
  for (int k = 0; k < 10; ++k) {
    const double a = 0.02 * k;
    Tape t;
    const double v = total_loss(t, Tensor::scalar(0.5), Tensor::scalar(k), Tensor::scalar(2.0 * k), a, 0.5).item();
    CHECK(v == doctest::Approx(0.5 + a * (k + 0.5 * 2.0 * k)).epsilon(1e-14));
  }
}

TEST_CASE("batch construction respects the sampling rules") {
  TrainConfig c;
  c.batch_clips = 4;
  for (std::size_t T : {3u, 4u, 6u, 9u}) {
    for (std::size_t step = 0; step < 200; ++step) {
      const Batch b = build_batch(10, T, c, step);
      CHECK(b.step == step);
      REQUIRE(b.clips.size() == 4);
      std::vector<std::size_t> ids;
      for (const auto& s : b.clips) {
        ids.push_back(s.clip);
        CHECK(s.t + 1 < T);
        CHECK(s.tau < T);
        CHECK(s.tau != s.t);
        CHECK(s.tau != s.t + 1);
        CHECK(s.frames.size() == 3);
        CHECK(std::is_sorted(s.frames.begin(), s.frames.end()));
        CHECK(2 * (s.frames.back() - s.frames.front()) >= T);
      }
      std::sort(ids.begin(), ids.end());
      CHECK(std::adjacent_find(ids.begin(), ids.end()) == ids.end());
    }
  }
  const Batch a = build_batch(10, 6, c, 17), b = build_batch(10, 6, c, 17);
  for (std::size_t k = 0; k < 4; ++k) {
    CHECK(a.clips[k].clip == b.clips[k].clip);
    CHECK(a.clips[k].tau == b.clips[k].tau);
    CHECK(a.clips[k].view_seed == b.clips[k].view_seed);
  }
  c.p_view = 1.0;
  for (const auto& s : build_batch(10, 6, c, 3).clips) CHECK(s.cross_view);
  c.p_view = 0.0;
  for (const auto& s : build_batch(10, 6, c, 3).clips) CHECK_FALSE(s.cross_view);
  CHECK_THROWS_AS(build_batch(0, 6, c, 0), StateError);
  CHECK_THROWS_AS(build_batch(10, 2, c, 0), ConfigError);
  c.frames_per_clip = 2;
  const Batch pairs = build_batch(10, 2, c, 0);
  CHECK(pairs.clips[0].frames.size() == 2);
}

TEST_CASE("train steps are deterministic and guarded by the step counter") {
  const TrainConfig c = tiny_config();
  const Datasets data = make_datasets(c);
  REQUIRE(data.train.size() == 4);
  REQUIRE(data.eval.size() == 2);
  CHECK(data.train[0].seed == clip_seed(c, false, 0));
  CHECK(data.eval[0].seed == clip_seed(c, true, 0));

  TrainState a = init_state(c), b = init_state(c);
  for (std::size_t s = 0; s < 3; ++s) {
    const Batch batch = build_batch(data.train.size(), c.clip_length, c, s);
    const LossReport ra = train_step(a, data.train, batch, c);
    const LossReport rb = train_step(b, data.train, batch, c);
    CHECK(ra.l_total == rb.l_total);
    CHECK(ra.step == s);
    CHECK(std::isfinite(ra.l_pcl));
    CHECK(std::isfinite(ra.l_ocl));
  }
  CHECK(a.step == 3);
  CHECK(param_bytes(a.net) == param_bytes(b.net));
  CHECK(param_bytes(a.net) != param_bytes(init_state(c).net));
  CHECK_THROWS_AS(train_step(a, data.train, build_batch(4, c.clip_length, c, 7), c), StateError);
}

TEST_CASE("a batch of one clip falls back to intra-clip negatives") {
  TrainConfig c = tiny_config();
  c.batch_clips = 1;
  const Datasets data = make_datasets(c);
  TrainState s = init_state(c);
  const LossReport r = train_step(s, data.train, build_batch(4, c.clip_length, c, 0), c);
  CHECK(r.fallback_negatives);
  CHECK(std::isfinite(r.l_total));
  c.batch_clips = 2;
  TrainState t = init_state(c);
  CHECK_FALSE(train_step(t, data.train, build_batch(4, c.clip_length, c, 0), c).fallback_negatives);
}

TEST_CASE("zero alpha trains exactly like the losses switched off") {
  TrainConfig on = tiny_config();
  on.alpha_max = 0.0;
  on.total_steps = 5;
  TrainConfig off = on;
  off.use_pcl = false;
  off.use_ocl = false;
  const Datasets data = make_datasets(on);
  const TrainResult a = run_training(on, "", &data);
  const TrainResult b = run_training(off, "", &data);
  CHECK(param_bytes(a.state.net) == param_bytes(b.state.net));
  for (std::size_t i = 0; i < a.losses.size(); ++i) CHECK(a.losses[i].l_total == b.losses[i].l_seg);
}

TEST_CASE("checkpointed state round-trips and training resumes") {
  TrainConfig c = tiny_config();
  c.total_steps = 0;
  const auto dir0 = scratch_dir("zero");
  const TrainResult none = run_training(c, dir0.string());
  CHECK(none.losses.empty());
  CHECK(std::filesystem::exists(dir0 / "final.ckpt"));
  CHECK(param_bytes(load_state((dir0 / "final.ckpt").string(), c).net) == param_bytes(init_state(c).net));

  c.total_steps = 6;
  c.checkpoint_every = 3;
  c.eval_every = 3;
  const auto dir = scratch_dir("resume");
  const TrainResult full = run_training(c, dir.string());
  CHECK(full.losses.size() == 6);
  CHECK(full.evals.size() == 2);
  CHECK(std::filesystem::exists(dir / "step_3.ckpt"));
  CHECK_FALSE(std::filesystem::exists(dir / "step_6.ckpt"));

  const TrainState mid = load_state((dir / "step_3.ckpt").string(), c);
  CHECK(mid.step == 3);
  CHECK(mid.seed == c.seed);
  const auto again = scratch_dir("resume_again");
  save_state((again / "copy.ckpt").string(), mid);
  CHECK(file_bytes(again / "copy.ckpt") == file_bytes(dir / "step_3.ckpt"));

  const TrainResult resumed = run_training(c, again.string(), nullptr, &mid);
  CHECK(resumed.losses.size() == 3);
  CHECK(resumed.losses.front().step == 3);
  CHECK(mid.step == 3);
  CHECK(file_bytes(again / "final.ckpt") == file_bytes(dir / "final.ckpt"));

  std::ifstream metrics(dir / "metrics.csv");
  std::string header, row;
  std::getline(metrics, header);
  CHECK(header == "step,alpha,l_seg,l_pcl,l_ocl,l_total,J,F,JF_mean,corr_acc");
  std::size_t rows = 0;
  while (std::getline(metrics, row)) ++rows;
  CHECK(rows == 6);
  CHECK_THROWS_AS(load_state((dir / "missing.ckpt").string(), c), IoError);
}

TEST_CASE("ablation variants share seeds and data") {
  CHECK(ablation_variants("component").size() == 4);
  CHECK(ablation_variants("negatives").size() == 3);
  CHECK(ablation_variants("sources").size() == 3);
  CHECK(ablation_variants("all").size() == 8);
  CHECK_THROWS_AS(ablation_variants("nothing"), ConfigError);

  TrainConfig c = tiny_config();
  c.total_steps = 2;
  c.ablation_seeds = 2;
  const auto dir = scratch_dir("ablate");
  const auto rows = run_ablation(c, ablation_variants("component"), dir.string());
  REQUIRE(rows.size() == 8);
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t v = 0; v < 4; ++v) {
      CHECK(rows[k * 4 + v].seed == c.seed + k);
      CHECK(rows[k * 4 + v].first_l_seg == rows[k * 4].first_l_seg);
      CHECK(std::filesystem::exists(dir / (rows[k * 4 + v].variant + "_seed" + std::to_string(c.seed + k)) /
                                    "metrics.csv"));
    }
  }
  CHECK(rows[0].first_l_seg != rows[4].first_l_seg);
  std::ostringstream summary;
  write_ablation_summary(summary, rows);
  CHECK(summary.str().find("variant,seeds,J_mean,F_mean,JF_mean,corr_acc\nbaseline,2,") == 0);
}

TEST_CASE("smoke training halves the segmentation loss") {
  const TrainResult& r = smoke_run();
  REQUIRE(r.losses.size() == 200);
  double tail = 0.0;
  for (std::size_t i = 190; i < 200; ++i) tail += r.losses[i].l_seg / 10.0;
  INFO("initial " << r.losses.front().l_seg << " final " << tail);
  CHECK(tail < 0.5 * r.losses.front().l_seg);
}

TEST_CASE("a static clip is tracked after smoke training") {
  const TrainResult& r = smoke_run();
  ClipSpec still = clip_spec(smoke_config());
  still.motion_range = 0;
  const VideoClip clip = generate_clip(still, 424242);
  const auto masks = infer_sequence(r.state.net, clip.frames, clip.masks[0], infer_options(smoke_config()));
  REQUIRE(masks.size() == clip.length() - 1);
  for (std::size_t k = 0; k < masks.size(); ++k)
    for (const auto& obj : clip.objects) {
      INFO("frame " << k + 1 << " object " << int(obj.id));
      CHECK(region_J(masks[k], clip.masks[k + 1], obj.id) >= 0.99);
    }
}

}  // TEST_SUITE
