#include "stcl/synthvid.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "stcl/errors.hpp"

namespace stcl {

TextureMode parse_texture_mode(const std::string& name) {
  if (name == "flat") return TextureMode::flat;
  if (name == "noise") return TextureMode::noise;
  if (name == "stripes") return TextureMode::stripes;
  throw ConfigError("unknown texture mode '" + name + "'");
}

std::string texture_mode_name(TextureMode mode) {
  switch (mode) {
    case TextureMode::flat: return "flat";
    case TextureMode::noise: return "noise";
    case TextureMode::stripes: return "stripes";
  }
  return "noise";
}

namespace {

enum Stream : std::uint64_t { background_stream = 1, object_stream, motion_stream, photometric_stream, proposal_stream };

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

int uniform_int(std::mt19937_64& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

std::vector<double> make_background(const ClipSpec& spec, std::mt19937_64& rng) {
  const std::size_t w = spec.width, h = spec.height;
  std::vector<double> bg(3 * w * h);
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const double base = uniform(rng, 0.25, 0.75);
    const double fx = uniform(rng, 0.5, 3.0) * two_pi / static_cast<double>(w);
    const double fy = uniform(rng, 0.5, 3.0) * two_pi / static_cast<double>(h);
    const double px = uniform(rng, 0.0, two_pi), py = uniform(rng, 0.0, two_pi);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        double v = base;
        if (spec.texture_mode != TextureMode::flat) {
          v += 0.15 * std::sin(fx * static_cast<double>(c) + px) * std::cos(fy * static_cast<double>(r) + py);
        }
        if (spec.texture_mode == TextureMode::noise) v += uniform(rng, -0.06, 0.06);
        bg[(ch * h + r) * w + c] = std::clamp(v, 0.0, 1.0);
      }
  }
  return bg;
}

ObjectTrack make_object(const ClipSpec& spec, std::uint8_t id, std::mt19937_64& rng) {
  ObjectTrack obj;
  obj.id = id;
  obj.shape = static_cast<ShapeKind>(uniform_int(rng, 0, 2));
  obj.width = static_cast<std::size_t>(uniform_int(rng, static_cast<int>(spec.min_size), static_cast<int>(spec.max_size)));
  obj.height = static_cast<std::size_t>(uniform_int(rng, static_cast<int>(spec.min_size), static_cast<int>(spec.max_size)));
  const std::size_t w = obj.width, h = obj.height;
  obj.support.assign(w * h, 0);
  const double hw = static_cast<double>(w) / 2, hh = static_cast<double>(h) / 2;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const double dx = static_cast<double>(c) + 0.5 - hw, dy = static_cast<double>(r) + 0.5 - hh;
      bool inside = true;
      if (obj.shape == ShapeKind::ellipse) {
        inside = (dx * dx) / (hw * hw) + (dy * dy) / (hh * hh) <= 1.0;
      } else if (obj.shape == ShapeKind::triangle) {
        inside = std::abs(dx) <= (static_cast<double>(r) + 0.5) / static_cast<double>(h) * hw;
      }
      obj.support[r * w + c] = inside ? 1 : 0;
    }
  double colour[2][3];
  for (auto& tone : colour)
    for (double& v : tone) v = uniform(rng, 0.0, 1.0);
  const bool vertical = uniform_int(rng, 0, 1) == 1;
  obj.texture.assign(3 * w * h, 0.0);
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        double v = colour[0][ch];
        if (spec.texture_mode == TextureMode::stripes && ((vertical ? c : r) / 3) % 2 == 1) v = colour[1][ch];
        if (spec.texture_mode == TextureMode::noise) v += uniform(rng, -0.15, 0.15);
        obj.texture[(ch * h + r) * w + c] = std::clamp(v, 0.0, 1.0);
      }
  return obj;
}

bool boxes_overlap(const ObjectTrack& a, const ObjectTrack& b) {
  return a.x[0] < b.x[0] + static_cast<int>(b.width) && b.x[0] < a.x[0] + static_cast<int>(a.width) &&
         a.y[0] < b.y[0] + static_cast<int>(b.height) && b.y[0] < a.y[0] + static_cast<int>(a.height);
}

// Advances one coordinate by v, reflecting v when the step would leave [0, hi].
int reflect_step(int pos, int& v, int hi) {
  if (pos + v < 0 || pos + v > hi) v = -v;
  return std::clamp(pos + v, 0, hi);
}

}  // namespace

VideoClip generate_clip(const ClipSpec& spec, std::uint64_t seed) {
  if (spec.frames == 0) throw GenerationError("clip needs at least one frame");
  if (spec.width == 0 || spec.height == 0 || spec.width % 4 != 0 || spec.height % 4 != 0) {
    throw DimensionError("frame extents must be positive multiples of 4");
  }
  if (spec.n_objects > spec.max_objects || spec.max_objects > 255) {
    throw GenerationError("object count exceeds the class budget");
  }
  if (spec.min_size == 0 || spec.min_size > spec.max_size || spec.max_size > std::min(spec.width, spec.height)) {
    throw GenerationError("object size range does not fit the frame");
  }
  if (spec.motion_range < 0) throw GenerationError("motion range must be non-negative");

  VideoClip clip;
  clip.spec = spec;
  clip.seed = seed;
  auto bg_rng = make_rng(seed, background_stream);
  const auto background = make_background(spec, bg_rng);

  auto obj_rng = make_rng(seed, object_stream);
  for (std::size_t k = 0; k < spec.n_objects; ++k) clip.objects.push_back(make_object(spec, static_cast<std::uint8_t>(k + 1), obj_rng));

  auto motion_rng = make_rng(seed, motion_stream);
  bool placed = false;
  for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
    placed = true;
    for (std::size_t k = 0; k < clip.objects.size() && placed; ++k) {
      auto& obj = clip.objects[k];
      obj.x.assign(1, uniform_int(motion_rng, 0, static_cast<int>(spec.width - obj.width)));
      obj.y.assign(1, uniform_int(motion_rng, 0, static_cast<int>(spec.height - obj.height)));
      for (std::size_t j = 0; j < k; ++j)
        if (boxes_overlap(obj, clip.objects[j])) placed = false;
    }
  }
  if (!placed) throw GenerationError("objects cannot be placed disjointly in the first frame");

  clip.flow.resize(spec.frames - 1);
  for (auto& obj : clip.objects) {
    int vx = uniform_int(motion_rng, -spec.motion_range, spec.motion_range);
    int vy = uniform_int(motion_rng, -spec.motion_range, spec.motion_range);
    for (std::size_t t = 1; t < spec.frames; ++t) {
      obj.x.push_back(reflect_step(obj.x.back(), vx, static_cast<int>(spec.width - obj.width)));
      obj.y.push_back(reflect_step(obj.y.back(), vy, static_cast<int>(spec.height - obj.height)));
      clip.flow[t - 1].push_back({obj.id, obj.x[t] - obj.x[t - 1], obj.y[t] - obj.y[t - 1]});
    }
  }

  auto photo_rng = make_rng(seed, photometric_stream);
  std::normal_distribution<double> noise(0.0, 1.0);
  const std::size_t w = spec.width, h = spec.height;
  for (std::size_t t = 0; t < spec.frames; ++t) {
    Image frame(w, h);
    frame.pixels = background;
    Mask mask(w, h);
    for (const auto& obj : clip.objects) {
      for (std::size_t r = 0; r < obj.height; ++r)
        for (std::size_t c = 0; c < obj.width; ++c) {
          if (!obj.support[r * obj.width + c]) continue;
          const std::size_t pr = static_cast<std::size_t>(obj.y[t]) + r;
          const std::size_t pc = static_cast<std::size_t>(obj.x[t]) + c;
          mask.at(pr, pc) = obj.id;
          for (std::size_t ch = 0; ch < 3; ++ch)
            frame.at(ch, pr, pc) = obj.texture[(ch * obj.height + r) * obj.width + c];
        }
    }
    if (spec.photometric > 0.0 || spec.pixel_noise > 0.0) {
      const double gain = spec.photometric > 0.0 ? uniform(photo_rng, 1.0 - spec.photometric, 1.0 + spec.photometric) : 1.0;
      for (double& v : frame.pixels) {
        double out = v * gain;
        if (spec.pixel_noise > 0.0) out += spec.pixel_noise * noise(photo_rng);
        v = std::clamp(out, 0.0, 1.0);
      }
    }
    clip.frames.push_back(std::move(frame));
    clip.masks.push_back(std::move(mask));
  }
  return clip;
}

Proposal visible_box(const Mask& mask, std::uint8_t id) {
  std::size_t r0 = mask.height, r1 = 0, c0 = mask.width, c1 = 0;
  bool any = false;
  for (std::size_t r = 0; r < mask.height; ++r)
    for (std::size_t c = 0; c < mask.width; ++c) {
      if (mask.at(r, c) != id) continue;
      any = true;
      r0 = std::min(r0, r);
      r1 = std::max(r1, r);
      c0 = std::min(c0, c);
      c1 = std::max(c1, c);
    }
  Proposal p;
  if (!any) return p;
  p.w = static_cast<double>(c1 - c0 + 1);
  p.h = static_cast<double>(r1 - r0 + 1);
  p.x = static_cast<double>(c0) + p.w / 2;
  p.y = static_cast<double>(r0) + p.h / 2;
  return p;
}

std::vector<ProposalSet> generate_proposals(const VideoClip& clip, const ProposalConfig& config, std::uint64_t seed) {
  std::vector<ProposalSet> out;
  const auto W = static_cast<double>(clip.spec.width), H = static_cast<double>(clip.spec.height);
  for (std::size_t t = 0; t < clip.length(); ++t) {
    auto rng = make_rng(seed, proposal_stream, t);
    std::vector<Proposal> raw;
    std::vector<Proposal> annotated;
    for (const auto& obj : clip.objects) {
      Proposal exact = visible_box(clip.masks[t], obj.id);
      if (exact.w == 0.0) continue;
      const double x1 = exact.x - exact.w / 2, x2 = exact.x + exact.w / 2;
      const double y1 = exact.y - exact.h / 2, y2 = exact.y + exact.h / 2;
      const int j = config.jitter;
      const double jx1 = x1 + uniform_int(rng, -j, j), jx2 = x2 + uniform_int(rng, -j, j);
      const double jy1 = y1 + uniform_int(rng, -j, j), jy2 = y2 + uniform_int(rng, -j, j);
      Proposal found;
      found.w = std::max(1.0, jx2 - jx1);
      found.h = std::max(1.0, jy2 - jy1);
      found.x = jx1 + found.w / 2;
      found.y = jy1 + found.h / 2;
      found.source = ProposalSource::discovered;
      found.origin_id = obj.id;
      raw.push_back(found);
      exact.source = ProposalSource::annotated;
      exact.object_id = obj.id;
      exact.origin_id = obj.id;
      annotated.push_back(exact);
    }
    raw.insert(raw.end(), annotated.begin(), annotated.end());
    for (std::size_t k = 0; k < config.distractors_per_frame; ++k) {
      Proposal d;
      d.x = uniform(rng, 0.0, W);
      d.y = uniform(rng, 0.0, H);
      d.w = uniform_int(rng, 8, static_cast<int>(clip.spec.width));
      d.h = uniform_int(rng, 8, static_cast<int>(clip.spec.height));
      raw.push_back(d);
    }
    out.push_back(filter_proposals(raw, clip.spec.width, clip.spec.height, t, config.rules));
  }
  return out;
}

std::vector<long> ground_truth_correspondence(const VideoClip& clip, std::size_t t, std::size_t t2) {
  if (t >= clip.length() || t2 >= clip.length()) throw IndexError("frame index out of range");
  const std::size_t w = clip.spec.width, h = clip.spec.height;
  std::vector<long> map(w * h, -1);
  const Mask& src = clip.masks[t];
  const Mask& dst = clip.masks[t2];
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      const std::uint8_t id = src.at(r, c);
      if (id == 0) continue;
      const auto& obj = clip.objects[id - 1];
      const long nr = static_cast<long>(r) + obj.y[t2] - obj.y[t];
      const long nc = static_cast<long>(c) + obj.x[t2] - obj.x[t];
      if (nr < 0 || nc < 0 || nr >= static_cast<long>(h) || nc >= static_cast<long>(w)) continue;
      if (dst.at(static_cast<std::size_t>(nr), static_cast<std::size_t>(nc)) != id) continue;
      map[r * w + c] = nr * static_cast<long>(w) + nc;
    }
  return map;
}

std::vector<std::string> write_clip_files(const std::string& directory, const std::string& prefix,
                                          const VideoClip& clip) {
  std::vector<std::string> files;
  for (std::size_t t = 0; t < clip.length(); ++t) {
    char suffix[16];
    std::snprintf(suffix, sizeof suffix, "_f%02zu", t);
    const std::string stem = prefix + suffix;
    write_ppm((std::filesystem::path(directory) / (stem + ".ppm")).string(), clip.frames[t]);
    write_pgm((std::filesystem::path(directory) / (stem + ".pgm")).string(), clip.masks[t]);
    files.push_back(stem + ".ppm");
    files.push_back(stem + ".pgm");
  }
  return files;
}

void write_manifest(const std::string& path, const std::string& split, const ClipSpec& spec,
                    const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw IoError(path, "cannot open for writing");
  out << "split " << split << '\n'
      << "frames " << spec.frames << '\n'
      << "width " << spec.width << '\n'
      << "height " << spec.height << '\n'
      << "n_objects " << spec.n_objects << '\n'
      << "motion_range " << spec.motion_range << '\n'
      << "texture_mode " << texture_mode_name(spec.texture_mode) << '\n'
      << "max_objects " << spec.max_objects << '\n'
      << "object_size " << spec.min_size << ' ' << spec.max_size << '\n'
      << "photometric " << spec.photometric << '\n'
      << "pixel_noise " << spec.pixel_noise << '\n'
      << "clips " << entries.size() << '\n';
  for (const auto& e : entries) {
    out << "clip " << e.name << " seed " << e.seed << " files";
    for (const auto& f : e.files) out << ' ' << f;
    out << '\n';
  }
  if (!out) throw IoError(path, "write failed");
}

}  // namespace stcl
