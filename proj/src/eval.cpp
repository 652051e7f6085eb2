#include "stcl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>

#include "stcl/errors.hpp"
#include "stcl/pixelcorr.hpp"

namespace stcl {

double region_J(const Mask& pred, const Mask& truth, std::uint8_t id) {
  if (pred.labels.size() != truth.labels.size()) throw DimensionError("region_J: mask extents differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    const bool a = pred.labels[i] == id, b = truth.labels[i] == id;
    inter += (a && b) ? 1 : 0;
    uni += (a || b) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::size_t default_contour_tolerance(std::size_t width, std::size_t height) {
  const double diag = std::hypot(static_cast<double>(width), static_cast<double>(height));
  return static_cast<std::size_t>(std::ceil(0.008 * diag));
}

std::vector<std::uint8_t> boundary_map(const Mask& mask, std::uint8_t id) {
  std::vector<std::uint8_t> out(mask.labels.size(), 0);
  const auto h = static_cast<long>(mask.height), w = static_cast<long>(mask.width);
  for (long r = 0; r < h; ++r)
    for (long c = 0; c < w; ++c) {
      if (mask.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) != id) continue;
      const long nbr[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      for (const auto& n : nbr) {
        if (n[0] < 0 || n[1] < 0 || n[0] >= h || n[1] >= w) continue;
        if (mask.at(static_cast<std::size_t>(n[0]), static_cast<std::size_t>(n[1])) != id) {
          out[static_cast<std::size_t>(r * w + c)] = 1;
          break;
        }
      }
    }
  return out;
}

namespace {

// Fraction of `from` boundary pixels with a `to` boundary pixel inside the disk.
double matched_fraction(const std::vector<std::uint8_t>& from, const std::vector<std::uint8_t>& to, long width,
                        long height, long tol) {
  std::size_t total = 0, hit = 0;
  for (long r = 0; r < height; ++r)
    for (long c = 0; c < width; ++c) {
      if (!from[static_cast<std::size_t>(r * width + c)]) continue;
      ++total;
      bool found = false;
      for (long dy = -tol; dy <= tol && !found; ++dy)
        for (long dx = -tol; dx <= tol && !found; ++dx) {
          if (dx * dx + dy * dy > tol * tol) continue;
          const long y = r + dy, x = c + dx;
          if (y < 0 || x < 0 || y >= height || x >= width) continue;
          found = to[static_cast<std::size_t>(y * width + x)] != 0;
        }
      hit += found ? 1 : 0;
    }
  return total == 0 ? 0.0 : static_cast<double>(hit) / static_cast<double>(total);
}

}  // namespace

double contour_F(const Mask& pred, const Mask& truth, std::uint8_t id, std::size_t tolerance) {
  if (pred.labels.size() != truth.labels.size()) throw DimensionError("contour_F: mask extents differ");
  const auto bp = boundary_map(pred, id);
  const auto bt = boundary_map(truth, id);
  const bool pred_empty = std::none_of(bp.begin(), bp.end(), [](std::uint8_t v) { return v != 0; });
  const bool truth_empty = std::none_of(bt.begin(), bt.end(), [](std::uint8_t v) { return v != 0; });
  if (pred_empty && truth_empty) return 1.0;
  if (pred_empty || truth_empty) return 0.0;
  const auto w = static_cast<long>(pred.width), h = static_cast<long>(pred.height);
  const auto tol = static_cast<long>(tolerance);
  const double precision = matched_fraction(bp, bt, w, h, tol);
  const double recall = matched_fraction(bt, bp, w, h, tol);
  return precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
}

double correspondence_accuracy(const Network& net, const VideoClip& clip, std::size_t t, std::size_t t2,
                               std::size_t tolerance, Similarity measure) {
  Tape tape(Tape::Mode::inference);
  const FeatureGrid src = encode_key(tape, net, image_tensor(clip.frames.at(t))).key;
  const FeatureGrid dst = encode_key(tape, net, image_tensor(clip.frames.at(t2))).key;
  const auto truth = ground_truth_correspondence(clip, t, t2);
  const std::size_t width = clip.spec.width;
  const std::size_t half = kEncoderStride / 2;

  // Every target-lattice position acts as an anchor.
  AnchorSet all;
  all.features = dst.values;
  all.positions.resize(dst.positions());
  for (std::size_t i = 0; i < dst.positions(); ++i) all.positions[i] = i;
  const PseudoLabels best = pseudo_labels(anchor_affinity(tape, src, all, measure));

  std::size_t mapped = 0, correct = 0;
  for (std::size_t r = 0; r < src.height; ++r)
    for (std::size_t c = 0; c < src.width; ++c) {
      const std::size_t pixel = (r * kEncoderStride + half) * width + c * kEncoderStride + half;
      if (truth[pixel] < 0) continue;
      ++mapped;
      const auto target = static_cast<std::size_t>(truth[pixel]);
      const long tr = static_cast<long>(target / width / kEncoderStride);
      const long tc = static_cast<long>(target % width / kEncoderStride);
      const std::size_t j = best.j_star[src.position(r, c)];
      const long pr = static_cast<long>(j / dst.width), pc = static_cast<long>(j % dst.width);
      if (std::max(std::abs(pr - tr), std::abs(pc - tc)) <= static_cast<long>(tolerance)) ++correct;
    }
  return mapped == 0 ? 1.0 : static_cast<double>(correct) / static_cast<double>(mapped);
}

EvalReport evaluate_clips(const Network& net, const std::vector<VideoClip>& clips, const EvalOptions& options,
                          std::uint64_t config_hash, std::vector<std::vector<Mask>>* predictions) {
  EvalReport report;
  report.config_hash = config_hash;
  std::map<std::uint8_t, std::pair<double, double>> sums;
  std::map<std::uint8_t, std::size_t> counts;
  double j_total = 0.0, f_total = 0.0, corr_total = 0.0;
  std::size_t samples = 0, corr_clips = 0;
  for (const auto& clip : clips) {
    report.clip_ids.push_back(clip.seed);
    const auto masks = infer_sequence(net, clip.frames, clip.masks.front(), options.infer);
    const std::size_t tol = default_contour_tolerance(clip.spec.width, clip.spec.height);
    for (std::size_t k = 0; k < masks.size(); ++k) {
      const Mask& truth = clip.masks[k + 1];
      for (const auto& obj : clip.objects) {
        const double j = region_J(masks[k], truth, obj.id);
        const double f = contour_F(masks[k], truth, obj.id, tol);
        sums[obj.id].first += j;
        sums[obj.id].second += f;
        ++counts[obj.id];
        j_total += j;
        f_total += f;
        ++samples;
      }
    }
    if (clip.length() > 1) {
      corr_total += correspondence_accuracy(net, clip, 0, clip.length() - 1, options.corr_tolerance, options.infer.measure);
      ++corr_clips;
    }
    if (predictions) predictions->push_back(masks);
  }
  for (const auto& [id, s] : sums) {
    report.object_ids.push_back(id);
    report.object_J.push_back(s.first / static_cast<double>(counts[id]));
    report.object_F.push_back(s.second / static_cast<double>(counts[id]));
  }
  if (samples > 0) {
    report.J_mean = j_total / static_cast<double>(samples);
    report.F_mean = f_total / static_cast<double>(samples);
  } else {
    report.J_mean = report.F_mean = 1.0;
  }
  report.JF_mean = (report.J_mean + report.F_mean) / 2.0;
  report.corr_acc = corr_clips > 0 ? corr_total / static_cast<double>(corr_clips) : 1.0;
  return report;
}

void write_eval_csv(std::ostream& out, const EvalReport& report) {
  out << "object,J,F\n";
  for (std::size_t i = 0; i < report.object_ids.size(); ++i) {
    out << static_cast<int>(report.object_ids[i]) << ',' << report.object_J[i] << ',' << report.object_F[i] << '\n';
  }
  out << "mean," << report.J_mean << ',' << report.F_mean << '\n'
      << "JF_mean," << report.JF_mean << '\n'
      << "corr_acc," << report.corr_acc << '\n'
      << "clips," << report.clip_ids.size() << '\n'
      << "config_hash," << report.config_hash << '\n';
}

}  // namespace stcl
