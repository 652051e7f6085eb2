#include "stcl/objectcorr.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "stcl/errors.hpp"
#include "stcl/image.hpp"

namespace stcl {

bool proposal_in_bounds(const Proposal& p, std::size_t image_width, std::size_t image_height) {
  if (!(p.w > 0.0) || !(p.h > 0.0)) return false;
  const double x1 = p.x - p.w / 2, x2 = p.x + p.w / 2;
  const double y1 = p.y - p.h / 2, y2 = p.y + p.h / 2;
  return x2 > 0.0 && y2 > 0.0 && x1 < static_cast<double>(image_width) && y1 < static_cast<double>(image_height);
}

std::size_t cluster_of(const Proposal& p, std::size_t image_width, std::size_t image_height, std::size_t cell) {
  const std::size_t cols = (image_width + cell - 1) / cell;
  const std::size_t rows = (image_height + cell - 1) / cell;
  // Centres outside the image fall into the nearest border cell.
  const auto clamp_cell = [cell](double v, std::size_t count) {
    const double c = std::floor(v / static_cast<double>(cell));
    return static_cast<std::size_t>(std::clamp(c, 0.0, static_cast<double>(count - 1)));
  };
  return clamp_cell(p.y, rows) * cols + clamp_cell(p.x, cols);
}

ProposalSet filter_proposals(const std::vector<Proposal>& raw, std::size_t image_width, std::size_t image_height,
                             std::size_t frame, const ProposalRules& rules) {
  ProposalSet set;
  set.frame = frame;
  set.image_width = image_width;
  set.image_height = image_height;
  const double image_area = static_cast<double>(image_width) * static_cast<double>(image_height);
  for (const auto& p : raw) {
    if (!proposal_in_bounds(p, image_width, image_height)) continue;
    if (p.source == ProposalSource::discovered) {
      const double aspect = p.w / p.h;
      const double area = p.w * p.h / image_area;
      if (aspect < rules.min_aspect || aspect > rules.max_aspect) continue;
      if (area < rules.min_area_fraction || area > rules.max_area_fraction) continue;
    }
    set.proposals.push_back(p);
    set.cluster_ids.push_back(cluster_of(p, image_width, image_height, rules.cluster_cell));
  }
  return set;
}

std::vector<std::size_t> cluster_and_sample_q(const ProposalSet& set, std::size_t q_size, std::uint64_t seed) {
  std::map<std::size_t, std::vector<std::size_t>> cells;
  for (std::size_t i = 0; i < set.proposals.size(); ++i) cells[set.cluster_ids.at(i)].push_back(i);
  std::vector<std::size_t> occupied;
  for (const auto& [cell, members] : cells) occupied.push_back(cell);
  auto rng = make_rng(seed, 0x51);
  std::shuffle(occupied.begin(), occupied.end(), rng);
  occupied.resize(std::min(q_size, occupied.size()));
  std::vector<std::size_t> picked;
  for (std::size_t cell : occupied) {
    const auto& members = cells[cell];
    std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
    picked.push_back(members[pick(rng)]);
  }
  return picked;
}

namespace {

// Bilinear taps of one lattice sample point; points beyond one texel outside the
// lattice contribute nothing.
void bilinear_taps(double y, double x, std::size_t height, std::size_t width, double weight,
                   std::vector<ColumnTap>& taps) {
  const auto h = static_cast<double>(height), w = static_cast<double>(width);
  if (y < -1.0 || y > h || x < -1.0 || x > w) return;
  y = std::max(y, 0.0);
  x = std::max(x, 0.0);
  auto y0 = static_cast<std::size_t>(std::floor(y));
  auto x0 = static_cast<std::size_t>(std::floor(x));
  std::size_t y1 = y0 + 1, x1 = x0 + 1;
  if (y0 >= height - 1) {
    y0 = y1 = height - 1;
    y = static_cast<double>(y0);
  }
  if (x0 >= width - 1) {
    x0 = x1 = width - 1;
    x = static_cast<double>(x0);
  }
  const double ly = y - static_cast<double>(y0), lx = x - static_cast<double>(x0);
  const double hy = 1.0 - ly, hx = 1.0 - lx;
  auto push = [&](std::size_t r, std::size_t c, double wt) {
    if (wt != 0.0) taps.push_back({r * width + c, weight * wt});
  };
  push(y0, x0, hy * hx);
  push(y0, x1, hy * lx);
  push(y1, x0, ly * hx);
  push(y1, x1, ly * lx);
}

std::vector<ColumnTap> roi_taps(const FeatureGrid& features, const Proposal& box, std::size_t stride,
                                std::size_t pool) {
  if (pool == 0) throw DimensionError("roi pooling grid must be at least 1x1");
  if (!proposal_in_bounds(box, features.width * stride, features.height * stride)) {
    throw DegenerateInputError("proposal lies entirely outside the feature lattice");
  }
  const double s = static_cast<double>(stride);
  const double fx1 = (box.x - box.w / 2) / s - 0.5;
  const double fy1 = (box.y - box.h / 2) / s - 0.5;
  const double bin_w = box.w / s / static_cast<double>(pool);
  const double bin_h = box.h / s / static_cast<double>(pool);
  const double weight = 1.0 / static_cast<double>(pool * pool);
  std::vector<ColumnTap> taps;
  for (std::size_t iy = 0; iy < pool; ++iy)
    for (std::size_t ix = 0; ix < pool; ++ix) {
      const double y = fy1 + (static_cast<double>(iy) + 0.5) * bin_h;
      const double x = fx1 + (static_cast<double>(ix) + 0.5) * bin_w;
      bilinear_taps(y, x, features.height, features.width, weight, taps);
    }
  return taps;
}

}  // namespace

Tensor roi_embed(Tape& tape, const FeatureGrid& features, const Proposal& box, std::size_t stride,
                 std::size_t pool) {
  return combine_columns(tape, features.values, {roi_taps(features, box, stride, pool)});
}

Tensor roi_embed_all(Tape& tape, const FeatureGrid& features, const std::vector<Proposal>& boxes,
                     std::size_t stride, std::size_t pool) {
  std::vector<std::vector<ColumnTap>> taps;
  taps.reserve(boxes.size());
  for (const auto& b : boxes) taps.push_back(roi_taps(features, b, stride, pool));
  return combine_columns(tape, features.values, taps);
}

AssignmentMatrix hungarian_match(const std::vector<double>& sim, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) throw StateError("bipartite matching on an empty table");
  if (sim.size() != rows * cols) throw DimensionError("similarity table size does not match its extents");
  // Minimum-cost assignment of every row into cols + rows columns, where the
  // extra zero-cost columns stand for "unmatched". Potentials follow the
  // shortest-augmenting-path formulation; arrays are 1-based.
  const std::size_t n = rows, m = cols + rows;
  auto cost = [&](std::size_t i, std::size_t j) { return j < cols ? -sim[i * cols + j] : 0.0; };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> owner(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  AssignmentMatrix out;
  out.rows = rows;
  out.cols = cols;
  out.table.assign(rows * cols, 0);
  std::vector<std::size_t> row_to_col(rows, cols);
  for (std::size_t j = 1; j <= cols; ++j)
    if (owner[j] != 0) row_to_col[owner[j] - 1] = j - 1;
  for (std::size_t i = 0; i < rows; ++i) {
    const std::size_t j = row_to_col[i];
    // A zero-weight real match is equivalent to leaving the row open; keep only gains.
    if (j < cols && sim[i * cols + j] > 0.0) {
      out.table[i * cols + j] = 1;
      out.total += sim[i * cols + j];
    }
  }
  return out;
}

std::map<std::size_t, std::size_t> positive_indices(const AssignmentMatrix& assign) {
  std::map<std::size_t, std::size_t> out;
  for (std::size_t i = 0; i < assign.rows; ++i) {
    const auto begin = assign.table.begin() + static_cast<std::ptrdiff_t>(i * assign.cols);
    const auto best = std::max_element(begin, begin + static_cast<std::ptrdiff_t>(assign.cols));
    if (*best == 1) out[i] = static_cast<std::size_t>(best - begin);
  }
  return out;
}

Tensor ocl_loss(Tape& tape, const Tensor& query_embeds, const Tensor& candidate_embeds,
                const std::map<std::size_t, std::size_t>& positives, const Tensor& negatives,
                const OclOptions& options) {
  if (positives.empty()) return Tensor::scalar(0.0);
  if (query_embeds.dim(0) != candidate_embeds.dim(0)) throw DimensionError("ocl_loss: embedding widths differ");
  if (!(options.temperature > 0.0)) throw NumericError("ocl_loss: temperature must be positive");
  std::vector<std::size_t> rows, cols;
  for (const auto& [i, j] : positives) {
    if (i >= query_embeds.dim(1) || j >= candidate_embeds.dim(1)) throw IndexError("ocl_loss: positive index out of range");
    rows.push_back(i);
    cols.push_back(j);
  }
  const bool normalize = options.measure == Similarity::cosine;
  const Similarity inner = normalize ? Similarity::dot : options.measure;
  auto prepare = [&](const Tensor& t) { return normalize ? l2_normalize_columns(tape, t) : t; };

  Tensor q = prepare(gather_columns(tape, query_embeds, rows));
  Tensor p = prepare(gather_columns(tape, candidate_embeds, cols));
  const std::size_t n = rows.size();
  Tensor pos_logit;
  if (inner == Similarity::dot) {
    pos_logit = reshape(tape, column_dot(tape, q, p), {n, 1});
  } else {
    // neg_l2 positives: read the diagonal of the pairwise table.
    Tensor full = pairwise_similarity(tape, q, p, inner);
    std::vector<std::size_t> diag(n);
    std::iota(diag.begin(), diag.end(), 0);
    pos_logit = reshape(tape, pick(tape, full, diag, diag), {n, 1});
  }
  Tensor logits = pos_logit;
  if (negatives.defined() && negatives.rank() == 2 && negatives.dim(1) > 0) {
    if (negatives.dim(0) != query_embeds.dim(0)) throw DimensionError("ocl_loss: negative width differs");
    Tensor neg_logits = pairwise_similarity(tape, q, prepare(negatives), inner);
    logits = concat_columns(tape, {pos_logit, neg_logits});
  }
  if (options.temperature != 1.0) logits = scale(tape, logits, 1.0 / options.temperature);
  if (options.form == LossForm::verbatim) {
    Tensor probs = softmax(tape, logits, 1);
    std::vector<std::size_t> r(n), zero(n, 0);
    std::iota(r.begin(), r.end(), 0);
    return scale(tape, log(tape, sum(tape, pick(tape, probs, r, zero))), -1.0);
  }
  const std::vector<std::size_t> labels(n, 0);
  return cross_entropy(tape, logits, labels);
}

// ---- proposal files ----------------------------------------------------------

void write_proposals(std::ostream& out, const std::vector<ProposalSet>& sets) {
  out.precision(17);
  for (const auto& set : sets) {
    for (const auto& p : set.proposals) {
      out << set.frame << ' ' << p.x << ' ' << p.y << ' ' << p.w << ' ' << p.h << ' '
          << (p.source == ProposalSource::annotated ? "annotated" : "discovered");
      if (p.object_id >= 0) out << ' ' << p.object_id;
      out << '\n';
    }
  }
}

void write_proposals(const std::string& path, const std::vector<ProposalSet>& sets) {
  std::ofstream out(path);
  if (!out) throw IoError(path, "cannot open for writing");
  write_proposals(out, sets);
  if (!out) throw IoError(path, "write failed");
}

std::vector<ProposalSet> read_proposals(std::istream& in, std::size_t frame_count, std::size_t image_width,
                                        std::size_t image_height, const ProposalRules& rules) {
  std::vector<std::vector<Proposal>> raw(frame_count);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    std::size_t frame = 0;
    Proposal p;
    std::string flag;
    if (!(fields >> frame >> p.x >> p.y >> p.w >> p.h >> flag)) {
      throw IoError("proposals", "malformed line " + std::to_string(line_no));
    }
    if (flag == "annotated" || flag == "a" || flag == "1") {
      p.source = ProposalSource::annotated;
    } else if (flag == "discovered" || flag == "d" || flag == "0") {
      p.source = ProposalSource::discovered;
    } else {
      throw IoError("proposals", "unknown source flag '" + flag + "' on line " + std::to_string(line_no));
    }
    int id = -1;
    if (fields >> id) p.object_id = id;
    if (frame >= frame_count) throw IoError("proposals", "frame index out of range on line " + std::to_string(line_no));
    raw[frame].push_back(p);
  }
  std::vector<ProposalSet> sets;
  for (std::size_t f = 0; f < frame_count; ++f) sets.push_back(filter_proposals(raw[f], image_width, image_height, f, rules));
  return sets;
}

std::vector<ProposalSet> read_proposals(const std::string& path, std::size_t frame_count,
                                        std::size_t image_width, std::size_t image_height,
                                        const ProposalRules& rules) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open for reading");
  try {
    return read_proposals(in, frame_count, image_width, image_height, rules);
  } catch (const IoError& e) {
    throw IoError(path, e.what());
  }
}

}  // namespace stcl
