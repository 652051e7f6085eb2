#include "stcl/segnet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>

#include "stcl/errors.hpp"

namespace stcl {

const Tensor& Network::param(std::string_view name) const {
  for (const auto& [n, t] : params)
    if (n == name) return t;
  throw StateError("no parameter named '" + std::string(name) + "'");
}

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.second.size();
  return n;
}

void Network::zero_grad() {
  for (auto& p : params) p.second.zero_grad();
}

namespace {

struct ParamShape {
  std::string name;
  Shape shape;
};

std::vector<ParamShape> layout(const NetConfig& c) {
  const std::size_t classes = c.max_objects + 1;
  return {
      {"key.conv1.w", {c.hidden1, 3, 3, 3}},
      {"key.conv1.b", {c.hidden1}},
      {"key.conv2.w", {c.hidden2, c.hidden1, 3, 3}},
      {"key.conv2.b", {c.hidden2}},
      {"key.proj.w", {c.key_channels, c.hidden2, 3, 3}},
      {"key.proj.b", {c.key_channels}},
      {"value.conv1.w", {c.hidden1, 3, 3, 3}},
      {"value.conv1.b", {c.hidden1}},
      {"value.conv2.w", {c.hidden2, c.hidden1, 3, 3}},
      {"value.conv2.b", {c.hidden2}},
      {"value.proj.w", {c.value_channels, c.hidden2 + classes, 3, 3}},
      {"value.proj.b", {c.value_channels}},
      {"decoder.conv.w", {c.decoder_channels, c.value_channels + c.hidden2, 3, 3}},
      {"decoder.conv.b", {c.decoder_channels}},
      {"decoder.out.w", {classes, c.decoder_channels, 1, 1}},
      {"decoder.out.b", {classes}},
  };
}

void require_divisible(const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw DimensionError("expected a 3×H×W image tensor");
  if (image.dim(1) % kEncoderStride != 0 || image.dim(2) % kEncoderStride != 0) {
    throw DimensionError("image extents " + shape_string(image.shape()) + " are not divisible by 4");
  }
}

// Two stride-2 stages with SiLU; returns hidden2 × H/4 × W/4.
Tensor backbone(Tape& tape, const Network& net, const Tensor& image, std::string_view prefix) {
  const std::string p(prefix);
  Tensor x = silu(tape, conv2d(tape, image, net.param(p + ".conv1.w"), net.param(p + ".conv1.b"), 2, 1));
  return silu(tape, conv2d(tape, x, net.param(p + ".conv2.w"), net.param(p + ".conv2.b"), 2, 1));
}

}  // namespace

Network init_network(const NetConfig& config, std::uint64_t seed) {
  Network net;
  net.config = config;
  auto rng = make_rng(seed, 0x5e6);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (const auto& [name, shape] : layout(config)) {
    Tensor t = Tensor::zeros(shape, true);
    if (shape.size() == 4) {
      const double fan_in = static_cast<double>(shape[1] * shape[2] * shape[3]);
      const double sd = std::sqrt(2.0 / fan_in);
      for (double& v : t.mutable_data()) v = sd * normal(rng);
    }
    net.params.emplace_back(name, t);
  }
  return net;
}

Network network_from_params(const NetConfig& config, const std::vector<NamedTensor>& stored) {
  Network net;
  net.config = config;
  for (const auto& [name, shape] : layout(config)) {
    auto it = std::find_if(stored.begin(), stored.end(), [&](const NamedTensor& s) { return s.first == name; });
    if (it == stored.end()) throw StateError("checkpoint lacks parameter '" + name + "'");
    if (it->second.shape() != shape) {
      throw DimensionError("parameter '" + name + "' has extents " + shape_string(it->second.shape()) +
                           ", expected " + shape_string(shape));
    }
    net.params.emplace_back(name, it->second.clone(true));
  }
  return net;
}

Tensor image_tensor(const Image& image) { return Tensor::from({3, image.height, image.width}, image.pixels); }

KeyFeatures encode_key(Tape& tape, const Network& net, const Tensor& image) {
  require_divisible(image);
  KeyFeatures out;
  out.skip = backbone(tape, net, image, "key");
  Tensor k = conv2d(tape, out.skip, net.param("key.proj.w"), net.param("key.proj.b"), 1, 1);
  out.key = FeatureGrid::from_chw(tape, k, k.dim(1), k.dim(2));
  return out;
}

Mask downsample_mask(const Mask& mask, std::size_t factor) {
  if (factor == 0 || mask.width % factor != 0 || mask.height % factor != 0) {
    throw DimensionError("mask extents are not divisible by the downsampling factor");
  }
  Mask out(mask.width / factor, mask.height / factor);
  std::vector<std::size_t> counts(256);
  for (std::size_t r = 0; r < out.height; ++r)
    for (std::size_t c = 0; c < out.width; ++c) {
      std::fill(counts.begin(), counts.end(), 0);
      for (std::size_t dy = 0; dy < factor; ++dy)
        for (std::size_t dx = 0; dx < factor; ++dx) ++counts[mask.at(r * factor + dy, c * factor + dx)];
      out.at(r, c) = static_cast<std::uint8_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    }
  return out;
}

Tensor one_hot(const Mask& mask, std::size_t classes) {
  const std::size_t n = mask.width * mask.height;
  std::vector<double> planes(classes * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t id = mask.labels[i];
    if (id >= classes) throw LabelError("mask label " + std::to_string(id) + " exceeds " + std::to_string(classes - 1));
    planes[id * n + i] = 1.0;
  }
  return Tensor::from({classes, mask.height, mask.width}, std::move(planes));
}

Tensor encode_value(Tape& tape, const Network& net, const Tensor& image, const Mask& mask) {
  require_divisible(image);
  if (mask.height != image.dim(1) || mask.width != image.dim(2)) throw DimensionError("mask and image extents differ");
  const std::size_t classes = net.config.max_objects + 1;
  if (mask.max_label() >= classes) {
    throw LabelError("mask label " + std::to_string(mask.max_label()) + " exceeds the object budget " +
                     std::to_string(net.config.max_objects));
  }
  Tensor features = backbone(tape, net, image, "value");
  Tensor planes = one_hot(downsample_mask(mask, kEncoderStride), classes);
  Tensor v = conv2d(tape, concat_rows(tape, {features, planes}), net.param("value.proj.w"), net.param("value.proj.b"), 1, 1);
  return reshape(tape, v, {v.dim(0), v.dim(1) * v.dim(2)});
}

Tensor decode_mask(Tape& tape, const Network& net, const Tensor& vq, const KeyFeatures& query) {
  const std::size_t h = query.skip.dim(1), w = query.skip.dim(2);
  if (vq.rank() != 2 || vq.dim(0) != net.config.value_channels || vq.dim(1) != h * w) {
    throw DimensionError("readout " + shape_string(vq.shape()) + " does not match the query lattice");
  }
  Tensor x = concat_rows(tape, {reshape(tape, vq, {vq.dim(0), h, w}), query.skip});
  x = silu(tape, conv2d(tape, x, net.param("decoder.conv.w"), net.param("decoder.conv.b"), 1, 1));
  x = upsample_bilinear(tape, x, kEncoderStride);
  return conv2d(tape, x, net.param("decoder.out.w"), net.param("decoder.out.b"), 1, 0);
}

Tensor segmentation_loss(Tape& tape, const Tensor& logits, const Mask& truth) {
  const std::size_t k = logits.dim(0), n = logits.dim(1) * logits.dim(2);
  if (truth.height != logits.dim(1) || truth.width != logits.dim(2)) throw DimensionError("truth mask extents differ from logits");
  if (truth.max_label() >= k) throw LabelError("truth label " + std::to_string(truth.max_label()) + " has no logit");
  std::vector<std::size_t> labels(truth.labels.begin(), truth.labels.end());
  Tensor table = transpose(tape, reshape(tape, logits, {k, n}));
  return cross_entropy(tape, table, labels);
}

Mask argmax_mask(const Tensor& logits) {
  const std::size_t k = logits.dim(0), h = logits.dim(1), w = logits.dim(2);
  Mask out(w, h);
  const auto d = logits.data();
  for (std::size_t i = 0; i < h * w; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (d[c * h * w + i] > d[best * h * w + i]) best = c;
    out.labels[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

FramePrediction predict_frame(Tape& tape, const Network& net, const MemoryBank& memory, const Tensor& image,
                              Similarity measure) {
  FramePrediction out;
  out.features = encode_key(tape, net, image);
  AffinityMatrix affinity = memory_affinity(tape, memory, out.features.key, measure);
  out.logits = decode_mask(tape, net, readout(tape, memory, affinity), out.features);
  return out;
}

std::vector<Mask> infer_sequence(const Network& net, const std::vector<Image>& frames, const Mask& first_mask,
                                 const InferOptions& options) {
  std::vector<Mask> out;
  if (frames.size() <= 1) return out;
  Tape tape(Tape::Mode::inference);
  MemoryBank memory(options.memory_capacity, options.insertion_stride);
  const Tensor first = image_tensor(frames[0]);
  memory.insert(encode_key(tape, net, first).key, encode_value(tape, net, first, first_mask), 0);
  for (std::size_t t = 1; t < frames.size(); ++t) {
    const Tensor image = image_tensor(frames[t]);
    FramePrediction pred = predict_frame(tape, net, memory, image, options.measure);
    out.push_back(argmax_mask(pred.logits));
    if (t % options.insertion_stride == 0 && t + 1 < frames.size()) {
      memory.insert(pred.features.key, encode_value(tape, net, image, out.back()), t);
    }
  }
  return out;
}

// ---- checkpoints -----------------------------------------------------------

namespace {

constexpr std::uint8_t kCheckpointVersion = 1;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, std::size_t end, const std::string& origin)
      : bytes_(bytes), end_(end), origin_(origin) {}

  template <typename T>
  T take() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(T);
    return v;
  }
  std::string take_string(std::size_t n) {
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == end_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw IoError(origin_, "truncated checkpoint");
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t end_;
  const std::string& origin_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::vector<std::uint8_t> out{'S', 'T', 'C', 'L', kCheckpointVersion};
  std::uint64_t checksum = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : tensors) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_le<std::uint64_t>(out, d);
    const std::size_t start = out.size();
    for (double v : t.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    checksum = fnv1a64(out.data() + start, out.size() - start, checksum);
  }
  put_le<std::uint64_t>(out, checksum);
  return out;
}

std::vector<NamedTensor> decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  if (bytes.size() < 13 || std::memcmp(bytes.data(), "STCL", 4) != 0) throw IoError(origin, "not a checkpoint file");
  if (bytes[4] != kCheckpointVersion) throw IoError(origin, "unsupported checkpoint version " + std::to_string(bytes[4]));
  const std::size_t body_end = bytes.size() - 8;
  Reader in(bytes, body_end, origin);
  in.take_string(5);
  std::vector<NamedTensor> out;
  std::uint64_t checksum = 0xcbf29ce484222325ULL;
  while (!in.done()) {
    const auto name_len = in.take<std::uint32_t>();
    std::string name = in.take_string(name_len);
    const auto rank = in.take<std::uint32_t>();
    if (rank > 8) throw IoError(origin, "implausible tensor rank in checkpoint");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(in.take<std::uint64_t>());
    const std::size_t n = shape_size(shape);
    if (n > (body_end - in.position()) / 8) throw IoError(origin, "truncated checkpoint");
    const std::size_t start = in.position();
    std::vector<double> values(n);
    for (double& v : values) v = std::bit_cast<double>(in.take<std::uint64_t>());
    checksum = fnv1a64(bytes.data() + start, n * 8, checksum);
    out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  std::uint64_t stored = 0;
  for (std::size_t i = 0; i < 8; ++i) stored |= std::uint64_t{bytes[body_end + i]} << (8 * i);
  if (stored != checksum) throw IoError(origin, "checkpoint checksum mismatch");
  return out;
}

void write_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  const auto bytes = encode_checkpoint(tensors);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path, "write failed");
}

std::vector<NamedTensor> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes, path);
}

}  // namespace stcl
