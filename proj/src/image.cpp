#include "stcl/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "stcl/errors.hpp"

namespace stcl {

std::size_t Mask::count(std::uint8_t id) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), id));
}

std::uint8_t Mask::max_label() const {
  return labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end());
}

namespace {

void write_netpbm(const std::string& path, const char* magic, std::size_t w, std::size_t h,
                  const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot open for writing");
  out << magic << '\n' << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path, "write failed");
}

// Reads the header tokens, skipping '#' comments, then exactly `channels*w*h` bytes.
std::vector<std::uint8_t> read_netpbm(const std::string& path, const std::string& magic, std::size_t channels,
                                      std::size_t& w, std::size_t& h) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open for reading");
  auto token = [&]() {
    std::string t;
    while (in >> std::ws && in.peek() == '#') {
      std::string skip;
      std::getline(in, skip);
    }
    in >> t;
    return t;
  };
  if (token() != magic) throw IoError(path, "expected " + magic + " header");
  std::size_t maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw IoError(path, "malformed header");
  }
  if (maxval != 255) throw IoError(path, "only maxval 255 is supported");
  in.get();
  std::vector<std::uint8_t> bytes(channels * w * h);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw IoError(path, "truncated raster");
  return bytes;
}

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

void write_ppm(const std::string& path, const Image& image) {
  std::vector<std::uint8_t> bytes(3 * image.width * image.height);
  for (std::size_t r = 0; r < image.height; ++r)
    for (std::size_t c = 0; c < image.width; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double v = std::clamp(image.at(ch, r, c), 0.0, 1.0);
        bytes[(r * image.width + c) * 3 + ch] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
  write_netpbm(path, "P6", image.width, image.height, bytes);
}

Image read_ppm(const std::string& path) {
  std::size_t w = 0, h = 0;
  const auto bytes = read_netpbm(path, "P6", 3, w, h);
  Image image(w, h);
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch) image.at(ch, r, c) = bytes[(r * w + c) * 3 + ch] / 255.0;
  return image;
}

void write_pgm(const std::string& path, const Mask& mask) { write_netpbm(path, "P5", mask.width, mask.height, mask.labels); }

Mask read_pgm(const std::string& path) {
  std::size_t w = 0, h = 0;
  auto bytes = read_netpbm(path, "P5", 1, w, h);
  Mask mask;
  mask.width = w;
  mask.height = h;
  mask.labels = std::move(bytes);
  return mask;
}

std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::uint64_t state = seed;
  std::uint64_t a = splitmix64(state);
  state ^= stream * 0xd1342543de82ef95ULL;
  std::uint64_t b = splitmix64(state);
  state ^= index * 0xa0761d6478bd642fULL;
  std::uint64_t c = splitmix64(state);
  std::seed_seq seq{static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32),
                    static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(c >> 32)};
  return std::mt19937_64(seq);
}

std::uint64_t fnv1a64(const void* data, std::size_t length, std::uint64_t state) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < length; ++i) {
    state ^= p[i];
    state *= 0x100000001b3ULL;
  }
  return state;
}

}  // namespace stcl
