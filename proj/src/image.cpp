#include "bedseg/image.hpp"

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>

namespace bedseg {

namespace {

bool is_pnm_space(int c) {
  return c == ' ' || c == '\t' || c == '\r' || c == '\n';
}

// Reads a decimal header field. Comments ('#') are rejected outright: the
// on-disk format is pinned to canonical headers so round trips stay
// byte-exact.
long read_header_int(std::istream& in, const char* what) {
  int c = in.get();
  while (c != EOF && is_pnm_space(c)) c = in.get();
  if (c == '#') throw FormatError(std::string("pnm: comment in header (") + what + ")");
  if (c == EOF || !std::isdigit(c)) throw FormatError(std::string("pnm: expected ") + what);
  long v = 0;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    if (v > 1 << 30) throw FormatError(std::string("pnm: ") + what + " out of range");
    c = in.get();
  }
  if (c != EOF) in.unget();
  return v;
}

}  // namespace

Image Image::zeros(int width, int height, int channels) {
  Image img;
  img.width = width;
  img.height = height;
  img.channels = channels;
  img.data.assign(static_cast<std::size_t>(width) * height * channels, 0.0f);
  return img;
}

Image read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());

  char m0 = 0, m1 = 0;
  in.get(m0);
  in.get(m1);
  if (!in || m0 != 'P' || (m1 != '5' && m1 != '6'))
    throw FormatError("pnm: bad magic in " + path.string());
  const int channels = (m1 == '5') ? 1 : 3;

  const long width = read_header_int(in, "width");
  const long height = read_header_int(in, "height");
  const long maxval = read_header_int(in, "maxval");
  if (width <= 0 || height <= 0) throw FormatError("pnm: non-positive dimensions");
  if (maxval != 255 && !(maxval == 65535 && channels == 1))
    throw FormatError("pnm: unsupported maxval " + std::to_string(maxval));

  int sep = in.get();
  if (sep == EOF || !is_pnm_space(sep)) throw FormatError("pnm: missing separator after maxval");

  const std::size_t samples = static_cast<std::size_t>(width) * height * channels;
  const std::size_t bytes_per_sample = (maxval == 65535) ? 2 : 1;
  std::vector<unsigned char> raw(samples * bytes_per_sample);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(in.gcount()) != raw.size())
    throw LengthError("pnm: truncated payload in " + path.string());
  if (in.peek() != EOF) throw LengthError("pnm: trailing bytes in " + path.string());

  Image img;
  img.width = static_cast<int>(width);
  img.height = static_cast<int>(height);
  img.channels = channels;
  img.data.resize(samples);
  if (maxval == 255) {
    for (std::size_t i = 0; i < samples; ++i) img.data[i] = raw[i] / 255.0f;
  } else {
    for (std::size_t i = 0; i < samples; ++i) {
      const unsigned v = (static_cast<unsigned>(raw[2 * i]) << 8) | raw[2 * i + 1];
      img.data[i] = v / 65535.0f;
    }
  }
  return img;
}

void write_image(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 1 && img.channels != 3)
    throw std::invalid_argument("write_image: channels must be 1 or 3");
  if (img.width <= 0 || img.height <= 0)
    throw std::invalid_argument("write_image: empty image");
  const std::size_t samples = static_cast<std::size_t>(img.width) * img.height * img.channels;
  if (img.data.size() != samples) throw DimensionError("write_image: data length mismatch");

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");

  out << (img.channels == 1 ? "P5" : "P6") << '\n'
      << img.width << ' ' << img.height << '\n'
      << 255 << '\n';
  std::vector<unsigned char> raw(samples);
  for (std::size_t i = 0; i < samples; ++i) {
    const float v = img.data[i];
    if (!(v >= 0.0f && v <= 1.0f))
      throw std::invalid_argument("write_image: value outside [0,1]");
    raw[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

float quantize8(float v) {
  return static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
}

PlaneF gray_plane(const Image& img) {
  if (img.channels != 1) throw DimensionError("gray_plane: image is not single-channel");
  PlaneF p(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) p(y, x) = img.at(y, x);
  return p;
}

Image image_from_plane(const PlaneF& plane) {
  Image img = Image::zeros(static_cast<int>(plane.cols()), static_cast<int>(plane.rows()), 1);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) img.at(y, x) = plane(y, x);
  return img;
}

}  // namespace bedseg
