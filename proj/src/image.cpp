#include "mps/image.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mps {

namespace {

void put_u32(std::ofstream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                        static_cast<unsigned char>((v >> 8) & 0xFF),
                        static_cast<unsigned char>((v >> 16) & 0xFF),
                        static_cast<unsigned char>((v >> 24) & 0xFF)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw std::runtime_error("load_image: truncated header");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_image(const SyntheticImage& img, const std::string& path) {
  if (img.pixels.size() !=
      static_cast<std::size_t>(img.height) * img.width * img.channels)
    throw std::invalid_argument("save_image: pixel buffer does not match dimensions");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_image: cannot open " + path);
  put_u32(out, static_cast<std::uint32_t>(img.height));
  put_u32(out, static_cast<std::uint32_t>(img.width));
  out.write(reinterpret_cast<const char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size() * sizeof(float)));
  if (!out) throw std::runtime_error("save_image: write failed for " + path);
}

SyntheticImage load_image(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_image: cannot open " + path);
  SyntheticImage img;
  img.height = static_cast<int>(get_u32(in));
  img.width = static_cast<int>(get_u32(in));
  if (img.height <= 0 || img.width <= 0)
    throw std::runtime_error("load_image: bad dimensions in " + path);

  in.seekg(0, std::ios::end);
  const auto total = static_cast<std::size_t>(in.tellg());
  const std::size_t payload = total - 8;
  const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
  if (payload % (plane * sizeof(float)) != 0)
    throw std::runtime_error("load_image: payload size does not tile HxW in " + path);
  img.channels = static_cast<int>(payload / (plane * sizeof(float)));

  img.pixels.resize(plane * img.channels);
  in.seekg(8, std::ios::beg);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(payload));
  if (!in) throw std::runtime_error("load_image: truncated payload in " + path);
  return img;
}

}  // namespace mps
