#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "mps/training.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian f32; big-endian hosts need byte swaps");

using nlohmann::json;
namespace fs = std::filesystem;

namespace mps {

namespace {

json encoder_config_to_json(const EncoderConfig& c) {
  return json{{"width", c.width},           {"blocks", c.blocks},
              {"heads", c.heads},           {"max_tokens", c.max_tokens},
              {"patch", c.patch},           {"image_size", c.image_size},
              {"channels", c.channels},     {"vocab_size", c.vocab_size}};
}

EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig c;
  c.width = j.at("width").get<int>();
  c.blocks = j.at("blocks").get<int>();
  c.heads = j.at("heads").get<int>();
  c.max_tokens = j.at("max_tokens").get<int>();
  c.patch = j.at("patch").get<int>();
  c.image_size = j.at("image_size").get<int>();
  c.channels = j.at("channels").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  return c;
}

json head_config_to_json(const HeadConfig& c) {
  return json{{"mask_mode", to_string(c.mask_mode)},
              {"threshold", c.threshold},
              {"straight_through", c.straight_through},
              {"soft_scale", c.soft_scale}};
}

HeadConfig head_config_from_json(const json& j) {
  HeadConfig c;
  c.mask_mode = mask_mode_from_string(j.at("mask_mode").get<std::string>());
  c.threshold = j.at("threshold").get<double>();
  c.straight_through = j.at("straight_through").get<bool>();
  c.soft_scale = j.at("soft_scale").get<double>();
  return c;
}

}  // namespace

void save_checkpoint(const Model<float>& model, const Vocabulary& vocab, long step,
                     std::uint64_t rng_seed, std::uint64_t rng_state, const std::string& path) {
  auto params = model.named_params();
  json manifest = json::array();
  std::size_t offset = 0;  // in floats
  for (const auto& [name, t] : params) {
    manifest.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}, {"offset", offset}});
    offset += t.size();
  }
  json header{{"version", checkpoint_version},
              {"config", {{"encoder", encoder_config_to_json(model.cfg.encoder)},
                          {"head", head_config_to_json(model.cfg.head)}}},
              {"step", step},
              {"rng", {{"seed", rng_seed}, {"state", rng_state}}},
              {"vocab", vocab.tokens()},
              {"payload_floats", offset},
              {"manifest", manifest}};
  const std::string header_bytes = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot open " + tmp);
    out.write(checkpoint_magic, sizeof(checkpoint_magic));
    const std::uint32_t len = static_cast<std::uint32_t>(header_bytes.size());
    out.write(reinterpret_cast<const char*>(&len), 4);
    out.write(header_bytes.data(), static_cast<std::streamsize>(header_bytes.size()));
    for (const auto& [name, t] : params)
      out.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!out) throw std::runtime_error("save_checkpoint: write failed for " + tmp);
  }
  fs::rename(tmp, path);
}

namespace {

json read_header(std::ifstream& in, const std::string& path) {
  char magic[sizeof(checkpoint_magic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, checkpoint_magic, sizeof(magic)) != 0)
    throw std::runtime_error("load_checkpoint: " + path + " is not an MPS checkpoint");
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 4);
  if (!in) throw std::runtime_error("load_checkpoint: truncated header length in " + path);
  std::string header_bytes(len, '\0');
  in.read(header_bytes.data(), len);
  if (!in) throw std::runtime_error("load_checkpoint: truncated header in " + path);
  json header;
  try {
    header = json::parse(header_bytes);
  } catch (const json::exception& e) {
    throw std::runtime_error("load_checkpoint: bad header JSON in " + path + ": " + e.what());
  }
  const int version = header.at("version").get<int>();
  if (version != checkpoint_version)
    throw std::runtime_error("load_checkpoint: unsupported version " + std::to_string(version) +
                             " in " + path);
  return header;
}

}  // namespace

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  json header = read_header(in, path);

  LoadedCheckpoint out;
  out.vocab = Vocabulary(header.at("vocab").get<std::vector<std::string>>());
  out.step = header.at("step").get<long>();
  out.rng_seed = header.at("rng").at("seed").get<std::uint64_t>();
  out.rng_state = header.at("rng").at("state").get<std::uint64_t>();

  ModelConfig cfg;
  cfg.encoder = encoder_config_from_json(header.at("config").at("encoder"));
  cfg.head = head_config_from_json(header.at("config").at("head"));
  if (cfg.encoder.vocab_size != out.vocab.size())
    throw std::runtime_error("load_checkpoint: vocab size disagrees with config in " + path);

  Rng dummy(0);
  out.model = init_model<float>(dummy, cfg);
  auto params = out.model.named_params();

  const auto& manifest = header.at("manifest");
  if (manifest.size() != params.size())
    throw std::runtime_error("load_checkpoint: manifest entry count mismatch in " + path);

  const std::size_t payload_floats = header.at("payload_floats").get<std::size_t>();
  std::size_t expected = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = manifest.at(i);
    const std::string name = entry.at("name").get<std::string>();
    auto& t = params[i].second;
    if (name != params[i].first)
      throw std::runtime_error("load_checkpoint: manifest name mismatch: expected " +
                               params[i].first + ", found " + name);
    if (entry.at("rows").get<int>() != t.rows() || entry.at("cols").get<int>() != t.cols())
      throw std::runtime_error("load_checkpoint: shape mismatch for parameter " + name);
    if (entry.at("offset").get<std::size_t>() != expected)
      throw std::runtime_error("load_checkpoint: manifest offsets do not tile the payload at " +
                               name);
    expected += t.size();
  }
  if (expected != payload_floats)
    throw std::runtime_error("load_checkpoint: payload length mismatch in " + path);

  for (auto& [name, t] : params) {
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!in) throw std::runtime_error("load_checkpoint: truncated payload at parameter " + name);
  }
  // must now be at EOF
  char extra;
  in.read(&extra, 1);
  if (in.gcount() != 0)
    throw std::runtime_error("load_checkpoint: trailing bytes after payload in " + path);
  return out;
}

std::string checkpoint_header(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint_header: cannot open " + path);
  json header = read_header(in, path);
  header.erase("vocab");  // keep the inspect output readable
  return header.dump(2);
}

}  // namespace mps
