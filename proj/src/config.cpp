#include "mps/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

using nlohmann::json;

namespace mps {

void RunConfig::propagate_seed() {
  generator.seed = seed;
  generator.teacher_seed = seed ^ 0x7465616368657221ULL;
  train.seed = seed;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string strip_comment(const std::string& line) {
  bool in_quote = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') in_quote = !in_quote;
    if (line[i] == '#' && !in_quote) return line.substr(0, i);
  }
  return line;
}

std::string unquote(const std::string& v) {
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
  return v;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return d;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad numeric value for " + key + ": '" + v + "'");
  }
}

long parse_long(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long n = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return n;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad integer value for " + key + ": '" + v + "'");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const unsigned long long n = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return n;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad unsigned value for " + key + ": '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw std::invalid_argument("config: bad boolean for " + key + ": '" + v + "'");
}

std::vector<Dimension> parse_dimensions(const std::string& key, const std::string& v) {
  std::vector<Dimension> dims;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    dims.push_back(dimension_from_string(item));
  }
  if (dims.empty()) throw std::invalid_argument("config: no dimensions given for " + key);
  return dims;
}

}  // namespace

ConfigKV parse_config_text(const std::string& text) {
  ConfigKV kv;
  std::string section;
  std::stringstream ss(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(ss, raw)) {
    ++line_no;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("config: bad section header on line " + std::to_string(line_no));
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: expected key = value on line " + std::to_string(line_no));
    const std::string key = trim(line.substr(0, eq));
    const std::string value = unquote(trim(line.substr(eq + 1)));
    if (key.empty())
      throw std::invalid_argument("config: empty key on line " + std::to_string(line_no));
    kv[section.empty() ? key : section + "." + key] = value;
  }
  return kv;
}

ConfigKV parse_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

void apply_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  // top level
  if (key == "seed") {
    cfg.seed = parse_u64(key, value);
    cfg.propagate_seed();
    return;
  }
  if (key == "threads") {
    cfg.threads = static_cast<int>(parse_long(key, value));
    return;
  }
  // generator
  if (key == "generator.seed") { cfg.generator.seed = parse_u64(key, value); return; }
  if (key == "generator.teacher_seed") { cfg.generator.teacher_seed = parse_u64(key, value); return; }
  if (key == "generator.prompts_per_category") { cfg.generator.prompts_per_category = static_cast<int>(parse_long(key, value)); return; }
  if (key == "generator.images_per_prompt") { cfg.generator.images_per_prompt = static_cast<int>(parse_long(key, value)); return; }
  if (key == "generator.same_model_fraction") { cfg.generator.same_model_fraction = parse_double(key, value); return; }
  if (key == "generator.annotator_noise") { cfg.generator.annotator_noise = parse_double(key, value); return; }
  if (key == "generator.tie_band") { cfg.generator.tie_band = parse_double(key, value); return; }
  if (key == "generator.image_size") {
    cfg.generator.image_size = static_cast<int>(parse_long(key, value));
    cfg.model.encoder.image_size = cfg.generator.image_size;
    return;
  }
  if (key == "generator.corr_aes_overall") { cfg.generator.corr_aes_overall = parse_double(key, value); return; }
  if (key == "generator.corr_align_overall") { cfg.generator.corr_align_overall = parse_double(key, value); return; }
  if (key == "generator.corr_aes_align") { cfg.generator.corr_aes_align = parse_double(key, value); return; }
  if (key == "generator.corr_detail") { cfg.generator.corr_detail = parse_double(key, value); return; }
  // split
  if (key == "split.train") { cfg.split.train = parse_double(key, value); return; }
  if (key == "split.val") { cfg.split.val = parse_double(key, value); return; }
  if (key == "split.test") { cfg.split.test = parse_double(key, value); return; }
  // model
  if (key == "model.width") { cfg.model.encoder.width = static_cast<int>(parse_long(key, value)); return; }
  if (key == "model.blocks") { cfg.model.encoder.blocks = static_cast<int>(parse_long(key, value)); return; }
  if (key == "model.heads") { cfg.model.encoder.heads = static_cast<int>(parse_long(key, value)); return; }
  if (key == "model.max_tokens") { cfg.model.encoder.max_tokens = static_cast<int>(parse_long(key, value)); return; }
  if (key == "model.patch") { cfg.model.encoder.patch = static_cast<int>(parse_long(key, value)); return; }
  if (key == "model.vocab_cap") { cfg.vocab_cap = static_cast<int>(parse_long(key, value)); return; }
  if (key == "model.mask_mode") { cfg.model.head.mask_mode = mask_mode_from_string(value); return; }
  if (key == "model.threshold") { cfg.model.head.threshold = parse_double(key, value); return; }
  if (key == "model.straight_through") { cfg.model.head.straight_through = parse_bool(key, value); return; }
  if (key == "model.soft_scale") { cfg.model.head.soft_scale = parse_double(key, value); return; }
  // train
  if (key == "train.steps") { cfg.train.steps = parse_long(key, value); return; }
  if (key == "train.batch_size") { cfg.train.batch_size = static_cast<int>(parse_long(key, value)); return; }
  if (key == "train.peak_lr") { cfg.train.peak_lr = parse_double(key, value); return; }
  if (key == "train.warmup_steps") { cfg.train.warmup_steps = parse_long(key, value); return; }
  if (key == "train.weight_decay") { cfg.train.weight_decay = parse_double(key, value); return; }
  if (key == "train.seed") { cfg.train.seed = parse_u64(key, value); return; }
  if (key == "train.dimensions") { cfg.train.dimensions = parse_dimensions(key, value); return; }
  if (key == "train.val_every") { cfg.train.val_every = parse_long(key, value); return; }
  if (key == "train.checkpoint_every") { cfg.train.checkpoint_every = parse_long(key, value); return; }
  throw std::invalid_argument("config: unknown key '" + key + "'");
}

RunConfig run_config_from_kv(const ConfigKV& kv) {
  RunConfig cfg;
  cfg.propagate_seed();
  // apply the master seed first so section seeds can still override it
  auto seed_it = kv.find("seed");
  if (seed_it != kv.end()) apply_config_key(cfg, "seed", seed_it->second);
  for (const auto& [key, value] : kv) {
    if (key == "seed") continue;
    apply_config_key(cfg, key, value);
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  return run_config_from_kv(parse_config_file(path));
}

std::string run_config_dump(const RunConfig& cfg) {
  json dims = json::array();
  for (Dimension d : cfg.train.dimensions) dims.push_back(to_string(d));
  json j{{"seed", cfg.seed},
         {"threads", cfg.threads},
         {"generator",
          {{"seed", cfg.generator.seed},
           {"teacher_seed", cfg.generator.teacher_seed},
           {"prompts_per_category", cfg.generator.prompts_per_category},
           {"images_per_prompt", cfg.generator.images_per_prompt},
           {"same_model_fraction", cfg.generator.same_model_fraction},
           {"annotator_noise", cfg.generator.annotator_noise},
           {"tie_band", cfg.generator.tie_band},
           {"image_size", cfg.generator.image_size},
           {"corr_aes_overall", cfg.generator.corr_aes_overall},
           {"corr_align_overall", cfg.generator.corr_align_overall},
           {"corr_aes_align", cfg.generator.corr_aes_align},
           {"corr_detail", cfg.generator.corr_detail}}},
         {"split", {{"train", cfg.split.train}, {"val", cfg.split.val}, {"test", cfg.split.test}}},
         {"model",
          {{"width", cfg.model.encoder.width},
           {"blocks", cfg.model.encoder.blocks},
           {"heads", cfg.model.encoder.heads},
           {"max_tokens", cfg.model.encoder.max_tokens},
           {"patch", cfg.model.encoder.patch},
           {"image_size", cfg.model.encoder.image_size},
           {"vocab_cap", cfg.vocab_cap},
           {"mask_mode", to_string(cfg.model.head.mask_mode)},
           {"threshold", cfg.model.head.threshold},
           {"straight_through", cfg.model.head.straight_through},
           {"soft_scale", cfg.model.head.soft_scale}}},
         {"train",
          {{"steps", cfg.train.steps},
           {"batch_size", cfg.train.batch_size},
           {"peak_lr", cfg.train.peak_lr},
           {"warmup_steps", cfg.train.warmup_steps},
           {"weight_decay", cfg.train.weight_decay},
           {"seed", cfg.train.seed},
           {"dimensions", dims},
           {"val_every", cfg.train.val_every},
           {"checkpoint_every", cfg.train.checkpoint_every}}}};
  return j.dump();
}

}  // namespace mps
