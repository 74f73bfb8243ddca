#include "mps/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "mps/jsonl.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mps {

const char* to_string(Category c) {
  switch (c) {
    case Category::characters: return "characters";
    case Category::scenes: return "scenes";
    case Category::objects: return "objects";
    case Category::animals: return "animals";
    case Category::plants: return "plants";
    case Category::arts: return "arts";
    case Category::food: return "food";
  }
  throw std::invalid_argument("to_string: bad Category");
}

Category category_from_string(const std::string& s) {
  for (Category c : all_categories)
    if (s == to_string(c)) return c;
  throw std::invalid_argument("category_from_string: unknown category '" + s + "'");
}

void GeneratorConfig::validate() const {
  if (prompts_per_category < 1) throw std::invalid_argument("generator: prompts_per_category >= 1");
  if (images_per_prompt < 2 || images_per_prompt > 4)
    throw std::invalid_argument("generator: images_per_prompt must be in [2, 4]");
  if (same_model_fraction < 0 || same_model_fraction > 1)
    throw std::invalid_argument("generator: same_model_fraction must be in [0, 1]");
  if (annotator_noise < 0 || annotator_noise >= 1)
    throw std::invalid_argument("generator: annotator_noise must be in [0, 1)");
  if (tie_band < 0) throw std::invalid_argument("generator: tie_band must be >= 0");
  if (image_size < 1 || channels < 1) throw std::invalid_argument("generator: bad image dims");
}

void Dataset::rebuild_index() {
  prompt_index.clear();
  image_index.clear();
  for (std::size_t i = 0; i < prompts.size(); ++i) prompt_index[prompts[i].id] = i;
  for (std::size_t i = 0; i < images.size(); ++i) image_index[images[i].id] = i;
}

const Prompt& Dataset::prompt_of(const std::string& id) const {
  auto it = prompt_index.find(id);
  if (it == prompt_index.end()) throw std::out_of_range("Dataset: unknown prompt id " + id);
  return prompts[it->second];
}

const ImageRecord& Dataset::image_of(const std::string& id) const {
  auto it = image_index.find(id);
  if (it == image_index.end()) throw std::out_of_range("Dataset: unknown image id " + id);
  return images[it->second];
}

std::vector<const PreferencePair*> Dataset::split_pairs(const std::string& split) const {
  std::vector<const PreferencePair*> out;
  for (const auto& p : pairs)
    if (p.split == split) out.push_back(&p);
  return out;
}

// --- annotation pipeline -----------------------------------------------------

PreferenceLabel normalize_annotation(int score_first, int score_second) {
  if (score_first < 1 || score_first > 5 || score_second < 1 || score_second > 5)
    throw std::invalid_argument("normalize_annotation: scores must be integers in 1..5");
  if (score_first > score_second) return PreferenceLabel::of(1.0);
  if (score_first < score_second) return PreferenceLabel::of(0.0);
  return PreferenceLabel::of(0.5);
}

PreferenceLabel aggregate_annotators(const AnnotationTriple& triple) {
  double sum_first = 0;
  for (const auto& a : triple.annotators) sum_first += normalize_annotation(a.first, a.second).first;
  return PreferenceLabel::of(sum_first / 3.0);
}

// --- teacher latents ----------------------------------------------------------

namespace {

// Cholesky factor of the 4x4 latent correlation matrix.
std::array<std::array<double, 4>, 4> correlation_cholesky(const GeneratorConfig& cfg) {
  // dimension order matches the Dimension enum: aesthetics, detail, alignment, overall
  std::array<std::array<double, 4>, 4> c{};
  for (int i = 0; i < 4; ++i) c[i][i] = 1.0;
  auto set = [&](Dimension a, Dimension b, double v) {
    c[static_cast<int>(a)][static_cast<int>(b)] = v;
    c[static_cast<int>(b)][static_cast<int>(a)] = v;
  };
  set(Dimension::aesthetics, Dimension::overall, cfg.corr_aes_overall);
  set(Dimension::alignment, Dimension::overall, cfg.corr_align_overall);
  set(Dimension::aesthetics, Dimension::alignment, cfg.corr_aes_align);
  set(Dimension::detail, Dimension::aesthetics, cfg.corr_detail);
  set(Dimension::detail, Dimension::alignment, cfg.corr_detail);
  set(Dimension::detail, Dimension::overall, cfg.corr_detail);

  std::array<std::array<double, 4>, 4> l{};
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j <= i; ++j) {
      double s = c[i][j];
      for (int k = 0; k < j; ++k) s -= l[i][k] * l[j][k];
      if (i == j) {
        if (s <= 0) throw std::invalid_argument("generator: correlation matrix is not positive definite");
        l[i][j] = std::sqrt(s);
      } else {
        l[i][j] = s / l[j][j];
      }
    }
  }
  return l;
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

std::array<double, 4> sample_teacher_latents(Rng& rng,
                                             const std::array<std::array<double, 4>, 4>& chol) {
  std::array<double, 4> g{};
  for (auto& v : g) v = rng.normal();
  std::array<double, 4> q{};
  for (int i = 0; i < 4; ++i) {
    double z = 0;
    for (int j = 0; j <= i; ++j) z += chol[i][j] * g[j];
    q[i] = normal_cdf(z);
  }
  return q;
}

// --- prompt templates ----------------------------------------------------------

const std::vector<std::string>& category_nouns(Category c) {
  static const std::vector<std::string> characters = {"knight", "dancer", "astronaut", "wizard",
                                                      "chef", "violinist", "explorer", "samurai"};
  static const std::vector<std::string> scenes = {"harbor",          "mountain valley",
                                                  "city street",     "desert dune",
                                                  "forest clearing", "lighthouse coast",
                                                  "canyon",          "market square"};
  static const std::vector<std::string> objects = {"vintage car", "pocket watch", "typewriter",
                                                   "telescope",   "ceramic vase", "motorcycle",
                                                   "chess set",   "paper lantern"};
  static const std::vector<std::string> animals = {"fox",    "peacock", "owl",   "tiger",
                                                   "rabbit", "whale",   "heron", "panda"};
  static const std::vector<std::string> plants = {"maple tree", "orchid",       "cactus",
                                                  "sunflower",  "fern",         "bamboo grove",
                                                  "rose bush",  "lotus flower"};
  static const std::vector<std::string> arts = {"oil painting",      "ink wash painting",
                                                "watercolor sketch", "bronze sculpture",
                                                "mosaic mural",      "charcoal drawing",
                                                "woven tapestry",    "stained glass window"};
  static const std::vector<std::string> food = {"strawberry milkshake", "fried chicken",
                                                "vegetable salad",      "chocolate cake",
                                                "sushi platter",        "pumpkin soup",
                                                "espresso cup",         "steamed dumplings"};
  switch (c) {
    case Category::characters: return characters;
    case Category::scenes: return scenes;
    case Category::objects: return objects;
    case Category::animals: return animals;
    case Category::plants: return plants;
    case Category::arts: return arts;
    case Category::food: return food;
  }
  throw std::invalid_argument("category_nouns: bad Category");
}

std::string make_prompt_text(Rng& rng, Category cat) {
  static const std::vector<std::string> adjectives = {"beautiful", "quiet",  "dramatic", "minimal",
                                                      "vivid",     "ancient", "modern",  "playful"};
  static const std::vector<std::string> places = {"at sunset",        "in morning mist",
                                                  "under studio light", "on a rainy day",
                                                  "at night",          "in bright daylight"};
  const auto attrs = ConditionSpec::all_attribute_words();
  const auto& nouns = category_nouns(cat);
  const std::string adj = adjectives[rng.uniform_int(adjectives.size())];
  const std::string noun = nouns[rng.uniform_int(nouns.size())];
  const std::string place = places[rng.uniform_int(places.size())];
  std::string a1 = attrs[rng.uniform_int(attrs.size())];
  std::string a2 = attrs[rng.uniform_int(attrs.size())];
  while (a2 == a1) a2 = attrs[rng.uniform_int(attrs.size())];
  return "a " + adj + " " + noun + " with fine " + a1 + " and soft " + a2 + " " + place;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

SyntheticImage render_image(const GeneratorConfig& cfg, const std::string& prompt_text,
                            std::uint64_t image_seed, const std::array<double, 4>& teacher_q) {
  const int hgt = cfg.image_size, wid = cfg.image_size, chn = cfg.channels;
  const double q_aes = teacher_q[static_cast<int>(Dimension::aesthetics)];
  const double q_detail = teacher_q[static_cast<int>(Dimension::detail)];
  const double q_align = teacher_q[static_cast<int>(Dimension::alignment)];
  const double q_overall = teacher_q[static_cast<int>(Dimension::overall)];

  Rng rng(image_seed);
  SyntheticImage img;
  img.height = hgt;
  img.width = wid;
  img.channels = chn;
  img.pixels.assign(static_cast<std::size_t>(hgt) * wid * chn, 0.0f);

  // two anchor colors; spread toward gray when aesthetics is low
  std::vector<double> c0(chn), c1(chn);
  for (int c = 0; c < chn; ++c) {
    c0[c] = rng.uniform(0.2, 0.8);
    c1[c] = rng.uniform(0.2, 0.8);
  }
  const double saturation = 0.1 + 0.9 * q_aes;

  // prompt-keyed stripe pattern; amplitude follows alignment, edge
  // sharpness follows detail quality
  const std::uint64_t key = fnv1a(prompt_text);
  const int orientation = static_cast<int>(key % 4);
  const double freq = 2.0 * std::numbers::pi * (2.0 + static_cast<double>((key >> 2) % 3)) /
                      static_cast<double>(wid);
  const double sharpness = 1.0 + 9.0 * q_detail;
  const double pattern_amp = 0.30 * q_align;
  const double noise_amp = 0.25 * (1.0 - q_overall);

  for (int y = 0; y < hgt; ++y) {
    for (int x = 0; x < wid; ++x) {
      const double t = static_cast<double>(x) / (wid - 1);
      const double ramp = 0.1 * (static_cast<double>(y) / (hgt - 1) - 0.5);
      double phase = 0;
      switch (orientation) {
        case 0: phase = freq * x; break;
        case 1: phase = freq * y; break;
        case 2: phase = freq * (x + y) * 0.7071; break;
        default: phase = freq * (x - y) * 0.7071; break;
      }
      const double stripe = std::tanh(std::sin(phase) * sharpness);
      for (int c = 0; c < chn; ++c) {
        double base = c0[c] * (1.0 - t) + c1[c] * t;
        const double gray = 0.5;
        base = gray + (base - gray) * saturation;
        double v = base + ramp + pattern_amp * stripe + noise_amp * rng.uniform(-1.0, 1.0);
        img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

namespace {

AnnotatorScores simulate_annotator(Rng& rng, double delta, double tie_band, double noise) {
  // the annotator's comparison follows sign(delta), flipped with prob rho
  int verdict;  // +1 first wins, -1 second wins, 0 tie
  if (std::abs(delta) < tie_band || delta == 0.0)
    verdict = 0;
  else
    verdict = delta > 0 ? 1 : -1;
  if (verdict != 0 && rng.bernoulli(noise)) verdict = -verdict;
  if (verdict > 0) return {4, 2};
  if (verdict < 0) return {2, 4};
  return {3, 3};
}

std::string zero_pad(std::size_t v, int width) {
  std::string s = std::to_string(v);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

}  // namespace

Dataset generate_synthetic_dataset(const GeneratorConfig& cfg) {
  cfg.validate();
  const auto chol = correlation_cholesky(cfg);
  Rng root(cfg.seed);
  Rng teacher_root(cfg.teacher_seed);

  Dataset ds;
  std::size_t image_counter = 0;
  std::size_t pair_counter = 0;
  for (std::size_t ci = 0; ci < all_categories.size(); ++ci) {
    const Category cat = all_categories[ci];
    for (int pi = 0; pi < cfg.prompts_per_category; ++pi) {
      const std::size_t prompt_ordinal = ci * static_cast<std::size_t>(cfg.prompts_per_category) +
                                         static_cast<std::size_t>(pi);
      Rng prompt_rng = root.fork(prompt_ordinal);
      Prompt prompt;
      prompt.id = "p" + zero_pad(prompt_ordinal, 5);
      prompt.category = cat;
      prompt.text = make_prompt_text(prompt_rng, cat);
      ds.prompts.push_back(prompt);

      std::vector<std::size_t> members;
      for (int ii = 0; ii < cfg.images_per_prompt; ++ii) {
        Rng teacher_rng = teacher_root.fork(image_counter);
        ImageRecord rec;
        rec.id = "i" + zero_pad(image_counter, 7);
        rec.prompt_id = prompt.id;
        rec.teacher_q = sample_teacher_latents(teacher_rng, chol);
        rec.seed = prompt_rng.next_u64();
        rec.pixels = render_image(cfg, prompt.text, rec.seed, rec.teacher_q);
        members.push_back(ds.images.size());
        ds.images.push_back(std::move(rec));
        ++image_counter;
      }

      for (std::size_t a = 0; a < members.size(); ++a) {
        for (std::size_t b = a + 1; b < members.size(); ++b) {
          Rng pair_rng = root.fork(0x100000000ULL + pair_counter);
          PreferencePair pair;
          pair.pair_id = "pr" + zero_pad(pair_counter, 7);
          pair.prompt_id = prompt.id;
          pair.image1_id = ds.images[members[a]].id;
          pair.image2_id = ds.images[members[b]].id;
          pair.same_model = pair_rng.bernoulli(cfg.same_model_fraction);
          for (Dimension d : all_dimensions) {
            const double delta = ds.images[members[a]].teacher_q[static_cast<int>(d)] -
                                 ds.images[members[b]].teacher_q[static_cast<int>(d)];
            AnnotationTriple triple;
            triple.pair_id = pair.pair_id;
            triple.dimension = d;
            for (auto& ann : triple.annotators)
              ann = simulate_annotator(pair_rng, delta, cfg.tie_band, cfg.annotator_noise);
            pair.labels[static_cast<std::size_t>(d)] = aggregate_annotators(triple);
          }
          ds.pairs.push_back(std::move(pair));
          ++pair_counter;
        }
      }
    }
  }
  ds.rebuild_index();
  return ds;
}

void split_dataset(Dataset& ds, const SplitFractions& fractions, std::uint64_t seed) {
  const double sum = fractions.train + fractions.val + fractions.test;
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("split_dataset: fractions must sum to 1");
  if (fractions.train < 0 || fractions.val < 0 || fractions.test < 0)
    throw std::invalid_argument("split_dataset: fractions must be non-negative");

  // group pairs by prompt so a prompt never straddles splits
  std::map<std::string, std::vector<std::size_t>> by_prompt;
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) by_prompt[ds.pairs[i].prompt_id].push_back(i);
  std::vector<std::string> prompt_ids;
  prompt_ids.reserve(by_prompt.size());
  for (const auto& [pid, members] : by_prompt) prompt_ids.push_back(pid);

  Rng rng(seed);
  rng.shuffle(prompt_ids);

  const double total = static_cast<double>(ds.pairs.size());
  const double target_train = fractions.train * total;
  const double target_val = fractions.val * total;
  double train_count = 0, val_count = 0;
  for (const auto& pid : prompt_ids) {
    const auto& members = by_prompt[pid];
    std::string tag;
    if (train_count < target_train)
      tag = "train";
    else if (val_count < target_val)
      tag = "val";
    else
      tag = "test";
    for (std::size_t idx : members) ds.pairs[idx].split = tag;
    if (tag == "train") train_count += static_cast<double>(members.size());
    if (tag == "val") val_count += static_cast<double>(members.size());
  }
}

CategoryHistogram category_histogram(const std::vector<Prompt>& prompts) {
  CategoryHistogram h;
  for (Category c : all_categories) h.counts[c] = 0;
  for (const auto& p : prompts) ++h.counts[p.category];
  long mn = std::numeric_limits<long>::max(), mx = 0;
  for (const auto& [c, n] : h.counts) {
    mn = std::min(mn, n);
    mx = std::max(mx, n);
  }
  h.imbalance_ratio = mn == 0 ? std::numeric_limits<double>::infinity()
                              : static_cast<double>(mx) / static_cast<double>(mn);
  return h;
}

// --- persistence ---------------------------------------------------------------

std::vector<std::string> read_jsonl_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_jsonl: cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    lines.push_back(line);
  }
  return lines;
}

void write_lines_atomic(const std::string& path, const std::vector<std::string>& lines) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("write_jsonl: cannot open " + tmp);
    for (const auto& l : lines) out << l << '\n';
    if (!out) throw std::runtime_error("write_jsonl: write failed for " + tmp);
  }
  fs::rename(tmp, path);
}

void save_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(fs::path(dir) / "pixels");

  std::vector<json> prompts;
  for (const auto& p : ds.prompts)
    prompts.push_back({{"id", p.id}, {"text", p.text}, {"category", to_string(p.category)}});
  write_jsonl((fs::path(dir) / "prompts.jsonl").string(), prompts);

  std::vector<json> images;
  for (const auto& im : ds.images) {
    const std::string rel = "pixels/" + im.id + ".bin";
    save_image(im.pixels, (fs::path(dir) / rel).string());
    images.push_back({{"id", im.id},
                      {"prompt_id", im.prompt_id},
                      {"pixels_path", rel},
                      {"seed", im.seed},
                      {"teacher_q", im.teacher_q}});
  }
  write_jsonl((fs::path(dir) / "images.jsonl").string(), images);

  std::vector<json> pairs;
  for (const auto& pr : ds.pairs) {
    json labels;
    for (Dimension d : all_dimensions)
      labels[to_string(d)] = {pr.label(d).first, pr.label(d).second};
    pairs.push_back({{"pair_id", pr.pair_id},
                     {"prompt_id", pr.prompt_id},
                     {"y1", pr.image1_id},
                     {"y2", pr.image2_id},
                     {"labels", labels},
                     {"split", pr.split},
                     {"same_model", pr.same_model}});
  }
  write_jsonl((fs::path(dir) / "pairs.jsonl").string(), pairs);
}

Dataset load_dataset(const std::string& dir, bool load_pixels) {
  Dataset ds;
  for (const auto& j : read_jsonl((fs::path(dir) / "prompts.jsonl").string())) {
    Prompt p;
    p.id = j.at("id").get<std::string>();
    p.text = j.at("text").get<std::string>();
    p.category = category_from_string(j.at("category").get<std::string>());
    ds.prompts.push_back(std::move(p));
  }
  for (const auto& j : read_jsonl((fs::path(dir) / "images.jsonl").string())) {
    ImageRecord im;
    im.id = j.at("id").get<std::string>();
    im.prompt_id = j.at("prompt_id").get<std::string>();
    im.pixels_path = j.at("pixels_path").get<std::string>();
    im.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("teacher_q")) {
      auto q = j.at("teacher_q").get<std::vector<double>>();
      if (q.size() != 4) throw std::runtime_error("load_dataset: teacher_q must have 4 entries");
      std::copy(q.begin(), q.end(), im.teacher_q.begin());
    }
    if (load_pixels) im.pixels = load_image((fs::path(dir) / im.pixels_path).string());
    ds.images.push_back(std::move(im));
  }
  for (const auto& j : read_jsonl((fs::path(dir) / "pairs.jsonl").string())) {
    PreferencePair pr;
    pr.pair_id = j.at("pair_id").get<std::string>();
    pr.prompt_id = j.at("prompt_id").get<std::string>();
    pr.image1_id = j.at("y1").get<std::string>();
    pr.image2_id = j.at("y2").get<std::string>();
    for (Dimension d : all_dimensions) {
      auto l = j.at("labels").at(to_string(d)).get<std::vector<double>>();
      if (l.size() != 2) throw std::runtime_error("load_dataset: label must have 2 entries");
      pr.labels[static_cast<std::size_t>(d)] = {l[0], l[1]};
    }
    pr.split = j.at("split").get<std::string>();
    pr.same_model = j.at("same_model").get<bool>();
    ds.pairs.push_back(std::move(pr));
  }
  ds.rebuild_index();
  return ds;
}

}  // namespace mps
