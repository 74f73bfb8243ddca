#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "mps/condition.hpp"
#include "mps/image.hpp"
#include "mps/rng.hpp"

namespace mps {

enum class Category { characters, scenes, objects, animals, plants, arts, food };

constexpr std::array<Category, 7> all_categories = {
    Category::characters, Category::scenes, Category::objects, Category::animals,
    Category::plants,     Category::arts,   Category::food};

const char* to_string(Category c);
Category category_from_string(const std::string& s);

/// Pairwise soft preference; components sum to exactly 1 by construction
/// (second is computed as 1 - first).
struct PreferenceLabel {
  double first = 0.5;
  double second = 0.5;

  static PreferenceLabel of(double p_first) { return {p_first, 1.0 - p_first}; }
};

struct Prompt {
  std::string id;
  std::string text;
  Category category = Category::objects;
};

struct ImageRecord {
  std::string id;
  std::string prompt_id;
  SyntheticImage pixels;                // in-memory payload
  std::string pixels_path;              // relative file reference once persisted
  std::uint64_t seed = 0;
  std::array<double, 4> teacher_q{};    // hidden per-dimension quality, indexed by Dimension
};

/// One annotator's 1-5 scores for the two images of a pair.
struct AnnotatorScores {
  int first = 3;
  int second = 3;
};

struct AnnotationTriple {
  std::string pair_id;
  Dimension dimension = Dimension::overall;
  std::array<AnnotatorScores, 3> annotators;
};

struct PreferencePair {
  std::string pair_id;
  std::string prompt_id;
  std::string image1_id;
  std::string image2_id;
  std::array<PreferenceLabel, 4> labels;  // indexed by Dimension
  std::string split;                      // train / val / test
  bool same_model = false;

  const PreferenceLabel& label(Dimension d) const {
    return labels[static_cast<std::size_t>(d)];
  }
};

struct GeneratorConfig {
  std::uint64_t seed = 0;
  std::uint64_t teacher_seed = 1;
  int prompts_per_category = 100;
  int images_per_prompt = 2;        // 2..4; all within-prompt pairs are formed
  double same_model_fraction = 0.2;
  double annotator_noise = 0.0;     // per-annotator flip probability rho
  double tie_band = 0.0;            // |q1-q2| below this is annotated as a tie
  int image_size = 32;
  int channels = 3;
  // teacher latent correlations (aesthetics/alignment/overall cluster;
  // detail stays decorrelated so the mask ablation has a signal to find)
  double corr_aes_overall = 0.8;
  double corr_align_overall = 0.5;
  double corr_aes_align = 0.4;
  double corr_detail = 0.0;

  void validate() const;
};

struct Dataset {
  std::vector<Prompt> prompts;
  std::vector<ImageRecord> images;
  std::vector<PreferencePair> pairs;

  std::unordered_map<std::string, std::size_t> prompt_index;
  std::unordered_map<std::string, std::size_t> image_index;

  void rebuild_index();
  const Prompt& prompt_of(const std::string& id) const;
  const ImageRecord& image_of(const std::string& id) const;
  std::vector<const PreferencePair*> split_pairs(const std::string& split) const;
};

// --- annotation pipeline ----------------------------------------------------

/// Fig-3 style normalization of one annotator's two scores.
PreferenceLabel normalize_annotation(int score_first, int score_second);

/// Mean of the three per-annotator normalized labels.
PreferenceLabel aggregate_annotators(const AnnotationTriple& triple);

// --- synthetic generation ---------------------------------------------------

Dataset generate_synthetic_dataset(const GeneratorConfig& cfg);

/// Pixel renderer for one image given its hidden quality latents. Exposed
/// so tests can regenerate an image with a single latent moved.
SyntheticImage render_image(const GeneratorConfig& cfg, const std::string& prompt_text,
                            std::uint64_t image_seed, const std::array<double, 4>& teacher_q);

struct SplitFractions {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
};

/// Prompt-level split: all pairs of a prompt land in the same split.
void split_dataset(Dataset& ds, const SplitFractions& fractions, std::uint64_t seed);

struct CategoryHistogram {
  std::map<Category, long> counts;
  double imbalance_ratio = 1.0;  // max/min; +inf sentinel when a category is empty
};

CategoryHistogram category_histogram(const std::vector<Prompt>& prompts);

// --- persistence --------------------------------------------------------------

/// One JSON object per line. Malformed input reports its 1-based line number.
std::vector<std::string> read_jsonl_lines(const std::string& path);
void write_lines_atomic(const std::string& path, const std::vector<std::string>& lines);

void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir, bool load_pixels = true);

}  // namespace mps
