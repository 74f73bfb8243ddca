#pragma once

#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mps/dataset.hpp"
#include "mps/model.hpp"
#include "mps/vocab.hpp"

namespace mps {

/// Anything that can score an (prompt, image, dimension) triple. The model
/// is one implementation; the planted teacher is another, used as an oracle
/// in tests.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual double score(const Prompt& prompt, const ImageRecord& image, Dimension d) const = 0;
};

/// Runs the trained model. Feature encodings are memoized per instance, so
/// construct a fresh scorer after any parameter update.
class ModelScorer : public Scorer {
 public:
  ModelScorer(const Model<float>& model, const Vocabulary& vocab);
  double score(const Prompt& prompt, const ImageRecord& image, Dimension d) const override;

 private:
  const Model<float>& model_;
  const Vocabulary& vocab_;
  mutable std::unordered_map<std::string, Tensor<float>> text_cache_;
  mutable std::unordered_map<std::string, Tensor<float>> image_cache_;
  mutable std::map<Dimension, Tensor<float>> cond_cache_;
};

/// Reads the hidden teacher latent directly; scale sharpens the implied
/// pair probabilities toward hard 0/1 decisions.
class TeacherScorer : public Scorer {
 public:
  explicit TeacherScorer(double scale = 1.0) : scale_(scale) {}
  double score(const Prompt&, const ImageRecord& image, Dimension d) const override {
    return scale_ * image.teacher_q[static_cast<std::size_t>(d)];
  }

 private:
  double scale_;
};

enum class TiePolicy { exclude, half_credit };

inline const char* to_string(TiePolicy p) {
  return p == TiePolicy::exclude ? "exclude" : "half-credit";
}

/// Percentage of pairs whose higher-scored image matches the annotated
/// winner. Label ties follow the policy; a score tie predicts the first
/// image. Throws when no pair is considered.
double preference_accuracy(const Scorer& scorer, const Dataset& ds,
                           const std::vector<const PreferencePair*>& pairs, Dimension d,
                           TiePolicy tie_policy);

/// Pearson product-moment correlation. Lengths must match and the target
/// must have positive variance.
double pearson_r(const std::vector<double>& predicted, const std::vector<double>& target);

struct DimensionReport {
  double accuracy = 0;              // tie policy: exclude
  double accuracy_half_credit = 0;  // tie policy: half credit
  double pearson = 0;
  long pairs_considered = 0;
  long ties = 0;
};

struct EvalReport {
  std::map<Dimension, DimensionReport> dimensions;
  long pairs_evaluated = 0;
  std::string split;
  std::string config_fingerprint;
  std::string checkpoint_fingerprint;

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);
};

EvalReport per_dimension_report(const Scorer& scorer, const Dataset& ds, const std::string& split);

struct RankResult {
  std::string prompt_id;
  Dimension condition = Dimension::overall;
  std::vector<std::string> ordered_ids;  // descending score, ties by id ascending
  std::vector<double> scores;            // aligned with ordered_ids

  nlohmann::json to_json() const;
};

RankResult rank_images(const Scorer& scorer, const Prompt& prompt,
                       const std::vector<const ImageRecord*>& images, Dimension d);

/// Mask and attention export: per-prompt-token relevance values with the
/// keep/drop decision, the fusion CLS attention over prompt tokens, and the
/// vision tower's final-block CLS attention reshaped to the patch grid.
nlohmann::json attention_export(const Model<float>& model, const Vocabulary& vocab,
                                const std::string& prompt_text, const SyntheticImage& image,
                                Dimension d);

/// FNV-1a fingerprint of a file's bytes, hex-encoded.
std::string file_fingerprint(const std::string& path);
/// Same, over an in-memory string.
std::string string_fingerprint(const std::string& bytes);

}  // namespace mps
