#include "mps/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "mps/training.hpp"

using nlohmann::json;

namespace mps {

ModelScorer::ModelScorer(const Model<float>& model, const Vocabulary& vocab)
    : model_(model), vocab_(vocab) {}

double ModelScorer::score(const Prompt& prompt, const ImageRecord& image, Dimension d) const {
  Tape<float> tape(false);
  const int max_tokens = model_.cfg.encoder.max_tokens;

  auto text_it = text_cache_.find(prompt.id);
  if (text_it == text_cache_.end()) {
    auto feats =
        encode_text(tape, model_.text, model_.cfg.encoder, tokenize(prompt.text, vocab_, max_tokens));
    text_it = text_cache_.emplace(prompt.id, feats).first;
  }
  auto image_it = image_cache_.find(image.id);
  if (image_it == image_cache_.end()) {
    auto feats = encode_image(tape, model_.image, model_.cfg.encoder, image.pixels);
    image_it = image_cache_.emplace(image.id, feats).first;
  }
  auto cond_it = cond_cache_.find(d);
  if (cond_it == cond_cache_.end()) {
    const auto ids = tokenize(ConditionSpec::standard(d).joined(), vocab_, max_tokens);
    auto feats = encode_text(tape, model_.text, model_.cfg.encoder, ids);
    cond_it = cond_cache_.emplace(d, feats).first;
  }
  auto res =
      score_from_features(tape, model_, text_it->second, cond_it->second, image_it->second);
  return static_cast<double>(res.score.item());
}

double preference_accuracy(const Scorer& scorer, const Dataset& ds,
                           const std::vector<const PreferencePair*>& pairs, Dimension d,
                           TiePolicy tie_policy) {
  double correct = 0;
  long considered = 0;
  for (const auto* pair : pairs) {
    const auto& label = pair->label(d);
    const bool label_tie = label.first == label.second;
    if (label_tie && tie_policy == TiePolicy::exclude) continue;

    const Prompt& prompt = ds.prompt_of(pair->prompt_id);
    const double s1 = scorer.score(prompt, ds.image_of(pair->image1_id), d);
    const double s2 = scorer.score(prompt, ds.image_of(pair->image2_id), d);

    ++considered;
    if (label_tie) {
      correct += 0.5;  // half credit regardless of prediction
      continue;
    }
    const int predicted = s1 >= s2 ? 1 : 2;  // argmax, first on a score tie
    const int annotated = label.first > label.second ? 1 : 2;
    if (predicted == annotated) correct += 1;
  }
  if (considered == 0)
    throw std::runtime_error("preference_accuracy: no pairs considered for this dimension");
  return 100.0 * correct / static_cast<double>(considered);
}

double pearson_r(const std::vector<double>& predicted, const std::vector<double>& target) {
  if (predicted.size() != target.size())
    throw std::invalid_argument("pearson_r: length mismatch");
  if (predicted.size() < 2) throw std::invalid_argument("pearson_r: need at least 2 points");
  const auto n = static_cast<double>(predicted.size());
  double mp = 0, mt = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    mp += predicted[i];
    mt += target[i];
  }
  mp /= n;
  mt /= n;
  double spt = 0, spp = 0, stt = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double dp = predicted[i] - mp;
    const double dt = target[i] - mt;
    spt += dp * dt;
    spp += dp * dp;
    stt += dt * dt;
  }
  if (stt == 0) throw std::invalid_argument("pearson_r: target variance is zero");
  if (spp == 0) throw std::invalid_argument("pearson_r: prediction variance is zero");
  return spt / std::sqrt(spp * stt);
}

EvalReport per_dimension_report(const Scorer& scorer, const Dataset& ds,
                                const std::string& split) {
  const auto pairs = ds.split_pairs(split);
  if (pairs.empty()) throw std::runtime_error("per_dimension_report: split '" + split + "' is empty");
  EvalReport report;
  report.split = split;
  report.pairs_evaluated = static_cast<long>(pairs.size());
  for (Dimension d : all_dimensions) {
    DimensionReport dr;
    long ties = 0;
    std::vector<double> predicted, target;
    predicted.reserve(pairs.size());
    target.reserve(pairs.size());
    for (const auto* pair : pairs) {
      const auto& label = pair->label(d);
      if (label.first == label.second) ++ties;
      const Prompt& prompt = ds.prompt_of(pair->prompt_id);
      const double s1 = scorer.score(prompt, ds.image_of(pair->image1_id), d);
      const double s2 = scorer.score(prompt, ds.image_of(pair->image2_id), d);
      predicted.push_back(pair_probabilities(s1, s2)[0]);
      target.push_back(label.first);
    }
    dr.ties = ties;
    dr.pairs_considered = static_cast<long>(pairs.size()) - ties;
    dr.accuracy = preference_accuracy(scorer, ds, pairs, d, TiePolicy::exclude);
    dr.accuracy_half_credit = preference_accuracy(scorer, ds, pairs, d, TiePolicy::half_credit);
    dr.pearson = pearson_r(predicted, target);
    report.dimensions[d] = dr;
  }
  return report;
}

json EvalReport::to_json() const {
  json dims;
  for (const auto& [d, r] : dimensions) {
    dims[to_string(d)] = {{"accuracy", r.accuracy},
                          {"accuracy_half_credit", r.accuracy_half_credit},
                          {"pearson_r", r.pearson},
                          {"pairs_considered", r.pairs_considered},
                          {"ties", r.ties}};
  }
  return json{{"schema_version", 1},
              {"split", split},
              {"pairs_evaluated", pairs_evaluated},
              {"dimensions", dims},
              {"config_fingerprint", config_fingerprint},
              {"checkpoint_fingerprint", checkpoint_fingerprint}};
}

EvalReport EvalReport::from_json(const json& j) {
  EvalReport r;
  r.split = j.at("split").get<std::string>();
  r.pairs_evaluated = j.at("pairs_evaluated").get<long>();
  r.config_fingerprint = j.value("config_fingerprint", "");
  r.checkpoint_fingerprint = j.value("checkpoint_fingerprint", "");
  for (const auto& [key, val] : j.at("dimensions").items()) {
    DimensionReport dr;
    dr.accuracy = val.at("accuracy").get<double>();
    dr.accuracy_half_credit = val.at("accuracy_half_credit").get<double>();
    dr.pearson = val.at("pearson_r").get<double>();
    dr.pairs_considered = val.at("pairs_considered").get<long>();
    dr.ties = val.at("ties").get<long>();
    r.dimensions[dimension_from_string(key)] = dr;
  }
  return r;
}

RankResult rank_images(const Scorer& scorer, const Prompt& prompt,
                       const std::vector<const ImageRecord*>& images, Dimension d) {
  if (images.empty()) throw std::invalid_argument("rank_images: empty image list");
  struct Entry {
    std::string id;
    double score;
  };
  std::vector<Entry> entries;
  entries.reserve(images.size());
  for (const auto* im : images) {
    if (im->prompt_id != prompt.id)
      throw std::invalid_argument("rank_images: image " + im->id + " is not for this prompt");
    entries.push_back({im->id, scorer.score(prompt, *im, d)});
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  RankResult out;
  out.prompt_id = prompt.id;
  out.condition = d;
  for (const auto& e : entries) {
    out.ordered_ids.push_back(e.id);
    out.scores.push_back(e.score);
  }
  return out;
}

json RankResult::to_json() const {
  return json{{"schema_version", 1},
              {"prompt_id", prompt_id},
              {"condition", to_string(condition)},
              {"ranking", ordered_ids},
              {"scores", scores}};
}

json attention_export(const Model<float>& model, const Vocabulary& vocab,
                      const std::string& prompt_text, const SyntheticImage& image, Dimension d) {
  Tape<float> tape(false);
  const auto& ecfg = model.cfg.encoder;
  const auto prompt_ids = tokenize(prompt_text, vocab, ecfg.max_tokens);
  const auto cond_ids = tokenize(ConditionSpec::standard(d).joined(), vocab, ecfg.max_tokens);

  auto text_feats = encode_text(tape, model.text, ecfg, prompt_ids);
  auto cond_feats = encode_text(tape, model.text, ecfg, cond_ids);
  std::vector<float> vision_cls_attention;
  auto visual_feats = encode_image(tape, model.image, ecfg, image, &vision_cls_attention);
  auto res = score_from_features(tape, model, text_feats, cond_feats, visual_feats);

  const int n_tokens = text_feats.rows();
  std::vector<std::string> token_strings;
  for (int id : prompt_ids) token_strings.push_back(vocab.token_of(id));

  // pre-binarization relevance values; computed for the report even when the
  // mask mode leaves them out of the score path
  std::vector<double> mask_values(static_cast<std::size_t>(n_tokens), 0.0);
  if (res.mask_row.defined()) {
    for (int j = 0; j < n_tokens; ++j) mask_values[static_cast<std::size_t>(j)] = res.mask_row.at(0, j);
  } else {
    auto rel = relevance(tape, cond_feats, text_feats, model.head.cond_form, model.head.cond_bias);
    auto row = ops::mean_rows(tape, rel);
    for (int j = 0; j < n_tokens; ++j) mask_values[static_cast<std::size_t>(j)] = row.at(0, j);
  }

  // keep/drop per token from the effective mask actually used (all-kept when
  // the mask was off or every row fell back)
  std::vector<bool> keep(static_cast<std::size_t>(n_tokens), true);
  if (res.fusion.mask_used.defined()) {
    for (int j = 0; j < n_tokens; ++j)
      keep[static_cast<std::size_t>(j)] = res.fusion.mask_used.at(0, j) == 0.0f;
  }

  std::vector<double> cls_token_attention(static_cast<std::size_t>(n_tokens));
  for (int j = 0; j < n_tokens; ++j)
    cls_token_attention[static_cast<std::size_t>(j)] =
        res.fusion.attention_avg[static_cast<std::size_t>(j)];  // row 0 of n_v x n_p

  // vision tower: final-block CLS attention over patches, renormalized after
  // dropping the CLS->CLS entry
  const int grid = ecfg.image_size / ecfg.patch;
  std::vector<double> patch_attention;
  patch_attention.reserve(static_cast<std::size_t>(grid) * grid);
  double total = 0;
  for (std::size_t i = 1; i < vision_cls_attention.size(); ++i) total += vision_cls_attention[i];
  for (std::size_t i = 1; i < vision_cls_attention.size(); ++i)
    patch_attention.push_back(total > 0 ? vision_cls_attention[i] / total : 0.0);

  return json{{"schema_version", 1},
              {"condition", to_string(d)},
              {"prompt_tokens", token_strings},
              {"mask_values", mask_values},
              {"keep", keep},
              {"cls_token_attention", cls_token_attention},
              {"fallback_rows", res.fusion.fallback_rows},
              {"patch_grid",
               {{"rows", grid}, {"cols", grid}, {"values", patch_attention}}}};
}

std::string string_fingerprint(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

std::string file_fingerprint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("file_fingerprint: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return string_fingerprint(bytes);
}

}  // namespace mps
