#include "mps/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include <json.hpp>

#include "mps/evaluation.hpp"

using nlohmann::json;

namespace mps {

std::array<double, 2> pair_probabilities(double s1, double s2) {
  if (!std::isfinite(s1) || !std::isfinite(s2))
    throw std::invalid_argument("pair_probabilities: scores must be finite");
  const double m = std::max(s1, s2);
  const double e1 = std::exp(s1 - m);
  const double e2 = std::exp(s2 - m);
  const double z = e1 + e2;
  return {e1 / z, e2 / z};
}

namespace {
constexpr double kProbClamp = 1e-7;

double clamped_kl_term(double p, double phat) {
  if (p <= 0) return 0;  // 0 * log 0 == 0
  const double q = std::clamp(phat, kProbClamp, 1.0 - kProbClamp);
  return p * (std::log(p) - std::log(q));
}
}  // namespace

double preference_loss(const std::vector<LossItem>& batch) {
  if (batch.empty()) throw std::invalid_argument("preference_loss: empty batch");
  double total = 0;
  for (const auto& item : batch) {
    if (item.predicted.size() != item.labels.size())
      throw std::invalid_argument("preference_loss: predicted/label count mismatch");
    for (std::size_t c = 0; c < item.predicted.size(); ++c) {
      const auto& label = item.labels[c];
      if (label.first < 0 || label.first > 1 || label.second < 0 || label.second > 1 ||
          std::abs(label.first + label.second - 1.0) > 1e-9)
        throw std::invalid_argument("preference_loss: invalid label");
      total += clamped_kl_term(label.first, item.predicted[c][0]);
      total += clamped_kl_term(label.second, item.predicted[c][1]);
    }
  }
  return total / static_cast<double>(batch.size());
}

void TrainConfig::validate() const {
  if (steps < 1) throw std::invalid_argument("train: steps must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("train: batch size must be >= 1");
  if (peak_lr <= 0) throw std::invalid_argument("train: peak lr must be positive");
  if (warmup_steps < 1) throw std::invalid_argument("train: warmup must be >= 1");
  if (dimensions.empty()) throw std::invalid_argument("train: dimensions-in-scope is empty");
}

double train_step(Model<float>& model, const Dataset& ds, const Vocabulary& vocab,
                  const std::vector<std::size_t>& batch, const TrainConfig& cfg,
                  AdamW<float>& opt, long step) {
  if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
  Tape<float> tape;
  const int max_tokens = model.cfg.encoder.max_tokens;

  // condition encodings are shared across the whole batch
  std::vector<Tensor<float>> cond_feats;
  cond_feats.reserve(cfg.dimensions.size());
  for (Dimension d : cfg.dimensions) {
    const auto ids = tokenize(ConditionSpec::standard(d).joined(), vocab, max_tokens);
    cond_feats.push_back(encode_text(tape, model.text, model.cfg.encoder, ids));
  }

  Tensor<float> loss_total;
  for (std::size_t idx : batch) {
    const PreferencePair& pair = ds.pairs.at(idx);
    const Prompt& prompt = ds.prompt_of(pair.prompt_id);
    const auto prompt_ids = tokenize(prompt.text, vocab, max_tokens);
    auto text_feats = encode_text(tape, model.text, model.cfg.encoder, prompt_ids);
    auto vis1 = encode_image(tape, model.image, model.cfg.encoder, ds.image_of(pair.image1_id).pixels);
    auto vis2 = encode_image(tape, model.image, model.cfg.encoder, ds.image_of(pair.image2_id).pixels);
    for (std::size_t c = 0; c < cfg.dimensions.size(); ++c) {
      auto s1 = score_from_features(tape, model, text_feats, cond_feats[c], vis1).score;
      auto s2 = score_from_features(tape, model, text_feats, cond_feats[c], vis2).score;
      const auto& label = pair.label(cfg.dimensions[c]);
      auto term = ops::pair_kl_loss(tape, s1, s2, label.first, label.second);
      loss_total = loss_total.defined() ? ops::add(tape, loss_total, term) : term;
    }
  }
  auto loss = ops::scale_const(tape, loss_total, 1.0f / static_cast<float>(batch.size()));
  const double loss_value = static_cast<double>(loss.item());
  if (!std::isfinite(loss_value)) throw std::runtime_error("train_step: non-finite loss");

  model.zero_grads();
  tape.backward(loss);
  auto params = model.named_params();
  opt.step(params, lr_schedule(step, cfg.warmup_steps, cfg.peak_lr));
  return loss_value;
}

Model<float> clone_model(const Model<float>& m) { return convert_model<float>(m); }

TrainOutcome train_model(const ModelConfig& mcfg, const TrainConfig& tcfg, const Dataset& ds,
                         const Vocabulary& vocab, std::ostream* log_stream) {
  tcfg.validate();
  std::vector<std::size_t> train_idx;
  for (std::size_t i = 0; i < ds.pairs.size(); ++i)
    if (ds.pairs[i].split == "train") train_idx.push_back(i);
  if (train_idx.empty()) throw std::invalid_argument("train: train split is empty");
  const auto val_pairs = ds.split_pairs("val");

  Rng rng(tcfg.seed);
  Rng init_rng = rng.fork(1);
  Rng shuffle_rng = rng.fork(2);

  TrainOutcome out;
  out.final_model = init_model<float>(init_rng, mcfg);

  AdamWConfig ocfg;
  ocfg.weight_decay = tcfg.weight_decay;
  AdamW<float> opt(ocfg);

  std::vector<std::size_t> order = train_idx;
  shuffle_rng.shuffle(order);
  std::size_t cursor = 0;

  auto validate_now = [&](Model<float>& m) -> double {
    if (val_pairs.empty()) return -1;
    ModelScorer scorer(m, vocab);
    double acc_sum = 0;
    for (Dimension d : tcfg.dimensions)
      acc_sum += preference_accuracy(scorer, ds, val_pairs, d, TiePolicy::exclude);
    return acc_sum / static_cast<double>(tcfg.dimensions.size());
  };

  for (long step = 0; step < tcfg.steps; ++step) {
    std::vector<std::size_t> batch;
    batch.reserve(static_cast<std::size_t>(tcfg.batch_size));
    for (int b = 0; b < tcfg.batch_size; ++b) {
      if (cursor == order.size()) {
        shuffle_rng.shuffle(order);
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    const double loss = train_step(out.final_model, ds, vocab, batch, tcfg, opt, step);

    TrainLogEntry entry;
    entry.step = step;
    entry.lr = lr_schedule(step, tcfg.warmup_steps, tcfg.peak_lr);
    entry.loss = loss;
    const bool do_val = tcfg.val_every > 0 &&
                        (step % tcfg.val_every == tcfg.val_every - 1 || step + 1 == tcfg.steps);
    if (do_val) {
      entry.val_accuracy = validate_now(out.final_model);
      if (entry.val_accuracy > out.best_val_accuracy) {
        out.best_val_accuracy = entry.val_accuracy;
        out.best_step = step;
        out.best_model = clone_model(out.final_model);
      }
    }
    out.log.push_back(entry);
    if (log_stream) {
      json j{{"step", entry.step}, {"lr", entry.lr}, {"loss", entry.loss}};
      if (entry.val_accuracy >= 0) j["val_accuracy"] = entry.val_accuracy;
      (*log_stream) << j.dump() << '\n';
    }
  }
  if (out.best_step < 0) {  // no validation ran; best is the final model
    out.best_model = clone_model(out.final_model);
    out.best_step = tcfg.steps - 1;
  }
  return out;
}

}  // namespace mps
