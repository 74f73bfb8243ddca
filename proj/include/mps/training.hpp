#pragma once

#include <array>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "mps/dataset.hpp"
#include "mps/model.hpp"
#include "mps/optim.hpp"
#include "mps/vocab.hpp"

namespace mps {

/// Softmax over two scores, max-subtracted for stability.
std::array<double, 2> pair_probabilities(double s1, double s2);

/// One batch item: the predicted pair distribution and the annotated label
/// for each condition in scope.
struct LossItem {
  std::vector<std::array<double, 2>> predicted;
  std::vector<PreferenceLabel> labels;
};

/// Mean over the batch of the per-item sum over conditions of
/// KL(label || predicted). Predictions are clamped to [1e-7, 1 - 1e-7]
/// before the log.
double preference_loss(const std::vector<LossItem>& batch);

struct TrainConfig {
  long steps = 2000;
  int batch_size = 32;
  double peak_lr = 1e-3;  // desk-scale; paper-scale fine-tuning uses 3e-6
  long warmup_steps = 500;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  std::vector<Dimension> dimensions = {Dimension::aesthetics, Dimension::detail,
                                       Dimension::alignment, Dimension::overall};
  long val_every = 200;
  long checkpoint_every = 0;  // 0: only final and best

  void validate() const;
};

struct TrainLogEntry {
  long step = 0;
  double lr = 0;
  double loss = 0;
  double val_accuracy = -1;  // mean over in-scope dimensions; -1 when not evaluated
};

/// One optimizer update on one batch of pairs (indices into ds.pairs).
/// Prompt and image encodings are shared between the two images of a pair
/// and across conditions; condition encodings are computed once per step.
double train_step(Model<float>& model, const Dataset& ds, const Vocabulary& vocab,
                  const std::vector<std::size_t>& batch, const TrainConfig& cfg,
                  AdamW<float>& opt, long step);

struct TrainOutcome {
  Model<float> final_model;
  Model<float> best_model;
  double best_val_accuracy = -1;
  long best_step = -1;
  std::vector<TrainLogEntry> log;
};

/// Full training loop over the train split with seeded shuffling, periodic
/// validation on the val split, and best-checkpoint tracking. Emits one JSON
/// object per log entry to log_stream when given.
TrainOutcome train_model(const ModelConfig& mcfg, const TrainConfig& tcfg, const Dataset& ds,
                         const Vocabulary& vocab, std::ostream* log_stream = nullptr);

/// Deep copy (fresh payloads, same values).
Model<float> clone_model(const Model<float>& m);

// --- checkpoint io ------------------------------------------------------------

inline constexpr char checkpoint_magic[8] = {'M', 'P', 'S', 'C', 'K', 'P', 'T', '1'};
inline constexpr int checkpoint_version = 1;

void save_checkpoint(const Model<float>& model, const Vocabulary& vocab, long step,
                     std::uint64_t rng_seed, std::uint64_t rng_state, const std::string& path);

struct LoadedCheckpoint {
  Model<float> model;
  Vocabulary vocab;
  long step = 0;
  std::uint64_t rng_seed = 0;
  std::uint64_t rng_state = 0;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

/// Header JSON (version, config, manifest, step) without the payload.
std::string checkpoint_header(const std::string& path);

}  // namespace mps
