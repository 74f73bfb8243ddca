#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mps/condition.hpp"
#include "mps/encoder.hpp"
#include "mps/ops.hpp"
#include "mps/tensor.hpp"
#include "mps/vocab.hpp"

namespace mps {

/// How the condition mask enters the fusion attention.
///   hard: binarize to {0, -inf} and add to the logits
///   soft: add soft_scale * mask values to the logits directly
///   off:  plain cross attention, condition ignored
enum class MaskMode { hard, soft, off };

inline const char* to_string(MaskMode m) {
  switch (m) {
    case MaskMode::hard: return "hard";
    case MaskMode::soft: return "soft";
    case MaskMode::off: return "off";
  }
  throw std::invalid_argument("to_string: bad MaskMode");
}

inline MaskMode mask_mode_from_string(const std::string& s) {
  if (s == "hard") return MaskMode::hard;
  if (s == "soft") return MaskMode::soft;
  if (s == "off") return MaskMode::off;
  throw std::invalid_argument("mask_mode_from_string: unknown mode '" + s + "'");
}

struct HeadConfig {
  MaskMode mask_mode = MaskMode::hard;
  double threshold = 0.0;        // binarization threshold on the relevance mask
  bool straight_through = true;  // gradient flows through binarization as identity
  double soft_scale = 1.0;       // logit-bias weight in soft mode
};

struct ModelConfig {
  EncoderConfig encoder;
  HeadConfig head;

  void validate() const { encoder.validate(); }
};

/// Fusion parameters: the cross-attention projections (no biases), the
/// condition-relevance bilinear form, and the learned score scale.
template <typename Real>
struct PreferenceHead {
  Tensor<Real> query_proj;   // d x d
  Tensor<Real> key_proj;     // d x d
  Tensor<Real> value_proj;   // d x d
  Tensor<Real> cond_form;    // d x d bilinear form between condition and prompt
  Tensor<Real> cond_bias;    // 1 x 1
  Tensor<Real> score_scale;  // 1 x 1, multiplies the fused dot product
};

template <typename Real>
PreferenceHead<Real> init_head(Rng& rng, const ModelConfig& cfg) {
  const int d = cfg.encoder.width;
  PreferenceHead<Real> head;
  head.query_proj = init::projection<Real>(rng, d, d);
  head.key_proj = init::projection<Real>(rng, d, d);
  head.value_proj = init::projection<Real>(rng, d, d);
  head.cond_form = init::projection<Real>(rng, d, d);
  head.cond_bias = Tensor<Real>::zeros(1, 1, true);
  head.score_scale = Tensor<Real>::from(1, 1, {Real(1)}, true);
  return head;
}

/// The complete scorer: shared text tower (conditions are encoded with the
/// same weights as prompts), image tower, and the preference head.
template <typename Real>
struct Model {
  ModelConfig cfg;
  TextEncoder<Real> text;
  ImageEncoder<Real> image;
  PreferenceHead<Real> head;

  std::vector<std::pair<std::string, Tensor<Real>>> named_params() const {
    std::vector<std::pair<std::string, Tensor<Real>>> out;
    append_params(out, "text", text);
    append_params(out, "image", image);
    out.emplace_back("head.query_proj", head.query_proj);
    out.emplace_back("head.key_proj", head.key_proj);
    out.emplace_back("head.value_proj", head.value_proj);
    out.emplace_back("head.cond_form", head.cond_form);
    out.emplace_back("head.cond_bias", head.cond_bias);
    out.emplace_back("head.score_scale", head.score_scale);
    return out;
  }

  void zero_grads() {
    auto params = named_params();
    for (auto& [name, t] : params) t.zero_grad();
  }
};

template <typename Real>
Model<Real> init_model(Rng& rng, const ModelConfig& cfg) {
  cfg.validate();
  Model<Real> m;
  m.cfg = cfg;
  Rng text_rng = rng.fork(1);
  Rng image_rng = rng.fork(2);
  Rng head_rng = rng.fork(3);
  m.text = init_text_encoder<Real>(text_rng, cfg.encoder);
  m.image = init_image_encoder<Real>(image_rng, cfg.encoder);
  m.head = init_head<Real>(head_rng, cfg);
  return m;
}

/// Condition-prompt relevance: bilinear form cond * W * prompt^T + bias,
/// one entry per (condition token, prompt token).
template <typename Real>
Tensor<Real> relevance(Tape<Real>& tape, const Tensor<Real>& cond_feats,
                       const Tensor<Real>& text_feats, const Tensor<Real>& cond_form,
                       const Tensor<Real>& cond_bias) {
  if (cond_feats.cols() != text_feats.cols() || cond_feats.cols() != cond_form.rows())
    throw std::invalid_argument("relevance: feature widths disagree");
  auto projected = ops::matmul(tape, cond_feats, cond_form);
  auto scores = ops::matmul_nt(tape, projected, text_feats);
  return ops::add_scalar(tape, scores, cond_bias);
}

/// Mean over condition tokens, replicated once per visual row.
template <typename Real>
Tensor<Real> build_condition_mask(Tape<Real>& tape, const Tensor<Real>& rel, int visual_rows) {
  if (visual_rows < 1)
    throw std::invalid_argument("build_condition_mask: visual_rows must be >= 1");
  return ops::repeat_row(tape, ops::mean_rows(tape, rel), visual_rows);
}

template <typename Real>
struct FusionOutput {
  Tensor<Real> fused;                        // n_v x d
  Tensor<Real> fused_cls;                    // 1 x d, row 0 of fused
  Tensor<Real> text_final;                   // 1 x d, last row of the prompt features
  std::vector<Tensor<Real>> head_attention;  // per-head weights, each n_v x n_p
  std::vector<Real> attention_avg;           // head-averaged weights, n_v * n_p
  Tensor<Real> mask_used;                    // effective {0,-inf} mask (undefined when none)
  std::vector<int> fallback_rows;            // rows reverted to unmasked attention
};

/// Cross attention from visual rows onto prompt tokens with an optional
/// additive mask. sentinel_mask must be {0, -inf}; rows that are fully
/// masked revert to unmasked attention and are reported in fallback_rows.
/// soft_bias, when defined, is added to every head's logits instead.
template <typename Real>
FusionOutput<Real> masked_cross_attention(Tape<Real>& tape, const Tensor<Real>& visual_feats,
                                          const Tensor<Real>& text_feats,
                                          const Tensor<Real>& sentinel_mask,
                                          const Tensor<Real>& soft_bias,
                                          const PreferenceHead<Real>& head, int heads) {
  const int d = visual_feats.cols();
  if (text_feats.cols() != d) throw std::invalid_argument("masked_cross_attention: width mismatch");
  if (d % heads != 0)
    throw std::invalid_argument("masked_cross_attention: width not divisible by heads");
  const int dh = d / heads;

  FusionOutput<Real> out;
  Tensor<Real> eff_mask = sentinel_mask;
  if (sentinel_mask.defined()) {
    if (sentinel_mask.rows() != visual_feats.rows() || sentinel_mask.cols() != text_feats.rows())
      throw std::invalid_argument("masked_cross_attention: mask shape mismatch");
    const Real ninf = ops::neg_inf<Real>();
    for (int i = 0; i < sentinel_mask.rows(); ++i) {
      bool all_masked = true;
      for (int j = 0; j < sentinel_mask.cols(); ++j)
        if (sentinel_mask.at(i, j) != ninf) {
          all_masked = false;
          break;
        }
      if (all_masked) out.fallback_rows.push_back(i);
    }
    if (!out.fallback_rows.empty()) eff_mask = ops::unmask_rows(tape, sentinel_mask, out.fallback_rows);
  }
  out.mask_used = eff_mask;

  auto q = ops::matmul(tape, visual_feats, head.query_proj);
  auto k = ops::matmul(tape, text_feats, head.key_proj);
  auto v = ops::matmul(tape, text_feats, head.value_proj);

  out.attention_avg.assign(static_cast<std::size_t>(visual_feats.rows()) * text_feats.rows(),
                           Real(0));
  std::vector<Tensor<Real>> fused_heads;
  fused_heads.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    auto qh = ops::slice_cols(tape, q, h * dh, (h + 1) * dh);
    auto kh = ops::slice_cols(tape, k, h * dh, (h + 1) * dh);
    auto vh = ops::slice_cols(tape, v, h * dh, (h + 1) * dh);
    auto logits = ops::scale_const(tape, ops::matmul_nt(tape, qh, kh),
                                   static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dh))));
    if (soft_bias.defined()) logits = ops::add(tape, logits, soft_bias);
    auto weights = ops::masked_softmax_rows(tape, logits, eff_mask);
    for (std::size_t i = 0; i < weights.size(); ++i)
      out.attention_avg[i] += weights.data()[i] / static_cast<Real>(heads);
    out.head_attention.push_back(weights);
    fused_heads.push_back(ops::matmul(tape, weights, vh));
  }
  out.fused = ops::concat_cols(tape, fused_heads);
  out.fused_cls = ops::gather_rows(tape, out.fused, {0});
  out.text_final = ops::gather_rows(tape, text_feats, {text_feats.rows() - 1});
  return out;
}

template <typename Real>
struct ScoreResult {
  Tensor<Real> score;     // 1 x 1
  FusionOutput<Real> fusion;
  Tensor<Real> mask_row;  // 1 x n_p pre-binarization relevance mask (undefined in off mode)
};

/// Score from already-encoded features. Shared by training (which reuses
/// encodings across the two images of a pair and across conditions) and by
/// the one-shot scoring entry point.
template <typename Real>
ScoreResult<Real> score_from_features(Tape<Real>& tape, const Model<Real>& model,
                                      const Tensor<Real>& text_feats,
                                      const Tensor<Real>& cond_feats,
                                      const Tensor<Real>& visual_feats) {
  const HeadConfig& hc = model.cfg.head;
  ScoreResult<Real> res;

  Tensor<Real> sentinel_mask;
  Tensor<Real> soft_bias;
  if (hc.mask_mode != MaskMode::off) {
    auto rel = relevance(tape, cond_feats, text_feats, model.head.cond_form, model.head.cond_bias);
    res.mask_row = ops::mean_rows(tape, rel);
    auto full_mask = ops::repeat_row(tape, res.mask_row, visual_feats.rows());
    if (hc.mask_mode == MaskMode::hard) {
      sentinel_mask = ops::binarize_mask(tape, full_mask, static_cast<Real>(hc.threshold),
                                         hc.straight_through);
    } else {
      soft_bias = ops::scale_const(tape, full_mask, static_cast<Real>(hc.soft_scale));
    }
  }

  res.fusion = masked_cross_attention(tape, visual_feats, text_feats, sentinel_mask, soft_bias,
                                      model.head, model.cfg.encoder.heads);
  auto dot = ops::matmul_nt(tape, res.fusion.fused_cls, res.fusion.text_final);
  res.score = ops::mul(tape, model.head.score_scale, dot);
  return res;
}

/// Full pipeline: encode prompt, image, and condition, then score.
template <typename Real>
ScoreResult<Real> mps_score(Tape<Real>& tape, const Model<Real>& model,
                            const std::vector<int>& prompt_ids, const SyntheticImage& image,
                            const std::vector<int>& condition_ids) {
  auto text_feats = encode_text(tape, model.text, model.cfg.encoder, prompt_ids);
  auto cond_feats = encode_text(tape, model.text, model.cfg.encoder, condition_ids);
  auto visual_feats = encode_image(tape, model.image, model.cfg.encoder, image);
  auto res = score_from_features(tape, model, text_feats, cond_feats, visual_feats);
  if (!res.score.all_finite())
    throw std::runtime_error("mps_score: non-finite score");
  return res;
}

/// Convert a model to another precision (used for f64 gradient checks).
template <typename To, typename From>
Model<To> convert_model(const Model<From>& src) {
  Model<To> dst;
  dst.cfg = src.cfg;
  // rebuild with matching shapes, then copy values
  Rng dummy(0);
  dst.text = init_text_encoder<To>(dummy, src.cfg.encoder);
  dst.image = init_image_encoder<To>(dummy, src.cfg.encoder);
  dst.head = init_head<To>(dummy, src.cfg);
  auto sp = src.named_params();
  auto dp = dst.named_params();
  for (std::size_t i = 0; i < sp.size(); ++i) {
    auto& d = dp[i].second;
    for (std::size_t j = 0; j < d.size(); ++j)
      d.data()[j] = static_cast<To>(sp[i].second.data()[j]);
  }
  return dst;
}

}  // namespace mps
