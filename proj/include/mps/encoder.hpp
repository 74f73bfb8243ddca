#pragma once

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mps/image.hpp"
#include "mps/ops.hpp"
#include "mps/rng.hpp"
#include "mps/tensor.hpp"

namespace mps {

struct EncoderConfig {
  int width = 64;       // feature dimension shared by all towers
  int blocks = 2;
  int heads = 4;
  int max_tokens = 32;
  int patch = 8;
  int image_size = 32;
  int channels = 3;
  int vocab_size = 0;

  int patch_dim() const { return patch * patch * channels; }
  int patches_per_image() const { return (image_size / patch) * (image_size / patch); }
  int image_rows() const { return patches_per_image() + 1; }  // +1 for the CLS row

  void validate() const {
    if (width <= 0 || blocks <= 0 || heads <= 0 || max_tokens < 2 || patch <= 0 ||
        image_size <= 0 || channels <= 0 || vocab_size <= 0)
      throw std::invalid_argument("EncoderConfig: all dimensions must be positive");
    if (width % heads != 0)
      throw std::invalid_argument("EncoderConfig: width must be divisible by head count");
    if (image_size % patch != 0)
      throw std::invalid_argument("EncoderConfig: image size must be divisible by patch size");
  }
};

/// Pre-norm transformer block: x + MHSA(LN(x)), then h + FFN(LN(h)).
template <typename Real>
struct TransformerBlock {
  Tensor<Real> ln1_gain, ln1_bias;
  Tensor<Real> attn_query_w, attn_query_b;
  Tensor<Real> attn_key_w, attn_key_b;
  Tensor<Real> attn_value_w, attn_value_b;
  Tensor<Real> attn_out_w, attn_out_b;
  Tensor<Real> ln2_gain, ln2_bias;
  Tensor<Real> ff1_w, ff1_b;
  Tensor<Real> ff2_w, ff2_b;
};

template <typename Real>
struct TextEncoder {
  Tensor<Real> token_embed;  // vocab x d
  Tensor<Real> pos_embed;    // max_tokens x d
  std::vector<TransformerBlock<Real>> blocks;
  Tensor<Real> final_gain, final_bias;
};

template <typename Real>
struct ImageEncoder {
  Tensor<Real> patch_proj;   // patch_dim x d
  Tensor<Real> patch_bias;   // 1 x d
  Tensor<Real> cls_embed;    // learned CLS row, 1 x d
  Tensor<Real> pos_embed;    // image_rows x d
  std::vector<TransformerBlock<Real>> blocks;
  Tensor<Real> final_gain, final_bias;
};

namespace init {

/// Scaled-uniform (+-1/sqrt(fan_in)) weight matrix.
template <typename Real>
Tensor<Real> projection(Rng& rng, int fan_in, int fan_out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::vector<Real> v(static_cast<std::size_t>(fan_in) * fan_out);
  for (auto& x : v) x = static_cast<Real>(rng.uniform(-bound, bound));
  return Tensor<Real>::from(fan_in, fan_out, std::move(v), true);
}

template <typename Real>
Tensor<Real> embedding(Rng& rng, int rows, int width) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(width));
  std::vector<Real> v(static_cast<std::size_t>(rows) * width);
  for (auto& x : v) x = static_cast<Real>(rng.uniform(-bound, bound));
  return Tensor<Real>::from(rows, width, std::move(v), true);
}

template <typename Real>
Tensor<Real> zero_bias(int width) {
  return Tensor<Real>::zeros(1, width, true);
}

template <typename Real>
Tensor<Real> ones_row(int width) {
  std::vector<Real> v(static_cast<std::size_t>(width), Real(1));
  return Tensor<Real>::from(1, width, std::move(v), true);
}

template <typename Real>
TransformerBlock<Real> block(Rng& rng, const EncoderConfig& cfg) {
  const int d = cfg.width;
  const int hidden = 4 * d;
  TransformerBlock<Real> b;
  b.ln1_gain = ones_row<Real>(d);
  b.ln1_bias = zero_bias<Real>(d);
  b.attn_query_w = projection<Real>(rng, d, d);
  b.attn_query_b = zero_bias<Real>(d);
  b.attn_key_w = projection<Real>(rng, d, d);
  b.attn_key_b = zero_bias<Real>(d);
  b.attn_value_w = projection<Real>(rng, d, d);
  b.attn_value_b = zero_bias<Real>(d);
  b.attn_out_w = projection<Real>(rng, d, d);
  b.attn_out_b = zero_bias<Real>(d);
  b.ln2_gain = ones_row<Real>(d);
  b.ln2_bias = zero_bias<Real>(d);
  b.ff1_w = projection<Real>(rng, d, hidden);
  b.ff1_b = zero_bias<Real>(hidden);
  b.ff2_w = projection<Real>(rng, hidden, d);
  b.ff2_b = zero_bias<Real>(d);
  return b;
}

}  // namespace init

template <typename Real>
TextEncoder<Real> init_text_encoder(Rng& rng, const EncoderConfig& cfg) {
  cfg.validate();
  TextEncoder<Real> enc;
  enc.token_embed = init::embedding<Real>(rng, cfg.vocab_size, cfg.width);
  enc.pos_embed = init::embedding<Real>(rng, cfg.max_tokens, cfg.width);
  for (int i = 0; i < cfg.blocks; ++i) enc.blocks.push_back(init::block<Real>(rng, cfg));
  enc.final_gain = init::ones_row<Real>(cfg.width);
  enc.final_bias = init::zero_bias<Real>(cfg.width);
  return enc;
}

template <typename Real>
ImageEncoder<Real> init_image_encoder(Rng& rng, const EncoderConfig& cfg) {
  cfg.validate();
  ImageEncoder<Real> enc;
  enc.patch_proj = init::projection<Real>(rng, cfg.patch_dim(), cfg.width);
  enc.patch_bias = init::zero_bias<Real>(cfg.width);
  enc.cls_embed = init::embedding<Real>(rng, 1, cfg.width);
  enc.pos_embed = init::embedding<Real>(rng, cfg.image_rows(), cfg.width);
  for (int i = 0; i < cfg.blocks; ++i) enc.blocks.push_back(init::block<Real>(rng, cfg));
  enc.final_gain = init::ones_row<Real>(cfg.width);
  enc.final_bias = init::zero_bias<Real>(cfg.width);
  return enc;
}

namespace detail {

/// Multi-head self-attention over x, optionally reporting the head-averaged
/// attention weights of this call (values only, outside the graph).
template <typename Real>
Tensor<Real> self_attention(Tape<Real>& tape, const Tensor<Real>& x,
                            const TransformerBlock<Real>& blk, int heads,
                            std::vector<Real>* attn_avg = nullptr) {
  const int d = x.cols();
  const int dh = d / heads;
  auto q = ops::add_rowvec(tape, ops::matmul(tape, x, blk.attn_query_w), blk.attn_query_b);
  auto k = ops::add_rowvec(tape, ops::matmul(tape, x, blk.attn_key_w), blk.attn_key_b);
  auto v = ops::add_rowvec(tape, ops::matmul(tape, x, blk.attn_value_w), blk.attn_value_b);
  if (attn_avg) attn_avg->assign(static_cast<std::size_t>(x.rows()) * x.rows(), Real(0));
  std::vector<Tensor<Real>> head_out;
  head_out.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    auto qh = ops::slice_cols(tape, q, h * dh, (h + 1) * dh);
    auto kh = ops::slice_cols(tape, k, h * dh, (h + 1) * dh);
    auto vh = ops::slice_cols(tape, v, h * dh, (h + 1) * dh);
    auto logits = ops::scale_const(tape, ops::matmul_nt(tape, qh, kh),
                                   static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dh))));
    auto weights = ops::softmax_rows(tape, logits);
    if (attn_avg)
      for (std::size_t i = 0; i < weights.size(); ++i)
        (*attn_avg)[i] += weights.data()[i] / static_cast<Real>(heads);
    head_out.push_back(ops::matmul(tape, weights, vh));
  }
  auto merged = ops::concat_cols(tape, head_out);
  return ops::add_rowvec(tape, ops::matmul(tape, merged, blk.attn_out_w), blk.attn_out_b);
}

template <typename Real>
Tensor<Real> feed_forward(Tape<Real>& tape, const Tensor<Real>& x,
                          const TransformerBlock<Real>& blk) {
  auto h = ops::gelu(tape, ops::add_rowvec(tape, ops::matmul(tape, x, blk.ff1_w), blk.ff1_b));
  return ops::add_rowvec(tape, ops::matmul(tape, h, blk.ff2_w), blk.ff2_b);
}

template <typename Real>
Tensor<Real> run_block(Tape<Real>& tape, const Tensor<Real>& x, const TransformerBlock<Real>& blk,
                       int heads, std::vector<Real>* attn_avg = nullptr) {
  auto normed = ops::layer_norm_rows(tape, x, blk.ln1_gain, blk.ln1_bias);
  auto h = ops::add(tape, x, self_attention(tape, normed, blk, heads, attn_avg));
  auto normed2 = ops::layer_norm_rows(tape, h, blk.ln2_gain, blk.ln2_bias);
  return ops::add(tape, h, feed_forward(tape, normed2, blk));
}

}  // namespace detail

/// Token ids -> one feature row per token.
template <typename Real>
Tensor<Real> encode_text(Tape<Real>& tape, const TextEncoder<Real>& enc, const EncoderConfig& cfg,
                         const std::vector<int>& token_ids) {
  if (token_ids.empty()) throw std::invalid_argument("encode_text: empty token sequence");
  if (static_cast<int>(token_ids.size()) > cfg.max_tokens)
    throw std::invalid_argument("encode_text: sequence exceeds max_tokens");
  for (int id : token_ids)
    if (id < 0 || id >= cfg.vocab_size)
      throw std::invalid_argument("encode_text: token id out of range: " + std::to_string(id));
  std::vector<int> positions(token_ids.size());
  std::iota(positions.begin(), positions.end(), 0);
  auto x = ops::add(tape, ops::gather_rows(tape, enc.token_embed, token_ids),
                    ops::gather_rows(tape, enc.pos_embed, positions));
  for (const auto& blk : enc.blocks) x = detail::run_block(tape, x, blk, cfg.heads);
  return ops::layer_norm_rows(tape, x, enc.final_gain, enc.final_bias);
}

/// Non-differentiable patch flattening: one row per patch, row-major patch
/// grid, (y, x, channel) order within a patch.
template <typename Real>
Tensor<Real> flatten_patches(const SyntheticImage& img, int patch) {
  const int gy = img.height / patch;
  const int gx = img.width / patch;
  auto out = Tensor<Real>::zeros(gy * gx, patch * patch * img.channels);
  for (int py = 0; py < gy; ++py)
    for (int px = 0; px < gx; ++px) {
      Real* row = out.data() + static_cast<std::size_t>(py * gx + px) * out.cols();
      std::size_t k = 0;
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x)
          for (int c = 0; c < img.channels; ++c)
            row[k++] = static_cast<Real>(img.at(py * patch + y, px * patch + x, c));
    }
  return out;
}

/// Image -> CLS row followed by one feature row per patch. cls_attention,
/// when given, receives the final block's head-averaged CLS attention over
/// all rows (length image_rows).
template <typename Real>
Tensor<Real> encode_image(Tape<Real>& tape, const ImageEncoder<Real>& enc,
                          const EncoderConfig& cfg, const SyntheticImage& img,
                          std::vector<Real>* cls_attention = nullptr) {
  if (img.height % cfg.patch != 0 || img.width % cfg.patch != 0)
    throw std::invalid_argument("encode_image: dimensions not divisible by patch size");
  if (img.height != cfg.image_size || img.width != cfg.image_size ||
      img.channels != cfg.channels)
    throw std::invalid_argument("encode_image: image does not match configured size");
  auto patches = flatten_patches<Real>(img, cfg.patch);
  auto projected =
      ops::add_rowvec(tape, ops::matmul(tape, patches, enc.patch_proj), enc.patch_bias);
  auto with_cls = ops::concat_rows(tape, enc.cls_embed, projected);
  std::vector<int> positions(static_cast<std::size_t>(with_cls.rows()));
  std::iota(positions.begin(), positions.end(), 0);
  auto x = ops::add(tape, with_cls, ops::gather_rows(tape, enc.pos_embed, positions));
  std::vector<Real> attn_avg;
  for (std::size_t b = 0; b < enc.blocks.size(); ++b) {
    const bool last = b + 1 == enc.blocks.size();
    x = detail::run_block(tape, x, enc.blocks[b], cfg.heads,
                          (last && cls_attention) ? &attn_avg : nullptr);
  }
  if (cls_attention) {
    cls_attention->assign(attn_avg.begin(), attn_avg.begin() + x.rows());  // CLS query row
  }
  return ops::layer_norm_rows(tape, x, enc.final_gain, enc.final_bias);
}

namespace detail {

template <typename Real>
void push_block_params(std::vector<std::pair<std::string, Tensor<Real>>>& out,
                       const std::string& prefix, const TransformerBlock<Real>& b) {
  out.emplace_back(prefix + ".ln1_gain", b.ln1_gain);
  out.emplace_back(prefix + ".ln1_bias", b.ln1_bias);
  out.emplace_back(prefix + ".attn_query_w", b.attn_query_w);
  out.emplace_back(prefix + ".attn_query_b", b.attn_query_b);
  out.emplace_back(prefix + ".attn_key_w", b.attn_key_w);
  out.emplace_back(prefix + ".attn_key_b", b.attn_key_b);
  out.emplace_back(prefix + ".attn_value_w", b.attn_value_w);
  out.emplace_back(prefix + ".attn_value_b", b.attn_value_b);
  out.emplace_back(prefix + ".attn_out_w", b.attn_out_w);
  out.emplace_back(prefix + ".attn_out_b", b.attn_out_b);
  out.emplace_back(prefix + ".ln2_gain", b.ln2_gain);
  out.emplace_back(prefix + ".ln2_bias", b.ln2_bias);
  out.emplace_back(prefix + ".ff1_w", b.ff1_w);
  out.emplace_back(prefix + ".ff1_b", b.ff1_b);
  out.emplace_back(prefix + ".ff2_w", b.ff2_w);
  out.emplace_back(prefix + ".ff2_b", b.ff2_b);
}

}  // namespace detail

template <typename Real>
void append_params(std::vector<std::pair<std::string, Tensor<Real>>>& out,
                   const std::string& prefix, const TextEncoder<Real>& enc) {
  out.emplace_back(prefix + ".token_embed", enc.token_embed);
  out.emplace_back(prefix + ".pos_embed", enc.pos_embed);
  for (std::size_t i = 0; i < enc.blocks.size(); ++i)
    detail::push_block_params(out, prefix + ".block" + std::to_string(i), enc.blocks[i]);
  out.emplace_back(prefix + ".final_gain", enc.final_gain);
  out.emplace_back(prefix + ".final_bias", enc.final_bias);
}

template <typename Real>
void append_params(std::vector<std::pair<std::string, Tensor<Real>>>& out,
                   const std::string& prefix, const ImageEncoder<Real>& enc) {
  out.emplace_back(prefix + ".patch_proj", enc.patch_proj);
  out.emplace_back(prefix + ".patch_bias", enc.patch_bias);
  out.emplace_back(prefix + ".cls_embed", enc.cls_embed);
  out.emplace_back(prefix + ".pos_embed", enc.pos_embed);
  for (std::size_t i = 0; i < enc.blocks.size(); ++i)
    detail::push_block_params(out, prefix + ".block" + std::to_string(i), enc.blocks[i]);
  out.emplace_back(prefix + ".final_gain", enc.final_gain);
  out.emplace_back(prefix + ".final_bias", enc.final_bias);
}

}  // namespace mps
