#pragma once

// Toy CLIP-style dual encoder. Both encoders expose single-layer stepping so
// adapters can be interleaved between layers; encode() is the monolithic
// equivalent.

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "refformer/config.hpp"
#include "refformer/nn.hpp"
#include "refformer/ops.hpp"
#include "refformer/rng.hpp"

namespace refformer {

class VocabularyError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

/// Splits an H x W x 3 raster (row-major, channel-last) into raster-ordered
/// P x P patches, each flattened as (row, col, channel).
template <class T>
std::vector<T> patchify(std::span<const T> image, std::size_t height, std::size_t width,
                        std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0)
    throw DimensionError("patchify: " + std::to_string(height) + "x" + std::to_string(width) +
                         " not divisible by patch size " + std::to_string(patch));
  if (image.size() != height * width * 3)
    throw DimensionError("patchify: expected " + std::to_string(height * width * 3) +
                         " values, got " + std::to_string(image.size()));
  const std::size_t gh = height / patch, gw = width / patch, pd = 3 * patch * patch;
  std::vector<T> out(gh * gw * pd);
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px) {
      T* dst = out.data() + (py * gw + px) * pd;
      for (std::size_t y = 0; y < patch; ++y) {
        const T* src = image.data() + ((py * patch + y) * width + px * patch) * 3;
        std::copy_n(src, patch * 3, dst + y * patch * 3);
      }
    }
  return out;
}

/// Inverse of patchify.
template <class T>
std::vector<T> unpatchify(std::span<const T> patches, std::size_t height, std::size_t width,
                          std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0 ||
      patches.size() != height * width * 3)
    throw DimensionError("unpatchify: inconsistent extents");
  const std::size_t gw = width / patch, pd = 3 * patch * patch;
  std::vector<T> out(height * width * 3);
  for (std::size_t py = 0; py < height / patch; ++py)
    for (std::size_t px = 0; px < gw; ++px) {
      const T* src = patches.data() + (py * gw + px) * pd;
      for (std::size_t y = 0; y < patch; ++y)
        std::copy_n(src + y * patch * 3, patch * 3,
                    out.data() + ((py * patch + y) * width + px * patch) * 3);
    }
  return out;
}

/// A batch of token id sequences, right-padded to a common length, together
/// with the attention key mask (1 = real token) and the EOS positions.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> key_mask;
  std::vector<std::size_t> eos_position;
};

template <class T>
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(const ModelConfig& cfg, Philox& rng)
      : patch_size_(cfg.patch_size),
        image_size_(cfg.image_size),
        patch_proj_(cfg.patch_dim(), cfg.width, rng),
        cls_token_(uniform_init<T>({1, 1, cfg.width}, cfg.width, rng)),
        pos_embed_(uniform_init<T>({cfg.image_tokens(), cfg.width}, cfg.width, rng)),
        ln_pre_(cfg.width) {
    for (std::size_t i = 0; i < cfg.layers; ++i) layers_.emplace_back(cfg.width, cfg.heads, cfg.mlp_ratio, rng);
  }

  std::size_t num_layers() const { return layers_.size(); }

  /// patches [B, N_v, 3P^2] -> Z_v^0 = LN([x_cls; phi_e(X_v)] + E_v), [B, N_v+1, D].
  Tensor<T> embed(const Tensor<T>& patches) const {
    if (patches.rank() != 3) throw DimensionError("embed_image: expected [B, N_v, 3P^2]");
    const std::size_t batch = patches.dim(0);
    const Tensor<T> tokens = patch_proj_(patches);
    const Tensor<T> cls = broadcast_to(cls_token_, Shape{batch, 1, cls_token_.dim(2)});
    const Tensor<T> seq = concat<T>({cls, tokens}, 1);
    if (seq.dim(1) != pos_embed_.dim(0))
      throw DimensionError("embed_image: " + std::to_string(seq.dim(1)) +
                           " tokens but positional table has " + std::to_string(pos_embed_.dim(0)));
    return ln_pre_(add(seq, pos_embed_));
  }

  /// Applies transformer layer i (1-based).
  Tensor<T> layer(std::size_t i, const Tensor<T>& z, Tensor<T>* probs = nullptr) const {
    if (i < 1 || i > layers_.size())
      throw ContractError("image_layer: index " + std::to_string(i) + " outside [1, " +
                          std::to_string(layers_.size()) + "]");
    return layers_[i - 1](z, nullptr, probs);
  }

  Tensor<T> encode(const Tensor<T>& patches) const {
    Tensor<T> z = embed(patches);
    for (std::size_t i = 1; i <= layers_.size(); ++i) z = layer(i, z);
    return z;
  }

  /// images [B, H, W, 3] -> patches [B, N_v, 3P^2].
  Tensor<T> patchify_batch(const Tensor<T>& images) const {
    if (images.rank() != 4 || images.dim(3) != 3)
      throw DimensionError("patchify: expected [B, H, W, 3], got " + shape_str(images.shape()));
    const std::size_t b = images.dim(0), h = images.dim(1), w = images.dim(2);
    const std::size_t per = h * w * 3;
    std::vector<T> out;
    out.reserve(images.numel());
    for (std::size_t i = 0; i < b; ++i) {
      auto p = patchify<T>(images.data().subspan(i * per, per), h, w, patch_size_);
      out.insert(out.end(), p.begin(), p.end());
    }
    const std::size_t n = (h / patch_size_) * (w / patch_size_);
    return Tensor<T>(Shape{b, n, 3 * patch_size_ * patch_size_}, std::move(out));
  }

  Linear<T>& patch_proj() { return patch_proj_; }
  Tensor<T>& cls_token() { return cls_token_; }
  Tensor<T>& pos_embed() { return pos_embed_; }
  LayerNorm<T>& ln_pre() { return ln_pre_; }
  TransformerLayer<T>& block(std::size_t i) { return layers_.at(i - 1); }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    patch_proj_.visit(prefix + ".patch_proj", fn);
    fn(prefix + ".cls_token", cls_token_);
    fn(prefix + ".pos_embed", pos_embed_);
    ln_pre_.visit(prefix + ".ln_pre", fn);
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i].visit(prefix + ".layer" + std::to_string(i + 1), fn);
  }

 private:
  std::size_t patch_size_ = 8;
  std::size_t image_size_ = 64;
  Linear<T> patch_proj_;
  Tensor<T> cls_token_;
  Tensor<T> pos_embed_;
  LayerNorm<T> ln_pre_;
  std::vector<TransformerLayer<T>> layers_;
};

template <class T>
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(const ModelConfig& cfg, Philox& rng)
      : token_table_(uniform_init<T>({cfg.vocab_size, cfg.width}, cfg.width, rng)),
        pos_embed_(uniform_init<T>({cfg.max_text_len, cfg.width}, cfg.width, rng)) {
    for (std::size_t i = 0; i < cfg.layers; ++i) layers_.emplace_back(cfg.width, cfg.heads, cfg.mlp_ratio, rng);
  }

  std::size_t num_layers() const { return layers_.size(); }
  std::size_t vocab_size() const { return token_table_.dim(0); }
  std::size_t max_length() const { return pos_embed_.dim(0); }

  /// Z_t^0 = [x_sos; X_t; x_eos] + E_t for already-bracketed, padded ids.
  Tensor<T> embed(const TokenBatch& tokens) const {
    if (tokens.length > max_length())
      throw DimensionError("embed_text: sequence length " + std::to_string(tokens.length) +
                           " exceeds " + std::to_string(max_length()));
    std::vector<std::size_t> rows(tokens.ids.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const std::int32_t id = tokens.ids[i];
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size())
        throw VocabularyError("embed_text: token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(vocab_size()));
      rows[i] = static_cast<std::size_t>(id);
    }
    const std::size_t d = token_table_.dim(1);
    const Tensor<T> emb = reshape(index_select(token_table_, rows), Shape{tokens.batch, tokens.length, d});
    const Tensor<T> pos = tokens.length == max_length() ? pos_embed_ : slice(pos_embed_, 0, 0, tokens.length);
    return add(emb, pos);
  }

  Tensor<T> layer(std::size_t i, const Tensor<T>& z, const std::vector<std::uint8_t>* key_mask,
                  Tensor<T>* probs = nullptr) const {
    if (i < 1 || i > layers_.size())
      throw ContractError("text_layer: index " + std::to_string(i) + " outside [1, " +
                          std::to_string(layers_.size()) + "]");
    return layers_[i - 1](z, key_mask, probs);
  }

  Tensor<T> encode(const TokenBatch& tokens) const {
    Tensor<T> z = embed(tokens);
    for (std::size_t i = 1; i <= layers_.size(); ++i) z = layer(i, z, &tokens.key_mask);
    return z;
  }

  Tensor<T>& token_table() { return token_table_; }
  Tensor<T>& pos_embed() { return pos_embed_; }
  TransformerLayer<T>& block(std::size_t i) { return layers_.at(i - 1); }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    fn(prefix + ".token_table", token_table_);
    fn(prefix + ".pos_embed", pos_embed_);
    for (std::size_t i = 0; i < layers_.size(); ++i)
      layers_[i].visit(prefix + ".layer" + std::to_string(i + 1), fn);
  }

 private:
  Tensor<T> token_table_;
  Tensor<T> pos_embed_;
  std::vector<TransformerLayer<T>> layers_;
};

/// Image + text encoder pair with a freeze switch.
template <class T>
class DualEncoder {
 public:
  DualEncoder() = default;
  DualEncoder(const ModelConfig& cfg, Philox& rng) : image(cfg, rng), text(cfg, rng) {}

  ImageEncoder<T> image;
  TextEncoder<T> text;

  /// Frozen parameters stop accumulating gradients and are skipped by the
  /// optimizer; gradients still flow through the activations.
  void freeze() { set_trainable(false); }
  void unfreeze() { set_trainable(true); }
  bool frozen() const { return frozen_; }

  /// Global-token embedding rows of a text sequence: [B, D].
  static Tensor<T> global_tokens(const Tensor<T>& text_seq, const TokenBatch& tokens, GlobalToken which) {
    const std::size_t b = text_seq.dim(0), n = text_seq.dim(1), d = text_seq.dim(2);
    std::vector<std::size_t> rows(b);
    for (std::size_t i = 0; i < b; ++i)
      rows[i] = i * n + (which == GlobalToken::kSos ? 0 : tokens.eos_position.at(i));
    return index_select(reshape(text_seq, Shape{b * n, d}), rows);
  }

  void visit(const std::string& prefix, const ParamVisitor<T>& fn) {
    image.visit(prefix + ".image", fn);
    text.visit(prefix + ".text", fn);
  }

 private:
  void set_trainable(bool flag) {
    frozen_ = !flag;
    visit("backbone", [flag](const std::string&, Tensor<T>& p) { p.set_requires_grad(flag); });
  }

  bool frozen_ = false;
};

}  // namespace refformer
