/*
 * Copyright (c) 2026 The crossgate Authors
 *
 * Licensed under the Apache License, Version 2.0;
 * You may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an 'AS IS' BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "crossgate/config.hpp"
#include "crossgate/ops.hpp"
#include "crossgate/params.hpp"
#include "crossgate/vocab.hpp"

namespace crossgate {

/// Class token followed by N projected patches, positions added.
template <class T>
struct PatchSequence {
  Tensor<T> embeddings;  // (N+1) x D_v
  std::size_t patches = 0;
};

template <class T>
struct TokenSequence {
  std::vector<int> ids;  // start, M words, end
  Tensor<T> embeddings;  // (M+2) x D_t
};

/// Input and per-layer outputs of one uni-modal tower.
template <class T>
struct TowerTrace {
  Tensor<T> input;                // layer 0
  std::vector<Tensor<T>> layers;  // layers 1..L
  std::vector<Tensor<T>> attn;    // heads x S x S per layer, values only

  /// Layer k output; k = 0 is the embedded input.
  const Tensor<T>& at(std::size_t k) const { return k == 0 ? input : layers.at(k - 1); }
};

template <class T>
struct LayerTrace {
  TowerTrace<T> text;
  TowerTrace<T> visual;
};

template <class T>
struct AttentionOutput {
  Tensor<T> out;
  Tensor<T> probs;  // heads x Sq x Sk
};

template <class T>
Tensor<T> linear(const Tensor<T>& x, const ParamView<T>& p, const std::string& w, const std::string& b) {
  return add(matmul(x, p(w)), p(b));
}

/// Rearranges a C x H x W image into N rows of C*P*P features: patches in
/// row-major grid order, each flattened channel-major.
template <class T>
Tensor<T> extract_patches(const Tensor<T>& image, const ModelConfig& c) {
  if (image.rank() != 3 || image.dim(0) != c.channels || image.dim(1) != c.height || image.dim(2) != c.width)
    throw ShapeError("extract_patches: image " + image.shape().str() + " does not match config " +
                     Shape{c.channels, c.height, c.width}.str());
  if (c.height % c.patch || c.width % c.patch) throw ShapeError("extract_patches: image size not divisible by patch");
  const std::size_t gh = c.patch_grid_h(), gw = c.patch_grid_w(), p = c.patch, f = c.patch_features();
  Tensor<T> out(Shape{gh * gw, f});
  auto o = out.mutable_data();
  const auto d = image.data();
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      T* row = o.data() + (gy * gw + gx) * f;
      std::size_t k = 0;
      for (std::size_t ch = 0; ch < c.channels; ++ch)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t x = 0; x < p; ++x) row[k++] = d[(ch * c.height + gy * p + y) * c.width + gx * p + x];
    }
  return out;
}

template <class T>
PatchSequence<T> patchify_embed(const Tensor<T>& image, const ModelConfig& c, const ParamView<T>& p) {
  const auto patches = extract_patches(image, c);
  const auto projected = matmul(patches, p("vis.patch_w"));
  const auto cls = reshape(p("vis.cls"), Shape{1, c.visual_dim});
  auto seq = add(concat<T>({cls, projected}, 0), p("vis.pos"));
  return {std::move(seq), c.patch_count()};
}

template <class T>
TokenSequence<T> embed_tokens(std::vector<int> ids, const ModelConfig& c, const ParamView<T>& p) {
  if (ids.size() < 2 || ids.size() > c.max_text_len)
    throw ShapeError("embed_tokens: sequence of " + std::to_string(ids.size()) + " tokens outside [2, " +
                     std::to_string(c.max_text_len) + "]");
  auto words = embedding(p("txt.word"), std::span<const int>(ids));
  auto pos = slice(p("txt.pos"), 0, 0, ids.size());
  return {std::move(ids), add(words, pos)};
}

template <class T>
TokenSequence<T> tokenize_embed(std::string_view text, const Vocab& vocab, const ModelConfig& c, const ParamView<T>& p) {
  return embed_tokens(vocab.encode(text, c.max_text_len), c, p);
}

/// Additive key mask: 0 for real tokens, -1e9 for padding.
template <class T>
Tensor<T> padding_mask(std::span<const int> ids) {
  Tensor<T> m(Shape{ids.size()});
  auto d = m.mutable_data();
  for (std::size_t i = 0; i < ids.size(); ++i) d[i] = ids[i] == Vocab::kPad ? T(-1e9) : T(0);
  return m;
}

/// Multi-head scaled dot-product attention of `queries` over `keys`;
/// parameters under `prefix` (.wq/.bq/.wk/.bk/.wv/.bv/.wo/.bo).
template <class T>
AttentionOutput<T> multi_head_attention(const Tensor<T>& queries, const Tensor<T>& keys, const ParamView<T>& p,
                                        const std::string& prefix, std::size_t heads, const Tensor<T>* key_mask = nullptr) {
  const std::size_t d = queries.shape().back();
  if (keys.shape().back() != d) throw ShapeError("attention: query dim " + queries.shape().str() + " vs key dim " + keys.shape().str());
  if (d % heads) throw ShapeError("attention: dim " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  const std::size_t dh = d / heads, sq = queries.dim(0), sk = keys.dim(0);
  const auto q = linear(queries, p, prefix + ".wq", prefix + ".bq");
  const auto k = linear(keys, p, prefix + ".wk", prefix + ".bk");
  const auto v = linear(keys, p, prefix + ".wv", prefix + ".bv");
  const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<Tensor<T>> outs;
  Tensor<T> probs(Shape{heads, sq, sk});
  auto pd = probs.mutable_data();
  for (std::size_t h = 0; h < heads; ++h) {
    const auto qh = slice(q, 1, h * dh, (h + 1) * dh);
    const auto kh = slice(k, 1, h * dh, (h + 1) * dh);
    const auto vh = slice(v, 1, h * dh, (h + 1) * dh);
    const auto a = softmax(scale(matmul(qh, transpose(kh)), inv_scale), key_mask);
    std::copy(a.data().begin(), a.data().end(), pd.begin() + static_cast<std::ptrdiff_t>(h * sq * sk));
    outs.push_back(matmul(a, vh));
  }
  auto merged = heads == 1 ? outs.front() : concat(outs);
  return {linear(merged, p, prefix + ".wo", prefix + ".bo"), std::move(probs)};
}

template <class T>
Tensor<T> feed_forward(const Tensor<T>& x, const ParamView<T>& p, const std::string& prefix) {
  return linear(gelu(linear(x, p, prefix + ".w1", prefix + ".b1")), p, prefix + ".w2", prefix + ".b2");
}

template <class T>
Tensor<T> norm(const Tensor<T>& x, const ParamView<T>& p, const std::string& prefix, double eps) {
  return layer_norm(x, p(prefix + ".g"), p(prefix + ".b"), static_cast<T>(eps));
}

/// Post-norm encoder block: x1 = LN(x + MSA(x)); out = LN(x1 + FFN(x1)).
template <class T>
AttentionOutput<T> transformer_layer(const Tensor<T>& x, const ParamView<T>& p, const std::string& prefix, std::size_t heads,
                                     double eps, const Tensor<T>* key_mask = nullptr) {
  if (x.rank() != 2) throw ShapeError("transformer_layer: expected S x D input, got " + x.shape().str());
  auto att = multi_head_attention(x, x, p, prefix + ".attn", heads, key_mask);
  const auto x1 = norm(add(x, att.out), p, prefix + ".ln1", eps);
  auto out = norm(add(x1, feed_forward(x1, p, prefix + ".ffn")), p, prefix + ".ln2", eps);
  return {std::move(out), std::move(att.probs)};
}

/// Recomputes layers first..depth of `trace`, keeping the earlier ones.
template <class T>
TowerTrace<T> resume_tower(TowerTrace<T> trace, std::size_t first, const ParamView<T>& p, std::string_view tower,
                           std::size_t depth, std::size_t heads, double eps, const Tensor<T>* key_mask = nullptr) {
  if (first < 1 || first > trace.layers.size() + 1) throw std::out_of_range("resume_tower: no layer " + std::to_string(first - 1) + " to resume from");
  trace.layers.resize(first - 1);
  trace.attn.resize(first - 1);
  for (std::size_t l = first; l <= depth; ++l) {
    auto r = transformer_layer(trace.at(l - 1), p, layer_prefix(tower, l), heads, eps, key_mask);
    trace.layers.push_back(std::move(r.out));
    trace.attn.push_back(std::move(r.probs));
  }
  return trace;
}

template <class T>
TowerTrace<T> encode_tower(const Tensor<T>& x0, const ParamView<T>& p, std::string_view tower, std::size_t depth,
                           std::size_t heads, double eps, const Tensor<T>* key_mask = nullptr) {
  return resume_tower(TowerTrace<T>{x0, {}, {}}, 1, p, tower, depth, heads, eps, key_mask);
}

template <class T>
TowerTrace<T> encode_visual(const PatchSequence<T>& v0, const ModelConfig& c, const ParamView<T>& p) {
  return encode_tower(v0.embeddings, p, "vis", c.visual_layers, c.uni_heads, c.ln_eps);
}

/// Pad tokens in the sequence are masked out as attention keys.
template <class T>
TowerTrace<T> encode_textual(const TokenSequence<T>& t0, const ModelConfig& c, const ParamView<T>& p) {
  const bool padded = std::find(t0.ids.begin(), t0.ids.end(), Vocab::kPad) != t0.ids.end();
  if (!padded) return encode_tower(t0.embeddings, p, "txt", c.text_layers, c.uni_heads, c.ln_eps);
  const auto mask = padding_mask<T>(t0.ids);
  return encode_tower(t0.embeddings, p, "txt", c.text_layers, c.uni_heads, c.ln_eps, &mask);
}

}  // namespace crossgate
