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

#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "crossgate/encoders.hpp"
#include "crossgate/gradcheck.hpp"

using namespace crossgate;
using Tensord = Tensor<double>;
using Matrix = std::vector<std::vector<double>>;

namespace {

Tensord random_tensor(Rng& rng, Shape shape, double scale = 1.0) {
  Tensord t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.normal() * scale;
  return t;
}

// Zeroes every weight and bias of one transformer layer, leaving LN at
// gamma 1, beta 0.
void zero_layer(TensorMap<double>& m, const std::string& prefix) {
  for (auto& [name, t] : m) {
    if (name.rfind(prefix + ".", 0) != 0) continue;
    const bool gain = name.size() > 2 && name.compare(name.size() - 2, 2, ".g") == 0;
    t = Tensord(t.shape(), gain ? 1.0 : 0.0);
  }
}

Matrix to_matrix(const Tensord& t) {
  Matrix m(t.dim(0), std::vector<double>(t.dim(1)));
  for (std::size_t i = 0; i < t.dim(0); ++i)
    for (std::size_t j = 0; j < t.dim(1); ++j) m[i][j] = t.at({i, j});
  return m;
}

// Straight-line reference implementation of one post-LN encoder layer.
Matrix mat_affine(const Matrix& x, const Tensord& w, const Tensord& b) {
  Matrix y(x.size(), std::vector<double>(w.dim(1)));
  for (std::size_t i = 0; i < x.size(); ++i)
    for (std::size_t j = 0; j < w.dim(1); ++j) {
      double s = b[j];
      for (std::size_t k = 0; k < x[i].size(); ++k) s += x[i][k] * w.at({k, j});
      y[i][j] = s;
    }
  return y;
}

Matrix ln_rows(const Matrix& x, const Tensord& g, const Tensord& b, double eps) {
  Matrix y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double n = static_cast<double>(x[i].size());
    double mu = 0, var = 0;
    for (double v : x[i]) mu += v;
    mu /= n;
    for (double v : x[i]) var += (v - mu) * (v - mu);
    var /= n;
    for (std::size_t j = 0; j < x[i].size(); ++j) y[i][j] = g[j] * (x[i][j] - mu) / std::sqrt(var + eps) + b[j];
  }
  return y;
}

Matrix reference_layer(const Matrix& x, const TensorMap<double>& p, const std::string& pre, std::size_t heads, double eps) {
  const std::size_t s = x.size(), d = x[0].size(), dh = d / heads;
  const auto& P = [&](const std::string& n) -> const Tensord& { return p.at(pre + n); };
  const Matrix q = mat_affine(x, P(".attn.wq"), P(".attn.bq"));
  const Matrix k = mat_affine(x, P(".attn.wk"), P(".attn.bk"));
  const Matrix v = mat_affine(x, P(".attn.wv"), P(".attn.bv"));
  Matrix ctx(s, std::vector<double>(d, 0.0));
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < s; ++i) {
      std::vector<double> a(s);
      double mx = -1e300;
      for (std::size_t j = 0; j < s; ++j) {
        double dot = 0;
        for (std::size_t e = 0; e < dh; ++e) dot += q[i][h * dh + e] * k[j][h * dh + e];
        a[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, a[j]);
      }
      double z = 0;
      for (auto& w : a) z += (w = std::exp(w - mx));
      for (std::size_t j = 0; j < s; ++j)
        for (std::size_t e = 0; e < dh; ++e) ctx[i][h * dh + e] += a[j] / z * v[j][h * dh + e];
    }
  const Matrix attn = mat_affine(ctx, P(".attn.wo"), P(".attn.bo"));
  Matrix r1 = x;
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < d; ++j) r1[i][j] += attn[i][j];
  const Matrix x1 = ln_rows(r1, P(".ln1.g"), P(".ln1.b"), eps);
  Matrix hdn = mat_affine(x1, P(".ffn.w1"), P(".ffn.b1"));
  for (auto& row : hdn)
    for (auto& u : row) u = 0.5 * u * (1 + std::erf(u / std::sqrt(2.0)));
  const Matrix f = mat_affine(hdn, P(".ffn.w2"), P(".ffn.b2"));
  Matrix r2 = x1;
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t j = 0; j < d; ++j) r2[i][j] += f[i][j];
  return ln_rows(r2, P(".ln2.g"), P(".ln2.b"), eps);
}

ModelConfig small_config(std::size_t d, std::size_t heads) {
  ModelConfig c;
  c.visual_dim = c.text_dim = c.fusion_dim = d;
  c.uni_heads = c.fusion_heads = heads;
  return c;
}

}  // namespace

TEST(Config, ToyPresetValidates) {
  EXPECT_NO_THROW(ModelConfig::toy().validate());
  EXPECT_NO_THROW(ModelConfig::reference().validate());
  EXPECT_EQ(ModelConfig::toy().patch_count(), 16u);
}

TEST(Config, RejectsIndivisiblePatch) {
  auto c = ModelConfig::toy();
  c.patch = 5;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, RejectsStartLayerOutOfRange) {
  auto c = ModelConfig::toy();
  c.start_layer_text = c.text_layers + 2;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Config, TextRoundTrip) {
  RunConfig c;
  c.model.topology = Topology::bottom_only;
  c.train.base_lr = 3.25e-4;
  c.seed = 99;
  const auto back = RunConfig::from_text(c.to_text());
  EXPECT_EQ(back.to_text(), c.to_text());
  EXPECT_EQ(back.model.topology, Topology::bottom_only);
  EXPECT_EQ(back.train.base_lr, 3.25e-4);
}

TEST(Config, CommentsAndUnknownKeys) {
  const auto c = RunConfig::from_text("# header\nfusion_layers = 3  # trailing\n\nstart_layer=2\n");
  EXPECT_EQ(c.model.fusion_layers, 3u);
  EXPECT_EQ(c.model.text_start(), 2u);
  EXPECT_EQ(c.model.visual_start(), 2u);
  EXPECT_THROW(RunConfig::from_text("not_a_key=1\n"), ConfigError);
  EXPECT_THROW(RunConfig::from_text("topology=sideways\n"), ConfigError);
}

TEST(Params, ClosedFormMatchesCountForEveryTopology) {
  for (auto topo : {Topology::all_gated, Topology::same_layer, Topology::last_only, Topology::bottom_only})
    for (bool per_layer : {false, true}) {
      auto c = ModelConfig::toy();
      c.topology = topo;
      c.per_layer_bridge_proj = per_layer;
      c.cls_classes = per_layer ? 7 : 0;
      EXPECT_EQ(closed_form_param_count(c), counted_param_count(param_specs(c))) << to_string(topo);
    }
}

TEST(Params, ReferenceConfigCount) {
  const auto c = ModelConfig::reference();
  EXPECT_EQ(closed_form_param_count(c), counted_param_count(param_specs(c)));
}

TEST(Params, NamesUnique) {
  const auto specs = param_specs(ModelConfig::toy());
  std::set<std::string> names;
  for (const auto& s : specs) EXPECT_TRUE(names.insert(s.name).second) << s.name;
}

TEST(Params, InitIsSeeded) {
  const auto a = ParamStore::init(ModelConfig::toy(), 3);
  const auto b = ParamStore::init(ModelConfig::toy(), 3);
  const auto c = ParamStore::init(ModelConfig::toy(), 4);
  const auto& wa = a.at("txt.word");
  EXPECT_TRUE(std::equal(wa.data().begin(), wa.data().end(), b.at("txt.word").data().begin()));
  EXPECT_FALSE(std::equal(wa.data().begin(), wa.data().end(), c.at("txt.word").data().begin()));
  EXPECT_EQ(a.at("fusion.layer1.gate_text.b")[0], 0.0);
  EXPECT_EQ(a.at("txt.layer1.ln1.g")[0], 1.0);
}

TEST(Params, InitStdIsConfigured) {
  const auto s = ParamStore::init(ModelConfig::toy(), 11);
  const auto d = s.at("txt.word").data();
  double ss = 0;
  for (double v : d) ss += v * v;
  EXPECT_NEAR(std::sqrt(ss / d.size()), 0.02, 0.002);
}

TEST(Vocab, EncodesWithSpecials) {
  const auto v = Vocab::from_words({"x", "y", "z", "a", "b"});  // a = 8, b = 9
  EXPECT_EQ(v.encode("", 50), (std::vector<int>{Vocab::kStart, Vocab::kEnd}));
  auto w = Vocab(std::vector<std::string>{"[PAD]", "<s>", "</s>", "[MASK]", "[UNK]", "a", "b"});
  EXPECT_EQ(w.encode("a b a", 50), (std::vector<int>{Vocab::kStart, 5, 6, 5, Vocab::kEnd}));
  EXPECT_EQ(w.encode("A  B\tzzz", 50), (std::vector<int>{Vocab::kStart, 5, 6, Vocab::kUnk, Vocab::kEnd}));
}

TEST(Vocab, TruncatesToMaxLength) {
  const auto v = Vocab::from_words({"w"});
  std::string text;
  for (int i = 0; i < 60; ++i) text += "w ";
  const auto ids = v.encode(text, 50);
  EXPECT_EQ(ids.size(), 50u);
  EXPECT_EQ(ids.front(), Vocab::kStart);
  EXPECT_EQ(ids.back(), Vocab::kEnd);
}

TEST(Vocab, RejectsEmpty) { EXPECT_THROW(Vocab(std::vector<std::string>{}), std::invalid_argument); }

TEST(Vocab, FileRoundTrip) {
  const auto path = ::testing::TempDir() + "vocab_roundtrip.txt";
  const auto v = Vocab::from_words({"red", "square"});
  v.save(path);
  const auto back = Vocab::load(path);
  EXPECT_EQ(back.size(), v.size());
  EXPECT_EQ(back.id("square"), v.id("square"));
}

TEST(Patchify, PatchCount) {
  auto c = small_config(8, 2);
  c.height = c.width = 4;
  c.patch = 2;
  const auto store = ParamStore::init(c, 1);
  const ParamView<double> p(store.values());
  const auto seq = patchify_embed(Tensord(Shape{3, 4, 4}, 0.5), c, p);
  EXPECT_EQ(seq.patches, 4u);
  EXPECT_EQ(seq.embeddings.shape(), (Shape{5, 8}));
}

TEST(Patchify, ZeroImageGivesClassRow) {
  auto c = ModelConfig::toy();
  auto values = ParamStore::init(c, 1).values();
  values.at("vis.patch_w") = Tensord(values.at("vis.patch_w").shape(), 0.0);
  values.at("vis.pos") = Tensord(values.at("vis.pos").shape(), 0.0);
  const ParamView<double> p(values);
  const auto seq = patchify_embed(Tensord(Shape{3, 16, 16}, 0.0), c, p);
  for (std::size_t j = 0; j < c.visual_dim; ++j) {
    EXPECT_EQ(seq.embeddings.at({0, j}), values.at("vis.cls")[j]);
    for (std::size_t i = 1; i <= c.patch_count(); ++i) EXPECT_EQ(seq.embeddings.at({i, j}), 0.0);
  }
}

TEST(Patchify, RowMajorPatchOrder) {
  ModelConfig c = small_config(1, 1);
  c.channels = 1;
  c.height = c.width = 2;
  c.patch = 1;
  TensorMap<double> values;
  values.emplace("vis.patch_w", Tensord(Shape{1, 1}, 1.0));
  values.emplace("vis.cls", Tensord(Shape{1}, 0.0));
  values.emplace("vis.pos", Tensord(Shape{5, 1}, 0.0));
  const ParamView<double> p(values);
  const auto seq = patchify_embed(Tensord(Shape{1, 2, 2}, {1, 2, 3, 4}), c, p);
  for (std::size_t i = 1; i <= 4; ++i) EXPECT_EQ(seq.embeddings.at({i, 0}), static_cast<double>(i));
}

TEST(Patchify, ChannelMajorWithinPatch) {
  ModelConfig c = small_config(1, 1);
  c.channels = 2;
  c.height = c.width = 2;
  c.patch = 2;
  std::vector<double> px(8);
  std::iota(px.begin(), px.end(), 0.0);
  const auto rows = extract_patches(Tensord(Shape{2, 2, 2}, px), c);
  ASSERT_EQ(rows.shape(), (Shape{1, 8}));
  for (std::size_t k = 0; k < 8; ++k) EXPECT_EQ(rows[k], static_cast<double>(k));
}

TEST(Patchify, RejectsMismatchedImage) {
  const auto c = ModelConfig::toy();
  const auto store = ParamStore::init(c, 1);
  const ParamView<double> p(store.values());
  EXPECT_THROW(patchify_embed(Tensord(Shape{3, 15, 16}), c, p), ShapeError);
}

TEST(Patchify, PermutationConsistency) {
  // Swapping two patches together with their positional rows swaps the
  // corresponding rows of the embedded sequence.
  const auto c = ModelConfig::toy();
  Rng rng(5);
  auto values = ParamStore::init(c, 2).values();
  const auto image = random_tensor(rng, Shape{3, 16, 16});
  const auto base = patchify_embed(image, c, ParamView<double>(values));

  const std::size_t a = 2, b = 13;  // grid cells (0,2) and (3,1)
  auto swapped = image;
  auto d = swapped.mutable_data();
  auto cell = [&](std::size_t k, std::size_t ch, std::size_t y, std::size_t x) -> double& {
    return d[(ch * 16 + (k / 4) * 4 + y) * 16 + (k % 4) * 4 + x];
  };
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) std::swap(cell(a, ch, y, x), cell(b, ch, y, x));
  auto pos = values.at("vis.pos");
  auto pd = pos.mutable_data();
  for (std::size_t j = 0; j < c.visual_dim; ++j) std::swap(pd[(a + 1) * c.visual_dim + j], pd[(b + 1) * c.visual_dim + j]);
  values.at("vis.pos") = pos;
  const auto perm = patchify_embed(swapped, c, ParamView<double>(values));
  for (std::size_t j = 0; j < c.visual_dim; ++j) {
    EXPECT_EQ(perm.embeddings.at({a + 1, j}), base.embeddings.at({b + 1, j}));
    EXPECT_EQ(perm.embeddings.at({b + 1, j}), base.embeddings.at({a + 1, j}));
    EXPECT_EQ(perm.embeddings.at({0, j}), base.embeddings.at({0, j}));
  }
}

TEST(Tokenize, EmptyTextIsStartEnd) {
  const auto c = ModelConfig::toy();
  const auto store = ParamStore::init(c, 1);
  const ParamView<double> p(store.values());
  const auto seq = tokenize_embed("", Vocab::from_words({"a"}), c, p);
  EXPECT_EQ(seq.ids, (std::vector<int>{Vocab::kStart, Vocab::kEnd}));
  EXPECT_EQ(seq.embeddings.shape(), (Shape{2, c.text_dim}));
  EXPECT_EQ(seq.embeddings.at({1, 3}), store.at("txt.word").at({2, 3}) + store.at("txt.pos").at({1, 3}));
}

TEST(Tokenize, ReferenceLengthTruncation) {
  auto c = small_config(8, 2);
  c.max_text_len = 50;
  const auto store = ParamStore::init(c, 1);
  std::string text;
  for (int i = 0; i < 60; ++i) text += "a ";
  const auto seq = tokenize_embed(text, Vocab::from_words({"a"}), c, ParamView<double>(store.values()));
  EXPECT_EQ(seq.ids.size(), 50u);
  EXPECT_EQ(seq.embeddings.dim(0), 50u);
}

TEST(TransformerLayer, SingleTokenAttendsToItself) {
  const auto c = small_config(8, 2);
  const auto store = ParamStore::init(c, 1);
  Rng rng(3);
  const auto out = transformer_layer(random_tensor(rng, Shape{1, 8}), ParamView<double>(store.values()), "txt.layer1", 2, 1e-5);
  ASSERT_EQ(out.probs.shape(), (Shape{2, 1, 1}));
  EXPECT_EQ(out.probs[0], 1.0);
  EXPECT_EQ(out.probs[1], 1.0);
}

TEST(TransformerLayer, ZeroWeightsIsDoubleNorm) {
  const auto c = small_config(8, 2);
  auto values = ParamStore::init(c, 1).values();
  zero_layer(values, "txt.layer1");
  Rng rng(4);
  const auto x = random_tensor(rng, Shape{3, 8});
  const ParamView<double> p(values);
  const auto out = transformer_layer(x, p, "txt.layer1", 2, 1e-5).out;
  const auto ones = Tensord(Shape{8}, 1.0), zeros = Tensord(Shape{8}, 0.0);
  const auto expect = layer_norm(layer_norm(x, ones, zeros, 1e-5), ones, zeros, 1e-5);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out[i], expect[i], 1e-12);
}

TEST(TransformerLayer, MatchesReferenceImplementation) {
  for (std::size_t s : {3u, 4u}) {
    const auto c = small_config(8, 2);
    auto values = ParamStore::init(c, 10 + s).values();
    Rng rng(20 + s);
    // Larger weights so the attention pattern is far from uniform.
    for (auto& [name, t] : values)
      if (name.rfind("txt.layer1.", 0) == 0) t = random_tensor(rng, t.shape(), 0.5);
    const auto x = random_tensor(rng, Shape{s, 8});
    const auto got = transformer_layer(x, ParamView<double>(values), "txt.layer1", 2, 1e-5).out;
    const auto want = reference_layer(to_matrix(x), values, "txt.layer1", 2, 1e-5);
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(got.at({i, j}), want[i][j], 1e-10);
  }
}

TEST(Encoders, TraceLengthsAndShapes) {
  auto c = ModelConfig::toy();
  c.visual_layers = 2;
  c.text_layers = 1;
  const auto store = ParamStore::init(c, 1);
  const ParamView<double> p(store.values());
  Rng rng(6);
  const auto v = encode_visual(patchify_embed(random_tensor(rng, Shape{3, 16, 16}), c, p), c, p);
  ASSERT_EQ(v.layers.size(), 2u);
  for (const auto& l : v.layers) EXPECT_EQ(l.shape(), (Shape{17, 32}));
  const auto t = encode_textual(tokenize_embed("red cross", Vocab::from_words({"red", "cross"}), c, p), c, p);
  ASSERT_EQ(t.layers.size(), 1u);
  EXPECT_EQ(t.layers[0].shape(), (Shape{4, 32}));
  for (const auto& a : v.attn) {
    for (std::size_t r = 0; r < a.numel() / a.shape().back(); ++r) {
      double s = 0;
      for (std::size_t k = 0; k < a.shape().back(); ++k) s += a[r * a.shape().back() + k];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
}

TEST(Encoders, ZeroDepthTrace) {
  auto c = ModelConfig::toy();
  c.visual_layers = 0;
  const auto store = ParamStore::init(c, 1);
  const ParamView<double> p(store.values());
  const auto seq = patchify_embed(Tensord(Shape{3, 16, 16}, 0.1), c, p);
  const auto v = encode_visual(seq, c, p);
  EXPECT_TRUE(v.layers.empty());
  EXPECT_EQ(&v.at(0), &v.input);
}

TEST(Encoders, ZeroWeightStackComposesNorms) {
  auto c = small_config(8, 2);
  c.visual_layers = 2;
  auto values = ParamStore::init(c, 1).values();
  zero_layer(values, "vis.layer1");
  zero_layer(values, "vis.layer2");
  const ParamView<double> p(values);
  const auto v0 = patchify_embed(Tensord(Shape{3, 16, 16}, 0.3), c, p);
  const auto tr = encode_visual(v0, c, p);
  const auto ones = Tensord(Shape{8}, 1.0), zeros = Tensord(Shape{8}, 0.0);
  auto ln2 = [&](const Tensord& x) { return layer_norm(layer_norm(x, ones, zeros, c.ln_eps), ones, zeros, c.ln_eps); };
  const auto v1 = ln2(v0.embeddings), v2 = ln2(v1);
  for (std::size_t i = 0; i < v2.numel(); ++i) {
    EXPECT_NEAR(tr.layers[0][i], v1[i], 1e-12);
    EXPECT_NEAR(tr.layers[1][i], v2[i], 1e-12);
  }
}

TEST(Encoders, PadKeysMasked) {
  const auto c = ModelConfig::toy();
  const auto store = ParamStore::init(c, 1);
  const ParamView<double> p(store.values());
  const std::vector<int> ids{Vocab::kStart, 6, 7, Vocab::kEnd, Vocab::kPad, Vocab::kPad};
  const auto tr = encode_textual(embed_tokens(ids, c, p), c, p);
  for (const auto& a : tr.attn) {
    const std::size_t s = ids.size();
    for (std::size_t r = 0; r < a.numel() / s; ++r) {
      double total = 0;
      for (std::size_t k = 0; k < s; ++k) total += a[r * s + k];
      EXPECT_NEAR(total, 1.0, 1e-12);
      EXPECT_LT(a[r * s + 4], 1e-12);
      EXPECT_LT(a[r * s + 5], 1e-12);
    }
  }
}

TEST(Encoders, WordEmbeddingGradientMatchesFiniteDifferences) {
  const auto c = ModelConfig::toy();
  const auto store = ParamStore::init(c, 8);
  const std::vector<int> ids{Vocab::kStart, 6, 9, 7, Vocab::kEnd};
  Rng rng(9);
  const auto r = random_tensor(rng, Shape{ids.size(), c.text_dim});
  auto readout = [&](const TensorMap<double>& values, Tape<double>* tape) {
    const ParamView<double> p(values, tape);
    const auto tr = encode_textual(embed_tokens(ids, c, p), c, p);
    return std::make_pair(sum(mul(tr.layers.back(), r)), p.watched());
  };
  Tape<double> tape;
  auto [loss, watched] = readout(store.values(), &tape);
  const auto grads = tape.backward(loss);
  const auto& g = grads.at(watched.at("txt.word"));

  std::vector<std::size_t> coords;
  for (int id : {6, 7, 9, 12})
    for (std::size_t j = 0; j < c.text_dim; j += 5) coords.push_back(static_cast<std::size_t>(id) * c.text_dim + j);
  auto f = [&](const Tensord& table) {
    auto values = store.values();
    values.at("txt.word") = table;
    return readout(values, nullptr).first.item();
  };
  const auto fd = finite_difference_at(f, store.at("txt.word"), std::span<const std::size_t>(coords));
  for (std::size_t i = 0; i < coords.size(); ++i) EXPECT_LT(relative_error(g[coords[i]], fd[i]), 1e-4) << coords[i];
}
