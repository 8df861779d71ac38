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

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "crossgate/config.hpp"
#include "crossgate/rng.hpp"
#include "crossgate/tensor_table.hpp"
#include "crossgate/vocab.hpp"

namespace crossgate {

inline constexpr std::array<const char*, 3> kShapeWords{"square", "cross", "stripes"};
inline constexpr std::array<const char*, 3> kColorWords{"red", "green", "blue"};
inline constexpr std::array<const char*, 4> kPositionWords{"top left", "top right", "bottom left", "bottom right"};
inline constexpr std::size_t kAttributeCombos = kShapeWords.size() * kColorWords.size() * kPositionWords.size();

/// Vocabulary covering every caption word.
inline Vocab corpus_vocab() {
  return Vocab::from_words({"red", "green", "blue", "square", "cross", "stripes", "top", "bottom", "left", "right"});
}

struct Attributes {
  std::size_t shape;     // index into kShapeWords
  std::size_t color;     // index into kColorWords; also the dominant channel
  std::size_t position;  // quadrant: 0 TL, 1 TR, 2 BL, 3 BR

  static Attributes from_combo(std::size_t combo) {
    return {combo / (kColorWords.size() * kPositionWords.size()), (combo / kPositionWords.size()) % kColorWords.size(),
            combo % kPositionWords.size()};
  }
  std::size_t combo() const { return (shape * kColorWords.size() + color) * kPositionWords.size() + position; }

  std::string caption() const {
    return std::string(kColorWords[color]) + " " + kShapeWords[shape] + " " + kPositionWords[position];
  }

  friend bool operator==(const Attributes&, const Attributes&) = default;
};

struct CorpusRecord {
  std::size_t id;
  std::string caption;
  Attributes attributes;
  std::uint64_t generator_seed;
  Tensor<double> image;  // C x H x W
};

struct Corpus {
  std::size_t channels = 3, height = 16, width = 16;
  std::vector<CorpusRecord> records;

  std::size_t size() const { return records.size(); }
  const CorpusRecord& operator[](std::size_t i) const { return records.at(i); }
};

inline constexpr double kBackgroundNoise = 0.05;

/// Whether pixel (y, x) belongs to the shape drawn for `a`.
inline bool in_shape(const Attributes& a, std::size_t height, std::size_t width, std::size_t y, std::size_t x) {
  const std::size_t qh = height / 2, qw = width / 2;
  const std::size_t y0 = (a.position / 2) * qh + 1, x0 = (a.position % 2) * qw + 1;
  const std::size_t sh = qh - 2, sw = qw - 2;
  if (y < y0 || y >= y0 + sh || x < x0 || x >= x0 + sw) return false;
  const std::size_t ly = y - y0, lx = x - x0;
  switch (a.shape) {
    case 0: return true;
    case 1: {
      const bool mid_row = ly * 2 + 2 >= sh && ly * 2 <= sh;
      const bool mid_col = lx * 2 + 2 >= sw && lx * 2 <= sw;
      return mid_row || mid_col;
    }
    default: return ly % 2 == 0;
  }
}

/// Shape in its color over seeded Gaussian background noise.
inline Tensor<double> render_image(const Attributes& a, std::uint64_t generator_seed, std::size_t channels, std::size_t height,
                                   std::size_t width) {
  Rng rng(generator_seed);
  Tensor<double> img(Shape{channels, height, width});
  auto d = img.mutable_data();
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const double base = (c == a.color && in_shape(a, height, width, y, x)) ? 1.0 : 0.0;
        d[(c * height + y) * width + x] = base + rng.normal(0.0, kBackgroundNoise);
      }
  return img;
}

/// n records with attribute combinations drawn stratified: each block of
/// 36 consecutive records is a seeded permutation of all combinations.
inline Corpus generate_corpus(std::size_t n, const ModelConfig& c, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("generate_corpus: need at least 2 records for image-text matching, got " + std::to_string(n));
  if (c.channels != 3) throw std::invalid_argument("generate_corpus: synthetic images need 3 channels");
  if (c.height < 8 || c.width < 8 || c.height % 2 || c.width % 2)
    throw std::invalid_argument("generate_corpus: image sides must be even and >= 8");
  Corpus corpus{c.channels, c.height, c.width, {}};
  Rng order = Rng::derive(seed, {0xC0, 1});
  std::vector<std::size_t> block(kAttributeCombos);
  for (std::size_t i = 0; i < n; ++i) {
    if (i % kAttributeCombos == 0) {
      for (std::size_t k = 0; k < block.size(); ++k) block[k] = k;
      order.shuffle(block.begin(), block.end());
    }
    const auto attr = Attributes::from_combo(block[i % kAttributeCombos]);
    const auto gseed = Rng::derive(seed, {0xC0, 2, i}).next_u64();
    corpus.records.push_back({i, attr.caption(), attr, gseed, render_image(attr, gseed, c.channels, c.height, c.width)});
  }
  return corpus;
}

inline Attributes parse_caption(const std::string& caption) {
  for (std::size_t k = 0; k < kAttributeCombos; ++k) {
    const auto a = Attributes::from_combo(k);
    if (a.caption() == caption) return a;
  }
  throw FormatError("corpus: caption '" + caption + "' does not name a known attribute combination");
}

/// Directory layout: manifest.jsonl (id, caption, seed per line),
/// images.bin (tensor table, kind "corpus", tensors image.<id>), vocab.txt.
inline void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::trunc);
  if (!manifest) throw std::runtime_error("cannot write manifest in '" + dir.string() + "'");
  TensorTable images;
  images.kind = "corpus";
  images.sections["geometry"] = "channels=" + std::to_string(corpus.channels) + "\nheight=" + std::to_string(corpus.height) +
                                "\nwidth=" + std::to_string(corpus.width) + "\n";
  for (const auto& r : corpus.records) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["caption"] = r.caption;
    j["seed"] = r.generator_seed;
    manifest << j.dump() << '\n';
    images.tensors.emplace_back("image." + std::to_string(r.id), r.image);
  }
  images.save(dir / "images.bin");
  corpus_vocab().save((dir / "vocab.txt").string());
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw std::runtime_error("cannot open corpus manifest in '" + dir.string() + "'");
  const auto images = TensorTable::load(dir / "images.bin", "corpus");
  Corpus corpus;
  corpus.records.clear();
  std::size_t line_no = 0;
  for (std::string line; std::getline(manifest, line);) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("corpus manifest line " + std::to_string(line_no) + ": " + e.what());
    }
    CorpusRecord r;
    r.id = j.at("id").get<std::size_t>();
    r.caption = j.at("caption").get<std::string>();
    r.generator_seed = j.at("seed").get<std::uint64_t>();
    r.attributes = parse_caption(r.caption);
    r.image = images.tensor("image." + std::to_string(r.id));
    corpus.records.push_back(std::move(r));
  }
  if (corpus.records.empty()) throw FormatError("corpus: empty manifest in '" + dir.string() + "'");
  const auto& shape = corpus.records.front().image.shape();
  if (shape.rank() != 3) throw FormatError("corpus: images must be rank 3");
  corpus.channels = shape[0];
  corpus.height = shape[1];
  corpus.width = shape[2];
  return corpus;
}

}  // namespace crossgate
