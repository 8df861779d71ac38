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

#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace crossgate {

/// Token table. Ids 0..4 are reserved for pad, start, end, mask, unknown;
/// a vocabulary file lists one token per line with the line number as id.
class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kStart = 1;
  static constexpr int kEnd = 2;
  static constexpr int kMask = 3;
  static constexpr int kUnk = 4;
  static constexpr int kNumSpecials = 5;

  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.empty()) throw std::invalid_argument("Vocab: empty vocabulary");
    if (tokens_.size() < static_cast<std::size_t>(kNumSpecials))
      throw std::invalid_argument("Vocab: the first five entries must be the pad/start/end/mask/unk specials");
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
      if (!index_.emplace(tokens_[i], static_cast<int>(i)).second)
        throw std::invalid_argument("Vocab: duplicate token '" + tokens_[i] + "'");
    }
  }

  /// Specials followed by `words`.
  static Vocab from_words(const std::vector<std::string>& words) {
    std::vector<std::string> t{"[PAD]", "<s>", "</s>", "[MASK]", "[UNK]"};
    t.insert(t.end(), words.begin(), words.end());
    return Vocab(std::move(t));
  }

  static Vocab load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("Vocab: cannot open '" + path + "'");
    std::vector<std::string> t;
    for (std::string line; std::getline(in, line);) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      t.push_back(line);
    }
    return Vocab(std::move(t));
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("Vocab: cannot write '" + path + "'");
    for (const auto& t : tokens_) out << t << '\n';
  }

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  int id(std::string_view word) const {
    auto it = index_.find(std::string(word));
    return it == index_.end() ? kUnk : it->second;
  }

  static bool is_special(int id) { return id < kNumSpecials; }

  /// Whitespace split with lowercase folding, wrapped in start/end and
  /// truncated to max_len tokens overall.
  std::vector<int> encode(std::string_view text, std::size_t max_len) const {
    if (max_len < 3) throw std::invalid_argument("Vocab::encode: max_len must be >= 3");
    std::vector<int> ids{kStart};
    std::string word;
    auto flush = [&] {
      if (!word.empty() && ids.size() < max_len - 1) ids.push_back(id(word));
      word.clear();
    };
    for (char ch : text) {
      if (std::isspace(static_cast<unsigned char>(ch))) {
        flush();
      } else {
        word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
      }
    }
    flush();
    ids.push_back(kEnd);
    return ids;
  }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

}  // namespace crossgate
