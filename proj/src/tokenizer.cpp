// Copyright 2026 The omni-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>

#include "omni/data.hpp"
#include "omni/error.hpp"

namespace omni {

Tokenizer::Tokenizer(std::string alphabet) : alphabet_(std::move(alphabet)) {
  std::fill(std::begin(index_), std::end(index_), -1);
  for (std::size_t i = 0; i < alphabet_.size(); ++i) {
    auto c = static_cast<unsigned char>(alphabet_[i]);
    if (index_[c] != -1) throw VocabularyError("tokenizer: duplicate character in alphabet");
    index_[c] = static_cast<int>(i) + 1;
  }
}

TokenSeq Tokenizer::encode(std::string_view text) const {
  TokenSeq out;
  out.reserve(text.size());
  std::string unknown;
  for (char ch : text) {
    const int id = index_[static_cast<unsigned char>(ch)];
    if (id < 0) {
      if (unknown.find(ch) == std::string::npos) unknown.push_back(ch);
      continue;
    }
    out.push_back(id);
  }
  if (!unknown.empty()) {
    throw VocabularyError("tokenizer: out-of-vocabulary characters '" + unknown + "'");
  }
  return out;
}

std::string Tokenizer::decode(std::span<const int> tokens) const {
  std::string out;
  out.reserve(tokens.size());
  for (int id : tokens) {
    if (id < 1 || static_cast<std::size_t>(id) > alphabet_.size()) {
      throw VocabularyError("tokenizer: id " + std::to_string(id) + " outside vocabulary");
    }
    out.push_back(alphabet_[static_cast<std::size_t>(id) - 1]);
  }
  return out;
}

}  // namespace omni
