#pragma once

// Closed vocabulary of the synthetic grounding task.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "refformer/backbone.hpp"

namespace refformer {

class Vocabulary {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kSos = 1;
  static constexpr std::int32_t kEos = 2;

  static constexpr std::array<std::string_view, 20> kWords{
      "<pad>", "<sos>", "<eos>", "the",   "object", "on",     "at",       "left",  "right", "top",
      "bottom", "red",  "green", "blue",  "yellow", "circle", "square", "triangle", "big",  "small"};

  static constexpr std::size_t size() { return kWords.size(); }

  static std::int32_t id(std::string_view word) {
    for (std::size_t i = 3; i < kWords.size(); ++i)
      if (kWords[i] == word) return static_cast<std::int32_t>(i);
    throw VocabularyError("unknown word '" + std::string(word) + "'");
  }

  static std::string_view word(std::int32_t id) {
    if (id < 0 || static_cast<std::size_t>(id) >= kWords.size())
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary");
    return kWords[static_cast<std::size_t>(id)];
  }
};

/// [SOS, w..., EOS] right-padded with PAD to `length`.
inline std::vector<std::int32_t> tokenize(const std::vector<std::string>& words, std::size_t length) {
  if (words.size() + 2 > length)
    throw DimensionError("tokenize: " + std::to_string(words.size()) + " words do not fit in " +
                         std::to_string(length) + " tokens");
  std::vector<std::int32_t> ids(length, Vocabulary::kPad);
  ids[0] = Vocabulary::kSos;
  for (std::size_t i = 0; i < words.size(); ++i) ids[i + 1] = Vocabulary::id(words[i]);
  ids[words.size() + 1] = Vocabulary::kEos;
  return ids;
}

/// Words between SOS and EOS.
inline std::vector<std::string> detokenize(const std::vector<std::int32_t>& ids) {
  if (ids.empty() || ids[0] != Vocabulary::kSos) throw VocabularyError("detokenize: sequence must start with SOS");
  std::vector<std::string> words;
  for (std::size_t i = 1; i < ids.size(); ++i) {
    if (ids[i] == Vocabulary::kEos) return words;
    if (ids[i] == Vocabulary::kPad || ids[i] == Vocabulary::kSos)
      throw VocabularyError("detokenize: unexpected special token at position " + std::to_string(i));
    words.emplace_back(Vocabulary::word(ids[i]));
  }
  throw VocabularyError("detokenize: missing EOS");
}

/// Stacks equal-length padded id sequences into a batch with key mask and
/// EOS positions.
inline TokenBatch make_token_batch(const std::vector<const std::vector<std::int32_t>*>& seqs) {
  TokenBatch tb;
  tb.batch = seqs.size();
  tb.length = seqs.empty() ? 0 : seqs[0]->size();
  for (const auto* s : seqs) {
    if (s->size() != tb.length) throw DimensionError("make_token_batch: ragged sequences");
    std::size_t eos = tb.length;
    for (std::size_t i = 0; i < s->size(); ++i) {
      tb.ids.push_back((*s)[i]);
      tb.key_mask.push_back((*s)[i] == Vocabulary::kPad ? 0 : 1);
      if ((*s)[i] == Vocabulary::kEos && eos == tb.length) eos = i;
    }
    if (eos == tb.length) throw VocabularyError("make_token_batch: sequence without EOS");
    tb.eos_position.push_back(eos);
  }
  return tb;
}

}  // namespace refformer
