/**
 * @file lyrics.hpp
 * @brief Closed toy syllable inventory standing in for Mandarin pinyin.
 *
 * A syllable is an optional initial followed by a final ("zhang" = "zh" + "ang"). Lyrics
 * are space-separated syllables. Stage 0 consumes one id per syllable; stage 1 consumes
 * the initial/final token stream.
 */
#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace songgen {

class SyllableInventory {
 public:
  static const SyllableInventory& builtin();

  int syllable_count() const { return static_cast<int>(syllables_.size()); }
  const std::string& syllable(int i) const { return syllables_.at(static_cast<std::size_t>(i)); }

  /// Lyrics vocabulary: id 0 is <unk>, syllable i has id i + 1.
  int lyrics_vocab_size() const { return syllable_count() + 1; }
  std::vector<int> encode_lyrics(std::string_view text) const;

  /// Pinyin vocabulary: id 0 is <unk>, then initials, then finals.
  int pinyin_vocab_size() const { return 1 + static_cast<int>(initials_.size() + finals_.size()); }
  std::vector<int> encode_pinyin(std::string_view text) const;
  std::string pinyin_token(int id) const;

  const std::vector<std::string>& initials() const { return initials_; }
  const std::vector<std::string>& finals() const { return finals_; }

 private:
  SyllableInventory();
  /// Splits a known syllable into (initial index or -1, final index). Returns false if unknown.
  bool split(std::string_view syl, int& initial, int& final_index) const;

  std::vector<std::string> initials_;
  std::vector<std::string> finals_;
  std::vector<std::string> syllables_;
};

/// Whitespace tokenisation.
std::vector<std::string> split_syllables(std::string_view text);

}  // namespace songgen
