#include "songgen/lyrics.hpp"

#include <algorithm>
#include <cctype>

namespace songgen {

SyllableInventory::SyllableInventory()
    : initials_{"b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "j", "q", "x", "zh", "ch", "sh", "r", "z", "c", "s"},
      finals_{"a", "o", "e", "i", "u", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng", "ong"} {
  for (const auto& f : finals_) syllables_.push_back(f);
  for (const auto& i : initials_)
    for (const auto& f : finals_) syllables_.push_back(i + f);
  std::sort(syllables_.begin(), syllables_.end());
}

const SyllableInventory& SyllableInventory::builtin() {
  static const SyllableInventory inv;
  return inv;
}

bool SyllableInventory::split(std::string_view syl, int& initial, int& final_index) const {
  // Longest initial first so "zh" wins over "z".
  initial = -1;
  std::size_t best = 0;
  for (std::size_t i = 0; i < initials_.size(); ++i)
    if (syl.starts_with(initials_[i]) && initials_[i].size() > best) {
      best = initials_[i].size();
      initial = static_cast<int>(i);
    }
  const auto rest = syl.substr(best);
  const auto it = std::find(finals_.begin(), finals_.end(), rest);
  if (it == finals_.end()) return false;
  final_index = static_cast<int>(it - finals_.begin());
  return true;
}

std::vector<int> SyllableInventory::encode_lyrics(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& w : split_syllables(text)) {
    const auto it = std::lower_bound(syllables_.begin(), syllables_.end(), w);
    ids.push_back(it != syllables_.end() && *it == w ? static_cast<int>(it - syllables_.begin()) + 1 : 0);
  }
  return ids;
}

std::vector<int> SyllableInventory::encode_pinyin(std::string_view text) const {
  std::vector<int> ids;
  const int n_init = static_cast<int>(initials_.size());
  for (const auto& w : split_syllables(text)) {
    int ini = -1, fin = -1;
    if (!split(w, ini, fin)) {
      ids.push_back(0);
      continue;
    }
    if (ini >= 0) ids.push_back(1 + ini);
    ids.push_back(1 + n_init + fin);
  }
  return ids;
}

std::string SyllableInventory::pinyin_token(int id) const {
  const int n_init = static_cast<int>(initials_.size());
  if (id <= 0 || id >= pinyin_vocab_size()) return "<unk>";
  return id <= n_init ? initials_[static_cast<std::size_t>(id - 1)] : finals_[static_cast<std::size_t>(id - 1 - n_init)];
}

std::vector<std::string> split_syllables(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

}  // namespace songgen
