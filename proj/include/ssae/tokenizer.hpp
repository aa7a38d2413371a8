#pragma once

// Closed-vocabulary tokenizer for the template language: word tokens,
// single digits, a negative-sign token, punctuation, and reserved
// symbols. Detokenize inverts tokenize exactly on canonical corpus text
// (single spaces between words, digits of one number adjacent).

#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace ssae {

class Tokenizer {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kSep = 2;
  static constexpr int kPrefix = 3;  // splice marker, never in text

  explicit Tokenizer(const std::vector<std::string>& words) {
    add("<bos>");
    add("<eos>");
    add("<sep>");
    add("<prefix>");
    for (char c = '0'; c <= '9'; ++c) add(std::string(1, c));
    add("-");
    add(".");
    add(",");
    add("?");
    for (const auto& w : words) add(w);
    if (size() > 256)
      throw std::runtime_error("Tokenizer: vocabulary exceeds 256 symbols");
  }

  int size() const { return static_cast<int>(tokens_.size()); }

  const std::string& token(int id) const { return tokens_.at(id); }

  int id_of(const std::string& tok) const {
    auto it = ids_.find(tok);
    if (it == ids_.end())
      throw std::runtime_error("Tokenizer: token outside alphabet: " + tok);
    return it->second;
  }

  bool is_digit_id(int id) const {
    return id >= kDigit0 && id < kDigit0 + 10;
  }
  bool is_punct(int id) const {
    const std::string& t = tokens_[id];
    return t == "." || t == "," || t == "?";
  }
  bool is_special(int id) const { return id < kDigit0; }
  int minus_id() const { return kDigit0 + 10; }

  std::vector<int> tokenize(const std::string& text) const {
    std::vector<int> out;
    std::size_t i = 0;
    const std::size_t n = text.size();
    while (i < n) {
      const char c = text[i];
      if (c == ' ') {
        ++i;
        continue;
      }
      if (c >= '0' && c <= '9') {
        out.push_back(kDigit0 + (c - '0'));
        ++i;
      } else if (c == '-' || c == '.' || c == ',' || c == '?') {
        out.push_back(id_of(std::string(1, c)));
        ++i;
      } else if (c >= 'a' && c <= 'z') {
        std::size_t j = i;
        while (j < n && text[j] >= 'a' && text[j] <= 'z') ++j;
        out.push_back(id_of(text.substr(i, j - i)));
        i = j;
      } else {
        throw std::runtime_error(
            std::string("Tokenizer: character outside alphabet: '") + c + "'");
      }
    }
    return out;
  }

  std::string detokenize(const std::vector<int>& ids) const {
    std::string out;
    int prev = -1;
    for (int id : ids) {
      if (id < 0 || id >= size())
        throw std::runtime_error("Tokenizer: id out of range");
      if (is_special(id)) {
        prev = id;
        continue;  // specials render to nothing
      }
      const bool join =
          out.empty() || is_punct(id) ||
          (is_digit_id(id) && prev >= 0 &&
           (is_digit_id(prev) || prev == minus_id()));
      if (!join) out += ' ';
      out += tokens_[id];
      prev = id;
    }
    return out;
  }

 private:
  static constexpr int kDigit0 = 4;

  void add(const std::string& t) {
    if (ids_.count(t)) return;
    ids_.emplace(t, static_cast<int>(tokens_.size()));
    tokens_.push_back(t);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace ssae
