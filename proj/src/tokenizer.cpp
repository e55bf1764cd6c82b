#include "collm/lm.hpp"

#include <set>

namespace collm::lm {

namespace {

bool is_word_byte(unsigned char c) { return std::isalnum(c) != 0 || c >= 0x80; }
bool is_space_byte(unsigned char c) { return std::isspace(c) != 0; }

const char* special_text(TokenId id) {
  switch (id) {
    case Tokenizer::kPad: return "";
    case Tokenizer::kBos: return "";
    case Tokenizer::kUnk: return "<unk>";
    case Tokenizer::kUserSlot: return "<UserID>";
    case Tokenizer::kItemSlot: return "<TargetItemID>";
    case Tokenizer::kYes: return "Yes";
    case Tokenizer::kNo: return "No";
    default: return nullptr;
  }
}

// Reserved vocabulary entries; never reachable from plain-text pieces.
const char* special_key(TokenId id) {
  switch (id) {
    case Tokenizer::kPad: return "\x01pad";
    case Tokenizer::kBos: return "\x01bos";
    case Tokenizer::kUnk: return "\x01unk";
    case Tokenizer::kUserSlot: return "\x01user_slot";
    case Tokenizer::kItemSlot: return "\x01item_slot";
    case Tokenizer::kYes: return "Yes";
    case Tokenizer::kNo: return "No";
    default: return nullptr;
  }
}

}  // namespace

Tokenizer::Tokenizer() {
  for (TokenId id = 0; id < kNumSpecial; ++id) {
    vocab_.emplace_back(special_key(id));
    index_.emplace(vocab_.back(), id);
  }
}

std::vector<std::string> Tokenizer::pieces(std::string_view text) {
  std::vector<std::string> out;
  std::size_t k = 0;
  const std::size_t n = text.size();
  while (k < n) {
    const auto c = static_cast<unsigned char>(text[k]);
    std::size_t start = k;
    if (c == ' ' && k + 1 < n && !is_space_byte(static_cast<unsigned char>(text[k + 1]))) ++k;
    else if (is_space_byte(c)) {
      out.emplace_back(text.substr(k, 1));
      ++k;
      continue;
    }
    const auto d = static_cast<unsigned char>(text[k]);
    if (is_word_byte(d)) {
      while (k < n && is_word_byte(static_cast<unsigned char>(text[k]))) ++k;
    } else {
      ++k;
    }
    out.emplace_back(text.substr(start, k - start));
  }
  return out;
}

Tokenizer Tokenizer::build(const std::vector<std::string>& corpus) {
  Tokenizer tok;
  std::set<std::string> distinct;
  for (const auto& line : corpus)
    for (auto& p : pieces(line))
      if (!tok.index_.count(p)) distinct.insert(std::move(p));
  for (const auto& p : distinct) {
    tok.index_.emplace(p, static_cast<TokenId>(tok.vocab_.size()));
    tok.vocab_.push_back(p);
  }
  return tok;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& p : pieces(text)) {
    const auto it = index_.find(p);
    ids.push_back(it == index_.end() ? kUnk : it->second);
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (const auto id : ids) {
    if (const char* s = special_text(id)) {
      out += s;
    } else {
      out += piece(id);
    }
  }
  return out;
}

bool Tokenizer::covers(std::string_view text) const {
  for (const auto& p : pieces(text))
    if (!index_.count(p)) return false;
  return true;
}

const std::string& Tokenizer::piece(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size())
    throw IdRangeError("token id " + std::to_string(id) + " out of range");
  return vocab_[static_cast<std::size_t>(id)];
}

nlohmann::json Tokenizer::to_json() const {
  return nlohmann::json(std::vector<std::string>(vocab_.begin() + kNumSpecial, vocab_.end()));
}

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
  Tokenizer tok;
  for (const auto& p : j) {
    const auto s = p.get<std::string>();
    if (tok.index_.count(s)) throw DataError("duplicate vocabulary entry '" + s + "'");
    tok.index_.emplace(s, static_cast<TokenId>(tok.vocab_.size()));
    tok.vocab_.push_back(s);
  }
  return tok;
}

}  // namespace collm::lm
