#include "collm/prompt.hpp"

namespace collm::prompt {

namespace {

constexpr const char* kHead = "#Question: A user has given high ratings to the following items:";
constexpr const char* kUserPre = ". Additionally, we have information about the user's preferences encoded in the feature";
constexpr const char* kUserPost = ". Using all available information, make a prediction about whether the user would enjoy "
                                  "the item titled";
constexpr const char* kItemPre = " with the feature";
constexpr const char* kTail = "? Answer with \"Yes\" or \"No\". #Answer:";
constexpr const char* kTextOnlyMid = ". Using all available information, make a prediction about whether the user would "
                                     "enjoy the item titled";

constexpr const char* kUserField = " <UserID>";
constexpr const char* kItemField = " <TargetItemID>";

std::string title_list(const std::vector<std::string>& titles) {
  std::string out;
  for (std::size_t k = 0; k < titles.size(); ++k) {
    out += k == 0 ? " " : ", ";
    out += titles[k];
  }
  return out;
}

// Text segments with the ID fields in between; text_only has no fields.
struct Segments {
  std::vector<std::string> text;
  std::vector<lm::TokenId> fields;  // fields[k] follows text[k]
};

Segments segments(const PromptSample& s, Variant v) {
  const std::string hist = title_list(s.history_titles);
  const std::string target = " " + s.target_title;
  if (v == Variant::TextOnly) return {{kHead + hist + kTextOnlyMid + target + kTail}, {}};
  return {{kHead + hist + kUserPre, kUserPost + target + kItemPre, kTail},
          {lm::Tokenizer::kUserSlot, lm::Tokenizer::kItemSlot}};
}

}  // namespace

Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::Full;
  if (s == "text_only" || s == "text-only") return Variant::TextOnly;
  throw ConfigError("unknown prompt variant '" + s + "'");
}

PromptSample resolve(const data::Interaction& x, data::History history, const data::Catalog& catalog) {
  PromptSample s;
  s.interaction = x;
  s.target_title = catalog.title(x.item);
  for (const auto& [item, ts] : history.items) s.history_titles.push_back(catalog.title(item));
  s.history = std::move(history);
  return s;
}

std::vector<int> HybridPrompt::slot_positions() const {
  std::vector<int> out;
  for (std::size_t t = 0; t < tokens.size(); ++t)
    if (tokens[t] == lm::Tokenizer::kUserSlot || tokens[t] == lm::Tokenizer::kItemSlot) out.push_back(static_cast<int>(t));
  return out;
}

std::string render_text(const PromptSample& s, Variant v) {
  const auto seg = segments(s, v);
  std::string out = seg.text[0];
  for (std::size_t k = 0; k < seg.fields.size(); ++k) {
    out += seg.fields[k] == lm::Tokenizer::kUserSlot ? kUserField : kItemField;
    out += seg.text[k + 1];
  }
  return out;
}

HybridPrompt render(const PromptSample& s, Variant v, const lm::Tokenizer& tok) {
  HybridPrompt p;
  p.variant = v;
  p.user = s.interaction.user;
  p.item = s.interaction.item;
  p.history = s.history;
  p.tokens.push_back(lm::Tokenizer::kBos);
  const auto seg = segments(s, v);
  for (std::size_t k = 0; k < seg.text.size(); ++k) {
    const auto ids = tok.encode(seg.text[k]);
    p.tokens.insert(p.tokens.end(), ids.begin(), ids.end());
    if (k < seg.fields.size()) p.tokens.push_back(seg.fields[k]);
  }
  return p;
}

std::vector<std::string> vocabulary_corpus(const data::Catalog& catalog) {
  std::vector<std::string> lines = {kHead, kUserPre, kUserPost, kItemPre, kTail, kTextOnlyMid, kUserField, kItemField, ", "};
  for (const auto& t : catalog.titles()) lines.push_back(" " + t);
  return lines;
}

std::vector<std::vector<lm::TokenId>> pretraining_corpus(const std::vector<PromptSample>& samples,
                                                         const lm::Tokenizer& tok, Rng& rng) {
  std::vector<std::vector<lm::TokenId>> out;
  out.reserve(2 * samples.size());
  std::bernoulli_distribution coin(0.5);
  for (const auto& s : samples)
    for (const auto v : {Variant::TextOnly, Variant::Full}) {
      std::vector<lm::TokenId> seq{lm::Tokenizer::kBos};
      const auto ids = tok.encode(render_text(s, v));
      seq.insert(seq.end(), ids.begin(), ids.end());
      seq.push_back(coin(rng) ? lm::Tokenizer::kYes : lm::Tokenizer::kNo);
      out.push_back(std::move(seq));
    }
  return out;
}

}  // namespace collm::prompt
