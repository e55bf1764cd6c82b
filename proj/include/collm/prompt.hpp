#pragma once

// Prompt rendering (full and text-only variants) and hybrid encoding: token
// embeddings everywhere except the user/item slots, which receive CIE vectors.

#include "collm/cie.hpp"
#include "collm/data.hpp"
#include "collm/lm.hpp"

#include <string>
#include <vector>

namespace collm::prompt {

enum class Variant { Full, TextOnly };

inline const char* to_string(Variant v) { return v == Variant::Full ? "full" : "text_only"; }
Variant variant_from_string(const std::string& s);

struct PromptSample {
  data::Interaction interaction;
  data::History history;
  std::string target_title;
  std::vector<std::string> history_titles;  // oldest first
};

/// Resolves titles; missing or empty titles raise CatalogError.
PromptSample resolve(const data::Interaction& x, data::History history, const data::Catalog& catalog);

struct HybridPrompt {
  std::vector<lm::TokenId> tokens;  // starts with BOS
  Variant variant = Variant::Full;
  UserId user = 0;
  ItemId item = 0;
  data::History history;  // consumed by history-aware encoders at the user slot

  std::vector<int> slot_positions() const;
};

/// Template text with `<UserID>` and `<TargetItemID>` written literally.
std::string render_text(const PromptSample& s, Variant v);

/// Tokenized prompt; the ID fields become single USER_SLOT / ITEM_SLOT tokens.
HybridPrompt render(const PromptSample& s, Variant v, const lm::Tokenizer& tok);
inline HybridPrompt render_full(const PromptSample& s, const lm::Tokenizer& tok) { return render(s, Variant::Full, tok); }
inline HybridPrompt render_text_only(const PromptSample& s, const lm::Tokenizer& tok) {
  return render(s, Variant::TextOnly, tok);
}

/// Lines covering every piece the template and the catalog can produce, for
/// building the tokenizer vocabulary.
std::vector<std::string> vocabulary_corpus(const data::Catalog& catalog);

/// Next-token corpus for language-model pretraining: text-only prompts and full
/// prompts with the ID fields spelled out as text, each followed by an answer token
/// drawn independently of the label.
std::vector<std::vector<lm::TokenId>> pretraining_corpus(const std::vector<PromptSample>& samples,
                                                         const lm::Tokenizer& tok, Rng& rng);

/// Model input sequence. Text positions are token-embedding rows; the slot
/// positions hold the encoder's user/item vectors. Full prompts need `enc`.
template <typename Scalar>
lm::EmbeddingSequence<Scalar> hybrid_encode(const HybridPrompt& p, const cie::SlotEncoder<Scalar>* enc,
                                            const lm::Transformer<Scalar>& model) {
  lm::EmbeddingSequence<Scalar> seq;
  const auto& table = model.token_embeddings().value;
  const auto d = model.d_model();
  seq.rows.resize(static_cast<Eigen::Index>(p.tokens.size()), d);
  for (std::size_t t = 0; t < p.tokens.size(); ++t) {
    const lm::TokenId id = p.tokens[t];
    const auto row = static_cast<Eigen::Index>(t);
    if (id == lm::Tokenizer::kUserSlot || id == lm::Tokenizer::kItemSlot) {
      if (!enc) throw ContractError("full prompt needs a collaborative slot encoder");
      if (enc->output_dim() != d) throw ShapeError("slot encoder width does not match the language model");
      seq.rows.row(row) = id == lm::Tokenizer::kUserSlot ? enc->user_embedding(p.user, p.history).transpose()
                                                         : enc->item_embedding(p.item).transpose();
      seq.slot_positions.push_back(static_cast<int>(t));
    } else {
      if (id < 0 || id >= table.rows()) throw IdRangeError("token id " + std::to_string(id) + " out of range");
      seq.rows.row(row) = table.row(id);
    }
  }
  return seq;
}

/// Routes the gradient of the slot rows back into the encoder.
template <typename Scalar>
void hybrid_backward(const HybridPrompt& p, const Mat<Scalar>& dinputs, cie::SlotEncoder<Scalar>& enc) {
  for (std::size_t t = 0; t < p.tokens.size(); ++t) {
    const auto row = static_cast<Eigen::Index>(t);
    if (p.tokens[t] == lm::Tokenizer::kUserSlot) enc.backward_user(p.user, p.history, dinputs.row(row).transpose());
    else if (p.tokens[t] == lm::Tokenizer::kItemSlot) enc.backward_item(p.item, dinputs.row(row).transpose());
  }
}

}  // namespace collm::prompt
