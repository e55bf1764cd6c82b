#include "oracles.hpp"

#include <doctest.h>

#include "collm/prompt.hpp"

using namespace collm;
using namespace collm::prompt;
using lm::Tokenizer;

namespace {

PromptSample sample(std::vector<std::string> hist, std::string target, UserId u = 0, ItemId i = 0) {
  PromptSample s;
  s.interaction.user = u;
  s.interaction.item = i;
  s.history_titles = std::move(hist);
  s.target_title = std::move(target);
  for (std::size_t k = 0; k < s.history_titles.size(); ++k) s.history.items.push_back({static_cast<ItemId>(k), 0});
  return s;
}

std::string random_title(Rng& rng) {
  static const std::vector<std::string> words = {"The", "Dark", "Night", "Toy", "Story", "(1995)", "II:", "Heat",
                                                 "Caf\xc3\xa9", "Blue's", "Clues", "&", "Co.", "8", "1/2"};
  std::uniform_int_distribution<std::size_t> w(0, words.size() - 1), n(1, 4);
  std::string t;
  for (std::size_t k = n(rng); k > 0; --k) t += (t.empty() ? "" : " ") + words[w(rng)];
  return t;
}

// Slot encoder returning fixed vectors and recording backward calls.
struct FixedSlots : cie::SlotEncoder<double> {
  Vec<double> u, i;
  Vec<double> du, di;
  int d;
  explicit FixedSlots(int dim) : u(Vec<double>::Constant(dim, 3.0)), i(Vec<double>::Constant(dim, -2.0)),
                                 du(Vec<double>::Zero(dim)), di(Vec<double>::Zero(dim)), d(dim) {}
  int output_dim() const override { return d; }
  Vec<double> user_embedding(UserId, const data::History&) const override { return u; }
  Vec<double> item_embedding(ItemId) const override { return i; }
  void backward_user(UserId, const data::History&, const Vec<double>& g) override { du += g; }
  void backward_item(ItemId, const Vec<double>& g) override { di += g; }
  ParamList<double> params() override { return {}; }
  std::unique_ptr<cie::SlotEncoder<double>> clone() const override { return std::make_unique<FixedSlots>(*this); }
};

}  // namespace

TEST_CASE("golden prompt strings") {
  const auto s = sample({"Heat (1995)", "Toy Story (1995)"}, "Fargo (1996)");
  CHECK(render_text(s, Variant::Full) ==
        "#Question: A user has given high ratings to the following items: Heat (1995), Toy Story (1995). "
        "Additionally, we have information about the user's preferences encoded in the feature <UserID>. "
        "Using all available information, make a prediction about whether the user would enjoy the item titled "
        "Fargo (1996) with the feature <TargetItemID>? Answer with \"Yes\" or \"No\". #Answer:");
  CHECK(render_text(s, Variant::TextOnly) ==
        "#Question: A user has given high ratings to the following items: Heat (1995), Toy Story (1995). "
        "Using all available information, make a prediction about whether the user would enjoy the item titled "
        "Fargo (1996)? Answer with \"Yes\" or \"No\". #Answer:");
  CHECK(render_text(sample({}, "Fargo"), Variant::TextOnly).rfind(
            "#Question: A user has given high ratings to the following items:. Using", 0) == 0);
  CHECK(variant_from_string("text-only") == Variant::TextOnly);
  CHECK_THROWS_AS(variant_from_string("hybrid"), ConfigError);
}

TEST_CASE("rendered prompts: slots, coverage, round trip and nesting") {
  Rng rng(1);
  std::vector<std::string> titles;
  for (int k = 0; k < 40; ++k) titles.push_back(random_title(rng));
  const data::Catalog catalog(titles);
  const auto tok = Tokenizer::build(vocabulary_corpus(catalog));
  std::uniform_int_distribution<int> pick(0, 39), len(0, 10);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::string> hist;
    for (int k = len(rng); k > 0; --k) hist.push_back(titles[pick(rng)]);
    const auto s = sample(hist, titles[pick(rng)], 4, 9);

    const auto full = render(s, Variant::Full, tok);
    const auto text = render(s, Variant::TextOnly, tok);
    REQUIRE(full.tokens.front() == Tokenizer::kBos);
    REQUIRE(text.tokens.front() == Tokenizer::kBos);
    CHECK(std::count(full.tokens.begin(), full.tokens.end(), Tokenizer::kUnk) == 0);
    CHECK(std::count(text.tokens.begin(), text.tokens.end(), Tokenizer::kUnk) == 0);

    // exactly one user slot, then exactly one item slot
    const auto slots = full.slot_positions();
    REQUIRE(slots.size() == 2);
    CHECK(full.tokens[static_cast<std::size_t>(slots[0])] == Tokenizer::kUserSlot);
    CHECK(full.tokens[static_cast<std::size_t>(slots[1])] == Tokenizer::kItemSlot);
    CHECK(text.slot_positions().empty());
    CHECK(full.user == 4);
    CHECK(full.item == 9);
    CHECK(full.history.size() == hist.size());

    // the text-only prompt decodes back to its template text
    CHECK(tok.decode(text.tokens) == render_text(s, Variant::TextOnly));

    // text-only tokens form a subsequence of the full prompt's tokens
    std::size_t j = 0;
    for (const auto t : full.tokens)
      if (j < text.tokens.size() && t == text.tokens[j]) ++j;
    CHECK(j == text.tokens.size());
  }
}

TEST_CASE("resolve looks up titles") {
  const data::Catalog catalog({"A", "B", ""});
  data::Interaction x;
  x.item = 1;
  data::History h;
  h.items = {{0, 1}, {1, 2}};
  const auto s = resolve(x, h, catalog);
  CHECK(s.target_title == "B");
  CHECK(s.history_titles == std::vector<std::string>{"A", "B"});
  h.items.push_back({2, 3});
  CHECK_THROWS_AS(resolve(x, h, catalog), CatalogError);
  x.item = 5;
  CHECK_THROWS_AS(resolve(x, {}, catalog), CatalogError);
}

TEST_CASE("hybrid encoding places slot vectors and routes their gradients") {
  const data::Catalog catalog({"Heat", "Fargo"});
  const auto tok = Tokenizer::build(vocabulary_corpus(catalog));
  Rng rng(2);
  lm::TransformerOptions o;
  o.vocab_size = static_cast<int>(tok.size());
  o.d_model = 4;
  o.layers = 1;
  o.heads = 1;
  o.max_positions = 128;
  const lm::Transformer<double> model(o, rng);
  const auto s = sample({"Heat"}, "Fargo");
  const auto p = render(s, Variant::Full, tok);
  FixedSlots slots(4);

  const auto seq = hybrid_encode<double>(p, &slots, model);
  REQUIRE(seq.length() == static_cast<Eigen::Index>(p.tokens.size()));
  CHECK(seq.slot_positions == p.slot_positions());
  for (std::size_t t = 0; t < p.tokens.size(); ++t) {
    const auto row = seq.rows.row(static_cast<Eigen::Index>(t)).transpose();
    if (p.tokens[t] == Tokenizer::kUserSlot) CHECK(row == slots.u);
    else if (p.tokens[t] == Tokenizer::kItemSlot) CHECK(row == slots.i);
    else CHECK(row == model.token_embeddings().value.row(p.tokens[t]).transpose());
  }

  CHECK_THROWS_AS(hybrid_encode<double>(p, nullptr, model), ContractError);
  FixedSlots narrow(3);
  CHECK_THROWS_AS(hybrid_encode<double>(p, &narrow, model), ShapeError);
  // text-only prompts need no encoder
  const auto text = render(s, Variant::TextOnly, tok);
  CHECK(hybrid_encode<double>(text, nullptr, model).slot_positions.empty());

  Mat<double> d = Mat<double>::Zero(seq.length(), 4);
  const auto pos = p.slot_positions();
  d.row(pos[0]).setConstant(1.5);
  d.row(pos[1]).setConstant(-0.5);
  d.row(0).setConstant(100.0);  // text rows are not routed anywhere
  hybrid_backward(p, d, slots);
  CHECK(slots.du == Vec<double>::Constant(4, 1.5));
  CHECK(slots.di == Vec<double>::Constant(4, -0.5));
}

TEST_CASE("pretraining corpus") {
  const data::Catalog catalog({"Heat", "Fargo", "Alien"});
  const auto tok = Tokenizer::build(vocabulary_corpus(catalog));
  std::vector<PromptSample> samples = {sample({"Heat"}, "Fargo"), sample({"Fargo", "Alien"}, "Heat")};
  Rng rng(3);
  const auto corpus = pretraining_corpus(samples, tok, rng);
  REQUIRE(corpus.size() == 4);
  for (const auto& seq : corpus) {
    CHECK(seq.front() == Tokenizer::kBos);
    CHECK((seq.back() == Tokenizer::kYes || seq.back() == Tokenizer::kNo));
    CHECK(std::count(seq.begin(), seq.end(), Tokenizer::kUserSlot) == 0);
    CHECK(std::count(seq.begin(), seq.end(), Tokenizer::kUnk) == 0);
  }
}
