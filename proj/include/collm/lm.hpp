#pragma once

// A small decoder-only language model: word-level tokenizer, tied token
// embeddings, a pre-LN causal transformer stack with optional LoRA on the
// query/value projections, and a two-way Yes/No readout.

#include "collm/checkpoint.hpp"
#include "collm/nn.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace collm::lm {

using TokenId = std::int32_t;

/// Word-level tokenizer. Text is cut into pieces: an optional single leading space
/// followed by either a run of word characters (ASCII alphanumerics and any byte
/// >= 0x80) or one punctuation character; other whitespace characters are pieces of
/// their own. Concatenating pieces reproduces the text exactly.
class Tokenizer {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kUnk = 2;
  static constexpr TokenId kUserSlot = 3;
  static constexpr TokenId kItemSlot = 4;
  static constexpr TokenId kYes = 5;
  static constexpr TokenId kNo = 6;
  static constexpr TokenId kNumSpecial = 7;

  /// Specials only.
  Tokenizer();

  static std::vector<std::string> pieces(std::string_view text);

  /// Vocabulary = specials + every distinct piece of the corpus, sorted.
  static Tokenizer build(const std::vector<std::string>& corpus);

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  /// True when no piece of `text` maps to UNK.
  bool covers(std::string_view text) const;

  std::size_t size() const { return vocab_.size(); }
  const std::string& piece(TokenId id) const;

  nlohmann::json to_json() const;
  static Tokenizer from_json(const nlohmann::json& j);

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Sequence of d2-dimensional input vectors with the rows holding injected
/// collaborative embeddings recorded in `slot_positions`.
template <typename Scalar>
struct EmbeddingSequence {
  Mat<Scalar> rows;
  std::vector<int> slot_positions;

  Eigen::Index length() const { return rows.rows(); }
};

struct TransformerOptions {
  int vocab_size = 0;
  int d_model = 64;
  int layers = 2;
  int heads = 2;
  int ffn_mult = 4;
  int max_positions = 256;
};

inline nlohmann::json to_json(const TransformerOptions& o) {
  return {{"vocab_size", o.vocab_size}, {"d_model", o.d_model},   {"layers", o.layers},
          {"heads", o.heads},           {"ffn_mult", o.ffn_mult}, {"max_positions", o.max_positions}};
}

inline TransformerOptions transformer_options_from_json(const nlohmann::json& j) {
  TransformerOptions o;
  o.vocab_size = j.at("vocab_size").get<int>();
  o.d_model = j.at("d_model").get<int>();
  o.layers = j.at("layers").get<int>();
  o.heads = j.at("heads").get<int>();
  o.ffn_mult = j.value("ffn_mult", 4);
  o.max_positions = j.value("max_positions", 256);
  return o;
}

template <typename Scalar>
struct TransformerCache {
  std::vector<BlockCache<Scalar>> blocks;
  LayerNormCache<Scalar> lnf;
};

template <typename Scalar>
class Transformer {
 public:
  Transformer() = default;
  Transformer(TransformerOptions opts, Rng& rng)
      : opts_(opts),
        tok_emb_("lm.tok_emb", ParamGroup::LmBase, opts.vocab_size, opts.d_model),
        pos_emb_("lm.pos_emb", ParamGroup::LmBase, opts.max_positions, opts.d_model),
        lnf_g_("lm.lnf_g", ParamGroup::LmBase, 1, opts.d_model),
        lnf_b_("lm.lnf_b", ParamGroup::LmBase, 1, opts.d_model) {
    if (opts.vocab_size <= Tokenizer::kNumSpecial) throw ShapeError("vocabulary too small");
    if (opts.layers < 1 || opts.max_positions < 1) throw ShapeError("invalid transformer shape");
    fill_normal(tok_emb_.value, rng, 0.1);
    fill_normal(pos_emb_.value, rng, 0.02);
    lnf_g_.value.setOnes();
    for (int l = 0; l < opts.layers; ++l)
      blocks_.emplace_back("lm.layer" + std::to_string(l) + ".", ParamGroup::LmBase, opts.d_model, opts.heads,
                           opts.ffn_mult, rng);
  }

  const TransformerOptions& options() const { return opts_; }
  int d_model() const { return opts_.d_model; }
  Param<Scalar>& token_embeddings() { return tok_emb_; }
  const Param<Scalar>& token_embeddings() const { return tok_emb_; }

  ParamList<Scalar> params() {
    ParamList<Scalar> out{&tok_emb_, &pos_emb_};
    for (auto& b : blocks_)
      for (auto* p : b.params()) out.push_back(p);
    out.push_back(&lnf_g_);
    out.push_back(&lnf_b_);
    return out;
  }

  /// Row lookup of token embeddings. Slot tokens must be substituted by the caller
  /// and raise ContractError here.
  EmbeddingSequence<Scalar> embed(std::span<const TokenId> ids) const {
    EmbeddingSequence<Scalar> seq;
    seq.rows.resize(static_cast<Eigen::Index>(ids.size()), opts_.d_model);
    for (std::size_t t = 0; t < ids.size(); ++t) {
      const TokenId id = ids[t];
      if (id == Tokenizer::kUserSlot || id == Tokenizer::kItemSlot)
        throw ContractError("slot token at position " + std::to_string(t) + " was not substituted");
      if (id < 0 || id >= opts_.vocab_size) throw IdRangeError("token id " + std::to_string(id) + " out of range");
      seq.rows.row(static_cast<Eigen::Index>(t)) = tok_emb_.value.row(id);
    }
    return seq;
  }

  /// Final-layer-normalized hidden states, one row per position.
  /// `dropout_rng` non-null selects training mode (LoRA dropout active).
  Mat<Scalar> forward(const Mat<Scalar>& inputs, const Lora<Scalar>* lora, Rng* dropout_rng,
                      TransformerCache<Scalar>& cache) const {
    const Eigen::Index len = inputs.rows();
    if (len == 0) throw InputDomainError("forward: empty embedding sequence");
    if (inputs.cols() != opts_.d_model) throw ShapeError("forward: input width does not match d_model");
    if (len > opts_.max_positions)
      throw InputDomainError("forward: sequence of " + std::to_string(len) + " exceeds max_positions " +
                             std::to_string(opts_.max_positions));
    if (lora && static_cast<int>(lora->blocks.size()) != opts_.layers) throw ShapeError("LoRA layer count mismatch");
    Mat<Scalar> x = inputs + pos_emb_.value.topRows(len);
    cache.blocks.resize(blocks_.size());
    const Scalar s = lora ? lora->scale() : Scalar(0);
    const double p = lora ? lora->options.dropout : 0.0;
    for (std::size_t l = 0; l < blocks_.size(); ++l)
      x = blocks_[l].forward(x, lora ? &lora->blocks[l] : nullptr, s, p, dropout_rng, cache.blocks[l]);
    return layer_norm(x, lnf_g_.value, lnf_b_.value, &cache.lnf);
  }

  Mat<Scalar> forward(const Mat<Scalar>& inputs, const Lora<Scalar>* lora = nullptr) const {
    TransformerCache<Scalar> cache;
    return forward(inputs, lora, nullptr, cache);
  }

  /// Tied output head: logits over the vocabulary for one hidden row.
  Vec<Scalar> logits(const Mat<Scalar>& hidden, Eigen::Index position) const {
    return tok_emb_.value * hidden.row(position).transpose();
  }

  /// Logits at the final position.
  Vec<Scalar> final_logits(const Mat<Scalar>& hidden) const { return logits(hidden, hidden.rows() - 1); }

  /// z_yes - z_no at the final position, without materializing the vocabulary.
  Scalar answer_margin(const Mat<Scalar>& hidden) const {
    return hidden.row(hidden.rows() - 1).dot(tok_emb_.value.row(Tokenizer::kYes) - tok_emb_.value.row(Tokenizer::kNo));
  }

  /// Gradient of the hidden states for a loss with d(loss)/d(margin) = g.
  Mat<Scalar> answer_margin_grad(const Mat<Scalar>& hidden, Scalar g) const {
    Mat<Scalar> dh = Mat<Scalar>::Zero(hidden.rows(), hidden.cols());
    dh.row(hidden.rows() - 1) = g * (tok_emb_.value.row(Tokenizer::kYes) - tok_emb_.value.row(Tokenizer::kNo));
    return dh;
  }

  /// Returns dL/d(inputs). Base weights accumulate gradients when flags.base, the
  /// adapter when flags.lora.
  Mat<Scalar> backward(const Mat<Scalar>& dhidden, const TransformerCache<Scalar>& cache, Lora<Scalar>* lora,
                       GradFlags flags) {
    Mat<Scalar> dx = layer_norm_backward(dhidden, cache.lnf, lnf_g_.value, flags.base ? &lnf_g_.grad : nullptr,
                                         flags.base ? &lnf_b_.grad : nullptr);
    const Scalar s = lora ? lora->scale() : Scalar(0);
    for (std::size_t l = blocks_.size(); l-- > 0;)
      dx = blocks_[l].backward(dx, cache.blocks[l], lora ? &lora->blocks[l] : nullptr, s, flags);
    if (flags.base) pos_emb_.grad.topRows(dx.rows()) += dx;
    return dx;
  }

 private:
  TransformerOptions opts_;
  Param<Scalar> tok_emb_, pos_emb_;
  std::vector<TransformerBlock<Scalar>> blocks_;
  Param<Scalar> lnf_g_, lnf_b_;
};

/// exp(z_yes) / (exp(z_yes) + exp(z_no)).
template <typename Derived>
typename Derived::Scalar yes_probability(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  if (logits.size() <= Tokenizer::kNo) throw ShapeError("yes_probability: logits do not cover the answer tokens");
  return sigmoid<Scalar>(logits(Tokenizer::kYes) - logits(Tokenizer::kNo));
}

// ---------------------------------------------------------------------------
// Next-token pretraining.

struct PretrainOptions {
  int steps = 200;
  int batch_size = 8;
  double lr = 3e-3;
  double weight_decay = 1e-2;
  std::uint64_t seed = 0;
};

struct PretrainLog {
  std::vector<double> step_loss;
  double seconds = 0.0;
};

/// Mean next-token negative log-likelihood of one sequence; accumulates base
/// gradients scaled by `grad_scale` when non-zero.
template <typename Scalar>
double next_token_loss(Transformer<Scalar>& model, std::span<const TokenId> seq, Scalar grad_scale) {
  if (seq.size() < 2) return 0.0;
  const auto inputs = seq.first(seq.size() - 1);
  const auto seq_emb = model.embed(inputs);
  TransformerCache<Scalar> cache;
  const Mat<Scalar> hidden = model.forward(seq_emb.rows, nullptr, nullptr, cache);
  const auto& table = model.token_embeddings().value;
  Mat<Scalar> logits = hidden * table.transpose();  // L x V
  const Eigen::Index len = logits.rows();
  double loss = 0.0;
  Mat<Scalar> dlogits(len, logits.cols());
  for (Eigen::Index t = 0; t < len; ++t) {
    const Scalar mx = logits.row(t).maxCoeff();
    RowVec<Scalar> e = (logits.row(t).array() - mx).exp().matrix();
    const Scalar z = e.sum();
    const TokenId target = seq[static_cast<std::size_t>(t) + 1];
    loss += -static_cast<double>(logits(t, target) - mx - std::log(z));
    dlogits.row(t) = e / z;
    dlogits(t, target) -= Scalar(1);
  }
  loss /= static_cast<double>(len);
  if (grad_scale != Scalar(0)) {
    dlogits *= grad_scale / static_cast<Scalar>(len);
    auto& tok = model.token_embeddings();
    tok.grad.noalias() += dlogits.transpose() * hidden;
    const Mat<Scalar> dhidden = dlogits * table;
    const Mat<Scalar> dinputs = model.backward(dhidden, cache, nullptr, GradFlags{true, false});
    for (Eigen::Index t = 0; t < dinputs.rows(); ++t) tok.grad.row(inputs[static_cast<std::size_t>(t)]) += dinputs.row(t);
  }
  return loss;
}

/// AdamW next-token training over `corpus` (each sequence starts with BOS).
template <typename Scalar>
PretrainLog lm_pretrain(Transformer<Scalar>& model, const std::vector<std::vector<TokenId>>& corpus,
                        const PretrainOptions& opts) {
  PretrainLog log;
  if (opts.steps <= 0) return log;
  if (corpus.empty()) throw InputDomainError("lm_pretrain: empty corpus");
  const FlushDenormals ftz;
  const auto t0 = std::chrono::steady_clock::now();
  AdamOptions aopts;
  aopts.lr = opts.lr;
  aopts.weight_decay = opts.weight_decay;
  aopts.decoupled = true;
  Adam<Scalar> adam(aopts);
  Rng rng(opts.seed);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  auto params = model.params();
  for (int step = 0; step < opts.steps; ++step) {
    zero_grads(params);
    double loss = 0.0;
    const Scalar scale = Scalar(1) / static_cast<Scalar>(opts.batch_size);
    for (int b = 0; b < opts.batch_size; ++b) loss += next_token_loss(model, corpus[pick(rng)], scale);
    loss /= opts.batch_size;
    if (!std::isfinite(loss)) throw TrainingError("language-model pretraining diverged at step " + std::to_string(step));
    adam.step(params);
    log.step_loss.push_back(loss);
  }
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return log;
}

/// Mean per-token negative log-likelihood over a corpus.
template <typename Scalar>
double corpus_nll(Transformer<Scalar>& model, const std::vector<std::vector<TokenId>>& corpus) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& seq : corpus) {
    if (seq.size() < 2) continue;
    total += next_token_loss(model, seq, Scalar(0)) * static_cast<double>(seq.size() - 1);
    tokens += seq.size() - 1;
  }
  return tokens ? total / static_cast<double>(tokens) : 0.0;
}

// ---------------------------------------------------------------------------
// Persistence: tokenizer and shape travel in the sidecar metadata.

template <typename Scalar>
void save_language_model(const std::filesystem::path& path, Transformer<Scalar>& model, const Tokenizer& tok,
                         nlohmann::json extra = {}) {
  nlohmann::json meta = extra.is_object() ? extra : nlohmann::json::object();
  meta["transformer"] = to_json(model.options());
  meta["tokenizer"] = tok.to_json();
  checkpoint::save_params(path, model.params(), meta);
}

template <typename Scalar>
struct LoadedLanguageModel {
  Transformer<Scalar> model;
  Tokenizer tokenizer;
};

template <typename Scalar>
LoadedLanguageModel<Scalar> load_language_model(const std::filesystem::path& path) {
  const auto contents = checkpoint::read(path);
  Rng rng(0);
  LoadedLanguageModel<Scalar> out{
      Transformer<Scalar>(transformer_options_from_json(contents.metadata.at("transformer")), rng),
      Tokenizer::from_json(contents.metadata.at("tokenizer"))};
  checkpoint::load_params(path, out.model.params());
  return out;
}

}  // namespace collm::lm
