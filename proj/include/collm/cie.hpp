#pragma once

// Collaborative information encoding: a collaborative encoder f_psi followed by a
// mapping MLP g_phi into the language model's token-embedding space. Also the
// directly learned user/item token table used by the UI-token ablation.

#include "collm/collab.hpp"
#include "collm/nn.hpp"

#include <memory>

namespace collm::cie {

struct MlpOptions {
  int in_dim = 64;
  int out_dim = 64;
  int hidden_mult = 10;
  Activation activation = Activation::Gelu;
};

/// Two-layer perceptron in -> hidden_mult*in -> out.
template <typename Scalar>
class MappingMlp {
 public:
  MappingMlp() = default;
  MappingMlp(const std::string& prefix, MlpOptions opts, Rng& rng)
      : opts_(opts),
        w1_(prefix + "w1", ParamGroup::Mapping, opts.in_dim, opts.hidden_mult * opts.in_dim),
        b1_(prefix + "b1", ParamGroup::Mapping, 1, opts.hidden_mult * opts.in_dim),
        w2_(prefix + "w2", ParamGroup::Mapping, opts.hidden_mult * opts.in_dim, opts.out_dim),
        b2_(prefix + "b2", ParamGroup::Mapping, 1, opts.out_dim) {
    if (opts.in_dim < 1 || opts.out_dim < 1 || opts.hidden_mult < 1) throw ShapeError("invalid MLP shape");
    reinitialize(rng);
  }

  const MlpOptions& options() const { return opts_; }
  int hidden_dim() const { return static_cast<int>(w1_.value.cols()); }
  Param<Scalar>& w1() { return w1_; }
  Param<Scalar>& b1() { return b1_; }
  Param<Scalar>& w2() { return w2_; }
  Param<Scalar>& b2() { return b2_; }

  void reinitialize(Rng& rng) {
    const double h = static_cast<double>(hidden_dim());
    fill_normal(w1_.value, rng, std::sqrt(2.0 / (opts_.in_dim + h)));
    fill_normal(w2_.value, rng, std::sqrt(2.0 / (h + opts_.out_dim)));
    b1_.value.setZero();
    b2_.value.setZero();
  }

  Vec<Scalar> forward(const Vec<Scalar>& x) const {
    check_input(x);
    const Mat<Scalar> pre = x.transpose() * w1_.value + b1_.value;
    return (activate(pre, opts_.activation) * w2_.value + b2_.value).transpose();
  }

  /// Accumulates parameter gradients for output gradient `dy`; returns dL/dx.
  Vec<Scalar> backward(const Vec<Scalar>& x, const Vec<Scalar>& dy) {
    check_input(x);
    const Mat<Scalar> pre = x.transpose() * w1_.value + b1_.value;
    const Mat<Scalar> h = activate(pre, opts_.activation);
    const RowVec<Scalar> dyr = dy.transpose();
    w2_.grad.noalias() += h.transpose() * dyr;
    b2_.grad += dyr;
    const Mat<Scalar> dpre = (dyr * w2_.value.transpose()).cwiseProduct(activate_grad(pre, opts_.activation));
    w1_.grad.noalias() += x * dpre;
    b1_.grad += dpre;
    return (dpre * w1_.value.transpose()).transpose();
  }

  ParamList<Scalar> params() { return {&w1_, &b1_, &w2_, &b2_}; }

 private:
  void check_input(const Vec<Scalar>& x) const {
    if (x.size() != opts_.in_dim)
      throw ShapeError("MLP input of width " + std::to_string(x.size()) + ", expected " + std::to_string(opts_.in_dim));
  }

  MlpOptions opts_;
  Param<Scalar> w1_, b1_, w2_, b2_;
};

/// Source of the d2-dimensional vectors placed at the user/item slots of a prompt.
template <typename Scalar>
class SlotEncoder {
 public:
  virtual ~SlotEncoder() = default;
  virtual int output_dim() const = 0;
  virtual int history_length() const { return 0; }
  virtual Vec<Scalar> user_embedding(UserId user, const data::History& history) const = 0;
  virtual Vec<Scalar> item_embedding(ItemId item) const = 0;
  virtual void backward_user(UserId user, const data::History& history, const Vec<Scalar>& grad) = 0;
  virtual void backward_item(ItemId item, const Vec<Scalar>& grad) = 0;
  /// Completes deferred gradient work at the end of a batch.
  virtual void flush_backward() {}
  /// Recomputes derived state after a parameter update.
  virtual void refresh() {}
  virtual ParamList<Scalar> params() = 0;
  virtual std::unique_ptr<SlotEncoder> clone() const = 0;
};

/// Which CIE parameters step 2 trains.
enum class Omega { Phi, PhiPsi };

inline const char* to_string(Omega o) { return o == Omega::Phi ? "phi" : "phi+psi"; }

inline Omega omega_from_string(const std::string& s) {
  if (s == "phi") return Omega::Phi;
  if (s == "phi+psi" || s == "phi,psi") return Omega::PhiPsi;
  throw ConfigError("unknown CIE trainable set '" + s + "'");
}

struct CieOptions {
  Activation activation = Activation::Gelu;
  int hidden_mult = 10;
  bool shared_mlp = true;  // one g_phi for users and items
  Omega omega = Omega::Phi;
};

template <typename Scalar>
class CieModule final : public SlotEncoder<Scalar> {
 public:
  CieModule(std::unique_ptr<collab::Encoder<Scalar>> encoder, int d2, CieOptions opts, Rng& rng)
      : encoder_(std::move(encoder)), opts_(opts) {
    if (!encoder_) throw ContractError("CIE module needs a collaborative encoder");
    const MlpOptions m{encoder_->dim(), d2, opts.hidden_mult, opts.activation};
    user_mlp_ = MappingMlp<Scalar>(opts.shared_mlp ? "cie.mlp." : "cie.user_mlp.", m, rng);
    if (!opts.shared_mlp) item_mlp_ = MappingMlp<Scalar>("cie.item_mlp.", m, rng);
  }

  CieModule(const CieModule& other)
      : encoder_(other.encoder_->clone()), opts_(other.opts_), user_mlp_(other.user_mlp_), item_mlp_(other.item_mlp_) {}

  const CieOptions& options() const { return opts_; }
  Omega omega() const { return opts_.omega; }

  /// Throws while locked by a running training stage.
  void set_omega(Omega o) {
    if (locked_) throw ContractError("the CIE trainable set cannot change during a training stage");
    opts_.omega = o;
  }
  void lock() { locked_ = true; }
  void unlock() { locked_ = false; }

  collab::Encoder<Scalar>& encoder() { return *encoder_; }
  const collab::Encoder<Scalar>& encoder() const { return *encoder_; }
  MappingMlp<Scalar>& user_mlp() { return user_mlp_; }
  MappingMlp<Scalar>& item_mlp() { return opts_.shared_mlp ? user_mlp_ : item_mlp_; }

  int output_dim() const override { return user_mlp_.options().out_dim; }
  int history_length() const override { return encoder_->history_length(); }

  Vec<Scalar> map_user(UserId user, const data::History& history) const {
    return user_mlp_.forward(encoder_->encode_user(user, history));
  }
  Vec<Scalar> map_item(ItemId item) const { return item_mlp_ref().forward(encoder_->encode_item(item)); }

  Vec<Scalar> user_embedding(UserId user, const data::History& history) const override {
    return map_user(user, history);
  }
  Vec<Scalar> item_embedding(ItemId item) const override { return map_item(item); }

  void backward_user(UserId user, const data::History& history, const Vec<Scalar>& grad) override {
    const Vec<Scalar> dx = user_mlp_.backward(encoder_->encode_user(user, history), grad);
    if (opts_.omega == Omega::PhiPsi) encoder_->backward_user(user, history, dx);
  }
  void backward_item(ItemId item, const Vec<Scalar>& grad) override {
    const Vec<Scalar> dx = item_mlp().backward(encoder_->encode_item(item), grad);
    if (opts_.omega == Omega::PhiPsi) encoder_->backward_item(item, dx);
  }
  void flush_backward() override {
    if (opts_.omega == Omega::PhiPsi) encoder_->flush_backward();
  }
  void refresh() override { encoder_->refresh(); }

  /// Mapping parameters (phi) followed by encoder parameters (psi).
  ParamList<Scalar> params() override {
    ParamList<Scalar> out = user_mlp_.params();
    if (!opts_.shared_mlp)
      for (auto* p : item_mlp_.params()) out.push_back(p);
    for (auto* p : encoder_->params()) out.push_back(p);
    return out;
  }

  std::unique_ptr<SlotEncoder<Scalar>> clone() const override { return std::make_unique<CieModule>(*this); }

 private:
  const MappingMlp<Scalar>& item_mlp_ref() const { return opts_.shared_mlp ? user_mlp_ : item_mlp_; }

  std::unique_ptr<collab::Encoder<Scalar>> encoder_;
  CieOptions opts_;
  MappingMlp<Scalar> user_mlp_, item_mlp_;
  bool locked_ = false;
};

/// Freshly learned d2-dimensional token embeddings per user and per item.
template <typename Scalar>
class UiTokenTable final : public SlotEncoder<Scalar> {
 public:
  UiTokenTable(int num_users, int num_items, int d2, Rng& rng, double stddev = 0.1)
      : users_("ui.user_tokens", ParamGroup::UiTokens, num_users, d2),
        items_("ui.item_tokens", ParamGroup::UiTokens, num_items, d2) {
    fill_normal(users_.value, rng, stddev);
    fill_normal(items_.value, rng, stddev);
  }

  int output_dim() const override { return static_cast<int>(users_.value.cols()); }
  Vec<Scalar> user_embedding(UserId user, const data::History&) const override {
    check(user, users_);
    return users_.value.row(user).transpose();
  }
  Vec<Scalar> item_embedding(ItemId item) const override {
    check(item, items_);
    return items_.value.row(item).transpose();
  }
  void backward_user(UserId user, const data::History&, const Vec<Scalar>& grad) override {
    check(user, users_);
    users_.grad.row(user) += grad.transpose();
  }
  void backward_item(ItemId item, const Vec<Scalar>& grad) override {
    check(item, items_);
    items_.grad.row(item) += grad.transpose();
  }
  ParamList<Scalar> params() override { return {&users_, &items_}; }
  std::unique_ptr<SlotEncoder<Scalar>> clone() const override { return std::make_unique<UiTokenTable>(*this); }

  std::size_t parameter_count() const { return static_cast<std::size_t>(users_.value.size() + items_.value.size()); }

 private:
  static void check(std::int32_t id, const Param<Scalar>& p) {
    if (id < 0 || id >= p.value.rows()) throw IdRangeError(p.name + ": id " + std::to_string(id) + " out of range");
  }

  Param<Scalar> users_, items_;
};

}  // namespace collm::cie
