#pragma once

// Dense building blocks with hand-written backward passes. Activations are
// row-major in the mathematical sense: one row per sequence position, so a
// projection is `X * W` with W shaped (in, out).

#include "collm/common.hpp"

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace collm {

/// The disjoint parameter sets a training stage may freeze or train.
enum class ParamGroup {
  LmBase,    // frozen language-model weights
  Lora,      // low-rank adapters on query/value projections
  Mapping,   // the CIE mapping MLP
  Collab,    // collaborative encoder weights
  UiTokens,  // per-user/per-item token table of the UI-token ablation
};

inline const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::LmBase: return "lm_base";
    case ParamGroup::Lora: return "lora";
    case ParamGroup::Mapping: return "mapping";
    case ParamGroup::Collab: return "collab";
    case ParamGroup::UiTokens: return "ui_tokens";
  }
  return "?";
}

inline ParamGroup param_group_from_string(const std::string& s) {
  for (auto g : {ParamGroup::LmBase, ParamGroup::Lora, ParamGroup::Mapping, ParamGroup::Collab,
                 ParamGroup::UiTokens}) {
    if (s == to_string(g)) return g;
  }
  throw ConfigError("unknown parameter group '" + s + "'");
}

template <typename Scalar>
struct Param {
  std::string name;
  ParamGroup group = ParamGroup::LmBase;
  Mat<Scalar> value;
  Mat<Scalar> grad;

  Param() = default;
  Param(std::string n, ParamGroup g, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)), group(g), value(Mat<Scalar>::Zero(rows, cols)),
        grad(Mat<Scalar>::Zero(rows, cols)) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename Scalar>
using ParamList = std::vector<Param<Scalar>*>;

template <typename Scalar>
void zero_grads(const ParamList<Scalar>& params) {
  for (auto* p : params) p->zero_grad();
}

struct AdamOptions {
  double lr = 1e-3;
  double weight_decay = 0.0;
  /// true: AdamW (decay applied to weights); false: L2 term added to the gradient.
  bool decoupled = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam / AdamW. Moment state is keyed by parameter name.
template <typename Scalar>
class Adam {
 public:
  explicit Adam(AdamOptions opts) : opts_(opts) {}

  const AdamOptions& options() const { return opts_; }

  void step(const ParamList<Scalar>& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    const Scalar lr = static_cast<Scalar>(opts_.lr);
    const Scalar b1 = static_cast<Scalar>(opts_.beta1);
    const Scalar b2 = static_cast<Scalar>(opts_.beta2);
    const Scalar wd = static_cast<Scalar>(opts_.weight_decay);
    const Scalar step_size = static_cast<Scalar>(opts_.lr / bc1);
    const Scalar inv_bc2 = static_cast<Scalar>(1.0 / bc2);
    const Scalar eps = static_cast<Scalar>(opts_.eps);
    for (auto* p : params) {
      auto& st = state_[p->name];
      if (st.m.size() == 0) {
        st.m = Mat<Scalar>::Zero(p->value.rows(), p->value.cols());
        st.v = Mat<Scalar>::Zero(p->value.rows(), p->value.cols());
      }
      if (lr == Scalar(0)) continue;
      Mat<Scalar> g = p->grad;
      if (!opts_.decoupled && wd != Scalar(0)) g += wd * p->value;
      st.m = b1 * st.m + (Scalar(1) - b1) * g;
      st.v = b2 * st.v + (Scalar(1) - b2) * g.cwiseProduct(g);
      if (opts_.decoupled && wd != Scalar(0)) p->value *= (Scalar(1) - lr * wd);
      p->value.array() -=
          step_size * st.m.array() / ((st.v.array() * inv_bc2).sqrt() + eps);
    }
  }

  std::int64_t steps() const { return t_; }

 private:
  struct State {
    Mat<Scalar> m, v;
  };
  AdamOptions opts_;
  std::int64_t t_ = 0;
  std::map<std::string, State> state_;
};

// ---------------------------------------------------------------------------
// Layer norm over the feature axis of each row.

template <typename Scalar>
struct LayerNormCache {
  Mat<Scalar> xhat;
  Vec<Scalar> inv_std;
};

template <typename Scalar>
Mat<Scalar> layer_norm(const Mat<Scalar>& x, const Mat<Scalar>& gain, const Mat<Scalar>& bias,
                       LayerNormCache<Scalar>* cache, Scalar eps = Scalar(1e-5)) {
  const Eigen::Index d = x.cols();
  Vec<Scalar> mean = x.rowwise().mean();
  Mat<Scalar> centered = x.colwise() - mean;
  Vec<Scalar> var = centered.array().square().rowwise().sum() / static_cast<Scalar>(d);
  Vec<Scalar> inv = (var.array() + eps).rsqrt();
  Mat<Scalar> xhat = centered.array().colwise() * inv.array();
  Mat<Scalar> y = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = std::move(inv);
  }
  return y;
}

/// Returns dL/dx; accumulates gain/bias gradients when the pointers are non-null.
template <typename Scalar>
Mat<Scalar> layer_norm_backward(const Mat<Scalar>& dy, const LayerNormCache<Scalar>& cache,
                                const Mat<Scalar>& gain, Mat<Scalar>* dgain, Mat<Scalar>* dbias) {
  const Scalar d = static_cast<Scalar>(dy.cols());
  if (dgain) dgain->row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  if (dbias) dbias->row(0) += dy.colwise().sum();
  Mat<Scalar> dxhat = dy.array().rowwise() * gain.row(0).array();
  Vec<Scalar> sum_dxhat = dxhat.rowwise().sum();
  Vec<Scalar> sum_dxhat_xhat = (dxhat.array() * cache.xhat.array()).rowwise().sum();
  Mat<Scalar> dx = (d * dxhat.array()).colwise() - sum_dxhat.array();
  dx.array() -= cache.xhat.array().colwise() * sum_dxhat_xhat.array();
  dx.array().colwise() *= cache.inv_std.array() / d;
  return dx;
}

// ---------------------------------------------------------------------------
// Activations.

enum class Activation { Gelu, Relu };

inline const char* to_string(Activation a) { return a == Activation::Gelu ? "gelu" : "relu"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "gelu") return Activation::Gelu;
  if (s == "relu") return Activation::Relu;
  throw ConfigError("unknown activation '" + s + "'");
}

template <typename Scalar>
Mat<Scalar> activate(const Mat<Scalar>& x, Activation act) {
  if (act == Activation::Relu) return x.cwiseMax(Scalar(0));
  const Scalar c = static_cast<Scalar>(0.7978845608028654);  // sqrt(2/pi)
  const Scalar k = static_cast<Scalar>(0.044715);
  return (Scalar(0.5) * x.array() *
          (Scalar(1) + (c * (x.array() + k * x.array().cube())).tanh()))
      .matrix();
}

/// Elementwise derivative of `activate` at x.
template <typename Scalar>
Mat<Scalar> activate_grad(const Mat<Scalar>& x, Activation act) {
  if (act == Activation::Relu) return (x.array() > Scalar(0)).template cast<Scalar>().matrix();
  const Scalar c = static_cast<Scalar>(0.7978845608028654);
  const Scalar k = static_cast<Scalar>(0.044715);
  auto u = (c * (x.array() + k * x.array().cube())).eval();
  auto t = u.tanh().eval();
  auto du = (c * (Scalar(1) + Scalar(3) * k * x.array().square())).eval();
  return (Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x.array() * (Scalar(1) - t.square()) * du)
      .matrix();
}

// ---------------------------------------------------------------------------
// Causal multi-head attention on precomputed Q, K, V.

template <typename Scalar>
struct AttentionCache {
  std::vector<Mat<Scalar>> probs;  // one L x L matrix per head
};

template <typename Scalar>
Mat<Scalar> causal_attention(const Mat<Scalar>& q, const Mat<Scalar>& k, const Mat<Scalar>& v,
                             int heads, AttentionCache<Scalar>* cache) {
  const Eigen::Index len = q.rows();
  const Eigen::Index dh = q.cols() / heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  Mat<Scalar> out(len, q.cols());
  if (cache) cache->probs.resize(static_cast<std::size_t>(heads));
  Mat<Scalar> s(len, len);
  for (int h = 0; h < heads; ++h) {
    const auto qh = q.middleCols(h * dh, dh);
    const auto kh = k.middleCols(h * dh, dh);
    s.noalias() = qh * kh.transpose();
    s *= scale;
    for (Eigen::Index i = 0; i < len; ++i) {
      const Scalar mx = s.row(i).head(i + 1).maxCoeff();
      Scalar total = 0;
      for (Eigen::Index j = 0; j <= i; ++j) {
        s(i, j) = std::exp(s(i, j) - mx);
        total += s(i, j);
      }
      s.row(i).head(i + 1) /= total;
      s.row(i).tail(len - i - 1).setZero();
    }
    out.middleCols(h * dh, dh).noalias() = s * v.middleCols(h * dh, dh);
    if (cache) cache->probs[static_cast<std::size_t>(h)] = s;
  }
  return out;
}

template <typename Scalar>
void causal_attention_backward(const Mat<Scalar>& dout, const Mat<Scalar>& q, const Mat<Scalar>& k,
                               const Mat<Scalar>& v, int heads, const AttentionCache<Scalar>& cache,
                               Mat<Scalar>& dq, Mat<Scalar>& dk, Mat<Scalar>& dv) {
  const Eigen::Index len = q.rows();
  const Eigen::Index dh = q.cols() / heads;
  const Scalar scale = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  dq.setZero(len, q.cols());
  dk.setZero(len, q.cols());
  dv.setZero(len, q.cols());
  Mat<Scalar> dp(len, len);
  for (int h = 0; h < heads; ++h) {
    const Mat<Scalar>& p = cache.probs[static_cast<std::size_t>(h)];
    const auto doh = dout.middleCols(h * dh, dh);
    dv.middleCols(h * dh, dh).noalias() = p.transpose() * doh;
    dp.noalias() = doh * v.middleCols(h * dh, dh).transpose();
    Vec<Scalar> row_dot = (dp.array() * p.array()).rowwise().sum();
    Mat<Scalar> ds = (p.array() * (dp.array().colwise() - row_dot.array())).matrix();
    ds *= scale;
    dq.middleCols(h * dh, dh).noalias() = ds * k.middleCols(h * dh, dh);
    dk.middleCols(h * dh, dh).noalias() = ds.transpose() * q.middleCols(h * dh, dh);
  }
}

// ---------------------------------------------------------------------------
// Low-rank adapter on the query and value projections of one block.
// delta(x) = (alpha / r) * dropout(x) * A * B, with B zero-initialized.

struct LoraOptions {
  int rank = 8;
  double alpha = 16.0;
  double dropout = 0.05;
};

template <typename Scalar>
struct LoraBlock {
  Param<Scalar> aq, bq, av, bv;
};

template <typename Scalar>
struct Lora {
  LoraOptions options;
  std::vector<LoraBlock<Scalar>> blocks;

  Lora() = default;
  Lora(int layers, int d_model, LoraOptions opts, Rng& rng) : options(opts) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_model));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (int l = 0; l < layers; ++l) {
      const std::string pre = "lora.layer" + std::to_string(l) + ".";
      LoraBlock<Scalar> b{
          Param<Scalar>(pre + "q_a", ParamGroup::Lora, d_model, opts.rank),
          Param<Scalar>(pre + "q_b", ParamGroup::Lora, opts.rank, d_model),
          Param<Scalar>(pre + "v_a", ParamGroup::Lora, d_model, opts.rank),
          Param<Scalar>(pre + "v_b", ParamGroup::Lora, opts.rank, d_model),
      };
      for (auto* a : {&b.aq.value, &b.av.value})
        for (Eigen::Index k = 0; k < a->size(); ++k) a->data()[k] = static_cast<Scalar>(dist(rng));
      blocks.push_back(std::move(b));
    }
  }

  Scalar scale() const { return static_cast<Scalar>(options.alpha / options.rank); }

  ParamList<Scalar> params() {
    ParamList<Scalar> out;
    for (auto& b : blocks)
      for (auto* p : {&b.aq, &b.bq, &b.av, &b.bv}) out.push_back(p);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Pre-LN transformer block: x + Attn(LN(x)), then + FFN(LN(.)).

template <typename Scalar>
struct BlockCache {
  Mat<Scalar> x_in;
  LayerNormCache<Scalar> ln1, ln2;
  Mat<Scalar> a, q, k, v;
  Mat<Scalar> mask_q, mask_v;  // inverted-dropout masks, empty when inactive
  Mat<Scalar> uq, uv;          // dropout(a) * A
  AttentionCache<Scalar> attn;
  Mat<Scalar> attn_out, x1, b, pre, f;
};

/// Which gradients a backward pass should accumulate.
struct GradFlags {
  bool base = false;
  bool lora = false;
};

template <typename Scalar>
struct TransformerBlock {
  int heads = 1;
  Param<Scalar> ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;

  TransformerBlock() = default;
  TransformerBlock(const std::string& prefix, ParamGroup group, int d_model, int n_heads,
                   int ffn_mult, Rng& rng)
      : heads(n_heads),
        ln1_g(prefix + "ln1_g", group, 1, d_model),
        ln1_b(prefix + "ln1_b", group, 1, d_model),
        wq(prefix + "wq", group, d_model, d_model),
        wk(prefix + "wk", group, d_model, d_model),
        wv(prefix + "wv", group, d_model, d_model),
        wo(prefix + "wo", group, d_model, d_model),
        ln2_g(prefix + "ln2_g", group, 1, d_model),
        ln2_b(prefix + "ln2_b", group, 1, d_model),
        w1(prefix + "w1", group, d_model, ffn_mult * d_model),
        b1(prefix + "b1", group, 1, ffn_mult * d_model),
        w2(prefix + "w2", group, ffn_mult * d_model, d_model),
        b2(prefix + "b2", group, 1, d_model) {
    if (d_model % n_heads != 0) throw ShapeError("d_model must be divisible by the head count");
    ln1_g.value.setOnes();
    ln2_g.value.setOnes();
    const double s = 1.0 / std::sqrt(static_cast<double>(d_model));
    for (auto* p : {&wq, &wk, &wv, &wo, &w1}) fill_normal(p->value, rng, s);
    fill_normal(w2.value, rng, 1.0 / std::sqrt(static_cast<double>(ffn_mult * d_model)));
  }

  ParamList<Scalar> params() {
    return {&ln1_g, &ln1_b, &wq, &wk, &wv, &wo, &ln2_g, &ln2_b, &w1, &b1, &w2, &b2};
  }

  /// `dropout_rng` non-null enables LoRA dropout (training mode).
  Mat<Scalar> forward(const Mat<Scalar>& x, const LoraBlock<Scalar>* lora, Scalar lora_scale,
                      double lora_dropout, Rng* dropout_rng, BlockCache<Scalar>& c) const {
    c.x_in = x;
    c.a = layer_norm(x, ln1_g.value, ln1_b.value, &c.ln1);
    c.q.noalias() = c.a * wq.value;
    c.k.noalias() = c.a * wk.value;
    c.v.noalias() = c.a * wv.value;
    c.mask_q.resize(0, 0);
    c.mask_v.resize(0, 0);
    if (lora) {
      const bool drop = dropout_rng != nullptr && lora_dropout > 0.0;
      if (drop) {
        c.mask_q = dropout_mask(c.a.rows(), c.a.cols(), lora_dropout, *dropout_rng);
        c.mask_v = dropout_mask(c.a.rows(), c.a.cols(), lora_dropout, *dropout_rng);
        c.uq.noalias() = c.a.cwiseProduct(c.mask_q) * lora->aq.value;
        c.uv.noalias() = c.a.cwiseProduct(c.mask_v) * lora->av.value;
      } else {
        c.uq.noalias() = c.a * lora->aq.value;
        c.uv.noalias() = c.a * lora->av.value;
      }
      c.q.noalias() += lora_scale * (c.uq * lora->bq.value);
      c.v.noalias() += lora_scale * (c.uv * lora->bv.value);
    }
    c.attn_out = causal_attention(c.q, c.k, c.v, heads, &c.attn);
    c.x1 = x;
    c.x1.noalias() += c.attn_out * wo.value;
    c.b = layer_norm(c.x1, ln2_g.value, ln2_b.value, &c.ln2);
    c.pre.noalias() = c.b * w1.value;
    c.pre.rowwise() += b1.value.row(0);
    c.f = activate(c.pre, Activation::Gelu);
    Mat<Scalar> out = c.x1;
    out.noalias() += c.f * w2.value;
    out.rowwise() += b2.value.row(0);
    return out;
  }

  /// Returns dL/dx. Accumulates into this block's grads when flags.base, into the
  /// adapter's grads when flags.lora.
  Mat<Scalar> backward(const Mat<Scalar>& dout, const BlockCache<Scalar>& c, LoraBlock<Scalar>* lora,
                       Scalar lora_scale, GradFlags flags) {
    // feed-forward
    if (flags.base) {
      w2.grad.noalias() += c.f.transpose() * dout;
      b2.grad.row(0) += dout.colwise().sum();
    }
    Mat<Scalar> dpre = (dout * w2.value.transpose()).cwiseProduct(activate_grad(c.pre, Activation::Gelu));
    if (flags.base) {
      w1.grad.noalias() += c.b.transpose() * dpre;
      b1.grad.row(0) += dpre.colwise().sum();
    }
    Mat<Scalar> db = dpre * w1.value.transpose();
    Mat<Scalar> dx1 = dout + layer_norm_backward(db, c.ln2, ln2_g.value, flags.base ? &ln2_g.grad : nullptr,
                                                 flags.base ? &ln2_b.grad : nullptr);
    // attention
    if (flags.base) wo.grad.noalias() += c.attn_out.transpose() * dx1;
    Mat<Scalar> dattn = dx1 * wo.value.transpose();
    Mat<Scalar> dq, dk, dv;
    causal_attention_backward(dattn, c.q, c.k, c.v, heads, c.attn, dq, dk, dv);
    Mat<Scalar> da = dq * wq.value.transpose();
    da.noalias() += dk * wk.value.transpose();
    da.noalias() += dv * wv.value.transpose();
    if (flags.base) {
      wq.grad.noalias() += c.a.transpose() * dq;
      wk.grad.noalias() += c.a.transpose() * dk;
      wv.grad.noalias() += c.a.transpose() * dv;
    }
    if (lora) {
      lora_path_backward(dq, c.a, c.mask_q, c.uq, lora->aq, lora->bq, lora_scale, flags.lora, da);
      lora_path_backward(dv, c.a, c.mask_v, c.uv, lora->av, lora->bv, lora_scale, flags.lora, da);
    }
    return dx1 + layer_norm_backward(da, c.ln1, ln1_g.value, flags.base ? &ln1_g.grad : nullptr,
                                     flags.base ? &ln1_b.grad : nullptr);
  }

 private:
  static Mat<Scalar> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
    std::bernoulli_distribution keep(1.0 - p);
    const Scalar kept = static_cast<Scalar>(1.0 / (1.0 - p));
    Mat<Scalar> m(rows, cols);
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = keep(rng) ? kept : Scalar(0);
    return m;
  }

  static void lora_path_backward(const Mat<Scalar>& dproj, const Mat<Scalar>& a, const Mat<Scalar>& mask,
                                 const Mat<Scalar>& u, Param<Scalar>& pa, Param<Scalar>& pb,
                                 Scalar scale, bool accumulate, Mat<Scalar>& da) {
    Mat<Scalar> du = scale * (dproj * pb.value.transpose());
    if (accumulate) {
      pb.grad.noalias() += scale * (u.transpose() * dproj);
      if (mask.size() > 0)
        pa.grad.noalias() += a.cwiseProduct(mask).transpose() * du;
      else
        pa.grad.noalias() += a.transpose() * du;
    }
    if (mask.size() > 0)
      da.noalias() += (du * pa.value.transpose()).cwiseProduct(mask);
    else
      da.noalias() += du * pa.value.transpose();
  }
};

}  // namespace collm
