#pragma once

// Conventional collaborative encoders f_psi producing d1-dimensional user and
// item representations: matrix factorization, LightGCN and SASRec, all scored by
// an inner product squashed through a sigmoid and pretrained with BCE.

#include "collm/checkpoint.hpp"
#include "collm/data.hpp"
#include "collm/eval.hpp"
#include "collm/nn.hpp"

#include <Eigen/Sparse>

#include <chrono>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>

namespace collm::collab {

enum class Kind { MF, LightGCN, SASRec };

inline const char* to_string(Kind k) {
  switch (k) {
    case Kind::MF: return "mf";
    case Kind::LightGCN: return "lightgcn";
    case Kind::SASRec: return "sasrec";
  }
  return "?";
}

inline Kind kind_from_string(const std::string& s) {
  if (s == "mf") return Kind::MF;
  if (s == "lightgcn") return Kind::LightGCN;
  if (s == "sasrec") return Kind::SASRec;
  throw ConfigError("unknown collaborative model '" + s + "'");
}

struct EncoderOptions {
  Kind kind = Kind::MF;
  int dim = 64;
  int num_users = 0;
  int num_items = 0;
  int lightgcn_layers = 2;
  int sasrec_max_len = 10;  // set from the average train interactions per user
  int sasrec_heads = 1;
  double init_std = 0.1;
};

template <typename Scalar>
class Encoder {
 public:
  explicit Encoder(EncoderOptions opts) : opts_(opts) {
    if (opts.dim < 1 || opts.num_users < 0 || opts.num_items < 0) throw ShapeError("invalid encoder dimensions");
  }
  virtual ~Encoder() = default;

  const EncoderOptions& options() const { return opts_; }
  Kind kind() const { return opts_.kind; }
  int dim() const { return opts_.dim; }
  int num_users() const { return opts_.num_users; }
  int num_items() const { return opts_.num_items; }
  /// Maximum history length consumed by encode_user (0: history unused).
  virtual int history_length() const { return 0; }

  /// Recomputes derived state after parameter changes.
  virtual void refresh() {}

  virtual Vec<Scalar> encode_user(UserId user, const data::History& history) const = 0;
  virtual Vec<Scalar> encode_item(ItemId item) const = 0;

  /// Accumulate dL/d(representation) into parameter gradients. Some encoders
  /// defer the work to flush_backward().
  virtual void backward_user(UserId user, const data::History& history, const Vec<Scalar>& grad) = 0;
  virtual void backward_item(ItemId item, const Vec<Scalar>& grad) = 0;
  virtual void flush_backward() {}

  virtual ParamList<Scalar> params() = 0;
  /// Fresh random parameters ("from scratch").
  virtual void reinitialize(Rng& rng) = 0;
  virtual std::unique_ptr<Encoder> clone() const = 0;

 protected:
  void check_user(UserId u) const {
    if (u < 0 || u >= opts_.num_users)
      throw IdRangeError("user id " + std::to_string(u) + " outside [0," + std::to_string(opts_.num_users) + ")");
  }
  void check_item(ItemId i) const {
    if (i < 0 || i >= opts_.num_items)
      throw IdRangeError("item id " + std::to_string(i) + " outside [0," + std::to_string(opts_.num_items) + ")");
  }

  EncoderOptions opts_;
};

/// User and item embedding rows (the embedding subset of psi).
template <typename Scalar>
struct EmbeddingTable {
  Param<Scalar> users, items;

  EmbeddingTable() = default;
  EmbeddingTable(const std::string& prefix, int num_users, int num_items, int dim)
      : users(prefix + "user_emb", ParamGroup::Collab, num_users, dim),
        items(prefix + "item_emb", ParamGroup::Collab, num_items, dim) {}

  void randomize(Rng& rng, double stddev) {
    fill_normal(users.value, rng, stddev);
    fill_normal(items.value, rng, stddev);
  }
};

// ---------------------------------------------------------------------------

template <typename Scalar>
class MatrixFactorization final : public Encoder<Scalar> {
 public:
  MatrixFactorization(EncoderOptions opts, Rng& rng)
      : Encoder<Scalar>(opts), table_("mf.", opts.num_users, opts.num_items, opts.dim) {
    table_.randomize(rng, opts.init_std);
  }

  EmbeddingTable<Scalar>& table() { return table_; }

  Vec<Scalar> encode_user(UserId user, const data::History&) const override {
    this->check_user(user);
    return table_.users.value.row(user).transpose();
  }
  Vec<Scalar> encode_item(ItemId item) const override {
    this->check_item(item);
    return table_.items.value.row(item).transpose();
  }
  void backward_user(UserId user, const data::History&, const Vec<Scalar>& g) override {
    this->check_user(user);
    table_.users.grad.row(user) += g.transpose();
  }
  void backward_item(ItemId item, const Vec<Scalar>& g) override {
    this->check_item(item);
    table_.items.grad.row(item) += g.transpose();
  }
  ParamList<Scalar> params() override { return {&table_.users, &table_.items}; }
  void reinitialize(Rng& rng) override { table_.randomize(rng, this->opts_.init_std); }
  std::unique_ptr<Encoder<Scalar>> clone() const override { return std::make_unique<MatrixFactorization>(*this); }

 private:
  EmbeddingTable<Scalar> table_;
};

// ---------------------------------------------------------------------------

/// Bipartite user-item graph from train positives, as the symmetric-normalized
/// adjacency D^{-1/2} A D^{-1/2} over (users ++ items) nodes.
template <typename Scalar>
struct InteractionGraph {
  int num_users = 0, num_items = 0;
  Eigen::SparseMatrix<Scalar> norm_adj;
  std::vector<int> degree;

  InteractionGraph() = default;
  InteractionGraph(const std::vector<std::pair<UserId, ItemId>>& edges, int users, int items)
      : num_users(users), num_items(items) {
    const int n = users + items;
    std::vector<std::pair<int, int>> unique_edges;
    unique_edges.reserve(edges.size());
    for (const auto& [u, i] : edges) {
      if (u < 0 || u >= users || i < 0 || i >= items) throw IdRangeError("graph edge out of range");
      unique_edges.emplace_back(u, users + i);
    }
    std::sort(unique_edges.begin(), unique_edges.end());
    unique_edges.erase(std::unique(unique_edges.begin(), unique_edges.end()), unique_edges.end());
    degree.assign(static_cast<std::size_t>(n), 0);
    for (const auto& [a, b] : unique_edges) {
      ++degree[static_cast<std::size_t>(a)];
      ++degree[static_cast<std::size_t>(b)];
    }
    std::vector<Eigen::Triplet<Scalar>> trips;
    trips.reserve(unique_edges.size() * 2);
    for (const auto& [a, b] : unique_edges) {
      const Scalar w = static_cast<Scalar>(
          1.0 / std::sqrt(static_cast<double>(degree[static_cast<std::size_t>(a)]) *
                          static_cast<double>(degree[static_cast<std::size_t>(b)])));
      trips.emplace_back(a, b, w);
      trips.emplace_back(b, a, w);
    }
    norm_adj.resize(n, n);
    norm_adj.setFromTriplets(trips.begin(), trips.end());
  }

  static InteractionGraph from_train(const std::vector<data::Interaction>& train, int users, int items) {
    std::vector<std::pair<UserId, ItemId>> edges;
    for (const auto& x : train)
      if (x.label == 1) edges.emplace_back(x.user, x.item);
    return InteractionGraph(edges, users, items);
  }
};

/// Layer-mean of Â^l E for l = 0..layers. Linear in E.
template <typename Scalar>
Mat<Scalar> lightgcn_propagate(const Eigen::SparseMatrix<Scalar>& norm_adj, const Mat<Scalar>& e0, int layers) {
  Mat<Scalar> cur = e0;
  Mat<Scalar> sum = e0;
  for (int l = 0; l < layers; ++l) {
    Mat<Scalar> next = norm_adj * cur;
    cur.swap(next);
    sum += cur;
  }
  return sum / static_cast<Scalar>(layers + 1);
}

template <typename Scalar>
class LightGcn final : public Encoder<Scalar> {
 public:
  LightGcn(EncoderOptions opts, InteractionGraph<Scalar> graph, Rng& rng)
      : Encoder<Scalar>(opts), graph_(std::move(graph)), table_("lightgcn.", opts.num_users, opts.num_items, opts.dim) {
    if (graph_.num_users != opts.num_users || graph_.num_items != opts.num_items)
      throw ShapeError("LightGCN graph does not match the id space");
    if (opts.lightgcn_layers < 0) throw ShapeError("LightGCN layer count must be >= 0");
    table_.randomize(rng, opts.init_std);
    refresh();
  }

  EmbeddingTable<Scalar>& table() { return table_; }
  const InteractionGraph<Scalar>& graph() const { return graph_; }

  void refresh() override {
    propagated_ = lightgcn_propagate(graph_.norm_adj, stacked(), this->opts_.lightgcn_layers);
    pending_.setZero(propagated_.rows(), propagated_.cols());
  }

  Vec<Scalar> encode_user(UserId user, const data::History&) const override {
    this->check_user(user);
    return propagated_.row(user).transpose();
  }
  Vec<Scalar> encode_item(ItemId item) const override {
    this->check_item(item);
    return propagated_.row(this->opts_.num_users + item).transpose();
  }
  void backward_user(UserId user, const data::History&, const Vec<Scalar>& g) override {
    this->check_user(user);
    pending_.row(user) += g.transpose();
  }
  void backward_item(ItemId item, const Vec<Scalar>& g) override {
    this->check_item(item);
    pending_.row(this->opts_.num_users + item) += g.transpose();
  }
  /// Â is symmetric, so the adjoint of propagation is propagation itself.
  void flush_backward() override {
    Mat<Scalar> d0 = lightgcn_propagate(graph_.norm_adj, pending_, this->opts_.lightgcn_layers);
    table_.users.grad += d0.topRows(this->opts_.num_users);
    table_.items.grad += d0.bottomRows(this->opts_.num_items);
    pending_.setZero();
  }
  ParamList<Scalar> params() override { return {&table_.users, &table_.items}; }
  void reinitialize(Rng& rng) override {
    table_.randomize(rng, this->opts_.init_std);
    refresh();
  }
  std::unique_ptr<Encoder<Scalar>> clone() const override { return std::make_unique<LightGcn>(*this); }

 private:
  Mat<Scalar> stacked() const {
    Mat<Scalar> e0(this->opts_.num_users + this->opts_.num_items, this->opts_.dim);
    e0 << table_.users.value, table_.items.value;
    return e0;
  }

  InteractionGraph<Scalar> graph_;
  EmbeddingTable<Scalar> table_;
  Mat<Scalar> propagated_;
  Mat<Scalar> pending_;
};

// ---------------------------------------------------------------------------

/// Self-attentive sequential encoder. The user representation is the final-position
/// output of a causal attention block over the user's (positive) history; items use
/// their raw embedding rows. An empty history encodes to the zero vector.
template <typename Scalar>
class SasRec final : public Encoder<Scalar> {
 public:
  SasRec(EncoderOptions opts, Rng& rng)
      : Encoder<Scalar>(opts),
        items_("sasrec.item_emb", ParamGroup::Collab, opts.num_items, opts.dim),
        positions_("sasrec.pos_emb", ParamGroup::Collab, std::max(1, opts.sasrec_max_len), opts.dim),
        block_("sasrec.block0.", ParamGroup::Collab, opts.dim, opts.sasrec_heads, 1, rng),
        lnf_g_("sasrec.lnf_g", ParamGroup::Collab, 1, opts.dim),
        lnf_b_("sasrec.lnf_b", ParamGroup::Collab, 1, opts.dim) {
    if (opts.sasrec_max_len < 1) throw ShapeError("SASRec max length must be >= 1");
    init_embeddings(rng);
  }

  int history_length() const override { return this->opts_.sasrec_max_len; }
  Param<Scalar>& item_embeddings() { return items_; }

  Vec<Scalar> encode_user(UserId user, const data::History& history) const override {
    this->check_user(user);
    const auto seq = sequence(history);
    if (seq.empty()) return Vec<Scalar>::Zero(this->opts_.dim);
    BlockCache<Scalar> cache;
    LayerNormCache<Scalar> lnc;
    const Mat<Scalar> h = run(seq, cache, lnc);
    return h.row(h.rows() - 1).transpose();
  }

  /// Final-position outputs for every prefix of the history at once (row t is the
  /// representation of the first t+1 items).
  Mat<Scalar> encode_prefixes(const data::History& history) const {
    const auto seq = sequence(history);
    if (seq.empty()) return Mat<Scalar>(0, this->opts_.dim);
    BlockCache<Scalar> cache;
    LayerNormCache<Scalar> lnc;
    return run(seq, cache, lnc);
  }

  Vec<Scalar> encode_item(ItemId item) const override {
    this->check_item(item);
    return items_.value.row(item).transpose();
  }

  void backward_user(UserId user, const data::History& history, const Vec<Scalar>& g) override {
    this->check_user(user);
    const auto seq = sequence(history);
    if (seq.empty()) return;
    BlockCache<Scalar> cache;
    LayerNormCache<Scalar> lnc;
    const Mat<Scalar> h = run(seq, cache, lnc);
    Mat<Scalar> dh = Mat<Scalar>::Zero(h.rows(), h.cols());
    dh.row(h.rows() - 1) = g.transpose();
    Mat<Scalar> dblock = layer_norm_backward(dh, lnc, lnf_g_.value, &lnf_g_.grad, &lnf_b_.grad);
    Mat<Scalar> dx = block_.backward(dblock, cache, nullptr, Scalar(0), GradFlags{true, false});
    for (std::size_t t = 0; t < seq.size(); ++t) {
      items_.grad.row(seq[t]) += dx.row(static_cast<Eigen::Index>(t));
      positions_.grad.row(static_cast<Eigen::Index>(t)) += dx.row(static_cast<Eigen::Index>(t));
    }
  }
  void backward_item(ItemId item, const Vec<Scalar>& g) override {
    this->check_item(item);
    items_.grad.row(item) += g.transpose();
  }

  ParamList<Scalar> params() override {
    ParamList<Scalar> out{&items_, &positions_};
    for (auto* p : block_.params()) out.push_back(p);
    out.push_back(&lnf_g_);
    out.push_back(&lnf_b_);
    return out;
  }
  void reinitialize(Rng& rng) override {
    block_ = TransformerBlock<Scalar>("sasrec.block0.", ParamGroup::Collab, this->opts_.dim,
                                      this->opts_.sasrec_heads, 1, rng);
    lnf_g_.value.setOnes();
    lnf_b_.value.setZero();
    init_embeddings(rng);
  }
  std::unique_ptr<Encoder<Scalar>> clone() const override { return std::make_unique<SasRec>(*this); }

 private:
  void init_embeddings(Rng& rng) {
    fill_normal(items_.value, rng, this->opts_.init_std);
    fill_normal(positions_.value, rng, this->opts_.init_std);
    lnf_g_.value.setOnes();
  }

  std::vector<ItemId> sequence(const data::History& history) const {
    std::vector<ItemId> seq;
    const std::size_t n = history.items.size();
    const std::size_t keep = std::min(n, static_cast<std::size_t>(this->opts_.sasrec_max_len));
    for (std::size_t k = n - keep; k < n; ++k) {
      this->check_item(history.items[k].first);
      seq.push_back(history.items[k].first);
    }
    return seq;
  }

  Mat<Scalar> run(const std::vector<ItemId>& seq, BlockCache<Scalar>& cache, LayerNormCache<Scalar>& lnc) const {
    Mat<Scalar> x(static_cast<Eigen::Index>(seq.size()), this->opts_.dim);
    for (std::size_t t = 0; t < seq.size(); ++t)
      x.row(static_cast<Eigen::Index>(t)) = items_.value.row(seq[t]) + positions_.value.row(static_cast<Eigen::Index>(t));
    const Mat<Scalar> y = block_.forward(x, nullptr, Scalar(0), 0.0, nullptr, cache);
    return layer_norm(y, lnf_g_.value, lnf_b_.value, &lnc);
  }

  Param<Scalar> items_, positions_;
  TransformerBlock<Scalar> block_;
  Param<Scalar> lnf_g_, lnf_b_;
};

// ---------------------------------------------------------------------------

template <typename Scalar>
std::unique_ptr<Encoder<Scalar>> make_encoder(const EncoderOptions& opts, const std::vector<data::Interaction>& train,
                                              Rng& rng) {
  switch (opts.kind) {
    case Kind::MF: return std::make_unique<MatrixFactorization<Scalar>>(opts, rng);
    case Kind::LightGCN:
      return std::make_unique<LightGcn<Scalar>>(
          opts, InteractionGraph<Scalar>::from_train(train, opts.num_users, opts.num_items), rng);
    case Kind::SASRec: return std::make_unique<SasRec<Scalar>>(opts, rng);
  }
  throw ConfigError("unknown encoder kind");
}

/// sigmoid(<u, i>).
template <typename Scalar>
Scalar score(const Vec<Scalar>& u, const Vec<Scalar>& i) {
  if (u.size() != i.size())
    throw ShapeError("score: dimension mismatch " + std::to_string(u.size()) + " vs " + std::to_string(i.size()));
  return sigmoid(u.dot(i));
}

inline nlohmann::json encoder_metadata(const EncoderOptions& o) {
  return {{"kind", to_string(o.kind)},
          {"dim", o.dim},
          {"num_users", o.num_users},
          {"num_items", o.num_items},
          {"lightgcn_layers", o.lightgcn_layers},
          {"sasrec_max_len", o.sasrec_max_len},
          {"sasrec_heads", o.sasrec_heads},
          {"init_std", o.init_std}};
}

inline EncoderOptions encoder_options_from_metadata(const nlohmann::json& m) {
  EncoderOptions o;
  o.kind = kind_from_string(m.at("kind").get<std::string>());
  o.dim = m.at("dim").get<int>();
  o.num_users = m.at("num_users").get<int>();
  o.num_items = m.at("num_items").get<int>();
  o.lightgcn_layers = m.value("lightgcn_layers", 2);
  o.sasrec_max_len = m.value("sasrec_max_len", 10);
  o.sasrec_heads = m.value("sasrec_heads", 1);
  o.init_std = m.value("init_std", 0.1);
  return o;
}

template <typename Scalar>
void save_encoder(const std::filesystem::path& path, Encoder<Scalar>& enc, nlohmann::json extra = {}) {
  nlohmann::json meta = extra.is_object() ? extra : nlohmann::json::object();
  meta["encoder"] = encoder_metadata(enc.options());
  checkpoint::save_params(path, enc.params(), meta);
}

/// LightGCN rebuilds its graph from `train`.
template <typename Scalar>
std::unique_ptr<Encoder<Scalar>> load_encoder(const std::filesystem::path& path,
                                              const std::vector<data::Interaction>& train) {
  const auto contents = checkpoint::read(path);
  const auto opts = encoder_options_from_metadata(contents.metadata.at("encoder"));
  Rng rng(0);
  auto enc = make_encoder<Scalar>(opts, train, rng);
  checkpoint::load_params(path, enc->params());
  enc->refresh();
  return enc;
}

// ---------------------------------------------------------------------------
// BCE pretraining.

struct PretrainOptions {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  int batch_size = 1024;
  int max_epochs = 50;
  int patience = 5;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> checkpoint;  // written on every validation improvement
};

struct PretrainEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  double valid_auc = 0.0;
  double seconds = 0.0;
};

struct PretrainResult {
  double best_valid_auc = 0.0;
  int best_epoch = -1;
  std::vector<PretrainEpoch> epochs;
};

/// Histories for every row of `rows`, drawn from `train` positives (empty when the
/// encoder ignores history).
template <typename Scalar>
std::vector<data::History> histories_for(const Encoder<Scalar>& enc, const std::vector<data::Interaction>& rows,
                                         const data::HistoryIndex& index) {
  std::vector<data::History> out(rows.size());
  if (enc.history_length() == 0) return out;
  for (std::size_t k = 0; k < rows.size(); ++k)
    out[k] = index.query(rows[k].user, rows[k].timestamp, enc.history_length());
  return out;
}

template <typename Scalar>
std::vector<eval::Prediction> predict(const Encoder<Scalar>& enc, const std::vector<data::Interaction>& rows,
                                      const std::vector<data::History>& histories) {
  std::vector<eval::Prediction> out;
  out.reserve(rows.size());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const auto& x = rows[k];
    const double s = static_cast<double>(score<Scalar>(enc.encode_user(x.user, histories[k]), enc.encode_item(x.item)));
    out.push_back({x.user, x.item, s, x.label});
  }
  return out;
}

/// Accumulates mean-BCE gradients for one batch and returns the mean BCE.
template <typename Scalar>
double bce_batch_gradients(Encoder<Scalar>& enc, const std::vector<data::Interaction>& rows,
                           const std::vector<data::History>& histories, std::span<const std::size_t> batch) {
  ParamList<Scalar> params = enc.params();
  zero_grads(params);
  double loss = 0.0;
  const Scalar inv_b = Scalar(1) / static_cast<Scalar>(batch.size());
  for (const auto k : batch) {
    const auto& x = rows[k];
    const Vec<Scalar> u = enc.encode_user(x.user, histories[k]);
    const Vec<Scalar> i = enc.encode_item(x.item);
    const Scalar logit = u.dot(i);
    const Scalar p = sigmoid(logit);
    // log-sigmoid form keeps the loss finite for saturated logits
    const double z = static_cast<double>(logit);
    loss += x.label == 1 ? std::log1p(std::exp(-std::abs(z))) + std::max(-z, 0.0)
                         : std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0);
    const Scalar g = (p - static_cast<Scalar>(x.label)) * inv_b;
    enc.backward_user(x.user, histories[k], (g * i).eval());
    enc.backward_item(x.item, (g * u).eval());
  }
  enc.flush_backward();
  return loss / static_cast<double>(batch.size());
}

template <typename Scalar>
PretrainResult pretrain(Encoder<Scalar>& enc, const data::TemporalSplit& split, std::size_t num_users,
                        const PretrainOptions& opts) {
  if (split.train.empty()) throw InputDomainError("pretrain: empty train split");
  const FlushDenormals ftz;
  const data::HistoryIndex index(split.train, num_users);
  const auto train_hist = histories_for(enc, split.train, index);
  const auto valid_hist = histories_for(enc, split.valid, index);

  AdamOptions aopts;
  aopts.lr = opts.lr;
  aopts.weight_decay = opts.weight_decay;
  aopts.decoupled = false;
  Adam<Scalar> adam(aopts);
  Rng rng(opts.seed);

  auto params = enc.params();
  std::vector<Mat<Scalar>> best;
  auto snapshot = [&] {
    best.clear();
    for (auto* p : params) best.push_back(p->value);
  };
  auto restore = [&] {
    for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = best[k];
    enc.refresh();
  };
  snapshot();

  PretrainResult result;
  result.best_valid_auc = -1.0;
  std::vector<std::size_t> order(split.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  int since_best = 0;
  for (int epoch = 0; epoch < opts.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opts.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opts.batch_size));
      const double loss =
          bce_batch_gradients(enc, split.train, train_hist, std::span<const std::size_t>(order).subspan(start, end - start));
      if (!std::isfinite(loss)) {
        restore();
        throw TrainingError("collaborative pretraining diverged at epoch " + std::to_string(epoch));
      }
      adam.step(params);
      enc.refresh();
      loss_sum += loss;
      ++batches;
    }
    PretrainEpoch log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1));
    if (!split.valid.empty()) {
      const auto preds = predict(enc, split.valid, valid_hist);
      try {
        log.valid_auc = eval::auc(preds);
      } catch (const UndefinedMetricError&) {
        log.valid_auc = 0.5;
      }
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.epochs.push_back(log);
    if (log.valid_auc > result.best_valid_auc) {
      result.best_valid_auc = log.valid_auc;
      result.best_epoch = epoch;
      since_best = 0;
      snapshot();
      if (opts.checkpoint) save_encoder(*opts.checkpoint, enc, {{"best_epoch", epoch}, {"valid_auc", log.valid_auc}});
    } else if (++since_best >= opts.patience) {
      break;
    }
  }
  restore();
  return result;
}

}  // namespace collm::collab
