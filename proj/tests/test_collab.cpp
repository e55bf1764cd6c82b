#include "oracles.hpp"

#include <doctest.h>

#include "collm/collab.hpp"
#include "collm/harness.hpp"

#include <filesystem>

using namespace collm;
using namespace collm::collab;

namespace {

data::Interaction ix(UserId u, ItemId i, int label, Timestamp ts = 0) {
  data::Interaction x;
  x.user = u;
  x.item = i;
  x.label = label;
  x.timestamp = ts;
  return x;
}

EncoderOptions options(Kind k, int users, int items, int dim) {
  EncoderOptions o;
  o.kind = k;
  o.num_users = users;
  o.num_items = items;
  o.dim = dim;
  o.init_std = 0.5;
  o.sasrec_max_len = 4;
  return o;
}

data::History history_of(UserId u, std::vector<ItemId> items) {
  data::History h;
  h.user = u;
  for (std::size_t k = 0; k < items.size(); ++k) h.items.push_back({items[k], static_cast<Timestamp>(k)});
  return h;
}

std::vector<data::Interaction> random_rows(Rng& rng, int n, int users, int items) {
  std::uniform_int_distribution<int> u(0, users - 1), i(0, items - 1), l(0, 1);
  std::vector<data::Interaction> out;
  for (int k = 0; k < n; ++k) out.push_back(ix(u(rng), i(rng), l(rng), k));
  return out;
}

// Compares analytic mean-BCE gradients against central differences on a sample of
// entries of every parameter.
void check_encoder_gradients(Encoder<double>& enc, const std::vector<data::Interaction>& rows,
                             const std::vector<data::History>& hist) {
  std::vector<std::size_t> batch(rows.size());
  std::iota(batch.begin(), batch.end(), std::size_t{0});
  auto params = enc.params();
  bce_batch_gradients(enc, rows, hist, batch);
  std::vector<Mat<double>> analytic;
  for (auto* p : params) analytic.push_back(p->grad);
  auto loss = [&] {
    enc.refresh();
    return bce_batch_gradients(enc, rows, hist, batch);
  };
  Rng pick(99);
  double worst = 0.0;
  int checked = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& v = params[k]->value;
    std::uniform_int_distribution<Eigen::Index> idx(0, v.size() - 1);
    for (int s = 0; s < 12; ++s) {
      const Eigen::Index e = idx(pick);
      const double fd = oracle::central_diff(loss, v.data()[e], 1e-6);
      const double an = analytic[k].data()[e];
      if (std::max(std::abs(fd), std::abs(an)) < 1e-6) {
        CHECK(std::abs(fd - an) < 1e-8);
        continue;
      }
      const double err = oracle::rel_err(an, fd);
      worst = std::max(worst, err);
      ++checked;
      INFO(params[k]->name << "[" << e << "] analytic " << an << " numeric " << fd);
      CHECK(err < 1e-4);
    }
  }
  enc.refresh();
  CHECK(checked > 0);
  MESSAGE("worst relative error " << worst << " over " << checked << " entries");
}

}  // namespace

TEST_CASE("MF passes embedding rows through") {
  Rng rng(1);
  MatrixFactorization<double> mf(options(Kind::MF, 3, 4, 5), rng);
  for (int u = 0; u < 3; ++u) CHECK(mf.encode_user(u, {}) == mf.table().users.value.row(u).transpose());
  for (int i = 0; i < 4; ++i) CHECK(mf.encode_item(i) == mf.table().items.value.row(i).transpose());
  CHECK_THROWS_AS(mf.encode_user(3, {}), IdRangeError);
  CHECK_THROWS_AS(mf.encode_item(-1), IdRangeError);
}

TEST_CASE("LightGCN matches a dense propagation oracle") {
  Rng rng(2);
  const int users = 6, items = 7;
  const auto train = random_rows(rng, 30, users, items);
  for (int layers : {0, 1, 2}) {
    auto o = options(Kind::LightGCN, users, items, 4);
    o.lightgcn_layers = layers;
    auto enc = make_encoder<double>(o, train, rng);
    auto& g = dynamic_cast<LightGcn<double>&>(*enc);
    Mat<double> e0(users + items, 4);
    e0 << g.table().users.value, g.table().items.value;
    const Mat<double> want = oracle::dense_lightgcn(train, users, items, e0, layers);
    for (int u = 0; u < users; ++u) CHECK((enc->encode_user(u, {}) - want.row(u).transpose()).cwiseAbs().maxCoeff() <= 1e-6);
    for (int i = 0; i < items; ++i)
      CHECK((enc->encode_item(i) - want.row(users + i).transpose()).cwiseAbs().maxCoeff() <= 1e-6);
    if (layers == 0) CHECK(enc->encode_user(0, {}) == g.table().users.value.row(0).transpose());
  }
}

TEST_CASE("LightGCN propagation is linear in the base embeddings") {
  Rng rng(3);
  const auto train = random_rows(rng, 40, 5, 5);
  const auto graph = InteractionGraph<double>::from_train(train, 5, 5);
  Mat<double> a(10, 3), b(10, 3);
  fill_normal(a, rng, 1.0);
  fill_normal(b, rng, 1.0);
  const Mat<double> lhs = lightgcn_propagate(graph.norm_adj, (2.0 * a - 3.0 * b).eval(), 2);
  const Mat<double> rhs = 2.0 * lightgcn_propagate(graph.norm_adj, a, 2) - 3.0 * lightgcn_propagate(graph.norm_adj, b, 2);
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("SASRec is causal") {
  Rng rng(4);
  auto o = options(Kind::SASRec, 2, 10, 8);
  o.sasrec_max_len = 5;
  SasRec<double> enc(o, rng);
  const std::vector<ItemId> seq{3, 1, 4, 1, 5};
  const Mat<double> prefixes = enc.encode_prefixes(history_of(0, seq));
  for (std::size_t t = 1; t <= seq.size(); ++t) {
    const auto prefix = history_of(0, std::vector<ItemId>(seq.begin(), seq.begin() + static_cast<long>(t)));
    CHECK((enc.encode_user(0, prefix) - prefixes.row(static_cast<Eigen::Index>(t) - 1).transpose()).cwiseAbs().maxCoeff() < 1e-12);
  }
  // a different future leaves earlier positions untouched
  const Mat<double> other = enc.encode_prefixes(history_of(0, {3, 1, 4, 9, 9}));
  CHECK((other.topRows(3) - prefixes.topRows(3)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((other.row(4) - prefixes.row(4)).cwiseAbs().maxCoeff() > 1e-6);
  CHECK(enc.encode_user(1, {}).isZero());
}

TEST_CASE("score examples and symmetry") {
  Vec<double> z = Vec<double>::Zero(4);
  CHECK(score<double>(z, z) == doctest::Approx(0.5));
  Vec<double> a(2), b(2);
  a << 1, 2;
  b << 3, -1;
  CHECK(score<double>(a, b) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
  CHECK(score<double>(a, b) == score<double>(b, a));
  CHECK_THROWS_AS(score<double>(a, Vec<double>::Zero(3)), ShapeError);
}

TEST_CASE("encoder gradients match finite differences") {
  Rng rng(5);
  const int users = 5, items = 8;
  const auto rows = random_rows(rng, 16, users, items);
  SUBCASE("mf") {
    auto enc = make_encoder<double>(options(Kind::MF, users, items, 4), rows, rng);
    check_encoder_gradients(*enc, rows, std::vector<data::History>(rows.size()));
  }
  SUBCASE("lightgcn") {
    auto enc = make_encoder<double>(options(Kind::LightGCN, users, items, 4), rows, rng);
    check_encoder_gradients(*enc, rows, std::vector<data::History>(rows.size()));
  }
  SUBCASE("sasrec") {
    auto enc = make_encoder<double>(options(Kind::SASRec, users, items, 4), rows, rng);
    std::vector<data::History> hist;
    std::uniform_int_distribution<int> len(0, 4), it(0, items - 1);
    for (const auto& x : rows) {
      std::vector<ItemId> h;
      for (int k = len(rng); k > 0; --k) h.push_back(it(rng));
      hist.push_back(history_of(x.user, h));
    }
    check_encoder_gradients(*enc, rows, hist);
  }
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  Rng rng(6);
  const auto rows = random_rows(rng, 50, 4, 4);
  data::TemporalSplit split;
  split.train = rows;
  auto enc = make_encoder<Real>(options(Kind::LightGCN, 4, 4, 3), rows, rng);
  std::vector<std::uint64_t> before;
  for (auto* p : enc->params()) before.push_back(checksum(p->value));
  PretrainOptions po;
  po.lr = 0.0;
  po.max_epochs = 2;
  pretrain(*enc, split, 4, po);
  std::size_t k = 0;
  for (auto* p : enc->params()) CHECK(checksum(p->value) == before[k++]);
}

TEST_CASE("MF pretraining recovers a planted low-rank signal and checkpoints round-trip") {
  harness::SyntheticSpec spec;
  spec.users = 120;
  spec.items = 120;
  spec.interactions = 8000;
  spec.seed = 3;
  const auto syn = harness::generate_synthetic(spec);
  const auto split = data::temporal_split(syn.interactions, 800000, 900000);
  Rng rng(1);
  auto o = options(Kind::MF, spec.users, spec.items, 16);
  o.init_std = 0.1;
  auto enc = make_encoder<Real>(o, split.train, rng);
  PretrainOptions po;
  po.lr = 1e-2;
  po.batch_size = 256;
  po.max_epochs = 30;
  const auto res = pretrain(*enc, split, spec.users, po);
  CHECK(res.best_valid_auc > 0.75);
  CHECK(res.epochs.front().train_loss > res.epochs.back().train_loss);

  const auto path = std::filesystem::temp_directory_path() / "collm_test_mf.ckpt";
  save_encoder(path, *enc);
  auto back = load_encoder<Real>(path, split.train);
  for (int u = 0; u < spec.users; u += 17) CHECK(back->encode_user(u, {}) == enc->encode_user(u, {}));
  std::filesystem::remove(path);
}
