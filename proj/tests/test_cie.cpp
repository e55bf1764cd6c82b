#include "oracles.hpp"

#include <doctest.h>

#include "collm/cie.hpp"

using namespace collm;
using namespace collm::cie;

namespace {

std::unique_ptr<collab::Encoder<double>> mf(int users, int items, int dim, Rng& rng) {
  collab::EncoderOptions o;
  o.num_users = users;
  o.num_items = items;
  o.dim = dim;
  o.init_std = 1.0;
  return collab::make_encoder<double>(o, {}, rng);
}

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x))); }

}  // namespace

TEST_CASE("zero mapping weights give the zero vector") {
  Rng rng(1);
  MappingMlp<double> m("t.", MlpOptions{4, 6, 10, Activation::Gelu}, rng);
  for (auto* p : m.params()) p->value.setZero();
  Vec<double> x(4);
  x << 1, -2, 3, 0.5;
  CHECK(m.forward(x).isZero());
  CHECK(m.forward(x).size() == 6);
  CHECK_THROWS_AS(m.forward(Vec<double>::Zero(3)), ShapeError);
}

TEST_CASE("a ReLU MLP can be wired as the identity") {
  Rng rng(2);
  MappingMlp<double> m("t.", MlpOptions{3, 3, 2, Activation::Relu}, rng);
  // relu(x) - relu(-x) = x
  m.w1().value << Mat<double>::Identity(3, 3), -Mat<double>::Identity(3, 3);
  m.w2().value << Mat<double>::Identity(3, 3), -Mat<double>::Identity(3, 3);
  m.b1().value.setZero();
  m.b2().value.setZero();
  Vec<double> x(3);
  x << 0.3, -1.7, 2.0;
  CHECK((m.forward(x) - x).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("mapping matches a scalar-loop oracle") {
  Rng rng(3);
  MappingMlp<double> m("t.", MlpOptions{4, 6, 10, Activation::Gelu}, rng);
  fill_normal(m.b1().value, rng, 0.5);
  fill_normal(m.b2().value, rng, 0.5);
  Vec<double> x(4);
  fill_normal(x, rng, 1.0);
  const auto& w1 = m.w1().value;
  const auto& w2 = m.w2().value;
  std::vector<double> h(40);
  for (int j = 0; j < 40; ++j) {
    double s = m.b1().value(0, j);
    for (int i = 0; i < 4; ++i) s += x(i) * w1(i, j);
    h[j] = gelu(s);
  }
  const auto y = m.forward(x);
  for (int k = 0; k < 6; ++k) {
    double s = m.b2().value(0, k);
    for (int j = 0; j < 40; ++j) s += h[j] * w2(j, k);
    CHECK(y(k) == doctest::Approx(s).epsilon(1e-12));
  }
  CHECK(m.hidden_dim() == 40);
  CHECK(w1.rows() == 4);
  CHECK(w2.cols() == 6);
}

TEST_CASE("shared and separate mappings") {
  Rng rng(4);
  CieOptions shared;
  CieModule<double> a(mf(3, 3, 4, rng), 6, shared, rng);
  CHECK(&a.user_mlp() == &a.item_mlp());
  CHECK(a.params().size() == 4 + 2);
  // a user and an item with the same collaborative vector map to the same token
  auto& table = dynamic_cast<collab::MatrixFactorization<double>&>(a.encoder()).table();
  table.items.value.row(1) = table.users.value.row(2);
  CHECK((a.map_user(2, {}) - a.map_item(1)).isZero());

  CieOptions separate;
  separate.shared_mlp = false;
  CieModule<double> b(mf(3, 3, 4, rng), 6, separate, rng);
  CHECK(&b.user_mlp() != &b.item_mlp());
  CHECK(b.params().size() == 8 + 2);
  CHECK(b.params()[0]->name == "cie.user_mlp.w1");
  CHECK(b.params()[4]->name == "cie.item_mlp.w1");
  CHECK(b.output_dim() == 6);
}

TEST_CASE("mapping and encoder gradients match finite differences") {
  Rng rng(5);
  for (bool shared : {true, false}) {
    CieOptions opts;
    opts.shared_mlp = shared;
    opts.hidden_mult = 3;
    opts.omega = Omega::PhiPsi;
    CieModule<double> cie(mf(3, 4, 4, rng), 6, opts, rng);
    for (auto* p : cie.params()) fill_normal(p->value, rng, 0.6);
    Vec<double> cu(6), ci(6);
    fill_normal(cu, rng, 1.0);
    fill_normal(ci, rng, 1.0);
    // a smooth scalar loss of both slot vectors
    auto loss = [&] {
      const auto u = cie.map_user(1, {});
      const auto i = cie.map_item(2);
      return cu.dot(u) + 0.5 * u.squaredNorm() + ci.dot(i) + std::sin(i.sum());
    };
    auto params = cie.params();
    zero_grads(params);
    const auto u = cie.map_user(1, {});
    const auto i = cie.map_item(2);
    cie.backward_user(1, {}, (cu + u).eval());
    cie.backward_item(2, (ci + Vec<double>::Constant(6, std::cos(i.sum()))).eval());
    cie.flush_backward();
    int checked = 0;
    for (auto* p : params)
      for (Eigen::Index e = 0; e < p->value.size(); ++e) {
        const double an = p->grad.data()[e];
        const double fd = oracle::central_diff(loss, p->value.data()[e], 1e-6);
        if (std::max(std::abs(an), std::abs(fd)) < 1e-6) {
          CHECK(std::abs(an - fd) < 1e-8);
          continue;
        }
        INFO(p->name << "[" << e << "]");
        CHECK(oracle::rel_err(an, fd) < 1e-4);
        ++checked;
      }
    CHECK(checked > 50);
  }
}

TEST_CASE("with omega = phi the encoder receives no gradient") {
  Rng rng(6);
  CieModule<double> cie(mf(3, 3, 4, rng), 6, CieOptions{}, rng);
  auto params = cie.params();
  zero_grads(params);
  cie.backward_user(0, {}, Vec<double>::Ones(6));
  cie.backward_item(1, Vec<double>::Ones(6));
  cie.flush_backward();
  for (auto* p : cie.encoder().params()) CHECK(p->grad.isZero());
  CHECK_FALSE(cie.user_mlp().w1().grad.isZero());

  cie.set_omega(Omega::PhiPsi);
  cie.backward_user(0, {}, Vec<double>::Ones(6));
  double total = 0.0;
  for (auto* p : cie.encoder().params()) total += p->grad.cwiseAbs().sum();
  CHECK(total > 0.0);

  cie.lock();
  CHECK_THROWS_AS(cie.set_omega(Omega::Phi), ContractError);
  cie.unlock();
  cie.set_omega(Omega::Phi);
  CHECK(cie.omega() == Omega::Phi);
  CHECK(omega_from_string("phi+psi") == Omega::PhiPsi);
  CHECK_THROWS_AS(omega_from_string("psi"), ConfigError);
}

TEST_CASE("clones are independent") {
  Rng rng(7);
  CieModule<double> cie(mf(2, 2, 4, rng), 6, CieOptions{}, rng);
  auto copy = cie.clone();
  const auto before = copy->user_embedding(0, {});
  cie.encoder().params()[0]->value.setZero();
  CHECK(copy->user_embedding(0, {}) == before);
}

TEST_CASE("UI token table") {
  Rng rng(8);
  UiTokenTable<double> t(5, 7, 6, rng);
  CHECK(t.parameter_count() == (5 + 7) * 6);
  CHECK(t.output_dim() == 6);
  CHECK(t.params()[0]->group == ParamGroup::UiTokens);
  CHECK_THROWS_AS(t.user_embedding(5, {}), IdRangeError);
  CHECK_THROWS_AS(t.item_embedding(-1), IdRangeError);
  zero_grads(t.params());
  t.backward_item(3, Vec<double>::Ones(6));
  CHECK(t.params()[1]->grad.row(3).sum() == doctest::Approx(6.0));
  CHECK(t.params()[1]->grad.sum() == doctest::Approx(6.0));
}
