#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <random>

#include "adshard/adjoint.hpp"

using namespace adshard;

namespace {

const SsmKind kKinds[] = {SsmKind::unstructured, SsmKind::diagonal, SsmKind::scalar};

std::vector<Vec> random_tokens(int T, int P, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::vector<Vec> out;
  for (int t = 0; t < T; ++t) {
    Vec x(P);
    for (int j = 0; j < P; ++j) x(j) = nd(rng);
    out.push_back(x);
  }
  return out;
}

std::vector<int> targets(int T, int V) {
  std::vector<int> out;
  for (int t = 0; t < T; ++t) out.push_back((3 * t + 1) % V);
  return out;
}

struct Setup {
  StackParams params;
  std::vector<Vec> tokens;
  LossSpec loss;
  ForwardTrace trace;
};

Setup setup(ModelDims d, SsmVariant v, unsigned seed) {
  Setup s{StackParams::random(d, v, seed), random_tokens(d.T, d.P, seed + 100),
          LossSpec::cross_entropy(targets(d.T, d.V)), {}};
  s.trace = stack_forward(s.params, s.tokens, s.loss);
  return s;
}

double max_rel(const GradVector& a, const GradVector& b) {
  auto fa = a.flatten(), fb = b.flatten();
  double m = 0;
  for (std::size_t i = 0; i < fa.size(); ++i) {
    const double s = std::max(std::abs(fa[i]), std::abs(fb[i]));
    if (s > 0) m = std::max(m, std::abs(fa[i] - fb[i]) / s);
  }
  return m;
}

}  // namespace

TEST_CASE("adjoint states: hand example") {
  // N=P=1 diagonal: lambda^{3,3} = 2, lambda^{3,2} = 2*0.5 = 1, lambda^{3,1} = 2*0.5*0.25 = 0.25
  Mat c(1, 1);
  c << 2.0;
  std::vector<Vec> a{Vec::Constant(1, 0.25), Vec::Constant(1, 0.5)};  // A^2, A^3
  for (int tbar : {3, 4, 10}) {
    AdjointBatch b = compute_adjoint_states(SsmKind::diagonal, 3, 1, tbar, c, a, 2);
    CHECK(b.tau_min == 1);
    CHECK(b.lambda_at(3)(0, 0) == 2.0);
    CHECK(b.lambda_at(2)(0, 0) == 1.0);
    CHECK(b.lambda_at(1)(0, 0) == 0.25);
  }
}

TEST_CASE("adjoint states: empty product and identity transitions") {
  const int N = 3, P = 2;
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  Mat c(P, N);
  for (int i = 0; i < c.size(); ++i) c.data()[i] = nd(rng);
  for (SsmKind kind : kKinds) {
    const int a_out = head_output_size(Network::A, kind, N, P);
    Vec ident = Vec::Ones(a_out);
    if (kind == SsmKind::unstructured) {
      ident.setZero();
      for (int i = 0; i < N; ++i) ident(i * N + i) = 1.0;
    }
    std::vector<Vec> window(5, ident);  // A^2..A^6
    AdjointBatch b = compute_adjoint_states(kind, 6, 1, 6, c, window, 2);
    CHECK(b.lambda_at(6) == c);
    for (int tau = 1; tau <= 6; ++tau) CHECK(b.lambda_at(tau) == c);
    AdjointBatch one = compute_adjoint_states(kind, 6, 1, 1, c, {}, 6);
    CHECK(one.window() == 1);
    CHECK(one.lambda_at(6) == c);
  }
}

TEST_CASE("adjoint recurrence holds for every batch") {
  ModelDims d{2, 3, 2, 4, 7, 1};
  for (SsmKind kind : kKinds) {
    Setup s = setup(d, {kind, Activation::sigmoid}, 11);
    for (int k = 1; k <= d.K; ++k) {
      TraceLayer layer(s.trace, k);
      for (int t = 1; t <= d.T; ++t)
        for (int tbar : {1, 3, d.T}) {
          AdjointBatch b = compute_adjoint_states(kind, t, k, tbar, layer);
          CHECK(b.lambda_at(t) == s.trace.C(k, t));
          for (int tau = b.tau_min + 1; tau <= t; ++tau) {
            const Mat expect = right_multiply_transition(kind, b.lambda_at(tau), s.trace.A(k, tau));
            CHECK((b.lambda_at(tau - 1) - expect).cwiseAbs().maxCoeff() <=
                  1e-13 * (1.0 + expect.cwiseAbs().maxCoeff()));
          }
        }
    }
  }
}

TEST_CASE("adjoint states: errors") {
  Mat c = Mat::Ones(1, 1);
  std::vector<Vec> short_window{Vec::Constant(1, 0.5)};  // only A^3
  CHECK_THROWS_AS(compute_adjoint_states(SsmKind::diagonal, 3, 1, 3, c, short_window, 3), IndexError);
  CHECK_THROWS_AS(compute_adjoint_states(SsmKind::diagonal, 3, 1, 0, c, short_window, 3), ConfigError);
  std::vector<Vec> huge{Vec::Constant(1, 1e200), Vec::Constant(1, 1e200)};
  try {
    compute_adjoint_states(SsmKind::diagonal, 3, 2, 3, c, huge, 2);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.where().t == 3);
    CHECK(e.where().k == 2);
    CHECK(e.where().tau == 1);
  }
  // underflow to zero is not an error
  std::vector<Vec> tiny{Vec::Constant(1, 1e-200), Vec::Constant(1, 1e-200)};
  AdjointBatch b = compute_adjoint_states(SsmKind::diagonal, 3, 1, 3, c, tiny, 2);
  CHECK(b.lambda_at(1)(0, 0) == 0.0);
}

TEST_CASE("vjp: closed form cases") {
  HeadParams h = HeadParams::zeros(1, 2);
  h.weight << 0.7, -0.2;
  Vec in(2);
  in << 1.0, 2.0;
  HeadParams z = vjp(h, Activation::identity, in, Vec::Zero(1));
  CHECK(z.weight.isZero(0));
  CHECK(z.bias.isZero(0));
  HeadParams g = vjp(h, Activation::identity, in, Vec::Constant(1, 3.0));
  CHECK(g.weight(0, 0) == 3.0);
  CHECK(g.weight(0, 1) == 6.0);
  CHECK(g.bias(0) == 3.0);
  CHECK_THROWS_AS(vjp(h, Activation::identity, in, Vec::Zero(2)), ShapeError);
  CHECK_THROWS_AS(vjp(h, Activation::identity, Vec::Zero(3), Vec::Zero(1)), ShapeError);
}

TEST_CASE("vjp: sigmoid head against central differences") {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 5; ++trial) {
    const int out = 4, in = 3;
    HeadParams h = HeadParams::zeros(out, in);
    for (int i = 0; i < h.weight.size(); ++i) h.weight.data()[i] = nd(rng);
    for (int i = 0; i < out; ++i) h.bias(i) = nd(rng);
    Vec x(in), m(out);
    for (int i = 0; i < in; ++i) x(i) = nd(rng);
    for (int i = 0; i < out; ++i) m(i) = nd(rng);
    for (Activation act : {Activation::sigmoid, Activation::tanh}) {
      HeadParams g = vjp(h, act, x, m);
      auto f = [&](const HeadParams& p) {
        double s = 0;
        for (int r = 0; r < out; ++r) {
          double u = p.bias(r);
          for (int c = 0; c < in; ++c) u += p.weight(r, c) * x(c);
          s += m(r) * (act == Activation::sigmoid ? 1 / (1 + std::exp(-u)) : std::tanh(u));
        }
        return s;
      };
      const double eps = 1e-6;
      for (int r = 0; r < out; ++r) {
        for (int c = 0; c < in; ++c) {
          HeadParams p = h, q = h;
          p.weight(r, c) += eps;
          q.weight(r, c) -= eps;
          CHECK(g.weight(r, c) == doctest::Approx((f(p) - f(q)) / (2 * eps)).epsilon(1e-7).scale(1));
        }
        HeadParams p = h, q = h;
        p.bias(r) += eps;
        q.bias(r) -= eps;
        CHECK(g.bias(r) == doctest::Approx((f(p) - f(q)) / (2 * eps)).epsilon(1e-7).scale(1));
      }
    }
  }
}

TEST_CASE("build_cotangents: task counts and shapes") {
  ModelDims d{1, 3, 2, 4, 6, 1};
  for (SsmKind kind : kKinds) {
    Setup s = setup(d, {kind, Activation::identity}, 3);
    TraceLayer layer(s.trace, 1);
    auto tasks1 = build_cotangents(kind, layer, compute_adjoint_states(kind, 1, 1, 4, layer));
    CHECK(tasks1.size() == 3);
    auto tasks5 = build_cotangents(kind, layer, compute_adjoint_states(kind, 5, 1, 2, layer));
    REQUIRE(tasks5.size() == 5);
    CHECK(tasks5[0].kind == Network::C);
    CHECK(tasks5[0].i == 5);
    CHECK(tasks5[1].kind == Network::A);
    CHECK(tasks5[1].i == 4);
    CHECK(tasks5[2].kind == Network::B);
    CHECK(tasks5[3].i == 5);
    for (const auto& task : tasks5) {
      CHECK(task.i <= task.t);
      CHECK(task.cotangent.size() == head_output_size(task.kind, kind, d.N, d.P));
    }
  }
}

TEST_CASE("build_cotangents: zero loss cotangent gives zero tasks") {
  ModelDims d{1, 2, 2, 3, 4, 1};
  Setup s = setup(d, {SsmKind::diagonal, Activation::identity}, 5);
  for (auto& c : s.trace.cotangent_) c.setZero();
  TraceLayer layer(s.trace, 1);
  for (const auto& task : build_cotangents(SsmKind::diagonal, layer,
                                           compute_adjoint_states(SsmKind::diagonal, 4, 1, 4, layer)))
    CHECK(task.cotangent.isZero(0));
}

TEST_CASE("adjoint_gradient: saturation, workers, fast mode") {
  ModelDims d{3, 3, 2, 4, 9, 1};
  for (SsmKind kind : kKinds) {
    Setup s = setup(d, {kind, Activation::sigmoid}, 13);
    const GradVector exact = adjoint_gradient(s.params, s.trace);
    CHECK(adjoint_gradient(s.params, s.trace, {d.T, {}, nullptr}) == exact);
    CHECK(adjoint_gradient(s.params, s.trace, {d.T + 3, {}, nullptr}) == exact);
    CHECK(adjoint_gradient(s.params, s.trace, {std::nullopt, {true, 4}, nullptr}) == exact);
    CHECK(adjoint_gradient(s.params, s.trace, {std::nullopt, {true, 32}, nullptr}) == exact);
    const GradVector fast = adjoint_gradient(s.params, s.trace, {std::nullopt, {false, 4}, nullptr});
    CHECK(max_rel(fast, exact) < 1e-10);
    CHECK_FALSE(adjoint_gradient(s.params, s.trace, {2, {}, nullptr}) == exact);
  }
}

TEST_CASE("order insensitivity of the task sum") {
  ModelDims d{1, 3, 2, 4, 6, 1};
  Setup s = setup(d, {SsmKind::unstructured, Activation::tanh}, 19);
  TraceLayer layer(s.trace, 1);
  const LayerParams& p = s.params.layers[0];
  std::vector<std::pair<Network, HeadParams>> pieces;
  for (int t = 1; t <= d.T; ++t) {
    auto batch = compute_adjoint_states(SsmKind::unstructured, t, 1, d.T, layer);
    for (const auto& task : build_cotangents(SsmKind::unstructured, layer, batch))
      pieces.emplace_back(task.kind, vjp(p.head(task.kind), Activation::tanh,
                                         layer.input(task.kind == Network::C ? t : task.i),
                                         task.cotangent));
  }
  std::mt19937_64 rng(1);
  std::shuffle(pieces.begin(), pieces.end(), rng);
  GradVector shuffled = GradVector::zeros_like(s.params);
  for (auto& [net, g] : pieces) shuffled.layers[0].head(net) += g;
  GradVector ordered = adjoint_gradient(s.params, s.trace);
  shuffled.omega = ordered.omega;
  CHECK(max_rel(shuffled, ordered) < 1e-10);
}

TEST_CASE("task counters") {
  ModelDims d{2, 2, 2, 3, 10, 1};
  Setup s = setup(d, {SsmKind::diagonal, Activation::identity}, 23);
  std::uint64_t prev = 0;
  for (int tbar = 1; tbar <= d.T + 2; ++tbar) {
    VjpCounter counter(d.K);
    adjoint_gradient(s.params, s.trace, {tbar, {true, 3}, &counter});
    std::uint64_t sum = 0;
    for (int t = 1; t <= d.T; ++t) sum += std::min(t, tbar);
    for (int k = 1; k <= d.K; ++k) {
      CHECK(counter.count(Network::A, k) == sum);
      CHECK(counter.count(Network::B, k) == sum);
      CHECK(counter.count(Network::C, k) == static_cast<std::uint64_t>(d.T));
    }
    if (tbar == 1) CHECK(counter.total() == static_cast<std::uint64_t>(3 * d.T * d.K));
    // monotone in tbar, flat once tbar >= T
    if (tbar > 1) CHECK(counter.total() >= prev);
    if (tbar > d.T) CHECK(counter.total() == prev);
    if (tbar > 1 && tbar <= d.T) CHECK(counter.total() > prev);
    prev = counter.total();
  }
}

TEST_CASE("adjoint_gradient: non-finite product carries location") {
  ModelDims d{2, 1, 1, 2, 4, 1};
  Setup s = setup(d, {SsmKind::diagonal, Activation::identity}, 2);
  s.trace.A_[1][2](0) = 1e300;  // A_2^3
  s.trace.A_[1][3](0) = 1e300;  // A_2^4
  try {
    adjoint_gradient(s.params, s.trace);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(e.where().k == 2);
    CHECK(e.where().t == 4);
  }
}

TEST_CASE("outer product identity") {
  std::mt19937_64 rng(31);
  std::normal_distribution<double> nd;
  const int P = 2, N = 3;
  HeadParams c = HeadParams::zeros(P * N, P);
  for (int i = 0; i < c.weight.size(); ++i) c.weight.data()[i] = nd(rng);
  for (int i = 0; i < c.bias.size(); ++i) c.bias(i) = nd(rng);
  Vec dl(P), h(N), in(P);
  for (int i = 0; i < P; ++i) dl(i) = nd(rng), in(i) = nd(rng);
  for (int i = 0; i < N; ++i) h(i) = nd(rng);
  for (Activation act : {Activation::identity, Activation::sigmoid, Activation::tanh}) {
    CHECK(outer_product_identity_check(dl, h, c, in, act).passed);
    IdentityCheck zero = outer_product_identity_check(Vec::Zero(P), h, c, in, act);
    CHECK(zero.passed);
    CHECK(zero.max_deviation == 0.0);
    CHECK(outer_product_identity_check(dl, Vec::Zero(N), c, in, act).passed);
  }
  HeadParams g = vjp(c, Activation::identity, in, Vec::Zero(P * N));
  CHECK(g.weight.isZero(0));
}
