#include <doctest.h>

#include <cmath>

#include "scenediff/condition.hpp"

using namespace sde;
using namespace sde::cond;

namespace {

ObjectObservation make_obs(Rng& rng, const ConditionConfig& cfg) {
  ObjectObservation o;
  double l = rng.uniform(0, 100), t = rng.uniform(0, 100);
  o.box = {l, t, l + rng.uniform(5, 27), t + rng.uniform(5, 27)};
  o.patch = ad::Tensorf({1, cfg.patch_channels, cfg.patch_size, cfg.patch_size});
  for (int64_t i = 0; i < o.patch.numel(); ++i) o.patch[i] = float(rng.uniform());
  o.patch = ad::Tensorf::from(
      {cfg.patch_channels, cfg.patch_size, cfg.patch_size}, o.patch.vec());
  o.class_id = int(rng.uniform_index(uint64_t(cfg.class_count)));
  return o;
}

}  // namespace

TEST_CASE("box embedding width and zero-box values") {
  Box2D zero{0, 0, 1e-9, 1e-9};
  std::vector<float> e = embed_box(zero, 128, 128, 10);
  CHECK(e.size() == 84);
  for (int c = 0; c < 4; ++c) {
    CHECK(std::abs(e[size_t(c * 21)]) < 1e-9);  // raw
    for (int k = 0; k < 10; ++k) {
      CHECK(std::abs(e[size_t(c * 21 + 1 + 2 * k)]) < 1e-6);      // sin ~ 0
      CHECK(e[size_t(c * 21 + 2 + 2 * k)] == doctest::Approx(1.0));  // cos ~ 1
    }
  }
  Box2D b{10, 20, 40, 60};
  std::vector<float> a1 = embed_box(b, 128, 128, 10);
  std::vector<float> a2 = embed_box(b, 128, 128, 10);
  for (size_t i = 0; i < a1.size(); ++i) CHECK(a1[i] == a2[i]);
  CHECK_THROWS_AS(embed_box(Box2D{5, 5, 4, 9}, 128, 128, 10), Error);
}

TEST_CASE("box embedding is Lipschitz with the sinusoid bound") {
  Rng rng(5);
  const double bound = std::pow(2.0, 9) * 3.14159265358979323846 * 2.0;
  for (int trial = 0; trial < 200; ++trial) {
    double l = rng.uniform(0, 100), t = rng.uniform(0, 100);
    Box2D b{l, t, l + rng.uniform(4, 20), t + rng.uniform(4, 20)};
    Box2D b2 = b;
    double h = 1e-5;  // normalized-units perturbation
    int which = int(rng.uniform_index(4));
    double dpix = h * 128.0;
    if (which == 0) b2.left += dpix;
    if (which == 1) b2.top += dpix;
    if (which == 2) b2.right += dpix;
    if (which == 3) b2.bottom += dpix;
    std::vector<float> e1 = embed_box(b, 128, 128, 10);
    std::vector<float> e2 = embed_box(b2, 128, 128, 10);
    for (size_t i = 0; i < e1.size(); ++i)
      CHECK(std::abs(double(e2[i]) - double(e1[i])) / h <= bound);
  }
}

TEST_CASE("class embedding is one-hot") {
  std::vector<float> e = embed_class(0, 8);
  CHECK(e.size() == 8);
  CHECK(e[0] == 1.0f);
  double sum = 0;
  for (float v : e) sum += v;
  CHECK(sum == doctest::Approx(1.0));
  CHECK_THROWS_AS(embed_class(8, 8), Error);
  CHECK_THROWS_AS(embed_class(-1, 8), Error);
}

TEST_CASE("feature embedding shape, zero-patch stability and gradient") {
  ConditionConfig cfg;
  Rng rng(11);
  nn::ParamStore<float> ps;
  register_condition_params(ps, cfg, rng);
  nn::ParamStore<double> pd = ps.cast<double>();

  {
    ad::Taped t;
    nn::NetCtx<double> ctx{t, pd, false, {}};
    ad::Var zero = t.constant(ad::Tensord({2, 2, 8, 8}));
    ad::Var out = embed_features(ctx, cfg, zero);
    CHECK(t.value(out).extent(0) == 2);
    CHECK(t.value(out).extent(1) == cfg.feat_width);
    CHECK(t.value(out).all_finite());
    ad::Var bad = t.constant(ad::Tensord({2, 2, 7, 8}));
    CHECK_THROWS_AS(embed_features(ctx, cfg, bad), Error);
  }

  // Central differences through conv/group-norm/head, perturbing the patch.
  ad::Tensord x({1, 2, 8, 8});
  for (int64_t i = 0; i < x.numel(); ++i) x[i] = rng.normal();
  double err = ad::grad_check(
      [&](ad::Taped& t, ad::Var v) {
        nn::NetCtx<double> ctx{t, pd, true, {}};
        ad::Var out = embed_features(ctx, cfg, v);
        ad::Tensord w({1, int64_t(cfg.feat_width)});
        Rng wr(3);
        for (int64_t i = 0; i < w.numel(); ++i) w[i] = wr.normal();
        return sum_all(t, mul(t, out, t.constant(w)));
      },
      x);
  CHECK(err < 1e-4);
}

TEST_CASE("assemble_condition widths, drop behavior and permutation") {
  ConditionConfig cfg;
  CHECK(cfg.width() == 84 + 64 + 8);
  Rng rng(23);
  nn::ParamStore<float> ps;
  register_condition_params(ps, cfg, rng);

  std::vector<ObjectObservation> obs;
  for (int i = 0; i < 4; ++i) obs.push_back(make_obs(rng, cfg));

  ad::Tapef t;
  nn::NetCtx<float> ctx{t, ps, false, {}};
  ad::Var y = assemble_condition(ctx, cfg, obs, 128, 128, false);
  CHECK(t.value(y).extent(0) == 4);
  CHECK(t.value(y).extent(1) == cfg.width());

  // Permuting observations permutes rows identically.
  std::vector<ObjectObservation> perm = {obs[2], obs[0], obs[3], obs[1]};
  ad::Var yp = assemble_condition(ctx, cfg, perm, 128, 128, false);
  int from[4] = {2, 0, 3, 1};
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < cfg.width(); ++c)
      CHECK(t.value(yp)[r * cfg.width() + c] == t.value(y)[from[r] * cfg.width() + c]);

  // Dropped: every row is the learned null token (non-zero at init).
  ad::Var null_rows = assemble_condition(ctx, cfg, obs, 128, 128, true);
  double norm = 0;
  for (int c = 0; c < cfg.width(); ++c) {
    float v = t.value(null_rows)[c];
    norm += double(v) * v;
    CHECK(t.value(null_rows)[1 * cfg.width() + c] == v);  // broadcast to every slot
  }
  CHECK(norm > 0);
}
