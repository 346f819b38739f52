#include <algorithm>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "pcfold/decoder.hpp"
#include "pcfold/fsnet.hpp"
#include "pcfold/ifnet.hpp"
#include "pcfold/sparse_encoding.hpp"

using namespace pcfold;
using T = ad::Tensor<double>;
using G = ad::Graph<double>;

namespace {

bool bitwise_equal(const T& a, const T& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

void fill(T t, double v) {
  for (double& x : t.mutable_data()) x = v;
}

void set_identity(T w) {
  fill(w, 0.0);
  for (std::size_t i = 0; i < std::min(w.dim(0), w.dim(1)); ++i) w.mutable_data()[i * w.dim(1) + i] = 1.0;
}

T permute_rows(const T& x, const std::vector<std::size_t>& perm) {
  G g(false);
  return ad::gather_rows(g, x, perm);
}

}  // namespace

// ----------------------------------------------------------------- fsnet

TEST_CASE("fsnet aggregation is permutation invariant") {
  Rng rng(1);
  ParamStore<double> store;
  const auto params = fsnet::FSNetParams<double>::create({8, 3, 4, 5}, store, "fsnet", rng);
  const T f = oracle::random_tensor({20, 8}, rng);
  G g(false);
  const auto base = fsnet::aggregate(g, f, params);
  CHECK(base.sfm.shape() == ad::Shape{3, 4, 5});
  CHECK(base.attention.shape() == ad::Shape{3, 4, 20});
  for (int t = 0; t < 10; ++t) {
    std::vector<std::size_t> perm(20);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(std::span<std::size_t>(perm));
    CHECK(bitwise_equal(fsnet::aggregate(g, permute_rows(f, perm), params).sfm, base.sfm));
  }
  CHECK_THROWS(fsnet::aggregate(g, oracle::random_tensor({5, 7}, rng), params));
}

TEST_CASE("fsnet single point and identical rows") {
  Rng rng(2);
  ParamStore<double> store;
  const auto params = fsnet::FSNetParams<double>::create({6, 2, 3, 4}, store, "fsnet", rng);
  const T one = oracle::random_tensor({1, 6}, rng);
  G g(false);
  const auto single = fsnet::aggregate(g, one, params);
  for (double w : single.attention.data()) CHECK(w == 1.0);
  for (std::size_t h = 0; h < 2; ++h) {
    const T value = ad::matmul(g, one, params.value_proj[h]);
    for (std::size_t q = 0; q < 3; ++q)
      for (std::size_t c = 0; c < 4; ++c) CHECK(single.sfm.at({h, q, c}) == doctest::Approx(value.at({0, c})).epsilon(1e-12));
  }
  const std::vector<std::size_t> rep(7, 0);
  const auto repeated = fsnet::aggregate(g, permute_rows(one, rep), params);
  for (std::size_t i = 0; i < repeated.sfm.size(); ++i)
    CHECK(std::abs(repeated.sfm.data()[i] - single.sfm.data()[i]) <= 1e-12 * std::max(1.0, std::abs(single.sfm.data()[i])));
}

TEST_CASE("fsnet rows stay inside the value envelope") {
  Rng rng(3);
  ParamStore<double> store;
  const auto params = fsnet::FSNetParams<double>::create({5, 2, 4, 3}, store, "fsnet", rng);
  const T f = oracle::random_tensor({15, 5}, rng);
  G g(false);
  const auto agg = fsnet::aggregate(g, f, params);
  for (std::size_t h = 0; h < 2; ++h) {
    const T v = ad::matmul(g, f, params.value_proj[h]);
    for (std::size_t c = 0; c < 3; ++c) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t n = 0; n < 15; ++n) {
        lo = std::min(lo, v.at({n, c}));
        hi = std::max(hi, v.at({n, c}));
      }
      for (std::size_t q = 0; q < 4; ++q) {
        CHECK(agg.sfm.at({h, q, c}) >= lo - 1e-12);
        CHECK(agg.sfm.at({h, q, c}) <= hi + 1e-12);
      }
    }
  }
}

TEST_CASE("attention heatmap") {
  const T uniform = T::filled({2, 3, 5}, 0.2);
  for (double v : fsnet::attention_heatmap(uniform, 1)) CHECK(v == 0.0);
  CHECK(fsnet::attention_heatmap(T::filled({2, 3, 1}, 1.0), 0) == std::vector<double>{0.0});
  Rng rng(4);
  const T w = oracle::random_tensor({3, 4, 9}, rng);
  const auto heat = fsnet::attention_heatmap(w, 2);
  CHECK(heat.size() == 9);
  CHECK(*std::min_element(heat.begin(), heat.end()) == 0.0);
  CHECK(*std::max_element(heat.begin(), heat.end()) == 1.0);
  // direct recomputation
  std::vector<double> mean(9, 0.0);
  for (std::size_t q = 0; q < 4; ++q)
    for (std::size_t n = 0; n < 9; ++n) mean[n] += w.at({2, q, n}) / 4.0;
  const double lo = *std::min_element(mean.begin(), mean.end()), hi = *std::max_element(mean.begin(), mean.end());
  for (std::size_t n = 0; n < 9; ++n) CHECK(heat[n] == doctest::Approx((mean[n] - lo) / (hi - lo)).epsilon(1e-12));
  CHECK_THROWS(fsnet::attention_heatmap(w, 3));
}

// --------------------------------------------------------------- decoder

TEST_CASE("decoder shapes and reshape contract") {
  Rng rng(5);
  ParamStore<double> store;
  decoder::DecoderConfig dc;  // h=4, k=d=16, C^c=32
  const auto params = decoder::DecoderParams<double>::create(dc, store, "decoder", rng);
  const T sfm = oracle::random_tensor({4, 16, 16}, rng);
  G g(false);
  const auto r = decoder::decode(g, sfm, params);
  CHECK(r.coarse_features.shape() == ad::Shape{32, 16, 16});
  CHECK(r.grid.shape() == ad::Shape{3, 8, 8});
  CHECK(r.points.shape() == ad::Shape{64, 3});
  CHECK(dc.coarse_points() == 64);
  for (std::size_t row = 0; row < 8; ++row)
    for (std::size_t col = 0; col < 8; ++col)
      for (std::size_t a = 0; a < 3; ++a) CHECK(r.points.at({row * 8 + col, a}) == r.grid.at({a, row, col}));
  CHECK(bitwise_equal(decoder::decode(g, sfm, params).points, r.points));

  decoder::DecoderConfig odd = dc;
  odd.rows = 15;
  CHECK_THROWS_AS(odd.validate(), std::invalid_argument);
}

TEST_CASE("decoder with zero parameters gives zero points") {
  Rng rng(6);
  ParamStore<double> store;
  const auto params = decoder::DecoderParams<double>::create({}, store, "decoder", rng);
  for (const auto& [name, t] : store.entries()) fill(t, 0.0);
  G g(false);
  for (double v : oracle::values(decoder::decode(g, oracle::random_tensor({4, 16, 16}, rng), params).points)) CHECK(v == 0.0);
}

TEST_CASE("patch regions") {
  Rng rng(7);
  const T grid = oracle::random_tensor({3, 8, 8}, rng);
  CHECK(decoder::extract_patch_region(grid, {0, 0, 8, 8}).size() == 64);
  const auto one = decoder::extract_patch_region(grid, {2, 5, 1, 1});
  REQUIRE(one.size() == 1);
  for (std::size_t a = 0; a < 3; ++a) CHECK(one.points[0][a] == grid.at({a, 2, 5}));
  const auto p1 = decoder::extract_patch_region(grid, {0, 0, 2, 3}), p2 = decoder::extract_patch_region(grid, {4, 4, 2, 3});
  CHECK(p1.size() == 6);
  CHECK(p2.size() == 6);
  std::set<std::array<double, 3>> s1(p1.points.begin(), p1.points.end());
  for (const auto& p : p2.points) CHECK(s1.count(p) == 0);
  CHECK_THROWS_AS(decoder::extract_patch_region(grid, {7, 0, 2, 1}), std::out_of_range);
  CHECK_THROWS_AS(decoder::extract_patch_region(grid, {0, 0, 0, 1}), std::out_of_range);
}

// ---------------------------------------------------------------- sparse

TEST_CASE("merge and sample") {
  Rng rng(8);
  const T pi = oracle::random_tensor({10, 3}, rng), pc = oracle::random_tensor({6, 3}, rng);
  G g(false);
  const auto all = sparse::merge_and_sample(g, pi, pc, 16);
  CHECK(std::set<std::size_t>(all.selected.begin(), all.selected.end()).size() == 16);

  const auto some = sparse::merge_and_sample(g, pi, pc, 7);
  CHECK(some.points.shape() == ad::Shape{7, 3});
  std::vector<double> merged(pi.data().begin(), pi.data().end());
  merged.insert(merged.end(), pc.data().begin(), pc.data().end());
  CHECK(some.selected == oracle::fps(merged, 7, 0));
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t a = 0; a < 3; ++a) CHECK(some.points.at({i, a}) == merged[3 * some.selected[i] + a]);

  const auto dup = sparse::merge_and_sample(g, pi, pi, 20);
  CHECK(std::set<std::size_t>(dup.selected.begin(), dup.selected.end()).size() == 20);
  CHECK_THROWS(sparse::merge_and_sample(g, pi, pc, 17));

  // gradient reaches the coarse coordinates through the gather
  T pcg = oracle::random_tensor({6, 3}, rng);
  G gg;
  auto s = sparse::merge_and_sample(gg, pi, pcg, 16);
  T l = ad::sum(gg, s.points);
  gg.backward(l);
  for (double v : pcg.grad()) CHECK(v == 1.0);
}

TEST_CASE("edgeconv") {
  Rng rng(9);
  ParamStore<double> store;
  const auto params = sparse::EdgeConvParams<double>::create(store, "e", 3, {8, 6}, 4, rng);
  G g(false);
  const T same = T::filled({10, 3}, 0.3);
  const T out = sparse::edgeconv_encode(g, same, params);
  CHECK(out.shape() == ad::Shape{10, 6});
  for (std::size_t i = 1; i < 10; ++i)
    for (std::size_t c = 0; c < 6; ++c) CHECK(out.at({i, c}) == out.at({0, c}));
  CHECK_THROWS(sparse::edgeconv_encode(g, T::filled({3, 3}, 0.1), params));

  // kappa = 1 with self as nearest: lrelu(MLP([0, x_i]))
  const T x = oracle::random_tensor({6, 3}, rng);
  std::vector<std::size_t> self(6);
  std::iota(self.begin(), self.end(), std::size_t{0});
  const Linear<double>& mlp = params.layers[0];
  const T y = sparse::edge_conv(g, x, self, 1, mlp, 0.2);
  const T edge = ad::concat(g, {T::zeros({6, 3}), x}, 1);
  const T expect = ad::leaky_relu(g, mlp(g, edge), 0.2);
  CHECK(bitwise_equal(y, expect));
}

TEST_CASE("feature reuse and sparse encoding") {
  Rng rng(10);
  ParamStore<double> store;
  sparse::SparseConfig sc;  // desk widths
  sc.sparse_points = 128;
  const auto params = sparse::SparseParams<double>::create(sc, store, "sparse", rng);
  const T pi = oracle::random_tensor({100, 3}, rng, true, 0.3), fi = oracle::random_tensor({100, 64}, rng);
  const T pc = oracle::random_tensor({64, 3}, rng, true, 0.3), fc = oracle::random_tensor({32, 16, 16}, rng);
  G g(false);
  std::vector<std::size_t> all(164);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const T merged_pts = ad::concat(g, {pi, pc}, 0);
  const T full = sparse::feature_reuse(g, fi, fc, all, merged_pts, params.reuse);
  CHECK(full.shape() == ad::Shape{164, sc.reuse_out_width()});
  const T zero = sparse::feature_reuse(g, T::zeros({100, 64}), T::zeros({32, 16, 16}), all, merged_pts, params.reuse);
  for (double v : zero.data()) CHECK(v == 0.0);
  const std::vector<std::size_t> bad = {0, 164};
  CHECK_THROWS(sparse::feature_reuse(g, fi, fc, bad, ad::gather_rows(g, merged_pts, std::vector<std::size_t>{0, 1}),
                                     params.reuse));

  const auto r = sparse::sparse_encode(g, pi, fi, pc, fc, params);
  CHECK(r.points.shape() == ad::Shape{128, 3});
  CHECK(r.features.shape() == ad::Shape{128, sc.sparse_width()});
  CHECK(sc.sparse_width() == sc.neighbor_width() + sc.reuse_out_width());
  const auto again = sparse::sparse_encode(g, pi, fi, pc, fc, params);
  CHECK(bitwise_equal(r.features, again.features));
  CHECK(r.selected == again.selected);
}

// ----------------------------------------------------------------- ifnet

TEST_CASE("up and down units") {
  Rng rng(11);
  ParamStore<double> store;
  auto up1 = ifnet::UpParams<double>::create(store, "up1", 16, 1, rng);
  fill(up1.codes, 0.0);
  set_identity(up1.mlp.weight);
  G g(false);
  const T x = oracle::random_tensor({128, 16}, rng);
  CHECK(bitwise_equal(ifnet::up(g, x, 1, up1), x));

  const auto up4 = ifnet::UpParams<double>::create(store, "up4", 16, 4, rng);
  const T y = ifnet::up(g, x, 4, up4);
  CHECK(y.shape() == ad::Shape{512, 16});
  for (double v : oracle::values(ifnet::up(g, T::zeros({128, 16}), 4, up4))) CHECK(v == 0.0);

  auto down1 = ifnet::DownParams<double>::create(store, "down1", 16, 1, rng);
  set_identity(down1.mlp.weight);
  CHECK(bitwise_equal(ifnet::down(g, x, 1, down1), x));
  const auto down4 = ifnet::DownParams<double>::create(store, "down4", 16, 4, rng);
  CHECK(ifnet::down(g, y, 4, down4).shape() == ad::Shape{128, 16});
  CHECK_THROWS(ifnet::down(g, oracle::random_tensor({10, 16}, rng), 4, down4));
  // bias-free variant gives zero on zero input
  fill(*down4.mlp.bias, 0.0);
  for (double v : oracle::values(ifnet::down(g, T::zeros({512, 16}), 4, down4))) CHECK(v == 0.0);
}

TEST_CASE("self attention gate") {
  Rng rng(12);
  ParamStore<double> store;
  const auto sa = ifnet::SelfAttentionParams<double>::create(store, "sa", 16, rng);
  G g(false);
  const T x = oracle::random_tensor({20, 16}, rng);
  CHECK(bitwise_equal(ifnet::self_attention(g, x, sa), x));
  fill(sa.gamma, 0.8);
  CHECK(!bitwise_equal(ifnet::self_attention(g, x, sa), x));
  for (double v : oracle::values(ifnet::self_attention(g, T::zeros({20, 16}), sa))) CHECK(v == 0.0);
}

TEST_CASE("feedback block fixed point for every block of a nine-step network") {
  Rng rng(13);
  ParamStore<double> store;
  ifnet::IFNetConfig ic;
  ic.steps = 9;
  const auto params = ifnet::IFNetParams<double>::create(ic, store, "ifnet", rng);
  for (const auto& b : params.blocks) fill(b.attention.gamma, rng.uniform(0.2, 1.0));
  G g(false);
  for (std::size_t t = 0; t < 9; ++t) {
    const T dense = oracle::random_tensor({512, 16}, rng);
    const T sparse = ifnet::down(g, dense, 4, params.blocks[t].down);
    const auto next = ifnet::feedback_block(g, ifnet::FeedbackState<double>{sparse, dense, t}, 4, params.blocks[t]);
    CHECK(bitwise_equal(next.dense, dense));
    CHECK(next.step == t + 1);
  }
}

TEST_CASE("expansion modes") {
  Rng rng(14);
  const T fs = oracle::random_tensor({128, 96}, rng);
  G g(false);
  ifnet::IFNetConfig ic;
  for (std::size_t steps : {0, 1, 9}) {
    ParamStore<double> store;
    ic.steps = steps;
    Rng init(1);
    const auto p = ifnet::IFNetParams<double>::create(ic, store, "ifnet", init);
    const auto e = ifnet::expand(g, fs, p);
    CHECK(e.dense.shape() == ad::Shape{512, 16});
    REQUIRE(e.states.size() == steps + 1);
    for (const auto& s : e.states) {
      CHECK(s.dense.shape() == ad::Shape{512, 16});
      CHECK(s.sparse.shape() == ad::Shape{128, 16});
    }
    if (steps == 0) CHECK(bitwise_equal(e.dense, e.states[0].dense));
  }
  // duplication equals feedback with no blocks when the initial UP is shared
  ParamStore<double> s1, s2;
  ic.steps = 0;
  Rng r1(5), r2(5);
  const auto fb = ifnet::IFNetParams<double>::create(ic, s1, "ifnet", r1);
  ic.mode = ifnet::ExpansionMode::kDuplication;
  const auto dp = ifnet::IFNetParams<double>::create(ic, s2, "ifnet", r2);
  CHECK(bitwise_equal(ifnet::expand(g, fs, fb).dense, ifnet::expand(g, fs, dp).dense));

  ic.mode = ifnet::ExpansionMode::kMultiBranch;
  ParamStore<double> s3;
  const auto mb = ifnet::IFNetParams<double>::create(ic, s3, "ifnet", r1);
  CHECK(ifnet::expand(g, fs, mb).dense.shape() == ad::Shape{512, 16});
  CHECK_THROWS_AS(ifnet::parse_expansion_mode("nodeshuffle"), std::invalid_argument);
  CHECK(ifnet::parse_expansion_mode("multibranch") == ifnet::ExpansionMode::kMultiBranch);
}

TEST_CASE("offset regression") {
  Rng rng(15);
  ParamStore<double> store;
  ifnet::IFNetConfig ic;
  auto op = ifnet::OffsetParams<double>::create(ic, store, "offset", rng);
  fill(op.output.weight, 0.0);
  fill(*op.output.bias, 0.0);
  G g(false);
  const T ps = oracle::random_tensor({128, 3}, rng);
  const T pd = ifnet::offset_regress(g, ps, oracle::random_tensor({512, 16}, rng), 4, op);
  CHECK(pd.shape() == ad::Shape{512, 3});
  for (std::size_t i = 0; i < 512; ++i)
    for (std::size_t a = 0; a < 3; ++a) CHECK(pd.at({i, a}) == ps.at({i / 4, a}));
  const T same = ifnet::offset_regress(g, ps, oracle::random_tensor({128, 16}, rng), 1, op);
  CHECK(bitwise_equal(same, ps));
}
