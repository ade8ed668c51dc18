#include <algorithm>
#include <random>
#include <set>

#include "cmr/orient.hpp"
#include "cmr/volume.hpp"
#include "doctest.h"
#include "support/orient_oracle.hpp"

using namespace cmr;

namespace {

OrientCode code(const char* s) { return OrientCode::parse(s); }

Grid<int> display(std::initializer_list<std::initializer_list<int>> rows) {
  Grid<int> g(int(rows.size()), int(rows.begin()->size()));
  int r = 0;
  for (const auto& row : rows) {
    int c = 0;
    for (int v : row) g(r, c++) = v;
    ++r;
  }
  return g;
}

Volume random_volume(std::mt19937_64& rng, int sx, int sy, int sz) {
  Volume v(sx, sy, sz);
  std::uniform_real_distribution<float> u(0.0f, 1000.0f);
  for (Eigen::Index i = 0; i < v.voxels.size(); ++i) v.voxels[i] = u(rng);
  v.affine = oracle::random_affine(rng);
  v.spacing = v.affine.topLeftCorner<3, 3>().colwise().norm().transpose();
  return v;
}

}  // namespace

TEST_CASE("all_codes lists the eight codes in table order") {
  const auto codes = all_codes();
  REQUIRE(codes.size() == 8);
  const char* expected[] = {"000", "001", "010", "011", "100", "101", "110", "111"};
  for (int i = 0; i < 8; ++i) {
    CHECK(codes[std::size_t(i)].str() == expected[i]);
    CHECK(codes[std::size_t(i)].index() == i);
  }
  CHECK(std::set<OrientCode>(codes.begin(), codes.end()).size() == 8);
}

TEST_CASE("codes parse and format symmetrically") {
  for (auto c : all_codes()) CHECK(OrientCode::parse(c.str()) == c);
  CHECK(code("101").flips_x());
  CHECK_FALSE(code("101").flips_y());
  CHECK(code("101").transposes());
  for (const char* bad : {"", "01", "0101", "012", "abc", " 01"}) CHECK_THROWS_AS(OrientCode::parse(bad), std::invalid_argument);
  CHECK_THROWS_AS(OrientCode::from_bits(8), std::invalid_argument);
  CHECK_THROWS_AS(OrientCode::from_index(-1), std::invalid_argument);
}

TEST_CASE("index_map reproduces the coordinate formulas") {
  for (auto [sx, sy] : {std::pair{3, 4}, {4, 3}, {1, 5}, {2, 2}, {7, 1}}) {
    for (auto c : all_codes()) {
      const IndexMap m = index_map(c, sx, sy);
      const auto& f = oracle::formulas()[std::size_t(c.index())];
      CHECK(m.target_sx == (f.swaps ? sy : sx));
      CHECK(m.target_sy == (f.swaps ? sx : sy));
      for (int y = 0; y < m.target_sy; ++y)
        for (int x = 0; x < m.target_sx; ++x) CHECK(m.source_of(x, y) == f.source(x, y, sx, sy));
    }
  }
  CHECK(index_map(code("000"), 5, 6).is_identity());
  const IndexMap flip = index_map(code("001"), 5, 6);
  CHECK(flip.source_of(0, 2) == Eigen::Vector2i(4, 2));
  const IndexMap rot = index_map(code("101"), 5, 6);
  CHECK(rot.source_of(1, 3) == Eigen::Vector2i(5 - 1 - 3, 1));
  CHECK_THROWS_AS(index_map(code("001"), 0, 3), std::invalid_argument);
  CHECK_THROWS_AS(index_map(code("001"), 3, -1), std::invalid_argument);
}

TEST_CASE("index maps are bijections and invert to the identity") {
  for (auto c : all_codes()) {
    const IndexMap m = index_map(c, 3, 4);
    std::set<std::pair<int, int>> seen;
    for (int y = 0; y < m.target_sy; ++y)
      for (int x = 0; x < m.target_sx; ++x) {
        const Eigen::Vector2i s = m.source_of(x, y);
        CHECK(s.x() >= 0);
        CHECK(s.x() < 3);
        CHECK(s.y() >= 0);
        CHECK(s.y() < 4);
        seen.insert({s.x(), s.y()});
      }
    CHECK(seen.size() == 12);
    CHECK(m.then(m.inverse()).is_identity());
    CHECK(m.inverse().then(m).is_identity());
  }
}

TEST_CASE("apply matches the literal formulas on an asymmetric labeled grid") {
  const Grid<int> g = oracle::labeled(3, 4);
  for (auto c : all_codes()) {
    const Grid<int> got = apply(c, g);
    const Grid<int> want = oracle::apply(c.index(), g);
    REQUIRE(got.rows() == want.rows());
    REQUIRE(got.cols() == want.cols());
    CHECK((got == want).all());
  }
  CHECK_THROWS_AS(apply(code("001"), Grid<int>(0, 3)), std::invalid_argument);
}

TEST_CASE("apply preserves the multiset of values") {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> u(0, 9);
  Grid<int> g(5, 3);
  for (Eigen::Index i = 0; i < g.size(); ++i) g(i) = u(rng);
  std::vector<int> base(g.data(), g.data() + g.size());
  std::sort(base.begin(), base.end());
  for (auto c : all_codes()) {
    const Grid<int> out = apply(c, g);
    std::vector<int> v(out.data(), out.data() + out.size());
    std::sort(v.begin(), v.end());
    CHECK(v == base);
  }
}

TEST_CASE("corner layouts of the image column") {
  const Grid<int> start = display({{1, 2}, {3, 4}});
  CHECK((apply_to_grid(code("000"), start) == start).all());
  CHECK((apply_to_grid(code("001"), start) == display({{2, 1}, {4, 3}})).all());
  CHECK((apply_to_grid(code("010"), start) == display({{3, 4}, {1, 2}})).all());
  CHECK((apply_to_grid(code("011"), start) == display({{4, 3}, {2, 1}})).all());
  CHECK((apply_to_grid(code("101"), start) == display({{3, 1}, {4, 2}})).all());
  CHECK((apply_to_grid(code("110"), start) == display({{2, 4}, {1, 3}})).all());
}

TEST_CASE("display order round trips") {
  const Grid<int> rows = display({{1, 2, 3}, {4, 5, 6}});
  const Grid<int> xy = from_display(rows);
  CHECK(xy.rows() == 3);
  CHECK(xy.cols() == 2);
  CHECK(xy(0, 0) == 4);  // bottom-left in display is (x 0, y 0)
  CHECK(xy(2, 1) == 3);
  CHECK((to_display(xy) == rows).all());
}

TEST_CASE("compose agrees with sequential application for all 64 pairs") {
  const Grid<int> g = oracle::labeled(3, 4);
  int mismatches = 0;
  for (auto a : all_codes())
    for (auto b : all_codes()) {
      const int want = oracle::identify(g, oracle::apply(a.index(), oracle::apply(b.index(), g)));
      if (compose(a, b).index() != want) ++mismatches;
      const Grid<int> seq = apply(a, apply(b, g));
      const Grid<int> once = apply(compose(a, b), g);
      if (seq.rows() != once.rows() || !(seq == once).all()) ++mismatches;
    }
  CHECK(mismatches == 0);
}

TEST_CASE("compose and invert examples") {
  CHECK(compose(code("001"), code("001")) == code("000"));
  CHECK(compose(code("101"), code("101")) == code("011"));
  CHECK(compose(code("100"), code("001")) == code("101"));
  CHECK(invert(code("000")) == code("000"));
  CHECK(invert(code("101")) == code("110"));
  CHECK(invert(code("011")) == code("011"));
}

TEST_CASE("every code has an inverse on both sides") {
  const Grid<int> g = oracle::labeled(3, 4);
  for (auto c : all_codes()) {
    CHECK(compose(invert(c), c) == OrientCode());
    CHECK(compose(c, invert(c)) == OrientCode());
    CHECK((apply(invert(c), apply(c, g)) == g).all());
  }
}

TEST_CASE("the set is closed and associative") {
  for (auto a : all_codes())
    for (auto b : all_codes())
      for (auto c : all_codes()) CHECK(compose(a, compose(b, c)) == compose(compose(a, b), c));
}

TEST_CASE("element orders") {
  for (auto c : all_codes()) {
    const int n = order(c);
    CHECK((n == 1 || n == 2 || n == 4));
    OrientCode p = c;
    for (int k = 1; k < n; ++k) {
      CHECK(p != OrientCode());
      p = compose(c, p);
    }
    CHECK(p == OrientCode());
  }
  CHECK(order(code("000")) == 1);
  CHECK(order(code("101")) == 4);
  CHECK(order(code("110")) == 4);
  for (const char* s : {"001", "010", "011", "100", "111"}) CHECK(order(code(s)) == 2);
}

TEST_CASE("update_affine keeps every voxel center in place") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    const Affine a = oracle::random_affine(rng);
    const int sx = 3 + trial % 4, sy = 2 + trial % 5;
    for (auto c : all_codes()) {
      const Affine b = update_affine(c, a, sx, sy);
      const auto& f = oracle::formulas()[std::size_t(c.index())];
      const int tx = f.swaps ? sy : sx, ty = f.swaps ? sx : sy;
      double worst = 0.0;
      for (int z = 0; z < 2; ++z)
        for (int y = 0; y < ty; ++y)
          for (int x = 0; x < tx; ++x) {
            const Eigen::Vector2i s = f.source(x, y, sx, sy);
            const Eigen::Vector4d before = a * Eigen::Vector4d(s.x(), s.y(), z, 1);
            const Eigen::Vector4d after = b * Eigen::Vector4d(x, y, z, 1);
            worst = std::max(worst, (before - after).norm());
          }
      CHECK(worst < 1e-9);
    }
  }
}

TEST_CASE("update_affine identity, round trip, and singular input") {
  std::mt19937_64 rng(3);
  const Affine a = oracle::random_affine(rng);
  CHECK(update_affine(code("000"), a, 6, 9).isApprox(a, 0.0));
  for (auto c : all_codes()) {
    const auto& f = oracle::formulas()[std::size_t(c.index())];
    const Affine b = update_affine(c, a, 6, 9);
    const Affine back = update_affine(invert(c), b, f.swaps ? 9 : 6, f.swaps ? 6 : 9);
    CHECK((back - a).cwiseAbs().maxCoeff() < 1e-9);
  }
  Affine singular = a;
  singular.col(1) = singular.col(0);
  CHECK_THROWS_AS(update_affine(code("001"), singular, 4, 4), std::invalid_argument);
}

TEST_CASE("apply_to_volume permutes each slice identically") {
  std::mt19937_64 rng(21);
  const Volume v = random_volume(rng, 5, 3, 4);
  for (auto c : all_codes()) {
    const Volume out = apply_to_volume(c, v);
    REQUIRE(out.sz() == 4);
    for (int z = 0; z < 4; ++z) CHECK((out.slice(z) == oracle::apply(c.index(), v.slice(z))).all());
    CHECK(out.voxels.sum() == doctest::Approx(v.voxels.sum()).epsilon(1e-6));
  }
}

TEST_CASE("apply_to_volume examples") {
  std::mt19937_64 rng(8);
  const Volume v = random_volume(rng, 6, 4, 2);
  const Volume same = apply_to_volume(code("000"), v);
  CHECK((same.voxels == v.voxels).all());
  CHECK(same.affine == v.affine);

  const Volume rot = apply_to_volume(code("011"), v);
  std::vector<float> a(v.voxels.begin(), v.voxels.end()), b(rot.voxels.begin(), rot.voxels.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);

  const Volume t = apply_to_volume(code("101"), v);
  CHECK(t.sx() == 4);
  CHECK(t.sy() == 6);
  CHECK(t.spacing.x() == v.spacing.y());
  CHECK(t.spacing.y() == v.spacing.x());
  CHECK(t.spacing.z() == v.spacing.z());
}

TEST_CASE("correcting an applied code restores voxels bit-exactly") {
  std::mt19937_64 rng(9);
  const Volume v = random_volume(rng, 7, 5, 3);
  for (auto c : all_codes()) {
    const Volume back = apply_to_volume(invert(c), apply_to_volume(c, v));
    CHECK(back.dims == v.dims);
    CHECK((back.voxels == v.voxels).all());
    CHECK((back.affine - v.affine).cwiseAbs().maxCoeff() < 1e-9);
  }
}
