#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>

#include "laqt/errors.hpp"
#include "laqt/gradcheck.hpp"
#include "laqt/la_transformer.hpp"
#include "support.hpp"

using namespace laqt;

namespace {

void set_identity(Linear& l) {
  auto w = l.weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t i = 0; i < std::min(l.out_dim(), l.in_dim()); ++i) w[i * l.in_dim() + i] = 1.0;
  auto b = l.bias.mutable_data();
  std::fill(b.begin(), b.end(), 0.0);
}

void copy_linear(const Linear& from, Linear& to) {
  std::copy(from.weight.data().begin(), from.weight.data().end(), to.weight.mutable_data().begin());
  std::copy(from.bias.data().begin(), from.bias.data().end(), to.bias.mutable_data().begin());
}

void copy_ff(const FeedForward& from, FeedForward& to) {
  copy_linear(from.inner, to.inner);
  copy_linear(from.outer, to.outer);
  std::copy(from.norm.gain.data().begin(), from.norm.gain.data().end(), to.norm.gain.mutable_data().begin());
  std::copy(from.norm.bias.data().begin(), from.norm.bias.data().end(), to.norm.bias.mutable_data().begin());
}

using Mat = std::vector<double>;

Mat project(const Mat& x, const Linear& l, std::size_t n) {
  const std::size_t in = l.in_dim(), out = l.out_dim();
  auto w = l.weight.data();
  auto b = l.bias.data();
  Mat y(n * out);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double s = b[o];
      for (std::size_t i = 0; i < in; ++i) s += x[r * in + i] * w[o * in + i];
      y[r * out + o] = s;
    }
  return y;
}

// Per-head attention of q against fixed k, v; all [n, D] with H column blocks.
Mat naive_heads(const Mat& q, const Mat& k, const Mat& v, std::size_t n, std::size_t D, std::size_t H) {
  const std::size_t dh = D / H;
  Mat out(n * D, 0.0);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> w(n);
      double m = -1e300, z = 0;
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += q[i * D + h * dh + c] * k[j * D + h * dh + c];
        m = std::max(m, w[j] = s / std::sqrt(double(dh)));
      }
      for (double& x : w) z += (x = std::exp(x - m));
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t c = 0; c < dh; ++c) out[i * D + h * dh + c] += w[j] / z * v[j * D + h * dh + c];
    }
  return out;
}

Mat permute_rows(const Mat& x, const std::vector<std::size_t>& perm, std::size_t width) {
  Mat y;
  for (std::size_t p : perm) y.insert(y.end(), x.begin() + long(p * width), x.begin() + long((p + 1) * width));
  return y;
}

}  // namespace

TEST_CASE("one level is plain attention over the projections") {
  std::mt19937_64 rng(1);
  const LATransformer p = LATransformer::init(4, 1, 8, 1, LevelMode::kHybrid, rng);
  const Tensor x = Tensor::uniform({5, 4}, 1, rng);
  const LevelStack s = level_iterate(x, p);
  REQUIRE(s.patterns.size() == 1);
  const auto plain = scaled_dot_attention(p.query(x), p.key(x), p.value(x)).out.to_vector();
  CHECK(testing::max_abs_diff(s.patterns[0].to_vector(), plain) < 1e-12);
}

TEST_CASE("a single entity yields its value row at every level") {
  std::mt19937_64 rng(2);
  const LATransformer p = LATransformer::init(6, 2, 8, 4, LevelMode::kHybrid, rng);
  const Tensor x = Tensor::uniform({1, 6}, 1, rng);
  const auto v = p.value(x).to_vector();
  for (const Tensor& c : level_iterate(x, p).patterns) CHECK(testing::max_abs_diff(c.to_vector(), v) < 1e-15);
}

TEST_CASE("four levels match a naive loop with fixed keys and values") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t n = 5, D = 8, H = 2;
    const LATransformer p = LATransformer::init(D, H, 16, 4, LevelMode::kHybrid, rng);
    const Tensor x = Tensor::uniform({n, D}, 1, rng);
    const LevelStack s = level_iterate(x, p);
    REQUIRE(s.patterns.size() == 4);
    const Mat xv = x.to_vector();
    const Mat k = project(xv, p.key, n), v = project(xv, p.value, n);
    Mat c = naive_heads(project(xv, p.query, n), k, v, n, D, H);
    for (std::size_t level = 0; level < 4; ++level) {
      CAPTURE(level);
      CHECK(testing::max_abs_diff(s.patterns[level].to_vector(), c) < 1e-12);
      c = naive_heads(c, k, v, n, D, H);
    }
  }
}

TEST_CASE("level iteration projects keys and values once") {
  std::mt19937_64 rng(3);
  const LATransformer p = LATransformer::init(8, 2, 16, 6, LevelMode::kHybrid, rng);
  Tensor x = Tensor::uniform({4, 8}, 1, rng, true);
  const LevelStack s = level_iterate(x, p);
  const Graph g = trace(sum_all(s.patterns.back()));
  const auto linears = std::count_if(g.entries.begin(), g.entries.end(),
                                     [](const GraphEntry& e) { return std::strcmp(e.op, "linear") == 0; });
  CHECK(linears == 3);
}

TEST_CASE("level gap: zero on the diagonal, symmetric, bounded by the value hull") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t n = 6, D = 8;
    const LATransformer p = LATransformer::init(D, 2, 16, 4, LevelMode::kHybrid, rng);
    const Tensor x = Tensor::uniform({n, D}, 2, rng);
    const LevelStack s = level_iterate(x, p);
    const Mat v = project(x.to_vector(), p.value, n);
    double max_row = 0;
    for (std::size_t r = 0; r < n; ++r) {
      double s2 = 0;
      for (std::size_t c = 0; c < D; ++c) s2 += v[r * D + c] * v[r * D + c];
      max_row = std::max(max_row, std::sqrt(s2));
    }
    for (std::size_t i = 1; i <= 4; ++i) {
      CHECK(level_gap(s, i, i) == 0.0);
      for (std::size_t j = 1; j <= 4; ++j) CHECK(level_gap(s, i, j) == level_gap(s, j, i));
      if (i >= 2) CHECK(level_gap(s, i, i - 1) <= 2 * max_row * std::sqrt(double(n)));
    }
    CHECK_THROWS_AS(level_gap(s, 5, 1), ContractError);
    CHECK_THROWS_AS(level_gap(s, 0, 1), ContractError);
  }
}

TEST_CASE("every level and the hard selection lie in the value hull") {
  std::mt19937_64 rng(4);
  const std::size_t n = 5, D = 8;
  const LATransformer p = LATransformer::init(D, 2, 16, 3, LevelMode::kHard, rng);
  const Tensor x = Tensor::uniform({n, D}, 2, rng);
  const LevelStack s = level_iterate(x, p);
  const Mat v = project(x.to_vector(), p.value, n);
  std::vector<const Tensor*> all;
  for (const Tensor& c : s.patterns) all.push_back(&c);
  const Tensor hard = select_hard(s, x, p, &rng).patterns;
  all.push_back(&hard);
  for (const Tensor* c : all) {
    const auto cv = c->to_vector();
    for (std::size_t col = 0; col < D; ++col) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t r = 0; r < n; ++r) {
        lo = std::min(lo, v[r * D + col]);
        hi = std::max(hi, v[r * D + col]);
      }
      for (std::size_t r = 0; r < n; ++r) {
        CHECK(cv[r * D + col] >= lo - 1e-12);
        CHECK(cv[r * D + col] <= hi + 1e-12);
      }
    }
  }
}

TEST_CASE("zero levels is a config error") {
  std::mt19937_64 rng(5);
  CHECK_THROWS_AS(LATransformer::init(8, 2, 16, 0, LevelMode::kHybrid, rng), ConfigError);
}

TEST_CASE("hard selection with one level is the first level") {
  std::mt19937_64 rng(6);
  const LATransformer p = LATransformer::init(8, 2, 16, 1, LevelMode::kHard, rng);
  const Tensor x = Tensor::uniform({2, 4, 8}, 1, rng);
  const LevelStack s = level_iterate(x, p);
  const HardSelection h = select_hard(s, x, p, &rng);
  CHECK(h.patterns.to_vector() == s.patterns[0].to_vector());
  CHECK(h.level_choice == std::vector<std::size_t>(8, 1));
}

TEST_CASE("hard selection rows are exact rows of the level stack") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t n = 6, D = 8, L = 3;
    const LATransformer p = LATransformer::init(D, 2, 16, L, LevelMode::kHard, rng);
    const Tensor x = Tensor::uniform({n, D}, 1, rng);
    const LevelStack s = level_iterate(x, p);
    for (std::mt19937_64* r : {static_cast<std::mt19937_64*>(nullptr), &rng}) {
      const HardSelection h = select_hard(s, x, p, r);
      const auto hv = h.patterns.to_vector();
      for (std::size_t e = 0; e < n; ++e) {
        const std::size_t level = h.level_choice[e];
        REQUIRE(level >= 1);
        REQUIRE(level <= L);
        const auto cv = s.patterns[level - 1].to_vector();
        for (std::size_t c = 0; c < D; ++c) CHECK(hv[e * D + c] == cv[e * D + c]);
      }
    }
  }
}

TEST_CASE("noise-free hard selection follows hand-set logits") {
  std::mt19937_64 rng(7);
  const std::size_t n = 3, D = 4;
  LATransformer p = LATransformer::init(D, 1, 8, 2, LevelMode::kHard, rng);
  set_identity(p.hard_key);
  // c_1 = +u, c_2 = -u, k_e = x = 5u: logits [5, -5] for every entity
  Mat u(n * D, 0.0), minus(n * D, 0.0), xs(n * D, 0.0);
  for (std::size_t e = 0; e < n; ++e) {
    u[e * D] = 1.0;
    minus[e * D] = -1.0;
    xs[e * D] = 5.0;
  }
  LevelStack s;
  s.patterns = {Tensor::from({n, D}, u), Tensor::from({n, D}, minus)};
  const HardSelection h = select_hard(s, Tensor::from({n, D}, xs), p, nullptr);
  CHECK(h.level_choice == std::vector<std::size_t>(n, 1));
  for (double& v : xs) v = -v;
  CHECK(select_hard(s, Tensor::from({n, D}, xs), p, nullptr).level_choice == std::vector<std::size_t>(n, 2));
}

TEST_CASE("hybrid fusion: averaging weights give the level mean; one level with identity is c_1") {
  std::mt19937_64 rng(8);
  const std::size_t D = 4, L = 3;
  LATransformer p = LATransformer::init(D, 2, 8, L, LevelMode::kHybrid, rng);
  auto w = p.fusion.weight.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t o = 0; o < D; ++o)
    for (std::size_t l = 0; l < L; ++l) w[o * L * D + l * D + o] = 1.0 / L;
  for (double& b : p.fusion.bias.mutable_data()) b = 0.0;
  const Tensor x = Tensor::uniform({5, D}, 1, rng);
  const LevelStack s = level_iterate(x, p);
  const auto fused = fuse_hybrid(s, p).to_vector();
  for (std::size_t i = 0; i < fused.size(); ++i) {
    double m = 0;
    for (const Tensor& c : s.patterns) m += c.data()[i] / L;
    CHECK(std::abs(fused[i] - m) < 1e-15);
  }

  LATransformer one = LATransformer::init(D, 2, 8, 1, LevelMode::kHybrid, rng);
  set_identity(one.fusion);
  const LevelStack s1 = level_iterate(x, one);
  CHECK(fuse_hybrid(s1, one).to_vector() == s1.patterns[0].to_vector());
}

TEST_CASE("hybrid fusion passes gradient to every level") {
  std::mt19937_64 rng(9);
  const std::size_t n = 4, D = 6, L = 3;
  const LATransformer p = LATransformer::init(D, 2, 8, L, LevelMode::kHybrid, rng);
  LevelStack s;
  for (std::size_t l = 0; l < L; ++l) s.patterns.push_back(Tensor::uniform({n, D}, 1, rng, true));
  sum_all(mul(fuse_hybrid(s, p), Tensor::uniform({n, D}, 1, rng))).backward();
  for (const Tensor& c : s.patterns) {
    double norm = 0;
    for (double g : c.grad()) norm += g * g;
    CHECK(norm > 0);
  }
}

TEST_CASE("one level with identity fusion equals a Transformer block") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t D = 8, H = 2;
    LATransformer la = LATransformer::init(D, H, 16, 1, LevelMode::kHybrid, rng);
    set_identity(la.fusion);
    TransformerBlock block = TransformerBlock::init(D, H, 16, rng);
    copy_linear(la.query, block.attention.query);
    copy_linear(la.key, block.attention.key);
    copy_linear(la.value, block.attention.value);
    set_identity(block.attention.output);
    copy_ff(la.ff, block.ff);
    const Tensor x = Tensor::uniform({2, 5, D}, 1, rng);
    const auto a = la_transformer_forward(x, la, nullptr).patterns.to_vector();
    const auto b = transformer_block(x, block).out.to_vector();
    CHECK(testing::max_abs_diff(a, b) < 1e-12);
  }
}

TEST_CASE("forward is deterministic given the seed") {
  std::mt19937_64 init(10);
  const LATransformer p = LATransformer::init(8, 2, 16, 3, LevelMode::kHard, init);
  const Tensor x = Tensor::uniform({3, 5, 8}, 1, init);
  std::mt19937_64 r1(99), r2(99);
  const auto a = la_transformer_forward(x, p, &r1);
  const auto b = la_transformer_forward(x, p, &r2);
  CHECK(a.patterns.to_vector() == b.patterns.to_vector());
  CHECK(a.diagnostics.level_choice == b.diagnostics.level_choice);
  CHECK(a.diagnostics.adjacent_gaps.size() == 2);
}

TEST_CASE("permuting entities permutes the output rows") {
  for (LevelMode mode : {LevelMode::kHybrid, LevelMode::kHard}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      std::mt19937_64 rng(seed);
      const std::size_t n = 6, D = 8;
      const LATransformer p = LATransformer::init(D, 2, 16, 3, mode, rng);
      const Tensor x = Tensor::uniform({n, D}, 1, rng);
      const std::vector<std::size_t> perm = {4, 2, 0, 5, 1, 3};
      const Mat xp = permute_rows(x.to_vector(), perm, D);
      const Mat a = permute_rows(la_transformer_forward(x, p, nullptr).patterns.to_vector(), perm, D);
      const Mat b = la_transformer_forward(Tensor::from({n, D}, xp), p, nullptr).patterns.to_vector();
      CHECK(testing::max_abs_diff(a, b) < 1e-12);
    }
  }
}

TEST_CASE("gradient oracles for both modes over 20 seeds") {
  for (const char* name : {"la_hard", "la_hybrid"}) {
    CAPTURE(name);
    const auto& reg = gradcheck_registry();
    const auto it = std::find_if(reg.begin(), reg.end(), [&](const GradCheckEntry& e) { return e.name == name; });
    REQUIRE(it != reg.end());
    CHECK(run_gradcheck(*it, 1, 20).worst_rel_error < 1e-4);
  }
}

TEST_CASE("stacked transformer: depth one is a block, depth two differs from two levels") {
  std::mt19937_64 rng(12);
  const std::size_t D = 8;
  const StackedTransformer st1 = StackedTransformer::init(D, 2, 16, 1, rng);
  const Tensor x = Tensor::uniform({5, D}, 1, rng);
  CHECK(stacked_transformer_forward(x, st1).patterns.to_vector() == transformer_block(x, st1.layers[0]).out.to_vector());

  StackedTransformer st2 = StackedTransformer::init(D, 2, 16, 2, rng);
  LATransformer la = LATransformer::init(D, 2, 16, 2, LevelMode::kHybrid, rng);
  copy_linear(st2.layers[0].attention.query, la.query);
  copy_linear(st2.layers[0].attention.key, la.key);
  copy_linear(st2.layers[0].attention.value, la.value);
  const auto a = stacked_transformer_forward(x, st2).patterns.to_vector();
  const auto b = la_transformer_forward(x, la, nullptr).patterns.to_vector();
  CHECK(testing::max_abs_diff(a, b) > 1e-3);
  CHECK_THROWS_AS(StackedTransformer::init(D, 2, 16, 0, rng), ConfigError);
}

TEST_CASE("stacked transformer gradient against finite differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(seed);
    StackedTransformer st = StackedTransformer::init(8, 2, 16, 2, rng);
    Tensor x = Tensor::uniform({4, 8}, 1, rng, true);
    const Tensor w = Tensor::uniform({4, 8}, 1, rng);
    auto loss = [&] { return sum_all(mul(stacked_transformer_forward(x, st).patterns, w)); };
    std::vector<Tensor> leaves = {x};
    st.visit("st", [&](const std::string&, Tensor& t) { leaves.push_back(t); });
    loss().backward();
    for (Tensor& leaf : leaves) {
      const auto numeric = testing::numeric_grad(leaf, [&] { return loss().item(); });
      CHECK(testing::max_rel_err(testing::grad_of(leaf), numeric) < 1e-4);
    }
  }
}
