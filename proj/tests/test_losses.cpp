#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "sada/losses.hpp"
#include "sada/rng.hpp"

using namespace sada;

namespace {

void fill_unit(std::vector<double>& v, std::size_t count, std::size_t dim, Rng& rng) {
  v.resize(count * dim);
  for (std::size_t i = 0; i < count; ++i) {
    double norm = 0.0;
    for (std::size_t c = 0; c < dim; ++c) {
      v[i * dim + c] = rng.normal();
      norm += v[i * dim + c] * v[i * dim + c];
    }
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < dim; ++c) v[i * dim + c] /= norm;
  }
}

EmbeddingBatch random_batch(Rng& rng, std::size_t n, std::size_t transforms,
                            std::size_t dim, std::size_t classes, double tau) {
  EmbeddingBatch batch(n, transforms, dim);
  batch.tau = tau;
  fill_unit(batch.z, n, dim, rng);
  if (transforms > 0) fill_unit(batch.z_t, n * transforms, dim, rng);
  for (std::size_t i = 0; i < n; ++i)
    batch.labels[i] = static_cast<int>(rng.uniform_index(classes));
  return batch;
}

}  // namespace

// ---------------------------------------------------------------------------
// local alignment
// ---------------------------------------------------------------------------

TEST_CASE("local alignment is zero when transforms equal the raw maps") {
  Rng rng(1);
  ProjectedMaps raw(2, 3, 4);
  fill_unit(raw.values, 6, 4, rng);
  TransformedMaps tr(2, 2, 3, 4);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t p = 0; p < 3; ++p)
        std::copy(raw.at(i, p), raw.at(i, p) + 4, tr.at(i, t, p));
  const LossResult res = local_align_loss(raw, tr);
  CHECK_THAT(res.value, Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("local alignment hand cases: orthogonal pair and antipodal bound") {
  ProjectedMaps raw(1, 1, 2);
  raw.values = {1.0, 0.0};
  TransformedMaps tr(1, 1, 1, 2);
  tr.values = {0.0, 1.0};
  CHECK_THAT(local_align_loss(raw, tr).value, Catch::Matchers::WithinAbs(2.0, 1e-12));

  tr.values = {-1.0, 0.0};
  CHECK_THAT(local_align_loss(raw, tr).value, Catch::Matchers::WithinAbs(4.0, 1e-12));
}

TEST_CASE("local alignment is invariant to positive rescaling and bounded by 4") {
  Rng rng(2);
  ProjectedMaps raw(3, 2, 5);
  fill_unit(raw.values, 6, 5, rng);
  TransformedMaps tr(3, 2, 2, 5);
  fill_unit(tr.values, 12, 5, rng);
  const double base = local_align_loss(raw, tr).value;
  CHECK(base >= 0.0);
  CHECK(base <= 4.0 * 3 * 2 + 1e-9);

  ProjectedMaps scaled = raw;
  for (std::size_t p = 0; p < 2; ++p)
    for (std::size_t c = 0; c < 5; ++c) scaled.at(1, p)[c] *= 37.5;
  CHECK_THAT(local_align_loss(scaled, tr).value, Catch::Matchers::WithinAbs(base, 1e-9));
}

TEST_CASE("local alignment rejects zero-norm embeddings") {
  ProjectedMaps raw(1, 1, 3);
  raw.values = {0.0, 0.0, 0.0};
  TransformedMaps tr(1, 1, 1, 3);
  tr.values = {1.0, 0.0, 0.0};
  CHECK_THROWS_AS(local_align_loss(raw, tr), std::domain_error);
}

TEST_CASE("local alignment gradients pass the finite-difference check") {
  Rng rng(3);
  ProjectedMaps raw(3, 4, 6);
  fill_unit(raw.values, 12, 6, rng);
  TransformedMaps tr(3, 2, 4, 6);
  fill_unit(tr.values, 24, 6, rng);
  const LossResult res = local_align_loss(raw, tr);
  auto fn = [&](const std::vector<std::vector<double>>& in) {
    ProjectedMaps r2 = raw;
    r2.values = in[0];
    TransformedMaps t2 = tr;
    t2.values = in[1];
    return local_align_loss(r2, t2).value;
  };
  const auto report = finite_diff_check(fn, {raw.values, tr.values},
                                        {res.grad("E"), res.grad("E_t")}, 200, 1e-5, 11);
  CHECK(report.coords_checked >= 200);
  CHECK(report.max_rel_err < 1e-4);
}

// ---------------------------------------------------------------------------
// disc loss
// ---------------------------------------------------------------------------

TEST_CASE("disc loss equals 2 log 2 for two identical same-class embeddings") {
  EmbeddingBatch batch(2, 0, 3);
  batch.tau = 0.5;
  batch.z = {1.0, 0.0, 0.0, 1.0, 0.0, 0.0};
  batch.labels = {4, 4};
  const LossResult res = disc_loss(batch);
  CHECK_THAT(res.value, Catch::Matchers::WithinAbs(2.0 * std::log(2.0), 1e-12));
}

TEST_CASE("disc loss matches the brute-force oracle on random batches") {
  Rng rng(4);
  const double taus[3] = {0.1, 0.5, 1.0};
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(7);          // up to 8
    const std::size_t transforms = rng.uniform_index(3);     // k up to 3
    const std::size_t classes = 1 + rng.uniform_index(4);
    const EmbeddingBatch batch =
        random_batch(rng, n, transforms, 5, classes, taus[trial % 3]);
    const LossResult res = disc_loss(batch);
    CHECK_THAT(res.value,
               Catch::Matchers::WithinAbs(oracles::disc_loss_brute_force(batch), 1e-10));
  }
}

TEST_CASE("disc loss approaches per-anchor log N as tau grows") {
  Rng rng(5);
  const std::size_t n = 6;
  EmbeddingBatch batch = random_batch(rng, n, 2, 7, 3, 1e6);
  const LossResult res = disc_loss(batch);
  CHECK_THAT(res.value, Catch::Matchers::WithinAbs(n * std::log(double(n)), 1e-4));
}

TEST_CASE("disc loss is permutation equivariant") {
  Rng rng(6);
  const EmbeddingBatch batch = random_batch(rng, 6, 2, 5, 3, 0.3);
  EmbeddingBatch shuffled(6, 2, 5);
  shuffled.tau = batch.tau;
  const std::size_t perm[6] = {3, 0, 5, 1, 4, 2};
  for (std::size_t i = 0; i < 6; ++i) {
    std::copy(batch.raw(perm[i]), batch.raw(perm[i]) + 5, shuffled.raw(i));
    for (std::size_t t = 0; t < 2; ++t)
      std::copy(batch.transformed(perm[i], t), batch.transformed(perm[i], t) + 5,
                shuffled.transformed(i, t));
    shuffled.labels[i] = batch.labels[perm[i]];
  }
  CHECK_THAT(disc_loss(shuffled).value,
             Catch::Matchers::WithinAbs(disc_loss(batch).value, 1e-10));
}

TEST_CASE("disc loss validation") {
  Rng rng(7);
  EmbeddingBatch batch = random_batch(rng, 4, 1, 5, 2, 0.5);
  batch.tau = 0.0;
  CHECK_THROWS_AS(disc_loss(batch), std::invalid_argument);
  batch.tau = -1.0;
  CHECK_THROWS_AS(disc_loss(batch), std::invalid_argument);

  EmbeddingBatch single(1, 0, 4);
  CHECK_THROWS_AS(disc_loss(single), std::invalid_argument);

  // anchor collapses when a transform cancels the raw embedding
  EmbeddingBatch degenerate(2, 1, 2);
  degenerate.tau = 0.5;
  degenerate.z = {1.0, 0.0, 0.0, 1.0};
  degenerate.z_t = {-1.0, 0.0, 0.0, 1.0};
  degenerate.labels = {0, 0};
  CHECK_THROWS_AS(disc_loss(degenerate), std::domain_error);
}

TEST_CASE("disc loss gradients pass the finite-difference check") {
  Rng rng(8);
  EmbeddingBatch batch = random_batch(rng, 6, 2, 8, 3, 0.5);
  const LossResult res = disc_loss(batch);
  auto fn = [&](const std::vector<std::vector<double>>& in) {
    EmbeddingBatch b2 = batch;
    b2.z = in[0];
    b2.z_t = in[1];
    return disc_loss(b2).value;
  };
  const auto report = finite_diff_check(fn, {batch.z, batch.z_t},
                                        {res.grad("z"), res.grad("z_t")}, 200, 1e-5, 21);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("widened denominator option is consistent under finite differences") {
  Rng rng(9);
  EmbeddingBatch batch = random_batch(rng, 5, 2, 6, 2, 0.4);
  DiscOptions opts;
  opts.denominator_includes_transforms = true;
  const LossResult res = disc_loss(batch, opts);
  CHECK(res.value != disc_loss(batch).value);  // genuinely different pool
  auto fn = [&](const std::vector<std::vector<double>>& in) {
    EmbeddingBatch b2 = batch;
    b2.z = in[0];
    b2.z_t = in[1];
    return disc_loss(b2, opts).value;
  };
  const auto report = finite_diff_check(fn, {batch.z, batch.z_t},
                                        {res.grad("z"), res.grad("z_t")}, 200, 1e-5, 22);
  CHECK(report.max_rel_err < 1e-4);
}

// ---------------------------------------------------------------------------
// cross entropy
// ---------------------------------------------------------------------------

TEST_CASE("cross entropy hand cases") {
  Matrix onehot(1, 3, 0.0);
  onehot(0, 1) = 1.0;
  CHECK(cross_entropy(onehot, {1}).value == 0.0);

  Matrix uniform(1, 5, 0.2);
  CHECK_THAT(cross_entropy(uniform, {3}).value,
             Catch::Matchers::WithinAbs(1.6094379124341003, 1e-12));

  Matrix halves(2, 2, 0.5);
  CHECK_THAT(cross_entropy(halves, {0, 1}).value,
             Catch::Matchers::WithinAbs(0.6931471805599453, 1e-12));
}

TEST_CASE("cross entropy clamps zero probability at the true label") {
  Matrix probs(1, 2, 0.0);
  probs(0, 0) = 1.0;
  const LossResult res = cross_entropy(probs, {1});
  CHECK(std::isfinite(res.value));
  CHECK_THAT(res.value, Catch::Matchers::WithinAbs(-std::log(1e-12), 1e-6));
}

TEST_CASE("cross entropy validates its inputs") {
  Matrix bad_sum(1, 2, 0.3);
  CHECK_THROWS_AS(cross_entropy(bad_sum, {0}), std::invalid_argument);
  Matrix negative(1, 2);
  negative(0, 0) = 1.2;
  negative(0, 1) = -0.2;
  CHECK_THROWS_AS(cross_entropy(negative, {0}), std::invalid_argument);
  Matrix fine(1, 2, 0.5);
  CHECK_THROWS_AS(cross_entropy(fine, {7}), std::invalid_argument);
}

TEST_CASE("softmax cross entropy gradient is softmax minus onehot") {
  Rng rng(10);
  Matrix logits(1, 6);
  for (std::size_t j = 0; j < 6; ++j) logits(0, j) = rng.normal();
  const LossResult res = cross_entropy_with_softmax(logits, {2});
  const Matrix probs = softmax(logits);
  const auto& g = res.grad("logits");
  for (std::size_t j = 0; j < 6; ++j) {
    const double expected = probs(0, j) - (j == 2 ? 1.0 : 0.0);
    CHECK_THAT(g[j], Catch::Matchers::WithinAbs(expected, 1e-6));
  }
}

TEST_CASE("softmax cross entropy passes the finite-difference check") {
  Rng rng(11);
  const std::size_t n = 7, c = 5;
  Matrix logits(n, c);
  std::vector<int> ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    ys[i] = static_cast<int>(rng.uniform_index(c));
    for (std::size_t j = 0; j < c; ++j) logits(i, j) = rng.normal();
  }
  const LossResult res = cross_entropy_with_softmax(logits, ys);
  auto fn = [&](const std::vector<std::vector<double>>& in) {
    Matrix l2(n, c);
    std::copy(in[0].begin(), in[0].end(), l2.data());
    return cross_entropy_with_softmax(l2, ys).value;
  };
  std::vector<double> flat(logits.data(), logits.data() + logits.size());
  const auto report = finite_diff_check(fn, {flat}, {res.grad("logits")}, 35, 1e-5, 31);
  CHECK(report.coords_checked == 35);
  CHECK(report.max_rel_err < 1e-6);
}

// ---------------------------------------------------------------------------
// rep loss and the finite-difference harness itself
// ---------------------------------------------------------------------------

TEST_CASE("rep loss combines values and gradients linearly") {
  LossResult disc;
  disc.value = 1.0;
  disc.gradients = {{"z", {1.0, 2.0}}};
  LossResult la;
  la.value = 2.0;
  la.gradients = {{"z", {10.0, 20.0}}, {"E", {5.0}}};

  const LossResult combined = rep_loss(disc, la, 0.1);
  CHECK_THAT(combined.value, Catch::Matchers::WithinAbs(1.2, 1e-12));
  CHECK_THAT(combined.grad("z")[0], Catch::Matchers::WithinAbs(2.0, 1e-12));
  CHECK_THAT(combined.grad("z")[1], Catch::Matchers::WithinAbs(4.0, 1e-12));
  CHECK_THAT(combined.grad("E")[0], Catch::Matchers::WithinAbs(0.5, 1e-12));

  const LossResult beta_zero = rep_loss(disc, la, 0.0);
  CHECK(beta_zero.value == disc.value);
  CHECK(beta_zero.grad("z") == disc.grad("z"));
  CHECK(beta_zero.grad("E") == std::vector<double>{0.0});
}

TEST_CASE("rep loss gradient check over disjoint inputs") {
  Rng rng(12);
  EmbeddingBatch batch = random_batch(rng, 4, 2, 6, 2, 0.5);
  ProjectedMaps raw(4, 3, 6);
  fill_unit(raw.values, 12, 6, rng);
  TransformedMaps tr(4, 2, 3, 6);
  fill_unit(tr.values, 24, 6, rng);
  const double beta = 0.1;
  const LossResult res = rep_loss(disc_loss(batch), local_align_loss(raw, tr), beta);
  auto fn = [&](const std::vector<std::vector<double>>& in) {
    EmbeddingBatch b2 = batch;
    b2.z = in[0];
    b2.z_t = in[1];
    ProjectedMaps r2 = raw;
    r2.values = in[2];
    TransformedMaps t2 = tr;
    t2.values = in[3];
    return rep_loss(disc_loss(b2), local_align_loss(r2, t2), beta).value;
  };
  const auto report = finite_diff_check(
      fn, {batch.z, batch.z_t, raw.values, tr.values},
      {res.grad("z"), res.grad("z_t"), res.grad("E"), res.grad("E_t")}, 200, 1e-5, 41);
  CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("finite-difference harness flags non-finite losses") {
  auto fn = [](const std::vector<std::vector<double>>& in) {
    return in[0][0] > 0.5 ? std::numeric_limits<double>::infinity() : 0.0;
  };
  CHECK_THROWS_AS(finite_diff_check(fn, {{0.5}}, {{0.0}}, 10, 1e-3, 1), std::domain_error);
}
