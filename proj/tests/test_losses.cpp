#include <cmath>

#include "doctest.h"
#include "mtl/losses.hpp"
#include "mtl/rng.hpp"
#include "support/fdcheck.hpp"
#include "support/oracles.hpp"

using namespace mtl;
using namespace mtl::losses;
using testsupport::fd_check;
using testsupport::random_tensor;

namespace {

Tensor normalized_rows(Tensor t) {
  int64_t n = t.size(0), d = t.size(1);
  for (int64_t r = 0; r < n; ++r) {
    double nr = 0.0;
    for (int64_t c = 0; c < d; ++c) nr += t[r * d + c] * t[r * d + c];
    nr = std::sqrt(nr);
    for (int64_t c = 0; c < d; ++c) t[r * d + c] /= nr;
  }
  return t;
}

ContrastiveBatch random_batch(int64_t n_pairs, int64_t d, double tau, uint64_t seed) {
  ContrastiveBatch b;
  b.tau = tau;
  Tensor z = normalized_rows(random_tensor({2 * n_pairs, d}, seed));
  b.embeddings = leaf(z);
  b.labels.resize(static_cast<size_t>(2 * n_pairs));
  for (int64_t i = 0; i < 2 * n_pairs; ++i) b.labels[(size_t)i] = i / 2;  // two views per sample
  return b;
}

}  // namespace

TEST_CASE("supcon: hand case matches oracle and closed form") {
  Tensor z({4, 2}, {1, 0, 1, 0, 0, 1, 0, 1});
  std::vector<int64_t> labels{0, 0, 1, 1};
  ContrastiveBatch b{leaf(z), labels, 0.5};
  double got = supcon_loss(b)->val[0];
  double want = oracles::supcon_oracle(z, labels, 0.5);
  CHECK(got == doctest::Approx(want).epsilon(1e-10));
  // every anchor sees one positive at sim 1 and two negatives at sim 0:
  // loss = log(1 + 2 exp(-1/tau))
  CHECK(got == doctest::Approx(std::log(1.0 + 2.0 * std::exp(-2.0))).epsilon(1e-10));
}

TEST_CASE("supcon: identical embeddings give log(2N-1)") {
  Tensor z({6, 3});
  for (int64_t r = 0; r < 6; ++r) {
    z[r * 3 + 0] = 0.6;
    z[r * 3 + 1] = 0.8;
    z[r * 3 + 2] = 0.0;
  }
  std::vector<int64_t> labels{0, 0, 1, 1, 2, 2};
  ContrastiveBatch b{leaf(z), labels, 0.07};
  double got = supcon_loss(b)->val[0];
  CHECK(got == doctest::Approx(oracles::supcon_oracle(z, labels, 0.07)).epsilon(1e-8));
  CHECK(got == doctest::Approx(std::log(5.0)).epsilon(1e-9));
}

TEST_CASE("supcon: matches oracle on random batches") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    auto b = random_batch(3 + static_cast<int64_t>(seed % 3), 5, 0.07 + 0.1 * (seed % 4), seed + 100);
    double got = supcon_loss(b)->val[0];
    double want = oracles::supcon_oracle(b.embeddings->val, b.labels, b.tau);
    CHECK(got == doctest::Approx(want).epsilon(1e-8));
    CHECK(got >= 0.0);
  }
}

TEST_CASE("supcon: invariant under a joint rotation of all rows") {
  auto b = random_batch(4, 4, 0.2, 7);
  double before = supcon_loss(b)->val[0];
  // Givens rotations in planes (0,1) and (2,3)
  double c1 = std::cos(0.81), s1 = std::sin(0.81), c2 = std::cos(-1.3), s2 = std::sin(-1.3);
  Tensor z = b.embeddings->val;
  for (int64_t r = 0; r < z.size(0); ++r) {
    double a = z[r * 4 + 0], bb = z[r * 4 + 1], c = z[r * 4 + 2], d = z[r * 4 + 3];
    z[r * 4 + 0] = c1 * a - s1 * bb;
    z[r * 4 + 1] = s1 * a + c1 * bb;
    z[r * 4 + 2] = c2 * c - s2 * d;
    z[r * 4 + 3] = s2 * c + c2 * d;
  }
  ContrastiveBatch rb{leaf(z), b.labels, b.tau};
  CHECK(supcon_loss(rb)->val[0] == doctest::Approx(before).epsilon(1e-10));
}

TEST_CASE("supcon: decreases as a positive pair's similarity rises, all else fixed") {
  std::vector<int64_t> labels{0, 0, 1, 1};
  auto batch_at = [&](double theta) {
    Tensor z({4, 4});
    z[0 * 4 + 0] = 1.0;
    z[1 * 4 + 0] = std::cos(theta);
    z[1 * 4 + 1] = std::sin(theta);
    z[2 * 4 + 2] = 1.0;
    z[3 * 4 + 2] = 1.0;
    ContrastiveBatch b{leaf(z), labels, 0.3};
    return supcon_loss(b)->val[0];
  };
  double l1 = batch_at(1.1), l2 = batch_at(0.7), l3 = batch_at(0.3);
  CHECK(l2 < l1);
  CHECK(l3 < l2);
}

TEST_CASE("supcon: error cases") {
  auto b = random_batch(2, 3, 0.1, 11);
  b.tau = 0.0;
  CHECK_THROWS(supcon_loss(b));
  auto lonely = random_batch(2, 3, 0.1, 12);
  lonely.labels = {0, 1, 2, 3};  // nobody has a positive
  CHECK_THROWS(supcon_loss(lonely));
  auto unnorm = random_batch(2, 3, 0.1, 13);
  unnorm.embeddings = leaf(random_tensor({4, 3}, 14, 1.5, 2.0));
  CHECK_THROWS(supcon_loss(unnorm));
}

TEST_CASE("incremental KD: identity and hand case") {
  auto old_l = leaf(Tensor({1, 2}, {0.4, -1.2}));
  auto new_same = leaf(Tensor({1, 4}, {0.4, -1.2, 9.0, -7.0}));
  CHECK(incremental_kd_loss(old_l, new_same, 2.0)->val[0] == 0.0);

  auto old2 = leaf(Tensor({1, 2}, {0.0, 0.0}));
  auto new2 = leaf(Tensor({1, 2}, {1.0, -1.0}));
  double got = incremental_kd_loss(old2, new2, 1.0)->val[0];
  double want = oracles::kl_softmax_oracle(new2->val, old2->val, 1.0);
  CHECK(got == doctest::Approx(want).epsilon(1e-10));
  // direct arithmetic: p = (.5,.5), q = softmax(1,-1)
  double q0 = std::exp(1.0) / (std::exp(1.0) + std::exp(-1.0));
  double hand = 0.5 * std::log(0.5 / q0) + 0.5 * std::log(0.5 / (1.0 - q0));
  CHECK(got == doctest::Approx(hand).epsilon(1e-10));
}

TEST_CASE("incremental KD: temperature scaling against oracle") {
  Tensor olds = random_tensor({3, 4}, 21, -2, 2);
  Tensor news = random_tensor({3, 6}, 22, -2, 2);
  for (double t : {1.0, 2.0}) {
    double got = incremental_kd_loss(leaf(olds), leaf(news), t)->val[0];
    Tensor restricted({3, 4});
    for (int64_t r = 0; r < 3; ++r)
      for (int64_t c = 0; c < 4; ++c) restricted[r * 4 + c] = news[r * 6 + c];
    CHECK(got == doctest::Approx(oracles::kl_softmax_oracle(restricted, olds, t)).epsilon(1e-10));
  }
}

TEST_CASE("incremental KD: ignores novel-class columns exactly") {
  Tensor olds = random_tensor({4, 3}, 23, -1, 1);
  Tensor news = random_tensor({4, 5}, 24, -1, 1);
  double baseline = incremental_kd_loss(leaf(olds), leaf(news), 2.0)->val[0];
  Tensor poked = news;
  for (int64_t r = 0; r < 4; ++r) {
    poked[r * 5 + 3] += 37.0;
    poked[r * 5 + 4] -= 11.0;
  }
  double perturbed = incremental_kd_loss(leaf(olds), leaf(poked), 2.0)->val[0];
  CHECK(baseline == perturbed);  // bitwise
  CHECK_THROWS(incremental_kd_loss(leaf(news), leaf(olds), 2.0));
}

TEST_CASE("cicl total loss") {
  CHECK(cicl_total_loss(leaf(Tensor::scalar(0.7)), leaf(Tensor::scalar(0.3)))->val[0] == doctest::Approx(1.0));
  CHECK(cicl_total_loss(leaf(Tensor::scalar(1.9)), leaf(Tensor::scalar(0.0)))->val[0] == 1.9);
}

TEST_CASE("caption CE: uniform, perfect, oracle, masked") {
  auto uniform = leaf(Tensor({3, 16}, 0.25));
  std::vector<int64_t> tg{5, 0, 15};
  std::vector<uint8_t> mask{1, 1, 1};
  CHECK(caption_ce_loss(uniform, tg, mask)->val[0] == doctest::Approx(std::log(16.0)).epsilon(1e-12));

  Tensor sharp({2, 4}, -50.0);
  sharp[0 * 4 + 2] = 50.0;
  sharp[1 * 4 + 0] = 50.0;
  std::vector<int64_t> tg2{2, 0};
  std::vector<uint8_t> m2{1, 1};
  CHECK(caption_ce_loss(leaf(sharp), tg2, m2)->val[0] < 1e-20);

  for (uint64_t seed = 0; seed < 20; ++seed) {
    Tensor lg = random_tensor({2, 3, 7}, 30 + seed, -2, 2);
    std::vector<int64_t> t3{1, 5, 0, 6, 2, 3};
    std::vector<uint8_t> m3{1, 0, 1, 1, 1, 0};
    double got = caption_ce_loss(leaf(lg), t3, m3)->val[0];
    CHECK(got == doctest::Approx(oracles::ce_oracle(lg.reshaped({6, 7}), t3, m3)).epsilon(1e-8));
  }
  std::vector<uint8_t> all_masked{0, 0};
  CHECK_THROWS(caption_ce_loss(leaf(sharp), tg2, all_masked));
}

TEST_CASE("interaction multi-label loss: limits and oracle") {
  Tensor labels({2, 3}, {1, 0, 1, 0, 0, 1});
  Tensor agree({2, 3});
  for (int64_t i = 0; i < 6; ++i) agree[i] = labels[i] > 0.5 ? 100.0 : -100.0;
  CHECK(interaction_ml_loss(leaf(agree), labels)->val[0] < 1e-20);

  auto zeros = leaf(Tensor({2, 3}, 0.0));
  CHECK(interaction_ml_loss(zeros, labels)->val[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  for (uint64_t seed = 0; seed < 20; ++seed) {
    Tensor lg = random_tensor({4, 5}, 60 + seed, -3, 3);
    Tensor lb = random_tensor({4, 5}, 90 + seed, 0, 1);
    for (int64_t i = 0; i < lb.numel(); ++i) lb[i] = lb[i] > 0.5 ? 1.0 : 0.0;
    double got = interaction_ml_loss(leaf(lg), lb)->val[0];
    CHECK(got == doctest::Approx(oracles::bce_oracle(lg, lb)).epsilon(1e-8));
  }
}

TEST_CASE("composite losses: exact arithmetic") {
  auto s = [](double v) { return leaf(Tensor::scalar(v)); };
  CHECK(finetune_loss(s(2.0), s(1.0))->val[0] == doctest::Approx(1.5).epsilon(1e-14));
  CHECK(finetune_loss(s(0.0), s(0.0))->val[0] == 0.0);
  CHECK(finetune_loss(s(0.37), s(1.21))->val[0] == finetune_loss(s(1.21), s(0.37))->val[0]);
  CHECK(vanilla_loss(s(2.0), s(1.0))->val[0] == doctest::Approx(1.5).epsilon(1e-14));

  CHECK(kd_loss(s(1), s(1), s(1), s(1))->val[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(kd_loss(s(1), s(1), s(0), s(0))->val[0] == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(kd_loss(s(0), s(0), s(1), s(1))->val[0] == doctest::Approx(0.3).epsilon(1e-12));

  // superposition: composites are linear in their scalar inputs
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    double a = rng.uniform(0, 2), b = rng.uniform(0, 2), alpha = rng.uniform(-1, 1), beta = rng.uniform(-1, 1);
    double lhs = finetune_loss(s(alpha * a), s(beta * b))->val[0];
    double rhs = alpha * finetune_loss(s(a), s(0))->val[0] + beta * finetune_loss(s(0), s(b))->val[0];
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
    double k1 = kd_loss(s(alpha * a), s(0), s(beta * b), s(0))->val[0];
    double k2 = alpha * kd_loss(s(a), s(0), s(0), s(0))->val[0] + beta * kd_loss(s(0), s(0), s(b), s(0))->val[0];
    CHECK(k1 == doctest::Approx(k2).epsilon(1e-12));
  }
}

TEST_CASE("kl_logits: identity, hand Bernoulli case, Gibbs") {
  Tensor t = random_tensor({3, 5}, 70, -2, 2);
  CHECK(kl_logits_softmax(leaf(t), leaf(t), 2.0)->val[0] == 0.0);
  CHECK(kl_logits_bernoulli(leaf(t), leaf(t), 1.0)->val[0] == 0.0);

  // p = 0.5, q = sigmoid(1)
  auto student = leaf(Tensor({1, 1}, {1.0}));
  auto teacher = leaf(Tensor({1, 1}, {0.0}));
  double got = kl_logits_bernoulli(student, teacher, 1.0)->val[0];
  double q = 1.0 / (1.0 + std::exp(-1.0));
  double hand = 0.5 * std::log(0.5 / q) + 0.5 * std::log(0.5 / (1.0 - q));
  CHECK(got == doctest::Approx(hand).epsilon(1e-10));
  CHECK(got == doctest::Approx(oracles::kl_bernoulli_oracle(student->val, teacher->val, 1.0)).epsilon(1e-12));

  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    Tensor a({2, 4}), b({2, 4});
    for (int64_t k = 0; k < 8; ++k) {
      a[k] = rng.uniform(-4, 4);
      b[k] = rng.uniform(-4, 4);
    }
    CHECK(kl_logits_softmax(leaf(a), leaf(b), 1.5)->val[0] >= -1e-12);
    CHECK(kl_logits_bernoulli(leaf(a), leaf(b), 1.5)->val[0] >= -1e-12);
  }
}

TEST_CASE("kl_logits: matches oracles on random cases") {
  for (uint64_t seed = 0; seed < 20; ++seed) {
    Tensor s = random_tensor({3, 6}, 200 + seed, -2, 2);
    Tensor t = random_tensor({3, 6}, 300 + seed, -2, 2);
    double t1 = 1.0 + 0.5 * (seed % 3);
    CHECK(kl_logits_softmax(leaf(s), leaf(t), t1)->val[0] ==
          doctest::Approx(oracles::kl_softmax_oracle(s, t, t1)).epsilon(1e-10));
    CHECK(kl_logits_bernoulli(leaf(s), leaf(t), t1)->val[0] ==
          doctest::Approx(oracles::kl_bernoulli_oracle(s, t, t1)).epsilon(1e-10));
  }
}

TEST_CASE("losses are non-negative and finite on random inputs") {
  for (uint64_t seed = 0; seed < 30; ++seed) {
    auto b = random_batch(3, 6, 0.1 + 0.05 * (seed % 5), 400 + seed);
    double v = supcon_loss(b)->val[0];
    CHECK(v >= 0.0);
    CHECK(std::isfinite(v));
    Tensor lg = random_tensor({3, 4}, 500 + seed, -4, 4);
    Tensor lb({3, 4});
    for (int64_t i = 0; i < 12; ++i) lb[i] = (i * 7 + static_cast<int64_t>(seed)) % 3 == 0 ? 1.0 : 0.0;
    double ml = interaction_ml_loss(leaf(lg), lb)->val[0];
    CHECK(ml >= 0.0);
    CHECK(std::isfinite(ml));
  }
}

TEST_CASE("gradient checks for every differentiable loss") {
  // supcon through row normalization
  auto raw = leaf(random_tensor({6, 5}, 600, -1, 1), true);
  std::vector<int64_t> labels{0, 0, 1, 1, 2, 2};
  auto supcon_fn = [&] {
    ContrastiveBatch b{l2_normalize_rows(raw), labels, 0.2};
    return supcon_loss(b);
  };
  CHECK(fd_check(supcon_fn, {raw}, 24) < 1e-6);

  auto newl = leaf(random_tensor({3, 6}, 601, -1, 1), true);
  auto oldl = leaf(random_tensor({3, 4}, 602, -1, 1), true);
  CHECK(fd_check([&] { return incremental_kd_loss(oldl, newl, 2.0); }, {newl, oldl}, 24) < 1e-6);

  auto clg = leaf(random_tensor({2, 3, 7}, 603, -2, 2), true);
  std::vector<int64_t> tg{1, 5, 0, 6, 2, 3};
  std::vector<uint8_t> mask{1, 0, 1, 1, 1, 0};
  CHECK(fd_check([&] { return caption_ce_loss(clg, tg, mask); }, {clg}, 24) < 1e-6);

  auto ilg = leaf(random_tensor({4, 5}, 604, -2, 2), true);
  Tensor ilb = random_tensor({4, 5}, 605, 0, 1);
  for (int64_t i = 0; i < ilb.numel(); ++i) ilb[i] = ilb[i] > 0.5 ? 1.0 : 0.0;
  CHECK(fd_check([&] { return interaction_ml_loss(ilg, ilb); }, {ilg}, 24) < 1e-6);

  auto stl = leaf(random_tensor({3, 5}, 606, -2, 2), true);
  auto tcl = leaf(random_tensor({3, 5}, 607, -2, 2), true);
  CHECK(fd_check([&] { return kl_logits_softmax(stl, tcl, 1.5); }, {stl, tcl}, 24) < 1e-6);
  CHECK(fd_check([&] { return kl_logits_bernoulli(stl, tcl, 1.5); }, {stl, tcl}, 24) < 1e-6);
}
