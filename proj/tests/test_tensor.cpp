#include <cmath>

#include "cmr/losses.hpp"
#include "cmr/nets.hpp"
#include "cmr/optim.hpp"
#include "doctest.h"
#include "support/gradcheck.hpp"

using namespace cmr;
using ad::Tensor;


TEST_CASE("finite-difference gradients, single precision") {
  for (const auto& r : gradcheck::run<float>(11)) {
    INFO(r.op << " max error " << r.max_error);
    CHECK(r.shapes >= 5);
    CHECK(r.max_error < gradcheck::tolerance_for(true));
  }
}

TEST_CASE("finite-difference gradients, double precision") {
  for (const auto& r : gradcheck::run<double>(12)) {
    INFO(r.op << " max error " << r.max_error);
    CHECK(r.shapes >= 5);
    CHECK(r.max_error < gradcheck::tolerance_for(false));
  }
}

TEST_CASE("orientation_loss gradient on raw probabilities") {
  // Direct check: perturbing one entry breaks the row-sum precondition by
  // the step, so keep the step far below 1e-4.
  std::mt19937_64 rng(13);
  for (int k = 0; k < 5; ++k) {
    const int n = gradcheck::draw(rng, 1, 5);
    Eigen::ArrayXd p(n * 8);
    std::uniform_real_distribution<double> u(0.2, 1.0);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < 8; ++j) p[i * 8 + j] = u(rng);
      p.segment(i * 8, 8) /= p.segment(i * 8, 8).sum();
    }
    gradcheck::Case<double> c{{Tensor<double>::parameter({n, 8}, p), gradcheck::onehot_rows<double>(n, 8, rng)},
                              [](const auto& in) { return orientation_loss(in[0], in[1]); }};
    CHECK(gradcheck::check(c, rng, 1e-7) < 1e-6);
  }
}

TEST_CASE("Bits3 head probabilities and their gradient") {
  std::mt19937_64 rng(14);
  for (int k = 0; k < 5; ++k) {
    const int n = gradcheck::draw(rng, 1, 4);
    gradcheck::Case<float> c{{gradcheck::param<float>({n, 3}, rng, -2, 2)},
                             [](const auto& in) { return class_log_probabilities(in[0], HeadType::Bits3); }};
    CHECK(gradcheck::check(c, rng) < 1e-3);
    const TensorF probs = class_probabilities(c.inputs[0], HeadType::Bits3);
    for (int i = 0; i < n; ++i) CHECK(probs.value().segment(i * 8, 8).sum() == doctest::Approx(1.0).epsilon(1e-5));
  }
  // Code index b2 b1 b0: logit 0 drives b2, logit 2 drives b0.
  const TensorF z = TensorF::from_data({1, 3}, Eigen::ArrayXf::Map(std::array<float, 3>{-20, -20, 20}.data(), 3));
  const TensorF p = class_probabilities(z, HeadType::Bits3);
  CHECK(p.value()[1] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(predict_code(p.value()) == OrientCode::parse("001"));
}

TEST_CASE("backward accumulates into leaves") {
  const auto x = Tensor<double>::parameter({3}, Eigen::ArrayXd::LinSpaced(3, 1, 3));
  const auto loss = ad::sum(ad::mul(x, x));
  loss.backward();
  const Eigen::ArrayXd once = x.grad();
  CHECK(once.isApprox(2 * x.value()));
  loss.backward();
  CHECK(x.grad().isApprox(2 * once));
  x.zero_grad();
  CHECK(x.grad().isZero());
}

TEST_CASE("NoGradGuard records nothing") {
  const auto x = Tensor<double>::parameter({2}, Eigen::ArrayXd::Ones(2));
  Tensor<double> y = x;
  {
    ad::NoGradGuard guard;
    y = ad::sum(ad::scale(x, 3.0));
  }
  CHECK(y.item() == 6.0);
  CHECK_FALSE(y.needs_grad());
  const auto z = ad::sum(ad::scale(x, 3.0));
  CHECK(z.needs_grad());
}

TEST_CASE("tensor errors") {
  const auto a = Tensor<double>::parameter({2, 3}, Eigen::ArrayXd::Ones(6));
  const auto b = Tensor<double>::parameter({3, 2}, Eigen::ArrayXd::Ones(6));
  CHECK_THROWS_AS(ad::add(a, b), ad::ShapeError);
  CHECK_THROWS_AS(a.backward(), ad::ShapeError);
  CHECK_THROWS_AS(Tensor<double>::from_data({2, 2}, Eigen::ArrayXd::Ones(3)), ad::ShapeError);
  CHECK_THROWS_AS(ad::matmul(a, a), ad::ShapeError);
  CHECK_THROWS_AS(ad::mul(a, b).set_requires_grad(false), std::logic_error);
  CHECK_THROWS_AS(a.item(), ad::ShapeError);
}

TEST_CASE("optimizer steps") {
  Eigen::ArrayXd p = Eigen::ArrayXd::Constant(1, 1.0);
  ad::sgd_step<double>(p, Eigen::ArrayXd::Constant(1, 0.5), 0.1);
  CHECK(p[0] == doctest::Approx(0.95).epsilon(1e-15));

  // First Adam step: bias-corrected moments give lr * g / (|g| + eps).
  Eigen::ArrayXd q = Eigen::ArrayXd::Constant(1, 1.0);
  ad::AdamState<double> st;
  ad::adam_step<double>(q, Eigen::ArrayXd::Constant(1, 0.5), st, ad::AdamConfig{});
  CHECK(q[0] == doctest::Approx(1.0 - 1e-3 * 0.5 / (0.5 + 1e-8)).epsilon(1e-14));
  CHECK(st.step == 1);

  CHECK_THROWS_AS(ad::sgd_step<double>(p, Eigen::ArrayXd::Ones(2), 0.1), ad::ShapeError);
}

TEST_CASE("Adam decreases a convex quadratic monotonically") {
  // Adam moves each coordinate at most about lr per step, so 100 steps at
  // 0.01 never reach the minimum and cannot overshoot it.
  const Eigen::ArrayXd target = Eigen::ArrayXd::LinSpaced(4, 0.5, 1.0);
  const Eigen::Array4d offset(-2.5, 2.0, -1.5, 3.0);
  const auto x = Tensor<double>::parameter({4}, target + offset);
  ad::Adam<double> opt({{"x", x}}, ad::AdamConfig{0.01});
  const double first = (offset * offset).sum();
  double last = first + 1;
  for (int i = 0; i < 100; ++i) {
    opt.zero_grad();
    const auto d = ad::sub(x, Tensor<double>::from_data({4}, target));
    const auto loss = ad::sum(ad::mul(d, d));
    CHECK(loss.item() < last);
    last = loss.item();
    loss.backward();
    opt.step();
  }
  CHECK(last < 0.5 * first);
}

TEST_CASE("Adam rejects non-finite gradients by name") {
  const auto x = Tensor<double>::parameter({2}, Eigen::ArrayXd::Ones(2));
  ad::Adam<double> opt({{"weights", x}});
  ad::sum(ad::scale(x, std::nan(""))).backward();
  try {
    opt.step();
    FAIL("expected NonFiniteError");
  } catch (const ad::NonFiniteError& e) {
    CHECK(std::string(e.what()).find("weights") != std::string::npos);
  }
  CHECK((x.value() == 1.0).all());
}

TEST_CASE("orientation loss values") {
  const auto uniform = Tensor<double>::full({3, 8}, 1.0 / 8);
  const auto onehot = Tensor<double>::from_data({3, 8}, [] {
    Eigen::ArrayXd v = Eigen::ArrayXd::Zero(24);
    v[0] = v[8 + 5] = v[16 + 7] = 1;
    return v;
  }());
  CHECK(orientation_loss(uniform, onehot).item() == doctest::Approx(std::log(8.0)).epsilon(1e-12));
  // Clamp: a zero probability on the true class costs -log(1e-12).
  Eigen::ArrayXd p = Eigen::ArrayXd::Zero(8);
  p[1] = 1;
  CHECK(orientation_loss(Tensor<double>::from_data({1, 8}, p), Tensor<double>::from_data({1, 8}, Eigen::VectorXd::Unit(8, 0).array()))
            .item() == doctest::Approx(-std::log(1e-12)));
  CHECK_THROWS_AS(orientation_loss(Tensor<double>::full({1, 8}, 0.2), Tensor<double>::full({1, 8}, 0.0)),
                  std::invalid_argument);
  CHECK_THROWS_AS(orientation_loss(Tensor<double>::full({1, 7}, 1.0 / 7), Tensor<double>::full({1, 7}, 0.0)),
                  ad::ShapeError);
  // Training form agrees with the probability form.
  std::mt19937_64 rng(3);
  const auto logits = gradcheck::constant<double>({3, 8}, rng, -2, 2);
  CHECK(orientation_nll(ad::log_softmax(logits), onehot).item() ==
        doctest::Approx(orientation_loss(ad::softmax(logits), onehot).item()).epsilon(1e-12));
}

TEST_CASE("segmentation loss values") {
  // P = 0.5 everywhere: ln 2 per class-pixel, times the weight sum.
  const ad::Shape s{2, 4, 3, 5};
  const auto half = Tensor<double>::full(s, 0.5);
  std::mt19937_64 rng(4);
  const auto target = gradcheck::constant<double>(s, rng, 0, 1);
  CHECK(segmentation_loss(half, target, {1, 1, 1, 1}).item() == doctest::Approx(4 * std::log(2.0)).epsilon(1e-12));
  CHECK(segmentation_loss(half, target, {1, 2, 3, 4}).item() == doctest::Approx(10 * std::log(2.0)).epsilon(1e-12));
  CHECK(segmentation_loss(target, ad::Tensor<double>::full(s, 0.0), {1, 1, 1, 1}).item() > 0);
  // Logit form matches the probability form away from the clamp.
  const auto z = gradcheck::constant<double>(s, rng, -4, 4);
  CHECK(segmentation_loss_logits(z, target, {0.5, 1, 2, 1}).item() ==
        doctest::Approx(segmentation_loss(ad::sigmoid(z), target, {0.5, 1, 2, 1}).item()).epsilon(1e-10));
  CHECK_THROWS_AS(segmentation_loss(Tensor<double>::full({1, 3, 2, 2}, 0.5), Tensor<double>::full({1, 3, 2, 2}, 0.5), {1, 1, 1, 1}),
                  std::invalid_argument);
  CHECK_THROWS_AS(segmentation_loss(half, target, {1, 1, 1}), std::invalid_argument);
  CHECK(integral_loss(ad::Tensor<double>::scalar(1.5), ad::Tensor<double>::scalar(2.0)).item() == 3.5);
}

TEST_CASE("dice") {
  Eigen::ArrayXi a = Eigen::ArrayXi::Zero(10), b = Eigen::ArrayXi::Zero(10);
  a.head(4) = 1;
  CHECK(dice(a, a) == 1.0);
  b.tail(4) = 1;
  CHECK(dice(a, b) == 0.0);
  b.setZero();
  b.segment(2, 4) = 1;  // overlap 2 of 4 and 4
  CHECK(dice(a, b) == 0.5);
  CHECK(dice(Eigen::ArrayXi::Zero(3), Eigen::ArrayXi::Zero(3)) == 1.0);
  CHECK_THROWS_AS(dice(a, Eigen::ArrayXi::Zero(3)), std::invalid_argument);
}
