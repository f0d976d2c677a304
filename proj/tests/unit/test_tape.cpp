#include <doctest.h>

#include <functional>
#include <memory>
#include <vector>

#include "egopose/rng.hpp"
#include "egopose/tape.hpp"

using namespace egopose;
using namespace egopose::ad;

namespace {

using Build = std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>;

MatXd random_mat(Rng& rng, int r, int c, double scale = 1.0) {
  MatXd m(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) m(i, j) = rng.normal(0.0, scale);
  return m;
}

// Builds the graph, reduces the output to a scalar against a fixed random
// weighting, and compares every input gradient against central differences.
double max_rel_err(const Build& build, std::vector<MatXd> inputs,
                   uint64_t seed = 99, double eps = 1e-6) {
  auto run = [&](const std::vector<MatXd>& vals,
                 std::vector<MatXd>* grads) -> double {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& v : vals) vars.push_back(tape.make(v, true));
    Var<double> out = build(tape, vars);
    Rng wrng(seed);
    MatXd w = random_mat(wrng, static_cast<int>(out->value.rows()),
                         static_cast<int>(out->value.cols()));
    Var<double> loss = sum_all(tape, hadamard(tape, out, tape.constant(w)));
    if (grads) {
      tape.backward(loss);
      grads->clear();
      for (size_t i = 0; i < vars.size(); ++i)
        grads->push_back(vars[i]->grad.size() ? vars[i]->grad
                                              : MatXd::Zero(vals[i].rows(),
                                                            vals[i].cols()));
    }
    return loss->value(0, 0);
  };

  std::vector<MatXd> analytic;
  run(inputs, &analytic);

  double worst = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    for (int c = 0; c < inputs[i].cols(); ++c) {
      for (int r = 0; r < inputs[i].rows(); ++r) {
        const double keep = inputs[i](r, c);
        inputs[i](r, c) = keep + eps;
        const double hi = run(inputs, nullptr);
        inputs[i](r, c) = keep - eps;
        const double lo = run(inputs, nullptr);
        inputs[i](r, c) = keep;
        const double numeric = (hi - lo) / (2.0 * eps);
        const double a = analytic[i](r, c);
        const double rel =
            std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
        worst = std::max(worst, rel);
      }
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("gradients of arithmetic ops match finite differences") {
  Rng rng(1);

  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return add(t, v[0], v[1]);
            },
            {random_mat(rng, 3, 4), random_mat(rng, 3, 4)}) < 1e-7);

  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return sub(t, v[0], v[1]);
            },
            {random_mat(rng, 3, 4), random_mat(rng, 3, 4)}) < 1e-7);

  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return matmul(t, v[0], v[1]);
            },
            {random_mat(rng, 3, 5), random_mat(rng, 5, 2)}) < 1e-7);

  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return hadamard(t, v[0], v[1]);
            },
            {random_mat(rng, 4, 4), random_mat(rng, 4, 4)}) < 1e-7);

  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return scale(t, transpose(t, v[0]), 2.5);
            },
            {random_mat(rng, 3, 6)}) < 1e-7);

  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return add_rowvec(t, v[0], v[1]);
            },
            {random_mat(rng, 5, 3), random_mat(rng, 1, 3)}) < 1e-7);
}

TEST_CASE("gradients of nonlinearities match finite differences") {
  Rng rng(2);
  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return gelu(t, v[0]);
            },
            {random_mat(rng, 4, 5)}) < 1e-7);
  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return sigmoid(t, v[0]);
            },
            {random_mat(rng, 4, 5)}) < 1e-7);
  // ReLU: keep probe points away from the kink.
  MatXd x = random_mat(rng, 4, 5);
  x = x.unaryExpr([](double v) { return std::abs(v) < 0.05 ? v + 0.2 : v; });
  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return relu(t, v[0]);
            },
            {x}) < 1e-6);
  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return softmax_rows(t, v[0]);
            },
            {random_mat(rng, 3, 6)}) < 1e-7);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(3);
  Tape<double> t;
  Var<double> y = softmax_rows(t, t.make(random_mat(rng, 7, 9), false));
  for (int r = 0; r < 7; ++r)
    CHECK(y->value.row(r).sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("layernorm gradient and normalization") {
  Rng rng(4);
  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return layernorm_rows(t, v[0], v[1], v[2]);
            },
            {random_mat(rng, 5, 8), random_mat(rng, 1, 8),
             random_mat(rng, 1, 8)}) < 1e-6);

  Tape<double> t;
  MatXd ones = MatXd::Ones(1, 8), zeros = MatXd::Zero(1, 8);
  Var<double> y = layernorm_rows(t, t.make(random_mat(rng, 3, 8), false),
                                 t.make(ones, false), t.make(zeros, false));
  for (int r = 0; r < 3; ++r) {
    CHECK(y->value.row(r).mean() == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(y->value.row(r).squaredNorm() / 8.0 ==
          doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("structural op gradients") {
  Rng rng(5);
  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return concat_cols(t, {v[0], v[1], v[2]});
            },
            {random_mat(rng, 3, 2), random_mat(rng, 3, 4),
             random_mat(rng, 3, 1)}) < 1e-7);
  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return concat_rows(t, {v[0], v[1]});
            },
            {random_mat(rng, 2, 4), random_mat(rng, 5, 4)}) < 1e-7);
  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return slice_cols(t, v[0], 1, 3);
            },
            {random_mat(rng, 4, 6)}) < 1e-7);
  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return slice_rows(t, v[0], 2, 2);
            },
            {random_mat(rng, 5, 3)}) < 1e-7);
  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return mean_rows(t, v[0]);
            },
            {random_mat(rng, 6, 4)}) < 1e-7);
  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return reshape(t, v[0], 2, 6);
            },
            {random_mat(rng, 4, 3)}) < 1e-7);
  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return repeat_rows(t, v[0], 3);
            },
            {random_mat(rng, 4, 5)}) < 1e-7);
  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return rowwise_sum(t, v[0]);
            },
            {random_mat(rng, 4, 7)}) < 1e-7);
  CHECK(max_rel_err(
            [](Tape<double>& t, std::vector<Var<double>>& v) {
              return mean_all(t, v[0]);
            },
            {random_mat(rng, 3, 3)}) < 1e-7);
}

TEST_CASE("gather forward, zero padding, and scatter-add gradient") {
  Rng rng(6);
  auto idx = std::make_shared<MatXi>(3, 4);
  *idx << 0, 5, 2, -1,
          7, 7, 1, 3,
          -1, 4, 6, 0;

  MatXd src = random_mat(rng, 4, 2);  // 8 flat elements, column-major
  Tape<double> t;
  Var<double> out = gather(t, t.make(src, false), idx);
  CHECK(out->value(0, 0) == src(0, 0));
  CHECK(out->value(0, 1) == src(1, 1));  // flat index 5 = col 1, row 1
  CHECK(out->value(0, 3) == 0.0);
  CHECK(out->value(2, 0) == 0.0);

  CHECK(max_rel_err(
            [idx](Tape<double>& tt, std::vector<Var<double>>& v) {
              return gather(tt, v[0], idx);
            },
            {src}) < 1e-7);
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(7);
  MatXd target = random_mat(rng, 5, 3, 10.0);
  CHECK(max_rel_err(
            [&target](Tape<double>& t, std::vector<Var<double>>& v) {
              return mpjpe_to_target(t, v[0], target);
            },
            {random_mat(rng, 5, 3, 10.0)}) < 1e-6);

  std::vector<int> labels = {2, 0, 3, 1};
  CHECK(max_rel_err(
            [&labels](Tape<double>& t, std::vector<Var<double>>& v) {
              return softmax_cross_entropy(t, v[0], labels);
            },
            {random_mat(rng, 4, 4)}) < 1e-6);

  MatXd mt = random_mat(rng, 3, 4);
  CHECK(max_rel_err(
            [&mt](Tape<double>& t, std::vector<Var<double>>& v) {
              return mse_to_target(t, v[0], mt);
            },
            {random_mat(rng, 3, 4)}) < 1e-7);
}

TEST_CASE("mpjpe_to_target uses subgradient zero at coincident points") {
  MatXd target = MatXd::Zero(2, 3);
  target.row(1) << 1.0, 2.0, 2.0;  // norm 3
  Tape<double> t;
  Var<double> pred = t.make(MatXd::Zero(2, 3), true);
  Var<double> loss = mpjpe_to_target(t, pred, target);
  CHECK(loss->value(0, 0) == doctest::Approx(1.5));
  t.backward(loss);
  CHECK(pred->grad.row(0).norm() == 0.0);   // coincident joint: zero subgradient
  CHECK(pred->grad.row(1).norm() > 0.0);
}

TEST_CASE("cross entropy on uniform and saturated logits") {
  Tape<double> t;
  Var<double> uniform = t.make(MatXd::Zero(3, 4), false);
  CHECK(softmax_cross_entropy(t, uniform, {0, 1, 2})->value(0, 0) ==
        doctest::Approx(std::log(4.0)).epsilon(1e-12));

  MatXd dominant = MatXd::Zero(1, 4);
  dominant(0, 2) = 1e6;
  Var<double> sat = t.make(dominant, false);
  CHECK(softmax_cross_entropy(t, sat, {2})->value(0, 0) ==
        doctest::Approx(0.0).epsilon(1e-9));

  CHECK_THROWS_AS(softmax_cross_entropy(t, uniform, {0, 1, 4}), LabelError);
}

TEST_CASE("parameters accumulate gradients across reuse and batching") {
  ParamStore<double> store;
  Rng rng(8);
  Param<double>& w = store.add_normal("w", 2, 2, rng, 1.0);
  store.zero_grads();

  Tape<double> tape;
  Var<double> a = tape.leaf(w);
  Var<double> b = tape.leaf(w);
  CHECK(a == b);  // leaf cache: one node per param per tape

  // loss = sum(w ∘ w) => dloss/dw = 2w.
  Var<double> loss = sum_all(tape, hadamard(tape, a, b));
  tape.backward(loss);
  CHECK((w.grad - 2.0 * w.value).norm() < 1e-12);
}

TEST_CASE("constants do not receive gradients") {
  Tape<double> t;
  Var<double> c = t.constant(MatXd::Ones(2, 2));
  Var<double> p = t.make(MatXd::Ones(2, 2), true);
  Var<double> loss = sum_all(t, hadamard(t, c, p));
  t.backward(loss);
  CHECK(c->grad.size() == 0);
  CHECK(p->grad.size() == 4);
}

TEST_CASE("ParamStore bookkeeping") {
  ParamStore<double> store;
  store.add("a", 2, 3);
  store.add_constant("b", 1, 4, 7.0);
  CHECK(store.count() == 2);
  CHECK(store.total_scalars() == 10);
  CHECK(store.find("b")->value(0, 3) == 7.0);
  CHECK(store.find("nope") == nullptr);
  CHECK_THROWS_AS(store.add("a", 1, 1), InvalidInput);
}
