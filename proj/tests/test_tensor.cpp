#include <doctest.h>

#include "asr/errors.hpp"
#include "asr/ops.hpp"
#include "asr/tensor.hpp"

using namespace asr;
using nd::Graph;
using nd::Tensor;

TEST_CASE("tensor shape and storage basics") {
  Tensor t({2, 3});
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  t.at(1, 2) = 5.0;
  CHECK(t.at(1, 2) == 5.0);

  Tensor alias = t;
  alias.at(0, 0) = 7.0;
  CHECK(t.at(0, 0) == 7.0);  // copies alias storage

  Tensor deep = t.clone();
  deep.at(0, 0) = -1.0;
  CHECK(t.at(0, 0) == 7.0);

  CHECK(Tensor::scalar(3.5).item() == 3.5);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
}

TEST_CASE("reshape aliases storage and grads") {
  Tensor t({2, 3});
  Tensor v = t.reshaped({6});
  v.at(5) = 9.0;
  CHECK(t.at(1, 2) == 9.0);
  CHECK(t.same_storage(v));
  CHECK_THROWS_AS(t.reshaped({4}), std::invalid_argument);

  t.set_requires_grad();
  CHECK(v.requires_grad());  // flag lives on the storage
}

TEST_CASE("grad buffers are lazy and accumulate") {
  Tensor t({3});
  CHECK_THROWS_AS(t.grad(), std::logic_error);
  t.set_requires_grad();
  CHECK(t.grad_if() == nullptr);
  t.accumulate_grad(std::vector<double>{1.0, 2.0, 3.0});
  t.accumulate_grad(std::vector<double>{1.0, 1.0, 1.0});
  CHECK(t.grad()[1] == 3.0);
  t.zero_grad();
  CHECK(t.grad()[1] == 0.0);
}

TEST_CASE("backward runs once and only once") {
  Tensor x({4}, {1.0, 2.0, 3.0, 4.0});
  x.set_requires_grad();
  Graph g;
  Tensor loss = nd::sum(&g, x);
  g.backward(loss);
  CHECK(x.grad()[0] == 1.0);
  CHECK(g.consumed());
  Tensor loss2 = Tensor::scalar(0.0);
  loss2.set_requires_grad();
  CHECK_THROWS_AS(g.backward(loss2), std::logic_error);
}

TEST_CASE("backward requires a scalar loss") {
  Tensor x({2}, {1.0, 2.0});
  x.set_requires_grad();
  Graph g;
  Tensor y = nd::scale(&g, x, 2.0);
  CHECK_THROWS_AS(g.backward(y), std::invalid_argument);
}

TEST_CASE("non-finite op outputs are rejected") {
  Tensor x({2}, {0.0, -1.0});
  Graph g;
  CHECK_THROWS_AS(nd::vlog(&g, x), NumericError);  // log(0), log(-1)
  CHECK(nd::finite_checks_enabled());
}
