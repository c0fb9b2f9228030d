// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "fedmoe/optim.hpp"
#include "fedmoe/rng.hpp"
#include "fedmoe/sha256.hpp"
#include "fedmoe/tensor.hpp"

using namespace fedmoe;

namespace {

Tensor rand_tensor(Shape shape, Rng& rng, double scl = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& x : t.data()) x = rng.normal() * scl;
    return t;
}

// Central finite differences against the tape's analytic gradients. The loss
// builder is re-run from scratch for every probe, so it is independent of the
// recorded graph.
template <class F>
void check_grads(std::vector<Tensor> leaves, F make_loss, double tol = 1e-4) {
    for (auto& l : leaves) l.set_requires_grad(true);
    std::vector<std::vector<double>> analytic;
    {
        Graph tape;
        Tensor loss = make_loss();
        tape.backward(loss);
        for (auto& l : leaves) {
            analytic.push_back(l.has_grad() ? l.grad() : std::vector<double>(l.numel(), 0.0));
        }
        tape.zero_all_grads();
    }
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto& data = leaves[li].data();
        for (size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            const double h = 1e-6 * std::max(1.0, std::abs(orig));
            data[i] = orig + h;
            const double up = make_loss().item();
            data[i] = orig - h;
            const double down = make_loss().item();
            data[i] = orig;
            const double fd = (up - down) / (2.0 * h);
            const double a = analytic[li][i];
            const double err = std::abs(a - fd);
            const double scale_ref = std::max({1.0, std::abs(a), std::abs(fd)});
            CHECK_MESSAGE(err <= tol * scale_ref,
                          "leaf " << li << " elem " << i << " analytic " << a << " fd " << fd);
        }
    }
}

}  // namespace

TEST_CASE("softmax uniform logits") {
    Tensor x = Tensor::zeros({4});
    Tensor y = softmax(x, 0);
    for (double v : y.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("softmax frozen values") {
    // oracle: exp/sum evaluated in extended precision
    Tensor x = Tensor::from_data({3}, {1.0, 2.0, 3.0});
    Tensor y = softmax(x, 0);
    CHECK(y.data()[0] == doctest::Approx(0.09003057317038046).epsilon(1e-9));
    CHECK(y.data()[1] == doctest::Approx(0.24472847105479767).epsilon(1e-9));
    CHECK(y.data()[2] == doctest::Approx(0.66524095577482190).epsilon(1e-9));
}

TEST_CASE("softmax shift invariance and row normalization") {
    Rng rng(7);
    for (int trial = 0; trial < 25; ++trial) {
        Tensor x = rand_tensor({3, 5}, rng, 3.0);
        const double c = rng.normal() * 10.0;
        Tensor shifted = x.clone();
        for (double& v : shifted.data()) v += c;
        Tensor a = softmax(x, -1);
        Tensor b = softmax(shifted, -1);
        for (int64_t i = 0; i < a.numel(); ++i) {
            CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-12));
            CHECK(a.data()[i] > 0.0);
            CHECK(a.data()[i] < 1.0);
        }
        for (int64_t r = 0; r < 3; ++r) {
            double sum = 0.0;
            for (int64_t j = 0; j < 5; ++j) sum += a.data()[r * 5 + j];
            CHECK(std::abs(sum - 1.0) < 1e-12);
        }
    }
}

TEST_CASE("cross entropy equals negative log softmax at the target") {
    Rng rng(11);
    for (int trial = 0; trial < 30; ++trial) {
        Tensor x = rand_tensor({1, 7}, rng, 2.0);
        const int32_t target = static_cast<int32_t>(rng.uniform_int(7));
        Tensor ls = log_softmax(x, -1);
        std::vector<int32_t> t{target};
        Tensor ce = cross_entropy_with_logits(x, t);
        CHECK(std::abs(ce.item() + ls.data()[target]) < 1e-12);
    }
}

TEST_CASE("backward of a plain sum gives all-ones") {
    Tensor x = Tensor::zeros({2, 3}, true);
    for (int64_t i = 0; i < 6; ++i) x.data()[i] = 0.5 * i;
    Graph tape;
    Tensor loss = scale(mean_all(x), 6.0);  // == sum(x)
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("constant root writes no gradients") {
    Tensor x = Tensor::zeros({3});  // requires_grad = false
    Graph tape;
    Tensor loss = mean_all(x);
    tape.backward(loss);
    CHECK(!x.has_grad());
    CHECK(!loss.has_grad());
}

TEST_CASE("gradients accumulate across repeated use") {
    Tensor x = Tensor::from_data({3}, {1.0, 2.0, 3.0}, true);
    Graph tape;
    Tensor loss = mean_all(add(x, x));
    tape.backward(loss);
    for (double g : x.grad()) CHECK(g == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("backward is bit-deterministic") {
    Rng rng(23);
    Tensor a = rand_tensor({4, 5}, rng);
    Tensor b = rand_tensor({5, 3}, rng);
    a.set_requires_grad(true);
    b.set_requires_grad(true);
    Graph tape;
    Tensor loss = mean_all(gelu(matmul(a, b)));
    tape.backward(loss);
    const std::vector<double> ga = a.grad(), gb = b.grad();
    tape.zero_all_grads();
    tape.backward(loss);
    CHECK(a.grad() == ga);  // exact bit equality
    CHECK(b.grad() == gb);
}

TEST_CASE("finite differences: elementwise and shape ops") {
    Rng rng(37);
    for (int trial = 0; trial < 8; ++trial) {
        Tensor a = rand_tensor({2, 3, 4}, rng);
        Tensor bias = rand_tensor({4}, rng);
        check_grads({a, bias}, [&]() { return mean_all(add(a, bias)); });

        Tensor b = rand_tensor({2, 3, 4}, rng);
        check_grads({a, b}, [&]() { return mean_all(mul(a, b)); });
        check_grads({a}, [&]() { return mean_all(scale(a, -1.7)); });
        check_grads({a}, [&]() { return mean_all(gelu(a)); });
        check_grads({a}, [&]() { return mean_all(permute(a, {2, 0, 1})); });
        check_grads({a}, [&]() { return mean_all(reshape(a, {4, 6})); });
        check_grads({a}, [&]() { return mean_all(slice(a, 1, 1, 2)); });
        check_grads({a}, [&]() { return mean_all(segment_mean(a, 1, 2)); });
        check_grads({a, b}, [&]() { return mse(a, b); });
        check_grads({a, b}, [&]() { return mean_all(concat({a, b}, 2)); });

        Tensor w = rand_tensor({2, 3}, rng);
        check_grads({a, w}, [&]() { return mean_all(row_scale(a, w)); });
    }
}

TEST_CASE("finite differences: matmul variants") {
    Rng rng(41);
    for (int trial = 0; trial < 8; ++trial) {
        Tensor a = rand_tensor({3, 4}, rng);
        Tensor b = rand_tensor({4, 2}, rng);
        check_grads({a, b}, [&]() { return mean_all(matmul(a, b)); });

        Tensor ba = rand_tensor({2, 3, 4}, rng);
        check_grads({ba, b}, [&]() { return mean_all(matmul(ba, b)); });

        Tensor bb = rand_tensor({2, 4, 3}, rng);
        check_grads({ba, bb}, [&]() { return mean_all(matmul(ba, bb)); });
    }
}

TEST_CASE("finite differences: softmax family and normalization") {
    Rng rng(43);
    for (int trial = 0; trial < 8; ++trial) {
        Tensor x = rand_tensor({2, 3, 5}, rng, 2.0);
        // downstream weighting so the gradient is not uniform
        Tensor w = rand_tensor({2, 3, 5}, rng);
        check_grads({x}, [&]() { return mean_all(mul(softmax(x, -1), w)); });
        check_grads({x}, [&]() { return mean_all(mul(log_softmax(x, -1), w)); });
        check_grads({x}, [&]() { return mean_all(mul(softmax(x, 1), w)); });

        std::vector<int32_t> targets;
        for (int i = 0; i < 6; ++i) targets.push_back(static_cast<int32_t>(rng.uniform_int(5)));
        check_grads({x}, [&]() { return cross_entropy_with_logits(x, targets); });

        Tensor g = rand_tensor({5}, rng);
        Tensor be = rand_tensor({5}, rng);
        check_grads({x, g, be}, [&]() { return mean_all(mul(layer_norm(x, g, be), w)); });
    }
}

TEST_CASE("finite differences: embedding lookup") {
    Rng rng(47);
    Tensor table = rand_tensor({6, 3}, rng);
    std::vector<int32_t> ids{0, 2, 5, 2};
    check_grads({table}, [&]() {
        return mean_all(embedding_lookup(table, ids, {2, 2}));
    });
}

TEST_CASE("finite differences: random composite") {
    Rng rng(53);
    for (int trial = 0; trial < 8; ++trial) {
        Tensor a = rand_tensor({2, 4}, rng);
        Tensor b = rand_tensor({4, 4}, rng);
        Tensor c = rand_tensor({4}, rng);
        check_grads({a, b, c}, [&]() {
            Tensor h = gelu(matmul(a, b));
            h = add(h, c);
            return mean_all(mul(softmax(h, -1), h));
        });
    }
}

TEST_CASE("non-finite op output throws") {
    Tensor big = Tensor::full({2}, 1e308);
    CHECK_THROWS_AS((void)scale(big, 1e10), std::runtime_error);
    Tensor x = Tensor::from_data({2}, {1.0, -1.0});
    CHECK_THROWS_AS((void)mul(x, Tensor::full({3}, 1.0)), std::invalid_argument);
}

TEST_CASE("shape and argument errors") {
    Tensor a = Tensor::zeros({2, 3});
    CHECK_THROWS_AS((void)matmul(a, Tensor::zeros({4, 2})), std::invalid_argument);
    CHECK_THROWS_AS((void)add(a, Tensor::zeros({2})), std::invalid_argument);  // not a suffix
    CHECK_THROWS_AS((void)reshape(a, {7}), std::invalid_argument);
    std::vector<int32_t> bad{9};
    CHECK_THROWS_AS((void)embedding_lookup(Tensor::zeros({4, 2}), bad, {1}), std::out_of_range);
    Graph tape;
    Tensor nonscalar = Tensor::zeros({2}, true);
    CHECK_THROWS_AS(tape.backward(nonscalar), std::invalid_argument);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    Tensor p = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
    Adam adam({p}, 0.1);
    p.grad();  // allocated, all zeros
    adam.step();
    CHECK(p.data() == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("adam: one hand-evaluated step") {
    // g=1, lr=0.1, defaults: mhat=1, vhat=1, update = 0.1 / (1 + 1e-8)
    Tensor p = Tensor::from_data({1}, {1.0}, true);
    Adam adam({p}, 0.1);
    p.grad()[0] = 1.0;
    adam.step();
    const double expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
    CHECK(p.data()[0] == doctest::Approx(expected).epsilon(1e-15));
}

TEST_CASE("adam: parameters update independently") {
    Tensor p1 = Tensor::from_data({1}, {0.3}, true);
    Tensor p2 = Tensor::from_data({1}, {-0.7}, true);
    Adam both({p1, p2}, 0.05);
    p1.grad()[0] = 0.4;
    p2.grad()[0] = -1.1;
    both.step();

    Tensor q1 = Tensor::from_data({1}, {0.3}, true);
    Tensor q2 = Tensor::from_data({1}, {-0.7}, true);
    Adam only1({q1}, 0.05), only2({q2}, 0.05);
    q1.grad()[0] = 0.4;
    q2.grad()[0] = -1.1;
    only1.step();
    only2.step();
    CHECK(p1.data()[0] == q1.data()[0]);
    CHECK(p2.data()[0] == q2.data()[0]);
}

TEST_CASE("sha256 known vectors") {
    Sha256 h;
    CHECK(h.hex_digest() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    CHECK(Sha256::hex_of("abc", 3) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("rng and seed derivation are deterministic") {
    Rng a(99), b(99);
    for (int i = 0; i < 10; ++i) CHECK(a.next_u64() == b.next_u64());
    CHECK(derive_seed(1, "stage", 0) == derive_seed(1, "stage", 0));
    CHECK(derive_seed(1, "stage", 0) != derive_seed(1, "stage", 1));
    CHECK(derive_seed(1, "stage") != derive_seed(1, "other"));
    CHECK(derive_seed(1, "stage") != derive_seed(2, "stage"));
}
