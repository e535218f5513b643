#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "oracles.hpp"
#include "samcl/tensor.hpp"

using namespace samcl;

TEST_CASE("matmul identity and scalar cases", "[tensor]") {
    Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor y = matmul(Tensor::identity(2), a);
    CHECK(y.values() == a.values());

    Tensor s = matmul(Tensor::from_data({1, 1}, {2}), Tensor::from_data({1, 1}, {3}));
    CHECK(s.item() == 6.0);
}

TEST_CASE("matmul against the naive oracle", "[tensor]") {
    Rng rng(11);
    for (auto [m, k, n] : {std::tuple<std::size_t, std::size_t, std::size_t>{3, 4, 2},
                           {1, 7, 5},
                           {8, 8, 8},
                           {5, 1, 9}}) {
        Tensor a = oracles::random_tensor({m, k}, rng);
        Tensor b = oracles::random_tensor({k, n}, rng);
        Tensor y = matmul(a, b);
        auto ref = oracles::naive_matmul(a.values(), b.values(), m, k, n);
        CHECK(oracles::max_abs_diff(y.values(), ref) < 1e-12);

        // matmul_nt(a, bT) must agree with a * b
        Tensor bt = Tensor::zeros({n, k});
        for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < n; ++j) bt.data()[j * k + i] = b.data()[i * n + j];
        Tensor y2 = matmul_nt(a, bt);
        CHECK(oracles::max_abs_diff(y2.values(), ref) < 1e-12);
    }
}

TEST_CASE("matmul gradient vs central finite differences", "[tensor]") {
    Rng rng(17);
    Tensor b = oracles::random_tensor({4, 2}, rng);
    auto f = [&](const Tensor& x) { return sum(matmul(x, b)); };
    CHECK(grad_check(f, oracles::random_tensor({3, 4}, rng), 1e-5) < 1e-6);

    Tensor a = oracles::random_tensor({3, 4}, rng);
    auto g = [&](const Tensor& x) { return sum(matmul(a, x)); };
    CHECK(grad_check(g, oracles::random_tensor({4, 2}, rng), 1e-5) < 1e-6);
}

TEST_CASE("grad_check on the quadratic has an exact analytic gradient", "[tensor]") {
    Tensor x = Tensor::from_data({3}, {1, 2, 3});
    auto f = [](const Tensor& t) { return sum(mul(t, t)); };
    CHECK(grad_check(f, x, 1e-5) < 1e-7);

    // the analytic gradient itself is [2, 4, 6]
    Tensor y = Tensor::from_data({3}, {1, 2, 3}).set_requires_grad(true);
    y.zero_grad();
    {
        GradTape tape;
        TapeScope scope(tape);
        tape.backward(sum(mul(y, y)));
    }
    CHECK(y.grad()[0] == Catch::Approx(2.0));
    CHECK(y.grad()[1] == Catch::Approx(4.0));
    CHECK(y.grad()[2] == Catch::Approx(6.0));
}

TEST_CASE("grad_check layernorm-gelu-sum chain", "[tensor]") {
    Rng rng(23);
    Tensor gamma = oracles::random_tensor({8}, rng, 0.5);
    for (std::size_t i = 0; i < gamma.size(); ++i) gamma.data()[i] += 1.0;
    Tensor beta = oracles::random_tensor({8}, rng, 0.2);
    auto f = [&](const Tensor& x) { return sum(gelu(layer_norm_rows(x, gamma, beta))); };
    CHECK(grad_check(f, oracles::random_tensor({2, 8}, rng), 1e-5) < 1e-4);
}

TEST_CASE("grad_check softmax cross entropy", "[tensor]") {
    Rng rng(29);
    std::vector<int> labels = {2, 0, 4};
    auto f = [&](const Tensor& x) { return cross_entropy_logits(x, labels); };
    CHECK(grad_check(f, oracles::random_tensor({3, 5}, rng), 1e-5) < 1e-5);
}

TEST_CASE("mean_pool_hw trivial and oracle cases", "[tensor]") {
    Tensor ones = Tensor::full({1, 4, 4, 8}, 1.0);
    Tensor pooled = mean_pool_hw(ones);
    REQUIRE(pooled.shape() == Shape{1, 8});
    for (std::size_t i = 0; i < pooled.size(); ++i) CHECK(pooled.data()[i] == 1.0);

    Tensor two = Tensor::from_data({1, 2, 1, 1}, {0.0, 2.0});
    CHECK(mean_pool_hw(two).item() == 1.0);

    Rng rng(31);
    Tensor x = oracles::random_tensor({2, 3, 3, 4}, rng);
    Tensor y = mean_pool_hw(x);
    auto ref = oracles::loop_mean_pool(x.values(), 2, 3, 3, 4);
    CHECK(oracles::max_abs_diff(y.values(), ref) < 1e-14);

    CHECK_THROWS_AS(mean_pool_hw(Tensor::zeros({2, 3})), dimension_error);
}

TEST_CASE("every differentiable op passes grad_check on seeded inputs", "[tensor][property]") {
    Rng rng(37);
    const double tol = 1e-4;

    auto check = [&](auto&& f, Shape shape, double scale = 1.0) {
        Tensor x = oracles::random_tensor(shape, rng, scale);
        CAPTURE(shape_str(shape));
        CHECK(grad_check(f, x, 1e-5) < tol);
    };

    Tensor other = oracles::random_tensor({4, 5}, rng);
    check([&](const Tensor& x) { return sum(add(x, other)); }, {4, 5});
    check([&](const Tensor& x) { return sum(sub(other, x)); }, {4, 5});
    check([&](const Tensor& x) { return sum(mul(x, other)); }, {4, 5});
    Tensor denom = oracles::random_tensor({4, 5}, rng);
    for (std::size_t i = 0; i < denom.size(); ++i) denom.data()[i] = 2.0 + std::fabs(denom.data()[i]);
    check([&](const Tensor& x) { return sum(divide(x, denom)); }, {4, 5});
    check([&](const Tensor& x) { return sum(divide(denom, scalar_add(mul(x, x), 1.0))); }, {4, 5});
    check([&](const Tensor& x) { return sum(scalar_mul(x, -1.7)); }, {3, 3});
    check([&](const Tensor& x) { return sum(scalar_add(x, 0.3)); }, {3, 3});
    check([&](const Tensor& x) { return sum(gelu(x)); }, {4, 4});
    check([&](const Tensor& x) { return sum(sigmoid(x)); }, {4, 4});
    check([&](const Tensor& x) { return sum(softplus(x)); }, {4, 4});
    check([&](const Tensor& x) { return sum(softmax_rows(x)); }, {3, 6});
    check([&](const Tensor& x) { return mean(mul(softmax_rows(x), other)); }, {4, 5});
    check([&](const Tensor& x) { return sum(reshape(x, {20})); }, {4, 5});
    check([&](const Tensor& x) { return sum(slice_cols(x, 1, 4)); }, {4, 5});
    check([&](const Tensor& x) {
        return sum(concat_cols({slice_cols(x, 0, 2), slice_cols(x, 2, 5)}));
    }, {4, 5});
    Tensor rowv = oracles::random_tensor({5}, rng);
    check([&](const Tensor& x) { return sum(mul(add_rowvec(x, rowv), other)); }, {4, 5});
    Tensor colv = oracles::random_tensor({4}, rng);
    check([&](const Tensor& x) { return sum(mul(mul_colvec(x, colv), other)); }, {4, 5});
    check([&](const Tensor& x) { return mean(mul(x, x)); }, {7});
    check([&](const Tensor& x) { return sum(mul(mean_rows(x), mean_rows(other))); }, {4, 5});
    check([&](const Tensor& x) { return sum(mean_pool_hw(x)); }, {2, 3, 3, 4});
    check([&](const Tensor& x) { return sum(mul(depatchify(x, 2, 2, 3), depatchify(x, 2, 2, 3))); },
          {4, 9});
    // gradient w.r.t. the row-vector and gamma/beta sides
    Tensor mat = oracles::random_tensor({4, 5}, rng);
    check([&](const Tensor& v) { return sum(mul(add_rowvec(mat, v), other)); }, {5});
    Tensor g0 = oracles::random_tensor({5}, rng, 0.3);
    Tensor b0 = oracles::random_tensor({5}, rng, 0.3);
    check([&](const Tensor& x) { return sum(mul(layer_norm_rows(x, g0, b0), other)); }, {4, 5});
    check([&](const Tensor& g) { return sum(mul(layer_norm_rows(mat, g, b0), other)); }, {5});
    check([&](const Tensor& b) { return sum(mul(layer_norm_rows(mat, g0, b), other)); }, {5});
    check([&](const Tensor& x) { return sum(mul(matmul_nt(x, other), mat)); }, {4, 5});
}

TEST_CASE("matmul associativity on well-conditioned inputs", "[tensor][property]") {
    Rng rng(41);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor a = oracles::random_tensor({6, 6}, rng, 0.5);
        Tensor b = oracles::random_tensor({6, 6}, rng, 0.5);
        Tensor c = oracles::random_tensor({6, 6}, rng, 0.5);
        Tensor left = matmul(matmul(a, b), c);
        Tensor right = matmul(a, matmul(b, c));
        CHECK(oracles::max_rel_diff(left.values(), right.values()) < 1e-12);
    }
}

TEST_CASE("backward pass is bit-deterministic", "[tensor][property]") {
    auto run = [] {
        Rng rng(43);
        Tensor x = oracles::random_tensor({6, 6}, rng).set_requires_grad(true);
        Tensor w = oracles::random_tensor({6, 6}, rng).set_requires_grad(true);
        x.zero_grad();
        w.zero_grad();
        GradTape tape;
        TapeScope scope(tape);
        Tensor y = sum(gelu(matmul(x, softmax_rows(w))));
        tape.backward(y);
        auto gx = x.grad();
        auto gw = w.grad();
        gx.insert(gx.end(), gw.begin(), gw.end());
        return gx;
    };
    CHECK(run() == run());
}

TEST_CASE("gradients stay zero off the backward path", "[tensor]") {
    Tensor x = Tensor::from_data({2}, {1, 2}).set_requires_grad(true);
    Tensor unused = Tensor::from_data({2}, {3, 4}).set_requires_grad(true);
    x.zero_grad();
    unused.zero_grad();
    GradTape tape;
    TapeScope scope(tape);
    Tensor y = sum(mul(x, x));
    Tensor z = sum(mul(unused, unused)); // recorded but not part of the loss
    tape.backward(y);
    CHECK(unused.grad() == std::vector<double>{0.0, 0.0});
    CHECK(x.grad()[0] == Catch::Approx(2.0));
    (void)z;
}

TEST_CASE("shape errors name both shapes", "[tensor]") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({2, 3});
    CHECK_THROWS_WITH(matmul(a, b), Catch::Matchers::ContainsSubstring("[2,3]") &&
                                        Catch::Matchers::ContainsSubstring("matmul"));
    CHECK_THROWS_AS(add(a, Tensor::zeros({3, 2})), dimension_error);
    CHECK_THROWS_WITH(add(a, Tensor::zeros({3, 2})),
                      Catch::Matchers::ContainsSubstring("[2,3]") &&
                          Catch::Matchers::ContainsSubstring("[3,2]"));
    CHECK_THROWS_AS(add_rowvec(a, Tensor::zeros({2})), dimension_error);
    CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1, 2, 3}), dimension_error);
}

TEST_CASE("tape is reusable and clears", "[tensor]") {
    Tensor x = Tensor::from_data({2}, {1, 2}).set_requires_grad(true);
    GradTape tape;
    {
        TapeScope scope(tape);
        x.zero_grad();
        tape.backward(sum(mul(x, x)));
    }
    CHECK(tape.recorded_ops() > 0);
    tape.clear();
    CHECK(tape.recorded_ops() == 0);
    // without an active tape, ops do not record
    Tensor y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK(tape.recorded_ops() == 0);
}

TEST_CASE("grad_check rejects non-finite functions", "[tensor]") {
    auto f = [](const Tensor& x) {
        Tensor y = divide(Tensor::full(x.shape(), 1.0), sub(x, x));
        return sum(y);
    };
    CHECK_THROWS_AS(grad_check(f, Tensor::from_data({2}, {1.0, 2.0}), 1e-5), samcl::error);
}
