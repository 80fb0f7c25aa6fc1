#include <catch_amalgamated.hpp>

#include <cmath>

#include "roadclip/adam.hpp"
#include "roadclip/rng.hpp"
#include "roadclip/tensor.hpp"
#include "test_support.hpp"

using namespace roadclip;
using testsupport::check_leaf_grads;
using testsupport::random_tensor;
using testsupport::rel_err;

namespace {

// Per-op gradient audit: build a scalar readout, backward once, then compare
// every leaf coordinate against central differences.  Tolerance 1e-5 per op.
void audit(std::vector<Tensor<double>> leaves, const std::function<Tensor<double>()>& build) {
    for (auto& l : leaves) l.zero_grad();
    Tensor<double> out = build();
    backward(out);
    auto eval = [&] {
        NoGradGuard ng;
        return build().item();
    };
    auto st = check_leaf_grads(leaves, eval);
    INFO("coords checked: " << st.coords);
    CHECK(st.max_rel < 1e-5);
}

}  // namespace

TEST_CASE("matmul identity and shapes") {
    auto i2 = Tensor<float>::from_values({2, 2}, {1, 0, 0, 1});
    auto m = Tensor<float>::from_values({2, 2}, {1, 2, 3, 4});
    auto p = matmul(i2, m);
    CHECK(p.values()[0] == 1.0f);
    CHECK(p.values()[1] == 2.0f);
    CHECK(p.values()[2] == 3.0f);
    CHECK(p.values()[3] == 4.0f);

    auto a = Tensor<float>::zeros({1, 0});
    auto b = Tensor<float>::zeros({0, 3});
    auto c = matmul(a, b);
    REQUIRE(c.shape() == std::vector<int>{1, 3});
    for (float v : c.values()) CHECK(v == 0.0f);

    auto bad = Tensor<float>::zeros({3, 2});
    CHECK_THROWS_AS(matmul(m, bad), ValidationError);
}

TEST_CASE("softmax basics") {
    auto x = Tensor<float>::from_values({2}, {0, 0});
    auto y = softmax(x);
    CHECK(y.values()[0] == Catch::Approx(0.5));
    CHECK(y.values()[1] == Catch::Approx(0.5));

    auto big = Tensor<float>::from_values({2}, {1000, 1000});
    auto yb = softmax(big);
    CHECK(yb.values()[0] == Catch::Approx(0.5));
    CHECK(yb.values()[1] == Catch::Approx(0.5));

    auto z = Tensor<double>::from_values({2}, {0.0, std::log(3.0)});
    auto yz = softmax(z);
    CHECK(yz.values()[0] == Catch::Approx(0.25).margin(1e-12));
    CHECK(yz.values()[1] == Catch::Approx(0.75).margin(1e-12));
}

TEST_CASE("softmax rows sum to one and shift invariance") {
    Rng rng(401);
    auto x = random_tensor({5, 7}, rng, false, 3.0);
    auto y = softmax(x, 1);
    for (int i = 0; i < 5; ++i) {
        double s = 0;
        for (int j = 0; j < 7; ++j) s += y.values()[i * 7 + j];
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
    auto shifted = add(x, Tensor<double>::scalar(17.5));
    auto y2 = softmax(shifted, 1);
    for (size_t i = 0; i < y.values().size(); ++i)
        CHECK(std::abs(y.values()[i] - y2.values()[i]) < 1e-6);

    // axis 0 normalizes down columns
    auto yc = softmax(x, 0);
    for (int j = 0; j < 7; ++j) {
        double s = 0;
        for (int i = 0; i < 5; ++i) s += yc.values()[i * 7 + j];
        CHECK(std::abs(s - 1.0) < 1e-6);
    }
}

TEST_CASE("layer_norm constant vector goes to bias") {
    auto x = Tensor<float>::from_values({4}, {2.5f, 2.5f, 2.5f, 2.5f});
    auto g = Tensor<float>::filled({4}, 1.0f);
    auto b = Tensor<float>::zeros({4});
    auto y = layer_norm(x, g, b);
    for (float v : y.values()) CHECK(std::abs(v) < 1e-6f);
}

TEST_CASE("gelu and mean basics") {
    auto x = Tensor<float>::from_values({3}, {0.0f, 10.0f, -10.0f});
    auto y = gelu(x);
    CHECK(y.values()[0] == 0.0f);
    CHECK(y.values()[1] == Catch::Approx(10.0).margin(1e-5));
    CHECK(std::abs(y.values()[2]) < 1e-5f);

    auto m = mean(Tensor<float>::from_values({2}, {2, 4}));
    CHECK(m.item() == 3.0f);
}

TEST_CASE("l2_normalize contract") {
    auto v = Tensor<float>::from_values({2}, {3, 4});
    auto u = l2_normalize(v);
    CHECK(u.values()[0] == Catch::Approx(0.6));
    CHECK(u.values()[1] == Catch::Approx(0.8));

    auto already = Tensor<float>::from_values({2}, {0.6f, 0.8f});
    auto u2 = l2_normalize(already);
    CHECK(u2.values()[0] == Catch::Approx(0.6).margin(1e-6));
    CHECK(u2.values()[1] == Catch::Approx(0.8).margin(1e-6));

    auto zero = Tensor<float>::zeros({3});
    auto uz = l2_normalize(zero);
    for (float x : uz.values()) CHECK(x == 0.0f);

    // norm is 0 or 1 within 1e-5 across random draws
    Rng rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        auto t = random_tensor({6}, rng, false, 2.0);
        auto n = l2_normalize(t);
        double s = 0;
        for (double x : n.values()) s += x * x;
        CHECK(std::abs(std::sqrt(s) - 1.0) < 1e-5);
    }
}

TEST_CASE("cosine_sim endpoints") {
    auto v = Tensor<float>::from_values({3}, {1, 2, 3});
    CHECK(cosine_sim(v, v).item() == Catch::Approx(1.0));
    auto nv = scale(v, -1.0f);
    CHECK(cosine_sim(v, nv).item() == Catch::Approx(-1.0));
    auto e1 = Tensor<float>::from_values({2}, {1, 0});
    auto e2 = Tensor<float>::from_values({2}, {0, 1});
    CHECK(cosine_sim(e1, e2).item() == Catch::Approx(0.0).margin(1e-7));
    auto zero = Tensor<float>::zeros({2});
    CHECK_THROWS_AS(cosine_sim(e1, zero), NumericError);
}

TEST_CASE("backward scalar chain and constants") {
    auto x = Tensor<float>::scalar(3.0f, true);
    auto y = mul(x, x);
    backward(y);
    CHECK(x.grad()[0] == 6.0f);

    // constant-output composite has zero gradient
    auto v = Tensor<double>::from_values({4}, {0.3, -1.2, 0.8, 2.0}, true);
    auto s = sum(softmax(v));
    backward(s);
    for (double g : v.grad()) CHECK(std::abs(g) < 1e-12);

    auto mat = Tensor<float>::zeros({2, 2}, true);
    CHECK_THROWS_AS(backward(mat), ValidationError);
}

TEST_CASE("backward is deterministic and accumulates over reuse") {
    Rng rng(402);
    auto x = random_tensor({3, 3}, rng);
    auto build = [&] {
        auto y = matmul(x, x);  // same node used twice
        return sum(mul(y, y));
    };
    x.zero_grad();
    auto r1 = build();
    backward(r1);
    std::vector<double> g1(x.grad().begin(), x.grad().end());
    x.zero_grad();
    auto r2 = build();
    backward(r2);
    for (size_t i = 0; i < g1.size(); ++i) CHECK(x.grad()[i] == g1[i]);  // bit-identical
}

TEST_CASE("gradient audit per op") {
    Rng rng(500);

    SECTION("matmul") {
        auto a = random_tensor({3, 4}, rng);
        auto b = random_tensor({4, 2}, rng);
        audit({a, b}, [&] { return sum(gelu(matmul(a, b))); });
    }
    SECTION("vecmat") {
        auto v = random_tensor({5}, rng);
        auto w = random_tensor({5, 3}, rng);
        audit({v, w}, [&] { return mean(vecmat(v, w)); });
    }
    SECTION("add broadcast and scale") {
        auto a = random_tensor({3, 4}, rng);
        auto bias = random_tensor({4}, rng);
        auto s = random_tensor({}, rng);
        audit({a, bias, s}, [&] { return sum(mul(add(add(a, bias), s), s)); });
    }
    SECTION("sub and mul") {
        auto a = random_tensor({2, 3}, rng);
        auto b = random_tensor({2, 3}, rng);
        audit({a, b}, [&] { return sum(mul(sub(a, b), a)); });
    }
    SECTION("softmax rows") {
        auto x = random_tensor({3, 5}, rng, true, 2.0);
        auto pick = random_tensor({3, 5}, rng, false);
        audit({x}, [&] { return sum(mul(softmax(x, 1), pick)); });
    }
    SECTION("softmax vector") {
        auto x = random_tensor({6}, rng, true, 2.0);
        auto pick = random_tensor({6}, rng, false);
        audit({x}, [&] { return sum(mul(softmax(x), pick)); });
    }
    SECTION("layer_norm") {
        auto x = random_tensor({3, 6}, rng);
        auto g = random_tensor({6}, rng);
        auto b = random_tensor({6}, rng);
        auto pick = random_tensor({3, 6}, rng, false);
        audit({x, g, b}, [&] { return sum(mul(layer_norm(x, g, b), pick)); });
    }
    SECTION("gelu exp transpose") {
        auto x = random_tensor({4, 3}, rng);
        audit({x}, [&] { return mean(exp(scale(transpose(gelu(x)), 0.3))); });
    }
    SECTION("mean_rows logsumexp diag") {
        auto x = random_tensor({4, 4}, rng, true, 2.0);
        audit({x}, [&] {
            auto l = logsumexp_rows(x);
            auto d = diag(x);
            return add(sum(sub(l, d)), mean(mean_rows(x)));
        });
    }
    SECTION("slices and concats") {
        auto x = random_tensor({4, 6}, rng);
        auto y = random_tensor({2, 6}, rng);
        audit({x, y}, [&] {
            auto top = slice_rows(x, 0, 2);
            auto cols = slice_cols(x, 1, 4);
            auto cat = concat_rows(std::vector<Tensor<double>>{top, y});
            auto cc = concat_cols(std::vector<Tensor<double>>{cat, slice_cols(cat, 0, 2)});
            return add(sum(gelu(cc)), element(row(cols, 1), 2));
        });
    }
    SECTION("stack_scalars and reshape") {
        auto a = random_tensor({}, rng);
        auto b = random_tensor({}, rng);
        audit({a, b}, [&] {
            auto v = stack_scalars(std::vector<Tensor<double>>{a, b, mul(a, b)});
            return sum(gelu(reshape(v, {3, 1})));
        });
    }
    SECTION("take_rows with duplicate ids") {
        auto table = random_tensor({5, 3}, rng);
        audit({table}, [&] { return sum(gelu(take_rows(table, {1, 3, 1, 0}))); });
    }
    SECTION("l2_normalize and cosine_sim") {
        auto a = random_tensor({5}, rng);
        auto b = random_tensor({5}, rng);
        audit({a, b}, [&] { return add(cosine_sim(a, b), sum(l2_normalize(a))); });
    }
    SECTION("matmul backward against the all-ones pattern") {
        // grad of sum(A B) w.r.t. A is ones * B^T; checked via the oracle
        auto a = random_tensor({2, 2}, rng);
        auto b = random_tensor({2, 2}, rng);
        audit({a, b}, [&] { return sum(matmul(a, b)); });
    }
}

TEST_CASE("no-grad guard suppresses graph construction") {
    auto x = Tensor<float>::scalar(2.0f, true);
    NoGradGuard ng;
    auto y = mul(x, x);
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("adam behavior") {
    SECTION("zero gradient leaves parameters unchanged") {
        auto p = Tensor<float>::from_values({3}, {1, 2, 3}, true);
        std::vector<Tensor<float>> params{p};
        AdamState<float> st(params);
        p.zero_grad();
        adam_step(params, st, {});
        CHECK(p.values()[0] == 1.0f);
        CHECK(p.values()[1] == 2.0f);
        CHECK(p.values()[2] == 3.0f);
    }
    SECTION("constant gradient step size tends to lr") {
        auto p = Tensor<double>::scalar(0.0, true);
        std::vector<Tensor<double>> params{p};
        AdamState<double> st(params);
        AdamHyper h;
        h.lr = 0.01;
        double prev = 0.0;
        double step = 0.0;
        for (int i = 0; i < 400; ++i) {
            p.zero_grad();
            p.node()->grad[0] = 2.0;  // constant positive gradient
            adam_step(params, st, h);
            step = prev - p.values()[0];
            prev = p.values()[0];
        }
        CHECK(step == Catch::Approx(h.lr).epsilon(0.01));
    }
    SECTION("descent on a quadratic") {
        auto x = Tensor<double>::scalar(1.0, true);
        std::vector<Tensor<double>> params{x};
        AdamState<double> st(params);
        AdamHyper h;
        h.lr = 0.1;
        x.zero_grad();
        auto loss = mul(x, x);
        backward(loss);
        adam_step(params, st, h);
        CHECK(x.values()[0] < 1.0);
    }
}

TEST_CASE("end-to-end composite matches finite differences") {
    // miniature two-layer readout exercising most ops in one graph
    Rng rng(913);
    auto x = random_tensor({4, 5}, rng, false);
    auto w1 = random_tensor({5, 6}, rng, true, 0.5);
    auto b1 = random_tensor({6}, rng, true, 0.1);
    auto w2 = random_tensor({6, 3}, rng, true, 0.5);
    auto g = random_tensor({6}, rng);
    auto b = random_tensor({6}, rng);
    std::vector<Tensor<double>> leaves{w1, b1, w2, g, b};
    auto build = [&] {
        auto h = gelu(add(matmul(x, w1), b1));
        auto n = layer_norm(h, g, b);
        auto s = softmax(matmul(n, w2), 1);
        auto pooled = mean_rows(s);
        return sum(mul(pooled, pooled));
    };
    for (auto& l : leaves) l.zero_grad();
    auto out = build();
    backward(out);
    auto eval = [&] {
        NoGradGuard ng;
        return build().item();
    };
    auto st = check_leaf_grads(leaves, eval);
    CHECK(st.max_rel < 1e-4);
}
