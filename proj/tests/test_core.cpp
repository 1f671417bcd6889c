#include <doctest.h>

#include <cmath>

#include "oscar/core/nn.hpp"
#include "oscar/core/ops.hpp"
#include "support/gradcheck.hpp"

using namespace oscar;
using oscar::testing::require_grad_match;

namespace {
Var leaf_randn(Shape s, Rng& rng, Real std = 1.0) {
    return make_leaf(Tensor::randn(std::move(s), rng, std), true);
}

// random values kept at distance > margin from every kink location
Var leaf_away(Shape s, Rng& rng, const std::vector<Real>& kinks, Real margin = 0.05) {
    Tensor t = Tensor::randn(std::move(s), rng);
    for (auto& v : t.vec())
        for (Real k : kinks)
            if (std::abs(v - k) < margin) v = k + (v >= k ? margin : -margin) * 2;
    return make_leaf(std::move(t), true);
}

Var leaf_pos(Shape s, Rng& rng, Real lo = 0.2, Real hi = 2.0) {
    return make_leaf(Tensor::rand_uniform(std::move(s), rng, lo, hi), true);
}
}  // namespace

TEST_CASE("tensor shape and reshape contracts") {
    Tensor t(Shape{2, 3}, std::vector<Real>{1, 2, 3, 4, 5, 6});
    CHECK(t.numel() == 6);
    CHECK(t.dim(1) == 3);
    CHECK_THROWS_AS(t.reshaped(Shape{4}), ShapeError);
    CHECK(t.reshaped(Shape{3, 2}).dim(0) == 3);
    CHECK_THROWS_AS(Tensor(Shape{2}, std::vector<Real>{1, 2, 3}), ShapeError);
    CHECK(Tensor::scalar(7.0).item() == 7.0);
}

TEST_CASE("rng determinism and stream derivation") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.uniform(0, 1) == b.uniform(0, 1));
    Rng base(7);
    Rng c1 = base.child("speckle");
    Rng c2 = base.child("speckle");
    Rng c3 = base.child("augment");
    CHECK(c1.uniform(0, 1) == c2.uniform(0, 1));
    Rng c1b = base.child("speckle");
    CHECK(c1b.normal(0, 1) != doctest::Approx(c3.normal(0, 1)).epsilon(1e-12));
}

TEST_CASE("gamma speckle moments at looks=4") {
    Rng rng(123);
    const int n = 1000000;
    Real sum = 0, sumsq = 0;
    for (int i = 0; i < n; ++i) {
        Real v = rng.gamma(4.0, 0.25);
        sum += v;
        sumsq += v * v;
    }
    Real mean = sum / n;
    Real var = sumsq / n - mean * mean;
    CHECK(mean == doctest::Approx(1.0).epsilon(0.01));
    CHECK(var == doctest::Approx(0.25).epsilon(0.02));
}

TEST_CASE("backward handles value reuse and constants") {
    Var x = make_leaf(Tensor::scalar(3.0), true);
    Var y = add(mul(x, x), x);  // x^2 + x
    backward(y);
    CHECK(x->grad[0] == doctest::Approx(7.0));  // 2*3 + 1

    Var c = constant(Tensor::scalar(2.0));
    Var z = mul(x, c);
    backward(z);
    CHECK(c->grad.numel() == 0);  // constants never allocate gradients
}

TEST_CASE("no-grad mode builds no graph") {
    Var x = make_leaf(Tensor::scalar(1.0), true);
    NoGradGuard ng;
    Var y = mul(x, x);
    CHECK_FALSE(y->requires_grad);
    CHECK(y->parents.empty());
}

TEST_CASE("elementwise binary gradients") {
    Rng rng(1);
    Var a = leaf_randn({3, 4}, rng), b = leaf_pos({3, 4}, rng);
    require_grad_match([&] { return sum_all(mul(add(a, b), sub(a, b))); }, {a, b});
    require_grad_match([&] { return sum_all(divv(a, b)); }, {a, b});
    require_grad_match([&] { return mean_all(adds(muls(a, 2.5), -1.0)); }, {a});
}

TEST_CASE("elementwise unary gradients") {
    Rng rng(2);
    Var p = leaf_pos({2, 5}, rng);
    Var x = leaf_randn({2, 5}, rng);
    require_grad_match([&] { return sum_all(exp_v(x)); }, {x});
    require_grad_match([&] { return sum_all(log_v(p)); }, {p});
    require_grad_match([&] { return sum_all(sqrt_v(p)); }, {p});
    require_grad_match([&] { return sum_all(square_v(x)); }, {x});
    require_grad_match([&] { return sum_all(pow_scalar(p, 2.5)); }, {p});
    require_grad_match([&] { return sum_all(sigmoid_v(x)); }, {x});
    require_grad_match([&] { return sum_all(silu_v(x)); }, {x});
    require_grad_match([&] { return sum_all(gelu_v(x)); }, {x});
    require_grad_match([&] { return sum_all(softplus_v(x)); }, {x});
    Var xr = leaf_away({2, 5}, rng, {0.0});
    require_grad_match([&] { return sum_all(relu_v(xr)); }, {xr});
    Var xc = leaf_away({2, 5}, rng, {-0.5, 0.5});
    require_grad_match([&] { return sum_all(square_v(clamp_v(xc, -0.5, 0.5))); }, {xc});
}

TEST_CASE("dropout scaling keeps expectation and is deterministic per seed") {
    Rng data_rng(3);
    Var x = leaf_pos({50, 50}, data_rng, 1.0, 1.0);  // all ones
    Rng r1(99), r2(99);
    Var y1 = dropout(x, 0.3, r1);
    Var y2 = dropout(x, 0.3, r2);
    Real mean = 0;
    for (std::size_t i = 0; i < y1->value.numel(); ++i) {
        CHECK(y1->value[i] == y2->value[i]);
        mean += y1->value[i];
    }
    mean /= static_cast<Real>(y1->value.numel());
    CHECK(mean == doctest::Approx(1.0).epsilon(0.05));
    require_grad_match(
        [&] {
            Rng r(5);
            return sum_all(dropout(x, 0.3, r));
        },
        {x});
}

TEST_CASE("broadcast add gradients") {
    Rng rng(4);
    Var x = leaf_randn({2, 3, 4}, rng), b = leaf_randn({4}, rng);
    require_grad_match([&] { return sum_all(square_v(add_broadcast_suffix(x, b))); },
                       {x, b});
    Var img = leaf_randn({2, 3, 4, 4}, rng), cb = leaf_randn({2, 3}, rng);
    require_grad_match([&] { return sum_all(square_v(add_channel_bias(img, cb))); },
                       {img, cb});
}

TEST_CASE("matmul gradients for all transpose flags") {
    Rng rng(5);
    for (bool ta : {false, true})
        for (bool tb : {false, true}) {
            Var a = leaf_randn(ta ? Shape{4, 3} : Shape{3, 4}, rng);
            Var b = leaf_randn(tb ? Shape{5, 4} : Shape{4, 5}, rng);
            require_grad_match([&] { return sum_all(square_v(matmul(a, b, ta, tb))); },
                               {a, b});
        }
}

TEST_CASE("bmm gradients for all transpose flags") {
    Rng rng(6);
    for (bool ta : {false, true})
        for (bool tb : {false, true}) {
            Var a = leaf_randn(ta ? Shape{2, 4, 3} : Shape{2, 3, 4}, rng);
            Var b = leaf_randn(tb ? Shape{2, 5, 4} : Shape{2, 4, 5}, rng);
            require_grad_match([&] { return sum_all(square_v(bmm(a, b, ta, tb))); },
                               {a, b});
        }
}

TEST_CASE("reduction gradients") {
    Rng rng(7);
    Var x = leaf_randn({2, 3, 4}, rng);
    for (std::size_t ax : {0u, 1u, 2u})
        require_grad_match([&] { return sum_all(square_v(reduce_sum(x, ax))); }, {x});
    require_grad_match([&] { return sum_all(square_v(reduce_mean(x, 1))); }, {x});
    require_grad_match([&] { return square_v(mean_all(x)); }, {x});
}

TEST_CASE("softmax and sum-normalization gradients") {
    Rng rng(8);
    Var x = leaf_randn({3, 6}, rng);
    Var w = leaf_randn({3, 6}, rng);
    require_grad_match([&] { return sum_all(mul(softmax_last(x), w)); }, {x});
    Var p = leaf_pos({3, 6}, rng);
    require_grad_match([&] { return sum_all(mul(normalize_sum_last(p), w)); }, {p});
    // shift invariance of softmax
    Tensor shifted = x->value;
    for (auto& v : shifted.vec()) v += 17.0;
    Var xs = make_leaf(shifted, false);
    NoGradGuard ng;
    Var s0 = softmax_last(x), s1 = softmax_last(xs);
    for (std::size_t i = 0; i < s0->value.numel(); ++i)
        CHECK(s0->value[i] == doctest::Approx(s1->value[i]).epsilon(1e-12));
}

TEST_CASE("layer norm gradient") {
    Rng rng(9);
    Var x = leaf_randn({4, 8}, rng);
    Var g = leaf_pos({8}, rng), b = leaf_randn({8}, rng);
    require_grad_match([&] { return sum_all(square_v(layer_norm(x, g, b))); }, {x, g, b},
                       2e-4);
}

TEST_CASE("group norm gradient") {
    Rng rng(10);
    Var x = leaf_randn({2, 8, 3, 3}, rng);
    Var g = leaf_pos({8}, rng), b = leaf_randn({8}, rng);
    require_grad_match([&] { return sum_all(square_v(group_norm4(x, 4, g, b))); },
                       {x, g, b}, 2e-4);
}

TEST_CASE("conv2d gradients (stride and padding)") {
    Rng rng(11);
    Var x = leaf_randn({2, 3, 6, 6}, rng);
    Var w = leaf_randn({4, 3, 3, 3}, rng, 0.3);
    Var b = leaf_randn({4}, rng);
    require_grad_match([&] { return sum_all(square_v(conv2d(x, w, b, 1, 1))); }, {x, w, b});
    require_grad_match([&] { return sum_all(square_v(conv2d(x, w, b, 2, 1))); }, {x, w, b});
    Var w1 = leaf_randn({4, 3, 1, 1}, rng);
    require_grad_match([&] { return sum_all(square_v(conv2d(x, w1, b, 1, 0))); },
                       {x, w1, b});
}

TEST_CASE("pooling and upsampling gradients") {
    Rng rng(12);
    Var x = leaf_randn({2, 3, 4, 4}, rng);
    require_grad_match([&] { return sum_all(square_v(avg_pool2(x))); }, {x});
    require_grad_match([&] { return sum_all(square_v(upsample_nearest2(x))); }, {x});
}

TEST_CASE("movement op gradients") {
    Rng rng(13);
    Var x = leaf_randn({2, 3, 4, 4}, rng);
    require_grad_match([&] { return sum_all(square_v(permute_0213(x))); }, {x});
    require_grad_match([&] { return sum_all(square_v(patchify(x, 2))); }, {x});
    require_grad_match([&] { return sum_all(square_v(reshape(x, {6, 16}))); }, {x});
    require_grad_match([&] { return sum_all(square_v(slice_axis(x, 1, 1, 2))); }, {x});
    Var y = leaf_randn({2, 2, 4, 4}, rng);
    require_grad_match(
        [&] { return sum_all(square_v(concat_axis({x, y}, 1))); }, {x, y});
}

TEST_CASE("patchify is a bijection") {
    Rng rng(14);
    Tensor img = Tensor::randn({1, 2, 4, 4}, rng);
    Var x = make_leaf(img, false);
    NoGradGuard ng;
    Var p = patchify(x, 2);
    CHECK(p->value.shape() == Shape{1, 4, 8});
    Real sum_in = 0, sum_out = 0;
    for (auto v : img.vec()) sum_in += v;
    for (std::size_t i = 0; i < p->value.numel(); ++i) sum_out += p->value[i];
    CHECK(sum_in == doctest::Approx(sum_out).epsilon(1e-12));
    // token 0 is the top-left patch of channel-major data
    CHECK(p->value[0] == img.vec()[0]);
}

TEST_CASE("embedding gradient and validation") {
    Rng rng(15);
    Var table = leaf_randn({5, 3}, rng);
    std::vector<std::int64_t> ids{0, 2, 2, 4};
    require_grad_match([&] { return sum_all(square_v(embedding(table, ids, 2, 2))); },
                       {table});
    std::vector<std::int64_t> bad{0, 7};
    CHECK_THROWS_AS(embedding(table, bad, 1, 2), ValidationError);
}

TEST_CASE("bilinear grid resample identity and constancy") {
    Rng rng(16);
    Tensor g = Tensor::randn({16, 3}, rng);
    Tensor same = bilinear_resize_grid(g, 4, 4, 4, 4);
    for (std::size_t i = 0; i < g.numel(); ++i)
        CHECK(same[i] == doctest::Approx(g[i]).epsilon(1e-12));
    Tensor c = Tensor::full({4, 2}, 3.5);
    Tensor up = bilinear_resize_grid(c, 2, 2, 5, 5);
    for (std::size_t i = 0; i < up.numel(); ++i) CHECK(up[i] == doctest::Approx(3.5));
}

TEST_CASE("composite attention block end-to-end gradient") {
    Rng rng(17);
    const std::size_t B = 2, T = 5, d = 8, h = 2, dh = d / h;
    Var x = leaf_randn({B, T, d}, rng, 0.5);
    Var wq = leaf_randn({d, d}, rng, 0.3);
    Var wk = leaf_randn({d, d}, rng, 0.3);
    Var wv = leaf_randn({d, d}, rng, 0.3);
    auto attn = [&] {
        Var flat = reshape(x, {B * T, d});
        auto heads = [&](const Var& w) {
            return permute_0213(reshape(matmul(flat, w, false, true), {B, T, h, dh}));
        };
        Var q = reshape(heads(wq), {B * h, T, dh});
        Var k = reshape(heads(wk), {B * h, T, dh});
        Var v = reshape(heads(wv), {B * h, T, dh});
        Var scores = muls(bmm(q, k, false, true), 1.0 / std::sqrt(static_cast<Real>(dh)));
        Var ctx = bmm(softmax_last(scores), v);
        return sum_all(square_v(ctx));
    };
    require_grad_match(attn, {x, wq, wk, wv}, 2e-4);
}

TEST_CASE("adam with warmup and cosine schedule minimizes a quadratic") {
    Var w = make_leaf(Tensor::full({4}, 5.0), true);
    AdamConfig cfg;
    cfg.lr = 0.2;
    cfg.warmup_steps = 10;
    cfg.total_steps = 300;
    Adam opt({w}, cfg);
    CHECK(opt.lr_at(0) == doctest::Approx(0.02));
    CHECK(opt.lr_at(9) == doctest::Approx(0.2));
    CHECK(opt.lr_at(299) < 1e-4);
    for (int i = 0; i < 300; ++i) {
        opt.zero_grad();
        Var loss = sum_all(square_v(w));
        backward(loss);
        opt.step();
    }
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(w->value[i]) < 0.05);
}

TEST_CASE("param store serialization round-trip and hashing") {
    Rng rng(18);
    ParamStore a;
    a.add("layer.W", Tensor::randn({3, 4}, rng));
    a.add("layer.b", Tensor::zeros({4}), false);
    auto blob = a.serialize();
    ParamStore b;
    b.add("layer.W", Tensor::zeros({3, 4}));
    b.add("layer.b", Tensor::zeros({4}));
    b.deserialize(blob);
    for (std::size_t i = 0; i < 12; ++i)
        CHECK(b.at("layer.W")->value[i] == a.at("layer.W")->value[i]);
    CHECK(a.content_sha256() == b.content_sha256());
    ParamStore c;
    c.add("other.W", Tensor::zeros({3, 4}));
    c.add("layer.b", Tensor::zeros({4}));
    CHECK_THROWS_AS(c.deserialize(blob), ArtifactError);
}
