#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "oscar/core/errors.hpp"
#include "oscar/evalkit/evalkit.hpp"

using namespace oscar;
namespace fs = std::filesystem;

namespace {

constexpr Real kPi = 3.14159265358979323846;

Image img_random(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed,
                 Real lo = 0.05, Real hi = 0.95) {
    Rng rng(seed);
    Image img(h, w, c);
    for (auto& v : img.data) v = rng.uniform(lo, hi);
    return img;
}

// Smooth banded image: distinct sinusoid per channel so band pairs carry
// structure that channel permutations destroy.
Image img_smooth(std::size_t h, std::size_t w, std::size_t c, std::uint64_t seed) {
    Rng rng(seed);
    Image img(h, w, c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const Real fy = rng.uniform(0.5, 2.5), fx = rng.uniform(0.5, 2.5);
        const Real phase = rng.uniform(0.0, 6.28);
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x)
                img.at(y, x, ch) =
                    0.5 + 0.4 * std::sin(fy * Real(y) * 6.28 / Real(h) +
                                         fx * Real(x) * 6.28 / Real(w) + phase + Real(ch));
    }
    return img;
}

Tensor cloud(std::size_t n, std::size_t d, Rng& rng, const std::vector<Real>& shift = {}) {
    Tensor t(Shape{n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
            t.vec()[i * d + j] = rng.normal(0.0, 1.0) + (shift.empty() ? 0.0 : shift[j]);
    return t;
}

// Independent re-derivation of the global universal image quality index with
// plain two-pass statistics (population normalization; Q is normalization-free).
Real uiqi_oracle(const Image& img_a, const Image& img_b, std::size_t ca, std::size_t cb) {
    const std::size_t n = img_a.h * img_a.w;
    Real ma = 0, mb = 0;
    for (std::size_t y = 0; y < img_a.h; ++y)
        for (std::size_t x = 0; x < img_a.w; ++x) {
            ma += img_a.at(y, x, ca);
            mb += img_b.at(y, x, cb);
        }
    ma /= Real(n);
    mb /= Real(n);
    Real va = 0, vb = 0, cov = 0;
    for (std::size_t y = 0; y < img_a.h; ++y)
        for (std::size_t x = 0; x < img_a.w; ++x) {
            const Real da = img_a.at(y, x, ca) - ma;
            const Real db = img_b.at(y, x, cb) - mb;
            va += da * da;
            vb += db * db;
            cov += da * db;
        }
    va /= Real(n);
    vb /= Real(n);
    cov /= Real(n);
    return 4.0 * cov * ma * mb / ((va + vb) * (ma * ma + mb * mb));
}

Encoder make_tiny_teacher() {
    EncoderConfig cfg;
    cfg.depth = 4;
    cfg.embed_dim = 32;
    cfg.heads = 4;
    cfg.patch_size = 8;
    cfg.num_classes = 6;
    cfg.lora_rank = 4;
    cfg.lora_alpha = 8.0;
    cfg.lora_dropout = 0.0;
    cfg.aligned_layers = {0, 1, 2, 3};
    cfg.hier_layers = {0, 1, 2, 3};
    return Encoder(cfg, 77);
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("oscar_evalkit_" + tag + "_" +
                                            std::to_string(::getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("ssim: analytic constants, self-identity, ramp inversion, symmetry") {
    SUBCASE("constant planes match the closed form") {
        Image a(16, 16, 1), b(16, 16, 1);
        std::fill(a.data.begin(), a.data.end(), 0.2);
        std::fill(b.data.begin(), b.data.end(), 0.6);
        const Real c1 = 1e-4;
        const Real expect = (2.0 * 0.2 * 0.6 + c1) / (0.2 * 0.2 + 0.6 * 0.6 + c1);
        CHECK(std::abs(ssim(a, b) - expect) < 1e-12);
    }
    SUBCASE("self-similarity is exactly 1") {
        Image x = img_random(24, 24, 3, 11);
        CHECK(std::abs(ssim(x, x) - 1.0) < 1e-12);
    }
    SUBCASE("gradient ramp against its negative is negative") {
        Image x(32, 32, 1);
        for (std::size_t y = 0; y < 32; ++y)
            for (std::size_t j = 0; j < 32; ++j) x.at(y, j, 0) = Real(j) / 31.0;
        Image inv = x;
        for (auto& v : inv.data) v = 1.0 - v;
        CHECK(ssim(x, inv) < 0.0);
    }
    SUBCASE("symmetric in its arguments") {
        Image x = img_random(20, 20, 3, 21), y = img_random(20, 20, 3, 22);
        CHECK(std::abs(ssim(x, y) - ssim(y, x)) < 1e-9);
    }
    SUBCASE("degrades monotonically with noise amplitude") {
        Image x = img_smooth(32, 32, 3, 5);
        Rng rng(9);
        Image y1 = x, y2 = x;
        for (std::size_t i = 0; i < x.data.size(); ++i) {
            const Real n = rng.normal(0.0, 1.0);
            y1.data[i] = std::clamp(x.data[i] + 0.02 * n, 0.0, 1.0);
            y2.data[i] = std::clamp(x.data[i] + 0.25 * n, 0.0, 1.0);
        }
        CHECK(ssim(x, y1) > ssim(x, y2));
        CHECK(ssim(x, y2) < 1.0);
    }
    SUBCASE("errors") {
        Image x = img_random(16, 16, 3, 1);
        CHECK_THROWS_AS(ssim(x, img_random(16, 17, 3, 2)), ShapeError);
        CHECK_THROWS_AS(ssim(img_random(8, 8, 1, 3), img_random(8, 8, 1, 4)), ValidationError);
        Image bad = x;
        bad.data[0] = 1.5;
        CHECK_THROWS_AS(ssim(x, bad), ValidationError);
    }
}

TEST_CASE("sam: self-angle, scale invariance, orthogonality, closed forms") {
    Image x = img_random(16, 16, 3, 31);
    CHECK(std::abs(sam(x, x)) < 1e-12);

    SUBCASE("invariant to positive per-image scaling") {
        Image y = x;
        for (auto& v : y.data) v *= 0.37;
        CHECK(std::abs(sam(x, y)) < 1e-9);
    }
    SUBCASE("orthogonal unit channels give pi/2") {
        Image a(8, 8, 3), b(8, 8, 3);
        for (std::size_t p = 0; p < 64; ++p) {
            a.data[p * 3 + 0] = 1.0;
            b.data[p * 3 + 1] = 1.0;
        }
        CHECK(std::abs(sam(a, b) - kPi / 2.0) < 1e-12);
    }
    SUBCASE("(1,0) vs (1,1) gives pi/4") {
        Image a(4, 4, 2), b(4, 4, 2);
        for (std::size_t p = 0; p < 16; ++p) {
            a.data[p * 2 + 0] = 1.0;
            b.data[p * 2 + 0] = 1.0;
            b.data[p * 2 + 1] = 1.0;
        }
        CHECK(std::abs(sam(a, b) - kPi / 4.0) < 1e-12);
    }
    SUBCASE("zero vectors hit the epsilon guard without NaN") {
        Image a(4, 4, 3);  // all zeros
        Image b = img_random(4, 4, 3, 32);
        const Real v = sam(a, b);
        CHECK(std::isfinite(v));
        CHECK(std::abs(v - kPi / 2.0) < 1e-12);
    }
    CHECK_THROWS_AS(sam(x, img_random(16, 16, 2, 33)), ShapeError);
}

TEST_CASE("scc: self-correlation, anti-correlation, noise floor, flat flag") {
    Image x = img_smooth(32, 32, 3, 41);
    SUBCASE("non-constant self gives exactly 1") {
        bool flat = true;
        CHECK(std::abs(scc(x, x, &flat) - 1.0) < 1e-12);
        CHECK_FALSE(flat);
    }
    SUBCASE("inverted image anti-correlates to -1") {
        Image inv = x;
        for (auto& v : inv.data) v = 1.0 - v;
        CHECK(std::abs(scc(x, inv) + 1.0) < 1e-12);
    }
    SUBCASE("independent noise stays inside the Monte Carlo floor") {
        Image a = img_random(64, 64, 3, 42), b = img_random(64, 64, 3, 43);
        CHECK(std::abs(scc(a, b)) < 0.05);
    }
    SUBCASE("flat high-pass returns 0 with the flag") {
        Image flat_img(16, 16, 1);
        std::fill(flat_img.data.begin(), flat_img.data.end(), 0.4);
        bool flat = false;
        CHECK(scc(flat_img, flat_img, &flat) == 0.0);
        CHECK(flat);
    }
    SUBCASE("one flat channel averages with the live one") {
        Image a(16, 16, 2), b(16, 16, 2);
        Image live = img_smooth(16, 16, 1, 44);
        for (std::size_t y = 0; y < 16; ++y)
            for (std::size_t j = 0; j < 16; ++j) {
                a.at(y, j, 0) = 0.5;  // flat channel contributes 0
                b.at(y, j, 0) = 0.5;
                a.at(y, j, 1) = live.at(y, j, 0);
                b.at(y, j, 1) = live.at(y, j, 0);
            }
        bool flat = false;
        CHECK(std::abs(scc(a, b, &flat) - 0.5) < 1e-12);
        CHECK(flat);
    }
    CHECK_THROWS_AS(scc(x, img_smooth(32, 32, 2, 45)), ShapeError);
    CHECK_THROWS_AS(scc(img_random(2, 2, 1, 46), img_random(2, 2, 1, 47)), ValidationError);
}

TEST_CASE("d_lambda: self-distance, permutation sensitivity, band-pair oracle") {
    Image x = img_smooth(16, 16, 3, 51);
    CHECK(d_lambda(x, x) == 0.0);

    SUBCASE("channel permutation is detected") {
        Image perm(16, 16, 3);
        for (std::size_t y = 0; y < 16; ++y)
            for (std::size_t j = 0; j < 16; ++j) {
                perm.at(y, j, 0) = x.at(y, j, 1);
                perm.at(y, j, 1) = x.at(y, j, 2);
                perm.at(y, j, 2) = x.at(y, j, 0);
            }
        CHECK(d_lambda(perm, x) > 1e-3);
    }
    SUBCASE("matches the hand-expanded pairwise Q sum") {
        Image pred = img_smooth(8, 8, 3, 52), ref = img_smooth(8, 8, 3, 53);
        for (Real p : {1.0, 2.0}) {
            Real acc = 0;
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = 0; j < 3; ++j) {
                    if (i == j) continue;
                    acc += std::pow(std::abs(uiqi_oracle(pred, pred, i, j) -
                                             uiqi_oracle(ref, ref, i, j)),
                                    p);
                }
            const Real expect = std::pow(acc / 6.0, 1.0 / p);
            CHECK(std::abs(d_lambda(pred, ref, p) - expect) < 1e-12);
        }
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(d_lambda(img_random(8, 8, 1, 54), img_random(8, 8, 1, 55)),
                        ValidationError);
        CHECK_THROWS_AS(d_lambda(x, x, 0.5), ValidationError);
        CHECK_THROWS_AS(d_lambda(x, img_smooth(16, 16, 2, 56)), ShapeError);
    }
}

TEST_CASE("efid: closed forms, Monte Carlo offset, monotonicity, shrinkage") {
    Rng rng(61);

    SUBCASE("identical sets are near zero") {
        Tensor a = cloud(300, 8, rng);
        CHECK(efid(a, a) <= 1e-3);
    }
    SUBCASE("1-D closed form (mu_a-mu_b)^2 + (sigma_a-sigma_b)^2") {
        Tensor a = cloud(50, 1, rng), b = cloud(60, 1, rng);
        for (auto& v : b.vec()) v = 0.7 * v + 1.3;
        auto stats = [](const Tensor& t) {
            Real m = 0;
            for (Real v : t.vec()) m += v;
            m /= Real(t.dim(0));
            Real var = 0;
            for (Real v : t.vec()) var += (v - m) * (v - m);
            var /= Real(t.dim(0) - 1);
            return std::pair<Real, Real>(m, var);
        };
        auto [ma, va] = stats(a);
        auto [mb, vb] = stats(b);
        const Real expect = (ma - mb) * (ma - mb) +
                            (std::sqrt(va) - std::sqrt(vb)) * (std::sqrt(va) - std::sqrt(vb));
        CHECK(std::abs(efid(a, b) - expect) < 1e-9);
    }
    SUBCASE("scaled centered cloud closed form (1-c)^2 tr(C)") {
        const std::size_t n = 40, d = 3;
        Tensor a = cloud(n, d, rng);
        for (std::size_t j = 0; j < d; ++j) {  // center each column exactly
            Real m = 0;
            for (std::size_t i = 0; i < n; ++i) m += a.vec()[i * d + j];
            m /= Real(n);
            for (std::size_t i = 0; i < n; ++i) a.vec()[i * d + j] -= m;
        }
        const Real c = 0.6;
        Tensor b = a;
        for (auto& v : b.vec()) v *= c;
        Real tr = 0;  // trace of the (n-1)-normalized sample covariance
        for (std::size_t j = 0; j < d; ++j) {
            Real s = 0;
            for (std::size_t i = 0; i < n; ++i) s += a.vec()[i * d + j] * a.vec()[i * d + j];
            tr += s / Real(n - 1);
        }
        CHECK(std::abs(efid(a, b) - (1.0 - c) * (1.0 - c) * tr) < 1e-9);
    }
    SUBCASE("unit Gaussians offset by m measure ||m||^2 within 5%") {
        const std::vector<Real> m = {1.0, -0.5, 0.75, 0.0, 0.5, -0.25, 0.9, 0.3};
        Real m2 = 0;
        for (Real v : m) m2 += v * v;
        Tensor a = cloud(10000, 8, rng);
        Tensor b = cloud(10000, 8, rng, m);
        const Real v = efid(a, b);
        CHECK(std::abs(v - m2) / m2 < 0.05);
    }
    SUBCASE("monotone in the mean offset") {
        Tensor a = cloud(2000, 4, rng);
        std::vector<Real> values;
        for (Real s : {0.5, 1.0, 2.0}) {
            Tensor b = cloud(2000, 4, rng, {s, s, 0.0, 0.0});
            values.push_back(efid(a, b));
        }
        CHECK(values[0] < values[1]);
        CHECK(values[1] < values[2]);
    }
    SUBCASE("symmetric in its arguments") {
        Tensor a = cloud(64, 6, rng), b = cloud(80, 6, rng, {0.5, 0, 0, 0, 0, 0});
        CHECK(std::abs(efid(a, b) - efid(b, a)) < 1e-6);
    }
    SUBCASE("shrinkage applies exactly when samples cannot cover the dim") {
        Tensor small = cloud(6, 6, rng), ok = cloud(7, 6, rng), big = cloud(30, 6, rng);
        bool flag = false;
        efid(small, big, &flag);
        CHECK(flag);
        flag = true;
        efid(ok, big, &flag);
        CHECK_FALSE(flag);
    }
    SUBCASE("errors") {
        Tensor one(Shape{1, 4}, 0.5), a = cloud(8, 4, rng), odd = cloud(8, 5, rng);
        CHECK_THROWS_AS(efid(one, a), ValidationError);
        CHECK_THROWS_AS(efid(a, odd), ShapeError);
        CHECK_THROWS_AS(efid(Tensor(Shape{8}), a), ShapeError);
    }
}

TEST_CASE("ekid: unbiasedness, large-sample null, translation sensitivity") {
    SUBCASE("mean over 100 same-distribution resamples sits within 2 SE of 0") {
        Rng rng(71);
        std::vector<Real> estimates;
        for (int rep = 0; rep < 100; ++rep) {
            Tensor a = cloud(100, 8, rng), b = cloud(100, 8, rng);
            estimates.push_back(ekid(a, b));
        }
        Real mean = 0;
        for (Real v : estimates) mean += v;
        mean /= Real(estimates.size());
        Real var = 0;
        for (Real v : estimates) var += (v - mean) * (v - mean);
        var /= Real(estimates.size() - 1);
        const Real se = std::sqrt(var / Real(estimates.size()));
        CHECK(std::abs(mean) <= 2.0 * se);
    }
    SUBCASE("identical distributions with large samples sit below 1e-3") {
        Rng rng(72);
        Tensor a = cloud(2000, 64, rng), b = cloud(2000, 64, rng);
        CHECK(std::abs(ekid(a, b)) < 1e-3);
    }
    SUBCASE("translated distribution is strictly positive") {
        Rng rng(73);
        Tensor a = cloud(200, 8, rng);
        Tensor b = cloud(200, 8, rng, {1, 1, 1, 1, 1, 1, 1, 1});
        CHECK(ekid(a, b) > 0.1);
    }
    SUBCASE("errors") {
        Rng rng(74);
        Tensor one(Shape{1, 4}, 0.2), a = cloud(8, 4, rng);
        CHECK_THROWS_AS(ekid(one, a), ValidationError);
        CHECK_THROWS_AS(ekid(a, cloud(8, 5, rng)), ShapeError);
    }
}

TEST_CASE("encode_cls_features: shape, batch invariance, validation") {
    Encoder teacher = make_tiny_teacher();
    std::vector<Image> images;
    for (std::uint64_t s = 0; s < 3; ++s) images.push_back(img_smooth(32, 32, 3, 80 + s));

    Tensor f2 = encode_cls_features(teacher, images, 2);
    Tensor f4 = encode_cls_features(teacher, images, 4);
    REQUIRE(f2.shape() == Shape{3, 32});
    for (std::size_t i = 0; i < f2.numel(); ++i) {
        CHECK(std::isfinite(f2.vec()[i]));
        CHECK(std::abs(f2.vec()[i] - f4.vec()[i]) < 1e-12);
    }
    // Distinct images land on distinct features.
    Real diff = 0;
    for (std::size_t k = 0; k < 32; ++k) diff += std::abs(f2.vec()[k] - f2.vec()[32 + k]);
    CHECK(diff > 1e-6);

    std::vector<Image> mixed = {img_smooth(32, 32, 3, 90), img_smooth(40, 40, 3, 91)};
    CHECK_THROWS_AS(encode_cls_features(teacher, mixed, 4), ShapeError);
    CHECK_THROWS_AS(encode_cls_features(teacher, {}, 4), ValidationError);
}

TEST_CASE("evaluate_run: matched pairs, aggregates, strict mode, determinism") {
    TempDir tmp("run");
    const fs::path pred = tmp.path / "pred", ref = tmp.path / "ref", ckpt = tmp.path / "teacher";
    fs::create_directories(pred);
    fs::create_directories(ref);

    Encoder teacher = make_tiny_teacher();
    save_encoder_checkpoint(ckpt.string(), teacher, 0);

    Rng noise_rng(99);
    for (int i = 0; i < 5; ++i) {
        const std::string name = "scene_" + std::to_string(i) + ".png";
        Image truth = img_smooth(32, 32, 3, 100 + std::uint64_t(i));
        write_png((ref / name).string(), truth, 8);
        if (i < 3) {
            write_png((pred / name).string(), truth, 8);  // byte-identical pair
        } else {
            Image noisy = truth;
            for (auto& v : noisy.data)
                v = std::clamp(v + 0.1 * noise_rng.normal(0.0, 1.0), 0.0, 1.0);
            write_png((pred / name).string(), noisy, 8);
        }
    }
    write_png((pred / "stray_pred.png").string(), img_smooth(32, 32, 3, 200), 8);
    write_png((ref / "stray_ref.png").string(), img_smooth(32, 32, 3, 201), 8);

    MetricReport report = evaluate_run(pred.string(), ref.string(), ckpt.string());

    SUBCASE("per-image values and bounds") {
        REQUIRE(report.per_image.size() == 5);
        for (int i = 0; i < 3; ++i) {
            const auto& pm = report.per_image.at("scene_" + std::to_string(i) + ".png");
            CHECK(pm.ssim == 1.0);
            CHECK(pm.sam == 0.0);
            CHECK(pm.d_lambda == 0.0);
        }
        const auto& noisy = report.per_image.at("scene_4.png");
        CHECK(noisy.ssim < 1.0);
        CHECK(noisy.sam > 0.0);
        for (const auto& [name, pm] : report.per_image) {
            CHECK(pm.ssim >= -1.0);
            CHECK(pm.ssim <= 1.0);
            CHECK(pm.sam >= 0.0);
            CHECK(pm.sam <= kPi);
            CHECK(pm.scc >= -1.0);
            CHECK(pm.scc <= 1.0);
            CHECK(pm.d_lambda >= 0.0);
        }
        CHECK(report.efid_value >= 0.0);
    }
    SUBCASE("aggregate equals the mean of per-image entries") {
        Real s = 0, a = 0, c = 0, d = 0;
        for (const auto& [name, pm] : report.per_image) {
            s += pm.ssim;
            a += pm.sam;
            c += pm.scc;
            d += pm.d_lambda;
        }
        const Real n = Real(report.per_image.size());
        CHECK(std::abs(report.mean_ssim - s / n) < 1e-9);
        CHECK(std::abs(report.mean_sam - a / n) < 1e-9);
        CHECK(std::abs(report.mean_scc - c / n) < 1e-9);
        CHECK(std::abs(report.mean_d_lambda - d / n) < 1e-9);
    }
    SUBCASE("unmatched files are listed and skipped") {
        REQUIRE(report.unmatched.size() == 2);
        CHECK(report.unmatched[0] == "pred-only: stray_pred.png");
        CHECK(report.unmatched[1] == "ref-only: stray_ref.png");
    }
    SUBCASE("strict mode rejects unmatched files") {
        CHECK_THROWS_AS(evaluate_run(pred.string(), ref.string(), ckpt.string(), true),
                        ValidationError);
    }
    SUBCASE("identical directories score perfectly") {
        MetricReport self = evaluate_run(ref.string(), ref.string(), ckpt.string(), true);
        CHECK(self.mean_ssim == 1.0);
        CHECK(self.mean_sam == 0.0);
        CHECK(self.mean_d_lambda == 0.0);
        CHECK(self.efid_value <= 1e-3);
    }
    SUBCASE("report JSON is versioned and byte-deterministic") {
        Json j = report.to_json();
        CHECK(j.at("schema_version") == 1);
        CHECK(j.at("per_image").size() == 5);
        CHECK(j.at("aggregate").contains("efid"));
        CHECK(j.at("config").at("ssim_window") == 11);
        MetricReport again = evaluate_run(pred.string(), ref.string(), ckpt.string());
        CHECK(j.dump() == again.to_json().dump());
    }
    SUBCASE("table lists every image and the mean row") {
        const std::string t = report.table();
        CHECK(t.find("scene_0.png") != std::string::npos);
        CHECK(t.find("mean") != std::string::npos);
        CHECK(t.find("eFID") != std::string::npos);
        CHECK(t.find("unmatched skipped") != std::string::npos);
    }
    SUBCASE("missing or empty directories fail loudly") {
        CHECK_THROWS_AS(evaluate_run((tmp.path / "nope").string(), ref.string(), ckpt.string()),
                        ArtifactError);
        fs::create_directories(tmp.path / "empty");
        CHECK_THROWS_AS(evaluate_run((tmp.path / "empty").string(), ref.string(), ckpt.string()),
                        ValidationError);
    }
}

TEST_CASE("metric bounds hold for fuzzed valid image pairs") {
    Rng rng(123);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t h = 12 + std::size_t(rng.uniform(0.0, 20.0));
        const std::size_t w = 12 + std::size_t(rng.uniform(0.0, 20.0));
        const std::uint64_t sa = 1000 + std::uint64_t(trial) * 2;
        Image x = trial % 2 ? img_random(h, w, 3, sa) : img_smooth(h, w, 3, sa);
        Image y = trial % 3 ? img_random(h, w, 3, sa + 1) : img_smooth(h, w, 3, sa + 1);
        const Real s = ssim(x, y);
        const Real a = sam(x, y);
        const Real c = scc(x, y);
        const Real d = d_lambda(x, y);
        CHECK(s >= -1.0 - 1e-9);
        CHECK(s <= 1.0 + 1e-9);
        CHECK(a >= 0.0);
        CHECK(a <= kPi + 1e-9);
        CHECK(c >= -1.0 - 1e-9);
        CHECK(c <= 1.0 + 1e-9);
        CHECK(d >= 0.0);
    }
    for (int trial = 0; trial < 10; ++trial) {
        Tensor a = cloud(20 + std::size_t(trial) * 3, 5, rng);
        Tensor b = cloud(25 + std::size_t(trial) * 2, 5, rng, {0.1 * trial, 0, 0, 0, 0});
        CHECK(efid(a, b) >= 0.0);
        CHECK(std::isfinite(ekid(a, b)));
    }
}
