#include "oscar/evalkit/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <sstream>

#include <Eigen/Dense>

#include "oscar/core/autograd.hpp"
#include "oscar/core/errors.hpp"

namespace oscar {

namespace fs = std::filesystem;

namespace {

void check_same_shape(const Image& x, const Image& y, const char* fn) {
    if (x.h != y.h || x.w != y.w || x.c != y.c)
        throw ShapeError(std::string(fn) + ": image shapes differ (" + std::to_string(x.h) + "x" +
                         std::to_string(x.w) + "x" + std::to_string(x.c) + " vs " +
                         std::to_string(y.h) + "x" + std::to_string(y.w) + "x" +
                         std::to_string(y.c) + ")");
    if (x.c == 0 || x.h == 0) throw ValidationError(std::string(fn) + ": empty image");
}

void check_unit_range(const Image& x, const char* fn) {
    for (Real v : x.data)
        if (!(v >= -1e-9 && v <= 1.0 + 1e-9))
            throw ValidationError(std::string(fn) + ": pixel value " + std::to_string(v) +
                                  " outside [0,1]");
}

// One channel plane as a dense matrix.
EMat plane(const Image& img, std::size_t ch) {
    EMat m(img.h, img.w);
    for (std::size_t y = 0; y < img.h; ++y)
        for (std::size_t x = 0; x < img.w; ++x) m(y, x) = img.at(y, x, ch);
    return m;
}

}  // namespace

Real ssim(const Image& x, const Image& y) {
    check_same_shape(x, y, "ssim");
    check_unit_range(x, "ssim");
    check_unit_range(y, "ssim");
    constexpr std::size_t kWin = 11;
    constexpr Real kSigma = 1.5, kK1 = 0.01, kK2 = 0.03, kL = 1.0;
    if (x.h < kWin || x.w < kWin)
        throw ValidationError("ssim: image smaller than the 11x11 window");

    // Normalized Gaussian window.
    Real kernel[kWin][kWin];
    Real ksum = 0;
    for (std::size_t i = 0; i < kWin; ++i)
        for (std::size_t j = 0; j < kWin; ++j) {
            const Real dy = Real(i) - Real(kWin - 1) / 2.0;
            const Real dx = Real(j) - Real(kWin - 1) / 2.0;
            kernel[i][j] = std::exp(-(dx * dx + dy * dy) / (2.0 * kSigma * kSigma));
            ksum += kernel[i][j];
        }
    for (auto& row : kernel)
        for (auto& v : row) v /= ksum;

    const Real c1 = (kK1 * kL) * (kK1 * kL);
    const Real c2 = (kK2 * kL) * (kK2 * kL);
    Real total = 0;
    std::size_t count = 0;
    for (std::size_t ch = 0; ch < x.c; ++ch) {
        for (std::size_t y0 = 0; y0 + kWin <= x.h; ++y0)
            for (std::size_t x0 = 0; x0 + kWin <= x.w; ++x0) {
                Real mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
                for (std::size_t i = 0; i < kWin; ++i)
                    for (std::size_t j = 0; j < kWin; ++j) {
                        const Real w = kernel[i][j];
                        const Real a = x.at(y0 + i, x0 + j, ch);
                        const Real b = y.at(y0 + i, x0 + j, ch);
                        mx += w * a;
                        my += w * b;
                        xx += w * a * a;
                        yy += w * b * b;
                        xy += w * a * b;
                    }
                const Real vx = xx - mx * mx;
                const Real vy = yy - my * my;
                const Real cov = xy - mx * my;
                const Real num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
                const Real den = (mx * mx + my * my + c1) * (vx + vy + c2);
                total += num / den;
                ++count;
            }
    }
    return total / Real(count);
}

Real sam(const Image& x, const Image& y) {
    check_same_shape(x, y, "sam");
    constexpr Real kEps = 1e-8;
    std::vector<Real> u(x.c), v(x.c);
    Real total = 0;
    for (std::size_t p = 0; p < x.h * x.w; ++p) {
        Real nx = 0, ny = 0;
        for (std::size_t ch = 0; ch < x.c; ++ch) {
            u[ch] = x.data[p * x.c + ch];
            v[ch] = y.data[p * y.c + ch];
            nx += u[ch] * u[ch];
            ny += v[ch] * v[ch];
        }
        nx = std::max(std::sqrt(nx), kEps);
        ny = std::max(std::sqrt(ny), kEps);
        // arccos(<u,v>/(|u||v|)) evaluated as 2*atan2(|u'-v'|, |u'+v'|) on the
        // normalized vectors: identical up to rounding, but exact at angle 0
        // where acos loses half the mantissa.
        Real dm = 0, dp = 0;
        for (std::size_t ch = 0; ch < x.c; ++ch) {
            const Real a = u[ch] / nx, b = v[ch] / ny;
            dm += (a - b) * (a - b);
            dp += (a + b) * (a + b);
        }
        total += 2.0 * std::atan2(std::sqrt(dm), std::sqrt(dp));
    }
    return total / Real(x.h * x.w);
}

Real scc(const Image& x, const Image& y, bool* flat_flag) {
    check_same_shape(x, y, "scc");
    if (x.h < 3 || x.w < 3)
        throw ValidationError("scc: image smaller than the 3x3 Laplacian support");
    if (flat_flag) *flat_flag = false;
    Real total = 0;
    for (std::size_t ch = 0; ch < x.c; ++ch) {
        const EMat px = plane(x, ch), py = plane(y, ch);
        // 4-neighbour Laplacian over the valid interior.
        const std::size_t vh = x.h - 2, vw = x.w - 2, n = vh * vw;
        Real sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
        for (std::size_t i = 1; i + 1 < x.h; ++i)
            for (std::size_t j = 1; j + 1 < x.w; ++j) {
                const Real hx = px(i - 1, j) + px(i + 1, j) + px(i, j - 1) + px(i, j + 1) -
                                4.0 * px(i, j);
                const Real hy = py(i - 1, j) + py(i + 1, j) + py(i, j - 1) + py(i, j + 1) -
                                4.0 * py(i, j);
                sx += hx;
                sy += hy;
                sxx += hx * hx;
                syy += hy * hy;
                sxy += hx * hy;
            }
        const Real vx = sxx / Real(n) - (sx / Real(n)) * (sx / Real(n));
        const Real vy = syy / Real(n) - (sy / Real(n)) * (sy / Real(n));
        const Real cov = sxy / Real(n) - (sx / Real(n)) * (sy / Real(n));
        if (vx <= 1e-15 || vy <= 1e-15) {
            if (flat_flag) *flat_flag = true;  // flat high-pass: correlation undefined, use 0
        } else {
            total += cov / std::sqrt(vx * vy);
        }
    }
    return total / Real(x.c);
}

namespace {

// Global universal image quality index between two channel planes.
Real uiqi(const EMat& a, const EMat& b) {
    const Real n = Real(a.size());
    const Real ma = a.mean(), mb = b.mean();
    const Real va = (a.array() - ma).square().sum() / (n - 1.0);
    const Real vb = (b.array() - mb).square().sum() / (n - 1.0);
    const Real cov = ((a.array() - ma) * (b.array() - mb)).sum() / (n - 1.0);
    const Real den = (va + vb) * (ma * ma + mb * mb);
    if (den < 1e-12) {
        // Both planes constant: identical means count as perfect agreement.
        return std::abs(ma - mb) < 1e-9 ? 1.0 : 0.0;
    }
    return 4.0 * cov * ma * mb / den;
}

}  // namespace

Real d_lambda(const Image& pred, const Image& ref, Real p) {
    check_same_shape(pred, ref, "d_lambda");
    if (pred.c < 2) throw ValidationError("d_lambda: needs at least 2 channels");
    if (!(p >= 1.0)) throw ValidationError("d_lambda: exponent p must be >= 1");
    if (pred.h * pred.w < 2) throw ValidationError("d_lambda: needs at least 2 pixels");
    std::vector<EMat> pp, rp;
    for (std::size_t ch = 0; ch < pred.c; ++ch) {
        pp.push_back(plane(pred, ch));
        rp.push_back(plane(ref, ch));
    }
    Real acc = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < pred.c; ++i)
        for (std::size_t j = 0; j < pred.c; ++j) {
            if (i == j) continue;
            acc += std::pow(std::abs(uiqi(pp[i], pp[j]) - uiqi(rp[i], rp[j])), p);
            ++pairs;
        }
    return std::pow(acc / Real(pairs), 1.0 / p);
}

namespace {

void check_feature_set(const Tensor& t, const char* fn) {
    if (t.ndim() != 2) throw ShapeError(std::string(fn) + ": feature set must be (N, d)");
    if (t.dim(0) < 2) throw ValidationError(std::string(fn) + ": needs at least 2 samples");
    if (t.dim(1) < 1) throw ValidationError(std::string(fn) + ": feature dim must be >= 1");
}

// Sample mean (d) and covariance (d x d, 1/(n-1)); shrinkage adds 1e-6*I when
// the sample count cannot support a full-rank estimate.
void gaussian_fit(const Tensor& t, Eigen::VectorXd& mu, Eigen::MatrixXd& cov, bool& shrunk) {
    const std::size_t n = t.dim(0), d = t.dim(1);
    ECMap m = t.mat(n, d);
    mu = m.colwise().mean().transpose();
    Eigen::MatrixXd centered = m.rowwise() - mu.transpose();
    cov = centered.transpose() * centered / Real(n - 1);
    if (n <= d) {
        cov += 1e-6 * Eigen::MatrixXd::Identity(Eigen::Index(d), Eigen::Index(d));
        shrunk = true;
    }
}

}  // namespace

Real efid(const Tensor& a, const Tensor& b, bool* shrinkage_flag) {
    check_feature_set(a, "efid");
    check_feature_set(b, "efid");
    if (a.dim(1) != b.dim(1)) throw ShapeError("efid: feature dims differ");
    bool shrunk = false;
    Eigen::VectorXd mu_a, mu_b;
    Eigen::MatrixXd cov_a, cov_b;
    gaussian_fit(a, mu_a, cov_a, shrunk);
    gaussian_fit(b, mu_b, cov_b, shrunk);
    if (shrinkage_flag) *shrinkage_flag = shrunk;

    // Tr((Ca*Cb)^{1/2}) via the symmetrized product; in exact arithmetic Ca*Cb
    // is similar to a PSD matrix, so negative eigenvalues are numeric noise.
    Eigen::MatrixXd prod = cov_a * cov_b;
    Eigen::MatrixXd sym = 0.5 * (prod + prod.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    if (es.info() != Eigen::Success) throw NumericError("efid: eigendecomposition failed");
    Real tr_sqrt = 0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i)
        tr_sqrt += std::sqrt(std::max(0.0, es.eigenvalues()[i]));

    const Real dist = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    if (!std::isfinite(dist)) throw NumericError("efid: non-finite distance");
    return std::max(0.0, dist);
}

Real ekid(const Tensor& a, const Tensor& b) {
    check_feature_set(a, "ekid");
    check_feature_set(b, "ekid");
    if (a.dim(1) != b.dim(1)) throw ShapeError("ekid: feature dims differ");
    const std::size_t m = a.dim(0), n = b.dim(0), d = a.dim(1);
    ECMap ma = a.mat(m, d), mb = b.mat(n, d);
    auto kernel = [&](Real dot) {
        const Real z = dot / Real(d) + 1.0;
        return z * z * z;
    };
    Real kaa = 0, kbb = 0, kab = 0;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j)
            if (i != j) kaa += kernel(ma.row(i).dot(ma.row(j)));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j) kbb += kernel(mb.row(i).dot(mb.row(j)));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) kab += kernel(ma.row(i).dot(mb.row(j)));
    const Real v = kaa / Real(m * (m - 1)) + kbb / Real(n * (n - 1)) - 2.0 * kab / Real(m * n);
    if (!std::isfinite(v)) throw NumericError("ekid: non-finite estimate");
    return v;
}

Tensor encode_cls_features(const Encoder& enc, const std::vector<Image>& images,
                           std::size_t batch_size) {
    if (images.empty()) throw ValidationError("encode_cls_features: no images");
    if (batch_size == 0) throw ValidationError("encode_cls_features: batch_size must be > 0");
    const std::size_t d = enc.config().embed_dim;
    Tensor out(Shape{images.size(), d});
    NoGradGuard guard;
    for (std::size_t start = 0; start < images.size(); start += batch_size) {
        const std::size_t bs = std::min(batch_size, images.size() - start);
        const std::size_t h = images[start].h, w = images[start].w;
        Tensor batch(Shape{bs, 3, h, w});
        for (std::size_t b = 0; b < bs; ++b) {
            const Image& img = images[start + b];
            if (img.c != 3) throw ShapeError("encode_cls_features: images must have 3 channels");
            if (img.h != h || img.w != w)
                throw ShapeError("encode_cls_features: mixed image sizes in one batch");
            for (std::size_t ch = 0; ch < 3; ++ch)
                for (std::size_t y = 0; y < h; ++y)
                    for (std::size_t x = 0; x < w; ++x)
                        batch.vec()[((b * 3 + ch) * h + y) * w + x] = img.at(y, x, ch);
        }
        FeatureBundle bundle = enc.encode(constant(batch), /*train=*/false);
        if (bundle.cls_per_layer.empty())
            throw ValidationError("encode_cls_features: encoder captures no layers");
        const Var& cls = bundle.cls_per_layer.rbegin()->second;  // deepest captured layer
        for (std::size_t b = 0; b < bs; ++b)
            for (std::size_t k = 0; k < d; ++k)
                out.vec()[(start + b) * d + k] = cls->value.vec()[b * d + k];
    }
    return out;
}

Json MetricReport::to_json() const {
    Json per = Json::object();
    for (const auto& [name, pm] : per_image) {
        per[name] = Json{{"ssim", pm.ssim},
                         {"sam", pm.sam},
                         {"scc", pm.scc},
                         {"d_lambda", pm.d_lambda},
                         {"scc_flat", pm.scc_flat}};
    }
    return Json{{"schema_version", 1},
                {"per_image", per},
                {"aggregate",
                 Json{{"ssim", mean_ssim},
                      {"sam", mean_sam},
                      {"scc", mean_scc},
                      {"d_lambda", mean_d_lambda},
                      {"efid", efid_value},
                      {"ekid", ekid_value}}},
                {"efid_shrinkage", efid_shrinkage},
                {"unmatched", unmatched},
                {"config", config}};
}

std::string MetricReport::table() const {
    std::ostringstream os;
    char line[256];
    os << "image                          SSIM      SAM      SCC      D_lambda\n";
    os << "------------------------------ --------- -------- -------- --------\n";
    for (const auto& [name, pm] : per_image) {
        std::snprintf(line, sizeof(line), "%-30s %9.4f %8.4f %8.4f %8.4f\n", name.c_str(),
                      pm.ssim, pm.sam, pm.scc, pm.d_lambda);
        os << line;
    }
    os << "------------------------------ --------- -------- -------- --------\n";
    std::snprintf(line, sizeof(line), "%-30s %9.4f %8.4f %8.4f %8.4f\n", "mean", mean_ssim,
                  mean_sam, mean_scc, mean_d_lambda);
    os << line;
    std::snprintf(line, sizeof(line), "eFID %.6f   eKID %.6f   (%zu images", efid_value,
                  ekid_value, per_image.size());
    os << line;
    if (!unmatched.empty()) os << ", " << unmatched.size() << " unmatched skipped";
    os << ")\n";
    return os.str();
}

namespace {

std::set<std::string> png_names(const std::string& dir) {
    if (!fs::is_directory(dir)) throw ArtifactError("evaluate_run: not a directory: " + dir);
    std::set<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png")
            names.insert(e.path().filename().string());
    return names;
}

void check_bounds(const PairMetrics& pm, const std::string& name) {
    const Real pi = std::acos(-1.0);
    if (!(pm.ssim >= -1.0 - 1e-9 && pm.ssim <= 1.0 + 1e-9) ||
        !(pm.sam >= -1e-12 && pm.sam <= pi + 1e-9) ||
        !(pm.scc >= -1.0 - 1e-9 && pm.scc <= 1.0 + 1e-9) || !(pm.d_lambda >= -1e-12))
        throw NumericError("evaluate_run: metric out of bounds for " + name);
}

}  // namespace

MetricReport evaluate_run(const std::string& pred_dir, const std::string& ref_dir,
                          const std::string& teacher_ckpt, bool strict) {
    const std::set<std::string> pred_names = png_names(pred_dir);
    const std::set<std::string> ref_names = png_names(ref_dir);

    MetricReport report;
    std::vector<std::string> matched;
    for (const auto& n : pred_names)
        if (ref_names.count(n))
            matched.push_back(n);
        else
            report.unmatched.push_back("pred-only: " + n);
    for (const auto& n : ref_names)
        if (!pred_names.count(n)) report.unmatched.push_back("ref-only: " + n);
    std::sort(report.unmatched.begin(), report.unmatched.end());

    if (strict && !report.unmatched.empty()) {
        std::string msg = "evaluate_run: unmatched files in strict mode:";
        for (const auto& n : report.unmatched) msg += " " + n;
        throw ValidationError(msg);
    }
    if (matched.empty()) throw ValidationError("evaluate_run: no matched .png pairs");

    Encoder teacher = load_encoder_checkpoint(teacher_ckpt);

    std::vector<Image> preds, refs;
    for (const auto& name : matched) {
        Image p = read_png((fs::path(pred_dir) / name).string());
        Image r = read_png((fs::path(ref_dir) / name).string());
        PairMetrics pm;
        pm.ssim = ssim(p, r);
        pm.sam = sam(p, r);
        pm.scc = scc(p, r, &pm.scc_flat);
        pm.d_lambda = d_lambda(p, r);
        check_bounds(pm, name);
        report.per_image[name] = pm;
        report.mean_ssim += pm.ssim;
        report.mean_sam += pm.sam;
        report.mean_scc += pm.scc;
        report.mean_d_lambda += pm.d_lambda;
        preds.push_back(std::move(p));
        refs.push_back(std::move(r));
    }
    const Real n = Real(matched.size());
    report.mean_ssim /= n;
    report.mean_sam /= n;
    report.mean_scc /= n;
    report.mean_d_lambda /= n;

    const Tensor fp = encode_cls_features(teacher, preds);
    const Tensor fr = encode_cls_features(teacher, refs);
    report.efid_value = efid(fp, fr, &report.efid_shrinkage);
    report.ekid_value = ekid(fp, fr);

    report.config = Json{{"ssim_window", 11},
                         {"ssim_sigma", 1.5},
                         {"ssim_k1", 0.01},
                         {"ssim_k2", 0.03},
                         {"scc_kernel", "laplacian4"},
                         {"d_lambda_p", 1.0},
                         {"efid_shrinkage_gamma", 1e-6},
                         {"ekid_kernel", "(<x,y>/d + 1)^3"},
                         {"feature_layer",
                          teacher.config().aligned_layers.empty()
                              ? Json()
                              : Json(teacher.config().aligned_layers.back())},
                         // content hash, not path: reports stay byte-identical
                         // across relocated but equivalent run directories
                         {"teacher_params_sha256",
                          read_checkpoint_manifest(teacher_ckpt).value("params_sha256", "")}};
    return report;
}

}  // namespace oscar
