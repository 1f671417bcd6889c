#include "oscar/synthdata/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "oscar/core/errors.hpp"
#include "oscar/core/hash.hpp"
#include "oscar/core/io.hpp"

namespace oscar {

const std::vector<ClassDef>& default_classes() {
    static const std::vector<ClassDef> k = {
        // name     rgb                    opt_tex cell  vv     vh     sar_tex striped
        {"water", {0.08, 0.18, 0.38}, 0.02, 16, 0.040, 0.010, 0.05, false},
        {"forest", {0.10, 0.34, 0.12}, 0.10, 8, 0.300, 0.120, 0.35, false},
        {"meadow", {0.42, 0.62, 0.24}, 0.05, 8, 0.150, 0.050, 0.15, false},
        {"field", {0.66, 0.55, 0.28}, 0.08, 4, 0.150, 0.050, 0.30, true},
        {"urban", {0.55, 0.52, 0.50}, 0.16, 2, 0.550, 0.250, 0.50, false},
        {"barren", {0.60, 0.45, 0.32}, 0.04, 16, 0.080, 0.030, 0.10, false},
    };
    return k;
}

std::vector<std::string> class_names() {
    std::vector<std::string> names;
    for (const auto& c : default_classes()) names.push_back(c.name);
    return names;
}

namespace {

// lattice value noise in [-1,1], bilinear interpolation, periodic lattice
std::vector<Real> value_noise(std::size_t size, std::size_t cell, Rng& rng) {
    std::size_t n = size / cell + 2;
    std::vector<Real> lattice(n * n);
    for (auto& v : lattice) v = rng.uniform(-1.0, 1.0);
    std::vector<Real> out(size * size);
    for (std::size_t y = 0; y < size; ++y) {
        Real fy = static_cast<Real>(y) / cell;
        std::size_t y0 = static_cast<std::size_t>(fy);
        Real wy = fy - y0;
        for (std::size_t x = 0; x < size; ++x) {
            Real fx = static_cast<Real>(x) / cell;
            std::size_t x0 = static_cast<std::size_t>(fx);
            Real wx = fx - x0;
            Real a = lattice[y0 * n + x0], b = lattice[y0 * n + x0 + 1];
            Real c = lattice[(y0 + 1) * n + x0], d = lattice[(y0 + 1) * n + x0 + 1];
            out[y * size + x] = (1 - wy) * ((1 - wx) * a + wx * b) +
                                wy * ((1 - wx) * c + wx * d);
        }
    }
    return out;
}

void validate_mixture(const std::vector<Real>& mixture) {
    if (mixture.empty()) throw ConfigError("class mixture is empty");
    if (mixture.size() > default_classes().size())
        throw ConfigError("class mixture has more entries than known classes");
    Real sum = 0;
    for (Real p : mixture) {
        if (p < 0 || p > 1) throw ConfigError("mixture probabilities must be in [0,1]");
        sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6)
        throw ConfigError("class mixture must sum to 1 (got " + std::to_string(sum) + ")");
}

}  // namespace

Scene generate_scene(std::uint64_t seed, std::size_t size,
                     const std::vector<Real>& class_mixture) {
    if (size < 32 || size % 8 != 0)
        throw ConfigError("scene size must be >= 32 and divisible by the patch size 8");
    validate_mixture(class_mixture);
    const auto& classes = default_classes();

    Rng root(seed);
    Rng site_rng = root.child("sites");
    std::size_t n_sites = std::max<std::size_t>(4, (size * size) / 256);

    struct Site {
        Real x, y;
        int cls;
    };
    std::vector<Site> sites(n_sites);
    for (auto& s : sites) {
        s.x = site_rng.uniform(0.0, static_cast<Real>(size));
        s.y = site_rng.uniform(0.0, static_cast<Real>(size));
        Real u = site_rng.uniform(0.0, 1.0);
        Real acc = 0;
        s.cls = static_cast<int>(class_mixture.size()) - 1;
        for (std::size_t c = 0; c < class_mixture.size(); ++c) {
            acc += class_mixture[c];
            if (u < acc) {
                s.cls = static_cast<int>(c);
                break;
            }
        }
    }

    Scene scene;
    scene.size = size;
    scene.seed = seed;
    scene.label_map.resize(size * size);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            Real best = 1e30;
            int cls = 0;
            for (const auto& s : sites) {
                Real dx = s.x - static_cast<Real>(x), dy = s.y - static_cast<Real>(y);
                Real d = dx * dx + dy * dy;
                if (d < best) {
                    best = d;
                    cls = s.cls;
                }
            }
            scene.label_map[y * size + x] = static_cast<std::uint8_t>(cls);
        }
    for (auto v : scene.label_map) scene.present_classes.insert(static_cast<int>(v));

    // shared texture fields, one per spatial scale used by the class table
    Rng tex_rng = root.child("texture");
    std::vector<std::size_t> cells = {2, 4, 8, 16};
    std::vector<std::vector<Real>> fields;
    for (auto c : cells) fields.push_back(value_noise(size, c, tex_rng));
    auto field_for = [&](std::size_t cell) -> const std::vector<Real>& {
        for (std::size_t i = 0; i < cells.size(); ++i)
            if (cells[i] == cell) return fields[i];
        return fields.back();
    };

    Rng stripe_rng = root.child("stripes");
    Real theta = stripe_rng.uniform(0.0, 3.14159265358979323846);
    Real period = stripe_rng.uniform(4.0, 7.0);
    Real phase = stripe_rng.uniform(0.0, 6.283185307179586);
    Real ux = std::cos(theta), uy = std::sin(theta);

    scene.optical = Image(size, size, 3);
    scene.sar_clean = Image(size, size, 2);
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            int c = scene.label_map[y * size + x];
            const ClassDef& cd = classes[static_cast<std::size_t>(c)];
            Real t = field_for(cd.tex_cell)[y * size + x];
            if (cd.striped) {
                Real s = std::sin(6.283185307179586 *
                                      (ux * static_cast<Real>(x) + uy * static_cast<Real>(y)) /
                                      period +
                                  phase);
                t = 0.7 * s + 0.3 * t;
            }
            for (std::size_t k = 0; k < 3; ++k) {
                Real chroma = (k == 2) ? 0.8 : 1.0;
                scene.optical.at(y, x, k) =
                    std::clamp(cd.rgb[k] + cd.opt_texture * chroma * t, 0.0, 1.0);
            }
            Real mod = 1.0 + cd.sar_texture * t;
            scene.sar_clean.at(y, x, 0) = std::max(cd.vv * mod, 1e-4);
            scene.sar_clean.at(y, x, 1) = std::max(cd.vh * mod, 1e-4);
        }
    return scene;
}

Image apply_speckle(const Image& sar_clean, std::size_t looks, std::uint64_t seed) {
    if (looks < 1) throw ConfigError("speckle looks must be >= 1");
    Rng rng(seed);
    Image out = sar_clean;
    Real shape = static_cast<Real>(looks);
    for (auto& v : out.data) {
        Real mult = rng.gamma(shape, 1.0 / shape);  // unit mean, variance 1/looks
        v = std::max(v * mult, 1e-12);
    }
    return out;
}

Image refined_lee(const Image& image, std::size_t window) {
    if (window % 2 == 0 || window < 3)
        throw ConfigError("refined Lee window must be odd and >= 3");
    if (image.c != 1) throw ShapeError("refined Lee expects a single-channel image");
    const std::size_t H = image.h, W = image.w;
    const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(window / 2);

    // estimate the speckle coefficient of variation from homogeneous windows:
    // low quantile of local var/mean^2
    std::vector<Real> cv2;
    std::size_t stride = std::max<std::size_t>(1, window / 2);
    for (std::size_t y = window / 2; y + window / 2 < H; y += stride)
        for (std::size_t x = window / 2; x + window / 2 < W; x += stride) {
            Real sum = 0, sumsq = 0;
            for (std::ptrdiff_t dy = -half; dy <= half; ++dy)
                for (std::ptrdiff_t dx = -half; dx <= half; ++dx) {
                    Real v = image.at(y + dy, x + dx, 0);
                    sum += v;
                    sumsq += v * v;
                }
            Real n = static_cast<Real>(window * window);
            Real mu = sum / n;
            Real var = std::max(0.0, sumsq / n - mu * mu);
            if (mu > 1e-12) cv2.push_back(var / (mu * mu));
        }
    Real sigma_v2 = 0.0;
    if (!cv2.empty()) {
        std::sort(cv2.begin(), cv2.end());
        sigma_v2 = cv2[static_cast<std::size_t>(0.4 * static_cast<Real>(cv2.size() - 1))];
    }

    Image out(H, W, 1);
    std::vector<std::pair<std::ptrdiff_t, std::ptrdiff_t>> win;
    win.reserve(window * window);

    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            win.clear();
            for (std::ptrdiff_t dy = -half; dy <= half; ++dy) {
                std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y) + dy;
                if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::ptrdiff_t dx = -half; dx <= half; ++dx) {
                    std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x) + dx;
                    if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(W)) continue;
                    win.emplace_back(dy, dx);
                }
            }
            // 3x3 band means over the in-bounds window
            Real bm[3][3] = {};
            Real bc[3][3] = {};
            auto band = [&](std::ptrdiff_t d) {
                if (3 * (d + half) < 2 * half + 1) return 0;
                if (3 * (d + half) < 2 * (2 * half + 1)) return 1;
                return 2;
            };
            for (auto [dy, dx] : win) {
                Real v = image.at(y + dy, x + dx, 0);
                bm[band(dy)][band(dx)] += v;
                bc[band(dy)][band(dx)] += 1;
            }
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j)
                    if (bc[i][j] > 0) bm[i][j] /= bc[i][j];

            Real gh = std::abs(bm[0][2] + bm[1][2] + bm[2][2] - bm[0][0] - bm[1][0] -
                               bm[2][0]);
            Real gv = std::abs(bm[2][0] + bm[2][1] + bm[2][2] - bm[0][0] - bm[0][1] -
                               bm[0][2]);
            Real gd1 = std::abs(bm[0][1] + bm[0][2] + bm[1][2] - bm[1][0] - bm[2][0] -
                                bm[2][1]);
            Real gd2 = std::abs(bm[0][0] + bm[0][1] + bm[1][0] - bm[1][2] - bm[2][1] -
                                bm[2][2]);
            int axis = 0;
            Real gmax = gh;
            if (gv > gmax) {
                axis = 1;
                gmax = gv;
            }
            if (gd1 > gmax) {
                axis = 2;
                gmax = gd1;
            }
            if (gd2 > gmax) axis = 3;

            auto in_half = [&](std::ptrdiff_t dy, std::ptrdiff_t dx, bool first) {
                switch (axis) {
                    case 0: return first ? dx <= 0 : dx >= 0;  // vertical edge
                    case 1: return first ? dy <= 0 : dy >= 0;  // horizontal edge
                    case 2: return first ? dx - dy >= 0 : dx - dy <= 0;
                    default: return first ? dx + dy <= 0 : dx + dy >= 0;
                }
            };
            Real center = image.at(y, x, 0);
            Real best_mu = center, best_var = 0;
            Real best_fit = 1e300;
            for (bool first : {true, false}) {
                Real sum = 0, sumsq = 0, n = 0;
                for (auto [dy, dx] : win)
                    if (in_half(dy, dx, first)) {
                        Real v = image.at(y + dy, x + dx, 0);
                        sum += v;
                        sumsq += v * v;
                        n += 1;
                    }
                if (n < 1) continue;
                Real mu = sum / n;
                Real var = std::max(0.0, sumsq / n - mu * mu);
                Real fit = std::abs(mu - center);
                if (fit < best_fit) {
                    best_fit = fit;
                    best_mu = mu;
                    best_var = var;
                }
            }
            Real var_x = (best_var - best_mu * best_mu * sigma_v2) / (1.0 + sigma_v2);
            Real w = best_var > 0 ? std::max(0.0, var_x / best_var) : 0.0;
            out.at(y, x, 0) = best_mu + w * (center - best_mu);
        }
    return out;
}

void clip_scale_channel(std::vector<Real>& values, ChannelStats& stats) {
    Real n = static_cast<Real>(values.size());
    Real sum = std::accumulate(values.begin(), values.end(), 0.0);
    stats.mean = sum / n;
    Real var = 0;
    for (Real v : values) var += (v - stats.mean) * (v - stats.mean);
    stats.std = std::sqrt(var / n);
    stats.lo = stats.mean - 3.0 * stats.std;
    stats.hi = stats.mean + 3.0 * stats.std;
    Real mn = 1e300, mx = -1e300;
    for (auto& v : values) {
        v = std::clamp(v, stats.lo, stats.hi);
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    stats.min_c = mn;
    stats.max_c = mx;
    if (stats.std == 0.0 || mx - mn < 1e-15) {
        stats.degenerate = true;
        for (auto& v : values) v = 0.5;
        return;
    }
    stats.degenerate = false;
    for (auto& v : values) v = (v - mn) / (mx - mn);
}

Real undo_scale(Real scaled, const ChannelStats& stats) {
    if (stats.degenerate) return stats.mean;
    return scaled * (stats.max_c - stats.min_c) + stats.min_c;
}

PreprocessedPair preprocess(const Image& sar_speckled, const Image& optical,
                            std::size_t lee_window) {
    if (sar_speckled.c != 2) throw ShapeError("preprocess expects 2-channel SAR");
    if (optical.c != 3) throw ShapeError("preprocess expects 3-channel optical");
    if (sar_speckled.h != optical.h || sar_speckled.w != optical.w)
        throw ShapeError("preprocess: SAR/optical size mismatch");
    for (Real v : sar_speckled.data)
        if (!std::isfinite(v)) throw ValidationError("non-finite SAR input");
    for (Real v : optical.data)
        if (!std::isfinite(v)) throw ValidationError("non-finite optical input");

    const std::size_t H = sar_speckled.h, W = sar_speckled.w;
    Image vv(H, W, 1), vh(H, W, 1);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            vv.at(y, x, 0) = sar_speckled.at(y, x, 0);
            vh.at(y, x, 0) = sar_speckled.at(y, x, 1);
        }
    Image vv_f = refined_lee(vv, lee_window);
    Image vh_f = refined_lee(vh, lee_window);

    PreprocessedPair pair;
    pair.sar3 = Image(H, W, 3);
    std::vector<std::vector<Real>> chans(3, std::vector<Real>(H * W));
    for (std::size_t p = 0; p < H * W; ++p) {
        chans[0][p] = vv_f.data[p];
        chans[1][p] = vh_f.data[p];
        chans[2][p] = vv_f.data[p] - vh_f.data[p];  // before any scaling
    }
    pair.sar_stats.resize(3);
    for (std::size_t c = 0; c < 3; ++c) clip_scale_channel(chans[c], pair.sar_stats[c]);
    for (std::size_t p = 0; p < H * W; ++p)
        for (std::size_t c = 0; c < 3; ++c) pair.sar3.data[p * 3 + c] = chans[c][p];

    pair.optical = Image(H, W, 3);
    pair.opt_stats.resize(3);
    for (std::size_t c = 0; c < 3; ++c) {
        std::vector<Real> ch(H * W);
        for (std::size_t p = 0; p < H * W; ++p) ch[p] = optical.data[p * 3 + c];
        clip_scale_channel(ch, pair.opt_stats[c]);
        for (std::size_t p = 0; p < H * W; ++p) pair.optical.data[p * 3 + c] = ch[p];
    }
    return pair;
}

namespace {
void flip_image(Image& img, bool fh, bool fv) {
    Image src = img;
    for (std::size_t y = 0; y < img.h; ++y)
        for (std::size_t x = 0; x < img.w; ++x) {
            std::size_t sy = fv ? img.h - 1 - y : y;
            std::size_t sx = fh ? img.w - 1 - x : x;
            for (std::size_t c = 0; c < img.c; ++c) img.at(y, x, c) = src.at(sy, sx, c);
        }
}
}  // namespace

PreprocessedPair augment(const PreprocessedPair& pair, std::uint64_t seed, bool enabled) {
    if (!enabled) return pair;
    Rng rng(seed);
    bool fh = rng.bernoulli(0.5);
    bool fv = rng.bernoulli(0.5);
    if (!fh && !fv) return pair;
    PreprocessedPair out = pair;
    flip_image(out.sar3, fh, fv);
    flip_image(out.optical, fh, fv);
    if (!out.label_map.empty()) {
        std::size_t H = out.sar3.h, W = out.sar3.w;
        std::vector<std::uint8_t> src = out.label_map;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                std::size_t sy = fv ? H - 1 - y : y;
                std::size_t sx = fh ? W - 1 - x : x;
                out.label_map[y * W + x] = src[sy * W + sx];
            }
    }
    return out;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_dataset(
    std::size_t count, Real ratio, std::uint64_t seed) {
    if (count == 0) throw ConfigError("cannot split an empty scene list");
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must be in (0,1)");
    std::vector<std::size_t> ids(count);
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng(seed);
    rng.shuffle(ids);
    std::size_t n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<Real>(count)));
    n_train = std::clamp<std::size_t>(n_train, 1, count - 1);
    std::vector<std::size_t> train(ids.begin(), ids.begin() + n_train);
    std::vector<std::size_t> test(ids.begin() + n_train, ids.end());
    std::sort(train.begin(), train.end());
    std::sort(test.begin(), test.end());
    return {train, test};
}

// ---------------- dataset on disk ----------------

namespace {
std::string scene_id(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%05zu", i);
    return buf;
}

Image labels_to_image(const std::vector<std::uint8_t>& labels, std::size_t size) {
    Image img(size, size, 1);
    for (std::size_t p = 0; p < labels.size(); ++p) img.data[p] = labels[p] / 255.0;
    return img;
}

std::vector<std::uint8_t> image_to_labels(const Image& img) {
    std::vector<std::uint8_t> labels(img.h * img.w);
    for (std::size_t p = 0; p < labels.size(); ++p)
        labels[p] = static_cast<std::uint8_t>(std::lround(img.data[p] * 255.0));
    return labels;
}

Json stats_to_json(const std::vector<ChannelStats>& stats) {
    Json arr = Json::array();
    for (const auto& s : stats)
        arr.push_back({{"mean", s.mean},
                       {"std", s.std},
                       {"lo", s.lo},
                       {"hi", s.hi},
                       {"min", s.min_c},
                       {"max", s.max_c},
                       {"degenerate", s.degenerate}});
    return arr;
}
}  // namespace

void build_dataset(const DatasetConfig& cfg, const std::string& out_dir,
                   const std::string& config_hash) {
    std::vector<Real> mixture = cfg.mixture;
    if (mixture.empty())
        mixture.assign(default_classes().size(), 1.0 / static_cast<Real>(default_classes().size()));
    validate_mixture(mixture);
    if (cfg.count < 2) throw ConfigError("dataset needs at least 2 scenes");

    Rng root(cfg.seed);
    auto [train_ids, test_ids] = split_dataset(cfg.count, cfg.split_ratio,
                                               root.child("split").seed());
    std::vector<int> split_of(cfg.count, 0);
    for (auto i : test_ids) split_of[i] = 1;

    ensure_dir(out_dir + "/train");
    ensure_dir(out_dir + "/test");

    Json files = Json::object();
    auto save_and_hash = [&](const std::string& rel, const Image& img, int depth) {
        write_png(out_dir + "/" + rel, img, depth);
        files[rel] = sha256_file(out_dir + "/" + rel);
    };

    Rng scene_seeds = root.child("scenes");
    Rng speckle_seeds = root.child("speckle");
    Rng hetero_seeds = root.child("hetero");
    for (std::size_t i = 0; i < cfg.count; ++i) {
        std::uint64_t sseed = scene_seeds.child(i).seed();
        Scene scene = generate_scene(sseed, cfg.size, mixture);
        Image speckled = apply_speckle(scene.sar_clean, cfg.looks,
                                       speckle_seeds.child(i).seed());
        PreprocessedPair pair = preprocess(speckled, scene.optical, cfg.lee_window);
        pair.label_map = scene.label_map;
        pair.present_classes = scene.present_classes;
        pair.seed = sseed;

        if (cfg.hetero_noise > 0) {
            Rng hr = hetero_seeds.child(i);
            for (std::size_t y = 0; y < cfg.size; ++y)
                for (std::size_t x = 0; x < cfg.size / 2; ++x)
                    for (std::size_t c = 0; c < 3; ++c)
                        pair.optical.at(y, x, c) = std::clamp(
                            pair.optical.at(y, x, c) + hr.normal(0.0, cfg.hetero_noise),
                            0.0, 1.0);
        }

        std::string split = split_of[i] ? "test" : "train";
        std::string id = scene_id(i);
        std::string base = split + "/" + id;
        save_and_hash(base + ".sar.png", pair.sar3, 16);
        save_and_hash(base + ".opt.png", pair.optical, 16);
        save_and_hash(base + ".labels.png", labels_to_image(pair.label_map, cfg.size), 8);

        Json meta = {{"id", id},
                     {"seed", sseed},
                     {"present_classes", std::vector<int>(pair.present_classes.begin(),
                                                          pair.present_classes.end())},
                     {"sar_stats", stats_to_json(pair.sar_stats)},
                     {"opt_stats", stats_to_json(pair.opt_stats)},
                     {"hetero", cfg.hetero_noise > 0}};
        write_json(out_dir + "/" + base + ".meta.json", meta);
        files[base + ".meta.json"] = sha256_file(out_dir + "/" + base + ".meta.json");
    }

    Json manifest = {
        {"schema_version", 1},
        {"kind", "dataset"},
        {"config_hash", config_hash},
        {"seed", cfg.seed},
        {"size", cfg.size},
        {"count", cfg.count},
        {"looks", cfg.looks},
        {"lee_window", cfg.lee_window},
        {"split_ratio", cfg.split_ratio},
        {"hetero_noise", cfg.hetero_noise},
        {"classes", class_names()},
        {"train", Json::array()},
        {"test", Json::array()},
        {"files", files},
    };
    for (auto i : train_ids) manifest["train"].push_back(scene_id(i));
    for (auto i : test_ids) manifest["test"].push_back(scene_id(i));
    write_json(out_dir + "/manifest.json", manifest);
}

DatasetIndex load_dataset(const std::string& dir, bool verify_checksums) {
    if (!file_exists(dir + "/manifest.json"))
        throw ArtifactError("no dataset manifest at " + dir +
                            " (run the synth command first)");
    Json m = read_json(dir + "/manifest.json");
    if (m.value("kind", "") != "dataset")
        throw ArtifactError("manifest at " + dir + " is not a dataset manifest");

    if (verify_checksums)
        for (auto& [rel, want] : m["files"].items()) {
            std::string have = sha256_file(dir + "/" + rel);
            if (have != want.get<std::string>())
                throw ArtifactError("checksum mismatch for " + rel + " in " + dir);
        }

    DatasetIndex idx;
    idx.dir = dir;
    idx.size = m["size"].get<std::size_t>();
    idx.num_classes = m["classes"].size();
    idx.hetero_noise = m.value("hetero_noise", 0.0);
    auto load_split = [&](const char* split, std::vector<SceneRecord>& out) {
        for (const auto& idj : m[split]) {
            std::string id = idj.get<std::string>();
            SceneRecord rec;
            rec.id = id;
            std::string base = std::string(split) + "/" + id;
            rec.sar_path = base + ".sar.png";
            rec.opt_path = base + ".opt.png";
            rec.labels_path = base + ".labels.png";
            rec.meta_path = base + ".meta.json";
            Json meta = read_json(dir + "/" + rec.meta_path);
            for (const auto& c : meta["present_classes"])
                rec.present_classes.insert(c.get<int>());
            rec.seed = meta["seed"].get<std::uint64_t>();
            out.push_back(std::move(rec));
        }
    };
    load_split("train", idx.train);
    load_split("test", idx.test);
    return idx;
}

PreprocessedPair load_pair(const DatasetIndex& idx, const SceneRecord& rec) {
    PreprocessedPair pair;
    pair.sar3 = read_png(idx.dir + "/" + rec.sar_path);
    pair.optical = read_png(idx.dir + "/" + rec.opt_path);
    pair.label_map = image_to_labels(read_png(idx.dir + "/" + rec.labels_path));
    pair.present_classes = rec.present_classes;
    pair.seed = rec.seed;
    return pair;
}

std::vector<Real> multi_hot(const std::set<int>& present, std::size_t num_classes) {
    std::vector<Real> v(num_classes, 0.0);
    for (int c : present)
        if (c >= 0 && static_cast<std::size_t>(c) < num_classes) v[static_cast<std::size_t>(c)] = 1.0;
    return v;
}

}  // namespace oscar
