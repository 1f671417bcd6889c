#pragma once

#include <map>
#include <string>
#include <vector>

#include "oscar/backbone/backbone.hpp"
#include "oscar/core/image.hpp"

namespace oscar {

// Full-reference metrics for one image pair.
struct PairMetrics {
    Real ssim = 0, sam = 0, scc = 0, d_lambda = 0;
    bool scc_flat = false;  // a high-pass channel had zero variance
};

// Mean windowed SSIM: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// valid-position windows, channels averaged. Inputs must lie in [0,1].
Real ssim(const Image& x, const Image& y);

// Mean per-pixel spectral angle arccos(<x,y>/(|x||y|)), norms floored at 1e-8.
Real sam(const Image& x, const Image& y);

// Pearson correlation of 4-neighbour-Laplacian high-pass responses, channels
// averaged; a zero-variance response contributes 0 and raises the flag.
Real scc(const Image& x, const Image& y, bool* flat_flag = nullptr);

// QNR spectral-distortion index with exponent p over all ordered band pairs of
// the global universal image quality index Q.
Real d_lambda(const Image& pred, const Image& ref, Real p = 1.0);

// Frechet distance between Gaussian fits of two feature sets (rows = samples).
// Covariance square root via eigendecomposition of the symmetrized product with
// negative eigenvalues clamped; shrinkage 1e-6*I when samples <= dim.
Real efid(const Tensor& a, const Tensor& b, bool* shrinkage_flag = nullptr);

// Unbiased MMD^2 with the polynomial kernel (<x,y>/d + 1)^3.
Real ekid(const Tensor& a, const Tensor& b);

// Deepest captured CLS feature rows for a batch of images, eval mode.
Tensor encode_cls_features(const Encoder& enc, const std::vector<Image>& images,
                           std::size_t batch_size = 8);

struct MetricReport {
    std::map<std::string, PairMetrics> per_image;
    Real mean_ssim = 0, mean_sam = 0, mean_scc = 0, mean_d_lambda = 0;
    Real efid_value = 0, ekid_value = 0;
    bool efid_shrinkage = false;
    std::vector<std::string> unmatched;  // file names present on only one side
    Json config;

    Json to_json() const;
    std::string table() const;  // human-readable summary
};

// Compares matched *.png files across two directories and embeds the
// teacher-feature-space distances. Unmatched names are skipped (or fatal in
// strict mode). Pixel metrics bound-checked: SSIM/SCC in [-1,1], SAM in
// [0,pi], D_lambda >= 0.
MetricReport evaluate_run(const std::string& pred_dir, const std::string& ref_dir,
                          const std::string& teacher_ckpt, bool strict = false);

}  // namespace oscar
