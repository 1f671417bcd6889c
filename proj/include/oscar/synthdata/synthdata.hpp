#pragma once

#include <array>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "oscar/core/image.hpp"
#include "oscar/core/rng.hpp"

namespace oscar {

// Rendering table for one land-cover class: optical color, texture amplitude and
// spatial scale, mean linear backscatter per polarization, and whether the class
// carries an oriented striping pattern. Meadow and field share mean backscatter on
// purpose: they are separable in SAR only by texture, which is exactly the
// ambiguity semantic guidance is supposed to resolve.
struct ClassDef {
    std::string name;
    std::array<Real, 3> rgb;
    Real opt_texture;      // optical texture amplitude
    std::size_t tex_cell;  // value-noise cell size (texture spatial scale)
    Real vv, vh;           // mean linear backscatter, strictly positive
    Real sar_texture;      // SAR texture modulation amplitude
    bool striped;          // oriented row pattern (cultivated fields)
};

const std::vector<ClassDef>& default_classes();  // 6 classes
std::vector<std::string> class_names();

struct Scene {
    std::size_t size = 0;
    std::vector<std::uint8_t> label_map;  // size*size class ids
    std::set<int> present_classes;
    Image optical;    // (size,size,3) in [0,1]
    Image sar_clean;  // (size,size,2) VV,VH linear, > 0
    std::uint64_t seed = 0;
};

struct ChannelStats {
    Real mean = 0, std = 0;
    Real lo = 0, hi = 0;        // clip bounds actually applied
    Real min_c = 0, max_c = 1;  // post-clip extrema used for scaling
    bool degenerate = false;
};

struct PreprocessedPair {
    Image sar3;     // (H,W,3): filtered VV, VH, VV-VH, each min-max scaled to [0,1]
    Image optical;  // (H,W,3) in [0,1]
    std::vector<ChannelStats> sar_stats, opt_stats;
    std::vector<std::uint8_t> label_map;
    std::set<int> present_classes;
    std::uint64_t seed = 0;
};

Scene generate_scene(std::uint64_t seed, std::size_t size,
                     const std::vector<Real>& class_mixture);
Image apply_speckle(const Image& sar_clean, std::size_t looks, std::uint64_t seed);
Image refined_lee(const Image& image, std::size_t window);  // single channel

// channel-wise 3-sigma clip followed by min-max scaling; shared by both modalities
void clip_scale_channel(std::vector<Real>& values, ChannelStats& stats);
Real undo_scale(Real scaled, const ChannelStats& stats);

PreprocessedPair preprocess(const Image& sar_speckled, const Image& optical,
                            std::size_t lee_window = 7);
PreprocessedPair augment(const PreprocessedPair& pair, std::uint64_t seed,
                         bool enabled = true);
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_dataset(
    std::size_t count, Real ratio, std::uint64_t seed);

// ---- dataset on disk ----

struct DatasetConfig {
    std::size_t size = 64;
    std::size_t count = 2000;
    std::vector<Real> mixture;  // empty = uniform over all classes
    std::size_t looks = 4;
    std::size_t lee_window = 7;
    Real split_ratio = 0.8;
    std::uint64_t seed = 1234;
    Real hetero_noise = 0.0;  // >0: inject noise into the left optical half
};

struct SceneRecord {
    std::string id;
    std::string sar_path, opt_path, labels_path, meta_path;
    std::set<int> present_classes;
    std::uint64_t seed = 0;
};

struct DatasetIndex {
    std::string dir;
    std::size_t size = 0;
    std::size_t num_classes = 0;
    Real hetero_noise = 0.0;
    std::vector<SceneRecord> train, test;
};

void build_dataset(const DatasetConfig& cfg, const std::string& out_dir,
                   const std::string& config_hash);
DatasetIndex load_dataset(const std::string& dir, bool verify_checksums = false);
PreprocessedPair load_pair(const DatasetIndex& idx, const SceneRecord& rec);
std::vector<Real> multi_hot(const std::set<int>& present, std::size_t num_classes);

}  // namespace oscar
