#pragma once

// The representation phi: a frozen deterministic feature backbone over
// rasterized observations, composed with a trainable linear head that maps
// into the low-dimensional embedding space used by all OT machinery.

#include "rapl/common.hpp"

#include <map>
#include <string>

namespace rapl {

/// Top-down rendering of a scene; values in [0, 1], row-major (y, x, channel).
struct Observation {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<float> raster;

    std::size_t expected_size() const {
        return static_cast<std::size_t>(height) * width * channels;
    }
    float at(int y, int x, int c) const {
        return raster[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
};

struct BackboneConfig {
    int height = 64;
    int width = 64;
    int channels = 3;
    int n_projection = 64;  // random-projection feature count
    int grid = 8;           // patch grid (grid x grid cells)
    std::uint64_t seed = 0;

    int n_features() const { return n_projection + grid * grid * channels; }
    void validate() const;
};

/// Frozen feature extractor: a seeded random linear projection of the whole
/// raster (nuisance-rich, position-entangled) concatenated with per-cell mean
/// colors over a fixed grid partition (clean, linearly decodable geometry).
/// Both blocks are measured relative to the frame's per-channel mean color so
/// that a mostly-uniform background cannot dominate the feature vector.
/// Nothing in the pipeline ever mutates it.
class Backbone {
public:
    explicit Backbone(const BackboneConfig& cfg);

    const BackboneConfig& config() const { return cfg_; }

    /// Features for every frame of a trajectory, one column per frame.
    Matrix features(const std::vector<Observation>& frames) const;

    /// Single-frame convenience; identical to the one-column trajectory call.
    Vector features(const Observation& obs) const;

private:
    BackboneConfig cfg_;
    Eigen::MatrixXf projection_;  // n_projection x (height*width*channels)
};

struct LinearHead {
    Matrix weights;  // n_e x n_b
    Vector bias;     // n_e

    Index embedding_dim() const { return weights.rows(); }
    Index feature_dim() const { return weights.cols(); }
    void validate() const;
};

Vector encode(const Observation& obs, const LinearHead& head, const Backbone& backbone);

/// Frame-wise encoding of a trajectory; column t embeds frame t.
Matrix encode_trajectory(const std::vector<Observation>& frames, const LinearHead& head,
                         const Backbone& backbone);

/// Memoized backbone features keyed by trajectory id. Returns values
/// bit-identical to recomputation because it stores exactly the output of
/// Backbone::features for the frames it was first shown.
class FeatureCache {
public:
    explicit FeatureCache(const Backbone& backbone) : backbone_(&backbone) {}

    const Matrix& features(const std::string& traj_id, const std::vector<Observation>& frames);
    bool contains(const std::string& traj_id) const { return store_.count(traj_id) > 0; }
    std::size_t size() const { return store_.size(); }

private:
    const Backbone* backbone_;
    std::map<std::string, Matrix> store_;
};

/// Flat line-delimited checkpoint: n_e, n_b, backbone_seed, then the weight
/// matrix row-major one value per line, then the bias. Values round-trip
/// exactly (shortest-representation decimal).
void save_head(const std::string& path, const LinearHead& head, std::uint64_t backbone_seed);
std::pair<LinearHead, std::uint64_t> load_head(const std::string& path);

}  // namespace rapl
