#include "rapl/encoder.hpp"

#include <cmath>
#include <fstream>

namespace rapl {

void BackboneConfig::validate() const {
    if (height < 1 || width < 1 || channels < 1) {
        throw std::invalid_argument("backbone: raster dimensions must be positive");
    }
    if (n_projection < 1) {
        throw std::invalid_argument("backbone: n_projection must be >= 1");
    }
    if (grid < 1 || height % grid != 0 || width % grid != 0) {
        throw std::invalid_argument(
            "backbone: grid must be >= 1 and divide both raster height and width");
    }
}

Backbone::Backbone(const BackboneConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const Index dim = static_cast<Index>(cfg_.height) * cfg_.width * cfg_.channels;
    projection_.resize(cfg_.n_projection, dim);
    // Entries uniform on [-a, a] with a = sqrt(3/dim), giving unit-variance
    // projections of unit-variance inputs. Fill order is row-major so the
    // matrix is a pure function of (seed, dims).
    const float a = std::sqrt(3.0f / static_cast<float>(dim));
    std::uint64_t state = derive_seed(cfg_.seed, /*tag=*/0xb0b0ULL);
    for (Index r = 0; r < projection_.rows(); ++r) {
        for (Index c = 0; c < projection_.cols(); ++c) {
            double u = static_cast<double>(splitmix64(state) >> 11) * 0x1.0p-53;
            projection_(r, c) = (2.0f * static_cast<float>(u) - 1.0f) * a;
        }
    }
}

Matrix Backbone::features(const std::vector<Observation>& frames) const {
    if (frames.empty()) {
        throw std::invalid_argument("backbone: empty trajectory");
    }
    const Index dim = projection_.cols();
    const Index t_len = static_cast<Index>(frames.size());
    Eigen::MatrixXf flat(dim, t_len);
    for (Index t = 0; t < t_len; ++t) {
        const Observation& obs = frames[static_cast<std::size_t>(t)];
        if (obs.height != cfg_.height || obs.width != cfg_.width ||
            obs.channels != cfg_.channels || obs.raster.size() != obs.expected_size()) {
            throw std::invalid_argument(
                "backbone: raster dimensions do not match the backbone config at frame " +
                std::to_string(t));
        }
        flat.col(t) = Eigen::Map<const Eigen::VectorXf>(obs.raster.data(), dim);
    }
    if (flat.minCoeff() < 0.0f || flat.maxCoeff() > 1.0f) {
        throw std::invalid_argument("backbone: raster values must lie in [0, 1]");
    }

    // Both components measure structure relative to the frame's per-channel
    // mean color. Removing that mean (a fixed linear preprocessing, so the
    // projection block is still one fixed linear map of the raster) keeps the
    // flat background from dominating every feature vector, which would pin
    // all cosine similarities near 1 and flatten the OT cost landscape.
    const Index n_px = static_cast<Index>(cfg_.height) * cfg_.width;
    Eigen::MatrixXf channel_mean(cfg_.channels, t_len);
    for (Index t = 0; t < t_len; ++t) {
        for (int ch = 0; ch < cfg_.channels; ++ch) {
            float sum = 0.0f;
            for (Index px = 0; px < n_px; ++px) sum += flat(px * cfg_.channels + ch, t);
            channel_mean(ch, t) = sum / static_cast<float>(n_px);
        }
        for (Index px = 0; px < n_px; ++px)
            for (int ch = 0; ch < cfg_.channels; ++ch)
                flat(px * cfg_.channels + ch, t) -= channel_mean(ch, t);
    }

    Eigen::MatrixXf projected = projection_ * flat;

    const int cell_h = cfg_.height / cfg_.grid;
    const int cell_w = cfg_.width / cfg_.grid;
    const float inv_cell = 1.0f / static_cast<float>(cell_h * cell_w);
    Matrix out(cfg_.n_features(), t_len);
    for (Index t = 0; t < t_len; ++t) {
        const Observation& obs = frames[static_cast<std::size_t>(t)];
        out.col(t).head(cfg_.n_projection) = projected.col(t).cast<double>();
        Index k = cfg_.n_projection;
        for (int cy = 0; cy < cfg_.grid; ++cy) {
            for (int cx = 0; cx < cfg_.grid; ++cx) {
                for (int ch = 0; ch < cfg_.channels; ++ch) {
                    float sum = 0.0f;
                    for (int y = cy * cell_h; y < (cy + 1) * cell_h; ++y) {
                        for (int x = cx * cell_w; x < (cx + 1) * cell_w; ++x) {
                            sum += obs.at(y, x, ch);
                        }
                    }
                    out(k++, t) = static_cast<double>(sum * inv_cell - channel_mean(ch, t));
                }
            }
        }
    }
    return out;
}

Vector Backbone::features(const Observation& obs) const {
    return features(std::vector<Observation>{obs}).col(0);
}

void LinearHead::validate() const {
    if (weights.rows() < 1 || weights.cols() < 1) {
        throw std::invalid_argument("linear head: weights must be non-empty");
    }
    if (bias.size() != weights.rows()) {
        throw std::invalid_argument("linear head: bias length must equal n_e");
    }
    if (!weights.allFinite() || !bias.allFinite()) {
        throw std::invalid_argument("linear head: parameters must be finite");
    }
}

Vector encode(const Observation& obs, const LinearHead& head, const Backbone& backbone) {
    head.validate();
    if (head.feature_dim() != backbone.config().n_features()) {
        throw std::invalid_argument("encode: head expects " +
                                    std::to_string(head.feature_dim()) +
                                    " features, backbone produces " +
                                    std::to_string(backbone.config().n_features()));
    }
    return head.weights * backbone.features(obs) + head.bias;
}

Matrix encode_trajectory(const std::vector<Observation>& frames, const LinearHead& head,
                         const Backbone& backbone) {
    head.validate();
    if (head.feature_dim() != backbone.config().n_features()) {
        throw std::invalid_argument("encode_trajectory: head/backbone dimension mismatch");
    }
    Matrix feats = backbone.features(frames);
    return (head.weights * feats).colwise() + head.bias;
}

const Matrix& FeatureCache::features(const std::string& traj_id,
                                     const std::vector<Observation>& frames) {
    auto it = store_.find(traj_id);
    if (it != store_.end()) return it->second;
    return store_.emplace(traj_id, backbone_->features(frames)).first->second;
}

void save_head(const std::string& path, const LinearHead& head, std::uint64_t backbone_seed) {
    head.validate();
    std::ofstream out(path);
    if (!out) throw ArtifactError("cannot open checkpoint for writing: " + path);
    out << head.embedding_dim() << "\n" << head.feature_dim() << "\n"
        << backbone_seed << "\n";
    for (Index r = 0; r < head.weights.rows(); ++r) {
        for (Index c = 0; c < head.weights.cols(); ++c) {
            out << fmt_g17(head.weights(r, c)) << "\n";
        }
    }
    for (Index i = 0; i < head.bias.size(); ++i) {
        out << fmt_g17(head.bias(i)) << "\n";
    }
    if (!out) throw ArtifactError("write failed for checkpoint: " + path);
}

std::pair<LinearHead, std::uint64_t> load_head(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ArtifactError("cannot open checkpoint: " + path);
    long long n_e = 0, n_b = 0;
    std::uint64_t seed = 0;
    if (!(in >> n_e >> n_b >> seed) || n_e < 1 || n_b < 1) {
        throw ArtifactError("malformed checkpoint header: " + path);
    }
    LinearHead head;
    head.weights.resize(n_e, n_b);
    head.bias.resize(n_e);
    for (Index r = 0; r < head.weights.rows(); ++r) {
        for (Index c = 0; c < head.weights.cols(); ++c) {
            if (!(in >> head.weights(r, c))) {
                throw ArtifactError("checkpoint truncated in weights: " + path);
            }
        }
    }
    for (Index i = 0; i < head.bias.size(); ++i) {
        if (!(in >> head.bias(i))) {
            throw ArtifactError("checkpoint truncated in bias: " + path);
        }
    }
    double extra;
    if (in >> extra) {
        throw ArtifactError("checkpoint has trailing values: " + path);
    }
    head.validate();
    return {std::move(head), seed};
}

}  // namespace rapl
