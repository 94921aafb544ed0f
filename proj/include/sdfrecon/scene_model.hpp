#pragma once

// Hybrid scene representation: a shape MLP mapping encoded positions to a
// truncated signed distance (in truncation units, positive in front of the
// surface) plus a feature vector, and a radiance MLP mapping that feature,
// an encoded view direction, and a per-frame latent code to RGB.
//
// All parameters — both MLPs, the latent table, per-frame pose corrections,
// and the image-plane deformation field — live in one ParamStore.

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdfrecon/autodiff.hpp"
#include "sdfrecon/checkpoint.hpp"
#include "sdfrecon/core.hpp"
#include "sdfrecon/encoding.hpp"

namespace sdfrecon {

struct SceneModelConfig {
    EncodingConfig pos_enc{8, true, 3};
    EncodingConfig dir_enc{4, true, 3};
    int shape_layers = 8;   // hidden layers
    int shape_width = 256;
    int shape_skip = 4;     // encoded input re-joined before this hidden layer; 0 disables
    int radiance_layers = 4;
    int radiance_width = 128;
    int latent_dim = 16;
    double truncation = 0.05;  // meters
    int deform_layers = 6;  // hidden layers of the pixel-space deformation MLP
    int deform_width = 128;
    int deform_enc_bands = 0;  // 0 = raw normalized pixel coords as input

    void validate() const {
        pos_enc.validate();
        dir_enc.validate();
        if (shape_layers < 1 || radiance_layers < 1 || deform_layers < 1)
            throw UsageError("model: layer counts must be >= 1");
        if (shape_width < 1 || radiance_width < 1 || deform_width < 1)
            throw UsageError("model: layer widths must be >= 1");
        if (latent_dim < 0) throw UsageError("model: latent_dim must be >= 0");
        if (truncation <= 0) throw UsageError("model: truncation must be positive");
    }
};

inline void to_json(nlohmann::json& j, const EncodingConfig& c) {
    j = {{"num_bands", c.num_bands}, {"include_input", c.include_input},
         {"input_dim", c.input_dim}};
}
inline void from_json(const nlohmann::json& j, EncodingConfig& c) {
    j.at("num_bands").get_to(c.num_bands);
    j.at("include_input").get_to(c.include_input);
    j.at("input_dim").get_to(c.input_dim);
}
inline void to_json(nlohmann::json& j, const SceneModelConfig& c) {
    j = {{"pos_enc", c.pos_enc},           {"dir_enc", c.dir_enc},
         {"shape_layers", c.shape_layers}, {"shape_width", c.shape_width},
         {"shape_skip", c.shape_skip},     {"radiance_layers", c.radiance_layers},
         {"radiance_width", c.radiance_width}, {"latent_dim", c.latent_dim},
         {"truncation", c.truncation},     {"deform_layers", c.deform_layers},
         {"deform_width", c.deform_width}, {"deform_enc_bands", c.deform_enc_bands}};
}
inline void from_json(const nlohmann::json& j, SceneModelConfig& c) {
    j.at("pos_enc").get_to(c.pos_enc);
    j.at("dir_enc").get_to(c.dir_enc);
    j.at("shape_layers").get_to(c.shape_layers);
    j.at("shape_width").get_to(c.shape_width);
    j.at("shape_skip").get_to(c.shape_skip);
    j.at("radiance_layers").get_to(c.radiance_layers);
    j.at("radiance_width").get_to(c.radiance_width);
    j.at("latent_dim").get_to(c.latent_dim);
    j.at("truncation").get_to(c.truncation);
    j.at("deform_layers").get_to(c.deform_layers);
    j.at("deform_width").get_to(c.deform_width);
    j.at("deform_enc_bands").get_to(c.deform_enc_bands);
}

struct Bbox3 {
    Vec3d min = Vec3d::Constant(std::numeric_limits<double>::max());
    Vec3d max = Vec3d::Constant(std::numeric_limits<double>::lowest());

    void expand(const Vec3d& p) {
        min = min.cwiseMin(p);
        max = max.cwiseMax(p);
    }
    Vec3d center() const { return 0.5 * (min + max); }
    Vec3d extent() const { return max - min; }
    bool valid() const { return (max.array() > min.array()).all(); }
};

// Uniform scale + translation mapping the (padded) scene bounding box into
// the [-1,1]^3 cube: p_norm = (p - center) * scale.
struct SceneNormalization {
    Vec3d center = Vec3d::Zero();
    double scale = 1.0;

    Vec3d to_normalized(const Vec3d& p) const { return (p - center) * scale; }
    Vec3d to_world(const Vec3d& p) const { return p / scale + center; }
};

inline void to_json(nlohmann::json& j, const SceneNormalization& n) {
    j = {{"center", {n.center.x(), n.center.y(), n.center.z()}}, {"scale", n.scale}};
}
inline void from_json(const nlohmann::json& j, SceneNormalization& n) {
    auto c = j.at("center");
    n.center = Vec3d(c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>());
    j.at("scale").get_to(n.scale);
}

inline SceneNormalization normalization_from_bbox(const Bbox3& bbox, double padding = 0.1) {
    if (!bbox.valid()) throw DataError("degenerate scene bounding box");
    SceneNormalization n;
    n.center = bbox.center();
    const double half = 0.5 * bbox.extent().maxCoeff() * (1.0 + padding);
    n.scale = 1.0 / half;
    return n;
}

template <class T>
struct SceneModel {
    SceneModelConfig cfg;
    SceneNormalization norm;
    int num_frames = 0;
    std::vector<Mat4d> base_poses;  // camera-to-world, refined by the pose_delta block
    ParamStore<T> params;

    // Truncation distance in normalized-cube units (used by the renderer when
    // sampling in normalized space).
    double truncation_world() const { return cfg.truncation; }
};

namespace blocks {
inline std::string shape_w(int i) { return "shape.W" + std::to_string(i); }
inline std::string shape_b(int i) { return "shape.b" + std::to_string(i); }
inline std::string rad_w(int i) { return "rad.W" + std::to_string(i); }
inline std::string rad_b(int i) { return "rad.b" + std::to_string(i); }
inline std::string deform_w(int i) { return "deform.W" + std::to_string(i); }
inline std::string deform_b(int i) { return "deform.b" + std::to_string(i); }
inline constexpr const char* kLatents = "latents";
inline constexpr const char* kPoseDelta = "pose_delta";
}  // namespace blocks

namespace detail {

enum class DenseInit { Kaiming, Xavier, Zero };

template <class T>
void init_dense(ParamStore<T>& ps, const std::string& wname, const std::string& bname,
                int out, int in, Rng& rng, DenseInit mode) {
    auto& W = ps.add(wname, out, in);
    ps.add(bname, out, 1);  // biases start at zero
    if (mode == DenseInit::Zero) return;
    double bound = mode == DenseInit::Kaiming ? std::sqrt(6.0 / in)
                                              : std::sqrt(6.0 / (in + out));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index r = 0; r < W.value.rows(); ++r)
        for (Eigen::Index c = 0; c < W.value.cols(); ++c)
            W.value(r, c) = static_cast<T>(dist(rng));
}

// Layer input widths of the shape MLP, accounting for the skip join.
inline int shape_layer_in(const SceneModelConfig& cfg, int layer) {
    const int enc = cfg.pos_enc.output_dim();
    if (layer == 0) return enc;
    if (cfg.shape_skip > 0 && layer == cfg.shape_skip && layer < cfg.shape_layers)
        return cfg.shape_width + enc;
    return cfg.shape_width;
}

}  // namespace detail

// Builds a freshly initialized model. Hidden layers use Kaiming-uniform
// weights, output heads Xavier-uniform, biases zero. Latent codes and the
// deformation field's output layer start at zero so both paths are inert
// until optimized. Deterministic for a fixed seed.
template <class T>
SceneModel<T> init_scene_model(const SceneModelConfig& cfg, int num_frames, const Bbox3& bbox,
                               uint64_t seed) {
    cfg.validate();
    if (num_frames <= 0) throw DataError("init_scene_model: num_frames must be positive");
    SceneModel<T> model;
    model.cfg = cfg;
    model.norm = normalization_from_bbox(bbox);
    model.num_frames = num_frames;
    model.base_poses.assign(num_frames, Mat4d::Identity());
    Rng rng = make_rng(seed, /*stream=*/101);

    for (int i = 0; i < cfg.shape_layers; ++i)
        detail::init_dense(model.params, blocks::shape_w(i), blocks::shape_b(i),
                           cfg.shape_width, detail::shape_layer_in(cfg, i), rng, detail::DenseInit::Kaiming);
    detail::init_dense(model.params, blocks::shape_w(cfg.shape_layers),
                       blocks::shape_b(cfg.shape_layers), 1, cfg.shape_width, rng,
                       detail::DenseInit::Xavier);

    const int rad_in = cfg.shape_width + cfg.dir_enc.output_dim() + cfg.latent_dim;
    for (int i = 0; i < cfg.radiance_layers; ++i)
        detail::init_dense(model.params, blocks::rad_w(i), blocks::rad_b(i), cfg.radiance_width,
                           i == 0 ? rad_in : cfg.radiance_width, rng,
                           detail::DenseInit::Kaiming);
    detail::init_dense(model.params, blocks::rad_w(cfg.radiance_layers),
                       blocks::rad_b(cfg.radiance_layers), 3, cfg.radiance_width, rng,
                       detail::DenseInit::Xavier);

    if (cfg.latent_dim > 0) model.params.add(blocks::kLatents, num_frames, cfg.latent_dim);
    model.params.add(blocks::kPoseDelta, num_frames, 6);

    const int deform_in = cfg.deform_enc_bands > 0
                              ? 2 * (1 + 2 * cfg.deform_enc_bands)
                              : 2;
    for (int i = 0; i < cfg.deform_layers; ++i)
        detail::init_dense(model.params, blocks::deform_w(i), blocks::deform_b(i),
                           cfg.deform_width, i == 0 ? deform_in : cfg.deform_width, rng,
                           detail::DenseInit::Kaiming);
    detail::init_dense(model.params, blocks::deform_w(cfg.deform_layers),
                       blocks::deform_b(cfg.deform_layers), 2, cfg.deform_width, rng,
                       detail::DenseInit::Zero);
    return model;
}

template <class T>
struct ShapeForward {
    typename Tape<T>::Ref sdf;      // n x 1, truncation units
    typename Tape<T>::Ref feature;  // n x shape_width (last hidden activation)
};

// Shape MLP on a batch of normalized positions (n x 3 node).
template <class T>
ShapeForward<T> shape_forward(Tape<T>& tape, const SceneModel<T>& model,
                              typename Tape<T>::Ref positions) {
    const auto& cfg = model.cfg;
    auto enc = encode(tape, positions, cfg.pos_enc);
    auto h = tape.relu(tape.affine(enc, blocks::shape_w(0), blocks::shape_b(0)));
    for (int i = 1; i < cfg.shape_layers; ++i) {
        if (cfg.shape_skip > 0 && i == cfg.shape_skip) h = tape.concat_cols({h, enc});
        h = tape.relu(tape.affine(h, blocks::shape_w(i), blocks::shape_b(i)));
    }
    auto d = tape.affine(h, blocks::shape_w(cfg.shape_layers), blocks::shape_b(cfg.shape_layers));
    return {d, h};
}

// Radiance MLP: per-sample feature + unit view direction + latent row -> rgb in [0,1]^3.
template <class T>
typename Tape<T>::Ref radiance_forward(Tape<T>& tape, const SceneModel<T>& model,
                                       typename Tape<T>::Ref feature,
                                       typename Tape<T>::Ref unit_dirs,
                                       typename Tape<T>::Ref latents) {
    const auto& cfg = model.cfg;
    auto enc_d = encode(tape, unit_dirs, cfg.dir_enc);
    std::vector<typename Tape<T>::Ref> parts{feature, enc_d};
    if (cfg.latent_dim > 0) parts.push_back(latents);
    auto h = tape.concat_cols(parts);
    for (int i = 0; i < cfg.radiance_layers; ++i)
        h = tape.relu(tape.affine(h, blocks::rad_w(i), blocks::rad_b(i)));
    auto rgb = tape.affine(h, blocks::rad_w(cfg.radiance_layers),
                           blocks::rad_b(cfg.radiance_layers));
    return tape.sigmoid_(rgb);
}

// Image-plane deformation field: normalized pixel coords (n x 2 in [-1,1]^2)
// -> pixel offsets (n x 2). Output layer is zero-initialized, so offsets are
// exactly zero until trained.
template <class T>
typename Tape<T>::Ref deform_forward(Tape<T>& tape, const SceneModel<T>& model,
                                     typename Tape<T>::Ref pix_norm) {
    const auto& cfg = model.cfg;
    auto h = pix_norm;
    if (cfg.deform_enc_bands > 0)
        h = encode(tape, h, EncodingConfig{cfg.deform_enc_bands, true, 2});
    for (int i = 0; i < cfg.deform_layers; ++i)
        h = tape.relu(tape.affine(h, blocks::deform_w(i), blocks::deform_b(i)));
    return tape.affine(h, blocks::deform_w(cfg.deform_layers),
                       blocks::deform_b(cfg.deform_layers));
}

// ---- plain (inference) queries ---------------------------------------------

// SDF + feature at a batch of normalized points, without recording gradients.
template <class T>
std::pair<VecX<T>, MatX<T>> shape_query_batch(const SceneModel<T>& model,
                                              const MatX<T>& positions) {
    Tape<T> tape(const_cast<ParamStore<T>*>(&model.params), /*record=*/false);
    auto out = shape_forward(tape, model, tape.constant(positions));
    return {tape.value(out.sdf).col(0), tape.value(out.feature)};
}

// Single-point query (normalized coordinates); returns SDF in truncation units.
template <class T>
std::pair<T, VecX<T>> shape_query(const SceneModel<T>& model, const Vec3d& p_norm) {
    if (!p_norm.allFinite()) throw DataError("shape_query: non-finite position");
    MatX<T> p(1, 3);
    p << static_cast<T>(p_norm.x()), static_cast<T>(p_norm.y()), static_cast<T>(p_norm.z());
    auto [sdf, feat] = shape_query_batch(model, p);
    return {sdf(0), feat.row(0).transpose()};
}

// Radiance for a single feature/direction/frame-latent triple.
template <class T>
Eigen::Matrix<T, 3, 1> radiance_query(const SceneModel<T>& model, const VecX<T>& feature,
                                      const Vec3d& dir, int frame) {
    if (std::abs(dir.norm() - 1.0) > 1e-6)
        throw DataError("radiance_query: direction must be unit length");
    if (frame < 0 || frame >= model.num_frames)
        throw DataError("radiance_query: frame index out of range");
    Tape<T> tape(const_cast<ParamStore<T>*>(&model.params), /*record=*/false);
    MatX<T> f(1, feature.size());
    f.row(0) = feature.transpose();
    MatX<T> d(1, 3);
    d << static_cast<T>(dir.x()), static_cast<T>(dir.y()), static_cast<T>(dir.z());
    typename Tape<T>::Ref latent;
    if (model.cfg.latent_dim > 0)
        latent = tape.gather_rows(tape.param(blocks::kLatents), {frame});
    else
        latent = tape.constant(MatX<T>(1, 0));
    auto rgb = radiance_forward(tape, model, tape.constant(f), tape.constant(d), latent);
    const auto& v = tape.value(rgb);
    return {v(0, 0), v(0, 1), v(0, 2)};
}

}  // namespace sdfrecon
