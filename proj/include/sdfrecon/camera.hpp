#pragma once

// Pinhole camera model, pose parametrization (fixed base pose composed with
// an optimizable Euler-angle + translation delta), the shared image-plane
// deformation field, differentiable ray generation, and pose error metrics.
//
// Conventions, fixed and relied on throughout:
//   - camera space: x right, y down, z forward (optical axis)
//   - pixel (u, v) covers the unit square [u, u+1) x [v, v+1); its center is
//     the continuous coordinate (u + 0.5, v + 0.5)
//   - Euler deltas use the intrinsic XYZ convention R = Rx(a) * Ry(b) * Rz(c)
//   - refined pose: R = R_base * R_xyz(delta_rot), t = t_base + delta_trans

#include <array>
#include <cmath>
#include <fstream>
#include <memory>
#include <optional>
#include <vector>

#include "sdfrecon/core.hpp"
#include "sdfrecon/scene_model.hpp"

namespace sdfrecon {

struct Intrinsics {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    int width = 0, height = 0;

    void validate() const {
        if (fx <= 0 || fy <= 0) throw DataError("intrinsics: focal lengths must be positive");
        if (width <= 0 || height <= 0) throw DataError("intrinsics: image size must be positive");
        if (cx <= 0 || cx >= width || cy <= 0 || cy >= height)
            throw DataError("intrinsics: principal point outside the image");
    }

    Intrinsics scaled(double s) const {
        Intrinsics out = *this;
        out.fx *= s;
        out.fy *= s;
        out.cx *= s;
        out.cy *= s;
        out.width = static_cast<int>(std::lround(width * s));
        out.height = static_cast<int>(std::lround(height * s));
        return out;
    }
};

inline void save_intrinsics(const std::string& path, const Intrinsics& intr) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot write intrinsics: " + path);
    os.precision(12);
    os << intr.fx << " " << intr.fy << " " << intr.cx << " " << intr.cy << " " << intr.width
       << " " << intr.height << "\n";
}

inline Intrinsics load_intrinsics(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open intrinsics file: " + path);
    Intrinsics intr;
    if (!(is >> intr.fx >> intr.fy >> intr.cx >> intr.cy >> intr.width >> intr.height))
        throw DataError("malformed intrinsics file (want: fx fy cx cy width height): " + path);
    intr.validate();
    return intr;
}

// ---- rotation helpers --------------------------------------------------------

inline Mat3d rot_x(double a) {
    Mat3d m;
    m << 1, 0, 0, 0, std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a);
    return m;
}
inline Mat3d rot_y(double a) {
    Mat3d m;
    m << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
    return m;
}
inline Mat3d rot_z(double a) {
    Mat3d m;
    m << std::cos(a), -std::sin(a), 0, std::sin(a), std::cos(a), 0, 0, 0, 1;
    return m;
}

inline Mat3d euler_xyz(double a, double b, double c) { return rot_x(a) * rot_y(b) * rot_z(c); }

// Analytic derivatives of euler_xyz w.r.t. each angle.
inline std::array<Mat3d, 3> euler_xyz_derivs(double a, double b, double c) {
    Mat3d dx, dy, dz;
    dx << 0, 0, 0, 0, -std::sin(a), -std::cos(a), 0, std::cos(a), -std::sin(a);
    dy << -std::sin(b), 0, std::cos(b), 0, 0, 0, -std::cos(b), 0, -std::sin(b);
    dz << -std::sin(c), -std::cos(c), 0, std::cos(c), -std::sin(c), 0, 0, 0, 0;
    return {dx * rot_y(b) * rot_z(c), rot_x(a) * dy * rot_z(c), rot_x(a) * rot_y(b) * dz};
}

// Refined camera-to-world transform of a base pose and a 6-vector delta
// (3 Euler angles in radians, 3 translation components in meters).
inline Mat4d compose_pose(const Mat4d& base, const Eigen::Matrix<double, 6, 1>& delta) {
    Mat4d out = Mat4d::Identity();
    out.topLeftCorner<3, 3>() =
        base.topLeftCorner<3, 3>() * euler_xyz(delta[0], delta[1], delta[2]);
    out.topRightCorner<3, 1>() = base.topRightCorner<3, 1>() + delta.tail<3>();
    return out;
}

template <class T>
Mat4d pose_matrix(const SceneModel<T>& model, int frame) {
    if (frame < 0 || frame >= model.num_frames)
        throw DataError("pose_matrix: frame index out of range");
    const auto& d = model.params.at(blocks::kPoseDelta).value;
    Eigen::Matrix<double, 6, 1> delta;
    for (int k = 0; k < 6; ++k) delta[k] = static_cast<double>(d(frame, k));
    return compose_pose(model.base_poses[frame], delta);
}

inline Mat4d invert_pose(const Mat4d& p) {
    Mat4d out = Mat4d::Identity();
    Mat3d rt = p.topLeftCorner<3, 3>().transpose();
    out.topLeftCorner<3, 3>() = rt;
    out.topRightCorner<3, 1>() = -rt * p.topRightCorner<3, 1>();
    return out;
}

// ---- plain ray generation ----------------------------------------------------

struct Ray {
    Vec3d origin;
    Vec3d dir;  // unit length
};

// Camera-space ray direction (not normalized; z == 1) through a continuous
// pixel coordinate.
inline Vec3d pixel_to_cam_dir(const Intrinsics& intr, const Vec2d& pixel) {
    return {(pixel.x() - intr.cx) / intr.fx, (pixel.y() - intr.cy) / intr.fy, 1.0};
}

// World-space ray through a continuous pixel coordinate, no deformation.
inline Ray unproject_ray(const Intrinsics& intr, const Mat4d& cam_to_world, const Vec2d& pixel) {
    Vec3d d = cam_to_world.topLeftCorner<3, 3>() * pixel_to_cam_dir(intr, pixel);
    return {cam_to_world.topRightCorner<3, 1>(), d.normalized()};
}

// Deformed pixel coordinate (u', v') = (u, v) + field(u, v).
template <class T>
Vec2d deform_pixel(const SceneModel<T>& model, const Intrinsics& intr, const Vec2d& pixel) {
    if (pixel.x() < 0 || pixel.x() > intr.width || pixel.y() < 0 || pixel.y() > intr.height)
        throw DataError("deform_pixel: pixel outside image bounds");
    Tape<T> tape(const_cast<ParamStore<T>*>(&model.params), /*record=*/false);
    MatX<T> pn(1, 2);
    pn(0, 0) = static_cast<T>(2.0 * pixel.x() / intr.width - 1.0);
    pn(0, 1) = static_cast<T>(2.0 * pixel.y() / intr.height - 1.0);
    auto off = deform_forward(tape, model, tape.constant(pn));
    const auto& v = tape.value(off);
    return pixel + Vec2d(static_cast<double>(v(0, 0)), static_cast<double>(v(0, 1)));
}

// Full ray for one pixel of one frame: deformation (optional), unprojection,
// refined pose, then the scene normalization transform. Returned in
// normalized scene coordinates with a unit direction.
template <class T>
Ray generate_ray(const SceneModel<T>& model, const Intrinsics& intr, int frame,
                 const Vec2d& pixel, bool use_deform = true) {
    Vec2d p = use_deform ? deform_pixel(model, intr, pixel) : pixel;
    Mat4d pose = pose_matrix(model, frame);
    Ray world = unproject_ray(intr, pose, p);
    return {model.norm.to_normalized(world.origin), world.dir};
}

// ---- differentiable ray batch -------------------------------------------------

template <class T>
struct RayBatchNodes {
    typename Tape<T>::Ref origins;    // n x 3, normalized scene coordinates
    typename Tape<T>::Ref dirs_unit;  // n x 3, unit world directions
    std::vector<double> dir_cam_z;    // z component of the unit camera-space dir per ray
};

namespace detail {

// Per-frame rotation and its angle derivatives, for the fused pose op.
struct FrameRotation {
    Mat3d r;
    std::array<Mat3d, 3> dr;
};

template <class T>
FrameRotation frame_rotation(const SceneModel<T>& model, int frame) {
    const auto& d = model.params.at(blocks::kPoseDelta).value;
    const double a = static_cast<double>(d(frame, 0));
    const double b = static_cast<double>(d(frame, 1));
    const double c = static_cast<double>(d(frame, 2));
    const Mat3d rb = model.base_poses[frame].template topLeftCorner<3, 3>();
    FrameRotation fr;
    fr.r = rb * euler_xyz(a, b, c);
    auto derivs = euler_xyz_derivs(a, b, c);
    for (int k = 0; k < 3; ++k) fr.dr[k] = rb * derivs[k];
    return fr;
}

}  // namespace detail

// Rotates camera-space row vectors into world space by each row's frame pose,
// with gradients flowing to both the vectors and the per-frame Euler deltas.
template <class T>
typename Tape<T>::Ref rotate_rows_by_pose(Tape<T>& tape, const SceneModel<T>& model,
                                          typename Tape<T>::Ref cam_vectors,
                                          std::vector<int> frames) {
    const MatX<T>& x = tape.value(cam_vectors);
    if (x.cols() != 3) throw DataError("rotate_rows_by_pose: expected n x 3 input");
    if (static_cast<Eigen::Index>(frames.size()) != x.rows())
        throw DataError("rotate_rows_by_pose: frame id count mismatch");

    auto rots = std::make_shared<std::unordered_map<int, detail::FrameRotation>>();
    for (int f : frames) {
        if (f < 0 || f >= model.num_frames)
            throw DataError("rotate_rows_by_pose: frame index out of range");
        if (!rots->count(f)) (*rots)[f] = detail::frame_rotation(model, f);
    }
    MatX<T> y(x.rows(), 3);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        Vec3d xv = x.row(i).template cast<double>().transpose();
        y.row(i) = (rots->at(frames[i]).r * xv).template cast<T>().transpose();
    }
    auto fr = std::make_shared<std::vector<int>>(std::move(frames));
    const int xid = cam_vectors.id;
    return tape.custom(std::move(y), {cam_vectors},
                       [rots, fr, xid](Tape<T>& t, const MatX<T>& g) {
                           ParamStore<T>* ps = t.params();
                           auto& pose_grad = ps->at(blocks::kPoseDelta).grad;
                           const MatX<T>& xv = t.value({xid});
                           MatX<T> gx(xv.rows(), 3);
                           for (Eigen::Index i = 0; i < xv.rows(); ++i) {
                               const auto& R = rots->at((*fr)[i]);
                               Vec3d gi = g.row(i).template cast<double>().transpose();
                               Vec3d xi = xv.row(i).template cast<double>().transpose();
                               gx.row(i) = (R.r.transpose() * gi).template cast<T>().transpose();
                               for (int k = 0; k < 3; ++k)
                                   pose_grad((*fr)[i], k) +=
                                       static_cast<T>(gi.dot(R.dr[k] * xi));
                           }
                           t.accumulate(xid, std::move(gx));
                       });
}

// Builds the differentiable ray batch: optional deformation-field pixel shift,
// pinhole unprojection, per-frame pose, scene normalization. Pixel coordinates
// are continuous (callers pass pixel centers).
template <class T>
RayBatchNodes<T> build_ray_batch(Tape<T>& tape, const SceneModel<T>& model,
                                 const Intrinsics& intr, const std::vector<Vec2d>& pixels,
                                 const std::vector<int>& frames, bool use_deform) {
    const auto n = static_cast<Eigen::Index>(pixels.size());
    if (frames.size() != pixels.size())
        throw DataError("build_ray_batch: pixel/frame count mismatch");

    MatX<T> pix(n, 2);
    for (Eigen::Index i = 0; i < n; ++i) {
        pix(i, 0) = static_cast<T>(pixels[i].x());
        pix(i, 1) = static_cast<T>(pixels[i].y());
    }

    typename Tape<T>::Ref pix_node;
    if (use_deform) {
        MatX<T> pn(n, 2);
        for (Eigen::Index i = 0; i < n; ++i) {
            pn(i, 0) = static_cast<T>(2.0 * pixels[i].x() / intr.width - 1.0);
            pn(i, 1) = static_cast<T>(2.0 * pixels[i].y() / intr.height - 1.0);
        }
        auto offsets = deform_forward(tape, model, tape.constant(pn));
        pix_node = tape.cadd(offsets, pix);
    } else {
        pix_node = tape.constant(pix);
    }

    MatX<T> pp_shift(n, 2), inv_f(n, 2);
    pp_shift.col(0).setConstant(static_cast<T>(-intr.cx));
    pp_shift.col(1).setConstant(static_cast<T>(-intr.cy));
    inv_f.col(0).setConstant(static_cast<T>(1.0 / intr.fx));
    inv_f.col(1).setConstant(static_cast<T>(1.0 / intr.fy));
    auto xy = tape.cmul(tape.cadd(pix_node, pp_shift), std::move(inv_f));
    auto cam = tape.concat_cols({xy, tape.constant(MatX<T>::Ones(n, 1))});

    auto world = rotate_rows_by_pose(tape, model, cam, frames);
    auto dirs_unit = tape.rows_normalize(world);

    RayBatchNodes<T> out;
    out.dirs_unit = dirs_unit;
    out.dir_cam_z.resize(pixels.size());
    const MatX<T>& camv = tape.value(cam);
    for (Eigen::Index i = 0; i < n; ++i)
        out.dir_cam_z[i] = 1.0 / camv.row(i).template cast<double>().norm();

    // Origins: per-frame refined translation, gathered per ray, then the
    // normalization transform (p - center) * scale.
    MatX<T> base_t(model.num_frames, 3);
    for (int f = 0; f < model.num_frames; ++f)
        base_t.row(f) =
            model.base_poses[f].topRightCorner<3, 1>().transpose().template cast<T>();
    auto trans = tape.cadd(tape.slice_cols(tape.param(blocks::kPoseDelta), 3, 3), base_t);
    auto origins_w = tape.gather_rows(trans, frames);
    MatX<T> neg_center(n, 3);
    neg_center.rowwise() = (-model.norm.center).transpose().template cast<T>();
    out.origins = tape.scale_add(tape.cadd(origins_w, neg_center),
                                 static_cast<T>(model.norm.scale), T(0));
    return out;
}

// ---- pose error metrics --------------------------------------------------------

struct PoseErrorReport {
    double pos_err_m = 0;    // mean camera-center distance after alignment
    double rot_err_deg = 0;  // mean geodesic rotation angle after alignment
    bool aligned = false;    // false when < 3 cameras (raw errors reported)
};

// Rigidly aligns the estimated trajectory to ground truth (least squares over
// camera centers, no scale) and reports mean positional / rotational errors.
inline PoseErrorReport pose_errors(const std::vector<Mat4d>& est, const std::vector<Mat4d>& gt,
                                   bool align = true) {
    if (est.size() != gt.size()) throw DataError("pose_errors: trajectory length mismatch");
    if (est.empty()) throw DataError("pose_errors: empty trajectories");
    const size_t n = est.size();

    Mat3d r_align = Mat3d::Identity();
    Vec3d t_align = Vec3d::Zero();
    bool did_align = false;
    if (align && n >= 3) {
        Vec3d ce = Vec3d::Zero(), cg = Vec3d::Zero();
        for (size_t i = 0; i < n; ++i) {
            ce += est[i].topRightCorner<3, 1>();
            cg += gt[i].topRightCorner<3, 1>();
        }
        ce /= double(n);
        cg /= double(n);
        Mat3d h = Mat3d::Zero();
        for (size_t i = 0; i < n; ++i)
            h += (est[i].topRightCorner<3, 1>() - ce) * (gt[i].topRightCorner<3, 1>() - cg).transpose();
        if (h.norm() > 1e-12) {
            Eigen::JacobiSVD<Mat3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
            Mat3d d = Mat3d::Identity();
            d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
            r_align = svd.matrixV() * d * svd.matrixU().transpose();
        }
        t_align = cg - r_align * ce;
        did_align = true;
    }

    double pos = 0, rot = 0;
    for (size_t i = 0; i < n; ++i) {
        Vec3d c = r_align * est[i].topRightCorner<3, 1>() + t_align;
        pos += (c - gt[i].topRightCorner<3, 1>()).norm();
        Mat3d re = r_align * est[i].topLeftCorner<3, 3>();
        double ctheta = ((gt[i].topLeftCorner<3, 3>().transpose() * re).trace() - 1.0) / 2.0;
        rot += std::acos(std::clamp(ctheta, -1.0, 1.0)) * 180.0 / M_PI;
    }
    return {pos / double(n), rot / double(n), did_align};
}

}  // namespace sdfrecon
