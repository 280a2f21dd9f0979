#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "egs/common.hpp"
#include "egs/image.hpp"
#include "egs/sh.hpp"

namespace egs {

struct SHCoeffs {
  int degree = 0;
  // Channel-major: coeffs[ch * per_channel + k], k band-major.
  std::vector<double> coeffs;

  SHCoeffs() : coeffs(3, 0.0) {}
  explicit SHCoeffs(int deg) : degree(deg), coeffs(3 * sh_coeffs_per_channel(deg), 0.0) {
    if (deg < 0 || deg > kMaxShDegree) throw InvalidParameter("SHCoeffs: degree out of range");
  }

  int per_channel() const { return sh_coeffs_per_channel(degree); }
  double& at(int ch, int k) { return coeffs[static_cast<size_t>(ch) * per_channel() + k]; }
  double at(int ch, int k) const { return coeffs[static_cast<size_t>(ch) * per_channel() + k]; }

  Vec3 dc() const { return {at(0, 0), at(1, 0), at(2, 0)}; }
  void set_dc(const Vec3& v) {
    at(0, 0) = v[0];
    at(1, 0) = v[1];
    at(2, 0) = v[2];
  }
};

enum class PointClass : uint8_t { Reference = 0, Extension = 1 };

// Pose features deform between frames; appearance features are the ones the
// two-stream refinement freezes on inherited points. The grouping is
// structural so "frozen appearance" is a type-level property, not a
// convention.
struct PoseFeatures {
  Vec3 mean = Vec3::Zero();   // meters
  Quat rotation;              // unit, w >= 0 after canonicalization
};

struct AppearanceFeatures {
  Vec3 log_scale = Vec3::Zero();  // log-meters per principal axis
  double opacity_logit = 0.0;
  SHCoeffs sh;
};

struct GaussianPoint {
  uint64_t id = 0;
  PoseFeatures pose;
  AppearanceFeatures appearance;
  PointClass cls = PointClass::Reference;
  uint64_t ancestor_id = 0;  // meaningful only for Extension points
  int32_t birth_frame = 0;

  double opacity() const { return sigmoid(appearance.opacity_logit); }
  Vec3 scale() const { return appearance.log_scale.array().exp(); }
};

struct Aabb {
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::max());
  Vec3 hi = Vec3::Constant(std::numeric_limits<double>::lowest());

  bool valid() const { return (lo.array() <= hi.array()).all(); }
  void expand(const Vec3& p) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  Vec3 extent() const { return valid() ? Vec3(hi - lo) : Vec3::Zero(); }
  double diagonal() const { return extent().norm(); }
  bool contains(const Vec3& p) const {
    return valid() && (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
  }
};

struct GaussianFrame {
  int32_t frame_index = 0;
  std::vector<GaussianPoint> points;  // canonical order: ascending id
  Aabb bbox;

  size_t size() const { return points.size(); }

  void recompute_bbox() {
    bbox = Aabb{};
    for (const auto& p : points) bbox.expand(p.pose.mean);
  }

  void sort_by_id() {
    std::sort(points.begin(), points.end(),
              [](const GaussianPoint& a, const GaussianPoint& b) { return a.id < b.id; });
  }

  // Binary search by id; points must be in canonical order.
  const GaussianPoint* find(uint64_t id) const {
    auto it = std::lower_bound(points.begin(), points.end(), id,
                               [](const GaussianPoint& p, uint64_t v) { return p.id < v; });
    if (it == points.end() || it->id != id) return nullptr;
    return &*it;
  }
  GaussianPoint* find(uint64_t id) {
    return const_cast<GaussianPoint*>(static_cast<const GaussianFrame*>(this)->find(id));
  }

  uint64_t max_id() const {
    uint64_t m = 0;
    for (const auto& p : points) m = std::max(m, p.id);
    return m;
  }
};

struct CameraIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
};

struct CameraView {
  std::string view_id;
  CameraIntrinsics intr;
  Mat3 rot_w2c = Mat3::Identity();
  Vec3 t_w2c = Vec3::Zero();
  double near_clip = 0.01;
  double far_clip = 1000.0;
  std::optional<FlowMap> flow;    // transition t -> t+1 for the current frame pair
  std::optional<ImageU8> mask;    // 8-bit foreground mask
  std::optional<ImageRGB> image;  // linear-RGB target for the current frame

  Vec3 camera_center() const { return -(rot_w2c.transpose() * t_w2c); }
  Vec3 to_camera(const Vec3& world) const { return rot_w2c * world + t_w2c; }

  void validate() const {
    if (intr.fx <= 0 || intr.fy <= 0) throw InvalidParameter("CameraView: fx, fy must be positive");
    if (intr.width <= 0 || intr.height <= 0) throw InvalidParameter("CameraView: empty image plane");
    if (!(near_clip > 0.0) || !(near_clip < far_clip))
      throw InvalidParameter("CameraView: need 0 < near < far");
    if (flow && (flow->width != intr.width || flow->height != intr.height))
      throw FormatError("CameraView: flow dimensions do not match image plane");
    if (mask && (mask->width != intr.width || mask->height != intr.height))
      throw FormatError("CameraView: mask dimensions do not match image plane");
  }
};

// ---------------------------------------------------------------------------
// Pure geometric conversions.

// Unit quaternion on the canonical hemisphere (w >= 0; for w == 0 the first
// nonzero component is made positive).
inline Quat normalize_rotation(const Quat& q) {
  const double n = q.norm();
  if (!(n > 1e-12) || !std::isfinite(n)) throw InvalidParameter("normalize_rotation: near-zero norm");
  Quat r = q * (1.0 / n);
  double lead = r.w;
  if (lead == 0.0) lead = (r.x != 0.0) ? r.x : ((r.y != 0.0) ? r.y : r.z);
  if (lead < 0.0) r = r * -1.0;
  return r;
}

inline Quat normalize_rotation(const Vec4& wxyz) { return normalize_rotation(Quat::from_vec4(wxyz)); }

// Sigma = R diag(exp(2 s)) R^T with R from the normalized quaternion.
inline Mat3 covariance_from(const Vec3& log_scale, const Quat& rotation) {
  if (!log_scale.allFinite() || !std::isfinite(rotation.norm2()))
    throw InvalidParameter("covariance_from: non-finite input");
  const Mat3 r = rotation.to_matrix_normalized();
  const Vec3 d = (2.0 * log_scale).array().exp();
  return r * d.asDiagonal() * r.transpose();
}

struct ProjectedGaussian {
  bool culled = true;
  Vec2 mean2d = Vec2::Zero();   // pixels
  Mat2 cov2d = Mat2::Zero();    // pixels^2
  double depth = 0.0;           // camera-space z, meters
  Vec3 cam_pos = Vec3::Zero();  // camera-space position
};

// Perspective projection with first-order covariance propagation. Points at
// or behind the near plane (and beyond far) report culled rather than error.
inline ProjectedGaussian project_gaussian(const GaussianPoint& pt, const CameraView& cam) {
  ProjectedGaussian out;
  const Vec3 t = cam.to_camera(pt.pose.mean);
  if (!(t.z() > cam.near_clip) || !(t.z() < cam.far_clip)) return out;
  const auto& K = cam.intr;
  out.cam_pos = t;
  out.depth = t.z();
  const double inv_z = 1.0 / t.z();
  out.mean2d = {K.fx * t.x() * inv_z + K.cx, K.fy * t.y() * inv_z + K.cy};

  Eigen::Matrix<double, 2, 3> jac;
  jac << K.fx * inv_z, 0.0, -K.fx * t.x() * inv_z * inv_z,
      0.0, K.fy * inv_z, -K.fy * t.y() * inv_z * inv_z;
  const Eigen::Matrix<double, 2, 3> w = jac * cam.rot_w2c;
  const Mat3 cov3d = covariance_from(pt.appearance.log_scale, pt.pose.rotation);
  out.cov2d = w * cov3d * w.transpose();
  out.culled = false;
  return out;
}

}  // namespace egs
