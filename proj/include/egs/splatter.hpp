#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <unordered_map>
#include <vector>

#include "egs/core.hpp"

namespace egs {

struct RenderOptions {
  int tile_size = 16;
  int sh_degree_cap = -1;  // -1: use each point's own degree
  int max_image_dim = 256; // desk-scale cap
  bool retain = true;      // keep per-pixel contribution lists for backward
  int threads = 0;
  double alpha_clamp = 0.99;
  double transmittance_floor = 1e-4;
  double footprint_sigma = 3.0;   // per-pixel ellipse cutoff, in sigmas
  double max_condition = 1e8;     // degenerate 2D covariance guard
};

// Per-view projected state retained for the backward pass.
struct ProjectedSplat {
  uint32_t point_index = 0;
  Vec2 mean2d = Vec2::Zero();
  Mat2 cov2d = Mat2::Zero();
  Mat2 conic = Mat2::Zero();
  double depth = 0.0;
  Vec3 cam_pos = Vec3::Zero();
  Vec3 color = Vec3::Zero();
  bool color_clamped[3] = {false, false, false};
  double opacity = 0.0;
  Vec3 view_dir = Vec3::Zero();  // unit, camera center -> mean
  double view_dist = 0.0;
};

struct PixelContrib {
  uint32_t splat;  // index into RenderOutput::splats
  double alpha;    // composited per-pixel alpha (post clamp)
};

struct RenderOutput {
  ImageRGB image;
  ImageGray alpha;
  std::vector<ProjectedSplat> splats;           // visible points, (depth, id) order
  std::vector<std::vector<PixelContrib>> pixels;  // per-pixel front-to-back lists
  int degenerate_skipped = 0;
  bool retained = false;
  size_t source_point_count = 0;
  std::string view_id;

  // Composited weight w = alpha * transmittance of contributor k at pixel p.
  // Weights are recovered from the stored alphas front to back.
};

struct ContributionReport {
  size_t num_points = 0;
  size_t num_views = 0;
  std::vector<double> phi;  // [point * num_views + view]

  double at(size_t point, size_t view) const { return phi[point * num_views + view]; }
  double max_over_views(size_t point) const {
    double m = 0.0;
    for (size_t q = 0; q < num_views; ++q) m = std::max(m, at(point, q));
    return m;
  }
  double sum_over_views(size_t point) const {
    double s = 0.0;
    for (size_t q = 0; q < num_views; ++q) s += at(point, q);
    return s;
  }
};

namespace splat_detail {

struct ColorSample {
  Vec3 color;
  bool clamped[3];
};

// Linear RGB from SH; graphics convention includes a +0.5 offset on the DC
// term and a clamp at zero (tracked per channel for the backward pass).
inline ColorSample color_from_sh(const SHCoeffs& sh, const Vec3& dir, int degree_cap) {
  const int degree = degree_cap < 0 ? sh.degree : std::min(sh.degree, degree_cap);
  double basis[16];
  sh_basis(degree, dir, basis);
  const int n = sh_coeffs_per_channel(degree);
  ColorSample out;
  for (int ch = 0; ch < 3; ++ch) {
    double v = 0.5;
    for (int k = 0; k < n; ++k) v += basis[k] * sh.at(ch, k);
    out.clamped[ch] = v < 0.0;
    out.color[ch] = out.clamped[ch] ? 0.0 : v;
  }
  return out;
}

inline bool invert_cov2d(const Mat2& cov, double max_condition, Mat2* conic) {
  const double a = cov(0, 0), b = cov(0, 1), c = cov(1, 1);
  const double tr = a + c;
  const double disc = std::sqrt(std::max(0.0, (a - c) * (a - c) + 4.0 * b * b));
  const double lmin = 0.5 * (tr - disc);
  const double lmax = 0.5 * (tr + disc);
  if (!(lmin > 0.0) || lmax > max_condition * lmin) return false;
  const double det = a * c - b * b;
  if (!(det > 0.0) || !std::isfinite(det)) return false;
  const double inv = 1.0 / det;
  (*conic) << c * inv, -b * inv, -b * inv, a * inv;
  return true;
}

inline std::vector<ProjectedSplat> project_visible(const GaussianFrame& frame, const CameraView& cam,
                                                   const RenderOptions& opts, int* degenerate_skipped) {
  std::vector<ProjectedSplat> splats;
  splats.reserve(frame.points.size());
  const Vec3 center = cam.camera_center();
  for (uint32_t i = 0; i < frame.points.size(); ++i) {
    const GaussianPoint& pt = frame.points[i];
    const ProjectedGaussian pr = project_gaussian(pt, cam);
    if (pr.culled) continue;
    ProjectedSplat s;
    s.point_index = i;
    s.mean2d = pr.mean2d;
    s.cov2d = pr.cov2d;
    if (!invert_cov2d(pr.cov2d, opts.max_condition, &s.conic)) {
      if (degenerate_skipped) ++(*degenerate_skipped);
      continue;
    }
    s.depth = pr.depth;
    s.cam_pos = pr.cam_pos;
    const Vec3 to_pt = pt.pose.mean - center;
    s.view_dist = to_pt.norm();
    s.view_dir = s.view_dist > 0.0 ? Vec3(to_pt / s.view_dist) : Vec3(0, 0, 1);
    const ColorSample cs = color_from_sh(pt.appearance.sh, s.view_dir, opts.sh_degree_cap);
    s.color = cs.color;
    for (int ch = 0; ch < 3; ++ch) s.color_clamped[ch] = cs.clamped[ch];
    s.opacity = pt.opacity();
    splats.push_back(s);
  }
  // Global front-to-back order; ties broken by point id for determinism.
  std::stable_sort(splats.begin(), splats.end(), [&](const ProjectedSplat& a, const ProjectedSplat& b) {
    if (a.depth != b.depth) return a.depth < b.depth;
    return frame.points[a.point_index].id < frame.points[b.point_index].id;
  });
  return splats;
}

struct TileGrid {
  int tile_size = 16;
  int tiles_x = 0, tiles_y = 0;
  std::vector<std::vector<uint32_t>> lists;  // per tile, splat indices in depth order

  static TileGrid build(const std::vector<ProjectedSplat>& splats, int width, int height,
                        const RenderOptions& opts) {
    TileGrid g;
    g.tile_size = opts.tile_size;
    g.tiles_x = (width + g.tile_size - 1) / g.tile_size;
    g.tiles_y = (height + g.tile_size - 1) / g.tile_size;
    g.lists.resize(static_cast<size_t>(g.tiles_x) * g.tiles_y);
    const double k = opts.footprint_sigma;
    for (uint32_t si = 0; si < splats.size(); ++si) {
      const ProjectedSplat& s = splats[si];
      const double rx = k * std::sqrt(std::max(0.0, s.cov2d(0, 0)));
      const double ry = k * std::sqrt(std::max(0.0, s.cov2d(1, 1)));
      int x0 = static_cast<int>(std::floor((s.mean2d.x() - rx) / g.tile_size));
      int x1 = static_cast<int>(std::floor((s.mean2d.x() + rx) / g.tile_size));
      int y0 = static_cast<int>(std::floor((s.mean2d.y() - ry) / g.tile_size));
      int y1 = static_cast<int>(std::floor((s.mean2d.y() + ry) / g.tile_size));
      x0 = std::max(x0, 0);
      y0 = std::max(y0, 0);
      x1 = std::min(x1, g.tiles_x - 1);
      y1 = std::min(y1, g.tiles_y - 1);
      for (int ty = y0; ty <= y1; ++ty)
        for (int tx = x0; tx <= x1; ++tx) g.lists[static_cast<size_t>(ty) * g.tiles_x + tx].push_back(si);
    }
    return g;
  }
};

}  // namespace splat_detail

// Tile-based forward pass with front-to-back alpha compositing. The per-pixel
// alpha of a point is opacity * exp(-0.5 d^T conic d), clamped to
// [0, alpha_clamp], evaluated only inside the footprint ellipse; compositing
// stops once transmittance drops below transmittance_floor.
inline RenderOutput render(const GaussianFrame& frame, const CameraView& cam, const RenderOptions& opts = {}) {
  const int width = cam.intr.width, height = cam.intr.height;
  if (width > opts.max_image_dim || height > opts.max_image_dim)
    throw InvalidParameter("render: image dimensions exceed the configured cap");
  RenderOutput out;
  out.image = ImageRGB(width, height, 0.0);
  out.alpha = ImageGray(width, height, 0.0);
  out.retained = opts.retain;
  out.source_point_count = frame.points.size();
  out.view_id = cam.view_id;
  if (opts.retain) out.pixels.resize(static_cast<size_t>(width) * height);

  out.splats = splat_detail::project_visible(frame, cam, opts, &out.degenerate_skipped);
  if (out.splats.empty()) return out;
  const auto grid = splat_detail::TileGrid::build(out.splats, width, height, opts);

  const double cutoff = opts.footprint_sigma * opts.footprint_sigma;
  parallel_for(grid.lists.size(), [&](size_t tile) {
    const auto& list = grid.lists[tile];
    if (list.empty()) return;
    const int tx = static_cast<int>(tile % grid.tiles_x);
    const int ty = static_cast<int>(tile / grid.tiles_x);
    const int x0 = tx * grid.tile_size, x1 = std::min(width, x0 + grid.tile_size);
    const int y0 = ty * grid.tile_size, y1 = std::min(height, y0 + grid.tile_size);
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) {
        double trans = 1.0;
        Vec3 acc = Vec3::Zero();
        auto* plist = opts.retain ? &out.pixels[static_cast<size_t>(y) * width + x] : nullptr;
        for (uint32_t si : list) {
          const ProjectedSplat& s = out.splats[si];
          const Vec2 d(x - s.mean2d.x(), y - s.mean2d.y());
          const double r2 = d.dot(s.conic * d);
          if (r2 > cutoff) continue;
          const double alpha = std::min(opts.alpha_clamp, s.opacity * std::exp(-0.5 * r2));
          acc += (alpha * trans) * s.color;
          if (plist) plist->push_back({si, alpha});
          trans *= 1.0 - alpha;
          if (trans < opts.transmittance_floor) break;
        }
        double* px = out.image.at(x, y);
        px[0] = acc[0];
        px[1] = acc[1];
        px[2] = acc[2];
        *out.alpha.at(x, y) = 1.0 - trans;
      }
    }
  }, opts.threads);
  return out;
}

// Per-point, per-view transmission sums (the pruning metric): for each view,
// phi is the sum over pixels of the composited weight alpha * transmittance.
inline ContributionReport contribution(const GaussianFrame& frame, std::span<const CameraView> cams,
                                       const RenderOptions& opts = {}) {
  ContributionReport report;
  report.num_points = frame.points.size();
  report.num_views = cams.size();
  report.phi.assign(report.num_points * std::max<size_t>(report.num_views, 1), 0.0);

  for (size_t q = 0; q < cams.size(); ++q) {
    const CameraView& cam = cams[q];
    const int width = cam.intr.width, height = cam.intr.height;
    if (width > opts.max_image_dim || height > opts.max_image_dim)
      throw InvalidParameter("contribution: image dimensions exceed the configured cap");
    int degenerate = 0;
    const auto splats = splat_detail::project_visible(frame, cam, opts, &degenerate);
    if (splats.empty()) continue;
    const auto grid = splat_detail::TileGrid::build(splats, width, height, opts);
    const double cutoff = opts.footprint_sigma * opts.footprint_sigma;

    // Per-tile partial sums, merged in tile order for determinism.
    std::vector<std::vector<double>> partial(grid.lists.size());
    parallel_for(grid.lists.size(), [&](size_t tile) {
      const auto& list = grid.lists[tile];
      if (list.empty()) return;
      auto& acc = partial[tile];
      acc.assign(list.size(), 0.0);
      const int tx = static_cast<int>(tile % grid.tiles_x);
      const int ty = static_cast<int>(tile / grid.tiles_x);
      const int px0 = tx * grid.tile_size, px1 = std::min(width, px0 + grid.tile_size);
      const int py0 = ty * grid.tile_size, py1 = std::min(height, py0 + grid.tile_size);
      for (int y = py0; y < py1; ++y) {
        for (int x = px0; x < px1; ++x) {
          double trans = 1.0;
          for (size_t li = 0; li < list.size(); ++li) {
            const ProjectedSplat& s = splats[list[li]];
            const Vec2 d(x - s.mean2d.x(), y - s.mean2d.y());
            const double r2 = d.dot(s.conic * d);
            if (r2 > cutoff) continue;
            const double alpha = std::min(opts.alpha_clamp, s.opacity * std::exp(-0.5 * r2));
            acc[li] += alpha * trans;
            trans *= 1.0 - alpha;
            if (trans < opts.transmittance_floor) break;
          }
        }
      }
    }, opts.threads);

    for (size_t tile = 0; tile < grid.lists.size(); ++tile) {
      const auto& list = grid.lists[tile];
      for (size_t li = 0; li < list.size(); ++li) {
        if (partial[tile].empty()) continue;
        report.phi[splats[list[li]].point_index * report.num_views + q] += partial[tile][li];
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Backward pass.

struct PointGradients {
  std::vector<Vec3> d_mean;            // world-space mean
  std::vector<Vec4> d_rotation;        // raw quaternion (w, x, y, z)
  std::vector<Vec3> d_log_scale;
  std::vector<double> d_opacity_logit;
  std::vector<std::vector<double>> d_sh;  // same layout as SHCoeffs::coeffs
  std::vector<Vec2> d_mean2d;             // screen-space; pixel units
  std::vector<double> abs_grad2d;         // sum over pixels of |d mean2d| norms
  std::vector<uint8_t> visible;

  void init(const GaussianFrame& frame, bool with_sh) {
    const size_t n = frame.points.size();
    d_mean.assign(n, Vec3::Zero());
    d_rotation.assign(n, Vec4::Zero());
    d_log_scale.assign(n, Vec3::Zero());
    d_opacity_logit.assign(n, 0.0);
    d_mean2d.assign(n, Vec2::Zero());
    abs_grad2d.assign(n, 0.0);
    visible.assign(n, 0);
    if (with_sh) {
      d_sh.resize(n);
      for (size_t i = 0; i < n; ++i) d_sh[i].assign(frame.points[i].appearance.sh.coeffs.size(), 0.0);
    }
  }
};

namespace splat_detail {

// Accumulators per (tile, local splat): screen-space pieces of the chain.
struct SplatAccum {
  Vec3 g_color = Vec3::Zero();
  Vec2 g_mean2d = Vec2::Zero();
  Mat2 g_conic = Mat2::Zero();  // full-matrix convention, dL/dA
  double g_opacity = 0.0;
  double abs2d = 0.0;
  bool touched = false;
};

inline void check_matching_state(const RenderOutput& out, const GaussianFrame& frame, const CameraView& cam,
                                 const ImageRGB& grad_image) {
  if (!out.retained) throw ContractViolation("backward: forward pass was not retained");
  if (out.source_point_count != frame.points.size())
    throw ContractViolation("backward: frame does not match the forward pass");
  if (out.view_id != cam.view_id) throw ContractViolation("backward: camera does not match the forward pass");
  if (grad_image.width != out.image.width || grad_image.height != out.image.height)
    throw ContractViolation("backward: gradient image dimensions mismatch");
}

inline Mat3 rotation_derivative(const Quat& q, int comp) {
  const double w = q.w, x = q.x, y = q.y, z = q.z;
  Mat3 m;
  switch (comp) {
    case 0: m << 0, -z, y, z, 0, -x, -y, x, 0; break;
    case 1: m << 0, y, z, y, -2 * x, -w, z, w, -2 * x; break;
    case 2: m << -2 * y, x, w, x, 0, z, -w, z, -2 * y; break;
    default: m << -2 * z, -w, x, w, -2 * z, y, x, y, 0; break;
  }
  return 2.0 * m;
}

}  // namespace splat_detail

// Analytic gradients of a scalar image loss with gradient `grad_image`
// (dL/dpixel) w.r.t. every point parameter. Covers the screen-space chain
// (compositing -> alpha -> mean2d/conic/opacity) and the projection chain
// back to world mean, rotation, log-scale, opacity logit and SH coefficients.
inline PointGradients render_backward(const RenderOutput& out, const GaussianFrame& frame,
                                      const CameraView& cam, const ImageRGB& grad_image,
                                      const RenderOptions& opts = {}) {
  splat_detail::check_matching_state(out, frame, cam, grad_image);
  PointGradients grads;
  grads.init(frame, true);
  if (out.splats.empty()) return grads;

  const int width = out.image.width, height = out.image.height;
  const int tile = opts.tile_size;
  const int tiles_x = (width + tile - 1) / tile;
  const int tiles_y = (height + tile - 1) / tile;
  const size_t num_tiles = static_cast<size_t>(tiles_x) * tiles_y;

  // Stage 1: per-pixel compositing gradients into per-tile accumulators.
  std::vector<std::vector<std::pair<uint32_t, splat_detail::SplatAccum>>> tile_accums(num_tiles);
  parallel_for(num_tiles, [&](size_t t) {
    const int tx = static_cast<int>(t % tiles_x);
    const int ty = static_cast<int>(t / tiles_x);
    const int x0 = tx * tile, x1 = std::min(width, x0 + tile);
    const int y0 = ty * tile, y1 = std::min(height, y0 + tile);
    std::unordered_map<uint32_t, size_t> slot;
    auto& accums = tile_accums[t];
    std::vector<double> trans_stack;
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) {
        const auto& plist = out.pixels[static_cast<size_t>(y) * width + x];
        if (plist.empty()) continue;
        const double* gpx = grad_image.at(x, y);
        const Vec3 g(gpx[0], gpx[1], gpx[2]);
        // Forward transmittance prefix.
        trans_stack.resize(plist.size());
        double trans = 1.0;
        for (size_t k = 0; k < plist.size(); ++k) {
          trans_stack[k] = trans;
          trans *= 1.0 - plist[k].alpha;
        }
        // Reverse sweep: suffix S = sum_{m>k} c_m w_m.
        Vec3 suffix = Vec3::Zero();
        for (size_t k = plist.size(); k-- > 0;) {
          const PixelContrib& pc = plist[k];
          const ProjectedSplat& s = out.splats[pc.splat];
          const double tk = trans_stack[k];
          const double w = pc.alpha * tk;
          auto it = slot.find(pc.splat);
          if (it == slot.end()) {
            it = slot.emplace(pc.splat, accums.size()).first;
            accums.emplace_back(pc.splat, splat_detail::SplatAccum{});
          }
          auto& acc = accums[it->second].second;
          acc.touched = true;
          acc.g_color += w * g;

          const double d_alpha = g.dot(s.color * tk - suffix / (1.0 - pc.alpha));
          suffix += w * s.color;

          // Alpha clamp: no parameter gradient once saturated.
          const Vec2 d(x - s.mean2d.x(), y - s.mean2d.y());
          const double r2 = d.dot(s.conic * d);
          const double raw_alpha = s.opacity * std::exp(-0.5 * r2);
          if (raw_alpha >= opts.alpha_clamp) continue;
          const double galpha = d_alpha;
          const double gvalue = galpha * raw_alpha;  // d alpha / d (log G + log o) style shortcut below
          // d alpha / d opacity = exp(-0.5 r2) = raw_alpha / opacity
          acc.g_opacity += galpha * raw_alpha / s.opacity;
          const Vec2 conic_d = s.conic * d;
          const Vec2 gm = gvalue * conic_d;
          acc.g_mean2d += gm;
          acc.abs2d += gm.norm();
          acc.g_conic += gvalue * (-0.5) * (d * d.transpose());
        }
      }
    }
  }, opts.threads);

  // Stage 2: reduce per-tile accumulators in tile order (deterministic).
  std::vector<splat_detail::SplatAccum> per_splat(out.splats.size());
  for (size_t t = 0; t < num_tiles; ++t) {
    for (const auto& [si, acc] : tile_accums[t]) {
      auto& dst = per_splat[si];
      dst.g_color += acc.g_color;
      dst.g_mean2d += acc.g_mean2d;
      dst.g_conic += acc.g_conic;
      dst.g_opacity += acc.g_opacity;
      dst.abs2d += acc.abs2d;
      dst.touched = dst.touched || acc.touched;
    }
  }

  // Stage 3: per-splat chain to 3D parameters (disjoint writes; points appear
  // in at most one splat per view).
  const auto& K = cam.intr;
  parallel_for(out.splats.size(), [&](size_t si) {
    const auto& acc = per_splat[si];
    if (!acc.touched) return;
    const ProjectedSplat& s = out.splats[si];
    const GaussianPoint& pt = frame.points[s.point_index];
    const uint32_t pi = s.point_index;
    grads.visible[pi] = 1;
    grads.d_mean2d[pi] += acc.g_mean2d;
    grads.abs_grad2d[pi] += acc.abs2d;

    // conic -> cov2d (A = Sigma^-1 => dL/dSigma = -A G A).
    const Mat2 g_cov2d = -(s.conic * acc.g_conic * s.conic);

    // cov2d = W Sigma3 W^T, W = J R.
    const double z = s.cam_pos.z(), invz = 1.0 / z;
    const double xc = s.cam_pos.x(), yc = s.cam_pos.y();
    Eigen::Matrix<double, 2, 3> jac;
    jac << K.fx * invz, 0.0, -K.fx * xc * invz * invz,
        0.0, K.fy * invz, -K.fy * yc * invz * invz;
    const Eigen::Matrix<double, 2, 3> w_mat = jac * cam.rot_w2c;
    const Mat3 cov3d = covariance_from(pt.appearance.log_scale, pt.pose.rotation);
    const Mat3 g_cov3d = w_mat.transpose() * g_cov2d * w_mat;
    const Eigen::Matrix<double, 2, 3> g_w = (g_cov2d + g_cov2d.transpose()) * w_mat * cov3d;
    const Eigen::Matrix<double, 2, 3> g_jac = g_w * cam.rot_w2c.transpose();

    // Camera-space position gradient: mean2d path + Jacobian dependence.
    Vec3 g_campos = jac.transpose() * acc.g_mean2d;
    const double invz2 = invz * invz;
    g_campos.x() += g_jac(0, 2) * (-K.fx * invz2);
    g_campos.y() += g_jac(1, 2) * (-K.fy * invz2);
    g_campos.z() += g_jac(0, 0) * (-K.fx * invz2) + g_jac(1, 1) * (-K.fy * invz2) +
                    g_jac(0, 2) * (2.0 * K.fx * xc * invz2 * invz) +
                    g_jac(1, 2) * (2.0 * K.fy * yc * invz2 * invz);
    Vec3 g_mean = cam.rot_w2c.transpose() * g_campos;

    // SH: color gradient maps straight onto the basis; the view direction
    // itself depends on the mean.
    const auto& sh = pt.appearance.sh;
    const int degree = opts.sh_degree_cap < 0 ? sh.degree : std::min(sh.degree, opts.sh_degree_cap);
    const int n = sh_coeffs_per_channel(degree);
    double basis[16];
    sh_basis(degree, s.view_dir, basis);
    Vec3 g_unclamped = acc.g_color;
    for (int ch = 0; ch < 3; ++ch)
      if (s.color_clamped[ch]) g_unclamped[ch] = 0.0;
    auto& gsh = grads.d_sh[pi];
    for (int ch = 0; ch < 3; ++ch) {
      if (g_unclamped[ch] == 0.0) continue;
      for (int k = 0; k < n; ++k) gsh[static_cast<size_t>(ch) * sh.per_channel() + k] += g_unclamped[ch] * basis[k];
    }
    if (degree >= 1) {
      Vec3 basis_grad[16];
      sh_basis_grad(degree, s.view_dir, basis_grad);
      Vec3 g_dir = Vec3::Zero();
      for (int k = 1; k < n; ++k) {
        double coef = 0.0;
        for (int ch = 0; ch < 3; ++ch) coef += g_unclamped[ch] * sh.at(ch, k);
        g_dir += coef * basis_grad[k];
      }
      const Mat3 proj = (Mat3::Identity() - s.view_dir * s.view_dir.transpose()) / s.view_dist;
      g_mean += proj * g_dir;
    }
    grads.d_mean[pi] += g_mean;

    // cov3d -> (log_scale, rotation): Sigma3 = M M^T with M = R diag(exp(s)).
    const Quat qn = [&] {
      const double nq = pt.pose.rotation.norm();
      return pt.pose.rotation * (1.0 / nq);
    }();
    const Mat3 rot = qn.to_matrix_normalized();
    const Vec3 scale = pt.appearance.log_scale.array().exp();
    const Mat3 m_mat = rot * scale.asDiagonal();
    const Mat3 g_m = (g_cov3d + g_cov3d.transpose()) * m_mat;
    for (int i = 0; i < 3; ++i)
      grads.d_log_scale[pi][i] += g_m.col(i).dot(rot.col(i)) * scale[i];
    const Mat3 g_rot = g_m * scale.asDiagonal();
    Vec4 g_qn;
    for (int comp = 0; comp < 4; ++comp)
      g_qn[comp] = (g_rot.array() * splat_detail::rotation_derivative(qn, comp).array()).sum();
    // Through normalization q_hat = q / |q|.
    const double nq = pt.pose.rotation.norm();
    const Vec4 qv = qn.as_vec4();
    grads.d_rotation[pi] += (g_qn - qv * qv.dot(g_qn)) / nq;

    // Opacity logit.
    const double o = s.opacity;
    grads.d_opacity_logit[pi] += acc.g_opacity * o * (1.0 - o);
  }, opts.threads);

  return grads;
}

// Gradient w.r.t. 2D and (via the projection chain) 3D means only.
inline PointGradients backward_means(const RenderOutput& out, const GaussianFrame& frame,
                                     const CameraView& cam, const ImageRGB& grad_image,
                                     const RenderOptions& opts = {}) {
  return render_backward(out, frame, cam, grad_image, opts);
}

// Gradients w.r.t. opacity logit, log-scale, rotation and SH coefficients.
inline PointGradients backward_appearance(const RenderOutput& out, const GaussianFrame& frame,
                                          const CameraView& cam, const ImageRGB& grad_image,
                                          const RenderOptions& opts = {}) {
  return render_backward(out, frame, cam, grad_image, opts);
}

// Composited weight of each point at the pixel nearest its own projected
// center (the flow term's per-view transmission weight). Zero when the point
// is invisible or contributes nothing at that pixel.
inline std::vector<double> center_transmission(const RenderOutput& out, const GaussianFrame& frame) {
  if (!out.retained) throw ContractViolation("center_transmission: forward pass was not retained");
  std::vector<double> t(frame.points.size(), 0.0);
  const int width = out.image.width, height = out.image.height;
  for (uint32_t si = 0; si < out.splats.size(); ++si) {
    const ProjectedSplat& s = out.splats[si];
    const int x = static_cast<int>(std::lround(s.mean2d.x()));
    const int y = static_cast<int>(std::lround(s.mean2d.y()));
    if (x < 0 || x >= width || y < 0 || y >= height) continue;
    const auto& plist = out.pixels[static_cast<size_t>(y) * width + x];
    double trans = 1.0;
    for (const auto& pc : plist) {
      if (pc.splat == si) {
        t[s.point_index] = pc.alpha * trans;
        break;
      }
      trans *= 1.0 - pc.alpha;
    }
  }
  return t;
}

// Mean absolute error over (optionally masked) pixels, with its image-space
// gradient; the standard data term at desk scale.
struct LossResult {
  double loss = 0.0;
  ImageRGB grad;
};

inline LossResult l1_loss(const ImageRGB& rendered, const ImageRGB& target, const ImageU8* mask = nullptr) {
  if (rendered.width != target.width || rendered.height != target.height)
    throw InvalidInput("l1_loss: size mismatch");
  LossResult res;
  res.grad = ImageRGB(rendered.width, rendered.height, 0.0);
  size_t count = 0;
  for (size_t p = 0; p < rendered.pixel_count(); ++p) {
    if (mask && mask->data[p] == 0) continue;
    count += 3;
  }
  if (count == 0) return res;
  const double inv = 1.0 / static_cast<double>(count);
  double sum = 0.0;
  for (size_t p = 0; p < rendered.pixel_count(); ++p) {
    if (mask && mask->data[p] == 0) continue;
    for (int c = 0; c < 3; ++c) {
      const double r = rendered.data[p * 3 + c] - target.data[p * 3 + c];
      sum += std::abs(r);
      res.grad.data[p * 3 + c] = (r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0)) * inv;
    }
  }
  res.loss = sum * inv;
  return res;
}

}  // namespace egs
