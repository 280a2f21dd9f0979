#pragma once

// Synthetic scenes with analytic ground truth, plus the brute-force oracles
// the test suites check the fast paths against. Oracles deliberately avoid
// the implementation kernels they verify; they share only core-model types
// and conversions.

#include <functional>
#include <vector>

#include "egs/core.hpp"
#include "egs/splatter.hpp"

namespace egs {
namespace testkit {

// ---------------------------------------------------------------------------
// Exhaustive KNN: O(N*M) scan, ties broken by lower index.
inline std::vector<std::vector<int>> oracle_knn(const std::vector<Vec3>& points,
                                                const std::vector<Vec3>& queries, int k) {
  std::vector<std::vector<int>> result(queries.size());
  std::vector<std::pair<double, int>> dist(points.size());
  for (size_t qi = 0; qi < queries.size(); ++qi) {
    for (size_t i = 0; i < points.size(); ++i)
      dist[i] = {(points[i] - queries[qi]).squaredNorm(), static_cast<int>(i)};
    const size_t kk = std::min<size_t>(k, points.size());
    std::partial_sort(dist.begin(), dist.begin() + kk, dist.end());
    result[qi].reserve(kk);
    for (size_t i = 0; i < kk; ++i) result[qi].push_back(dist[i].second);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Naive contribution: full-image, per-pixel walk over ALL points in global
// depth order. Same compositing contract as the splatter, none of its tiling.
inline std::vector<double> oracle_contribution(const GaussianFrame& frame, const CameraView& cam,
                                               double alpha_clamp = 0.99, double floor = 1e-4,
                                               double cutoff_sigma = 3.0) {
  struct Entry {
    size_t index;
    uint64_t id;
    Vec2 mean2d;
    Mat2 conic;
    double depth;
    double opacity;
  };
  std::vector<Entry> entries;
  for (size_t i = 0; i < frame.points.size(); ++i) {
    const auto pr = project_gaussian(frame.points[i], cam);
    if (pr.culled) continue;
    const double a = pr.cov2d(0, 0), b = pr.cov2d(0, 1), c = pr.cov2d(1, 1);
    const double det = a * c - b * b;
    const double disc = std::sqrt(std::max(0.0, (a - c) * (a - c) + 4 * b * b));
    const double lmin = 0.5 * (a + c - disc), lmax = 0.5 * (a + c + disc);
    if (!(lmin > 0.0) || lmax > 1e8 * lmin || !(det > 0.0)) continue;
    Mat2 conic;
    conic << c / det, -b / det, -b / det, a / det;
    entries.push_back({i, frame.points[i].id, pr.mean2d, conic, pr.depth, frame.points[i].opacity()});
  }
  std::sort(entries.begin(), entries.end(), [](const Entry& x, const Entry& y) {
    if (x.depth != y.depth) return x.depth < y.depth;
    return x.id < y.id;
  });

  std::vector<double> phi(frame.points.size(), 0.0);
  const double cut = cutoff_sigma * cutoff_sigma;
  for (int y = 0; y < cam.intr.height; ++y) {
    for (int x = 0; x < cam.intr.width; ++x) {
      double trans = 1.0;
      for (const Entry& e : entries) {
        const Vec2 d(x - e.mean2d.x(), y - e.mean2d.y());
        const double r2 = d.dot(e.conic * d);
        if (r2 > cut) continue;
        const double alpha = std::min(alpha_clamp, e.opacity * std::exp(-0.5 * r2));
        phi[e.index] += alpha * trans;
        trans *= 1.0 - alpha;
        if (trans < floor) break;
      }
    }
  }
  return phi;
}

// ---------------------------------------------------------------------------
// Central finite differences for arbitrary scalar functions of a flat
// parameter vector.
inline std::vector<double> oracle_fd_gradient(const std::function<double(const std::vector<double>&)>& f,
                                              std::vector<double> params, double step) {
  std::vector<double> grad(params.size(), 0.0);
  for (size_t i = 0; i < params.size(); ++i) {
    const double saved = params[i];
    params[i] = saved + step;
    const double hi = f(params);
    params[i] = saved - step;
    const double lo = f(params);
    params[i] = saved;
    grad[i] = (hi - lo) / (2.0 * step);
  }
  return grad;
}

// FD on a selected subset of coordinates (large parameter vectors).
inline std::vector<double> oracle_fd_gradient_subset(
    const std::function<double(const std::vector<double>&)>& f, std::vector<double> params,
    const std::vector<size_t>& coords, double step) {
  std::vector<double> grad(coords.size(), 0.0);
  for (size_t j = 0; j < coords.size(); ++j) {
    const size_t i = coords[j];
    const double saved = params[i];
    params[i] = saved + step;
    const double hi = f(params);
    params[i] = saved - step;
    const double lo = f(params);
    params[i] = saved;
    grad[j] = (hi - lo) / (2.0 * step);
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Random scene helpers.

struct BlobSpec {
  Vec3 center = Vec3::Zero();
  double radius = 0.3;
  int count = 50;
};

inline GaussianPoint random_point(Rng& rng, uint64_t id, const Vec3& center, double radius, int sh_degree,
                                  double scale_lo = 0.02, double scale_hi = 0.08,
                                  double opacity_lo = 0.3, double opacity_hi = 0.8) {
  GaussianPoint p;
  p.id = id;
  Vec3 dir = rng.normal3();
  if (dir.norm() < 1e-9) dir = Vec3(1, 0, 0);
  dir.normalize();
  const double r = radius * std::cbrt(rng.uniform());
  p.pose.mean = center + r * dir;
  p.pose.rotation = rng.unit_quat();
  for (int i = 0; i < 3; ++i) p.appearance.log_scale[i] = std::log(rng.uniform(scale_lo, scale_hi));
  p.appearance.opacity_logit = logit(rng.uniform(opacity_lo, opacity_hi));
  p.appearance.sh = SHCoeffs(sh_degree);
  for (int ch = 0; ch < 3; ++ch) {
    p.appearance.sh.at(ch, 0) = rng.uniform(-0.8, 1.2);
    for (int k = 1; k < p.appearance.sh.per_channel(); ++k) p.appearance.sh.at(ch, k) = rng.uniform(-0.1, 0.1);
  }
  return p;
}

inline GaussianFrame random_frame(Rng& rng, const std::vector<BlobSpec>& blobs, int sh_degree = 0) {
  GaussianFrame frame;
  uint64_t id = 0;
  for (const auto& blob : blobs)
    for (int i = 0; i < blob.count; ++i) frame.points.push_back(random_point(rng, id++, blob.center, blob.radius, sh_degree));
  frame.sort_by_id();
  frame.recompute_bbox();
  return frame;
}

// Cameras on a ring of given radius in the y = elevation plane, looking at
// the origin.
inline std::vector<CameraView> ring_cameras(int count, int width, int height, double radius = 2.5,
                                            double elevation = 0.4, double focal = 0.0) {
  std::vector<CameraView> cams;
  for (int i = 0; i < count; ++i) {
    const double angle = 2.0 * M_PI * i / std::max(count, 1);
    const Vec3 eye(radius * std::cos(angle), elevation, radius * std::sin(angle));
    const Vec3 target(0, 0, 0);
    Vec3 fwd = (target - eye).normalized();
    Vec3 up(0, 1, 0);
    Vec3 right = fwd.cross(up).normalized();
    Vec3 down = fwd.cross(right).normalized();
    CameraView cam;
    cam.view_id = "cam" + std::to_string(i);
    Mat3 rot;
    rot.row(0) = right.transpose();
    rot.row(1) = down.transpose();
    rot.row(2) = fwd.transpose();
    cam.rot_w2c = rot;
    cam.t_w2c = -(rot * eye);
    cam.intr.width = width;
    cam.intr.height = height;
    cam.intr.fx = cam.intr.fy = focal > 0.0 ? focal : 0.9 * width;
    cam.intr.cx = 0.5 * (width - 1);
    cam.intr.cy = 0.5 * (height - 1);
    cam.near_clip = 0.1;
    cam.far_clip = 50.0;
    cam.validate();
    cams.push_back(std::move(cam));
  }
  return cams;
}

// ---------------------------------------------------------------------------
// Synthetic sequences with analytic ground truth: per-point trajectories,
// rendered target images, exact flow maps and foreground masks.

enum class Motion { Static, Rigid, Articulated, SlowDeform };

struct SceneBlob {
  Vec3 center = Vec3::Zero();
  double radius = 0.3;
  int count = 100;
  int appear_frame = 0;                                  // absent from targets before this
  int vanish_frame = std::numeric_limits<int>::max();    // absent from targets from this on
};

struct SequenceSpec {
  uint64_t seed = 1;
  int frames = 5;
  int num_cams = 4;
  int image_size = 48;
  int sh_degree = 0;
  Motion motion = Motion::Rigid;
  double angle_step = 0.04;             // radians per frame
  Vec3 axis = Vec3(0, 1, 0);            // rigid rotation / articulation hinge axis
  Vec3 translation_step = Vec3::Zero(); // meters per frame (rigid)
  double bend_blend_width = 0.15;       // articulated smooth zone, meters
  double deform_amplitude = 0.02;       // slow-deform displacement, meters
  std::vector<SceneBlob> blobs = {{Vec3::Zero(), 0.35, 120}};
  double scale_lo = 0.03, scale_hi = 0.09;
  double opacity_lo = 0.45, opacity_hi = 0.85;
};

struct SyntheticSequence {
  SequenceSpec spec;
  std::vector<GaussianPoint> base_points;  // poses at t = 0
  std::vector<int> blob_of;                // per base point
  std::vector<CameraView> cams;            // static rig, no attachments
  std::vector<std::vector<ImageRGB>> images;  // [frame][cam]
  std::vector<std::vector<ImageU8>> masks;    // [frame][cam]
  std::vector<std::vector<FlowMap>> flows;    // [frame][cam], transition t -> t+1

  bool alive(size_t i, int t) const {
    const auto& blob = spec.blobs[blob_of[i]];
    return t >= blob.appear_frame && t < blob.vanish_frame;
  }

  // Analytic pose of base point i at frame t.
  void pose_at(size_t i, int t, Vec3* mean, Quat* rotation) const {
    const Vec3 m0 = base_points[i].pose.mean;
    const Quat r0 = base_points[i].pose.rotation;
    double angle = 0.0;
    Vec3 offset = Vec3::Zero();
    switch (spec.motion) {
      case Motion::Static: break;
      case Motion::Rigid:
        angle = spec.angle_step * t;
        offset = spec.translation_step * t;
        break;
      case Motion::Articulated: {
        // Segment x >= 0 bends about the hinge axis through the origin with a
        // smooth blend near the plane; segment x < 0 stays put.
        const double s = std::clamp(m0.x() / spec.bend_blend_width, 0.0, 1.0);
        angle = spec.angle_step * t * s;
        break;
      }
      case Motion::SlowDeform: {
        const double phase = m0.x() * 5.0 + m0.y() * 3.0;
        const double a = spec.deform_amplitude * std::sin(0.3 * t + phase);
        offset = a * Vec3(std::cos(phase), 0.4, std::sin(phase)).normalized();
        angle = 0.1 * spec.angle_step * t;
        break;
      }
    }
    Quat rot = Quat::identity();
    if (angle != 0.0) {
      const Vec3 ax = spec.axis.normalized();
      const double h = 0.5 * angle;
      rot = Quat{std::cos(h), ax.x() * std::sin(h), ax.y() * std::sin(h), ax.z() * std::sin(h)};
    }
    *mean = rot.sandwich(m0) + offset;
    *rotation = rot.is_identity() ? r0 : rot * r0;
  }

  // Ground-truth scene content at frame t (only blobs alive at t).
  GaussianFrame frame_at(int t) const {
    GaussianFrame f;
    f.frame_index = t;
    for (size_t i = 0; i < base_points.size(); ++i) {
      if (!alive(i, t)) continue;
      GaussianPoint p = base_points[i];
      pose_at(i, t, &p.pose.mean, &p.pose.rotation);
      f.points.push_back(std::move(p));
    }
    f.recompute_bbox();
    return f;
  }

  // Model starting state: ground truth at frame 0.
  GaussianFrame frame0() const { return frame_at(0); }

  // Cameras with the frame-t targets attached: images/masks of t, flow for
  // the (t-1) -> t transition.
  std::vector<CameraView> views_for_frame(int t) const {
    std::vector<CameraView> out = cams;
    for (size_t q = 0; q < out.size(); ++q) {
      out[q].image = images[t][q];
      out[q].mask = masks[t][q];
      if (t >= 1 && !flows[t - 1].empty()) out[q].flow = flows[t - 1][q];
    }
    return out;
  }

  double bbox_diagonal() const {
    Aabb box;
    for (const auto& p : base_points) box.expand(p.pose.mean);
    return box.diagonal();
  }
};

inline SyntheticSequence gen_scene(const SequenceSpec& spec) {
  SyntheticSequence seq;
  seq.spec = spec;
  Rng rng(spec.seed);
  uint64_t id = 0;
  for (size_t b = 0; b < spec.blobs.size(); ++b) {
    const auto& blob = spec.blobs[b];
    for (int i = 0; i < blob.count; ++i) {
      seq.base_points.push_back(random_point(rng, id++, blob.center, blob.radius, spec.sh_degree,
                                             spec.scale_lo, spec.scale_hi, spec.opacity_lo,
                                             spec.opacity_hi));
      seq.blob_of.push_back(static_cast<int>(b));
    }
  }
  seq.cams = ring_cameras(spec.num_cams, spec.image_size, spec.image_size);

  RenderOptions opts;
  opts.retain = true;
  seq.images.resize(spec.frames);
  seq.masks.resize(spec.frames);
  seq.flows.resize(spec.frames);
  for (int t = 0; t < spec.frames; ++t) {
    const GaussianFrame gt = seq.frame_at(t);
    // Map from position in gt frame back to base index (for displacement).
    std::vector<size_t> base_index;
    base_index.reserve(gt.points.size());
    for (size_t i = 0; i < seq.base_points.size(); ++i)
      if (seq.alive(i, t)) base_index.push_back(i);

    seq.images[t].resize(seq.cams.size());
    seq.masks[t].resize(seq.cams.size());
    if (t + 1 < spec.frames) seq.flows[t].resize(seq.cams.size());
    for (size_t q = 0; q < seq.cams.size(); ++q) {
      const auto out = render(gt, seq.cams[q], opts);
      seq.images[t][q] = out.image;
      ImageU8 mask(out.alpha.width, out.alpha.height, 0);
      for (size_t p = 0; p < out.alpha.data.size(); ++p) mask.data[p] = out.alpha.data[p] > 0.02 ? 255 : 0;
      seq.masks[t][q] = std::move(mask);

      if (t + 1 >= spec.frames) continue;
      // Exact flow: weighted mean of the contributors' projected displacement.
      FlowMap flow(out.image.width, out.image.height);
      for (int y = 0; y < out.image.height; ++y) {
        for (int x = 0; x < out.image.width; ++x) {
          const auto& plist = out.pixels[static_cast<size_t>(y) * out.image.width + x];
          if (plist.empty()) continue;
          double wsum = 0.0;
          Vec2 disp = Vec2::Zero();
          double trans = 1.0;
          for (const auto& pc : plist) {
            const double w = pc.alpha * trans;
            trans *= 1.0 - pc.alpha;
            const size_t gi = out.splats[pc.splat].point_index;
            const size_t bi = base_index[gi];
            if (!seq.alive(bi, t + 1)) continue;  // vanishing content: no target
            Vec3 mean_next;
            Quat rot_next;
            seq.pose_at(bi, t + 1, &mean_next, &rot_next);
            GaussianPoint probe = gt.points[gi];
            probe.pose.mean = mean_next;
            const auto pr_next = project_gaussian(probe, seq.cams[q]);
            if (pr_next.culled) continue;
            disp += w * (pr_next.mean2d - out.splats[pc.splat].mean2d);
            wsum += w;
          }
          if (wsum > 1e-9) {
            float* fp = flow.at(x, y);
            fp[0] = static_cast<float>(disp.x() / wsum);
            fp[1] = static_cast<float>(disp.y() / wsum);
          }
        }
      }
      seq.flows[t][q] = std::move(flow);
    }
  }
  return seq;
}

}  // namespace testkit
}  // namespace egs
