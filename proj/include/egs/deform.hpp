#pragma once

// Warping stage: sparse control nodes, blended affine warp of Gaussian
// points, the rotation/ARAP/flow/data energy terms and the relaxation
// optimizer. Handles the coarse frame-to-frame alignment with a fixed point
// count; no points are created or removed here.

#include <span>
#include <vector>

#include "egs/core.hpp"
#include "egs/kdtree.hpp"
#include "egs/optim.hpp"
#include "egs/splatter.hpp"

namespace egs {

struct ControlNode {
  Vec3 center = Vec3::Zero();       // initial position, fixed
  Quat rotation = Quat::identity(); // optimized, soft unit constraint
  Vec3 translation = Vec3::Zero();  // optimized
};

struct Binding {
  std::vector<int> neighbors;    // node indices, nearest first
  std::vector<double> weights;   // normalized to sum 1
};

struct DeformationGraph {
  std::vector<ControlNode> nodes;
  std::vector<Binding> point_bindings;  // one per frame point
  std::vector<Binding> node_bindings;   // one per node (self excluded)
  int k_point = 4;
  int k_node = 6;
  uint64_t sample_seed = 0;
  bool jitter_applied = false;  // duplicate-center fallback fired

  size_t node_count() const { return nodes.size(); }
};

// ---------------------------------------------------------------------------
// Graph construction.

// Control node centers are a seeded uniform subset (without replacement) of
// the frame's point means, kept in ascending point order so downstream
// tie-breaks are reproducible on both the encoder and decoder side.
inline DeformationGraph sample_control_nodes(const GaussianFrame& frame, int m, uint64_t seed) {
  if (m <= 0) throw InvalidParameter("sample_control_nodes: node count must be positive");
  const size_t n = frame.points.size();
  const size_t take = std::min<size_t>(m, n);
  std::vector<uint32_t> idx(n);
  for (size_t i = 0; i < n; ++i) idx[i] = static_cast<uint32_t>(i);
  Rng rng(seed);
  for (size_t i = 0; i < take; ++i) {
    const size_t j = i + rng.below(n - i);
    std::swap(idx[i], idx[j]);
  }
  idx.resize(take);
  std::sort(idx.begin(), idx.end());

  DeformationGraph graph;
  graph.sample_seed = seed;
  graph.nodes.reserve(take);
  for (uint32_t i : idx) {
    ControlNode node;
    node.center = frame.points[i].pose.mean;
    graph.nodes.push_back(node);
  }
  return graph;
}

namespace deform_detail {

// (1 - d/d_max)^2 weights over the K nearest entries, normalized. Falls back
// to uniform weights when every raw weight vanishes (all-tie geometry).
inline Binding make_binding(const std::vector<int>& nearest, const std::vector<double>& dist, int k,
                            double d_max) {
  Binding b;
  const int kk = std::min<int>(k, static_cast<int>(nearest.size()));
  b.neighbors.assign(nearest.begin(), nearest.begin() + kk);
  b.weights.resize(kk);
  double sum = 0.0;
  for (int i = 0; i < kk; ++i) {
    const double w = d_max > 0.0 ? (1.0 - dist[i] / d_max) : 0.0;
    b.weights[i] = w > 0.0 ? w * w : 0.0;
    sum += b.weights[i];
  }
  if (sum <= 0.0) {
    for (double& w : b.weights) w = 1.0 / kk;
  } else {
    for (double& w : b.weights) w /= sum;
  }
  return b;
}

}  // namespace deform_detail

// Fills point->node and node->node bindings. d_max is the distance to the
// (K+1)-nearest entry; coincident node centers that collapse d_max to zero
// trigger a deterministic 1e-9 m jitter and a rebuild.
inline void bind_weights(DeformationGraph& graph, const GaussianFrame& frame, int k_point = 4,
                         int k_node = 6) {
  if (graph.nodes.empty()) throw InvalidParameter("bind_weights: no control nodes");
  graph.k_point = k_point;
  graph.k_node = k_node;

  for (int attempt = 0;; ++attempt) {
    std::vector<Vec3> centers(graph.nodes.size());
    for (size_t j = 0; j < graph.nodes.size(); ++j) centers[j] = graph.nodes[j].center;
    KdTree tree(centers);
    const int m = static_cast<int>(graph.nodes.size());

    bool degenerate = false;
    graph.point_bindings.assign(frame.points.size(), Binding{});
    const int kp = std::min(k_point, std::max(1, m - 1));
    for (size_t i = 0; i < frame.points.size() && !degenerate; ++i) {
      if (m == 1) {
        graph.point_bindings[i].neighbors = {0};
        graph.point_bindings[i].weights = {1.0};
        continue;
      }
      const auto nearest = tree.knn(frame.points[i].pose.mean, kp + 1);
      std::vector<double> dist(nearest.size());
      for (size_t t = 0; t < nearest.size(); ++t)
        dist[t] = (centers[nearest[t]] - frame.points[i].pose.mean).norm();
      const double d_max = dist.back();
      if (d_max <= 0.0) {
        degenerate = true;
        break;
      }
      graph.point_bindings[i] = deform_detail::make_binding(nearest, dist, kp, d_max);
    }

    if (!degenerate) {
      graph.node_bindings.assign(graph.nodes.size(), Binding{});
      if (m >= 3) {
        const int kn = std::min(k_node, m - 2);
        for (int j = 0; j < m && !degenerate; ++j) {
          auto nearest = tree.knn(centers[j], kn + 2);
          // Drop self (always present at distance zero; ties keep lower index
          // but j is in the list by construction).
          auto self = std::find(nearest.begin(), nearest.end(), j);
          if (self != nearest.end()) nearest.erase(self);
          if (static_cast<int>(nearest.size()) > kn + 1) nearest.resize(kn + 1);
          std::vector<double> dist(nearest.size());
          for (size_t t = 0; t < nearest.size(); ++t) dist[t] = (centers[nearest[t]] - centers[j]).norm();
          const double d_max = dist.back();
          if (d_max <= 0.0) {
            degenerate = true;
            break;
          }
          graph.node_bindings[j] = deform_detail::make_binding(nearest, dist, kn, d_max);
        }
      }
    }

    if (!degenerate) return;
    if (attempt >= 2) throw InvalidParameter("bind_weights: could not resolve duplicate node centers");
    // Deterministic jitter; seeded off the sampling seed.
    Rng jig(graph.sample_seed ^ 0x9e3779b97f4a7c15ull);
    for (auto& node : graph.nodes) node.center += 1e-9 * jig.normal3();
    graph.jitter_applied = true;
  }
}

// ---------------------------------------------------------------------------
// Warping.

namespace deform_detail {

// Weighted quaternion blend, hemisphere-aligned to the first neighbor.
// Returns the *unnormalized* sum; callers normalize (and may test for the
// exact-identity fast path).
inline Quat blend_rotation(const DeformationGraph& graph, const Binding& binding) {
  Quat sum{0, 0, 0, 0};
  const Quat& ref = graph.nodes[binding.neighbors.front()].rotation;
  for (size_t t = 0; t < binding.neighbors.size(); ++t) {
    const Quat& q = graph.nodes[binding.neighbors[t]].rotation;
    const double sign = q.dot(ref) < 0.0 ? -1.0 : 1.0;
    sum = sum + q * (sign * binding.weights[t]);
  }
  return sum;
}

inline Vec3 warp_mean(const DeformationGraph& graph, const Binding& binding, const Vec3& mean) {
  // Delta form keeps the identity deformation bit-exact.
  Vec3 delta = Vec3::Zero();
  for (size_t t = 0; t < binding.neighbors.size(); ++t) {
    const ControlNode& node = graph.nodes[binding.neighbors[t]];
    const Vec3 d = mean - node.center;
    delta += binding.weights[t] * (node.rotation.sandwich(d) - d + node.translation);
  }
  return mean + delta;
}

}  // namespace deform_detail

// Applies the blended affine warp: means via the weighted node transforms,
// point rotations composed with the normalized blended node rotation, SH
// bands >= 1 rotated along. Appearance scalars (opacity, log-scale, SH band 0)
// are copied untouched; point count and ids are preserved.
inline GaussianFrame warp_frame(const DeformationGraph& graph, const GaussianFrame& frame) {
  if (graph.point_bindings.size() != frame.points.size())
    throw InvalidParameter("warp_frame: bindings do not match frame");
  GaussianFrame out = frame;
  for (size_t i = 0; i < out.points.size(); ++i) {
    const Binding& binding = graph.point_bindings[i];
    if (binding.neighbors.empty()) continue;
    GaussianPoint& p = out.points[i];
    p.pose.mean = deform_detail::warp_mean(graph, binding, p.pose.mean);
    Quat blend = deform_detail::blend_rotation(graph, binding);
    // A pure-scalar blend is the identity rotation regardless of magnitude;
    // taking the exact path keeps static regions bit-stable.
    if (blend.x == 0.0 && blend.y == 0.0 && blend.z == 0.0) continue;
    const double n = blend.norm();
    if (n < 1e-12) continue;
    blend = blend * (1.0 / n);
    p.pose.rotation = blend * p.pose.rotation;
    if (p.appearance.sh.degree >= 1) {
      const ShRotation rot(blend.to_matrix_normalized(), p.appearance.sh.degree);
      for (int ch = 0; ch < 3; ++ch)
        rot.apply(p.appearance.sh.coeffs.data() + static_cast<size_t>(ch) * p.appearance.sh.per_channel());
    }
  }
  out.recompute_bbox();
  return out;
}

// Real-SH rotation of a coefficient set (all channels).
inline SHCoeffs rotate_sh(const SHCoeffs& sh, const Mat3& rot) {
  SHCoeffs out = sh;
  if (sh.degree >= 1) {
    const ShRotation r(rot, sh.degree);
    for (int ch = 0; ch < 3; ++ch)
      r.apply(out.coeffs.data() + static_cast<size_t>(ch) * out.per_channel());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Energy terms. Each returns the scalar and accumulates gradients w.r.t. the
// node parameters laid out as [q.w q.x q.y q.z t.x t.y t.z] per node.

constexpr int kNodeParams = 7;

inline void check_node_grad_size(const DeformationGraph& graph, const std::vector<double>& grad) {
  if (grad.size() != graph.nodes.size() * kNodeParams)
    throw InvalidParameter("node gradient buffer has wrong size");
}

// E_rot = (1/M) sum (1 - |q_j|)^2.
inline double energy_rot(const DeformationGraph& graph, std::vector<double>* grad = nullptr) {
  if (grad) check_node_grad_size(graph, *grad);
  const double inv_m = 1.0 / static_cast<double>(graph.nodes.size());
  double e = 0.0;
  for (size_t j = 0; j < graph.nodes.size(); ++j) {
    const Quat& q = graph.nodes[j].rotation;
    const double n = q.norm();
    const double r = 1.0 - n;
    e += r * r;
    if (grad && n > 1e-12) {
      const double c = inv_m * 2.0 * r * (-1.0 / n);
      (*grad)[j * kNodeParams + 0] += c * q.w;
      (*grad)[j * kNodeParams + 1] += c * q.x;
      (*grad)[j * kNodeParams + 2] += c * q.y;
      (*grad)[j * kNodeParams + 3] += c * q.z;
    }
  }
  return e * inv_m;
}

// E_arap = (1/M) sum_j sum_{k in N(j)} w_jk | q_j (c_k - c_j) q_j* + c_j + t_j - (c_k + t_k) |^2.
inline double energy_arap(const DeformationGraph& graph, std::vector<double>* grad = nullptr) {
  if (grad) check_node_grad_size(graph, *grad);
  if (graph.node_bindings.empty()) return 0.0;
  const double inv_m = 1.0 / static_cast<double>(graph.nodes.size());
  double e = 0.0;
  for (size_t j = 0; j < graph.nodes.size(); ++j) {
    const ControlNode& nj = graph.nodes[j];
    const Binding& binding = graph.node_bindings[j];
    for (size_t t = 0; t < binding.neighbors.size(); ++t) {
      const int k = binding.neighbors[t];
      const double w = binding.weights[t];
      const ControlNode& nk = graph.nodes[k];
      const Vec3 d = nk.center - nj.center;
      const Vec3 r = nj.rotation.sandwich(d) + nj.center + nj.translation - (nk.center + nk.translation);
      e += w * r.squaredNorm();
      if (grad) {
        const Vec3 gr = (2.0 * w * inv_m) * r;
        const auto jq = nj.rotation.sandwich_jacobian(d);
        const Vec4 gq = jq.transpose() * gr;
        for (int c = 0; c < 4; ++c) (*grad)[j * kNodeParams + c] += gq[c];
        for (int c = 0; c < 3; ++c) {
          (*grad)[j * kNodeParams + 4 + c] += gr[c];
          (*grad)[static_cast<size_t>(k) * kNodeParams + 4 + c] -= gr[c];
        }
      }
    }
  }
  return e * inv_m;
}

// ---------------------------------------------------------------------------
// Flow term. The pre-warp projections, flow lookups, indicators and
// transmission weights are fixed at setup; gradients flow only through the
// warped projection.

struct FlowTerm {
  struct Active {
    uint32_t point = 0;
    uint32_t view = 0;
    Vec2 target2d = Vec2::Zero();  // mu2d + flow(mu2d)
    double transmission = 1.0;     // T_{i,q}, detached
  };
  std::vector<Active> active;
  size_t candidates = 0;  // points visible in flow views
  bool no_active_flow() const { return active.empty(); }
};

// Builds the active set for every view that carries a flow map. The
// transmission weights come from a retained render of `frame`.
inline FlowTerm build_flow_term(const GaussianFrame& frame, std::span<const CameraView> cams,
                                double eps_f, const RenderOptions& opts = {}) {
  FlowTerm term;
  for (uint32_t q = 0; q < cams.size(); ++q) {
    const CameraView& cam = cams[q];
    if (!cam.flow) continue;
    RenderOptions ropts = opts;
    ropts.retain = true;
    ropts.sh_degree_cap = 0;
    const auto out = render(frame, cam, ropts);
    const auto trans = center_transmission(out, frame);
    for (uint32_t i = 0; i < frame.points.size(); ++i) {
      const auto pr = project_gaussian(frame.points[i], cam);
      if (pr.culled) continue;
      if (pr.mean2d.x() < 0 || pr.mean2d.x() > cam.intr.width - 1 || pr.mean2d.y() < 0 ||
          pr.mean2d.y() > cam.intr.height - 1)
        continue;
      ++term.candidates;
      const Vec2 fl = cam.flow->sample(pr.mean2d);
      if (fl.norm() < eps_f) continue;  // still-background indicator
      FlowTerm::Active a;
      a.point = i;
      a.view = q;
      a.target2d = pr.mean2d + fl;
      a.transmission = trans[i];
      term.active.push_back(a);
    }
  }
  return term;
}

// Re-renders the flow views from the current warped state and refreshes the
// detached transmission weights; the pre-warp anchors stay fixed.
inline void refresh_flow_transmission(FlowTerm& term, const GaussianFrame& warped,
                                      std::span<const CameraView> cams, const RenderOptions& opts = {}) {
  if (term.active.empty()) return;
  std::vector<uint32_t> views;
  for (const auto& a : term.active)
    if (views.empty() || views.back() != a.view) views.push_back(a.view);
  for (uint32_t q : views) {
    RenderOptions ropts = opts;
    ropts.retain = true;
    ropts.sh_degree_cap = 0;
    const auto out = render(warped, cams[q], ropts);
    const auto trans = center_transmission(out, warped);
    for (auto& a : term.active)
      if (a.view == q) a.transmission = trans[a.point];
  }
}

// E_flow = (1/sum 1) sum 1 * T_iq * | proj(warped mean) - target |.
inline double energy_flow(const DeformationGraph& graph, const GaussianFrame& frame,
                          std::span<const CameraView> cams, const FlowTerm& term,
                          std::vector<double>* grad = nullptr) {
  if (grad) check_node_grad_size(graph, *grad);
  if (term.active.empty()) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(term.active.size());
  double e = 0.0;
  for (const auto& a : term.active) {
    const Binding& binding = graph.point_bindings[a.point];
    if (binding.neighbors.empty()) continue;
    const Vec3 mean = frame.points[a.point].pose.mean;
    const Vec3 warped = deform_detail::warp_mean(graph, binding, mean);
    const CameraView& cam = cams[a.view];
    const Vec3 t = cam.to_camera(warped);
    if (!(t.z() > cam.near_clip)) continue;  // culled mid-optimization: contributes zero
    const double inv_z = 1.0 / t.z();
    const Vec2 p2d{cam.intr.fx * t.x() * inv_z + cam.intr.cx, cam.intr.fy * t.y() * inv_z + cam.intr.cy};
    const Vec2 r = p2d - a.target2d;
    const double rn = r.norm();
    e += a.transmission * rn;
    if (grad && rn > 1e-12) {
      const Vec2 g2d = (inv_n * a.transmission / rn) * r;
      Eigen::Matrix<double, 2, 3> jac;
      jac << cam.intr.fx * inv_z, 0.0, -cam.intr.fx * t.x() * inv_z * inv_z,
          0.0, cam.intr.fy * inv_z, -cam.intr.fy * t.y() * inv_z * inv_z;
      const Vec3 gmean = (jac * cam.rot_w2c).transpose() * g2d;
      for (size_t tt = 0; tt < binding.neighbors.size(); ++tt) {
        const int j = binding.neighbors[tt];
        const double w = binding.weights[tt];
        const ControlNode& node = graph.nodes[j];
        const Vec3 d = mean - node.center;
        const Vec4 gq = node.rotation.sandwich_jacobian(d).transpose() * (w * gmean);
        for (int c = 0; c < 4; ++c) (*grad)[static_cast<size_t>(j) * kNodeParams + c] += gq[c];
        for (int c = 0; c < 3; ++c) (*grad)[static_cast<size_t>(j) * kNodeParams + 4 + c] += w * gmean[c];
      }
    }
  }
  return e * inv_n;
}

// ---------------------------------------------------------------------------
// Data term: masked L1 between the warped frame rendered at SH degree 0 and
// the per-view target images, with gradients chained through the warp.

// Scratch copy of the frame whose pose fields are rewritten every iteration.
struct WarpScratch {
  GaussianFrame warped;
  std::vector<Quat> blend;  // normalized blended rotation per point

  void init(const GaussianFrame& frame) {
    warped = frame;
    blend.assign(frame.points.size(), Quat::identity());
  }
};

inline void apply_warp_pose(const DeformationGraph& graph, const GaussianFrame& frame, WarpScratch& scratch) {
  for (size_t i = 0; i < frame.points.size(); ++i) {
    const Binding& binding = graph.point_bindings[i];
    auto& dst = scratch.warped.points[i].pose;
    if (binding.neighbors.empty()) {
      dst = frame.points[i].pose;
      scratch.blend[i] = Quat::identity();
      continue;
    }
    dst.mean = deform_detail::warp_mean(graph, binding, frame.points[i].pose.mean);
    Quat blend = deform_detail::blend_rotation(graph, binding);
    const double n = blend.norm();
    if ((blend.x == 0.0 && blend.y == 0.0 && blend.z == 0.0) || n < 1e-12) {
      scratch.blend[i] = Quat::identity();
      dst.rotation = frame.points[i].pose.rotation;
      continue;
    }
    blend = blend * (1.0 / n);
    scratch.blend[i] = blend;
    dst.rotation = blend * frame.points[i].pose.rotation;
  }
}

// 4x4 matrix M with (q x p) = M(p) q for fixed p.
inline Mat4 right_mul_matrix(const Quat& p) {
  Mat4 m;
  m << p.w, -p.x, -p.y, -p.z,
      p.x, p.w, p.z, -p.y,
      p.y, -p.z, p.w, p.x,
      p.z, p.y, -p.x, p.w;
  return m;
}

inline double energy_data(const DeformationGraph& graph, const GaussianFrame& frame,
                          std::span<const CameraView> cams, WarpScratch& scratch,
                          std::vector<double>* grad = nullptr, const RenderOptions& opts = {}) {
  if (grad) check_node_grad_size(graph, *grad);
  apply_warp_pose(graph, frame, scratch);
  scratch.warped.recompute_bbox();

  RenderOptions ropts = opts;
  ropts.sh_degree_cap = 0;  // only the view-independent band drives the warp
  ropts.retain = true;

  size_t with_image = 0;
  for (const CameraView& cam : cams) with_image += cam.image ? 1 : 0;
  if (with_image == 0) throw InvalidInput("energy_data: no ground-truth images attached");
  const double inv_views = 1.0 / static_cast<double>(with_image);

  double total = 0.0;
  for (const CameraView& cam : cams) {
    if (!cam.image) continue;
    const auto out = render(scratch.warped, cam, ropts);
    auto loss = l1_loss(out.image, *cam.image, cam.mask ? &*cam.mask : nullptr);
    total += loss.loss;
    if (!grad) continue;
    for (auto& v : loss.grad.data) v *= inv_views;  // the term averages over views
    const auto g = render_backward(out, scratch.warped, cam, loss.grad, ropts);
    for (size_t i = 0; i < frame.points.size(); ++i) {
      if (!g.visible[i]) continue;
      const Binding& binding = graph.point_bindings[i];
      if (binding.neighbors.empty()) continue;
      const Vec3& gmean = g.d_mean[i];
      // Rotation chain: d new_rot / d blend, through the blend normalization.
      const Quat q0 = frame.points[i].pose.rotation;
      const Vec4 grot = g.d_rotation[i];
      const Vec4 g_blend_n = right_mul_matrix(q0).transpose() * grot;
      Quat blend_raw = deform_detail::blend_rotation(graph, binding);
      const double bn = blend_raw.norm();
      Vec4 g_blend_raw = Vec4::Zero();
      if (bn > 1e-12) {
        const Vec4 bhat = scratch.blend[i].as_vec4();
        g_blend_raw = (g_blend_n - bhat * bhat.dot(g_blend_n)) / bn;
      }
      const Quat& ref = graph.nodes[binding.neighbors.front()].rotation;
      for (size_t t = 0; t < binding.neighbors.size(); ++t) {
        const int j = binding.neighbors[t];
        const double w = binding.weights[t];
        const ControlNode& node = graph.nodes[j];
        const Vec3 d = frame.points[i].pose.mean - node.center;
        const Vec4 gq = node.rotation.sandwich_jacobian(d).transpose() * (w * gmean);
        const double sign = node.rotation.dot(ref) < 0.0 ? -1.0 : 1.0;
        for (int c = 0; c < 4; ++c)
          (*grad)[static_cast<size_t>(j) * kNodeParams + c] += gq[c] + sign * w * g_blend_raw[c];
        for (int c = 0; c < 3; ++c) (*grad)[static_cast<size_t>(j) * kNodeParams + 4 + c] += w * gmean[c];
      }
    }
  }
  return total * inv_views;
}

// ---------------------------------------------------------------------------
// Relaxation-schedule optimizer.

struct WarpSchedule {
  int cycles = 10;
  int iterations = 600;
  double w_flow = 0.25;   // omega_1
  double w_arap = 1000.0; // omega_2
  double w_rot = 1000.0;  // omega_3
  double decay_flow = 0.8;
  double decay_arap_rot = 0.58;
  double eps_flow = 1.0;       // eps_f, pixels
  double lr_rotation = 1e-3;
  double lr_translation = 1e-3;  // scaled by bbox diagonal
  double divergence_factor = 10.0;
  int divergence_patience = 100;
};

struct WarpResult {
  DeformationGraph graph;
  GaussianFrame warped;
  std::vector<double> trace;        // total energy per iteration
  std::vector<Vec3> cycle_weights;  // (w_flow, w_arap, w_rot) at each cycle start
  bool no_active_flow = false;
};

// Minimizes E_data + w1 E_flow + w2 E_arap + w3 E_rot over the node rotations
// and translations with Adam, decaying (w1, w2, w3) after each relaxation
// cycle. Transmission weights for the flow term refresh at cycle boundaries.
inline WarpResult optimize_warp(DeformationGraph graph, const GaussianFrame& frame,
                                std::span<const CameraView> cams, const WarpSchedule& schedule = {},
                                const RenderOptions& opts = {}) {
  if (graph.point_bindings.size() != frame.points.size())
    throw InvalidParameter("optimize_warp: graph not bound to frame");
  const size_t m = graph.nodes.size();
  std::vector<double> params(m * kNodeParams);
  auto sync_params_from_graph = [&] {
    for (size_t j = 0; j < m; ++j) {
      const ControlNode& n = graph.nodes[j];
      double* p = params.data() + j * kNodeParams;
      p[0] = n.rotation.w;
      p[1] = n.rotation.x;
      p[2] = n.rotation.y;
      p[3] = n.rotation.z;
      p[4] = n.translation.x();
      p[5] = n.translation.y();
      p[6] = n.translation.z();
    }
  };
  auto sync_graph_from_params = [&] {
    for (size_t j = 0; j < m; ++j) {
      ControlNode& n = graph.nodes[j];
      const double* p = params.data() + j * kNodeParams;
      n.rotation = {p[0], p[1], p[2], p[3]};
      n.translation = {p[4], p[5], p[6]};
    }
  };
  sync_params_from_graph();

  GaussianFrame base = frame;
  base.recompute_bbox();
  const double diag = std::max(base.bbox.diagonal(), 1e-6);

  // Per-coordinate learning rates via two Adam groups.
  Adam adam_q(m * 4, {schedule.lr_rotation, 0.9, 0.999, 1e-8});
  Adam adam_t(m * 3, {schedule.lr_translation * diag, 0.9, 0.999, 1e-8});

  WarpScratch scratch;
  scratch.init(frame);

  WarpResult result;
  double w_flow = schedule.w_flow, w_arap = schedule.w_arap, w_rot = schedule.w_rot;
  double initial_energy = 0.0;
  bool have_initial = false;
  int over_budget = 0;

  std::vector<double> grad(m * kNodeParams);
  std::vector<double> gq(m * 4), gt(m * 3), pq(m * 4), pt(m * 3);

  // Flow anchors are fixed at the pre-warp projections for the whole
  // optimization; only the transmission weights refresh per cycle.
  FlowTerm flow_term = build_flow_term(frame, cams, schedule.eps_flow, opts);
  result.no_active_flow = flow_term.no_active_flow();

  for (int cycle = 0; cycle < schedule.cycles; ++cycle) {
    result.cycle_weights.emplace_back(w_flow, w_arap, w_rot);
    if (cycle > 0) {
      sync_graph_from_params();
      apply_warp_pose(graph, frame, scratch);
      scratch.warped.recompute_bbox();
      refresh_flow_transmission(flow_term, scratch.warped, cams, opts);
    }

    for (int it = 0; it < schedule.iterations; ++it) {
      sync_graph_from_params();
      std::fill(grad.begin(), grad.end(), 0.0);
      const double e_data = energy_data(graph, frame, cams, scratch, &grad, opts);

      std::vector<double> gflow(m * kNodeParams, 0.0);
      // The flow residual is anchored at the *pre-warp* projections captured
      // in the term setup; the warped projection is the only moving part.
      const double e_flow = energy_flow(graph, frame, cams, flow_term, &gflow);
      std::vector<double> garap(m * kNodeParams, 0.0);
      const double e_arap = energy_arap(graph, &garap);
      std::vector<double> grot(m * kNodeParams, 0.0);
      const double e_rot = energy_rot(graph, &grot);

      const double total = e_data + w_flow * e_flow + w_arap * e_arap + w_rot * e_rot;
      result.trace.push_back(total);
      if (!have_initial) {
        initial_energy = total;
        have_initial = true;
      }
      if (!std::isfinite(total)) throw NumericalAbort("optimize_warp: non-finite energy");
      if (total > schedule.divergence_factor * initial_energy) {
        if (++over_budget >= schedule.divergence_patience)
          throw NumericalAbort("optimize_warp: energy diverged for " +
                               std::to_string(schedule.divergence_patience) + " iterations");
      } else {
        over_budget = 0;
      }

      for (size_t k = 0; k < m * kNodeParams; ++k)
        grad[k] += w_flow * gflow[k] + w_arap * garap[k] + w_rot * grot[k];

      for (size_t j = 0; j < m; ++j) {
        for (int c = 0; c < 4; ++c) {
          gq[j * 4 + c] = grad[j * kNodeParams + c];
          pq[j * 4 + c] = params[j * kNodeParams + c];
        }
        for (int c = 0; c < 3; ++c) {
          gt[j * 3 + c] = grad[j * kNodeParams + 4 + c];
          pt[j * 3 + c] = params[j * kNodeParams + 4 + c];
        }
      }
      adam_q.step(pq, gq);
      adam_t.step(pt, gt);
      for (size_t j = 0; j < m; ++j) {
        for (int c = 0; c < 4; ++c) params[j * kNodeParams + c] = pq[j * 4 + c];
        for (int c = 0; c < 3; ++c) params[j * kNodeParams + 4 + c] = pt[j * 3 + c];
      }
    }
    w_arap *= schedule.decay_arap_rot;
    w_rot *= schedule.decay_arap_rot;
    w_flow *= schedule.decay_flow;
  }

  sync_graph_from_params();
  result.warped = warp_frame(graph, frame);
  result.graph = std::move(graph);
  return result;
}

}  // namespace egs
