#pragma once

// Detail refinement: two-stream optimization with frozen appearance on
// reference points, gradient-driven spawning of extension points,
// contribution-based pruning and the EMA plateau stop.

#include <map>
#include <span>
#include <unordered_set>
#include <vector>

#include "egs/core.hpp"
#include "egs/optim.hpp"
#include "egs/splatter.hpp"

namespace egs {

struct RefineConfig {
  double eps_alpha = 0.075;   // max-contribution prune threshold
  double eps_beta = 0.225;    // summed-contribution prune threshold (3x alpha)
  double eps_gamma = 0.01;    // convergence decline-ratio threshold
  double w_mean_reg = 1e-4;   // omega_4, L1 on reference mean residuals
  double w_rot_reg = 1e-4;    // omega_5, L1 on reference rotation residuals
  int densify_interval = 100;
  int densify_until = 0;                // 0: limited only by the recovery guard
  double grad_threshold = 0.0008;       // mean absolute screen-space gradient
  double split_scale_threshold = 0.01;  // clone/split decision, fraction of bbox diagonal
  double split_scale_shrink = 1.6;
  int max_iterations = 1000;
  double ema_decay = 0.9;
  int window = 10;  // epochs per stop-rule window
  int sh_iterations = 200;
  bool enable_densify = true;
  bool enable_prune = true;
  double lr_mean = 2e-4;  // scaled by bbox diagonal
  double lr_rotation = 1e-3;
  double lr_scale = 5e-3;
  double lr_opacity = 5e-2;
  double lr_sh = 2.5e-3;

  void validate() const {
    if (!(eps_alpha > 0) || !(eps_beta > 0) || !(eps_gamma > 0))
      throw InvalidParameter("RefineConfig: thresholds must be positive");
    if (eps_beta < eps_alpha) throw InvalidParameter("RefineConfig: eps_beta must be >= eps_alpha");
    if (window <= 0 || densify_interval <= 0) throw InvalidParameter("RefineConfig: bad intervals");
  }
};

struct EmaTrace {
  double decay = 0.9;
  std::vector<double> ema;

  void push(double loss) {
    ema.push_back(ema.empty() ? loss : decay * ema.back() + (1.0 - decay) * loss);
  }
  size_t size() const { return ema.size(); }
};

struct StopDecision {
  bool stop = false;
  bool error = false;      // non-finite loss encountered
  int stop_window = -1;    // 1-based window index at which the rule fired
};

// Pure plateau rule: average the EMA over consecutive fixed-size windows;
// stop once the relative decline is below eps_gamma at two consecutive
// window boundaries.
inline StopDecision adaptive_stop(const EmaTrace& trace, const RefineConfig& cfg) {
  StopDecision out;
  for (double v : trace.ema) {
    if (!std::isfinite(v)) {
      out.stop = true;
      out.error = true;
      return out;
    }
  }
  const size_t w = static_cast<size_t>(cfg.window);
  const size_t windows = trace.ema.size() / w;
  if (windows < 2) return out;
  std::vector<double> avg(windows);
  for (size_t k = 0; k < windows; ++k) {
    double s = 0.0;
    for (size_t i = 0; i < w; ++i) s += trace.ema[k * w + i];
    avg[k] = s / static_cast<double>(w);
  }
  int consecutive = 0;
  for (size_t k = 1; k < windows; ++k) {
    const double prev = avg[k - 1];
    const double ratio = prev > 0.0 ? (prev - avg[k]) / prev : 0.0;
    if (ratio < cfg.eps_gamma) {
      if (++consecutive >= 2) {
        out.stop = true;
        out.stop_window = static_cast<int>(k) + 1;
        return out;
      }
    } else {
      consecutive = 0;
    }
  }
  return out;
}

// Accumulated homodirectional positional-gradient statistics driving the
// spawning decision.
struct DensifyStats {
  std::vector<double> abs_grad;  // sum over iterations/views of |d mean2d| sums
  std::vector<int> count;        // number of (iteration, view) observations

  void reset(size_t n) {
    abs_grad.assign(n, 0.0);
    count.assign(n, 0);
  }
  void accumulate(const PointGradients& g) {
    for (size_t i = 0; i < abs_grad.size(); ++i) {
      if (!g.visible[i]) continue;
      abs_grad[i] += g.abs_grad2d[i];
      count[i] += 1;
    }
  }
};

struct RefineStats {
  int iterations = 0;
  uint64_t spawned = 0;
  uint64_t pruned = 0;
  double ext_fraction = 0.0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  bool stopped_early = false;
  bool aborted = false;
  std::vector<uint64_t> removed_input_ids;                  // pruning of pre-existing points
  std::vector<std::pair<uint64_t, uint64_t>> lineage;       // (child, spawn-time parent)
  EmaTrace trace;
};

// ---------------------------------------------------------------------------
// Spawning. Over-threshold small points are cloned; large ones emit two
// children sampled from the source with shrunken scale. Sources are never
// removed here (elimination is contribution pruning's job), every child is an
// ExtensionClass point carrying its ancestor id and the source appearance.
inline std::vector<uint64_t> densify(GaussianFrame& frame, const DensifyStats& stats,
                                     const RefineConfig& cfg, IdAllocator& ids, Rng& rng) {
  if (stats.abs_grad.size() != frame.points.size())
    throw InvalidParameter("densify: stats do not match frame");
  frame.recompute_bbox();
  const double diag = frame.bbox.diagonal();
  std::vector<uint64_t> spawned;
  std::vector<GaussianPoint> children;
  for (size_t i = 0; i < frame.points.size(); ++i) {
    if (stats.count[i] == 0) continue;
    const double avg = stats.abs_grad[i] / static_cast<double>(stats.count[i]);
    if (avg <= cfg.grad_threshold) continue;
    const GaussianPoint& src = frame.points[i];
    const double max_scale = src.scale().maxCoeff();
    const bool small = max_scale < cfg.split_scale_threshold * diag;
    const int copies = small ? 1 : 2;
    for (int c = 0; c < copies; ++c) {
      GaussianPoint child = src;
      child.id = ids.alloc();
      child.cls = PointClass::Extension;
      child.ancestor_id = src.id;
      child.birth_frame = frame.frame_index;
      if (!small) {
        // Sample the child position from the source Gaussian and shrink it.
        const Mat3 rot = src.pose.rotation.to_matrix_normalized();
        const Vec3 s = src.scale();
        child.pose.mean = src.pose.mean + rot * (s.asDiagonal() * rng.normal3());
        child.appearance.log_scale = src.appearance.log_scale - Vec3::Constant(std::log(cfg.split_scale_shrink));
      }
      spawned.push_back(child.id);
      children.push_back(std::move(child));
    }
  }
  for (auto& c : children) frame.points.push_back(std::move(c));
  // Fresh ids exceed all existing ones, so the frame stays id-sorted.
  return spawned;
}

// Removes every point whose maximum per-view contribution is below eps_alpha
// or whose summed contribution is below eps_beta. Returns removed ids.
inline std::vector<uint64_t> prune_by_contribution(GaussianFrame& frame, const ContributionReport& report,
                                                   const RefineConfig& cfg) {
  if (report.num_points != frame.points.size())
    throw InvalidParameter("prune_by_contribution: report does not cover the frame");
  std::vector<uint64_t> removed;
  std::vector<GaussianPoint> kept;
  kept.reserve(frame.points.size());
  for (size_t i = 0; i < frame.points.size(); ++i) {
    const double mx = report.max_over_views(i);
    const double sm = report.sum_over_views(i);
    if (mx < cfg.eps_alpha || sm < cfg.eps_beta)
      removed.push_back(frame.points[i].id);
    else
      kept.push_back(std::move(frame.points[i]));
  }
  frame.points = std::move(kept);
  return removed;
}

namespace refine_detail {

// Ancestor links must resolve against the surviving frame (decoders apply
// removals before instantiating extension records). When pruning breaks a
// same-frame chain, climb the recorded lineage; if the chain dead-ends,
// re-anchor to the nearest surviving older point.
inline void fix_lineage(GaussianFrame& frame, const std::map<uint64_t, uint64_t>& parent_of,
                        const std::unordered_set<uint64_t>& removed) {
  for (auto& p : frame.points) {
    if (p.cls != PointClass::Extension || p.birth_frame != frame.frame_index) continue;
    uint64_t anc = p.ancestor_id;
    bool dead_end = false;
    while (removed.count(anc)) {
      auto it = parent_of.find(anc);
      if (it == parent_of.end()) {
        dead_end = true;
        break;
      }
      anc = it->second;
    }
    if (!dead_end && frame.find(anc) != nullptr && anc < p.id) {
      p.ancestor_id = anc;
      continue;
    }
    // Nearest surviving point with a smaller id.
    double best = std::numeric_limits<double>::max();
    bool found = false;
    uint64_t pick = 0;
    for (const auto& cand : frame.points) {
      if (cand.id >= p.id) break;
      const double d = (cand.pose.mean - p.pose.mean).squaredNorm();
      if (d < best) {
        best = d;
        pick = cand.id;
        found = true;
      }
    }
    if (!found) throw ContractViolation("fix_lineage: no valid ancestor available");
    p.ancestor_id = pick;
  }
}

struct ParamKeys {
  // KeyedAdam slots per point id; SH coefficients live at slot 11 onward.
  static constexpr int kMean = 0;      // 0..2
  static constexpr int kRot = 3;       // 3..6
  static constexpr int kScale = 7;     // 7..9
  static constexpr int kOpacity = 10;  // 10
  static constexpr int kSh = 11;       // 11..58 (degree 3)
  static uint64_t key(uint64_t id, int slot) { return id * 64 + static_cast<uint64_t>(slot); }
};

}  // namespace refine_detail

// ---------------------------------------------------------------------------
// Main refinement loop. Reference points keep opacity, scale and all SH
// coefficients bit-identical; only their mean and rotation move, under L1
// regularizers against the post-warp pose. Extension points optimize every
// field. Densification and pruning interleave at the configured cadence; the
// EMA plateau rule ends the loop early.

struct RefineResult {
  GaussianFrame frame;
  RefineStats stats;
};

inline RefineResult refine_frame(const GaussianFrame& warped, std::span<const CameraView> cams,
                                 const RefineConfig& cfg, IdAllocator& ids, uint64_t seed = 0,
                                 const RenderOptions& opts = {}) {
  cfg.validate();
  size_t with_image = 0;
  for (const auto& cam : cams) with_image += cam.image ? 1 : 0;
  if (with_image == 0) throw InvalidInput("refine_frame: no target images attached");
  const double inv_views = 1.0 / static_cast<double>(with_image);

  RefineResult result;
  result.frame = warped;
  GaussianFrame& frame = result.frame;
  RefineStats& stats = result.stats;
  stats.trace.decay = cfg.ema_decay;
  frame.recompute_bbox();
  const double diag = std::max(frame.bbox.diagonal(), 1e-9);

  // Post-warp pose snapshot for the reference regularizers.
  std::map<uint64_t, PoseFeatures> warp_pose;
  std::unordered_set<uint64_t> input_ids;
  for (const auto& p : frame.points) {
    warp_pose.emplace(p.id, p.pose);
    input_ids.insert(p.id);
  }

  using Keys = refine_detail::ParamKeys;
  KeyedAdam adam_mean({cfg.lr_mean * diag, 0.9, 0.999, 1e-8});
  KeyedAdam adam_rot({cfg.lr_rotation, 0.9, 0.999, 1e-8});
  KeyedAdam adam_scale({cfg.lr_scale, 0.9, 0.999, 1e-8});
  KeyedAdam adam_opacity({cfg.lr_opacity, 0.9, 0.999, 1e-8});
  KeyedAdam adam_sh({cfg.lr_sh, 0.9, 0.999, 1e-8});

  Rng rng(seed ^ 0x5851f42d4c957f2dull);
  DensifyStats dstats;
  dstats.reset(frame.points.size());

  std::map<uint64_t, uint64_t> parent_of;
  std::unordered_set<uint64_t> removed_all;

  RenderOptions ropts = opts;
  ropts.retain = true;
  ropts.sh_degree_cap = 0;  // high-order SH is optimized in a separate pass

  auto run_prune = [&]() {
    if (!cfg.enable_prune) return;
    const auto report = contribution(frame, cams, ropts);
    const auto removed = prune_by_contribution(frame, report, cfg);
    for (uint64_t id : removed) {
      removed_all.insert(id);
      if (input_ids.count(id)) stats.removed_input_ids.push_back(id);
    }
    stats.pruned += removed.size();
    if (!removed.empty()) refine_detail::fix_lineage(frame, parent_of, removed_all);
  };

  int it = 0;
  for (it = 1; it <= cfg.max_iterations; ++it) {
    double data_loss = 0.0;
    std::vector<Vec3> g_mean(frame.points.size(), Vec3::Zero());
    std::vector<Vec4> g_rot(frame.points.size(), Vec4::Zero());
    std::vector<Vec3> g_scale(frame.points.size(), Vec3::Zero());
    std::vector<double> g_opacity(frame.points.size(), 0.0);
    std::vector<Vec3> g_sh0(frame.points.size(), Vec3::Zero());
    dstats.abs_grad.resize(frame.points.size(), 0.0);
    dstats.count.resize(frame.points.size(), 0);

    for (const auto& cam : cams) {
      if (!cam.image) continue;
      const auto out = render(frame, cam, ropts);
      auto loss = l1_loss(out.image, *cam.image, cam.mask ? &*cam.mask : nullptr);
      data_loss += loss.loss * inv_views;
      for (auto& v : loss.grad.data) v *= inv_views;
      const auto g = render_backward(out, frame, cam, loss.grad, ropts);
      dstats.accumulate(g);
      for (size_t i = 0; i < frame.points.size(); ++i) {
        if (!g.visible[i]) continue;
        g_mean[i] += g.d_mean[i];
        g_rot[i] += g.d_rotation[i];
        g_scale[i] += g.d_log_scale[i];
        g_opacity[i] += g.d_opacity_logit[i];
        g_sh0[i] += Vec3(g.d_sh[i][0], g.d_sh[i][static_cast<size_t>(frame.points[i].appearance.sh.per_channel())],
                         g.d_sh[i][2 * static_cast<size_t>(frame.points[i].appearance.sh.per_channel())]);
      }
    }

    if (!std::isfinite(data_loss)) {
      stats.aborted = true;
      break;
    }
    if (it == 1) stats.initial_loss = data_loss;
    stats.final_loss = data_loss;
    stats.trace.push(data_loss);

    // L1 pose regularizers on reference points (subgradients).
    auto sign = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };
    for (size_t i = 0; i < frame.points.size(); ++i) {
      GaussianPoint& p = frame.points[i];
      const bool reference = p.cls == PointClass::Reference;
      if (reference) {
        auto itp = warp_pose.find(p.id);
        if (itp != warp_pose.end()) {
          for (int c = 0; c < 3; ++c)
            g_mean[i][c] += cfg.w_mean_reg * sign(p.pose.mean[c] - itp->second.mean[c]);
          const Vec4 dq = p.pose.rotation.as_vec4() - itp->second.rotation.as_vec4();
          for (int c = 0; c < 4; ++c) g_rot[i][c] += cfg.w_rot_reg * sign(dq[c]);
        }
      }
      // Optimizer step: pose for everyone, appearance only for extensions.
      for (int c = 0; c < 3; ++c)
        p.pose.mean[c] -= adam_mean.update(Keys::key(p.id, Keys::kMean + c), g_mean[i][c]);
      Vec4 q = p.pose.rotation.as_vec4();
      for (int c = 0; c < 4; ++c) q[c] -= adam_rot.update(Keys::key(p.id, Keys::kRot + c), g_rot[i][c]);
      p.pose.rotation = Quat::from_vec4(q);
      if (!reference) {
        for (int c = 0; c < 3; ++c)
          p.appearance.log_scale[c] -= adam_scale.update(Keys::key(p.id, Keys::kScale + c), g_scale[i][c]);
        p.appearance.opacity_logit -= adam_opacity.update(Keys::key(p.id, Keys::kOpacity), g_opacity[i]);
        for (int ch = 0; ch < 3; ++ch) {
          const int slot = Keys::kSh + ch * 16;
          p.appearance.sh.at(ch, 0) -= adam_sh.update(Keys::key(p.id, slot), g_sh0[i][ch]);
        }
      }
    }

    if (it % cfg.densify_interval == 0) {
      // Fresh clones need iterations to settle; never spawn without a
      // recovery window before the budget runs out.
      const bool can_recover = it + cfg.densify_interval <= cfg.max_iterations &&
                               (cfg.densify_until <= 0 || it <= cfg.densify_until);
      if (cfg.enable_densify && can_recover) {
        const auto spawned = densify(frame, dstats, cfg, ids, rng);
        stats.spawned += spawned.size();
        for (uint64_t id : spawned) {
          const GaussianPoint* child = frame.find(id);
          parent_of.emplace(id, child->ancestor_id);
          stats.lineage.emplace_back(id, child->ancestor_id);
        }
      }
      run_prune();
      dstats.reset(frame.points.size());
    }

    const auto decision = adaptive_stop(stats.trace, cfg);
    if (decision.error) {
      stats.aborted = true;
      break;
    }
    if (decision.stop) {
      stats.stopped_early = true;
      break;
    }
  }
  stats.iterations = std::min(it, cfg.max_iterations);

  run_prune();  // once more at frame end

  // Normalization pass: canonical unit rotations.
  for (auto& p : frame.points) p.pose.rotation = normalize_rotation(p.pose.rotation);
  frame.recompute_bbox();

  size_t ext = 0;
  for (const auto& p : frame.points) ext += p.cls == PointClass::Extension ? 1 : 0;
  stats.ext_fraction = frame.points.empty() ? 0.0 : static_cast<double>(ext) / frame.points.size();
  return result;
}

// ---------------------------------------------------------------------------
// Independent high-order SH pass: with every other field frozen, minimizes
// the render loss over bands >= 1 for a fixed small budget.
inline void optimize_high_order_sh(GaussianFrame& frame, std::span<const CameraView> cams,
                                   const RefineConfig& cfg, const RenderOptions& opts = {}) {
  if (cfg.sh_iterations <= 0) return;
  bool any = false;
  for (const auto& p : frame.points) any = any || p.appearance.sh.degree >= 1;
  if (!any) return;
  size_t with_image = 0;
  for (const auto& cam : cams) with_image += cam.image ? 1 : 0;
  if (with_image == 0) throw InvalidInput("optimize_high_order_sh: no target images attached");
  const double inv_views = 1.0 / static_cast<double>(with_image);

  using Keys = refine_detail::ParamKeys;
  KeyedAdam adam_sh({cfg.lr_sh, 0.9, 0.999, 1e-8});
  RenderOptions ropts = opts;
  ropts.retain = true;
  ropts.sh_degree_cap = -1;

  for (int it = 0; it < cfg.sh_iterations; ++it) {
    std::vector<std::vector<double>> g_sh(frame.points.size());
    for (size_t i = 0; i < frame.points.size(); ++i)
      g_sh[i].assign(frame.points[i].appearance.sh.coeffs.size(), 0.0);
    for (const auto& cam : cams) {
      if (!cam.image) continue;
      const auto out = render(frame, cam, ropts);
      auto loss = l1_loss(out.image, *cam.image, cam.mask ? &*cam.mask : nullptr);
      for (auto& v : loss.grad.data) v *= inv_views;
      const auto g = render_backward(out, frame, cam, loss.grad, ropts);
      for (size_t i = 0; i < frame.points.size(); ++i)
        for (size_t k = 0; k < g_sh[i].size(); ++k) g_sh[i][k] += g.d_sh[i][k];
    }
    for (size_t i = 0; i < frame.points.size(); ++i) {
      GaussianPoint& p = frame.points[i];
      const int n = p.appearance.sh.per_channel();
      for (int ch = 0; ch < 3; ++ch) {
        for (int k = 1; k < n; ++k) {
          const uint64_t key = Keys::key(p.id, Keys::kSh + ch * 16 + k);
          p.appearance.sh.at(ch, k) -= adam_sh.update(key, g_sh[i][static_cast<size_t>(ch) * n + k]);
        }
      }
    }
  }
}

}  // namespace egs
