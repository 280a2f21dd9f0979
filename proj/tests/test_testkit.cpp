#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "egs/testkit.hpp"

using namespace egs;
using namespace egs::testkit;

TEST_CASE("gen_scene is deterministic for a fixed seed") {
  SequenceSpec spec;
  spec.seed = 42;
  spec.frames = 3;
  spec.num_cams = 2;
  spec.image_size = 32;
  spec.motion = Motion::Rigid;
  spec.angle_step = 0.05;
  const auto a = gen_scene(spec);
  const auto b = gen_scene(spec);
  REQUIRE(a.base_points.size() == b.base_points.size());
  for (size_t i = 0; i < a.base_points.size(); ++i) {
    CHECK(a.base_points[i].pose.mean == b.base_points[i].pose.mean);
    CHECK(a.base_points[i].appearance.opacity_logit == b.base_points[i].appearance.opacity_logit);
  }
  for (int t = 0; t < spec.frames; ++t)
    for (int q = 0; q < spec.num_cams; ++q) {
      CHECK(a.images[t][q].data == b.images[t][q].data);
      CHECK(a.masks[t][q].data == b.masks[t][q].data);
      if (t + 1 < spec.frames) CHECK(a.flows[t][q].data == b.flows[t][q].data);
    }
}

TEST_CASE("vanishing blob leaves mask and flow") {
  SequenceSpec spec;
  spec.seed = 7;
  spec.frames = 4;
  spec.num_cams = 1;
  spec.image_size = 48;
  spec.motion = Motion::Static;
  spec.blobs = {{Vec3(-0.3, 0, 0), 0.18, 50, 0, std::numeric_limits<int>::max()},
                {Vec3(0.45, 0, 0), 0.18, 50, 0, 2}};  // vanishes at frame 2
  const auto seq = gen_scene(spec);

  CHECK(seq.frame_at(1).points.size() == 100);
  CHECK(seq.frame_at(2).points.size() == 50);

  // Foreground must shrink when the blob vanishes.
  auto coverage = [&](int t) {
    size_t on = 0;
    for (uint8_t v : seq.masks[t][0].data) on += v ? 1 : 0;
    return on;
  };
  CHECK(coverage(2) < coverage(1));

  // Flow for the disappearing transition carries no target for the vanished
  // region (the generator zeroes those contributions).
  const auto& flow = seq.flows[1][0];
  double max_flow = 0.0;
  for (float v : flow.data) max_flow = std::max(max_flow, std::abs(static_cast<double>(v)));
  CHECK(max_flow == 0.0);  // static scene: surviving content does not move
}

TEST_CASE("articulated motion provides analytic trajectories") {
  SequenceSpec spec;
  spec.seed = 9;
  spec.frames = 3;
  spec.num_cams = 1;
  spec.image_size = 32;
  spec.motion = Motion::Articulated;
  spec.angle_step = 0.2;
  spec.blobs = {{Vec3(-0.35, 0, 0), 0.2, 30}, {Vec3(0.35, 0, 0), 0.2, 30}};
  const auto seq = gen_scene(spec);

  // Left segment static, right segment rotates.
  for (size_t i = 0; i < seq.base_points.size(); ++i) {
    Vec3 m2;
    Quat r2;
    seq.pose_at(i, 2, &m2, &r2);
    const Vec3 m0 = seq.base_points[i].pose.mean;
    if (m0.x() < 0.0) {
      CHECK((m2 - m0).norm() == 0.0);
    } else if (m0.x() > spec.bend_blend_width) {
      CHECK((m2 - m0).norm() > 1e-4);
      CHECK(std::abs(m2.norm() - m0.norm()) < 1e-12);  // rotation about the origin preserves radius
    }
  }
}

TEST_CASE("rigid-motion flow matches per-point projected displacement") {
  SequenceSpec spec;
  spec.seed = 13;
  spec.frames = 2;
  spec.num_cams = 1;
  spec.image_size = 48;
  spec.motion = Motion::Rigid;
  spec.translation_step = Vec3(0.04, 0, 0);
  spec.blobs = {{Vec3(0, 0, 0), 0.25, 60}};
  const auto seq = gen_scene(spec);

  const auto frame = seq.frame0();
  const auto& cam = seq.cams[0];
  const auto& flow = seq.flows[0][0];
  int checked = 0;
  for (size_t i = 0; i < frame.points.size(); ++i) {
    const auto pr0 = project_gaussian(frame.points[i], cam);
    if (pr0.culled) continue;
    Vec3 m1;
    Quat r1;
    seq.pose_at(i, 1, &m1, &r1);
    GaussianPoint moved = frame.points[i];
    moved.pose.mean = m1;
    const auto pr1 = project_gaussian(moved, cam);
    if (pr1.culled) continue;
    const Vec2 expect = pr1.mean2d - pr0.mean2d;
    const Vec2 got = flow.sample(pr0.mean2d);
    if (got.norm() == 0.0) continue;  // uncovered pixel
    // Blended flow mixes nearby points; displacements are near-constant for a
    // translation, so agreement should be tight.
    CHECK((got - expect).norm() < 0.35);
    ++checked;
  }
  CHECK(checked > 20);
}

TEST_CASE("oracle_knn ties break by index and K=N returns distance order") {
  std::vector<Vec3> pts{{0, 0, 0}, {1, 0, 0}, {-1, 0, 0}, {2, 0, 0}};
  const auto res = oracle_knn(pts, {Vec3(0.0, 0, 0)}, 4);
  REQUIRE(res[0].size() == 4);
  CHECK(res[0][0] == 0);
  CHECK(res[0][1] == 1);  // tie with index 2 resolved to lower index
  CHECK(res[0][2] == 2);
  CHECK(res[0][3] == 3);
}

TEST_CASE("oracle_contribution zero-opacity point scores zero") {
  GaussianFrame f;
  Rng rng(3);
  auto p = random_point(rng, 0, Vec3::Zero(), 0.05, 0);
  p.pose.mean = Vec3(0, 0, 2);
  p.appearance.opacity_logit = -40.0;  // sigmoid ~ 0
  f.points.push_back(p);
  f.recompute_bbox();
  const auto cams = ring_cameras(1, 32, 32);
  const auto phi = oracle_contribution(f, cams[0]);
  CHECK(phi[0] < 1e-12);
}

TEST_CASE("oracle_contribution single point approximates the gaussian integral") {
  // phi = opacity * sum_pix exp(-0.5 d^T conic d) ~ opacity * 2 pi sqrt(det cov2d)
  // for an in-image, well-sampled footprint.
  CameraView cam;
  cam.view_id = "c";
  cam.intr = {60, 60, 16, 16, 33, 33};
  cam.near_clip = 0.1;
  cam.far_clip = 100;
  GaussianFrame f;
  GaussianPoint p;
  p.id = 0;
  p.pose.mean = Vec3(0, 0, 2);
  p.appearance.log_scale = Vec3::Constant(std::log(0.08));
  p.appearance.opacity_logit = logit(0.3);
  f.points.push_back(p);
  f.recompute_bbox();

  const auto pr = project_gaussian(p, cam);
  const double analytic = 0.3 * 2.0 * M_PI * std::sqrt(pr.cov2d.determinant());
  const auto phi = testkit::oracle_contribution(f, cam);
  // 3-sigma truncation and pixel discretization keep this within a few percent.
  CHECK(phi[0] == doctest::Approx(analytic).epsilon(0.03));
}

TEST_CASE("oracle_fd_gradient is exact on quadratics") {
  auto f = [](const std::vector<double>& v) { return 3.0 * v[0] * v[0] + 2.0 * v[0] * v[1] - v[1]; };
  const auto g = oracle_fd_gradient(f, {1.5, -2.0}, 1e-5);
  CHECK(g[0] == doctest::Approx(3.0 * 2.0 * 1.5 + 2.0 * -2.0).epsilon(1e-8));
  CHECK(g[1] == doctest::Approx(2.0 * 1.5 - 1.0).epsilon(1e-8));
}
