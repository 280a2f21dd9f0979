#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "egs/splatter.hpp"
#include "egs/testkit.hpp"

using namespace egs;

namespace {

CameraView front_camera(int size = 32, double fx = 40.0) {
  CameraView cam;
  cam.view_id = "front";
  cam.intr = {fx, fx, (size - 1) * 0.5, (size - 1) * 0.5, size, size};
  cam.near_clip = 0.1;
  cam.far_clip = 100.0;
  return cam;
}

GaussianPoint basic_point(uint64_t id, const Vec3& mean, double sigma, double opacity, const Vec3& color) {
  GaussianPoint p;
  p.id = id;
  p.pose.mean = mean;
  p.appearance.log_scale = Vec3::Constant(std::log(sigma));
  p.appearance.opacity_logit = logit(opacity);
  p.appearance.sh = SHCoeffs(0);
  p.appearance.sh.set_dc((color - Vec3::Constant(0.5)) / 0.28209479177387814);
  return p;
}

double linear_functional(const ImageRGB& img, const ImageRGB& weights) {
  double s = 0.0;
  for (size_t i = 0; i < img.data.size(); ++i) s += img.data[i] * weights.data[i];
  return s;
}

// Flattened per-point parameters: mean(3) rot(4) log_scale(3) opacity(1) sh(n).
std::vector<double> pack_frame(const GaussianFrame& f) {
  std::vector<double> v;
  for (const auto& p : f.points) {
    for (int i = 0; i < 3; ++i) v.push_back(p.pose.mean[i]);
    v.push_back(p.pose.rotation.w);
    v.push_back(p.pose.rotation.x);
    v.push_back(p.pose.rotation.y);
    v.push_back(p.pose.rotation.z);
    for (int i = 0; i < 3; ++i) v.push_back(p.appearance.log_scale[i]);
    v.push_back(p.appearance.opacity_logit);
    for (double c : p.appearance.sh.coeffs) v.push_back(c);
  }
  return v;
}

void unpack_frame(const std::vector<double>& v, GaussianFrame& f) {
  size_t i = 0;
  for (auto& p : f.points) {
    for (int k = 0; k < 3; ++k) p.pose.mean[k] = v[i++];
    p.pose.rotation.w = v[i++];
    p.pose.rotation.x = v[i++];
    p.pose.rotation.y = v[i++];
    p.pose.rotation.z = v[i++];
    for (int k = 0; k < 3; ++k) p.appearance.log_scale[k] = v[i++];
    p.appearance.opacity_logit = v[i++];
    for (double& c : p.appearance.sh.coeffs) c = v[i++];
  }
}

std::vector<double> pack_gradients(const PointGradients& g, const GaussianFrame& f) {
  std::vector<double> v;
  for (size_t pi = 0; pi < f.points.size(); ++pi) {
    for (int i = 0; i < 3; ++i) v.push_back(g.d_mean[pi][i]);
    for (int i = 0; i < 4; ++i) v.push_back(g.d_rotation[pi][i]);
    for (int i = 0; i < 3; ++i) v.push_back(g.d_log_scale[pi][i]);
    v.push_back(g.d_opacity_logit[pi]);
    for (double c : g.d_sh[pi]) v.push_back(c);
  }
  return v;
}

}  // namespace

TEST_CASE("empty visible set renders black with zero alpha") {
  GaussianFrame f;
  f.points.push_back(basic_point(0, {0, 0, -5}, 0.1, 0.8, {1, 1, 1}));  // behind camera
  const auto out = render(f, front_camera());
  for (double v : out.image.data) CHECK(v == 0.0);
  for (double v : out.alpha.data) CHECK(v == 0.0);
}

TEST_CASE("single opaque gaussian at a pixel center composites 0.99 * color") {
  CameraView cam = front_camera(33, 40.0);
  cam.intr.cx = 16.0;
  cam.intr.cy = 16.0;
  GaussianFrame f;
  f.points.push_back(basic_point(0, {0, 0, 2}, 0.2, 0.999999, {1, 1, 1}));
  const auto out = render(f, cam);
  const double* px = out.image.at(16, 16);
  CHECK(px[0] == doctest::Approx(0.99).epsilon(1e-6));
  CHECK(*out.alpha.at(16, 16) == doctest::Approx(0.99).epsilon(1e-6));
}

TEST_CASE("two stacked gaussians weight as 0.5 and 0.25") {
  CameraView cam = front_camera(33, 40.0);
  cam.intr.cx = 16.0;
  cam.intr.cy = 16.0;
  GaussianFrame f;
  f.points.push_back(basic_point(0, {0, 0, 1}, 0.2, 0.5, {1, 0, 0}));
  f.points.push_back(basic_point(1, {0, 0, 2}, 0.4, 0.5, {0, 1, 0}));
  const auto out = render(f, cam);
  const auto& plist = out.pixels[16 * 33 + 16];
  REQUIRE(plist.size() == 2);
  const double w_front = plist[0].alpha;
  const double w_back = plist[1].alpha * (1.0 - plist[0].alpha);
  CHECK(w_front == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(w_back == doctest::Approx(0.25).epsilon(1e-9));
  CHECK(out.splats[plist[0].splat].point_index == 0);  // depth order
}

TEST_CASE("per-pixel weight conservation: sum w + final transmittance = 1") {
  Rng rng(101);
  const auto frame = testkit::random_frame(rng, {{{0, 0, 0}, 0.4, 60}});
  const auto cams = testkit::ring_cameras(2, 32, 32);
  for (const auto& cam : cams) {
    const auto out = render(frame, cam);
    for (size_t p = 0; p < out.pixels.size(); ++p) {
      double sum = 0.0, trans = 1.0;
      for (const auto& pc : out.pixels[p]) {
        sum += pc.alpha * trans;
        trans *= 1.0 - pc.alpha;
      }
      CHECK(std::abs(sum - out.alpha.data[p]) < 1e-12);
      CHECK(std::abs(sum + trans - 1.0) < 1e-12);
      for (const auto& pc : out.pixels[p]) {
        CHECK(pc.alpha >= 0.0);
        CHECK(pc.alpha <= 0.99);
      }
    }
  }
}

TEST_CASE("tile decomposition invariance") {
  Rng rng(202);
  const auto frame = testkit::random_frame(rng, {{{0, 0, 0}, 0.5, 80}});
  const auto cams = testkit::ring_cameras(1, 64, 64);
  RenderOptions a, b;
  a.tile_size = 8;
  b.tile_size = 32;
  const auto ra = render(frame, cams[0], a);
  const auto rb = render(frame, cams[0], b);
  for (size_t i = 0; i < ra.image.data.size(); ++i)
    CHECK(std::abs(ra.image.data[i] - rb.image.data[i]) < 1e-6);
}

TEST_CASE("degenerate covariance is skipped with a diagnostic") {
  CameraView cam = front_camera();
  GaussianFrame f;
  auto p = basic_point(0, {0, 0, 2}, 0.1, 0.5, {1, 1, 1});
  p.appearance.log_scale = Vec3(-14.0, 0.0, 0.0);
  f.points.push_back(p);
  const auto out = render(f, cam);
  CHECK(out.degenerate_skipped == 1);
  CHECK(out.splats.empty());
}

TEST_CASE("contribution matches the naive full-sort oracle") {
  Rng rng(303);
  for (int scene = 0; scene < 10; ++scene) {
    const int npts = 20 + static_cast<int>(rng.below(80));
    const auto frame = testkit::random_frame(rng, {{{0, 0, 0}, 0.5, npts}});
    const auto cams = testkit::ring_cameras(2, 32, 32);
    const auto report = contribution(frame, cams);
    REQUIRE(report.num_points == frame.points.size());
    for (size_t q = 0; q < cams.size(); ++q) {
      const auto oracle = testkit::oracle_contribution(frame, cams[q]);
      for (size_t i = 0; i < frame.points.size(); ++i)
        CHECK(std::abs(report.at(i, q) - oracle[i]) < 1e-6);
    }
  }
}

TEST_CASE("contribution of an invisible point is zero") {
  GaussianFrame f;
  f.points.push_back(basic_point(0, {0, 0, 2}, 0.1, 0.7, {1, 1, 1}));
  f.points.push_back(basic_point(1, {0, 0, -3}, 0.1, 0.7, {1, 1, 1}));
  const auto cams = std::vector<CameraView>{front_camera()};
  const auto report = contribution(f, cams);
  CHECK(report.at(1, 0) == 0.0);
  CHECK(report.at(0, 0) > 0.0);
}

TEST_CASE("contribution of a near-single-pixel point equals its weight") {
  CameraView cam = front_camera(33, 40.0);
  cam.intr.cx = 16.0;
  cam.intr.cy = 16.0;
  GaussianFrame f;
  f.points.push_back(basic_point(0, {0, 0, 2}, 0.004, 0.5, {1, 1, 1}));
  const auto cams = std::vector<CameraView>{cam};
  const auto report = contribution(f, cams);
  CHECK(report.at(0, 0) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("zero loss gradient yields zero parameter gradients") {
  Rng rng(404);
  const auto frame = testkit::random_frame(rng, {{{0, 0, 0}, 0.4, 20}});
  const auto cam = testkit::ring_cameras(1, 32, 32)[0];
  const auto out = render(frame, cam);
  const ImageRGB zero(32, 32, 0.0);
  const auto grads = render_backward(out, frame, cam, zero);
  for (size_t i = 0; i < frame.points.size(); ++i) {
    CHECK(grads.d_mean[i].norm() == 0.0);
    CHECK(grads.d_rotation[i].norm() == 0.0);
  }
}

TEST_CASE("L1 gradient points toward a shifted target") {
  CameraView cam = front_camera(33, 40.0);
  cam.intr.cx = 16.0;
  cam.intr.cy = 16.0;
  GaussianFrame f;
  f.points.push_back(basic_point(0, {0, 0, 2}, 0.1, 0.8, {1, 1, 1}));
  GaussianFrame shifted = f;
  shifted.points[0].pose.mean.x() += 0.06;
  const auto target = render(shifted, cam).image;
  const auto out = render(f, cam);
  const auto loss = l1_loss(out.image, target);
  const auto grads = render_backward(out, f, cam, loss.grad);
  // Moving +x must reduce the loss.
  CHECK(grads.d_mean[0].x() < 0.0);
  CHECK(std::abs(grads.d_mean[0].x()) > std::abs(grads.d_mean[0].y()));
}

TEST_CASE("white point on white target has zero color gradient") {
  CameraView cam = front_camera(33, 40.0);
  GaussianFrame f;
  f.points.push_back(basic_point(0, {0, 0, 2}, 0.15, 0.7, {1, 1, 1}));
  const auto out = render(f, cam);
  const auto loss = l1_loss(out.image, out.image);
  const auto grads = render_backward(out, f, cam, loss.grad);
  CHECK(grads.d_sh[0][0] == 0.0);
  CHECK(grads.d_opacity_logit[0] == 0.0);
}

TEST_CASE("raising opacity moves toward a brighter target") {
  CameraView cam = front_camera(33, 40.0);
  GaussianFrame f;
  f.points.push_back(basic_point(0, {0, 0, 2}, 0.15, 0.5, {0.8, 0.8, 0.8}));
  GaussianFrame brighter = f;
  brighter.points[0].appearance.opacity_logit = logit(0.9);
  const auto target = render(brighter, cam).image;
  const auto out = render(f, cam);
  const auto loss = l1_loss(out.image, target);
  const auto grads = render_backward(out, f, cam, loss.grad);
  CHECK(grads.d_opacity_logit[0] < 0.0);
}

TEST_CASE("full gradient agrees with finite differences") {
  Rng rng(505);
  RenderOptions opts;
  for (int scene = 0; scene < 3; ++scene) {
    const int degree = scene;  // exercise SH degrees 0..2
    auto frame = testkit::random_frame(rng, {{{0, 0, 0}, 0.4, 20}}, degree);
    const auto cam = testkit::ring_cameras(1, 32, 32)[0];

    ImageRGB weights(32, 32, 0.0);
    for (auto& v : weights.data) v = rng.uniform(-1.0, 1.0);

    const auto out = render(frame, cam, opts);
    const auto grads = render_backward(out, frame, cam, weights, opts);
    const auto analytic = pack_gradients(grads, frame);

    auto f = [&](const std::vector<double>& params) {
      GaussianFrame local = frame;
      unpack_frame(params, local);
      return linear_functional(render(local, cam, opts).image, weights);
    };

    const auto params = pack_frame(frame);
    std::vector<size_t> coords;
    for (int k = 0; k < 40; ++k) coords.push_back(rng.below(params.size()));
    const auto fd = testkit::oracle_fd_gradient_subset(f, params, coords, 1e-5);

    double max_fd = 0.0;
    for (double v : fd) max_fd = std::max(max_fd, std::abs(v));
    CHECK(max_fd > 1e-6);  // instances must be informative
    for (size_t j = 0; j < coords.size(); ++j) {
      const double diff = std::abs(analytic[coords[j]] - fd[j]);
      CHECK(diff <= 1e-3 * std::max(max_fd, 1e-6));
    }
  }
}

TEST_CASE("backward rejects mismatched forward state") {
  Rng rng(606);
  const auto frame = testkit::random_frame(rng, {{{0, 0, 0}, 0.4, 10}});
  const auto cam = testkit::ring_cameras(1, 32, 32)[0];
  RenderOptions opts;
  opts.retain = false;
  const auto out = render(frame, cam, opts);
  const ImageRGB g(32, 32, 0.0);
  CHECK_THROWS_AS(render_backward(out, frame, cam, g), ContractViolation);

  auto out2 = render(frame, cam);
  GaussianFrame other = frame;
  other.points.pop_back();
  CHECK_THROWS_AS(render_backward(out2, other, cam, g), ContractViolation);
}

TEST_CASE("center transmission reports per-point compositing weight") {
  CameraView cam = front_camera(33, 40.0);
  cam.intr.cx = 16.0;
  cam.intr.cy = 16.0;
  GaussianFrame f;
  f.points.push_back(basic_point(0, {0, 0, 1}, 0.2, 0.5, {1, 0, 0}));
  f.points.push_back(basic_point(1, {0, 0, 2}, 0.4, 0.5, {0, 1, 0}));
  const auto out = render(f, cam);
  const auto t = center_transmission(out, f);
  CHECK(t[0] == doctest::Approx(0.5).epsilon(1e-9));
  CHECK(t[1] == doctest::Approx(0.25).epsilon(1e-9));
}

TEST_CASE("render enforces the desk-scale image cap") {
  GaussianFrame f;
  f.points.push_back(basic_point(0, {0, 0, 2}, 0.1, 0.5, {1, 1, 1}));
  CameraView cam = front_camera(512, 200.0);
  CHECK_THROWS_AS(render(f, cam), InvalidParameter);
}
