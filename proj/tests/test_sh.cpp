#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "egs/core.hpp"
#include "egs/sh.hpp"

using namespace egs;

namespace {

Vec3 random_dir(Rng& rng) {
  Vec3 v = rng.normal3();
  while (v.norm() < 1e-6) v = rng.normal3();
  return v.normalized();
}

double eval_channel(const SHCoeffs& sh, int ch, const Vec3& dir) {
  double basis[16];
  sh_basis(sh.degree, dir, basis);
  double v = 0.0;
  for (int k = 0; k < sh.per_channel(); ++k) v += basis[k] * sh.at(ch, k);
  return v;
}

SHCoeffs rotate_coeffs(const SHCoeffs& sh, const Mat3& rot) {
  SHCoeffs out = sh;
  const ShRotation r(rot, sh.degree);
  for (int ch = 0; ch < 3; ++ch) r.apply(out.coeffs.data() + static_cast<size_t>(ch) * out.per_channel());
  return out;
}

}  // namespace

TEST_CASE("degree-0 band is rotation invariant") {
  Rng rng(5);
  SHCoeffs sh(0);
  sh.set_dc({0.3, -0.8, 1.2});
  const Mat3 rot = rng.unit_quat().to_matrix_normalized();
  const SHCoeffs out = rotate_coeffs(sh, rot);
  CHECK(out.coeffs == sh.coeffs);
}

TEST_CASE("identity rotation leaves coefficients unchanged") {
  Rng rng(6);
  SHCoeffs sh(3);
  for (auto& c : sh.coeffs) c = rng.uniform(-1, 1);
  const SHCoeffs out = rotate_coeffs(sh, Mat3::Identity());
  for (size_t i = 0; i < sh.coeffs.size(); ++i) CHECK(out.coeffs[i] == doctest::Approx(sh.coeffs[i]).epsilon(1e-12));
}

TEST_CASE("degree-1 band transforms like a vector under 90-degree z rotation") {
  // Basis is (-c y, c z, -c x); rotating the function by Rz(90) maps
  // x -> -y, y -> x in function space.
  SHCoeffs sh(1);
  sh.at(0, 1) = 1.0;  // -c*y coefficient, red channel
  sh.at(0, 2) = 2.0;
  sh.at(0, 3) = 3.0;
  Mat3 rz;
  rz << 0, -1, 0, 1, 0, 0, 0, 0, 1;
  const SHCoeffs out = rotate_coeffs(sh, rz);

  Rng rng(17);
  for (int i = 0; i < 32; ++i) {
    const Vec3 d = random_dir(rng);
    const double rotated = eval_channel(out, 0, d);
    const double reference = eval_channel(sh, 0, rz.transpose() * d);
    CHECK(rotated == doctest::Approx(reference).epsilon(1e-10));
  }
}

TEST_CASE("rotated coefficients reproduce the function on rotated directions") {
  Rng rng(21);
  for (int degree = 1; degree <= 3; ++degree) {
    for (int trial = 0; trial < 6; ++trial) {
      SHCoeffs sh(degree);
      for (auto& c : sh.coeffs) c = rng.uniform(-1, 1);
      const Mat3 rot = rng.unit_quat().to_matrix_normalized();
      const SHCoeffs rotated = rotate_coeffs(sh, rot);
      for (int i = 0; i < 100; ++i) {
        const Vec3 d = random_dir(rng);
        for (int ch = 0; ch < 3; ++ch) {
          const double lhs = eval_channel(rotated, ch, d);
          const double rhs = eval_channel(sh, ch, rot.transpose() * d);
          CHECK(lhs == doctest::Approx(rhs).epsilon(1e-9));
        }
      }
    }
  }
}

TEST_CASE("sh rotation matrices are orthogonal") {
  Rng rng(33);
  const Mat3 rot = rng.unit_quat().to_matrix_normalized();
  const ShRotation r(rot, 3);
  for (int l = 1; l <= 3; ++l) {
    const auto& m = r.band(l);
    const Eigen::MatrixXd eye = m * m.transpose();
    CHECK((eye - Eigen::MatrixXd::Identity(2 * l + 1, 2 * l + 1)).norm() < 1e-10);
  }
}

TEST_CASE("sh_basis_grad matches finite differences") {
  Rng rng(44);
  for (int trial = 0; trial < 10; ++trial) {
    const Vec3 d = random_dir(rng);
    double base[16];
    Vec3 grad[16];
    sh_basis(3, d, base);
    sh_basis_grad(3, d, grad);
    const double h = 1e-6;
    for (int axis = 0; axis < 3; ++axis) {
      Vec3 dp = d, dm = d;
      dp[axis] += h;
      dm[axis] -= h;
      double fp[16], fm[16];
      sh_basis(3, dp, fp);
      sh_basis(3, dm, fm);
      for (int k = 0; k < 16; ++k) {
        const double fd = (fp[k] - fm[k]) / (2 * h);
        CHECK(grad[k][axis] == doctest::Approx(fd).epsilon(1e-5));
      }
    }
  }
}
