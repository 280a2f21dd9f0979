#pragma once

#include <array>
#include <vector>

#include "egs/common.hpp"

namespace egs {

// Real spherical harmonics, graphics convention (Condon-Shortley folded into
// the constants), bands 0..3. Coefficient layout is band-major within a
// channel: [ (0,0), (1,-1), (1,0), (1,1), (2,-2), ... ].

constexpr int kMaxShDegree = 3;

inline int sh_coeffs_per_channel(int degree) { return (degree + 1) * (degree + 1); }

namespace sh_detail {
constexpr double kC0 = 0.28209479177387814;
constexpr double kC1 = 0.4886025119029199;
constexpr double kC2[5] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                           -1.0925484305920792, 0.5462742152960396};
constexpr double kC3[7] = {-0.5900435899266435, 2.890611442640554,  -0.4570457994644658,
                           0.3731763325901154,  -0.4570457994644658, 1.445305721320277,
                           -0.5900435899266435};
}  // namespace sh_detail

// Evaluates the basis at a unit direction. `out` must hold (degree+1)^2 values.
inline void sh_basis(int degree, const Vec3& dir, double* out) {
  using namespace sh_detail;
  const double x = dir.x(), y = dir.y(), z = dir.z();
  out[0] = kC0;
  if (degree < 1) return;
  out[1] = -kC1 * y;
  out[2] = kC1 * z;
  out[3] = -kC1 * x;
  if (degree < 2) return;
  const double xx = x * x, yy = y * y, zz = z * z;
  out[4] = kC2[0] * x * y;
  out[5] = kC2[1] * y * z;
  out[6] = kC2[2] * (2.0 * zz - xx - yy);
  out[7] = kC2[3] * x * z;
  out[8] = kC2[4] * (xx - yy);
  if (degree < 3) return;
  out[9] = kC3[0] * y * (3.0 * xx - yy);
  out[10] = kC3[1] * x * y * z;
  out[11] = kC3[2] * y * (4.0 * zz - xx - yy);
  out[12] = kC3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
  out[13] = kC3[4] * x * (4.0 * zz - xx - yy);
  out[14] = kC3[5] * z * (xx - yy);
  out[15] = kC3[6] * x * (xx - 3.0 * yy);
}

// Derivatives of each basis value w.r.t. the (unnormalized) direction
// components. `out` holds (degree+1)^2 rows of (d/dx, d/dy, d/dz).
inline void sh_basis_grad(int degree, const Vec3& dir, Vec3* out) {
  using namespace sh_detail;
  const double x = dir.x(), y = dir.y(), z = dir.z();
  out[0] = Vec3::Zero();
  if (degree < 1) return;
  out[1] = {0.0, -kC1, 0.0};
  out[2] = {0.0, 0.0, kC1};
  out[3] = {-kC1, 0.0, 0.0};
  if (degree < 2) return;
  out[4] = {kC2[0] * y, kC2[0] * x, 0.0};
  out[5] = {0.0, kC2[1] * z, kC2[1] * y};
  out[6] = {-2.0 * kC2[2] * x, -2.0 * kC2[2] * y, 4.0 * kC2[2] * z};
  out[7] = {kC2[3] * z, 0.0, kC2[3] * x};
  out[8] = {2.0 * kC2[4] * x, -2.0 * kC2[4] * y, 0.0};
  if (degree < 3) return;
  const double xx = x * x, yy = y * y, zz = z * z;
  out[9] = {6.0 * kC3[0] * x * y, 3.0 * kC3[0] * (xx - yy), 0.0};
  out[10] = {kC3[1] * y * z, kC3[1] * x * z, kC3[1] * x * y};
  out[11] = {-2.0 * kC3[2] * x * y, kC3[2] * (4.0 * zz - xx - 3.0 * yy), 8.0 * kC3[2] * y * z};
  out[12] = {-6.0 * kC3[3] * x * z, -6.0 * kC3[3] * y * z, kC3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)};
  out[13] = {kC3[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * kC3[4] * x * y, 8.0 * kC3[4] * x * z};
  out[14] = {2.0 * kC3[5] * x * z, -2.0 * kC3[5] * y * z, kC3[5] * (xx - yy)};
  out[15] = {kC3[6] * 3.0 * (xx - yy), -6.0 * kC3[6] * x * y, 0.0};
}

// ---------------------------------------------------------------------------
// Band rotation. Band 1 is a signed permutation of the 3x3 rotation; higher
// bands follow the recursive construction of Ivanic & Ruseva (errata form).

class ShRotation {
 public:
  explicit ShRotation(const Mat3& rot, int degree = kMaxShDegree) : degree_(degree) {
    if (degree < 0 || degree > kMaxShDegree) throw InvalidParameter("ShRotation: degree out of range");
    if (degree >= 1) {
      band_[0] = Eigen::MatrixXd(3, 3);
      Eigen::MatrixXd& r1 = band_[0];
      // Rows/cols ordered m = -1, 0, 1; SH axes (y, z, x) with the basis
      // signs (-, +, -) folded in.
      r1(0, 0) = rot(1, 1);
      r1(0, 1) = -rot(1, 2);
      r1(0, 2) = rot(1, 0);
      r1(1, 0) = -rot(2, 1);
      r1(1, 1) = rot(2, 2);
      r1(1, 2) = -rot(2, 0);
      r1(2, 0) = rot(0, 1);
      r1(2, 1) = -rot(0, 2);
      r1(2, 2) = rot(0, 0);
    }
    for (int l = 2; l <= degree; ++l) build_band(l);
  }

  int degree() const { return degree_; }

  // Rotates one channel's coefficients in place (band-major layout).
  void apply(double* coeffs) const {
    for (int l = 1; l <= degree_; ++l) {
      const Eigen::MatrixXd& m = band_[l - 1];
      const int n = 2 * l + 1;
      Eigen::Map<Eigen::VectorXd> seg(coeffs + l * l, n);
      seg = (m * seg).eval();
    }
  }

  const Eigen::MatrixXd& band(int l) const { return band_[l - 1]; }

 private:
  double prev(int l, int m, int n) const {
    const Eigen::MatrixXd& p = band_[l - 2];
    return p(m + (l - 1), n + (l - 1));
  }

  double r1(int i, int j) const { return band_[0](i + 1, j + 1); }

  double P(int i, int a, int b, int l) const {
    if (b == l) return r1(i, 1) * prev(l, a, l - 1) - r1(i, -1) * prev(l, a, -l + 1);
    if (b == -l) return r1(i, 1) * prev(l, a, -l + 1) + r1(i, -1) * prev(l, a, l - 1);
    return r1(i, 0) * prev(l, a, b);
  }

  void build_band(int l) {
    const int n = 2 * l + 1;
    Eigen::MatrixXd m(n, n);
    for (int mm = -l; mm <= l; ++mm) {
      for (int nn = -l; nn <= l; ++nn) {
        const double denom = (std::abs(nn) == l) ? (2.0 * l) * (2.0 * l - 1.0)
                                                 : static_cast<double>((l + nn) * (l - nn));
        const double u = std::sqrt(static_cast<double>((l + mm) * (l - mm)) / denom);
        const double v = 0.5 *
                         std::sqrt((1.0 + (mm == 0 ? 1.0 : 0.0)) * (l + std::abs(mm) - 1.0) *
                                   (l + std::abs(mm)) / denom) *
                         (mm == 0 ? -1.0 : 1.0);
        const double w = -0.5 * std::sqrt((l - std::abs(mm) - 1.0) * (l - std::abs(mm)) / denom) *
                         (mm == 0 ? 0.0 : 1.0);

        double val = 0.0;
        if (u != 0.0) val += u * P(0, mm, nn, l);
        if (v != 0.0) {
          double vv;
          if (mm == 0) {
            vv = P(1, 1, nn, l) + P(-1, -1, nn, l);
          } else if (mm > 0) {
            vv = P(1, mm - 1, nn, l) * std::sqrt(1.0 + (mm == 1 ? 1.0 : 0.0)) -
                 P(-1, -mm + 1, nn, l) * (mm == 1 ? 0.0 : 1.0);
          } else {
            vv = P(1, mm + 1, nn, l) * (mm == -1 ? 0.0 : 1.0) +
                 P(-1, -mm - 1, nn, l) * std::sqrt(1.0 + (mm == -1 ? 1.0 : 0.0));
          }
          val += v * vv;
        }
        if (w != 0.0) {
          double ww;
          if (mm > 0) {
            ww = P(1, mm + 1, nn, l) + P(-1, -mm - 1, nn, l);
          } else {
            ww = P(1, mm - 1, nn, l) - P(-1, -mm + 1, nn, l);
          }
          val += w * ww;
        }
        m(mm + l, nn + l) = val;
      }
    }
    band_[l - 1] = std::move(m);
  }

  int degree_;
  std::array<Eigen::MatrixXd, kMaxShDegree> band_;
};

}  // namespace egs
