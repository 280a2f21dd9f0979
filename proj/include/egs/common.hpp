#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

namespace egs {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

// ---------------------------------------------------------------------------
// Error taxonomy. Readers and numeric kernels reject rather than guess.

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct InvalidParameter : Error {
  using Error::Error;
};
struct InvalidInput : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct CorruptChunk : Error {
  using Error::Error;
};
struct ContractViolation : Error {
  using Error::Error;
};
struct NumericalAbort : Error {
  using Error::Error;
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// ---------------------------------------------------------------------------
// Quaternion with explicit (w, x, y, z) storage. Kept separate from Eigen's
// quaternion because the deformation stage works with *unnormalized*
// quaternions (the unit constraint is soft) and needs the homogeneous
// sandwich product q v q* and its Jacobians.

struct Quat {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  Quat() = default;
  Quat(double w_, double x_, double y_, double z_) : w(w_), x(x_), y(y_), z(z_) {}

  static Quat identity() { return {1.0, 0.0, 0.0, 0.0}; }

  Vec3 vec() const { return {x, y, z}; }
  Vec4 as_vec4() const { return {w, x, y, z}; }
  static Quat from_vec4(const Vec4& v) { return {v[0], v[1], v[2], v[3]}; }

  double norm2() const { return w * w + x * x + y * y + z * z; }
  double norm() const { return std::sqrt(norm2()); }

  Quat conjugate() const { return {w, -x, -y, -z}; }

  Quat operator*(const Quat& r) const {
    return {w * r.w - x * r.x - y * r.y - z * r.z,
            w * r.x + x * r.w + y * r.z - z * r.y,
            w * r.y - x * r.z + y * r.w + z * r.x,
            w * r.z + x * r.y - y * r.x + z * r.w};
  }
  Quat operator+(const Quat& r) const { return {w + r.w, x + r.x, y + r.y, z + r.z}; }
  Quat operator-(const Quat& r) const { return {w - r.w, x - r.x, y - r.y, z - r.z}; }
  Quat operator*(double s) const { return {w * s, x * s, y * s, z * s}; }

  double dot(const Quat& r) const { return w * r.w + x * r.x + y * r.y + z * r.z; }

  bool is_identity() const { return w == 1.0 && x == 0.0 && y == 0.0 && z == 0.0; }

  // Homogeneous sandwich q v q*: for unit q this is a rotation, for general q
  // it scales by |q|^2. Exact for the identity quaternion (returns v bit-wise).
  Vec3 sandwich(const Vec3& v) const {
    const Vec3 u{x, y, z};
    if (x == 0.0 && y == 0.0 && z == 0.0 && w == 1.0) return v;
    const Vec3 uxv = u.cross(v);
    return (w * w - u.squaredNorm()) * v + 2.0 * u.dot(v) * u + 2.0 * w * uxv;
  }

  // d(sandwich)/dw and d(sandwich)/d(x,y,z) as a 3x4 Jacobian [dw | du].
  Eigen::Matrix<double, 3, 4> sandwich_jacobian(const Vec3& v) const {
    const Vec3 u{x, y, z};
    Eigen::Matrix<double, 3, 4> jac;
    jac.col(0) = 2.0 * w * v + 2.0 * u.cross(v);
    Mat3 ju = -2.0 * v * u.transpose() + 2.0 * u * v.transpose() +
              2.0 * u.dot(v) * Mat3::Identity();
    // d(2w u x v)/du = -2w [v]_x
    ju(0, 1) += 2.0 * w * v[2];
    ju(0, 2) -= 2.0 * w * v[1];
    ju(1, 0) -= 2.0 * w * v[2];
    ju(1, 2) += 2.0 * w * v[0];
    ju(2, 0) += 2.0 * w * v[1];
    ju(2, 1) -= 2.0 * w * v[0];
    jac.block<3, 3>(0, 1) = ju;
    return jac;
  }

  // Rotation matrix of q/|q|.
  Mat3 to_matrix_normalized() const {
    const double n = norm();
    const double s = (n > 0.0) ? 1.0 / n : 0.0;
    const double qw = w * s, qx = x * s, qy = y * s, qz = z * s;
    Mat3 m;
    m << 1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw),
        2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw),
        2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy);
    return m;
  }
};

inline Quat operator*(double s, const Quat& q) { return q * s; }

// ---------------------------------------------------------------------------
// Deterministic RNG. mt19937_64 with hand-rolled draws so sequences do not
// depend on the standard library's distribution implementations.

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  uint64_t next_u64() { return gen_(); }

  // Unbiased draw in [0, n) by rejection.
  uint64_t below(uint64_t n) {
    if (n == 0) throw InvalidParameter("Rng::below: n must be positive");
    const uint64_t limit = std::numeric_limits<uint64_t>::max() - std::numeric_limits<uint64_t>::max() % n;
    uint64_t v;
    do {
      v = gen_();
    } while (v >= limit);
    return v % n;
  }

  double uniform() { return (gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * M_PI * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  Vec3 normal3() {
    const double a = normal(), b = normal(), c = normal();
    return {a, b, c};
  }

  // Random unit quaternion on the w >= 0 hemisphere.
  Quat unit_quat() {
    Quat q{normal(), normal(), normal(), normal()};
    const double n = q.norm();
    if (n < 1e-12) return Quat::identity();
    q = q * (1.0 / n);
    if (q.w < 0.0) q = q * -1.0;
    return q;
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Static-partition parallel loop. Work item i is always processed by the same
// slot for a given (n, threads), so per-slot buffers can be reduced in slot
// order for deterministic results.

inline int default_thread_count() {
  unsigned hc = std::thread::hardware_concurrency();
  if (hc == 0) hc = 1;
  return static_cast<int>(hc > 16 ? 16 : hc);
}

template <class Body>
void parallel_for(std::size_t n, Body&& body, int threads = 0) {
  if (threads <= 0) threads = default_thread_count();
  if (n == 0) return;
  const std::size_t t = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  if (t <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(t);
  for (std::size_t k = 0; k < t; ++k) {
    const std::size_t lo = n * k / t;
    const std::size_t hi = n * (k + 1) / t;
    pool.emplace_back([&body, lo, hi] {
      for (std::size_t i = lo; i < hi; ++i) body(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace egs
