#pragma once

#include <cmath>
#include <ostream>
#include <type_traits>

namespace ugeforge {

// First-order forward-mode number: value + eps * tangent with eps^2 = 0.
//
// Running a hand-written reverse pass in Dual arithmetic gives
// forward-over-reverse second derivatives: seed the parameters' tangent with
// a direction v and the tangent of the input gradient is d/de grad_x L(theta
// + e*v, x), i.e. grad_x <v, grad_theta L>. This is the mixed Hessian-vector
// product the gradient-matching objective needs.
template <class T>
struct Dual {
  T v{};
  T d{};

  constexpr Dual() = default;
  constexpr Dual(T value) : v(value), d(0) {}  // NOLINT(google-explicit-constructor)
  constexpr Dual(T value, T tangent) : v(value), d(tangent) {}

  Dual& operator+=(const Dual& o) {
    v += o.v;
    d += o.d;
    return *this;
  }
  Dual& operator-=(const Dual& o) {
    v -= o.v;
    d -= o.d;
    return *this;
  }
  Dual& operator*=(const Dual& o) {
    d = d * o.v + v * o.d;
    v *= o.v;
    return *this;
  }
  Dual& operator/=(const Dual& o) {
    const T inv = T(1) / o.v;
    d = (d - v * inv * o.d) * inv;
    v *= inv;
    return *this;
  }
};

template <class T> Dual<T> operator+(Dual<T> a, const Dual<T>& b) { return a += b; }
template <class T> Dual<T> operator-(Dual<T> a, const Dual<T>& b) { return a -= b; }
template <class T> Dual<T> operator*(Dual<T> a, const Dual<T>& b) { return a *= b; }
template <class T> Dual<T> operator/(Dual<T> a, const Dual<T>& b) { return a /= b; }
template <class T> Dual<T> operator-(const Dual<T>& a) { return {-a.v, -a.d}; }

template <class T> Dual<T> operator+(Dual<T> a, T b) { a.v += b; return a; }
template <class T> Dual<T> operator+(T b, Dual<T> a) { a.v += b; return a; }
template <class T> Dual<T> operator-(Dual<T> a, T b) { a.v -= b; return a; }
template <class T> Dual<T> operator-(T b, const Dual<T>& a) { return {b - a.v, -a.d}; }
template <class T> Dual<T> operator*(const Dual<T>& a, T b) { return {a.v * b, a.d * b}; }
template <class T> Dual<T> operator*(T b, const Dual<T>& a) { return {a.v * b, a.d * b}; }
template <class T> Dual<T> operator/(const Dual<T>& a, T b) { return {a.v / b, a.d / b}; }
template <class T> Dual<T> operator/(T b, const Dual<T>& a) { return Dual<T>(b) / a; }

// Ordering looks at the value part only; this is what makes piecewise
// functions (ReLU, max-subtraction in softmax) select the same branch as the
// primal computation.
template <class T> bool operator<(const Dual<T>& a, const Dual<T>& b) { return a.v < b.v; }
template <class T> bool operator>(const Dual<T>& a, const Dual<T>& b) { return a.v > b.v; }
template <class T> bool operator<=(const Dual<T>& a, const Dual<T>& b) { return a.v <= b.v; }
template <class T> bool operator>=(const Dual<T>& a, const Dual<T>& b) { return a.v >= b.v; }
template <class T> bool operator<(const Dual<T>& a, T b) { return a.v < b; }
template <class T> bool operator>(const Dual<T>& a, T b) { return a.v > b; }
template <class T> bool operator==(const Dual<T>& a, const Dual<T>& b) { return a.v == b.v && a.d == b.d; }

template <class T> Dual<T> exp(const Dual<T>& a) {
  const T e = std::exp(a.v);
  return {e, e * a.d};
}
template <class T> Dual<T> log(const Dual<T>& a) { return {std::log(a.v), a.d / a.v}; }
template <class T> Dual<T> sqrt(const Dual<T>& a) {
  const T s = std::sqrt(a.v);
  return {s, a.d / (T(2) * s)};
}
template <class T> Dual<T> tanh(const Dual<T>& a) {
  const T t = std::tanh(a.v);
  return {t, (T(1) - t * t) * a.d};
}
template <class T> Dual<T> abs(const Dual<T>& a) { return a.v < T(0) ? -a : a; }
template <class T> bool isfinite(const Dual<T>& a) { return std::isfinite(a.v) && std::isfinite(a.d); }

template <class T> std::ostream& operator<<(std::ostream& os, const Dual<T>& a) {
  return os << a.v << "+" << a.d << "e";
}

template <class T> struct is_dual : std::false_type {};
template <class T> struct is_dual<Dual<T>> : std::true_type {};

// Primal value of a scalar, for branch decisions and logging.
inline double value_of(double x) { return x; }
inline double value_of(float x) { return x; }
template <class T> double value_of(const Dual<T>& x) { return value_of(x.v); }

}  // namespace ugeforge
