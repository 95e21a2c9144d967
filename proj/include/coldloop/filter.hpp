#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include "coldloop/types.hpp"

namespace coldloop {

// Frequency responses follow the convention of the loop equations: Fourier
// kernel e^{+i omega t}, so a causal Laplace-domain filter H(s) is evaluated
// at s = -i*omega and a delay tau contributes e^{+i omega tau}. Under this
// convention Im H(Omega) > 0 means the feedback force g*H*y damps the mode.

inline std::complex<double> section_response(const BiquadSection& sec, double omega) {
  const std::complex<double> s(0.0, -omega);
  const std::complex<double> s2 = s * s;
  return (sec.b2 * s2 + sec.b1 * s + sec.b0) / (sec.a2 * s2 + sec.a1 * s + sec.a0);
}

/// Cascade response without the delay factor: H~(omega).
inline std::complex<double> filter_shape_response(const FeedbackFilter& f, double omega) {
  std::complex<double> h(1.0, 0.0);
  for (const auto& sec : f.sections) h *= section_response(sec, omega);
  return h;
}

/// Full feedback-path response H_fb(omega) = H~(omega) e^{i omega tau_fb}.
/// The loop gain g_fb is kept out of H_fb, matching the model formulas
/// where it multiplies explicitly.
inline std::complex<double> filter_response(const FeedbackFilter& f, double omega) {
  return filter_shape_response(f, omega) * std::polar(1.0, omega * f.tau_fb);
}

// ---- standard analog prototypes -------------------------------------------

/// Resonant low-pass, H(i w0) = -iQ in Laplace terms, i.e. +90 deg at the
/// center under the loop convention; unit magnitude at the center.
inline BiquadSection resonant_lowpass(double omega0, double q) {
  BiquadSection s;
  s.b0 = omega0 * omega0 / q;
  s.a0 = omega0 * omega0;
  s.a1 = omega0 / q;
  s.a2 = 1.0;
  return s;
}

/// Unity-gain bandpass centered at omega0; zero phase at the center.
inline BiquadSection bandpass(double omega0, double q) {
  BiquadSection s;
  s.b1 = omega0 / q;
  s.a0 = omega0 * omega0;
  s.a1 = omega0 / q;
  s.a2 = 1.0;
  return s;
}

/// First-order all-pass pair packed as one section:
/// (wa - s)(wb - s) / ((wa + s)(wb + s)). |H| = 1 everywhere; adds phase
/// 2 atan(w/wa) + 2 atan(w/wb) under the loop convention.
inline BiquadSection allpass_pair(double omega_a, double omega_b) {
  BiquadSection s;
  s.b0 = omega_a * omega_b;
  s.b1 = -(omega_a + omega_b);
  s.b2 = 1.0;
  s.a0 = omega_a * omega_b;
  s.a1 = omega_a + omega_b;
  s.a2 = 1.0;
  return s;
}

inline BiquadSection unity_section() {
  BiquadSection s;
  s.b0 = 1.0;
  s.a0 = 1.0;
  return s;
}

// ---- discretization --------------------------------------------------------

/// Digital biquad, direct form II transposed.
struct DigitalBiquad {
  double b0 = 1.0, b1 = 0.0, b2 = 0.0;
  double a1 = 0.0, a2 = 0.0;
  double s1 = 0.0, s2 = 0.0;

  double step(double x) {
    const double y = b0 * x + s1;
    s1 = b1 * x - a1 * y + s2;
    s2 = b2 * x - a2 * y;
    return y;
  }
  void reset() { s1 = s2 = 0.0; }
};

/// Bilinear transform of an analog section at sample rate fs. When
/// prewarp_omega > 0 the frequency axis is warped so the response is exact
/// at that frequency.
inline DigitalBiquad bilinear(const BiquadSection& sec, double fs, double prewarp_omega = 0.0) {
  double k = 2.0 * fs;
  if (prewarp_omega > 0.0) {
    const double half = prewarp_omega / (2.0 * fs);
    k = prewarp_omega / std::tan(half);
  }
  const double k2 = k * k;
  const double b0 = sec.b2 * k2 + sec.b1 * k + sec.b0;
  const double b1 = 2.0 * (sec.b0 - sec.b2 * k2);
  const double b2 = sec.b2 * k2 - sec.b1 * k + sec.b0;
  const double a0 = sec.a2 * k2 + sec.a1 * k + sec.a0;
  const double a1 = 2.0 * (sec.a0 - sec.a2 * k2);
  const double a2 = sec.a2 * k2 - sec.a1 * k + sec.a0;
  DigitalBiquad d;
  d.b0 = b0 / a0;
  d.b1 = b1 / a0;
  d.b2 = b2 / a0;
  d.a1 = a1 / a0;
  d.a2 = a2 / a0;
  return d;
}

struct DigitalCascade {
  std::vector<DigitalBiquad> stages;

  double step(double x) {
    for (auto& st : stages) x = st.step(x);
    return x;
  }
  void reset() {
    for (auto& st : stages) st.reset();
  }
};

inline DigitalCascade discretize(const FeedbackFilter& f, double fs, double prewarp_omega = 0.0) {
  DigitalCascade c;
  c.stages.reserve(f.sections.size());
  for (const auto& sec : f.sections) c.stages.push_back(bilinear(sec, fs, prewarp_omega));
  return c;
}

}  // namespace coldloop
