#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "coldloop/least_squares.hpp"
#include "coldloop/model.hpp"
#include "coldloop/types.hpp"

namespace coldloop {

// Out-of-loop heterodyne spectra: two motional sidebands around the local
// oscillator shift. The sideband model is evaluated per window, split at the
// LO frequency: for omega < Omega_het the left (Stokes) term
// k_l |chi_eff(Omega_het - omega)|^2 + n_l, above it the right (anti-Stokes)
// term with k_r, n_r. Written as a single sum over both windows the two
// Lorentzians coincide (|chi_eff| is even), so the split is what makes the
// asymmetry identifiable; floors n_j are local to each window, as in
// experimental practice.

struct HeterodyneFit {
  double omega_het = 0.0;   // LO shift, rad/s
  double k_l = 0.0, k_r = 0.0;
  double n_l = 1.0, n_r = 1.0;
  double omega_eff = 0.0;   // effective resonance
  double gamma_eff = 0.0;   // effective width
  Eigen::MatrixXd covariance;  // [k_l, k_r, n_l, n_r, omega_eff, gamma_eff, omega_het]
  FitStatus status = FitStatus::not_run;
  double residual_rms = 0.0;

  /// Integrated sideband power (Lorentzian area): k_j / (4 gamma_eff).
  double area_l() const { return k_l / (4.0 * gamma_eff); }
  double area_r() const { return k_r / (4.0 * gamma_eff); }
};

inline void validate(const HeterodyneFit& h) {
  if (h.k_l < 0.0 || h.k_r < 0.0)
    throw std::invalid_argument("heterodyne: sideband magnitudes must be >= 0");
  if (h.n_l < 1.0 - 1e-9 || h.n_r < 1.0 - 1e-9)
    throw std::invalid_argument("heterodyne: floors cannot be below shot (>= 1)");
  if (!(h.gamma_eff > 0.0)) throw std::invalid_argument("heterodyne: gamma_eff must be > 0");
}

inline std::complex<double> effective_susceptibility(double omega_eff, double gamma_eff,
                                                     double u) {
  return omega_eff / std::complex<double>(omega_eff * omega_eff - u * u, -gamma_eff * u);
}

struct HeterodyneModel {
  double omega_het = 0.0;
  double omega_eff = 0.0;
  double gamma_eff = 0.0;
  double n_l = 1.0, n_r = 1.0;  // local floors, shot units
  double scale = 1.0;           // one-phonon integrated sideband power
};

inline double heterodyne_model_psd(const HeterodyneModel& m, double k_l, double k_r,
                                   double omega) {
  if (omega < m.omega_het) {
    const double u = m.omega_het - omega;
    return k_l * std::norm(effective_susceptibility(m.omega_eff, m.gamma_eff, u)) + m.n_l;
  }
  const double u = omega - m.omega_het;
  return k_r * std::norm(effective_susceptibility(m.omega_eff, m.gamma_eff, u)) + m.n_r;
}

/// Synthesize the two-sideband spectrum for occupation n_bar. Sideband areas
/// follow the quantum bookkeeping: Stokes (lower frequency) carries
/// scale*(n_bar + 1), anti-Stokes carries scale*n_bar, so
/// k_r / k_l = n_bar / (n_bar + 1).
inline SpectrumTrace synth_heterodyne_psd(double n_bar, const HeterodyneModel& m,
                                          const std::vector<double>& grid_hz) {
  if (n_bar < 0.0) throw std::invalid_argument("synth_heterodyne_psd: n_bar must be >= 0");
  if (!(m.omega_eff > 0.0 && m.gamma_eff > 0.0 && m.omega_het > 0.0))
    throw std::invalid_argument("synth_heterodyne_psd: bad model parameters");
  const double k_l = 4.0 * m.gamma_eff * m.scale * (n_bar + 1.0);
  const double k_r = 4.0 * m.gamma_eff * m.scale * n_bar;
  SpectrumTrace out;
  out.freqs = grid_hz;
  out.psd.reserve(grid_hz.size());
  for (double f : grid_hz) out.psd.push_back(heterodyne_model_psd(m, k_l, k_r, two_pi * f));
  validate(out);
  return out;
}

namespace detail {

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
  return v[v.size() / 2];
}

}  // namespace detail

/// Least-squares fit of the two-sideband model. Throws std::domain_error
/// when a sideband is not visible >= 3 dB above its local floor, or when the
/// fitted width approaches the sideband separation (overlap: fitting is no
/// longer possible, as at the highest gains).
inline HeterodyneFit fit_sidebands(const SpectrumTrace& spec, double omega_het_guess,
                                   const LsqOptions& lsq_opt = {}) {
  validate(spec);
  const std::size_t n = spec.freqs.size();
  if (n < 32) throw std::invalid_argument("fit_sidebands: too few bins");
  const double f_het = omega_het_guess / two_pi;
  if (f_het <= spec.freqs.front() || f_het >= spec.freqs.back())
    throw std::invalid_argument("fit_sidebands: LO frequency outside the spectrum");

  const auto split = static_cast<std::size_t>(
      std::lower_bound(spec.freqs.begin(), spec.freqs.end(), f_het) - spec.freqs.begin());

  auto window_peak = [&](std::size_t lo, std::size_t hi, double& pk_f, double& pk_v,
                         double& floor) {
    std::size_t ipk = lo;
    for (std::size_t i = lo; i < hi; ++i)
      if (spec.psd[i] > spec.psd[ipk]) ipk = i;
    pk_f = spec.freqs[ipk];
    pk_v = spec.psd[ipk];
    std::vector<double> edges;
    const std::size_t m = (hi - lo) / 8 + 1;
    for (std::size_t i = lo; i < std::min(lo + m, hi); ++i) edges.push_back(spec.psd[i]);
    for (std::size_t i = hi - std::min(m, hi - lo); i < hi; ++i) edges.push_back(spec.psd[i]);
    floor = detail::median_of(std::move(edges));
  };

  double fl, vl, floor_l, fr, vr, floor_r;
  window_peak(0, split, fl, vl, floor_l);
  window_peak(split, n, fr, vr, floor_r);
  // The Stokes sideband carries n_bar + 1 quanta and must be visible; the
  // anti-Stokes one vanishes at the ground state and may sit in the floor.
  if (!(vl >= 2.0 * floor_l))
    throw std::domain_error("fit_sidebands: sideband not found (< 3 dB above floor)");
  const bool right_visible = vr >= 2.0 * floor_r;

  const double omega_l = two_pi * fl, omega_r = two_pi * fr;
  double omega_eff0, omega_het0;
  if (right_visible) {
    omega_eff0 = 0.5 * (omega_r - omega_l);
    omega_het0 = 0.5 * (omega_r + omega_l);
  } else {
    omega_het0 = omega_het_guess;
    omega_eff0 = std::abs(omega_het_guess - omega_l);
  }
  if (!(omega_eff0 > 0.0)) omega_eff0 = 0.05 * omega_het0;

  // -3 dB width of the stronger sideband
  auto width_at = [&](std::size_t lo, std::size_t hi, double peak, double floor) {
    std::size_t ipk = lo;
    for (std::size_t i = lo; i < hi; ++i)
      if (spec.psd[i] > spec.psd[ipk]) ipk = i;
    const double half = floor + 0.5 * (peak - floor);
    std::size_t a = ipk, b = ipk;
    while (a > lo && spec.psd[a] > half) --a;
    while (b + 1 < hi && spec.psd[b] > half) ++b;
    return two_pi * (spec.freqs[b] - spec.freqs[a]);
  };
  double gamma0 = (!right_visible || vl >= vr) ? width_at(0, split, vl, floor_l)
                                               : width_at(split, n, vr, floor_r);
  if (!(gamma0 > 0.0)) gamma0 = two_pi * (spec.freqs[1] - spec.freqs[0]);

  const double sep = 2.0 * omega_eff0;
  if (gamma0 > 0.5 * sep)
    throw std::domain_error(
        "fit_sidebands: overlapping sidebands (width exceeds half the separation)");

  const double k_l0 = std::max((vl - floor_l) * gamma0 * gamma0, 1e-300);
  const double k_r0 = right_visible ? std::max((vr - floor_r) * gamma0 * gamma0, 0.0) : 0.0;

  const double w_stat = std::sqrt(static_cast<double>(std::max<std::size_t>(spec.n_avg, 1)));

  // params: [k_l, k_r, n_l, n_r, omega_eff, ln gamma_eff, omega_het]
  Eigen::VectorXd p0(7), lo_b(7), hi_b(7);
  p0 << k_l0, k_r0, std::max(floor_l, 1e-12), std::max(floor_r, 1e-12), omega_eff0,
      std::log(gamma0), omega_het0;
  lo_b << 0.0, 0.0, 0.0, 0.0, 0.2 * omega_eff0, std::log(gamma0) - 8.0, 0.9 * omega_het0;
  hi_b << 1e30, 1e30, 1e30, 1e30, 3.0 * omega_eff0, std::log(omega_eff0),  // cap width at sep/2
      1.1 * omega_het0;

  ResidualFn residuals = [&](const Eigen::VectorXd& p) {
    HeterodyneModel m;
    m.omega_het = p[6];
    m.omega_eff = p[4];
    m.gamma_eff = std::exp(p[5]);
    m.n_l = p[2];
    m.n_r = p[3];
    Eigen::VectorXd r(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      const double mv = heterodyne_model_psd(m, p[0], p[1], two_pi * spec.freqs[i]);
      r[static_cast<Eigen::Index>(i)] = w_stat * (mv - spec.psd[i]) / spec.psd[i];
    }
    return r;
  };

  const LsqResult lsq = levenberg_marquardt(residuals, p0, lo_b, hi_b, lsq_opt);

  HeterodyneFit fit;
  fit.k_l = lsq.params[0];
  fit.k_r = lsq.params[1];
  fit.n_l = lsq.params[2];
  fit.n_r = lsq.params[3];
  fit.omega_eff = lsq.params[4];
  fit.gamma_eff = std::exp(lsq.params[5]);
  fit.omega_het = lsq.params[6];
  fit.status = lsq.status;
  fit.residual_rms = lsq.residual_rms;

  if (fit.gamma_eff > 0.5 * (2.0 * fit.omega_eff))
    throw std::domain_error(
        "fit_sidebands: overlapping sidebands (fitted width exceeds half the separation)");

  Eigen::VectorXd scale(7);
  scale << 1.0, 1.0, 1.0, 1.0, 1.0, fit.gamma_eff, 1.0;
  fit.covariance = Eigen::MatrixXd::Zero(7, 7);
  for (int a = 0; a < 7; ++a)
    for (int b = 0; b < 7; ++b)
      fit.covariance(a, b) = lsq.covariance(a, b) * scale[a] * scale[b];
  return fit;
}

/// n_bar = |k_l + k_r| / (2 |k_l - k_r|) - 1/2: the sideband difference is
/// one phonon, the sum is 2 n_bar + 1.
inline double phonon_from_sideband_fit(const HeterodyneFit& fit) {
  const double diff = std::abs(fit.k_l - fit.k_r);
  const double sum = std::abs(fit.k_l + fit.k_r);
  if (diff <= 1e-12 * sum)
    throw std::domain_error(
        "phonon_from_sideband_fit: k_l == k_r, asymmetry saturated (n_bar -> inf)");
  return 0.5 * sum / diff - 0.5;
}

struct BandIntegration {
  double n_bar = 0.0;
  double s_l = 0.0, s_r = 0.0;  // floor-subtracted band powers, per sideband
};

/// Direct integration of the measured heterodyne spectrum over a band
/// [f_lo, f_hi] of offsets |f - f_het| from the LO, with the fitted floors
/// subtracted. Errors out when a floor-subtracted power goes negative beyond
/// the averaged-periodogram statistical tolerance.
inline BandIntegration phonon_from_band_integration(const SpectrumTrace& spec, double f_lo,
                                                    double f_hi, double omega_het, double n_l,
                                                    double n_r) {
  validate(spec);
  if (!(f_hi > f_lo) || f_lo < 0.0)
    throw std::invalid_argument("phonon_from_band_integration: bad band");
  const double f_het = omega_het / two_pi;
  double s_l = 0.0, s_r = 0.0, var_l = 0.0, var_r = 0.0;
  const double n_avg = static_cast<double>(std::max<std::size_t>(spec.n_avg, 1));
  for (std::size_t i = 0; i + 1 < spec.freqs.size(); ++i) {
    const double f = 0.5 * (spec.freqs[i] + spec.freqs[i + 1]);
    const double df = spec.freqs[i + 1] - spec.freqs[i];
    const double off = f_het - f;  // positive on the left sideband
    const double p = 0.5 * (spec.psd[i] + spec.psd[i + 1]);
    if (off >= f_lo && off <= f_hi) {
      s_l += (p - n_l) * df;
      var_l += p * p / n_avg * df * df;
    } else if (-off >= f_lo && -off <= f_hi) {
      s_r += (p - n_r) * df;
      var_r += p * p / n_avg * df * df;
    }
  }
  const double tol_l = (spec.n_avg > 0) ? 3.0 * std::sqrt(var_l) : 0.0;
  const double tol_r = (spec.n_avg > 0) ? 3.0 * std::sqrt(var_r) : 0.0;
  if (s_l < -tol_l || s_r < -tol_r)
    throw std::domain_error(
        "phonon_from_band_integration: negative band power after floor subtraction; "
        "floors inconsistent with the data");
  const double diff = std::abs(s_l - s_r);
  const double sum = std::abs(s_l + s_r);
  BandIntegration out;
  out.s_l = s_l;
  out.s_r = s_r;
  if (diff <= 1e-12 * sum)
    throw std::domain_error("phonon_from_band_integration: equal band powers (saturated)");
  out.n_bar = 0.5 * sum / diff - 0.5;
  return out;
}

/// Fraction of a Lorentzian line of FWHM gamma captured by a band extending
/// b_half to each side of the center: (2/pi) atan(2 b_half / gamma).
inline double captured_band_fraction(double b_half, double gamma_eff) {
  return (2.0 / pi) * std::atan(2.0 * b_half / gamma_eff);
}

// ---- laser-noise corrections -------------------------------------------------

struct LaserNoise {
  double c_amp = 0.0;       // classical amplitude noise / shot
  double c_theta = 0.0;     // phase-noise PSD, rad^2/Hz
  double c_y = 0.0;         // shot-normalized phase-quadrature noise
  double photon_flux = 0.0; // 1/s
};

/// C_Y = 2 n C_theta with n the input photon flux.
inline double phase_quadrature_noise(double c_theta, double photon_flux) {
  if (c_theta < 0.0 || photon_flux < 0.0)
    throw std::invalid_argument("phase_quadrature_noise: arguments must be >= 0");
  return 2.0 * photon_flux * c_theta;
}

/// Classical amplitude noise relative to shot, from three measured spectra:
/// variable coupler at 100:0 (full), at 50:50 (balanced: shot + electronic),
/// and dark (electronic only), averaged over [f_lo, f_hi].
inline double estimate_amplitude_noise(const SpectrumTrace& full,
                                       const SpectrumTrace& balanced,
                                       const SpectrumTrace& dark, double f_lo, double f_hi) {
  if (full.freqs.size() != balanced.freqs.size() || full.freqs.size() != dark.freqs.size())
    throw std::invalid_argument("estimate_amplitude_noise: grid mismatch");
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < full.freqs.size(); ++i) {
    if (full.freqs[i] < f_lo || full.freqs[i] > f_hi) continue;
    if (std::abs(full.freqs[i] - balanced.freqs[i]) > 1e-9 * std::max(1.0, full.freqs[i]))
      throw std::invalid_argument("estimate_amplitude_noise: grids differ");
    const double shot = balanced.psd[i] - dark.psd[i];
    if (!(shot > 0.0))
      throw std::invalid_argument("estimate_amplitude_noise: nonpositive shot reference");
    acc += ((full.psd[i] - dark.psd[i]) - shot) / shot;
    ++count;
  }
  if (count == 0) throw std::invalid_argument("estimate_amplitude_noise: empty band");
  return acc / static_cast<double>(count);
}

/// Additive sideband correction from classical laser phase noise:
/// 4 (delta_omega / kappa)^2 C_Y, with delta_omega the probe detuning from
/// cavity resonance. This is the dimensionally consistent reading of the
/// correction; the reference probe detuning shipped with the configs
/// reproduces the quoted ~0.05 at C_Y = 430. Added to both sidebands, it
/// reduces the extracted asymmetry.
inline double phase_noise_correction(const LaserNoise& noise, const OpticalCavity& cavity,
                                     double delta_omega) {
  const double c_y =
      (noise.c_y > 0.0) ? noise.c_y : phase_quadrature_noise(noise.c_theta, noise.photon_flux);
  const double x = delta_omega / cavity.kappa;
  return 4.0 * x * x * c_y;
}

/// Extract n_bar after shifting both sideband areas by `offset` (one-phonon
/// units). A positive offset, such as uncorrected classical phase noise,
/// inflates the result by exactly the offset; pass the negated correction to
/// undo it.
inline double phonon_with_sideband_offset(const HeterodyneFit& fit, double offset) {
  HeterodyneFit shifted = fit;
  shifted.k_l += 4.0 * fit.gamma_eff * offset;
  shifted.k_r += 4.0 * fit.gamma_eff * offset;
  return phonon_from_sideband_fit(shifted);
}

}  // namespace coldloop
