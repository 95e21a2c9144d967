#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "coldloop/constants.hpp"

namespace coldloop {

/// One mechanical mode. Frequencies are angular (rad/s) everywhere inside the
/// library; external files and CLI flags use Hz.
struct MechanicalMode {
  double omega_m = 0.0;   // resonance, rad/s
  double gamma_m = 0.0;   // energy damping rate, rad/s
  double q_factor = 0.0;  // omega_m / gamma_m
  double m_eff = 0.0;     // effective mass, kg (reporting only)

  static MechanicalMode from_frequency_q(double f_hz, double q, double m_eff = 0.0) {
    MechanicalMode m;
    m.omega_m = two_pi * f_hz;
    m.q_factor = q;
    m.gamma_m = m.omega_m / q;
    m.m_eff = m_eff;
    return m;
  }
  static MechanicalMode from_omega_gamma(double omega, double gamma, double m_eff = 0.0) {
    MechanicalMode m;
    m.omega_m = omega;
    m.gamma_m = gamma;
    m.q_factor = omega / gamma;
    m.m_eff = m_eff;
    return m;
  }
};

struct OpticalCavity {
  double kappa = 0.0;     // total linewidth (FWHM), rad/s
  double kappa_e = 0.0;   // external coupling rate, rad/s
  double detuning = 0.0;  // laser - cavity detuning, rad/s
};

struct CouplingBudget {
  double g0 = 0.0;       // vacuum optomechanical coupling, rad/s
  double n_c = 0.0;      // intracavity photon number
  double eta_det = 1.0;  // detection efficiency in [0, 1]
};

struct NoiseInputs {
  double n_th = 0.0;    // thermal bath occupation
  double n_ba = 0.0;    // back-action occupation
  double n_bath = 0.0;  // n_th + n_ba
  double t_eff = 0.0;   // effective bath temperature, K

  static NoiseInputs from_occupations(double n_th, double n_ba, double omega_m) {
    NoiseInputs n;
    n.n_th = n_th;
    n.n_ba = n_ba;
    n.n_bath = n_th + n_ba;
    n.t_eff = n.n_bath * hbar * omega_m / k_boltzmann;
    return n;
  }
};

/// Homodyne readout channel. s_imp is the imprecision PSD in the spectral
/// convention used throughout: symmetrized density evaluated at positive
/// frequencies, displacement in zero-point units, so the phonon integral of
/// |chi|^2 S_F + ... needs no extra factors. shot_level is the reference the
/// trace was normalized to (== 1 after shot normalization).
struct MeasurementChannel {
  double s_imp = 0.0;
  double shot_level = 1.0;
};

/// Analog second-order section b(s)/a(s), coefficients for
/// b2 s^2 + b1 s + b0 over a2 s^2 + a1 s + a0 with s in rad/s.
struct BiquadSection {
  double b0 = 0.0, b1 = 0.0, b2 = 0.0;
  double a0 = 1.0, a1 = 0.0, a2 = 0.0;
};

struct FeedbackFilter {
  std::vector<BiquadSection> sections;  // cascade, unity overall scale convention
  double g_fb = 0.0;                    // loop gain (sign carries convention)
  double tau_fb = 0.0;                  // loop delay, s
  double epsilon_fb = 0.0;              // parasitic in-loop detection coefficient
};

struct WeightedMode {
  MechanicalMode mode;
  double weight = 0.0;  // round-trip (actuation x readout) coupling relative to target
};

struct LoopConfig {
  MechanicalMode mode;
  std::vector<WeightedMode> higher_modes;
  OpticalCavity cavity;
  CouplingBudget coupling;
  NoiseInputs noise;
  MeasurementChannel channel;
  FeedbackFilter filter;
};

/// PSD on a frequency grid. Values follow the convention of the analysis:
/// symmetrized spectral density evaluated at positive frequencies (the raw
/// Welch estimator is one-sided; as_symmetrized() converts). Units are
/// whatever the pipeline put in: shot units after normalization, zero-point
/// displacement quanta after calibration.
struct SpectrumTrace {
  std::vector<double> freqs;  // Hz, strictly increasing
  std::vector<double> psd;
  std::size_t n_avg = 0;  // averaged segments
  double rbw = 0.0;       // resolution bandwidth, Hz
};

enum class TraceKind { displacement, measurement, control };

struct TimeTrace {
  double fs = 0.0;  // sample rate, Hz
  std::vector<double> samples;
  TraceKind label = TraceKind::displacement;
};

// ---- validation -----------------------------------------------------------

inline void validate(const MechanicalMode& m) {
  if (!(m.omega_m > 0.0)) throw std::invalid_argument("mode: omega_m must be > 0");
  if (!(m.gamma_m > 0.0)) throw std::invalid_argument("mode: gamma_m must be > 0");
  if (std::abs(m.q_factor * m.gamma_m - m.omega_m) > 1e-9 * m.omega_m)
    throw std::invalid_argument("mode: q_factor * gamma_m != omega_m");
  if (!(m.gamma_m < 2.0 * m.omega_m))
    throw std::invalid_argument("mode: overdamped (gamma_m >= 2 omega_m) not supported");
}

inline void validate(const OpticalCavity& c) {
  if (!(c.kappa_e > 0.0 && c.kappa_e <= c.kappa))
    throw std::invalid_argument("cavity: require 0 < kappa_e <= kappa");
}

inline void validate(const CouplingBudget& c) {
  if (!(c.g0 > 0.0)) throw std::invalid_argument("coupling: g0 must be > 0");
  if (c.n_c < 0.0) throw std::invalid_argument("coupling: n_c must be >= 0");
  if (c.eta_det < 0.0 || c.eta_det > 1.0)
    throw std::invalid_argument("coupling: eta_det must be in [0, 1]");
}

inline void validate(const NoiseInputs& n) {
  if (n.n_th < 0.0 || n.n_ba < 0.0 || n.n_bath < 0.0 || n.t_eff < 0.0)
    throw std::invalid_argument("noise: occupations and t_eff must be >= 0");
  if (std::abs(n.n_bath - (n.n_th + n.n_ba)) > 1e-9 * (n.n_bath + 1.0))
    throw std::invalid_argument("noise: n_bath != n_th + n_ba");
}

inline void validate(const MeasurementChannel& c) {
  if (!(c.s_imp > 0.0)) throw std::invalid_argument("measurement: s_imp must be > 0");
}

/// Stable iff all poles of a(s) are strictly in the left half plane.
/// Routh-Hurwitz for degree <= 2: all coefficients share one strict sign.
inline bool section_is_stable(const BiquadSection& s) {
  if (s.a2 != 0.0) {
    return (s.a2 > 0 && s.a1 > 0 && s.a0 > 0) || (s.a2 < 0 && s.a1 < 0 && s.a0 < 0);
  }
  if (s.a1 != 0.0) {
    return (s.a1 > 0 && s.a0 > 0) || (s.a1 < 0 && s.a0 < 0);
  }
  return s.a0 != 0.0;  // static gain
}

inline void validate(const FeedbackFilter& f) {
  for (std::size_t i = 0; i < f.sections.size(); ++i) {
    if (!section_is_stable(f.sections[i]))
      throw std::invalid_argument("filter: section " + std::to_string(i) + " is unstable");
  }
  if (f.tau_fb < 0.0) throw std::invalid_argument("filter: tau_fb must be >= 0");
}

inline void validate(const SpectrumTrace& t) {
  if (t.freqs.size() != t.psd.size())
    throw std::invalid_argument("spectrum: freqs and psd length mismatch");
  for (std::size_t i = 0; i < t.freqs.size(); ++i) {
    if (i > 0 && !(t.freqs[i] > t.freqs[i - 1]))
      throw std::invalid_argument("spectrum: freqs must be strictly increasing");
    if (t.psd[i] < 0.0) throw std::invalid_argument("spectrum: psd entries must be >= 0");
  }
}

inline void validate(const LoopConfig& cfg) {
  validate(cfg.mode);
  validate(cfg.cavity);
  validate(cfg.coupling);
  validate(cfg.noise);
  validate(cfg.channel);
  validate(cfg.filter);
  for (const auto& [mode, weight] : cfg.higher_modes) {
    validate(mode);
    if (!(mode.omega_m > cfg.mode.omega_m))
      throw std::invalid_argument("higher_mode: frequency must exceed the target mode");
    if (weight < 0.0) throw std::invalid_argument("higher_mode: weight must be >= 0");
  }
}

}  // namespace coldloop
