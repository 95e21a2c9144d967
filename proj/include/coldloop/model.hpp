#pragma once

#include <cmath>
#include <complex>
#include <optional>
#include <stdexcept>
#include <vector>

#include "coldloop/constants.hpp"
#include "coldloop/filter.hpp"
#include "coldloop/types.hpp"

namespace coldloop {

// Analytic frequency-domain model of the measurement-feedback loop.
//
// Conventions, used consistently by every function here and by the
// time-domain simulator:
//  * displacement in zero-point units, so an oscillator in a thermal state
//    with occupation n has <x^2> = 2n + 1;
//  * spectra are symmetrized densities evaluated at positive frequencies,
//    with variance = 2 * integral_0^inf S(omega) d omega / 2pi. The raw
//    one-sided Welch estimate is twice these values (see as_symmetrized);
//  * the flat thermal force density is S_F = 2 gamma_m (2 n + 1), which
//    makes the phonon integral below return exactly n for the open loop.

/// chi_M(omega) = Omega_M / ((Omega_M^2 - omega^2) - i Gamma_M omega).
inline std::complex<double> mech_susceptibility(const MechanicalMode& m, double omega) {
  return m.omega_m /
         std::complex<double>(m.omega_m * m.omega_m - omega * omega, -m.gamma_m * omega);
}

/// Flat effective-bath force density 2 Gamma_M (2 n_bath + 1).
inline double force_noise_psd(const NoiseInputs& n, const MechanicalMode& m) {
  if (n.n_bath < 0.0) throw std::invalid_argument("force_noise_psd: n_bath must be >= 0");
  return 2.0 * m.gamma_m * (2.0 * n.n_bath + 1.0);
}

/// High-temperature bath occupation k_B T / (hbar Omega_M).
inline double thermal_occupation(double temperature_k, double omega_m) {
  if (temperature_k < 0.0) throw std::invalid_argument("thermal_occupation: T must be >= 0");
  if (!(omega_m > 0.0)) throw std::invalid_argument("thermal_occupation: omega_m must be > 0");
  return k_boltzmann * temperature_k / (hbar * omega_m);
}

/// C_0 = 4 g0^2 / (kappa Gamma_M).
inline double single_photon_cooperativity(double g0, double kappa, double gamma_m) {
  if (!(g0 > 0.0 && kappa > 0.0 && gamma_m > 0.0))
    throw std::invalid_argument("single_photon_cooperativity: arguments must be > 0");
  return 4.0 * g0 * g0 / (kappa * gamma_m);
}

struct RateBudget {
  double n_th = 0.0;
  double n_ba = 0.0;
  double c0 = 0.0;
  double gamma_meas = 0.0;  // 4 eta n_c g0^2 / kappa
  double gamma_dec = 0.0;   // (n_th + n_c C0) Gamma_M
  double ratio = 0.0;       // gamma_dec / gamma_meas = (n_th/(n_c C0) + 1)/eta
  bool ratio_defined = false;
};

/// Measurement vs decoherence rates. The ratio approaches 1/eta_det in the
/// back-action-dominated limit; ground-state cooling wants it near 1.
inline RateBudget rate_budget(const LoopConfig& cfg) {
  if (!(cfg.coupling.eta_det > 0.0))
    throw std::invalid_argument("rate_budget: eta_det must be > 0");
  RateBudget b;
  b.c0 = single_photon_cooperativity(cfg.coupling.g0, cfg.cavity.kappa, cfg.mode.gamma_m);
  b.n_th = cfg.noise.n_th;
  b.n_ba = cfg.coupling.n_c * b.c0;
  b.gamma_meas =
      4.0 * cfg.coupling.eta_det * cfg.coupling.n_c * cfg.coupling.g0 * cfg.coupling.g0 /
      cfg.cavity.kappa;
  b.gamma_dec = (b.n_th + b.n_ba) * cfg.mode.gamma_m;
  if (cfg.coupling.n_c > 0.0) {
    b.ratio = (b.n_th / (cfg.coupling.n_c * b.c0) + 1.0) / cfg.coupling.eta_det;
    b.ratio_defined = true;
  }
  return b;
}

// ---- closed-loop spectra ----------------------------------------------------

/// Scalar parameters of the single-mode loop model; the filter supplies the
/// section cascade, delay and parasitic coupling.
struct LoopModelParams {
  MechanicalMode mode;
  double s_fn = 0.0;   // force noise density
  double s_imp = 0.0;  // imprecision density
  FeedbackFilter filter;
};

inline LoopModelParams loop_model_params(const LoopConfig& cfg) {
  LoopModelParams p;
  p.mode = cfg.mode;
  p.s_fn = force_noise_psd(cfg.noise, cfg.mode);
  p.s_imp = cfg.channel.s_imp;
  p.filter = cfg.filter;
  return p;
}

/// In-loop measured density
///   S_meas = (|chi|^2 S_FN + S_imp) / |1 - g (chi + eps) H~ e^{i omega tau}|^2.
inline double closed_loop_measured_psd(const LoopModelParams& p, double omega) {
  const std::complex<double> chi = mech_susceptibility(p.mode, omega);
  const std::complex<double> h = filter_response(p.filter, omega);
  const std::complex<double> den =
      1.0 - p.filter.g_fb * (chi + p.filter.epsilon_fb) * h;
  const double num = std::norm(chi) * p.s_fn + p.s_imp;
  return num / std::norm(den);
}

inline double closed_loop_measured_psd(const LoopConfig& cfg, double omega) {
  return closed_loop_measured_psd(loop_model_params(cfg), omega);
}

/// Actual displacement density inferred from the loop solution,
///   S_X = |chi|^2 (|1 - g eps H|^2 S_FN + |g H|^2 S_imp) / |1 - g (chi + eps) H|^2.
/// Solving the loop equations puts g_fb on the parasitic term in the
/// numerator as well, which keeps the denominator identical to the measured
/// spectrum's; at eps ~ 1e-6 the difference from dropping that g_fb is
/// far below any fit tolerance.
inline double inferred_displacement_psd(const LoopModelParams& p, double omega) {
  const std::complex<double> chi = mech_susceptibility(p.mode, omega);
  const std::complex<double> h = filter_response(p.filter, omega);
  const double g = p.filter.g_fb;
  const std::complex<double> den = 1.0 - g * (chi + p.filter.epsilon_fb) * h;
  const double num_th = std::norm(1.0 - g * p.filter.epsilon_fb * h) * p.s_fn;
  const double num_imp = std::norm(g * h) * p.s_imp;
  return std::norm(chi) * (num_th + num_imp) / std::norm(den);
}

inline double inferred_displacement_psd(const LoopConfig& cfg, double omega) {
  return inferred_displacement_psd(loop_model_params(cfg), omega);
}

/// Closed-loop effective linewidth Gamma~ = Gamma_M + g Im H(Omega_M) and
/// resonance Omega~ = Omega_M - g Re H(Omega_M) / 2, from linearizing the
/// loop denominator at the bare resonance.
struct EffectiveMode {
  double omega_eff = 0.0;
  double gamma_eff = 0.0;
};

inline EffectiveMode effective_mode(const MechanicalMode& m, const FeedbackFilter& f) {
  const std::complex<double> h = filter_response(f, m.omega_m);
  EffectiveMode e;
  e.gamma_eff = m.gamma_m + f.g_fb * h.imag();
  e.omega_eff = m.omega_m - 0.5 * f.g_fb * h.real();
  return e;
}

// ---- phonon integral --------------------------------------------------------

struct PhononEstimate {
  double n_bar = 0.0;
  double tail_fraction = 0.0;  // estimated truncated tail / accumulated integral
  bool truncated = false;      // tail_fraction > 1e-3
};

/// n_bar = 1/2 integral_0^inf (d omega / 2pi) (1 + omega^2/Omega_M^2) S_X - 1/2,
/// trapezoidal on the provided grid. The tail beyond the last bin is
/// estimated assuming the integrand falls off as 1/omega^2.
inline PhononEstimate phonon_from_psd(const SpectrumTrace& spec, double omega_m,
                                      bool require_coverage = true) {
  validate(spec);
  if (spec.freqs.size() < 3) throw std::invalid_argument("phonon_from_psd: grid too short");
  if (!(omega_m > 0.0)) throw std::invalid_argument("phonon_from_psd: omega_m must be > 0");
  const double lo = two_pi * spec.freqs.front();
  const double hi = two_pi * spec.freqs.back();
  if (require_coverage && (lo > omega_m / 10.0 || hi < 10.0 * omega_m))
    throw std::invalid_argument(
        "phonon_from_psd: grid must cover [Omega_M/10, 10 Omega_M] "
        "(pass require_coverage=false to accept truncation)");

  auto weight = [omega_m](double omega) {
    return 1.0 + omega * omega / (omega_m * omega_m);
  };
  double acc = 0.0;
  for (std::size_t i = 1; i < spec.freqs.size(); ++i) {
    const double w0 = two_pi * spec.freqs[i - 1];
    const double w1 = two_pi * spec.freqs[i];
    const double f0 = weight(w0) * spec.psd[i - 1];
    const double f1 = weight(w1) * spec.psd[i];
    acc += 0.5 * (f0 + f1) * (w1 - w0);
  }
  acc /= two_pi;

  // 1/omega^2 extrapolation of the upper tail: integral = f(hi) * hi.
  const double edge = weight(hi) * spec.psd.back();
  const double tail = edge * hi / two_pi;

  PhononEstimate est;
  est.n_bar = 0.5 * acc - 0.5;
  est.tail_fraction = (acc > 0.0) ? tail / acc : 0.0;
  est.truncated = est.tail_fraction > 1e-3;
  if (est.n_bar < -0.05)
    throw std::domain_error("phonon_from_psd: unphysical occupation (spectrum below zero-point)");
  return est;
}

// ---- static characterization ----------------------------------------------

/// One-port reflection R(Delta) = |1 - kappa_e / (kappa/2 - i Delta)|^2.
inline double cavity_reflection(const OpticalCavity& cav) {
  const std::complex<double> r =
      1.0 - cav.kappa_e / std::complex<double>(0.5 * cav.kappa, -cav.detuning);
  return std::norm(r);
}

/// Intracavity photon number vs detuning at fixed input power, normalized to
/// the on-resonance value n_c0.
inline double photon_number_at_detuning(const OpticalCavity& cav, double n_c0) {
  const double hk = 0.5 * cav.kappa;
  return n_c0 * hk * hk / (cav.detuning * cav.detuning + hk * hk);
}

/// Optical-spring shift in the unresolved regime:
/// delta Omega = g0^2 n_c(Delta) * 2 Delta / (Delta^2 + (kappa/2)^2).
inline double optical_spring_shift(const OpticalCavity& cav, const CouplingBudget& coupling,
                                   const MechanicalMode& /*mode*/) {
  const double hk = 0.5 * cav.kappa;
  const double nc = photon_number_at_detuning(cav, coupling.n_c);
  return coupling.g0 * coupling.g0 * nc * 2.0 * cav.detuning /
         (cav.detuning * cav.detuning + hk * hk);
}

// ---- ringdown ---------------------------------------------------------------

enum class DecayKind { amplitude, energy };

struct RingdownFit {
  double gamma_m = 0.0;  // energy damping rate, rad/s
  double q_factor = 0.0;
  double r_squared = 0.0;
};

/// Least-squares exponential decay fit (linear in log space). Amplitude data
/// decays at Gamma/2, energy at Gamma. Rejects fits with log-domain R^2 < 0.9
/// or a non-decaying slope.
inline RingdownFit fit_ringdown(const std::vector<double>& times,
                                const std::vector<double>& values, double omega_m,
                                DecayKind kind = DecayKind::amplitude) {
  if (times.size() != values.size())
    throw std::invalid_argument("fit_ringdown: times/values length mismatch");
  if (times.size() < 10) throw std::invalid_argument("fit_ringdown: need at least 10 samples");
  std::vector<double> t, logy;
  t.reserve(times.size());
  logy.reserve(times.size());
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (values[i] > 0.0) {
      t.push_back(times[i]);
      logy.push_back(std::log(values[i]));
    }
  }
  if (t.size() < 10) throw std::invalid_argument("fit_ringdown: too few positive samples");

  const double n = static_cast<double>(t.size());
  double st = 0.0, sy = 0.0, stt = 0.0, sty = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    st += t[i];
    sy += logy[i];
    stt += t[i] * t[i];
    sty += t[i] * logy[i];
    syy += logy[i] * logy[i];
  }
  const double denom = n * stt - st * st;
  if (denom <= 0.0) throw std::invalid_argument("fit_ringdown: degenerate time grid");
  const double slope = (n * sty - st * sy) / denom;
  const double intercept = (sy - slope * st) / n;

  double ss_res = 0.0;
  const double mean_y = sy / n;
  double ss_tot = syy - n * mean_y * mean_y;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double r = logy[i] - (intercept + slope * t[i]);
    ss_res += r * r;
  }
  const double r2 = (ss_tot > 0.0) ? 1.0 - ss_res / ss_tot : 0.0;

  if (slope >= 0.0)
    throw std::domain_error("fit_ringdown: no decay detected (non-negative slope)");
  if (r2 < 0.9)
    throw std::domain_error("fit_ringdown: rejected, R^2 = " + std::to_string(r2) + " < 0.9");

  RingdownFit fit;
  fit.gamma_m = (kind == DecayKind::amplitude) ? -2.0 * slope : -slope;
  fit.q_factor = omega_m / fit.gamma_m;
  fit.r_squared = r2;
  return fit;
}

}  // namespace coldloop
