#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <vector>

#include "coldloop/least_squares.hpp"
#include "coldloop/model.hpp"
#include "coldloop/types.hpp"
#include "coldloop/welch.hpp"

namespace coldloop {

/// Result of fitting a measured in-loop spectrum to the closed-loop model.
/// Parameter covariance is in natural units, indexed by FitParam; rows of
/// parameters held fixed are zero.
struct FitResult {
  double s_fn = 0.0;
  double s_imp = 0.0;
  double g_fb = 0.0;
  double epsilon_fb = 0.0;
  double tau_fb = 0.0;
  double omega_m = 0.0;
  double gamma_m = 0.0;
  Eigen::MatrixXd covariance;  // 7x7, FitParam order
  double residual_rms = 0.0;
  double chi2 = 0.0;
  FitStatus status = FitStatus::not_run;
  int iterations = 0;
  std::size_t n_bins = 0;
};

enum FitParam : int { P_SFN = 0, P_SIMP, P_GFB, P_EPS, P_TAU, P_OMEGA, P_GAMMA, P_COUNT };

struct HomodyneFitOptions {
  bool fit_epsilon = true;
  bool fit_tau = true;
  bool fit_omega = true;
  bool fit_gamma = false;  // intrinsic width usually pinned by ringdown
  LsqOptions lsq;
};

inline LoopModelParams to_model_params(const FitResult& fit, const FeedbackFilter& shape) {
  LoopModelParams p;
  p.mode = MechanicalMode::from_omega_gamma(fit.omega_m, fit.gamma_m);
  p.s_fn = fit.s_fn;
  p.s_imp = fit.s_imp;
  p.filter = shape;
  p.filter.g_fb = fit.g_fb;
  p.filter.epsilon_fb = fit.epsilon_fb;
  p.filter.tau_fb = fit.tau_fb;
  return p;
}

namespace detail {

struct HomodyneInit {
  double s_fn, s_imp, g_fb, omega, gamma_eff;
};

inline HomodyneInit homodyne_init(const SpectrumTrace& spec, const LoopConfig& init) {
  HomodyneInit h{};
  const auto peak_it = std::max_element(spec.psd.begin(), spec.psd.end());
  const auto peak_idx = static_cast<std::size_t>(peak_it - spec.psd.begin());
  const double peak = *peak_it;
  h.omega = two_pi * spec.freqs[peak_idx];

  std::vector<double> sorted = spec.psd;
  std::sort(sorted.begin(), sorted.end());
  const double floor = std::max(sorted[sorted.size() / 5], 1e-300);
  h.s_imp = floor;

  // -3 dB width around the peak
  const double half = floor + 0.5 * (peak - floor);
  std::size_t ilo = peak_idx, ihi = peak_idx;
  while (ilo > 0 && spec.psd[ilo] > half) --ilo;
  while (ihi + 1 < spec.psd.size() && spec.psd[ihi] > half) ++ihi;
  double width_hz = spec.freqs[ihi] - spec.freqs[ilo];
  if (!(width_hz > 0.0)) width_hz = std::max(spec.rbw, spec.freqs[1] - spec.freqs[0]);
  h.gamma_eff = two_pi * width_hz;

  const double gamma_m = init.mode.gamma_m;
  if (init.filter.g_fb > 0.0) {
    h.g_fb = init.filter.g_fb;
  } else {
    const double im_h = filter_response(init.filter, h.omega).imag();
    h.g_fb = (im_h > 1e-12) ? std::max((h.gamma_eff - gamma_m) / im_h, 1e-6 * h.gamma_eff)
                            : 1e-6 * h.gamma_eff;
  }
  // peak value ~ s_fn |chi(O)|^2 / |den(O)|^2 + ...
  const double gtot = gamma_m + h.g_fb * filter_response(init.filter, h.omega).imag();
  const double chi2_pk = 1.0 / std::max(gtot * gtot, 1e-300);
  h.s_fn = std::max((peak - floor) * std::max(gtot, gamma_m) * std::max(gtot, gamma_m),
                    1e-300);
  (void)chi2_pk;
  return h;
}

}  // namespace detail

/// Weighted nonlinear least squares of a shot-normalized (or calibrated)
/// spectrum against the closed-loop model. Per-bin variance is psd^2/n_avg
/// (averaged-periodogram statistics). The filter shape, delay default and
/// parasitic default come from `init`; s_fn/s_imp/g_fb (+ optionally
/// epsilon/tau/omega) are free.
inline FitResult fit_homodyne_spectrum(const SpectrumTrace& spec, const LoopConfig& init,
                                       const HomodyneFitOptions& opt = {}) {
  validate(spec);
  if (spec.freqs.size() < 16)
    throw std::invalid_argument("fit_homodyne_spectrum: too few bins");
  const auto ini = detail::homodyne_init(spec, init);

  const double w_stat = std::sqrt(static_cast<double>(std::max<std::size_t>(spec.n_avg, 1)));
  const std::size_t nbins = spec.freqs.size();

  // fit vector: [ln s_fn, ln s_imp, g, eps, tau, omega, ln gamma]
  Eigen::VectorXd p0(P_COUNT), lo(P_COUNT), hi(P_COUNT);
  p0 << std::log(ini.s_fn), std::log(ini.s_imp), ini.g_fb, init.filter.epsilon_fb,
      init.filter.tau_fb, ini.omega, std::log(init.mode.gamma_m);
  lo << p0[P_SFN] - 25.0, p0[P_SIMP] - 25.0, 0.0, -0.01,
      0.0, 0.5 * ini.omega, p0[P_GAMMA] - std::log(100.0);
  hi << p0[P_SFN] + 25.0, p0[P_SIMP] + 25.0, 1e12, 0.01,
      std::max(10.0 * init.filter.tau_fb, 1e-5), 1.5 * ini.omega,
      p0[P_GAMMA] + std::log(100.0);

  if (!opt.fit_epsilon) lo[P_EPS] = hi[P_EPS] = p0[P_EPS];
  if (!opt.fit_tau) lo[P_TAU] = hi[P_TAU] = p0[P_TAU];
  if (!opt.fit_omega) lo[P_OMEGA] = hi[P_OMEGA] = p0[P_OMEGA];
  if (!opt.fit_gamma) lo[P_GAMMA] = hi[P_GAMMA] = p0[P_GAMMA];

  std::vector<bool> fixed(P_COUNT, false);
  fixed[P_EPS] = !opt.fit_epsilon;
  fixed[P_TAU] = !opt.fit_tau;
  fixed[P_OMEGA] = !opt.fit_omega;
  fixed[P_GAMMA] = !opt.fit_gamma;

  std::vector<int> free_idx;
  for (int i = 0; i < P_COUNT; ++i)
    if (!fixed[i]) free_idx.push_back(i);
  const auto nfree = static_cast<Eigen::Index>(free_idx.size());

  auto expand = [&](const Eigen::VectorXd& pf) {
    Eigen::VectorXd full = p0;
    for (Eigen::Index i = 0; i < nfree; ++i) full[free_idx[static_cast<std::size_t>(i)]] = pf[i];
    return full;
  };

  auto model_at = [&](const Eigen::VectorXd& full, double omega) {
    LoopModelParams mp;
    mp.mode = MechanicalMode::from_omega_gamma(full[P_OMEGA], std::exp(full[P_GAMMA]));
    mp.s_fn = std::exp(full[P_SFN]);
    mp.s_imp = std::exp(full[P_SIMP]);
    mp.filter = init.filter;
    mp.filter.g_fb = full[P_GFB];
    mp.filter.epsilon_fb = full[P_EPS];
    mp.filter.tau_fb = full[P_TAU];
    return closed_loop_measured_psd(mp, omega);
  };

  ResidualFn residuals = [&](const Eigen::VectorXd& pf) {
    const Eigen::VectorXd full = expand(pf);
    Eigen::VectorXd r(static_cast<Eigen::Index>(nbins));
    for (std::size_t i = 0; i < nbins; ++i) {
      const double m = model_at(full, two_pi * spec.freqs[i]);
      r[static_cast<Eigen::Index>(i)] = w_stat * (m - spec.psd[i]) / spec.psd[i];
    }
    return r;
  };

  Eigen::VectorXd pf0(nfree), lof(nfree), hif(nfree);
  for (Eigen::Index i = 0; i < nfree; ++i) {
    const auto j = free_idx[static_cast<std::size_t>(i)];
    pf0[i] = p0[j];
    lof[i] = lo[j];
    hif[i] = hi[j];
  }
  const LsqResult lsq = levenberg_marquardt(residuals, pf0, lof, hif, opt.lsq);

  const Eigen::VectorXd full = expand(lsq.params);
  FitResult fit;
  fit.s_fn = std::exp(full[P_SFN]);
  fit.s_imp = std::exp(full[P_SIMP]);
  fit.g_fb = full[P_GFB];
  fit.epsilon_fb = full[P_EPS];
  fit.tau_fb = full[P_TAU];
  fit.omega_m = full[P_OMEGA];
  fit.gamma_m = std::exp(full[P_GAMMA]);
  fit.residual_rms = lsq.residual_rms;
  fit.chi2 = lsq.chi2;
  fit.status = lsq.status;
  fit.iterations = lsq.iterations;
  fit.n_bins = nbins;

  // covariance back to natural units: d(nat)/d(fitparam) = nat for log params
  Eigen::VectorXd scale(P_COUNT);
  scale << fit.s_fn, fit.s_imp, 1.0, 1.0, 1.0, 1.0, fit.gamma_m;
  fit.covariance = Eigen::MatrixXd::Zero(P_COUNT, P_COUNT);
  for (Eigen::Index a = 0; a < nfree; ++a)
    for (Eigen::Index b = 0; b < nfree; ++b) {
      const auto ia = free_idx[static_cast<std::size_t>(a)];
      const auto ib = free_idx[static_cast<std::size_t>(b)];
      fit.covariance(ia, ib) = lsq.covariance(a, b) * scale[ia] * scale[ib];
    }
  return fit;
}

// ---- inference --------------------------------------------------------------

/// Composite grid for the phonon integral: decade coverage around the mode
/// plus fine sampling across the (possibly broadened) line.
inline std::vector<double> make_inference_grid(double omega_m, double omega_eff,
                                               double gamma_eff) {
  std::vector<double> w;
  w.reserve(8200);
  const double lo = omega_m / 10.0, hi = 10.0 * omega_m;
  for (int i = 0; i <= 600; ++i)
    w.push_back(lo * std::pow(hi / lo, static_cast<double>(i) / 600.0));
  auto add_window = [&](double half_width, int n) {
    const double a = std::max(omega_eff - half_width, lo);
    const double b = std::min(omega_eff + half_width, hi);
    for (int i = 0; i <= n; ++i)
      w.push_back(a + (b - a) * static_cast<double>(i) / static_cast<double>(n));
  };
  add_window(600.0 * gamma_eff, 1500);
  add_window(60.0 * gamma_eff, 4000);
  std::sort(w.begin(), w.end());
  w.erase(std::unique(w.begin(), w.end(),
                      [](double a, double b) { return std::abs(a - b) < 1e-9 * a; }),
          w.end());
  return w;
}

struct InferenceResult {
  SpectrumTrace s_x;  // inferred displacement spectrum, model convention
  double n_bar = 0.0;
  double n_bar_sigma = 0.0;
  PhononEstimate detail;
};

namespace detail {

inline PhononEstimate integrate_inferred(const FitResult& fit, const FeedbackFilter& shape,
                                         const std::vector<double>& grid_omega,
                                         SpectrumTrace* out_trace) {
  const LoopModelParams mp = to_model_params(fit, shape);
  SpectrumTrace s;
  s.freqs.reserve(grid_omega.size());
  s.psd.reserve(grid_omega.size());
  for (double w : grid_omega) {
    s.freqs.push_back(w / two_pi);
    s.psd.push_back(inferred_displacement_psd(mp, w));
  }
  const PhononEstimate est = phonon_from_psd(s, fit.omega_m, /*require_coverage=*/false);
  if (out_trace) *out_trace = std::move(s);
  return est;
}

}  // namespace detail

/// Inferred displacement spectrum and its phonon integral, with a 1-sigma
/// error on n_bar from linearized propagation of the fit covariance.
inline InferenceResult infer_and_count(const FitResult& fit, const FeedbackFilter& shape,
                                       const std::vector<double>& grid_omega = {}) {
  if (fit.status != FitStatus::converged && fit.status != FitStatus::parameter_at_bound)
    throw std::invalid_argument("infer_and_count: fit did not converge");

  FeedbackFilter f = shape;
  f.g_fb = fit.g_fb;
  f.epsilon_fb = fit.epsilon_fb;
  f.tau_fb = fit.tau_fb;
  const EffectiveMode eff =
      effective_mode(MechanicalMode::from_omega_gamma(fit.omega_m, fit.gamma_m), f);
  const double gamma_eff = std::max(eff.gamma_eff, fit.gamma_m);
  const std::vector<double> grid =
      grid_omega.empty() ? make_inference_grid(fit.omega_m, eff.omega_eff, gamma_eff)
                         : grid_omega;

  InferenceResult out;
  out.detail = detail::integrate_inferred(fit, shape, grid, &out.s_x);
  out.n_bar = out.detail.n_bar;

  // sigma(n_bar) by central differences through the integral
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(P_COUNT);
  auto nudged = [&](int param, double delta) {
    FitResult f2 = fit;
    switch (param) {
      case P_SFN: f2.s_fn += delta; break;
      case P_SIMP: f2.s_imp += delta; break;
      case P_GFB: f2.g_fb += delta; break;
      case P_EPS: f2.epsilon_fb += delta; break;
      case P_TAU: f2.tau_fb += delta; break;
      case P_OMEGA: f2.omega_m += delta; break;
      case P_GAMMA: f2.gamma_m += delta; break;
      default: break;
    }
    return detail::integrate_inferred(f2, shape, grid, nullptr).n_bar;
  };
  const double base[P_COUNT] = {fit.s_fn,       fit.s_imp, fit.g_fb, fit.epsilon_fb,
                                fit.tau_fb,     fit.omega_m, fit.gamma_m};
  for (int k = 0; k < P_COUNT; ++k) {
    if (fit.covariance(k, k) <= 0.0) continue;
    const double h = std::max(1e-5 * std::abs(base[k]), 1e-4 * std::sqrt(fit.covariance(k, k)));
    if (h <= 0.0) continue;
    grad[k] = (nudged(k, h) - nudged(k, -h)) / (2.0 * h);
  }
  const double var = grad.transpose() * fit.covariance * grad;
  out.n_bar_sigma = (var > 0.0) ? std::sqrt(var) : 0.0;
  return out;
}

// ---- calibration-tone conversion ---------------------------------------------

struct CalibrationTone {
  double phi0 = 0.0;      // phase-modulation depth, rad
  double omega_pm = 0.0;  // tone angular frequency, rad/s
};

/// Peak equivalent frequency deviation of the tone: phi0 * Omega_PM.
inline double tone_frequency_deviation(const CalibrationTone& t) {
  return t.phi0 * t.omega_pm;
}

struct CalibrationResult {
  SpectrumTrace spectrum;     // displacement quanta, model convention
  double conversion = 0.0;    // quanta per input PSD unit
  double tone_power = 0.0;    // integrated tone power, input units
  double tone_snr_db = 0.0;
};

/// Convert a raw measured spectrum to displacement quanta using the phase
/// calibration tone. The tone, equivalent to frequency modulation with mean
/// square (phi0 Omega_PM)^2 / 2, and the mechanical signal share the same
/// flat cavity transduction (Omega/kappa ~ 1e-4), so equating the measured
/// tone power to its known value fixes the scale; g0 maps cavity frequency
/// to zero-point displacement units. The tone bins are replaced by the local
/// floor in the output.
inline CalibrationResult calibrate_displacement(const SpectrumTrace& raw,
                                                const CalibrationTone& tone, double g0,
                                                const MechanicalMode& /*mode*/) {
  validate(raw);
  if (!(tone.phi0 > 0.0) || tone.phi0 > two_pi)
    throw std::invalid_argument("calibrate_displacement: phi0 must be in (0, 2 pi)");
  if (!(tone.omega_pm > 0.0))
    throw std::invalid_argument("calibrate_displacement: omega_pm must be > 0");

  const double f_tone = tone.omega_pm / two_pi;
  if (f_tone < raw.freqs.front() || f_tone > raw.freqs.back())
    throw std::invalid_argument("calibrate_displacement: tone not inside the spectrum");

  const auto it = std::lower_bound(raw.freqs.begin(), raw.freqs.end(), f_tone);
  auto center = static_cast<std::size_t>(it - raw.freqs.begin());
  if (center == raw.freqs.size()) --center;
  // snap to the local maximum within a few bins
  const std::size_t snap = 3;
  std::size_t pk = center;
  for (std::size_t i = (center > snap ? center - snap : 0);
       i <= std::min(center + snap, raw.freqs.size() - 1); ++i)
    if (raw.psd[i] > raw.psd[pk]) pk = i;

  const std::size_t halfwin = 4;
  const std::size_t w_lo = pk > halfwin ? pk - halfwin : 0;
  const std::size_t w_hi = std::min(pk + halfwin, raw.freqs.size() - 1);

  std::vector<double> ring;
  for (std::size_t i = (w_lo > 20 ? w_lo - 20 : 0); i < w_lo; ++i) ring.push_back(raw.psd[i]);
  for (std::size_t i = w_hi + 1; i <= std::min(w_hi + 20, raw.freqs.size() - 1); ++i)
    ring.push_back(raw.psd[i]);
  if (ring.empty()) throw std::invalid_argument("calibrate_displacement: tone at spectrum edge");
  std::nth_element(ring.begin(), ring.begin() + static_cast<std::ptrdiff_t>(ring.size() / 2),
                   ring.end());
  const double floor = ring[ring.size() / 2];

  if (!(raw.psd[pk] > 10.0 * std::max(floor, 1e-300)))
    throw std::domain_error("calibrate_displacement: tone not found (needs >= 10 dB over floor)");
  // flat-topped peak means the digitizer clipped
  std::size_t at_max = 0;
  for (std::size_t i = w_lo; i <= w_hi; ++i)
    if (raw.psd[i] > 0.999999 * raw.psd[pk]) ++at_max;
  if (at_max >= 3)
    throw std::domain_error("calibrate_displacement: tone saturated (clipped bins)");

  double tone_power = 0.0;
  for (std::size_t i = w_lo; i < w_hi; ++i) {
    const double df = raw.freqs[i + 1] - raw.freqs[i];
    tone_power += 0.5 * ((raw.psd[i] - floor) + (raw.psd[i + 1] - floor)) * df;
  }
  if (!(tone_power > 0.0))
    throw std::domain_error("calibrate_displacement: nonpositive integrated tone power");

  const double dev = tone_frequency_deviation(tone);
  const double known_power = 0.5 * dev * dev;  // mean-square frequency deviation, (rad/s)^2
  const double k_freq = tone_power / known_power;  // input units per (rad/s)^2/Hz-equivalent

  CalibrationResult out;
  out.tone_power = tone_power;
  out.tone_snr_db = 10.0 * std::log10(raw.psd[pk] / std::max(floor, 1e-300));
  out.conversion = 1.0 / (k_freq * g0 * g0);
  out.spectrum = raw;
  for (std::size_t i = 0; i < out.spectrum.psd.size(); ++i) {
    const double v = (i >= w_lo && i <= w_hi) ? floor : raw.psd[i];
    out.spectrum.psd[i] = v * out.conversion;
  }
  return out;
}

}  // namespace coldloop
