#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "coldloop/filter.hpp"
#include "coldloop/homodyne.hpp"
#include "coldloop/model.hpp"
#include "coldloop/types.hpp"

namespace coldloop {

/// Extra damping the loop adds to mode j, from linearizing the closed-loop
/// denominator (Omega_j^2 - omega^2) - i Gamma_j omega - g w_j Omega_j H(omega)
/// at omega = Omega_j:  delta Gamma_j = g_fb w_j Im H_fb(Omega_j).
/// Positive means added damping (cooling).
inline double mode_damping_delta(const FeedbackFilter& filter, double g_fb,
                                 const MechanicalMode& mode, double weight = 1.0) {
  return g_fb * weight * filter_response(filter, mode.omega_m).imag();
}

// ---- closed-loop stability ----------------------------------------------------

struct ModeMargin {
  double omega_m = 0.0;        // rad/s
  double weight = 1.0;
  double phase = 0.0;          // arg H_fb(Omega_j)
  double damping_delta = 0.0;  // rad/s
};

struct StabilityReport {
  bool stable = false;
  int winding = 0;
  double min_distance = 0.0;  // min над grid |1 - L(omega)|
  double gain_margin = 0.0;   // critical gain multiplier (inf when never unstable)
  std::vector<ModeMargin> modes;
  bool grid_warning = false;
};

namespace detail {

inline std::complex<double> open_loop_gain(const LoopConfig& cfg, double g, double omega) {
  std::complex<double> chi_sum = mech_susceptibility(cfg.mode, omega);
  for (const auto& [mode, weight] : cfg.higher_modes)
    chi_sum += weight * mech_susceptibility(mode, omega);
  return g * (chi_sum + cfg.filter.epsilon_fb) * filter_response(cfg.filter, omega);
}

/// Net winding of D = 1 - L around the origin for omega in (-inf, inf),
/// using conjugate symmetry; adaptively refines until the phase step is
/// small everywhere.
inline int winding_number(const LoopConfig& cfg, double g, bool* warning) {
  // base grid: log sweep plus fine windows around every mechanical resonance
  std::vector<double> grid;
  double omega_max = 6.0 * cfg.mode.omega_m;
  for (const auto& [mode, weight] : cfg.higher_modes)
    omega_max = std::max(omega_max, 6.0 * mode.omega_m);
  const double omega_min = cfg.mode.omega_m / 300.0;
  const int n_log = 1200;
  for (int i = 0; i <= n_log; ++i)
    grid.push_back(omega_min *
                   std::pow(omega_max / omega_min, static_cast<double>(i) / n_log));
  auto add_mode_window = [&](const MechanicalMode& m, double w) {
    const double h_mag = std::abs(filter_response(cfg.filter, m.omega_m));
    const double span =
        std::max({20.0 * m.gamma_m, 3.0 * std::abs(g) * w * h_mag, 1e-3 * m.omega_m});
    const double a = std::max(m.omega_m - span, omega_min);
    const double b = std::min(m.omega_m + span, omega_max);
    for (int i = 0; i <= 600; ++i) grid.push_back(a + (b - a) * i / 600.0);
  };
  add_mode_window(cfg.mode, 1.0);
  for (const auto& [mode, weight] : cfg.higher_modes) add_mode_window(mode, weight);
  // resolve the delay phase to < pi/10 per step
  if (cfg.filter.tau_fb > 0.0) {
    const auto n_tau =
        static_cast<int>(omega_max * cfg.filter.tau_fb * 10.0 / pi) + 2;
    for (int i = 0; i <= n_tau; ++i)
      grid.push_back(omega_max * static_cast<double>(i) / n_tau);
  }
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  if (grid.front() > 0.0) grid.insert(grid.begin(), 0.0);

  auto d_of = [&](double omega) { return 1.0 - open_loop_gain(cfg, g, omega); };

  double total = 0.0;
  bool warn = false;
  // recursive bisection until each step turns by < 0.3 rad
  std::function<double(double, std::complex<double>, double, std::complex<double>, int)> seg =
      [&](double w0, std::complex<double> d0, double w1, std::complex<double> d1,
          int depth) -> double {
    const double dphi = std::arg(d1 / d0);
    if (std::abs(dphi) < 0.3 || depth >= 42) {
      if (depth >= 42) warn = true;
      return dphi;
    }
    const double wm = 0.5 * (w0 + w1);
    const std::complex<double> dm = d_of(wm);
    return seg(w0, d0, wm, dm, depth + 1) + seg(wm, dm, w1, d1, depth + 1);
  };
  std::complex<double> prev = d_of(grid.front());
  for (std::size_t i = 1; i < grid.size(); ++i) {
    const std::complex<double> cur = d_of(grid[i]);
    total += seg(grid[i - 1], prev, grid[i], cur, 0);
    prev = cur;
  }
  if (warning) *warning = warn;
  // full contour = twice the positive-frequency arc (conjugate symmetry)
  return static_cast<int>(std::lround(2.0 * total / two_pi));
}

inline double min_loop_distance(const LoopConfig& cfg, double g) {
  double best = std::numeric_limits<double>::infinity();
  auto probe = [&](double omega) {
    best = std::min(best, std::abs(1.0 - open_loop_gain(cfg, g, omega)));
  };
  auto scan_mode = [&](const MechanicalMode& m) {
    const double span = std::max(40.0 * m.gamma_m,
                                 3.0 * std::abs(g) * std::abs(filter_response(cfg.filter, m.omega_m)));
    for (int i = -4000; i <= 4000; ++i) probe(m.omega_m + span * i / 4000.0);
  };
  scan_mode(cfg.mode);
  for (const auto& [mode, weight] : cfg.higher_modes) scan_mode(mode);
  return best;
}

}  // namespace detail

/// Nyquist-style winding check of 1 - g (chi + eps) H over a dense grid
/// covering all configured modes and delay wraps.
inline StabilityReport check_closed_loop_stability(const LoopConfig& cfg) {
  validate(cfg);
  StabilityReport rep;
  const double g = cfg.filter.g_fb;

  auto margin_row = [&](const MechanicalMode& m, double w) {
    ModeMargin row;
    row.omega_m = m.omega_m;
    row.weight = w;
    row.phase = std::arg(filter_response(cfg.filter, m.omega_m));
    row.damping_delta = mode_damping_delta(cfg.filter, g, m, w);
    return row;
  };
  rep.modes.push_back(margin_row(cfg.mode, 1.0));
  for (const auto& [mode, weight] : cfg.higher_modes)
    rep.modes.push_back(margin_row(mode, weight));

  if (g == 0.0) {
    rep.stable = true;
    rep.winding = 0;
    rep.min_distance = 1.0;
    rep.gain_margin = std::numeric_limits<double>::infinity();
    return rep;
  }

  rep.winding = detail::winding_number(cfg, g, &rep.grid_warning);
  rep.stable = (rep.winding == 0);
  rep.min_distance = detail::min_loop_distance(cfg, g);

  // critical gain multiplier by doubling + bisection
  auto unstable_at = [&](double mult) {
    bool w = false;
    return detail::winding_number(cfg, g * mult, &w) != 0;
  };
  if (!rep.stable) {
    double lo = 0.0, hi = 1.0;
    for (int i = 0; i < 40 && hi - lo > 1e-3 * hi; ++i) {
      const double mid = 0.5 * (lo + hi);
      (unstable_at(mid) ? hi : lo) = mid;
    }
    rep.gain_margin = 0.5 * (lo + hi);
  } else {
    double hi = 2.0;
    while (hi <= 4096.0 && !unstable_at(hi)) hi *= 2.0;
    if (hi > 4096.0) {
      rep.gain_margin = std::numeric_limits<double>::infinity();
    } else {
      double lo = hi / 2.0;
      for (int i = 0; i < 40 && hi - lo > 1e-3 * lo; ++i) {
        const double mid = 0.5 * (lo + hi);
        (unstable_at(mid) ? hi : lo) = mid;
      }
      rep.gain_margin = 0.5 * (lo + hi);
    }
  }
  return rep;
}

// ---- filter design -------------------------------------------------------------

struct DesignSpec {
  MechanicalMode target_mode;
  std::vector<WeightedMode> protected_modes;
  double total_delay = 0.0;                 // s
  double g_min = 0.0, g_max = 0.0;          // advisory gain range for reports
  double phase_target = 0.5 * pi;           // total phase at the target (mod 2 pi)
  double min_damping_slack = 0.0;           // required w_j Im H(Omega_j) >= slack
};

namespace detail {

inline double wrap_2pi(double x) {
  x = std::fmod(x, two_pi);
  return x < 0.0 ? x + two_pi : x;
}

struct DesignCandidate {
  std::vector<BiquadSection> sections;
  double objective = std::numeric_limits<double>::infinity();
  double worst_margin = -std::numeric_limits<double>::infinity();
  double worst_mode = 0.0;
};

inline FeedbackFilter assemble(const std::vector<BiquadSection>& sections, double tau,
                               double omega_t) {
  FeedbackFilter f;
  f.sections = sections;
  f.tau_fb = tau;
  f.g_fb = 1.0;
  // normalize |H~(Omega_t)| = 1 so the gain parameter carries the scale
  const double mag = std::abs(filter_shape_response(f, omega_t));
  if (mag > 0.0 && !f.sections.empty()) {
    f.sections.front().b0 /= mag;
    f.sections.front().b1 /= mag;
    f.sections.front().b2 /= mag;
  }
  return f;
}

}  // namespace detail

/// Design a band-selective damping filter: a resonant low-pass core at the
/// target (which carries +pi/2 there), optional extra selectivity, and
/// all-pass pairs that rotate the total phase (sections + delay) onto the
/// target value while keeping every protected mode on the damped side.
/// Throws std::domain_error naming the violating mode when no cascade of
/// <= 4 sections satisfies the constraints.
inline FeedbackFilter design_filter(const DesignSpec& spec) {
  validate(spec.target_mode);
  const double omega_t = spec.target_mode.omega_m;
  for (const auto& [mode, weight] : spec.protected_modes) {
    validate(mode);
    if (std::abs(mode.omega_m - omega_t) < 1e-6 * omega_t)
      throw std::invalid_argument("design_filter: protected mode coincides with target");
  }
  if (spec.total_delay < 0.0) throw std::invalid_argument("design_filter: negative delay");

  detail::DesignCandidate best;
  bool feasible = false;
  double best_infeasible_margin = -std::numeric_limits<double>::infinity();
  double violating_mode_hz = 0.0;

  auto evaluate = [&](std::vector<BiquadSection> sections) {
    const FeedbackFilter f = detail::assemble(sections, spec.total_delay, omega_t);
    const double phase_err =
        detail::wrap_2pi(std::arg(filter_response(f, omega_t)) - spec.phase_target);
    const double err = std::min(phase_err, two_pi - phase_err);
    if (err > 0.05) return;

    double worst = std::numeric_limits<double>::infinity();
    double worst_mode = 0.0;
    double objective = 0.0;
    for (const auto& [mode, weight] : spec.protected_modes) {
      const std::complex<double> h = filter_response(f, mode.omega_m);
      const double margin = weight * h.imag() - spec.min_damping_slack;
      if (margin < worst) {
        worst = margin;
        worst_mode = mode.omega_m;
      }
      objective += weight * std::norm(h);
    }
    if (spec.protected_modes.empty()) worst = 0.0;

    if (worst >= 0.0) {
      if (!feasible || objective < best.objective) {
        best.sections = f.sections;
        best.objective = objective;
        best.worst_margin = worst;
        feasible = true;
      }
    } else if (worst > best_infeasible_margin) {
      best_infeasible_margin = worst;
      violating_mode_hz = worst_mode / two_pi;
    }
  };

  const double q_core[] = {0.8, 1.5, 3.0, 6.0, 12.0};
  const double q_extra[] = {1.0, 2.0, 4.0};
  const double shape_corners[] = {omega_t / 8.0, omega_t / 3.0, omega_t,
                                  3.0 * omega_t, 8.0 * omega_t};

  auto with_trim = [&](std::vector<BiquadSection> base) {
    // residual phase the final all-pass pair must supply at the target
    FeedbackFilter probe = detail::assemble(base, spec.total_delay, omega_t);
    const double have = std::arg(filter_response(probe, omega_t));
    const double need = detail::wrap_2pi(spec.phase_target - have);
    if (need < 0.02 || need > two_pi - 0.02) {
      evaluate(base);  // nothing to trim
      return;
    }
    for (int i = 1; i <= 9; ++i) {
      const double x_lo = std::max(0.0, need - pi) + 0.01;
      const double x_hi = std::min(pi, need) - 0.01;
      if (x_hi <= x_lo) continue;
      const double x = x_lo + (x_hi - x_lo) * i / 10.0;
      const double wa = omega_t / std::tan(0.5 * x);
      const double wb = omega_t / std::tan(0.5 * (need - x));
      auto sections = base;
      sections.push_back(allpass_pair(wa, wb));
      evaluate(sections);
    }
  };

  for (double q1 : q_core) {
    std::vector<BiquadSection> core{resonant_lowpass(omega_t, q1)};
    with_trim(core);
    for (double q2 : q_extra) {
      std::vector<BiquadSection> core2{resonant_lowpass(omega_t, q1), bandpass(omega_t, q2)};
      with_trim(core2);
    }
    for (double wa : shape_corners)
      for (double wb : shape_corners) {
        if (wb < wa) continue;
        std::vector<BiquadSection> shaped{resonant_lowpass(omega_t, q1),
                                          allpass_pair(wa, wb)};
        with_trim(shaped);
      }
  }

  if (!feasible) {
    throw std::domain_error(
        "design_filter: no feasible cascade within 4 sections; worst protected mode at " +
        std::to_string(violating_mode_hz) + " Hz (margin " +
        std::to_string(best_infeasible_margin) + ")");
  }
  return detail::assemble(best.sections, spec.total_delay, omega_t);
}

// ---- gain optimization ----------------------------------------------------------

/// Occupation predicted by the analytic model for the configured loop at
/// gain g (no fitting involved).
inline double analytic_phonon(const LoopConfig& cfg, double g_fb) {
  LoopModelParams p = loop_model_params(cfg);
  p.filter.g_fb = g_fb;
  const EffectiveMode eff = effective_mode(p.mode, p.filter);
  const double gamma_eff = std::max(eff.gamma_eff, p.mode.gamma_m);
  const auto grid = make_inference_grid(p.mode.omega_m, eff.omega_eff, gamma_eff);
  SpectrumTrace s;
  s.freqs.reserve(grid.size());
  s.psd.reserve(grid.size());
  for (double w : grid) {
    s.freqs.push_back(w / two_pi);
    s.psd.push_back(inferred_displacement_psd(p, w));
  }
  return phonon_from_psd(s, p.mode.omega_m, /*require_coverage=*/false).n_bar;
}

struct GainScan {
  double g_opt = 0.0;
  double n_min = 0.0;
  std::vector<std::pair<double, double>> curve;  // (gain, n_bar)
  bool interior_minimum = false;
};

/// n_bar(g) over a log-spaced scan, refined by golden section around the
/// best interior point. A monotone curve is reported as a boundary optimum.
inline GainScan optimize_gain(const LoopConfig& cfg, double g_lo, double g_hi,
                              int scan_points = 40) {
  if (!(g_lo > 0.0 && g_hi > g_lo))
    throw std::invalid_argument("optimize_gain: need 0 < g_lo < g_hi");
  GainScan out;
  out.curve.reserve(static_cast<std::size_t>(scan_points));
  std::size_t best = 0;
  for (int i = 0; i < scan_points; ++i) {
    const double g = g_lo * std::pow(g_hi / g_lo, static_cast<double>(i) / (scan_points - 1));
    const double n = analytic_phonon(cfg, g);
    out.curve.emplace_back(g, n);
    if (n < out.curve[best].second) best = out.curve.size() - 1;
  }
  if (best == 0 || best == out.curve.size() - 1) {
    out.g_opt = out.curve[best].first;
    out.n_min = out.curve[best].second;
    out.interior_minimum = false;
    return out;
  }
  out.interior_minimum = true;

  // golden section on log g in the bracketing interval
  const double invphi = 0.5 * (std::sqrt(5.0) - 1.0);
  double a = std::log(out.curve[best - 1].first);
  double b = std::log(out.curve[best + 1].first);
  double c = b - invphi * (b - a);
  double d = a + invphi * (b - a);
  double fc = analytic_phonon(cfg, std::exp(c));
  double fd = analytic_phonon(cfg, std::exp(d));
  for (int i = 0; i < 60 && (b - a) > 1e-6; ++i) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - invphi * (b - a);
      fc = analytic_phonon(cfg, std::exp(c));
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + invphi * (b - a);
      fd = analytic_phonon(cfg, std::exp(d));
    }
  }
  out.g_opt = std::exp(0.5 * (a + b));
  out.n_min = analytic_phonon(cfg, out.g_opt);
  return out;
}

}  // namespace coldloop
