#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "coldloop/filter.hpp"
#include "coldloop/model.hpp"
#include "coldloop/types.hpp"
#include "coldloop/welch.hpp"

namespace coldloop {

// Time-domain integration of the delayed measurement-feedback loop:
//
//   x'' + Gamma x' + Omega^2 x = Omega (F_N + w u),   y = sum_j sqrt(w_j) x_j + n + eps u,
//   u_k = g_fb * (filtered y)_{k-d},                  d = round(tau_fb / dt).
//
// The linear oscillator is advanced with its exact matrix exponential; the
// thermal force enters through the exact one-step noise covariance
// Q = P_inf - E P_inf E^T, so the discretization is unbiased at any dt.
// Filters are discretized by the bilinear transform (prewarped at the target
// mode) and the control is held constant over each step.

struct SimRun {
  std::uint64_t seed = 0;
  double duration = 0.0;
  double dt = 0.0;
  TimeTrace displacement;  // target-mode readout sum, zero-point units
  TimeTrace measurement;   // displacement + imprecision + parasitic pickup
  TimeTrace control;       // applied feedback force
  LoopConfig config_snapshot;
  bool diverged = false;
  std::size_t diverged_at = 0;
  std::string diagnostic;
};

class ClosedLoopSimulator {
 public:
  struct Sample {
    double x, y, u;
  };

  ClosedLoopSimulator(const LoopConfig& cfg, std::uint64_t seed, double dt)
      : cfg_(cfg), dt_(dt), rng_(seed) {
    validate(cfg);
    const double f_m = cfg.mode.omega_m / two_pi;
    if (!(dt > 0.0) || dt > 1.0 / (20.0 * f_m))
      throw std::invalid_argument("simulator: dt must satisfy dt <= 1/(20 f_M)");
    fs_ = 1.0 / dt;

    add_mode(cfg.mode, 1.0, cfg.noise.n_bath);
    for (const auto& [mode, weight] : cfg.higher_modes) {
      // same effective bath temperature; occupation scales as 1/Omega
      const double n_j = cfg.noise.n_bath * cfg.mode.omega_m / mode.omega_m;
      add_mode(mode, weight, n_j);
    }

    cascade_ = discretize(cfg.filter, fs_, cfg.mode.omega_m);
    g_ = cfg.filter.g_fb;
    eps_ = cfg.filter.epsilon_fb;
    sigma_meas_ = std::sqrt(cfg.channel.s_imp * fs_);
    delay_len_ = static_cast<std::size_t>(std::llround(cfg.filter.tau_fb * fs_));
    delay_line_.assign(std::max<std::size_t>(delay_len_, 1), 0.0);
    guard_ = 1e6 * std::sqrt(std::max(cfg.noise.n_bath, 1.0));

    // start from the open-loop stationary distribution
    for (auto& m : modes_) {
      m.x = std::sqrt(m.p_stat) * normal_(rng_);
      m.v = mode_omega(m) * std::sqrt(m.p_stat) * normal_(rng_);
    }
  }

  std::size_t delay_samples() const { return delay_len_; }
  double fs() const { return fs_; }
  bool diverged() const { return diverged_; }
  std::size_t steps_taken() const { return step_count_; }

  Sample step() {
    if (diverged_) return {0.0, 0.0, 0.0};

    double u;
    if (delay_len_ > 0) {
      u = g_ * delay_line_[delay_pos_];
    } else {
      u = g_ * last_c_;  // zero-delay loop closes through the previous sample
    }

    double x_read = 0.0;
    for (const auto& m : modes_) x_read += m.w_read * m.x;
    const double y = x_read + sigma_meas_ * normal_(rng_) + eps_ * u;
    const double c = cascade_.step(y);
    if (delay_len_ > 0) {
      delay_line_[delay_pos_] = c;
      delay_pos_ = (delay_pos_ + 1) % delay_len_;
    } else {
      u = g_ * c;
      last_c_ = c;
    }

    for (auto& m : modes_) {
      const double force = m.w_read * u;  // reciprocal transduction: sqrt(w) both ways
      const double xi1 = normal_(rng_);
      const double xi2 = normal_(rng_);
      const double xn = m.e11 * m.x + m.e12 * m.v + m.m1 * force + m.l11 * xi1;
      const double vn = m.e21 * m.x + m.e22 * m.v + m.m2 * force + m.l21 * xi1 + m.l22 * xi2;
      m.x = xn;
      m.v = vn;
    }
    ++step_count_;

    if (std::abs(modes_.front().x) > guard_) {
      diverged_ = true;
      diverged_at_ = step_count_;
    }
    return {x_read, y, u};
  }

  std::size_t diverged_at() const { return diverged_at_; }

 private:
  struct ModeState {
    double e11, e12, e21, e22;  // exp(A dt)
    double m1, m2;              // A^{-1} (E - I) b, zero-order-hold control
    double l11, l21, l22;       // chol of Q = P_inf - E P_inf E^T
    double p_stat;              // stationary <x^2> = 2 n + 1
    double w_read;              // sqrt(round-trip weight)
    double omega;
    double x = 0.0, v = 0.0;
  };

  static double mode_omega(const ModeState& m) { return m.omega; }

  void add_mode(const MechanicalMode& mode, double weight, double n_bath) {
    const double om = mode.omega_m;
    const double ga = mode.gamma_m;
    const double wd = std::sqrt(om * om - 0.25 * ga * ga);
    const double ct = std::cos(wd * dt_);
    const double st = std::sin(wd * dt_);
    const double ex = std::exp(-0.5 * ga * dt_);

    ModeState m{};
    m.omega = om;
    m.w_read = std::sqrt(weight);
    m.e11 = ex * (ct + 0.5 * ga * st / wd);
    m.e12 = ex * st / wd;
    m.e21 = -ex * om * om * st / wd;
    m.e22 = ex * (ct - 0.5 * ga * st / wd);

    // M = A^{-1} (E - I) b with b = (0, Omega)^T, A^{-1} = [[-G/O^2, -1/O^2], [1, 0]]
    const double eb1 = m.e12 * om;
    const double eb2 = (m.e22 - 1.0) * om;
    m.m1 = -(ga * eb1 + eb2) / om;
    m.m2 = eb1;

    // stationary covariance P = diag(p, Omega^2 p), p = S_F / (2 Gamma) = 2n+1
    const double p = 2.0 * n_bath + 1.0;
    m.p_stat = p;
    // Q = P - E P E^T
    const double q11 = p - p * (m.e11 * m.e11 + om * om * m.e12 * m.e12);
    const double q12 = -p * (m.e11 * m.e21 + om * om * m.e12 * m.e22);
    const double q22 = p * om * om - p * (m.e21 * m.e21 + om * om * m.e22 * m.e22);
    const double l11 = std::sqrt(std::max(q11, 0.0));
    const double l21 = (l11 > 0.0) ? q12 / l11 : 0.0;
    const double l22 = std::sqrt(std::max(q22 - l21 * l21, 0.0));
    m.l11 = l11;
    m.l21 = l21;
    m.l22 = l22;
    modes_.push_back(m);
  }

  LoopConfig cfg_;
  double dt_;
  double fs_ = 0.0;
  std::vector<ModeState> modes_;
  DigitalCascade cascade_;
  std::vector<double> delay_line_;
  std::size_t delay_len_ = 0;
  std::size_t delay_pos_ = 0;
  double last_c_ = 0.0;
  double g_ = 0.0;
  double eps_ = 0.0;
  double sigma_meas_ = 0.0;
  double guard_ = 0.0;
  bool diverged_ = false;
  std::size_t diverged_at_ = 0;
  std::size_t step_count_ = 0;
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_;
};

/// Default step: 64 samples per mechanical period, nudged so the loop delay
/// is a whole number of samples.
inline double default_dt(const LoopConfig& cfg) {
  const double dt0 = two_pi / (64.0 * cfg.mode.omega_m);
  if (cfg.filter.tau_fb > 0.0) {
    const double d = std::max(1.0, std::round(cfg.filter.tau_fb / dt0));
    return cfg.filter.tau_fb / d;
  }
  return dt0;
}

/// Default duration: 2000 effective decay times from the analytic model.
inline double default_duration(const LoopConfig& cfg) {
  const double g_eff =
      std::max(effective_mode(cfg.mode, cfg.filter).gamma_eff, cfg.mode.gamma_m);
  return 2000.0 / g_eff;
}

inline SimRun simulate_closed_loop(const LoopConfig& cfg, std::uint64_t seed, double duration,
                                   double dt) {
  const auto n_steps = static_cast<std::size_t>(duration / dt);
  if (n_steps > (1u << 24))
    throw std::invalid_argument(
        "simulate_closed_loop: trace too long to store; use welch_closed_loop streaming");
  ClosedLoopSimulator sim(cfg, seed, dt);
  SimRun run;
  run.seed = seed;
  run.duration = duration;
  run.dt = dt;
  run.config_snapshot = cfg;
  run.displacement = {sim.fs(), {}, TraceKind::displacement};
  run.measurement = {sim.fs(), {}, TraceKind::measurement};
  run.control = {sim.fs(), {}, TraceKind::control};
  run.displacement.samples.reserve(n_steps);
  run.measurement.samples.reserve(n_steps);
  run.control.samples.reserve(n_steps);
  for (std::size_t i = 0; i < n_steps; ++i) {
    const auto s = sim.step();
    if (sim.diverged()) {
      run.diverged = true;
      run.diverged_at = sim.diverged_at();
      run.diagnostic = "loop diverged at step " + std::to_string(sim.diverged_at()) +
                       " (|x| exceeded 1e6 sqrt(n_bath)); check stability";
      break;
    }
    run.displacement.samples.push_back(s.x);
    run.measurement.samples.push_back(s.y);
    run.control.samples.push_back(s.u);
  }
  return run;
}

struct ClosedLoopSpectra {
  SpectrumTrace displacement;  // one-sided, per Hz
  SpectrumTrace measurement;
  SpectrumTrace control;
  bool diverged = false;
};

/// Stream a simulation through Welch accumulators for all three signals.
/// A transient of ~12 effective decay times is discarded before averaging
/// (the simulator starts from the open-loop stationary state, which is hot
/// relative to the cooled steady state).
inline ClosedLoopSpectra welch_closed_loop(const LoopConfig& cfg, std::uint64_t seed,
                                           std::size_t seg_len, std::size_t n_segments,
                                           Window window = Window::hann, double overlap = 0.5) {
  const double dt = default_dt(cfg);
  ClosedLoopSimulator sim(cfg, seed, dt);
  const double fs = sim.fs();

  double skip_sec = 0.0;
  if (cfg.filter.g_fb != 0.0) {
    const double g_eff =
        std::max(effective_mode(cfg.mode, cfg.filter).gamma_eff, cfg.mode.gamma_m);
    skip_sec = std::min(12.0 / g_eff, 3.0 * static_cast<double>(seg_len) / fs);
  }
  const auto skip = static_cast<std::size_t>(skip_sec * fs);

  WelchAccumulator acc_x(seg_len, fs, window, overlap);
  WelchAccumulator acc_y(seg_len, fs, window, overlap);
  WelchAccumulator acc_u(seg_len, fs, window, overlap);

  for (std::size_t i = 0; i < skip && !sim.diverged(); ++i) sim.step();
  while (acc_y.segments() < n_segments && !sim.diverged()) {
    const auto s = sim.step();
    if (sim.diverged()) break;
    acc_x.push(s.x);
    acc_y.push(s.y);
    acc_u.push(s.u);
  }

  ClosedLoopSpectra out;
  out.diverged = sim.diverged();
  if (acc_y.segments() > 0) {
    out.displacement = acc_x.psd();
    out.measurement = acc_y.psd();
    out.control = acc_u.psd();
  }
  return out;
}

/// Welch PSD of an imprecision-only (shot) stream with the same statistics
/// the simulator injects; the reference trace for shot normalization.
inline SpectrumTrace welch_shot_reference(double s_imp, double fs, std::size_t seg_len,
                                          std::size_t n_segments, std::uint64_t seed,
                                          Window window = Window::hann, double overlap = 0.5) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  const double sigma = std::sqrt(s_imp * fs);
  WelchAccumulator acc(seg_len, fs, window, overlap);
  while (acc.segments() < n_segments) acc.push(sigma * normal(rng));
  return acc.psd();
}

}  // namespace coldloop
