#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "coldloop/constants.hpp"
#include "coldloop/types.hpp"

namespace coldloop {

/// In-place iterative radix-2 FFT (forward, e^{-i 2 pi k n / N} kernel).
/// Segment lengths in this project are powers of two by construction.
inline void fft_radix2(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0)
    throw std::invalid_argument("fft_radix2: length must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -two_pi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

enum class Window { hann, rect };

inline std::vector<double> make_window(Window w, std::size_t n) {
  std::vector<double> win(n, 1.0);
  if (w == Window::hann) {
    for (std::size_t i = 0; i < n; ++i)
      win[i] = 0.5 * (1.0 - std::cos(two_pi * static_cast<double>(i) / static_cast<double>(n)));
  }
  return win;
}

/// Streaming Welch estimator: push samples, read the averaged one-sided
/// per-Hz PSD when enough segments have accumulated. Keeps O(seg_len) state,
/// so arbitrarily long simulations can be processed without storing traces.
class WelchAccumulator {
 public:
  WelchAccumulator(std::size_t seg_len, double fs, Window window = Window::hann,
                   double overlap = 0.5)
      : seg_len_(seg_len),
        fs_(fs),
        win_(make_window(window, seg_len)),
        hop_(std::max<std::size_t>(1, seg_len - static_cast<std::size_t>(
                                            std::lround(overlap * static_cast<double>(seg_len))))),
        acc_(seg_len / 2 + 1, 0.0),
        buf_(),
        fftbuf_(seg_len) {
    if (seg_len_ == 0 || (seg_len_ & (seg_len_ - 1)) != 0)
      throw std::invalid_argument("WelchAccumulator: seg_len must be a power of two");
    if (!(fs > 0.0)) throw std::invalid_argument("WelchAccumulator: fs must be > 0");
    if (overlap < 0.0 || overlap >= 1.0)
      throw std::invalid_argument("WelchAccumulator: overlap must be in [0, 1)");
    buf_.reserve(seg_len_);
    win_norm_ = 0.0;
    double win_sum = 0.0;
    for (double v : win_) {
      win_norm_ += v * v;
      win_sum += v;
    }
    enbw_hz_ = fs_ * win_norm_ / (win_sum * win_sum);
  }

  void push(double sample) {
    buf_.push_back(sample);
    if (buf_.size() == seg_len_) {
      process_segment();
      buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(hop_));
    }
  }

  void push(const std::vector<double>& samples) {
    for (double s : samples) push(s);
  }

  std::size_t segments() const { return n_seg_; }

  /// One-sided per-Hz PSD (DC and Nyquist bins unscaled by the fold factor).
  SpectrumTrace psd() const {
    if (n_seg_ == 0) throw std::runtime_error("WelchAccumulator: no complete segment yet");
    SpectrumTrace out;
    const std::size_t nbins = acc_.size();
    out.freqs.resize(nbins);
    out.psd.resize(nbins);
    const double scale = 1.0 / (fs_ * win_norm_ * static_cast<double>(n_seg_));
    for (std::size_t k = 0; k < nbins; ++k) {
      out.freqs[k] = static_cast<double>(k) * fs_ / static_cast<double>(seg_len_);
      const bool interior = (k != 0) && (k != nbins - 1);
      out.psd[k] = acc_[k] * scale * (interior ? 2.0 : 1.0);
    }
    out.n_avg = n_seg_;
    out.rbw = enbw_hz_;
    return out;
  }

 private:
  void process_segment() {
    for (std::size_t i = 0; i < seg_len_; ++i)
      fftbuf_[i] = std::complex<double>(buf_[i] * win_[i], 0.0);
    fft_radix2(fftbuf_);
    for (std::size_t k = 0; k < acc_.size(); ++k) acc_[k] += std::norm(fftbuf_[k]);
    ++n_seg_;
  }

  std::size_t seg_len_;
  double fs_;
  std::vector<double> win_;
  std::size_t hop_;
  std::vector<double> acc_;
  std::vector<double> buf_;
  std::vector<std::complex<double>> fftbuf_;
  double win_norm_ = 0.0;
  double enbw_hz_ = 0.0;
  std::size_t n_seg_ = 0;
};

/// Averaged-periodogram PSD of a stored trace; one-sided, per Hz.
inline SpectrumTrace welch_psd(const TimeTrace& trace, std::size_t seg_len,
                               double overlap = 0.5, Window window = Window::hann) {
  if (seg_len > trace.samples.size())
    throw std::invalid_argument("welch_psd: trace shorter than one segment");
  WelchAccumulator acc(seg_len, trace.fs, window, overlap);
  acc.push(trace.samples);
  return acc.psd();
}

/// Pointwise ratio against a shot-noise reference measured through the same
/// electronics; cancels any common response shaping.
inline SpectrumTrace shot_normalize(const SpectrumTrace& signal, const SpectrumTrace& shot_ref) {
  if (signal.freqs.size() != shot_ref.freqs.size())
    throw std::invalid_argument("shot_normalize: grid length mismatch");
  for (std::size_t i = 0; i < signal.freqs.size(); ++i) {
    if (std::abs(signal.freqs[i] - shot_ref.freqs[i]) >
        1e-9 * std::max(1.0, std::abs(signal.freqs[i])))
      throw std::invalid_argument("shot_normalize: grids differ");
    if (!(shot_ref.psd[i] > 0.0))
      throw std::invalid_argument("shot_normalize: zero bin in shot reference");
  }
  SpectrumTrace out = signal;
  for (std::size_t i = 0; i < out.psd.size(); ++i) out.psd[i] = signal.psd[i] / shot_ref.psd[i];
  out.n_avg = std::min(signal.n_avg, shot_ref.n_avg);
  return out;
}

/// Convert the one-sided estimator output into the symmetrized
/// positive-frequency convention the model formulas use (factor 1/2).
inline SpectrumTrace as_symmetrized(SpectrumTrace t) {
  for (double& v : t.psd) v *= 0.5;
  return t;
}

/// Restrict a trace to [f_lo, f_hi] (Hz, inclusive).
inline SpectrumTrace crop_band(const SpectrumTrace& t, double f_lo, double f_hi) {
  SpectrumTrace out;
  out.n_avg = t.n_avg;
  out.rbw = t.rbw;
  for (std::size_t i = 0; i < t.freqs.size(); ++i) {
    if (t.freqs[i] >= f_lo && t.freqs[i] <= f_hi) {
      out.freqs.push_back(t.freqs[i]);
      out.psd.push_back(t.psd[i]);
    }
  }
  if (out.freqs.size() < 3) throw std::invalid_argument("crop_band: band too narrow for grid");
  return out;
}

}  // namespace coldloop
