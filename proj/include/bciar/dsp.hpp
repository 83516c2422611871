#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include "bciar/error.hpp"

namespace bciar::dsp {

struct Band {
  double lo_hz;
  double hi_hz;
};

// Zero-phase band-pass applied in the frequency domain. The mask is 1 inside
// [lo, hi], falls to 0 over `transition_hz` on each side with a raised-cosine
// edge, and removes DC. The signal is treated as periodic over its length.
class BandPass {
 public:
  BandPass(double fs, Band band, double transition_hz = 2.0)
      : fs_(fs), band_(band), transition_(transition_hz) {}

  double gain(double f) const {
    f = std::abs(f);
    if (f <= 0.0) return 0.0;
    const double lo = band_.lo_hz, hi = band_.hi_hz, tw = transition_;
    if (f >= lo && f <= hi) return 1.0;
    if (f < lo && f > lo - tw) return 0.5 - 0.5 * std::cos(std::numbers::pi * (f - (lo - tw)) / tw);
    if (f > hi && f < hi + tw) return 0.5 + 0.5 * std::cos(std::numbers::pi * (f - hi) / tw);
    return 0.0;
  }

  std::vector<double> apply(std::span<const double> x) const {
    const std::size_t n = x.size();
    std::vector<double> out(n, 0.0);
    if (n < 2) return out;
    std::vector<double> in(x.begin(), x.end());
    std::vector<std::complex<double>> spec;
    Eigen::FFT<double> fft;
    fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
    fft.fwd(spec, in);
    for (std::size_t k = 0; k < spec.size(); ++k) {
      spec[k] *= gain(static_cast<double>(k) * fs_ / static_cast<double>(n));
    }
    fft.inv(out, spec, static_cast<Eigen::Index>(n));
    out.resize(n);
    return out;
  }

  // Column-wise (one column per channel).
  Eigen::MatrixXd apply(const Eigen::Ref<const Eigen::MatrixXd>& x) const {
    Eigen::MatrixXd out(x.rows(), x.cols());
    std::vector<double> col(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      for (Eigen::Index r = 0; r < x.rows(); ++r) col[static_cast<std::size_t>(r)] = x(r, c);
      const auto y = apply(std::span<const double>(col));
      for (Eigen::Index r = 0; r < x.rows(); ++r) out(r, c) = y[static_cast<std::size_t>(r)];
    }
    return out;
  }

  double fs() const { return fs_; }
  Band band() const { return band_; }

 private:
  double fs_;
  Band band_;
  double transition_;
};

// Welch estimate of mean-square power inside [lo, hi): Hann segments of
// `segment` samples with 50% overlap, one-sided spectrum normalized so that
// summing over all bins gives the signal's mean square.
class Welch {
 public:
  Welch(double fs, std::size_t segment) : fs_(fs), segment_(segment), window_(segment) {
    for (std::size_t i = 0; i < segment; ++i) {
      window_[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(segment));
    }
    for (double w : window_) window_power_ += w * w;
  }

  std::size_t segment() const { return segment_; }

  // One-sided PSD bins (mean-square units per bin), averaged over segments.
  std::vector<double> spectrum(std::span<const double> x) const {
    if (x.size() < segment_) {
      throw Error(Errc::WindowTooShort, "window shorter than one Welch segment");
    }
    const std::size_t hop = segment_ / 2;
    const std::size_t n_bins = segment_ / 2 + 1;
    std::vector<double> acc(n_bins, 0.0);
    std::vector<double> buf(segment_);
    std::vector<std::complex<double>> spec;
    Eigen::FFT<double> fft;
    fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
    std::size_t count = 0;
    for (std::size_t start = 0; start + segment_ <= x.size(); start += hop) {
      double mean = 0.0;
      for (std::size_t i = 0; i < segment_; ++i) mean += x[start + i];
      mean /= static_cast<double>(segment_);
      for (std::size_t i = 0; i < segment_; ++i) buf[i] = (x[start + i] - mean) * window_[i];
      fft.fwd(spec, buf);
      for (std::size_t k = 0; k < n_bins; ++k) {
        double p = std::norm(spec[k]) / (static_cast<double>(segment_) * window_power_);
        if (k != 0 && !(segment_ % 2 == 0 && k == segment_ / 2)) p *= 2.0;
        acc[k] += p;
      }
      ++count;
    }
    for (double& v : acc) v /= static_cast<double>(count);
    return acc;
  }

  double band_power(std::span<const double> x, Band band) const {
    return sum_band(spectrum(x), band);
  }

  double sum_band(const std::vector<double>& spec, Band band) const {
    double total = 0.0;
    for (std::size_t k = 0; k < spec.size(); ++k) {
      const double f = static_cast<double>(k) * fs_ / static_cast<double>(segment_);
      if (f >= band.lo_hz && f < band.hi_hz) total += spec[k];
    }
    return total;
  }

 private:
  double fs_;
  std::size_t segment_;
  std::vector<double> window_;
  double window_power_ = 0.0;
};

}  // namespace bciar::dsp
