#pragma once

// Evaluation formulas: ITR, SCI, FAR/FPR, GSR, timing decomposition,
// Kaplan-Meier, Holm/Bonferroni, exact sign test, two-sample KS.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "bciar/error.hpp"

namespace bciar::metrics {

struct ItrResult {
  double bits_per_min = 0.0;
  bool below_chance = false;
};

// Wolpaw ITR in bits/min with 0*log(0) = 0. Accuracy below 1/M reports 0
// with the flag set; accuracy at exactly 1/M is 0.
inline ItrResult itr(int m, double p, double t_s) {
  if (m < 2) throw Error(Errc::InvalidArgument, "ITR needs at least 2 commands");
  if (!(t_s > 0.0)) throw Error(Errc::InvalidArgument, "decision time must be positive");
  if (!(p >= 0.0 && p <= 1.0)) throw Error(Errc::InvalidArgument, "accuracy must be in [0,1]");
  const double chance = 1.0 / m;
  if (std::abs(p - chance) <= 1e-12) return {0.0, false};
  if (p < chance) return {0.0, true};
  double bits = std::log2(static_cast<double>(m));
  if (p > 0.0) bits += p * std::log2(p);
  if (p < 1.0) bits += (1.0 - p) * std::log2((1.0 - p) / (m - 1));
  return {bits * 60.0 / t_s, false};
}

struct TraceSample {
  double t;
  double s;
};

struct ControlTrace {
  std::vector<TraceSample> samples;
  int direction = 1;      // cued direction d, -1 or +1
  double duration = 0.0;  // T; 0 means last - first sample time
};

// (1/T) * integral of max(0, s(t) d) over the trace, with s linear between
// samples. Segments that cross zero are split at the crossing, so the clipped
// integrand is integrated exactly for the piecewise-linear signal.
inline double sci(const ControlTrace& trace) {
  const auto& x = trace.samples;
  if (x.empty()) throw Error(Errc::EmptyTrace, "SCI of an empty trace");
  if (trace.direction != 1 && trace.direction != -1) throw Error(Errc::InvalidArgument, "direction must be +-1");
  const double span = x.back().t - x.front().t;
  const double T = trace.duration > 0.0 ? trace.duration : span;
  if (!(T > 0.0)) {
    return std::clamp(x.front().s * trace.direction, 0.0, 1.0);
  }
  double area = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) {
    const double h = x[i].t - x[i - 1].t;
    if (h < 0.0) throw Error(Errc::InvalidArgument, "trace samples must be time-ordered");
    const double a = x[i - 1].s * trace.direction;
    const double b = x[i].s * trace.direction;
    if (a >= 0.0 && b >= 0.0) {
      area += 0.5 * h * (a + b);
    } else if (a > 0.0) {
      area += 0.5 * h * a * (a / (a - b));
    } else if (b > 0.0) {
      area += 0.5 * h * b * (b / (b - a));
    }
  }
  return area / T;
}

inline double far(std::size_t false_activations, std::size_t total) {
  if (total == 0) throw Error(Errc::ZeroTotal, "no decisions");
  if (false_activations > total) throw Error(Errc::InvalidArgument, "more false activations than decisions");
  return static_cast<double>(false_activations) / static_cast<double>(total);
}

inline double fpr(std::size_t false_positives, std::size_t total) { return far(false_positives, total); }

inline double gsr(std::size_t successes, std::size_t trials) {
  if (trials == 0) throw Error(Errc::ZeroTrials, "no trials");
  if (successes > trials) throw Error(Errc::InvalidArgument, "more successes than trials");
  return static_cast<double>(successes) / static_cast<double>(trials);
}

// Artifact-defined composite: P * (1 - FPR) * (1 s / T_decision).
inline double sci_star(double p, double fpr_value, double t_decision_s) {
  if (!(t_decision_s > 0.0)) throw Error(Errc::InvalidArgument, "decision time must be positive");
  return p * (1.0 - fpr_value) / t_decision_s;
}

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;  // sample SD (n - 1); 0 for a single value
  std::size_t n = 0;
};

inline MeanSd mean_sd(const std::vector<double>& v) {
  MeanSd r;
  r.n = v.size();
  if (v.empty()) return r;
  r.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return r;
}

struct PhaseTimes {
  double t_select = 0.0;
  double t_plan = 0.0;
  double t_exec = 0.0;
  double total() const { return t_select + t_plan + t_exec; }
};

struct TimingSummary {
  MeanSd select, plan, exec, total;
};

inline TimingSummary timing_summary(const std::vector<PhaseTimes>& trials) {
  if (trials.empty()) throw Error(Errc::NoCompletedTrials, "timing summary needs at least one completed trial");
  std::vector<double> s, p, e, t;
  for (const auto& tr : trials) {
    s.push_back(tr.t_select);
    p.push_back(tr.t_plan);
    e.push_back(tr.t_exec);
    t.push_back(tr.total());
  }
  return {mean_sd(s), mean_sd(p), mean_sd(e), mean_sd(t)};
}

struct KmStep {
  double t;
  double survival;
  std::size_t at_risk;
  std::size_t events;
};

// Product-limit estimator. At tied times events are counted before censored
// observations leave the risk set.
class KaplanMeier {
 public:
  KaplanMeier(const std::vector<double>& durations, const std::vector<bool>& censored) {
    if (durations.empty()) throw Error(Errc::EmptyInput, "Kaplan-Meier needs observations");
    if (durations.size() != censored.size()) throw Error(Errc::InvalidArgument, "durations/censored size mismatch");
    std::vector<std::size_t> idx(durations.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (double d : durations) {
      if (!(d > 0.0)) throw Error(Errc::InvalidArgument, "durations must be positive");
    }
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return durations[a] < durations[b]; });
    std::size_t at_risk = durations.size();
    double s = 1.0;
    for (std::size_t i = 0; i < idx.size();) {
      const double t = durations[idx[i]];
      std::size_t events = 0, leaving = 0;
      for (; i < idx.size() && durations[idx[i]] == t; ++i, ++leaving) {
        if (!censored[idx[i]]) ++events;
      }
      if (events > 0) {
        s = s * static_cast<double>(at_risk - events) / static_cast<double>(at_risk);
        steps_.push_back({t, s, at_risk, events});
      }
      at_risk -= leaving;
    }
  }

  const std::vector<KmStep>& steps() const { return steps_; }

  // Right-continuous step function.
  double operator()(double t) const {
    double s = 1.0;
    for (const auto& st : steps_) {
      if (st.t <= t) s = st.survival;
      else break;
    }
    return s;
  }

  // Smallest t with S(t) <= 0.5; NaN if the curve never reaches it.
  double median() const {
    for (const auto& st : steps_) {
      if (st.survival <= 0.5) return st.t;
    }
    return std::nan("");
  }

 private:
  std::vector<KmStep> steps_;
};

inline KaplanMeier km_estimate(const std::vector<double>& durations, const std::vector<bool>& censored) {
  return KaplanMeier(durations, censored);
}

// Holm step-down: reject p_(i) while p_(i) <= alpha / (m - i + 1).
inline std::vector<bool> holm(const std::vector<double>& p, double alpha) {
  const std::size_t m = p.size();
  std::vector<bool> reject(m, false);
  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return p[a] < p[b]; });
  for (std::size_t i = 0; i < m; ++i) {
    if (!(p[idx[i]] >= 0.0 && p[idx[i]] <= 1.0)) throw Error(Errc::InvalidArgument, "p-values must be in [0,1]");
  }
  for (std::size_t i = 0; i < m; ++i) {
    if (p[idx[i]] <= alpha / static_cast<double>(m - i)) reject[idx[i]] = true;
    else break;
  }
  return reject;
}

inline std::vector<bool> bonferroni(const std::vector<double>& p, double alpha) {
  std::vector<bool> reject(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) reject[i] = p[i] <= alpha / static_cast<double>(p.size());
  return reject;
}

struct SignTest {
  std::size_t positive = 0;
  std::size_t negative = 0;
  std::size_t ties = 0;
  double p_value = 1.0;  // two-sided exact binomial, ties dropped
};

inline double binom_two_sided(std::size_t k, std::size_t n) {
  if (n == 0) return 1.0;
  const std::size_t lo = std::min(k, n - k);
  // P(X <= lo) for X ~ Bin(n, 1/2), summed in log space.
  double acc = 0.0;
  const double ln2n = static_cast<double>(n) * std::log(2.0);
  for (std::size_t i = 0; i <= lo; ++i) {
    const double lc = std::lgamma(static_cast<double>(n) + 1) - std::lgamma(static_cast<double>(i) + 1) -
                      std::lgamma(static_cast<double>(n - i) + 1);
    acc += std::exp(lc - ln2n);
  }
  return std::min(1.0, 2.0 * acc);
}

inline SignTest sign_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error(Errc::InvalidArgument, "sign test needs paired samples");
  SignTest r;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] > b[i]) ++r.positive;
    else if (a[i] < b[i]) ++r.negative;
    else ++r.ties;
  }
  r.p_value = binom_two_sided(r.positive, r.positive + r.negative);
  return r;
}

struct KsResult {
  double d = 0.0;
  double p_value = 1.0;
};

// Two-sample Kolmogorov-Smirnov with the asymptotic distribution
// (Stephens' small-sample correction).
inline KsResult ks_two_sample(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw Error(Errc::EmptyInput, "KS test needs two non-empty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] == x) ++i;
    while (j < b.size() && b[j] == x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }
  const double ne = std::sqrt(na * nb / (na + nb));
  const double lambda = (ne + 0.12 + 0.11 / ne) * d;
  double p = 0.0;
  if (lambda < 1e-3) {
    p = 1.0;
  } else {
    for (int k = 1; k <= 100; ++k) {
      const double term = 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * k * k * lambda * lambda);
      p += term;
      if (std::abs(term) < 1e-12) break;
    }
  }
  return {d, std::clamp(p, 0.0, 1.0)};
}

}  // namespace bciar::metrics
