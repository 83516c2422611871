#pragma once

// Motor-imagery decoding: 8-16 Hz band-pass, mu/beta log band power features,
// a ridge-regularized LDA over four classes, and the dwell-based command
// emitter that turns the classifier stream into discrete commands.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "bciar/dsp.hpp"
#include "bciar/eeg_sim.hpp"
#include "bciar/error.hpp"

namespace bciar::mi {

using eeg::Command;
using eeg::kChannels;
using eeg::kSampleRate;

inline constexpr int kClasses = 4;
inline constexpr int kFeatures = kChannels * 2;

struct BandDefinition {
  dsp::Band mu{8.0, 12.0};
  dsp::Band beta{12.0, 16.0};
  dsp::Band passband{8.0, 16.0};
};

inline const BandDefinition& bands() {
  static const BandDefinition b;
  return b;
}

// Zero-phase 8-16 Hz band-pass, column-wise over a samples x channels block.
inline Eigen::MatrixXd bandpass(const Eigen::Ref<const Eigen::MatrixXd>& x) {
  static const dsp::BandPass filter(kSampleRate, bands().passband);
  return filter.apply(x);
}

inline eeg::EegTrial bandpass(const eeg::EegTrial& trial) {
  eeg::EegTrial out = trial;
  out.data = bandpass(trial.data);
  return out;
}

// Mean-square amplitude inside `band` for each channel (Welch, 1 s Hann segments).
inline Eigen::VectorXd bandpower(const Eigen::Ref<const Eigen::MatrixXd>& window, dsp::Band band) {
  const auto seg = static_cast<std::size_t>(kSampleRate);
  if (window.rows() < static_cast<Eigen::Index>(seg)) {
    throw Error(Errc::WindowTooShort, "bandpower needs at least 1 s (128 samples)");
  }
  static const dsp::Welch welch(kSampleRate, seg);
  Eigen::VectorXd out(window.cols());
  std::vector<double> col(static_cast<std::size_t>(window.rows()));
  for (Eigen::Index c = 0; c < window.cols(); ++c) {
    for (Eigen::Index r = 0; r < window.rows(); ++r) col[static_cast<std::size_t>(r)] = window(r, c);
    out(c) = welch.band_power(col, band);
  }
  return out;
}

// 28 features, channel-major: (ch1 mu, ch1 beta, ch2 mu, ...), natural log of
// band power in uV^2.
inline Eigen::VectorXd features(const Eigen::Ref<const Eigen::MatrixXd>& window) {
  const Eigen::MatrixXd filtered = bandpass(window);
  static const dsp::Welch welch(kSampleRate, static_cast<std::size_t>(kSampleRate));
  Eigen::VectorXd f(kFeatures);
  std::vector<double> col(static_cast<std::size_t>(filtered.rows()));
  for (Eigen::Index c = 0; c < filtered.cols(); ++c) {
    for (Eigen::Index r = 0; r < filtered.rows(); ++r) col[static_cast<std::size_t>(r)] = filtered(r, c);
    const auto spec = welch.spectrum(col);
    f(2 * c) = std::log(std::max(welch.sum_band(spec, bands().mu), 1e-12));
    f(2 * c + 1) = std::log(std::max(welch.sum_band(spec, bands().beta), 1e-12));
  }
  return f;
}

inline double erd_percent(double p_task, double p_base) {
  if (!(p_base > 0.0)) throw Error(Errc::ZeroBaseline, "baseline power must be positive");
  return 100.0 * (p_task - p_base) / p_base;
}

// ERD% of a trial's MI phase against its baseline phase, 8-16 Hz power summed
// over the channels of `group`.
inline double trial_erd_percent(const eeg::EegTrial& trial, const std::vector<int>& group,
                                dsp::Band band = bands().passband) {
  const auto [b0, b1] = trial.timeline.range(eeg::Phase::Baseline);
  const auto [m0, m1] = trial.timeline.range(eeg::Phase::MotorImagery);
  const Eigen::MatrixXd filtered = bandpass(trial.data);
  const auto base = bandpower(filtered.middleRows(static_cast<Eigen::Index>(b0), static_cast<Eigen::Index>(b1 - b0)), band);
  const auto task = bandpower(filtered.middleRows(static_cast<Eigen::Index>(m0), static_cast<Eigen::Index>(m1 - m0)), band);
  double pb = 0.0, pt = 0.0;
  for (int c : group) {
    pb += base(c);
    pt += task(c);
  }
  return erd_percent(pt, pb);
}

struct ClassifierOutput {
  std::array<double, kClasses> scores{};
  Command label = Command::Neutral;
  double s_t = 0.0;  // signed lateral score, positive = Right
};

struct LinearModel {
  Eigen::Matrix<double, kClasses, kFeatures> weights = Eigen::Matrix<double, kClasses, kFeatures>::Zero();
  Eigen::Matrix<double, kClasses, 1> bias = Eigen::Matrix<double, kClasses, 1>::Zero();
  double lateral_scale = 1.0;  // |score_Right - score_Left| that maps to |s_t| = 1
  double regularization = 0.0;
  bool degenerate = false;  // covariance was singular and the ridge fallback was used
};

struct TrainingOptions {
  double window_s = 1.0;
  double step_s = 0.5;
  double ridge = 1e-3;          // relative to trace(cov)/p
  double lateral_scale_factor = 2.0;  // times median |score_R - score_L| on lateral training windows
  int min_trials_per_class = 12;
};

// LDA on a feature matrix (rows = samples). Labels index the four classes.
inline LinearModel train_lda(const Eigen::MatrixXd& x, const std::vector<Command>& labels, double ridge = 1e-3) {
  if (x.rows() != static_cast<Eigen::Index>(labels.size()) || x.cols() != kFeatures) {
    throw Error(Errc::InvalidArgument, "feature matrix shape mismatch");
  }
  LinearModel model;
  std::array<Eigen::VectorXd, kClasses> mean;
  std::array<int, kClasses> count{};
  for (auto& m : mean) m = Eigen::VectorXd::Zero(kFeatures);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto k = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
    mean[k] += x.row(i).transpose();
    ++count[k];
  }
  for (std::size_t k = 0; k < kClasses; ++k) {
    if (count[k] == 0) throw Error(Errc::InsufficientTrials, "class " + std::string(eeg::to_string(static_cast<Command>(k))) + " has no samples");
    mean[k] /= count[k];
  }
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(kFeatures, kFeatures);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto k = static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]);
    const Eigen::VectorXd d = x.row(i).transpose() - mean[k];
    cov += d * d.transpose();
  }
  cov /= std::max<Eigen::Index>(1, x.rows() - kClasses);

  const double avg_var = cov.trace() / kFeatures;
  double lambda = ridge * avg_var;
  if (!(avg_var > 1e-12)) {
    model.degenerate = true;
    lambda = 1.0;
  }
  cov.diagonal().array() += lambda;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(cov);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
    model.degenerate = true;
    cov.diagonal().array() += 1.0;
    ldlt.compute(cov);
  }
  model.regularization = lambda;
  const double n = static_cast<double>(x.rows());
  for (std::size_t k = 0; k < kClasses; ++k) {
    const Eigen::VectorXd w = ldlt.solve(mean[k]);
    model.weights.row(static_cast<Eigen::Index>(k)) = w.transpose();
    model.bias(static_cast<Eigen::Index>(k)) = -0.5 * mean[k].dot(w) + std::log(count[k] / n);
  }
  return model;
}

// Ties resolve to the first class in Left < Right < Lift < Neutral order.
inline ClassifierOutput classify_features(const LinearModel& model, const Eigen::VectorXd& f) {
  ClassifierOutput out;
  const Eigen::Matrix<double, kClasses, 1> s = model.weights * f + model.bias;
  std::size_t best = 0;
  for (std::size_t k = 0; k < kClasses; ++k) {
    out.scores[k] = s(static_cast<Eigen::Index>(k));
    if (out.scores[k] > out.scores[best]) best = k;
  }
  out.label = static_cast<Command>(best);
  const double diff = out.scores[1] - out.scores[0];
  out.s_t = std::clamp(diff / model.lateral_scale, -1.0, 1.0);
  return out;
}

inline ClassifierOutput classify(const LinearModel& model, const Eigen::Ref<const Eigen::MatrixXd>& window) {
  return classify_features(model, features(window));
}

// Window start indices over [first, last) for the given window/step.
inline std::vector<std::size_t> window_starts(std::size_t first, std::size_t last, double window_s, double step_s) {
  std::vector<std::size_t> out;
  const auto w = static_cast<std::size_t>(std::llround(window_s * kSampleRate));
  const auto step = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(step_s * kSampleRate)));
  for (std::size_t s = first; s + w <= last; s += step) out.push_back(s);
  return out;
}

// Trains on windows from each trial's MI phase; the trial's command is the
// label (Neutral trials contribute unmodulated windows).
inline LinearModel train_classifier(const std::vector<eeg::EegTrial>& trials, const TrainingOptions& opt = {}) {
  std::array<int, kClasses> per_class{};
  for (const auto& t : trials) ++per_class[static_cast<std::size_t>(t.command)];
  for (std::size_t k = 0; k < kClasses; ++k) {
    if (per_class[k] < opt.min_trials_per_class) {
      throw Error(Errc::InsufficientTrials, std::string(eeg::to_string(static_cast<Command>(k))) + " has " +
                                                std::to_string(per_class[k]) + " trials, need " +
                                                std::to_string(opt.min_trials_per_class));
    }
  }
  const auto w = static_cast<Eigen::Index>(std::llround(opt.window_s * kSampleRate));
  std::vector<Eigen::VectorXd> rows;
  std::vector<Command> labels;
  for (const auto& t : trials) {
    const auto [m0, m1] = t.timeline.range(eeg::Phase::MotorImagery);
    for (std::size_t s : window_starts(m0, m1, opt.window_s, opt.step_s)) {
      rows.push_back(features(t.data.middleRows(static_cast<Eigen::Index>(s), w)));
      labels.push_back(t.command);
    }
  }
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), kFeatures);
  for (std::size_t i = 0; i < rows.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  LinearModel model = train_lda(x, labels, opt.ridge);

  std::vector<double> lateral;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (labels[i] != Command::Left && labels[i] != Command::Right) continue;
    const auto s = model.weights * rows[i] + model.bias;
    lateral.push_back(std::abs(s(1) - s(0)));
  }
  if (!lateral.empty()) {
    std::nth_element(lateral.begin(), lateral.begin() + static_cast<std::ptrdiff_t>(lateral.size() / 2), lateral.end());
    const double med = lateral[lateral.size() / 2];
    if (med > 1e-12) model.lateral_scale = opt.lateral_scale_factor * med;
  }
  return model;
}

// Model file: plain key/value lines; weights are one row per class in the
// fixed feature order (channel-major, mu then beta).
inline void save_model(std::ostream& out, const LinearModel& m) {
  char buf[40];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  out << "format bciar-lda 1\n";
  out << "classes Left Right Lift Neutral\n";
  out << "features " << kFeatures << "\n";
  out << "feature_order channel-major mu,beta\n";
  out << "lateral_scale " << num(m.lateral_scale) << "\n";
  out << "regularization " << num(m.regularization) << "\n";
  out << "degenerate " << (m.degenerate ? 1 : 0) << "\n";
  for (int k = 0; k < kClasses; ++k) {
    const auto name = eeg::to_string(static_cast<Command>(k));
    out << "bias " << name << ' ' << num(m.bias(k)) << "\n";
    out << "weights " << name;
    for (int j = 0; j < kFeatures; ++j) out << ' ' << num(m.weights(k, j));
    out << "\n";
  }
}

inline LinearModel load_model(std::istream& in) {
  LinearModel m;
  std::string line;
  std::array<bool, kClasses> have_w{}, have_b{};
  bool have_format = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "format") {
      std::string name;
      int version = 0;
      ls >> name >> version;
      if (name != "bciar-lda" || version != 1) throw Error(Errc::ParseError, "unsupported model format");
      have_format = true;
    } else if (key == "features") {
      int n = 0;
      ls >> n;
      if (n != kFeatures) throw Error(Errc::ParseError, "model feature count mismatch");
    } else if (key == "lateral_scale") {
      ls >> m.lateral_scale;
    } else if (key == "regularization") {
      ls >> m.regularization;
    } else if (key == "degenerate") {
      int d = 0;
      ls >> d;
      m.degenerate = d != 0;
    } else if (key == "bias" || key == "weights") {
      std::string cls;
      ls >> cls;
      const auto k = static_cast<int>(eeg::command_from_string(cls));
      if (key == "bias") {
        ls >> m.bias(k);
        have_b[static_cast<std::size_t>(k)] = true;
      } else {
        for (int j = 0; j < kFeatures; ++j) {
          if (!(ls >> m.weights(k, j))) throw Error(Errc::ParseError, "short weight row for " + cls);
        }
        have_w[static_cast<std::size_t>(k)] = true;
      }
      if (ls.fail()) throw Error(Errc::ParseError, "bad number in line: " + line);
    }
  }
  if (!have_format) throw Error(Errc::ParseError, "missing format line");
  for (int k = 0; k < kClasses; ++k) {
    if (!have_w[static_cast<std::size_t>(k)] || !have_b[static_cast<std::size_t>(k)]) {
      throw Error(Errc::ParseError, "missing weights or bias for a class");
    }
  }
  if (!m.weights.allFinite() || !m.bias.allFinite()) throw Error(Errc::ParseError, "non-finite weights");
  return m;
}

struct DwellConfig {
  double threshold = 0.5;   // theta on |s_t|
  double dwell_s = 0.4;     // tau for Left/Right
  double lift_dwell_s = 3.0;
  double refractory_s = 0.5;
  // Left/Right also require the argmax label to agree with the sign of s_t.
  bool require_label = true;
  // Stop after the first emission until reset(); one decision per trial.
  bool one_shot = false;
};

struct CommandEvent {
  double t;
  Command command;
};

// Left/Right fire when |s_t| >= theta with a constant sign (and, by default,
// the matching argmax label) for tau seconds; Lift fires when Lift is the
// argmax for tau_lift seconds. Nothing fires within the refractory period
// after an emission. A run that fires restarts at the emission time.
class DwellCommander {
 public:
  explicit DwellCommander(DwellConfig cfg = {}) : cfg_(cfg) {
    if (!(cfg_.threshold > 0.0 && cfg_.threshold < 1.0) || !(cfg_.dwell_s > 0.0) || !(cfg_.lift_dwell_s > 0.0) ||
        !(cfg_.refractory_s >= 0.0)) {
      throw Error(Errc::InvalidArgument, "dwell parameters out of range");
    }
  }

  const DwellConfig& config() const { return cfg_; }

  std::optional<CommandEvent> push(double t, const ClassifierOutput& out) {
    constexpr double eps = 1e-9;
    std::optional<CommandEvent> event;

    int dir = std::abs(out.s_t) >= cfg_.threshold ? (out.s_t > 0 ? 1 : -1) : 0;
    if (cfg_.require_label && dir != 0 && out.label != (dir > 0 ? Command::Right : Command::Left)) dir = 0;
    if (dir != lateral_dir_) {
      lateral_dir_ = dir;
      lateral_start_ = t;
    }
    if (out.label == Command::Lift) {
      if (!lift_active_) {
        lift_active_ = true;
        lift_start_ = t;
      }
    } else {
      lift_active_ = false;
    }

    if (t + eps < refractory_until_ || (cfg_.one_shot && emitted_)) return std::nullopt;

    if (lateral_dir_ != 0 && t - lateral_start_ >= cfg_.dwell_s - eps) {
      event = CommandEvent{t, lateral_dir_ > 0 ? Command::Right : Command::Left};
      lateral_start_ = t;
    } else if (lift_active_ && t - lift_start_ >= cfg_.lift_dwell_s - eps) {
      event = CommandEvent{t, Command::Lift};
      lift_start_ = t;
    }
    if (event) {
      refractory_until_ = t + cfg_.refractory_s;
      emitted_ = true;
    }
    return event;
  }

  // Seconds the current Lift run has lasted at time t (0 when not in a run).
  double lift_held(double t) const { return lift_active_ ? t - lift_start_ : 0.0; }

  void reset() {
    lateral_dir_ = 0;
    lateral_start_ = 0.0;
    lift_active_ = false;
    lift_start_ = 0.0;
    refractory_until_ = -1e300;
    emitted_ = false;
  }

 private:
  DwellConfig cfg_;
  int lateral_dir_ = 0;
  double lateral_start_ = 0.0;
  bool lift_active_ = false;
  double lift_start_ = 0.0;
  double refractory_until_ = -1e300;
  bool emitted_ = false;
};

// Batch form over a timestamped stream.
inline std::vector<CommandEvent> dwell_commander(const std::vector<std::pair<double, ClassifierOutput>>& stream,
                                                 DwellConfig cfg = {}) {
  DwellCommander dc(cfg);
  std::vector<CommandEvent> events;
  for (const auto& [t, out] : stream) {
    if (auto e = dc.push(t, out)) events.push_back(*e);
  }
  return events;
}

// Online decoder: buffers frames and classifies the last window every step.
class OnlineDecoder {
 public:
  OnlineDecoder(const LinearModel& model, double window_s = 1.0, double step_s = 0.125)
      : model_(model),
        window_(static_cast<std::size_t>(std::llround(window_s * kSampleRate))),
        step_(static_cast<std::size_t>(std::llround(step_s * kSampleRate))),
        buffer_(static_cast<Eigen::Index>(window_), kChannels) {
    buffer_.setZero();
  }

  // Returns a classifier output when a step boundary is reached and a full
  // window is available.
  std::optional<ClassifierOutput> push(const eeg::EegFrame& frame) {
    const auto row = static_cast<Eigen::Index>(head_);
    for (int c = 0; c < kChannels; ++c) buffer_(row, c) = frame.samples[static_cast<std::size_t>(c)];
    head_ = (head_ + 1) % window_;
    ++count_;
    if (count_ < window_ || (count_ - window_) % step_ != 0) return std::nullopt;
    Eigen::MatrixXd ordered(static_cast<Eigen::Index>(window_), kChannels);
    for (std::size_t i = 0; i < window_; ++i) {
      ordered.row(static_cast<Eigen::Index>(i)) = buffer_.row(static_cast<Eigen::Index>((head_ + i) % window_));
    }
    return classify(model_, ordered);
  }

  double step_s() const { return static_cast<double>(step_) / kSampleRate; }
  const LinearModel& model() const { return model_; }

 private:
  LinearModel model_;
  std::size_t window_;
  std::size_t step_;
  Eigen::MatrixXd buffer_;
  std::size_t head_ = 0;
  std::size_t count_ = 0;
};

}  // namespace bciar::mi
