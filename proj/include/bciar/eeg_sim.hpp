#pragma once

// Synthetic 14-channel, 128 Hz EEG with command-dependent ERD.
//
// Each channel is pink (1/f) background noise plus a mu (~10 Hz) and a beta
// (~14 Hz) rhythm with random phase and a slow amplitude envelope. Motor
// imagery attenuates the rhythms on the command's channel group so that the
// expected band power (rhythm + background) drops by the configured depth.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <unsupported/Eigen/FFT>

#include "bciar/error.hpp"
#include "bciar/rng.hpp"

namespace bciar::eeg {

inline constexpr int kChannels = 14;
inline constexpr double kSampleRate = 128.0;
inline constexpr double kNoiseLoHz = 1.0;
inline constexpr double kNoiseHiHz = 64.0;

// Emotiv EPOC X montage order.
inline constexpr std::array<std::string_view, kChannels> kChannelNames = {
    "AF3", "F7", "F3", "FC5", "T7", "P7", "O1", "O2", "P8", "T8", "FC6", "F4", "F8", "AF4"};

enum class Command { Left = 0, Right = 1, Lift = 2, Neutral = 3 };
inline constexpr std::array<Command, 4> kAllCommands = {Command::Left, Command::Right, Command::Lift,
                                                         Command::Neutral};

inline std::string_view to_string(Command c) {
  switch (c) {
    case Command::Left: return "Left";
    case Command::Right: return "Right";
    case Command::Lift: return "Lift";
    case Command::Neutral: return "Neutral";
  }
  return "?";
}

inline Command command_from_string(std::string_view s) {
  for (Command c : kAllCommands) {
    std::string a(to_string(c)), b(s);
    std::transform(a.begin(), a.end(), a.begin(), ::tolower);
    std::transform(b.begin(), b.end(), b.begin(), ::tolower);
    if (a == b) return c;
  }
  throw Error(Errc::ParseError, "unknown command: " + std::string(s));
}

// Contralateral convention: imagined left movement desynchronizes the right
// hemisphere and vice versa; lift engages both fronto-central sites.
inline const std::vector<int>& channel_group(Command c) {
  static const std::vector<int> left = {10, 9, 8};    // FC6 T8 P8
  static const std::vector<int> right = {3, 4, 5};    // FC5 T7 P7
  static const std::vector<int> lift = {2, 3, 10, 11};  // F3 FC5 FC6 F4
  static const std::vector<int> none;
  switch (c) {
    case Command::Left: return left;
    case Command::Right: return right;
    case Command::Lift: return lift;
    case Command::Neutral: return none;
  }
  return none;
}

struct SubjectProfile {
  // ERD depth per command (Left, Right, Lift), as a fraction of band power.
  std::array<double, 3> erd_depth{0.30, 0.30, 0.30};
  double noise_floor_uv = 3.0;  // RMS of the 1-64 Hz pink background
  double sway_gain = 0.0;       // g: congruent-feedback boost of the ERD depth
  double mu_amp_uv = 8.0;
  double beta_amp_uv = 5.0;
  double mu_hz = 10.0;
  double beta_hz = 14.0;
  double freq_jitter_hz = 0.5;  // per-channel rhythm frequency spread
  double am_depth = 0.05;       // relative std of the rhythm envelope
  double am_bandwidth_hz = 1.0;

  double erd(Command c) const {
    return c == Command::Neutral ? 0.0 : erd_depth[static_cast<std::size_t>(c)];
  }

  void validate() const {
    for (double d : erd_depth) {
      if (!(d >= 0.0 && d < 1.0)) throw Error(Errc::InvalidArgument, "erd_depth must be in [0,1)");
    }
    if (!(sway_gain >= 0.0 && sway_gain <= 2.0)) throw Error(Errc::InvalidArgument, "sway_gain must be in [0,2]");
    if (!(noise_floor_uv >= 0.0) || !(mu_amp_uv > 0.0) || !(beta_amp_uv > 0.0)) {
      throw Error(Errc::InvalidArgument, "amplitudes must be positive");
    }
    if (!(am_depth >= 0.0 && am_depth < 1.0) || !(am_bandwidth_hz > 0.0)) {
      throw Error(Errc::InvalidArgument, "envelope parameters out of range");
    }
  }

  // Effective depth with the congruence flag applied, clamped below 1.
  double effective_depth(Command c, bool congruent) const {
    double d = erd(c);
    if (congruent) d = std::min(d * (1.0 + sway_gain), 0.95);
    return d;
  }
};

// Expected background power inside [lo, hi) for the 1/f model.
inline double background_band_power(const SubjectProfile& p, double lo, double hi) {
  lo = std::max(lo, kNoiseLoHz);
  hi = std::min(hi, kNoiseHiHz);
  if (hi <= lo) return 0.0;
  return p.noise_floor_uv * p.noise_floor_uv * std::log(hi / lo) / std::log(kNoiseHiHz / kNoiseLoHz);
}

// Expected unmodulated band power (rhythm + background) on one channel.
inline double expected_band_power(const SubjectProfile& p, double lo, double hi) {
  double rhythm = 0.0;
  if (p.mu_hz >= lo && p.mu_hz < hi) rhythm += 0.5 * p.mu_amp_uv * p.mu_amp_uv;
  if (p.beta_hz >= lo && p.beta_hz < hi) rhythm += 0.5 * p.beta_amp_uv * p.beta_amp_uv;
  return rhythm + background_band_power(p, lo, hi);
}

enum class Phase { Baseline, MotorImagery, Neutral };

inline std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::Baseline: return "baseline";
    case Phase::MotorImagery: return "mi";
    case Phase::Neutral: return "neutral";
  }
  return "?";
}

struct TrialTimeline {
  double baseline_s = 2.0;
  double mi_s = 10.0;
  double neutral_s = 5.0;

  double total_s() const { return baseline_s + mi_s + neutral_s; }
  std::size_t samples() const { return static_cast<std::size_t>(std::llround(total_s() * kSampleRate)); }

  Phase phase_at_sample(std::size_t i) const {
    const auto b = static_cast<std::size_t>(std::llround(baseline_s * kSampleRate));
    const auto m = static_cast<std::size_t>(std::llround((baseline_s + mi_s) * kSampleRate));
    if (i < b) return Phase::Baseline;
    if (i < m) return Phase::MotorImagery;
    return Phase::Neutral;
  }

  // [first, last) sample range of a phase.
  std::pair<std::size_t, std::size_t> range(Phase p) const {
    const auto b = static_cast<std::size_t>(std::llround(baseline_s * kSampleRate));
    const auto m = static_cast<std::size_t>(std::llround((baseline_s + mi_s) * kSampleRate));
    switch (p) {
      case Phase::Baseline: return {0, b};
      case Phase::MotorImagery: return {b, m};
      case Phase::Neutral: return {m, samples()};
    }
    return {0, 0};
  }
};

struct EegFrame {
  double timestamp = 0.0;
  std::array<double, kChannels> samples{};
};

struct EegTrial {
  Command command = Command::Neutral;
  TrialTimeline timeline;
  Eigen::MatrixXd data;  // samples x channels, microvolts
  std::vector<Phase> phase;

  std::size_t size() const { return static_cast<std::size_t>(data.rows()); }
  double timestamp(std::size_t i) const { return static_cast<double>(i) / kSampleRate; }
  EegFrame frame(std::size_t i) const {
    EegFrame f;
    f.timestamp = timestamp(i);
    for (int c = 0; c < kChannels; ++c) f.samples[static_cast<std::size_t>(c)] = data(static_cast<Eigen::Index>(i), c);
    return f;
  }
};

namespace detail {

// Gaussian noise with a prescribed one-sided PSD shape, synthesized in the
// frequency domain. `shape(f)` gives relative power density; output is scaled
// to the requested variance.
template <typename Shape>
std::vector<double> shaped_noise(std::size_t n, double fs, double variance, Shape shape, Rng& rng) {
  const std::size_t bins = n / 2 + 1;
  std::vector<std::complex<double>> spec(bins, {0.0, 0.0});
  const std::size_t last = (n % 2 == 0) ? bins - 1 : bins;  // Nyquist bin left empty
  for (std::size_t k = 1; k < last; ++k) {
    const double f = static_cast<double>(k) * fs / static_cast<double>(n);
    const double s = shape(f);
    if (s <= 0.0) continue;
    const double a = std::sqrt(s);
    spec[k] = {a * rng.normal(), a * rng.normal()};
  }
  std::vector<double> out(n, 0.0);
  Eigen::FFT<double> fft;
  fft.SetFlag(Eigen::FFT<double>::HalfSpectrum);
  fft.inv(out, spec, static_cast<Eigen::Index>(n));
  out.resize(n);
  // Expected mean square of the synthesized sequence is proportional to the
  // summed shape; rescale to the target variance.
  double scale = 0.0;
  for (std::size_t k = 1; k < last; ++k) {
    const double f = static_cast<double>(k) * fs / static_cast<double>(n);
    const double s = shape(f);
    if (s > 0.0) scale += 4.0 * s;
  }
  scale /= static_cast<double>(n) * static_cast<double>(n);
  const double g = std::sqrt(variance / scale);
  for (double& v : out) v *= g;
  return out;
}

}  // namespace detail

// Streaming generator. Components (background, rhythm carriers, envelopes) are
// synthesized in blocks; the ERD attenuation is applied sample by sample so a
// closed loop can change the user's intent and the congruence flag online.
class EegSource {
 public:
  static constexpr std::size_t kBlock = 4096;  // 32 s

  EegSource(const SubjectProfile& profile, std::uint64_t seed) : profile_(profile), seed_(seed) {
    profile_.validate();
    Rng rng(derive_seed(seed_, 0xC4A2u));
    for (int c = 0; c < kChannels; ++c) {
      const auto k = static_cast<std::size_t>(c);
      mu_freq_[k] = profile_.mu_hz + rng.uniform(-profile_.freq_jitter_hz, profile_.freq_jitter_hz);
      beta_freq_[k] = profile_.beta_hz + rng.uniform(-profile_.freq_jitter_hz, profile_.freq_jitter_hz);
      mu_phase_[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
      beta_phase_[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
  }

  const SubjectProfile& profile() const { return profile_; }
  std::size_t position() const { return pos_; }
  double time() const { return static_cast<double>(pos_) / kSampleRate; }

  // Next frame for the given intent. `congruent` applies the sway gain.
  EegFrame next(Command intent, bool congruent = false) {
    const std::size_t block = pos_ / kBlock;
    if (!block_ready_ || block != block_index_) build_block(block);
    const std::size_t i = pos_ % kBlock;
    const double t = static_cast<double>(pos_) / kSampleRate;

    const auto& group = channel_group(intent);
    const double depth = profile_.effective_depth(intent, congruent);
    const double a_mu = attenuation(depth, profile_.mu_amp_uv, profile_.mu_hz);
    const double a_beta = attenuation(depth, profile_.beta_amp_uv, profile_.beta_hz);

    EegFrame f;
    f.timestamp = t;
    for (int c = 0; c < kChannels; ++c) {
      const auto k = static_cast<std::size_t>(c);
      const bool in_group = std::find(group.begin(), group.end(), c) != group.end();
      const double mu = profile_.mu_amp_uv * mu_env_[k][i] *
                        std::sin(2.0 * std::numbers::pi * mu_freq_[k] * t + mu_phase_[k]);
      const double beta = profile_.beta_amp_uv * beta_env_[k][i] *
                          std::sin(2.0 * std::numbers::pi * beta_freq_[k] * t + beta_phase_[k]);
      f.samples[k] = background_[k][i] + (in_group ? a_mu : 1.0) * mu + (in_group ? a_beta : 1.0) * beta;
    }
    ++pos_;
    return f;
  }

 private:
  // Rhythm amplitude factor so that rhythm + background power in the band
  // containing the rhythm drops by `depth`.
  double attenuation(double depth, double amp, double freq) const {
    if (depth <= 0.0) return 1.0;
    const double lo = freq < 12.0 ? 8.0 : 12.0;
    const double hi = lo + 4.0;
    const double rhythm = 0.5 * amp * amp;
    const double bg = background_band_power(profile_, lo, hi);
    const double a2 = (1.0 - depth) - depth * bg / rhythm;
    return std::sqrt(std::max(0.0, a2));
  }

  void build_block(std::size_t block) {
    Rng rng(derive_seed(seed_, 0xB10Cu, block));
    const double var = profile_.noise_floor_uv * profile_.noise_floor_uv;
    const double am_var = profile_.am_depth * profile_.am_depth;
    const double am_norm = 1.0 / std::sqrt(1.0 + am_var);
    const double bw = profile_.am_bandwidth_hz;
    for (int c = 0; c < kChannels; ++c) {
      const auto k = static_cast<std::size_t>(c);
      background_[k] = detail::shaped_noise(
          kBlock, kSampleRate, var,
          [](double f) { return (f >= kNoiseLoHz && f <= kNoiseHiHz) ? 1.0 / f : 0.0; }, rng);
      for (auto* env : {&mu_env_[k], &beta_env_[k]}) {
        auto u = detail::shaped_noise(kBlock, kSampleRate, 1.0, [bw](double f) { return f <= bw ? 1.0 : 0.0; }, rng);
        for (double& v : u) v = (1.0 + profile_.am_depth * v) * am_norm;
        *env = std::move(u);
      }
    }
    block_index_ = block;
    block_ready_ = true;
  }

  SubjectProfile profile_;
  std::uint64_t seed_;
  std::size_t pos_ = 0;
  std::size_t block_index_ = 0;
  bool block_ready_ = false;
  std::array<double, kChannels> mu_freq_{}, beta_freq_{}, mu_phase_{}, beta_phase_{};
  std::array<std::vector<double>, kChannels> background_, mu_env_, beta_env_;
};

// One training/validation trial on the fixed baseline / MI / neutral timeline.
inline EegTrial gen_trial(Command command, const SubjectProfile& profile, std::uint64_t seed,
                          const TrialTimeline& timeline = {}) {
  EegSource source(profile, seed);
  EegTrial trial;
  trial.command = command;
  trial.timeline = timeline;
  const std::size_t n = timeline.samples();
  trial.data.resize(static_cast<Eigen::Index>(n), kChannels);
  trial.phase.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Phase ph = timeline.phase_at_sample(i);
    trial.phase[i] = ph;
    const EegFrame f = source.next(ph == Phase::MotorImagery ? command : Command::Neutral);
    for (int c = 0; c < kChannels; ++c) {
      trial.data(static_cast<Eigen::Index>(i), c) = f.samples[static_cast<std::size_t>(c)];
    }
  }
  return trial;
}

struct PlannedTrial {
  Command command;
  int round;
  std::uint64_t seed;
};

struct SessionPlan {
  std::vector<PlannedTrial> trials;

  std::size_t count(Command c) const {
    return static_cast<std::size_t>(
        std::count_if(trials.begin(), trials.end(), [c](const PlannedTrial& t) { return t.command == c; }));
  }
  std::size_t mi_trials() const { return trials.size() - count(Command::Neutral); }
};

// `reps_per_command` repetitions of every command split over `rounds`, order
// shuffled within each round, with a Neutral trial after every
// `commands.size()` MI trials.
inline SessionPlan schedule_session(const std::vector<Command>& commands, int reps_per_command, int rounds,
                                    std::uint64_t seed) {
  if (reps_per_command < 12 || reps_per_command > 16) {
    throw Error(Errc::RepsOutOfRange, "reps_per_command must be in [12,16], got " + std::to_string(reps_per_command));
  }
  if (rounds < 1) throw Error(Errc::InvalidArgument, "rounds must be >= 1");
  if (commands.empty()) throw Error(Errc::InvalidArgument, "no commands to schedule");
  for (Command c : commands) {
    if (c == Command::Neutral) throw Error(Errc::InvalidArgument, "Neutral is interleaved automatically");
  }
  Rng rng(derive_seed(seed, 0x5E55u));
  SessionPlan plan;
  std::uint64_t trial_index = 0;
  std::size_t since_neutral = 0;
  for (int r = 0; r < rounds; ++r) {
    std::vector<Command> round;
    for (Command c : commands) {
      // Spread remainders over the first rounds.
      const int n = reps_per_command / rounds + (r < reps_per_command % rounds ? 1 : 0);
      for (int i = 0; i < n; ++i) round.push_back(c);
    }
    rng.shuffle(std::span<Command>(round));
    for (Command c : round) {
      plan.trials.push_back({c, r, derive_seed(seed, 0x7121u, trial_index++)});
      if (++since_neutral == commands.size()) {
        plan.trials.push_back({Command::Neutral, r, derive_seed(seed, 0x7121u, trial_index++)});
        since_neutral = 0;
      }
    }
  }
  return plan;
}

// CSV export: t,ch1..ch14,phase
inline void write_trial_csv(std::ostream& out, const EegTrial& trial) {
  out << "t";
  for (int c = 1; c <= kChannels; ++c) out << ",ch" << c;
  out << ",phase\n";
  char buf[40];
  for (std::size_t i = 0; i < trial.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.6f", trial.timestamp(i));
    out << buf;
    for (int c = 0; c < kChannels; ++c) {
      std::snprintf(buf, sizeof buf, "%.6f", trial.data(static_cast<Eigen::Index>(i), c));
      out << ',' << buf;
    }
    out << ',' << to_string(trial.phase[i]) << '\n';
  }
}

}  // namespace bciar::eeg
