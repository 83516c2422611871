#include <gtest/gtest.h>

#include <sstream>

#include "bciar/mi_decoder.hpp"
#include "bciar/rng.hpp"

using namespace bciar;
using eeg::Command;

namespace {

const std::vector<Command> kFour{Command::Left, Command::Right, Command::Lift, Command::Neutral};

std::vector<eeg::EegTrial> training_set(const eeg::SubjectProfile& p, std::uint64_t base, int reps = 12) {
  std::vector<eeg::EegTrial> out;
  std::uint64_t s = base;
  for (int r = 0; r < reps; ++r) {
    for (auto c : kFour) out.push_back(eeg::gen_trial(c, p, s++));
  }
  return out;
}

// Trained once; training is the slow part of this suite.
const mi::LinearModel& default_model() {
  static const mi::LinearModel m = mi::train_classifier(training_set(eeg::SubjectProfile{}, 1000));
  return m;
}

mi::ClassifierOutput lateral(double s) {
  mi::ClassifierOutput o;
  o.s_t = s;
  o.label = s > 0 ? Command::Right : Command::Left;
  return o;
}

}  // namespace

TEST(ErdPercent, Formula) {
  EXPECT_DOUBLE_EQ(mi::erd_percent(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(mi::erd_percent(0.5, 1.0), -50.0);
  EXPECT_NEAR(mi::erd_percent(1.3, 1.0), 30.0, 1e-12);
  try {
    mi::erd_percent(1.0, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::ZeroBaseline);
  }
}

TEST(Lda, SeparableFeaturesTrainPerfectly) {
  Rng rng(2);
  const int n = 200;
  Eigen::MatrixXd x(n, mi::kFeatures);
  std::vector<Command> y;
  for (int i = 0; i < n; ++i) {
    const int k = i % 4;
    for (int j = 0; j < mi::kFeatures; ++j) x(i, j) = rng.normal(0, 0.1);
    x(i, k) += 5.0;
    y.push_back(static_cast<Command>(k));
  }
  const auto m = mi::train_lda(x, y);
  EXPECT_FALSE(m.degenerate);
  EXPECT_TRUE(m.weights.allFinite());
  int ok = 0;
  for (int i = 0; i < n; ++i) ok += mi::classify_features(m, x.row(i).transpose()).label == y[static_cast<std::size_t>(i)];
  EXPECT_EQ(ok, n);
}

TEST(Lda, IdenticalFeaturesFallBackToChance) {
  const int n = 400;
  Eigen::MatrixXd x = Eigen::MatrixXd::Constant(n, mi::kFeatures, 1.5);
  std::vector<Command> y;
  for (int i = 0; i < n; ++i) y.push_back(static_cast<Command>(i % 4));
  const auto m = mi::train_lda(x, y);
  EXPECT_TRUE(m.degenerate);
  EXPECT_TRUE(m.weights.allFinite());
  int ok = 0;
  for (int i = 0; i < n; ++i) ok += mi::classify_features(m, x.row(i).transpose()).label == y[static_cast<std::size_t>(i)];
  EXPECT_NEAR(static_cast<double>(ok) / n, 0.25, 0.01);
}

TEST(Lda, TrainingIsDeterministic) {
  const auto trials = training_set(eeg::SubjectProfile{}, 1000);
  const auto a = mi::train_classifier(trials);
  EXPECT_TRUE((a.weights.array() == default_model().weights.array()).all());
  EXPECT_TRUE((a.bias.array() == default_model().bias.array()).all());
}

TEST(Lda, InsufficientTrials) {
  auto trials = training_set(eeg::SubjectProfile{}, 5, 12);
  trials.pop_back();  // 11 Neutral trials
  try {
    mi::train_classifier(trials);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InsufficientTrials);
  }
}

TEST(Classify, HeldOutAccuracyDefaultProfile) {
  // Trial label = majority vote over 1 s windows of the MI phase.
  int ok = 0, total = 0;
  std::uint64_t s = 70000;
  for (int r = 0; r < 10; ++r) {
    for (auto c : kFour) {
      const auto t = eeg::gen_trial(c, eeg::SubjectProfile{}, s++);
      const auto [m0, m1] = t.timeline.range(eeg::Phase::MotorImagery);
      std::array<int, 4> votes{};
      for (auto st : mi::window_starts(m0, m1, 1.0, 0.5)) {
        ++votes[static_cast<std::size_t>(mi::classify(default_model(), t.data.middleRows(static_cast<Eigen::Index>(st), 128)).label)];
      }
      const auto best = std::max_element(votes.begin(), votes.end()) - votes.begin();
      ok += static_cast<Command>(best) == c;
      ++total;
    }
  }
  EXPECT_GE(static_cast<double>(ok) / total, 0.85);
}

TEST(Classify, StrongLeftWindow) {
  eeg::SubjectProfile p;
  p.erd_depth = {0.6, 0.6, 0.6};
  const auto t = eeg::gen_trial(Command::Left, p, 5);
  const auto o = mi::classify(default_model(), t.data.middleRows(5 * 128, 128));
  EXPECT_EQ(o.label, Command::Left);
  EXPECT_LT(o.s_t, 0.0);
}

TEST(Classify, NeutralWindowsStayBelowThreshold) {
  int below = 0, labelled = 0, total = 0;
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto t = eeg::gen_trial(Command::Neutral, eeg::SubjectProfile{}, 300 + s);
    for (auto st : mi::window_starts(2 * 128, 12 * 128, 1.0, 0.5)) {
      const auto o = mi::classify(default_model(), t.data.middleRows(static_cast<Eigen::Index>(st), 128));
      below += std::abs(o.s_t) < 0.5;
      labelled += o.label == Command::Neutral;
      ++total;
      EXPECT_LE(std::abs(o.s_t), 1.0);
    }
  }
  EXPECT_GE(static_cast<double>(below) / total, 0.9);
  EXPECT_GE(static_cast<double>(labelled) / total, 0.7);
}

TEST(Classify, TieBreakFollowsClassOrder) {
  mi::LinearModel m;
  const auto o = mi::classify_features(m, Eigen::VectorXd::Zero(mi::kFeatures));
  EXPECT_EQ(o.label, Command::Left);
  EXPECT_EQ(o.s_t, 0.0);
  m.bias << 0.0, 1.0, 1.0, 1.0;
  EXPECT_EQ(mi::classify_features(m, Eigen::VectorXd::Zero(mi::kFeatures)).label, Command::Right);
}

TEST(Classify, SwappingLateralLabelsNegatesScore) {
  auto trials = training_set(eeg::SubjectProfile{}, 1000);
  auto swapped = trials;
  for (auto& t : swapped) {
    if (t.command == Command::Left) t.command = Command::Right;
    else if (t.command == Command::Right) t.command = Command::Left;
  }
  const auto a = mi::train_classifier(trials);
  const auto b = mi::train_classifier(swapped);
  double sa = 0, sb = 0;
  for (std::uint64_t s = 0; s < 6; ++s) {
    const auto t = eeg::gen_trial(kFour[s % 4], eeg::SubjectProfile{}, 900 + s);
    for (int w = 0; w < 10; ++w) {
      const auto win = t.data.middleRows(2 * 128 + w * 64, 128);
      sa += mi::classify(a, win).s_t;
      sb += mi::classify(b, win).s_t;
    }
  }
  EXPECT_NEAR(sa / 60, -sb / 60, 1e-6);
}

TEST(Classify, OnlineDecoderMatchesBatchWindow) {
  const auto t = eeg::gen_trial(Command::Right, eeg::SubjectProfile{}, 77);
  mi::OnlineDecoder dec(default_model());
  std::size_t emitted = 0;
  for (std::size_t i = 0; i < 400; ++i) {
    if (auto o = dec.push(t.frame(i))) {
      const auto ref = mi::classify(default_model(), t.data.middleRows(static_cast<Eigen::Index>(i + 1 - 128), 128));
      EXPECT_EQ(o->s_t, ref.s_t);
      EXPECT_EQ(o->label, ref.label);
      ++emitted;
    }
  }
  // Windows end at samples 128, 144, ..., 400.
  EXPECT_EQ(emitted, (400 - 128) / 16 + 1);
}

TEST(Model, SaveLoadRoundTrip) {
  std::stringstream ss;
  mi::save_model(ss, default_model());
  const auto m = mi::load_model(ss);
  EXPECT_TRUE((m.weights.array() == default_model().weights.array()).all());
  EXPECT_TRUE((m.bias.array() == default_model().bias.array()).all());
  EXPECT_EQ(m.lateral_scale, default_model().lateral_scale);
  std::stringstream bad("format bciar-lda 1\nbias Left 1\n");
  EXPECT_THROW(mi::load_model(bad), Error);
}

TEST(Dwell, ConstantRightFiresAtTau) {
  std::vector<std::pair<double, mi::ClassifierOutput>> stream;
  for (int i = 0; i <= 10; ++i) stream.emplace_back(i * 0.05, lateral(0.8));
  const auto ev = mi::dwell_commander(stream);
  ASSERT_FALSE(ev.empty());
  EXPECT_EQ(ev[0].command, Command::Right);
  EXPECT_NEAR(ev[0].t, 0.4, 1e-12);
}

TEST(Dwell, AlternatingNeverFires) {
  std::vector<std::pair<double, mi::ClassifierOutput>> stream;
  for (int i = 0; i < 200; ++i) {
    const double t = i * 0.05;
    stream.emplace_back(t, lateral(static_cast<int>(t / 0.2 + 1e-9) % 2 == 0 ? 0.8 : -0.8));
  }
  EXPECT_TRUE(mi::dwell_commander(stream).empty());
}

TEST(Dwell, RefractoryAndLift) {
  std::vector<std::pair<double, mi::ClassifierOutput>> stream;
  for (int i = 0; i <= 20; ++i) stream.emplace_back(i * 0.05, lateral(-0.9));
  const auto ev = mi::dwell_commander(stream);
  ASSERT_EQ(ev.size(), 2u);
  EXPECT_NEAR(ev[0].t, 0.4, 1e-12);
  EXPECT_NEAR(ev[1].t, 0.9, 1e-12);  // refractory 0.5 s, run restarted at 0.4

  mi::DwellCommander dc;
  mi::ClassifierOutput lift;
  lift.label = Command::Lift;
  std::optional<mi::CommandEvent> got;
  for (int i = 0; i <= 40 && !got; ++i) got = dc.push(i * 0.125, lift);
  ASSERT_TRUE(got);
  EXPECT_EQ(got->command, Command::Lift);
  EXPECT_NEAR(got->t, 3.0, 1e-12);
}

TEST(Dwell, InvalidParameters) {
  EXPECT_THROW(mi::DwellCommander(mi::DwellConfig{1.0, 0.4, 3.0, 0.5}), Error);
  EXPECT_THROW(mi::DwellCommander(mi::DwellConfig{0.5, 0.0, 3.0, 0.5}), Error);
}

TEST(Dwell, NeverFiresOnRunsShorterThanTau) {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::pair<double, mi::ClassifierOutput>> stream;
    double t = 0;
    const double dt = 0.125 / 4;
    while (t < 20) {
      // Above-threshold run strictly shorter than tau, then a gap.
      const int dir = rng.bernoulli(0.5) ? 1 : -1;
      const int run = static_cast<int>(rng.below(12));  // < 0.4 / dt samples
      for (int i = 0; i < run; ++i, t += dt) stream.emplace_back(t, lateral(dir * rng.uniform(0.5, 1.0)));
      const int gap = 1 + static_cast<int>(rng.below(6));
      for (int i = 0; i < gap; ++i, t += dt) stream.emplace_back(t, lateral(rng.uniform(-0.49, 0.49)));
    }
    ASSERT_TRUE(mi::dwell_commander(stream).empty()) << trial;
  }
}

TEST(Dwell, SimulatedLeftTrialsEmitExactlyOneLeft) {
  mi::DwellConfig cfg;
  cfg.one_shot = true;
  int good = 0;
  const int n = 20;
  for (int s = 0; s < n; ++s) {
    const auto t = eeg::gen_trial(Command::Left, eeg::SubjectProfile{}, 5000 + static_cast<std::uint64_t>(s));
    mi::OnlineDecoder dec(default_model());
    mi::DwellCommander dc(cfg);
    int left = 0, other = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const auto o = dec.push(t.frame(i));
      const double tt = static_cast<double>(i + 1) / 128.0;
      if (!o || tt <= 2.0 || tt > 12.0) continue;
      if (auto e = dc.push(tt, *o)) (e->command == Command::Left ? left : other)++;
    }
    good += left == 1 && other == 0;
  }
  EXPECT_GE(static_cast<double>(good) / n, 0.9);
}
