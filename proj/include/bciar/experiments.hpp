#pragma once

// Experiment runners. Every run writes trials.csv, metrics.csv, report.txt,
// config.echo and events.csv to the output directory (Exp-3 adds
// execution.csv). Output bytes depend only on the config, including the seed.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "bciar/ar_loop.hpp"
#include "bciar/bridge.hpp"
#include "bciar/config.hpp"
#include "bciar/eeg_sim.hpp"
#include "bciar/metrics.hpp"
#include "bciar/mi_decoder.hpp"
#include "bciar/pipeline.hpp"

namespace bciar::experiments {

using eeg::Command;
using pipeline::FailureClass;

inline constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

// Seed stream labels.
enum : std::uint64_t {
  kTrainSeed = 0x7A11,
  kExp1Seed = 0xE1,
  kExp2Seed = 0xE2,
  kExp3Seed = 0xE3,
  kEegSeed = 0xEE6,
  kArSeed = 0xA4,
  kCueSeed = 0xC0E,
  kSceneSeed = 0x5CE,
  kLinkSeed = 0x71C,
  kRobotSeed = 0x4B07,
  kHandEyeSeed = 0x4E,
};

inline std::string fmt(double v, int precision = 6) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

// Runs fn(i) for i in [0, n) on a few threads. Results must be written by
// index so that scheduling cannot change the output.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn, unsigned threads = 0) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lk(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

inline mi::LinearModel train_subject(const ExperimentConfig& cfg, int subject) {
  const auto plan = eeg::schedule_session({Command::Left, Command::Right, Command::Lift}, cfg.training.reps_per_command,
                                          cfg.training.rounds, derive_seed(cfg.seed, kTrainSeed, subject));
  const auto profile = cfg.profile(subject);
  std::vector<eeg::EegTrial> trials;
  trials.reserve(plan.trials.size());
  for (const auto& t : plan.trials) trials.push_back(eeg::gen_trial(t.command, profile, t.seed));
  return mi::train_classifier(trials);
}

inline std::vector<mi::LinearModel> train_subjects(const ExperimentConfig& cfg, unsigned threads) {
  std::vector<mi::LinearModel> models(static_cast<std::size_t>(cfg.n_subjects));
  parallel_for(models.size(), [&](std::size_t s) { models[s] = train_subject(cfg, static_cast<int>(s)); }, threads);
  return models;
}

// ---------------------------------------------------------------------------
// Closed-loop target selection with a simulated user who steers toward the
// cued target and then holds Lift.

struct Selection {
  ar::Outcome outcome = ar::Outcome::Pending;
  int cue = 0;
  int selected = -1;                // lane index; -1 on timeout
  double t_end = 0.0;               // AR clock at confirmation or timeout
  double decision_time = kNan;      // Decide time at the Confirm entry that locked the target
  double sci = kNan;                // over the lateral part of Decide
  std::size_t decisions = 0;        // cursor moves plus Confirm entries
  std::size_t false_positives = 0;  // decisions that did not match the intent
  std::vector<ar::ArEvent> events;

  bool correct() const { return outcome == ar::Outcome::Confirmed && selected == cue; }
};

inline Selection run_selection(const mi::LinearModel& model, const eeg::SubjectProfile& profile,
                               ar::Condition condition, std::vector<ar::Target> targets, int cue,
                               const ar::ArConfig& arc, std::uint64_t seed) {
  eeg::EegSource source(profile, derive_seed(seed, kEegSeed));
  mi::OnlineDecoder decoder(model);
  ar::ArLoop loop(std::move(targets), condition, derive_seed(seed, kArSeed), arc);
  Selection r;
  r.cue = cue;
  const int start = loop.state().cursor;
  metrics::ControlTrace trace;
  trace.direction = cue >= start ? 1 : -1;
  bool lateral = cue != start;
  mi::ClassifierOutput last;
  const double dt = 1.0 / eeg::kSampleRate;
  const auto max_steps = static_cast<std::size_t>(600.0 * eeg::kSampleRate);

  for (std::size_t i = 0; i < max_steps && !loop.done(); ++i) {
    const auto& st = loop.state();
    Command intent = Command::Neutral;
    int dir = 0;
    if (st.phase == ar::Phase::Decide) {
      if (st.cursor != cue) {
        dir = cue > st.cursor ? 1 : -1;
        intent = dir > 0 ? Command::Right : Command::Left;
      } else {
        intent = Command::Lift;
      }
    } else if (st.phase == ar::Phase::Confirm) {
      intent = Command::Lift;
    }
    const auto frame = source.next(intent, loop.congruent(dir));
    if (auto o = decoder.push(frame)) {
      last = *o;
      if (st.phase == ar::Phase::Decide && lateral) trace.samples.push_back({st.t, o->s_t});
    }
    for (const auto& e : loop.step(last, dt)) {
      if (e.kind == ar::EventKind::CursorMove) {
        ++r.decisions;
        const int moved = e.detail.starts_with("Right") ? 1 : -1;
        if (moved != dir) ++r.false_positives;
        if (loop.state().cursor == cue) lateral = false;
      } else if (e.kind == ar::EventKind::PhaseChange && e.detail == ar::to_string(ar::Phase::Confirm)) {
        ++r.decisions;
        if (loop.state().cursor != cue) ++r.false_positives;
        r.decision_time = loop.state().decide_clock;
      }
    }
  }
  if (!loop.done()) throw Error(Errc::NoConvergence, "selection did not terminate");
  r.outcome = loop.state().outcome;
  r.t_end = loop.state().t;
  if (r.outcome == ar::Outcome::Confirmed) {
    r.selected = loop.state().cursor;
  } else {
    r.decision_time = loop.state().decide_clock;
  }
  if (trace.samples.size() >= 2) r.sci = metrics::sci(trace);
  r.events = loop.log();
  return r;
}

inline void write_events(std::ostream& out, int subject, int trial, std::string_view condition,
                         const std::vector<ar::ArEvent>& events) {
  for (const auto& e : events) {
    out << subject << ',' << trial << ',' << condition << ',';
    ar::write_event_csv(out, e);
  }
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(Errc::InvalidArgument, "cannot write " + path.string());
  f << text;
}

inline void write_config_echo(const std::filesystem::path& dir, const ExperimentConfig& cfg) {
  write_text(dir / "config.echo", to_json(cfg).dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Experiment 1: per-subject training, then a validation block scored one
// decision per trial.

struct Exp1Trial {
  int subject = 0;
  int trial = 0;
  Command command = Command::Neutral;
  std::optional<Command> decision;
  double decision_time = kNan;  // MI onset to emission
  double erd_percent = kNan;    // 8-16 Hz ERD% on the command's channel group

  bool correct() const { return command != Command::Neutral && decision == command; }
};

struct Exp1Metrics {
  std::string label;
  std::size_t mi_trials = 0;
  std::size_t correct = 0;
  std::size_t neutral_trials = 0;
  std::size_t false_activations = 0;
  double accuracy = 0.0;
  double far = 0.0;
  metrics::MeanSd decision_time;
  double itr = 0.0;
  bool itr_below_chance = false;
  std::array<double, 3> erd{kNan, kNan, kNan};  // Left, Right, Lift
};

struct Exp1Result {
  std::vector<Exp1Trial> trials;
  std::vector<Exp1Metrics> subjects;
  Exp1Metrics group;
};

inline Exp1Trial validate_trial(const mi::LinearModel& model, const eeg::SubjectProfile& profile, Command command,
                                std::uint64_t seed, mi::DwellConfig dwell) {
  const eeg::TrialTimeline tl;
  const auto trial = eeg::gen_trial(command, profile, seed, tl);
  mi::OnlineDecoder decoder(model);
  dwell.one_shot = true;
  mi::DwellCommander commander(dwell);
  const double onset = tl.baseline_s, end = tl.baseline_s + tl.mi_s;
  Exp1Trial r;
  r.command = command;
  for (std::size_t i = 0; i < trial.size(); ++i) {
    const auto o = decoder.push(trial.frame(i));
    const double t = static_cast<double>(i + 1) / eeg::kSampleRate;
    if (!o || t <= onset || t > end + 1e-9) continue;
    if (const auto e = commander.push(t, *o)) {
      r.decision = e->command;
      r.decision_time = t - onset;
      break;
    }
  }
  if (command != Command::Neutral) r.erd_percent = mi::trial_erd_percent(trial, eeg::channel_group(command));
  return r;
}

inline Exp1Metrics summarize_exp1(std::string label, const std::vector<const Exp1Trial*>& trials) {
  Exp1Metrics m;
  m.label = std::move(label);
  std::vector<double> times;
  std::array<std::vector<double>, 3> erd;
  for (const auto* t : trials) {
    if (t->command == Command::Neutral) {
      ++m.neutral_trials;
      if (t->decision) ++m.false_activations;
      continue;
    }
    ++m.mi_trials;
    erd[static_cast<std::size_t>(t->command)].push_back(t->erd_percent);
    if (t->correct()) {
      ++m.correct;
      times.push_back(t->decision_time);
    }
  }
  m.accuracy = m.mi_trials ? static_cast<double>(m.correct) / static_cast<double>(m.mi_trials) : 0.0;
  m.far = m.neutral_trials ? metrics::far(m.false_activations, m.neutral_trials) : 0.0;
  if (!times.empty()) {
    m.decision_time = metrics::mean_sd(times);
    const auto itr = metrics::itr(3, m.accuracy, m.decision_time.mean);
    m.itr = itr.bits_per_min;
    m.itr_below_chance = itr.below_chance;
  } else {
    m.decision_time.mean = kNan;
    m.decision_time.sd = kNan;
  }
  for (std::size_t k = 0; k < 3; ++k) {
    if (!erd[k].empty()) m.erd[k] = metrics::mean_sd(erd[k]).mean;
  }
  return m;
}

inline Exp1Result run_experiment1(const ExperimentConfig& cfg, unsigned threads = 0) {
  cfg.validate();
  const auto models = train_subjects(cfg, threads);
  std::vector<std::pair<int, Command>> plan;  // (subject, command) in presentation order
  std::vector<std::uint64_t> seeds;
  for (int s = 0; s < cfg.n_subjects; ++s) {
    std::vector<Command> block;
    for (Command c : eeg::kAllCommands) {
      for (int k = 0; k < cfg.training.validation_reps; ++k) block.push_back(c);
    }
    Rng rng(derive_seed(cfg.seed, kExp1Seed, s));
    rng.shuffle(std::span<Command>(block));
    for (std::size_t k = 0; k < block.size(); ++k) {
      plan.push_back({s, block[k]});
      seeds.push_back(derive_seed(cfg.seed, kExp1Seed, s, k));
    }
  }
  Exp1Result r;
  r.trials.resize(plan.size());
  parallel_for(
      plan.size(),
      [&](std::size_t i) {
        const auto [s, c] = plan[i];
        auto t = validate_trial(models[static_cast<std::size_t>(s)], cfg.profile(s), c, seeds[i], cfg.ar.dwell);
        t.subject = s;
        r.trials[i] = t;
      },
      threads);
  std::vector<int> counters(static_cast<std::size_t>(cfg.n_subjects), 0);
  for (auto& t : r.trials) t.trial = counters[static_cast<std::size_t>(t.subject)]++;

  std::vector<const Exp1Trial*> all;
  for (int s = 0; s < cfg.n_subjects; ++s) {
    std::vector<const Exp1Trial*> mine;
    for (const auto& t : r.trials) {
      if (t.subject == s) mine.push_back(&t);
    }
    all.insert(all.end(), mine.begin(), mine.end());
    r.subjects.push_back(summarize_exp1("S" + std::to_string(s + 1), mine));
  }
  r.group = summarize_exp1("Group Mean", all);
  return r;
}

inline void write_exp1(const std::filesystem::path& dir, const ExperimentConfig& cfg, const Exp1Result& r) {
  std::ostringstream trials, met, rep;
  trials << "subject,trial,command,decision,correct,decision_time_s,erd_percent\n";
  for (const auto& t : r.trials) {
    trials << t.subject << ',' << t.trial << ',' << eeg::to_string(t.command) << ','
           << (t.decision ? eeg::to_string(*t.decision) : std::string_view("none")) << ',' << (t.correct() ? 1 : 0)
           << ',' << fmt(t.decision_time) << ',' << fmt(t.erd_percent) << '\n';
  }
  met << "subject,accuracy,far,decision_time_s,decision_time_sd,itr_bits_min,erd_left,erd_right,erd_lift\n";
  auto row = [&](const Exp1Metrics& m) {
    met << m.label << ',' << fmt(m.accuracy) << ',' << fmt(m.far) << ',' << fmt(m.decision_time.mean) << ','
        << fmt(m.decision_time.sd) << ',' << fmt(m.itr) << ',' << fmt(m.erd[0]) << ',' << fmt(m.erd[1]) << ','
        << fmt(m.erd[2]) << '\n';
  };
  for (const auto& m : r.subjects) row(m);
  row(r.group);

  char line[256];
  rep << "Experiment 1: MI command training (" << cfg.n_subjects << " subjects, " << cfg.training.reps_per_command
      << " reps x " << cfg.training.rounds << " rounds, " << cfg.training.validation_reps
      << " validation trials per command)\n\n";
  std::snprintf(line, sizeof line, "%-12s %13s %8s %20s %15s\n", "", "Accuracy (%)", "FAR (%)", "Decision Time (s)",
                "ITR (bits/min)");
  rep << line;
  auto table_row = [&](const Exp1Metrics& m) {
    const std::string dt = fmt(m.decision_time.mean, 2) + " +/- " + fmt(m.decision_time.sd, 2);
    std::snprintf(line, sizeof line, "%-12s %13s %8s %20s %15s%s\n", m.label.c_str(), fmt(100 * m.accuracy, 1).c_str(),
                  fmt(100 * m.far, 1).c_str(), dt.c_str(), fmt(m.itr, 1).c_str(),
                  m.itr_below_chance ? " (below chance)" : "");
    rep << line;
  };
  for (const auto& m : r.subjects) table_row(m);
  table_row(r.group);
  rep << "\nERD% (8-16 Hz, command channel group): Left " << fmt(r.group.erd[0], 1) << ", Right "
      << fmt(r.group.erd[1], 1) << ", Lift " << fmt(r.group.erd[2], 1) << '\n';
  rep << "FAR = neutral validation trials with any emitted command / neutral trials.\n";
  rep << "Group ITR uses the pooled accuracy and mean decision time.\n";

  std::ostringstream events;
  events << "subject,trial,condition,t,event,value,detail\n";
  for (const auto& t : r.trials) {
    if (t.decision) {
      events << t.subject << ',' << t.trial << ",,"
             << fmt(t.decision_time) << ",decision," << static_cast<int>(*t.decision) << ',' << eeg::to_string(*t.decision)
             << '\n';
    }
  }
  write_text(dir / "trials.csv", trials.str());
  write_text(dir / "metrics.csv", met.str());
  write_text(dir / "report.txt", rep.str());
  write_text(dir / "events.csv", events.str());
  write_config_echo(dir, cfg);
}

// ---------------------------------------------------------------------------
// Experiment 2: four feedback conditions, robot disabled. Trials are paired
// across conditions by seed.

struct Exp2Trial {
  int subject = 0;
  int trial = 0;
  ar::Condition condition = ar::Condition::NoAr;
  Selection sel;
};

struct Exp2Metrics {
  ar::Condition condition = ar::Condition::NoAr;
  std::size_t trials = 0;
  std::size_t correct = 0;
  std::size_t timeouts = 0;
  double accuracy = 0.0;
  double decision_time = kNan;  // mean over correct trials
  double fpr = 0.0;
  double itr = 0.0;             // mean of block ITRs
  double sci = kNan;
  double sci_star = kNan;
  std::vector<double> block_itr;
};

struct Comparison {
  ar::Condition against = ar::Condition::NoAr;
  metrics::SignTest itr;
  metrics::SignTest sci;
  bool itr_reject = false;  // Holm, alpha 0.05
  bool sci_reject = false;
};

struct Exp2Result {
  std::vector<Exp2Trial> trials;
  std::vector<Exp2Metrics> conditions;
  std::vector<Comparison> comparisons;  // Neurofeedback against each other condition

  const Exp2Metrics& metrics_for(ar::Condition c) const {
    for (const auto& m : conditions) {
      if (m.condition == c) return m;
    }
    throw Error(Errc::InvalidArgument, "condition not in result");
  }
  std::vector<double> paired_sci(ar::Condition c) const;
};

inline std::vector<double> Exp2Result::paired_sci(ar::Condition c) const {
  std::vector<double> v;
  for (const auto& t : trials) {
    if (t.condition == c) v.push_back(t.sel.sci);
  }
  return v;
}

inline int neighbour_cue(int start, int n, std::uint64_t seed) {
  Rng rng(derive_seed(seed, kCueSeed));
  int cue = start + (rng.bernoulli(0.5) ? 1 : -1);
  if (cue < 0 || cue >= n) cue = start - (cue - start);
  return cue;
}

inline Exp2Metrics summarize_exp2(ar::Condition c, const std::vector<const Exp2Trial*>& trials, int n_subjects,
                                  int block_size) {
  Exp2Metrics m;
  m.condition = c;
  std::vector<double> times, scis;
  std::size_t decisions = 0, fp = 0;
  for (const auto* t : trials) {
    ++m.trials;
    if (t->sel.correct()) {
      ++m.correct;
      times.push_back(t->sel.decision_time);
    }
    if (t->sel.outcome == ar::Outcome::TimedOut) ++m.timeouts;
    decisions += t->sel.decisions;
    fp += t->sel.false_positives;
    if (!std::isnan(t->sel.sci)) scis.push_back(t->sel.sci);
  }
  m.accuracy = m.trials ? static_cast<double>(m.correct) / static_cast<double>(m.trials) : 0.0;
  if (!times.empty()) m.decision_time = metrics::mean_sd(times).mean;
  m.fpr = decisions ? metrics::fpr(fp, decisions) : 0.0;
  if (!scis.empty()) m.sci = metrics::mean_sd(scis).mean;
  if (!std::isnan(m.decision_time)) m.sci_star = metrics::sci_star(m.accuracy, m.fpr, m.decision_time);

  // Blocks of consecutive trials within each subject.
  for (int s = 0; s < n_subjects; ++s) {
    std::vector<const Exp2Trial*> mine;
    for (const auto* t : trials) {
      if (t->subject == s) mine.push_back(t);
    }
    for (std::size_t b = 0; b < mine.size(); b += static_cast<std::size_t>(block_size)) {
      const std::size_t e = std::min(mine.size(), b + static_cast<std::size_t>(block_size));
      std::size_t ok = 0;
      std::vector<double> bt;
      for (std::size_t i = b; i < e; ++i) {
        if (mine[i]->sel.correct()) {
          ++ok;
          bt.push_back(mine[i]->sel.decision_time);
        }
      }
      double v = 0.0;
      if (!bt.empty()) v = metrics::itr(3, static_cast<double>(ok) / static_cast<double>(e - b), metrics::mean_sd(bt).mean).bits_per_min;
      m.block_itr.push_back(v);
    }
  }
  if (!m.block_itr.empty()) m.itr = metrics::mean_sd(m.block_itr).mean;
  return m;
}

inline Exp2Result run_experiment2(const ExperimentConfig& cfg, unsigned threads = 0) {
  cfg.validate();
  const auto models = train_subjects(cfg, threads);
  std::vector<ar::Condition> conds;
  for (const auto& c : cfg.conditions) conds.push_back(ar::condition_from_string(c));

  Exp2Result r;
  for (int s = 0; s < cfg.n_subjects; ++s) {
    for (auto c : conds) {
      for (int k = 0; k < cfg.trials_per_condition; ++k) r.trials.push_back({s, k, c, {}});
    }
  }
  const auto targets = ar::default_targets(cfg.scene.n_targets);
  const int start = cfg.ar.start_cursor < 0 ? cfg.scene.n_targets / 2 : std::clamp(cfg.ar.start_cursor, 0, cfg.scene.n_targets - 1);
  parallel_for(
      r.trials.size(),
      [&](std::size_t i) {
        auto& t = r.trials[i];
        const auto seed = derive_seed(cfg.seed, kExp2Seed, t.subject, t.trial);
        const int cue = neighbour_cue(start, cfg.scene.n_targets, seed);
        t.sel = run_selection(models[static_cast<std::size_t>(t.subject)], cfg.profile(t.subject), t.condition, targets,
                              cue, cfg.ar, seed);
      },
      threads);

  for (auto c : conds) {
    std::vector<const Exp2Trial*> mine;
    for (const auto& t : r.trials) {
      if (t.condition == c) mine.push_back(&t);
    }
    r.conditions.push_back(summarize_exp2(c, mine, cfg.n_subjects, cfg.block_size));
  }

  if (std::find(conds.begin(), conds.end(), ar::Condition::Neurofeedback) != conds.end()) {
    const auto& nf = r.metrics_for(ar::Condition::Neurofeedback);
    const auto nf_sci = r.paired_sci(ar::Condition::Neurofeedback);
    std::vector<double> p_itr, p_sci;
    for (auto c : conds) {
      if (c == ar::Condition::Neurofeedback) continue;
      Comparison cmp;
      cmp.against = c;
      cmp.itr = metrics::sign_test(nf.block_itr, r.metrics_for(c).block_itr);
      std::vector<double> a, b;
      const auto other = r.paired_sci(c);
      for (std::size_t i = 0; i < nf_sci.size(); ++i) {
        if (!std::isnan(nf_sci[i]) && !std::isnan(other[i])) {
          a.push_back(nf_sci[i]);
          b.push_back(other[i]);
        }
      }
      cmp.sci = metrics::sign_test(a, b);
      p_itr.push_back(cmp.itr.p_value);
      p_sci.push_back(cmp.sci.p_value);
      r.comparisons.push_back(cmp);
    }
    const auto ri = metrics::holm(p_itr, 0.05), rs = metrics::holm(p_sci, 0.05);
    for (std::size_t i = 0; i < r.comparisons.size(); ++i) {
      r.comparisons[i].itr_reject = ri[i];
      r.comparisons[i].sci_reject = rs[i];
    }
  }
  return r;
}

inline void write_exp2(const std::filesystem::path& dir, const ExperimentConfig& cfg, const Exp2Result& r) {
  std::ostringstream trials, met, rep, events;
  trials << "subject,trial,condition,cue,selected,outcome,correct,censored,decision_time_s,t_end_s,sci,decisions,"
            "false_positives\n";
  events << "subject,trial,condition,t,event,value,detail\n";
  for (const auto& t : r.trials) {
    const auto& s = t.sel;
    const bool timeout = s.outcome == ar::Outcome::TimedOut;
    trials << t.subject << ',' << t.trial << ',' << ar::to_string(t.condition) << ',' << s.cue << ',' << s.selected << ','
           << (timeout ? "Timeout" : "Confirmed") << ',' << (s.correct() ? 1 : 0) << ',' << (timeout ? 1 : 0) << ','
           << fmt(s.decision_time) << ',' << fmt(s.t_end) << ',' << fmt(s.sci) << ',' << s.decisions << ','
           << s.false_positives << '\n';
    write_events(events, t.subject, t.trial, ar::to_string(t.condition), s.events);
  }
  met << "condition,trials,accuracy,decision_time_s,fpr,itr_bits_min,sci,sci_star,timeouts\n";
  for (const auto& m : r.conditions) {
    met << ar::to_string(m.condition) << ',' << m.trials << ',' << fmt(m.accuracy) << ',' << fmt(m.decision_time) << ','
        << fmt(m.fpr) << ',' << fmt(m.itr) << ',' << fmt(m.sci) << ',' << fmt(m.sci_star) << ',' << m.timeouts << '\n';
  }

  char line[256];
  rep << "Experiment 2: AR feedback conditions (" << cfg.n_subjects << " subjects x " << cfg.trials_per_condition
      << " trials per condition, sway gain g = " << fmt(cfg.subject.sway_gain, 2) << ", robot disabled)\n\n";
  std::snprintf(line, sizeof line, "%-14s %9s %9s %8s %15s %7s %7s\n", "Condition", "Acc. (%)", "Time (s)", "FPR (%)",
                "ITR (bits/min)", "SCI", "SCI*");
  rep << line;
  for (const auto& m : r.conditions) {
    std::snprintf(line, sizeof line, "%-14s %9s %9s %8s %15s %7s %7s\n", std::string(ar::to_string(m.condition)).c_str(),
                  fmt(100 * m.accuracy, 1).c_str(), fmt(m.decision_time, 2).c_str(), fmt(100 * m.fpr, 1).c_str(),
                  fmt(m.itr, 1).c_str(), fmt(m.sci, 3).c_str(), fmt(m.sci_star, 3).c_str());
    rep << line;
  }
  if (!r.comparisons.empty()) {
    rep << "\nNeurofeedback vs baselines (exact sign tests, Holm-corrected at 0.05):\n";
    for (const auto& c : r.comparisons) {
      std::snprintf(line, sizeof line, "  vs %-8s ITR blocks +%zu/-%zu/=%zu p=%.3g%s; SCI trials +%zu/-%zu/=%zu p=%.3g%s\n",
                    std::string(ar::to_string(c.against)).c_str(), c.itr.positive, c.itr.negative, c.itr.ties,
                    c.itr.p_value, c.itr_reject ? " *" : "", c.sci.positive, c.sci.negative, c.sci.ties, c.sci.p_value,
                    c.sci_reject ? " *" : "");
      rep << line;
    }
  }
  rep << "\nITR: M = 3, mean over blocks of " << cfg.block_size
      << " trials; block T = mean decision time of its correct trials.\n";
  rep << "SCI* = P * (1 - FPR) * (1 s / T), an artifact-defined composite.\n";
  rep << "Timeout trials are censored at the " << fmt(cfg.ar.decide_s, 1) << " s decide window.\n";

  write_text(dir / "trials.csv", trials.str());
  write_text(dir / "metrics.csv", met.str());
  write_text(dir / "report.txt", rep.str());
  write_text(dir / "events.csv", events.str());
  write_config_echo(dir, cfg);
}

// ---------------------------------------------------------------------------
// Experiment 3: the full loop. Select, confirm over the link, perceive, plan,
// grasp.

struct Exp3Trial {
  int subject = 0;
  int trial = 0;
  int cue_target = 0;
  int selected_target = -1;
  bool success = false;
  FailureClass failure = FailureClass::None;
  bool censored = false;
  double t_select = 0.0;
  double t_plan = 0.0;
  double t_exec = 0.0;
  double t_total = 0.0;
  double link_delay_s = 0.0;
  int link_attempts = 0;
  int regrasps = 0;
  double estimate_error_mm = kNan;
  bool rest_after = false;
  std::optional<robot::ExecutionLog> exec;
  std::vector<ar::ArEvent> events;
};

struct Exp3Result {
  std::vector<Exp3Trial> trials;
  handeye::CalibrationReport calibration;
  double gsr = 0.0;
  std::map<FailureClass, std::size_t> histogram;  // None counts successes
  std::optional<metrics::TimingSummary> timing;   // over successful trials
  std::optional<metrics::KaplanMeier> km;

  std::size_t failures(FailureClass f) const {
    const auto it = histogram.find(f);
    return it == histogram.end() ? 0 : it->second;
  }
};

inline constexpr std::array<FailureClass, 6> kFailureOrder = {
    FailureClass::None,          FailureClass::EegMisclassification, FailureClass::ArRobotMappingError,
    FailureClass::VisionFailure, FailureClass::IkFailure,            FailureClass::Timeout};

inline Pose true_eTc(const ExperimentConfig& cfg) {
  std::array<double, 7> r{};
  for (std::size_t i = 0; i < 7; ++i) r[i] = cfg.calibration.eTc_record[i];
  return Pose::from_record(r);
}

// Delivers the confirmation over the simulated link as an OSC frame with
// timeout and retries. Returns the decoded message and the delay, or nothing
// when every attempt was lost.
struct Delivery {
  std::optional<bridge::TargetMessage> msg;
  double delay_s = 0.0;
  int attempts = 0;
};

inline Delivery deliver_target(const bridge::TargetMessage& m, const ExperimentConfig& cfg, std::uint64_t seed) {
  bridge::SimulatedLink<bridge::Bytes> link(cfg.link, seed);
  Delivery d;
  for (int a = 0; a <= cfg.confirm_retries; ++a) {
    const double t0 = a * cfg.confirm_timeout_s;
    ++d.attempts;
    link.send(t0, bridge::encode_osc_target(m));
    const auto got = link.poll(t0 + cfg.confirm_timeout_s);
    if (!got.empty()) {
      d.msg = bridge::decode_osc_target(got.front().second);
      d.delay_s = got.front().first;
      return d;
    }
  }
  d.delay_s = (cfg.confirm_retries + 1) * cfg.confirm_timeout_s;
  return d;
}

inline Exp3Result run_experiment3(const ExperimentConfig& cfg, unsigned threads = 0) {
  cfg.validate();
  const auto models = train_subjects(cfg, threads);
  const Pose eTc = true_eTc(cfg);
  const robot::ArmModel arm;
  Exp3Result r;
  r.calibration = pipeline::calibrate_hand_eye(cfg, eTc, derive_seed(cfg.seed, kHandEyeSeed));
  const auto condition = ar::condition_from_string(cfg.exp3_condition);
  const pipeline::RobotContext ctx{cfg, arm, eTc, r.calibration.eTc};

  for (int s = 0; s < cfg.n_subjects; ++s) {
    for (int k = 0; k < cfg.trials_per_subject; ++k) {
      Exp3Trial t;
      t.subject = s;
      t.trial = k;
      t.rest_after = (k + 1) % 3 == 0 && k + 1 < cfg.trials_per_subject;
      r.trials.push_back(std::move(t));
    }
  }
  parallel_for(
      r.trials.size(),
      [&](std::size_t i) {
        auto& t = r.trials[i];
        const auto seed = derive_seed(cfg.seed, kExp3Seed, t.subject, t.trial);
        const auto scene = pipeline::make_scene(cfg.scene, derive_seed(seed, kSceneSeed));
        Rng cue_rng(derive_seed(seed, kCueSeed));
        const int cue = cue_rng.uniform_int(0, static_cast<int>(scene.objects.size()) - 1);
        t.cue_target = scene.objects[static_cast<std::size_t>(cue)].target_id;
        const auto sel = run_selection(models[static_cast<std::size_t>(t.subject)], cfg.profile(t.subject), condition,
                                       scene.targets(), cue, cfg.ar, seed);
        t.events = sel.events;
        t.t_select = sel.t_end;
        if (sel.outcome != ar::Outcome::Confirmed) {
          t.failure = FailureClass::Timeout;
        } else {
          const auto& chosen = scene.objects[static_cast<std::size_t>(sel.selected)];
          t.selected_target = chosen.target_id;
          const auto d = deliver_target({chosen.target_id, chosen.marker_id}, cfg, derive_seed(seed, kLinkSeed));
          t.link_attempts = d.attempts;
          t.link_delay_s = d.delay_s;
          std::optional<pipeline::SceneObject> obj;
          if (d.msg) {
            try {
              obj = scene.by_target(d.msg->target_id);
            } catch (const Error&) {
            }
          }
          FailureClass robot_failure = FailureClass::ArRobotMappingError;
          t.t_plan = d.delay_s;
          if (obj && obj->marker_id == d.msg->marker_id) {
            const auto rt = pipeline::run_robot_side(ctx, *obj, derive_seed(seed, kRobotSeed));
            t.t_plan += rt.t_plan;
            t.t_exec = rt.t_exec;
            t.regrasps = rt.exec.regrasp_count;
            if (rt.estimate_error_mm >= 0) t.estimate_error_mm = rt.estimate_error_mm;
            t.exec = rt.exec;
            robot_failure = rt.failure;
          }
          // The first faulting stage wins: EEG, then AR mapping, then robot.
          t.failure = sel.selected != cue ? FailureClass::EegMisclassification : robot_failure;
        }
        t.success = t.failure == FailureClass::None;
        t.censored = !t.success;
        t.t_total = t.t_select + t.t_plan + t.t_exec;
      },
      threads);

  std::vector<metrics::PhaseTimes> done;
  std::vector<double> durations;
  std::vector<bool> censored;
  std::size_t ok = 0;
  for (auto f : kFailureOrder) r.histogram[f] = 0;
  for (const auto& t : r.trials) {
    ++r.histogram[t.failure];
    durations.push_back(t.t_total);
    censored.push_back(t.censored);
    if (t.success) {
      ++ok;
      done.push_back({t.t_select, t.t_plan, t.t_exec});
    }
  }
  r.gsr = metrics::gsr(ok, r.trials.size());
  if (!done.empty()) r.timing = metrics::timing_summary(done);
  r.km = metrics::km_estimate(durations, censored);
  return r;
}

inline void write_exp3(const std::filesystem::path& dir, const ExperimentConfig& cfg, const Exp3Result& r) {
  std::ostringstream trials, met, rep, events, exec;
  trials << "subject,trial,cue_target,selected_target,outcome,failure,censored,t_select,t_plan,t_exec,t_total,"
            "link_attempts,regrasps,estimate_error_mm,rest_after\n";
  events << "subject,trial,condition,t,event,value,detail\n";
  robot::write_execution_csv_header(exec);
  for (std::size_t i = 0; i < r.trials.size(); ++i) {
    const auto& t = r.trials[i];
    trials << t.subject << ',' << t.trial << ',' << t.cue_target << ',' << t.selected_target << ','
           << (t.success ? "Success" : "Failure") << ',' << pipeline::to_string(t.failure) << ',' << (t.censored ? 1 : 0)
           << ',' << fmt(t.t_select) << ',' << fmt(t.t_plan) << ',' << fmt(t.t_exec) << ',' << fmt(t.t_total) << ','
           << t.link_attempts << ',' << t.regrasps << ',' << fmt(t.estimate_error_mm) << ',' << (t.rest_after ? 1 : 0)
           << '\n';
    write_events(events, t.subject, t.trial, cfg.exp3_condition, t.events);
    if (t.exec) robot::write_execution_csv(exec, static_cast<int>(i), *t.exec);
  }
  const std::size_t n = r.trials.size();
  met << "metric,value\n";
  met << "trials," << n << '\n';
  met << "gsr," << fmt(r.gsr) << '\n';
  for (auto f : kFailureOrder) {
    if (f == FailureClass::None) continue;
    met << "failures_" << pipeline::to_string(f) << ',' << r.failures(f) << '\n';
  }
  if (r.timing) {
    const auto& s = *r.timing;
    for (const auto& [name, v] : {std::pair{"t_select", s.select}, {"t_plan", s.plan}, {"t_exec", s.exec},
                                  {"t_total", s.total}}) {
      met << name << "_mean," << fmt(v.mean) << '\n' << name << "_sd," << fmt(v.sd) << '\n';
    }
  }
  met << "km_median_s," << fmt(r.km ? r.km->median() : kNan) << '\n';
  met << "handeye_reproj_px," << fmt(r.calibration.mean_reproj_px) << '\n';
  met << "handeye_repeatability_mm," << fmt(r.calibration.repeatability_mm) << '\n';

  char line[256];
  rep << "Experiment 3: closed-loop grasping (" << cfg.n_subjects << " subjects x " << cfg.trials_per_subject
      << " trials, condition " << cfg.exp3_condition << ", temporal filtering " << (cfg.vision.filter ? "on" : "off")
      << ")\n\n";
  rep << "Efficiency (mean +/- SD, s, successful trials)\n";
  if (r.timing) {
    const auto& s = *r.timing;
    for (const auto& [name, v] : {std::pair{"T_select", s.select}, {"T_plan", s.plan}, {"T_exec", s.exec},
                                  {"T_total", s.total}}) {
      std::snprintf(line, sizeof line, "  %-10s %7s +/- %s\n", name, fmt(v.mean, 2).c_str(), fmt(v.sd, 2).c_str());
      rep << line;
    }
  } else {
    rep << "  no completed trials\n";
  }
  rep << "\nPerformance outcomes (all trials)\n";
  std::snprintf(line, sizeof line, "  %-34s %s%%\n", "Success rate (GSR)", fmt(100 * r.gsr, 1).c_str());
  rep << line;
  for (auto f : kFailureOrder) {
    if (f == FailureClass::None) continue;
    const auto c = r.failures(f);
    const std::string label = "Failures (" + std::string(pipeline::to_string(f)) + ")";
    std::snprintf(line, sizeof line, "  %-34s %zu (%s%%)\n", label.c_str(), c,
                  fmt(100.0 * static_cast<double>(c) / static_cast<double>(n), 1).c_str());
    rep << line;
  }
  rep << "  GSR floor " << fmt(100 * cfg.gsr_floor, 1) << "%: " << (r.gsr >= cfg.gsr_floor ? "met" : "NOT met") << '\n';
  rep << "\nKaplan-Meier over completion times (failures censored)\n";
  if (r.km) {
    for (const auto& st : r.km->steps()) {
      std::snprintf(line, sizeof line, "  t=%8s  S=%.4f  at_risk=%zu  events=%zu\n", fmt(st.t, 2).c_str(), st.survival,
                    st.at_risk, st.events);
      rep << line;
    }
    rep << "  median " << fmt(r.km->median(), 2) << " s\n";
  }
  rep << "\nHand-eye calibration: mean reprojection " << fmt(r.calibration.mean_reproj_px, 3) << " px, repeatability "
      << fmt(r.calibration.repeatability_mm, 3) << " mm over " << r.calibration.n_motions << " motions\n";
  rep << "Rest breaks are scheduled after every third trial (rest_after in trials.csv).\n";

  write_text(dir / "trials.csv", trials.str());
  write_text(dir / "metrics.csv", met.str());
  write_text(dir / "report.txt", rep.str());
  write_text(dir / "events.csv", events.str());
  write_text(dir / "execution.csv", exec.str());
  write_config_echo(dir, cfg);
}

// Runs the configured experiment and writes its files into `dir`.
inline void run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& dir, unsigned threads = 0) {
  std::filesystem::create_directories(dir);
  switch (cfg.experiment) {
    case 1: write_exp1(dir, cfg, run_experiment1(cfg, threads)); break;
    case 2: write_exp2(dir, cfg, run_experiment2(cfg, threads)); break;
    case 3: write_exp3(dir, cfg, run_experiment3(cfg, threads)); break;
    default: throw Error(Errc::InvalidConfig, "experiment must be 1, 2 or 3");
  }
}

}  // namespace bciar::experiments
