#pragma once

// AR target-selection state machine: Prepare -> Decide -> Confirm -> Execute,
// cursor over 3-5 targets, sway feedback under four display conditions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "bciar/error.hpp"
#include "bciar/mi_decoder.hpp"
#include "bciar/rng.hpp"

namespace bciar::ar {

using eeg::Command;

enum class Condition { NoAr, Static, Sham, Neurofeedback };
inline constexpr std::array<Condition, 4> kAllConditions = {Condition::NoAr, Condition::Static, Condition::Sham,
                                                            Condition::Neurofeedback};

inline std::string_view to_string(Condition c) {
  switch (c) {
    case Condition::NoAr: return "NoAr";
    case Condition::Static: return "Static";
    case Condition::Sham: return "Sham";
    case Condition::Neurofeedback: return "Neurofeedback";
  }
  return "?";
}

inline Condition condition_from_string(std::string_view s) {
  for (auto c : kAllConditions) {
    if (s == to_string(c)) return c;
  }
  if (s == "no-ar" || s == "noar") return Condition::NoAr;
  if (s == "static") return Condition::Static;
  if (s == "sham") return Condition::Sham;
  if (s == "neurofeedback" || s == "nf") return Condition::Neurofeedback;
  throw Error(Errc::InvalidArgument, "unknown condition: " + std::string(s));
}

enum class Phase { Prepare, Decide, Confirm, Execute };

inline std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::Prepare: return "Prepare";
    case Phase::Decide: return "Decide";
    case Phase::Confirm: return "Confirm";
    case Phase::Execute: return "Execute";
  }
  return "?";
}

enum class Outcome { Pending, Confirmed, TimedOut };

struct Target {
  int target_id;
  int marker_id;
};

// Critically damped tracker x'' = w^2 (u - x) - 2 w x'. Advanced with the
// exact solution for input held constant over the step.
struct SwayDynamics {
  double omega = 8.0;
  double amplitude = 0.25;
  double x = 0.0;
  double v = 0.0;

  void step(double u, double dt) {
    const double e0 = x - u;
    const double c = v + omega * e0;
    const double decay = std::exp(-omega * dt);
    x = u + (e0 + c * dt) * decay;
    v = (v - omega * c * dt) * decay;
  }
};

struct ArConfig {
  double prepare_s = 2.0;
  double decide_s = 6.0;
  double lift_entry_s = 0.4;   // Lift argmax held this long in Decide enters Confirm
  double lift_dwell_s = 3.0;   // Lift held this long in Confirm locks the target
  double lift_grace_s = 0.5;   // Lift may drop out this long in Confirm
  double confirm_window_s = 5.0;
  double omega = 8.0;
  double amplitude = 0.25;
  double visible_sway = 0.02;  // |sway_x| above which feedback counts as seen
  int start_cursor = -1;       // -1 = middle slot
  // Refractory spans one decoder window so a single imagery episode cannot
  // step the cursor twice.
  mi::DwellConfig dwell{0.5, 0.4, 3.0, 1.0};
};

struct ArState {
  std::vector<Target> targets;
  int cursor = 0;
  double sway_x = 0.0;
  Condition condition = Condition::Neurofeedback;
  Phase phase = Phase::Prepare;
  double phase_clock = 0.0;
  double decide_clock = 0.0;  // Decide time only, across Confirm aborts
  double t = 0.0;
  Outcome outcome = Outcome::Pending;
  double lift_clock = 0.0;    // Lift run in Decide, or accumulated Lift time in Confirm
  double lift_lost = 0.0;
};

enum class EventKind { Condition, PhaseChange, CursorMove, ConfirmAbort, TargetConfirmed, Timeout };

inline std::string_view to_string(EventKind k) {
  switch (k) {
    case EventKind::Condition: return "condition";
    case EventKind::PhaseChange: return "phase";
    case EventKind::CursorMove: return "cursor";
    case EventKind::ConfirmAbort: return "confirm_abort";
    case EventKind::TargetConfirmed: return "confirmed";
    case EventKind::Timeout: return "timeout";
  }
  return "?";
}

struct ArEvent {
  double t;
  EventKind kind;
  int value;  // cursor, target_id or condition index depending on kind
  std::string detail;
};

struct TargetConfirmed {
  int target_id;
  int marker_id;
};

class ArLoop {
 public:
  ArLoop(std::vector<Target> targets, Condition condition, std::uint64_t seed, ArConfig cfg = {})
      : cfg_(cfg), commander_(cfg.dwell) {
    const int n = static_cast<int>(targets.size());
    if (n < 3 || n > 5) {
      throw Error(Errc::TargetCountOutOfRange, "need 3-5 targets, got " + std::to_string(n));
    }
    sway_.omega = cfg_.omega;
    sway_.amplitude = cfg_.amplitude;
    state_.targets = std::move(targets);
    state_.condition = condition;
    state_.cursor = cfg_.start_cursor < 0 ? n / 2 : std::clamp(cfg_.start_cursor, 0, n - 1);
    Rng rng(derive_seed(seed, 0x5A4Du));
    for (auto& d : sham_dirs_) d = rng.bernoulli(0.5) ? 1 : -1;
    log_.push_back({0.0, EventKind::Condition, static_cast<int>(condition), std::string(to_string(condition))});
  }

  const ArState& state() const { return state_; }
  const ArConfig& config() const { return cfg_; }
  const std::vector<ArEvent>& log() const { return log_; }
  const SwayDynamics& sway() const { return sway_; }
  bool done() const { return state_.outcome != Outcome::Pending; }
  const Target& current_target() const { return state_.targets[static_cast<std::size_t>(state_.cursor)]; }

  // Direction of the pre-drawn Sham sway at step k (seed-determined).
  int sham_direction(std::size_t k) const { return sham_dirs_[k % sham_dirs_.size()]; }

  // Sway is direction-congruent when it is visible and points where the user
  // intends to move. Only the Neurofeedback display couples sway to intent.
  bool congruent(int intended_dir) const {
    if (state_.condition != Condition::Neurofeedback || state_.phase != Phase::Decide || intended_dir == 0) {
      return false;
    }
    return std::abs(state_.sway_x) > cfg_.visible_sway && (state_.sway_x > 0) == (intended_dir > 0);
  }

  std::vector<ArEvent> step(const mi::ClassifierOutput& out, double dt) {
    if (!(dt > 0.0)) throw Error(Errc::InvalidArgument, "dt must be positive");
    std::vector<ArEvent> ev;
    if (done()) return ev;
    state_.t += dt;
    state_.phase_clock += dt;

    switch (state_.phase) {
      case Phase::Prepare:
        if (state_.phase_clock >= cfg_.prepare_s - 1e-9) enter(Phase::Decide, ev);
        break;
      case Phase::Decide: step_decide(out, dt, ev); break;
      case Phase::Confirm: step_confirm(out, dt, ev); break;
      case Phase::Execute: break;
    }
    update_sway(out, dt);
    log_.insert(log_.end(), ev.begin(), ev.end());
    return ev;
  }

  TargetConfirmed confirm() {
    if (state_.phase != Phase::Confirm) {
      throw Error(Errc::NotInConfirmPhase, "confirm requires Confirm phase, current " + std::string(to_string(state_.phase)));
    }
    if (state_.lift_clock < cfg_.lift_dwell_s - 1e-9) {
      throw Error(Errc::NotInConfirmPhase, "lift dwell not satisfied");
    }
    const Target& tg = current_target();
    state_.outcome = Outcome::Confirmed;
    state_.phase = Phase::Execute;
    state_.phase_clock = 0.0;
    sway_.x = sway_.v = 0.0;
    state_.sway_x = 0.0;
    return {tg.target_id, tg.marker_id};
  }

 private:
  void enter(Phase p, std::vector<ArEvent>& ev) {
    state_.phase = p;
    state_.phase_clock = 0.0;
    state_.lift_clock = 0.0;
    state_.lift_lost = 0.0;
    if (p == Phase::Decide) commander_.reset();
    ev.push_back({state_.t, EventKind::PhaseChange, state_.cursor, std::string(to_string(p))});
  }

  void step_decide(const mi::ClassifierOutput& out, double dt, std::vector<ArEvent>& ev) {
    state_.decide_clock += dt;
    if (auto c = commander_.push(state_.decide_clock, out)) {
      if (c->command == Command::Left || c->command == Command::Right) {
        const int n = static_cast<int>(state_.targets.size());
        const int next = std::clamp(state_.cursor + (c->command == Command::Right ? 1 : -1), 0, n - 1);
        const bool moved = next != state_.cursor;
        state_.cursor = next;
        ++sham_index_;
        ev.push_back({state_.t, EventKind::CursorMove, state_.cursor,
                      std::string(eeg::to_string(c->command)) + (moved ? "" : " clamped")});
      }
    }
    state_.lift_clock = out.label == Command::Lift ? state_.lift_clock + dt : 0.0;
    if (state_.lift_clock >= cfg_.lift_entry_s - 1e-9) {
      enter(Phase::Confirm, ev);
      return;
    }
    if (state_.decide_clock >= cfg_.decide_s - 1e-9) {
      state_.outcome = Outcome::TimedOut;
      ev.push_back({state_.t, EventKind::Timeout, state_.cursor, "decide window exceeded"});
    }
  }

  void step_confirm(const mi::ClassifierOutput& out, double dt, std::vector<ArEvent>& ev) {
    if (out.label == Command::Lift) {
      state_.lift_clock += dt;
      state_.lift_lost = 0.0;
    } else {
      state_.lift_lost += dt;
    }
    if (state_.lift_clock >= cfg_.lift_dwell_s - 1e-9) {
      const auto tc = confirm();
      ev.push_back({state_.t, EventKind::TargetConfirmed, tc.target_id, "marker " + std::to_string(tc.marker_id)});
      ev.push_back({state_.t, EventKind::PhaseChange, state_.cursor, std::string(to_string(Phase::Execute))});
      return;
    }
    if (state_.lift_lost > cfg_.lift_grace_s + 1e-9 || state_.phase_clock > cfg_.confirm_window_s + 1e-9) {
      ev.push_back({state_.t, EventKind::ConfirmAbort, state_.cursor, "lift not sustained"});
      enter(Phase::Decide, ev);
    }
  }

  void update_sway(const mi::ClassifierOutput& out, double dt) {
    if (state_.phase == Phase::Execute) return;
    double u = 0.0;
    if (state_.phase == Phase::Decide) {
      if (state_.condition == Condition::Neurofeedback) {
        u = sway_.amplitude * out.s_t;
      } else if (state_.condition == Condition::Sham) {
        // Same magnitude and timing as Neurofeedback, mirrored by a seeded
        // sign that is redrawn at every lateral command.
        u = sway_.amplitude * out.s_t * sham_direction(sham_index_);
      }
    }
    if (state_.condition == Condition::Static || state_.condition == Condition::NoAr) {
      sway_.x = sway_.v = 0.0;
    } else {
      sway_.step(u, dt);
      sway_.x = std::clamp(sway_.x, -0.5, 0.5);
    }
    state_.sway_x = sway_.x;
  }

  ArConfig cfg_;
  ArState state_;
  SwayDynamics sway_;
  mi::DwellCommander commander_;
  std::array<int, 64> sham_dirs_{};
  std::size_t sham_index_ = 0;
  std::vector<ArEvent> log_;
};

inline std::vector<Target> default_targets(int n) {
  std::vector<Target> t;
  for (int i = 0; i < n; ++i) t.push_back({i, 10 + i});
  return t;
}

inline ArLoop init_scene(int n_targets, Condition condition, std::uint64_t seed, ArConfig cfg = {}) {
  if (n_targets < 3 || n_targets > 5) {
    throw Error(Errc::TargetCountOutOfRange, "need 3-5 targets, got " + std::to_string(n_targets));
  }
  return ArLoop(default_targets(n_targets), condition, seed, cfg);
}

inline void write_events_csv_header(std::ostream& out) { out << "t,event,value,detail\n"; }

inline void write_event_csv(std::ostream& out, const ArEvent& e, double t_offset = 0.0) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", e.t + t_offset);
  out << buf << ',' << to_string(e.kind) << ',' << e.value << ',' << e.detail << '\n';
}

}  // namespace bciar::ar
