#include <csignal>
#include <cstdio>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "bciar/bciar.hpp"

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

}  // namespace

int main(int argc, char** argv) {
  using namespace bciar;

  CLI::App app{"Closed-loop BCI/AR grasp simulator"};
  app.require_subcommand(1);
  auto* run = app.add_subcommand("run", "run an experiment headless or serve a live session");

  int experiment = 0;
  std::string config_path, out_dir, condition, ablation, driver = "console";
  std::uint64_t seed = 0;
  bool headless = false;
  int serve_port = -1;
  unsigned threads = 0;

  run->add_option("--experiment", experiment, "experiment number")->required()->check(CLI::Range(1, 3));
  run->add_option("--config", config_path, "JSON config overriding the defaults")->check(CLI::ExistingFile);
  auto* seed_opt = run->add_option("--seed", seed, "master seed");
  run->add_option("--out", out_dir, "output directory");
  auto* headless_flag = run->add_flag("--headless", headless, "run the batch without a console (default)");
  run->add_option("--serve", serve_port, "serve a live session on this port")->excludes(headless_flag);
  run->add_option("--ablation", ablation, "ablation toggle")->check(CLI::IsMember({"no-filter"}));
  run->add_option("--condition", condition, "AR condition for Exp-3 or a live session");
  run->add_option("--driver", driver, "live session driver")->check(CLI::IsMember({"console", "simulated"}));
  run->add_option("--threads", threads, "worker threads for headless batches (0 = all cores)");

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg = config_path.empty() ? ExperimentConfig{} : load_config(config_path);
    cfg.experiment = experiment;
    if (*seed_opt) cfg.seed = seed;
    if (ablation == "no-filter") cfg.vision.filter = false;
    if (!condition.empty()) {
      ar::condition_from_string(condition);
      if (serve_port < 0 && experiment != 3) {
        throw Error(Errc::InvalidArgument, "--condition applies to Exp-3 or a served session");
      }
      cfg.exp3_condition = condition;
    }
    cfg.validate();

    if (serve_port >= 0) {
      session::SessionSpec spec;
      spec.experiment = experiment;
      spec.seed = cfg.seed;
      spec.condition = ar::condition_from_string(condition.empty() ? cfg.exp3_condition : condition);
      spec.driver = session::driver_from_string(driver);
      bridge::BridgeServer server(cfg, spec, {.port = serve_port});
      const int port = server.start();
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "serving on http://127.0.0.1:" << port << " (" << session::to_string(spec.driver) << " driver)\n"
                << std::flush;
      while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
      server.stop();
      return 0;
    }

    if (out_dir.empty()) throw Error(Errc::InvalidArgument, "--out is required in headless mode");
    experiments::run_experiment(cfg, out_dir, threads);
    std::cout << std::ifstream(std::filesystem::path(out_dir) / "report.txt").rdbuf();
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
