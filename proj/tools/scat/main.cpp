#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "scat/scat.h"

namespace {

int finish(scat_status st) {
  if (st != SCAT_OK) std::fprintf(stderr, "error: %s\n", scat_last_error());
  return static_cast<int>(st);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stabilized conflict-optimization adversarial training for monocular depth"};
  app.require_subcommand(1);
  app.set_version_flag("--version",
                       std::string(scat_version()) + " (build " + scat_build_id() + ")");

  int rc = 0;

  // gen-data
  std::string gd_out;
  int gd_scenes = 0;
  uint64_t gd_seed = 0;
  bool gd_force = false;
  CLI::App* gen = app.add_subcommand("gen-data", "synthesize a scene dataset");
  gen->add_option("--out", gd_out, "output dataset directory")->required();
  gen->add_option("--scenes", gd_scenes, "number of scenes")->required();
  gen->add_option("--seed", gd_seed, "base seed");
  gen->add_flag("--force", gd_force, "overwrite a non-empty directory");
  gen->callback([&] {
    if (gd_scenes == 0)
      std::fprintf(stderr, "warning: --scenes 0 writes an empty dataset\n");
    const scat_gen_data_opts o{gd_out.c_str(), gd_scenes, gd_seed, gd_force ? 1 : 0};
    rc = finish(scat_gen_data(&o));
  });

  // train
  std::string tr_config, tr_data, tr_out;
  CLI::App* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", tr_config, "key = value config file (defaults when omitted)");
  train->add_option("--data", tr_data, "dataset directory")->required();
  train->add_option("--out", tr_out, "artifact directory")->required();
  train->callback([&] {
    const scat_train_opts o{tr_config.empty() ? nullptr : tr_config.c_str(), nullptr,
                            tr_data.c_str(), tr_out.c_str()};
    rc = finish(scat_train(&o));
  });

  // eval
  std::string ev_ckpt, ev_data, ev_corrupt = "none", ev_out, ev_baseline;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on the validation split");
  eval->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
  eval->add_option("--data", ev_data, "dataset directory")->required();
  eval->add_option("--corrupt", ev_corrupt, "all, none, or one corruption kind");
  eval->add_option("--out", ev_out, "metrics CSV path")->required();
  eval->add_option("--baseline", ev_baseline, "baseline checkpoint for mCE/mRR");
  eval->callback([&] {
    const scat_eval_opts o{ev_ckpt.c_str(), ev_data.c_str(), ev_corrupt.c_str(), ev_out.c_str(),
                           ev_baseline.empty() ? nullptr : ev_baseline.c_str()};
    rc = finish(scat_eval(&o));
  });

  // probe-sensitivity
  std::string ps_ckpt, ps_kappas = "0.1,0.3,0.7,1.0", ps_out;
  int ps_trials = 8;
  uint64_t ps_seed = 0;
  CLI::App* sens = app.add_subcommand("probe-sensitivity",
                                      "mean depth deviation under unit weight perturbations");
  sens->add_option("--checkpoint", ps_ckpt, "model checkpoint (fresh weights when omitted)");
  sens->add_option("--kappas", ps_kappas, "comma-separated stabilization scales");
  sens->add_option("--trials", ps_trials, "perturbation trials per scale");
  sens->add_option("--seed", ps_seed, "probe seed");
  sens->add_option("--out", ps_out, "output CSV path")->required();
  sens->callback([&] {
    const scat_probe_sensitivity_opts o{ps_ckpt.empty() ? nullptr : ps_ckpt.c_str(),
                                        ps_kappas.c_str(), ps_trials, ps_seed, ps_out.c_str()};
    rc = finish(scat_probe_sensitivity(&o));
  });

  // probe-gradients
  std::string pg_ckpt, pg_out;
  int pg_steps = 0;
  uint64_t pg_seed = 0;
  CLI::App* grad = app.add_subcommand("probe-gradients",
                                      "paired surgery-on/off runs logging gradient alignment");
  grad->add_option("--checkpoint", pg_ckpt, "starting checkpoint (fresh init when omitted)");
  grad->add_option("--steps", pg_steps, "steps per run")->required();
  grad->add_option("--seed", pg_seed, "probe seed");
  grad->add_option("--out", pg_out, "output CSV path")->required();
  grad->callback([&] {
    const scat_probe_gradients_opts o{pg_ckpt.empty() ? nullptr : pg_ckpt.c_str(), pg_steps,
                                      pg_seed, pg_out.c_str()};
    rc = finish(scat_probe_gradients(&o));
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  return rc;
}
