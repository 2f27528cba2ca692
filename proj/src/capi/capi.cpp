#include "scat/scat.h"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "core/trainer.hpp"
#include "scat_version.h"

extern "C" void openblas_set_num_threads(int);

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

thread_local std::string g_err;

struct DataFail : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UsageFail : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename F>
scat_status guard(F&& body) {
  g_err.clear();
  try {
    return body();
  } catch (const UsageFail& e) {
    g_err = e.what();
    return SCAT_USAGE;
  } catch (const scat::ConfigError& e) {
    g_err = e.what();
    return SCAT_CONFIG;
  } catch (const scat::CheckpointError& e) {
    g_err = e.what();
    return SCAT_DATA;
  } catch (const DataFail& e) {
    g_err = e.what();
    return SCAT_DATA;
  } catch (const scat::NumericError& e) {
    g_err = e.what();
    return SCAT_NUMERIC;
  } catch (const std::invalid_argument& e) {
    g_err = e.what();
    return SCAT_USAGE;
  } catch (const std::exception& e) {
    g_err = e.what();
    return SCAT_ERROR;
  }
}

void ensure_threads() {
  static const int n = [] {
    const char* env = std::getenv("SCAT_THREADS");
    if (!env || !*env) return 1;
    const int v = std::atoi(env);
    return v > 0 ? v : 1;
  }();
  openblas_set_num_threads(n);
}

std::string require(const char* value, const std::string& what) {
  if (!value || !*value) throw UsageFail(what + " is required");
  return value;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

class RunClock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }
  const std::string& started() const { return started_; }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
  std::string started_ = utc_now();
};

void write_run_manifest(const fs::path& dir, const std::string& command, const json& inputs,
                        const std::vector<std::string>& outputs, const RunClock& clock) {
  json j;
  j["command"] = command;
  j["inputs"] = inputs;
  j["outputs"] = outputs;
  j["version"] = SCAT_VERSION;
  j["build_id"] = SCAT_BUILD_ID;
  j["started_utc"] = clock.started();
  j["wall_seconds"] = clock.seconds();
  std::ofstream out(dir / "run_manifest.json", std::ios::trunc);
  if (!out) throw DataFail("cannot write " + (dir / "run_manifest.json").string());
  out << j.dump(2) << "\n";
}

std::vector<scat::SceneSample> load_split(const std::string& root, const std::string& split) {
  const fs::path mp = fs::path(root) / "manifest.txt";
  if (!fs::exists(mp)) throw DataFail("dataset manifest not found: " + mp.string());
  try {
    std::vector<scat::SceneSample> out;
    for (const auto& e : scat::read_manifest(mp.string()))
      if (e.dir.rfind(split + "/", 0) == 0)
        out.push_back(scat::load_scene((fs::path(root) / e.dir).string(), e.seed));
    return out;
  } catch (const DataFail&) {
    throw;
  } catch (const std::exception& e) {
    throw DataFail("cannot load dataset under " + root + ": " + e.what());
  }
}

scat::TrainState load_state(const std::string& path) {
  if (!fs::exists(path)) throw DataFail("checkpoint not found: " + path);
  return scat::load_checkpoint(path);
}

std::vector<double> parse_kappa_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      size_t pos = 0;
      const double k = std::stod(item, &pos);
      if (pos != item.size() || !(k > 0)) throw std::invalid_argument(item);
      out.push_back(k);
    } catch (const std::exception&) {
      throw UsageFail("bad kappa value `" + item + "`");
    }
  }
  if (out.empty()) throw UsageFail("empty kappa list");
  return out;
}

}  // namespace

extern "C" {

const char* scat_last_error(void) { return g_err.c_str(); }
const char* scat_version(void) { return SCAT_VERSION; }
const char* scat_build_id(void) { return SCAT_BUILD_ID; }

void scat_set_threads(int n) { openblas_set_num_threads(n > 0 ? n : 1); }

scat_status scat_gen_data(const scat_gen_data_opts* opts) {
  return guard([&]() -> scat_status {
    if (!opts) throw UsageFail("gen-data: null options");
    const std::string out_dir = require(opts->out_dir, "gen-data: --out");
    if (opts->scenes < 0) throw UsageFail("gen-data: --scenes must be >= 0");
    ensure_threads();
    RunClock clock;
    const fs::path out(out_dir);
    if (fs::exists(out) && !fs::is_empty(out) && !opts->force)
      throw DataFail("gen-data: `" + out_dir + "` is not empty (pass --force to overwrite)");
    if (opts->scenes == 0) {
      fs::create_directories(out);
      std::ofstream man(out / "manifest.txt", std::ios::trunc);
      man << "# scat-synth-1\n";
    } else {
      scat::dataset_build(opts->scenes, {0.8, 0.2}, out_dir, opts->seed, scat::default_camera());
    }
    write_run_manifest(out, "gen-data",
                       json{{"scenes", opts->scenes},
                            {"seed", opts->seed},
                            {"force", opts->force != 0},
                            {"split", {0.8, 0.2}}},
                       {"manifest.txt"}, clock);
    return SCAT_OK;
  });
}

scat_status scat_train(const scat_train_opts* opts) {
  return guard([&]() -> scat_status {
    if (!opts) throw UsageFail("train: null options");
    const std::string data_dir = require(opts->data_dir, "train: --data");
    const std::string out_dir = require(opts->out_dir, "train: --out");
    ensure_threads();
    RunClock clock;
    scat::TrainConfig cfg;
    if (opts->config_text)
      cfg = scat::parse_config_text(opts->config_text);
    else if (opts->config_path)
      cfg = scat::parse_config_file(opts->config_path);
    const auto scenes = load_split(data_dir, "train");
    if (scenes.empty()) throw DataFail("train: no training scenes under " + data_dir);
    scat::TrainState state(cfg, scenes.front().camera);
    fs::create_directories(out_dir);
    const fs::path out(out_dir);
    std::ofstream log(out / "train_log.csv", std::ios::trunc);
    std::ofstream stats(out / "grad_stats.csv", std::ios::trunc);
    const std::string last = (out / "checkpoint_last.ckpt").string();
    scat::train_run(state, scenes, &log, &stats,
                    [&](const scat::TrainState& s) { scat::save_checkpoint(s, last); });
    scat::save_checkpoint(state, (out / "checkpoint_final.ckpt").string());
    write_run_manifest(out, "train",
                       json{{"config", scat::config_to_text(cfg)},
                            {"data", data_dir},
                            {"seed", cfg.seed}},
                       {"checkpoint_final.ckpt", "checkpoint_last.ckpt", "train_log.csv",
                        "grad_stats.csv"},
                       clock);
    return SCAT_OK;
  });
}

scat_status scat_eval(const scat_eval_opts* opts) {
  return guard([&]() -> scat_status {
    if (!opts) throw UsageFail("eval: null options");
    const std::string ckpt = require(opts->checkpoint, "eval: --checkpoint");
    const std::string data_dir = require(opts->data_dir, "eval: --data");
    const std::string out_csv = require(opts->out_csv, "eval: --out");
    const std::string mode = opts->corrupt && *opts->corrupt ? opts->corrupt : "none";
    const bool all = mode == "all";
    scat::CorruptionKind only{};
    if (!all && mode != "none") {
      try {
        only = scat::corruption_from_string(mode);
      } catch (const std::exception&) {
        throw UsageFail("eval: unknown --corrupt value `" + mode + "`");
      }
    }
    if (opts->baseline && *opts->baseline && !all)
      throw UsageFail("eval: --baseline aggregates need --corrupt all");
    ensure_threads();
    RunClock clock;

    const scat::TrainState model = load_state(ckpt);
    const auto val = load_split(data_dir, "val");
    if (val.empty()) throw DataFail("eval: no validation scenes under " + data_dir);

    std::ostringstream csv;
    scat::write_metrics_header(csv);

    auto eval_rows = [&](const scat::TrainState& st, const std::string& tag,
                         std::vector<std::vector<scat::MetricsReport>>* grid) {
      const scat::MetricsReport clean = scat::evaluate_scenes(st, val);
      scat::append_metrics_row(csv, tag, "clean", 0, clean);
      if (mode == "none") return clean;
      for (const scat::CorruptionKind kind : scat::kAllCorruptions) {
        if (!all && kind != only) continue;
        std::vector<scat::MetricsReport> per_kind;
        for (int sev = 1; sev <= 3; ++sev) {
          const scat::CorruptionSpec spec{kind, sev};
          const scat::MetricsReport r = scat::evaluate_scenes(st, val, &spec);
          scat::append_metrics_row(csv, tag, scat::corruption_name(kind), sev, r);
          per_kind.push_back(r);
        }
        if (grid) grid->push_back(std::move(per_kind));
      }
      return clean;
    };

    std::vector<std::vector<scat::MetricsReport>> model_grid;
    const scat::MetricsReport clean_model = eval_rows(model, "model", all ? &model_grid : nullptr);
    if (opts->baseline && *opts->baseline) {
      const scat::TrainState base = load_state(opts->baseline);
      std::vector<std::vector<scat::MetricsReport>> base_grid;
      const scat::MetricsReport clean_base = eval_rows(base, "baseline", &base_grid);
      const scat::Aggregate agg =
          scat::corruption_aggregate(model_grid, base_grid, clean_model, clean_base);
      scat::append_aggregate_row(csv, "model", "mce", agg.mce);
      scat::append_aggregate_row(csv, "model", "mrr", agg.mrr);
    }

    const fs::path out(out_csv);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    std::ofstream f(out, std::ios::trunc);
    if (!f) throw DataFail("cannot write " + out_csv);
    f << csv.str();
    f.close();
    write_run_manifest(out.has_parent_path() ? out.parent_path() : fs::path("."), "eval",
                       json{{"checkpoint", ckpt},
                            {"baseline", opts->baseline ? opts->baseline : ""},
                            {"data", data_dir},
                            {"corrupt", mode}},
                       {out.filename().string()}, clock);
    return SCAT_OK;
  });
}

scat_status scat_probe_sensitivity(const scat_probe_sensitivity_opts* opts) {
  return guard([&]() -> scat_status {
    if (!opts) throw UsageFail("probe-sensitivity: null options");
    const std::string out_csv = require(opts->out_csv, "probe-sensitivity: --out");
    if (opts->trials < 1) throw UsageFail("probe-sensitivity: --trials must be >= 1");
    const std::vector<double> kappas =
        parse_kappa_list(opts->kappas && *opts->kappas ? opts->kappas : "0.1,0.3,0.7,1.0");
    ensure_threads();
    RunClock clock;

    scat::SdnParams weights;
    if (opts->checkpoint && *opts->checkpoint) {
      weights = load_state(opts->checkpoint).depth;
    } else {
      scat::TrainConfig cfg;
      cfg.seed = opts->seed;
      weights = scat::TrainState(cfg, scat::default_camera()).depth;
    }
    const scat::Tensor image =
        scat::generate_scene(scat::Rng::mix(opts->seed, 0x5CE9Eull), scat::default_camera())
            .frame_t;

    std::ostringstream csv;
    csv << "kappa,mean_deviation\n";
    char buf[64];
    for (const double k : kappas) {
      scat::SdnParams pk = weights;
      pk.kappa.assign(pk.kappa.size(), k);
      const double dev = scat::sdn_sensitivity(pk, image, opts->trials, opts->seed);
      std::snprintf(buf, sizeof buf, "%.17g,%.17g\n", k, dev);
      csv << buf;
    }

    const fs::path out(out_csv);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    std::ofstream f(out, std::ios::trunc);
    if (!f) throw DataFail("cannot write " + out_csv);
    f << csv.str();
    f.close();
    write_run_manifest(out.has_parent_path() ? out.parent_path() : fs::path("."),
                       "probe-sensitivity",
                       json{{"checkpoint", opts->checkpoint ? opts->checkpoint : ""},
                            {"kappas", kappas},
                            {"trials", opts->trials},
                            {"seed", opts->seed}},
                       {out.filename().string()}, clock);
    return SCAT_OK;
  });
}

scat_status scat_probe_gradients(const scat_probe_gradients_opts* opts) {
  return guard([&]() -> scat_status {
    if (!opts) throw UsageFail("probe-gradients: null options");
    const std::string out_csv = require(opts->out_csv, "probe-gradients: --out");
    if (opts->steps < 0) throw UsageFail("probe-gradients: --steps must be >= 0");
    ensure_threads();
    RunClock clock;

    std::ostringstream csv;
    csv << "mode,step,mean_cos,frac_neg";
    for (int b = 0; b < 20; ++b) {
      char col[16];
      std::snprintf(col, sizeof col, ",bin_%02d", b);
      csv << col;
    }
    csv << "\n";

    if (opts->steps > 0) {
      const bool from_ckpt = opts->checkpoint && *opts->checkpoint;
      const scat::CameraModel cam =
          from_ckpt ? load_state(opts->checkpoint).camera : scat::default_camera();
      std::vector<scat::SceneSample> scenes;
      for (int i = 0; i < 2; ++i)
        scenes.push_back(scat::generate_scene(scat::Rng::mix(opts->seed, 100 + i), cam));
      for (const bool cgs_on : {true, false}) {
        std::optional<scat::TrainState> st;
        if (from_ckpt) {
          st.emplace(scat::load_checkpoint(opts->checkpoint));
          st->config.epochs = st->epoch + opts->steps;  // two scenes, one batch per epoch
        } else {
          scat::TrainConfig cfg;
          cfg.seed = opts->seed;
          cfg.epochs = opts->steps;
          cfg.batch_size = 2;
          st.emplace(cfg, cam);
        }
        st->config.batch_size = 2;
        st->config.snapshot_every_steps = 1;
        st->config.enable_cgs = cgs_on;
        std::ostringstream stats;
        scat::train_run(*st, scenes, nullptr, &stats);
        std::istringstream lines(stats.str());
        std::string line;
        std::getline(lines, line);  // drop the per-run header
        while (std::getline(lines, line))
          if (!line.empty()) csv << (cgs_on ? "cgs_on," : "cgs_off,") << line << "\n";
      }
    }

    const fs::path out(out_csv);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    std::ofstream f(out, std::ios::trunc);
    if (!f) throw DataFail("cannot write " + out_csv);
    f << csv.str();
    f.close();
    write_run_manifest(out.has_parent_path() ? out.parent_path() : fs::path("."),
                       "probe-gradients",
                       json{{"checkpoint", opts->checkpoint ? opts->checkpoint : ""},
                            {"steps", opts->steps},
                            {"seed", opts->seed}},
                       {out.filename().string()}, clock);
    return SCAT_OK;
  });
}

struct scat_model {
  scat::TrainState state;
};

scat_status scat_model_load(const char* checkpoint_path, scat_model** out) {
  return guard([&]() -> scat_status {
    if (!out) throw UsageFail("model_load: null output handle");
    *out = nullptr;
    const std::string path = require(checkpoint_path, "model_load: checkpoint path");
    ensure_threads();
    *out = new scat_model{load_state(path)};
    return SCAT_OK;
  });
}

void scat_model_free(scat_model* m) { delete m; }

scat_status scat_model_info(const scat_model* m, int* width, int* height, int64_t* step,
                            int* epoch) {
  return guard([&]() -> scat_status {
    if (!m) throw UsageFail("model_info: null model");
    if (width) *width = m->state.camera.width;
    if (height) *height = m->state.camera.height;
    if (step) *step = m->state.step;
    if (epoch) *epoch = m->state.epoch;
    return SCAT_OK;
  });
}

scat_status scat_model_predict_depth(const scat_model* m, const float* image, int height,
                                     int width, float* out_depth) {
  return guard([&]() -> scat_status {
    if (!m || !image || !out_depth) throw UsageFail("predict_depth: null argument");
    if (height != m->state.camera.height || width != m->state.camera.width)
      throw UsageFail("predict_depth: frame size does not match the model camera");
    const int64_t n = 3LL * height * width;
    std::vector<double> data(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) data[static_cast<size_t>(i)] = image[i];
    const scat::Tensor depth =
        scat::predict_depth(m->state, scat::Tensor({1, 3, height, width}, std::move(data)));
    const auto& d = depth.data();
    for (size_t i = 0; i < d.size(); ++i) out_depth[i] = static_cast<float>(d[i]);
    return SCAT_OK;
  });
}

}  // extern "C"
