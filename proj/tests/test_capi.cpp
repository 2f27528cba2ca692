#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "scat/scat.h"

namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const fs::path& p) {
  std::ifstream f(p);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(f, line)) out.push_back(line);
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(item);
  return out;
}

const char* kModelConfig =
    "epochs = 50\n"
    "batch_size = 2\n"
    "seed = 3\n"
    "lr_theta = 3e-3\n"
    "use_adam = true\n"
    "smoothness_weight = 0.05\n"
    "enable_ada = false\n"
    "enable_cgs = false\n";

struct Env {
  fs::path root, ds, model_dir;
  scat_status ds_st = SCAT_ERROR;
  scat_status train_st = SCAT_ERROR;
  std::string ckpt;
};

const Env& env() {
  static const Env e = [] {
    Env v;
    v.root = fs::temp_directory_path() / "scat_capi_work";
    fs::remove_all(v.root);
    fs::create_directories(v.root);
    v.ds = v.root / "ds";
    const std::string ds = v.ds.string();
    const scat_gen_data_opts g{ds.c_str(), 5, 7, 0};
    v.ds_st = scat_gen_data(&g);
    v.model_dir = v.root / "model";
    const std::string dsdir = v.ds.string(), outdir = v.model_dir.string();
    const scat_train_opts t{nullptr, kModelConfig, dsdir.c_str(), outdir.c_str()};
    v.train_st = scat_train(&t);
    v.ckpt = (v.model_dir / "checkpoint_final.ckpt").string();
    return v;
  }();
  return e;
}

}  // namespace

TEST_CASE("version and build id are exposed") {
  CHECK(scat_version() != nullptr);
  CHECK(std::string(scat_version()).find('.') != std::string::npos);
  CHECK(scat_build_id() != nullptr);
  CHECK(std::string(scat_build_id()).size() >= 8);
}

TEST_CASE("gen-data writes a dataset and is reproducible") {
  const Env& e = env();
  REQUIRE(e.ds_st == SCAT_OK);
  CHECK(fs::exists(e.ds / "manifest.txt"));
  CHECK(fs::exists(e.ds / "run_manifest.json"));
  const auto manifest = lines_of(e.ds / "manifest.txt");
  REQUIRE(manifest.size() == 6);  // header + 5 scenes
  CHECK(manifest[0] == "# scat-synth-1");

  const fs::path again = e.root / "ds_again";
  const std::string dir = again.string();
  const scat_gen_data_opts g{dir.c_str(), 5, 7, 0};
  REQUIRE(scat_gen_data(&g) == SCAT_OK);
  CHECK(slurp(again / "manifest.txt") == slurp(e.ds / "manifest.txt"));
  for (const auto& entry : fs::recursive_directory_iterator(e.ds)) {
    if (!entry.is_regular_file() || entry.path().filename() == "run_manifest.json") continue;
    const fs::path rel = fs::relative(entry.path(), e.ds);
    INFO(rel.string());
    CHECK(slurp(again / rel) == slurp(entry.path()));
  }
}

TEST_CASE("gen-data argument and directory errors") {
  const Env& e = env();
  REQUIRE(e.ds_st == SCAT_OK);

  CHECK(scat_gen_data(nullptr) == SCAT_USAGE);

  scat_gen_data_opts g{nullptr, 3, 0, 0};
  CHECK(scat_gen_data(&g) == SCAT_USAGE);
  CHECK(std::string(scat_last_error()).find("--out") != std::string::npos);

  const std::string ds = e.ds.string();
  g = {ds.c_str(), -1, 0, 0};
  CHECK(scat_gen_data(&g) == SCAT_USAGE);

  g = {ds.c_str(), 2, 0, 0};
  CHECK(scat_gen_data(&g) == SCAT_DATA);
  CHECK(std::string(scat_last_error()).find("not empty") != std::string::npos);

  const fs::path forced = e.root / "ds_forced";
  fs::create_directories(forced);
  std::ofstream(forced / "junk.txt") << "x\n";
  const std::string fdir = forced.string();
  g = {fdir.c_str(), 2, 1, 1};
  CHECK(scat_gen_data(&g) == SCAT_OK);
  CHECK(fs::exists(forced / "manifest.txt"));
}

TEST_CASE("gen-data with zero scenes writes an empty manifest") {
  const Env& e = env();
  const fs::path dir = e.root / "ds_empty";
  const std::string d = dir.string();
  const scat_gen_data_opts g{d.c_str(), 0, 0, 0};
  REQUIRE(scat_gen_data(&g) == SCAT_OK);
  CHECK(slurp(dir / "manifest.txt") == "# scat-synth-1\n");
  CHECK(fs::exists(dir / "run_manifest.json"));
}

TEST_CASE("train produces checkpoints, logs, and a run manifest") {
  const Env& e = env();
  REQUIRE(e.ds_st == SCAT_OK);
  REQUIRE(e.train_st == SCAT_OK);
  CHECK(fs::exists(e.model_dir / "checkpoint_final.ckpt"));
  CHECK(fs::exists(e.model_dir / "checkpoint_last.ckpt"));
  const auto log = lines_of(e.model_dir / "train_log.csv");
  REQUIRE(log.size() == 101);  // header + 50 epochs x 2 steps
  CHECK(log[0] == "step,L_p,L_AD,mean_cos,frac_neg,grad_norm_theta,grad_norm_phi");
  CHECK(lines_of(e.model_dir / "grad_stats.csv").size() >= 1);

  const nlohmann::json j = nlohmann::json::parse(slurp(e.model_dir / "run_manifest.json"));
  CHECK(j["command"] == "train");
  CHECK(j["wall_seconds"].get<double>() > 0.0);
  const std::string cfg = j["inputs"]["config"].get<std::string>();
  std::istringstream cfg_lines(cfg);
  std::string line;
  bool kappa_is_default = false;
  while (std::getline(cfg_lines, line))
    if (line.rfind("kappa = ", 0) == 0) kappa_is_default = std::stod(line.substr(8)) == 0.7;
  CHECK(kappa_is_default);
  CHECK(cfg.find("epsilon_m = 135") != std::string::npos);
  CHECK(j["build_id"].get<std::string>() == scat_build_id());
}

TEST_CASE("train is deterministic for a fixed config and seed") {
  const Env& e = env();
  REQUIRE(e.ds_st == SCAT_OK);
  const char* cfg = "epochs = 2\nbatch_size = 2\nsample_j = 2\nepsilon_m = 40\nseed = 11\n";
  const std::string ds = e.ds.string();
  std::string a = (e.root / "det_a").string(), b = (e.root / "det_b").string();
  const scat_train_opts ta{nullptr, cfg, ds.c_str(), a.c_str()};
  const scat_train_opts tb{nullptr, cfg, ds.c_str(), b.c_str()};
  REQUIRE(scat_train(&ta) == SCAT_OK);
  REQUIRE(scat_train(&tb) == SCAT_OK);
  CHECK(slurp(fs::path(a) / "train_log.csv") == slurp(fs::path(b) / "train_log.csv"));
  CHECK(slurp(fs::path(a) / "checkpoint_final.ckpt") ==
        slurp(fs::path(b) / "checkpoint_final.ckpt"));
}

TEST_CASE("train rejects bad configs and missing data") {
  const Env& e = env();
  const std::string ds = e.ds.string(), out = (e.root / "never").string();

  scat_train_opts t{nullptr, "epochs = 1\nwarp_speed = 9\n", ds.c_str(), out.c_str()};
  CHECK(scat_train(&t) == SCAT_CONFIG);
  CHECK(std::string(scat_last_error()).find("unknown key") != std::string::npos);

  t = {nullptr, "epochs\n", ds.c_str(), out.c_str()};
  CHECK(scat_train(&t) == SCAT_CONFIG);
  CHECK(std::string(scat_last_error()).find("line 1") != std::string::npos);

  const std::string nodir = (e.root / "no_such_dataset").string();
  t = {nullptr, "epochs = 1\n", nodir.c_str(), out.c_str()};
  CHECK(scat_train(&t) == SCAT_DATA);

  t = {nullptr, "epochs = 1\n", ds.c_str(), nullptr};
  CHECK(scat_train(&t) == SCAT_USAGE);
}

TEST_CASE("eval emits the expected row counts per corruption mode") {
  const Env& e = env();
  REQUIRE(e.train_st == SCAT_OK);
  const std::string ds = e.ds.string();

  auto rows = [&](const char* corrupt, const char* name, const char* baseline) {
    const std::string out = (e.root / name).string();
    const scat_eval_opts o{e.ckpt.c_str(), ds.c_str(), corrupt, out.c_str(), baseline};
    REQUIRE(scat_eval(&o) == SCAT_OK);
    return lines_of(out);
  };

  CHECK(rows("none", "ev_none.csv", nullptr).size() == 2);
  const auto kind = rows("blur", "ev_blur.csv", nullptr);
  CHECK(kind.size() == 5);  // header + clean + 3 severities
  CHECK(split_csv(kind[2])[1] == "blur");
  CHECK(rows("all", "ev_all.csv", nullptr).size() == 20);  // header + clean + 6x3

  const auto with_base = rows("all", "ev_base.csv", e.ckpt.c_str());
  REQUIRE(with_base.size() == 41);  // header + 2x19 rows + mce + mrr
  bool saw_mce = false;
  for (const auto& line : with_base) {
    const auto f = split_csv(line);
    if (f.size() >= 4 && f[0] == "model" && f[1] == "mce") {
      saw_mce = true;
      CHECK(std::stod(f[3]) == 100.0);  // self-baseline: exact by construction
    }
  }
  CHECK(saw_mce);
}

TEST_CASE("eval argument errors") {
  const Env& e = env();
  REQUIRE(e.train_st == SCAT_OK);
  const std::string ds = e.ds.string(), out = (e.root / "ev_err.csv").string();

  scat_eval_opts o{e.ckpt.c_str(), ds.c_str(), "solar_flare", out.c_str(), nullptr};
  CHECK(scat_eval(&o) == SCAT_USAGE);
  CHECK(std::string(scat_last_error()).find("solar_flare") != std::string::npos);

  o = {e.ckpt.c_str(), ds.c_str(), "none", out.c_str(), e.ckpt.c_str()};
  CHECK(scat_eval(&o) == SCAT_USAGE);

  const std::string missing = (e.root / "missing.ckpt").string();
  o = {missing.c_str(), ds.c_str(), "none", out.c_str(), nullptr};
  CHECK(scat_eval(&o) == SCAT_DATA);
  CHECK(std::string(scat_last_error()).find("checkpoint not found") != std::string::npos);
}

TEST_CASE("probe-sensitivity writes one row per kappa") {
  const Env& e = env();
  const std::string out = (e.root / "sens.csv").string();
  scat_probe_sensitivity_opts o{nullptr, "0.1,0.7", 2, 5, out.c_str()};
  REQUIRE(scat_probe_sensitivity(&o) == SCAT_OK);
  auto rows = lines_of(out);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == "kappa,mean_deviation");
  for (size_t i = 1; i < rows.size(); ++i) {
    const auto f = split_csv(rows[i]);
    REQUIRE(f.size() == 2);
    CHECK(std::isfinite(std::stod(f[1])));
    CHECK(std::stod(f[1]) >= 0.0);
  }

  o = {e.ckpt.c_str(), "0.7", 2, 5, out.c_str()};
  REQUIRE(e.train_st == SCAT_OK);
  REQUIRE(scat_probe_sensitivity(&o) == SCAT_OK);
  CHECK(lines_of(out).size() == 2);

  o = {nullptr, "0.1,zap", 2, 5, out.c_str()};
  CHECK(scat_probe_sensitivity(&o) == SCAT_USAGE);
  o = {nullptr, "0.1", 0, 5, out.c_str()};
  CHECK(scat_probe_sensitivity(&o) == SCAT_USAGE);
}

TEST_CASE("probe-gradients emits paired rows and is deterministic") {
  const Env& e = env();
  const std::string out0 = (e.root / "grad0.csv").string();
  scat_probe_gradients_opts o{nullptr, 0, 9, out0.c_str()};
  REQUIRE(scat_probe_gradients(&o) == SCAT_OK);
  const auto empty = lines_of(out0);
  REQUIRE(empty.size() == 1);
  CHECK(empty[0].rfind("mode,step,mean_cos,frac_neg,bin_00", 0) == 0);

  const std::string out1 = (e.root / "grad1.csv").string();
  const std::string out2 = (e.root / "grad2.csv").string();
  o = {nullptr, 2, 9, out1.c_str()};
  REQUIRE(scat_probe_gradients(&o) == SCAT_OK);
  o = {nullptr, 2, 9, out2.c_str()};
  REQUIRE(scat_probe_gradients(&o) == SCAT_OK);
  CHECK(slurp(out1) == slurp(out2));

  const auto rows = lines_of(out1);
  REQUIRE(rows.size() == 5);  // header + 2 steps x 2 modes
  int on = 0, off = 0;
  for (size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].rfind("cgs_on,", 0) == 0) ++on;
    if (rows[i].rfind("cgs_off,", 0) == 0) ++off;
  }
  CHECK(on == 2);
  CHECK(off == 2);

  o = {nullptr, -1, 9, out1.c_str()};
  CHECK(scat_probe_gradients(&o) == SCAT_USAGE);
}

TEST_CASE("model load, info, and depth prediction") {
  const Env& e = env();
  REQUIRE(e.train_st == SCAT_OK);

  scat_model* m = nullptr;
  REQUIRE(scat_model_load(e.ckpt.c_str(), &m) == SCAT_OK);
  REQUIRE(m != nullptr);

  int w = 0, h = 0, epoch = 0;
  int64_t step = 0;
  REQUIRE(scat_model_info(m, &w, &h, &step, &epoch) == SCAT_OK);
  CHECK(w == 192);
  CHECK(h == 64);
  CHECK(step == 100);
  CHECK(epoch == 50);

  std::vector<float> image(3 * h * w);
  for (size_t i = 0; i < image.size(); ++i)
    image[i] = static_cast<float>(i % 97) / 96.0f;
  std::vector<float> depth(static_cast<size_t>(h) * w, -1.0f);
  REQUIRE(scat_model_predict_depth(m, image.data(), h, w, depth.data()) == SCAT_OK);
  for (const float d : depth) {
    CHECK(std::isfinite(d));
    CHECK(d > 0.0f);
  }
  std::vector<float> depth2(depth.size());
  REQUIRE(scat_model_predict_depth(m, image.data(), h, w, depth2.data()) == SCAT_OK);
  CHECK(depth == depth2);

  CHECK(scat_model_predict_depth(m, image.data(), h + 1, w, depth.data()) == SCAT_USAGE);
  CHECK(scat_model_predict_depth(nullptr, image.data(), h, w, depth.data()) == SCAT_USAGE);
  scat_model_free(m);
  scat_model_free(nullptr);

  scat_model* bad = reinterpret_cast<scat_model*>(&w);
  const std::string missing = (e.root / "missing.ckpt").string();
  CHECK(scat_model_load(missing.c_str(), &bad) == SCAT_DATA);
  CHECK(bad == nullptr);
  CHECK(scat_model_load(e.ckpt.c_str(), nullptr) == SCAT_USAGE);
}

TEST_CASE("last error clears on success") {
  const Env& e = env();
  const scat_gen_data_opts bad{nullptr, 1, 0, 0};
  CHECK(scat_gen_data(&bad) == SCAT_USAGE);
  CHECK(std::string(scat_last_error()).size() > 0);
  const fs::path dir = e.root / "ds_clear";
  const std::string d = dir.string();
  const scat_gen_data_opts ok{d.c_str(), 0, 0, 0};
  CHECK(scat_gen_data(&ok) == SCAT_OK);
  CHECK(std::string(scat_last_error()).empty());
}
