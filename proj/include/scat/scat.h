#ifndef SCAT_H
#define SCAT_H

/* C interface to the SCAT training library: dataset generation, training,
 * evaluation, and the two diagnostic probes, plus a loadable model handle.
 * Every command is one call; artifacts land in the caller-supplied paths and
 * each artifact directory receives a run_manifest.json describing the run. */

#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum scat_status {
  SCAT_OK = 0,
  SCAT_ERROR = 1,   /* unclassified failure */
  SCAT_USAGE = 2,   /* missing or inconsistent options */
  SCAT_CONFIG = 3,  /* malformed or invalid config */
  SCAT_DATA = 4,    /* missing or unreadable data/checkpoint */
  SCAT_NUMERIC = 5  /* training aborted on repeated non-finite steps */
} scat_status;

/* message for the last failing call on this thread; empty when none */
const char* scat_last_error(void);

const char* scat_version(void);
const char* scat_build_id(void);

/* BLAS thread cap; commands default to the SCAT_THREADS env var, else 1 */
void scat_set_threads(int n);

typedef struct scat_gen_data_opts {
  const char* out_dir; /* required */
  int scenes;          /* >= 0; 0 writes an empty manifest */
  uint64_t seed;
  int force; /* allow writing into a non-empty directory */
} scat_gen_data_opts;

scat_status scat_gen_data(const scat_gen_data_opts* opts);

typedef struct scat_train_opts {
  const char* config_path; /* optional; defaults when NULL */
  const char* config_text; /* overrides config_path when non-NULL */
  const char* data_dir;    /* required: dataset root from gen-data */
  const char* out_dir;     /* required: checkpoints and CSV logs */
} scat_train_opts;

scat_status scat_train(const scat_train_opts* opts);

typedef struct scat_eval_opts {
  const char* checkpoint; /* required */
  const char* data_dir;   /* required */
  const char* corrupt;    /* "none", "all", or one corruption name; NULL = none */
  const char* out_csv;    /* required */
  const char* baseline;   /* optional; with corrupt=all adds mCE/mRR rows */
} scat_eval_opts;

scat_status scat_eval(const scat_eval_opts* opts);

typedef struct scat_probe_sensitivity_opts {
  const char* checkpoint; /* optional; NULL probes freshly seeded weights */
  const char* kappas;     /* comma list; NULL = "0.1,0.3,0.7,1.0" */
  int trials;             /* >= 1 */
  uint64_t seed;
  const char* out_csv;    /* required */
} scat_probe_sensitivity_opts;

scat_status scat_probe_sensitivity(const scat_probe_sensitivity_opts* opts);

typedef struct scat_probe_gradients_opts {
  const char* checkpoint; /* optional; both paired runs start from it */
  int steps;              /* >= 0; runs the pair of surgery-on/off trainings this long */
  uint64_t seed;
  const char* out_csv; /* required */
} scat_probe_gradients_opts;

scat_status scat_probe_gradients(const scat_probe_gradients_opts* opts);

/* opaque trained model restored from a checkpoint */
typedef struct scat_model scat_model;

scat_status scat_model_load(const char* checkpoint_path, scat_model** out);
void scat_model_free(scat_model* m);

/* frame geometry and training counters of a loaded model */
scat_status scat_model_info(const scat_model* m, int* width, int* height, int64_t* step,
                            int* epoch);

/* depth from one packed CHW float image in [0,1]; image is 3*height*width
 * floats matching the model frame size, out_depth receives height*width */
scat_status scat_model_predict_depth(const scat_model* m, const float* image, int height,
                                     int width, float* out_depth);

#ifdef __cplusplus
}
#endif

#endif /* SCAT_H */
