#ifndef TOCOM_H
#define TOCOM_H

/*
 * C interface to the token-compensator library.
 *
 * All objects are opaque handles released with their *_free function.
 * Functions return a tocom_status; on failure tocom_last_error() describes
 * the problem (per thread, valid until the next call on that thread).
 * Strings returned through char** out-parameters are owned by the caller and
 * must be released with tocom_string_free.
 *
 * Options are passed as JSON objects (NULL or "" means defaults). Reports are
 * JSON documents of the form
 *   {"command", "config", "config_digest", "seed", "metrics", "wall_seconds"}
 * where "config" is the effective configuration after defaults were applied.
 */

#include <stddef.h>

#if defined(_WIN32)
#define TOCOM_API __declspec(dllexport)
#elif defined(__GNUC__)
#define TOCOM_API __attribute__((visibility("default")))
#else
#define TOCOM_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum tocom_status {
  TOCOM_OK = 0,
  TOCOM_ERR_USAGE = 1,      /* bad argument or malformed options */
  TOCOM_ERR_VALIDATION = 2, /* precondition or invariant failure */
  TOCOM_ERR_IO = 3,         /* file missing, unreadable or corrupt */
  TOCOM_ERR_INTERNAL = 4
} tocom_status;

typedef struct tocom_dataset tocom_dataset;
typedef struct tocom_model tocom_model;
typedef struct tocom_plugin tocom_plugin;

TOCOM_API const char* tocom_version(void);
TOCOM_API const char* tocom_last_error(void);
TOCOM_API void tocom_string_free(char* s);

/* Descriptors: "synth:seed=1,classes=10,samples=2000,size=32,window=16,
 * noise=0.5[,split=downstream,train=0.7,val=0.1]" or "cifar10:PATH[,...]",
 * "cifar100:PATH[,...]". */
TOCOM_API tocom_status tocom_dataset_open(const char* descriptor, tocom_dataset** out);
TOCOM_API tocom_status tocom_dataset_info(const tocom_dataset* ds, char** json);
TOCOM_API void tocom_dataset_free(tocom_dataset* ds);

TOCOM_API tocom_status tocom_model_load(const char* path, tocom_model** out);
TOCOM_API tocom_status tocom_model_save(const tocom_model* model, const char* path);
TOCOM_API tocom_status tocom_model_info(const tocom_model* model, char** json);
TOCOM_API void tocom_model_free(tocom_model* model);

TOCOM_API tocom_status tocom_plugin_load(const char* path, tocom_plugin** out);
TOCOM_API tocom_status tocom_plugin_save(const tocom_plugin* plugin, const char* path);
TOCOM_API tocom_status tocom_plugin_info(const tocom_plugin* plugin, char** json);
TOCOM_API void tocom_plugin_free(tocom_plugin* plugin);

/* Options: {"config": {model fields}, "epochs", "batch_size", "lr",
 * "weight_decay", "warmup_epochs", "seed", "rmax", "compression"}. */
TOCOM_API tocom_status tocom_pretrain(const tocom_dataset* ds, const char* options, tocom_model** out, char** report);

/* Options: {"rmax", "epochs", "batch_size", "lr", "weight_decay",
 * "warmup_epochs", "scale", "rank", "loss": "kl|l1|ce",
 * "variant": "default|shared|noinv", "seed"}. log_csv (may be NULL) receives
 * one row per step: step,epoch,m,n,loss,lr. */
TOCOM_API tocom_status tocom_train_plugin(const tocom_model* backbone, const tocom_dataset* ds, const char* options,
                                          tocom_plugin** out, char** report, char** log_csv);

/* Options: {"source_r", "mode": "full|adaptformer", "epochs", "batch_size",
 * "lr", "weight_decay", "seed", "rmax", "bottleneck", "adapter_scale"}. */
TOCOM_API tocom_status tocom_finetune(const tocom_model* backbone, const tocom_dataset* ds, const char* options,
                                      tocom_model** out, char** report);

/* Options: {"target_r", "scale", "scale_search": bool, "split":
 * "auto|pretrain|train|val|test"}. plugin may be NULL. */
TOCOM_API tocom_status tocom_evaluate(const tocom_model* model, const tocom_dataset* ds, const tocom_plugin* plugin,
                                      const char* options, char** report);

/* Options: {"targets": [..], "scales": [..]}. csv receives
 * target_r,variant,accuracy,scale,mean_tokens,count rows. */
TOCOM_API tocom_status tocom_eval_grid(const tocom_model* model, const tocom_dataset* ds, const tocom_plugin* plugin,
                                       const char* options, char** report, char** csv);

/* Options: {"r": [..], "batch", "repeats", "seed"}. */
TOCOM_API tocom_status tocom_bench(const tocom_model* model, const char* options, char** report, char** csv);

/* base + plus - minus, heads excluded when class counts differ. */
TOCOM_API tocom_status tocom_arith(const tocom_model* base, const tocom_model* plus, const tocom_model* minus,
                                   tocom_model** out);

/* Runs the invariant suites. Returns TOCOM_ERR_VALIDATION when a suite
 * fails; the report lists every suite either way. Options: {"seed"}. */
TOCOM_API tocom_status tocom_selftest(const char* options, char** report);

/* Worker threads for evaluation (results do not depend on the count). */
TOCOM_API tocom_status tocom_set_threads(int threads);

#ifdef __cplusplus
}
#endif

#endif
