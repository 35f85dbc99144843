/* cotprune C API: opaque handles + status codes over the C++ core.
 *
 * Every function returns CP_OK on success; on failure a status code is
 * returned and cp_last_error() carries a message for the calling thread.
 * Strings returned through out-parameters are heap-allocated; release them
 * with cp_string_free().
 */

#ifndef COTPRUNE_H
#define COTPRUNE_H

#ifdef __cplusplus
extern "C" {
#endif

typedef enum cp_status {
  CP_OK = 0,
  CP_ERR_IO = 1,        /* file missing or unreadable */
  CP_ERR_PARSE = 2,     /* malformed data file */
  CP_ERR_INVALID = 3,   /* contract violation / bad argument */
  CP_ERR_TRANSPORT = 4, /* backend unreachable (retryable) */
  CP_ERR_BUDGET = 5,    /* token budget configuration error */
  CP_ERR_CONFIG = 6,    /* configuration validation failure */
  CP_ERR_FLOOR = 7,     /* eval accuracy below the configured floor */
  CP_ERR_INTERNAL = 8
} cp_status;

typedef struct cp_config cp_config;
typedef struct cp_pruner cp_pruner;

const char* cp_version(void);

/* Message for the most recent failure on this thread ("" if none). */
const char* cp_last_error(void);

void cp_string_free(char* s);

/* -- configuration -------------------------------------------------------- */

cp_status cp_config_default(cp_config** out);
cp_status cp_config_load(const char* path, cp_config** out);
cp_status cp_config_parse(const char* json_text, cp_config** out);
/* Dotted key, e.g. "train.lr" or "paths.out_dir"; value coerced to the
 * field's type. */
cp_status cp_config_override(cp_config* cfg, const char* dotted_key,
                             const char* value);
/* Fully-resolved config as JSON text. */
cp_status cp_config_dump(const cp_config* cfg, char** json_out);
void cp_config_free(cp_config* cfg);

/* -- commands ------------------------------------------------------------- */

/* Dataset preparation (evolution + difficulty scoring + split).
 * resume_manifest may be NULL. summary_out (optional) receives JSON. */
cp_status cp_run_prepare(const cp_config* cfg, const char* resume_manifest,
                         char** summary_out);

/* Policy training. resume_path may be NULL. */
cp_status cp_run_train(const cp_config* cfg, const char* resume_path,
                       char** summary_out);

/* Evaluation. methods_csv may be NULL (use config); floor < 0 uses config.
 * Returns CP_ERR_FLOOR when the gated EM falls below the floor. */
cp_status cp_run_eval(const cp_config* cfg, const char* methods_csv,
                      double floor, char** table_out, char** summary_out);

/* -- plug-and-play pruner -------------------------------------------------- */

/* checkpoint may be NULL to use the config's checkpoint path. */
cp_status cp_pruner_open(const cp_config* cfg, const char* checkpoint,
                         cp_pruner** out);
/* Builds the budgeted few-shot prompt for one question. */
cp_status cp_pruner_prune(const cp_pruner* pruner, const char* question,
                          char** prompt_out);
void cp_pruner_free(cp_pruner* pruner);

#ifdef __cplusplus
}
#endif

#endif /* COTPRUNE_H */
