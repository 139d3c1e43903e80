/* C interface to the try-on library.
 *
 * Every function returns a dmvton_status. On failure a message describing
 * the error is available from dmvton_last_error() on the same thread until
 * the next call into the library. Strings returned through char** are owned
 * by the caller and released with dmvton_string_free(). Handles are opaque
 * and released with their _free function; passing NULL to a _free function
 * is a no-op.
 */
#ifndef DMVTON_DMVTON_H
#define DMVTON_DMVTON_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define DMVTON_API __declspec(dllexport)
#else
#define DMVTON_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes. CONFIG, DATA and NUMERIC double as process exit codes of
 * the command-line tool. */
typedef enum dmvton_status {
  DMVTON_OK = 0,
  DMVTON_ERR_INTERNAL = 1,
  DMVTON_ERR_CONFIG = 2,      /* bad option, unknown config key, wrong preset */
  DMVTON_ERR_DATA = 3,        /* missing or malformed file */
  DMVTON_ERR_NUMERIC = 4,     /* non-finite value during training or inference */
  DMVTON_ERR_SHAPE = 5,       /* tensor shape contract violated */
  DMVTON_ERR_UNSUPPORTED = 6, /* operation not available in this mode */
  DMVTON_ERR_STATE = 7,       /* object used before it is ready */
  DMVTON_ERR_ARGUMENT = 8     /* NULL pointer or invalid argument */
} dmvton_status;

DMVTON_API const char* dmvton_version(void);
DMVTON_API const char* dmvton_status_name(dmvton_status status);
/* Message of the last failure on this thread ("" after a success). */
DMVTON_API const char* dmvton_last_error(void);
DMVTON_API void dmvton_string_free(char* s);

/* ---- Commands ----------------------------------------------------------
 * Commands are make-toy, init, train-teacher, train-student, infer, enrich,
 * profile, eval, cluster-report and serve. Options arrive as a flat JSON
 * object (flags) merged over an optional flat JSON config file; flags win
 * and unknown keys are rejected. */

/* JSON array of command names. */
DMVTON_API dmvton_status dmvton_command_list(char** names_json);
/* JSON description of a command's options: {name, summary, options:[{key,
 * type, default, required, help}]}. */
DMVTON_API dmvton_status dmvton_command_schema(const char* command, char** schema_json);
/* Runs a command (not serve). config_path may be NULL; flags_json may be
 * NULL or "{}". On success *result_json holds the command's JSON result. */
DMVTON_API dmvton_status dmvton_run_command(const char* command, const char* config_path, const char* flags_json,
                                            char** result_json);

/* ---- Models ------------------------------------------------------------ */

typedef struct dmvton_model dmvton_model;

/* Loads student or teacher weights (kind taken from the tensor names) for
 * the named preset ("tiny" or "paper"). */
DMVTON_API dmvton_status dmvton_model_load(const char* weights_path, const char* preset, dmvton_model** out);
/* Fresh seeded network; kind is "student" or "teacher". */
DMVTON_API dmvton_status dmvton_model_create(const char* kind, const char* preset, uint64_t seed, dmvton_model** out);
DMVTON_API void dmvton_model_free(dmvton_model* model);
/* {kind, preset, height, width, params, flops} */
DMVTON_API dmvton_status dmvton_model_info(const dmvton_model* model, char** info_json);
/* Writes the weights as an f32 archive directory. */
DMVTON_API dmvton_status dmvton_model_save(const dmvton_model* model, const char* dir);
/* Student try-on on interleaved 8-bit RGB rasters of the model resolution
 * (height * width * 3 bytes each). out_rgb receives the same layout. */
DMVTON_API dmvton_status dmvton_model_tryon(const dmvton_model* model, const uint8_t* person_rgb,
                                            const uint8_t* garment_rgb, uint8_t* out_rgb);

/* ---- HTTP service ------------------------------------------------------ */

typedef struct dmvton_server dmvton_server;

/* Options as for the serve command. Loads the asset catalog. */
DMVTON_API dmvton_status dmvton_server_create(const char* config_path, const char* flags_json, dmvton_server** out);
/* Loads the weights, binds and starts serving in background threads. The
 * bound port is written to *port when port is not NULL. */
DMVTON_API dmvton_status dmvton_server_start(dmvton_server* server, int* port);
/* Blocks until dmvton_server_stop() is called from another thread. */
DMVTON_API dmvton_status dmvton_server_wait(dmvton_server* server);
DMVTON_API dmvton_status dmvton_server_stop(dmvton_server* server);
DMVTON_API void dmvton_server_free(dmvton_server* server);

#ifdef __cplusplus
}
#endif

#endif /* DMVTON_DMVTON_H */
