/* C API for the egomotion estimation library. */

#ifndef EGOMOTION_H
#define EGOMOTION_H

/* Generated by cbindgen from the egomotion-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
#define EGO_OK 0

// A required pointer argument was null.
#define EGO_NULL_POINTER 1

// An argument was out of range or inconsistent.
#define EGO_INVALID_ARGUMENT 2

// Loading a model or reading a path failed.
#define EGO_IO_ERROR 3

// The model combination does not support the requested mode.
#define EGO_MODE_ERROR 4

// Estimation itself failed.
#define EGO_RUNTIME_ERROR 5

// Number of whole-body joints in every motion buffer.
#define EGO_NUM_JOINTS 47

// Number of camera views per frame.
#define EGO_NUM_VIEWS 2

// Doubles per camera description (rotation 9, translation 3, intrinsics 6).
#define EGO_CAMERA_DOUBLES 18

// Estimator handle: loaded models plus sampling configuration.
typedef struct EgoEstimator EgoEstimator;

// Streaming session handle. The estimator it was started from must outlive
// the session.
typedef struct EgoSession EgoSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Returns the message for the most recent error on this thread. The
// pointer is valid until the next failing call on the same thread.
const char *ego_last_error(void);

// Number of joints per frame in all motion buffers.
size_t ego_num_joints(void);

// Loads an estimator from model directories written by the `egomotion`
// CLI or library.
//
// `hand_dir` may be null for parallel-joint mode. `steps`/`hand_steps`
// are the DDIM step counts. The diffusion schedule is the default linear
// schedule (K = 1000).
//
// # Safety
// `body_dir` (and `hand_dir` when non-null) must be valid NUL-terminated
// strings; `out` must be a valid pointer.
int ego_estimator_load(const char *body_dir,
                       const char *hand_dir,
                       int mode,
                       size_t steps,
                       size_t hand_steps,
                       double fps,
                       struct EgoEstimator **out);

// Attaches an exemplar-based identity prior used by subsequent estimates
// and sessions: `exemplars` is `num_exemplars x 47 x 3` world keypoints.
// Passing null clears the prior.
//
// # Safety
// `estimator` must be a live estimator handle; `exemplars`, when non-null,
// must point to `num_exemplars * 141` doubles.
int ego_estimator_set_identity(struct EgoEstimator *estimator,
                               const double *exemplars,
                               size_t num_exemplars);

// Frees an estimator. Null is ignored.
//
// # Safety
// `estimator` must be a handle from [`ego_estimator_load`], not yet freed,
// with no live sessions.
void ego_estimator_free(struct EgoEstimator *estimator);

// Offline estimation over a full observation sequence. Writes
// `frames * 141` doubles to `out_motion`.
//
// # Safety
// `estimator` must be a live handle; the observation pointers must cover
// `frames` frames in the documented layout; `out_motion` must have room
// for `frames * 141` doubles.
int ego_estimate(struct EgoEstimator *estimator,
                 size_t frames,
                 const double *cameras,
                 const double *keypoints,
                 const double *confidences,
                 uint64_t seed,
                 double *out_motion);

// Starts a causal streaming session (single-step student models only).
// The estimator must outlive the session.
//
// # Safety
// `estimator` must be a live handle that stays alive (and is not mutated)
// until `ego_session_free`; `out` must be a valid pointer.
int ego_stream_start(struct EgoEstimator *estimator, uint64_t seed, struct EgoSession **out);

// Pushes one frame of observations and writes the 141 doubles of that
// frame's whole-body estimate.
//
// # Safety
// `session` must be a live session handle; the observation pointers must
// cover one frame; `out_frame` must have room for 141 doubles.
int ego_stream_push(struct EgoSession *session,
                    const double *cameras,
                    const double *keypoints,
                    const double *confidences,
                    double *out_frame);

// Number of frames pushed so far.
//
// # Safety
// `session` must be a live session handle.
size_t ego_stream_frames_seen(const struct EgoSession *session);

// Frees a session. Null is ignored.
//
// # Safety
// `session` must be a handle from [`ego_stream_start`], not yet freed.
void ego_session_free(struct EgoSession *session);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EGOMOTION_H */
