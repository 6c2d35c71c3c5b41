#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "interseg.h"

#define CHECK(call)                                                        \
  do {                                                                     \
    IsgStatus s_ = (call);                                                 \
    if (s_ != ISG_STATUS_OK) {                                             \
      fprintf(stderr, "%s -> %d: %s\n", #call, (int)s_, isg_last_error()); \
      return 1;                                                            \
    }                                                                      \
  } while (0)

int main(int argc, char **argv) {
  if (argc != 2) return 2;
  IsgModel *model = NULL;
  CHECK(isg_model_load(argv[1], &model));
  size_t channels = 0, classes = 0;
  CHECK(isg_model_shape(model, &channels, &classes));

  size_t h = 40, w = 40;
  float *pixels = malloc(sizeof(float) * channels * h * w);
  for (size_t i = 0; i < channels * h * w; i++) pixels[i] = (float)(i % 7) / 7.0f;
  IsgSession *session = NULL;
  CHECK(isg_session_new(model, pixels, channels, h, w, "{\"tile_size\": 32, \"overlap\": 8}", &session));

  size_t sh = 0, sw = 0, sc = 0;
  CHECK(isg_session_shape(session, &sh, &sw, &sc));
  if (sh != h || sw != w || sc != classes) return 3;

  unsigned char *labels = malloc(h * w);
  float *scores = malloc(sizeof(float) * h * w);
  CHECK(isg_session_add_click(session, 5, 6, 1));
  CHECK(isg_session_refine(session, ISG_REFINE_MODE_DISCA));
  CHECK(isg_session_labels(session, labels, h * w));
  CHECK(isg_session_uncertainty(session, ISG_UNCERTAINTY_ENTROPY, scores, h * w));

  /* errors come back as codes with a message */
  if (isg_session_add_click(session, 999, 0, 0) != ISG_STATUS_INVALID_ARGUMENT) return 4;
  if (strlen(isg_last_error()) == 0) return 5;
  if (isg_session_labels(session, labels, 3) != ISG_STATUS_INVALID_ARGUMENT) return 6;
  if (isg_session_refine(NULL, ISG_REFINE_MODE_AC_ONLY) != ISG_STATUS_NULL_POINTER) return 7;

  bool undone = false;
  CHECK(isg_session_undo(session, &undone));
  if (!undone) return 8;
  size_t count = 1;
  CHECK(isg_session_click_count(session, &count));
  if (count != 0) return 9;

  isg_session_free(session);
  isg_model_free(model);
  free(pixels);
  free(labels);
  free(scores);
  printf("ok %s\n", isg_version());
  return 0;
}
