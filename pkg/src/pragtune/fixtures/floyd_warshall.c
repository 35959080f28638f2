/* Floyd-Warshall all-pairs shortest paths; prints the kernel time in seconds. */
#include <stdio.h>
#include <stdlib.h>
#include <time.h>

#ifndef N
#define N 1000
#endif

static double path[N][N];

static void init(void) {
  for (int i = 0; i < N; i++)
    for (int j = 0; j < N; j++) {
      path[i][j] = i * j % 7 + 1;
      if ((i + j) % 13 == 0 || (i + j) % 7 == 0 || (i + j) % 11 == 0)
        path[i][j] = 999;
    }
}

static void kernel(void) {
#pragma clang loop id(k)
  for (int k = 0; k < N; k++)
#pragma clang loop id(i)
    for (int i = 0; i < N; i++)
#pragma clang loop id(j)
      for (int j = 0; j < N; j++)
        path[i][j] = path[i][j] < path[i][k] + path[k][j] ? path[i][j] : path[i][k] + path[k][j];
}

int main(void) {
  struct timespec t0, t1;
  init();
  clock_gettime(CLOCK_MONOTONIC, &t0);
  kernel();
  clock_gettime(CLOCK_MONOTONIC, &t1);
  double sum = 0;
  for (int i = 0; i < N; i++)
    sum += path[i][i * 7 % N];
  fprintf(stderr, "checksum %f\n", sum);
  printf("%.6f\n", (t1.tv_sec - t0.tv_sec) + 1e-9 * (t1.tv_nsec - t0.tv_nsec));
  return 0;
}
