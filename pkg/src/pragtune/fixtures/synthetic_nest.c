/* Three-deep nest for the no-compiler tree-search fixture. */
void kernel(int n, double *a, double *b, double *c) {
#pragma clang loop id(i)
  for (int i = 0; i < n; i++)
#pragma clang loop id(j)
    for (int j = 0; j < n; j++)
#pragma clang loop id(k)
      for (int k = 0; k < n; k++)
        c[i * n + j] += a[i * n + k] * b[k * n + j];
}
