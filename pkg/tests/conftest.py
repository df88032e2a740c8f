import mnm  # noqa: F401  (sets single-thread BLAS env before numpy loads)
