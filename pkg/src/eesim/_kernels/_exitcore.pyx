# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled exit-decision kernels. Semantics match eesim._kernels._ref."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def exit_sites(double[:, ::1] scores, double[::1] thresholds):
    cdef Py_ssize_t n = scores.shape[0]
    cdef Py_ssize_t r = scores.shape[1]
    out = np.empty(n, dtype=np.int64)
    cdef long long[::1] ov = out
    cdef Py_ssize_t i, j, site
    for i in range(n):
        site = r
        for j in range(r):
            if scores[i, j] < thresholds[j]:
                site = j
                break
        ov[i] = site
    return out


def eval_thresholds(
    double[:, ::1] scores,
    double[:, ::1] correct_ext,
    double[::1] serve,
    double vanilla,
    double[:, ::1] thresholds,
):
    cdef Py_ssize_t n = scores.shape[0]
    cdef Py_ssize_t r = scores.shape[1]
    cdef Py_ssize_t c = thresholds.shape[0]
    acc = np.empty(c, dtype=np.float64)
    sav = np.empty(c, dtype=np.float64)
    cdef double[::1] av = acc
    cdef double[::1] sv = sav
    cdef Py_ssize_t ci, i, j, site
    cdef double ok, ms
    for ci in range(c):
        ok = 0.0
        ms = 0.0
        for i in range(n):
            site = r
            for j in range(r):
                if scores[i, j] < thresholds[ci, j]:
                    site = j
                    break
            ok += correct_ext[i, site]
            ms += serve[site]
        av[ci] = ok / n
        sv[ci] = vanilla - ms / n
    return acc, sav
