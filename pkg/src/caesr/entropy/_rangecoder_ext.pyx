# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled carry-less range coder; byte-identical to ``_rangecoder_py``."""
import numpy as np
from libc.stdint cimport uint64_t, int32_t, int64_t

cdef uint64_t MASK = 0xFFFFFFFF
cdef uint64_t TOP = 1 << 24
cdef uint64_t BOT = 1 << 16
cdef int PRECISION = 16
cdef uint64_t TOTAL = 1 << 16

from caesr.entropy._rangecoder_py import RangeDecodeError


cdef class RangeEncoder:
    cdef uint64_t low
    cdef uint64_t rng
    cdef bytearray out

    def __init__(self):
        self.low = 0
        self.rng = MASK
        self.out = bytearray()

    @property
    def bytes_written(self):
        return len(self.out)

    def encode(self, symbols, cdfs):
        cdef const int64_t[::1] sym = np.ascontiguousarray(symbols, dtype=np.int64)
        cdef const int32_t[:, ::1] tab = np.ascontiguousarray(cdfs, dtype=np.int32)
        if sym.shape[0] != tab.shape[0]:
            raise ValueError("one CDF row per symbol required")
        cdef Py_ssize_t i, n = sym.shape[0]
        cdef uint64_t low = self.low, rng = self.rng, r, lo, hi
        cdef int64_t s
        cdef unsigned char[::1] buf = bytearray(8 * n + 16)
        cdef Py_ssize_t k = 0
        for i in range(n):
            s = sym[i]
            if s < 0 or s >= tab.shape[1] - 1:
                raise ValueError(f"symbol index {s} out of range")
            lo = <uint64_t> tab[i, s]
            hi = <uint64_t> tab[i, s + 1]
            if hi <= lo:
                raise ValueError(f"symbol {s} has zero frequency")
            r = rng >> PRECISION
            low = (low + r * lo) & MASK
            rng = r * (hi - lo)
            while True:
                if (low ^ (low + rng)) >= TOP:
                    if rng >= BOT:
                        break
                    rng = (MASK + 1 - low) & (BOT - 1)
                buf[k] = <unsigned char> (low >> 24)
                k += 1
                low = (low << 8) & MASK
                rng = (rng << 8) & MASK
        self.low = low
        self.rng = rng
        self.out += bytes(buf[:k])

    def finish(self):
        cdef uint64_t low = self.low
        cdef int j
        for j in range(4):
            self.out.append(<unsigned char> (low >> 24))
            low = (low << 8) & MASK
        self.low = low
        return bytes(self.out)


cdef class RangeDecoder:
    cdef bytes data
    cdef const unsigned char[::1] view
    cdef Py_ssize_t pos
    cdef uint64_t low
    cdef uint64_t rng
    cdef uint64_t code

    def __init__(self, data):
        self.data = bytes(data)
        self.view = self.data
        self.pos = 0
        self.low = 0
        self.rng = MASK
        self.code = 0
        cdef int j
        for j in range(4):
            self.code = (self.code << 8) | self._next()

    cdef inline uint64_t _next(self):
        cdef uint64_t b = 0
        if self.pos < self.view.shape[0]:
            b = self.view[self.pos]
        self.pos += 1
        return b

    @property
    def bytes_consumed(self):
        return self.pos

    def decode(self, cdfs):
        cdef const int32_t[:, ::1] tab = np.ascontiguousarray(cdfs, dtype=np.int32)
        cdef Py_ssize_t n = tab.shape[0], n_sym = tab.shape[1] - 1
        out = np.empty(n, dtype=np.int64)
        cdef int64_t[::1] outv = out
        cdef uint64_t low = self.low, rng = self.rng, code = self.code, r, target, lo, hi
        cdef Py_ssize_t i, a, b, mid
        for i in range(n):
            r = rng >> PRECISION
            target = ((code + (MASK + 1) - low) & MASK) // r
            if target >= TOTAL:
                self.low, self.rng, self.code = low, rng, code
                raise RangeDecodeError(f"target {target} outside CDF range at symbol {i}")
            a = 0
            b = n_sym
            while b - a > 1:
                mid = (a + b) >> 1
                if <uint64_t> tab[i, mid] <= target:
                    a = mid
                else:
                    b = mid
            lo = <uint64_t> tab[i, a]
            hi = <uint64_t> tab[i, a + 1]
            if not (lo <= target < hi):
                self.low, self.rng, self.code = low, rng, code
                raise RangeDecodeError(f"no symbol covers target {target} at symbol {i}")
            outv[i] = a
            low = (low + r * lo) & MASK
            rng = r * (hi - lo)
            while True:
                if (low ^ (low + rng)) >= TOP:
                    if rng >= BOT:
                        break
                    rng = (MASK + 1 - low) & (BOT - 1)
                code = ((code << 8) | self._next()) & MASK
                low = (low << 8) & MASK
                rng = (rng << 8) & MASK
        self.low = low
        self.rng = rng
        self.code = code
        return out
