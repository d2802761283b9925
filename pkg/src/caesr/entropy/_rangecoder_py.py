"""Pure-Python carry-less range coder (32-bit state, 16-bit frequencies).

Reference implementation and fallback for :mod:`caesr.entropy._rangecoder_ext`;
both produce identical bytes.
"""
import numpy as np

MASK = 0xFFFFFFFF
TOP = 1 << 24
BOT = 1 << 16
PRECISION = 16
TOTAL = 1 << PRECISION


class RangeDecodeError(ValueError):
    """The byte stream is inconsistent with the supplied CDFs."""


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK
        self.out = bytearray()

    @property
    def bytes_written(self) -> int:
        return len(self.out)

    def encode(self, symbols, cdfs) -> None:
        """Encode ``symbols[i]`` with cumulative table ``cdfs[i]`` (total 2**16)."""
        symbols = np.asarray(symbols, dtype=np.int64)
        cdfs = np.asarray(cdfs)
        if len(symbols) != len(cdfs):
            raise ValueError("one CDF row per symbol required")
        low, rng, out = self.low, self.range, self.out
        for s, row in zip(symbols.tolist(), cdfs.tolist()):
            lo, hi = row[s], row[s + 1]
            if hi <= lo:
                raise ValueError(f"symbol {s} has zero frequency")
            r = rng >> PRECISION
            low = (low + r * lo) & MASK
            rng = r * (hi - lo)
            while True:
                if (low ^ (low + rng)) >= TOP:
                    if rng >= BOT:
                        break
                    rng = (-low) & (BOT - 1)
                out.append(low >> 24)
                low = (low << 8) & MASK
                rng = (rng << 8) & MASK
        self.low, self.range = low, rng

    def finish(self) -> bytes:
        low = self.low
        for _ in range(4):
            self.out.append(low >> 24)
            low = (low << 8) & MASK
        self.low = low
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = bytes(data)
        self.pos = 0
        self.low = 0
        self.range = MASK
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()

    def _next(self) -> int:
        if self.pos < len(self.data):
            b = self.data[self.pos]
        else:
            b = 0
        self.pos += 1
        return b

    @property
    def bytes_consumed(self) -> int:
        return self.pos

    def decode(self, cdfs) -> np.ndarray:
        cdfs = np.asarray(cdfs)
        out = np.empty(len(cdfs), dtype=np.int64)
        low, rng, code = self.low, self.range, self.code
        n_sym = cdfs.shape[1] - 1 if cdfs.ndim == 2 else 0
        for i, row in enumerate(cdfs.tolist()):
            r = rng >> PRECISION
            target = ((code - low) & MASK) // r
            if target >= TOTAL:
                raise RangeDecodeError(f"target {target} outside CDF range at symbol {i}")
            lo_i, hi_i = 0, n_sym
            while hi_i - lo_i > 1:
                mid = (lo_i + hi_i) >> 1
                if row[mid] <= target:
                    lo_i = mid
                else:
                    hi_i = mid
            s = lo_i
            lo, hi = row[s], row[s + 1]
            if not lo <= target < hi:
                raise RangeDecodeError(f"no symbol covers target {target} at symbol {i}")
            out[i] = s
            low = (low + r * lo) & MASK
            rng = r * (hi - lo)
            while True:
                if (low ^ (low + rng)) >= TOP:
                    if rng >= BOT:
                        break
                    rng = (-low) & (BOT - 1)
                code = ((code << 8) | self._next()) & MASK
                low = (low << 8) & MASK
                rng = (rng << 8) & MASK
        self.low, self.range, self.code = low, rng, code
        return out
