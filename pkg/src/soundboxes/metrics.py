"""SDR / SIR / SAR by least-squares projection onto delayed references.

The estimate is split as ``s_target + e_interf + e_artif`` where
``s_target`` is its projection on L delayed copies of the matched reference
and ``s_target + e_interf`` its projection on delayed copies of all
references.  Scores are clipped to +-60 dB.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.optimize import linear_sum_assignment

from .errors import InvalidInputError

DB_CAP = 60.0


@dataclass
class BssScores:
    sdr: float
    sir: float
    sar: float
    estimate_index: int = 0


def ratio_db(num: float, den: float) -> float:
    if num <= 0:
        return -DB_CAP
    if den <= 0:
        return DB_CAP
    return float(np.clip(10 * np.log10(num / den), -DB_CAP, DB_CAP))


def _as_matrix(clips) -> np.ndarray:
    rows = [np.asarray(getattr(c, "samples", c), dtype=np.float64) for c in clips]
    if len({r.shape for r in rows}) != 1 or rows[0].ndim != 1:
        raise InvalidInputError("all signals must be 1-D and of equal length")
    return np.stack(rows)


def _next_pow2(n: int) -> int:
    return 1 << (n - 1).bit_length()


class _Projector:
    """Shares the reference Gram matrix across every estimate of one mixture."""

    def __init__(self, refs: np.ndarray, filter_length: int):
        self.refs = refs
        self.L = filter_length
        k, n = refs.shape
        self.n = n
        self.nfft = _next_pow2(n + filter_length - 1)
        self.ref_f = np.fft.rfft(refs, self.nfft)
        L = filter_length
        # cross-correlations r_i(t) r_j(t + lag) for lags in [-(L-1), L-1]
        gram = np.zeros((k * L, k * L))
        for i in range(k):
            for j in range(k):
                xc = np.fft.irfft(np.conj(self.ref_f[i]) * self.ref_f[j], self.nfft)
                # entry (a, b): sum_t r_i(t - a) r_j(t - b) = xcorr at lag (a - b)
                lags = np.arange(L)[:, None] - np.arange(L)[None, :]
                gram[i * L:(i + 1) * L, j * L:(j + 1) * L] = xc[lags % self.nfft]
        self.gram = gram
        self._full = self._factor(gram)
        self._single = [self._factor(gram[i * L:(i + 1) * L, i * L:(i + 1) * L]) for i in range(k)]

    @staticmethod
    def _factor(mat):
        try:
            return ("cho", scipy.linalg.cho_factor(mat))
        except np.linalg.LinAlgError:
            return ("lstsq", mat)

    @staticmethod
    def _solve(fac, rhs):
        kind, data = fac
        if kind == "cho":
            return scipy.linalg.cho_solve(data, rhs)
        return np.linalg.lstsq(data, rhs, rcond=None)[0]

    def _rhs(self, est: np.ndarray) -> np.ndarray:
        est_f = np.fft.rfft(est, self.nfft)
        # D[i, a] = sum_t r_i(t - a) est(t)
        xc = np.fft.irfft(np.conj(self.ref_f) * est_f[None, :], self.nfft)
        return xc[:, :self.L]

    def _synth(self, coeffs: np.ndarray, idx) -> np.ndarray:
        out_len = self.n + self.L - 1
        c_f = np.fft.rfft(coeffs, self.nfft)
        y = np.fft.irfft((c_f * self.ref_f[idx]).sum(axis=0), self.nfft)
        return y[:out_len]

    def decompose(self, est: np.ndarray, target: int):
        L = self.L
        rhs = self._rhs(est)
        k = self.refs.shape[0]
        c_all = self._solve(self._full, rhs.reshape(-1)).reshape(k, L)
        proj_all = self._synth(c_all, slice(None))
        c_t = self._solve(self._single[target], rhs[target])
        s_target = self._synth(c_t[None, :], [target])
        e_pad = np.zeros(self.n + L - 1)
        e_pad[:self.n] = est
        return s_target, proj_all - s_target, e_pad - proj_all


def scores_from_decomposition(s_target, e_interf, e_artif) -> BssScores:
    def energy(x):
        return float(np.dot(x, x))

    sdr = ratio_db(energy(s_target), energy(e_interf + e_artif))
    sir = ratio_db(energy(s_target), energy(e_interf))
    sar = ratio_db(energy(s_target + e_interf), energy(e_artif))
    return BssScores(sdr, sir, sar)


def bss_eval(references, estimates, filter_length: int = 512) -> list[BssScores]:
    """Score estimates against references, resolving the permutation by best mean SDR.

    Returns one :class:`BssScores` per reference, in reference order; the
    ``estimate_index`` field records which estimate was matched to it.
    """
    refs = _as_matrix(references)
    ests = _as_matrix(estimates)
    if refs.shape != ests.shape:
        raise InvalidInputError(f"reference/estimate shapes differ: {refs.shape} vs {ests.shape}")
    if filter_length < 1 or filter_length > refs.shape[1]:
        raise InvalidInputError(f"filter length {filter_length} not in [1, {refs.shape[1]}]")
    if np.any(np.sum(refs ** 2, axis=1) == 0):
        raise InvalidInputError("reference signals must have nonzero energy")
    proj = _Projector(refs, filter_length)
    k = refs.shape[0]
    table = [[None] * k for _ in range(k)]  # table[est][ref]
    for e in range(k):
        silent = not np.any(ests[e])
        for r in range(k):
            if silent:
                table[e][r] = BssScores(-DB_CAP, -DB_CAP, -DB_CAP)
            else:
                table[e][r] = scores_from_decomposition(*proj.decompose(ests[e], r))
    sdr = np.array([[table[e][r].sdr for r in range(k)] for e in range(k)])
    est_idx, ref_idx = linear_sum_assignment(sdr, maximize=True)
    by_ref = dict(zip(ref_idx, est_idx))
    out = []
    for r in range(k):
        e = int(by_ref[r])
        s = table[e][r]
        out.append(BssScores(s.sdr, s.sir, s.sar, e))
    return out


def write_metrics_csv(path, rows) -> None:
    """Write ``(sample_id, source_idx, BssScores)`` rows plus a trailing mean row."""
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "source_idx", "sdr", "sir", "sar"])
        for sample_id, source_idx, s in rows:
            w.writerow([sample_id, source_idx, f"{s.sdr:.4f}", f"{s.sir:.4f}", f"{s.sar:.4f}"])
        if rows:
            means = summarize(s for _, _, s in rows)
            w.writerow(["mean", "", f"{means['sdr']:.4f}", f"{means['sir']:.4f}", f"{means['sar']:.4f}"])


def summarize(scores) -> dict:
    scores = list(scores)
    return {k: float(np.mean([getattr(s, k) for s in scores])) for k in ("sdr", "sir", "sar")}
