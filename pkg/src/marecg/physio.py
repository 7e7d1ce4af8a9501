"""R-peak detection and the physiological targets derived from it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, find_peaks, sosfiltfilt

RATE_CLASSES = ("brady", "normal", "tachy", "none")
PHASE_CLASSES = ("pre_r", "r", "st", "t_wave")


# -- Pan-Tompkins ----------------------------------------------------------------


def _five_point_derivative(x: np.ndarray) -> np.ndarray:
    kernel = np.array([1.0, 2.0, 0.0, -2.0, -1.0]) / 8.0
    return np.convolve(x, kernel, mode="same")


def detect_rpeaks(lead: np.ndarray, fs: float = 500.0, band=(5.0, 15.0), window_s: float = 0.150,
                  refractory_s: float = 0.200) -> np.ndarray:
    """Pan-Tompkins QRS detector returning R-peak sample indices.

    Band-pass (zero phase), five-point derivative, squaring, 150 ms
    moving-window integration, then adaptive dual thresholds with a 200 ms
    refractory period and search-back. Peaks are localised on the
    band-passed signal.
    """
    x = np.asarray(lead, dtype=np.float64)
    sos = butter(3, band, btype="bandpass", fs=fs, output="sos")
    # sosfiltfilt needs 3 * (2 * n_sections + 1) samples of padding
    if x.size <= max(int(fs // 2), 3 * (2 * sos.shape[0] + 1)):
        return np.zeros(0, dtype=np.int64)
    x = x - np.median(x)
    if not np.any(np.abs(x) > 1e-12):
        return np.zeros(0, dtype=np.int64)

    bp = sosfiltfilt(sos, x)
    squared = _five_point_derivative(bp) ** 2
    win = max(1, int(round(window_s * fs)))
    mwi = np.convolve(squared, np.ones(win) / win, mode="same")
    if mwi.max() <= 0:
        return np.zeros(0, dtype=np.int64)
    refractory = int(round(refractory_s * fs))
    candidates, _ = find_peaks(mwi, distance=refractory)
    if candidates.size == 0:
        return np.zeros(0, dtype=np.int64)

    head = mwi[: int(2 * fs)]
    spki = 0.25 * head.max()
    npki = 0.5 * head.mean()
    thr1 = npki + 0.25 * (spki - npki)
    qrs: list[int] = []
    slopes: list[float] = []
    rr_avg = None
    half_qrs = int(round(0.075 * fs))

    def max_slope(i):
        lo, hi = max(0, i - half_qrs), min(x.size, i + half_qrs)
        return float(np.max(squared[lo:hi]))

    for k, p in enumerate(candidates):
        height = mwi[p]
        if qrs and rr_avg is not None and p - qrs[-1] > 1.66 * rr_avg:
            # search-back for a missed beat between the last QRS and this candidate
            lo = qrs[-1] + refractory
            missed = [c for c in candidates[:k] if lo <= c <= p - refractory and mwi[c] > 0.5 * thr1]
            if missed:
                best = max(missed, key=lambda c: mwi[c])
                qrs.append(int(best))
                slopes.append(max_slope(best))
                spki = 0.25 * mwi[best] + 0.75 * spki
        is_qrs = height > thr1 and (not qrs or p - qrs[-1] >= refractory)
        if is_qrs and qrs and p - qrs[-1] < int(0.36 * fs):
            # T-wave discrimination on slope
            if max_slope(p) < 0.5 * slopes[-1]:
                is_qrs = False
        if is_qrs:
            qrs.append(int(p))
            slopes.append(max_slope(p))
            spki = 0.125 * height + 0.875 * spki
            if len(qrs) >= 2:
                recent = np.diff(qrs[-9:])
                rr_avg = float(np.mean(recent))
        else:
            npki = 0.125 * height + 0.875 * npki
        thr1 = npki + 0.25 * (spki - npki)

    if not qrs:
        return np.zeros(0, dtype=np.int64)
    qrs = sorted(set(qrs))
    # polarity: localise on whichever sign of the band-passed signal dominates
    sign = 1.0
    if sum(-bp[max(0, q - half_qrs):q + half_qrs].min() for q in qrs) > \
            sum(bp[max(0, q - half_qrs):q + half_qrs].max() for q in qrs):
        sign = -1.0
    peaks = []
    for q in qrs:
        lo, hi = max(0, q - half_qrs), min(x.size, q + half_qrs + 1)
        peaks.append(lo + int(np.argmax(sign * bp[lo:hi])))
    out: list[int] = []
    for p in sorted(peaks):
        if out and p - out[-1] < refractory:
            if sign * bp[p] > sign * bp[out[-1]]:
                out[-1] = p
            continue
        out.append(p)
    return np.asarray(out, dtype=np.int64)


# -- rhythm statistics -------------------------------------------------------------


@dataclass(frozen=True)
class RhythmTargets:
    mean_rr: float  # samples; nan when fewer than two peaks
    rr_cv: float
    hr_bpm: float
    rate_bucket: str
    alternation: bool | None
    n_peaks: int

    @property
    def valid(self) -> bool:
        return self.rate_bucket != "none"

    @property
    def rate_index(self) -> int:
        return RATE_CLASSES.index(self.rate_bucket)


def is_alternating(rr: np.ndarray, theta: float = 0.15, nu: int = 2) -> bool:
    """True when at least ``nu`` consecutive sign alternations of successive
    RR differences occur, each difference at least ``theta`` of the mean RR."""
    rr = np.asarray(rr, dtype=np.float64)
    if rr.size < 3:
        return False
    d = np.diff(rr)
    big = np.abs(d) >= theta * rr.mean()
    run = best = 0
    for k in range(1, d.size):
        if big[k] and big[k - 1] and np.sign(d[k]) == -np.sign(d[k - 1]) != 0:
            run += 1
            best = max(best, run)
        else:
            run = 0
    return best >= nu


def rhythm_targets(peaks, fs: float = 500.0, brady_bpm: float = 60.0, tachy_bpm: float = 100.0,
                   theta_alt: float = 0.15, nu_alt: int = 2) -> RhythmTargets:
    peaks = np.asarray(peaks, dtype=np.int64)
    if peaks.size >= 2 and np.any(np.diff(peaks) <= 0):
        raise ValueError("peaks must be strictly increasing")
    if peaks.size < 2:
        return RhythmTargets(float("nan"), float("nan"), float("nan"), "none", None, int(peaks.size))
    rr = np.diff(peaks).astype(np.float64)
    mean_rr = float(rr.mean())
    hr = 60.0 * fs / mean_rr
    if hr < brady_bpm:
        bucket = "brady"
    elif hr > tachy_bpm:
        bucket = "tachy"
    else:
        bucket = "normal"
    return RhythmTargets(mean_rr, float(rr.std() / mean_rr), hr, bucket,
                         is_alternating(rr, theta_alt, nu_alt), int(peaks.size))


# -- positional targets --------------------------------------------------------------


@dataclass(frozen=True)
class PositionTargets:
    seq_bucket: np.ndarray  # (T,) int64
    phase: np.ndarray  # (T,) int64, -1 where masked
    phase_mask: np.ndarray  # (T,) bool, True where the phase target is usable


def patch_centers(n_patches: int, patch_len: int, stride: int) -> np.ndarray:
    return np.arange(n_patches) * stride + patch_len / 2.0


def phase_targets(peaks, mean_rr: float, n_patches: int, patch_len: int = 50, stride: int = 25,
                  delta_r: float = 50.0) -> tuple[np.ndarray, np.ndarray]:
    """Per-patch R-peak phase class and usability mask."""
    peaks = np.asarray(peaks, dtype=np.float64)
    phase = np.full(n_patches, -1, dtype=np.int64)
    if peaks.size == 0 or not np.isfinite(mean_rr) or mean_rr <= 0:
        return phase, phase >= 0
    centers = patch_centers(n_patches, patch_len, stride)
    j = np.clip(np.searchsorted(peaks, centers), 1, max(1, peaks.size - 1))
    if peaks.size == 1:
        nearest = np.full(n_patches, peaks[0])
    else:
        left, right = peaks[j - 1], peaks[j]
        nearest = np.where(centers - left <= right - centers, left, right)
    delta = centers - nearest
    r = np.abs(delta) <= delta_r
    st = (delta > delta_r) & (delta <= mean_rr / 3)
    tw = (delta > mean_rr / 3) & (delta <= mean_rr / 2)
    pre = ((delta < -delta_r) | (delta > mean_rr / 2)) & (np.abs(delta) <= mean_rr)
    phase[pre] = 0
    phase[r] = 1
    phase[st] = 2
    phase[tw] = 3
    return phase, phase >= 0


def seq_position_targets(n_patches: int, n_buckets: int = 8) -> np.ndarray:
    if n_patches < n_buckets:
        raise ValueError(f"need at least {n_buckets} patches, got {n_patches}")
    return (np.arange(n_patches) * n_buckets) // n_patches


def position_targets(peaks, mean_rr: float, n_patches: int, patch_len: int = 50, stride: int = 25,
                     delta_r: float = 50.0, n_buckets: int = 8) -> PositionTargets:
    phase, mask = phase_targets(peaks, mean_rr, n_patches, patch_len, stride, delta_r)
    return PositionTargets(seq_position_targets(n_patches, n_buckets), phase, mask)


TARGET_CSV_HEADER = ("id", "mean_rr", "rr_cv", "hr_bpm", "bucket", "alternation", "n_peaks")


def target_csv_row(record_id: str, rt: RhythmTargets) -> list[str]:
    def num(v):
        return "" if not np.isfinite(v) else f"{v:.6g}"

    alt = "none" if rt.alternation is None else str(rt.alternation).lower()
    return [record_id, num(rt.mean_rr), num(rt.rr_cv), num(rt.hr_bpm), rt.rate_bucket, alt, str(rt.n_peaks)]
