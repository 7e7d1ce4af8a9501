"""WFDB-subset I/O, preprocessing to the training window, and synthetic ECGs."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import butter, sosfiltfilt

from .physio import detect_rpeaks
from .snomed import LeafTarget, resolve_codes

LEAD_NAMES = ("I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6")
SUPPORTED_FS = (500, 1000)
TARGET_FS = 500
WINDOW_PRESETS = {"long": 4700, "short": 3500}


class HeaderError(ValueError):
    pass


class QualityError(ValueError):
    pass


# -- WFDB header -------------------------------------------------------------------


@dataclass(frozen=True)
class SignalSpec:
    file_name: str
    fmt: int = 16
    gain: float = 1000.0
    baseline: int = 0
    units: str = "mV"
    adc_res: int = 16
    adc_zero: int = 0
    init_value: int = 0
    checksum: int = 0
    block_size: int = 0
    description: str = ""


@dataclass(frozen=True)
class Header:
    record_name: str
    n_sig: int
    fs: float
    n_samples: int
    signals: tuple[SignalSpec, ...]
    codes: tuple[int, ...] = ()
    comments: tuple[str, ...] = ()  # non-Dx comment lines, verbatim without '#'


_DX = re.compile(r"^#\s*dx\s*:(.*)$", re.IGNORECASE)
_GAIN = re.compile(r"^([-+0-9.eE]+)(?:\(([-+]?\d+)\))?(?:/(\S+))?$")


def _num(text: str):
    v = float(text)
    return int(v) if v.is_integer() else v


def parse_header(text: str) -> Header:
    """Parse the record line, per-signal lines and comments of a header."""
    record_line = None
    signals = []
    codes: list[int] = []
    comments = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = _DX.match(line)
            if m is None:
                comments.append(line[1:])
                continue
            for tok in m.group(1).split(","):
                tok = tok.strip()
                if not tok:
                    continue
                try:
                    codes.append(int(tok))
                except ValueError:
                    raise HeaderError(f"line {lineno}: malformed Dx code {tok!r}") from None
            continue
        fields = line.split()
        try:
            if record_line is None:
                if len(fields) < 4:
                    raise HeaderError(f"line {lineno}: record line needs name, nsig, fs, nsamp")
                record_line = (fields[0], int(fields[1]), float(fields[2].split("/")[0]), int(fields[3]))
                continue
            m = _GAIN.match(fields[2]) if len(fields) > 2 else None
            if m is None:
                raise HeaderError(f"line {lineno}: malformed gain field in {line!r}")
            gain = float(m.group(1)) or 200.0
            ints = [int(v) for v in fields[3:8]]
            adc_zero = ints[1] if len(ints) > 1 else 0
            baseline = int(m.group(2)) if m.group(2) is not None else adc_zero
            defaults = [16, 0, 0, 0, 0]
            ints = ints + defaults[len(ints):]
            signals.append(SignalSpec(
                file_name=fields[0], fmt=int(fields[1]), gain=gain, baseline=baseline,
                units=m.group(3) or "mV", adc_res=ints[0], adc_zero=ints[1], init_value=ints[2],
                checksum=ints[3], block_size=ints[4], description=" ".join(fields[8:]),
            ))
        except ValueError as exc:
            if isinstance(exc, HeaderError):
                raise
            raise HeaderError(f"line {lineno}: malformed numeric field in {line!r}") from exc
    if record_line is None:
        raise HeaderError("empty header")
    name, n_sig, fs, n_samples = record_line
    if len(signals) != n_sig:
        raise HeaderError(f"header declares {n_sig} signals but lists {len(signals)}")
    return Header(name, n_sig, fs, n_samples, tuple(signals), tuple(codes), tuple(comments))


def format_header(header: Header) -> str:
    lines = [f"{header.record_name} {header.n_sig} {_num(str(header.fs))} {header.n_samples}"]
    for s in header.signals:
        gain = _num(repr(float(s.gain)))
        line = (f"{s.file_name} {s.fmt} {gain}({s.baseline})/{s.units} {s.adc_res} {s.adc_zero} "
                f"{s.init_value} {s.checksum} {s.block_size}")
        lines.append(f"{line} {s.description}" if s.description else line)
    lines.append("#Dx: " + ",".join(str(c) for c in header.codes))
    lines.extend("#" + c for c in header.comments)
    return "\n".join(lines) + "\n"


# -- format 16 signals -----------------------------------------------------------


def load_signal(data: bytes, header: Header) -> np.ndarray:
    """Decode interleaved little-endian int16 samples to physical units (C x L)."""
    n_sig = header.n_sig
    if any(s.fmt != 16 for s in header.signals):
        raise HeaderError("only format 16 is supported")
    if len(data) % (2 * n_sig):
        raise HeaderError(f"signal byte length {len(data)} is not a multiple of {2 * n_sig} (truncated?)")
    raw = np.frombuffer(data, dtype="<i2").reshape(-1, n_sig).T.astype(np.float64)
    if header.n_samples and raw.shape[1] != header.n_samples:
        raise HeaderError(f"header declares {header.n_samples} samples, data holds {raw.shape[1]}")
    gain = np.array([s.gain for s in header.signals])[:, None]
    baseline = np.array([s.baseline for s in header.signals], dtype=np.float64)[:, None]
    return (raw - baseline) / gain


def encode_signal(signal: np.ndarray, gain: float = 1000.0, baseline: int = 0) -> bytes:
    digital = np.rint(np.asarray(signal, dtype=np.float64) * gain + baseline)
    digital = np.clip(digital, -32768, 32767).astype("<i2")
    return digital.T.tobytes()


def make_header(record_id: str, signal: np.ndarray, fs: float, codes: Sequence[int] = (),
                gain: float = 1000.0, comments: Sequence[str] = ()) -> Header:
    n_sig, n = signal.shape
    names = LEAD_NAMES if n_sig == len(LEAD_NAMES) else tuple(f"ch{k}" for k in range(n_sig))
    sigs = tuple(SignalSpec(f"{record_id}.dat", 16, gain, 0, "mV", 16, 0, 0, 0, 0, names[k])
                 for k in range(n_sig))
    return Header(record_id, n_sig, fs, n, sigs, tuple(int(c) for c in codes), tuple(comments))


# -- records ------------------------------------------------------------------------


@dataclass(frozen=True)
class RevinStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class EcgRecord:
    id: str
    signal: np.ndarray  # (C, L) float32
    fs: float
    codes: tuple[int, ...] = ()
    leaf_target: LeafTarget | None = None
    rpeaks: np.ndarray | None = None
    quality: str = "pass"
    quality_reason: str = ""
    revin: RevinStats | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_leads(self) -> int:
        return self.signal.shape[0]

    @property
    def length(self) -> int:
        return self.signal.shape[1]


def revin_normalize(signal: np.ndarray, eps: float = 1e-5) -> tuple[np.ndarray, RevinStats]:
    x = np.asarray(signal, dtype=np.float64)
    mean = x.mean(axis=1)
    std = np.maximum(x.std(axis=1), eps)
    return (x - mean[:, None]) / std[:, None], RevinStats(mean, std)


def revin_denormalize(normalized: np.ndarray, stats: RevinStats) -> np.ndarray:
    return np.asarray(normalized, dtype=np.float64) * stats.std[:, None] + stats.mean[:, None]


def quality_check(signal: np.ndarray, amp_bound: float = 25.0, saturation_run: int = 50,
                  zero_fraction: float = 0.9) -> str:
    """Return '' for a usable recording, otherwise the first failing criterion."""
    x = np.asarray(signal, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        return "non_finite"
    if np.any(np.mean(x == 0.0, axis=1) > zero_fraction):
        return "zero_fraction"
    for lead in x:
        for extreme in (lead.max(), lead.min()):
            hit = np.concatenate(([0], (lead == extreme).astype(np.int8), [0]))
            edges = np.flatnonzero(np.diff(hit))
            if edges.size and np.max(edges[1::2] - edges[::2]) >= saturation_run:
                return "saturation"
    if np.any(np.abs(x) > amp_bound):
        return "amplitude"
    return ""


def resample_to_target(signal: np.ndarray, fs: float) -> np.ndarray:
    if fs == TARGET_FS:
        return np.asarray(signal, dtype=np.float64)
    if fs not in SUPPORTED_FS:
        raise ValueError(f"unsupported sampling rate {fs} Hz (supported: {SUPPORTED_FS})")
    cutoff = 0.45 * (TARGET_FS / 2.0)
    sos = butter(8, cutoff, btype="lowpass", fs=fs, output="sos")
    return sosfiltfilt(sos, np.asarray(signal, dtype=np.float64), axis=1)[:, ::2]


def fit_window(signal: np.ndarray, length: int) -> np.ndarray:
    """Centre-crop or right-zero-pad along time to exactly ``length`` samples."""
    n = signal.shape[1]
    if n >= length:
        start = (n - length) // 2
        return signal[:, start : start + length]
    return np.pad(signal, ((0, 0), (0, length - n)))


def preprocess(record: EcgRecord, length: int = 4700, amp_bound: float = 25.0, saturation_run: int = 50,
               zero_fraction: float = 0.9, leaf_target: LeafTarget | None = None,
               graph=None, routing=None) -> EcgRecord:
    """Resample to 500 Hz, quality-gate, fit the window, detect R-peaks, RevIN."""
    x = resample_to_target(record.signal, record.fs)
    reason = quality_check(x, amp_bound, saturation_run, zero_fraction)
    x = fit_window(x, length)
    peaks = detect_rpeaks(x[0], TARGET_FS)
    normalized, stats = revin_normalize(x)
    if leaf_target is None:
        leaf_target = record.leaf_target or resolve_codes(record.codes, routing, graph)
    return replace(
        record, signal=normalized.astype(np.float32), fs=float(TARGET_FS), leaf_target=leaf_target,
        rpeaks=peaks, quality="fail" if reason else "pass", quality_reason=reason, revin=stats,
    )


# -- synthetic ECG ------------------------------------------------------------------

# lead gains for (P, QRS, T); lead I positive throughout
_LEAD_GAIN = np.array([
    [0.6, 1.0, 0.6], [1.0, 1.3, 0.8], [0.4, 0.4, 0.2], [-0.7, -1.1, -0.6],
    [0.2, 0.5, 0.3], [0.6, 0.8, 0.5], [0.3, -0.6, -0.2], [0.4, 0.5, 0.6],
    [0.4, 0.9, 0.8], [0.4, 1.3, 0.9], [0.4, 1.2, 0.7], [0.4, 1.0, 0.5],
])
_LEFT_LEADS = [0, 4, 10, 11]
_ANTERIOR_LEADS = [6, 7, 8, 9]
RHYTHMS = ("sinus", "af", "bigeminy", "trigeminy")
MORPHOLOGIES = ("lbbb", "ste", "lvh", "twi", "avb1")


@dataclass(frozen=True)
class SynthSpec:
    rate_bpm: float = 70.0
    rhythm: str = "sinus"
    morphology: tuple[str, ...] = ()
    noise_snr_db: float | None = None
    root_only: bool = False
    native_fs: int = 500

    def __post_init__(self):
        if not 30 <= self.rate_bpm <= 220:
            raise ValueError(f"rate_bpm must lie in [30, 220], got {self.rate_bpm}")
        if self.rhythm not in RHYTHMS:
            raise ValueError(f"unknown rhythm {self.rhythm!r}")
        bad = set(self.morphology) - set(MORPHOLOGIES)
        if bad:
            raise ValueError(f"unknown morphology flags {sorted(bad)}")


def synth_codes(spec: SynthSpec) -> tuple[int, ...]:
    """SNOMED codes consistent with a synthetic spec (only shipped routing codes)."""
    if spec.root_only:
        return (698252002,)
    if spec.rhythm == "af":
        codes = [164889003]
    elif spec.rate_bpm < 60:
        codes = [426177001]
    elif spec.rate_bpm > 100:
        codes = [427084000]
    else:
        codes = [426783006]
    if spec.rhythm in ("bigeminy", "trigeminy"):
        codes.append(17338001)
    by_flag = {"lbbb": 164909002, "ste": 164931005, "lvh": 164873001, "twi": 59931005, "avb1": 270492004}
    codes += [by_flag[f] for f in MORPHOLOGIES if f in spec.morphology]
    return tuple(codes)


def _beat_times(spec: SynthSpec, duration: float, rng: np.random.Generator) -> np.ndarray:
    rr0 = 60.0 / spec.rate_bpm
    if spec.rhythm == "bigeminy":
        pattern = [0.75, 1.25]
    elif spec.rhythm == "trigeminy":
        pattern = [1.0, 0.7, 1.3]
    else:
        pattern = [1.0]
    t = rng.uniform(0.2, 0.2 + min(rr0, 0.5))
    times = []
    k = 0
    while t < duration - 0.15:
        times.append(t)
        if spec.rhythm == "af":
            step = rr0 * float(np.clip(rng.normal(1.0, 0.2), 0.6, 1.6))
        else:
            step = rr0 * pattern[k % len(pattern)]
        t += step
        k += 1
    return np.asarray(times)


def _gauss(t: np.ndarray, center: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((t - center) / width) ** 2)


def synth_record(spec: SynthSpec, seed: int, length: int = 4700, n_leads: int = 12,
                 record_id: str | None = None) -> EcgRecord:
    """Synthesise a 12-lead recording from parameterised P-QRS-T templates.

    The returned record carries raw millivolt samples at ``spec.native_fs``;
    ground-truth R-peak sample indices (at 500 Hz) are stored in
    ``meta['true_rpeaks']``.
    """
    rng = np.random.default_rng(seed)
    fs = spec.native_fs
    n = length * fs // TARGET_FS
    duration = n / fs
    t = np.arange(n) / fs
    beats = _beat_times(spec, duration, rng)
    gains = _LEAD_GAIN[np.arange(n_leads) % len(_LEAD_GAIN)].copy()
    morph = set(spec.morphology)

    qrs_scale = np.ones(n_leads)
    t_scale = np.ones(n_leads)
    if "lvh" in morph:
        qrs_scale[_LEFT_LEADS] = 2.2
    if "twi" in morph:
        t_scale[:] = -1.0
        t_scale[3] = 1.0
    p_wave = np.zeros(n)
    qrs = np.zeros(n)
    t_wave = np.zeros(n)
    st = np.zeros(n)
    wide = "lbbb" in morph
    pr = 0.30 if "avb1" in morph else 0.16
    for k, tb in enumerate(beats):
        rr = beats[k] - beats[k - 1] if k else 60.0 / spec.rate_bpm
        qt = 0.30 * math.sqrt(max(rr, 0.25))
        ectopic = spec.rhythm in ("bigeminy", "trigeminy") and k % (2 if spec.rhythm == "bigeminy" else 3) == 1
        if spec.rhythm != "af" and not ectopic:
            p_wave += 0.15 * _gauss(t, tb - pr * math.sqrt(max(rr, 0.25)), 0.025)
        if wide or ectopic:
            qrs += 1.0 * _gauss(t, tb, 0.020) + 0.45 * _gauss(t, tb + 0.035, 0.025)
            qrs -= 0.15 * _gauss(t, tb + 0.080, 0.020)
            t_wave -= 0.35 * _gauss(t, tb + qt + 0.02, 0.045)
        else:
            qrs += -0.10 * _gauss(t, tb - 0.025, 0.008) + 1.0 * _gauss(t, tb, 0.010)
            qrs -= 0.25 * _gauss(t, tb + 0.025, 0.008)
            t_wave += 0.30 * _gauss(t, tb + qt, 0.040)
        if "ste" in morph:
            st += 0.25 * _gauss(t, tb + 0.5 * qt, 0.06)
    signal = gains[:, 0:1] * p_wave + (gains[:, 1:2] * qrs_scale[:, None]) * qrs \
        + (gains[:, 2:3] * t_scale[:, None]) * t_wave
    if "ste" in morph:
        lift = np.zeros(n_leads)
        lift[_ANTERIOR_LEADS] = 1.0
        lift[0] = 0.6
        signal += lift[:, None] * st
    if spec.rhythm == "af":
        phase = rng.uniform(0, 2 * np.pi, size=(n_leads, 1))
        signal += 0.04 * np.sin(2 * np.pi * 6.0 * t[None, :] + phase) * np.abs(gains[:, 0:1])
    if spec.noise_snr_db is not None:
        rms = np.sqrt(np.mean(signal**2, axis=1, keepdims=True))
        signal = signal + rng.normal(size=signal.shape) * rms / 10 ** (spec.noise_snr_db / 20.0)
    true_peaks = np.rint(beats * TARGET_FS).astype(np.int64)
    true_peaks = true_peaks[(true_peaks >= 0) & (true_peaks < length)]
    codes = synth_codes(spec)
    return EcgRecord(
        id=record_id or f"synth{seed:06d}", signal=signal.astype(np.float64), fs=float(fs), codes=codes,
        meta={"true_rpeaks": true_peaks, "spec": spec},
    )


SYNTH_CLASSES = {
    "normal": dict(rhythm="sinus", rate=(60, 95)),
    "brady": dict(rhythm="sinus", rate=(40, 55)),
    "tachy": dict(rhythm="sinus", rate=(110, 150)),
    "af": dict(rhythm="af", rate=(70, 120)),
    "bigeminy": dict(rhythm="bigeminy", rate=(60, 90)),
    "lbbb": dict(rhythm="sinus", rate=(60, 95), morphology=("lbbb",)),
    "ste": dict(rhythm="sinus", rate=(60, 95), morphology=("ste",)),
    "lvh": dict(rhythm="sinus", rate=(60, 95), morphology=("lvh",)),
    "twi": dict(rhythm="sinus", rate=(60, 95), morphology=("twi",)),
    "nos": dict(rhythm="sinus", rate=(60, 95), root_only=True),
}


def synth_spec_for(label: str, rng: np.random.Generator, noise_snr_db: float | None = None) -> SynthSpec:
    c = SYNTH_CLASSES[label]
    lo, hi = c["rate"]
    return SynthSpec(rate_bpm=float(rng.uniform(lo, hi)), rhythm=c["rhythm"],
                     morphology=tuple(c.get("morphology", ())), noise_snr_db=noise_snr_db,
                     root_only=c.get("root_only", False))


def synth_corpus(n: int, seed: int, length: int = 4700, classes: Sequence[str] | None = None,
                 noise_snr_db: float | None = None) -> list[EcgRecord]:
    """Deterministic labelled corpus cycling through ``classes``."""
    classes = list(classes or SYNTH_CLASSES)
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        label = classes[k % len(classes)]
        spec = synth_spec_for(label, rng, noise_snr_db)
        rec = synth_record(spec, int(rng.integers(2**31)), length, record_id=f"rec{k:05d}")
        rec.meta["label"] = label
        out.append(rec)
    return out


# -- corpus directories ---------------------------------------------------------------

MANIFEST = "RECORDS"


def write_record(record: EcgRecord, directory, gain: float = 1000.0) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    comments = []
    if "label" in record.meta:
        comments.append(f"Label: {record.meta['label']}")
    header = make_header(record.id, record.signal, record.fs, record.codes, gain, comments)
    (directory / f"{record.id}.hea").write_text(format_header(header), encoding="utf-8", newline="\n")
    (directory / f"{record.id}.dat").write_bytes(encode_signal(record.signal, gain))


def read_record(directory, record_id: str) -> EcgRecord:
    directory = Path(directory)
    header = parse_header((directory / f"{record_id}.hea").read_text(encoding="utf-8"))
    signal = load_signal((directory / header.signals[0].file_name).read_bytes(), header)
    meta = {}
    for c in header.comments:
        key, _, value = c.partition(":")
        if key.strip().lower() == "label":
            meta["label"] = value.strip()
    return EcgRecord(id=record_id, signal=signal, fs=header.fs, codes=header.codes, meta=meta)


def write_corpus(records: Sequence[EcgRecord], directory, gain: float = 1000.0) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for rec in records:
        write_record(rec, directory, gain)
    (directory / MANIFEST).write_text("".join(r.id + "\n" for r in records), encoding="utf-8", newline="\n")


def read_manifest(directory) -> list[str]:
    path = Path(directory) / MANIFEST
    return [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def read_corpus(directory) -> list[EcgRecord]:
    return [read_record(directory, rid) for rid in read_manifest(directory)]
