"""Synthetic 12-lead ECG corpus and the preprocessing chain.

Beats are sums of truncated Gaussian bumps (P, Q, R, S, T) per lead. Every
patient gets a baseline morphology drawn from ``patient_seed``; a disease
label adds morphology edits to a short run of consecutive beats (the
"episode"). Because the edits are applied as an exact additive delta, the
samples they touch are known and stored as ``disease_segments``.

Preprocessing follows: R peaks on lead II -> window from 100 samples
before the first to 100 after the seventh peak -> linear resampling to
4096 samples -> per-lead z-score.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import maximum_filter1d, uniform_filter1d

from . import LABELS, LEAD_NAMES
from .errors import DataError, InsufficientBeatsError, ValidationError

logger = logging.getLogger(__name__)

N_LEADS = 12
TARGET_LENGTH = 4096
REFERENCE_LEAD = 1  # lead II
WINDOW_MARGIN = 100
BEATS_PER_WINDOW = 7
GAUSS_SUPPORT = 4.0  # bumps are truncated at +-4 sigma
ENERGY_FLOOR = 0.1

WAVES = ("P", "Q", "R", "S", "T")
_LEAD = {name: i for i, name in enumerate(LEAD_NAMES)}

# Per-lead amplitude multipliers of the base beat, columns follow WAVES.
_LEAD_GAINS = np.array([
    [0.8, 0.6, 0.7, 0.5, 0.8],      # I
    [1.0, 1.0, 1.0, 1.0, 1.0],      # II
    [0.4, 0.6, 0.5, 0.7, 0.3],      # III
    [-0.8, -0.5, -0.8, -0.4, -0.8],  # aVR
    [0.3, 0.4, 0.3, 0.5, 0.3],      # aVL
    [0.7, 0.8, 0.8, 0.8, 0.6],      # aVF
    [0.5, 0.1, 0.3, 3.0, -0.3],     # V1
    [0.6, 0.2, 0.6, 3.2, 1.2],      # V2
    [0.6, 0.4, 1.0, 2.0, 1.3],      # V3
    [0.6, 0.6, 1.4, 1.2, 1.2],      # V4
    [0.6, 0.7, 1.3, 0.6, 1.0],      # V5
    [0.6, 0.6, 1.1, 0.3, 0.8],      # V6
])
# (center ms relative to R, sigma ms, lead-II amplitude mV)
_BASE_WAVES = {
    "P": (-160.0, 20.0, 0.15),
    "Q": (-30.0, 8.0, -0.10),
    "R": (0.0, 10.0, 1.00),
    "S": (30.0, 10.0, -0.25),
    "T": (280.0, 45.0, 0.30),
}

REPORTS = {
    "NORM": ("sinus rhythm. normal ecg", "sinus rhythm within normal limits. normal ecg"),
    "MI": ("pathological q waves and tall t waves in leads v1 v2 v3 v4. myocardial infarction",
           "deep q waves with hyperacute t waves in anterior leads. myocardial infarction"),
    "STTC": ("st segment elevation in leads v1 v2 v3 v4. st t change",
             "significant st elevation in the v3 lead. st t abnormality"),
    "CD": ("prolonged pr interval with nonconducted p waves. conduction disturbance",
           "p wave failing to conduct to the ventricle. av block conduction disturbance"),
    "HYP": ("increased qrs voltage with t wave flattening in lead i. hypertrophy",
            "high qrs amplitude and flat t waves in lateral leads. ventricular hypertrophy"),
}


@dataclass(frozen=True)
class WaveParams:
    center_ms: float
    width_ms: float
    amplitudes: tuple  # one per lead


def _base_wave_params() -> dict[str, WaveParams]:
    out = {}
    for j, w in enumerate(WAVES):
        c, s, a = _BASE_WAVES[w]
        out[w] = WaveParams(c, s, tuple(float(a * g) for g in _LEAD_GAINS[:, j]))
    return out


@dataclass(frozen=True)
class DiseaseSpec:
    """Population-level generator parameters for one superclass."""

    label: str = "NORM"
    waves: dict = field(default_factory=_base_wave_params)
    rr_interval_ms: float = 850.0
    rr_jitter_ms: float = 20.0
    rr_spread: float = 0.15  # patient-level relative spread of the mean RR
    amplitude_spread: float = 0.3  # lognormal sigma of patient wave amplitudes
    noise_std: float = 0.02
    wander_mv: float = 0.05
    sampling_rate: int = 500
    duration_s: float = 10.0
    episode_beats: int | None = 3  # None: every beat carries the edits
    # STTC
    st_offset_mv: float = 0.0
    st_leads: tuple = (6, 7, 8, 9)
    # MI
    q_depth_mv: float = 0.0
    t_gain: float = 1.0
    mi_leads: tuple = (6, 7, 8, 9)
    # HYP
    qrs_gain: float = 1.0
    qrs_leads: tuple = (0, 4, 6, 7, 8, 9, 10, 11)
    t_flatten: float = 1.0
    t_flat_leads: tuple = (0, 4, 10, 11)
    # CD
    drop_prob: float = 0.0
    pr_prolong_ms: float = 0.0

    @classmethod
    def default(cls, label: str, **overrides) -> "DiseaseSpec":
        edits = {
            "NORM": {},
            "STTC": {"st_offset_mv": 0.35},
            "MI": {"q_depth_mv": -0.45, "t_gain": 2.2},
            "HYP": {"qrs_gain": 1.9, "t_flatten": 0.1},
            "CD": {"drop_prob": 0.5, "pr_prolong_ms": 110.0},
        }
        if label not in edits:
            raise ValidationError(f"label: unknown superclass {label!r}")
        return cls(label=label, **{**edits[label], **overrides})

    def validate(self) -> None:
        if self.label not in LABELS:
            raise ValidationError(f"label: unknown superclass {self.label!r}")
        for name, w in self.waves.items():
            if not w.width_ms > 0:
                raise ValidationError(f"waves[{name}].width_ms must be > 0")
            if len(w.amplitudes) != N_LEADS:
                raise ValidationError(f"waves[{name}].amplitudes needs {N_LEADS} entries")
        if not self.rr_interval_ms > 0:
            raise ValidationError("rr_interval_ms must be > 0")
        if self.rr_jitter_ms < 0:
            raise ValidationError("rr_jitter_ms must be >= 0")
        if not 0 <= self.rr_spread < 1:
            raise ValidationError("rr_spread must be in [0, 1)")
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValidationError("drop_prob must be in [0, 1]")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        if self.sampling_rate <= 0:
            raise ValidationError("sampling_rate must be positive")
        if self.duration_s <= 0:
            raise ValidationError("duration_s must be positive")
        if self.episode_beats is not None and self.episode_beats < 1:
            raise ValidationError("episode_beats must be >= 1 or None")
        if self.t_gain < 0 or self.qrs_gain < 0 or self.t_flatten < 0:
            raise ValidationError("gains must be non-negative")


@dataclass
class EcgRecord:
    patient_id: str
    leads: np.ndarray
    label: str
    report: str
    sampling_rate: int
    disease_segments: list = field(default_factory=list)  # (lead, start, end), end exclusive

    def __post_init__(self):
        self.leads = np.ascontiguousarray(self.leads, dtype=np.float32)
        if self.leads.ndim != 2 or self.leads.shape[0] != N_LEADS:
            raise ValidationError(f"leads must be 12 x N, got {self.leads.shape}")
        if self.label not in LABELS:
            raise ValidationError(f"label: unknown superclass {self.label!r}")
        if int(self.sampling_rate) <= 0:
            raise ValidationError("sampling_rate must be positive")
        self.sampling_rate = int(self.sampling_rate)
        self.disease_segments = [tuple(int(v) for v in s) for s in self.disease_segments]

    def __eq__(self, other):
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (self.patient_id == other.patient_id and self.label == other.label
                and self.report == other.report and self.sampling_rate == other.sampling_rate
                and self.disease_segments == other.disease_segments
                and self.leads.shape == other.leads.shape
                and self.leads.tobytes() == other.leads.tobytes())

    def replace(self, **kw) -> "EcgRecord":
        return dataclasses.replace(self, **kw)

    def segment_mask(self) -> np.ndarray:
        """Boolean 12 x N map of the ground-truth disease samples."""
        m = np.zeros(self.leads.shape, dtype=bool)
        for lead, s, e in self.disease_segments:
            m[lead, s:e] = True
        return m


# -- synthesis ---------------------------------------------------------------

def _rng(patient_seed: int, stream: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(patient_seed), stream, *extra])


@dataclass
class _Patient:
    amp: np.ndarray         # (5 waves, 12 leads) multiplicative factors
    width: np.ndarray       # (5,)
    shift_ms: np.ndarray    # (5,)
    rr_factor: float
    severity: float
    episode_start: int
    first_beat_s: float
    report_variant: int


def _patient(spec: DiseaseSpec, patient_seed: int) -> _Patient:
    rng = _rng(patient_seed, 0)
    amp = rng.lognormal(0.0, spec.amplitude_spread, size=(len(WAVES), N_LEADS))
    amp *= rng.lognormal(0.0, 0.15, size=(1, N_LEADS))
    width = rng.uniform(0.85, 1.15, size=len(WAVES))
    shift = rng.normal(0.0, 8.0, size=len(WAVES))
    shift[WAVES.index("R")] = 0.0
    rr_factor = rng.uniform(1 - spec.rr_spread, 1 + spec.rr_spread)
    severity = rng.uniform(0.8, 1.2)
    n_ep = spec.episode_beats or 1
    episode_start = int(rng.integers(1, max(2, BEATS_PER_WINDOW - n_ep + 1)))
    first_beat_s = rng.uniform(0.3, 0.6)
    report_variant = int(rng.integers(0, 2))
    return _Patient(amp, width, shift, rr_factor, severity, episode_start, first_beat_s,
                    report_variant)


def beat_schedule(spec: DiseaseSpec, patient_seed: int, record_index: int = 0) -> np.ndarray:
    """Sample indices of every scheduled R peak (dropped beats included)."""
    spec.validate()
    p = _patient(spec, patient_seed)
    rng = _rng(patient_seed, 1, record_index)
    fs = spec.sampling_rate
    n = int(round(spec.duration_s * fs))
    rr_mean = spec.rr_interval_ms * p.rr_factor
    t = p.first_beat_s * 1000.0
    out = []
    while True:
        idx = int(round(t * fs / 1000.0))
        if idx >= n - int(0.5 * fs):
            break
        out.append(idx)
        t += max(rr_mean + rng.normal(0.0, spec.rr_jitter_ms) if spec.rr_jitter_ms else rr_mean,
                 0.3 * rr_mean)
    return np.asarray(out, dtype=np.int64)


def _add_bump(out: np.ndarray, center: float, sigma: float, amps: np.ndarray) -> None:
    lo = max(int(math.ceil(center - GAUSS_SUPPORT * sigma)), 0)
    hi = min(int(math.floor(center + GAUSS_SUPPORT * sigma)) + 1, out.shape[1])
    if hi <= lo:
        return
    t = np.arange(lo, hi, dtype=np.float64)
    g = np.exp(-0.5 * ((t - center) / sigma) ** 2)
    out[:, lo:hi] += amps[:, None] * g[None, :]


def _beat_waves(spec: DiseaseSpec, p: _Patient, diseased: bool, dropped: bool):
    """Per-wave (center_ms, sigma_ms, amps[12]) for one beat."""
    waves = {}
    for j, w in enumerate(WAVES):
        wp = spec.waves[w]
        amps = np.asarray(wp.amplitudes, dtype=np.float64) * p.amp[j]
        waves[w] = [wp.center_ms + p.shift_ms[j], wp.width_ms * p.width[j], amps]
    if not diseased:
        return waves
    sev = p.severity
    if spec.label == "STTC" and spec.st_offset_mv != 0.0:
        amps = np.zeros(N_LEADS)
        amps[list(spec.st_leads)] = spec.st_offset_mv * sev
        waves["ST"] = [150.0, 40.0, amps]
    elif spec.label == "MI":
        q = waves["Q"][2].copy()
        t = waves["T"][2].copy()
        for lead in spec.mi_leads:
            q[lead] += spec.q_depth_mv * sev
            t[lead] *= 1.0 + (spec.t_gain - 1.0) * sev
        waves["Q"][2], waves["T"][2] = q, t
        waves["Q"][1] *= 1.0 + 0.5 * (spec.q_depth_mv != 0.0)
    elif spec.label == "HYP":
        for w in ("Q", "R", "S"):
            a = waves[w][2].copy()
            a[list(spec.qrs_leads)] *= 1.0 + (spec.qrs_gain - 1.0) * sev
            waves[w][2] = a
        t = waves["T"][2].copy()
        t[list(spec.t_flat_leads)] *= spec.t_flatten
        waves["T"][2] = t
    elif spec.label == "CD":
        waves["P"][0] -= spec.pr_prolong_ms * sev
        if dropped:
            for w in ("Q", "R", "S", "T"):
                del waves[w]
    return waves


def _render(spec, p, r_idx, edit_beats, dropped, fs, n):
    out = np.zeros((N_LEADS, n))
    for k, r in enumerate(r_idx):
        diseased = k in edit_beats
        for c_ms, s_ms, amps in _beat_waves(spec, p, diseased, dropped.get(k, False)).values():
            _add_bump(out, r + c_ms * fs / 1000.0, s_ms * fs / 1000.0, amps)
    return out


def _runs(mask_row: np.ndarray) -> list[tuple[int, int]]:
    padded = np.concatenate([[False], mask_row, [False]])
    d = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return [(int(a), int(b)) for a, b in zip(d[::2], d[1::2])]


def synth_record(spec: DiseaseSpec, patient_seed: int, record_index: int = 0) -> EcgRecord:
    """Render one raw (un-preprocessed) record.

    Geometry and the episode location depend only on ``patient_seed``; the
    RR jitter, baseline wander and noise additionally on ``record_index``.
    A patient's NORM and diseased records with the same ``record_index``
    therefore differ only inside ``disease_segments``.
    """
    spec.validate()
    if patient_seed < 0:
        raise ValidationError("patient_seed must be >= 0")
    fs = spec.sampling_rate
    n = int(round(spec.duration_s * fs))
    p = _patient(spec, patient_seed)
    r_idx = beat_schedule(spec, patient_seed, record_index)

    if spec.label == "NORM":
        edit_beats = set()
    elif spec.episode_beats is None:
        edit_beats = set(range(len(r_idx)))
    else:
        edit_beats = set(range(p.episode_start, p.episode_start + spec.episode_beats))
    dropped = {}
    if spec.label == "CD" and spec.drop_prob > 0:
        drng = _rng(patient_seed, 2)
        for k in sorted(edit_beats):
            dropped[k] = bool(drng.random() < spec.drop_prob)

    normal = _render(spec, p, r_idx, set(), {}, fs, n)
    if edit_beats:
        clean = _render(spec, p, r_idx, edit_beats, dropped, fs, n)
    else:
        clean = normal
    delta = clean - normal
    segments = []
    for lead in range(N_LEADS):
        segments.extend((lead, a, b) for a, b in _runs(delta[lead] != 0.0))

    rng = _rng(patient_seed, 1, record_index, 7)
    t = np.arange(n) / fs
    freq = rng.uniform(0.15, 0.35)
    phase = rng.uniform(0, 2 * np.pi, size=(N_LEADS, 1))
    wander = spec.wander_mv * np.sin(2 * np.pi * freq * t[None, :] + phase)
    noise = rng.normal(0.0, 1.0, size=(N_LEADS, n)) * spec.noise_std
    leads = clean + wander + noise

    report = REPORTS[spec.label][p.report_variant]
    return EcgRecord(f"P{patient_seed:010d}", leads, spec.label, report, fs, segments)


# -- preprocessing -----------------------------------------------------------

def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise DataError("signal contains non-finite samples")


def band_limited(signal: np.ndarray, sampling_rate: int) -> np.ndarray:
    """Moving-average differencing band-pass (short smoother minus baseline)."""
    x = np.asarray(signal, dtype=np.float64)
    short = max(int(round(0.010 * sampling_rate)), 1)
    long = max(int(round(0.200 * sampling_rate)), 3)
    return uniform_filter1d(x, short, mode="nearest") - uniform_filter1d(x, long, mode="nearest")


def detect_r_peaks(signal: Sequence[float], sampling_rate: int) -> list[int]:
    """Derivative-square-integrate R-peak detector.

    The integrated energy must exceed half of its rolling maximum over a
    2 s window and a tenth of its global maximum; candidates closer than 200 ms to a stronger one are
    dropped; each survivor is moved to the local maximum of the
    band-limited signal within +-75 ms.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValidationError("signal must be 1-D with at least 2 samples")
    _check_finite(x)
    fs = float(sampling_rate)
    band = band_limited(x, sampling_rate)
    energy = uniform_filter1d(np.gradient(band) ** 2, max(int(round(0.12 * fs)), 1),
                              mode="nearest")
    top = energy.max()
    if not top > 1e-12:
        return []
    # the global floor keeps P/T waves out when a pause leaves a 2 s window without any R
    threshold = np.maximum(
        0.5 * maximum_filter1d(energy, max(int(round(2.0 * fs)), 1), mode="nearest"),
        ENERGY_FLOOR * top)
    left = np.concatenate([[-np.inf], energy[:-1]])
    right = np.concatenate([energy[1:], [-np.inf]])
    cand = np.flatnonzero((energy >= left) & (energy > right) & (energy >= threshold))
    refractory = int(round(0.2 * fs))
    chosen: list[int] = []
    for i in cand[np.argsort(-energy[cand], kind="stable")]:
        if all(abs(int(i) - c) >= refractory for c in chosen):
            chosen.append(int(i))
    half = int(round(0.075 * fs))
    peaks = set()
    for c in chosen:
        lo, hi = max(c - half, 0), min(c + half + 1, x.size)
        j = lo + int(np.argmax(band[lo:hi]))
        if (j == 0 or band[j] >= band[j - 1]) and (j == x.size - 1 or band[j] >= band[j + 1]):
            peaks.add(j)
    out = sorted(peaks)
    # refinement can pull two candidates onto nearby maxima
    dedup: list[int] = []
    for j in out:
        if dedup and j - dedup[-1] < refractory:
            if band[j] > band[dedup[-1]]:
                dedup[-1] = j
            continue
        dedup.append(j)
    return dedup


def segment_window(r_peaks: Sequence[int], n_samples: int) -> tuple[int, int]:
    """Inclusive sample window spanning the first seven beats plus margins."""
    if len(r_peaks) < BEATS_PER_WINDOW:
        raise InsufficientBeatsError(
            f"need {BEATS_PER_WINDOW} R peaks, found {len(r_peaks)}")
    start = max(int(r_peaks[0]) - WINDOW_MARGIN, 0)
    end = min(int(r_peaks[BEATS_PER_WINDOW - 1]) + WINDOW_MARGIN, n_samples - 1)
    return start, end


def extract_segment(leads: np.ndarray, r_peaks: Sequence[int]) -> np.ndarray:
    leads = np.asarray(leads)
    start, end = segment_window(r_peaks, leads.shape[1])
    return leads[:, start:end + 1]


def resample_to_fixed(segment: np.ndarray, target: int = TARGET_LENGTH) -> np.ndarray:
    seg = np.asarray(segment, dtype=np.float64)
    if seg.ndim == 1:
        seg = seg[None, :]
    m = seg.shape[1]
    if m < 2:
        raise DataError("segment needs at least 2 samples")
    if m == target:
        return seg.copy()
    pos = np.linspace(0.0, m - 1, target)
    src = np.arange(m, dtype=np.float64)
    out = np.stack([np.interp(pos, src, row) for row in seg])
    out[:, 0], out[:, -1] = seg[:, 0], seg[:, -1]
    return out


def normalize_leads(leads: np.ndarray) -> np.ndarray:
    x = np.asarray(leads, dtype=np.float64)
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    sd = np.sqrt((centered ** 2).mean(axis=1, keepdims=True))
    flat = sd[:, 0] <= 1e-12 * np.maximum(np.abs(mu[:, 0]), 1.0)
    sd[flat] = 1.0
    out = centered / sd
    out[flat] = 0.0
    return out


def normalize(record: EcgRecord) -> EcgRecord:
    return record.replace(leads=normalize_leads(record.leads))


def _map_segments(segments, start, end, target):
    m = end - start + 1
    scale = (target - 1) / (m - 1)
    out = []
    for lead, s, e in segments:
        s, e = max(s, start), min(e, end + 1)
        if e <= s:
            continue
        a = int(math.floor((s - start) * scale))
        b = int(math.ceil((e - 1 - start) * scale)) + 1
        a, b = max(a, 0), min(b, target)
        if b > a:
            out.append((lead, a, b))
    return _merge_segments(out)


def _merge_segments(segments):
    merged: dict[int, list] = {}
    for lead, s, e in sorted(segments):
        runs = merged.setdefault(lead, [])
        if runs and s <= runs[-1][1]:
            runs[-1][1] = max(runs[-1][1], e)
        else:
            runs.append([s, e])
    return [(lead, s, e) for lead in sorted(merged) for s, e in merged[lead]]


def preprocess(record: EcgRecord, target: int = TARGET_LENGTH) -> EcgRecord:
    """R peaks -> seven-beat window -> fixed length -> per-lead z-score."""
    raw = np.asarray(record.leads, dtype=np.float64)
    _check_finite(raw)
    peaks = detect_r_peaks(raw[REFERENCE_LEAD], record.sampling_rate)
    start, end = segment_window(peaks, raw.shape[1])
    seg = resample_to_fixed(raw[:, start:end + 1], target)
    m = end - start + 1
    fs = int(round(record.sampling_rate * (target - 1) / (m - 1)))
    return EcgRecord(record.patient_id, normalize_leads(seg), record.label, record.report, fs,
                     _map_segments(record.disease_segments, start, end, target))


def rhythm_scale(record: EcgRecord, rr_ratio: float) -> EcgRecord:
    """Stretch (ratio > 1) or compress (ratio < 1) the time axis, keeping the length.

    A compressed signal is tiled to fill the record, a stretched one is
    cropped; RR intervals are multiplied by ``rr_ratio``.
    """
    if not 0.25 <= rr_ratio <= 4.0:
        raise ValidationError("rr_ratio must be in [0.25, 4]")
    x = np.asarray(record.leads, dtype=np.float64)
    n = x.shape[1]
    if rr_ratio == 1.0:
        return record.replace(leads=x.copy())
    scaled_len = max(int(round(n * rr_ratio)), 2)
    pos = np.minimum(np.arange(scaled_len) / rr_ratio, n - 1)
    src = np.arange(n, dtype=np.float64)
    scaled = np.stack([np.interp(pos, src, row) for row in x])
    reps = int(math.ceil(n / scaled_len))
    out = np.tile(scaled, (1, reps))[:, :n]
    segs = []
    for lead, s, e in record.disease_segments:
        a, b = int(math.floor(s * rr_ratio)), int(math.ceil((e - 1) * rr_ratio)) + 1
        for r in range(reps):
            lo, hi = a + r * scaled_len, min(b, scaled_len) + r * scaled_len
            lo, hi = max(lo, 0), min(hi, n)
            if hi > lo:
                segs.append((lead, lo, hi))
    return record.replace(leads=out, disease_segments=_merge_segments(segs))


# -- corpus ------------------------------------------------------------------

def _default_counts(**per_label):
    return lambda: dict(per_label)


@dataclass
class CorpusConfig:
    """Number of patients per label in every split.

    Patients with a disease label contribute one NORM and one diseased
    record; NORM-only patients contribute two NORM records.
    """

    train: dict = field(default_factory=_default_counts(NORM=8, MI=8, STTC=8, CD=8, HYP=8))
    val: dict = field(default_factory=_default_counts(MI=2, STTC=2, CD=2, HYP=2))
    test: dict = field(default_factory=_default_counts(MI=3, STTC=3, CD=3, HYP=3))

    def validate(self) -> None:
        for split in ("train", "val", "test"):
            counts = getattr(self, split)
            for label, n in counts.items():
                if label not in LABELS:
                    raise ValidationError(f"{split}: unknown label {label!r}")
                if int(n) < 0:
                    raise ValidationError(f"{split}.{label}: negative patient count")
            if sum(counts.values()) == 0:
                raise ValidationError(f"{split}: needs at least one patient")
        if self.test.get("NORM", 0):
            raise ValidationError("test: patients need a NORM and a diseased record; "
                                  "NORM-only test patients are impossible")
        if not any(n for lab, n in self.train.items() if lab != "NORM"):
            raise ValidationError("train: needs at least one diseased patient")

    def n_patients(self) -> int:
        return sum(sum(getattr(self, s).values()) for s in ("train", "val", "test"))


@dataclass(frozen=True)
class ManifestEntry:
    patient_id: str
    label: str
    report: str
    path: str
    split: str


@dataclass
class CorpusManifest:
    records: list
    seed: int | None = None

    def split(self, name: str) -> list[ManifestEntry]:
        return [r for r in self.records if r.split == name]

    def patients(self, split: str | None = None) -> list[str]:
        seen = {}
        for r in self.records:
            if split is None or r.split == split:
                seen.setdefault(r.patient_id, None)
        return list(seen)


def corpus_plan(config: CorpusConfig, seed: int) -> list[tuple[str, str, int, int, str]]:
    """(split, label, patient_seed, record_index, record_label) for every record."""
    config.validate()
    plan = []
    idx = 0
    for split in ("train", "val", "test"):
        for label in LABELS:
            for _ in range(int(getattr(config, split).get(label, 0))):
                pseed = int(np.random.SeedSequence([int(seed), idx]).generate_state(1)[0])
                idx += 1
                if label == "NORM":
                    plan.append((split, label, pseed, 0, "NORM"))
                    plan.append((split, label, pseed, 1, "NORM"))
                else:
                    plan.append((split, label, pseed, 0, "NORM"))
                    plan.append((split, label, pseed, 0, label))
    return plan


def make_record(patient_seed: int, record_label: str, record_index: int = 0,
                specs: dict | None = None, raw: bool = False) -> EcgRecord:
    specs = specs or {}
    spec = specs.get(record_label) or DiseaseSpec.default(record_label)
    rec = synth_record(spec, patient_seed, record_index)
    return rec if raw else preprocess(rec)


def synth_corpus(config: CorpusConfig, seed: int, raw: bool = False) -> list[tuple[str, EcgRecord]]:
    """In-memory corpus: (split, record) pairs, preprocessed unless ``raw``.
    Records whose beats cannot be detected are skipped with a logged reason."""
    out = []
    for split, _, pseed, ridx, rlabel in corpus_plan(config, seed):
        try:
            out.append((split, make_record(pseed, rlabel, ridx, raw=raw)))
        except InsufficientBeatsError as exc:
            logger.warning("skipping patient %d (%s): %s", pseed, rlabel, exc)
    return out


def build_corpus(config: CorpusConfig, seed: int, out_dir: str | Path,
                 raw: bool = False) -> CorpusManifest:
    return write_corpus(synth_corpus(config, seed, raw), out_dir, seed)


def write_corpus(corpus: Iterable[tuple[str, EcgRecord]], out_dir: str | Path,
                 seed: int | None = None) -> CorpusManifest:
    """Write records under ``out_dir/records`` plus ``out_dir/manifest.jsonl``."""
    from .recordio import write_record

    out_dir = Path(out_dir)
    (out_dir / "records").mkdir(parents=True, exist_ok=True)
    entries = []
    counters: dict[str, int] = {}
    for split, rec in corpus:
        k = counters.get(rec.patient_id, 0)
        counters[rec.patient_id] = k + 1
        rel = f"records/{rec.patient_id}_{k}.ecgt"
        write_record(rec, out_dir / rel)
        entries.append(ManifestEntry(rec.patient_id, rec.label, rec.report, rel, split))
    manifest = CorpusManifest(entries, seed)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def write_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in manifest.records:
            fh.write(json.dumps({"patient_id": e.patient_id, "label": e.label,
                                 "report": e.report, "path": e.path, "split": e.split},
                                sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> CorpusManifest:
    path = Path(path)
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                entries.append(ManifestEntry(d["patient_id"], d["label"], d["report"],
                                             d["path"], d["split"]))
    return CorpusManifest(entries)


def resolve(manifest_path: str | Path, entry: ManifestEntry) -> Path:
    p = Path(entry.path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def load_split(manifest_path: str | Path, split: str,
               manifest: CorpusManifest | None = None) -> list[EcgRecord]:
    from .recordio import read_record

    manifest = manifest or read_manifest(manifest_path)
    return [read_record(resolve(manifest_path, e)) for e in manifest.split(split)]


def records_by_split(corpus: Iterable[tuple[str, EcgRecord]]) -> dict[str, list[EcgRecord]]:
    out: dict[str, list[EcgRecord]] = {"train": [], "val": [], "test": []}
    for split, rec in corpus:
        out[split].append(rec)
    return out


def load_corpus(manifest_path: str | Path) -> dict[str, list[EcgRecord]]:
    """All records of a written corpus, grouped by split."""
    manifest = read_manifest(manifest_path)
    return {s: load_split(manifest_path, s, manifest) for s in ("train", "val", "test")}
