"""Synthetic paired ECG/PPG segments, preprocessing, subject splits and dataset I/O."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import DegenerateProfileError, DegenerateSignalError, FormatError, TooFewSubjectsError

SEGMENT_LEN = 2048
SAMPLE_RATE = 204.8  # 10 s x 204.8 Hz == 2048 samples
SEGMENT_SECONDS = 10.0

ECG, PPG = "ECG", "PPG"
SPLITS = ("train", "valid", "test")

# (low, high) ranges for generate_subject draws
HR_RANGE = (50.0, 110.0)
DELAY_RANGE = (0.15, 0.35)
NOISE_RANGE = (0.0, 0.05)
AMP_RANGES = ((0.10, 0.25), (0.8, 1.2), (0.2, 0.45))  # P, QRS, T
WIDTH_RANGES = ((0.025, 0.045), (0.010, 0.020), (0.040, 0.080))  # seconds (Gaussian sigma)

PPG_SMOOTH_S = 0.01


@dataclass(frozen=True)
class SubjectProfile:
    heart_rate_bpm: float
    amplitudes: tuple  # P, QRS, T
    widths: tuple  # P, QRS, T in seconds
    ppg_delay_s: float
    noise_std: float
    seed: int = 0
    phase_s: float = 0.0

    def __post_init__(self):
        if not HR_RANGE[0] <= self.heart_rate_bpm <= HR_RANGE[1]:
            raise DegenerateProfileError(f"heart rate {self.heart_rate_bpm} outside {HR_RANGE}")
        if not DELAY_RANGE[0] <= self.ppg_delay_s <= DELAY_RANGE[1]:
            raise DegenerateProfileError(f"ppg delay {self.ppg_delay_s} outside {DELAY_RANGE}")
        if self.noise_std < 0:
            raise DegenerateProfileError("noise_std must be >= 0")
        if len(self.amplitudes) != 3 or len(self.widths) != 3:
            raise DegenerateProfileError("need three bump amplitudes and widths (P, QRS, T)")
        if min(self.widths) <= 0:
            raise DegenerateProfileError(f"non-positive bump width in {self.widths}")


@dataclass(frozen=True)
class SignalSegment:
    modality: str
    subject_id: int
    segment_index: int
    samples: np.ndarray


@dataclass(frozen=True)
class PairedSegment:
    ecg: SignalSegment
    ppg: SignalSegment

    @property
    def subject_id(self):
        return self.ecg.subject_id

    @property
    def segment_index(self):
        return self.ecg.segment_index


def generate_subject(seed, **fixed) -> SubjectProfile:
    """Deterministic profile for ``seed``; keyword arguments pin individual fields."""
    rng = np.random.default_rng([int(seed), 0x5EED])
    drawn = dict(
        heart_rate_bpm=float(rng.uniform(*HR_RANGE)),
        amplitudes=tuple(float(rng.uniform(*r)) for r in AMP_RANGES),
        widths=tuple(float(rng.uniform(*r)) for r in WIDTH_RANGES),
        ppg_delay_s=float(rng.uniform(*DELAY_RANGE)),
        noise_std=float(rng.uniform(*NOISE_RANGE)),
        seed=int(seed),
        phase_s=float(rng.uniform(0.0, 1.0)),
    )
    drawn.update(fixed)
    return SubjectProfile(**drawn)


def _beat_times(profile, t0, t1):
    rr = 60.0 / profile.heart_rate_bpm
    first = np.floor((t0 - profile.phase_s) / rr) - 2
    last = np.ceil((t1 - profile.phase_s) / rr) + 2
    return profile.phase_s + rr * np.arange(first, last + 1), rr


def _ecg_wave(profile, t):
    beats, rr = _beat_times(profile, t[0], t[-1])
    # P and T offsets stretch with the RR interval (Bazett-style sqrt scaling)
    stretch = np.sqrt(rr)
    offsets = (-0.16 * stretch, 0.0, 0.30 * stretch)
    out = np.zeros_like(t)
    for amp, width, off in zip(profile.amplitudes, profile.widths, offsets):
        d = t[:, None] - (beats[None, :] + off)
        out += amp * np.exp(-0.5 * (d / width) ** 2).sum(axis=1)
    return out


def _ppg_wave(profile, t, fs):
    beats, rr = _beat_times(profile, t[0], t[-1])
    feet = beats + profile.ppg_delay_s
    # one half-sine arch per beat; arches meet in a cusp at each pulse foot
    idx = np.searchsorted(feet, t, side="right") - 1
    tau = t - feet[idx]
    out = np.sin(np.pi * tau / rr)
    return gaussian_filter1d(out, PPG_SMOOTH_S * fs, mode="nearest")


def synthesize_pair(profile: SubjectProfile, segment_index: int, L: int = SEGMENT_LEN,
                    fs: float = SAMPLE_RATE, subject_id: int | None = None) -> PairedSegment:
    """One z-scored, simultaneous 10-s ECG/PPG pair for ``profile``.

    Segment ``i`` covers absolute time [10 i, 10 i + 10) s of the subject's recording,
    so consecutive segments continue the same beat train.
    """
    if abs(L / fs - SEGMENT_SECONDS) > 1e-9:
        raise ValueError(f"L / fs must be {SEGMENT_SECONDS} s, got {L / fs}")
    if min(profile.widths) <= 0:
        raise DegenerateProfileError(f"non-positive bump width in {profile.widths}")
    t = segment_index * SEGMENT_SECONDS + np.arange(L) / fs
    rng = np.random.default_rng([profile.seed, int(segment_index), 0xEC6])
    ecg = _ecg_wave(profile, t) + rng.normal(0.0, 1.0, L) * profile.noise_std
    ppg = _ppg_wave(profile, t, fs) + rng.normal(0.0, 1.0, L) * profile.noise_std
    sid = profile.seed if subject_id is None else subject_id
    return PairedSegment(
        SignalSegment(ECG, int(sid), int(segment_index), zscore(ecg)),
        SignalSegment(PPG, int(sid), int(segment_index), zscore(ppg)),
    )


def zscore(samples):
    """Zero mean, unit population standard deviation."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2:
        raise DegenerateSignalError("z-score needs at least two samples")
    mu = x.mean()
    sd = x.std()
    if sd < 1e-12:
        raise DegenerateSignalError("constant signal cannot be z-scored")
    return (x - mu) / sd


def resample(samples, target_len):
    """Linear interpolation onto ``target_len`` points spanning the original index range."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size < 2 or target_len < 2:
        raise ValueError("resample needs at least two input and two output points")
    if target_len == x.size:
        return x.copy()
    grid = np.linspace(0.0, x.size - 1, target_len)
    out = np.interp(grid, np.arange(x.size), x)
    out[0], out[-1] = x[0], x[-1]
    return out


# -- dataset ----------------------------------------------------------------

@dataclass
class Dataset:
    """Paired segments held column-wise; samples are stored as float32."""

    subject_ids: np.ndarray
    segment_indices: np.ndarray
    ecg: np.ndarray
    ppg: np.ndarray
    split: dict = field(default_factory=dict)  # subject_id -> "train" | "valid" | "test"

    def __post_init__(self):
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.uint32).reshape(-1)
        self.segment_indices = np.asarray(self.segment_indices, dtype=np.uint32).reshape(-1)
        n = self.subject_ids.size
        self.ecg, self.ppg = (self._rows_of(a, n) for a in (self.ecg, self.ppg))
        if self.ecg.shape != self.ppg.shape:
            raise ValueError("ECG and PPG arrays differ in shape")

    @staticmethod
    def _rows_of(a, n):
        a = np.asarray(a, dtype=np.float32)
        width = a.shape[-1] if a.ndim == 2 else (SEGMENT_LEN if n == 0 else -1)
        return a.reshape(n, width)

    @classmethod
    def from_pairs(cls, pairs, split=None):
        pairs = list(pairs)
        L = len(pairs[0].ecg.samples) if pairs else SEGMENT_LEN
        return cls(
            [p.subject_id for p in pairs],
            [p.segment_index for p in pairs],
            np.array([p.ecg.samples for p in pairs]).reshape(len(pairs), L),
            np.array([p.ppg.samples for p in pairs]).reshape(len(pairs), L),
            dict(split or {}),
        )

    def __len__(self):
        return int(self.subject_ids.size)

    @property
    def segment_len(self):
        return int(self.ecg.shape[1]) if len(self) else SEGMENT_LEN

    def pair(self, i) -> PairedSegment:
        sid, seg = int(self.subject_ids[i]), int(self.segment_indices[i])
        return PairedSegment(
            SignalSegment(ECG, sid, seg, self.ecg[i].astype(np.float64)),
            SignalSegment(PPG, sid, seg, self.ppg[i].astype(np.float64)),
        )

    @property
    def pairs(self):
        return [self.pair(i) for i in range(len(self))]

    def subjects(self):
        return sorted({int(s) for s in self.subject_ids})

    def segments_of(self, subject_id):
        """Row indices of every pair recorded from ``subject_id``."""
        return np.flatnonzero(self.subject_ids == subject_id)

    def rows(self, split_name):
        keep = [i for i, s in enumerate(self.subject_ids) if self.split.get(int(s)) == split_name]
        return np.asarray(keep, dtype=np.intp)

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.intp)
        sids = {int(s) for s in self.subject_ids[rows]}
        return Dataset(self.subject_ids[rows], self.segment_indices[rows], self.ecg[rows],
                       self.ppg[rows], {s: v for s, v in self.split.items() if s in sids})


def make_dataset(n_subjects, pairs_per_subject, seed=0, L=SEGMENT_LEN, fs=SAMPLE_RATE):
    """Subjects 0..n-1 with profiles drawn from ``seed``-derived sub-seeds."""
    pairs = []
    for sid in range(n_subjects):
        profile = generate_subject(seed * 1_000_003 + sid)
        pairs += [synthesize_pair(profile, j, L, fs, subject_id=sid) for j in range(pairs_per_subject)]
    return Dataset.from_pairs(pairs)


def split_counts(n_subjects, fractions):
    n_valid = int(np.floor(fractions[1] * n_subjects + 0.5))
    n_test = int(np.floor(fractions[2] * n_subjects + 0.5))
    return n_subjects - n_valid - n_test, n_valid, n_test


def split_by_subject(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed=0) -> Dataset:
    """Assign whole subjects to train/valid/test; returns the same data with ``split`` filled."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    subjects = dataset.subjects()
    counts = split_counts(len(subjects), fractions)
    if any(c <= 0 for c, f in zip(counts, fractions) if f > 0):
        raise TooFewSubjectsError(
            f"{len(subjects)} subject(s) cannot fill splits {fractions} (counts {counts})")
    order = np.random.default_rng(seed).permutation(len(subjects))
    split = {}
    start = 0
    for name, count in zip(SPLITS, counts):
        for j in order[start:start + count]:
            split[subjects[j]] = name
        start += count
    return Dataset(dataset.subject_ids, dataset.segment_indices, dataset.ecg, dataset.ppg, split)


# -- binary format ----------------------------------------------------------

MAGIC = b"M2AE"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHII")
_PAIR_HEADER = struct.Struct("<II")


def save_dataset(dataset: Dataset, path):
    L = dataset.segment_len
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, L, len(dataset)))
        for i in range(len(dataset)):
            fh.write(_PAIR_HEADER.pack(int(dataset.subject_ids[i]), int(dataset.segment_indices[i])))
            fh.write(dataset.ecg[i].astype("<f4").tobytes())
            fh.write(dataset.ppg[i].astype("<f4").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, L, count = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    rec = np.dtype([("sid", "<u4"), ("seg", "<u4"), ("ecg", "<f4", (L,)), ("ppg", "<f4", (L,))])
    expected = _HEADER.size + count * rec.itemsize
    if len(raw) < expected:
        raise FormatError(f"{path}: truncated file ({len(raw)} of {expected} bytes)")
    recs = np.frombuffer(raw, dtype=rec, count=count, offset=_HEADER.size)
    return Dataset(recs["sid"], recs["seg"], recs["ecg"].reshape(count, L), recs["ppg"].reshape(count, L))
