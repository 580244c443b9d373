"""Accelerometer instances -> 20 Hz, 7 s windows, plus LOSO splits and a synthetic generator.

On-disk format (also what ``write_dataset`` produces):

* manifest CSV with header ``path,subject_id,label,activity_code``; ``path``
  is relative to the manifest's directory, ``label`` is ``fall`` or ``adl``
  (any case).
* one CSV per instance with header ``ax,ay,az`` (an optional ``t`` column is
  ignored), values in g, one row per sample at the dataset sample rate.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import ADL, FALL
from .tensor import DTYPE, SeededRng

log = logging.getLogger(__name__)

NATIVE_HZ = 238.0
TARGET_HZ = 20.0
WINDOW = 140  # 7 s at 20 Hz
STRIDE = 70  # 50 % overlap
IMPACT_TIME_S = 10.0
INSTANCE_SECONDS = 20.0

LABEL_NAMES = {ADL: "adl", FALL: "fall"}


class DataError(ValueError):
    """Malformed manifest or instance file."""


def parse_label(text: str) -> int:
    t = text.strip().lower()
    if t == "fall":
        return FALL
    if t == "adl":
        return ADL
    raise DataError(f"label must be 'fall' or 'adl', got {text!r}")


@dataclass
class RawInstance:
    subject_id: int
    label: int
    activity_code: str
    samples: np.ndarray  # [N, 3] in g
    sample_rate_hz: float = NATIVE_HZ
    instance_id: str = ""

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[1] != 3:
            raise DataError(f"instance {self.instance_id!r}: expected [N, 3] samples, got {self.samples.shape}")


@dataclass
class Segment:
    data: np.ndarray  # [3, 140]
    label: int
    subject_id: int
    instance_id: str
    start: int


def read_instance_csv(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        try:
            cols = [header.index(c) for c in ("ax", "ay", "az")]
        except ValueError:
            raise DataError(f"{path}: header must contain ax,ay,az, got {header}") from None
        extra = set(header) - {"t", "ax", "ay", "az"}
        if extra:
            raise DataError(f"{path}: unexpected columns {sorted(extra)}; need exactly 3 channels")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(row[c]) for c in cols])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value in {row}") from None
    return np.asarray(rows, dtype=DTYPE).reshape(-1, 3)


def ingest(manifest_path, sample_rate_hz: float = NATIVE_HZ) -> list[RawInstance]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    out = []
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        needed = {"path", "subject_id", "label", "activity_code"}
        if reader.fieldnames is None or not needed <= set(reader.fieldnames):
            raise DataError(f"{manifest_path}: header must be path,subject_id,label,activity_code")
        for rowno, row in enumerate(reader, start=2):
            where = f"{manifest_path}:{rowno}"
            try:
                subject = int(row["subject_id"])
            except (TypeError, ValueError):
                raise DataError(f"{where}: bad subject_id {row['subject_id']!r}") from None
            try:
                label = parse_label(row["label"] or "")
            except DataError as e:
                raise DataError(f"{where}: {e}") from None
            path = root / (row["path"] or "")
            if not path.is_file():
                raise DataError(f"{where}: instance file not found: {path}")
            samples = read_instance_csv(path)
            out.append(RawInstance(subject, label, row["activity_code"] or "", samples, sample_rate_hz, row["path"]))
    if not out:
        raise DataError(f"{manifest_path}: manifest lists no instances")
    return out


def resample(samples: np.ndarray, src_hz: float, dst_hz: float = TARGET_HZ) -> np.ndarray:
    """Linear interpolation onto ``t_k = k / dst_hz`` for every ``t_k`` inside the recording."""
    samples = np.asarray(samples, dtype=DTYPE)
    n = len(samples)
    if n < 2:
        raise ValueError(f"need at least 2 samples to resample, got {n}")
    if not src_hz >= dst_hz > 0:
        raise ValueError(f"need src_hz >= dst_hz > 0, got {src_hz} and {dst_hz}")
    if src_hz == dst_hz:
        return samples.copy()
    # guard against (n-1)*dst/src landing a hair below an integer
    m = int(math.floor((n - 1) * dst_hz / src_hz + 1e-9)) + 1
    t_src = np.arange(n) / src_hz
    t_dst = np.arange(m) / dst_hz
    return np.stack([np.interp(t_dst, t_src, samples[:, c]) for c in range(samples.shape[1])], axis=1)


def window_starts(length: int, window: int = WINDOW, stride: int = STRIDE) -> list[int]:
    if length < window:
        return []
    return list(range(0, length - window + 1, stride))


def segment_instance(inst: RawInstance, window: int = WINDOW, stride: int = STRIDE) -> list[Segment]:
    """Cut 50 %-overlap windows; a fall keeps only windows containing the impact sample.

    The impact sample is the one at t = 10 s (index 200 at 20 Hz).
    """
    x = inst.samples
    starts = window_starts(len(x), window, stride)
    if not starts:
        log.warning("instance %r has %d samples, shorter than one %d-sample window; skipped",
                    inst.instance_id, len(x), window)
        return []
    impact = int(round(IMPACT_TIME_S * inst.sample_rate_hz))
    out = []
    for s in starts:
        if inst.label == FALL and not s <= impact < s + window:
            continue
        out.append(Segment(np.ascontiguousarray(x[s:s + window].T), inst.label, inst.subject_id, inst.instance_id, s))
    return out


def preprocess(instances: list[RawInstance], dst_hz: float = TARGET_HZ) -> list[Segment]:
    """Resample every instance to ``dst_hz`` and window it, keeping input order."""
    segments = []
    for inst in instances:
        rs = resample(inst.samples, inst.sample_rate_hz, dst_hz)
        at_dst = RawInstance(inst.subject_id, inst.label, inst.activity_code, rs, dst_hz, inst.instance_id)
        segments.extend(segment_instance(at_dst))
    return segments


def stack(segments: list[Segment]) -> tuple[np.ndarray, np.ndarray]:
    if not segments:
        return np.empty((0, 3, WINDOW), dtype=DTYPE), np.empty(0, dtype=int)
    return np.stack([s.data for s in segments]), np.array([s.label for s in segments], dtype=int)


def subjects(segments: list[Segment]) -> list[int]:
    return sorted({s.subject_id for s in segments})


def loso_split(segments: list[Segment], held_out_subject: int) -> tuple[list[Segment], list[Segment]]:
    if held_out_subject not in {s.subject_id for s in segments}:
        raise ValueError(f"subject {held_out_subject} not present in the data")
    train = [s for s in segments if s.subject_id != held_out_subject]
    test = [s for s in segments if s.subject_id == held_out_subject]
    return train, test


class Standardizer:
    """Per-channel z-scoring with statistics taken from training windows only."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=DTYPE).reshape(3)
        self.std = np.asarray(std, dtype=DTYPE).reshape(3)

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        mean = x.mean(axis=(0, 2))
        std = x.std(axis=(0, 2))
        return cls(mean, np.where(std > 0, std, 1.0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean[:, None]) / self.std[:, None]


ADL_ACTIVITIES = ("walk", "jog", "sit_down", "stand_up", "bend")


def _synth_adl(rng: SeededRng, t: np.ndarray, gait_hz: float, gait_amp: float, activity: str) -> np.ndarray:
    g = rng.generator
    phase = g.uniform(0, 2 * np.pi, 3)
    amp = gait_amp * g.uniform(0.8, 1.2) * np.array([0.6, 0.4, 1.0])
    if activity == "jog":
        amp = amp * 1.6
        gait_hz = gait_hz * 1.4
    x = np.zeros((len(t), 3))
    x[:, 2] = 1.0
    x += amp * np.sin(2 * np.pi * gait_hz * t[:, None] + phase)
    # a gentle posture transition centred at 10 s
    bump = np.exp(-0.5 * ((t - IMPACT_TIME_S) / 0.6) ** 2)
    if activity in ("sit_down", "stand_up", "bend"):
        x[:, 2] += (0.35 if activity == "stand_up" else -0.35) * bump
        x[:, 0] += 0.25 * bump
    return x


def _synth_fall(rng: SeededRng, t: np.ndarray, gait_hz: float, gait_amp: float) -> np.ndarray:
    g = rng.generator
    x = _synth_adl(rng, t, gait_hz, gait_amp, "walk")
    after = t > IMPACT_TIME_S + 0.25
    # short free-fall dip before impact
    dip = (t >= IMPACT_TIME_S - 0.4) & (t < IMPACT_TIME_S - 0.1)
    x[dip] = 0.2 * x[dip]
    peak = g.uniform(5.0, 7.0)
    width = 0.06
    direction = np.array([g.uniform(0.3, 0.8), g.uniform(-0.3, 0.3), 1.0])
    direction /= np.linalg.norm(direction)
    pulse = peak * np.exp(-0.5 * ((t - IMPACT_TIME_S) / width) ** 2)
    x += pulse[:, None] * direction
    # lying still: gravity now along the x axis
    lying = np.array([1.0, g.uniform(-0.1, 0.1), g.uniform(-0.1, 0.1)])
    x[after] = lying
    return x


def synth_dataset(n_subjects: int, adl_per_subject: int, fall_per_subject: int, seed: int) -> list[RawInstance]:
    """Deterministic 20 s, 238 Hz instances.

    ADLs are a 1 g baseline plus a per-subject gait oscillation and an optional
    mild posture change at 10 s. Falls add a 5-7 g impact pulse (about 0.3 s
    wide) centred at 10 s after a brief free-fall dip, then a lying plateau.
    """
    if min(n_subjects, adl_per_subject, fall_per_subject) < 1:
        raise ValueError("subject and instance counts must all be >= 1")
    master = SeededRng(seed).child("synth")
    n = int(round(INSTANCE_SECONDS * NATIVE_HZ))
    t = np.arange(n) / NATIVE_HZ
    out = []
    for subj in range(1, n_subjects + 1):
        srng = master.child(f"subject{subj}")
        gait_hz = srng.uniform(1.5, 2.2)
        gait_amp = srng.uniform(0.1, 0.25)
        for k in range(adl_per_subject):
            r = srng.child(f"adl{k}")
            activity = ADL_ACTIVITIES[k % len(ADL_ACTIVITIES)]
            x = _synth_adl(r, t, gait_hz, gait_amp, activity)
            x += r.normal(0, 0.02, x.shape)
            out.append(RawInstance(subj, ADL, activity, x.astype(DTYPE), NATIVE_HZ, f"s{subj:02d}_adl_{k:03d}.csv"))
        for k in range(fall_per_subject):
            r = srng.child(f"fall{k}")
            x = _synth_fall(r, t, gait_hz, gait_amp)
            x += r.normal(0, 0.02, x.shape)
            out.append(RawInstance(subj, FALL, "fall", x.astype(DTYPE), NATIVE_HZ, f"s{subj:02d}_fall_{k:03d}.csv"))
    return out


def write_dataset(instances: list[RawInstance], out_dir) -> Path:
    """Write instance CSVs plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as mf:
        w = csv.writer(mf, lineterminator="\n")
        w.writerow(["path", "subject_id", "label", "activity_code"])
        for k, inst in enumerate(instances):
            name = inst.instance_id or f"instance_{k:05d}.csv"
            with open(out_dir / name, "w", newline="") as fh:
                fh.write("ax,ay,az\n")
                np.savetxt(fh, inst.samples, fmt="%.6f", delimiter=",")
            w.writerow([name, inst.subject_id, LABEL_NAMES[inst.label], inst.activity_code])
    return manifest
