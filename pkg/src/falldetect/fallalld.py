"""Best-effort converter from the published FallAllD file layout.

FallAllD ships one file per recording and sensor, named
``S<subject>_D<device>_A<activity>_T<trial>_<sensor>.dat``. Device 3 is the
waist unit and sensor ``A`` the accelerometer. Activity ids of 100 and above
are falls; lower ids are ADLs. Raw accelerometer counts are scaled by
0.244 mg/LSB (the +-8 g range).

Check these conventions against your copy of the dataset before relying on
the output; the acceptance suite never exercises this module.
"""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .data import NATIVE_HZ, RawInstance, write_dataset
from .models import ADL, FALL

NAME_RE = re.compile(r"S(?P<subject>\d+)_D(?P<device>\d+)_A(?P<activity>\d+)_T(?P<trial>\d+)_(?P<sensor>[A-Z])", re.I)
ACC_SCALE_G = 0.000244


def read_dat(path: Path, scale: float) -> np.ndarray:
    text = path.read_text().replace(",", " ")
    values = np.array(text.split(), dtype=float)
    if values.size % 3:
        raise ValueError(f"{path}: {values.size} values is not a multiple of 3 channels")
    return values.reshape(-1, 3) * scale


def convert(src_dir, out_dir, device: int = 3, scale: float = ACC_SCALE_G, fall_min_id: int = 100) -> Path:
    """Convert every waist accelerometer file under ``src_dir``; returns the manifest path."""
    instances = []
    for path in sorted(Path(src_dir).rglob("*")):
        m = NAME_RE.match(path.stem)
        if not (m and path.is_file()):
            continue
        if int(m["device"]) != device or m["sensor"].upper() != "A":
            continue
        activity = int(m["activity"])
        label = FALL if activity >= fall_min_id else ADL
        inst_id = f"{path.stem}.csv"
        instances.append(RawInstance(int(m["subject"]), label, f"A{activity:03d}", read_dat(path, scale), NATIVE_HZ, inst_id))
    if not instances:
        raise ValueError(f"no device-{device} accelerometer files found under {src_dir}")
    return write_dataset(instances, out_dir)
