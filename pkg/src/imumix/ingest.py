"""Raw CSV ingestion, resampling, windowing, label unification and the Domain store."""

from __future__ import annotations

import csv
import glob
import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    EmptyInputError,
    InputError,
    MappingIncompleteError,
    ParseError,
    SchemaError,
    UnsupportedResampleError,
)

STANDARD_GRAVITY = 9.80665

CANONICAL_LABELS = ("Still", "Walking", "Upstairs", "Downstairs")
DROP = "Drop"

CHANNELS = ("ax", "ay", "az", "gx", "gy", "gz")
WINDOW_LENGTH = 120
TARGET_RATE = 20.0

ACCEL_UNITS = {"m/s^2": 1.0, "m/s2": 1.0, "g": STANDARD_GRAVITY}
GYRO_UNITS = {"rad/s": 1.0, "deg/s": math.pi / 180.0}

STORE_FORMAT = "imumix-domain-v1"


@dataclass
class RawRecording:
    """One contiguous capture session."""

    timestamps: np.ndarray  # (T,) seconds
    channels: np.ndarray  # (T, C) accel m/s^2 then gyro rad/s
    labels: np.ndarray  # (T,) activity strings
    source_rate: float
    session_id: str
    position: str | None = None

    def __len__(self):
        return len(self.timestamps)


@dataclass
class ImuWindow:
    data: np.ndarray  # (L, C)
    label: str
    domain_id: int
    window_index: int
    session_id: str = ""
    start: int = 0
    position: str | None = None


@dataclass
class Domain:
    """A dataset packaged as a stack of equal-length windows.

    Windows are kept as one ``(n, L, C)`` array; iterate ``windows`` for
    per-window records.
    """

    id: int
    name: str
    data: np.ndarray
    labels: list[str]
    sessions: list[str] = field(default_factory=list)
    starts: np.ndarray | None = None
    positions: list[str] | None = None

    def __post_init__(self):
        n = len(self.data)
        if len(self.labels) != n:
            raise InputError(f"domain {self.name}: {n} windows but {len(self.labels)} labels")
        if not self.sessions:
            # unknown boundaries: every window is its own session
            self.sessions = [f"w{i}" for i in range(n)]
        if self.starts is None:
            self.starts = np.zeros(n, dtype=np.int64)

    @property
    def size(self) -> int:
        return len(self.data)

    def __len__(self):
        return self.size

    @property
    def windows(self) -> Iterator[ImuWindow]:
        for i in range(self.size):
            yield self.window(i)

    def window(self, i: int) -> ImuWindow:
        return ImuWindow(
            data=self.data[i],
            label=self.labels[i],
            domain_id=self.id,
            window_index=i,
            session_id=self.sessions[i],
            start=int(self.starts[i]),
            position=None if self.positions is None else self.positions[i],
        )

    def label_histogram(self) -> dict[str, int]:
        return dict(sorted(Counter(self.labels).items()))

    @classmethod
    def from_windows(cls, id: int, name: str, windows: Sequence[ImuWindow],
                     length: int = WINDOW_LENGTH, channels: int = len(CHANNELS)) -> "Domain":
        if windows:
            data = np.stack([np.asarray(w.data, dtype=np.float32) for w in windows])
        else:
            data = np.zeros((0, length, channels), dtype=np.float32)
        positions = [w.position for w in windows]
        return cls(
            id=id,
            name=name,
            data=data,
            labels=[w.label for w in windows],
            sessions=[w.session_id for w in windows],
            starts=np.array([w.start for w in windows], dtype=np.int64),
            positions=positions if any(p is not None for p in positions) else None,
        )


class LabelMap:
    """Source label to canonical label (or ``Drop``)."""

    def __init__(self, pairs: Mapping[str, str]):
        allowed = set(CANONICAL_LABELS) | {DROP}
        for src, dst in pairs.items():
            if dst not in allowed:
                raise ConfigError(f"label map sends {src!r} to {dst!r}, not a canonical label")
        self.pairs = dict(pairs)

    @classmethod
    def identity(cls) -> "LabelMap":
        return cls({lab: lab for lab in CANONICAL_LABELS})

    def __call__(self, label: str) -> str:
        return unify_labels(label, self)

    def check_total(self, vocabulary) -> None:
        for lab in vocabulary:
            if lab not in self.pairs:
                raise MappingIncompleteError(lab)


def unify_labels(label: str, map: LabelMap) -> str:
    try:
        return map.pairs[label]
    except KeyError:
        raise MappingIncompleteError(label) from None


@dataclass
class DatasetDescriptor:
    name: str
    path: str
    source_rate: float
    label_map: LabelMap
    accel_unit: str = "m/s^2"
    gyro_unit: str = "rad/s"
    gravity_sign: float = 1.0

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: str | os.PathLike = ".") -> "DatasetDescriptor":
        try:
            units = d.get("units", {})
            path = d["path"]
            if not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            return cls(
                name=d["name"],
                path=path,
                source_rate=float(d["source_rate"]),
                label_map=LabelMap(d["label_map"]),
                accel_unit=units.get("accel", "m/s^2"),
                gyro_unit=units.get("gyro", "rad/s"),
                gravity_sign=float(d.get("gravity_sign", 1.0)),
            )
        except KeyError as e:
            raise ConfigError(f"dataset descriptor missing field {e.args[0]!r}") from None

    @classmethod
    def load(cls, path: str | os.PathLike) -> "DatasetDescriptor":
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except FileNotFoundError:
            raise InputError(f"dataset descriptor not found: {path}") from None
        return cls.from_dict(d, base_dir=os.path.dirname(os.path.abspath(path)))

    def files(self) -> list[str]:
        found = sorted(glob.glob(self.path))
        if not found:
            raise InputError(f"no input files match {self.path}")
        return found


def read_dataset(path: str | os.PathLike, source_rate: float, accel_unit: str = "m/s^2",
                 gyro_unit: str = "rad/s", columns: Sequence[str] = ("t",) + CHANNELS + ("label",),
                 ) -> list[RawRecording]:
    """Parse one CSV file into unit-normalized sessions.

    A new session starts wherever consecutive timestamps are more than
    three nominal sample periods apart.
    """
    if accel_unit not in ACCEL_UNITS or gyro_unit not in GYRO_UNITS:
        raise ConfigError(f"unknown units accel={accel_unit!r} gyro={gyro_unit!r}")
    path = Path(path)
    if not path.exists():
        raise InputError(f"input file not found: {path}")

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyInputError(f"{path} is empty")
        header = [h.strip() for h in header]
        missing = [c for c in columns if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        num_idx = [header.index(c) for c in columns if c != "label"]
        lab_idx = header.index("label") if "label" in columns else None
        pos_idx = header.index("position") if "position" in header else None

        values, labels, positions = [], [], []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                values.append([float(row[i]) for i in num_idx])
            except (ValueError, IndexError):
                raise ParseError(f"{path}: non-numeric or missing cell", row=row_no) from None
            labels.append(row[lab_idx].strip() if lab_idx is not None else "")
            positions.append(row[pos_idx].strip() if pos_idx is not None else None)

    if not values:
        raise EmptyInputError(f"{path} has a header but no rows")
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        bad = int(np.argwhere(~np.isfinite(arr))[0, 0]) + 2
        raise ParseError(f"{path}: non-finite value", row=bad)

    t = arr[:, 0]
    ch = arr[:, 1:]
    ch[:, :3] *= ACCEL_UNITS[accel_unit]
    ch[:, 3:6] *= GYRO_UNITS[gyro_unit]
    labels = np.asarray(labels, dtype=object)

    dt = np.diff(t)
    if np.any(dt < 0):
        raise ParseError(f"{path}: timestamps decrease", row=int(np.argmax(dt < 0)) + 3)
    keep = np.concatenate([[True], dt > 0])  # drop exact duplicate timestamps
    t, ch, labels = t[keep], ch[keep], labels[keep]
    positions = [p for p, k in zip(positions, keep) if k]

    cuts = np.flatnonzero(np.diff(t) > 3.0 / source_rate) + 1
    bounds = np.concatenate([[0], cuts, [len(t)]])
    out = []
    for k, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
        out.append(RawRecording(
            timestamps=t[a:b].copy(),
            channels=ch[a:b].copy(),
            labels=labels[a:b].copy(),
            source_rate=float(source_rate),
            session_id=f"{path.stem}#{k}",
            position=positions[a],
        ))
    return out


def resample(rec: RawRecording, target_rate: float = TARGET_RATE) -> RawRecording:
    """Linear interpolation onto a uniform grid starting at the first timestamp."""
    if rec.source_rate < target_rate:
        raise UnsupportedResampleError(
            f"session {rec.session_id}: source rate {rec.source_rate} Hz is below {target_rate} Hz")
    if len(rec) < 2:
        raise InputError(f"session {rec.session_id} has fewer than 2 samples")
    t = rec.timestamps
    span = t[-1] - t[0]
    n = int(math.floor(span * target_rate + 1e-9)) + 1
    grid = t[0] + np.arange(n) / target_rate
    grid[-1] = min(grid[-1], t[-1])
    channels = np.column_stack([np.interp(grid, t, rec.channels[:, c]) for c in range(rec.channels.shape[1])])

    # nearest source sample; ties go to the earlier one
    right = np.clip(np.searchsorted(t, grid), 1, len(t) - 1)
    left = right - 1
    nearest = np.where(grid - t[left] <= t[right] - grid, left, right)
    return RawRecording(
        timestamps=grid,
        channels=channels,
        labels=rec.labels[nearest],
        source_rate=float(target_rate),
        session_id=rec.session_id,
        position=rec.position,
    )


def num_windows(T: int, length: int, stride: int) -> int:
    if T < length:
        return 0
    return (T - length) // stride + 1


def _window_label(labels: Sequence[str]) -> str:
    counts = Counter(labels)
    best = max(counts.values())
    tied = [lab for lab, c in counts.items() if c == best]
    if len(tied) == 1:
        return tied[0]
    center = labels[len(labels) // 2]
    if center in tied:
        return center
    return sorted(tied)[0]


def window(rec: RawRecording, length: int = WINDOW_LENGTH, stride: int | None = None,
           label_map: LabelMap | None = None, domain_id: int = 0) -> list[ImuWindow]:
    """Cut a session into windows; Drop-labeled windows are discarded.

    Per-timestep labels are mapped to canonical labels first, so that
    e.g. mixed Sitting/Standing windows count as one Still majority.
    ``window_index`` is assigned later by the owning Domain.
    """
    if stride is None:
        stride = length
    if length <= 0 or stride <= 0:
        raise ConfigError(f"window length and stride must be positive (got {length}, {stride})")
    labels = list(rec.labels)
    if label_map is not None:
        label_map.check_total(set(labels))
        labels = [label_map(lab) for lab in labels]
    out = []
    for w in range(num_windows(len(rec), length, stride)):
        a = w * stride
        lab = _window_label(labels[a:a + length])
        if lab == DROP:
            continue
        out.append(ImuWindow(
            data=rec.channels[a:a + length].copy(),
            label=lab,
            domain_id=domain_id,
            window_index=-1,
            session_id=rec.session_id,
            start=a,
            position=rec.position,
        ))
    return out


# --- Domain store -------------------------------------------------------------

def write_domain_store(domain: Domain, directory: str | os.PathLike, extra_columns: Mapping | None = None,
                       extra_manifest: Mapping | None = None) -> Path:
    """Write manifest.json, windows.f32 and labels.csv (format in README)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(domain.data, dtype="<f4")
    n, L, C = data.shape if data.ndim == 3 else (0, WINDOW_LENGTH, len(CHANNELS))
    with open(directory / "windows.f32", "wb") as fh:
        fh.write(data.tobytes(order="C"))

    extra_columns = dict(extra_columns or {})
    with open(directory / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_index", "domain_id", "label", "session", "start", "position", *extra_columns])
        for i in range(n):
            pos = "" if domain.positions is None or domain.positions[i] is None else domain.positions[i]
            w.writerow([i, domain.id, domain.labels[i], domain.sessions[i], int(domain.starts[i]), pos,
                        *(int(col[i]) for col in extra_columns.values())])

    manifest = {
        "format": STORE_FORMAT,
        "domain_id": domain.id,
        "name": domain.name,
        "num_windows": int(n),
        "window_length": int(L),
        "channels": list(CHANNELS[:C]) if C <= len(CHANNELS) else C,
        "dtype": "float32-le",
        "data_file": "windows.f32",
        "label_file": "labels.csv",
        "label_histogram": domain.label_histogram(),
    }
    manifest.update(extra_manifest or {})
    write_json(directory / "manifest.json", manifest)
    return directory


def read_domain_store(directory: str | os.PathLike) -> tuple[Domain, dict[str, np.ndarray]]:
    """Read a store back; returns the Domain and any extra integer label columns."""
    directory = Path(directory)
    try:
        with open(directory / "manifest.json", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"no domain store at {directory}") from None
    if manifest.get("format") != STORE_FORMAT:
        raise SchemaError(f"{directory}: unknown store format {manifest.get('format')!r}")
    n, L = manifest["num_windows"], manifest["window_length"]
    C = len(manifest["channels"])
    raw = np.fromfile(directory / manifest["data_file"], dtype="<f4")
    if raw.size != n * L * C:
        raise SchemaError(f"{directory}: expected {n * L * C} floats, found {raw.size}")
    data = raw.reshape(n, L, C)

    labels, sessions, starts, positions = [], [], [], []
    extra: dict[str, list[int]] = {}
    with open(directory / manifest["label_file"], newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        base = {"window_index", "domain_id", "label", "session", "start", "position"}
        extra_names = [f for f in reader.fieldnames if f not in base]
        extra = {f: [] for f in extra_names}
        for row in reader:
            labels.append(row["label"])
            sessions.append(row["session"])
            starts.append(int(row["start"]))
            positions.append(row["position"] or None)
            for f in extra_names:
                extra[f].append(int(row[f]))
    domain = Domain(
        id=manifest["domain_id"],
        name=manifest["name"],
        data=data,
        labels=labels,
        sessions=sessions,
        starts=np.asarray(starts, dtype=np.int64),
        positions=positions if any(p is not None for p in positions) else None,
    )
    return domain, {k: np.asarray(v, dtype=np.int64) for k, v in extra.items()}


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
