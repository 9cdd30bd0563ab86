"""Synthetic multi-domain IMU traces written in the ingest CSV schema."""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ConfigError
from .ingest import CHANNELS, STANDARD_GRAVITY, TARGET_RATE, WINDOW_LENGTH, write_json

WINDOW_SECONDS = WINDOW_LENGTH / TARGET_RATE


@dataclass
class SyntheticDomainSpec:
    name: str
    n_windows: int = 100
    source_rate: float = 50.0
    motion_freqs: tuple[float, ...] = (0.9, 1.8)  # Hz, world-frame linear acceleration
    motion_amps: tuple[float, ...] = (1.5, 0.75)  # m/s^2
    axis_gains: tuple[float, ...] = (0.6, 0.4, 1.0)  # x, y, z share of the motion
    axis_lag: float = 0.3  # rad, max per-axis phase offset
    tilt_freqs: tuple[float, ...] = (0.35,)  # Hz, roll/pitch oscillation
    tilt_amps_deg: tuple[float, ...] = (8.0,)
    noise_sigma: float = 0.05  # accel, m/s^2
    gyro_noise_sigma: float = 0.005  # rad/s
    roll_offset_deg: float = 0.0
    pitch_offset_deg: float = 0.0
    labels: tuple[str, ...] = ("Walking", "Upstairs", "Downstairs", "Sitting", "Standing")

    def __post_init__(self):
        if len(self.motion_freqs) != len(self.motion_amps) or len(self.tilt_freqs) != len(self.tilt_amps_deg):
            raise ConfigError(f"{self.name}: frequency and amplitude lists differ in length")
        if self.n_windows < 0 or self.source_rate < TARGET_RATE:
            raise ConfigError(f"{self.name}: need n_windows >= 0 and source_rate >= {TARGET_RATE}")


@dataclass
class SyntheticSpec:
    domains: list[SyntheticDomainSpec]
    seed: int = 0
    label_map: dict[str, str] = field(default_factory=lambda: {
        "Walking": "Walking", "Upstairs": "Upstairs", "Downstairs": "Downstairs",
        "Sitting": "Still", "Standing": "Still", "Biking": "Drop",
    })

    def __post_init__(self):
        self.domains = [d if isinstance(d, SyntheticDomainSpec) else SyntheticDomainSpec(**d) for d in self.domains]
        for d in self.domains:
            for f in ("motion_freqs", "motion_amps", "axis_gains", "tilt_freqs", "tilt_amps_deg", "labels"):
                setattr(d, f, tuple(getattr(d, f)))

    @classmethod
    def from_dict(cls, d) -> "SyntheticSpec":
        return cls(**d)

    def to_dict(self):
        return asdict(self)


def hard_domain_benchmark(seed: int = 0, n_windows: int = 100) -> SyntheticSpec:
    """Three domains; ``hard`` has higher-frequency motion and 3x the sensor noise."""
    easy = dict(n_windows=n_windows, motion_freqs=(0.9, 1.8), motion_amps=(1.5, 0.75))
    return SyntheticSpec(seed=seed, domains=[
        SyntheticDomainSpec(name="easy_a", **easy),
        SyntheticDomainSpec(name="hard", n_windows=n_windows, motion_freqs=(0.9, 3.1, 4.3, 6.7),
                            motion_amps=(1.5, 1.2, 1.0, 0.8), noise_sigma=0.15, gyro_noise_sigma=0.015,
                            pitch_offset_deg=15.0),
        SyntheticDomainSpec(name="easy_b", roll_offset_deg=25.0, **easy),
    ])


@dataclass
class Trace:
    t: np.ndarray
    body: np.ndarray  # (T, 6) sensor-frame accel, gyro as the sensor reports them
    world: np.ndarray  # (T, 6) the same signals in the world frame, noise-free
    labels: np.ndarray


def _bank(t, freqs, amps, phases):
    return sum(a * np.sin(2 * np.pi * f * t + p) for f, a, p in zip(freqs, amps, phases)) if freqs else 0 * t


def generate_trace(spec: SyntheticDomainSpec, rng: np.random.Generator, duration: float | None = None) -> Trace:
    """Sinusoid-bank motion seen by a sensor mounted with a fixed roll/pitch offset.

    World-frame specific force is gravity (+z) plus linear acceleration; the
    body-frame signals come from the body-to-world attitude
    R(t) = R_motion(t) * R_offset, and the gyro is the body rate of R(t).
    """
    if duration is None:
        duration = spec.n_windows * WINDOW_SECONDS
    n = int(round(duration * spec.source_rate)) + 1
    t = np.arange(n) / spec.source_rate

    nm, nt = len(spec.motion_freqs), len(spec.tilt_freqs)
    # one gait phase per frequency shared by all axes, with a small per-axis lag
    motion_phase = rng.uniform(0, 2 * np.pi, size=nm) + rng.uniform(-spec.axis_lag, spec.axis_lag, size=(3, nm))
    tilt_phase = rng.uniform(0, 2 * np.pi, size=(2, nt))
    mod_phase = rng.uniform(0, 2 * np.pi, size=3)
    tilt_amps = np.radians(spec.tilt_amps_deg)

    def attitude(tt):
        roll = _bank(tt, spec.tilt_freqs, tilt_amps, tilt_phase[0])
        pitch = _bank(tt, spec.tilt_freqs, tilt_amps, tilt_phase[1])
        motion = Rotation.from_euler("xy", np.column_stack([roll, pitch]))
        offset = Rotation.from_euler("xy", np.radians([spec.roll_offset_deg, spec.pitch_offset_deg]))
        return motion * offset

    R = attitude(t)
    h = 1e-4
    body_rate = (attitude(t - h).inv() * attitude(t + h)).as_rotvec() / (2 * h)

    lin = np.column_stack([
        # slow amplitude modulation so consecutive windows differ
        spec.axis_gains[ax] * (1 + 0.4 * np.sin(2 * np.pi * 0.05 * t + mod_phase[ax]))
        * _bank(t, spec.motion_freqs, spec.motion_amps, motion_phase[ax])
        for ax in range(3)
    ])
    force_world = lin + np.array([0.0, 0.0, STANDARD_GRAVITY])
    accel_body = R.inv().apply(force_world)

    body = np.column_stack([
        accel_body + rng.normal(0, spec.noise_sigma, size=accel_body.shape),
        body_rate + rng.normal(0, spec.gyro_noise_sigma, size=body_rate.shape),
    ])
    world = np.column_stack([force_world, R.apply(body_rate)])
    block = np.floor(t / WINDOW_SECONDS + 1e-9).astype(np.int64)
    labels = np.asarray(spec.labels, dtype=object)[block % len(spec.labels)]
    return Trace(t, body, world, labels)


def write_trace_csv(path, trace: Trace) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", *CHANNELS, "label"])
        for ti, row, lab in zip(trace.t, trace.body, trace.labels):
            w.writerow([f"{ti:.6f}", *(f"{v:.9g}" for v in row), lab])


def write_synthetic(spec: SyntheticSpec, out_dir: str | os.PathLike) -> list[Path]:
    """Write one CSV and one dataset descriptor per domain; returns descriptor paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, d in enumerate(spec.domains):
        trace = generate_trace(d, np.random.default_rng([spec.seed, i]))
        write_trace_csv(out_dir / f"{d.name}.csv", trace)
        desc = {
            "name": d.name,
            "path": f"{d.name}.csv",
            "source_rate": d.source_rate,
            "units": {"accel": "m/s^2", "gyro": "rad/s"},
            "gravity_sign": 1,
            "label_map": {lab: spec.label_map[lab] for lab in sorted(set(d.labels))},
        }
        write_json(out_dir / f"{d.name}.json", desc)
        paths.append(out_dir / f"{d.name}.json")
    return paths
