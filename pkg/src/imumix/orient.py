"""Mahony complementary filter and rotation of IMU data into the NED frame.

Quaternions are ``[w, x, y, z]`` arrays and describe the body-to-world
rotation, so ``quat_to_matrix(q) @ v_body`` is the world-frame vector.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvariantError, NumericError
from .ingest import STANDARD_GRAVITY, Domain, ImuWindow, RawRecording

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class MahonyConfig:
    kp: float = 1.0
    ki: float = 0.0
    dt: float = 1.0 / 20.0
    gravity_sign: float = 1.0
    accel_reject_band: float = 0.3
    integrator: str = "exp"  # "exp": exact for a rate held over the step; "euler": first-order q + dt/2 q*w

    def __post_init__(self):
        if self.kp < 0 or self.ki < 0 or not self.dt > 0:
            raise ConfigError(f"invalid Mahony gains/period: kp={self.kp} ki={self.ki} dt={self.dt}")
        if self.integrator not in ("exp", "euler"):
            raise ConfigError(f"unknown integrator {self.integrator!r}")
        if self.gravity_sign not in (1.0, -1.0):
            raise ConfigError("gravity_sign must be +1 or -1")


# --- quaternion algebra ---------------------------------------------------------

def quat_multiply(p, q):
    pw, px, py, pz = p
    qw, qx, qy, qz = q
    return np.array([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ])


def quat_conjugate(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = math.sqrt(float(q @ q))
    if n == 0.0 or not math.isfinite(n):
        raise NumericError(f"cannot normalize quaternion {q}")
    return q / n


def quat_rotate(q, v):
    """Vector part of q ⊗ [0, v] ⊗ q*."""
    p = quat_multiply(quat_multiply(q, np.array([0.0, *v])), quat_conjugate(q))
    return p[1:]


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.array([math.cos(angle / 2), *(math.sin(angle / 2) * axis)])


def quat_to_matrix(q, tol: float = 1e-6) -> np.ndarray:
    w, x, y, z = (float(c) for c in q)
    if abs(w * w + x * x + y * y + z * z - 1.0) > tol:
        raise InvariantError(f"quaternion {list(q)} is not unit norm")
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * x * z + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * x * z - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])


def quats_to_matrices(quats: np.ndarray) -> np.ndarray:
    """Vectorized ``quat_to_matrix`` over an (N, 4) array."""
    quats = np.asarray(quats, dtype=np.float64)
    if np.any(np.abs(np.einsum("ij,ij->i", quats, quats) - 1.0) > 1e-6):
        raise InvariantError("non-unit quaternion in sequence")
    w, x, y, z = quats.T
    M = np.empty((len(quats), 3, 3))
    M[:, 0, 0] = 1 - 2 * y * y - 2 * z * z
    M[:, 0, 1] = 2 * x * y - 2 * w * z
    M[:, 0, 2] = 2 * x * z + 2 * w * y
    M[:, 1, 0] = 2 * x * y + 2 * w * z
    M[:, 1, 1] = 1 - 2 * x * x - 2 * z * z
    M[:, 1, 2] = 2 * y * z - 2 * w * x
    M[:, 2, 0] = 2 * x * z - 2 * w * y
    M[:, 2, 1] = 2 * y * z + 2 * w * x
    M[:, 2, 2] = 1 - 2 * x * x - 2 * y * y
    return M


# --- filter ---------------------------------------------------------------------------

def _step(qw, qx, qy, qz, gx, gy, gz, ax, ay, az, ix, iy, iz, cfg: MahonyConfig):
    # scalar kernel shared by mahony_update and the sequence runner
    norm = math.sqrt(ax * ax + ay * ay + az * az)
    if abs(norm / STANDARD_GRAVITY - 1.0) <= cfg.accel_reject_band:
        ax, ay, az = ax / norm, ay / norm, az / norm
        s = cfg.gravity_sign
        # world [0, 0, s] seen in the body frame: third row of the rotation matrix
        vx = s * 2.0 * (qx * qz - qw * qy)
        vy = s * 2.0 * (qy * qz + qw * qx)
        vz = s * (1.0 - 2.0 * (qx * qx + qy * qy))
        ex = ay * vz - az * vy
        ey = az * vx - ax * vz
        ez = ax * vy - ay * vx
        if cfg.ki > 0.0:
            ix += cfg.ki * ex * cfg.dt
            iy += cfg.ki * ey * cfg.dt
            iz += cfg.ki * ez * cfg.dt
    else:
        ex = ey = ez = 0.0
    wx = gx + cfg.kp * ex + ix
    wy = gy + cfg.kp * ey + iy
    wz = gz + cfg.kp * ez + iz
    if cfg.integrator == "exp":
        rate = math.sqrt(wx * wx + wy * wy + wz * wz)
        half = 0.5 * rate * cfg.dt
        c = math.cos(half)
        k = math.sin(half) / rate if rate > 0.0 else 0.0
        # q * [c, k w]
        nw = c * qw - k * (qx * wx + qy * wy + qz * wz)
        nx = c * qx + k * (qw * wx + qy * wz - qz * wy)
        ny = c * qy + k * (qw * wy - qx * wz + qz * wx)
        nz = c * qz + k * (qw * wz + qx * wy - qy * wx)
    else:
        h = 0.5 * cfg.dt
        nw = qw + h * (-qx * wx - qy * wy - qz * wz)
        nx = qx + h * (qw * wx + qy * wz - qz * wy)
        ny = qy + h * (qw * wy - qx * wz + qz * wx)
        nz = qz + h * (qw * wz + qx * wy - qy * wx)
    n = math.sqrt(nw * nw + nx * nx + ny * ny + nz * nz)
    return nw / n, nx / n, ny / n, nz / n, ix, iy, iz


def mahony_update(q, gyro, accel, cfg: MahonyConfig, integral_state=(0.0, 0.0, 0.0)):
    """One filter step. Returns ``(q_next, integral_state)``."""
    vals = np.concatenate([np.asarray(q, float), np.asarray(gyro, float), np.asarray(accel, float),
                           np.asarray(integral_state, float)])
    if not np.all(np.isfinite(vals)):
        raise NumericError("non-finite input to mahony_update")
    out = _step(*map(float, vals), cfg)
    return np.array(out[:4]), np.array(out[4:])


def mahony_filter(accel: np.ndarray, gyro: np.ndarray, cfg: MahonyConfig, q0=IDENTITY) -> np.ndarray:
    """Run the filter over a (T, 3) accel/gyro sequence; returns (T, 4) quaternions.

    Row t holds the estimate after consuming sample t.
    """
    accel = np.asarray(accel, dtype=np.float64)
    gyro = np.asarray(gyro, dtype=np.float64)
    if accel.shape != gyro.shape:
        raise ConfigError(f"accel {accel.shape} and gyro {gyro.shape} differ in shape")
    if not (np.all(np.isfinite(accel)) and np.all(np.isfinite(gyro))):
        raise NumericError("non-finite sample in filter input")
    out = np.empty((len(accel), 4))
    qw, qx, qy, qz = map(float, q0)
    ix = iy = iz = 0.0
    for t, (a, g) in enumerate(zip(accel.tolist(), gyro.tolist())):
        qw, qx, qy, qz, ix, iy, iz = _step(qw, qx, qy, qz, g[0], g[1], g[2], a[0], a[1], a[2], ix, iy, iz, cfg)
        out[t] = (qw, qx, qy, qz)
    return out


def rotate_rows(data: np.ndarray, quats: np.ndarray) -> np.ndarray:
    """Apply M_t to the accel and gyro triples of each row of a (T, 6) array."""
    data = np.asarray(data, dtype=np.float64)
    if len(data) != len(quats):
        raise ConfigError(f"{len(data)} rows but {len(quats)} quaternions")
    M = quats_to_matrices(quats)
    out = data.copy()
    out[:, 0:3] = np.einsum("tij,tj->ti", M, data[:, 0:3])
    out[:, 3:6] = np.einsum("tij,tj->ti", M, data[:, 3:6])
    return out


def to_global(window: ImuWindow, quats: np.ndarray) -> ImuWindow:
    rotated = rotate_rows(window.data, quats)
    return ImuWindow(
        data=rotated.astype(np.asarray(window.data).dtype, copy=False),
        label=window.label,
        domain_id=window.domain_id,
        window_index=window.window_index,
        session_id=window.session_id,
        start=window.start,
        position=window.position,
    )


def align_recording(rec: RawRecording, cfg: MahonyConfig) -> tuple[RawRecording, np.ndarray]:
    """Filter a whole session from q0 = identity and rotate every sample."""
    quats = mahony_filter(rec.channels[:, 0:3], rec.channels[:, 3:6], cfg)
    rotated = rotate_rows(rec.channels, quats)
    if rec.channels.shape[1] > 6:
        rotated[:, 6:] = rec.channels[:, 6:]
    return RawRecording(rec.timestamps, rotated, rec.labels, rec.source_rate, rec.session_id, rec.position), quats


def align_domain(domain: Domain, cfg: MahonyConfig) -> Domain:
    """Rotate every window of a domain into the world frame.

    The filter restarts from identity at each session and runs through
    that session's windows in stored order.
    """
    out = np.empty(domain.data.shape, dtype=domain.data.dtype)
    order: dict[str, list[int]] = {}
    for i, s in enumerate(domain.sessions):
        order.setdefault(s, []).append(i)
    for idx in order.values():
        idx = sorted(idx, key=lambda i: int(domain.starts[i]))
        stacked = domain.data[idx].astype(np.float64).reshape(-1, domain.data.shape[2])
        quats = mahony_filter(stacked[:, 0:3], stacked[:, 3:6], cfg)
        out[idx] = rotate_rows(stacked, quats).reshape(len(idx), *domain.data.shape[1:])
    return Domain(domain.id, domain.name, out, list(domain.labels), list(domain.sessions),
                  domain.starts.copy(), domain.positions)


def tilt_from_accel(accel) -> tuple[float, float]:
    """(roll, pitch) in radians implied by a static specific-force reading."""
    ax, ay, az = accel
    return math.atan2(ay, az), math.atan2(-ax, math.hypot(ay, az))


def gravity_direction(q) -> np.ndarray:
    """Body-frame unit vector of world +z for body-to-world quaternion q."""
    return quat_to_matrix(q)[2]


def write_quaternion_csv(path, timestamps, quats) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "q_w", "q_x", "q_y", "q_z"])
        for t, q in zip(timestamps, quats):
            w.writerow([repr(float(t)), *(repr(float(c)) for c in q)])
