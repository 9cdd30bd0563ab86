"""Acceptance criteria, one test each, at their stated tolerances.

Each test records a ``PASS``/``FAIL`` line that is printed in the pytest
terminal summary. The end-to-end criteria run the bundled synthetic
config (``configs/synthetic.json``) through ``run-all`` for seeds 0-4,
plus a second seed-0 run for determinism; expect roughly 3 minutes per
run on one core. Set ``IMUMIX_ACCEPTANCE_DIR`` to keep and reuse those
runs across sessions (stored durations are reused with them).
"""

import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from conftest import ACCEPTANCE_LINES, random_unit_quats

from imumix import pipeline
from imumix.dro import StepTrace, WeightTrajectory, excess_lambda, oracle_trace_check, update_weights
from imumix.ingest import STANDARD_GRAVITY, ImuWindow, RawRecording, resample
from imumix.mixture import mixture_sizes, read_mixture
from imumix.model import ModelConfig, ReconModel, apply, gradient, make_mask, masked_mse
from imumix.orient import (
    MahonyConfig,
    align_recording,
    mahony_filter,
    quat_from_axis_angle,
    quat_to_matrix,
    quats_to_matrices,
    to_global,
)
from imumix.simplex import DomainWeights
from imumix.synth import SyntheticDomainSpec, generate_trace

pytestmark = pytest.mark.slow

G = STANDARD_GRAVITY
SEEDS = (0, 1, 2, 3, 4)


def verdict(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# --- desk-scale run-all cache ---------------------------------------------------------

_RUNS: dict[str, Path] = {}


def _run_root(tmp_path_factory) -> Path:
    env = os.environ.get("IMUMIX_ACCEPTANCE_DIR")
    if env:
        Path(env).mkdir(parents=True, exist_ok=True)
        return Path(env)
    return tmp_path_factory.getbasetemp() / "acceptance"


def desk_run(tmp_path_factory, seed: int, tag: str = "") -> Path:
    """run-all on the bundled config; returns the output directory (report.json carries durations)."""
    key = f"seed{seed}{tag}"
    if key in _RUNS:
        return _RUNS[key]
    out = _run_root(tmp_path_factory) / key
    if not (out / "report.json").exists():
        cfg = pipeline.PipelineConfig.load(Path(__file__).resolve().parents[1] / "configs" / "synthetic.json",
                                           seed=seed, out=out)
        t0 = time.perf_counter()
        rep = pipeline.cmd_run_all(cfg)
        rep["wall_seconds"] = time.perf_counter() - t0
        (out / "report.json").write_text(json.dumps(rep, indent=2))
    _RUNS[key] = out
    return out


def wall_seconds(out: Path) -> float:
    rep = json.loads((out / "report.json").read_text())
    return rep.get("wall_seconds", sum(rep["durations_seconds"].values()))


# --- criteria -------------------------------------------------------------------------


def sandwich(q, v):
    w, x, y, z = q
    # q (0, v) q* expanded with t = 2 (u x v)
    u = np.array([x, y, z])
    t = 2 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def test_rotation_math():
    t0 = time.perf_counter()
    qs = random_unit_quats(np.random.default_rng(0), 10_000)
    Ms = quats_to_matrices(qs)
    ortho = np.abs(np.einsum("nji,njk->nik", Ms, Ms) - np.eye(3)).max()
    det = np.abs(np.linalg.det(Ms) - 1).max()
    oracle = np.stack([np.stack([sandwich(q, e) for e in np.eye(3)], axis=1) for q in qs])
    agree = np.abs(Ms - oracle).max()
    elapsed = time.perf_counter() - t0
    ok = ortho < 1e-9 and det < 1e-9 and agree < 1e-12 and elapsed < 5
    verdict("rotation math", ok,
            f"|MtM-I|={ortho:.1e}, |det-1|={det:.1e}, |M-sandwich|={agree:.1e}, {elapsed:.2f} s")


@pytest.mark.parametrize("axis", ["roll", "pitch"])
def test_mahony_static_convergence(axis):
    angle = math.radians(30)
    q_true = quat_from_axis_angle([1, 0, 0] if axis == "roll" else [0, 1, 0], angle)
    accel = quat_to_matrix(q_true).T @ np.array([0.0, 0.0, G])
    n = 400  # 20 s at 20 Hz
    quats = mahony_filter(np.tile(accel, (n, 1)), np.zeros((n, 3)), MahonyConfig(dt=0.05))
    after = quats[200:]  # t >= 10 s
    est = np.array([quat_to_matrix(q)[2] for q in after])  # body view of world +z
    truth = accel / G
    tilt_err = np.degrees(np.arccos(np.clip(est @ truth, -1, 1))).max()
    est_angle = [math.atan2(v[1], v[2]) if axis == "roll" else math.atan2(-v[0], math.hypot(v[1], v[2]))
                 for v in est]
    angle_err = max(abs(math.degrees(a - angle)) for a in est_angle)
    win = ImuWindow(np.tile(np.r_[accel, 0, 0, 0], (n, 1)), "Still", 0, 0, "s", 0)
    z = to_global(win, quats).data[200:, 2]
    z_err = np.abs(z - G).max() / G
    ok = angle_err < 0.5 and tilt_err < 0.5 and z_err < 0.02
    verdict(f"Mahony static convergence ({axis} 30 deg)", ok,
            f"tilt error {angle_err:.2e} deg after 10 s, global z off by {100 * z_err:.3f}%")


@pytest.mark.parametrize("roll, pitch", [(25.0, 0.0), (0.0, 25.0)])
def test_orientation_heterogeneity_removal(roll, pitch):
    aligned = []
    for r, p in ((0.0, 0.0), (roll, pitch)):
        spec = SyntheticDomainSpec("pair", n_windows=10, roll_offset_deg=r, pitch_offset_deg=p)
        tr = generate_trace(spec, np.random.default_rng(11))
        rec = resample(RawRecording(tr.t, tr.body, tr.labels, spec.source_rate, "pair"), 20.0)
        aligned.append(align_recording(rec, MahonyConfig())[0].channels[20:])  # 1 s warmup
    a, b = aligned
    ratio = np.sqrt(np.mean((a - b) ** 2)) / np.sqrt(np.mean(a ** 2))
    verdict(f"orientation heterogeneity removal (roll {roll:g}, pitch {pitch:g})", ratio < 0.05,
            f"RMSE / RMS = {100 * ratio:.2f}%")


def test_gradient_correctness():
    cfg = ModelConfig(num_layers=1, d_model=8, num_heads=2, window_len=8, channels=3, mask_channels=1,
                      mask_time_rate=0.5, seed=5)
    model = ReconModel.init(cfg, torch.float64)
    gen = torch.Generator().manual_seed(6)
    model.flat = model.flat + 0.1 * torch.randn(model.flat.shape, generator=gen, dtype=torch.float64)
    rng = np.random.default_rng(7)
    windows = [rng.normal(size=(8, 3)) for _ in range(4)]
    masks = [make_mask((8, 3), 1, 0.5, s) for s in range(4)]
    g = gradient(model, windows, masks)
    x = torch.as_tensor(np.stack(windows))
    m = torch.as_tensor(np.stack([mk.matrix for mk in masks]))

    def f(flat):
        with torch.no_grad():
            return float(masked_mse(apply(model, flat, x, m), x, m).mean())

    h, worst = 1e-5, 0.0
    for i in rng.choice(model.flat.numel(), size=100, replace=False):
        e = torch.zeros_like(model.flat)
        e[i] = h
        fd = (f(model.flat + e) - f(model.flat - e)) / (2 * h)
        worst = max(worst, abs(fd - float(g[i])) / max(abs(fd), abs(float(g[i])), 1e-6))
    verdict("gradient correctness", worst < 1e-4, f"max relative error {worst:.2e} over 100 parameters")


def _scalar_update(alpha, lam, eta, c):
    boosted = [a * math.exp(eta * l) for a, l in zip(alpha, lam)]
    s = sum(boosted)
    return [(1 - c) * b / s + c / len(alpha) for b in boosted]


def _scalar_lambda(domains, proxy, ref, k):
    lam = []
    for i in range(k):
        pos = [p - r for d, p, r in zip(domains, proxy, ref) if d == i and p > r]
        lam.append(sum(pos) / len(pos) if pos else 0.0)
    return lam


def test_weight_update_oracle():
    eta, c = 0.001, 0.01
    worked = update_weights(DomainWeights([0.5, 0.5]), [1.0, 0.0], eta, c).alpha
    worked_ok = np.abs(worked - [0.500247, 0.499753]).max() <= 1e-6
    trace = [
        StepTrace(np.array([0, 1, 0]), np.array([0, 0, 1]), np.array([1.5, 0.4, 1.1]), np.array([1.0, 0.5, 1.2])),
        StepTrace(np.array([1, 1]), np.array([1, 2]), np.array([2.0, 1.0]), np.array([0.5, 0.25])),
        StepTrace(np.array([0, 1, 1]), np.array([2, 0, 1]), np.array([3.0, 0.1, 0.9]), np.array([0.5, 0.2, 1.0])),
    ]
    alpha, expected, diff = [0.5, 0.5], [], 0.0
    lib = DomainWeights([0.5, 0.5])
    for s in trace:
        lam = _scalar_lambda(s.domain_ids.tolist(), s.proxy_losses.tolist(), s.ref_losses.tolist(), 2)
        alpha = _scalar_update(alpha, lam, eta, c)
        expected.append(alpha)
        lib = update_weights(lib, excess_lambda(s.domain_ids, s.proxy_losses, s.ref_losses, 2), eta, c)
        diff = max(diff, float(np.abs(lib.alpha - alpha).max()))
    rep = oracle_trace_check(trace, expected, [0, 1], eta, c, atol=1e-12)
    ok = worked_ok and diff <= 1e-12 and rep.ok
    verdict("weight-update arithmetic oracle", ok,
            f"worked example {np.round(worked, 6).tolist()}, 3-step max diff {diff:.1e}")


def test_simplex_invariants(tmp_path_factory):
    out = desk_run(tmp_path_factory, 0)
    _, alphas, _, _ = WeightTrajectory.read_csv(out / "optimize" / "trajectory.csv")
    k = alphas.shape[1]
    sum_err = np.abs(alphas.sum(axis=1) - 1).max()
    floor = alphas.min()
    ok = len(alphas) == 1000 and sum_err <= 1e-12 and floor >= 0.01 / k
    verdict("simplex invariants", ok,
            f"T={len(alphas)}, max |sum-1|={sum_err:.1e}, min alpha={floor:.6f} (floor {0.01 / k:.6f})")


def test_hard_domain_upweighting(tmp_path_factory):
    hard, times = [], []
    for seed in SEEDS:
        out = desk_run(tmp_path_factory, seed)
        w = json.loads((out / "optimize" / "weights.json").read_text())["domains"]
        hard.append(next(d["weight"] for d in w if d["name"] == "hard"))
        times.append(wall_seconds(out))
    wins = sum(h - 1 / 3 >= 0.05 for h in hard)
    ok = wins >= 4 and max(times) < 180
    verdict("hard-domain upweighting", ok,
            f"hard weight {[round(h, 5) for h in hard]}, {wins}/5 seeds >= 1/3+0.05, "
            f"slowest run {max(times):.0f} s (budget 180 s)")


def test_mixture_rule(tmp_path_factory):
    plan = mixture_sizes([7968, 4108, 7500], DomainWeights([0.5, 0.3, 0.2]))
    example = plan.total == 13693 and plan.counts.tolist() == [6846, 4107, 2738]
    rng = np.random.default_rng(3)
    feasible = True
    for _ in range(10_000):
        k = int(rng.integers(1, 7))
        sizes = rng.integers(1, 50_000, size=k)
        alpha = np.maximum(rng.dirichlet(np.ones(k)), 1e-6)
        p = mixture_sizes(sizes, DomainWeights(alpha / alpha.sum()))
        feasible &= bool((p.counts <= sizes).all())
    out = desk_run(tmp_path_factory, 0)
    domain, manifest = read_mixture(out / "mixture")
    derived = sum(d["count"] for d in manifest["domains"]) / sum(d["size"] for d in manifest["domains"])
    report = json.loads((out / "report.json").read_text())["mixture"]["usage_fraction"]
    usage_ok = derived == manifest["usage_fraction"] == report and domain.size == sum(
        d["count"] for d in manifest["domains"])
    verdict("mixture rule", example and feasible and usage_ok,
            f"N={plan.total}, n={plan.counts.tolist()}, 10^4 draws feasible={feasible}, usage {derived:.4f}")


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_end_to_end_determinism(tmp_path_factory):
    a = desk_run(tmp_path_factory, 0)
    b = desk_run(tmp_path_factory, 0, tag="-repeat")
    files = ["optimize/weights.json", "optimize/trajectory.csv"] + [
        f"mixture/{p.name}" for p in sorted((a / "mixture").iterdir())]
    same = all(_sha(a / f) == _sha(b / f) for f in files)
    slowest = max(wall_seconds(a), wall_seconds(b))
    verdict("end-to-end determinism", same and slowest < 300,
            f"{len(files)} artifacts byte-identical={same}, run-all {slowest:.0f} s (budget 300 s)")


def test_training_progress(tmp_path_factory):
    out = desk_run(tmp_path_factory, 0)
    s = json.loads((out / "reference" / "summary.json").read_text())
    verdict("training progress", s["reduction"] >= 0.5,
            f"masked MSE {s['initial_mean_loss']:.3f} -> {s['final_mean_loss']:.3f} "
            f"({100 * s['reduction']:.1f}% lower, {s['epochs']} epochs)")
