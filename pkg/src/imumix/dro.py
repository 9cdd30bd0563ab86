"""Group DRO domain reweighting with a proxy model against reference baselines."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .errors import ConfigError, MissingArtifactError, NumericError
from .ingest import Domain, write_json
from .model import (
    AdamState,
    Corpus,
    ModelConfig,
    ReconModel,
    DomainStandardizer,
    TrainConfig,
    adamw_step,
    apply,
    loss_and_gradient,
    masked_mse,
)
from .simplex import DomainWeights, initial_proxy_weights, initial_reference_weights, sample_minibatch

__all__ = [
    "DomainWeights", "DroConfig", "WeightTrajectory", "StepTrace", "ProxyResult", "TraceReport",
    "initial_reference_weights", "initial_proxy_weights", "sample_minibatch", "lookup_baselines",
    "excess_lambda", "update_weights", "run_proxy", "oracle_trace_check",
]


@dataclass(frozen=True)
class DroConfig:
    eta: float = 0.001
    c: float = 0.01
    batch_size: int = 64
    steps: int = 1000
    seed: int = 0
    proxy_loss_weighting: str = "none"  # or "alpha"
    average_from: int = 0

    def __post_init__(self):
        if not self.eta > 0 or not 0 <= self.c <= 1 or self.batch_size < 1 or self.steps < 1:
            raise ConfigError(f"invalid DRO config {self}")
        if self.proxy_loss_weighting not in ("none", "alpha"):
            raise ConfigError(f"proxy_loss_weighting must be 'none' or 'alpha', not {self.proxy_loss_weighting!r}")
        if not 0 <= self.average_from < self.steps:
            raise ConfigError("average_from must lie in [0, steps)")


def lookup_baselines(table: Mapping[tuple[int, int], float], domain_ids: Sequence[int],
                     window_indices: Sequence[int]) -> np.ndarray:
    out = np.empty(len(domain_ids))
    for j, key in enumerate(zip(domain_ids, window_indices)):
        key = (int(key[0]), int(key[1]))
        try:
            out[j] = table[key]
        except KeyError:
            raise MissingArtifactError(f"no baseline loss for (domain {key[0]}, window {key[1]})") from None
    return out


def excess_lambda(domain_ids: Sequence[int], proxy_losses: Sequence[float], ref_losses: Sequence[float],
                  k: int) -> np.ndarray:
    """Per-domain mean of the positive excess losses in a batch.

    ``domain_ids`` are positions 0..k-1. A domain with no positive excess
    (including one absent from the batch) gets 0.
    """
    domain_ids = np.asarray(domain_ids, dtype=np.int64)
    excess = np.asarray(proxy_losses, dtype=np.float64) - np.asarray(ref_losses, dtype=np.float64)
    if not np.all(np.isfinite(excess)):
        raise NumericError("non-finite excess loss", index=int(np.argmax(~np.isfinite(excess))))
    pos = excess > 0
    num = np.bincount(domain_ids, weights=np.where(pos, excess, 0.0), minlength=k)
    den = np.bincount(domain_ids, weights=pos.astype(np.float64), minlength=k)
    lam = np.zeros(k)
    np.divide(num, den, out=lam, where=den > 0)
    return lam


def update_weights(alpha, lam, eta: float, c: float) -> DomainWeights:
    """Exponentiated-gradient step, renormalization, then mixing with uniform."""
    a = alpha.alpha if isinstance(alpha, DomainWeights) else np.asarray(alpha, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if not np.all(np.isfinite(lam)):
        raise NumericError(f"non-finite lambda {lam}")
    k = len(a)
    boosted = a * np.exp(eta * lam)
    new = (1 - c) * boosted / boosted.sum() + c / k
    step = alpha.step_index + 1 if isinstance(alpha, DomainWeights) else 0
    return DomainWeights(new, step)


@dataclass
class StepTrace:
    domain_ids: np.ndarray
    window_indices: np.ndarray
    proxy_losses: np.ndarray
    ref_losses: np.ndarray


@dataclass
class WeightTrajectory:
    names: list[str]
    alphas: list[np.ndarray] = field(default_factory=list)
    lambdas: list[np.ndarray] = field(default_factory=list)
    mean_losses: list[np.ndarray] = field(default_factory=list)
    trace: list[StepTrace] = field(default_factory=list)

    def __len__(self):
        return len(self.alphas)

    def write_csv(self, path) -> None:
        k = len(self.names)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step"] + [f"alpha_{n}" for n in self.names] + [f"lambda_{n}" for n in self.names]
                       + [f"loss_{n}" for n in self.names])
            for t in range(len(self)):
                row = [t + 1]
                for vec in (self.alphas[t], self.lambdas[t], self.mean_losses[t]):
                    row += [repr(float(v)) for v in vec[:k]]
                w.writerow(row)

    def write_trace(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for s in self.trace:
                fh.write(json.dumps({
                    "domain_ids": s.domain_ids.tolist(),
                    "window_indices": s.window_indices.tolist(),
                    "proxy_losses": s.proxy_losses.tolist(),
                    "ref_losses": s.ref_losses.tolist(),
                }) + "\n")

    @staticmethod
    def read_trace(path) -> list[StepTrace]:
        out = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                d = json.loads(line)
                out.append(StepTrace(*(np.asarray(d[f]) for f in
                                       ("domain_ids", "window_indices", "proxy_losses", "ref_losses"))))
        return out

    @staticmethod
    def read_csv(path) -> tuple[list[str], np.ndarray, np.ndarray, np.ndarray]:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=np.float64)
        k = (len(header) - 1) // 3
        names = [h[len("alpha_"):] for h in header[1:1 + k]]
        return names, body[:, 1:1 + k], body[:, 1 + k:1 + 2 * k], body[:, 1 + 2 * k:]


@dataclass
class ProxyResult:
    weights: DomainWeights
    trajectory: WeightTrajectory
    model: ReconModel


def _average(alphas: Sequence[np.ndarray], start: int) -> DomainWeights:
    return DomainWeights(np.mean(np.stack(alphas[start:]), axis=0), len(alphas))


def run_proxy(domains: Sequence[Domain], baseline: Mapping[tuple[int, int], float], model_cfg: ModelConfig,
              train_cfg: TrainConfig, dro_cfg: DroConfig, standardizer: DomainStandardizer | None = None,
              out_dir: str | Path | None = None, corpus: Corpus | None = None) -> ProxyResult:
    """Train a proxy from scratch while reweighting domains by excess loss.

    Each step samples a batch from the current mixture, scores it with the
    proxy's canonical-mask losses, updates the weights, then takes one
    AdamW step on the same batch. Returns the mean of alpha_1..alpha_T.
    If ``out_dir`` is given, the trajectory is written there even when the
    loop fails part-way.
    """
    k = len(domains)
    sizes = np.array([d.size for d in domains])
    ids = np.array([d.id for d in domains])
    # fail before training if any window lacks a baseline
    for d in domains:
        lookup_baselines(baseline, [d.id] * d.size, range(d.size))

    corpus = corpus or Corpus(domains, standardizer)
    masks = corpus.canonical(model_cfg)
    ref_all = torch.tensor([baseline[(int(d.id), i)] for d in domains for i in range(d.size)], dtype=torch.float64)

    model = ReconModel.init(model_cfg, dtype=corpus.x.dtype)
    state = AdamState.zeros_like(model)
    rng = np.random.default_rng(dro_cfg.seed)
    alpha = initial_proxy_weights(k)
    traj = WeightTrajectory([d.name for d in domains])
    try:
        for _ in range(dro_cfg.steps):
            pos, idx = sample_minibatch(sizes, alpha, dro_cfg.batch_size, rng)
            flat_idx = torch.from_numpy(corpus.flat_index(pos, idx))
            x, m = corpus.x[flat_idx], masks[flat_idx]
            if dro_cfg.proxy_loss_weighting == "alpha":
                # scored with theta_{t-1}; the weighted gradient needs alpha_t, so two passes
                with torch.no_grad():
                    losses = masked_mse(apply(model, model.flat, x, m), x, m)
            else:
                losses, grad = loss_and_gradient(model, x, m)
            proxy = losses.double().numpy()
            ref = ref_all[flat_idx].numpy()
            lam = excess_lambda(pos, proxy, ref, k)
            alpha = update_weights(alpha, lam, dro_cfg.eta, dro_cfg.c)
            if dro_cfg.proxy_loss_weighting == "alpha":
                counts = np.bincount(pos, minlength=k)
                present = counts > 0
                per = np.where(present, alpha.alpha / np.maximum(counts, 1), 0.0)
                sw = torch.from_numpy(per[pos] / alpha.alpha[present].sum()).to(model.dtype)
                _, grad = loss_and_gradient(model, x, m, sample_weights=sw)
            model, state = adamw_step(model, grad, state, train_cfg)

            counts = np.bincount(pos, minlength=k)
            sums = np.bincount(pos, weights=proxy, minlength=k)
            with np.errstate(invalid="ignore", divide="ignore"):
                mean_loss = np.where(counts > 0, sums / counts, np.nan)
            traj.alphas.append(alpha.alpha.copy())
            traj.lambdas.append(lam)
            traj.mean_losses.append(mean_loss)
            traj.trace.append(StepTrace(ids[pos], idx, proxy, ref))
    finally:
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            traj.write_csv(out_dir / "trajectory.csv")
            traj.write_trace(out_dir / "trace.jsonl")
    return ProxyResult(_average(traj.alphas, dro_cfg.average_from), traj, model)


@dataclass
class TraceReport:
    ok: bool
    first_divergence: int | None  # 1-based step, None when replay matches
    max_abs_diff: float
    replayed: list[np.ndarray]

    def __str__(self):
        if self.ok:
            return f"replay matches ({len(self.replayed)} steps, max |diff| {self.max_abs_diff:.3g})"
        return f"replay diverges at step {self.first_divergence} (max |diff| {self.max_abs_diff:.3g})"


def oracle_trace_check(trace: Sequence[StepTrace], stored_alphas: Sequence[np.ndarray], domain_ids: Sequence[int],
                       eta: float, c: float, atol: float = 1e-12) -> TraceReport:
    """Replay the weight arithmetic over a recorded trace and compare with the stored alphas."""
    pos_of = {int(d): i for i, d in enumerate(domain_ids)}
    k = len(pos_of)
    alpha = initial_proxy_weights(k)
    replayed, first, worst = [], None, 0.0
    for t, (step, stored) in enumerate(zip(trace, stored_alphas), start=1):
        pos = np.array([pos_of[int(d)] for d in step.domain_ids], dtype=np.int64)
        lam = excess_lambda(pos, step.proxy_losses, step.ref_losses, k)
        alpha = update_weights(alpha, lam, eta, c)
        replayed.append(alpha.alpha.copy())
        diff = float(np.max(np.abs(alpha.alpha - np.asarray(stored))))
        worst = max(worst, diff)
        if first is None and not diff <= atol:
            first = t
    if len(trace) != len(stored_alphas) and first is None:
        first = min(len(trace), len(stored_alphas)) + 1
    return TraceReport(first is None, first, worst, replayed)


def write_weights_json(path, weights: DomainWeights, names: Sequence[str], ids: Sequence[int],
                       cfg: DroConfig) -> None:
    write_json(path, {
        "domains": [{"id": int(i), "name": n, "weight": float(w)} for i, n, w in zip(ids, names, weights.alpha)],
        "steps": cfg.steps,
        "eta": cfg.eta,
        "c": cfg.c,
        "average_from": cfg.average_from,
    })


def read_weights_json(path) -> tuple[DomainWeights, list[str], list[int]]:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise MissingArtifactError(f"weights file not found: {path}") from None
    doms = d["domains"]
    return DomainWeights([x["weight"] for x in doms]), [x["name"] for x in doms], [x["id"] for x in doms]
