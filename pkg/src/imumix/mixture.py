"""Sizing and sampling of the final training mixture from averaged domain weights."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError, PlanError
from .ingest import Domain, read_domain_store, write_domain_store, write_json
from .simplex import DomainWeights

MIXTURE_ID = -1


@dataclass
class MixturePlan:
    total: int
    counts: np.ndarray
    weights: DomainWeights
    sizes: np.ndarray
    seed: int = 0

    @property
    def usage_fraction(self) -> float:
        """Share of all available windows that the mixture uses."""
        return float(self.counts.sum() / self.sizes.sum())

    def validate(self) -> None:
        if np.any(self.counts < 0) or np.any(self.counts > self.sizes):
            bad = int(np.argmax((self.counts < 0) | (self.counts > self.sizes)))
            raise PlanError(f"domain {bad}: plan asks for {int(self.counts[bad])} of {int(self.sizes[bad])} windows")


def mixture_sizes(domain_sizes: Sequence[int], weights: DomainWeights, seed: int = 0) -> MixturePlan:
    """N = floor(min_i |D_i| / alpha_i), n_i = floor(alpha_i * N)."""
    sizes = np.asarray(domain_sizes, dtype=np.int64)
    alpha = weights.alpha
    if len(alpha) != len(sizes):
        raise PlanError(f"{len(alpha)} weights for {len(sizes)} domains")
    if np.any(alpha <= 0):
        raise PlanError(f"weights must be strictly positive, got {alpha.tolist()}")
    total = int(math.floor(float(np.min(sizes / alpha))))
    counts = np.floor(alpha * total).astype(np.int64)
    # guards the floating-point edge where alpha_i * N rounds past |D_i|
    counts = np.minimum(counts, sizes)
    return MixturePlan(total, counts, weights, sizes, seed)


@dataclass
class Mixture:
    domain: Domain
    source_domain: np.ndarray  # domain id per window
    source_index: np.ndarray  # window index within the source domain
    plan: MixturePlan
    names: list[str]
    ids: list[int]


def recombine(domains: Sequence[Domain], plan: MixturePlan) -> Mixture:
    """Sample n_i windows per domain without replacement, concatenate, shuffle."""
    plan.validate()
    if len(domains) != len(plan.counts):
        raise PlanError(f"plan covers {len(plan.counts)} domains, got {len(domains)}")
    src_dom, src_idx, data, labels = [], [], [], []
    for i, (d, n) in enumerate(zip(domains, plan.counts)):
        if n > d.size:
            raise PlanError(f"domain {d.name}: plan asks for {n} of {d.size} windows")
        pick = np.sort(np.random.default_rng([plan.seed, i]).choice(d.size, size=int(n), replace=False))
        src_dom.append(np.full(len(pick), d.id, dtype=np.int64))
        src_idx.append(pick.astype(np.int64))
        data.append(d.data[pick])
        labels += [d.labels[j] for j in pick]
    src_dom = np.concatenate(src_dom) if src_dom else np.zeros(0, np.int64)
    src_idx = np.concatenate(src_idx) if src_idx else np.zeros(0, np.int64)
    order = np.random.default_rng([plan.seed, len(domains)]).permutation(len(src_dom))
    stacked = np.concatenate(data)[order] if data else np.zeros((0,) + domains[0].data.shape[1:], np.float32)
    sessions = [f"{int(a)}:{int(b)}" for a, b in zip(src_dom[order], src_idx[order])]
    mixed = Domain(MIXTURE_ID, "mixture", stacked, [labels[j] for j in order], sessions,
                   np.zeros(len(order), dtype=np.int64))
    return Mixture(mixed, src_dom[order], src_idx[order], plan, [d.name for d in domains], [d.id for d in domains])


def export(mix: Mixture, path: str | Path) -> Path:
    """Write the mixture as a Domain store plus ``mixture_manifest.json``."""
    path = Path(path)
    try:
        write_domain_store(mix.domain, path, extra_columns={"source_domain": mix.source_domain,
                                                            "source_index": mix.source_index})
        plan = mix.plan
        write_json(path / "mixture_manifest.json", {
            "seed": plan.seed,
            "total": plan.total,
            "domains": [
                {"id": int(i), "name": n, "weight": float(w), "size": int(s), "count": int(c)}
                for i, n, w, s, c in zip(mix.ids, mix.names, plan.weights.alpha, plan.sizes, plan.counts)
            ],
            "num_windows": int(mix.domain.size),
            "usage_fraction": plan.usage_fraction,
            "provenance": [[int(a), int(b)] for a, b in zip(mix.source_domain, mix.source_index)],
        })
    except OSError as e:
        raise InputError(f"cannot write mixture to {path}: {e}") from e
    return path


def read_mixture(path: str | Path) -> tuple[Domain, dict]:
    domain, extra = read_domain_store(path)
    try:
        with open(Path(path) / "mixture_manifest.json", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"no mixture manifest in {path}") from None
    manifest["source_domain"] = extra.get("source_domain")
    manifest["source_index"] = extra.get("source_index")
    return domain, manifest
