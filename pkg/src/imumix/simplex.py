"""Domain weights on the probability simplex and minibatch sampling from them."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError


@dataclass
class DomainWeights:
    alpha: np.ndarray
    step_index: int = 0

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)

    @property
    def k(self) -> int:
        return len(self.alpha)

    def check(self, floor: float = 0.0, atol: float = 1e-12) -> None:
        if not np.all(np.isfinite(self.alpha)) or np.any(self.alpha < 0):
            raise ConfigError(f"weights {self.alpha} are not a probability vector")
        if abs(self.alpha.sum() - 1.0) > atol:
            raise ConfigError(f"weights sum to {self.alpha.sum()!r}, not 1")
        if floor and self.alpha.min() < floor - atol:
            raise ConfigError(f"weight {self.alpha.min()} below floor {floor}")


def initial_reference_weights(sizes: Sequence[int]) -> DomainWeights:
    """Size-proportional weights |D_i| / sum_j |D_j|.

    Accepts domain sizes or anything with ``len``.
    """
    sizes = np.array([s if isinstance(s, (int, np.integer)) else len(s) for s in sizes], dtype=np.float64)
    if len(sizes) == 0 or np.any(sizes <= 0):
        raise InputError(f"every domain must be nonempty (sizes {sizes.astype(int).tolist()})")
    return DomainWeights(sizes / sizes.sum())


def initial_proxy_weights(k: int) -> DomainWeights:
    if k < 1:
        raise ConfigError("need at least one domain")
    alpha = np.full(k, 1.0 / k)
    return DomainWeights(alpha / alpha.sum())


def sample_minibatch(sizes: Sequence[int], weights: DomainWeights, b: int, rng: np.random.Generator,
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``b`` samples i.i.d. from the mixture: domain ~ Categorical(alpha), then a uniform window.

    Returns ``(domain_ids, window_indices)``; domain ids are positions in ``sizes``.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    alpha = weights.alpha
    if len(alpha) != len(sizes):
        raise ConfigError(f"{len(alpha)} weights for {len(sizes)} domains")
    empty = (sizes == 0) & (alpha > 0)
    if np.any(empty):
        raise InputError(f"domain {int(np.argmax(empty))} is empty but has nonzero weight")
    domain_ids = rng.choice(len(sizes), size=b, p=alpha / alpha.sum())
    # floor(u * n) keeps one uniform draw per sample regardless of domain size
    u = rng.random(b)
    window_idx = np.minimum((u * sizes[domain_ids]).astype(np.int64), sizes[domain_ids] - 1)
    return domain_ids.astype(np.int64), window_idx
