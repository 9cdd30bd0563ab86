"""Masked-reconstruction transformer shared by the reference and proxy models.

Parameters live in one flat tensor; named tensors are views into it, so
gradients, optimizer state and checkpoints are all plain vectors.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError, MissingArtifactError, NumericError, SchemaError
from .ingest import Domain
from .simplex import DomainWeights, sample_minibatch

RMS_EPS = 1e-6
CHECKPOINT_MAGIC = b"IMUMIXCK"
# shortest period 2 steps, longest ~2*pi*30: neighbouring rows are distinguishable within a 120-step window
POSITION_BASE = 30.0


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 3
    d_model: int = 32
    num_heads: int = 2
    ff_multiplier: int = 4
    window_len: int = 120
    channels: int = 6
    mask_channels: int = 3
    mask_time_rate: float = 0.7
    seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "d_model", "num_heads", "ff_multiplier", "window_len", "channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")

    @classmethod
    def paper_scale(cls, **kw) -> "ModelConfig":
        """About 1.3M parameters."""
        return cls(d_model=160, num_heads=8, **kw)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-2
    epochs: int = 20
    steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigError("batch_size must be >= 1 and learning_rate > 0")


def param_layout(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, C, L = cfg.d_model, cfg.channels, cfg.window_len
    h = cfg.ff_multiplier * d
    layout = [
        ("input.weight", (C, d)),
        ("input.bias", (d,)),
        ("mask_embedding", (C, d)),
        ("position", (L, d)),
    ]
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        layout += [
            (p + "attn_norm", (d,)),
            (p + "wq", (d, d)),
            (p + "wk", (d, d)),
            (p + "wv", (d, d)),
            (p + "wo", (d, d)),
            (p + "ff_norm", (d,)),
            (p + "w_gate", (d, h)),
            (p + "w_up", (d, h)),
            (p + "w_down", (h, d)),
        ]
    layout += [
        ("final_norm", (d,)),
        ("decoder.weight", (d, C)),
        ("decoder.bias", (C,)),
    ]
    return layout


def param_count(cfg: ModelConfig) -> int:
    """Closed form of ``sum(prod(shape))`` over ``param_layout``."""
    d, C, L, h, n = cfg.d_model, cfg.channels, cfg.window_len, cfg.ff_multiplier * cfg.d_model, cfg.num_layers
    return (2 * C * d + d + L * d) + n * (4 * d * d + 3 * d * h + 2 * d) + (d + d * C + C)


def sinusoidal_table(length: int, width: int) -> torch.Tensor:
    """Initial value of the learned position table, so attention can tell rows apart from step 0."""
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(POSITION_BASE) * torch.arange(0, width, 2, dtype=torch.float64) / width)
    table = torch.zeros(length, width, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: width // 2])
    return table


class ReconModel:
    def __init__(self, cfg: ModelConfig, flat: torch.Tensor):
        self.cfg = cfg
        self.layout = param_layout(cfg)
        if flat.ndim != 1 or flat.numel() != param_count(cfg):
            raise ConfigError(f"expected {param_count(cfg)} parameters, got {flat.numel()}")
        self.flat = flat

    @classmethod
    def init(cls, cfg: ModelConfig, dtype=torch.float32) -> "ReconModel":
        gen = torch.Generator().manual_seed(cfg.seed)
        parts = []
        for name, shape in param_layout(cfg):
            if name.endswith("norm"):
                parts.append(torch.ones(shape, dtype=torch.float64))
            elif name.endswith("bias"):
                parts.append(torch.zeros(shape, dtype=torch.float64))
            elif name == "position":
                parts.append(sinusoidal_table(*shape))
            elif name == "mask_embedding":
                parts.append(0.02 * torch.randn(shape, generator=gen, dtype=torch.float64))
            elif name.endswith("wk"):
                # start with W_k = W_q so initial attention follows token similarity
                parts.append(parts[-1].clone())
            else:
                std = 1.0 / math.sqrt(shape[0])
                if name.endswith(("wo", "w_down")):
                    std /= math.sqrt(2 * cfg.num_layers)
                parts.append(std * torch.randn(shape, generator=gen, dtype=torch.float64))
        flat = torch.cat([p.reshape(-1) for p in parts]).to(dtype)
        return cls(cfg, flat)

    @property
    def dtype(self):
        return self.flat.dtype

    def tensors(self, flat: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
        flat = self.flat if flat is None else flat
        out, off = {}, 0
        for name, shape in self.layout:
            n = math.prod(shape)
            out[name] = flat[off:off + n].view(shape)
            off += n
        return out

    def offsets(self) -> dict[str, tuple[int, int]]:
        out, off = {}, 0
        for name, shape in self.layout:
            n = math.prod(shape)
            out[name] = (off, n)
            off += n
        return out

    def copy(self) -> "ReconModel":
        return ReconModel(self.cfg, self.flat.detach().clone())

    def to(self, dtype) -> "ReconModel":
        return ReconModel(self.cfg, self.flat.detach().to(dtype))


def _rms_norm(x, scale):
    return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + RMS_EPS) * scale


def apply(model: ReconModel, flat: torch.Tensor, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Batched forward pass: (B, L, C) inputs and boolean masks -> (B, L, C)."""
    cfg = model.cfg
    p = model.tensors(flat)
    B, L, C = x.shape
    if (L, C) != (cfg.window_len, cfg.channels) or mask.shape != x.shape:
        raise ConfigError(f"input shape {tuple(x.shape)} / mask {tuple(mask.shape)} do not match "
                          f"({cfg.window_len}, {cfg.channels})")
    m = mask.to(x.dtype)
    h = (x * (1 - m)) @ p["input.weight"] + p["input.bias"] + m @ p["mask_embedding"] + p["position"]
    H, dh = cfg.num_heads, cfg.d_model // cfg.num_heads
    for i in range(cfg.num_layers):
        pre = f"layers.{i}."
        a = _rms_norm(h, p[pre + "attn_norm"])
        q = (a @ p[pre + "wq"]).view(B, L, H, dh).transpose(1, 2)
        k = (a @ p[pre + "wk"]).view(B, L, H, dh).transpose(1, 2)
        v = (a @ p[pre + "wv"]).view(B, L, H, dh).transpose(1, 2)
        att = F.scaled_dot_product_attention(q, k, v)
        h = h + att.transpose(1, 2).reshape(B, L, cfg.d_model) @ p[pre + "wo"]
        f = _rms_norm(h, p[pre + "ff_norm"])
        h = h + (F.silu(f @ p[pre + "w_gate"]) * (f @ p[pre + "w_up"])) @ p[pre + "w_down"]
    h = _rms_norm(h, p["final_norm"])
    return h @ p["decoder.weight"] + p["decoder.bias"]


def masked_mse(recon: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-sample mean squared error over masked entries only."""
    m = mask.to(recon.dtype)
    count = m.sum(dim=(1, 2))
    if torch.any(count == 0):
        raise ConfigError("empty mask")
    return ((recon - target) ** 2 * m).sum(dim=(1, 2)) / count


# --- masks --------------------------------------------------------------------

@dataclass(frozen=True)
class MaskSpec:
    shape: tuple[int, int]
    masked_channels: tuple[int, ...]
    masked_timesteps: tuple[int, ...]

    @property
    def matrix(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[:, list(self.masked_channels)] = True
        m[list(self.masked_timesteps), :] = True
        return m


def _time_count(L: int, time_rate: float) -> int:
    return math.ceil(round(time_rate * L, 9))


def make_mask(window_shape: tuple[int, int], n_channels: int = 3, time_rate: float = 0.7,
              rng_seed: int | Sequence[int] = 0) -> MaskSpec:
    """Union of ``n_channels`` whole channels and ceil(time_rate * L) whole timestep rows."""
    L, C = window_shape
    if not 0 <= n_channels <= C:
        raise ConfigError(f"cannot mask {n_channels} of {C} channels")
    if not 0 < time_rate < 1:
        raise ConfigError(f"time mask rate {time_rate} outside (0, 1)")
    n_time = _time_count(L, time_rate)
    if n_time >= L:
        raise ConfigError(f"time mask rate {time_rate} masks every row of a length-{L} window")
    rng = np.random.default_rng(rng_seed)
    chans = rng.choice(C, size=n_channels, replace=False)
    times = rng.choice(L, size=n_time, replace=False)
    return MaskSpec((L, C), tuple(sorted(int(c) for c in chans)), tuple(sorted(int(t) for t in times)))


_CANONICAL_TAG = 0x6D61736B  # "mask"


def canonical_mask(cfg: ModelConfig, domain_id: int, window_index: int) -> MaskSpec:
    return make_mask((cfg.window_len, cfg.channels), cfg.mask_channels, cfg.mask_time_rate,
                     rng_seed=[_CANONICAL_TAG, int(domain_id), int(window_index)])


def canonical_masks(cfg: ModelConfig, domain: Domain) -> np.ndarray:
    return np.stack([canonical_mask(cfg, domain.id, i).matrix for i in range(domain.size)]) \
        if domain.size else np.zeros((0, cfg.window_len, cfg.channels), dtype=bool)


def random_masks(cfg: ModelConfig, b: int, rng: np.random.Generator) -> np.ndarray:
    """Batch of independent uniform masks with the same cardinalities as make_mask."""
    L, C = cfg.window_len, cfg.channels
    n_time = _time_count(L, cfg.mask_time_rate)
    chans = np.argsort(rng.random((b, C)), axis=1)[:, :cfg.mask_channels]
    times = np.argsort(rng.random((b, L)), axis=1)[:, :n_time]
    m = np.zeros((b, L, C), dtype=bool)
    rows = np.arange(b)[:, None]
    m[rows, :, chans] = True
    m[rows, times, :] = True
    return m


# --- standardization ------------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, domains: Sequence[Domain]) -> "Standardizer":
        """Per-channel statistics pooled over all windows of all domains."""
        stacked = np.concatenate([d.data.reshape(-1, d.data.shape[-1]) for d in domains if d.size])
        stacked = stacked.astype(np.float64)
        return cls(stacked.mean(axis=0), np.maximum(stacked.std(axis=0), 1e-8))

    @classmethod
    def fit_domain(cls, domain: Domain) -> "Standardizer":
        return cls.fit([domain])

    def __call__(self, data: np.ndarray) -> np.ndarray:
        return (np.asarray(data, dtype=np.float64) - self.mean) / self.std

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))

    def apply(self, domain: Domain) -> np.ndarray:
        return self(domain.data)


@dataclass
class DomainStandardizer:
    """Per-channel statistics kept separately for each domain id, with an optional pooled fallback."""

    stats: dict[int, Standardizer]
    pooled: Standardizer | None = None

    @classmethod
    def fit(cls, domains: Sequence[Domain]) -> "DomainStandardizer":
        return cls({d.id: Standardizer.fit_domain(d) for d in domains if d.size})

    def apply(self, domain: Domain) -> np.ndarray:
        stats = self.stats.get(domain.id, self.pooled)
        if stats is None:
            raise MissingArtifactError(f"no normalization statistics for domain {domain.id} ({domain.name})")
        return stats(domain.data)

    def to_dict(self):
        d = {"per_domain": {str(k): v.to_dict() for k, v in sorted(self.stats.items())}}
        if self.pooled is not None:
            d["pooled"] = self.pooled.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        pooled = d.get("pooled")
        return cls({int(k): Standardizer.from_dict(v) for k, v in d.get("per_domain", {}).items()},
                   Standardizer.from_dict(pooled) if pooled else None)


class Corpus:
    """Standardized windows of several domains as one tensor, addressed by (domain position, window index)."""

    def __init__(self, domains: Sequence[Domain], standardizer: Standardizer | DomainStandardizer | None,
                 dtype=torch.float32):
        self.domains = list(domains)
        self.sizes = np.array([d.size for d in self.domains], dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(np.int64)
        arrays = [standardizer.apply(d) if standardizer else d.data.astype(np.float64)
                  for d in self.domains if d.size]
        if arrays:
            self.x = torch.from_numpy(np.concatenate(arrays)).to(dtype)
        else:
            self.x = torch.zeros((0, 0, 0), dtype=dtype)
        self._canon = None
        self._canon_cfg = None

    def flat_index(self, pos: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return self.offsets[pos] + idx

    def canonical(self, cfg: ModelConfig) -> torch.Tensor:
        if self._canon is None or self._canon_cfg != cfg:
            masks = [canonical_masks(cfg, d) for d in self.domains if d.size]
            self._canon = torch.from_numpy(np.concatenate(masks)) if masks else torch.zeros(0, dtype=torch.bool)
            self._canon_cfg = cfg
        return self._canon


# --- public single-window operations ---------------------------------------------

def _as_batch(model: ReconModel, windows, masks):
    x = torch.as_tensor(np.stack([np.asarray(getattr(w, "data", w), dtype=np.float64) for w in windows]),
                        dtype=model.dtype)
    m = torch.as_tensor(np.stack([mk.matrix if isinstance(mk, MaskSpec) else np.asarray(mk, bool)
                                  for mk in masks]))
    return x, m


def forward(model: ReconModel, window, mask) -> np.ndarray:
    x, m = _as_batch(model, [window], [mask])
    with torch.no_grad():
        return apply(model, model.flat, x, m)[0].numpy()


def sample_loss(model: ReconModel, window, mask) -> float:
    x, m = _as_batch(model, [window], [mask])
    with torch.no_grad():
        return float(masked_mse(apply(model, model.flat, x, m), x, m)[0])


def loss_and_gradient(model: ReconModel, x: torch.Tensor, mask: torch.Tensor,
                      sample_weights: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample losses and the gradient of their (weighted) mean w.r.t. the flat parameters."""
    flat = model.flat.detach().requires_grad_(True)
    losses = masked_mse(apply(model, flat, x, mask), x, mask)
    if not torch.all(torch.isfinite(losses)):
        bad = int(torch.nonzero(~torch.isfinite(losses))[0, 0])
        raise NumericError(f"non-finite loss at batch sample {bad}", index=bad)
    objective = losses.mean() if sample_weights is None else (losses * sample_weights).sum()
    (grad,) = torch.autograd.grad(objective, flat)
    return losses.detach(), grad


def gradient(model: ReconModel, windows, masks) -> np.ndarray:
    """Gradient of the mean masked MSE over a batch, as a flat vector."""
    if len(windows) == 0:
        raise ConfigError("empty batch")
    x, m = _as_batch(model, windows, masks)
    return loss_and_gradient(model, x, m)[1].numpy()


# --- optimizer ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    step: int = 0

    @classmethod
    def zeros_like(cls, model: ReconModel) -> "AdamState":
        return cls(torch.zeros_like(model.flat), torch.zeros_like(model.flat))


def adamw_step(model: ReconModel, grad, state: AdamState, cfg: TrainConfig) -> tuple[ReconModel, AdamState]:
    """Adam moments plus weight decay applied directly to the parameters."""
    grad = torch.as_tensor(grad, dtype=model.dtype)
    if grad.shape != model.flat.shape or state.m.shape != model.flat.shape:
        raise ConfigError(f"gradient {tuple(grad.shape)} / state {tuple(state.m.shape)} do not match "
                          f"{tuple(model.flat.shape)} parameters")
    t = state.step + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * grad * grad
    m_hat = m / (1 - cfg.beta1 ** t)
    v_hat = v / (1 - cfg.beta2 ** t)
    flat = model.flat.detach() * (1 - cfg.learning_rate * cfg.weight_decay)
    flat = flat - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps)
    return ReconModel(model.cfg, flat), AdamState(m, v, t)


# --- training and evaluation -------------------------------------------------------

@dataclass
class TrainResult:
    model: ReconModel
    loss_curve: list[float]  # mean training loss per epoch (or per step when cfg.steps is set)
    batches: list[np.ndarray] = field(default_factory=list)


def train(model: ReconModel, domains: Sequence[Domain], weights: DomainWeights, cfg: TrainConfig,
          standardizer: Standardizer | DomainStandardizer | None = None, record_batches: bool = False,
          corpus: Corpus | None = None) -> TrainResult:
    """Minibatch AdamW training with batches drawn from the fixed mixture ``weights``.

    Masks are fresh random draws each step.
    """
    weights.check(atol=1e-9)
    sizes = np.array([d.size for d in domains])
    if np.any((sizes == 0) & (weights.alpha > 0)):
        raise InputError("empty domain with nonzero weight")
    corpus = corpus or Corpus(domains, standardizer, model.dtype)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.zeros_like(model)
    if cfg.steps is not None:
        n_epochs, per_epoch = cfg.steps, 1
    else:
        n_epochs, per_epoch = cfg.epochs, max(1, math.ceil(sizes.sum() / cfg.batch_size))
    curve, batches = [], []
    for _ in range(n_epochs):
        total = 0.0
        for _ in range(per_epoch):
            pos, idx = sample_minibatch(sizes, weights, cfg.batch_size, rng)
            if record_batches:
                batches.append(pos)
            x = corpus.x[torch.from_numpy(corpus.flat_index(pos, idx))]
            m = torch.from_numpy(random_masks(model.cfg, cfg.batch_size, rng))
            try:
                losses, grad = loss_and_gradient(model, x, m)
            except NumericError as e:
                e.model = model  # last finite parameters
                raise
            model, state = adamw_step(model, grad, state, cfg)
            total += float(losses.mean())
        curve.append(total / per_epoch)
    return TrainResult(model, curve, batches)


def evaluate_losses(model: ReconModel, corpus: Corpus, batch: int = 256) -> torch.Tensor:
    """Canonical-mask loss of every window in the corpus, in corpus order."""
    masks = corpus.canonical(model.cfg)
    out = []
    with torch.no_grad():
        for a in range(0, len(corpus.x), batch):
            x, m = corpus.x[a:a + batch], masks[a:a + batch]
            out.append(masked_mse(apply(model, model.flat, x, m), x, m))
    return torch.cat(out) if out else torch.zeros(0, dtype=model.dtype)


def baseline_losses(reference: ReconModel, domains: Sequence[Domain],
                    standardizer: Standardizer | DomainStandardizer | None = None,
                    corpus: Corpus | None = None) -> dict[tuple[int, int], float]:
    """Per-window canonical-mask loss keyed by ``(domain_id, window_index)``."""
    corpus = corpus or Corpus(domains, standardizer, reference.dtype)
    losses = evaluate_losses(reference, corpus).tolist()
    table, k = {}, 0
    for d in domains:
        for i in range(d.size):
            table[(d.id, i)] = losses[k]
            k += 1
    return table


def write_loss_table(path, table: dict[tuple[int, int], float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["domain_id", "window_index", "loss"])
        for (d, i), v in sorted(table.items()):
            w.writerow([d, i, repr(float(v))])


def read_loss_table(path) -> dict[tuple[int, int], float]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return {(int(r["domain_id"]), int(r["window_index"])): float(r["loss"]) for r in csv.DictReader(fh)}
    except FileNotFoundError:
        raise MissingArtifactError(f"baseline loss table not found: {path}") from None


# --- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, model: ReconModel, extra: dict | None = None) -> None:
    """Magic, u64 header length, JSON header, then the little-endian parameter vector."""
    dtype = "float64" if model.dtype == torch.float64 else "float32"
    header = {
        "config": asdict(model.cfg),
        "dtype": dtype,
        "num_parameters": int(model.flat.numel()),
        "tensors": [{"name": n, "shape": list(s), "offset": o, "count": c}
                    for (n, s), (o, c) in zip(model.layout, model.offsets().values())],
    }
    header.update(extra or {})
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    data = model.flat.detach().numpy().astype("<f8" if dtype == "float64" else "<f4")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(data.tobytes())


def load_checkpoint(path) -> tuple[ReconModel, dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise SchemaError(f"{path} is not a checkpoint")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    dt = "<f8" if header["dtype"] == "float64" else "<f4"
    flat = np.frombuffer(raw[16 + n:], dtype=dt).astype(dt[1:])
    cfg = ModelConfig(**header["config"])
    return ReconModel(cfg, torch.from_numpy(flat.copy())), header
