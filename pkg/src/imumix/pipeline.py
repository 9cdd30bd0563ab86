"""The four pipeline stages plus synthetic data generation, driven by one JSON config."""

from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dro, mixture, synth
from .errors import ConfigError, ImuMixError, InputError, MissingArtifactError, NumericError
from .ingest import (
    DatasetDescriptor,
    Domain,
    read_dataset,
    read_domain_store,
    resample,
    window,
    write_domain_store,
    write_json,
)
from .model import (
    Corpus,
    DomainStandardizer,
    ModelConfig,
    ReconModel,
    TrainConfig,
    baseline_losses,
    evaluate_losses,
    load_checkpoint,
    read_loss_table,
    save_checkpoint,
    train,
    write_loss_table,
)
from .orient import MahonyConfig, align_recording
from .report import write_trajectory_svg
from .simplex import initial_reference_weights

log = logging.getLogger(__name__)

REFERENCE_EPOCHS = 200


def stage_seed(seed: int, tag: str) -> int:
    """Independent per-stage seed from the top-level seed and a fixed tag."""
    return int(np.random.SeedSequence([seed, zlib.crc32(tag.encode())]).generate_state(1)[0])


def _pick(cls, d: dict | None):
    d = dict(d or {})
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return d


@dataclass
class PipelineConfig:
    out: Path
    seed: int = 0
    datasets: list = field(default_factory=list)
    synthetic: synth.SyntheticSpec | None = None
    window_length: int = 120
    window_stride: int = 120
    target_rate: float = 20.0
    mahony: dict = field(default_factory=dict)
    align: bool = True
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    dro: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    @classmethod
    def from_dict(cls, d: dict, base_dir=".", seed: int | None = None, out=None) -> "PipelineConfig":
        d = json.loads(json.dumps(d))
        win = d.pop("window", {})
        syn = d.pop("synthetic", None)
        mah = d.pop("mahony", {})
        align = bool(mah.pop("enabled", True))
        cfg = cls(
            out=Path(out if out is not None else d.pop("out", "run")),
            seed=int(seed if seed is not None else d.pop("seed", 0)),
            datasets=d.pop("datasets", []),
            synthetic=synth.SyntheticSpec.from_dict(syn) if syn else None,
            window_length=int(win.get("length", 120)),
            window_stride=int(win.get("stride", win.get("length", 120))),
            target_rate=float(win.get("target_rate", 20.0)),
            mahony=_pick(MahonyConfig, mah),
            align=align,
            model=_pick(ModelConfig, d.pop("model", {})),
            train=_pick(TrainConfig, d.pop("train", {})),
            dro=_pick(dro.DroConfig, d.pop("dro", {})),
            base_dir=Path(base_dir),
        )
        d.pop("out", None)
        d.pop("seed", None)
        if d:
            raise ConfigError(f"unknown config keys: {sorted(d)}")
        if not cfg.datasets and cfg.synthetic is None:
            raise ConfigError("config needs 'datasets' or a 'synthetic' section")
        return cfg

    @classmethod
    def load(cls, path, seed: int | None = None, out=None) -> "PipelineConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except FileNotFoundError:
            raise InputError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(d, base_dir=Path(path).resolve().parent, seed=seed, out=out)

    # derived configs ------------------------------------------------------------

    @property
    def raw_dir(self) -> Path:
        return self.out / "raw"

    def descriptors(self) -> list[DatasetDescriptor]:
        """Dataset descriptors; string entries are paths relative to the config file."""
        if not self.datasets and self.synthetic is not None:
            paths = [self.raw_dir / f"{d.name}.json" for d in self.synthetic.domains]
            missing = [p for p in paths if not p.exists()]
            if missing:
                raise InputError(f"synthetic dataset missing: {missing[0]} (run synth first)")
            out = [DatasetDescriptor.load(p) for p in paths]
        else:
            out = [DatasetDescriptor.from_dict(e, base_dir=self.base_dir) if isinstance(e, dict)
                   else DatasetDescriptor.load(self.base_dir / e) for e in self.datasets]
        for desc in out:
            desc.files()
        return out

    def mahony_config(self, gravity_sign: float = 1.0) -> MahonyConfig:
        return MahonyConfig(**{"dt": 1.0 / self.target_rate, **self.mahony, "gravity_sign": gravity_sign})

    def model_config(self, tag: str) -> ModelConfig:
        return ModelConfig(**{**self.model, "seed": stage_seed(self.seed, tag) % 2**31})

    def train_config(self, tag: str) -> TrainConfig:
        return TrainConfig(**{"epochs": REFERENCE_EPOCHS, **self.train, "seed": stage_seed(self.seed, tag)})

    def dro_config(self) -> dro.DroConfig:
        d = dict(self.dro)
        d.setdefault("batch_size", self.train_config("x").batch_size)
        return dro.DroConfig(**{**d, "seed": stage_seed(self.seed, "dro")})


def desk_config() -> dict:
    """The bundled three-domain synthetic benchmark at desk scale (also shipped as configs/synthetic.json)."""
    spec = synth.hard_domain_benchmark(n_windows=400).to_dict()
    spec.pop("seed")
    return {
        "out": "runs/synthetic",
        "seed": 0,
        "synthetic": spec,
        "window": {"length": 120, "stride": 120, "target_rate": 20},
        "mahony": {"enabled": True, "kp": 1.0, "ki": 0.0},
        "model": {"num_layers": 3, "d_model": 32, "num_heads": 2},
        "train": {"batch_size": 64, "learning_rate": 1e-3, "weight_decay": 1e-2, "epochs": 20},
        "dro": {"eta": 0.001, "c": 0.01, "steps": 1000},
    }


# --- stages ---------------------------------------------------------------------------

def cmd_synth(cfg: PipelineConfig) -> list[Path]:
    spec = cfg.synthetic or synth.hard_domain_benchmark()
    spec = synth.SyntheticSpec(domains=spec.domains, seed=stage_seed(cfg.seed, "synth"), label_map=spec.label_map)
    return synth.write_synthetic(spec, cfg.raw_dir)


def build_domain(desc: DatasetDescriptor, domain_id: int, cfg: PipelineConfig) -> Domain:
    """read -> resample -> Mahony alignment over each whole session -> windows."""
    wins = []
    mcfg = cfg.mahony_config(desc.gravity_sign)
    for path in desc.files():
        for rec in read_dataset(path, desc.source_rate, desc.accel_unit, desc.gyro_unit):
            if len(rec) < 2:
                continue
            rec = resample(rec, cfg.target_rate)
            if cfg.align:
                rec, _ = align_recording(rec, mcfg)
            wins += window(rec, cfg.window_length, cfg.window_stride, desc.label_map, domain_id)
    for i, w in enumerate(wins):
        w.window_index = i
    return Domain.from_windows(domain_id, desc.name, wins, cfg.window_length)


def domain_dir(cfg: PipelineConfig, d_id: int, name: str) -> Path:
    return cfg.out / "domains" / f"{d_id:02d}_{name}"


def cmd_preprocess(cfg: PipelineConfig) -> list[Domain]:
    domains = []
    for i, desc in enumerate(cfg.descriptors()):
        d = build_domain(desc, i, cfg)
        write_domain_store(d, domain_dir(cfg, i, d.name))
        domains.append(d)
    write_json(cfg.out / "domains" / "summary.json", {
        "domains": [{"id": d.id, "name": d.name, "num_windows": d.size, "label_histogram": d.label_histogram()}
                    for d in domains],
    })
    return domains


def load_domains(cfg: PipelineConfig) -> list[Domain]:
    root = cfg.out / "domains"
    dirs = sorted(p for p in root.glob("*") if (p / "manifest.json").exists()) if root.exists() else []
    if not dirs:
        raise MissingArtifactError(f"no domain stores under {root}; run preprocess first")
    return sorted((read_domain_store(p)[0] for p in dirs), key=lambda d: d.id)


def cmd_reference(cfg: PipelineConfig) -> dict:
    domains = load_domains(cfg)
    out = cfg.out / "reference"
    out.mkdir(parents=True, exist_ok=True)
    std = DomainStandardizer.fit(domains)
    corpus = Corpus(domains, std)
    model = ReconModel.init(cfg.model_config("reference"))
    tcfg = cfg.train_config("reference-train")
    weights = initial_reference_weights([d.size for d in domains])
    initial = float(evaluate_losses(model, corpus).mean())
    extra = {"standardizer": std.to_dict()}
    try:
        result = train(model, domains, weights, tcfg, corpus=corpus)
    except NumericError as e:
        last = getattr(e, "model", None) or model
        save_checkpoint(out / "checkpoint.last_good.bin", last, extra)
        raise
    table = baseline_losses(result.model, domains, corpus=corpus)
    save_checkpoint(out / "checkpoint.bin", result.model, extra)
    write_loss_table(out / "baseline_losses.csv", table)
    with open(out / "loss_curve.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(result.loss_curve, start=1):
            fh.write(f"{i},{v!r}\n")
    final = float(np.mean(list(table.values())))
    summary = {
        "weights": weights.alpha.tolist(),
        "initial_mean_loss": initial,
        "final_mean_loss": final,
        "reduction": 1.0 - final / initial,
        "epochs": len(result.loss_curve),
        "rows": len(table),
    }
    write_json(out / "summary.json", summary)
    return summary


def _reference_artifacts(cfg: PipelineConfig):
    ref = cfg.out / "reference"
    table = read_loss_table(ref / "baseline_losses.csv")
    _, header = load_checkpoint(ref / "checkpoint.bin")
    return table, DomainStandardizer.from_dict(header["standardizer"])


def cmd_optimize(cfg: PipelineConfig) -> dro.ProxyResult:
    domains = load_domains(cfg)
    table, std = _reference_artifacts(cfg)
    out = cfg.out / "optimize"
    dcfg = cfg.dro_config()
    result = dro.run_proxy(domains, table, cfg.model_config("proxy"), cfg.train_config("proxy-train"), dcfg,
                           standardizer=std, out_dir=out)
    dro.write_weights_json(out / "weights.json", result.weights, [d.name for d in domains],
                           [d.id for d in domains], dcfg)
    write_trajectory_svg(out / "trajectory.svg", np.stack(result.trajectory.alphas), result.trajectory.names)
    return result


def cmd_mix(cfg: PipelineConfig) -> mixture.Mixture:
    domains = load_domains(cfg)
    weights, names, ids = dro.read_weights_json(cfg.out / "optimize" / "weights.json")
    by_id = {d.id: d for d in domains}
    try:
        ordered = [by_id[i] for i in ids]
    except KeyError as e:
        raise MissingArtifactError(f"weights refer to domain {e.args[0]} with no store") from None
    plan = mixture.mixture_sizes([d.size for d in ordered], weights, seed=stage_seed(cfg.seed, "mixture"))
    mix = mixture.recombine(ordered, plan)
    mixture.export(mix, cfg.out / "mixture")
    return mix


STAGES = ("preprocess", "reference", "optimize", "mix")


def cmd_run_all(cfg: PipelineConfig) -> dict:
    durations = {}
    funcs = {"preprocess": cmd_preprocess, "reference": cmd_reference, "optimize": cmd_optimize, "mix": cmd_mix}
    stages = (("synth",) if cfg.synthetic is not None and not cfg.datasets else ()) + STAGES
    for name in stages:
        t0 = time.perf_counter()
        log.info("stage %s", name)
        try:
            (cmd_synth if name == "synth" else funcs[name])(cfg)
        except ImuMixError as e:
            e.stage = name
            raise
        durations[name] = time.perf_counter() - t0
    report = build_report(cfg)
    report["durations_seconds"] = durations
    write_json(cfg.out / "report.json", report)
    return report


def build_report(cfg: PipelineConfig) -> dict:
    rep: dict = {"out": str(cfg.out), "seed": cfg.seed}
    summary = cfg.out / "domains" / "summary.json"
    if summary.exists():
        rep["domains"] = json.loads(summary.read_text())["domains"]
    ref = cfg.out / "reference" / "summary.json"
    if ref.exists():
        rep["reference"] = json.loads(ref.read_text())
    wpath = cfg.out / "optimize" / "weights.json"
    if wpath.exists():
        rep["weights"] = json.loads(wpath.read_text())["domains"]
    mpath = cfg.out / "mixture" / "mixture_manifest.json"
    if mpath.exists():
        m = json.loads(mpath.read_text())
        rep["mixture"] = {"total": m["total"], "num_windows": m["num_windows"],
                          "usage_fraction": m["usage_fraction"],
                          "counts": {d["name"]: d["count"] for d in m["domains"]}}
    return rep
