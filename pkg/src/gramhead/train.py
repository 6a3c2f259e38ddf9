"""Training loop, evaluation and parameter sweeps."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import autodiff as ad
from .autodiff import Tensor
from .backbone import BackboneConfig
from .data import Dataset, augment_batch, load_cifar, synth_blobs
from .diagnostics import VoteTable, diagnose
from .ensemble import EnsembleModel, ModelConfig, build_model, forward_all, prune_heads, total_loss
from .errors import ConfigError, TrainingError
from .io import emit_metrics, load_checkpoint, save_checkpoint, write_table

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ["value", "top1", "strength", "rho", "bound", "status"]


@dataclass
class TrainConfig:
    # data
    dataset: str = "synth"  # synth | cifar10 | cifar100
    data_path: str | None = None
    val_path: str | None = None
    limit: int | None = None
    val_limit: int | None = None
    synth_classes: int = 4
    synth_per_class: int = 64
    synth_val_per_class: int = 32
    synth_noise: float = 0.25
    image_size: int = 32
    data_seed: int = 0
    augment: bool | None = None  # None: on for CIFAR, off for synth
    # model
    depth: int = 20
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64)
    head_kind: str = "gram"
    heads: int = 5
    reduced_dim: int = 32
    cardinality: int = 4
    attn_dim: int | None = None
    attn_heads: int = 4
    aggregation: str = "final"
    lam: float = -0.8
    # optimization
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    schedule: str = "step"  # step | cosine
    milestones: tuple = (150, 225)
    lr_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    eval_batch_size: int = 256
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.milestones = tuple(int(m) for m in self.milestones)
        self.validate()

    def validate(self) -> None:
        if self.dataset not in ("synth", "cifar10", "cifar100"):
            raise ConfigError(f"dataset must be synth, cifar10 or cifar100, got {self.dataset!r}")
        if self.schedule not in ("step", "cosine"):
            raise ConfigError(f"schedule must be 'step' or 'cosine', got {self.schedule!r}")
        for name in ("epochs", "batch_size", "heads", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("lr", "lr_factor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be non-negative")
        if self.limit is not None and self.limit < 1:
            raise ConfigError("limit must be positive")
        self.model_config()

    @property
    def augment_enabled(self) -> bool:
        if self.augment is None:
            return self.dataset != "synth"
        return bool(self.augment)

    def model_config(self) -> ModelConfig:
        num_classes = {"cifar10": 10, "cifar100": 100}.get(self.dataset, self.synth_classes)
        size = 32 if self.dataset != "synth" else self.image_size
        return ModelConfig(
            backbone=BackboneConfig(
                depth=self.depth, stem_channels=self.stem_channels,
                stage_channels=self.stage_channels, image_size=size,
            ),
            num_classes=num_classes, num_heads=self.heads, head_kind=self.head_kind,
            reduced_dim=self.reduced_dim, cardinality=self.cardinality, attn_dim=self.attn_dim,
            attn_heads=self.attn_heads, aggregation=self.aggregation, lam=self.lam,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(mapping) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**mapping)

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_mapping(d)


def load_config(path) -> TrainConfig:
    """Read a flat ``key: value`` YAML file into a :class:`TrainConfig`."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    mapping = yaml.safe_load(path.read_text()) or {}
    if not isinstance(mapping, dict) or any(isinstance(v, dict) for v in mapping.values()):
        raise ConfigError(f"{path}: config must be a flat key/value mapping")
    return TrainConfig.from_mapping(mapping)


def full_cifar_profile(**overrides) -> TrainConfig:
    """The CIFAR recipe: 300 epochs, lr 1e-3 decayed x0.1 at 150/225, batch 64."""
    base = dict(dataset="cifar100", depth=110, epochs=300, lr=1e-3, milestones=(150, 225), batch_size=64)
    base.update(overrides)
    return TrainConfig(**base)


def desk_profile(**overrides) -> TrainConfig:
    """Scaled-down proxy: depth 20, 5k CIFAR-10 images, 60 epochs, milestones scaled."""
    base = dict(dataset="cifar10", depth=20, limit=5000, epochs=60, milestones=(30, 45), batch_size=64)
    base.update(overrides)
    return TrainConfig(**base)


def learning_rate(config: TrainConfig, epoch: int) -> float:
    if config.schedule == "cosine":
        return 0.5 * config.lr * (1.0 + math.cos(math.pi * epoch / config.epochs))
    drops = sum(1 for m in config.milestones if epoch >= m)
    return config.lr * config.lr_factor**drops


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = params
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.buffers = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        lr = float(lr)
        for name, p in self.params.items():
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf = self.buffers[name]
            buf *= self.momentum
            buf += g
            p.data -= lr * buf

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return dict(self.buffers)

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, buf in self.buffers.items():
            if name in state:
                buf[...] = state[name]


def load_datasets(config: TrainConfig) -> tuple[Dataset, Dataset]:
    if config.dataset == "synth":
        kw = dict(dim=config.image_size, seed=config.data_seed, noise=config.synth_noise)
        train = synth_blobs(config.synth_classes, config.synth_per_class, split="train", **kw)
        val = synth_blobs(config.synth_classes, config.synth_val_per_class, split="val", **kw)
        return train.subset(config.limit), val.subset(config.val_limit)
    variant = "c10" if config.dataset == "cifar10" else "c100"
    if config.data_path is None:
        raise ConfigError(f"dataset {config.dataset} needs data_path")
    train = load_cifar(config.data_path, variant, config.limit, split="train")
    val_src = config.val_path or config.data_path
    val = load_cifar(val_src, variant, config.val_limit, split="test")
    return train, val


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < 2 and start > 0:
            continue  # batch norm needs at least two samples
        yield idx


def evaluate_model(model: EnsembleModel, dataset: Dataset, batch_size: int = 256) -> dict:
    """Eval-mode metrics: mean-head top-1, per-head top-1, losses, diagnostics."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    model.eval()
    probs: list[list[np.ndarray]] = [[] for _ in model.heads]
    ce = dec = 0.0
    with ad.no_grad():
        for start in range(0, len(dataset), batch_size):
            x = Tensor(dataset.images[start : start + batch_size])
            y = dataset.labels[start : start + batch_size]
            preds = forward_all(model, x)
            parts = total_loss(preds, y, 0.0)
            ce += parts.ce_sum.item() * len(y)
            dec += parts.dec.item() * len(y)
            for i, p in enumerate(preds.per_head_probs):
                probs[i].append(p.data)
    per_head = [np.concatenate(p) for p in probs]
    mean = per_head[0] if len(per_head) == 1 else sum(per_head) / len(per_head)
    labels = dataset.labels
    out = {
        "top1": float(np.mean(mean.argmax(axis=1) == labels)),
        "per_head_top1": [float(np.mean(p.argmax(axis=1) == labels)) for p in per_head],
        "loss_ce": ce / len(dataset),
        "loss_dec": dec / len(dataset),
        "diagnostics": None,
        "notice": None,
    }
    if model.num_heads >= 2 and len(dataset) >= 2:
        out["diagnostics"] = diagnose(VoteTable.from_probs(per_head, labels))
    else:
        out["notice"] = "diagnostics need at least two heads; omitted"
    return out


@dataclass
class RunResult:
    model: EnsembleModel
    history: list[dict] = field(default_factory=list)
    out_dir: Path | None = None
    final: dict | None = None


def _header(config: TrainConfig) -> dict:
    return {"gramhead_run": config.to_dict()}


def _optimizer_for(config: TrainConfig):
    def factory(model):
        return SGD(model.named_parameters(), config.momentum, config.weight_decay)

    return factory


def train(config: TrainConfig, resume=None, stop_after: int | None = None,
          datasets: tuple[Dataset, Dataset] | None = None, echo=None) -> RunResult:
    """Train, evaluating on the validation split after every epoch.

    ``resume`` is a checkpoint written by a previous call; training continues
    from the epoch after the one it records.  ``stop_after`` ends the run after
    that epoch index, as if interrupted.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = _header(config)
    (out / "run.json").write_text(json.dumps(header, sort_keys=True, indent=1) + "\n")
    if echo is not None:
        echo("# " + json.dumps(header, sort_keys=True))
    train_set, val_set = datasets if datasets is not None else load_datasets(config)

    if resume is not None:
        model, ck, opt = load_checkpoint(resume, _optimizer_for(config))
        state = ck["run_state"]
        start_epoch = state["epoch"] + 1
        history = state["history"]
        best = state["best_top1"]
    else:
        model = build_model(config.model_config(), seed=config.seed, dtype=np.float32)
        opt = _optimizer_for(config)(model)
        start_epoch, history, best = 0, [], -1.0

    if config.lam > 0:
        warnings.warn(f"training with lambda={config.lam} > 0 (distillation comparison mode)", stacklevel=2)
    last_epoch = config.epochs - 1 if stop_after is None else min(stop_after, config.epochs - 1)
    for epoch in range(start_epoch, last_epoch + 1):
        lr = learning_rate(config, epoch)
        rng = np.random.default_rng([config.seed, 100, epoch])
        order = rng.permutation(len(train_set))
        model.train()
        ce_acc = dec_acc = correct = seen = 0.0
        for step, idx in enumerate(_batches(len(train_set), config.batch_size, order)):
            images = train_set.images[idx]
            if config.augment_enabled:
                images = augment_batch(images, rng)
            labels = train_set.labels[idx]
            try:
                with ad.Tape() as tape, np.errstate(over="ignore", invalid="ignore"):
                    preds = forward_all(model, Tensor(images))
                    parts = _loss(preds, labels, config.lam)
            except FloatingPointError as exc:
                raise TrainingError(f"non-finite activations at epoch {epoch} step {step}: {exc}") from exc
            loss = parts.total.item()
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch} step {step}")
            opt.zero_grad()
            tape.backward(parts.total)
            opt.step(lr)
            n = len(idx)
            ce_acc += parts.ce_sum.item() * n
            dec_acc += parts.dec.item() * n
            correct += float(np.sum(preds.mean_probs.data.argmax(axis=1) == labels))
            seen += n
        history.append({
            "epoch": epoch, "split": "train", "loss_ce": ce_acc / seen,
            "loss_dec": dec_acc / seen, "top1": correct / seen,
        })
        ev = evaluate_model(model, val_set, config.eval_batch_size)
        row = {"epoch": epoch, "split": "val", "loss_ce": ev["loss_ce"],
               "loss_dec": ev["loss_dec"], "top1": ev["top1"]}
        if ev["diagnostics"] is not None:
            d = ev["diagnostics"]
            row.update(strength=d.strength, rho=d.correlation, bound=d.bound)
        history.append(row)
        emit_metrics(history, out / "metrics.csv")
        meta = {"epoch": epoch, "seed": config.seed, "lam": config.lam, "heads": config.heads,
                "train_config": config.to_dict(),
                "run_state": {"epoch": epoch, "best_top1": max(best, ev["top1"]), "history": history}}
        if ev["top1"] > best:
            best = ev["top1"]
            save_checkpoint(model, meta, out / "ckpt_best.bin", opt)
        save_checkpoint(model, meta, out / "ckpt_last.bin", opt)
        log.info("epoch %d lr %.2e train_ce %.4f val_top1 %.4f", epoch, lr, ce_acc / seen, ev["top1"])
        if echo is not None:
            echo(f"epoch {epoch} lr {lr:.3g} loss_ce {ce_acc / seen:.4f} val_top1 {ev['top1']:.4f}")
    final = evaluate_model(model, val_set, config.eval_batch_size) if history else None
    return RunResult(model, history, out, final)


def _loss(preds, labels, lam):
    if lam <= 0:
        return total_loss(preds, labels, lam)
    with warnings.catch_warnings():  # already warned once per run
        warnings.simplefilter("ignore")
        return total_loss(preds, labels, lam)


def evaluate(checkpoint, dataset: Dataset, keep_heads=None, batch_size: int = 256) -> dict:
    """Load a checkpoint, optionally prune heads, and evaluate."""
    model, _ = load_checkpoint(checkpoint)
    if keep_heads is not None:
        model = prune_heads(model, keep_heads)
    result = evaluate_model(model, dataset, batch_size)
    if result["notice"]:
        log.warning(result["notice"])
    return result


def sweep(config: TrainConfig, axis: str, values, out_path=None, echo=None) -> list[dict]:
    """Train and evaluate once per value of ``lambda`` or ``heads``."""
    if axis not in ("lambda", "heads"):
        raise ConfigError(f"sweep axis must be 'lambda' or 'heads', got {axis!r}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    datasets = load_datasets(config)
    base = Path(config.out_dir)
    rows = []
    for value in values:
        key = "lam" if axis == "lambda" else "heads"
        cast = float(value) if axis == "lambda" else int(value)
        row = {"value": cast}
        try:
            cfg = config.replace(**{key: cast, "out_dir": str(base / f"{axis}_{cast}")})
            result = train(cfg, datasets=datasets, echo=echo)
            row["top1"] = result.final["top1"]
            diag = result.final["diagnostics"]
            if diag is not None:
                row.update(strength=diag.strength, rho=diag.correlation, bound=diag.bound)
            row["status"] = "ok"
        except Exception as exc:  # a failed cell must not stop the sweep
            log.exception("sweep cell %s=%s failed", axis, value)
            row["status"] = f"failed: {exc}"
        rows.append(row)
    base.mkdir(parents=True, exist_ok=True)
    write_table(rows, SWEEP_COLUMNS, out_path or base / "sweep.csv")
    return rows


def with_overrides(config: TrainConfig, **overrides) -> TrainConfig:
    clean = {k: v for k, v in overrides.items() if v is not None}
    return config.replace(**clean) if clean else copy.deepcopy(config)
