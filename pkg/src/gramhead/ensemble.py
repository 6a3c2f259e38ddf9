"""Multi-head model assembly, prediction averaging and the training objective."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import EPS_LOG, Tensor
from .backbone import Backbone, BackboneConfig, StageAggregator, StageFeatures, aggregate_stages
from .errors import ConfigError
from .heads import HEAD_KINDS, HeadConfig, build_head

DEFAULT_LAMBDA = -0.8
DEFAULT_HEADS = 5


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_classes: int = 10
    num_heads: int = DEFAULT_HEADS
    head_kind: str = "gram"
    reduced_dim: int = 32
    cardinality: int = 4
    attn_dim: int | None = None
    attn_heads: int = 4
    aggregation: str = "final"
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        if self.num_heads < 1:
            raise ConfigError(f"num_heads must be >= 1, got {self.num_heads}")
        if self.head_kind not in HEAD_KINDS:
            raise ConfigError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if self.aggregation not in ("final", "multi"):
            raise ConfigError(f"aggregation must be 'final' or 'multi', got {self.aggregation!r}")
        self.head_config()

    def head_config(self) -> HeadConfig:
        b = self.backbone
        return HeadConfig(
            in_channels=b.stage_channels[-1],
            reduced_dim=self.reduced_dim,
            cardinality=self.cardinality,
            attn_dim=self.attn_dim,
            attn_heads=self.attn_heads,
            num_classes=self.num_classes,
            num_tokens=b.final_size**2,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["stage_channels"] = list(self.backbone.stage_channels)
        return d


class EnsembleModel:
    """Backbone plus ``h`` heads whose softmax outputs are averaged."""

    def __init__(self, backbone: Backbone, heads: list, aggregation: str = "final",
                 lam: float = DEFAULT_LAMBDA, aggregator: StageAggregator | None = None,
                 config: ModelConfig | None = None, head_ids: list[int] | None = None):
        if not heads:
            raise ConfigError("an ensemble needs at least one head")
        k = {h.config.num_classes for h in heads}
        c = {h.config.in_channels for h in heads}
        if len(k) != 1 or len(c) != 1:
            raise ConfigError("all heads must share the class count and input width")
        self.backbone = backbone
        self.heads = list(heads)
        self.aggregation = aggregation
        self.lam = lam
        self.aggregator = aggregator
        self.config = config
        # Original indices, so a pruned model still maps onto checkpoint names.
        self.head_ids = list(head_ids) if head_ids is not None else list(range(len(heads)))

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    @property
    def num_classes(self) -> int:
        return self.heads[0].config.num_classes

    def train(self) -> "EnsembleModel":
        self.backbone.training = True
        return self

    def eval(self) -> "EnsembleModel":
        self.backbone.training = False
        return self

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": v for k, v in self.backbone.params.items()}
        if self.aggregator is not None:
            out.update({f"aggregator.{k}": v for k, v in self.aggregator.params.items()})
        for i, head in zip(self.head_ids, self.heads):
            out.update({f"heads.{i}.{k}": v for k, v in head.params.items()})
        return dict(sorted(out.items()))

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.backbone.bn.items():
            out[f"backbone.{name}.running_mean"] = st.running_mean
            out[f"backbone.{name}.running_var"] = st.running_var
        return dict(sorted(out.items()))

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def features(self, images: Tensor) -> StageFeatures:
        return self.backbone.forward(images)

    def tokens(self, images: Tensor) -> Tensor:
        return aggregate_stages(self.features(images), self.aggregation, self.aggregator)

    def head_logits(self, images: Tensor) -> list[Tensor]:
        x = self.tokens(images)
        return [head.forward(x) for head in self.heads]


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> EnsembleModel:
    backbone = Backbone(config.backbone, seed=seed, dtype=dtype)
    hc = config.head_config()
    heads = [build_head(config.head_kind, hc, seed, i, dtype) for i in range(config.num_heads)]
    aggregator = StageAggregator(config.backbone, seed, dtype) if config.aggregation == "multi" else None
    return EnsembleModel(backbone, heads, config.aggregation, config.lam, aggregator, config)


@dataclass
class PredictionSet:
    """Per-head class probabilities and their mean, all N x K tensors."""

    per_head_probs: list[Tensor]
    mean_probs: Tensor

    @property
    def num_heads(self) -> int:
        return len(self.per_head_probs)

    @classmethod
    def from_probs(cls, probs: list[Tensor]) -> "PredictionSet":
        if len(probs) == 1:
            return cls(probs, probs[0])
        total = probs[0]
        for p in probs[1:]:
            total = total + p
        return cls(probs, ad.scale(total, 1.0 / len(probs)))

    @classmethod
    def from_logits(cls, logits: list[Tensor]) -> "PredictionSet":
        return cls.from_probs([ad.softmax(z, axis=-1) for z in logits])


def forward_all(model: EnsembleModel, images: Tensor) -> PredictionSet:
    """One backbone pass, one pass per head, softmax per head, mean over heads."""
    return PredictionSet.from_logits(model.head_logits(images))


def _check_labels(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be a 1-d integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels


def head_cross_entropies(preds: PredictionSet, labels) -> list[Tensor]:
    """Batch-mean cross-entropy of each head, log clamped at EPS_LOG."""
    n, k = preds.mean_probs.shape
    labels = _check_labels(labels, k)
    onehot = np.zeros((n, k), dtype=preds.mean_probs.dtype)
    onehot[np.arange(n), labels] = 1.0
    onehot = Tensor(onehot)
    return [ad.scale(ad.sum_(ad.mul(onehot, ad.log(p))), -1.0 / n) for p in preds.per_head_probs]


def ce_sum(preds: PredictionSet, labels) -> Tensor:
    """Sum over heads of the batch-mean cross-entropy."""
    terms = head_cross_entropies(preds, labels)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def decorrelation_loss(preds: PredictionSet) -> Tensor:
    """Batch mean of sum_i <f_bar, log f_bar - log f_i>, i.e. sum_i KL(f_bar || f_i).

    The mean prediction f_bar is not detached; gradients flow through it.
    """
    n = preds.mean_probs.shape[0]
    fbar = preds.mean_probs
    log_fbar = ad.log(fbar)
    total = None
    for p in preds.per_head_probs:
        term = ad.sum_(ad.mul(fbar, log_fbar - ad.log(p)))
        total = term if total is None else total + term
    return ad.scale(total, 1.0 / n)


@dataclass
class LossBreakdown:
    ce_sum: Tensor
    dec: Tensor
    total: Tensor
    per_head_ce: list[float]

    def as_floats(self) -> dict[str, float]:
        return {"ce_sum": self.ce_sum.item(), "dec": self.dec.item(), "total": self.total.item()}


def total_loss(preds: PredictionSet, labels, lam: float = DEFAULT_LAMBDA) -> LossBreakdown:
    """ce_sum + lam * dec.

    Negative ``lam`` pushes heads apart.  Positive ``lam`` pulls every head
    toward the mean, the knowledge-distillation direction; it is allowed for
    comparison runs but warned about.
    """
    if lam > 0:
        warnings.warn(
            f"lambda={lam} > 0 pulls heads together (distillation mode), not decorrelation",
            stacklevel=2,
        )
    per_head = head_cross_entropies(preds, labels)
    ce = per_head[0]
    for t in per_head[1:]:
        ce = ce + t
    dec = decorrelation_loss(preds)
    total = ce + ad.scale(dec, float(lam))
    return LossBreakdown(ce, dec, total, [t.item() for t in per_head])


def prune_heads(model: EnsembleModel, keep) -> EnsembleModel:
    """Model sharing the backbone (and its parameters) with only ``keep`` heads."""
    keep = sorted(set(int(i) for i in keep))
    if not keep:
        raise ValueError("keep must name at least one head")
    bad = [i for i in keep if not 0 <= i < model.num_heads]
    if bad:
        raise ValueError(f"head indices {bad} out of range for {model.num_heads} heads")
    return EnsembleModel(
        model.backbone,
        [model.heads[i] for i in keep],
        model.aggregation,
        model.lam,
        model.aggregator,
        model.config,
        [model.head_ids[i] for i in keep],
    )
