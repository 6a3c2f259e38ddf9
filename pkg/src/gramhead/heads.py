"""Lightweight head classifiers attached to backbone tokens.

:class:`GramHead` builds its class token from grouped second-order statistics
of the projected features and refines it with a single class-attention layer.
:class:`TokenHead` (learned class token) and :class:`GapFcHead` (global
average pool + linear) are ablation baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError

HEAD_KINDS = ("gram", "token", "gap")


@dataclass
class HeadConfig:
    in_channels: int = 64
    reduced_dim: int = 32
    cardinality: int = 4
    attn_dim: int | None = None
    attn_heads: int = 4
    num_classes: int = 10
    # Expected token count; only used to scale the W_g initialization.
    num_tokens: int = 64

    def __post_init__(self):
        if self.attn_dim is None:
            self.attn_dim = self.reduced_dim
        self.validate()

    @property
    def group_width(self) -> int:
        return self.reduced_dim // self.cardinality

    @property
    def gram_length(self) -> int:
        return self.cardinality * self.group_width**2

    def validate(self) -> None:
        if self.cardinality < 1 or self.reduced_dim % self.cardinality:
            raise ConfigError(
                f"reduced_dim {self.reduced_dim} is not divisible by cardinality {self.cardinality}"
            )
        if self.attn_dim % self.attn_heads:
            raise ConfigError(f"attn_dim {self.attn_dim} is not divisible by attn_heads {self.attn_heads}")
        for name in ("in_channels", "reduced_dim", "attn_dim", "attn_heads", "num_classes", "num_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


def project_features(x: Tensor, w_c: Tensor) -> Tensor:
    """N x HW x C -> N x HW x C~ via the per-instance product X W_c."""
    if x.shape[-1] != w_c.shape[0]:
        raise DimensionError(f"project_features: features {x.shape} vs W_c {w_c.shape}")
    return ad.matmul(x, w_c)


def grouped_gramian(v: Tensor, cardinality: int) -> Tensor:
    """Group-wise Gramians of ``v`` (N x HW x C~), vectorized and concatenated.

    Channels split into ``cardinality`` contiguous groups of width g; each
    group contributes its g x g matrix V_g^T V_g flattened row-major, in group
    order, for an output of shape N x (cardinality * g * g).
    """
    n, hw, c = v.shape
    if cardinality < 1 or c % cardinality:
        raise ConfigError(f"channel count {c} is not divisible by cardinality {cardinality}")
    g = c // cardinality
    grouped = ad.transpose(v.reshape(n, hw, cardinality, g), (0, 2, 1, 3))  # N x G x HW x g
    gram = ad.matmul(ad.swapaxes(grouped, -1, -2), grouped)  # N x G x g x g
    return ad.vectorize(gram, batch_dims=1)


def _init(rng, shape, fan_in, gain=1.0):
    return rng.standard_normal(shape) * (gain / np.sqrt(fan_in))


class _AttentionHead:
    """Shared machinery: input projection, class attention, norm, classifier."""

    def __init__(self, config: HeadConfig, rng: np.random.Generator, dtype):
        self.config = config
        d, c = config.attn_dim, config.in_channels
        p: dict[str, Tensor] = {}
        if c != d:
            p["w_in"] = _init(rng, (c, d), c)
        for name in ("w_q", "w_k", "w_v", "w_o"):
            p[name] = _init(rng, (d, d), d)
        p["ln.gamma"] = np.ones(d)
        p["ln.beta"] = np.zeros(d)
        p["w_cls"] = _init(rng, (d, config.num_classes), d, gain=0.1)
        p["b_cls"] = np.zeros(config.num_classes)
        self.params = {k: ad.parameter(v, dtype=dtype) for k, v in p.items()}

    def class_token(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def embed(self, x: Tensor) -> Tensor:
        """Class embedding Y (N x D_attn), i.e. the pre-classifier feature."""
        token = self.class_token(x)
        return class_attention(token, self.input_tokens(x), self)

    def input_tokens(self, x: Tensor) -> Tensor:
        if "w_in" in self.params:
            return ad.matmul(x, self.params["w_in"])
        return x

    def classify(self, y: Tensor) -> Tensor:
        return ad.matmul(y, self.params["w_cls"]) + self.params["b_cls"]

    def forward(self, x: Tensor) -> Tensor:
        return self.classify(self.embed(x))

    __call__ = forward

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())


def class_attention(token: Tensor, x: Tensor, head) -> Tensor:
    """Single class-attention layer with the token as the only query.

    ``token`` is N x D, ``x`` is N x HW x D.  Keys and values run over the
    HW feature tokens followed by the class token itself.  Returns
    LayerNorm(token + W_o . attended).
    """
    n, d = token.shape
    if x.ndim != 3 or x.shape[0] != n or x.shape[2] != d:
        raise DimensionError(f"class_attention: token {token.shape} vs features {x.shape}")
    p = head.params
    a = head.config.attn_heads
    dh = d // a
    seq = ad.concat([x, token.reshape(n, 1, d)], axis=1)  # N x (HW+1) x D
    t = seq.shape[1]
    q = ad.matmul(token, p["w_q"]).reshape(n, a, 1, dh)
    k = ad.transpose(ad.matmul(seq, p["w_k"]).reshape(n, t, a, dh), (0, 2, 3, 1))  # N x A x dh x T
    v = ad.transpose(ad.matmul(seq, p["w_v"]).reshape(n, t, a, dh), (0, 2, 1, 3))  # N x A x T x dh
    scores = ad.scale(ad.matmul(q, k), 1.0 / np.sqrt(dh))  # N x A x 1 x T
    weights = ad.softmax(scores, axis=-1)
    attended = ad.matmul(weights, v).reshape(n, d)
    out = token + ad.matmul(attended, p["w_o"])
    return ad.layernorm(out, p["ln.gamma"], p["ln.beta"])


def attention_weights(token: Tensor, x: Tensor, head) -> np.ndarray:
    """Softmax weights (N x A x HW+1) that :func:`class_attention` applies."""
    with ad.no_grad():
        n, d = token.shape
        a = head.config.attn_heads
        dh = d // a
        seq = np.concatenate([x.data, token.data[:, None, :]], axis=1)
        q = (token.data @ head.params["w_q"].data).reshape(n, a, 1, dh)
        k = (seq @ head.params["w_k"].data).reshape(n, -1, a, dh).transpose(0, 2, 3, 1)
        s = (q @ k)[:, :, 0, :] / np.sqrt(dh)
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)


class GramHead(_AttentionHead):
    """Gramian class token -> one class-attention layer -> linear classifier."""

    def __init__(self, config: HeadConfig, seed: int = 0, index: int = 0, dtype=np.float32):
        rng = np.random.default_rng([seed, 1, index])
        super().__init__(config, rng, dtype)
        c, r, d = config.in_channels, config.reduced_dim, config.attn_dim
        self.params["w_c"] = ad.parameter(_init(rng, (c, r), c), dtype=dtype)
        # Gram entries grow linearly with the token count; fold that into the
        # initial scale so the class token starts at unit magnitude.
        w_g = _init(rng, (config.gram_length, d), config.gram_length) / config.num_tokens
        self.params["w_g"] = ad.parameter(w_g, dtype=dtype)

    def class_token(self, x: Tensor) -> Tensor:
        return gram_token(x, self)


def gram_token(x: Tensor, head: GramHead) -> Tensor:
    """Vec(V^T V) W_g with V = X W_c, computed group-wise; N x D_attn."""
    v = project_features(x, head.params["w_c"])
    return ad.matmul(grouped_gramian(v, head.config.cardinality), head.params["w_g"])


class TokenHead(_AttentionHead):
    """Learned (input-independent) class token; CaiT-style baseline."""

    def __init__(self, config: HeadConfig, seed: int = 0, index: int = 0, dtype=np.float32):
        rng = np.random.default_rng([seed, 1, index])
        super().__init__(config, rng, dtype)
        self.params["token"] = ad.parameter(rng.standard_normal(config.attn_dim) * 0.02, dtype=dtype)

    def class_token(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        ones = Tensor(np.ones((n, 1), dtype=x.dtype))
        return ad.matmul(ones, self.params["token"].reshape(1, -1))


class GapFcHead:
    """Global average pooling over tokens followed by a linear classifier."""

    def __init__(self, config: HeadConfig, seed: int = 0, index: int = 0, dtype=np.float32):
        rng = np.random.default_rng([seed, 1, index])
        self.config = config
        c = config.in_channels
        self.params = {
            "w_cls": ad.parameter(_init(rng, (c, config.num_classes), c, gain=0.1), dtype=dtype),
            "b_cls": ad.parameter(np.zeros(config.num_classes), dtype=dtype),
        }

    def embed(self, x: Tensor) -> Tensor:
        return ad.mean(x, axis=1)

    def classify(self, y: Tensor) -> Tensor:
        return ad.matmul(y, self.params["w_cls"]) + self.params["b_cls"]

    def forward(self, x: Tensor) -> Tensor:
        return self.classify(self.embed(x))

    __call__ = forward

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())


def head_forward(x: Tensor, head) -> Tensor:
    """Unnormalized logits N x K."""
    return head.forward(x)


def build_head(kind: str, config: HeadConfig, seed: int = 0, index: int = 0, dtype=np.float32):
    if kind == "gram":
        return GramHead(config, seed, index, dtype)
    if kind == "token":
        return TokenHead(config, seed, index, dtype)
    if kind == "gap":
        return GapFcHead(config, seed, index, dtype)
    raise ConfigError(f"head kind must be one of {HEAD_KINDS}, got {kind!r}")
