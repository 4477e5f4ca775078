"""First-order actor-context encoding and the higher-order relation operators.

The first-order encoder tiles each actor vector over the context grid,
concatenates channel-wise and projects with two 3x3 convs. On top of those
per-actor relation maps three operator instantiations are provided:

* non-local: per-location scaled dot-product attention across actors
  (queries/keys/values from convs), norm/relu/conv/dropout, residual;
* relation-network: two 1x1 convs over every ordered actor pair
  concatenated with a projected context value, averaged over partners;
* average: the parameter-free mean of all relation maps.

Cross-attention reuses the non-local block with queries from the current
clip and keys/values from archived bank features. All operator stacks are
the identity at init (zero-initialized output convs, dropout off).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .layers import ChannelNorm, Conv2d, Linear
from .optim import Parameter
from .tensor import Tensor


class MapKind(Enum):
    FIRST_ORDER = "first_order"
    REFINED = "refined"


@dataclass
class RelationFeatureMap:
    """Per-actor relation map of shape [d, H, W]."""

    values: np.ndarray
    actor_id: int
    kind: MapKind = MapKind.FIRST_ORDER


@dataclass
class AttentionTensor:
    """Per-location actor-to-actor weights, shape [Nq, Nkv, H, W]; rows sum
    to 1 along the key axis."""

    weights: np.ndarray

    def __post_init__(self):
        sums = self.weights.sum(axis=1)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise ValueError("attention weights must sum to 1 along the key axis")


@dataclass
class HR2OConfig:
    d: int = 32
    depth: int = 2
    dropout_p: float = 0.2
    kernel: int = 3
    variant: str = "nl"   # nl | rn | avg

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError("d must be > 0")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.variant not in ("nl", "rn", "avg"):
            raise ValueError(f"unknown operator variant {self.variant!r}")


def _as_batched(a: Tensor, x: Tensor) -> tuple[Tensor, Tensor, bool]:
    """Normalize (actors [N,C] / [B,N,C], context [C,H,W] / [B,C,H,W]) to
    batched form."""
    if a.ndim == 2 and x.ndim == 3:
        return T.reshape(a, (1,) + a.shape), T.reshape(x, (1,) + x.shape), True
    if a.ndim == 3 and x.ndim == 4:
        return a, x, False
    raise ValueError("actor/context rank mismatch")


class FirstOrderEncoder:
    """Tile-and-concat actor vectors with the context map, then two convs."""

    def __init__(self, actor_dim: int, context_dim: int, d: int,
                 rng: np.random.Generator, kernel: int = 3, name: str = "encoder"):
        self.actor_dim = actor_dim
        self.context_dim = context_dim
        self.conv1 = Conv2d(actor_dim + context_dim, d, kernel, rng, f"{name}.conv1")
        self.conv2 = Conv2d(d, d, kernel, rng, f"{name}.conv2")

    def __call__(self, actors: Tensor, context: Tensor) -> Tensor:
        a, x, squeeze = _as_batched(T.as_tensor(actors), T.as_tensor(context))
        b, n, c_a = a.shape
        _, c_x, h, w = x.shape
        if c_a != self.actor_dim or c_x != self.context_dim:
            raise ValueError("actor/context channel mismatch")
        tiled = T.broadcast_to(T.reshape(a, (b, n, c_a, 1, 1)), (b, n, c_a, h, w))
        ctx = T.broadcast_to(T.reshape(x, (b, 1, c_x, h, w)), (b, n, c_x, h, w))
        cat = T.concat([tiled, ctx], axis=2)
        flat = T.reshape(cat, (b * n, c_a + c_x, h, w))
        out = self.conv2(T.relu(self.conv1(flat)))
        d = out.shape[1]
        out = T.reshape(out, (b, n, d, h, w))
        return T.reshape(out, out.shape[1:]) if squeeze else out

    def parameters(self) -> list[Parameter]:
        return self.conv1.parameters() + self.conv2.parameters()


class NonLocalBlock:
    """One modified non-local block with per-location attention over actors.

    With `kv` given, queries come from the input maps and keys/values from
    the bank maps (cross-attention); otherwise it is self-attention. The
    output conv is zero-initialized so the block starts as the identity.
    """

    def __init__(self, d: int, rng: np.random.Generator, kernel: int = 3,
                 dropout_p: float = 0.2, kv_channels: int | None = None,
                 name: str = "block"):
        kv_c = d if kv_channels is None else kv_channels
        self.d = d
        self.dropout_p = dropout_p
        self.q_conv = Conv2d(d, d, kernel, rng, f"{name}.q")
        # one conv emits keys and values (channel-split afterwards)
        self.kv_conv = Conv2d(kv_c, 2 * d, kernel, rng, f"{name}.kv")
        self.norm = ChannelNorm(d, f"{name}.norm")
        self.out_conv = Conv2d(d, d, kernel, rng, f"{name}.out", zero_init=True)

    def _conv_maps(self, conv: Conv2d, maps: Tensor) -> Tensor:
        b, n, c, h, w = maps.shape
        out = conv(T.reshape(maps, (b * n, c, h, w)))
        return T.reshape(out, (b, n, out.shape[1], h, w))

    def __call__(self, f: Tensor, kv: Tensor | None = None, training: bool = False,
                 rng: np.random.Generator | None = None,
                 ) -> tuple[Tensor, np.ndarray]:
        squeeze = f.ndim == 4
        if squeeze:
            f = T.reshape(f, (1,) + f.shape)
        source = f if kv is None else (T.reshape(kv, (1,) + kv.shape) if kv.ndim == 4 else kv)
        if source.shape[1] < 1:
            raise ValueError("attention requires at least one key/value map")
        b, n, d, h, w = f.shape
        q = self._conv_maps(self.q_conv, f)
        kv_maps = self._conv_maps(self.kv_conv, source)
        k = kv_maps[:, :, :d]
        v = kv_maps[:, :, d:]
        if k.shape[3:] != (h, w):
            if k.shape[3:] != (1, 1):
                raise ValueError("key/value spatial size mismatch")
            m = k.shape[1]
            k = T.broadcast_to(k, (b, m, d, h, w))
            v = T.broadcast_to(v, (b, m, d, h, w))
        logits = T.mul(T.attn_scores(q, k), 1.0 / np.sqrt(self.d))
        att = T.softmax(logits, axis=2)
        mixed = T.attn_mix(att, v)
        hid = self.out_conv(T.reshape(T.relu(self.norm(mixed)), (b * n, d, h, w)))
        hid = T.reshape(hid, (b, n, d, h, w))
        if training and self.dropout_p > 0.0:
            if rng is None:
                raise ValueError("training-mode dropout needs an rng")
            hid = T.dropout(hid, self.dropout_p, training=True, rng=rng)
        out = T.add(f, hid)
        att_np = att.data[0] if squeeze else att.data
        if squeeze:
            out = T.reshape(out, out.shape[1:])
        return out, att_np

    def parameters(self) -> list[Parameter]:
        return (self.q_conv.parameters() + self.kv_conv.parameters()
                + self.norm.parameters() + self.out_conv.parameters())


class NonLocalStack:
    """`depth` non-local blocks, each with its own parameters. For
    cross-attention every block attends to the same bank maps."""

    def __init__(self, d: int, depth: int, rng: np.random.Generator,
                 kernel: int = 3, dropout_p: float = 0.2,
                 kv_channels: int | None = None, name: str = "hr2o"):
        self.blocks = [
            NonLocalBlock(d, rng, kernel=kernel, dropout_p=dropout_p,
                          kv_channels=kv_channels, name=f"{name}.{i}")
            for i in range(depth)
        ]

    def __call__(self, f: Tensor, kv: Tensor | None = None, training: bool = False,
                 rng: np.random.Generator | None = None,
                 ) -> tuple[Tensor, list[np.ndarray]]:
        atts = []
        for block in self.blocks:
            f, att = block(f, kv=kv, training=training, rng=rng)
            atts.append(att)
        return f, atts

    def parameters(self) -> list[Parameter]:
        return [p for blk in self.blocks for p in blk.parameters()]


def average_relation(f: Tensor) -> Tensor:
    """Parameter-free operator: every actor gets the mean of all relation
    maps added residually."""
    axis = 0 if f.ndim == 4 else 1
    shared = T.mean_over_axis(f, axis, keepdims=True)
    return T.add(f, shared)


class RelationPairOperator:
    """Relation-network instantiation over ordered actor pairs.

    Concatenates both tiled actor vectors with a 1x1-projected context
    value, applies two 1x1 convs (final one zero-initialized), averages
    over partners and adds residually to the first-order maps.
    """

    def __init__(self, actor_dim: int, context_dim: int, d: int,
                 rng: np.random.Generator, name: str = "rn"):
        self.actor_dim = actor_dim
        self.v_proj = Conv2d(context_dim, d, 1, rng, f"{name}.v_proj")
        self.f1 = Conv2d(2 * actor_dim + d, d, 1, rng, f"{name}.f1")
        self.f2 = Conv2d(d, d, 1, rng, f"{name}.f2", zero_init=True)

    def __call__(self, actors: Tensor, context: Tensor, f: Tensor) -> Tensor:
        a, x, squeeze = _as_batched(T.as_tensor(actors), T.as_tensor(context))
        fb = T.reshape(f, (1,) + f.shape) if f.ndim == 4 else f
        b, n, c = a.shape
        if n < 1:
            raise ValueError("relation operator requires at least one actor")
        v = self.v_proj(x)
        d, h, w = v.shape[1], v.shape[2], v.shape[3]
        a_i = T.broadcast_to(T.reshape(a, (b, n, 1, c, 1, 1)), (b, n, n, c, h, w))
        a_j = T.broadcast_to(T.reshape(a, (b, 1, n, c, 1, 1)), (b, n, n, c, h, w))
        v_b = T.broadcast_to(T.reshape(v, (b, 1, 1, d, h, w)), (b, n, n, d, h, w))
        cat = T.concat([a_i, a_j, v_b], axis=3)
        flat = T.reshape(cat, (b * n * n, 2 * c + d, h, w))
        pair = self.f2(T.relu(self.f1(flat)))
        pair = T.reshape(pair, (b, n, n, d, h, w))
        shared = T.mean_over_axis(pair, 2)
        out = T.add(fb, shared)
        return T.reshape(out, out.shape[1:]) if squeeze else out

    def parameters(self) -> list[Parameter]:
        return self.v_proj.parameters() + self.f1.parameters() + self.f2.parameters()


class ActorFirstOperator:
    """Ablation order: self-attention between projected actor vectors first
    (as 1x1 maps, where the convs degenerate to per-actor linear maps),
    then the refined vectors go through first-order encoding."""

    def __init__(self, actor_dim: int, context_dim: int, d: int,
                 rng: np.random.Generator, depth: int = 2, kernel: int = 3,
                 dropout_p: float = 0.2, name: str = "actor_first"):
        self.proj = Linear(actor_dim, d, rng, f"{name}.proj")
        self.stack = NonLocalStack(d, depth, rng, kernel=kernel,
                                   dropout_p=dropout_p, name=f"{name}.stack")
        self.encoder = FirstOrderEncoder(d, context_dim, d, rng, kernel=kernel,
                                         name=f"{name}.encoder")

    def __call__(self, actors: Tensor, context: Tensor, training: bool = False,
                 rng: np.random.Generator | None = None,
                 ) -> tuple[Tensor, list[np.ndarray]]:
        a, x, squeeze = _as_batched(T.as_tensor(actors), T.as_tensor(context))
        b, n, _ = a.shape
        av = self.proj(a)
        d = av.shape[-1]
        maps = T.reshape(av, (b, n, d, 1, 1))
        refined, atts = self.stack(maps, training=training, rng=rng)
        vecs = T.reshape(refined, (b, n, d))
        out = self.encoder(vecs, x)
        if squeeze:
            return T.reshape(out, out.shape[1:]), [a[0] for a in atts]
        return out, atts

    def parameters(self) -> list[Parameter]:
        return self.proj.parameters() + self.stack.parameters() + self.encoder.parameters()


def maps_to_list(values: np.ndarray, kind: MapKind = MapKind.FIRST_ORDER,
                 ) -> list[RelationFeatureMap]:
    """Split a stacked [N,d,H,W] array into per-actor map records."""
    return [RelationFeatureMap(values=values[i].copy(), actor_id=i, kind=kind)
            for i in range(values.shape[0])]
