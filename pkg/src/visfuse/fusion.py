"""Gated attention over retrieved visual features.

Each candidate feature v_i is scored against the text representation r_t:

    logit_i = s . (Q(v_i) * P(r_t))        (elementwise product)
    alpha   = softmax(logits)
    r_vta   = sum_i alpha_i * v_i          (raw feature space)

Q and P are one-hidden-layer networks with weight-normalized linear layers and
a ReLU between them; s is a bias-free linear score. The attended vector r_vta
stays in the raw feature space: attention only reweights stored features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor


@dataclass
class WeightNormLayer:
    """g * v / ||v|| rows applied as a linear map, plus bias."""

    v: Parameter
    g: Parameter
    b: Parameter

    @classmethod
    def create(cls, prefix: str, out_dim: int, in_dim: int,
               rng: np.random.Generator) -> "WeightNormLayer":
        return cls(
            v=Parameter(f"{prefix}v", ad.glorot(rng, out_dim, in_dim)),
            g=Parameter(f"{prefix}g", np.ones(out_dim)),
            b=Parameter(f"{prefix}b", np.zeros(out_dim)),
        )

    def apply(self, x: Tensor, tape: "Tape | None" = None) -> Tensor:
        return ad.weight_norm_linear(x, ad.use(self.v, tape), ad.use(self.g, tape),
                                     ad.use(self.b, tape))

    def params(self) -> list[Parameter]:
        return [self.v, self.g, self.b]


@dataclass
class GateNet:
    """One hidden weight-norm layer, ReLU, then a weight-norm output layer."""

    l1: WeightNormLayer
    l2: WeightNormLayer

    @classmethod
    def create(cls, prefix: str, in_dim: int, hidden: int, out_dim: int,
               rng: np.random.Generator) -> "GateNet":
        return cls(
            l1=WeightNormLayer.create(f"{prefix}l1.", hidden, in_dim, rng),
            l2=WeightNormLayer.create(f"{prefix}l2.", out_dim, hidden, rng),
        )

    def apply(self, x: Tensor, tape: "Tape | None" = None, dropout: float = 0.0,
              train: bool = False, rng: "np.random.Generator | None" = None) -> Tensor:
        h = ad.relu(self.l1.apply(x, tape))
        h = ad.dropout(h, dropout, train, rng)
        return self.l2.apply(h, tape)

    def params(self) -> list[Parameter]:
        return [*self.l1.params(), *self.l2.params()]


@dataclass
class FusionParams:
    """Q (visual gate), P (text gate), and the score vector s."""

    q: GateNet
    p: GateNet
    s: Parameter

    @classmethod
    def create(cls, feat_dim: int, text_dim: int, hidden: int = 64, seed: int = 0,
               prefix: str = "fusion.") -> "FusionParams":
        rng = np.random.default_rng(seed)
        return cls(
            q=GateNet.create(f"{prefix}q.", feat_dim, hidden, hidden, rng),
            p=GateNet.create(f"{prefix}p.", text_dim, hidden, hidden, rng),
            s=Parameter(f"{prefix}s", rng.normal(0.0, 1.0 / np.sqrt(hidden), hidden)),
        )

    @property
    def feat_dim(self) -> int:
        return self.q.l1.v.data.shape[1]

    @property
    def text_dim(self) -> int:
        return self.p.l1.v.data.shape[1]

    def params(self) -> list[Parameter]:
        return [*self.q.params(), *self.p.params(), self.s]


def attend(fp: FusionParams, r_t: Tensor, visual_feats, tape: "Tape | None" = None,
           dropout: float = 0.0, train: bool = False,
           rng: "np.random.Generator | None" = None) -> tuple[Tensor, Tensor]:
    """Weight N candidate features against r_t; returns (alpha, r_vta).

    visual_feats is an (N, feat_dim) array of raw stored features; they enter
    the graph as constants (gradients flow through the gates and r_t only).
    """
    feats = np.asarray(getattr(visual_feats, "data", visual_feats), dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError(f"expected (N, feat) visual features, got shape {feats.shape}")
    if feats.shape[1] != fp.feat_dim:
        raise ValueError(
            f"feature width {feats.shape[1]} does not match fusion input {fp.feat_dim}"
        )
    v = ad.constant(feats)
    q = fp.q.apply(v, tape, dropout, train, rng)          # (N, hidden)
    p = fp.p.apply(r_t, tape, dropout, train, rng)        # (hidden,)
    gated = ad.mul_rowvec(q, p)                           # row i = Q(v_i) * P(r_t)
    logits = ad.matmul(gated, ad.use(fp.s, tape))         # (N,)
    alpha = ad.softmax(logits)
    r_vta = ad.matmul(alpha, v)                           # sum_i alpha_i v_i
    return alpha, r_vta


def attend_late_fusion(fp: FusionParams, r_t: Tensor, sentence_globals,
                       tape: "Tape | None" = None, dropout: float = 0.0,
                       train: bool = False,
                       rng: "np.random.Generator | None" = None) -> tuple[Tensor, Tensor]:
    """Attention over per-sentence global features (one retrieval per sentence).

    Same scoring as attend; the candidate set is the stack of each passage
    sentence's retrieved global feature rather than one image's objects.
    """
    return attend(fp, r_t, sentence_globals, tape, dropout, train, rng)
