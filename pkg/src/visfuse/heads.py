"""Integrated scoring heads that add the fused visual signal to base scores.

Both heads are additive on top of the text-only model, so zeroing the visual
pathway reproduces base behavior exactly: the entailment head scores
phi_v(r1 * r2) + phi_t(r_t), and the reader head scores
phi_r(r_v) . r_qc + p_t.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .fusion import FusionParams, attend, attend_late_fusion
from .imagebase import VisualFeatureSet


@dataclass
class ReluNet:
    """One-hidden-layer network: w2 @ relu(w1 @ x + b1) + b2."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @classmethod
    def create(cls, prefix: str, in_dim: int, hidden: int, out_dim: int,
               rng: np.random.Generator) -> "ReluNet":
        return cls(
            w1=Parameter(f"{prefix}w1", ad.glorot(rng, hidden, in_dim)),
            b1=Parameter(f"{prefix}b1", np.zeros(hidden)),
            w2=Parameter(f"{prefix}w2", ad.glorot(rng, out_dim, hidden)),
            b2=Parameter(f"{prefix}b2", np.zeros(out_dim)),
        )

    def apply(self, x: Tensor, tape: "Tape | None" = None) -> Tensor:
        h = ad.relu(ad.linear(x, ad.use(self.w1, tape), ad.use(self.b1, tape)))
        return ad.linear(h, ad.use(self.w2, tape), ad.use(self.b2, tape))

    def zero_output(self) -> None:
        """Silence the net: output layer zeroed, hidden layer left trainable."""
        self.w2.data[:] = 0.0
        self.b2.data[:] = 0.0

    def params(self) -> list[Parameter]:
        return [self.w1, self.b1, self.w2, self.b2]


@dataclass
class NLIHeadParams:
    """phi_v consumes the fused-feature hadamard product; phi_t the text rep."""

    phi_v: ReluNet
    phi_t: ReluNet

    @classmethod
    def create(cls, feat_dim: int, text_dim: int, hidden: int = 64, seed: int = 0,
               prefix: str = "nli_head.") -> "NLIHeadParams":
        rng = np.random.default_rng(seed)
        return cls(
            phi_v=ReluNet.create(f"{prefix}phi_v.", feat_dim, hidden, 3, rng),
            phi_t=ReluNet.create(f"{prefix}phi_t.", text_dim, hidden, 3, rng),
        )

    def params(self) -> list[Parameter]:
        return self.phi_v.params() + self.phi_t.params()


@dataclass
class RCHeadParams:
    """phi_r maps the fused passage feature into the question-choice space."""

    phi_r: ReluNet

    @classmethod
    def create(cls, feat_dim: int, qc_dim: int, hidden: int = 64, seed: int = 0,
               prefix: str = "rc_head.") -> "RCHeadParams":
        rng = np.random.default_rng(seed)
        return cls(phi_r=ReluNet.create(f"{prefix}phi_r.", feat_dim, hidden, qc_dim, rng))

    def params(self) -> list[Parameter]:
        return self.phi_r.params()


def init_from_classifier(net: ReluNet, w_cls: np.ndarray, b_cls: np.ndarray) -> None:
    """Make a ReLU net compute exactly w_cls @ x + b_cls at initialization.

    relu(z) - relu(-z) = z, so paired hidden rows (+w, -w) with output
    columns (+1, -1) reproduce the linear map; spare hidden units keep their
    random first layer but get zero output weight, leaving them trainable
    without disturbing the initial scores.
    """
    out_dim, in_dim = w_cls.shape
    hidden = net.w1.data.shape[0]
    if net.w1.data.shape[1] != in_dim or net.w2.data.shape[0] != out_dim:
        raise ValueError("classifier shape does not fit this head")
    if hidden < 2 * out_dim:
        raise ValueError(f"need at least {2 * out_dim} hidden units, have {hidden}")
    net.w1.data[:out_dim] = w_cls
    net.w1.data[out_dim:2 * out_dim] = -w_cls
    net.b1.data[:] = 0.0
    net.w2.data[:] = 0.0
    net.w2.data[:, :out_dim] = np.eye(out_dim)
    net.w2.data[:, out_dim:2 * out_dim] = -np.eye(out_dim)
    net.b2.data[:] = b_cls


def _feature_rows(vf: VisualFeatureSet) -> np.ndarray:
    """Object rows plus the global row: the N = K+1 fusion candidates."""
    return np.vstack([vf.objects, vf.global_feat[None, :]])


def nli_score(r_t: Tensor, vf1: "VisualFeatureSet | None", vf2: "VisualFeatureSet | None",
              fusion: FusionParams, head: NLIHeadParams,
              tape: "Tape | None" = None, dropout: float = 0.0,
              train: bool = False,
              rng: "np.random.Generator | None" = None) -> Tensor:
    """Three class scores for one premise/hypothesis pair."""
    if vf1 is None or vf2 is None:
        raise ValueError("missing retrieval: both sentences need visual features")
    _, r1 = attend(fusion, r_t, _feature_rows(vf1), tape, dropout, train, rng)
    _, r2 = attend(fusion, r_t, _feature_rows(vf2), tape, dropout, train, rng)
    fused = head.phi_v.apply(ad.hadamard(r1, r2), tape)
    return ad.add(fused, head.phi_t.apply(r_t, tape))


def rc_score(r_p: Tensor, r_qc: Tensor, p_t: Tensor, sentence_globals,
             fusion: FusionParams, head: RCHeadParams,
             tape: "Tape | None" = None, dropout: float = 0.0,
             train: bool = False,
             rng: "np.random.Generator | None" = None) -> Tensor:
    """Scalar choice score: fused passage feature projected onto r_qc, plus
    the base model's text-only logit."""
    feats = np.asarray(sentence_globals, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError("need at least one sentence feature row")
    _, r_v = attend_late_fusion(fusion, r_p, feats, tape, dropout, train, rng)
    return ad.add(ad.dot(head.phi_r.apply(r_v, tape), r_qc), p_t)


_SENT_RE = re.compile(r"[^.!?]*[.!?]+(?:\s+|$)|[^.!?]+$")


def split_sentences(passage: str) -> list[str]:
    """Break on sentence terminators followed by whitespace or end of text."""
    return [m.group(0).strip() for m in _SENT_RE.finditer(passage) if m.group(0).strip()]
