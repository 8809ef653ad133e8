"""Joint-embedding encoders: a bi-GRU sentence encoder and a linear image head.

Both encoders project into the same J-dimensional unit sphere so that dot
products are cosine similarities and retrieval reduces to a max inner product.
Each public encode function has a per-item form (vectors, easy to inspect) and
a batched form used by the trainers; both run the same parameters and agree to
float64 round-off.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor

PAD_ID = 0
UNK_ID = 1
SEP_TOKEN = "<sep>"

_TOKEN_RE = re.compile(r"<[a-z-]+>|[a-z]+")


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens; punctuation is dropped, <bracketed> markers kept."""
    return _TOKEN_RE.findall(text.lower())


class TokenVocab:
    """Token table with reserved ids: 0 = padding, 1 = unknown.

    The file format is one token per line; a token on 0-based line k gets
    id k + 2.
    """

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._ids = {tok: i + 2 for i, tok in enumerate(self.tokens)}

    @property
    def size(self) -> int:
        """Total id space including the two reserved slots."""
        return len(self.tokens) + 2

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._ids.get(t, UNK_ID) for t in tokens]

    def encode_text(self, text: str) -> list[int]:
        return self.encode(tokenize(text))

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK_ID)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "TokenVocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.strip()])


@dataclass
class GRUParams:
    """One direction of a gated recurrent unit."""

    w_z: Parameter
    u_z: Parameter
    b_z: Parameter
    w_r: Parameter
    u_r: Parameter
    b_r: Parameter
    w_h: Parameter
    u_h: Parameter
    b_h: Parameter

    @classmethod
    def create(cls, prefix: str, in_dim: int, hidden: int,
               rng: np.random.Generator) -> "GRUParams":
        def gate(tag):
            return (Parameter(f"{prefix}w_{tag}", ad.glorot(rng, hidden, in_dim)),
                    Parameter(f"{prefix}u_{tag}", ad.glorot(rng, hidden, hidden)),
                    Parameter(f"{prefix}b_{tag}", np.zeros(hidden)))
        self = cls(*gate("z"), *gate("r"), *gate("h"))
        return self

    @property
    def hidden(self) -> int:
        return self.b_z.data.shape[0]

    def params(self) -> list[Parameter]:
        return [self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r,
                self.w_h, self.u_h, self.b_h]


def gru_cell(p: GRUParams, x: Tensor, h: Tensor, tape: "Tape | None" = None) -> Tensor:
    """One GRU step. x is (E,) with h (hidden,), or batched (B,E) with (B,hidden).

        z = sigmoid(W_z x + U_z h + b_z)
        r = sigmoid(W_r x + U_r h + b_r)
        h~ = tanh(W_h x + U_h (r * h) + b_h)
        h' = (1 - z) * h + z * h~
    """
    wz, uz, bz = ad.use(p.w_z, tape), ad.use(p.u_z, tape), ad.use(p.b_z, tape)
    wr, ur, br = ad.use(p.w_r, tape), ad.use(p.u_r, tape), ad.use(p.b_r, tape)
    wh, uh, bh = ad.use(p.w_h, tape), ad.use(p.u_h, tape), ad.use(p.b_h, tape)
    z = ad.sigmoid(ad.add(ad.linear(x, wz, bz), ad.linear(h, uz)))
    r = ad.sigmoid(ad.add(ad.linear(x, wr, br), ad.linear(h, ur)))
    h_tilde = ad.tanh(ad.add(ad.linear(x, wh, bh), ad.linear(ad.hadamard(r, h), uh)))
    one_minus_z = ad.add_scalar(ad.scale(z, -1.0), 1.0)
    return ad.add(ad.hadamard(one_minus_z, h), ad.hadamard(z, h_tilde))


def gru_run(p: GRUParams, xs: Sequence[Tensor], tape: "Tape | None" = None,
            collect: bool = False):
    """Run a GRU over a token sequence from a zero initial state.

    Returns the final hidden state, or the list of all step states when
    collect is set.
    """
    h = ad.constant(np.zeros(p.hidden))
    states = []
    for x in xs:
        h = gru_cell(p, x, h, tape)
        if collect:
            states.append(h)
    return states if collect else h


@dataclass
class TextEncoderParams:
    """Bi-GRU over token embeddings, projected to the joint space."""

    embed: Parameter
    fwd: GRUParams
    bwd: GRUParams
    proj: Parameter

    @classmethod
    def create(cls, vocab_size: int, embed_dim: int = 32, hidden: int = 64,
               joint_dim: int = 64, seed: int = 0,
               prefix: str = "retrieval.text.") -> "TextEncoderParams":
        rng = np.random.default_rng(seed)
        return cls(
            embed=Parameter(f"{prefix}embed", rng.normal(0.0, 0.1, (vocab_size, embed_dim))),
            fwd=GRUParams.create(f"{prefix}fwd.", embed_dim, hidden, rng),
            bwd=GRUParams.create(f"{prefix}bwd.", embed_dim, hidden, rng),
            proj=Parameter(f"{prefix}proj", ad.glorot(rng, joint_dim, 2 * hidden)),
        )

    @property
    def joint_dim(self) -> int:
        return self.proj.data.shape[0]

    def params(self) -> list[Parameter]:
        return [self.embed, *self.fwd.params(), *self.bwd.params(), self.proj]


def encode_text(p: TextEncoderParams, token_ids: Sequence[int],
                tape: "Tape | None" = None) -> Tensor:
    """Encode one sentence to a unit vector in the joint space."""
    if len(token_ids) == 0:
        raise ValueError("empty sentence")
    emb = ad.use(p.embed, tape)
    xs = [ad.take_row(emb, i) for i in token_ids]
    h_fwd = gru_run(p.fwd, xs, tape)
    h_bwd = gru_run(p.bwd, xs[::-1], tape)
    state = ad.concat([h_fwd, h_bwd])
    return ad.l2_normalize(ad.matmul(ad.use(p.proj, tape), state))


def _padded_ids(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lens = np.array([len(s) for s in seqs], dtype=np.intp)
    if np.any(lens == 0):
        raise ValueError("empty sentence")
    ids = np.full((len(seqs), int(lens.max())), PAD_ID, dtype=np.intp)
    for b, s in enumerate(seqs):
        ids[b, : len(s)] = s
    return ids, lens


def gru_run_batch(p: GRUParams, emb: Tensor, ids: np.ndarray, lens: np.ndarray,
                  tape: "Tape | None" = None, collect: bool = False):
    """Run one GRU direction over right-padded id rows.

    Rows whose sentence has ended keep their state frozen, so after the last
    step each row holds its own final state regardless of length.
    """
    batch, t_max = ids.shape
    h = ad.constant(np.zeros((batch, p.hidden)))
    states = []
    for t in range(t_max):
        x_t = ad.take_rows(emb, ids[:, t])
        h_new = gru_cell(p, x_t, h, tape)
        alive = (lens > t).astype(np.float64)
        if alive.all():
            h = h_new
        else:
            keep = ad.constant(alive)
            hold = ad.constant(1.0 - alive)
            h = ad.add(ad.mul_colvec(h_new, keep), ad.mul_colvec(h, hold))
        if collect:
            states.append(h)
    return states if collect else h


def encode_text_batch(p: TextEncoderParams, seqs: Sequence[Sequence[int]],
                      tape: "Tape | None" = None) -> Tensor:
    """Encode sentences together; row b equals encode_text(seqs[b]) to round-off."""
    ids, lens = _padded_ids(seqs)
    emb = ad.use(p.embed, tape)
    h_fwd = gru_run_batch(p.fwd, emb, ids, lens, tape)
    ids_rev = np.full_like(ids, PAD_ID)
    for b in range(ids.shape[0]):
        n = int(lens[b])
        ids_rev[b, :n] = ids[b, :n][::-1]
    h_bwd = gru_run_batch(p.bwd, emb, ids_rev, lens, tape)
    state = ad.concat_cols([h_fwd, h_bwd])
    return ad.l2_normalize(ad.linear(state, ad.use(p.proj, tape)))


@dataclass
class ImageEncoderParams:
    """Linear projection of raw visual features into the joint space."""

    w: Parameter
    b: Parameter

    @classmethod
    def create(cls, feat_dim: int = 32, joint_dim: int = 64, seed: int = 0,
               prefix: str = "retrieval.image.") -> "ImageEncoderParams":
        rng = np.random.default_rng(seed)
        return cls(
            w=Parameter(f"{prefix}w", ad.glorot(rng, joint_dim, feat_dim)),
            b=Parameter(f"{prefix}b", np.zeros(joint_dim)),
        )

    @property
    def feat_dim(self) -> int:
        return self.w.data.shape[1]

    @property
    def joint_dim(self) -> int:
        return self.w.data.shape[0]

    def params(self) -> list[Parameter]:
        return [self.w, self.b]


def encode_image(p: ImageEncoderParams, raw, tape: "Tape | None" = None) -> Tensor:
    """Project one raw feature vector (or a batch of rows) to the unit sphere."""
    x = raw if isinstance(raw, Tensor) else ad.constant(raw)
    return ad.l2_normalize(ad.linear(x, ad.use(p.w, tape), ad.use(p.b, tape)))
