"""Text-only base models for the two language tasks.

These play the role of pretrained NLU backbones: a sentence-pair classifier
for entailment (bi-GRU over the pair joined by a separator token) and a
multiple-choice reader (passage GRU with bilinear question attention). Both
are trained on text alone, then handed to the integration stage, which treats
them as frozen starting points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Parameter, Tape, Tensor, backward
from .encoders import GRUParams, TokenVocab, _padded_ids, gru_run_batch


def softmax_xent(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean cross-entropy of row-wise class logits against integer labels."""
    n = logits.data.shape[0]
    lse = ad.log_sum_exp(logits)
    picked = ad.pick_per_row(logits, list(labels))
    return ad.scale(ad.sum_all(ad.sub(lse, picked)), 1.0 / n)


def _reverse_rows(ids: np.ndarray, lens: np.ndarray, pad: int) -> np.ndarray:
    out = np.full_like(ids, pad)
    for b in range(ids.shape[0]):
        n = int(lens[b])
        out[b, :n] = ids[b, :n][::-1]
    return out


def _bi_encode_batch(fwd: GRUParams, bwd: GRUParams, emb: Tensor,
                     seqs: Sequence[Sequence[int]], tape: "Tape | None") -> Tensor:
    """Final forward and backward GRU states, concatenated per row."""
    from .encoders import PAD_ID
    ids, lens = _padded_ids(seqs)
    h_fwd = gru_run_batch(fwd, emb, ids, lens, tape)
    h_bwd = gru_run_batch(bwd, emb, _reverse_rows(ids, lens, PAD_ID), lens, tape)
    return ad.concat_cols([h_fwd, h_bwd])


def _stabilize_gru(gp: GRUParams, rng: np.random.Generator) -> GRUParams:
    """Memory-friendly init: the comparison tasks here need token identities
    carried across the whole sequence, so start the write gate mostly closed
    and keep recurrence norm-preserving."""
    for u in (gp.u_z, gp.u_r, gp.u_h):
        q, _ = np.linalg.qr(rng.normal(size=u.data.shape))
        u.data[:] = q
    gp.b_z.data[:] = -1.0
    return gp


# ---------------------------------------------------------------------------
# sentence-pair entailment model


@dataclass
class NLIBaseModel:
    """Pair encoder over "s1 <sep> s2" with a 3-class linear head."""

    embed: Parameter
    fwd: GRUParams
    bwd: GRUParams
    w_cls: Parameter
    b_cls: Parameter
    sep_id: int
    dev_accuracy: float = 0.0

    @classmethod
    def create(cls, vocab_size: int, sep_id: int, embed_dim: int = 32,
               hidden: int = 64, seed: int = 0,
               prefix: str = "nli_base.") -> "NLIBaseModel":
        if hidden % 2:
            raise ValueError("hidden size must be even for the two GRU directions")
        rng = np.random.default_rng(seed)
        return cls(
            embed=Parameter(f"{prefix}embed", rng.normal(0.0, 0.1, (vocab_size, embed_dim))),
            fwd=_stabilize_gru(GRUParams.create(f"{prefix}fwd.", embed_dim, hidden // 2, rng), rng),
            bwd=_stabilize_gru(GRUParams.create(f"{prefix}bwd.", embed_dim, hidden // 2, rng), rng),
            w_cls=Parameter(f"{prefix}cls_w", ad.glorot(rng, 3, hidden)),
            b_cls=Parameter(f"{prefix}cls_b", np.zeros(3)),
            sep_id=sep_id,
        )

    @property
    def hidden(self) -> int:
        return self.w_cls.data.shape[1]

    def params(self) -> list[Parameter]:
        return [self.embed, *self.fwd.params(), *self.bwd.params(),
                self.w_cls, self.b_cls]


def _pair_ids(model: NLIBaseModel, s1: Sequence[int], s2: Sequence[int]) -> list[int]:
    if len(s1) == 0 or len(s2) == 0:
        raise ValueError("empty sentence")
    return list(s1) + [model.sep_id] + list(s2)


def encode_pair_batch(model: NLIBaseModel, pairs: Sequence[tuple],
                      tape: "Tape | None" = None, train: bool = False,
                      dropout: float = 0.0,
                      rng: "np.random.Generator | None" = None) -> tuple[Tensor, Tensor]:
    """(r_t rows, class logit rows) for a batch of (s1 ids, s2 ids) pairs."""
    seqs = [_pair_ids(model, a, b) for a, b in pairs]
    ids, lens = _padded_ids(seqs)
    emb = ad.use(model.embed, tape)
    from .encoders import PAD_ID
    h_fwd = gru_run_batch(model.fwd, emb, ids, lens, tape)
    h_bwd = gru_run_batch(model.bwd, emb, _reverse_rows(ids, lens, PAD_ID), lens, tape)
    r_t = ad.concat_cols([h_fwd, h_bwd])
    pooled = ad.dropout(r_t, dropout, train, rng) if train and dropout > 0 else r_t
    logits = ad.linear(pooled, ad.use(model.w_cls, tape), ad.use(model.b_cls, tape))
    return r_t, logits


def encode_pair(model: NLIBaseModel, s1: Sequence[int], s2: Sequence[int],
                tape: "Tape | None" = None) -> tuple[Tensor, Tensor]:
    """Single-pair form: (r_t vector, 3 class logits)."""
    r_rows, logit_rows = encode_pair_batch(model, [(s1, s2)], tape)
    return ad.take_row(r_rows, 0), ad.take_row(logit_rows, 0)


# ---------------------------------------------------------------------------
# multiple-choice reader


@dataclass
class RCBaseModel:
    """Passage GRU with bilinear question attention; scores each choice
    independently, so choice order cannot change the prediction."""

    embed: Parameter
    passage: GRUParams
    q_fwd: GRUParams
    q_bwd: GRUParams
    c_fwd: GRUParams
    c_bwd: GRUParams
    w_att: Parameter
    w_pc: Parameter
    w_qc: Parameter
    dev_accuracy: float = 0.0

    @classmethod
    def create(cls, vocab_size: int, embed_dim: int = 32, hidden: int = 64,
               seed: int = 0, prefix: str = "rc_base.") -> "RCBaseModel":
        if hidden % 2:
            raise ValueError("hidden size must be even for the two GRU directions")
        rng = np.random.default_rng(seed)
        return cls(
            embed=Parameter(f"{prefix}embed", rng.normal(0.0, 0.1, (vocab_size, embed_dim))),
            passage=_stabilize_gru(GRUParams.create(f"{prefix}passage.", embed_dim, hidden, rng), rng),
            q_fwd=_stabilize_gru(GRUParams.create(f"{prefix}q_fwd.", embed_dim, hidden // 2, rng), rng),
            q_bwd=_stabilize_gru(GRUParams.create(f"{prefix}q_bwd.", embed_dim, hidden // 2, rng), rng),
            c_fwd=_stabilize_gru(GRUParams.create(f"{prefix}c_fwd.", embed_dim, hidden // 2, rng), rng),
            c_bwd=_stabilize_gru(GRUParams.create(f"{prefix}c_bwd.", embed_dim, hidden // 2, rng), rng),
            w_att=Parameter(f"{prefix}att_w", ad.glorot(rng, hidden, hidden)),
            w_pc=Parameter(f"{prefix}pc_w", ad.glorot(rng, hidden, hidden)),
            w_qc=Parameter(f"{prefix}qc_w", ad.glorot(rng, hidden, hidden)),
        )

    @property
    def hidden(self) -> int:
        return self.w_att.data.shape[0]

    def params(self) -> list[Parameter]:
        return [self.embed, *self.passage.params(), *self.q_fwd.params(),
                *self.q_bwd.params(), *self.c_fwd.params(), *self.c_bwd.params(),
                self.w_att, self.w_pc, self.w_qc]


def _attend_passage(model: RCBaseModel, emb: Tensor,
                    passages: Sequence[Sequence[int]], r_q: Tensor,
                    tape: "Tape | None") -> Tensor:
    """Attention-pooled passage rows: beta = softmax_t(h_t . W_att r_q)."""
    ids, lens = _padded_ids(passages)
    states = gru_run_batch(model.passage, emb, ids, lens, tape, collect=True)
    key = ad.matmul(r_q, ad.transpose(ad.use(model.w_att, tape)))
    cols = [ad.row_sum(ad.hadamard(h, key)) for h in states]
    scores = ad.stack_cols(cols)
    t_max = ids.shape[1]
    # padded steps repeat the final state; push them out of the softmax
    mask = np.where(np.arange(t_max)[None, :] < lens[:, None], 0.0, -1e9)
    beta = ad.softmax(ad.add(scores, ad.constant(mask)))
    r_p = ad.mul_colvec(states[0], ad.take_col(beta, 0))
    for t in range(1, t_max):
        r_p = ad.add(r_p, ad.mul_colvec(states[t], ad.take_col(beta, t)))
    return r_p


def _choice_logit(model: RCBaseModel, r_p: Tensor, r_q: Tensor, r_c: Tensor,
                  tape: "Tape | None") -> Tensor:
    # p = r_p' W_pc r_c + r_q' W_qc r_c, evaluated per row
    left = ad.matmul(r_p, ad.use(model.w_pc, tape))
    right = ad.matmul(r_q, ad.use(model.w_qc, tape))
    return ad.add(ad.row_sum(ad.hadamard(left, r_c)),
                  ad.row_sum(ad.hadamard(right, r_c)))


def rc_encode_batch(model: RCBaseModel, passages: Sequence[Sequence[int]],
                    questions: Sequence[Sequence[int]],
                    choice_sets: Sequence[Sequence[Sequence[int]]],
                    tape: "Tape | None" = None, train: bool = False,
                    dropout: float = 0.0,
                    rng: "np.random.Generator | None" = None):
    """Pooled representations plus per-choice logits for a batch.

    Returns (r_p, r_q, r_cs, logits) where r_p/r_q are (B, H) rows, r_cs is
    one (B, H) row block per choice, and logits has one column per choice.
    """
    n_choices = len(choice_sets[0])
    if any(len(cs) != n_choices for cs in choice_sets):
        raise ValueError("all samples must offer the same number of choices")
    emb = ad.use(model.embed, tape)
    r_q = _bi_encode_batch(model.q_fwd, model.q_bwd, emb, questions, tape)
    r_p = _attend_passage(model, emb, passages, r_q, tape)
    if train and dropout > 0:
        r_p = ad.dropout(r_p, dropout, train, rng)
        r_q = ad.dropout(r_q, dropout, train, rng)
    r_cs = []
    cols = []
    for k in range(n_choices):
        r_c = _bi_encode_batch(model.c_fwd, model.c_bwd, emb,
                               [cs[k] for cs in choice_sets], tape)
        if train and dropout > 0:
            r_c = ad.dropout(r_c, dropout, train, rng)
        r_cs.append(r_c)
        cols.append(_choice_logit(model, r_p, r_q, r_c, tape))
    return r_p, r_q, r_cs, ad.stack_cols(cols)


def rc_forward_batch(model: RCBaseModel, passages: Sequence[Sequence[int]],
                     questions: Sequence[Sequence[int]],
                     choice_sets: Sequence[Sequence[Sequence[int]]],
                     tape: "Tape | None" = None, train: bool = False,
                     dropout: float = 0.0,
                     rng: "np.random.Generator | None" = None) -> Tensor:
    """Choice logit rows (one column per choice) for a batch of questions."""
    return rc_encode_batch(model, passages, questions, choice_sets, tape,
                           train, dropout, rng)[3]


def rc_forward(model: RCBaseModel, passage: Sequence[int], question: Sequence[int],
               choice: Sequence[int],
               tape: "Tape | None" = None) -> tuple[Tensor, Tensor, Tensor]:
    """Single (passage, question, choice) form: (r_p, r_qc, scalar logit)."""
    if len(passage) == 0 or len(question) == 0 or len(choice) == 0:
        raise ValueError("empty sentence")
    emb = ad.use(model.embed, tape)
    r_q = _bi_encode_batch(model.q_fwd, model.q_bwd, emb, [question], tape)
    r_p = _attend_passage(model, emb, [passage], r_q, tape)
    r_c = _bi_encode_batch(model.c_fwd, model.c_bwd, emb, [choice], tape)
    p_t = ad.take(_choice_logit(model, r_p, r_q, r_c, tape), 0)
    r_qc = ad.concat([ad.take_row(r_q, 0), ad.take_row(r_c, 0)])
    return ad.take_row(r_p, 0), r_qc, p_t


# ---------------------------------------------------------------------------
# pretraining loops


@dataclass
class PretrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 3
    dropout: float = 0.4
    seed: int = 0
    embed_dim: int = 32
    hidden: int = 64


@dataclass
class PretrainHistory:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = "max_epochs"


def _fit(params, batches_fn, eval_fn, cfg: PretrainConfig):
    """Generic epoch loop: Adam, dev-accuracy early stopping, best restore."""
    opt = Adam(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng(cfg.seed + 1)
    hist = PretrainHistory()
    best_acc = eval_fn()
    best_arrays = ad.params_to_arrays(params)
    hist.best_epoch = -1
    since = 0
    for epoch in range(cfg.max_epochs):
        total, count = 0.0, 0
        for loss in batches_fn(rng, drop_rng):
            Adam.zero_grad(params)
            backward(loss.tape, loss)
            opt.step(params)
            total += float(loss.data)
            count += 1
        acc = eval_fn()
        hist.epochs.append({"epoch": epoch, "train_loss": total / max(count, 1),
                            "dev_accuracy": acc})
        if acc > best_acc:
            best_acc = acc
            hist.best_epoch = epoch
            best_arrays = ad.params_to_arrays(params)
            since = 0
        else:
            since += 1
        if since >= max(cfg.patience, 1):
            hist.stop_reason = "early_stop"
            break
    ad.load_arrays_into(params, best_arrays)
    return best_acc, hist


def _nli_tokens(vocab: TokenVocab, samples) -> list[tuple[list[int], list[int], int]]:
    return [(vocab.encode_text(s.premise), vocab.encode_text(s.hypothesis), s.label)
            for s in samples]


def nli_accuracy(model: NLIBaseModel, encoded, chunk: int = 256) -> float:
    hits = 0
    for start in range(0, len(encoded), chunk):
        part = encoded[start:start + chunk]
        _, logits = encode_pair_batch(model, [(a, b) for a, b, _ in part])
        hits += int(np.sum(np.argmax(logits.data, axis=1) == [y for _, _, y in part]))
    return hits / len(encoded)


def pretrain_nli_base(train_samples, dev_samples, vocab: TokenVocab,
                      cfg: "PretrainConfig | None" = None) -> tuple[NLIBaseModel, PretrainHistory]:
    if not train_samples or not dev_samples:
        raise ValueError("empty split")
    cfg = cfg or PretrainConfig()
    model = NLIBaseModel.create(vocab.size, vocab.id_of("<sep>"),
                                cfg.embed_dim, cfg.hidden, cfg.seed)
    train = _nli_tokens(vocab, train_samples)
    dev = _nli_tokens(vocab, dev_samples)
    params = model.params()

    def batches(rng, drop_rng):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            part = [train[int(i)] for i in order[start:start + cfg.batch_size]]
            tape = Tape()
            _, logits = encode_pair_batch(model, [(a, b) for a, b, _ in part], tape,
                                          train=True, dropout=cfg.dropout, rng=drop_rng)
            yield softmax_xent(logits, [y for _, _, y in part])

    best, hist = _fit(params, batches, lambda: nli_accuracy(model, dev), cfg)
    model.dev_accuracy = best
    return model, hist


def _rc_tokens(vocab: TokenVocab, samples):
    return [(vocab.encode_text(s.passage), vocab.encode_text(s.question),
             [vocab.encode_text(c) for c in s.choices], s.label) for s in samples]


def rc_accuracy(model: RCBaseModel, encoded, chunk: int = 128) -> float:
    hits = 0
    for start in range(0, len(encoded), chunk):
        part = encoded[start:start + chunk]
        logits = rc_forward_batch(model, [p for p, _, _, _ in part],
                                  [q for _, q, _, _ in part],
                                  [cs for _, _, cs, _ in part])
        hits += int(np.sum(np.argmax(logits.data, axis=1) == [y for _, _, _, y in part]))
    return hits / len(encoded)


def pretrain_rc_base(train_samples, dev_samples, vocab: TokenVocab,
                     cfg: "PretrainConfig | None" = None) -> tuple[RCBaseModel, PretrainHistory]:
    if not train_samples or not dev_samples:
        raise ValueError("empty split")
    cfg = cfg or PretrainConfig()
    model = RCBaseModel.create(vocab.size, cfg.embed_dim, cfg.hidden, cfg.seed)
    train = _rc_tokens(vocab, train_samples)
    dev = _rc_tokens(vocab, dev_samples)
    params = model.params()

    def batches(rng, drop_rng):
        order = rng.permutation(len(train))
        for start in range(0, len(order), cfg.batch_size):
            part = [train[int(i)] for i in order[start:start + cfg.batch_size]]
            tape = Tape()
            logits = rc_forward_batch(model, [p for p, _, _, _ in part],
                                      [q for _, q, _, _ in part],
                                      [cs for _, _, cs, _ in part], tape,
                                      train=True, dropout=cfg.dropout, rng=drop_rng)
            yield softmax_xent(logits, [y for _, _, _, y in part])

    best, hist = _fit(params, batches, lambda: rc_accuracy(model, dev), cfg)
    model.dev_accuracy = best
    return model, hist
