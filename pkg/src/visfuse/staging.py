"""Staged training: retrieval alignment first, fusion on frozen bases next,
then a low-rate joint pass over everything.

Stage 1 fits the joint text/image embedding on aligned caption pairs.
Stage 2 bolts the visual pathway onto a pretrained base model and trains
only the new parameters (gates, heads); the base stays frozen so its text
competence cannot degrade. Stage 3 unfreezes the whole stack at a reduced
learning rate. Each stage writes "<run>/stage<k>.ckpt" plus a manifest, and
stage k > 1 refuses to run until stage k-1's checkpoint exists.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import (Adam, Parameter, Tape, Tensor, load_arrays_into,
                       load_checkpoint, params_to_arrays, save_checkpoint)
from .encoders import (ImageEncoderParams, TextEncoderParams, TokenVocab,
                       encode_text_batch)
from .fusion import FusionParams, attend, attend_late_fusion
from .heads import (NLIHeadParams, RCHeadParams, _feature_rows,
                    init_from_classifier, split_sentences)
from .imagebase import (ImagebaseIndex, VisualFeatureSet, build_index,
                        extract_features)
from .nlu import (NLIBaseModel, RCBaseModel, encode_pair_batch,
                  rc_encode_batch, softmax_xent)
from .retrieval_training import (RetrievalTrainConfig, RetrievalTrainResult,
                                 train_joint_embedding)

STAGE_LRS = {1: 1e-4, 2: 1e-4, 3: 1e-5}
BASE_PREFIXES = ("nli_base.", "rc_base.")
RETRIEVAL_PREFIX = "retrieval."


@dataclass
class StageConfig:
    """One stage's knobs; lr and the freeze list default per stage."""

    stage: int
    lr: float | None = None
    dropout: float = 0.4
    patience: int = 3
    max_epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    frozen_prefixes: tuple[str, ...] | None = None
    # stage 2 only: also let the retrieval encoders move with the task loss
    train_retrieval: bool = False
    # stage 3 only: refresh the imagebase embeddings after the joint pass
    reembed_imagebase: bool = True
    # stage 2 only: proceed without a stage-1 checkpoint (untrained retrieval)
    allow_random_retrieval: bool = False

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.lr is None:
            self.lr = STAGE_LRS[self.stage]
        if self.lr <= 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.patience < 0:
            raise ValueError(f"patience cannot be negative, got {self.patience}")
        if self.max_epochs < 0:
            raise ValueError(f"max_epochs cannot be negative, got {self.max_epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.frozen_prefixes is None:
            if self.stage == 2:
                frozen = list(BASE_PREFIXES)
                if not self.train_retrieval:
                    frozen.append(RETRIEVAL_PREFIX)
                self.frozen_prefixes = tuple(frozen)
            else:
                self.frozen_prefixes = ()
        else:
            self.frozen_prefixes = tuple(self.frozen_prefixes)
        if self.stage == 2 and not self.frozen_prefixes:
            raise ValueError("stage 2 must freeze the pretrained base model")


def apply_freeze(params: Sequence[Parameter], prefixes: Sequence[str]) -> None:
    """Freeze exactly the prefix-matched parameters; every other one trains."""
    for p in params:
        p.trainable = not any(p.name.startswith(pre) for pre in prefixes)


@dataclass
class TrainRun:
    """What one stage produced; best_metric always equals max over history."""

    stage: int
    history: list[dict] = field(default_factory=list)
    best_metric: float = 0.0
    best_epoch: int = -1
    stop_reason: str = "max_epochs"
    checkpoint: str = ""


def stage_checkpoint(run_dir, stage: int) -> str:
    return os.path.join(str(run_dir), f"stage{stage}.ckpt")


def stage_manifest(run_dir, stage: int) -> str:
    return os.path.join(str(run_dir), f"stage{stage}.manifest.json")


# ---------------------------------------------------------------------------
# integrated models: base predictions plus the retrieval-fusion pathway


def _batch_retrieve(index: ImagebaseIndex, queries: np.ndarray):
    """Row-wise nearest records; same scoring and tie rule as single retrieve."""
    scores = queries @ index.embeddings
    best = np.argmax(scores, axis=1)
    picked = scores[np.arange(scores.shape[0]), best]
    return [index.records[j].id for j in best], picked


def _retrieve_feature_sets(index: ImagebaseIndex, text: TextEncoderParams,
                           seqs: Sequence[Sequence[int]],
                           chunk: int = 256) -> list[VisualFeatureSet]:
    """Embed token sequences, retrieve each one's best image, return features."""
    out: list[VisualFeatureSet] = []
    for start in range(0, len(seqs), chunk):
        part = seqs[start:start + chunk]
        q = encode_text_batch(text, part, tape=None).data
        ids, scores = _batch_retrieve(index, q)
        out.extend(extract_features(index, rid, s) for rid, s in zip(ids, scores))
    return out


@dataclass
class _EncodedNLI:
    s1: list[int]
    s2: list[int]
    label: int
    vf1: VisualFeatureSet
    vf2: VisualFeatureSet


@dataclass
class _EncodedRC:
    passage: list[int]
    question: list[int]
    choices: list[list[int]]
    label: int
    sent_globals: np.ndarray
    sent_scores: np.ndarray
    sent_ids: list[int]


@dataclass
class IntegratedNLIModel:
    """NLI base plus per-sentence retrieval and gated feature fusion."""

    base: NLIBaseModel
    text_enc: TextEncoderParams
    image_enc: ImageEncoderParams
    index: ImagebaseIndex
    fusion: FusionParams
    head: NLIHeadParams
    vocab: TokenVocab

    task = "nli"

    def params(self) -> list[Parameter]:
        return (self.base.params() + self.text_enc.params()
                + self.image_enc.params() + self.fusion.params()
                + self.head.params())

    def reembed(self) -> None:
        """Rebuild the index embeddings from the current image encoder."""
        self.index = build_index(self.index.records, self.image_enc)

    def encode_samples(self, samples) -> list[_EncodedNLI]:
        """Tokenize and retrieve once; the result stays valid all stage long
        because the task loss never reaches the retrieval argmax."""
        seqs1 = [self.vocab.encode_text(s.premise) for s in samples]
        seqs2 = [self.vocab.encode_text(s.hypothesis) for s in samples]
        vfs1 = _retrieve_feature_sets(self.index, self.text_enc, seqs1)
        vfs2 = _retrieve_feature_sets(self.index, self.text_enc, seqs2)
        return [
            _EncodedNLI(s1, s2, int(s.label), v1, v2)
            for s1, s2, s, v1, v2 in zip(seqs1, seqs2, samples, vfs1, vfs2)
        ]

    def logits(self, batch: Sequence[_EncodedNLI], tape: "Tape | None" = None,
               train: bool = False, dropout: float = 0.0,
               rng: "np.random.Generator | None" = None) -> Tensor:
        pairs = [(e.s1, e.s2) for e in batch]
        r_t, _ = encode_pair_batch(self.base, pairs, tape, train=train,
                                   dropout=dropout, rng=rng)
        rows = []
        for i, e in enumerate(batch):
            r_ti = ad.take_row(r_t, i)
            _, r1 = attend(self.fusion, r_ti, _feature_rows(e.vf1), tape,
                           dropout, train, rng)
            _, r2 = attend(self.fusion, r_ti, _feature_rows(e.vf2), tape,
                           dropout, train, rng)
            rows.append(ad.hadamard(r1, r2))
        fused = self.head.phi_v.apply(ad.stack_rows(rows), tape)
        return ad.add(fused, self.head.phi_t.apply(r_t, tape))

    def predict(self, encoded: Sequence[_EncodedNLI], chunk: int = 256) -> np.ndarray:
        out = np.empty(len(encoded), dtype=np.int64)
        for start in range(0, len(encoded), chunk):
            part = encoded[start:start + chunk]
            out[start:start + len(part)] = np.argmax(self.logits(part).data, axis=1)
        return out

    def accuracy(self, encoded: Sequence[_EncodedNLI], chunk: int = 256) -> float:
        labels = np.array([e.label for e in encoded])
        return float(np.mean(self.predict(encoded, chunk) == labels))


@dataclass
class IntegratedRCModel:
    """RC base plus per-sentence retrieval fused against the passage summary."""

    base: RCBaseModel
    text_enc: TextEncoderParams
    image_enc: ImageEncoderParams
    index: ImagebaseIndex
    fusion: FusionParams
    head: RCHeadParams
    vocab: TokenVocab

    task = "rc"

    def params(self) -> list[Parameter]:
        return (self.base.params() + self.text_enc.params()
                + self.image_enc.params() + self.fusion.params()
                + self.head.params())

    def reembed(self) -> None:
        self.index = build_index(self.index.records, self.image_enc)

    def encode_samples(self, samples) -> list[_EncodedRC]:
        """One retrieval per passage sentence; globals stack into the
        late-fusion candidate set."""
        flat: list[list[int]] = []
        spans: list[tuple[int, int]] = []
        for s in samples:
            sents = split_sentences(s.passage)
            if not sents:
                raise ValueError("passage with no sentences")
            start = len(flat)
            flat.extend(self.vocab.encode_text(t) for t in sents)
            spans.append((start, len(flat)))
        vfs = _retrieve_feature_sets(self.index, self.text_enc, flat)
        out = []
        for s, (lo, hi) in zip(samples, spans):
            out.append(_EncodedRC(
                passage=self.vocab.encode_text(s.passage),
                question=self.vocab.encode_text(s.question),
                choices=[self.vocab.encode_text(c) for c in s.choices],
                label=int(s.label),
                sent_globals=np.stack([vf.global_feat for vf in vfs[lo:hi]]),
                sent_scores=np.array([vf.retrieval_score for vf in vfs[lo:hi]]),
                sent_ids=[vf.source_id for vf in vfs[lo:hi]],
            ))
        return out

    def logits(self, batch: Sequence[_EncodedRC], tape: "Tape | None" = None,
               train: bool = False, dropout: float = 0.0,
               rng: "np.random.Generator | None" = None) -> Tensor:
        r_p, r_q, r_cs, p_t = rc_encode_batch(
            self.base, [e.passage for e in batch], [e.question for e in batch],
            [e.choices for e in batch], tape, train, dropout, rng)
        rows = []
        for i, e in enumerate(batch):
            _, r_v = attend_late_fusion(self.fusion, ad.take_row(r_p, i),
                                        e.sent_globals, tape, dropout, train, rng)
            rows.append(r_v)
        mapped = self.head.phi_r.apply(ad.stack_rows(rows), tape)
        cols = []
        for r_c in r_cs:
            r_qc = ad.concat_cols([r_q, r_c])
            cols.append(ad.row_sum(ad.hadamard(mapped, r_qc)))
        return ad.add(ad.stack_cols(cols), p_t)

    def predict(self, encoded: Sequence[_EncodedRC], chunk: int = 128) -> np.ndarray:
        out = np.empty(len(encoded), dtype=np.int64)
        for start in range(0, len(encoded), chunk):
            part = encoded[start:start + chunk]
            out[start:start + len(part)] = np.argmax(self.logits(part).data, axis=1)
        return out

    def accuracy(self, encoded: Sequence[_EncodedRC], chunk: int = 128) -> float:
        labels = np.array([e.label for e in encoded])
        return float(np.mean(self.predict(encoded, chunk) == labels))


def base_predictions(model, encoded, chunk: int = 256, base=None) -> np.ndarray:
    """Argmax of the base model alone over already-encoded samples.

    Pass base= to score against a different base checkpoint than the one
    inside the integrated model (stage 3 may have moved model.base).
    """
    from .nlu import rc_forward_batch

    out = np.empty(len(encoded), dtype=np.int64)
    if isinstance(model, IntegratedNLIModel):
        base = base or model.base
        for start in range(0, len(encoded), chunk):
            part = encoded[start:start + chunk]
            _, logits = encode_pair_batch(base, [(e.s1, e.s2) for e in part])
            out[start:start + len(part)] = np.argmax(logits.data, axis=1)
    elif isinstance(model, IntegratedRCModel):
        base = base or model.base
        for start in range(0, len(encoded), chunk):
            part = encoded[start:start + chunk]
            logits = rc_forward_batch(base, [e.passage for e in part],
                                      [e.question for e in part],
                                      [e.choices for e in part])
            out[start:start + len(part)] = np.argmax(logits.data, axis=1)
    else:
        raise TypeError(f"not an integrated model: {type(model).__name__}")
    return out


def integrate(base_model, text_enc: TextEncoderParams,
              image_enc: ImageEncoderParams, index: ImagebaseIndex,
              fusion: FusionParams, vocab: TokenVocab, *,
              head_hidden: int = 64, seed: int = 0):
    """Wire a pretrained base to the retrieval stack with silent visual heads.

    The text head reproduces the base classifier exactly and the visual heads
    start with zero output, so the integrated model's predictions match the
    base model's until stage 2 actually trains the new parameters.
    """
    feat = index.feat_dim
    if fusion.feat_dim != feat:
        raise ValueError(
            f"fusion expects {fusion.feat_dim}-dim features, imagebase stores {feat}")
    if text_enc.joint_dim != index.joint_dim:
        raise ValueError(
            f"text encoder embeds into {text_enc.joint_dim} dims, "
            f"index holds {index.joint_dim}")
    if image_enc.joint_dim != index.joint_dim:
        raise ValueError(
            f"image encoder embeds into {image_enc.joint_dim} dims, "
            f"index holds {index.joint_dim}")
    if isinstance(base_model, NLIBaseModel):
        hidden = base_model.w_cls.data.shape[1]
        if fusion.text_dim != hidden:
            raise ValueError(
                f"fusion gates read {fusion.text_dim}-dim text states, "
                f"base pools into {hidden}")
        head = NLIHeadParams.create(feat, hidden, hidden=head_hidden, seed=seed)
        init_from_classifier(head.phi_t, base_model.w_cls.data,
                             base_model.b_cls.data)
        head.phi_v.zero_output()
        return IntegratedNLIModel(base_model, text_enc, image_enc, index,
                                  fusion, head, vocab)
    if isinstance(base_model, RCBaseModel):
        hidden = base_model.w_att.data.shape[0]
        if fusion.text_dim != hidden:
            raise ValueError(
                f"fusion gates read {fusion.text_dim}-dim text states, "
                f"base pools into {hidden}")
        head = RCHeadParams.create(feat, 2 * hidden, hidden=head_hidden, seed=seed)
        head.phi_r.zero_output()
        return IntegratedRCModel(base_model, text_enc, image_enc, index,
                                 fusion, head, vocab)
    raise TypeError(f"cannot integrate a {type(base_model).__name__}")


# ---------------------------------------------------------------------------
# the stage runner


def _write_manifest(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require_previous(cfg: StageConfig, run_dir) -> bool:
    """Enforce stage ordering; returns True when stage 1 was skipped on purpose."""
    if cfg.stage == 1:
        return False
    prev = stage_checkpoint(run_dir, cfg.stage - 1)
    if os.path.exists(prev):
        return False
    if cfg.stage == 2 and cfg.allow_random_retrieval:
        return True
    raise FileNotFoundError(
        f"stage {cfg.stage} needs {prev}; run stage {cfg.stage - 1} first")


def _run_stage1(cfg: StageConfig, run_dir, records, pairs, vocab_size: int,
                retrieval_cfg: "RetrievalTrainConfig | None") -> TrainRun:
    rcfg = retrieval_cfg or RetrievalTrainConfig(
        lr=cfg.lr, batch_size=cfg.batch_size, max_epochs=cfg.max_epochs,
        patience=cfg.patience, seed=cfg.seed)
    result = train_joint_embedding(records, pairs, vocab_size, rcfg)
    params = result.text.params() + result.image.params()
    ckpt = stage_checkpoint(run_dir, 1)
    save_checkpoint(ckpt, params_to_arrays(params))
    run = TrainRun(stage=1, history=result.history,
                   best_metric=result.best_recall, best_epoch=result.best_epoch,
                   stop_reason=result.stop_reason, checkpoint=ckpt)
    _write_manifest(stage_manifest(run_dir, 1), {
        "stage": 1,
        "config": asdict(cfg),
        "retrieval_config": asdict(rcfg),
        "n_records": len(records),
        "history": run.history,
        "best_epoch": run.best_epoch,
        "best_metric": run.best_metric,
        "stop_reason": run.stop_reason,
        "checkpoint": os.path.basename(ckpt),
        "params_checksum": ad.checksum(params),
    })
    return run


def _fit_integrated(model, cfg: StageConfig, train_enc, dev_enc) -> TrainRun:
    """Shared stage-2/3 loop: epoch 0 is the untouched starting point, so a
    fine-tune that never improves restores exactly what it was given."""
    params = model.params()
    apply_freeze(params, cfg.frozen_prefixes)
    opt = Adam(lr=cfg.lr)
    order_rng = np.random.default_rng(cfg.seed)
    drop_rng = np.random.default_rng(cfg.seed + 1)
    labels = [e.label for e in train_enc]

    run = TrainRun(stage=cfg.stage)
    acc0 = model.accuracy(dev_enc)
    run.history.append({"epoch": 0, "train_loss": None, "dev_accuracy": acc0})
    run.best_metric, run.best_epoch = acc0, 0
    best_arrays = {p.name: p.data.copy() for p in params}
    since_best = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = order_rng.permutation(len(train_enc))
        total, batches = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            picks = order[start:start + cfg.batch_size]
            batch = [train_enc[i] for i in picks]
            tape = Tape()
            logits = model.logits(batch, tape, train=True, dropout=cfg.dropout,
                                  rng=drop_rng)
            loss = softmax_xent(logits, [labels[i] for i in picks])
            Adam.zero_grad(params)
            ad.backward(tape, loss)
            opt.step(params)
            total += float(loss.data)
            batches += 1
        acc = model.accuracy(dev_enc)
        run.history.append({"epoch": epoch, "train_loss": total / max(batches, 1),
                            "dev_accuracy": acc})
        if acc > run.best_metric:
            run.best_metric, run.best_epoch = acc, epoch
            best_arrays = {p.name: p.data.copy() for p in params}
            since_best = 0
        else:
            since_best += 1
            if since_best >= max(cfg.patience, 1):
                run.stop_reason = "patience"
                break

    load_arrays_into(params, best_arrays)
    return run


def run_stage(cfg: StageConfig, run_dir, *, records=None, pairs=None,
              vocab_size: "int | None" = None,
              retrieval_cfg: "RetrievalTrainConfig | None" = None,
              model=None, train_samples=None, dev_samples=None) -> TrainRun:
    """Run one stage under run_dir, writing stage<k>.ckpt and its manifest.

    Stage 1 trains the retrieval encoders from aligned pairs. Stages 2 and 3
    fine-tune an integrated model; stage 2 loads the stage-1 encoders, stage 3
    loads the full stage-2 parameter set, and both rebuild the imagebase
    embeddings before any retrieval is cached.
    """
    os.makedirs(str(run_dir), exist_ok=True)
    skipped_retrieval = _require_previous(cfg, run_dir)

    if cfg.stage == 1:
        if records is None or pairs is None or vocab_size is None:
            raise ValueError("stage 1 needs records, pairs and vocab_size")
        return _run_stage1(cfg, run_dir, records, pairs, vocab_size, retrieval_cfg)

    if model is None or train_samples is None or dev_samples is None:
        raise ValueError(f"stage {cfg.stage} needs model, train_samples and dev_samples")

    params = model.params()
    if not skipped_retrieval:
        arrays = load_checkpoint(stage_checkpoint(run_dir, cfg.stage - 1))
        # stage-1 checkpoints hold only the retrieval subtree; later ones
        # must cover the whole model
        load_arrays_into(params, arrays, strict=(cfg.stage == 3))
    model.reembed()

    train_enc = model.encode_samples(train_samples)
    dev_enc = model.encode_samples(dev_samples)
    run = _fit_integrated(model, cfg, train_enc, dev_enc)

    if cfg.stage == 3 and cfg.reembed_imagebase:
        model.reembed()

    ckpt = stage_checkpoint(run_dir, cfg.stage)
    save_checkpoint(ckpt, params_to_arrays(params))
    run.checkpoint = ckpt
    _write_manifest(stage_manifest(run_dir, cfg.stage), {
        "stage": cfg.stage,
        "task": model.task,
        "config": asdict(cfg),
        "n_train": len(train_samples),
        "n_dev": len(dev_samples),
        "random_retrieval": skipped_retrieval,
        "history": run.history,
        "best_epoch": run.best_epoch,
        "best_metric": run.best_metric,
        "stop_reason": run.stop_reason,
        "checkpoint": os.path.basename(ckpt),
        "params_checksum": ad.checksum(params),
    })
    return run
