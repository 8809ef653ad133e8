"""Joint caption/image embedding training with a bidirectional triplet loss.

Each caption and its image are pulled together on the unit sphere while the
hardest in-batch negative is pushed at least `margin` away, in both the
text-to-image and image-to-text directions. The loss averages over anchors,
so a batch of two identical pairs with margin 0.2 scores exactly 0.4.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor, backward, load_arrays_into, params_to_arrays
from .encoders import (ImageEncoderParams, TextEncoderParams, encode_image,
                       encode_text_batch)
from .imagebase import ImageRecord
from .synthworld import AlignedPairs


def triplet_loss(text_emb: Tensor, image_emb: Tensor, margin: float = 0.2) -> Tensor:
    """Hardest-negative triplet loss over matched rows, mean over anchors.

    Row i of each input is one aligned pair; both inputs must be row-wise
    unit-normalized so the score matrix holds cosines in [-1, 1].
    """
    if text_emb.data.shape != image_emb.data.shape:
        raise ValueError("text and image embedding batches must share a shape")
    n = text_emb.data.shape[0]
    if n < 2:
        raise ValueError("triplet loss needs at least two pairs for negatives")
    scores = ad.matmul(text_emb, ad.transpose(image_emb))
    diag = ad.pick_per_row(scores, list(range(n)))
    # cosines live in [-1, 1]; -4 on the diagonal removes it from every row max
    masked = ad.add(scores, ad.constant(-4.0 * np.eye(n)))
    hardest_image = ad.row_max(masked)
    hardest_text = ad.row_max(ad.transpose(masked))
    h1 = ad.relu(ad.add_scalar(ad.sub(hardest_image, diag), margin))
    h2 = ad.relu(ad.add_scalar(ad.sub(hardest_text, diag), margin))
    return ad.scale(ad.sum_all(ad.add(h1, h2)), 1.0 / n)


def recall_at_k(text_embs: np.ndarray, image_embs: np.ndarray,
                image_ids: Sequence[int], true_ids: Sequence[int], k: int = 1) -> float:
    """Fraction of text rows whose true image ranks in the top k by score.

    image_embs is (M, joint); ties resolve toward the lower column, matching
    index retrieval.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    ids = np.asarray(image_ids)
    hits = 0
    scores = text_embs @ image_embs.T
    for row, true_id in zip(scores, true_ids):
        top = np.argsort(-row, kind="stable")[:k]
        if true_id in ids[top]:
            hits += 1
    return hits / len(true_ids)


@dataclass
class RetrievalTrainConfig:
    lr: float = 1e-4
    margin: float = 0.2
    batch_size: int = 64
    max_epochs: int = 150
    patience: int = 8
    seed: int = 0
    embed_dim: int = 32
    hidden: int = 64
    joint_dim: int = 64


@dataclass
class RetrievalTrainResult:
    text: TextEncoderParams
    image: ImageEncoderParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_recall: float = 0.0
    stop_reason: str = "max_epochs"


def _embed_all_images(image: ImageEncoderParams, records: Sequence[ImageRecord]) -> np.ndarray:
    feats = np.stack([rec.raw_global for rec in records])
    return encode_image(image, feats, tape=None).data


def _dev_recall(text: TextEncoderParams, image: ImageEncoderParams,
                dev: Sequence[tuple[list[int], int]],
                records: Sequence[ImageRecord], chunk: int = 128) -> float:
    image_embs = _embed_all_images(image, records)
    image_ids = [rec.id for rec in records]
    rows = []
    for start in range(0, len(dev), chunk):
        part = dev[start:start + chunk]
        rows.append(encode_text_batch(text, [ids for ids, _ in part], tape=None).data)
    text_embs = np.concatenate(rows, axis=0)
    return recall_at_k(text_embs, image_embs, image_ids, [i for _, i in dev], k=1)


def train_joint_embedding(records: Sequence[ImageRecord], pairs: AlignedPairs,
                          vocab_size: int,
                          cfg: "RetrievalTrainConfig | None" = None) -> RetrievalTrainResult:
    """Fit both encoders on aligned pairs; early-stops on dev recall@1 and
    restores the best epoch's weights."""
    cfg = cfg or RetrievalTrainConfig()
    rng = np.random.default_rng(cfg.seed)
    text = TextEncoderParams.create(vocab_size, cfg.embed_dim, cfg.hidden,
                                    cfg.joint_dim, seed=cfg.seed)
    feat_dim = records[0].raw_global.shape[0]
    image = ImageEncoderParams.create(feat_dim, cfg.joint_dim, seed=cfg.seed + 1)
    params = text.params() + image.params()
    opt = Adam(lr=cfg.lr)
    raw_by_id = {rec.id: rec.raw_global for rec in records}

    result = RetrievalTrainResult(text=text, image=image)
    best_arrays = params_to_arrays(params)
    since_best = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(pairs.train))
        total, batches = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            batch = [pairs.train[int(i)] for i in idx]
            tape = Tape()
            t_emb = encode_text_batch(text, [ids for ids, _ in batch], tape)
            feats = np.stack([raw_by_id[iid] for _, iid in batch])
            v_emb = encode_image(image, feats, tape)
            loss = triplet_loss(t_emb, v_emb, cfg.margin)
            Adam.zero_grad(params)
            backward(tape, loss)
            opt.step(params)
            total += float(loss.data)
            batches += 1
        dev_recall = _dev_recall(text, image, pairs.dev, records)
        result.history.append({
            "epoch": epoch,
            "train_loss": total / max(batches, 1),
            "dev_recall_at_1": dev_recall,
        })
        if dev_recall > result.best_recall or result.best_epoch < 0:
            result.best_recall = dev_recall
            result.best_epoch = epoch
            best_arrays = params_to_arrays(params)
            since_best = 0
        else:
            since_best += 1
        if since_best >= max(cfg.patience, 1):
            result.stop_reason = "early_stop"
            break
    load_arrays_into(params, best_arrays)
    return result
