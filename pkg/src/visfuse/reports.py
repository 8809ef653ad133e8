"""Evaluation reports: subset breakdowns, ablation grids, and case dumps.

Everything here consumes plain per-sample row dicts or injected train/eval
callables, so reports stay testable without running the full pipeline. Render
targets are dicts (JSON) plus aligned text tables; plotting is out of scope.
"""

from __future__ import annotations

import json
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .fusion import attend, attend_late_fusion
from .heads import _feature_rows
from .nlu import encode_pair_batch, rc_encode_batch
from .staging import (IntegratedNLIModel, IntegratedRCModel, base_predictions)

SCORE_EDGES = (0.45, 0.50, 0.55, 0.60)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


# ---------------------------------------------------------------------------
# per-sample evaluation rows


def eval_rows(model, samples, base=None) -> list[dict]:
    """One dict per sample: gold, both predictions, subset tags, mean score.

    base= evaluates the text-only side against a specific base checkpoint
    (defaults to the one wired into the integrated model).
    """
    enc = model.encode_samples(samples)
    base = base_predictions(model, enc, base=base)
    ours = model.predict(enc)
    rows = []
    for i, (s, e) in enumerate(zip(samples, enc)):
        if isinstance(model, IntegratedNLIModel):
            score = 0.5 * (e.vf1.retrieval_score + e.vf2.retrieval_score)
        else:
            score = float(np.mean(e.sent_scores))
        rows.append({
            "index": i,
            "gold": int(s.label),
            "base_pred": int(base[i]),
            "integrated_pred": int(ours[i]),
            "visual_dependent": bool(s.visual_dependent),
            "question_type": s.question_type,
            "retrieval_score": score,
        })
    return rows


def _acc(rows: Sequence[dict], key: str) -> "float | None":
    if not rows:
        return None
    return float(np.mean([r[key] == r["gold"] for r in rows]))


def accuracy_summary(rows: Sequence[dict]) -> dict:
    """Base vs integrated accuracy, overall and by visual dependence."""
    subsets = {
        "overall": list(rows),
        "visual_dependent": [r for r in rows if r["visual_dependent"]],
        "non_visual": [r for r in rows if not r["visual_dependent"]],
    }
    out = {}
    for name, part in subsets.items():
        base = _acc(part, "base_pred")
        ours = _acc(part, "integrated_pred")
        out[name] = {
            "n": len(part),
            "base_accuracy": base,
            "integrated_accuracy": ours,
            "uplift": None if base is None else ours - base,
        }
    return out


# ---------------------------------------------------------------------------
# ablations


def ablate_imagebase_size(train_fn: Callable, eval_fn: Callable,
                          sizes: Sequence[int]) -> dict:
    """Accuracy grid over train-time and eval-time imagebase sizes.

    train_fn(size) returns a model fine-tuned against a size-limited
    imagebase; eval_fn(model, size) returns {"accuracy": ..} measured with an
    eval-time imagebase of that size. The direction flag asks whether the
    large/large cell beats every cell trained on a smaller imagebase.
    """
    sizes = sorted(set(int(s) for s in sizes))
    if len(sizes) < 2:
        raise ValueError("need at least two sizes to compare")
    cells = []
    for tr in sizes:
        model = train_fn(tr)
        for te in sizes:
            res = eval_fn(model, te)
            cells.append({"train_size": tr, "test_size": te, **res})
    largest = sizes[-1]
    big = next(c for c in cells
               if c["train_size"] == largest and c["test_size"] == largest)
    small_cells = [c for c in cells if c["train_size"] < largest]
    direction = all(big["accuracy"] >= c["accuracy"] for c in small_cells)
    return {
        "sizes": sizes,
        "cells": cells,
        "largest_cell_accuracy": big["accuracy"],
        "direction_pass": bool(direction),
    }


def ablate_retrieval_score(rows: Sequence[dict],
                           edges: Sequence[float] = SCORE_EDGES) -> dict:
    """Bucket samples by mean retrieval score; report uplift per bucket.

    Buckets are [e0,e1), [e1,e2), ..., [e_last, inf); samples scoring below
    e0 are excluded (counted separately). Empty buckets report "n/a".
    """
    edges = sorted(float(e) for e in edges)
    if len(edges) < 2:
        raise ValueError("need at least two bucket edges")
    buckets = []
    for i, lo in enumerate(edges):
        hi = edges[i + 1] if i + 1 < len(edges) else float("inf")
        part = [r for r in rows if lo <= r["retrieval_score"] < hi]
        base = _acc(part, "base_pred")
        ours = _acc(part, "integrated_pred")
        buckets.append({
            "low": lo,
            "high": None if hi == float("inf") else hi,
            "n": len(part),
            "base_accuracy": "n/a" if base is None else base,
            "integrated_accuracy": "n/a" if ours is None else ours,
            "uplift": "n/a" if base is None else ours - base,
        })
    below = sum(1 for r in rows if r["retrieval_score"] < edges[0])
    filled = [b for b in buckets if b["n"] > 0]
    if filled:
        direction = filled[-1]["uplift"] >= filled[0]["uplift"]
        monotone = all(b2["uplift"] >= b1["uplift"]
                       for b1, b2 in zip(filled, filled[1:]))
    else:
        direction = monotone = False
    return {
        "edges": edges,
        "buckets": buckets,
        "below_min": below,
        "direction_pass": bool(direction),
        "monotone": bool(monotone),
    }


def breakdown_question_type(rows: Sequence[dict]) -> dict:
    """Per question-type accuracy for both models; types partition the set."""
    tags = sorted({r["question_type"] for r in rows if r["question_type"]})
    if not tags:
        raise ValueError("no question types present; is this an NLI run?")
    per_tag = {}
    for tag in tags:
        part = [r for r in rows if r["question_type"] == tag]
        base = _acc(part, "base_pred")
        ours = _acc(part, "integrated_pred")
        per_tag[tag] = {
            "n": len(part),
            "base_accuracy": base,
            "integrated_accuracy": ours,
            "uplift": ours - base,
        }
    overall_base = _acc(rows, "base_pred")
    overall_ours = _acc(rows, "integrated_pred")
    overall_uplift = overall_ours - overall_base
    tagged = sum(v["n"] for v in per_tag.values())
    report = {
        "types": per_tag,
        "overall": {
            "n": len(rows),
            "base_accuracy": overall_base,
            "integrated_accuracy": overall_ours,
            "uplift": overall_uplift,
        },
        "partition_ok": tagged == len(rows),
    }
    if "where" in per_tag:
        report["where_uplift_beats_overall"] = bool(
            per_tag["where"]["uplift"] >= overall_uplift)
    return report


# ---------------------------------------------------------------------------
# case dumps


def _top3(alpha: np.ndarray) -> list[list[float]]:
    order = np.argsort(-alpha, kind="stable")[:3]
    return [[int(i), float(alpha[i])] for i in order]


def _nli_case_details(model: IntegratedNLIModel, e) -> dict:
    r_rows, base_logits = encode_pair_batch(model.base, [(e.s1, e.s2)])
    r_t = ad.take_row(r_rows, 0)
    alpha1, _ = attend(model.fusion, r_t, _feature_rows(e.vf1))
    alpha2, _ = attend(model.fusion, r_t, _feature_rows(e.vf2))
    int_logits = model.logits([e]).data[0]
    return {
        "base_logits": [float(x) for x in base_logits.data[0]],
        "integrated_logits": [float(x) for x in int_logits],
        "retrieval": [
            {"side": "premise", "image": e.vf1.source_id,
             "score": e.vf1.retrieval_score,
             "top_attention": _top3(alpha1.data)},
            {"side": "hypothesis", "image": e.vf2.source_id,
             "score": e.vf2.retrieval_score,
             "top_attention": _top3(alpha2.data)},
        ],
    }


def _rc_case_details(model: IntegratedRCModel, e) -> dict:
    r_p, _, _, base_logits = rc_encode_batch(
        model.base, [e.passage], [e.question], [e.choices])
    alpha, _ = attend_late_fusion(model.fusion, ad.take_row(r_p, 0),
                                  e.sent_globals)
    int_logits = model.logits([e]).data[0]
    return {
        "base_logits": [float(x) for x in base_logits.data[0]],
        "integrated_logits": [float(x) for x in int_logits],
        "retrieval": [
            {"sentence": i, "image": rid, "score": float(s),
             "top_attention": _top3(alpha.data)}
            for i, (rid, s) in enumerate(zip(e.sent_ids, e.sent_scores))
        ],
    }


def case_dump(model, samples, k: int, path) -> int:
    """Write the k flipped samples whose gold-class probability moved most.

    A flip means base and integrated models predict different labels. Impact
    is the gain in gold-label probability from base to integrated, so the top
    of the file shows retrieval rescuing the base model's mistakes.
    """
    if k < 0:
        raise ValueError(f"k cannot be negative, got {k}")
    enc = model.encode_samples(samples)
    base = base_predictions(model, enc)
    ours = model.predict(enc)
    nli = isinstance(model, IntegratedNLIModel)
    flips = []
    for i, e in enumerate(enc):
        if base[i] == ours[i]:
            continue
        details = _nli_case_details(model, e) if nli else _rc_case_details(model, e)
        gold = e.label
        p_base = _softmax(np.array(details["base_logits"]))[gold]
        p_int = _softmax(np.array(details["integrated_logits"]))[gold]
        s = samples[i]
        entry = {
            "task": model.task,
            "impact": float(p_int - p_base),
            "gold": gold,
            "base_pred": int(base[i]),
            "integrated_pred": int(ours[i]),
            "visual_dependent": bool(s.visual_dependent),
        }
        if nli:
            entry["premise"], entry["hypothesis"] = s.premise, s.hypothesis
        else:
            entry.update(passage=s.passage, question=s.question,
                         choices=list(s.choices), question_type=s.question_type)
        entry.update(details)
        flips.append(entry)
    flips.sort(key=lambda f: -f["impact"])
    picked = flips[:k]
    with open(path, "w", encoding="utf-8") as fh:
        for rank, entry in enumerate(picked):
            fh.write(json.dumps({"rank": rank, **entry}, sort_keys=True) + "\n")
    return len(picked)


# ---------------------------------------------------------------------------
# rendering


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    if v is None:
        return "n/a"
    return str(v)


def render_table(headers: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Aligned monospace table; numbers right-justified to four decimals."""
    cells = [[_fmt(v) for v in row] for row in rows]
    widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
              for i, h in enumerate(headers)]
    def line(parts):
        return "  ".join(p.rjust(w) for p, w in zip(parts, widths))
    out = [line(headers), line(["-" * w for w in widths])]
    out.extend(line(r) for r in cells)
    return "\n".join(out) + "\n"


def summary_table(summary: dict) -> str:
    rows = [[name, v["n"], v["base_accuracy"], v["integrated_accuracy"],
             v["uplift"]] for name, v in summary.items()]
    return render_table(
        ["subset", "n", "base", "integrated", "uplift"], rows)


def score_table(report: dict) -> str:
    rows = []
    for b in report["buckets"]:
        hi = "inf" if b["high"] is None else _fmt(b["high"])
        rows.append([f"[{_fmt(b['low'])},{hi})", b["n"], b["base_accuracy"],
                     b["integrated_accuracy"], b["uplift"]])
    return render_table(["score bucket", "n", "base", "integrated", "uplift"],
                        rows)


def size_table(report: dict) -> str:
    rows = [[c["train_size"], c["test_size"], c["accuracy"],
             c.get("visual_accuracy")] for c in report["cells"]]
    return render_table(["train size", "test size", "accuracy", "vis subset"],
                        rows)


def qtype_table(report: dict) -> str:
    rows = [[tag, v["n"], v["base_accuracy"], v["integrated_accuracy"],
             v["uplift"]] for tag, v in report["types"].items()]
    o = report["overall"]
    rows.append(["overall", o["n"], o["base_accuracy"],
                 o["integrated_accuracy"], o["uplift"]])
    return render_table(["type", "n", "base", "integrated", "uplift"], rows)
