"""End-to-end acceptance: one criterion per test, one PASS/FAIL line each.

Heavy criteria share a session fixture that trains the full pipeline at
reference scale (2,000-record world, seed 7). Light criteria (gradients,
retrieval oracle, fusion properties, determinism) run standalone.
"""

import json
import os
import shutil
import time

import numpy as np
import pytest

import visfuse.autodiff as ad
from visfuse import reports
from visfuse.cli import main as cli_main
from visfuse.encoders import (GRUParams, ImageEncoderParams, TextEncoderParams,
                              encode_text, gru_cell)
from visfuse.fusion import FusionParams, attend
from visfuse.heads import NLIHeadParams, RCHeadParams, nli_score, rc_score
from visfuse.imagebase import (ImageRecord, ImagebaseIndex, VisualFeatureSet,
                               build_index, retrieve, retrieve_topk)
from visfuse.nlu import (NLIBaseModel, PretrainConfig, RCBaseModel,
                         pretrain_nli_base, pretrain_rc_base)
from visfuse.retrieval_training import RetrievalTrainConfig
from visfuse.staging import (StageConfig, base_predictions, integrate,
                             run_stage, stage_checkpoint)
from visfuse.synthworld import (gen_imagebase, gen_nli_dataset, gen_rc_dataset,
                                world_vocab)


def check(num: int, name: str, ok: bool, detail: str) -> None:
    """The one visible line per criterion, then the actual assertion."""
    print(f"\ncriterion {num:2d} {name}: {'PASS' if ok else 'FAIL'} ({detail})")
    assert ok, f"criterion {num} {name}: {detail}"


# ---------------------------------------------------------------------------
# criterion 1: gradient fidelity


GRAD_TOL = 1e-4


def _param_grad_err(build_scalar, param, rng, eps=1e-5, n_coords=6) -> float:
    """Taped gradient of one parameter vs central differences at a few
    randomly chosen coordinates; returns the worst relative error."""
    tape = ad.Tape()
    out = build_scalar(tape)
    ad.backward(tape, out)
    g = param.grad.copy()
    flat = param.data.ravel()
    idxs = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
    worst = 0.0
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(build_scalar(None).data)
        flat[i] = orig - eps
        lo = float(build_scalar(None).data)
        flat[i] = orig
        fd = (hi - lo) / (2.0 * eps)
        ga = float(g.ravel()[i])
        worst = max(worst, abs(ga - fd) / max(1.0, abs(ga), abs(fd)))
    return worst


def _run_grad_suite(name, draw, n_points=100, retries=4):
    """draw(rng) -> (input_fn, point, param_fn, param) where input_fn feeds
    ad.grad_check and param_fn/param feed _param_grad_err; either side may be
    None. Points landing on a ReLU kink break central differences, so a
    failing point is redrawn; a systematic gradient bug fails every draw."""
    rng = np.random.default_rng(hash(name) % (2**32))
    first_try = 0
    worst = 0.0
    for _ in range(n_points):
        ok = False
        err = float("inf")
        for attempt in range(retries):
            input_fn, point, param_fn, param = draw(rng)
            err = 0.0
            if input_fn is not None:
                err = ad.grad_check(input_fn, point)
            if param_fn is not None:
                err = max(err, _param_grad_err(param_fn, param, rng))
            if err < GRAD_TOL:
                first_try += attempt == 0
                worst = max(worst, err)
                ok = True
                break
        if not ok:
            return False, f"{name} worst {err:.2e} after {retries} draws"
    if first_try < 0.9 * n_points:
        return False, f"{name} only {first_try}/{n_points} passed first draw"
    return True, f"{name} worst {worst:.2e}"


def _draw_gru(rng):
    p = GRUParams.create("g.", 5, 4, rng)
    h0 = rng.normal(size=4)
    x0 = rng.normal(size=5)
    w = rng.normal(size=4)
    which = rng.integers(3)
    if which == 0:   # input side
        fn = lambda x: ad.dot(gru_cell(p, x, ad.constant(h0)), ad.constant(w))
        return fn, x0, None, None
    if which == 1:   # previous state side
        fn = lambda h: ad.dot(gru_cell(p, ad.constant(x0), h), ad.constant(w))
        return fn, h0, None, None
    param = p.params()[int(rng.integers(9))]
    param_fn = lambda tape: ad.dot(
        gru_cell(p, ad.constant(x0), ad.constant(h0), tape), ad.constant(w))
    return None, None, param_fn, param


def _draw_encode_text(rng):
    p = TextEncoderParams.create(12, embed_dim=4, hidden=3, joint_dim=4,
                                 seed=int(rng.integers(2**31)))
    ids = rng.integers(0, 12, size=int(rng.integers(2, 7))).tolist()
    w = rng.normal(size=4)
    param = p.params()[int(rng.integers(len(p.params())))]
    param_fn = lambda tape: ad.dot(encode_text(p, ids, tape), ad.constant(w))
    return None, None, param_fn, param


def _draw_attend(rng):
    fp = FusionParams.create(feat_dim=5, text_dim=6, hidden=4,
                             seed=int(rng.integers(2**31)))
    rows = rng.normal(size=(int(rng.integers(1, 5)), 5))
    r0 = rng.normal(size=6)
    w = rng.normal(size=5)

    def input_fn(r_t):
        _, r_v = attend(fp, r_t, rows)
        return ad.dot(r_v, ad.constant(w))

    param = fp.params()[int(rng.integers(len(fp.params())))]

    def param_fn(tape):
        _, r_v = attend(fp, ad.constant(r0), rows, tape)
        return ad.dot(r_v, ad.constant(w))

    return input_fn, r0, param_fn, param


def _vf(rng, k=2, feat=5):
    return VisualFeatureSet(objects=rng.normal(size=(k, feat)),
                            global_feat=rng.normal(size=feat),
                            source_id=0, retrieval_score=0.5)


def _draw_nli_score(rng):
    seed = int(rng.integers(2**31))
    fp = FusionParams.create(feat_dim=5, text_dim=6, hidden=4, seed=seed)
    head = NLIHeadParams.create(feat_dim=5, text_dim=6, hidden=8, seed=seed)
    vf1, vf2 = _vf(rng), _vf(rng)
    r0 = rng.normal(size=6)
    w = rng.normal(size=3)

    def input_fn(r_t):
        return ad.dot(nli_score(r_t, vf1, vf2, fp, head), ad.constant(w))

    pool = fp.params() + head.params()
    param = pool[int(rng.integers(len(pool)))]

    def param_fn(tape):
        return ad.dot(nli_score(ad.constant(r0), vf1, vf2, fp, head, tape),
                      ad.constant(w))

    return input_fn, r0, param_fn, param


def _draw_rc_score(rng):
    seed = int(rng.integers(2**31))
    fp = FusionParams.create(feat_dim=5, text_dim=6, hidden=4, seed=seed)
    head = RCHeadParams.create(feat_dim=5, qc_dim=7, hidden=4, seed=seed)
    globals_ = rng.normal(size=(int(rng.integers(1, 5)), 5))
    r_qc = rng.normal(size=7)
    p_t = float(rng.normal())
    r0 = rng.normal(size=6)

    def input_fn(r_p):
        return rc_score(r_p, ad.constant(r_qc), ad.constant(p_t), globals_,
                        fp, head)

    pool = fp.params() + head.params()
    param = pool[int(rng.integers(len(pool)))]

    def param_fn(tape):
        return rc_score(ad.constant(r0), ad.constant(r_qc), ad.constant(p_t),
                        globals_, fp, head, tape)

    return input_fn, r0, param_fn, param


def test_criterion_1_gradient_fidelity():
    start = time.time()
    suites = [
        ("encode_text", _draw_encode_text),
        ("gru_cell", _draw_gru),
        ("attend", _draw_attend),
        ("nli_score", _draw_nli_score),
        ("rc_score", _draw_rc_score),
    ]
    details = []
    all_ok = True
    for name, draw in suites:
        ok, detail = _run_grad_suite(name, draw)
        all_ok = all_ok and ok
        details.append(detail)
    elapsed = time.time() - start
    if elapsed >= 60.0:
        all_ok = False
        details.append(f"took {elapsed:.1f}s (budget 60s)")
    check(1, "gradient fidelity", all_ok,
          f"{'; '.join(details)}; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: retrieval matches brute force


def _dummy_records(m: int) -> list[ImageRecord]:
    return [ImageRecord(id=i, raw_global=np.zeros(3),
                        raw_objects=np.zeros((1, 3))) for i in range(m)]


def test_criterion_2_retrieval_oracle():
    rng = np.random.default_rng(2024)
    failures = 0
    detail = ""
    for case in range(1000):
        m = int(rng.integers(2, 41))
        j = int(rng.integers(2, 13))
        if case % 2 == 0:
            # continuous scores: orderings are well separated
            emb = rng.normal(size=(j, m))
            q = rng.normal(size=j)
        else:
            # small-integer scores are exact in f64 no matter the summation
            # order, so genuine ties occur and both methods see them equal
            emb = rng.integers(-3, 4, size=(j, m)).astype(np.float64)
            q = rng.integers(-3, 4, size=j).astype(np.float64)
            if not np.any(q):
                q[0] = 1.0
            a, b = rng.choice(m, size=2, replace=False)
            emb[:, b] = emb[:, a]
        index = ImagebaseIndex(_dummy_records(m), emb)
        scores = [float(q @ emb[:, i]) for i in range(m)]
        # independent brute force: python sort with explicit tie rule
        want_best = min(range(m), key=lambda i: (-scores[i], i))
        got_id, got_score = retrieve(index, q)
        # ids must match exactly; scores only to BLAS summation-order noise
        if got_id != want_best or abs(got_score - scores[want_best]) > 1e-9:
            failures += 1
            detail = f"case {case}: retrieve {got_id} want {want_best}"
            continue
        k = int(rng.integers(1, m + 3))
        want_order = sorted(range(m), key=lambda i: (-scores[i], i))[:min(k, m)]
        got = retrieve_topk(index, q, k)
        if [i for i, _ in got] != want_order:
            failures += 1
            detail = f"case {case}: topk {got} want {want_order}"
    check(2, "retrieval oracle", failures == 0,
          detail or "1000 instances exact, ties included")


# ---------------------------------------------------------------------------
# criterion 10: fusion properties


def test_criterion_10_fusion_properties():
    rng = np.random.default_rng(10)
    n_cases = 10_000
    bad = ""
    for case in range(n_cases):
        feat = int(rng.integers(2, 9))
        n = int(rng.integers(1, 7))
        fp = FusionParams.create(feat_dim=feat, text_dim=4, hidden=3,
                                 seed=int(rng.integers(2**31)))
        r_t = ad.constant(rng.normal(size=4))
        rows = rng.normal(size=(n, feat))
        alpha, r_v = attend(fp, r_t, rows)
        a = alpha.data
        if not (np.all(a >= 0.0) and abs(a.sum() - 1.0) < 1e-9):
            bad = f"case {case}: alpha not a probability vector"
            break
        perm = rng.permutation(n)
        alpha_p, r_v_p = attend(fp, r_t, rows[perm])
        if not np.allclose(r_v_p.data, r_v.data, rtol=0, atol=1e-10):
            bad = f"case {case}: r_vta changed under permutation"
            break
        if not np.allclose(alpha_p.data, a[perm], rtol=0, atol=1e-10):
            bad = f"case {case}: alpha rows did not follow the permutation"
            break
        # growing the imagebase can only raise the best retrieval score
        m = int(rng.integers(1, 6))
        emb = rng.normal(size=(3, m + 1))
        small = ImagebaseIndex(_dummy_records(m), emb[:, :m])
        big = ImagebaseIndex(_dummy_records(m + 1), emb)
        q = rng.normal(size=3)
        _, s_small = retrieve(small, q)
        _, s_big = retrieve(big, q)
        # gemv rounding differs with matrix width; allow last-ulp noise
        if s_big < s_small - 1e-12 * max(1.0, abs(s_small)):
            bad = f"case {case}: top-1 score fell when the imagebase grew"
            break
    check(10, "fusion properties", bad == "", bad or f"{n_cases} cases")


# ---------------------------------------------------------------------------
# criterion 9: byte-identical metrics across reruns


def _tiny_cli_run(root: str) -> bytes:
    os.makedirs(root, exist_ok=True)
    conf = os.path.join(root, "tiny.conf")
    with open(conf, "w", encoding="utf-8") as fh:
        fh.write("retrieval.max_epochs = 1\nbase.max_epochs = 1\n"
                 "stage2.max_epochs = 1\n")

    def cli(*argv):
        code = cli_main(["--root", root, "--config", conf, *argv])
        assert code == 0, f"cli {argv} exited {code}"

    cli("gen-data", "--seed", "3", "--m", "50", "--nli-n", "80", "--rc-n", "60")
    cli("train-retrieval", "--seed", "3")
    cli("build-index")
    cli("pretrain-base", "--task", "rc", "--seed", "3")
    cli("integrate", "--task", "rc")
    cli("finetune", "--task", "rc", "--stage", "2", "--seed", "3")
    cli("eval", "--task", "rc", "--split", "test")
    path = os.path.join(root, "run", "metrics_rc_test_stage2.jsonl")
    return open(path, "rb").read()


def test_criterion_9_determinism(tmp_path):
    a = _tiny_cli_run(str(tmp_path / "a"))
    b = _tiny_cli_run(str(tmp_path / "b"))
    check(9, "determinism", a == b and len(a) > 0,
          f"two pipeline runs, {len(a)} metric bytes each")
