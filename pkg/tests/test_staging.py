"""Stage protocol: freeze exactness, ordering, restore, and base equivalence."""

import json
import os

import numpy as np
import pytest

import visfuse.autodiff as ad
from visfuse.encoders import ImageEncoderParams, TextEncoderParams
from visfuse.fusion import FusionParams
from visfuse.imagebase import build_index
from visfuse.nlu import NLIBaseModel, RCBaseModel
from visfuse.retrieval_training import RetrievalTrainConfig
from visfuse.staging import (IntegratedNLIModel, IntegratedRCModel, StageConfig,
                             TrainRun, apply_freeze, base_predictions,
                             integrate, run_stage, stage_checkpoint,
                             stage_manifest)
from visfuse.synthworld import (gen_imagebase, gen_nli_dataset, gen_rc_dataset,
                                world_vocab)

JOINT = 16
HIDDEN = 16
EMBED = 8


@pytest.fixture(scope="module")
def world():
    records, pairs = gen_imagebase(seed=11, m=150)
    return records, pairs, world_vocab()


@pytest.fixture(scope="module")
def nli_data(world):
    records, _, _ = world
    samples = gen_nli_dataset(seed=3, n=140, records=records)
    return samples[:100], samples[100:]


@pytest.fixture(scope="module")
def rc_data(world):
    records, _, _ = world
    samples = gen_rc_dataset(seed=4, n=90, records=records)
    return samples[:60], samples[60:]


def make_nli_model(world, base_seed=0):
    records, _, vocab = world
    base = NLIBaseModel.create(vocab.size, vocab.id_of("<sep>"),
                               embed_dim=EMBED, hidden=HIDDEN, seed=base_seed)
    text = TextEncoderParams.create(vocab.size, EMBED, HIDDEN, JOINT, seed=0)
    image = ImageEncoderParams.create(34, JOINT, seed=1)
    index = build_index(records, image)
    fusion = FusionParams.create(feat_dim=34, text_dim=HIDDEN, hidden=8, seed=2)
    return integrate(base, text, image, index, fusion, vocab,
                     head_hidden=16, seed=5)


def make_rc_model(world, base_seed=0):
    records, _, vocab = world
    base = RCBaseModel.create(vocab.size, embed_dim=EMBED, hidden=HIDDEN,
                              seed=base_seed)
    text = TextEncoderParams.create(vocab.size, EMBED, HIDDEN, JOINT, seed=0)
    image = ImageEncoderParams.create(34, JOINT, seed=1)
    index = build_index(records, image)
    fusion = FusionParams.create(feat_dim=34, text_dim=HIDDEN, hidden=8, seed=2)
    return integrate(base, text, image, index, fusion, vocab,
                     head_hidden=16, seed=5)


def seed_stage1(run_dir, world):
    records, pairs, vocab = world
    cfg = StageConfig(stage=1, max_epochs=1, patience=5, seed=0)
    rcfg = RetrievalTrainConfig(lr=1e-3, batch_size=32, max_epochs=1, patience=5,
                                seed=0, embed_dim=EMBED, hidden=HIDDEN,
                                joint_dim=JOINT)
    return run_stage(cfg, run_dir, records=records, pairs=pairs,
                     vocab_size=vocab.size, retrieval_cfg=rcfg)


# ---------------------------------------------------------------------------
# configuration defaults and validation


def test_stage_config_defaults():
    s1 = StageConfig(stage=1)
    assert s1.lr == 1e-4 and s1.frozen_prefixes == ()
    s2 = StageConfig(stage=2)
    assert s2.lr == 1e-4
    assert s2.frozen_prefixes == ("nli_base.", "rc_base.", "retrieval.")
    s2u = StageConfig(stage=2, train_retrieval=True)
    assert s2u.frozen_prefixes == ("nli_base.", "rc_base.")
    s3 = StageConfig(stage=3)
    assert s3.lr == 1e-5 and s3.frozen_prefixes == ()
    assert StageConfig(stage=3, lr=2e-5).lr == 2e-5


def test_stage_config_validation():
    with pytest.raises(ValueError):
        StageConfig(stage=0)
    with pytest.raises(ValueError):
        StageConfig(stage=4)
    with pytest.raises(ValueError):
        StageConfig(stage=1, lr=0.0)
    with pytest.raises(ValueError):
        StageConfig(stage=2, frozen_prefixes=())
    with pytest.raises(ValueError):
        StageConfig(stage=1, dropout=1.0)
    with pytest.raises(ValueError):
        StageConfig(stage=1, patience=-1)
    with pytest.raises(ValueError):
        StageConfig(stage=1, batch_size=0)


def test_apply_freeze_marks_exactly_the_prefixed_subtree(world):
    model = make_nli_model(world)
    params = model.params()
    apply_freeze(params, ["nli_base."])
    for p in params:
        assert p.trainable == (not p.name.startswith("nli_base."))
    apply_freeze(params, [])
    assert all(p.trainable for p in params)
    apply_freeze(params, ["nli_base.", "retrieval."])
    frozen = {p.name for p in params if not p.trainable}
    assert frozen == {p.name for p in params
                      if p.name.startswith(("nli_base.", "retrieval."))}
    assert any(p.name.startswith("fusion.") and p.trainable for p in params)


# ---------------------------------------------------------------------------
# integration wiring


def test_integrate_rejects_dimension_mismatches(world):
    records, _, vocab = world
    base = NLIBaseModel.create(vocab.size, vocab.id_of("<sep>"),
                               embed_dim=EMBED, hidden=HIDDEN, seed=0)
    text = TextEncoderParams.create(vocab.size, EMBED, HIDDEN, JOINT, seed=0)
    image = ImageEncoderParams.create(34, JOINT, seed=1)
    index = build_index(records, image)
    bad_fusion = FusionParams.create(feat_dim=12, text_dim=HIDDEN, hidden=8)
    with pytest.raises(ValueError, match="feature"):
        integrate(base, text, image, index, bad_fusion, vocab)
    bad_text_dim = FusionParams.create(feat_dim=34, text_dim=HIDDEN + 2, hidden=8)
    with pytest.raises(ValueError, match="text"):
        integrate(base, text, image, index, bad_text_dim, vocab)
    narrow_text = TextEncoderParams.create(vocab.size, EMBED, HIDDEN, JOINT * 2,
                                           seed=0)
    good_fusion = FusionParams.create(feat_dim=34, text_dim=HIDDEN, hidden=8)
    with pytest.raises(ValueError, match="joint|dims"):
        integrate(base, narrow_text, image, index, good_fusion, vocab)
    with pytest.raises(TypeError):
        integrate("not a model", text, image, index, good_fusion, vocab)


def test_integrated_nli_matches_base_predictions_exactly(world, nli_data):
    model = make_nli_model(world)
    train, dev = nli_data
    enc = model.encode_samples(train)
    assert len(enc) == len(train)
    ours = model.predict(enc)
    theirs = base_predictions(model, enc)
    np.testing.assert_array_equal(ours, theirs)


def test_integrated_rc_matches_base_scores_bitwise(world, rc_data):
    from visfuse.nlu import rc_forward_batch

    model = make_rc_model(world)
    train, _ = rc_data
    enc = model.encode_samples(train[:40])
    for e in enc:
        assert e.sent_globals.ndim == 2 and e.sent_globals.shape[1] == 34
        assert e.sent_scores.shape == (e.sent_globals.shape[0],)
    ours = model.logits(enc).data
    theirs = rc_forward_batch(model.base, [e.passage for e in enc],
                              [e.question for e in enc],
                              [e.choices for e in enc]).data
    np.testing.assert_array_equal(ours, theirs)
    np.testing.assert_array_equal(model.predict(enc), base_predictions(model, enc))


# ---------------------------------------------------------------------------
# stage ordering and checkpoints


def test_stage_order_is_enforced(tmp_path, world, nli_data):
    model = make_nli_model(world)
    train, dev = nli_data
    cfg = StageConfig(stage=2, max_epochs=0)
    with pytest.raises(FileNotFoundError, match="stage1"):
        run_stage(cfg, tmp_path, model=model, train_samples=train[:10],
                  dev_samples=dev[:10])
    cfg3 = StageConfig(stage=3, max_epochs=0)
    with pytest.raises(FileNotFoundError, match="stage2"):
        run_stage(cfg3, tmp_path, model=model, train_samples=train[:10],
                  dev_samples=dev[:10])


def test_stage2_can_opt_into_random_retrieval(tmp_path, world, nli_data):
    model = make_nli_model(world)
    train, dev = nli_data
    cfg = StageConfig(stage=2, max_epochs=0, allow_random_retrieval=True)
    run = run_stage(cfg, tmp_path, model=model, train_samples=train[:10],
                    dev_samples=dev[:10])
    assert os.path.exists(run.checkpoint)
    manifest = json.load(open(stage_manifest(tmp_path, 2)))
    assert manifest["random_retrieval"] is True
    # stage 3 still refuses: the override only covers skipping stage 1
    cfg3 = StageConfig(stage=3, max_epochs=0, allow_random_retrieval=True)
    os.remove(run.checkpoint)
    with pytest.raises(FileNotFoundError):
        run_stage(cfg3, tmp_path, model=model, train_samples=train[:10],
                  dev_samples=dev[:10])


def test_stage1_writes_checkpoint_and_manifest(tmp_path, world):
    run = seed_stage1(tmp_path, world)
    assert run.stage == 1
    assert os.path.exists(stage_checkpoint(tmp_path, 1))
    arrays = ad.load_checkpoint(stage_checkpoint(tmp_path, 1))
    assert all(name.startswith("retrieval.") for name in arrays)
    assert any(name.startswith("retrieval.text.") for name in arrays)
    assert any(name.startswith("retrieval.image.") for name in arrays)
    manifest = json.load(open(stage_manifest(tmp_path, 1)))
    assert manifest["stage"] == 1
    assert len(manifest["history"]) == len(run.history) == 1
    assert manifest["stop_reason"] == run.stop_reason
    recalls = [h["dev_recall_at_1"] for h in run.history]
    assert run.best_metric == max(recalls)


def test_stage2_freezes_base_and_retrieval_bitwise(tmp_path, world, nli_data):
    seed_stage1(tmp_path, world)
    model = make_nli_model(world)
    train, dev = nli_data
    cfg = StageConfig(stage=2, lr=1e-3, max_epochs=2, patience=5, batch_size=16,
                      dropout=0.1, seed=9)
    run = run_stage(cfg, tmp_path, model=model, train_samples=train,
                    dev_samples=dev)

    # frozen subtrees keep exactly the values loaded from stage 1
    ckpt1 = ad.load_checkpoint(stage_checkpoint(tmp_path, 1))
    for p in model.params():
        if p.name.startswith("retrieval."):
            np.testing.assert_array_equal(p.data, ckpt1[p.name])
    fresh_base = NLIBaseModel.create(model.vocab.size, model.base.sep_id,
                                     embed_dim=EMBED, hidden=HIDDEN, seed=0)
    assert ad.checksum(model.base.params()) == ad.checksum(fresh_base.params())

    # the new pathway actually moved
    fresh = make_nli_model(world)
    assert ad.checksum(model.fusion.params()) != ad.checksum(fresh.fusion.params())
    assert ad.checksum(model.head.params()) != ad.checksum(fresh.head.params())

    assert os.path.exists(stage_checkpoint(tmp_path, 2))
    accs = [h["dev_accuracy"] for h in run.history]
    assert run.best_metric == max(accs)
    assert run.history[0]["epoch"] == 0 and len(run.history) == 3
    manifest = json.load(open(stage_manifest(tmp_path, 2)))
    assert manifest["task"] == "nli"
    assert manifest["config"]["frozen_prefixes"] == ["nli_base.", "rc_base.",
                                                     "retrieval."]


def test_zero_epoch_stage_restores_the_exact_input(tmp_path, world, nli_data):
    seed_stage1(tmp_path, world)
    model = make_nli_model(world)
    train, dev = nli_data
    before = {p.name: p.data.copy() for p in model.params()}
    ckpt1 = ad.load_checkpoint(stage_checkpoint(tmp_path, 1))
    cfg = StageConfig(stage=2, max_epochs=0)
    run = run_stage(cfg, tmp_path, model=model, train_samples=train[:10],
                    dev_samples=dev[:10])
    for p in model.params():
        want = ckpt1.get(p.name, before[p.name])
        np.testing.assert_array_equal(p.data, want)
    assert run.stop_reason == "max_epochs"
    assert [h["epoch"] for h in run.history] == [0]
    assert run.best_epoch == 0


def test_patience_zero_stops_after_first_flat_epoch(tmp_path, world, nli_data):
    seed_stage1(tmp_path, world)
    model = make_nli_model(world)
    train, dev = nli_data
    # a vanishing step cannot move dev accuracy, so epoch 1 never improves
    cfg = StageConfig(stage=2, lr=1e-12, dropout=0.0, patience=0, max_epochs=10)
    run = run_stage(cfg, tmp_path, model=model, train_samples=train[:20],
                    dev_samples=dev[:10])
    assert run.stop_reason == "patience"
    assert [h["epoch"] for h in run.history] == [0, 1]


def test_stage3_loads_stage2_and_can_train_everything(tmp_path, world, rc_data):
    seed_stage1(tmp_path, world)
    model = make_rc_model(world)
    train, dev = rc_data
    cfg2 = StageConfig(stage=2, lr=1e-3, max_epochs=1, batch_size=16, seed=1)
    run_stage(cfg2, tmp_path, model=model, train_samples=train, dev_samples=dev)
    after2 = ad.checksum(model.params())

    # stage 3 must restore the stage-2 parameter set before touching anything
    model.head.phi_r.w1.data += 1.0
    cfg3 = StageConfig(stage=3, max_epochs=0)
    run = run_stage(cfg3, tmp_path, model=model, train_samples=train,
                    dev_samples=dev)
    assert ad.checksum(model.params()) == after2
    assert os.path.exists(stage_checkpoint(tmp_path, 3))

    cfg3b = StageConfig(stage=3, lr=1e-4, max_epochs=1, batch_size=16, seed=2)
    run_stage(cfg3b, tmp_path, model=model, train_samples=train,
              dev_samples=dev)
    assert all(p.trainable for p in model.params())

    # stage 3 gradient flow: the loss reaches the base, but the retrieval
    # encoders sit behind a hard argmax and stay out of reach
    from visfuse.nlu import softmax_xent

    params = model.params()
    enc = model.encode_samples(train[:8])
    tape = ad.Tape()
    logits = model.logits(enc, tape)
    loss = softmax_xent(logits, [e.label for e in enc])
    ad.Adam.zero_grad(params)
    ad.backward(tape, loss)
    assert any(p.name.startswith("rc_base.") and np.any(p.grad) for p in params)
    assert any(p.name.startswith("fusion.") and np.any(p.grad) for p in params)
    assert all(not np.any(p.grad) for p in params
               if p.name.startswith("retrieval."))


def test_runs_are_byte_deterministic(tmp_path, world, nli_data):
    train, dev = nli_data
    blobs = []
    for sub in ("a", "b"):
        d = tmp_path / sub
        seed_stage1(d, world)
        model = make_nli_model(world)
        cfg = StageConfig(stage=2, lr=1e-3, max_epochs=1, batch_size=16, seed=3)
        run_stage(cfg, d, model=model, train_samples=train[:40],
                  dev_samples=dev[:20])
        blobs.append((
            open(stage_checkpoint(d, 1), "rb").read(),
            open(stage_checkpoint(d, 2), "rb").read(),
            open(stage_manifest(d, 2), "rb").read(),
        ))
    assert blobs[0] == blobs[1]


def test_run_stage_argument_validation(tmp_path, world, nli_data):
    records, pairs, vocab = world
    with pytest.raises(ValueError, match="stage 1 needs"):
        run_stage(StageConfig(stage=1), tmp_path)
    seed_stage1(tmp_path, world)
    with pytest.raises(ValueError, match="needs model"):
        run_stage(StageConfig(stage=2), tmp_path)
