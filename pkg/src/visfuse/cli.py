"""Command-line surface: data generation through staged training and reports.

Subcommands compose into a pipeline:

    visfuse gen-data --m 500 --nli-n 600 --rc-n 450
    visfuse train-retrieval
    visfuse build-index
    visfuse pretrain-base --task rc
    visfuse integrate --task rc
    visfuse finetune --task rc --stage 2
    visfuse eval --task rc --split test
    visfuse ablate --what retrieval-score --task rc
    visfuse case-dump --task rc --k 5

Configuration comes from "key = value" files ('#' starts a comment, dotted
keys namespace by module); explicit flags override file values. Output goes
under --root (or $VISFUSE_RUN_DIR), one run directory per --run name. Exit
codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys

import numpy as np

from . import autodiff as ad
from . import reports
from .encoders import ImageEncoderParams, TextEncoderParams, TokenVocab
from .fusion import FusionParams
from .imagebase import (build_index, load_records, save_index, save_records)
from .nlu import (NLIBaseModel, PretrainConfig, RCBaseModel,
                  pretrain_nli_base, pretrain_rc_base)
from .retrieval_training import RetrievalTrainConfig
from .staging import (StageConfig, base_predictions, integrate, run_stage,
                      stage_checkpoint)
from .synthworld import (AlignedPairs, gen_imagebase, gen_nli_dataset,
                         gen_rc_dataset, read_samples, write_samples)


class UsageError(Exception):
    """Bad invocation or malformed configuration; maps to exit code 2."""


# ---------------------------------------------------------------------------
# configuration plumbing


def load_config_file(path) -> dict:
    """Parse "key = value" lines; values read as JSON when possible."""
    cfg: dict = {}
    try:
        lines = open(path, encoding="utf-8").readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{no}: expected 'key = value', got {raw.strip()!r}")
        key, val = line.split("=", 1)
        key, val = key.strip(), val.strip()
        if not key:
            raise UsageError(f"{path}:{no}: empty key")
        try:
            cfg[key] = json.loads(val)
        except json.JSONDecodeError:
            cfg[key] = val
    return cfg


def pick(flag, cfg: dict, key: str, default):
    """Resolution order: explicit CLI flag, config file entry, default."""
    if flag is not None:
        return flag
    if key in cfg:
        return cfg[key]
    return default


def git_blob_hash(path) -> str:
    """sha1 over "blob <len>\\0" + content, the way git names file contents."""
    data = open(path, "rb").read()
    h = hashlib.sha1()
    h.update(b"blob %d\x00" % len(data))
    h.update(data)
    return h.hexdigest()


def _record_run(run_dir, command: str, config_used: dict, inputs: list) -> None:
    """Merge this command's config echo and input hashes into run_config.json."""
    path = os.path.join(run_dir, "run_config.json")
    log = {}
    if os.path.exists(path):
        log = json.load(open(path, encoding="utf-8"))
    log[command] = {
        "config": config_used,
        "inputs": {os.path.basename(str(p)): git_blob_hash(p) for p in inputs},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(log, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _root(args) -> str:
    return args.root or os.environ.get("VISFUSE_RUN_DIR") or "runs"


def _run_dir(args) -> str:
    d = os.path.join(_root(args), args.run)
    os.makedirs(d, exist_ok=True)
    return d


def _data_dir(args, create: bool = False) -> str:
    d = args.data or os.path.join(_root(args), "data")
    if create:
        os.makedirs(d, exist_ok=True)
    return d


def _seed(args, cfg) -> int:
    return int(pick(args.seed, cfg, "seed", 0))


# ---------------------------------------------------------------------------
# data files


def _data_paths(data_dir: str) -> dict:
    return {
        "records": os.path.join(data_dir, "records.vrc"),
        "pairs": os.path.join(data_dir, "pairs.json"),
        "vocab": os.path.join(data_dir, "vocab.txt"),
        **{f"{task}_{split}": os.path.join(data_dir, f"{task}_{split}.jsonl")
           for task in ("nli", "rc") for split in ("train", "dev", "test")},
    }


def _split3(xs):
    a = int(0.7 * len(xs))
    b = int(0.85 * len(xs))
    return xs[:a], xs[a:b], xs[b:]


def _load_world(data_dir: str):
    paths = _data_paths(data_dir)
    records = load_records(paths["records"])
    vocab = TokenVocab.load(paths["vocab"])
    raw = json.load(open(paths["pairs"], encoding="utf-8"))
    pairs = AlignedPairs(
        train=[(list(ids), int(rid)) for ids, rid in raw["train"]],
        dev=[(list(ids), int(rid)) for ids, rid in raw["dev"]],
    )
    return records, pairs, vocab


def cmd_gen_data(args, cfg) -> int:
    seed = _seed(args, cfg)
    m = int(pick(args.m, cfg, "world.m", 300))
    nli_n = int(pick(args.nli_n, cfg, "nli.n", 600))
    rc_n = int(pick(args.rc_n, cfg, "rc.n", 450))
    data_dir = _data_dir(args, create=True)
    paths = _data_paths(data_dir)

    records, pairs = gen_imagebase(seed, m)
    from .synthworld import world_vocab
    vocab = world_vocab()
    nli = gen_nli_dataset(seed + 1, nli_n, records)
    rc = gen_rc_dataset(seed + 2, rc_n, records)

    save_records(paths["records"], records)
    vocab.save(paths["vocab"])
    with open(paths["pairs"], "w", encoding="utf-8") as fh:
        json.dump({"train": pairs.train, "dev": pairs.dev}, fh, sort_keys=True)
        fh.write("\n")
    for task, samples in (("nli", nli), ("rc", rc)):
        for split, part in zip(("train", "dev", "test"), _split3(samples)):
            write_samples(paths[f"{task}_{split}"], part)

    used = {"seed": seed, "world.m": m, "nli.n": nli_n, "rc.n": rc_n}
    manifest = {
        "config": used,
        "counts": {"records": m, "nli": nli_n, "rc": rc_n},
        "files": {os.path.basename(p): git_blob_hash(p)
                  for p in sorted(paths.values())},
    }
    with open(os.path.join(data_dir, "data_manifest.json"), "w",
              encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {m} records, {nli_n} nli and {rc_n} rc samples to {data_dir}")
    return 0


# ---------------------------------------------------------------------------
# training steps


def cmd_train_retrieval(args, cfg) -> int:
    data_dir = _data_dir(args)
    run_dir = _run_dir(args)
    records, pairs, vocab = _load_world(data_dir)
    seed = _seed(args, cfg)
    rcfg = RetrievalTrainConfig(
        lr=float(pick(args.lr, cfg, "retrieval.lr", 1e-4)),
        margin=float(pick(None, cfg, "retrieval.margin", 0.2)),
        batch_size=int(pick(None, cfg, "retrieval.batch_size", 64)),
        max_epochs=int(pick(args.max_epochs, cfg, "retrieval.max_epochs", 60)),
        patience=int(pick(args.patience, cfg, "retrieval.patience", 8)),
        seed=seed,
        embed_dim=int(pick(None, cfg, "retrieval.embed_dim", 32)),
        hidden=int(pick(None, cfg, "retrieval.hidden", 64)),
        joint_dim=int(pick(None, cfg, "retrieval.joint_dim", 64)),
    )
    scfg = StageConfig(stage=1, lr=rcfg.lr, max_epochs=rcfg.max_epochs,
                       patience=rcfg.patience, batch_size=rcfg.batch_size,
                       seed=seed)
    run = run_stage(scfg, run_dir, records=records, pairs=pairs,
                    vocab_size=vocab.size, retrieval_cfg=rcfg)
    _record_run(run_dir, "train-retrieval",
                {"seed": seed, **{f"retrieval.{k}": v
                                  for k, v in vars(rcfg).items()}},
                [_data_paths(data_dir)["records"], _data_paths(data_dir)["pairs"]])
    print(f"stage 1 done: best recall@1 {run.best_metric:.4f} "
          f"at epoch {run.best_epoch} ({run.stop_reason})")
    return 0


def cmd_build_index(args, cfg) -> int:
    data_dir = _data_dir(args)
    run_dir = _run_dir(args)
    records = load_records(_data_paths(data_dir)["records"])
    ckpt = stage_checkpoint(run_dir, 1)
    arrays = ad.load_checkpoint(ckpt)
    image = _image_params_from_arrays(arrays)
    index = build_index(records, image)
    out = os.path.join(run_dir, "imagebase.vib")
    save_index(out, index)
    _record_run(run_dir, "build-index", {}, [ckpt])
    print(f"indexed {len(index)} records into {out}")
    return 0


def _image_params_from_arrays(arrays: dict) -> ImageEncoderParams:
    w = arrays["retrieval.image.w"]
    image = ImageEncoderParams.create(w.shape[1], w.shape[0], seed=0)
    ad.load_arrays_into(image.params(), arrays, strict=True)
    return image


def _text_params_from_arrays(arrays: dict, vocab_size: int) -> TextEncoderParams:
    embed = arrays["retrieval.text.embed"]
    hidden = arrays["retrieval.text.fwd.w_z"].shape[0]
    joint = arrays["retrieval.text.proj"].shape[0]
    text = TextEncoderParams.create(vocab_size, embed.shape[1], hidden, joint,
                                    seed=0)
    ad.load_arrays_into(text.params(), arrays, strict=True)
    return text


def _base_ckpt(run_dir: str, task: str) -> str:
    return os.path.join(run_dir, f"base_{task}.ckpt")


def cmd_pretrain_base(args, cfg) -> int:
    data_dir = _data_dir(args)
    run_dir = _run_dir(args)
    paths = _data_paths(data_dir)
    vocab = TokenVocab.load(paths["vocab"])
    train = read_samples(paths[f"{args.task}_train"])
    dev = read_samples(paths[f"{args.task}_dev"])
    seed = _seed(args, cfg)
    pcfg = PretrainConfig(
        lr=float(pick(args.lr, cfg, "base.lr", 1e-3)),
        batch_size=int(pick(None, cfg, "base.batch_size", 32)),
        max_epochs=int(pick(args.max_epochs, cfg, "base.max_epochs", 30)),
        patience=int(pick(args.patience, cfg, "base.patience", 3)),
        dropout=float(pick(None, cfg, "base.dropout", 0.4)),
        seed=seed,
        embed_dim=int(pick(None, cfg, "base.embed_dim", 32)),
        hidden=int(pick(None, cfg, "base.hidden", 64)),
    )
    fit = pretrain_nli_base if args.task == "nli" else pretrain_rc_base
    model, hist = fit(train, dev, vocab, pcfg)
    ckpt = _base_ckpt(run_dir, args.task)
    ad.save_checkpoint(ckpt, ad.params_to_arrays(model.params()))
    with open(os.path.join(run_dir, f"base_{args.task}.json"), "w",
              encoding="utf-8") as fh:
        json.dump({
            "task": args.task,
            "dev_accuracy": model.dev_accuracy,
            "best_epoch": hist.best_epoch,
            "stop_reason": hist.stop_reason,
            "history": hist.epochs,
            "config": vars(pcfg),
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _record_run(run_dir, f"pretrain-base-{args.task}", vars(pcfg),
                [paths[f"{args.task}_train"], paths[f"{args.task}_dev"]])
    print(f"pretrained {args.task} base: dev accuracy {model.dev_accuracy:.4f}")
    return 0


# ---------------------------------------------------------------------------
# integrated wiring shared by integrate / finetune / eval / reports


def _base_from_arrays(task: str, arrays: dict, vocab: TokenVocab):
    embed = arrays[f"{task}_base.embed"]
    if task == "nli":
        hidden = 2 * arrays["nli_base.fwd.w_z"].shape[0]
        base = NLIBaseModel.create(vocab.size, vocab.id_of("<sep>"),
                                   embed_dim=embed.shape[1], hidden=hidden,
                                   seed=0)
    else:
        hidden = arrays["rc_base.passage.w_z"].shape[0]
        base = RCBaseModel.create(vocab.size, embed_dim=embed.shape[1],
                                  hidden=hidden, seed=0)
    ad.load_arrays_into(base.params(), arrays, strict=True)
    return base


def _build_integrated(args, cfg, task: str, records=None):
    """Reconstruct the integrated model a run's checkpoints describe."""
    data_dir = _data_dir(args)
    run_dir = _run_dir(args)
    paths = _data_paths(data_dir)
    vocab = TokenVocab.load(paths["vocab"])
    if records is None:
        records = load_records(paths["records"])
    arrays1 = ad.load_checkpoint(stage_checkpoint(run_dir, 1))
    text = _text_params_from_arrays(arrays1, vocab.size)
    image = _image_params_from_arrays(arrays1)
    index = build_index(records, image)
    base = _base_from_arrays(task, ad.load_checkpoint(_base_ckpt(run_dir, task)),
                             vocab)
    seed = _seed(args, cfg)
    hidden = (base.w_cls.data.shape[1] if task == "nli"
              else base.w_att.data.shape[0])
    fusion = FusionParams.create(
        feat_dim=index.feat_dim, text_dim=hidden,
        hidden=int(pick(None, cfg, "fusion.hidden", 64)), seed=seed)
    model = integrate(base, text, image, index, fusion, vocab,
                      head_hidden=int(pick(None, cfg, "head.hidden", 64)),
                      seed=seed)
    return model, paths


def _load_splits(paths: dict, task: str):
    return {split: read_samples(paths[f"{task}_{split}"])
            for split in ("train", "dev", "test")}


def cmd_integrate(args, cfg) -> int:
    run_dir = _run_dir(args)
    model, paths = _build_integrated(args, cfg, args.task)
    dev = read_samples(paths[f"{args.task}_dev"])[:100]
    enc = model.encode_samples(dev)
    ours = model.predict(enc)
    theirs = base_predictions(model, enc)
    match = bool(np.array_equal(ours, theirs))
    out = {
        "task": args.task,
        "n_checked": len(dev),
        "predictions_match": match,
    }
    with open(os.path.join(run_dir, f"integrate_{args.task}.json"), "w",
              encoding="utf-8") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _record_run(run_dir, f"integrate-{args.task}", {"seed": _seed(args, cfg)},
                [stage_checkpoint(run_dir, 1), _base_ckpt(run_dir, args.task)])
    if not match:
        print("error: integrated model with silent visual heads diverged "
              "from the base model", file=sys.stderr)
        return 1
    print(f"integrated {args.task}: {len(dev)} base predictions reproduced exactly")
    return 0


def _stage_config(args, cfg, stage: int, seed: int) -> StageConfig:
    # ablate reuses this without finetune's tuning flags, hence getattr
    ns = f"stage{stage}"
    return StageConfig(
        stage=stage,
        lr=pick(getattr(args, "lr", None), cfg, f"{ns}.lr", None),
        dropout=float(pick(None, cfg, f"{ns}.dropout", 0.4)),
        patience=int(pick(getattr(args, "patience", None), cfg,
                          f"{ns}.patience", 3)),
        max_epochs=int(pick(getattr(args, "max_epochs", None), cfg,
                            f"{ns}.max_epochs", 12)),
        batch_size=int(pick(None, cfg, f"{ns}.batch_size", 32)),
        seed=seed,
        train_retrieval=bool(pick(None, cfg, f"{ns}.train_retrieval", False)),
        reembed_imagebase=bool(pick(None, cfg, f"{ns}.reembed_imagebase", True)),
        allow_random_retrieval=bool(
            pick(None, cfg, f"{ns}.allow_random_retrieval", False)),
    )


def _task_dir(run_dir: str, task: str) -> str:
    """Per-task home for stage 2+ artifacts; stage 1 is shared across tasks."""
    d = os.path.join(run_dir, task)
    os.makedirs(d, exist_ok=True)
    return d


def cmd_finetune(args, cfg) -> int:
    run_dir = _run_dir(args)
    task_dir = _task_dir(run_dir, args.task)
    shared1 = stage_checkpoint(run_dir, 1)
    if args.stage == 2 and os.path.exists(shared1):
        shutil.copyfile(shared1, stage_checkpoint(task_dir, 1))
    model, paths = _build_integrated(args, cfg, args.task)
    splits = _load_splits(paths, args.task)
    scfg = _stage_config(args, cfg, args.stage, _seed(args, cfg))
    run = run_stage(scfg, task_dir, model=model, train_samples=splits["train"],
                    dev_samples=splits["dev"])
    prev = stage_checkpoint(task_dir, args.stage - 1)
    _record_run(run_dir, f"finetune-{args.task}-stage{args.stage}",
                {"seed": scfg.seed, f"stage{args.stage}.lr": scfg.lr,
                 f"stage{args.stage}.max_epochs": scfg.max_epochs},
                [prev] if os.path.exists(prev) else [])
    print(f"stage {args.stage} done: best dev accuracy {run.best_metric:.4f} "
          f"at epoch {run.best_epoch} ({run.stop_reason})")
    return 0


def _latest_stage(task_dir: str) -> int:
    for stage in (3, 2):
        if os.path.exists(stage_checkpoint(task_dir, stage)):
            return stage
    raise FileNotFoundError(
        f"no stage 2 or 3 checkpoint under {task_dir}; run finetune first")


def _model_at_stage(args, cfg, task: str, stage: "int | None", records=None):
    run_dir = _run_dir(args)
    task_dir = _task_dir(run_dir, task)
    model, paths = _build_integrated(args, cfg, task, records=records)
    stage = stage or _latest_stage(task_dir)
    if stage < 2:
        raise UsageError("eval needs a stage 2 or 3 checkpoint")
    arrays = ad.load_checkpoint(stage_checkpoint(task_dir, stage))
    ad.load_arrays_into(model.params(), arrays, strict=True)
    model.reembed()
    return model, paths, stage


def _pristine_base(args, task: str, vocab: TokenVocab):
    run_dir = _run_dir(args)
    return _base_from_arrays(task, ad.load_checkpoint(_base_ckpt(run_dir, task)),
                             vocab)


def cmd_eval(args, cfg) -> int:
    run_dir = _run_dir(args)
    model, paths, stage = _model_at_stage(args, cfg, args.task, args.stage)
    samples = read_samples(paths[f"{args.task}_{args.split}"])
    base = _pristine_base(args, args.task, model.vocab)
    rows = reports.eval_rows(model, samples, base=base)
    summary = reports.accuracy_summary(rows)

    lines = []
    for subset, v in summary.items():
        for which in ("base", "integrated"):
            lines.append({
                "kind": "accuracy", "task": args.task, "split": args.split,
                "stage": stage, "model": which, "subset": subset,
                "n": v["n"], "value": v[f"{which}_accuracy"],
            })
    if args.task == "rc":
        qt = reports.breakdown_question_type(rows)
        for tag, v in qt["types"].items():
            for which in ("base", "integrated"):
                lines.append({
                    "kind": "accuracy", "task": args.task, "split": args.split,
                    "stage": stage, "model": which, "subset": f"type:{tag}",
                    "n": v["n"], "value": v[f"{which}_accuracy"],
                })
    out = os.path.join(run_dir, f"metrics_{args.task}_{args.split}_stage{stage}.jsonl")
    with open(out, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(json.dumps(line, sort_keys=True) + "\n")
    _record_run(run_dir, f"eval-{args.task}-{args.split}-stage{stage}",
                {"seed": _seed(args, cfg)},
                [stage_checkpoint(_task_dir(run_dir, args.task), stage),
                 paths[f"{args.task}_{args.split}"]])
    print(reports.summary_table(summary), end="")
    print(f"metrics written to {out}")
    return 0


# ---------------------------------------------------------------------------
# ablations and case dumps


def cmd_ablate(args, cfg) -> int:
    if args.what == "imagebase-size":
        return _ablate_size(args, cfg)
    run_dir = _run_dir(args)
    model, paths, stage = _model_at_stage(args, cfg, args.task, args.stage)
    samples = read_samples(paths[f"{args.task}_test"])
    base = _pristine_base(args, args.task, model.vocab)
    rows = reports.eval_rows(model, samples, base=base)
    if args.what == "retrieval-score":
        report = reports.ablate_retrieval_score(rows)
        table = reports.score_table(report)
        name = f"ablate_retrieval_score_{args.task}"
    else:
        report = reports.breakdown_question_type(rows)
        table = reports.qtype_table(report)
        name = f"breakdown_question_type_{args.task}"
    _write_report(run_dir, name, report, table)
    print(table, end="")
    if "direction_pass" in report:
        print(f"direction_pass: {report['direction_pass']}")
    return 0


def _write_report(run_dir: str, name: str, report: dict, table: str) -> None:
    with open(os.path.join(run_dir, f"{name}.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(run_dir, f"{name}.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)


def _ablate_size(args, cfg) -> int:
    run_dir = _run_dir(args)
    data_dir = _data_dir(args)
    paths = _data_paths(data_dir)
    sizes_arg = pick(args.sizes, cfg, "ablate.sizes", [500, 2000])
    if isinstance(sizes_arg, str):
        sizes = [int(s) for s in sizes_arg.split(",")]
    else:
        sizes = [int(s) for s in sizes_arg]
    all_records = load_records(paths["records"])
    if max(sizes) > len(all_records):
        raise ValueError(
            f"imagebase holds {len(all_records)} records, cannot ablate at "
            f"size {max(sizes)}")
    task = args.task
    splits = None
    vocab_box = {}
    seed = _seed(args, cfg)

    def train_fn(size: int):
        nonlocal splits
        cell_dir = os.path.join(run_dir, f"ablate_size_{task}", f"train{size}")
        os.makedirs(cell_dir, exist_ok=True)
        shutil.copyfile(stage_checkpoint(run_dir, 1),
                        stage_checkpoint(cell_dir, 1))
        model, p = _build_integrated(args, cfg, task,
                                     records=all_records[:size])
        if splits is None:
            splits = _load_splits(p, task)
        scfg = _stage_config(args, cfg, 2, seed)
        run_stage(scfg, cell_dir, model=model, train_samples=splits["train"],
                  dev_samples=splits["dev"])
        vocab_box["vocab"] = model.vocab
        return model

    def eval_fn(model, size: int):
        model.index = build_index(all_records[:size], model.image_enc)
        base = _pristine_base(args, task, vocab_box["vocab"])
        rows = reports.eval_rows(model, splits["test"], base=base)
        summary = reports.accuracy_summary(rows)
        return {
            "accuracy": summary["overall"]["integrated_accuracy"],
            "visual_accuracy": summary["visual_dependent"]["integrated_accuracy"],
            "base_accuracy": summary["overall"]["base_accuracy"],
        }

    report = reports.ablate_imagebase_size(train_fn, eval_fn, sizes)
    table = reports.size_table(report)
    _write_report(run_dir, f"ablate_imagebase_size_{task}", report, table)
    print(table, end="")
    print(f"direction_pass: {report['direction_pass']}")
    return 0


def cmd_case_dump(args, cfg) -> int:
    run_dir = _run_dir(args)
    model, paths, stage = _model_at_stage(args, cfg, args.task, args.stage)
    samples = read_samples(paths[f"{args.task}_test"])
    out = os.path.join(run_dir, f"cases_{args.task}.jsonl")
    n = reports.case_dump(model, samples, args.k, out)
    print(f"dumped {n} flipped cases to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    # global flags accepted before or after the subcommand; SUPPRESS keeps a
    # subcommand from clobbering a value given up front
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="key=value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="global seed")
    common.add_argument("--root", default=argparse.SUPPRESS,
                        help="output root (default $VISFUSE_RUN_DIR or runs/)")
    common.add_argument("--run", default=argparse.SUPPRESS,
                        help="run directory name")
    common.add_argument("--data", default=argparse.SUPPRESS,
                        help="data directory (default <root>/data)")

    parser = argparse.ArgumentParser(
        prog="visfuse", parents=[common],
        description="staged retrieval-and-fusion pipeline over a synthetic world")
    sub = parser.add_subparsers(dest="command")

    def add_parser(name, **kw):
        return sub.add_parser(name, parents=[common], **kw)

    p = add_parser("gen-data", help="generate the synthetic world and tasks")
    p.add_argument("--m", type=int, help="imagebase size")
    p.add_argument("--nli-n", type=int, help="NLI sample count")
    p.add_argument("--rc-n", type=int, help="RC sample count")

    for name in ("train-retrieval", "pretrain-base", "finetune"):
        p = add_parser(name)
        p.add_argument("--lr", type=float)
        p.add_argument("--max-epochs", type=int)
        p.add_argument("--patience", type=int)
        if name != "train-retrieval":
            p.add_argument("--task", choices=("nli", "rc"), required=True)
        if name == "finetune":
            p.add_argument("--stage", type=int, choices=(2, 3), default=2)

    add_parser("build-index", help="embed stored records with the stage-1 encoder")

    p = add_parser("integrate", help="wire the fusion pathway and verify it is silent")
    p.add_argument("--task", choices=("nli", "rc"), required=True)

    p = add_parser("eval", help="score base and integrated models")
    p.add_argument("--task", choices=("nli", "rc"), required=True)
    p.add_argument("--split", choices=("dev", "test"), default="test")
    p.add_argument("--stage", type=int, choices=(2, 3))

    p = add_parser("ablate", help="run one of the analysis grids")
    p.add_argument("--what", required=True,
                   choices=("imagebase-size", "retrieval-score", "question-type"))
    p.add_argument("--task", choices=("nli", "rc"), default="rc")
    p.add_argument("--stage", type=int, choices=(2, 3))
    p.add_argument("--sizes", help="comma-separated imagebase sizes")

    p = add_parser("case-dump", help="write the highest-impact flipped samples")
    p.add_argument("--task", choices=("nli", "rc"), required=True)
    p.add_argument("--stage", type=int, choices=(2, 3))
    p.add_argument("--k", type=int, default=5)
    return parser


DISPATCH = {
    "gen-data": cmd_gen_data,
    "train-retrieval": cmd_train_retrieval,
    "build-index": cmd_build_index,
    "pretrain-base": cmd_pretrain_base,
    "integrate": cmd_integrate,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "case-dump": cmd_case_dump,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    # global flags use SUPPRESS so a subcommand parse can't clobber values
    # given before the subcommand; fill the defaults in by hand instead
    for key, default in (("config", None), ("seed", None), ("root", None),
                         ("run", "run"), ("data", None)):
        if not hasattr(args, key):
            setattr(args, key, default)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        cfg = load_config_file(args.config) if args.config else {}
        return DISPATCH[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, TypeError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
