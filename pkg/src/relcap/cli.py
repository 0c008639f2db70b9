"""``relcap`` command-line entry point.

Every command resolves its configuration (defaults < ``--config`` file <
flags), validates it, writes ``manifest_<command>.json`` into its output
directory and finalizes that manifest when it finishes.  Per-command names
let several commands share one directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

from .config import ConfigError, RunConfig

logger = logging.getLogger("relcap")

EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3


class UsageError(Exception):
    pass


# ----------------------------------------------------------------- manifest


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


class RunManifest:
    """Written at start, rewritten with outputs, end time and status when done."""

    def __init__(self, out: Path, command: str, argv: list[str], cfg: RunConfig, inputs: dict):
        self.path = out / f"manifest_{command}.json"
        self.body = {
            "command": command,
            "argv": argv,
            "config": cfg.to_dict(),
            "seeds": {"run": cfg.seed},
            "inputs": inputs,
            "outputs": [],
            "git_describe": _git_describe(),
            "started_at": _now(),
            "finished_at": None,
            "status": "running",
        }
        _write_json(self.path, self.body)

    def finish(self, outputs: list[str], status: str = "ok", **extra) -> None:
        self.body.update(outputs=sorted(outputs), finished_at=_now(), status=status, **extra)
        _write_json(self.path, self.body)


# ------------------------------------------------------------------ helpers


def _resolve_config(args, base: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if base:
        cfg.update(base)
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        cfg.update(raw)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        if args.command == "finetune":
            cfg.phase2.epochs = args.epochs
        else:
            cfg.train.epochs = args.epochs
    if getattr(args, "limit", None) is not None:
        cfg.train.limit = args.limit
    if getattr(args, "captions", None) is not None:
        cfg.data.num_captions = args.captions
    if getattr(args, "ablate_captions", False):
        cfg.model.ablate_captions = True
    if getattr(args, "no_caa", False):
        cfg.model.use_caa = False
    if getattr(args, "phase2_vqa_only", False):
        cfg.phase2.vqa_only = True
    cfg.validate()
    return cfg


def _prepare_out(path: str | None, force: bool, must_be_new: bool = True) -> Path:
    if not path:
        raise UsageError("--out is required")
    out = Path(path)
    if out.exists() and any(out.iterdir()) and must_be_new and not force:
        raise UsageError(f"output {out} exists and is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(path: str | None):
    from . import data

    if not path:
        raise UsageError("--data is required")
    root = Path(path)
    if not (root / "records.jsonl").exists():
        raise UsageError(f"no dataset at {root}")
    records = data.load_records(root)
    vocab, answers = data.load_vocab(root / "vocab.json")
    meta = json.loads((root / "meta.json").read_text())
    return records, vocab, answers, meta.get("config")


def _dataset_config(cfg: RunConfig, ds_config: dict | None) -> None:
    """The dataset's own generation settings win over anything resolved here."""
    if ds_config:
        cfg.update({"data": ds_config["data"]})


def _require_ckpt(path: str | None):
    from . import trainer

    if not path:
        raise UsageError("--ckpt is required")
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return trainer.load_checkpoint(path)


def _check_model_config(cfg: RunConfig, ckpt) -> None:
    saved = ckpt.config["model"]
    for key in ("q_embed", "q_hidden", "v_hidden", "word_embed", "cap_hidden", "dec_embed", "dec_hidden",
                "att_hidden", "gate"):
        if saved[key] != getattr(cfg.model, key):
            raise ConfigError(f"model.{key}={getattr(cfg.model, key)!r} does not match the checkpoint ({saved[key]!r})")


def _ckpt_config(args, ckpt) -> RunConfig:
    """Checkpoint config as the base, then file and flags."""
    cfg = _resolve_config(args, ckpt.config)
    _check_model_config(cfg, ckpt)
    return cfg


# ----------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    from . import data

    cfg = _resolve_config(args)
    out = _prepare_out(args.out, args.force)
    man = RunManifest(out, "gen-data", args.argv, cfg, {})
    records = data.generate_dataset(cfg.data, cfg.seed)
    train = data.split(records, "train")
    vocab, answers = data.build_vocabs(train, cfg.data.min_word_count, cfg.data.min_answer_count)
    data.save_records(out, records, extra_meta={"config": {"seed": cfg.seed, "data": cfg.to_dict()["data"]}})
    data.save_vocab(out / "vocab.json", vocab, answers)
    print(f"records: {len(records)} ({len(train)} train, {len(records) - len(train)} val)")
    print(f"vocab: {len(vocab)} tokens, {len(answers)} answer candidates")
    man.finish(["records.jsonl", "features.bin", "meta.json", "vocab.json"],
               vocab_hash=data.vocab_hash(vocab, answers))
    return 0


def cmd_train(args) -> int:
    from . import data, selection, trainer

    records, vocab, answers, ds_cfg = _load_dataset(args.data)
    cfg = _resolve_config(args)
    _dataset_config(cfg, ds_cfg)
    out = _prepare_out(args.out, args.force)
    man = RunManifest(out, "train", args.argv, cfg, {"data": str(args.data)})
    train, val = data.split(records, "train"), data.split(records, "val")
    if cfg.train.limit:
        train = train[: cfg.train.limit]
    tr = trainer.Trainer(cfg, vocab, answers, train, val, phase=1)
    if args.selection_log:
        tr.selection_log = selection.SelectionLog(out / "selection_log.csv", cfg.data.num_captions)
    try:
        tr.fit(cfg.train.epochs, on_epoch=lambda t, row: trainer.write_metrics(out / "metrics_phase1.csv", t.metrics))
    except trainer.DivergenceError as exc:
        man.finish([], status="diverged", error=str(exc))
        raise
    finally:
        if tr.selection_log is not None:
            tr.selection_log.close()
    if not tr.metrics:
        trainer.write_metrics(out / "metrics_phase1.csv", [])
    trainer.save_checkpoint(out / "phase1.ckpt", tr.checkpoint())
    outputs = ["metrics_phase1.csv", "phase1.ckpt"] + (["selection_log.csv"] if args.selection_log else [])
    man.finish(outputs, lr=tr.opt.lr, vocab_hash=tr.vocab_hash)
    return 0


def cmd_generate_captions(args) -> int:
    from . import data, trainer

    records, vocab, answers, ds_cfg = _load_dataset(args.data)
    ckpt = _require_ckpt(args.ckpt)
    if ckpt.vocab_hash != data.vocab_hash(vocab, answers):
        raise trainer.CheckpointError("vocabulary hash mismatch between checkpoint and dataset")
    cfg = _ckpt_config(args, ckpt)
    _dataset_config(cfg, ds_cfg)
    out = _prepare_out(args.out, args.force, must_be_new=False)
    man = RunManifest(out, "generate-captions", args.argv, cfg, {"data": str(args.data), "ckpt": str(args.ckpt)})
    train, val = data.split(records, "train"), data.split(records, "val")
    if cfg.train.limit:
        train = train[: cfg.train.limit]
    for name, recs, salt in (("train", train, 1), ("val", val, 2)):
        gen = trainer.generate_captions(ckpt.params, cfg, vocab, answers, recs, seed=cfg.seed * 1000 + salt)
        trainer.write_caption_dump(out / f"captions_{name}.jsonl", recs, gen, name)
    man.finish(["captions_train.jsonl", "captions_val.jsonl"], num_generated=cfg.phase2.num_generated)
    print(f"wrote {cfg.phase2.num_generated} captions per pair for {len(train)} train and {len(val)} val pairs")
    return 0


def cmd_finetune(args) -> int:
    from . import data, trainer

    records, vocab, answers, ds_cfg = _load_dataset(args.data)
    ckpt = _require_ckpt(args.ckpt)
    cfg = _ckpt_config(args, ckpt)
    _dataset_config(cfg, ds_cfg)
    dumps = Path(args.dumps) if args.dumps else Path(args.ckpt).parent
    out = _prepare_out(args.out, args.force)
    man = RunManifest(out, "finetune", args.argv, cfg,
                      {"data": str(args.data), "ckpt": str(args.ckpt), "dumps": str(dumps)})
    train, val = data.split(records, "train"), data.split(records, "val")
    try:
        tr = trainer.train_phase2(ckpt, cfg, vocab, answers, train, val, dumps / "captions_train.jsonl",
                                  dumps / "captions_val.jsonl", out_dir=out)
    except trainer.DivergenceError as exc:
        man.finish([], status="diverged", error=str(exc))
        raise
    man.finish(["metrics_phase2.csv", "phase2.ckpt"], lr=tr.opt.lr, phase1_lr=ckpt.optimizer.lr,
               vocab_hash=tr.vocab_hash)
    return 0


def _eval_trainer(args):
    from . import data, trainer

    records, vocab, answers, ds_cfg = _load_dataset(args.data)
    ckpt = _require_ckpt(args.ckpt)
    if ckpt.vocab_hash != data.vocab_hash(vocab, answers):
        raise trainer.CheckpointError("vocabulary hash mismatch between checkpoint and dataset")
    cfg = _ckpt_config(args, ckpt)
    _dataset_config(cfg, ds_cfg)
    recs = data.split(records, args.split)
    if not recs:
        raise UsageError(f"split {args.split!r} is empty")
    tr = trainer.Trainer(cfg, vocab, answers, recs, recs, params={k: v.copy() for k, v in ckpt.params.items()})
    return cfg, tr, recs


def cmd_eval(args) -> int:
    cfg, tr, recs = _eval_trainer(args)
    ev = tr.evaluate(tr.val_enc, recs)
    result = {"split": args.split, "count": len(recs), "soft_acc": ev.soft_acc, "by_type": ev.by_type}
    if ev.inner_products is not None:
        result.update(feasible_rate=ev.feasible_rate, planted_recovery=ev.planted_recovery)
    print(f"overall  {ev.soft_acc:.4f}  (n={len(recs)})")
    for k, v in ev.by_type.items():
        print(f"{k:<8} {v:.4f}")
    if args.out:
        out = _prepare_out(args.out, args.force, must_be_new=False)
        man = RunManifest(out, "eval", args.argv, cfg, {"data": str(args.data), "ckpt": str(args.ckpt)})
        _write_json(out / "eval.json", result)
        man.finish(["eval.json"])
    return 0


def cmd_emd(args) -> int:
    from . import attn_eval, data, trainer

    records, vocab, answers, ds_cfg = _load_dataset(args.data)
    ckpt = _require_ckpt(args.ckpt)
    if ckpt.vocab_hash != data.vocab_hash(vocab, answers):
        raise trainer.CheckpointError("vocabulary hash mismatch between checkpoint and dataset")
    cfg = _ckpt_config(args, ckpt)
    _dataset_config(cfg, ds_cfg)
    out = _prepare_out(args.out, args.force, must_be_new=False)
    man = RunManifest(out, "emd", args.argv, cfg, {"data": str(args.data), "ckpt": str(args.ckpt)})
    recs = data.split(records, args.split)
    summary = {}
    for caa, name in ((True, "with_caa"), (False, "without_caa")):
        rep = attn_eval.evaluate_attention(ckpt.params, recs, vocab, answers, cfg.model, caa)
        rep.write(out / f"emd_{name}.csv")
        summary[name] = rep.summary()
        print(f"{name:<12} mean EMD {rep.mean:.4f} over {len(rep.rows)} records ({rep.skipped} skipped)")
    _write_json(out / "emd_summary.json", summary)
    man.finish(["emd_with_caa.csv", "emd_without_caa.csv", "emd_summary.json"])
    return 0


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    results = gradcheck.run_all(args.seed or 0)
    failed = [r for r in results if not r.passed]
    for r in results:
        if args.verbose or not r.passed:
            print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:<40} {r.rel_error:.2e}")
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed")
    if args.out:
        out = _prepare_out(args.out, args.force, must_be_new=False)
        man = RunManifest(out, "gradcheck", args.argv, _resolve_config(args), {})
        _write_json(out / "gradcheck.json", {r.name: r.rel_error for r in results})
        man.finish(["gradcheck.json"], status="ok" if not failed else "failed")
    return EXIT_ERROR if failed else 0


def cmd_report(args) -> int:
    from . import report

    if not args.metrics:
        raise UsageError("report needs at least one --metrics CSV")
    out = _prepare_out(args.out, args.force, must_be_new=False)
    man = RunManifest(out, "report", args.argv, _resolve_config(args), {"metrics": args.metrics, "emd": args.emd})
    written = report.write_report(out, args.metrics, args.emd or [], args.labels)
    man.finish(written)
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON config file (flags override it)")
    common.add_argument("--seed", type=int, help="run seed")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    common.add_argument("--threads", type=int, metavar="N", help="BLAS threads")

    p = argparse.ArgumentParser(prog="relcap", description="Caption-guided VQA training and evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    g.add_argument("--captions", type=int, metavar="C", help="gold captions per question")
    g.set_defaults(func=cmd_gen_data)

    def model_flags(sp):
        sp.add_argument("--ablate-captions", action="store_true", help="replace caption features by zeros")
        sp.add_argument("--no-caa", action="store_true", help="fix caption-adjusted attention weights at 1.0")

    t = sub.add_parser("train", parents=[common], help="phase 1: joint training with gold captions")
    t.add_argument("--data", metavar="DIR", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--limit", type=int, help="use only the first N training examples")
    t.add_argument("--selection-log", action="store_true", help="write per-step selection CSV")
    model_flags(t)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("generate-captions", parents=[common], help="sample captions from a checkpoint")
    c.add_argument("--data", metavar="DIR", required=True)
    c.add_argument("--ckpt", metavar="PATH")
    c.set_defaults(func=cmd_generate_captions)

    f = sub.add_parser("finetune", parents=[common], help="phase 2: fine-tune on generated captions")
    f.add_argument("--data", metavar="DIR", required=True)
    f.add_argument("--ckpt", metavar="PATH")
    f.add_argument("--dumps", metavar="DIR", help="directory with captions_{train,val}.jsonl (default: ckpt dir)")
    f.add_argument("--epochs", type=int)
    f.add_argument("--phase2-vqa-only", action="store_true", help="drop the caption term in phase 2")
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", parents=[common], help="soft accuracy per question type")
    e.add_argument("--data", metavar="DIR", required=True)
    e.add_argument("--ckpt", metavar="PATH")
    e.add_argument("--split", default="val", choices=["train", "val"])
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("emd", parents=[common], help="attention EMD with and without caption adjustment")
    m.add_argument("--data", metavar="DIR", required=True)
    m.add_argument("--ckpt", metavar="PATH")
    m.add_argument("--split", default="val", choices=["train", "val"])
    m.set_defaults(func=cmd_emd)

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    gc.add_argument("-v", "--verbose", action="store_true")
    gc.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", parents=[common], help="SVG charts and a markdown summary")
    r.add_argument("--metrics", nargs="+", metavar="CSV")
    r.add_argument("--labels", nargs="+", help="run ids for the metrics files (default: parent dir names)")
    r.add_argument("--emd", nargs="+", metavar="JSON", help="emd_summary.json files")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    level = os.environ.get("RELCAP_LOG", "info").upper()
    if level not in ("ERROR", "INFO", "DEBUG"):
        parser.error(f"RELCAP_LOG must be error, info or debug (got {level.lower()!r})")
    logging.basicConfig(level=getattr(logging, level), format="%(levelname)s %(name)s: %(message)s")

    from .data import DatasetError
    from .trainer import CheckpointError, DivergenceError

    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"relcap {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"relcap {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"relcap {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DatasetError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"relcap {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
