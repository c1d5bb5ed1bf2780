"""Command-line entry point: ``dapo <subcommand> [options]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .config import RunConfig, tiny_config
from .data import CorpusSpec, generate_corpus, load_corpus, save_corpus, shift_witness
from .encoders import BackboneWeights, default_vocab
from .evaluation import TASKS, evaluate, export_embeddings, headline, infer
from .model import TRAINABLE_GROUPS, DapoModel, group_of
from .numerics import RngHandle, finite_diff_check
from .prompts import read_defect_list
from .training import Trainer, load_backbone, model_from_checkpoint, pretrain, save_backbone

log = logging.getLogger("dapo")

GRADCHECK_TOL = 1e-4
ABLATION_AXES = {"lambda": "lam", "prompt_len": "context_len", "depth_Nd": "text_prefix_depth",
                 "progressive": "progressive", "aggregation": "aggregation", "init": "init"}
ABLATION_FIELDS = ("axis", "value", "image_auroc", "image_ap", "pixel_auroc", "pixel_aupro", "status", "error")


# -- configuration ---------------------------------------------------------------
def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _field_parser(name: str, default):
    if name == "tap_layers":
        return lambda s: tuple(int(v) for v in s.split(","))
    if name == "train_defects":
        return lambda s: [v for v in s.split(",") if v]
    if name == "text_prefix_depth":
        return int
    if isinstance(default, bool):
        return _parse_bool
    return type(default)


def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of RunConfig fields")
    defaults = RunConfig()
    group = p.add_argument_group("config overrides")
    for f in fields(RunConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", default=None,
                           type=_field_parser(f.name, getattr(defaults, f.name)))


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else (base or RunConfig())
    changes = {f.name: getattr(args, f"cfg_{f.name}") for f in fields(RunConfig)
               if getattr(args, f"cfg_{f.name}", None) is not None}
    if "depth" in changes and "text_prefix_depth" not in changes and cfg.text_prefix_depth == cfg.depth:
        changes["text_prefix_depth"] = changes["depth"]
    return cfg.with_(**changes).validate()


# -- shared pipeline pieces ---------------------------------------------------------
def _defects_arg(text: str | None, fallback: Sequence[str]) -> list[str]:
    if not text:
        return list(fallback)
    p = Path(text)
    if p.is_file():
        return read_defect_list(p)
    return [v for v in text.split(",") if v]


def _backbone_for(cfg: RunConfig, corpus, path: Path | None) -> BackboneWeights:
    if path is not None:
        return load_backbone(path)
    log.info("no backbone given; pretraining for %d epochs", cfg.pretrain_epochs)
    return pretrain(cfg, corpus)


def train_and_evaluate(cfg: RunConfig, corpus, backbone: BackboneWeights, run_dir: Path | None = None,
                       eval_each_epoch: bool = True) -> dict:
    """Prompt tuning followed by target evaluation; tracks per-epoch metrics when asked."""
    if not cfg.train_defects:
        cfg = cfg.with_(train_defects=corpus.spec.train_defects)
    tr = Trainer.create(cfg, backbone, corpus.train, run_dir=run_dir)
    targets = corpus.spec.target_defects
    per_epoch: list[dict] = []

    def on_epoch(t: Trainer, epoch: int) -> None:
        if eval_each_epoch or epoch == cfg.epochs:
            ev = evaluate(t.model, corpus.target, targets, tasks=("binary_ad", "binary_as"))
            per_epoch.append({"epoch": epoch, **headline(ev)})

    tr.fit(on_epoch=on_epoch)
    final = evaluate(tr.model, corpus.target, targets)
    result = {"final": headline(final), "per_epoch": per_epoch, "trainer": tr, "evaluation": final}
    scored = [r for r in per_epoch if r.get("image_auroc") is not None]
    if scored:
        result["best_epoch"] = max(scored, key=lambda r: r["image_auroc"])
    if run_dir is not None:
        final.write(Path(run_dir) / "reports")
        with open(Path(run_dir) / "epoch_metrics.csv", "w", newline="", encoding="utf-8") as fh:
            keys = ["epoch", "image_auroc", "image_ap", "pixel_auroc", "pixel_aupro"]
            w = csv.DictWriter(fh, keys, extrasaction="ignore")
            w.writeheader()
            w.writerows(per_epoch)
        summary = {k: result[k] for k in ("final", "per_epoch", "best_epoch") if k in result}
        (Path(run_dir) / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n",
                                                    encoding="utf-8")
    return result


# -- gradient check ---------------------------------------------------------------------
def gradcheck_report(cfg: RunConfig | None = None, seed: int = 0, step: float = 1e-5) -> dict[str, float]:
    """Max relative finite-difference error of the total loss per trainable group."""
    cfg = cfg or tiny_config()
    cfg.validate()
    vocab = default_vocab()
    rng = RngHandle(seed, ("gradcheck",))
    backbone = BackboneWeights.init(cfg.encoder_config(), len(vocab), rng.child("backbone"))
    model = DapoModel.create(cfg, backbone)
    B, S, C = 2, cfg.image_size, len(cfg.train_defects) + 1
    images = rng.child("images").uniform(0.0, 1.0, (B, S, S, 3))
    labels = rng.child("labels").integers(0, C, (B, S, S))
    masks = np.zeros((B, C, S, S))
    np.put_along_axis(masks, labels[:, None], 1.0, axis=1)
    image_labels = [0, 1]
    report = {g: 0.0 for g in TRAINABLE_GROUPS}
    params = model.trainable()
    for name, t in params.items():
        def f(_x):
            for p in params.values():
                p.grad = None
            return model.loss(images, masks, image_labels).total
        report[group_of(name)] = max(report[group_of(name)], finite_diff_check(f, t, step))
        t.grad = None
    return report


# -- subcommands -------------------------------------------------------------------------
def cmd_generate_data(args) -> int:
    spec = CorpusSpec(seed=args.seed, image_size=args.image_size, n_train=args.n_train, n_target=args.n_target,
                      unseen_defects=tuple(args.unseen.split(",")) if args.unseen else ())
    corpus = generate_corpus(spec)
    save_corpus(corpus, args.out)
    print(f"wrote {len(corpus.train)} train / {len(corpus.target)} target samples to {args.out}")
    print(f"shift witness: {shift_witness(corpus.train, corpus.target):.3f}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    corpus = load_corpus(args.data)
    w = pretrain(cfg, corpus)
    save_backbone(w, cfg, args.out)
    print(f"backbone sha256 {w.sha256()} final loss {w.history[-1] if w.history else float('nan'):.4f}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    corpus = load_corpus(args.data)
    backbone = _backbone_for(cfg, corpus, args.backbone)
    res = train_and_evaluate(cfg, corpus, backbone, Path(args.run_dir), eval_each_epoch=not args.no_epoch_eval)
    print(json.dumps({k: res[k] for k in ("final", "best_epoch") if k in res}, indent=1, sort_keys=True))
    return 0


def _split_records(corpus, split: str):
    return corpus.split(split), corpus.spec.defects_for(split)


def cmd_eval(args) -> int:
    model = model_from_checkpoint(Checkpoint.load(args.checkpoint))
    corpus = load_corpus(args.data)
    records, names = _split_records(corpus, args.split)
    names = _defects_arg(args.defects, names)
    ev = evaluate(model, records, names, tasks=args.tasks.split(","),
                  exclude_defects=[d for d in args.exclude.split(",") if d])
    ev.write(args.out)
    print(json.dumps(headline(ev), indent=1, sort_keys=True))
    return 0


def cmd_infer(args) -> int:
    model = model_from_checkpoint(Checkpoint.load(args.checkpoint))
    names = _defects_arg(args.defects, model.bank.defect_names)
    summary = infer(model, args.inputs, names, args.out)
    for path, err in summary["errors"].items():
        print(f"error: {path}: {err}", file=sys.stderr)
    print(f"processed {len(summary['processed'])} images, {len(summary['errors'])} errors")
    return 0 if summary["processed"] or not summary["errors"] else 1


def cmd_export_embeddings(args) -> int:
    model = model_from_checkpoint(Checkpoint.load(args.checkpoint))
    corpus = load_corpus(args.data)
    records, names = _split_records(corpus, args.split)
    records = records[:args.limit] if args.limit else records
    path = export_embeddings(model, records, names, args.out)
    print(f"wrote {path}")
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    report = gradcheck_report(tiny_config(seed=args.seed))
    ok = True
    for group in TRAINABLE_GROUPS:
        err = report[group]
        passed = err < GRADCHECK_TOL
        ok &= passed
        print(f"{group:10s} max_rel_err={err:.3e} {'ok' if passed else 'FAIL'}")
    print(f"gradcheck {'passed' if ok else 'failed'} in {time.perf_counter() - t0:.1f}s")
    return 0 if ok else 1


def _ablation_value(axis: str, text: str):
    field_name = ABLATION_AXES[axis]
    default = getattr(RunConfig(), field_name)
    return _field_parser(field_name, default)(text)


def run_ablation(axis: str, values: Sequence[str], base: RunConfig, corpus, backbone: BackboneWeights,
                 out: Path) -> list[dict]:
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {sorted(ABLATION_AXES)}")
    rows = []
    for text in values:
        row = {"axis": axis, "value": text, "status": "ok", "error": ""}
        try:
            cfg = base.with_(**{ABLATION_AXES[axis]: _ablation_value(axis, text)}).validate()
            res = train_and_evaluate(cfg, corpus, backbone, eval_each_epoch=False)
            row.update(res["final"])
        except Exception as exc:  # a failed run is recorded and the sweep moves on
            log.exception("ablation %s=%s failed", axis, text)
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ABLATION_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k, "")) for k in ABLATION_FIELDS})
    return rows


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    corpus = load_corpus(args.data)
    backbone = _backbone_for(cfg, corpus, args.backbone)
    rows = run_ablation(args.axis, args.values.split(","), cfg, corpus, backbone, Path(args.out))
    for r in rows:
        print(f"{r['axis']}={r['value']}: {r['status']} image_auroc={r.get('image_auroc')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dapo", description="Prompt tuning for anomaly detection under distribution shift")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render the synthetic train/target corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--n-train", type=int, default=400)
    p.add_argument("--n-target", type=int, default=200)
    p.add_argument("--unseen", default="crack,stain", help="comma-separated defects absent from train")
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("pretrain", help="contrastive backbone pretraining")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="prompt tuning on the train split")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--run-dir", type=Path, required=True)
    p.add_argument("--backbone", type=Path, help="pretrained backbone file; pretrains first when omitted")
    p.add_argument("--no-epoch-eval", action="store_true", help="skip per-epoch target evaluation")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=("train", "target"), default="target")
    p.add_argument("--defects", help="defect list file or comma-separated names (default: the split's list)")
    p.add_argument("--tasks", default=",".join(TASKS))
    p.add_argument("--exclude", default="missing", help="defects dropped from pixel-level binary metrics")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="anomaly maps and type masks for images")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("inputs", nargs="+", type=Path)
    p.add_argument("--defects", help="defect list file or comma-separated names")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference check on the tiny configuration")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="sweep one configuration axis")
    p.add_argument("--axis", choices=sorted(ABLATION_AXES), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--backbone", type=Path)
    p.add_argument("--out", type=Path, required=True)
    add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-embeddings", help="patch embeddings and prototypes as CSV")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=("train", "target"), default="target")
    p.add_argument("--limit", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_export_embeddings)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
