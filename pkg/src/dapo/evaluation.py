"""Evaluation protocols, batch inference and embedding export."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import metrics as mt
from .data import SampleRecord, save_label_png
from .encoders import UnknownTokenError
from .model import DapoModel, Prediction
from .numerics import no_grad
from .prompts import PromptBank, register_unseen_defect

log = logging.getLogger(__name__)

TASKS = ("binary_ad", "binary_as", "multitype_as")


class DefectNameError(ValueError):
    def __init__(self, offenders: Sequence[str]):
        super().__init__(f"defect names not covered by the vocabulary: {', '.join(offenders)}")
        self.offenders = list(offenders)


def target_bank(model: DapoModel, defect_names: Sequence[str]) -> PromptBank:
    """A view of the trained bank carrying ``defect_names``; unseen names are registered with no training."""
    vocab = model.bank.vocab
    offenders = []
    for name in defect_names:
        try:
            vocab.tokenize(name)
        except (UnknownTokenError, ValueError):
            offenders.append(name)
    if offenders:
        raise DefectNameError(offenders)
    view = model.bank.with_defects(model.bank.defect_names)
    for name in defect_names:
        if name not in view.defect_names:
            register_unseen_defect(view, name)
    return view.with_defects(defect_names)


def predict_records(model: DapoModel, images: np.ndarray, bank: PromptBank, batch_size: int = 16) -> Prediction:
    with no_grad():
        protos = model.prototypes(bank)
    parts = [model.predict(images[i:i + batch_size], bank, protos) for i in range(0, len(images), batch_size)]
    return Prediction(
        np.concatenate([p.global_probs for p in parts]), np.concatenate([p.anomaly_map for p in parts]),
        np.concatenate([p.class_evidence for p in parts]), np.concatenate([p.type_labels for p in parts]),
        np.concatenate([p.image_scores for p in parts]), np.concatenate([p.multilabel for p in parts]),
        [np.concatenate([p.stage_maps[s] for p in parts]) for s in range(len(parts[0].stage_maps))])


def _f1_max(scores: np.ndarray, labels: np.ndarray) -> float:
    s, y = np.asarray(scores, float), np.asarray(labels, bool)
    tp, fp, _ = mt._descending_counts(s, y)
    fn = y.sum() - tp
    f1 = 2 * tp / np.maximum(2 * tp + fp + fn, 1)
    return float(f1.max())


@dataclass
class Evaluation:
    reports: dict[str, mt.MetricsReport]
    prediction: Prediction
    defect_names: list[str]
    extra: dict = field(default_factory=dict)

    def write(self, directory: str | Path, prefix: str = "") -> list[Path]:
        out = []
        for task, rep in self.reports.items():
            out += list(rep.write(directory, f"{prefix}report_{task}"))
        return out


def evaluate(model: DapoModel, records: Sequence[SampleRecord], defect_names: Sequence[str],
             tasks: Sequence[str] = TASKS, exclude_defects: Sequence[str] = ("missing",),
             batch_size: int = 16) -> Evaluation:
    """Run the requested protocols on ``records`` whose masks follow ``defect_names``.

    ``exclude_defects`` pixels are dropped from the pixel-level binary metrics
    (they are reported separately in that task's notes).
    """
    unknown = [t for t in tasks if t not in TASKS]
    if unknown:
        raise ValueError(f"unknown tasks {unknown}; expected a subset of {TASKS}")
    names = list(defect_names)
    bank = target_bank(model, names)
    C = len(names) + 1
    for r in records:
        if r.mask.shape[0] != C:
            raise ValueError(f"{r.name}: mask has {r.mask.shape[0]} classes, defect list implies {C}")
    images = np.stack([r.image for r in records])
    labels_img = np.array([r.label for r in records])
    pix = np.stack([r.labels for r in records])
    objects = np.array([r.object_class for r in records])
    pred = predict_records(model, images, bank, batch_size)
    reports: dict[str, mt.MetricsReport] = {}

    if "binary_ad" in tasks:
        rep = mt.MetricsReport("binary_ad")
        s = pred.image_scores
        rep.overall = {"image_auroc": mt.safe_metric(mt.auroc, s, labels_img),
                       "image_ap": mt.safe_metric(mt.average_precision, s, labels_img),
                       "image_f1": mt.f1_binary(s >= 0.5, labels_img),
                       "image_f1_max": _f1_max(s, labels_img) if labels_img.any() else 0.0}
        for obj in sorted(set(objects)):
            sel = objects == obj
            rep.per_object[obj] = {"image_auroc": mt.safe_metric(mt.auroc, s[sel], labels_img[sel]),
                                   "image_ap": mt.safe_metric(mt.average_precision, s[sel], labels_img[sel])}
        roc = mt.safe_metric(mt.roc_curve, s, labels_img)
        if roc is not None:
            rep.curves["roc"] = roc
        reports["binary_ad"] = rep

    if "binary_as" in tasks:
        rep = mt.MetricsReport("binary_as")
        excluded = [names.index(d) + 1 for d in exclude_defects if d in names]
        ignore = np.isin(pix, excluded)
        gt = (pix > 0) & ~ignore
        keep = ~ignore
        amap = pred.anomaly_map
        rep.overall = {"pixel_auroc": mt.safe_metric(mt.auroc, amap[keep], gt[keep]),
                       "pixel_aupro": mt.safe_metric(mt.aupro, amap, gt, 0.3, ignore)}
        for obj in sorted(set(objects)):
            sel = objects == obj
            rep.per_object[obj] = {
                "pixel_auroc": mt.safe_metric(mt.auroc, amap[sel][keep[sel]], gt[sel][keep[sel]]),
                "pixel_aupro": mt.safe_metric(mt.aupro, amap[sel], gt[sel], 0.3, ignore[sel])}
        rep.notes["excluded_defects"] = [d for d in exclude_defects if d in names]
        if excluded:
            rep.notes["pixel_auroc_all_defects"] = mt.safe_metric(mt.auroc, amap, pix > 0)
        reports["binary_as"] = rep

    if "multitype_as" in tasks:
        rep = mt.MetricsReport("multitype_as")
        state_names = ["normal"] + names
        evidence = np.moveaxis(pred.class_evidence, 1, -1).reshape(-1, C)
        flat = pix.ravel()
        pred_onehot = mt.one_hot(pred.type_labels.ravel(), C)
        true_onehot = mt.one_hot(flat, C)
        f1s = mt.f1_per_class(pred_onehot, true_onehot)
        for c, cname in enumerate(state_names):
            y = flat == c
            rep.per_class[cname] = {"auroc": mt.safe_metric(mt.auroc, evidence[:, c], y),
                                    "ap": mt.safe_metric(mt.average_precision, evidence[:, c], y),
                                    "f1": float(f1s[c])}
        rep.macro = {k: mt.nanmean([v[k] for v in rep.per_class.values()]) for k in ("auroc", "ap", "f1")}
        present = np.array([[d in r.defects_present for d in names] for r in records])
        rep.notes["multilabel_auroc"] = {d: mt.safe_metric(mt.auroc, pred.multilabel[:, k], present[:, k])
                                         for k, d in enumerate(names)}
        reports["multitype_as"] = rep
    return Evaluation(reports, pred, names)


def headline(ev: Evaluation) -> dict[str, float | None]:
    out = {}
    if "binary_ad" in ev.reports:
        out["image_auroc"] = ev.reports["binary_ad"].overall["image_auroc"]
        out["image_ap"] = ev.reports["binary_ad"].overall["image_ap"]
    if "binary_as" in ev.reports:
        out["pixel_auroc"] = ev.reports["binary_as"].overall["pixel_auroc"]
        out["pixel_aupro"] = ev.reports["binary_as"].overall["pixel_aupro"]
    if "multitype_as" in ev.reports:
        out["multitype_f1_macro"] = ev.reports["multitype_as"].macro["f1"]
    return out


# -- inference -------------------------------------------------------------------
def _image_files(inputs: Sequence[str | Path]) -> list[Path]:
    files = []
    for p in map(Path, inputs):
        if p.is_dir():
            files += sorted(q for q in p.rglob("*") if q.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"))
        else:
            files.append(p)
    return files


def _read_rgb(path: Path, size: int) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    if arr.shape[:2] != (size, size):
        raise ValueError(f"image is {arr.shape[1]}x{arr.shape[0]}, model expects {size}x{size}")
    return arr


def infer(model: DapoModel, inputs: Sequence[str | Path], defect_names: Sequence[str],
          out_dir: str | Path) -> dict:
    """Write anomaly maps (PNG + .npy), indexed type masks and per-image JSON.

    A file that cannot be read is reported and skipped; the rest of the batch still runs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = list(defect_names)
    bank = target_bank(model, names)
    with no_grad():
        protos = model.prototypes(bank)
    done, errors = [], {}
    for path in _image_files(inputs):
        try:
            img = _read_rgb(path, model.cfg.image_size)
        except (OSError, ValueError) as exc:
            errors[str(path)] = str(exc)
            log.warning("skipping %s: %s", path, exc)
            continue
        p = model.predict(img[None], bank, protos)
        stem = path.stem
        amap = p.anomaly_map[0]
        np.save(out / f"{stem}_anomaly.npy", amap)
        Image.fromarray(np.round(np.clip(amap, 0, 1) * 255).astype(np.uint8), mode="L").save(
            out / f"{stem}_anomaly.png")
        save_label_png(p.type_labels[0], out / f"{stem}_types.png", len(names) + 1)
        info = {"image": path.name, "image_score": float(p.image_scores[0]),
                "global_abnormal_prob": float(p.global_probs[0, 1]),
                "multilabel": {d: float(p.multilabel[0, k]) for k, d in enumerate(names)},
                "classes": ["normal"] + names}
        (out / f"{stem}.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        done.append(stem)
    summary = {"processed": done, "errors": errors}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return summary


# -- embeddings -------------------------------------------------------------------
def export_embeddings(model: DapoModel, records: Sequence[SampleRecord], defect_names: Sequence[str],
                      path: str | Path, stage: int = -1) -> Path:
    """CSV of adapted patch embeddings (one row per patch) followed by the K+1 state prototypes."""
    names = list(defect_names)
    bank = target_bank(model, names)
    p = model.cfg.patch_size
    rows = []
    with no_grad():
        protos = model.prototypes(bank)
        for r in records:
            _, adapted = model.encode(r.image[None])
            z = adapted[stage].data[0]
            lab = r.labels
            g = lab.shape[0] // p
            blocks = lab.reshape(g, p, g, p).transpose(0, 2, 1, 3).reshape(g * g, -1)
            patch_labels = [int(np.bincount(b, minlength=len(names) + 1).argmax()) for b in blocks]
            for i, (vec, pl) in enumerate(zip(z, patch_labels)):
                rows.append(["patch", r.name, i, (["normal"] + names)[pl], *vec])
        for c, (cname, vec) in enumerate(zip(["normal"] + names, protos.all.data)):
            rows.append(["prototype", "", c, cname, *vec])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = model.cfg.width
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "image", "index", "label", *[f"d{k}" for k in range(d)]])
        for row in rows:
            w.writerow(row[:4] + [repr(float(v)) for v in row[4:]])
    return path
