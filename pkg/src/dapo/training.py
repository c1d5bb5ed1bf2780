"""Backbone pretraining stage, the prompt-tuning loop and checkpoint plumbing."""
from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import alignment as al
from .checkpoint import Checkpoint, CheckpointError
from .config import RunConfig
from .data import Corpus, SampleRecord, color_augment
from .encoders import BackboneWeights, PrefixState, backbone_shapes, default_vocab, pretrain_backbone
from .model import TRAINABLE_GROUPS, DapoModel, group_of
from .numerics import RngHandle, Tensor
from .optim import Adam
from .prompts import PromptBank

log = logging.getLogger(__name__)

LOSS_LOG_FIELDS = ("step", "epoch", "global", "local", "total")


class TrainingError(RuntimeError):
    pass


def pretrain(cfg: RunConfig, corpus: Corpus) -> BackboneWeights:
    """Contrastive pretraining of both towers on the train split's captions."""
    cfg.validate()
    enc, vocab = cfg.encoder_config(), default_vocab()
    # locked image tower: captions only describe whole images, and training the
    # vision side on them washes out the local contrast that thin defects need
    hold = [n for n in backbone_shapes(enc, len(vocab)) if n.startswith("vision.")] if cfg.pretrain_lock_image else []
    return pretrain_backbone(corpus.caption_pairs(), enc, vocab,
                             epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr, temperature=cfg.pretrain_temperature,
                             batch_size=cfg.pretrain_batch, seed=cfg.seed,
                             augment=color_augment if cfg.pretrain_augment else None,
                             hold_fixed=hold)


def save_backbone(weights: BackboneWeights, cfg: RunConfig, path: str | Path) -> Path:
    arrays = {f"backbone.{k}": v for k, v in weights.arrays().items()}
    return Checkpoint(cfg.to_dict(), arrays, {"kind": "backbone", "history": list(weights.history)}).save(path)


def _backbone_from_arrays(arrays: dict[str, np.ndarray]) -> BackboneWeights:
    params = {k[len("backbone."):]: Tensor(v.copy(), name=k[len("backbone."):])
              for k, v in arrays.items() if k.startswith("backbone.")}
    if not params:
        raise CheckpointError("checkpoint holds no backbone weights")
    return BackboneWeights(params).freeze()


def load_backbone(path: str | Path) -> BackboneWeights:
    ck = Checkpoint.load(path)
    w = _backbone_from_arrays(ck.arrays)
    w.history = list(ck.meta.get("history", []))
    return w


def parameter_census(model: DapoModel) -> dict[str, int]:
    """Trainable element counts per group plus frozen backbone size."""
    out = {g: 0 for g in TRAINABLE_GROUPS}
    for name, t in model.trainable().items():
        out[group_of(name)] += t.size
    out["trainable"] = sum(out[g] for g in TRAINABLE_GROUPS)
    out["backbone_frozen"] = sum(p.size for p in model.backbone.params.values() if not p.requires_grad)
    out["backbone_trainable"] = sum(p.size for p in model.backbone.params.values() if p.requires_grad)
    return out


def model_from_checkpoint(ck: Checkpoint) -> DapoModel:
    cfg = RunConfig.from_dict(ck.config)
    a = ck.arrays
    backbone = _backbone_from_arrays(a)
    if "prompts.V" not in a:
        raise CheckpointError("checkpoint holds no prompt bank")

    def leaf(name):
        return Tensor(a[name].copy(), requires_grad=True, name=name)

    bank = PromptBank(leaf("prompts.V"), leaf("prompts.W"), list(ck.meta["train_defects"]), default_vocab())
    enc = cfg.encoder_config()
    prefix = PrefixState([leaf(f"prefix.text.{j}") for j in range(enc.text_prefix_depth)],
                         [leaf(f"prefix.vision.{j}") for j in range(enc.depth)])
    adapters = al.AdapterStack([leaf(f"adapter.{i}.weight") for i in range(len(enc.tap_layers))],
                               [leaf(f"adapter.{i}.bias") for i in range(len(enc.tap_layers))])
    return DapoModel(cfg, backbone, bank, prefix, adapters)


class Trainer:
    """Adam on the prompt bank, prefixes and adapters only; the backbone stays frozen.

    Batches come from a per-epoch permutation keyed on ``(seed, epoch)`` so a
    run can be resumed from ``(epoch, cursor)`` alone.
    """

    def __init__(self, model: DapoModel, records: Sequence[SampleRecord], run_dir: str | Path | None = None):
        if not records:
            raise TrainingError("training split is empty")
        self.model = model
        self.cfg = model.cfg
        self.records = list(records)
        self.images = np.stack([r.image for r in self.records])
        self.masks = np.stack([r.mask for r in self.records]).astype(np.float64)
        self.labels = np.array([r.label for r in self.records], dtype=np.int64)
        if self.masks.shape[1] != model.bank.K + 1:
            raise TrainingError(f"masks carry {self.masks.shape[1]} classes but the bank has {model.bank.K + 1}")
        self.train_defects = list(model.bank.defect_names)
        self.opt = Adam(model.trainable(), lr=self.cfg.lr)
        self.epoch = 0
        self.cursor = 0  # batches consumed in the current epoch
        self.global_step = 0
        self.log_rows: list[dict] = []
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self._order: np.ndarray | None = None
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            self.cfg.save(self.run_dir / "config.json")

    @classmethod
    def create(cls, cfg: RunConfig, backbone: BackboneWeights, records: Sequence[SampleRecord],
               defect_names: Sequence[str] | None = None, run_dir=None) -> Trainer:
        names = list(defect_names if defect_names is not None else cfg.train_defects)
        if not cfg.train_defects:
            cfg = cfg.with_(train_defects=names)
        return cls(DapoModel.create(cfg, backbone, names), records, run_dir)

    # -- batching ----------------------------------------------------------------
    @property
    def batches_per_epoch(self) -> int:
        return -(-len(self.records) // self.cfg.batch_size)

    def _epoch_order(self) -> np.ndarray:
        if self._order is None:
            self._order = RngHandle(self.cfg.seed, ("batches", self.epoch)).permutation(len(self.records))
        return self._order

    def next_batch(self) -> np.ndarray:
        bs = self.cfg.batch_size
        return self._epoch_order()[self.cursor * bs:(self.cursor + 1) * bs]

    # -- optimisation --------------------------------------------------------------
    def step(self) -> dict:
        idx = self.next_batch()
        self.opt.zero_grad()
        lb = self.model.loss(self.images[idx], self.masks[idx], self.labels[idx])
        values = lb.values()
        if not all(np.isfinite(v) for v in values.values()):
            self._dump_nan(idx, values)
        lb.total.backward()
        self.opt.step()
        row = {"step": self.global_step, "epoch": self.epoch, **values}
        self.log_rows.append(row)
        self.global_step += 1
        self.cursor += 1
        if self.cursor >= self.batches_per_epoch:
            self.epoch += 1
            self.cursor = 0
            self._order = None
        return row

    def _dump_nan(self, idx: np.ndarray, values: dict) -> None:
        where = self.run_dir or Path(".")
        where.mkdir(parents=True, exist_ok=True)
        path = where / f"nan_batch_step{self.global_step}.npz"
        np.savez(path, indices=idx, images=self.images[idx], masks=self.masks[idx], labels=self.labels[idx],
                 **{k: np.float64(v) for k, v in values.items()})
        raise TrainingError(f"non-finite loss {values} at step {self.global_step}; batch dumped to {path}")

    def train_steps(self, n: int) -> list[dict]:
        return [self.step() for _ in range(n)]

    def train_epoch(self) -> list[dict]:
        start = self.epoch
        rows = []
        while self.epoch == start:
            rows.append(self.step())
        return rows

    def fit(self, epochs: int | None = None, on_epoch: Callable[[Trainer, int], None] | None = None) -> list[dict]:
        """Run whole epochs, checkpointing after each when a run directory is set."""
        epochs = self.cfg.epochs if epochs is None else epochs
        before = self.model.backbone.sha256()
        while self.epoch < epochs:
            if self.cursor:
                # finish a partially consumed epoch left by a resume
                while self.cursor:
                    self.step()
            else:
                self.train_epoch()
            rows = [r for r in self.log_rows if r["epoch"] == self.epoch - 1]
            log.info("epoch %d mean total loss %.4f", self.epoch - 1, np.mean([r["total"] for r in rows]))
            if self.run_dir is not None:
                self.save(self.run_dir / "checkpoints" / f"epoch_{self.epoch}.dapo")
                self.write_loss_log(self.run_dir / "loss_log.csv")
            if on_epoch is not None:
                on_epoch(self, self.epoch)
        if self.model.backbone.sha256() != before:
            raise TrainingError("backbone weights changed during training")
        return self.log_rows

    # -- persistence -----------------------------------------------------------------
    def write_loss_log(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(LOSS_LOG_FIELDS)
            for r in self.log_rows:
                w.writerow([r["step"], r["epoch"], repr(r["global"]), repr(r["local"]), repr(r["total"])])
        return path

    def checkpoint(self) -> Checkpoint:
        arrays = {f"backbone.{k}": v for k, v in self.model.backbone.arrays().items()}
        arrays.update({k: t.data for k, t in self.model.trainable().items()})
        arrays.update(self.opt.state_arrays())
        meta = {"epoch": self.epoch, "cursor": self.cursor, "global_step": self.global_step, "adam_t": self.opt.t,
                "rng": {"seed": self.cfg.seed, "stream": "batches", "epoch": self.epoch, "cursor": self.cursor},
                "train_defects": self.train_defects, "loss_log": self.log_rows}
        return Checkpoint(self.cfg.to_dict(), arrays, meta)

    def save(self, path: str | Path) -> Path:
        return self.checkpoint().save(path)

    @classmethod
    def from_checkpoint(cls, ck: Checkpoint | str | Path, records: Sequence[SampleRecord],
                        run_dir=None) -> Trainer:
        if not isinstance(ck, Checkpoint):
            ck = Checkpoint.load(ck)
        model = model_from_checkpoint(ck)
        tr = cls(model, records, run_dir)
        tr.opt.load_state_arrays(ck.arrays, ck.meta["adam_t"])
        tr.epoch = int(ck.meta["epoch"])
        tr.cursor = int(ck.meta["cursor"])
        tr.global_step = int(ck.meta["global_step"])
        tr.log_rows = [dict(r) for r in ck.meta.get("loss_log", [])]
        return tr
