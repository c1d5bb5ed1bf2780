"""Miniature text and image transformers with per-layer prefix tokens.

Both encoders are pre-LN transformers. Prefix tokens ride alongside the
original sequence: every query position attends to the original keys through
the usual softmax and to the prefix keys through a second, separately
normalised softmax whose values are linear in the prefix tokens (no bias, no
layer norm). A zero prefix therefore adds exactly nothing to the original
positions, and the layer output at the prefix rows is captured as ``O_j``.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import RngHandle, Tensor
from .optim import Adam

log = logging.getLogger(__name__)

PAD, START, END, SLOT = "<pad>", "<start>", "<end>", "<slot>"
SPECIAL_TOKENS = (PAD, START, END, SLOT)


class UnknownTokenError(KeyError):
    def __init__(self, word: str):
        super().__init__(word)
        self.word = word

    def __str__(self) -> str:
        return f"unknown token {self.word!r} (closed vocabulary)"


class Vocabulary:
    """Closed word-level vocabulary; file order defines ids."""

    def __init__(self, words: Sequence[str]):
        words = list(words)
        if len(set(words)) != len(words):
            raise ValueError("vocabulary contains duplicate entries")
        missing = [s for s in SPECIAL_TOKENS if s not in words]
        if missing:
            raise ValueError(f"vocabulary lacks special tokens {missing}")
        self.words = words
        self.ids = {w: i for i, w in enumerate(words)}
        self.pad_id, self.start_id, self.end_id, self.slot_id = (self.ids[s] for s in SPECIAL_TOKENS)

    @classmethod
    def load(cls, path: str | Path | None = None) -> Vocabulary:
        if path is None:
            text = resources.files("dapo").joinpath("vocab.txt").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls([line.strip() for line in text.splitlines() if line.strip()])

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.ids and word not in SPECIAL_TOKENS

    def id(self, word: str) -> int:
        if word in SPECIAL_TOKENS or word not in self.ids:
            raise UnknownTokenError(word)
        return self.ids[word]

    def tokenize(self, text: str) -> list[int]:
        words = text.lower().split()
        if not words:
            raise ValueError("cannot tokenize empty text")
        return [self.id(w) for w in words]

    def detokenize(self, ids: Sequence[int]) -> str:
        return " ".join(self.words[i] for i in ids if self.words[i] not in SPECIAL_TOKENS)


def tokenize(text: str, vocab: Vocabulary | None = None) -> list[int]:
    return (vocab or default_vocab()).tokenize(text)


_DEFAULT_VOCAB: Vocabulary | None = None


def default_vocab() -> Vocabulary:
    global _DEFAULT_VOCAB
    if _DEFAULT_VOCAB is None:
        _DEFAULT_VOCAB = Vocabulary.load()
    return _DEFAULT_VOCAB


@dataclass
class EncoderConfig:
    width: int = 64
    depth: int = 6
    heads: int = 4
    patch_size: int = 8
    image_size: int = 64
    tap_layers: tuple[int, ...] = (2, 3, 4, 6)
    prefix_len: int = 4
    text_prefix_depth: int | None = None
    alpha: float = 0.1
    progressive: bool = True
    max_text_len: int = 24
    mlp_ratio: int = 4
    stem_channels: int = 8  # per-pixel 1x1 GELU stem ahead of the patch projection; 0 disables it
    stem_pool: bool = True  # also feed per-patch max and min of the stem channels to the patch projection
    sort_channels: bool = True  # order each pixel's RGB values ascending, which discards hue

    def __post_init__(self):
        self.tap_layers = tuple(int(t) for t in self.tap_layers)
        if self.text_prefix_depth is None:
            self.text_prefix_depth = self.depth
        self.validate()

    def validate(self) -> None:
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not self.tap_layers or any(t < 1 or t > self.depth for t in self.tap_layers):
            raise ValueError(f"tap_layers {self.tap_layers} must lie in [1, {self.depth}]")
        if self.prefix_len < 0:
            raise ValueError("prefix_len must be >= 0")
        if not 0 <= self.text_prefix_depth <= self.depth:
            raise ValueError(f"text_prefix_depth must lie in [0, {self.depth}]")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError("alpha must lie in [0, 1)")
        if self.stem_channels < 0:
            raise ValueError("stem_channels must be >= 0")
        if self.stem_pool and not self.stem_channels:
            raise ValueError("stem_pool needs stem_channels > 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid


# -- weights -----------------------------------------------------------------
def _block_shapes(prefix: str, d: int, mlp: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.ln1_g": (d,), f"{prefix}.ln1_b": (d,),
        f"{prefix}.wqkv": (d, 3 * d), f"{prefix}.bqkv": (3 * d,),
        f"{prefix}.wo": (d, d), f"{prefix}.bo": (d,),
        f"{prefix}.ln2_g": (d,), f"{prefix}.ln2_b": (d,),
        f"{prefix}.w1": (d, mlp * d), f"{prefix}.b1": (mlp * d,),
        f"{prefix}.w2": (mlp * d, d), f"{prefix}.b2": (d,),
    }


def backbone_shapes(cfg: EncoderConfig, vocab_size: int) -> dict[str, tuple[int, ...]]:
    d = cfg.width
    shapes: dict[str, tuple[int, ...]] = {
        "text.tok_emb": (vocab_size, d),
        "text.pos_emb": (cfg.max_text_len, d),
    }
    for j in range(cfg.depth):
        shapes.update(_block_shapes(f"text.l{j}", d, cfg.mlp_ratio))
    shapes.update({"text.lnf_g": (d,), "text.lnf_b": (d,), "text.proj": (d, d)})
    pixel_features = cfg.stem_channels or 3
    if cfg.stem_channels:
        shapes.update({"vision.stem_w": (3, cfg.stem_channels), "vision.stem_b": (cfg.stem_channels,)})
        if cfg.stem_pool:
            shapes["vision.pool_w"] = (2 * cfg.stem_channels, d)
    shapes.update({
        "vision.patch_w": (cfg.patch_size * cfg.patch_size * pixel_features, d),
        "vision.patch_b": (d,),
        "vision.cls": (d,),
        "vision.pos_emb": (cfg.num_patches + 1, d),
        "vision.lnpre_g": (d,), "vision.lnpre_b": (d,),
    })
    for j in range(cfg.depth):
        shapes.update(_block_shapes(f"vision.l{j}", d, cfg.mlp_ratio))
    shapes.update({"vision.lnpost_g": (d,), "vision.lnpost_b": (d,), "vision.proj": (d, d)})
    return shapes


@dataclass
class BackboneWeights:
    params: dict[str, Tensor]
    frozen: bool = False
    history: list[float] = field(default_factory=list)

    @classmethod
    def init(cls, cfg: EncoderConfig, vocab_size: int, rng: RngHandle) -> BackboneWeights:
        params = {}
        for name, shape in backbone_shapes(cfg, vocab_size).items():
            leaf = name.rsplit(".", 1)[1]
            if leaf in ("stem_w", "stem_b", "pool_w"):
                value = rng.normal(0.0, 1.0, shape)
            elif leaf.endswith("_g"):
                value = np.ones(shape)
            elif leaf.startswith("b") or leaf.endswith("_b"):
                value = np.zeros(shape)
            elif leaf in ("tok_emb", "cls"):
                value = rng.normal(0.0, 0.5, shape)
            elif leaf == "pos_emb":
                value = rng.normal(0.0, 0.1, shape)
            else:
                value = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
            params[name] = Tensor(value, requires_grad=True, name=name)
        return cls(params)

    def freeze(self) -> BackboneWeights:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def unfreeze(self) -> BackboneWeights:
        for p in self.params.values():
            p.requires_grad = True
        self.frozen = False
        return self

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def to_bytes(self) -> bytes:
        chunks = []
        for name in sorted(self.params):
            chunks.append(name.encode("utf-8"))
            chunks.append(np.ascontiguousarray(self.params[name].data, dtype="<f8").tobytes())
        return b"\0".join(chunks)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def token_stats(self) -> tuple[float, float]:
        emb = self.params["text.tok_emb"].data
        return float(emb.mean()), float(emb.std())

    def vision_stats(self) -> tuple[float, float]:
        emb = self.params["vision.pos_emb"].data + self.params["vision.patch_b"].data
        return float(emb.mean()), float(emb.std())


@dataclass
class PrefixState:
    """Learnable prefix blocks ``U_j`` for both encoders plus the last captured ``O_j``."""

    text: list[Tensor]
    vision: list[Tensor]
    text_cache: list[np.ndarray] = field(default_factory=list)
    vision_cache: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def init(cls, cfg: EncoderConfig, rng: RngHandle, text_stats=(0.0, 1.0), vision_stats=(0.0, 1.0),
             zero: bool = False) -> PrefixState:
        def blocks(n, stats, tag):
            out = []
            for j in range(n):
                shape = (cfg.prefix_len, cfg.width)
                value = np.zeros(shape) if zero else rng.normal(stats[0], stats[1], shape)
                out.append(Tensor(value, requires_grad=True, name=f"prefix.{tag}.{j}"))
            return out

        if cfg.prefix_len == 0:
            return cls([], [])
        return cls(blocks(cfg.text_prefix_depth, text_stats, "text"), blocks(cfg.depth, vision_stats, "vision"))

    def tensors(self) -> dict[str, Tensor]:
        out = {f"prefix.text.{j}": t for j, t in enumerate(self.text)}
        out.update({f"prefix.vision.{j}": t for j, t in enumerate(self.vision)})
        return out

    def num_params(self) -> int:
        return sum(t.size for t in self.text) + sum(t.size for t in self.vision)


# -- prefix recurrence -------------------------------------------------------
def prefix_block(U_j: Tensor, O_prev: Tensor | None, alpha: float, j: int, progressive: bool = True) -> Tensor:
    """Block injected at layer ``j`` (1-based): ``U_1`` at the first layer,
    ``(1 - alpha) U_j + alpha O_{j-1}`` afterwards when progressive."""
    if j < 1:
        raise ValueError("layer index j is 1-based")
    if j == 1 or not progressive or O_prev is None:
        return U_j
    if U_j.shape[-2:] != O_prev.shape[-2:]:
        raise nx.ShapeError(f"prefix block {U_j.shape} does not match previous output {O_prev.shape}")
    return U_j * (1.0 - alpha) + O_prev * alpha


def progressive_prefix_step(T_prev: Tensor, U_j: Tensor, O_prev: Tensor | None, alpha: float, j: int) -> Tensor:
    """Layer-``j`` input tokens ``[T_{j-1}, injected block]`` along the token axis."""
    if j > 1 and O_prev is None:
        raise ValueError("layers after the first need the previous prefix output")
    if O_prev is not None and j > 1 and U_j.shape != O_prev.shape[-U_j.ndim:]:
        raise nx.ShapeError(f"U_j {U_j.shape} and O_prev {O_prev.shape} differ")
    block = prefix_block(U_j, O_prev, alpha, j)
    if T_prev.ndim == 3 and block.ndim == 2:
        block = nx.broadcast_to(block, (T_prev.shape[0],) + block.shape)
    return nx.concat([T_prev, block], axis=-2)


# -- transformer internals ---------------------------------------------------
def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, T, d = x.shape
    x = x.reshape(tuple(lead) + (T, heads, d // heads))
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, H, T, dh = x.shape
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    return x.transpose(axes).reshape(tuple(lead) + (T, H * dh))


def _attend(q: Tensor, k: Tensor, v: Tensor, bias: np.ndarray | None) -> Tensor:
    scores = nx.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(q.shape[-1]))
    if bias is not None:
        scores = scores + bias
    return nx.matmul(nx.softmax(scores, axis=-1), v)


def _mlp(w: BackboneWeights, name: str, x: Tensor) -> Tensor:
    h = nx.layer_norm(x, w[f"{name}.ln2_g"], w[f"{name}.ln2_b"])
    h = nx.gelu(nx.matmul(h, w[f"{name}.w1"]) + w[f"{name}.b1"])
    return nx.matmul(h, w[f"{name}.w2"]) + w[f"{name}.b2"]


def transformer_block(w: BackboneWeights, name: str, x: Tensor, heads: int, mask: np.ndarray | None = None,
                      prefix: Tensor | None = None, prefix_key_bias: np.ndarray | None = None):
    """One pre-LN block over originals ``x`` (B,T,d) and an optional prefix (P,d) or (B,P,d).

    Returns ``(x_out, prefix_out)``; ``prefix_out`` is ``None`` without a prefix.
    """
    d = x.shape[-1]
    wqkv, bqkv = w[f"{name}.wqkv"], w[f"{name}.bqkv"]
    h = nx.layer_norm(x, w[f"{name}.ln1_g"], w[f"{name}.ln1_b"])
    qkv = nx.matmul(h, wqkv) + bqkv
    q = _split_heads(qkv[..., :d], heads)
    k = _split_heads(qkv[..., d:2 * d], heads)
    v = _split_heads(qkv[..., 2 * d:], heads)
    attn = _attend(q, k, v, mask)

    if prefix is not None:
        kp = _split_heads(nx.matmul(prefix, wqkv[:, d:2 * d]), heads)
        vp = _split_heads(nx.matmul(prefix, wqkv[:, 2 * d:]), heads)
        attn = attn + _attend(q, kp, vp, None)
        hp = nx.layer_norm(prefix, w[f"{name}.ln1_g"], w[f"{name}.ln1_b"])
        qp = _split_heads(nx.matmul(hp, wqkv[:, :d]) + bqkv[:d], heads)
        attn_p = _attend(qp, k, v, prefix_key_bias) + _attend(qp, kp, vp, None)

    x = x + (nx.matmul(_merge_heads(attn), w[f"{name}.wo"]) + w[f"{name}.bo"])
    x = x + _mlp(w, name, x)
    if prefix is None:
        return x, None
    p = prefix + (nx.matmul(_merge_heads(attn_p), w[f"{name}.wo"]) + w[f"{name}.bo"])
    p = p + _mlp(w, name, p)
    return x, p


def _run_layers(w: BackboneWeights, tower: str, x: Tensor, cfg: EncoderConfig, prefixes: Sequence[Tensor],
                mask=None, prefix_key_bias=None, taps: Sequence[int] = (), cache: list | None = None):
    tapped = {}
    O = None
    for j in range(1, cfg.depth + 1):
        inject = None
        if j <= len(prefixes):
            inject = prefix_block(prefixes[j - 1], O, cfg.alpha, j, cfg.progressive)
        x, O = transformer_block(w, f"{tower}.l{j - 1}", x, cfg.heads, mask, inject, prefix_key_bias)
        if cache is not None and O is not None:
            cache.append(O.data)
        if j in taps:
            tapped[j] = x
    return x, tapped


# -- encoders ------------------------------------------------------------------
def causal_mask(T: int) -> np.ndarray:
    return np.triu(np.full((T, T), -1e30), k=1)


def embed_token_ids(w: BackboneWeights, ids: np.ndarray) -> Tensor:
    return w["text.tok_emb"][np.asarray(ids)]


def encode_text(embedded: Tensor, eot_index: Sequence[int], w: BackboneWeights, cfg: EncoderConfig,
                prefix: PrefixState | None = None, lengths: Sequence[int] | None = None) -> Tensor:
    """Text embeddings for a batch of already-embedded sequences (N, L, d).

    ``eot_index`` gives the pooled (end-token) position per sequence. Returns
    (N, d) rows, L2-normalised, in the shared space.
    """
    if embedded.ndim == 2:
        embedded = embedded.reshape((1,) + embedded.shape)
    N, L, d = embedded.shape
    if L > cfg.max_text_len:
        raise ValueError(f"sequence length {L} exceeds max context {cfg.max_text_len}")
    x = embedded + w["text.pos_emb"][:L]
    blocks = list(prefix.text) if prefix is not None else []
    if len(blocks) > cfg.text_prefix_depth:
        raise ValueError("more text prefix blocks than text_prefix_depth")
    key_bias = None
    if blocks:
        if lengths is None:
            lengths = [int(e) + 1 for e in eot_index]
        valid = np.arange(L)[None, :] < np.asarray(lengths)[:, None]
        key_bias = np.where(valid, 0.0, -1e30)[:, None, None, :]
    cache: list = []
    x, _ = _run_layers(w, "text", x, cfg, blocks, causal_mask(L), key_bias, cache=cache)
    if prefix is not None:
        prefix.text_cache = cache
    pooled = x[np.arange(N), np.asarray(eot_index)]
    pooled = nx.layer_norm(pooled, w["text.lnf_g"], w["text.lnf_b"])
    return nx.l2_normalize(nx.matmul(pooled, w["text.proj"]), axis=-1)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    B, H, W, C = images.shape
    g_h, g_w = H // patch, W // patch
    x = images.reshape(B, g_h, patch, g_w, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, g_h * g_w, patch * patch * C)


def encode_image(images: np.ndarray, w: BackboneWeights, cfg: EncoderConfig, prefix: PrefixState | None = None):
    """Global embedding ``z_x`` (B, d, unit rows) and raw patch grids at each tap layer.

    ``images`` is (H, W, 3) or (B, H, W, 3) with values in [0, 1].
    Returns ``(z_x, {layer: Tensor(B, grid*grid, d)})``.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise ValueError(f"expected images of shape ({cfg.image_size}, {cfg.image_size}, 3), got {images.shape[1:]}")
    B = images.shape[0]
    if cfg.sort_channels:
        images = np.sort(images, axis=-1)
    patches = Tensor((patchify(images, cfg.patch_size) - 0.5) / 0.25)
    if cfg.stem_channels:
        G = patches.shape[1]
        pixels = patches.reshape(B, G, cfg.patch_size * cfg.patch_size, 3)
        feats = nx.gelu(nx.matmul(pixels, w["vision.stem_w"]) + w["vision.stem_b"])
        patches = feats.reshape(B, G, -1)
    tokens = nx.matmul(patches, w["vision.patch_w"]) + w["vision.patch_b"]
    if cfg.stem_pool:
        # a thin scratch or crack is a few pixels; a sum over the patch dilutes it, the extremes do not
        extremes = nx.concat([nx.amax(feats, axis=2), -nx.amax(-feats, axis=2)], axis=-1)
        tokens = tokens + nx.matmul(extremes, w["vision.pool_w"])
    cls = nx.broadcast_to(w["vision.cls"].reshape(1, 1, cfg.width), (B, 1, cfg.width))
    x = nx.concat([cls, tokens], axis=1) + w["vision.pos_emb"]
    x = nx.layer_norm(x, w["vision.lnpre_g"], w["vision.lnpre_b"])
    blocks = list(prefix.vision) if prefix is not None else []
    cache: list = []
    x, tapped = _run_layers(w, "vision", x, cfg, blocks, taps=cfg.tap_layers, cache=cache)
    if prefix is not None:
        prefix.vision_cache = cache
    g = nx.layer_norm(x[:, 0], w["vision.lnpost_g"], w["vision.lnpost_b"])
    z_x = nx.l2_normalize(nx.matmul(g, w["vision.proj"]), axis=-1)
    taps = {layer: tapped[layer][:, 1:] for layer in cfg.tap_layers}
    return z_x, taps


# -- captions & contrastive pretraining ---------------------------------------
def pad_token_batch(seqs: Sequence[Sequence[int]], vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray]:
    """Wrap each sequence in start/end tokens and right-pad; returns ids and end positions."""
    L = max(len(s) for s in seqs) + 2
    ids = np.full((len(seqs), L), vocab.pad_id, dtype=np.int64)
    eot = np.zeros(len(seqs), dtype=np.int64)
    for i, s in enumerate(seqs):
        row = [vocab.start_id, *s, vocab.end_id]
        ids[i, :len(row)] = row
        eot[i] = len(row) - 1
    return ids, eot


def encode_captions(captions: Sequence[str], w: BackboneWeights, cfg: EncoderConfig, vocab: Vocabulary) -> Tensor:
    ids, eot = pad_token_batch([vocab.tokenize(c) for c in captions], vocab)
    return encode_text(embed_token_ids(w, ids), eot, w, cfg)


def info_nce(z_img: Tensor, z_txt: Tensor, temperature: float) -> Tensor:
    """Symmetric in-batch contrastive loss over matched rows."""
    n = z_img.shape[0]
    logits = nx.matmul(z_img, z_txt.swapaxes(0, 1)) * (1.0 / temperature)
    diag = (np.arange(n), np.arange(n))
    i2t = -nx.log_softmax(logits, axis=1)[diag].mean()
    t2i = -nx.log_softmax(logits, axis=0)[diag].mean()
    return (i2t + t2i) * 0.5


def _pretrain_batches(n: int, batch_size: int, groups: Sequence[int] | None, rng: RngHandle) -> list[np.ndarray]:
    order = rng.permutation(n)
    if groups is None:
        return [order[s:s + batch_size] for s in range(0, n, batch_size)]
    g = np.asarray(groups)[order]
    batches = []
    for gid in sorted(set(g.tolist())):
        members = order[g == gid]
        batches += [members[s:s + batch_size] for s in range(0, len(members), batch_size)]
    return [batches[i] for i in rng.child("shuffle").permutation(len(batches))]


def pretrain_backbone(pairs: Sequence[tuple[np.ndarray, str]], cfg: EncoderConfig, vocab: Vocabulary,
                      epochs: int = 10, lr: float = 1e-3, temperature: float = 0.07, batch_size: int = 32,
                      seed: int = 0, weights: BackboneWeights | None = None,
                      augment: Callable[[np.ndarray, str, RngHandle], tuple[np.ndarray, str]] | None = None,
                      groups: Sequence[int] | None = None,
                      hold_fixed: Sequence[str] = ()) -> BackboneWeights:
    """Contrastive image/caption pretraining of both towers; returns frozen weights.

    ``augment`` (optional) maps one (image, caption) pair to a new pair; it is
    called per sample and epoch with its own keyed generator. ``groups``
    (optional, one id per pair) keeps each batch inside one group, which turns
    the rest of the batch into hard negatives that differ in finer detail.
    Parameters named in ``hold_fixed`` keep their initial values.
    """
    if not pairs:
        raise ValueError("pretraining corpus is empty")
    rng = RngHandle(seed, ("pretrain",))
    if weights is None:
        weights = BackboneWeights.init(cfg, len(vocab), rng.child("init"))
    weights.unfreeze()
    unknown = set(hold_fixed) - set(weights.params)
    if unknown:
        raise KeyError(f"hold_fixed names unknown parameters: {sorted(unknown)}")
    for name in hold_fixed:
        weights.params[name].requires_grad = False
    opt = Adam({k: v for k, v in weights.params.items() if k not in hold_fixed}, lr=lr)
    images = np.stack([p[0] for p in pairs])
    token_seqs = [vocab.tokenize(p[1]) for p in pairs]
    n = len(pairs)
    if groups is not None and len(groups) != n:
        raise ValueError("groups must give one id per pair")
    for epoch in range(epochs):
        total = 0.0
        for idx in _pretrain_batches(n, batch_size, groups, rng.child("epoch", epoch)):
            opt.zero_grad()
            batch_images = images[idx]
            batch_tokens = [token_seqs[i] for i in idx]
            if augment is not None:
                batch_images = batch_images.copy()
                for k, i in enumerate(idx):
                    img, cap = augment(images[i], pairs[i][1], rng.child("augment", epoch, int(i)))
                    batch_images[k] = img
                    batch_tokens[k] = vocab.tokenize(cap)
            z_img, _ = encode_image(batch_images, weights, cfg)
            ids, eot = pad_token_batch(batch_tokens, vocab)
            z_txt = encode_text(embed_token_ids(weights, ids), eot, weights, cfg)
            loss = info_nce(z_img, z_txt, temperature)
            if len(idx) > 1:
                loss.backward()
                opt.step()
            total += loss.item() * len(idx)
        weights.history.append(total / n)
        log.info("pretrain epoch %d loss %.4f", epoch, total / n)
    return weights.freeze()
