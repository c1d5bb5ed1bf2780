"""Procedural defect corpus with a controlled train/target distribution shift.

Objects are flat polygons or ellipses ("bodies") with small protruding tabs.
The train and target splits use disjoint palettes, background tones, surface
textures and scale ranges. Defect appearance is the same in both splits.
Some defect types appear only in the target split.

Images are quantised to multiples of 1/255 so PNG round trips are exact.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage import draw

from .numerics import RngHandle
from .prompts import read_defect_list, write_defect_list

DEFECT_TYPES = ("scratch", "hole", "stain", "crack", "bent", "missing")

# name -> rgb
TRAIN_PALETTE = {
    "red": (0.80, 0.26, 0.20), "orange": (0.86, 0.50, 0.18), "yellow": (0.80, 0.70, 0.24),
    "brown": (0.60, 0.40, 0.24), "pink": (0.86, 0.46, 0.56), "crimson": (0.70, 0.16, 0.28),
}
TARGET_PALETTE = {
    "blue": (0.26, 0.40, 0.80), "green": (0.26, 0.64, 0.34), "purple": (0.54, 0.32, 0.70),
    "teal": (0.18, 0.58, 0.58), "navy": (0.24, 0.30, 0.62), "cyan": (0.34, 0.70, 0.82),
}
PALETTES = {"train": TRAIN_PALETTE, "target": TARGET_PALETTE}
# both mid-luminance so very bright and very dark marks stay anomalous on either side of the shift
BACKGROUNDS = {"train": (0.60, 0.56, 0.44), "target": (0.42, 0.48, 0.58)}
TEXTURES = {"train": "shaded", "target": "striped"}
AREA_RANGES = {"train": (0.30, 0.36), "target": (0.35, 0.40)}

FAMILIES = ("circle", "square", "hexagon", "diamond", "ellipse", "octagon")

SCRATCH_RGB = np.array([0.97, 0.97, 0.95])
HOLE_RGB = np.array([0.06, 0.05, 0.05])
CRACK_RGB = np.array([0.14, 0.12, 0.10])
STAIN_RGB = np.array([0.36, 0.30, 0.08])
MIN_DEFECT_PIXELS_FRAC = 0.005


class CorpusError(ValueError):
    pass


class SampleIOError(OSError):
    pass


@dataclass
class SampleRecord:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    mask: np.ndarray  # (K+1, H, W) one-hot uint8, channel 0 = normal
    label: int
    object_class: str
    defects_present: list[str]
    name: str = ""
    color: str = ""

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.mask, axis=0)

    def validate(self) -> None:
        if not np.all(self.mask.sum(axis=0) == 1):
            raise CorpusError(f"{self.name}: mask is not one-hot per pixel")
        has_defect = bool(self.mask[1:].any())
        if has_defect != bool(self.label):
            raise CorpusError(f"{self.name}: label {self.label} disagrees with mask")
        if not self.label and not self.mask[0].all():
            raise CorpusError(f"{self.name}: normal sample with non-normal pixels")


@dataclass
class CorpusSpec:
    seed: int = 0
    image_size: int = 64
    families: tuple[str, ...] = FAMILIES
    defects: tuple[str, ...] = DEFECT_TYPES
    unseen_defects: tuple[str, ...] = ("crack", "stain")
    n_train: int = 400
    n_target: int = 200
    anomaly_ratio: float = 0.5
    multi_defect_prob: float = 0.15

    def __post_init__(self):
        self.families = tuple(self.families)
        self.defects = tuple(self.defects)
        self.unseen_defects = tuple(self.unseen_defects)
        unknown = [d for d in self.defects if d not in DEFECT_TYPES]
        if unknown:
            raise CorpusError(f"no renderer for defects {unknown}")
        if not set(self.unseen_defects) <= set(self.defects):
            raise CorpusError("unseen defects must be part of the defect set")
        if not self.train_defects:
            raise CorpusError("train split needs at least one seen defect")
        if set(TRAIN_PALETTE) & set(TARGET_PALETTE):
            raise CorpusError("train and target palettes overlap")

    @property
    def train_defects(self) -> list[str]:
        return [d for d in self.defects if d not in self.unseen_defects]

    @property
    def target_defects(self) -> list[str]:
        return list(self.defects)

    def defects_for(self, split: str) -> list[str]:
        return self.train_defects if split == "train" else self.target_defects


@dataclass
class Corpus:
    spec: CorpusSpec
    train: list[SampleRecord]
    target: list[SampleRecord]
    captions: list[tuple[int, str]] = field(default_factory=list)  # (train index, caption)

    def caption_pairs(self) -> list[tuple[np.ndarray, str]]:
        return [(self.train[i].image, c) for i, c in self.captions]

    def split(self, name: str) -> list[SampleRecord]:
        return self.train if name == "train" else self.target


# -- object rendering -----------------------------------------------------------
def _polygon(n_sides: int, area: float, angle: float):
    # regular polygon with circumradius R has area n R^2 sin(2 pi / n) / 2
    R = np.sqrt(2.0 * area / (n_sides * np.sin(2 * np.pi / n_sides)))
    t = angle + 2 * np.pi * np.arange(n_sides) / n_sides
    return R * np.cos(t), R * np.sin(t)


def _body_mask(family: str, size: int, area: float, rng: RngHandle) -> np.ndarray:
    c = size / 2 - 0.5 + rng.uniform(-1.5, 1.5, 2)
    mask = np.zeros((size, size), dtype=bool)
    if family in ("circle", "ellipse"):
        ratio = 1.0 if family == "circle" else rng.uniform(1.25, 1.45)
        a = np.sqrt(area / np.pi * ratio)
        b = a / ratio
        rr, cc = draw.ellipse(c[0], c[1], b, a, shape=mask.shape, rotation=rng.uniform(0, np.pi))
        mask[rr, cc] = True
        return mask
    sides = {"square": 4, "hexagon": 6, "diamond": 4, "octagon": 8}[family]
    angle = rng.uniform(-0.25, 0.25) + (np.pi / 4 if family == "square" else 0.0)
    ys, xs = _polygon(sides, area, angle)
    rr, cc = draw.polygon(c[0] + ys, c[1] + xs, shape=mask.shape)
    mask[rr, cc] = True
    return mask


def _background(split: str, size: int, rng: RngHandle) -> np.ndarray:
    base = np.array(BACKGROUNDS[split])
    return np.clip(base + rng.normal(0.0, 0.012, (size, size, 3)), 0.0, 1.0)


def _texture(split: str, size: int, rng: RngHandle) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    if TEXTURES[split] == "shaded":
        gy, gx = rng.uniform(-1, 1, 2)
        return 0.06 * (gy * (yy - 0.5) + gx * (xx - 0.5))
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(5.0, 7.0) / size
    return 0.035 * np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period)


def _quantise(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


@dataclass
class RenderedObject:
    image: np.ndarray
    background: np.ndarray
    silhouette: np.ndarray
    body: np.ndarray
    tabs: list[np.ndarray]
    color: str
    family: str


def render_object(family: str, split: str, rng: RngHandle, size: int = 64) -> RenderedObject:
    """Clean object on the split's background. Deterministic under ``rng``."""
    if family not in FAMILIES:
        raise CorpusError(f"unknown object family {family!r}")
    palette = PALETTES[split]
    names = sorted(palette)
    color = names[int(rng.integers(len(names)))]
    rgb = np.clip(np.array(palette[color]) + rng.uniform(-0.04, 0.04, 3), 0.0, 1.0)
    lo, hi = AREA_RANGES[split]
    area = rng.uniform(lo, hi) * size * size
    body = _body_mask(family, size, area, rng)

    dist_out = ndimage.distance_transform_edt(~body)
    edge = np.argwhere(body & (ndimage.binary_dilation(~body)))
    tabs = []
    n_tabs = int(rng.integers(2, 4))
    centre = np.array(body.shape) / 2
    start = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size]
    for t in range(n_tabs):
        ang = start + 2 * np.pi * t / n_tabs
        direction = np.array([np.sin(ang), np.cos(ang)])
        proj = (edge - centre) @ direction
        py, px = edge[int(np.argmax(proj))]
        r = rng.uniform(3.5, 4.5)
        tab = ((yy - py) ** 2 + (xx - px) ** 2 <= r * r) & ~body & (dist_out <= r)
        if tab.sum() >= 6:
            tabs.append(tab)

    silhouette = body.copy()
    for tab in tabs:
        silhouette |= tab
    background = _background(split, size, rng)
    surface = np.clip(rgb + _texture(split, size, rng)[..., None], 0.0, 1.0)
    img = background.copy()
    img[body] = surface[body]
    tab_rgb = np.clip(rgb * 0.82, 0.0, 1.0)
    for tab in tabs:
        img[tab] = tab_rgb
    background = _quantise(background)
    return RenderedObject(_quantise(img), background, silhouette, body, tabs, color, family)


# -- defect rendering -----------------------------------------------------------
def _interior_point(body: np.ndarray, margin: float, rng: RngHandle) -> np.ndarray:
    dist = ndimage.distance_transform_edt(body)
    cand = np.argwhere(dist >= margin)
    if len(cand) == 0:
        cand = np.argwhere(dist >= dist.max())
    return cand[int(rng.integers(len(cand)))].astype(float)


def _thick_polyline(points: np.ndarray, width: int, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    for (r0, c0), (r1, c1) in zip(points[:-1], points[1:]):
        rr, cc = draw.line(int(round(r0)), int(round(c0)), int(round(r1)), int(round(c1)))
        keep = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
        mask[rr[keep], cc[keep]] = True
    if width > 1:
        mask = ndimage.binary_dilation(mask, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], bool),
                                       iterations=width - 1)
    return mask


def _scratch(obj, img, rng, size):
    p = _interior_point(obj.body, 6, rng)
    ang = rng.uniform(0, np.pi)
    pts = [p]
    for _ in range(int(rng.integers(2, 4))):
        ang += rng.uniform(-0.35, 0.35)
        step = rng.uniform(7, 11)
        pts.append(pts[-1] + step * np.array([np.sin(ang), np.cos(ang)]))
    region = _thick_polyline(np.array(pts), int(rng.integers(1, 3)), size) & obj.body
    out = img.copy()
    out[region] = SCRATCH_RGB
    return out, region


def _hole(obj, img, rng, size):
    ry, rx = rng.uniform(3.0, 5.5, 2)
    p = _interior_point(obj.body, max(ry, rx) + 1.5, rng)
    region = np.zeros((size, size), dtype=bool)
    rr, cc = draw.ellipse(p[0], p[1], ry, rx, shape=region.shape, rotation=rng.uniform(0, np.pi))
    region[rr, cc] = True
    region &= obj.body
    out = img.copy()
    out[region] = HOLE_RGB
    return out, region


def _stain(obj, img, rng, size):
    p = _interior_point(obj.body, 6, rng)
    yy, xx = np.mgrid[0:size, 0:size]
    blob = np.zeros((size, size))
    for _ in range(int(rng.integers(2, 4))):
        c = p + rng.uniform(-4, 4, 2)
        s = rng.uniform(3.0, 5.0)
        blob += np.exp(-((yy - c[0]) ** 2 + (xx - c[1]) ** 2) / (2 * s * s))
    alpha = 0.8 * np.minimum(blob, 1.0)
    region = (alpha > 0.3) & obj.body
    out = img.copy()
    a = alpha[region][:, None]
    out[region] = (1 - a) * img[region] + a * STAIN_RGB
    return _quantise(out), region


def _crack(obj, img, rng, size):
    p = _interior_point(obj.body, 6, rng)
    ang = rng.uniform(0, 2 * np.pi)
    trunk = [p]
    for _ in range(int(rng.integers(7, 11))):
        ang += rng.uniform(-0.9, 0.9)
        trunk.append(trunk[-1] + rng.uniform(2.5, 4.0) * np.array([np.sin(ang), np.cos(ang)]))
    region = _thick_polyline(np.array(trunk), 1, size)
    root = trunk[len(trunk) // 2]
    ang2 = ang + rng.choice([-1.0, 1.0]) * rng.uniform(0.8, 1.4)
    branch = [root]
    for _ in range(int(rng.integers(3, 5))):
        ang2 += rng.uniform(-0.8, 0.8)
        branch.append(branch[-1] + rng.uniform(2.0, 3.5) * np.array([np.sin(ang2), np.cos(ang2)]))
    region |= _thick_polyline(np.array(branch), 1, size)
    region &= obj.body
    out = img.copy()
    out[region] = CRACK_RGB
    return out, region


def _bent(obj, img, rng, size):
    body = obj.body
    edge = np.argwhere(body & ndimage.binary_dilation(~body))
    b = edge[int(rng.integers(len(edge)))].astype(float)
    dist_in = ndimage.distance_transform_edt(body)
    gy, gx = np.gradient(dist_in)
    n = -np.array([gy[int(b[0]), int(b[1])], gx[int(b[0]), int(b[1])]])
    if np.linalg.norm(n) < 1e-6:
        n = b - np.array([size / 2, size / 2])
    n = n / np.linalg.norm(n)
    amp, sigma = rng.uniform(5.0, 7.0), rng.uniform(4.0, 5.5)
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    fall = amp * np.exp(-((yy - b[0]) ** 2 + (xx - b[1]) ** 2) / (2 * sigma * sigma))
    src_y, src_x = yy + fall * n[0], xx + fall * n[1]
    warped = np.stack([ndimage.map_coordinates(img[..., ch], [src_y, src_x], order=0, mode="nearest")
                       for ch in range(3)], axis=-1)
    changed = np.abs(warped - img).max(axis=-1) > 0.1
    region = changed & obj.silhouette
    out = img.copy()
    out[region] = warped[region]
    return out, region


def _missing(obj, img, rng, size):
    if not obj.tabs:
        return img.copy(), np.zeros((size, size), dtype=bool)
    tab = obj.tabs[int(rng.integers(len(obj.tabs)))]
    out = img.copy()
    out[tab] = obj.background[tab]
    return out, tab.copy()


_RENDERERS = {"scratch": _scratch, "hole": _hole, "stain": _stain, "crack": _crack, "bent": _bent,
              "missing": _missing}


def render_defect(obj: RenderedObject, image: np.ndarray, defect: str, rng: RngHandle):
    """Apply one defect; returns the new image and the boolean set of changed pixels."""
    if defect not in _RENDERERS:
        raise CorpusError(f"unknown defect {defect!r}")
    size = image.shape[0]
    return _RENDERERS[defect](obj, image, rng, size)


# -- corpus ---------------------------------------------------------------------
def _caption(color: str, family: str, defects: Sequence[str]) -> str:
    text = f"a photo of a {color} {family}"
    if defects:
        text += f" with a {defects[0]}"
    return text


COLOR_WORDS = frozenset(TRAIN_PALETTE) | frozenset(TARGET_PALETTE)


def color_augment(image: np.ndarray, caption: str, rng: RngHandle, p: float = 0.5) -> tuple[np.ndarray, str]:
    """With probability ``p`` permute the colour channels and drop the colour word.

    Used only while pretraining the backbone, so its features do not hinge on
    absolute hue; the caption keeps shape and defect words.
    """
    if rng.uniform() >= p:
        return image, caption
    perms = [(0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]
    out = image[..., list(perms[int(rng.integers(len(perms)))])]
    words = [w for w in caption.split() if w not in COLOR_WORDS]
    return out, " ".join(words)


def make_sample(spec: CorpusSpec, split: str, index: int, rng: RngHandle,
                primary_defect: str | None = None) -> SampleRecord:
    """One sample; normal when ``primary_defect`` is None."""
    size = spec.image_size
    family = spec.families[index % len(spec.families)]
    names = spec.defects_for(split)
    anomalous = primary_defect is not None
    for attempt in range(20):
        r = rng.child("attempt", attempt)
        obj = render_object(family, split, r.child("object"), size)
        labels = np.zeros((size, size), dtype=np.int64)
        img = obj.image.copy()
        present: list[str] = []
        if anomalous:
            chosen = [primary_defect]
            if len(names) > 1 and r.uniform() < spec.multi_defect_prob:
                other = [n for n in names if n != chosen[0]]
                chosen.append(other[int(r.integers(len(other)))])
            ok = True
            for k, defect in enumerate(chosen):
                img, region = render_defect(obj, img, defect, r.child("defect", k))
                if defect != "missing" and region.sum() < MIN_DEFECT_PIXELS_FRAC * size * size:
                    ok = False
                    break
                if region.sum() == 0:
                    ok = False
                    break
                labels[region] = names.index(defect) + 1
            if not ok:
                continue
            present = [d for d in chosen if np.any(labels == names.index(d) + 1)]
            if len(present) != len(chosen):
                continue
        mask = np.zeros((len(names) + 1, size, size), dtype=np.uint8)
        np.put_along_axis(mask, labels[None], 1, axis=0)
        rec = SampleRecord(img, mask, int(anomalous), family, present, f"{split}_{index:04d}", obj.color)
        rec.validate()
        return rec
    raise CorpusError(f"could not render sample {split}/{index} after 20 attempts")


def generate_corpus(spec: CorpusSpec) -> Corpus:
    """Both splits plus caption pairs; a pure function of ``spec``."""
    root = RngHandle(spec.seed, ("corpus",))
    splits = {}
    for split, n in (("train", spec.n_train), ("target", spec.n_target)):
        names = spec.defects_for(split)
        n_anomalous = int(round(spec.anomaly_ratio * n))
        order = root.child(split, "anomalous").permutation(n)
        primary = {int(i): names[rank % len(names)] for rank, i in enumerate(order[:n_anomalous])}
        splits[split] = [make_sample(spec, split, i, root.child(split, i), primary.get(i)) for i in range(n)]
    captions = [(i, _caption(r.color, r.object_class, r.defects_present)) for i, r in enumerate(splits["train"])]
    return Corpus(spec, splits["train"], splits["target"], captions)


def shift_witness(train: Sequence[SampleRecord], target: Sequence[SampleRecord], bins: int = 4) -> float:
    """Held-out accuracy of a nearest-centroid colour-histogram split classifier."""
    def hist(img):
        q = np.minimum((img * bins).astype(int), bins - 1)
        h = np.bincount(((q[..., 0] * bins + q[..., 1]) * bins + q[..., 2]).ravel(), minlength=bins ** 3).astype(float)
        return h / h.sum()

    a = np.array([hist(r.image) for r in train])
    b = np.array([hist(r.image) for r in target])
    ca, cb = a[::2].mean(axis=0), b[::2].mean(axis=0)
    test = [(h, 0) for h in a[1::2]] + [(h, 1) for h in b[1::2]]
    correct = sum(int((np.minimum(h, cb).sum() > np.minimum(h, ca).sum()) == bool(y)) for h, y in test)
    return correct / len(test)


def histogram_intersection(images_a: Iterable[np.ndarray], images_b: Iterable[np.ndarray], bins: int = 8) -> float:
    def pooled(imgs):
        total = np.zeros(bins ** 3)
        for img in imgs:
            q = np.minimum((img * bins).astype(int), bins - 1)
            total += np.bincount(((q[..., 0] * bins + q[..., 1]) * bins + q[..., 2]).ravel(), minlength=bins ** 3)
        return total / total.sum()

    return float(np.minimum(pooled(images_a), pooled(images_b)).sum())


# -- persistence ----------------------------------------------------------------
def _palette_bytes(n: int) -> list[int]:
    base = [(0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
            (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60)]
    pal = [base[i % len(base)] for i in range(max(n, 1))]
    return [c for rgb in pal for c in rgb] + [0] * (768 - 3 * len(pal))


def save_label_png(labels: np.ndarray, path: str | Path, n_classes: int) -> None:
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    im.putpalette(_palette_bytes(n_classes))
    im.save(path)


def _relpath(record: SampleRecord) -> Path:
    return Path(record.object_class) / ("defect" if record.label else "good")


def save_sample(record: SampleRecord, directory: str | Path) -> Path:
    """Write image PNG, indexed mask PNG and JSON metadata under a split directory."""
    root = Path(directory)
    rel = _relpath(record)
    paths = {
        "image": root / rel / f"{record.name}.png",
        "mask": root / "masks" / rel / f"{record.name}.png",
        "meta": root / "meta" / rel / f"{record.name}.json",
    }
    for p in paths.values():
        p.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(record.image * 255.0).astype(np.uint8), mode="RGB").save(paths["image"])
    save_label_png(record.labels, paths["mask"], record.mask.shape[0])
    meta = {"label": record.label, "object": record.object_class, "defects": record.defects_present,
            "color": record.color, "name": record.name}
    paths["meta"].write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return paths["image"]


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.array(im)
    except (OSError, ValueError) as exc:
        raise SampleIOError(f"cannot read {path}: {exc}") from exc


def load_sample(image_path: str | Path, split_dir: str | Path, n_classes: int | None = None) -> SampleRecord:
    """Inverse of :func:`save_sample`; validates mask/label agreement."""
    image_path, root = Path(image_path), Path(split_dir)
    rel = image_path.relative_to(root)
    mask_path = root / "masks" / rel
    meta_path = (root / "meta" / rel).with_suffix(".json")
    if n_classes is None:
        n_classes = len(read_defect_list(root / "defects.txt")) + 1
    image = _read_png(image_path).astype(np.float64) / 255.0
    labels = _read_png(mask_path).astype(np.int64)
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SampleIOError(f"cannot read {meta_path}: {exc}") from exc
    if labels.max() >= n_classes:
        raise SampleIOError(f"{mask_path}: label {labels.max()} outside {n_classes} classes")
    mask = np.zeros((n_classes,) + labels.shape, dtype=np.uint8)
    np.put_along_axis(mask, labels[None], 1, axis=0)
    rec = SampleRecord(image, mask, int(meta["label"]), meta["object"], list(meta["defects"]),
                       meta.get("name", image_path.stem), meta.get("color", ""))
    rec.validate()
    return rec


def _image_paths(split_dir: Path) -> list[Path]:
    skip = {"masks", "meta"}
    paths = [p for p in split_dir.rglob("*.png") if p.relative_to(split_dir).parts[0] not in skip]
    return sorted(paths, key=lambda p: (p.name, str(p)))


def load_split(split_dir: str | Path) -> tuple[list[SampleRecord], list[str]]:
    """All samples of a split directory in lexicographic filename order, plus its defect list."""
    root = Path(split_dir)
    defects_file = root / "defects.txt"
    if not defects_file.exists():
        raise SampleIOError(f"missing defect list {defects_file}")
    names = read_defect_list(defects_file)
    return [load_sample(p, root, len(names) + 1) for p in _image_paths(root)], names


def save_corpus(corpus: Corpus, directory: str | Path) -> None:
    root = Path(directory)
    for split in ("train", "target"):
        split_dir = root / split
        split_dir.mkdir(parents=True, exist_ok=True)
        write_defect_list(corpus.spec.defects_for(split), split_dir / "defects.txt")
        for rec in corpus.split(split):
            save_sample(rec, split_dir)
    lines = []
    for i, caption in corpus.captions:
        rec = corpus.train[i]
        lines.append(f"{(_relpath(rec) / (rec.name + '.png')).as_posix()}\t{caption}")
    (root / "captions.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (root / "corpus.json").write_text(json.dumps(asdict(corpus.spec), sort_keys=True, indent=1) + "\n",
                                      encoding="utf-8")


def load_corpus(directory: str | Path) -> Corpus:
    root = Path(directory)
    if (root / "corpus.json").exists():
        spec = CorpusSpec(**json.loads((root / "corpus.json").read_text(encoding="utf-8")))
    else:
        spec = CorpusSpec()
    train, _ = load_split(root / "train")
    target, _ = load_split(root / "target")
    index = {(_relpath(r) / (r.name + ".png")).as_posix(): i for i, r in enumerate(train)}
    captions = []
    cap_file = root / "captions.tsv"
    if cap_file.exists():
        for line in cap_file.read_text(encoding="utf-8").splitlines():
            if line.strip():
                rel, caption = line.split("\t", 1)
                captions.append((index[rel], caption))
    return Corpus(spec, train, target, captions)


def reject_external_format(path: str | Path) -> None:
    """Public benchmark layouts (MVTec-AD, VisA, ...) are not supported."""
    raise CorpusError(f"{path}: only corpora written by save_corpus are supported; "
                      "MVTec-AD/VisA-style layouts are not")
