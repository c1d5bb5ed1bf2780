from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest

from dapo import metrics as M
from dapo.numerics import RngHandle


# -- brute-force oracles ------------------------------------------------------------
def auroc_oracle(s, y):
    pos = [a for a, t in zip(s, y) if t]
    neg = [a for a, t in zip(s, y) if not t]
    wins = Fraction(0)
    for p in pos:
        for n in neg:
            wins += 1 if p > n else Fraction(1, 2) if p == n else 0
    return wins / (len(pos) * len(neg))


def ap_oracle(s, y):
    """Mean over positives of precision at that positive's score threshold."""
    n_pos = sum(y)
    total = Fraction(0)
    for a, t in zip(s, y):
        if t:
            flagged = [yy for b, yy in zip(s, y) if b >= a]
            total += Fraction(sum(flagged), len(flagged))
    return total / n_pos


def regions_oracle(mask):
    """8-connected components by explicit flood fill."""
    H, W = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    out = []
    for i in range(H):
        for j in range(W):
            if mask[i, j] and not seen[i, j]:
                stack, comp = [(i, j)], []
                seen[i, j] = True
                while stack:
                    a, b = stack.pop()
                    comp.append((a, b))
                    for da in (-1, 0, 1):
                        for db in (-1, 0, 1):
                            u, v = a + da, b + db
                            if 0 <= u < H and 0 <= v < W and mask[u, v] and not seen[u, v]:
                                seen[u, v] = True
                                stack.append((u, v))
                out.append(comp)
    return out


def aupro_oracle(maps, masks, limit=0.3):
    regions = [(n, comp) for n in range(len(masks)) for comp in regions_oracle(masks[n])]
    normal = [maps[n][i, j] for n in range(len(masks)) for i in range(masks.shape[1])
              for j in range(masks.shape[2]) if not masks[n][i, j]]
    pts = [(0.0, 0.0)]
    for t in sorted(set(maps.ravel().tolist()), reverse=True):
        fpr = sum(v >= t for v in normal) / len(normal)
        pro = np.mean([np.mean([maps[n][a, b] >= t for a, b in comp]) for n, comp in regions])
        pts.append((fpr, pro))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        if x0 >= limit:
            break
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += (x1 - x0) * (y0 + y1) / 2
    return area / limit


def f1_macro_oracle(pred, tgt):
    scores = []
    for c in range(pred.shape[1]):
        tp = fp = fn = 0
        for i in range(pred.shape[0]):
            tp += pred[i, c] and tgt[i, c]
            fp += pred[i, c] and not tgt[i, c]
            fn += (not pred[i, c]) and tgt[i, c]
        scores.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(scores) / len(scores)


def random_instance(seed, n=None):
    rng = RngHandle(seed, ("metric",))
    n = n or int(rng.integers(4, 30))
    # coarse grid of scores so ties are common
    s = rng.integers(0, 8, n) / 7.0
    y = rng.uniform(size=n) < 0.4
    y[0], y[1] = True, False
    return s, y


# -- criterion-level oracle sweeps ----------------------------------------------------
def test_auroc_exact_on_100_instances():
    for seed in range(100):
        s, y = random_instance(seed)
        assert M.auroc(s, y) == float(auroc_oracle(s.tolist(), y.tolist())), seed


def test_average_precision_on_100_instances():
    for seed in range(100):
        s, y = random_instance(seed)
        assert abs(M.average_precision(s, y) - float(ap_oracle(s.tolist(), y.tolist()))) <= 1e-12, seed


def test_aupro_on_100_instances():
    for seed in range(100):
        rng = RngHandle(seed, ("aupro",))
        maps = rng.integers(0, 6, (2, 6, 6)) / 5.0
        masks = rng.uniform(size=(2, 6, 6)) < 0.25
        masks[0, 0, 0], masks[0, 5, 5] = True, False
        assert abs(M.aupro(maps, masks) - aupro_oracle(maps, masks)) <= 1e-9, seed


def test_f1_macro_on_100_instances():
    for seed in range(100):
        rng = RngHandle(seed, ("f1",))
        C = int(rng.integers(2, 5))
        pred = M.one_hot(rng.integers(0, C, 25), C)
        tgt = M.one_hot(rng.integers(0, C, 25), C)
        assert abs(M.f1_macro(pred, tgt) - f1_macro_oracle(pred, tgt)) <= 1e-15, seed


def test_roc_trapezoid_equals_auroc():
    for seed in range(100):
        s, y = random_instance(seed)
        pts = M.roc_curve(s, y)
        area = M.trapezoid_area([p[0] for p in pts], [p[1] for p in pts])
        assert abs(area - M.auroc(s, y)) <= 1e-12, seed
        assert pts[0][:2] == (0.0, 0.0) and pts[-1][:2] == (1.0, 1.0)


# -- examples ----------------------------------------------------------------------------
def test_auroc_examples():
    assert M.auroc([0.1, 0.9], [0, 1]) == 1.0
    assert M.auroc([0.9, 0.1], [0, 1]) == 0.0
    assert M.auroc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5
    with pytest.raises(M.MetricError):
        M.auroc([0.1, 0.2], [1, 1])
    with pytest.raises(M.MetricError):
        M.auroc([0.1, 0.2, 0.3], [1, 0])


def test_average_precision_examples():
    assert M.average_precision([0.9, 0.8, 0.1], [1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2)
    assert M.average_precision([0.2, 0.2], [1, 0]) == 0.5
    with pytest.raises(M.MetricError):
        M.average_precision([0.1], [0])


def test_f1_and_confusion_examples():
    assert M.f1_binary([1, 1, 0, 0], [1, 0, 1, 0]) == 0.5
    assert M.f1_binary([0, 0], [0, 0]) == 0.0
    assert M.confusion_at([0.2, 0.5, 0.7, 0.4], [0, 1, 0, 1], 0.5) == (1, 1, 1, 1)
    np.testing.assert_array_equal(M.f1_per_class(np.eye(3, dtype=bool), np.eye(3, dtype=bool)), [1, 1, 1])
    with pytest.raises(M.MetricError):
        M.f1_per_class(np.zeros((2, 3)), np.zeros((3, 3)))


def test_aupro_examples():
    masks = np.zeros((1, 4, 4), bool)
    masks[0, :2, :2] = True
    perfect = masks.astype(float)
    assert M.aupro(perfect, masks) == 1.0
    # constant map: the PRO curve jumps straight from (0, 0) to (1, 1)
    assert M.aupro(np.full((1, 4, 4), 0.3), masks) == pytest.approx(0.15, abs=1e-15)
    with pytest.raises(M.MetricError):
        M.aupro(perfect, np.zeros((1, 4, 4), bool))
    with pytest.raises(M.MetricError):
        M.aupro(perfect, masks, fpr_limit=0.0)


def test_aupro_regions_weighted_equally():
    # a large region fully found and a single-pixel region missed score PRO 0.5
    masks = np.zeros((1, 8, 8), bool)
    masks[0, :4, :4] = True
    masks[0, 7, 7] = True
    maps = np.zeros((1, 8, 8))
    maps[0, :4, :4] = 1.0
    fpr, pro = M.pro_curve(maps, masks)
    assert pro[1] == 0.5 and fpr[1] == 0.0


def test_pro_curve_ignore_drops_pixels():
    rng = RngHandle(3)
    maps = rng.uniform(size=(2, 6, 6))
    masks = rng.uniform(size=(2, 6, 6)) < 0.3
    ignore = np.zeros_like(masks)
    ignore[1] = True
    masks[0, 0, 0] = True
    assert M.aupro(maps, masks, ignore=ignore) == pytest.approx(aupro_oracle(maps[:1], masks[:1]), abs=1e-12)


def test_report_write(tmp_path):
    rep = M.MetricsReport("binary_ad", overall={"image_auroc": 0.75}, per_object={"circle": {"image_auroc": 1.0}},
                          curves={"roc": [(0.0, 0.0, float("inf")), (1.0, 1.0, 0.1)]})
    jpath, cpath = rep.write(tmp_path)
    assert jpath.exists() and cpath.read_text().splitlines()[1] == "all,image_auroc,0.75"
    assert (tmp_path / "report_binary_ad_roc.csv").exists()


def test_safe_metric_and_nanmean():
    assert M.safe_metric(M.auroc, [0.1], [1]) is None
    assert M.nanmean([None, 0.5, 1.0]) == 0.75
    assert M.nanmean([None]) is None
