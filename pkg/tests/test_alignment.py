from __future__ import annotations

import math

import numpy as np
import pytest

from dapo import alignment as al
from dapo import numerics as nx
from dapo.numerics import RngHandle, Tensor
from dapo.prompts import StatePrototypes


def random_probs(rng, shape):
    x = rng.uniform(0.05, 1.0, shape)
    return x / x.sum(axis=-3, keepdims=True)


def random_onehot(rng, C, H, W):
    labels = rng.integers(0, C, (H, W))
    return np.eye(C)[labels].transpose(2, 0, 1)


# -- scalar-loop oracles ---------------------------------------------------------
def focal_oracle(p, y, gamma):
    C, H, W = p.shape
    total = 0.0
    for i in range(H):
        for j in range(W):
            pt = sum(p[c, i, j] * y[c, i, j] for c in range(C))
            pt = max(pt, 1e-12)
            total += -((1.0 - pt) ** gamma) * math.log(pt)
    return total / (H * W)


def dice_oracle(p, y, eps):
    inter = s_p = s_y = 0.0
    for i in range(p.shape[0]):
        for j in range(p.shape[1]):
            inter += p[i, j] * y[i, j]
            s_p += p[i, j]
            s_y += y[i, j]
    return 1.0 - (2.0 * inter + eps) / (s_p + s_y + eps)


def test_focal_matches_scalar_loop_50_cases():
    for seed in range(50):
        rng = RngHandle(seed, ("focal",))
        p = random_probs(rng, (3, 4, 4))
        y = random_onehot(rng, 3, 4, 4)
        gamma = [0.0, 1.0, 2.0, 2.5][seed % 4]
        got = al.focal_loss(Tensor(p), y, gamma).item()
        assert abs(got - focal_oracle(p, y, gamma)) <= 1e-12, seed


def test_dice_matches_scalar_loop_50_cases():
    for seed in range(50):
        rng = RngHandle(seed, ("dice",))
        p = rng.uniform(0, 1, (4, 4))
        y = (rng.uniform(0, 1, (4, 4)) > 0.5).astype(float)
        eps = [1.0, 0.5, 1e-6][seed % 3]
        assert abs(al.dice_loss(Tensor(p), y, eps).item() - dice_oracle(p, y, eps)) <= 1e-12, seed


def test_focal_and_dice_edge_values():
    y = random_onehot(RngHandle(0), 2, 4, 4)
    assert al.focal_loss(Tensor(y.copy()), y).item() == 0.0
    assert al.dice_loss(Tensor(y[0]), y[0]).item() == pytest.approx(0.0, abs=1e-15)
    # gamma = 0 reduces to cross-entropy
    p = random_probs(RngHandle(1), (2, 4, 4))
    ce = -np.mean(np.log((p * y).sum(axis=0)))
    assert al.focal_loss(Tensor(p), y, 0.0).item() == pytest.approx(ce, abs=1e-14)
    # a zero probability is clamped rather than producing inf
    assert np.isfinite(al.focal_loss(Tensor(1.0 - y), y).item())


def test_focal_and_dice_gradients():
    rng = RngHandle(5)
    y = random_onehot(rng, 3, 4, 4)
    p = random_probs(rng, (3, 4, 4))
    assert nx.finite_diff_check(lambda t: al.focal_loss(t, y, 2.0), Tensor(p)) < 1e-5
    assert nx.finite_diff_check(lambda t: al.dice_loss(t, y[0], 1.0), Tensor(p[0])) < 1e-5


# -- upsampling ----------------------------------------------------------------------
def bilinear_oracle(x, H, W):
    h, w = x.shape
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            sy = min(max((i + 0.5) * h / H - 0.5, 0.0), h - 1)
            sx = min(max((j + 0.5) * w / W - 0.5, 0.0), w - 1)
            y0, x0 = int(sy), int(sx)
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            out[i, j] = ((1 - fy) * (1 - fx) * x[y0, x0] + (1 - fy) * fx * x[y0, x1]
                         + fy * (1 - fx) * x[y1, x0] + fy * fx * x[y1, x1])
    return out


def test_upsample_matches_closed_form():
    x = RngHandle(6).normal(size=(2, 2))
    up = al.upsample(x, 4, 4)
    np.testing.assert_allclose(up, bilinear_oracle(x, 4, 4), atol=1e-14)
    # hand value: output pixel (1, 1) samples source (0.25, 0.25)
    expect = 0.75 * 0.75 * x[0, 0] + 0.75 * 0.25 * (x[0, 1] + x[1, 0]) + 0.0625 * x[1, 1]
    assert up[1, 1] == pytest.approx(expect, abs=1e-14)
    assert up[0, 0] == x[0, 0]


@pytest.mark.parametrize("h,H", [(2, 8), (3, 7), (8, 64), (5, 5)])
def test_upsample_partition_of_unity_and_oracle(h, H):
    A = al.interp_matrix(H, h)
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-15)
    x = RngHandle(h * H).normal(size=(h, h))
    np.testing.assert_allclose(al.upsample(x, H, H), bilinear_oracle(x, H, H), atol=1e-13)


def test_upsample_tensor_path_and_errors():
    x = RngHandle(7).normal(size=(2, 3, 4, 4))
    t = al.upsample(Tensor(x), 8, 8)
    np.testing.assert_allclose(t.data, al.upsample(x, 8, 8), atol=1e-14)
    with pytest.raises(ValueError):
        al.upsample(x, 2, 2)


# -- similarity maps ---------------------------------------------------------------------
def test_similarity_maps_are_distributions():
    rng = RngHandle(8)
    protos = nx.l2_normalize(Tensor(rng.normal(size=(3, 6))), axis=-1)
    patches = [nx.l2_normalize(Tensor(rng.normal(size=(2, 16, 6))), axis=-1) for _ in range(2)]
    maps = al.similarity_maps(patches, protos, tau=0.07)
    assert maps.M == 2
    for m in maps.arrays():
        assert m.shape == (2, 3, 4, 4)
        np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)
    # oracle for one patch
    z = patches[0].data[1, 5]
    logits = protos.data @ z / 0.07
    expect = np.exp(logits - logits.max()) / np.exp(logits - logits.max()).sum()
    np.testing.assert_allclose(maps.arrays()[0][1, :, 1, 1], expect, atol=1e-12)
    with pytest.raises(nx.ShapeError):
        al.similarity_maps([Tensor(np.ones((1, 6, 6)))], protos)


def test_adapter_identity_init_and_shape_error():
    stack = al.AdapterStack.init(2, 4, 4)
    assert stack.num_params() == 2 * (16 + 4)
    x = Tensor(RngHandle(9).normal(size=(3, 4)))
    np.testing.assert_allclose(al.adapt_patches(x, stack, 1).data, nx.l2_normalize(x, axis=-1).data, atol=1e-15)
    with pytest.raises(IndexError):
        al.adapt_patches(x, stack, 2)
    with pytest.raises(nx.ShapeError):
        al.adapt_patches(Tensor(np.ones((3, 5))), stack, 0)


# -- global branch ---------------------------------------------------------------------------
def test_global_score_and_loss():
    zx = np.array([[1.0, 0.0], [0.0, 1.0]])
    zn, za = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    s = al.global_score(zx, zn, za, tau=0.5)
    p = 1.0 / (1.0 + math.exp(-2.0))
    np.testing.assert_allclose(s, [[p, 1 - p], [1 - p, p]], atol=1e-15)
    loss = al.global_loss(Tensor(zx), Tensor(zn), Tensor(za), [0, 0], tau=0.5).item()
    assert loss == pytest.approx(-(math.log(p) + math.log(1 - p)) / 2, abs=1e-14)
    assert al.global_score(zx[0], zn, za, tau=0.5).shape == (2,)


def test_image_score_fusion():
    s = np.array([0.3, 0.7])
    amap = np.array([[0.1, 0.9], [0.2, 0.0]])
    assert al.image_score(s, amap, 0.5) == pytest.approx(0.8)
    assert al.image_score(s, amap, 1.0) == pytest.approx(0.7)
    batch = al.image_score(np.stack([s, s[::-1]]), np.stack([amap, amap * 0]), 0.25)
    np.testing.assert_allclose(batch, [0.25 * 0.7 + 0.75 * 0.9, 0.25 * 0.3])


# -- local loss composition -----------------------------------------------------------------
def test_local_loss_matches_hand_assembly_two_stages():
    rng = RngHandle(10)
    maps = [Tensor(random_probs(rng, (1, 3, 2, 2))), Tensor(random_probs(rng, (1, 3, 2, 2)))]
    Y = random_onehot(rng, 3, 4, 4)[None]
    got = al.local_loss(al.SimilarityMapSet(maps, 0.07), Y, gamma=2.0, dice_eps=1.0).item()
    total = 0.0
    for m in maps:
        up = np.stack([bilinear_oracle(m.data[0, c], 4, 4) for c in range(3)])
        total += focal_oracle(up, Y[0], 2.0)
        total += dice_oracle(up[0], Y[0, 0], 1.0)
        total += dice_oracle(1.0 - up[0], 1.0 - Y[0, 0], 1.0)
    assert abs(got - total / 2) <= 1e-12


def test_total_loss_weighting():
    lb = al.total_loss(Tensor(np.array(0.5)), Tensor(np.array(0.25)), lam=4.0)
    assert lb.values() == {"global": 0.5, "local": 0.25, "total": 1.5}
    with pytest.raises(ValueError):
        al.total_loss(0.1, 0.1, lam=-1.0)


# -- inference maps ----------------------------------------------------------------------------
def test_binary_map_and_multitype_mask():
    a = np.zeros((1, 3, 2, 2))
    a[0, 0] = [[1.0, 0.2], [0.5, 0.0]]
    a[0, 1] = [[0.0, 0.8], [0.5, 0.3]]
    a[0, 2] = [[0.0, 0.0], [0.0, 0.7]]
    b = a.copy()
    amap = al.binary_anomaly_map([a, b])
    np.testing.assert_allclose(amap[0], 1.0 - a[0, 0])
    labels, evidence = al.multitype_mask([a, b])
    # the (1, 0) tie between normal and class 1 goes to the lowest index
    np.testing.assert_array_equal(labels[0], [[0, 1], [0, 2]])
    np.testing.assert_allclose(evidence, 2 * a)
    up_labels, _ = al.multitype_mask([a], 4, 4)
    assert up_labels.shape == (1, 4, 4)
    assert al.binary_anomaly_map([a], 4, 4).shape == (1, 4, 4)


def test_multilabel_probs():
    protos = StatePrototypes(Tensor(np.array([1.0, 0.0])), Tensor(np.array([[0.0, 1.0], [1.0, 0.0]])))
    p = al.multilabel_probs(np.array([0.0, 1.0]), protos, tau=1.0)
    np.testing.assert_allclose(p, [1 / (1 + math.exp(-1.0)), 0.5])
