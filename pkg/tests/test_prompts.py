from __future__ import annotations

import numpy as np
import pytest

from dapo import numerics as nx
from dapo.encoders import BackboneWeights, EncoderConfig, PrefixState, UnknownTokenError, default_vocab
from dapo.numerics import RngHandle, Tensor
from dapo.prompts import (DegenerateAggregateError, PromptBank, Slot, StatePrototypes, aggregate_abnormal,
                          build_defect_prompt, build_normal_prompt, embed_prompt, embed_state_prototypes,
                          init_prompt_bank, read_defect_list, register_unseen_defect, write_defect_list)

CFG = EncoderConfig(width=16, depth=2, heads=2, patch_size=4, image_size=8, tap_layers=(1, 2), prefix_len=2)


@pytest.fixture(scope="module")
def weights():
    return BackboneWeights.init(CFG, len(default_vocab()), RngHandle(0)).freeze()


def bank(names=("scratch", "hole"), E=3, l=2, strategy="clip_space", seed=0):
    return init_prompt_bank(strategy, (0.0, 0.02), list(names), E=E, l=l, d=CFG.width, rng=RngHandle(seed))


def test_defect_prompt_layout():
    b = bank()
    seq = build_defect_prompt(b, 1, "hole")
    vocab = b.vocab
    assert seq[:2] == [Slot(b.W, "W", 1, 0), Slot(b.W, "W", 1, 1)]
    assert seq[2:] == [vocab.id("hole"), vocab.id("anomaly"), vocab.id("object")]
    normal = build_normal_prompt(b, 0)
    assert normal[:2] == [Slot(b.V, "V", 0, 0), Slot(b.V, "V", 0, 1)]
    assert normal[2:] == vocab.tokenize("normal object")


def test_prompt_errors():
    b = bank()
    with pytest.raises(IndexError):
        build_defect_prompt(b, 3, "hole")
    with pytest.raises(IndexError):
        build_normal_prompt(b, -1)
    with pytest.raises(UnknownTokenError):
        build_defect_prompt(b, 0, "wobble")
    with pytest.raises(KeyError):
        build_defect_prompt(b, 0, "crack")
    with pytest.raises(ValueError):
        bank(names=("hole", "hole"))
    with pytest.raises(ValueError):
        bank(names=())
    with pytest.raises(ValueError):
        bank(strategy="uniform")


def test_shared_w_for_every_defect():
    b = bank(names=("scratch", "hole", "bent"))
    params = {id(e.param) for name in b.defect_names for e in build_defect_prompt(b, 0, name) if isinstance(e, Slot)}
    assert params == {id(b.W)}


def test_register_unseen_defect_adds_no_parameters():
    b = bank()
    before = (b.num_params(), b.V.data.tobytes(), b.W.data.tobytes())
    names = register_unseen_defect(b, "crack")
    register_unseen_defect(b, "stain")
    assert names == ["scratch", "hole", "crack", "stain"]
    assert (b.num_params(), b.V.data.tobytes(), b.W.data.tobytes()) == before
    with pytest.raises(ValueError):
        register_unseen_defect(b, "crack")
    with pytest.raises(UnknownTokenError):
        register_unseen_defect(b, "splotch")


def test_init_strategies_statistics():
    mu, sigma = 0.3, 0.05
    common = dict(defect_names=["scratch"], E=10, l=5, d=64)
    clip = init_prompt_bank("clip_space", (mu, sigma), rng=RngHandle(1), **common)
    for t in (clip.V, clip.W):
        assert abs(t.data.mean() - mu) < 4 * sigma / np.sqrt(t.size)
        assert abs(t.data.std() - sigma) < 0.05 * sigma
    off = init_prompt_bank("offset", (mu, sigma), offset_mult=5.0, rng=RngHandle(1), **common)
    assert abs(off.W.data.mean() - (mu + 5 * sigma)) < 4 * sigma / np.sqrt(off.W.size)
    assert abs(off.V.data.mean() - mu) < 4 * sigma / np.sqrt(off.V.size)
    rnd = init_prompt_bank("random", (mu, sigma), rng=RngHandle(1), **common)
    assert abs(rnd.V.data.std() - 1.0) < 0.05
    # the three strategies share the same standard-normal draws
    np.testing.assert_allclose((clip.V.data - mu) / sigma, rnd.V.data, atol=1e-12)
    with pytest.raises(ValueError):
        init_prompt_bank("clip_space", (0.0, 0.0), ["scratch"])


def test_defect_list_file_roundtrip(tmp_path):
    write_defect_list(["scratch", "hole"], tmp_path / "d.txt")
    assert read_defect_list(tmp_path / "d.txt") == ["scratch", "hole"]
    (tmp_path / "n.txt").write_text("normal\ncrack\n\nstain\n")
    assert read_defect_list(tmp_path / "n.txt") == ["crack", "stain"]


def test_batched_prototypes_match_single_prompt_path(weights):
    b = bank(E=3)
    prefix = PrefixState.init(CFG, RngHandle(2), text_stats=(0.0, 0.02))
    protos = embed_state_prototypes(b, weights, CFG, prefix)
    assert protos.z_N.shape == (16,) and protos.z_D.shape == (2, 16)

    def oracle(build):
        rows = np.stack([embed_prompt(build(e), weights, CFG, b.vocab, prefix).data for e in range(b.E)])
        m = rows.mean(axis=0)
        return m / np.linalg.norm(m)

    np.testing.assert_allclose(protos.z_N.data, oracle(lambda e: build_normal_prompt(b, e)), atol=1e-10)
    for k, name in enumerate(b.defect_names):
        np.testing.assert_allclose(protos.z_D.data[k], oracle(lambda e: build_defect_prompt(b, e, name)), atol=1e-10)


def test_prototypes_unit_norm_and_normal_first(weights):
    protos = embed_state_prototypes(bank(), weights, CFG)
    allp = protos.all.data
    assert allp.shape == (3, 16)
    np.testing.assert_allclose(np.linalg.norm(allp, axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(allp[0], protos.z_N.data)


def test_prototype_gradient_reaches_v_and_w(weights):
    b = bank()
    protos = embed_state_prototypes(b, weights, CFG)
    (protos.all * Tensor(RngHandle(3).normal(size=(3, 16)))).sum().backward()
    assert np.any(b.V.grad != 0) and np.any(b.W.grad != 0)
    assert all(p.grad is None for p in weights.params.values())


def test_aggregate_mean_and_attention():
    z = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    protos = StatePrototypes(Tensor(np.array([0.0, 0.0, 1.0])), Tensor(z))
    np.testing.assert_allclose(aggregate_abnormal(protos).data, [2 ** -0.5, 2 ** -0.5, 0.0], atol=1e-15)
    # sharp attention picks the closest prototype
    att = aggregate_abnormal(protos, "attention", Tensor(np.array([0.9, 0.1, 0.0])), tau_agg=0.001).data
    np.testing.assert_allclose(att, [1.0, 0.0, 0.0], atol=1e-12)
    batch = aggregate_abnormal(protos, "attention", Tensor(np.eye(3)[:2]), tau_agg=0.07)
    assert batch.shape == (2, 3)
    with pytest.raises(ValueError):
        aggregate_abnormal(protos, "attention")
    with pytest.raises(ValueError):
        aggregate_abnormal(protos, "max")


def test_aggregate_degenerate_raises():
    protos = StatePrototypes(Tensor(np.array([0.0, 1.0])), Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]])))
    with pytest.raises(DegenerateAggregateError):
        aggregate_abnormal(protos)


def test_with_defects_shares_blocks():
    b = bank()
    view = b.with_defects(["scratch", "hole", "crack"])
    assert view.V is b.V and view.W is b.W and b.defect_names == ["scratch", "hole"]


def test_attention_aggregate_gradient():
    rng = RngHandle(4)
    zd = nx.l2_normalize(Tensor(rng.normal(size=(3, 5))), axis=-1).data
    zx = rng.normal(size=5)

    def f(t):
        protos = StatePrototypes(Tensor(np.zeros(5)), t)
        return (aggregate_abnormal(protos, "attention", Tensor(zx), 0.5) * Tensor(np.arange(5.0))).sum()

    assert nx.finite_diff_check(f, Tensor(zd, requires_grad=True)) < 1e-4
