import numpy as np
import pytest
import torch

from sfseg import cpae as cp
from sfseg.augment import default_candidates
from sfseg.cpae import CpaeModel, CpaeSpec, DILATIONS, check_pairing, cpae_forward, cpae_train, for_soman, make_noisy_pair
from sfseg.errors import ConfigError, ShapeError
from sfseg.soman import SomanModel, TrainConfig, forward, forward_features

from conftest import TINY


def _ags(ids):
    by_id = {a.id: a for a in default_candidates()}
    return [by_id[i] for i in ids]


@pytest.fixture
def lo():
    return SomanModel(8, 2, "LOpp", [2, 5], TINY, seed=0)


def test_topology():
    q = CpaeModel(CpaeSpec(8, 48, 4, 8))
    assert [c.dilation for c in q.dilated] == [(d, d) for d in DILATIONS]
    assert len(q.dilated) == 4


def test_forward_contract(small_data, lo):
    q = for_soman(lo, seed=1)
    probs = forward(lo, small_data.images[:2], 1)
    feats = forward_features(lo, small_data.images[:2])
    out = cpae_forward(q, probs, feats)
    assert out.shape == probs.shape
    assert np.allclose(out.sum(1), 1, atol=1e-5)
    assert np.array_equal(out, cpae_forward(q, probs, feats))
    single = cpae_forward(q, probs[0], feats[0])
    assert single.shape == probs[0].shape
    with pytest.raises(ShapeError):
        cpae_forward(q, probs[:, :5], feats)
    with pytest.raises(ShapeError):
        cpae_forward(q, probs, feats[:, :, :4])


def test_pairing(lo):
    q = CpaeModel(CpaeSpec(8, 32, 4))
    with pytest.raises(ShapeError):
        check_pairing(q, lo)


def test_noisy_pair(small_data, lo):
    erm = SomanModel(8, 0, "ERM", (), TINY)
    with pytest.raises(ConfigError):
        make_noisy_pair(erm, small_data.images[0], small_data.labels[0], 0, [])
    a = make_noisy_pair(lo, small_data.images[0], small_data.labels[0], 4, _ags([2, 5]))
    b = make_noisy_pair(lo, small_data.images[0], small_data.labels[0], 4, _ags([2, 5]))
    assert all(np.array_equal(x, y) for x, y in zip(a[:3], b[:3])) and a[3] == b[3]
    assert a[2].max() < 8
    assert np.allclose(a[0].sum(0), 1, atol=1e-5)


def test_frozen_training(small_data, lo):
    before = lo.param_snapshot()
    q = for_soman(lo, seed=0)
    q_before = {k: v.clone() for k, v in q.state_dict().items()}
    losses = cpae_train(q, lo, small_data, 3, TrainConfig(batch_size=2), _ags([2, 5]))
    assert len(losses) == 3 and all(np.isfinite(losses))
    after = lo.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)
    assert all(p.requires_grad for p in lo.parameters())
    assert any(not torch.equal(q_before[k], v) for k, v in q.state_dict().items())


def test_refine_single_pass(small_data, lo, monkeypatch):
    q = for_soman(lo)
    calls = []
    real = cp.cpae_forward
    monkeypatch.setattr(cp, "cpae_forward", lambda *a: calls.append(1) or real(*a))
    p = forward(lo, small_data.images[0], 1)
    f = forward_features(lo, small_data.images[0])
    out = cp.refine(q, p, f)
    assert len(calls) == 1 and out.shape == p.shape


def test_metadata_roundtrip():
    q = CpaeModel(CpaeSpec(8, 48), seed=3)
    r = CpaeModel.from_metadata(q.metadata())
    assert r.spec == q.spec
