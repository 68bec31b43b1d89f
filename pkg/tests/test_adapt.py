import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sfseg import adapt as ad
from sfseg.adapt import (AdaptConfig, PseudoLabelDataset, ThresholdVector, adapt, adapt_online, argmin_head,
                         average_self_entropy, compute_class_thresholds, extract_pseudo_labels, inference_head,
                         select_optimal_head, self_train_loss, self_train_round, self_train_weights,
                         threshold_maps)
from sfseg.cpae import for_soman
from sfseg.errors import ConfigError
from sfseg.soman import SomanModel

from conftest import TINY
from oracles import brute_force_head, central_difference_check, literal_threshold, toy_model


class FixedProbs(torch.nn.Module):
    """Stand-in model whose every head returns the same per-pixel distribution."""

    def __init__(self, probs):
        super().__init__()
        self.w = torch.nn.Parameter(torch.zeros(1))
        self.probs = torch.tensor(probs, dtype=torch.float32)

    def forward(self, x, head="g"):
        n, _, h, w = x.shape
        return self.probs.view(1, -1, 1, 1).expand(n, -1, h, w)


IMGS = np.zeros((3, 4, 5, 3), np.float32)


@pytest.mark.parametrize("probs,want", [([0.25] * 4, math.log(4)), ([1, 0, 0, 0], 0.0),
                                        ([0.5, 0.5, 0, 0], math.log(2))])
def test_average_self_entropy(probs, want):
    assert average_self_entropy(FixedProbs(probs), "g", IMGS) == pytest.approx(want, abs=1e-6)


def test_entropy_empty():
    with pytest.raises(ConfigError):
        average_self_entropy(FixedProbs([1.0]), "g", IMGS[:0])


def test_argmin_rule():
    assert argmin_head({"g": 0.9, 1: 0.5, 2: 0.7}) == 1
    assert argmin_head({"g": 0.5, 1: 0.5}) == "g"
    assert argmin_head({"g": 0.6, 2: 0.5, 1: 0.5}) == 1


def test_head_selection_matches_brute_force(small_data):
    m = SomanModel(8, 3, "LOpp", [1, 2, 5], TINY, seed=4)
    best, ent = select_optimal_head(m, small_data.images[:4], return_entropies=True)
    ref, scores = brute_force_head(m, small_data.images[:4])
    assert best == ref
    for h in scores:
        assert ent[h] == pytest.approx(scores[h], rel=1e-9)
    # permutation invariance
    assert select_optimal_head(m, small_data.images[:4][::-1]) == best


def test_thresholds_example():
    vals = [0.1 * k for k in range(1, 11)]
    t = compute_class_thresholds([vals], 0.33)
    assert t.values[0] == pytest.approx(0.7)
    assert np.sum(np.array(vals) >= t.values[0]) == 4
    assert compute_class_thresholds([vals], 1.0).values[0] == pytest.approx(0.1)
    empty = compute_class_thresholds([[], vals], 0.33)
    assert empty.values[0] > 1.0 and empty.counts[0] == 0


@given(st.lists(st.floats(0, 1), max_size=300), st.floats(0.01, 1.0))
@settings(max_examples=100, deadline=None)
def test_thresholds_vs_literal(vals, r):
    t = compute_class_thresholds([vals], r).values[0]
    ref = literal_threshold(vals, r)
    if ref is None:
        assert t > 1
    else:
        assert t == ref


def test_extraction_properties(small_data):
    m = SomanModel(8, 2, "LOpp", [1, 2], TINY, seed=2)
    imgs = small_data.images
    pl = extract_pseudo_labels(m, 1, None, imgs, 0.33)
    pred, conf = ad.predict_maps(m, 1, imgs)
    kept = pl.labels < 8
    # soundness: every retained pixel clears its class threshold
    assert np.all(conf[kept] >= pl.thresholds.values[pl.labels[kept]])
    assert np.array_equal(pl.labels[kept], pred[kept])
    for c in range(8):
        n = int((pred == c).sum())
        if n >= 50:
            frac = ((pl.labels == c).sum()) / n
            assert 0.30 <= frac <= 0.40
    # ordering of images does not change the retained count
    rev = extract_pseudo_labels(m, 1, None, imgs[::-1], 0.33)
    assert (rev.labels < 8).sum() == kept.sum()
    assert pl.provenance()["head"] == "1" and not pl.cpae_used


def test_fully_unknown_map():
    pred = np.zeros((1, 2, 2), np.int64)
    conf = np.full((1, 2, 2), 0.2)
    t = ThresholdVector(np.array([0.5, 0.5]))
    assert np.all(threshold_maps(pred, conf, t) == 2)


def _pl(images, labels, c=8):
    return PseudoLabelDataset(images, labels, np.ones(labels.shape), "g", False, 1,
                              ThresholdVector(np.zeros(c), 0.33, np.zeros(c, np.int64)))


def test_self_train_freeze(small_data):
    m = SomanModel(8, 2, "LOpp", [1, 2], TINY, seed=2)
    before = m.param_snapshot()
    pl = extract_pseudo_labels(m, 2, None, small_data.images, 0.33)
    self_train_round(m, 2, pl, AdaptConfig(iters_per_round=3, batch_size=2))
    last = f"backbone.{len(m.backbone) - 1}."
    after = m.state_dict()
    changed = {k for k in before if not torch.equal(before[k], after[k])}
    assert changed and all(k.startswith(last) for k in changed)
    assert all(p.requires_grad for p in m.parameters())
    with pytest.raises(ConfigError):
        self_train_round(m, 2, _pl(small_data.images[:0], small_data.labels[:0]))


def test_unknown_pixels_no_ce():
    m = toy_model(1)
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    y = torch.full((2, 8, 8), 3)
    _, ce, ent = self_train_loss(m, 1, x, y, 0.005)
    assert ce.item() == 0.0 and ent.item() > 0


def test_self_train_weights():
    m = toy_model(1)
    assert torch.equal(self_train_weights(m, "source"), m.class_weights)
    assert torch.equal(self_train_weights(m, "uniform"), torch.ones(3))
    with pytest.raises(ConfigError):
        self_train_weights(m, "inverse")
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    y = torch.zeros((2, 8, 8), dtype=torch.long)
    _, ce_w, _ = self_train_loss(m, 1, x, y, 0.0, self_train_weights(m, "source"))
    _, ce_u, _ = self_train_loss(m, 1, x, y, 0.0, self_train_weights(m, "uniform"))
    assert ce_w.item() == pytest.approx(ce_u.item())


def test_self_train_gradients():
    m = toy_model(2)
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    y = torch.randint(0, 4, (2, 8, 8))
    params = list(m.backbone[-1].parameters())
    err = central_difference_check(lambda: self_train_loss(m, 1, x, y, 0.005)[0], params)
    assert err < 1e-4


def test_adapt_contract(small_data):
    m = SomanModel(8, 2, "LOpp", [1, 2], TINY, seed=2)
    q = for_soman(m)
    cfg = AdaptConfig(rounds=2, iters_per_round=2, batch_size=2)
    with pytest.raises(ConfigError):
        adapt(m, q, small_data.images, rounds=0)
    head = select_optimal_head(m, small_data.images)
    out, reps = adapt(m, q, small_data.images, cfg=cfg, target_labels=small_data.labels)
    assert len(reps) == 2 and all(r.head == str(head) for r in reps)
    assert reps[0].pseudo_miou is not None and reps[0].pseudo_miou_unrefined is not None
    assert inference_head(out) == str(head) and out.lineage[-1]["stage"] == "adapt"
    chained, _ = adapt_online(out, q, small_data.images[::-1], cfg=cfg)
    assert [e["stage"] for e in chained.lineage] == ["adapt", "adapt-online"]
    last = f"backbone.{len(m.backbone) - 1}."
    v, c = m.state_dict(), chained.state_dict()
    assert all(torch.equal(v[k], c[k]) for k in v if not k.startswith(last))
    # the vendor model itself is untouched
    assert m.lineage == []
