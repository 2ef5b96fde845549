"""Pseudo-correspondences, contrastive losses, and the combined objective."""

import numpy as np
import pytest

from cmtbench import autodiff as ad
from cmtbench import cameras as cam
from cmtbench import geometry as geo
from cmtbench import rendering as rnd
from cmtbench.alignment import (
    AlignConfig,
    build_negative_bank,
    contrastive_alignment_loss,
    ground_truth_alignment_loss,
    ground_truth_patch_pairs,
    pseudo_correspondences,
    total_loss,
)
from cmtbench.model import CMT, ModelConfig, patch_foreground, patch_world_points


@pytest.fixture(scope="module")
def two_views():
    mesh = geo.normalize_mesh(geo.build_parametric_object(11, "chair"))
    poses = cam.sample_reference_cameras(64)
    return rnd.rasterize(mesh, poses[2]), rnd.rasterize(mesh, poses[3])


def _unit_rows(rng, n, d):
    z = rng.normal(size=(n, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# pseudo-correspondences


def test_identical_render_matches_to_self():
    z = _unit_rows(np.random.default_rng(0), 40, 16)
    anchors = np.array([0, 3, 17, 39])
    tables = pseudo_correspondences(z, z, anchors, np.ones(40, dtype=bool))
    assert np.array_equal(tables.positives, anchors)


def test_argmax_matches_brute_force_scan():
    rng = np.random.default_rng(1)
    zq = _unit_rows(rng, 30, 8)
    zv = _unit_rows(rng, 50, 8)
    view_fg = rng.uniform(size=50) > 0.3
    anchors = np.arange(0, 30, 3)
    tables = pseudo_correspondences(zq, zv, anchors, view_fg)
    for i, a in enumerate(anchors):
        best, best_s = None, -np.inf
        for j in range(50):
            if not view_fg[j]:
                continue
            s = float(zq[a] @ zv[j])
            if s > best_s:
                best, best_s = j, s
        assert tables.positives[i] == best


def test_positive_never_in_negative_set():
    rng = np.random.default_rng(2)
    zq = _unit_rows(rng, 20, 8)
    zv = _unit_rows(rng, 20, 8)
    view_fg = np.ones(20, dtype=bool)
    view_fg[5] = False
    tables = pseudo_correspondences(zq, zv, np.arange(20), view_fg)
    fg = set(np.flatnonzero(view_fg))
    for pos, negs in zip(tables.positives, tables.negatives):
        assert pos not in negs
        assert set(negs) == fg - {pos}


def test_no_foreground_view_errors():
    z = _unit_rows(np.random.default_rng(3), 4, 8)
    with pytest.raises(ValueError):
        pseudo_correspondences(z, z, np.array([0]), np.zeros(4, dtype=bool))


def test_labels_recomputed_from_current_beta():
    # no staleness: perturbing a beta parameter must change the labels
    model = CMT(ModelConfig(resolution=16, d=16, heads=2, blocks=1, top_k=2, enc_channels=(4, 6)), 0)
    imgs = np.zeros((2, 3, 16, 16), dtype=np.float32)
    imgs[:, :, 2:14, 2:14] = np.random.default_rng(4).uniform(0.2, 1.0, size=(2, 1, 12, 12)).astype(np.float32)
    feats = model.encode(ad.tensor(imgs))

    def labels():
        z = model.project_beta(feats).data
        return pseudo_correspondences(z[0], z[1], np.arange(4), np.ones(4, dtype=bool)).positives.copy()

    before = labels()
    model.params["beta.fc4.w"].data += np.random.default_rng(5).normal(0.0, 1.0, size=(16, 16))
    assert not np.array_equal(labels(), before)


# ---------------------------------------------------------------------------
# InfoNCE


def _loss(anchor, pos, neg, tau, valid=None):
    if valid is None:
        valid = np.ones(neg.shape[:2], dtype=bool)
    with ad.precision("float64"):
        return float(contrastive_alignment_loss(ad.tensor(anchor), ad.tensor(pos), ad.tensor(neg), valid, tau).data)


def test_uniform_similarities_give_log_1_plus_k():
    # all sims equal (any value): softmax is uniform over 1 + K entries
    rng = np.random.default_rng(6)
    a, k, d = 8, 31, 16
    anchor = _unit_rows(rng, a, d)
    w = _unit_rows(rng, 1, d)[0]
    pos = np.tile(w, (a, 1))
    neg = np.tile(w, (a, k, 1))
    assert _loss(anchor, pos, neg, 0.07) == pytest.approx(np.log(1.0 + k), abs=1e-12)


def test_perfect_separation_loss_vanishes():
    a, k, d = 4, 31, 8
    e = np.zeros((a, d))
    e[:, 0] = 1.0
    neg = np.tile(-e[:, None, :], (1, k, 1))
    loss = _loss(e, e.copy(), neg, 0.05)
    assert 0.0 <= loss < 1e-10


def test_matches_direct_summation_oracle():
    rng = np.random.default_rng(7)
    a, k, d, tau = 8, 31, 16, 0.07
    anchor = _unit_rows(rng, a, d)
    pos = _unit_rows(rng, a, d)
    neg = _unit_rows(rng, a * k, d).reshape(a, k, d)
    expect = 0.0
    for i in range(a):
        s_pos = np.exp(anchor[i] @ pos[i] / tau)
        s_neg = sum(np.exp(anchor[i] @ neg[i, j] / tau) for j in range(k))
        expect += -np.log(s_pos / (s_pos + s_neg))
    expect /= a
    assert abs(_loss(anchor, pos, neg, tau) - expect) < 1e-8


def test_padding_rows_are_masked_out():
    rng = np.random.default_rng(8)
    anchor = _unit_rows(rng, 2, 8)
    pos = _unit_rows(rng, 2, 8)
    neg = _unit_rows(rng, 2 * 5, 8).reshape(2, 5, 8)
    valid = np.ones((2, 5), dtype=bool)
    valid[0, 3:] = False
    ref = neg.copy()
    ref[0, 3:] = 0.0  # masked rows must not matter
    full = _loss(anchor, pos, neg, 0.07, valid)
    assert abs(full - _loss(anchor, pos, ref, 0.07, valid)) < 1e-12
    trimmed = 0.5 * (
        -np.log(
            np.exp(anchor[0] @ pos[0] / 0.07)
            / (np.exp(anchor[0] @ pos[0] / 0.07) + np.exp(anchor[0] @ neg[0, :3].T / 0.07).sum())
        )
        + -np.log(
            np.exp(anchor[1] @ pos[1] / 0.07)
            / (np.exp(anchor[1] @ pos[1] / 0.07) + np.exp(anchor[1] @ neg[1].T / 0.07).sum())
        )
    )
    assert abs(full - trimmed) < 1e-8


def test_empty_negative_set_errors():
    rng = np.random.default_rng(9)
    anchor = _unit_rows(rng, 2, 8)
    neg = _unit_rows(rng, 2 * 3, 8).reshape(2, 3, 8)
    valid = np.ones((2, 3), dtype=bool)
    valid[1] = False
    with pytest.raises(ValueError):
        contrastive_alignment_loss(ad.tensor(anchor), ad.tensor(anchor), ad.tensor(neg), valid, 0.07)


def test_loss_invariant_to_anchor_order():
    rng = np.random.default_rng(10)
    a, k, d = 8, 15, 16
    anchor = _unit_rows(rng, a, d)
    pos = _unit_rows(rng, a, d)
    neg = _unit_rows(rng, a * k, d).reshape(a, k, d)
    perm = rng.permutation(a)
    base = _loss(anchor, pos, neg, 0.07)
    assert abs(base - _loss(anchor[perm], pos[perm], neg[perm], 0.07)) < 1e-10


# ---------------------------------------------------------------------------
# ground-truth view-view alignment


def test_self_pair_positives_are_identities(two_views):
    va, _ = two_views
    anchors, targets = ground_truth_patch_pairs(va, va)
    assert len(anchors) > 0
    assert np.array_equal(anchors, targets)
    fg = patch_foreground(va.image)
    assert fg[anchors].all()


def test_ground_truth_loss_matches_direct_summation(two_views):
    va, vb = two_views
    rng = np.random.default_rng(11)
    n_q = 64
    with ad.precision("float64"):
        z_a = ad.tensor(_unit_rows(rng, n_q, 16))
        z_b = ad.tensor(_unit_rows(rng, n_q, 16))
        fg_b = patch_foreground(vb.image)
        # caps above the instance size: no subsampling, no rng consumption
        cfg = AlignConfig(temperature=0.07, anchors_per_pair=512, negatives_per_anchor=512)
        loss, skipped = ground_truth_alignment_loss(z_a, z_b, va, vb, fg_b, cfg, np.random.default_rng(0))
    assert not skipped
    anchors, targets = ground_truth_patch_pairs(va, vb)
    fg_idx = np.flatnonzero(fg_b)
    expect = 0.0
    for a_i, t_i in zip(anchors, targets):
        s_pos = np.exp(z_a.data[a_i] @ z_b.data[t_i] / cfg.temperature)
        s_neg = sum(np.exp(z_a.data[a_i] @ z_b.data[j] / cfg.temperature) for j in fg_idx if j != t_i)
        expect += -np.log(s_pos / (s_pos + s_neg))
    expect /= len(anchors)
    assert abs(float(loss.data) - expect) < 1e-8


def test_fully_occluded_pair_sets_skip_flag(two_views):
    _, vb = two_views
    blank = rnd.RenderedView(
        np.zeros((64, 64), dtype=np.float32),
        np.zeros((64, 64), dtype=np.float32),
        vb.pose,
    )
    z = ad.tensor(_unit_rows(np.random.default_rng(12), 64, 16))
    loss, skipped = ground_truth_alignment_loss(
        z, z, blank, vb, patch_foreground(vb.image), AlignConfig(), np.random.default_rng(0)
    )
    assert skipped
    assert float(loss.data) == 0.0


def test_negative_bank_pads_and_flags(two_views):
    rng = np.random.default_rng(13)
    zq = _unit_rows(rng, 12, 8)
    zv = _unit_rows(rng, 12, 8)
    fg = np.zeros(12, dtype=bool)
    fg[[1, 4, 7, 9]] = True
    tables = pseudo_correspondences(zq, zv, np.array([0, 2]), fg)
    with ad.precision("float64"):
        neg_f, valid = build_negative_bank(tables, ad.tensor(zv), None, 128, np.random.default_rng(0))
    assert valid.shape == neg_f.shape[:2]
    for i in range(2):
        got = {tuple(neg_f.data[i, j]) for j in range(valid.shape[1]) if valid[i, j]}
        want = {tuple(zv[j]) for j in np.flatnonzero(fg) if j != tables.positives[i]}
        assert got == want


# ---------------------------------------------------------------------------
# combined objective


def test_total_loss_arithmetic():
    with ad.precision("float64"):
        v = total_loss(ad.tensor(0.7), ad.tensor(0.4), ad.tensor(0.2), 0.5)
    assert abs(float(v.data) - 1.0) < 1e-12


def test_weight_one_drops_view_view_term():
    with ad.precision("float64"):
        a = total_loss(ad.tensor(0.7), ad.tensor(0.4), ad.tensor(0.2), 1.0)
        b = total_loss(ad.tensor(0.7), ad.tensor(0.4), ad.tensor(99.0), 1.0)
    assert float(a.data) == float(b.data) == float(0.7 + 1.0 * 0.4)


def test_weight_zero_drops_query_view_term():
    with ad.precision("float64"):
        a = total_loss(ad.tensor(0.7), ad.tensor(0.4), ad.tensor(0.2), 0.0)
        b = total_loss(ad.tensor(0.7), ad.tensor(-5.0), ad.tensor(0.2), 0.0)
    assert float(a.data) == float(b.data) == float(0.7 + 1.0 * 0.2)


def test_weight_outside_unit_interval_errors():
    with pytest.raises(ValueError):
        total_loss(ad.tensor(0.1), ad.tensor(0.1), ad.tensor(0.1), 1.5)


def test_disabling_both_terms_is_pure_bce():
    # the training loop hands zero tensors when both flags are off
    bce = ad.tensor(0.6931)
    out = total_loss(bce, ad.tensor(0.0), ad.tensor(0.0), 0.5)
    assert float(out.data) == float(bce.data)


def test_total_loss_gradient_reaches_all_terms():
    bce, qv, vv = ad.tensor(0.7, requires_grad=True), ad.tensor(0.4, requires_grad=True), ad.tensor(0.2, requires_grad=True)
    total_loss(bce, qv, vv, 0.25).backward()
    assert float(bce.grad) == 1.0
    assert float(qv.grad) == 0.25
    assert float(vv.grad) == 0.75
