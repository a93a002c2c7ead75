import math

import numpy as np
import pytest
import torch

import oracles
from ccreid.errors import ConfigurationError, ValidationError
from ccreid.losses import (LossConfig, LossReport, fuse_supervision,
                           identity_loss, part_matching_loss, saliency_map,
                           select_class_cam, semantic_consistency_loss,
                           total_loss, triplet_loss)
from ccreid.network import StreamOutputs


def random_attention(rng, n=2, k=4, h=3, w=3):
    return torch.softmax(torch.tensor(rng.normal(size=(n, k, h, w))), dim=1)


def random_masks(rng, n=2, k=4, h=3, w=3):
    masks = torch.zeros(n, k, h, w, dtype=torch.float64)
    for b in range(n):
        for i in range(h):
            for j in range(w):
                part = rng.integers(-1, k)
                if part >= 0:
                    masks[b, part, i, j] = 1.0
    return masks


# part matching ------------------------------------------------------------

def test_part_loss_zero_when_attention_matches_masks():
    masks = torch.zeros(1, 2, 2, 2)
    masks[0, 0, 0, 0] = 1.0
    masks[0, 1, 0, 1] = 1.0
    loss = part_matching_loss(masks.clone(), masks)
    assert 0.0 <= float(loss) < 1e-9


def test_part_loss_uniform_single_pixel_is_log4():
    att = torch.full((1, 4, 1, 1), 0.25)
    masks = torch.zeros(1, 4, 1, 1)
    masks[0, 2] = 1.0
    assert abs(float(part_matching_loss(att, masks)) - math.log(4.0)) < 1e-6


def test_part_loss_all_background_is_zero():
    att = torch.full((2, 4, 3, 3), 0.25)
    assert float(part_matching_loss(att, torch.zeros(2, 4, 3, 3))) == 0.0


def test_part_loss_shape_mismatch_rejected():
    with pytest.raises(ValidationError):
        part_matching_loss(torch.zeros(1, 4, 2, 2), torch.zeros(1, 4, 2, 3))


def test_part_loss_matches_loop_oracle():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        att = random_attention(rng)
        masks = random_masks(rng)
        got = float(part_matching_loss(att, masks, eps=1e-12))
        want = oracles.part_loss(att.numpy(), masks.numpy(), 1e-12)
        assert abs(got - want) < 1e-12, seed


def test_part_loss_decreases_toward_masks():
    rng = np.random.default_rng(0)
    masks = random_masks(rng)
    assert masks.sum() > 0
    uniform = torch.full_like(masks, 0.25)
    losses = []
    for t in np.linspace(0.0, 0.9, 10):
        att = (1 - t) * uniform + t * masks
        losses.append(float(part_matching_loss(att, masks)))
    diffs = np.diff(losses)
    assert (diffs < -1e-6).all()


# fused supervision target -------------------------------------------------

def test_fuse_equal_inputs_returns_them():
    x = torch.rand(2, 3, 3)
    assert torch.equal(fuse_supervision(x, x.clone(), x.clone()), x)


def test_fuse_picks_the_larger_map():
    ones = torch.ones(1, 2, 2)
    zeros = torch.zeros(1, 2, 2)
    assert torch.equal(fuse_supervision(ones, zeros, zeros), ones)


def test_fuse_is_elementwise_max_and_detached():
    g = torch.Generator().manual_seed(0)
    a = torch.rand(2, 3, 4, generator=g, requires_grad=True)
    b = torch.rand(2, 3, 4, generator=g, requires_grad=True)
    c = torch.rand(2, 3, 4, generator=g, requires_grad=True)
    fused = fuse_supervision(a, b, c)
    want = np.maximum(np.maximum(a.detach().numpy(), b.detach().numpy()),
                      c.detach().numpy())
    assert np.array_equal(fused.numpy(), want)
    assert not fused.requires_grad


def test_select_class_cam_gathers_label_channel():
    rng = np.random.default_rng(1)
    cam = torch.tensor(rng.normal(size=(3, 5, 2, 2)))
    labels = torch.tensor([4, 0, 2])
    got = select_class_cam(cam, labels)
    for b, lab in enumerate(labels.tolist()):
        assert torch.equal(got[b], cam[b, lab])


# saliency and consistency -------------------------------------------------

def test_saliency_constant_map():
    assert (saliency_map(torch.full((1, 8, 2, 2), 3.0)) == 3.0).all()


def test_saliency_is_channel_mean():
    f = torch.zeros(1, 2, 2, 2)
    f[0, 0] = 0.0
    f[0, 1] = 2.0
    assert (saliency_map(f) == 1.0).all()
    rng = np.random.default_rng(2)
    f = torch.tensor(rng.normal(size=(2, 5, 3, 4)))
    assert np.allclose(saliency_map(f).numpy(), oracles.saliency(f.numpy()), atol=1e-12)


def test_consistency_zero_when_all_equal():
    x = torch.rand(2, 4, 4)
    assert float(semantic_consistency_loss(x, x.clone(), x.clone(), x.clone())) == 0.0


def test_consistency_single_pixel_closed_form():
    one = torch.ones(1, 1, 1)
    zero = torch.zeros(1, 1, 1)
    # residuals 1, 0, 0 -> squared sum 1
    assert float(semantic_consistency_loss(one, zero, one.clone(), one.clone())) == 1.0


def test_consistency_quadratic_scaling():
    rng = np.random.default_rng(3)
    g = torch.tensor(rng.normal(size=(2, 3, 3)))
    sals = [torch.tensor(rng.normal(size=(2, 3, 3))) for _ in range(3)]
    base = float(semantic_consistency_loss(g, *sals))
    doubled = [g + 2 * (s - g) for s in sals]
    assert abs(float(semantic_consistency_loss(g, *doubled)) - 4 * base) < 1e-9


def test_consistency_matches_loop_oracle_both_reductions():
    rng = np.random.default_rng(4)
    g = torch.tensor(rng.normal(size=(2, 3, 4)))
    sals = [torch.tensor(rng.normal(size=(2, 3, 4))) for _ in range(3)]
    for pixel_mean in (False, True):
        got = float(semantic_consistency_loss(g, *sals, pixel_mean=pixel_mean))
        want = oracles.consistency_loss(g.numpy(), [s.numpy() for s in sals],
                                        pixel_mean=pixel_mean)
        assert abs(got - want) < 1e-12


def test_consistency_sum_vs_mean_ratio():
    rng = np.random.default_rng(5)
    g = torch.tensor(rng.normal(size=(1, 4, 6)))
    sals = [torch.tensor(rng.normal(size=(1, 4, 6))) for _ in range(3)]
    summed = float(semantic_consistency_loss(g, *sals, pixel_mean=False))
    meaned = float(semantic_consistency_loss(g, *sals, pixel_mean=True))
    assert abs(summed / (4 * 6) - meaned) < 1e-12


def test_consistency_shape_mismatch_rejected():
    with pytest.raises(ValidationError):
        semantic_consistency_loss(torch.zeros(1, 2, 2), torch.zeros(1, 2, 2),
                                  torch.zeros(1, 2, 2), torch.zeros(1, 2, 3))


def test_consistency_target_blocks_gradient():
    w = torch.randn(1, 3, 3, requires_grad=True)

    def run(target):
        sals = (w * 0.5, w * 0.25, w * 0.75)
        loss = semantic_consistency_loss(target, *sals)
        grad, = torch.autograd.grad(loss, w)
        return grad

    target = fuse_supervision(2 * w, w + 1, w - 1)
    assert torch.equal(run(target), run(target.clone()))


# identity -----------------------------------------------------------------

def test_identity_confident_correct_is_tiny():
    logits = torch.tensor([[1000.0, 0.0, 0.0, 0.0]])
    assert float(identity_loss(logits, torch.tensor([0]))) < 1e-6


def test_identity_uniform_is_log_num_classes():
    logits = torch.zeros(2, 4)
    got = float(identity_loss(logits, torch.tensor([1, 3])))
    assert abs(got - math.log(4.0)) < 1e-6


def test_identity_matches_manual_log_softmax():
    rng = np.random.default_rng(6)
    logits = torch.tensor(rng.normal(size=(5, 7)))
    labels = torch.tensor([0, 6, 3, 3, 1])
    got = float(identity_loss(logits, labels))
    want = oracles.cross_entropy(logits.numpy(), labels.numpy())
    assert abs(got - want) < 1e-12


def test_identity_label_smoothing_matches_mixture():
    rng = np.random.default_rng(7)
    logits = torch.tensor(rng.normal(size=(4, 5)))
    labels = torch.tensor([2, 0, 4, 1])
    eps = 0.1
    got = float(identity_loss(logits, labels, label_smoothing=eps))
    z = logits.numpy()
    total = 0.0
    for b in range(4):
        row = z[b]
        logsum = row.max() + math.log(np.sum(np.exp(row - row.max())))
        log_probs = row - logsum
        q = np.full(5, eps / 5)
        q[labels[b]] += 1 - eps
        total += -(q * log_probs).sum()
    assert abs(got - total / 4) < 1e-12


def test_identity_rejects_out_of_range_labels():
    logits = torch.zeros(2, 3)
    with pytest.raises(ValidationError):
        identity_loss(logits, torch.tensor([0, 3]))
    with pytest.raises(ValidationError):
        identity_loss(logits, torch.tensor([-1, 0]))


# triplet ------------------------------------------------------------------

def test_triplet_zero_for_separated_clusters():
    f = torch.tensor([[0.0], [0.1], [100.0], [100.1]], dtype=torch.float64)
    labels = torch.tensor([0, 0, 1, 1])
    assert float(triplet_loss(f, labels, margin=0.3)) == 0.0


def test_triplet_closed_form_point_eight():
    # every anchor: hardest positive at distance 1, hardest negative at 0.5
    f = torch.tensor([[0.0], [1.0], [0.5], [1.5]], dtype=torch.float64)
    labels = torch.tensor([0, 0, 1, 1])
    assert abs(float(triplet_loss(f, labels, margin=0.3)) - 0.8) < 1e-12


def test_triplet_margin_shifts_active_loss():
    f = torch.tensor([[0.0], [1.0], [0.5], [1.5]], dtype=torch.float64)
    labels = torch.tensor([0, 0, 1, 1])
    small = float(triplet_loss(f, labels, margin=0.3))
    large = float(triplet_loss(f, labels, margin=0.5))
    assert abs(large - small - 0.2) < 1e-12


def test_triplet_matches_brute_force_oracle():
    for seed in range(30):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 9))
        f = torch.tensor(rng.normal(size=(n, 4)))
        labels = torch.tensor(rng.integers(0, 3, size=n))
        if len(set(labels.tolist())) < 2:
            continue
        got = float(triplet_loss(f, labels, margin=0.3))
        want = oracles.batch_hard_triplet(f.numpy(), labels.numpy(), 0.3)
        assert abs(got - want) < 1e-9, seed


def test_triplet_single_identity_rejected():
    with pytest.raises(ValidationError):
        triplet_loss(torch.randn(4, 2), torch.tensor([1, 1, 1, 1]))


# total loss and ledger ----------------------------------------------------

def full_outputs(rng, n=4, ident=4, k=4, c=6, h=3, w=3):
    out = StreamOutputs()
    out.M = random_attention(rng, n, k, h, w).float()
    for s in ("r", "h", "b"):
        F_s = torch.tensor(rng.normal(size=(n, c, h, w)), dtype=torch.float32)
        setattr(out, f"F_{s}", F_s)
        setattr(out, f"f_{s}", F_s.mean(dim=(2, 3)))
        setattr(out, f"E_{s}", torch.tensor(rng.normal(size=(n, ident, h, w)),
                                            dtype=torch.float32))
        setattr(out, f"logits_{s}", torch.tensor(rng.normal(size=(n, ident)),
                                                 dtype=torch.float32))
    return out


def test_total_loss_degenerate_weights_single_stream():
    rng = np.random.default_rng(8)
    out = full_outputs(rng)
    labels = torch.tensor([0, 1, 2, 3])
    cfg = LossConfig(part_weight=0.0, consistency_weight=0.0, streams=("r",))
    loss, report = total_loss(out, labels, cfg)
    want = float(identity_loss(out.logits_r, labels)) + \
        float(triplet_loss(out.f_r, labels, 0.3))
    assert abs(float(loss) - want) < 1e-6
    assert report.part == 0.0 and report.consistency == 0.0
    assert set(report.identity) == {"r"} and set(report.triplet) == {"r"}


def test_total_loss_ledger_matches_recombination():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        out = full_outputs(rng)
        labels = torch.tensor(rng.integers(0, 4, size=4))
        if len(set(labels.tolist())) < 2:
            continue
        cfg = LossConfig(part_weight=0.3, consistency_weight=0.7)
        loss, report = total_loss(out, labels, cfg, part_masks=random_masks(rng, 4).float())
        assert report.total == report.recombined(cfg)
        assert abs(float(loss) - report.total) < 1e-6 * max(1.0, abs(report.total))


def test_total_loss_all_ones_arithmetic():
    report = LossReport(part=1.0, consistency=1.0,
                        identity={"r": 1.0, "h": 1.0, "b": 1.0},
                        triplet={"r": 1.0, "h": 1.0, "b": 1.0})
    cfg = LossConfig(part_weight=0.01, consistency_weight=0.01)
    assert abs(report.recombined(cfg) - 6.02) < 1e-9


def test_total_loss_term_masking():
    rng = np.random.default_rng(9)
    out = full_outputs(rng)
    out.M = None            # no attention produced
    for s in ("r", "h", "b"):
        setattr(out, f"E_{s}", None)
    labels = torch.tensor([0, 1, 2, 3])
    cfg = LossConfig(enable_part=False, enable_consistency=False)
    loss, report = total_loss(out, labels, cfg)
    assert report.part == 0.0 and report.consistency == 0.0
    want = sum(report.identity.values()) + sum(report.triplet.values())
    assert abs(report.total - want) < 1e-12
    assert abs(float(loss) - want) < 1e-6


def test_total_loss_identity_only():
    rng = np.random.default_rng(10)
    out = full_outputs(rng)
    labels = torch.tensor([0, 0, 0, 0])  # single id: triplet would fail, but it's off
    cfg = LossConfig(enable_part=False, enable_consistency=False, enable_triplet=False)
    loss, report = total_loss(out, labels, cfg)
    assert report.triplet == {}
    assert abs(report.total - sum(report.identity.values())) < 1e-12


def test_total_loss_missing_inputs_raise():
    rng = np.random.default_rng(11)
    labels = torch.tensor([0, 1, 2, 3])

    out = full_outputs(rng)
    with pytest.raises(ConfigurationError, match="part masks"):
        total_loss(out, labels, LossConfig(part_weight=1.0))

    out = full_outputs(rng)
    out.M = None
    with pytest.raises(ConfigurationError, match="attention"):
        total_loss(out, labels, LossConfig(part_weight=1.0),
                   part_masks=torch.zeros(4, 4, 3, 3))

    out = full_outputs(rng)
    out.E_b = None
    with pytest.raises(ConfigurationError, match="activation maps"):
        total_loss(out, labels, LossConfig(part_weight=0.0, consistency_weight=1.0))

    out = full_outputs(rng)
    out.logits_b = None
    with pytest.raises(ConfigurationError, match="logits"):
        total_loss(out, labels, LossConfig(part_weight=0.0, consistency_weight=0.0))


def test_loss_config_validation():
    with pytest.raises(ConfigurationError):
        LossConfig(part_weight=-0.1).validate()
    with pytest.raises(ConfigurationError):
        LossConfig(part_weight=float("nan")).validate()
    with pytest.raises(ConfigurationError):
        LossConfig(log_epsilon=0.0).validate()
    with pytest.raises(ConfigurationError):
        LossConfig(streams=("r", "q")).validate()
    with pytest.raises(ConfigurationError):
        LossConfig(streams=()).validate()


def test_report_row_ordering():
    report = LossReport(part=1.0, consistency=2.0,
                        identity={"r": 3.0, "h": 4.0, "b": 5.0},
                        triplet={"r": 6.0, "h": 7.0, "b": 8.0}, total=9.0)
    assert report.as_row() == [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]
    assert len(LossReport.COLUMNS) == 9
