"""Fusion variants and the reconstruction head."""

import numpy as np
import pytest

from udcvr import tensor as T
from udcvr.errors import ConfigurationError, ContractError
from udcvr.fusion import AddFusion, ConcatFusion, ReconstructionHead, Stfm, make_fusion
from udcvr.gradcheck import check_module_gradients
from udcvr.tensor import Tensor
from udcvr.training import charbonnier_loss


def rng_(seed=0):
    return np.random.default_rng(seed)


def branch_pair(c=6, h=4, w=4, seed=1):
    rng = rng_(seed)
    return Tensor(rng.standard_normal((c, h, w))), Tensor(rng.standard_normal((c, h, w)))


# ---------------------------------------------------------------------------
# channel-attention fusion
# ---------------------------------------------------------------------------


def test_gate_is_strictly_inside_unit_interval():
    fusion = Stfm(6, rng_(2))
    s, t = branch_pair()
    w = fusion.gate(T.concat([s, t], axis=0)).data
    assert (w > 0).all() and (w < 1).all()
    assert w.shape == (1, 12)


def test_closed_gate_reduces_plain_concat():
    """Gate forced to ~0: the residual path alone survives, so the output
    is just the 1x1 reduction of concat(s, t)."""
    fusion = Stfm(6, rng_(3))
    fusion.fc_w.data = np.zeros_like(fusion.fc_w.data)
    fusion.fc_b.data = np.full(12, -40.0)
    s, t = branch_pair(seed=4)
    got = fusion.forward(s, t).data
    expected = fusion.reduce.forward(T.concat([s, t], axis=0)).data
    assert np.abs(got - expected).max() < 1e-12


def test_open_gate_doubles_the_feature():
    fusion = Stfm(6, rng_(5))
    fusion.fc_w.data = np.zeros_like(fusion.fc_w.data)
    fusion.fc_b.data = np.full(12, 40.0)
    s, t = branch_pair(seed=6)
    got = fusion.forward(s, t).data
    doubled = T.scale(T.concat([s, t], axis=0), 2.0)
    expected = fusion.reduce.forward(doubled).data
    assert np.abs(got - expected).max() < 1e-12


def test_gate_pools_with_plain_spatial_mean():
    fusion = Stfm(3, rng_(7))
    s, t = branch_pair(c=3, h=5, w=2, seed=8)
    f = np.concatenate([s.data, t.data], axis=0)
    pooled = np.zeros(6)
    for c in range(6):
        for i in range(5):
            for j in range(2):
                pooled[c] += f[c, i, j]
    pooled /= 10.0
    z = pooled @ fusion.fc_w.data + fusion.fc_b.data
    expected = 1.0 / (1.0 + np.exp(-z))
    got = fusion.gate(Tensor(f)).data[0]
    assert np.abs(got - expected).max() < 1e-12


def test_fusion_is_spatially_pointwise_up_to_the_gate():
    """With a frozen gate, permuting pixel positions commutes with fusion
    (global pooling is the only non-pointwise piece)."""
    fusion = Stfm(4, rng_(9))
    s, t = branch_pair(c=4, seed=10)
    out = fusion.forward(s, t).data
    perm = np.random.default_rng(11).permutation(16)
    sp = s.data.reshape(4, 16)[:, perm].reshape(4, 4, 4)
    tp = t.data.reshape(4, 16)[:, perm].reshape(4, 4, 4)
    out_p = fusion.forward(Tensor(sp), Tensor(tp)).data
    assert np.abs(out_p - out.reshape(4, 16)[:, perm].reshape(4, 4, 4)).max() < 1e-12


def test_fusion_shape_mismatch_rejected():
    fusion = Stfm(4, rng_(12))
    with pytest.raises(ContractError):
        fusion.forward(Tensor(np.zeros((4, 4, 4))), Tensor(np.zeros((4, 6, 6))))


def test_ablation_fusions_work_and_differ():
    s, t = branch_pair(seed=13)
    stfm = make_fusion("stfm", 6, rng_(14))
    cat = make_fusion("concat", 6, rng_(14))
    add = make_fusion("add", 6, rng_(14))
    a = stfm.forward(s, t).data
    b = cat.forward(s, t).data
    c = add.forward(s, t).data
    assert a.shape == b.shape == c.shape == (6, 4, 4)
    assert np.array_equal(c, s.data + t.data)
    assert np.abs(a - b).max() > 1e-8
    with pytest.raises(ConfigurationError):
        make_fusion("mystery", 6, rng_(15))


def test_add_fusion_has_no_parameters():
    assert AddFusion().named_params() == {}
    assert len(ConcatFusion(6, rng_(16)).named_params()) == 2


# ---------------------------------------------------------------------------
# reconstruction head
# ---------------------------------------------------------------------------


def make_head(blocks_post=1, r=2, seed=17, c=8):
    return ReconstructionHead(c, 2, 2, 2.0, blocks_post, r, rng_(seed))


def test_fresh_head_is_exact_identity():
    """Zero-initialized output conv means the residual is exactly zero."""
    head = make_head()
    ref = rng_(18).random((3, 12, 12))
    feat = Tensor(rng_(19).standard_normal((8, 6, 6)))
    out = head.forward(feat, Tensor(ref))
    assert np.array_equal(out.data, ref)


@pytest.mark.parametrize("hw,fhw,r", [
    ((12, 12), (6, 6), 2),
    ((13, 15), (7, 8), 2),  # upsample overshoots, crop back
    ((6, 6), (6, 6), 1),
])
def test_head_output_shape(hw, fhw, r):
    head = make_head(r=r)
    ref = Tensor(rng_(20).random((3, *hw)))
    feat = Tensor(rng_(21).standard_normal((8, *fhw)))
    assert head.forward(feat, ref).shape == (3, *hw)


def test_head_rejects_undersized_feature():
    head = make_head(r=1)
    ref = Tensor(rng_(22).random((3, 12, 12)))
    feat = Tensor(rng_(23).standard_normal((8, 6, 6)))
    with pytest.raises(ContractError):
        head.forward(feat, ref)


def test_clamped_output_stays_in_range():
    head = make_head()
    head.head.weight.data = rng_(24).standard_normal(head.head.weight.shape)
    ref = Tensor(rng_(25).random((3, 8, 8)))
    feat = Tensor(rng_(26).standard_normal((8, 4, 4)) * 3)
    out = head.forward(feat, ref, clamp_output=True).data
    assert out.min() >= 0.0 and out.max() <= 1.0
    raw = head.forward(feat, ref).data
    assert raw.min() < 0.0 or raw.max() > 1.0


def test_head_gradients_match_finite_differences():
    head = make_head(blocks_post=1, r=2, c=4)
    # non-zero head so its gradient path is exercised from a generic point
    head.head.weight.data = rng_(27).normal(0.0, 0.05, head.head.weight.shape)
    ref = Tensor(rng_(28).random((3, 8, 8)))
    feat = Tensor(rng_(29).standard_normal((4, 4, 4)))
    target = Tensor(rng_(30).random((3, 8, 8)))

    def loss_fn():
        return charbonnier_loss(head.forward(feat, ref), target)

    errors = check_module_gradients(loss_fn, head.named_params())
    assert max(errors.values()) < 1e-4
