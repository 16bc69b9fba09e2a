import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from soundboxes.errors import ConfigError, InvalidInputError
from soundboxes.separator import (ConditionedUNet, SeparatorConfig, apply_head, per_pixel_cross_entropy,
                                  sigmoid_head, softmax_head)


def small_cfg(**kw):
    base = dict(depth=3, base_channels=4, max_channels=8, feature_dim=6, input_shape=(16, 8))
    base.update(kw)
    return SeparatorConfig(**base)


def test_sigmoid_head_values():
    U = torch.tensor([0.0, np.log(3.0)], dtype=torch.float32)
    assert torch.allclose(sigmoid_head(U), torch.tensor([0.5, 0.75]))


def test_softmax_head_example():
    m1, m2 = softmax_head(torch.tensor([float(np.log(3.0))]), torch.tensor([0.0]))
    assert float(m1) == pytest.approx(0.75) and float(m2) == pytest.approx(0.25)


def test_softmax_head_extreme_logits_stay_finite():
    m1, m2 = softmax_head(torch.tensor([1000.0, -1000.0]), torch.tensor([-1000.0, 1000.0]))
    assert torch.equal(m1, torch.tensor([1.0, 0.0])) and torch.equal(m2, torch.tensor([0.0, 1.0]))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)),
       arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_masks_sum_to_one(a, b):
    m1, m2 = softmax_head(torch.as_tensor(a), torch.as_tensor(b))
    assert torch.allclose(m1 + m2, torch.ones(3, 5, dtype=torch.float64), atol=1e-12)
    assert ((m1 >= 0) & (m1 <= 1)).all()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-20, 20)))
def test_sigmoid_of_doubled_logit_is_softmax_of_opposite_pair(u):
    U = torch.as_tensor(u)
    m1, m2 = softmax_head(U, -U)
    assert torch.allclose(sigmoid_head(2 * U), m1, atol=1e-12)
    assert torch.allclose(sigmoid_head(-2 * U), m2, atol=1e-12)


def test_apply_head_unknown():
    with pytest.raises(ConfigError):
        apply_head("relu", torch.zeros(1), torch.zeros(1))


def test_cross_entropy_hand_values():
    p = torch.tensor([0.8, 0.3])
    t = torch.tensor([1.0, 0.0])
    expected = -(np.log(0.8) + np.log(0.7)) / 2
    assert float(per_pixel_cross_entropy([p], [t])) == pytest.approx(expected, rel=1e-6)
    # averaging over two sources
    q = torch.tensor([0.5, 0.5])
    both = per_pixel_cross_entropy([p, q], [t, t])
    assert float(both) == pytest.approx((expected + np.log(2)) / 2, rel=1e-6)


def test_cross_entropy_perfect_prediction_is_near_zero():
    t = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    assert float(per_pixel_cross_entropy([t], [t])) < 1e-6


def test_cross_entropy_shape_checks():
    with pytest.raises(InvalidInputError):
        per_pixel_cross_entropy([torch.zeros(2, 2)], [torch.zeros(2, 3)])
    with pytest.raises(InvalidInputError):
        per_pixel_cross_entropy([torch.zeros(2)], [])


def test_cross_entropy_gradient_finite_differences():
    torch.manual_seed(0)
    U1 = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    U2 = torch.randn(3, 4, dtype=torch.float64)
    t1 = (torch.rand(3, 4) > 0.5).double()
    t2 = 1 - t1

    def f(u):
        return per_pixel_cross_entropy(list(softmax_head(u, U2)), [t1, t2])

    f(U1).backward()
    h = 1e-6
    fd = torch.zeros_like(U1)
    base = U1.detach()
    for idx in np.ndindex(3, 4):
        up, dn = base.clone(), base.clone()
        up[idx] += h
        dn[idx] -= h
        fd[idx] = (f(up) - f(dn)) / (2 * h)
    assert torch.allclose(U1.grad, fd, rtol=1e-5, atol=1e-9)


def test_config_validation():
    with pytest.raises(ConfigError):
        SeparatorConfig(head="tanh")
    with pytest.raises(ConfigError):
        SeparatorConfig(input_shape=(100, 256))
    with pytest.raises(ConfigError):
        SeparatorConfig(conditioning="film")


def test_full_size_shape_contract():
    torch.manual_seed(0)
    net = ConditionedUNet(SeparatorConfig(base_channels=4, max_channels=16))
    out = net(torch.randn(1, 256, 256), torch.randn(1, 32))
    assert out.shape == (1, 256, 256)


def test_input_shape_errors():
    net = ConditionedUNet(small_cfg())
    with pytest.raises(InvalidInputError):
        net(torch.randn(2, 16, 16), torch.randn(2, 6))
    with pytest.raises(InvalidInputError):
        net(torch.randn(2, 16, 8), torch.randn(2, 5))
    with pytest.raises(InvalidInputError):
        net(torch.randn(2, 16, 8), torch.randn(3, 6))


def test_output_depends_on_feature():
    torch.manual_seed(0)
    net = ConditionedUNet(small_cfg()).eval()
    x = torch.randn(1, 16, 8)
    a = net(x, torch.randn(1, 6))
    b = net(x, torch.randn(1, 6))
    assert not torch.allclose(a, b)


def test_deterministic_in_eval_mode():
    torch.manual_seed(1)
    net = ConditionedUNet(small_cfg()).eval()
    x, f = torch.randn(2, 16, 8), torch.randn(2, 6)
    assert torch.equal(net(x, f), net(x, f))


def test_learns_feature_conditioned_masks():
    """Two features, two fixed target masks: CE must drop by at least half in 50 steps."""
    torch.manual_seed(0)
    cfg = small_cfg(head="softmax")
    net = ConditionedUNet(cfg)
    opt = torch.optim.Adam(net.parameters(), lr=1e-2)
    x = torch.randn(4, 16, 8)
    f1, f2 = torch.randn(4, 6), torch.randn(4, 6)
    t1 = (torch.arange(16)[:, None] < 8).float().expand(4, 16, 8)
    t2 = 1 - t1
    losses = []
    for _ in range(50):
        opt.zero_grad()
        U = net(torch.cat([x, x]), torch.cat([f1, f2]))
        loss = per_pixel_cross_entropy(list(softmax_head(U[:4], U[4:])), [t1, t2])
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    assert losses[-1] <= 0.5 * losses[0]


@pytest.mark.parametrize("upsample", ["bilinear", "nearest"])
@pytest.mark.parametrize("norm", ["batch", "layer", "none"])
def test_architecture_options(upsample, norm):
    net = ConditionedUNet(small_cfg(upsample=upsample, feature_norm=norm))
    assert net(torch.randn(3, 16, 8), torch.randn(3, 6)).shape == (3, 16, 8)


def test_bad_architecture_options():
    with pytest.raises(ConfigError):
        small_cfg(upsample="cubic")
    with pytest.raises(ConfigError):
        small_cfg(feature_norm="group")


def test_single_item_training_batch():
    net = ConditionedUNet(small_cfg()).train()
    out = net(torch.randn(1, 16, 8), torch.randn(1, 6))
    assert out.shape == (1, 16, 8) and torch.isfinite(out).all()


def test_feature_normalisation_is_scale_free():
    """Rescaling every conditioning vector in a batch leaves the output unchanged."""
    torch.manual_seed(0)
    net = ConditionedUNet(small_cfg()).train()
    x, f = torch.randn(4, 16, 8), torch.randn(4, 6)
    assert torch.allclose(net(x, f), net(x, 5.0 * f), atol=1e-4)
