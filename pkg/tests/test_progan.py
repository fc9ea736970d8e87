from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from rebalance_forge.errors import ShapeError
from rebalance_forge.progan import (
    LayerSpec,
    NetworkSpec,
    TensorShape,
    builtin_critic_spec,
    builtin_generator_spec,
    propagate_shape,
    stage_schedule,
    validate_network,
    wgan_gp_loss,
)

GENERATOR_FINDINGS = [(6, (224, 28, 28), (56, 28, 28))]
CRITIC_FINDINGS = [(0, (14, 218, 218), (14, 224, 224)), (17, None, (224, 1, 1))]


def summary(report):
    return [
        (f.layer_index, f.expected_shape.as_tuple() if f.expected_shape else None, f.declared_shape.as_tuple())
        for f in report.findings
    ]


def conv_positions(size, k, p, s):
    """Count kernel placements by walking the padded input."""
    count = 0
    start = -p
    while start + k <= size + p:
        count += 1
        start += s
    return count


def tconv_extent(size, k, p, s):
    """Paint every output index each input pixel touches, then crop padding."""
    touched = set()
    for i in range(size):
        for j in range(k):
            touched.add(i * s + j)
    return max(touched) + 1 - 2 * p


@pytest.mark.parametrize(
    "layer, inp, out",
    [
        (LayerSpec("TConv2D", k=7, p=0, s=1, out_channels=224), (112, 1, 1), (224, 7, 7)),
        (LayerSpec("UpSample"), (224, 14, 14), (224, 28, 28)),
        (LayerSpec("MinibatchStdDev"), (224, 7, 7), (225, 7, 7)),
        (LayerSpec("Conv2D", k=7, p=0, s=1, out_channels=14), (3, 224, 224), (14, 218, 218)),
        (LayerSpec("Conv2D", k=1, p=0, s=1, out_channels=9), (5, 13, 11), (9, 13, 11)),
        (LayerSpec("DownSample"), (56, 112, 112), (56, 56, 56)),
        (LayerSpec("ToRGB"), (7, 224, 224), (3, 224, 224)),
        (LayerSpec("ConvThenDownSample", k=3, p=1, s=1, out_channels=28), (14, 224, 224), (28, 112, 112)),
    ],
)
def test_propagate_shape(layer, inp, out):
    assert propagate_shape(layer, TensorShape.of(inp)).as_tuple() == out


def test_propagate_errors():
    with pytest.raises(ShapeError):
        propagate_shape(LayerSpec("DownSample"), TensorShape(4, 7, 7))
    with pytest.raises(ShapeError):
        propagate_shape(LayerSpec("Conv2D", k=5, p=0, s=1, out_channels=2), TensorShape(1, 3, 3))


def test_layer_validation():
    with pytest.raises(ShapeError):
        LayerSpec("Conv2D", k=3)
    with pytest.raises(ShapeError):
        LayerSpec("UpSample", k=3)
    with pytest.raises(ShapeError):
        LayerSpec("Dense")


@given(st.integers(1, 40), st.integers(1, 9), st.integers(0, 4), st.integers(1, 4))
def test_conv_matches_index_oracle(size, k, p, s):
    layer = LayerSpec("Conv2D", k=k, p=p, s=s, out_channels=2)
    expected = conv_positions(size, k, p, s)
    if expected < 1:
        with pytest.raises(ShapeError):
            propagate_shape(layer, TensorShape(1, size, size))
        return
    assert propagate_shape(layer, TensorShape(1, size, size)).height == expected


@given(st.integers(1, 20), st.integers(1, 9), st.integers(0, 3), st.integers(1, 4))
def test_tconv_matches_index_oracle(size, k, p, s):
    layer = LayerSpec("TConv2D", k=k, p=p, s=s, out_channels=2)
    expected = tconv_extent(size, k, p, s)
    if expected < 1:
        with pytest.raises(ShapeError):
            propagate_shape(layer, TensorShape(1, size, size))
        return
    assert propagate_shape(layer, TensorShape(1, size, size)).width == expected


@pytest.mark.parametrize("stage", range(1, 7))
def test_progressive_doubling(stage):
    res = 7 * 2 ** (stage - 1)
    gen = validate_network(builtin_generator_spec(stage))
    assert gen.ok
    assert gen.output_shape.as_tuple() == (3, res, res)
    critic_spec = builtin_critic_spec(stage)
    assert critic_spec.input_shape == gen.output_shape
    critic = validate_network(critic_spec)
    assert critic.ok
    assert critic.output_shape.as_tuple() == (1, 1, 1)


def test_generator_grows_by_blocks():
    sizes = [len(builtin_generator_spec(s).layers) for s in range(1, 7)]
    # three layers per new block, plus the inserted narrowing conv at 28x28
    assert [b - a for a, b in zip(sizes, sizes[1:])] == [3, 4, 3, 3, 3]


def test_verbatim_generator_audit():
    report = validate_network(builtin_generator_spec(6, verbatim=True))
    assert summary(report) == GENERATOR_FINDINGS
    assert "chain break" in report.findings[0].note


def test_verbatim_critic_audit():
    report = validate_network(builtin_critic_spec(6, verbatim=True))
    assert summary(report) == CRITIC_FINDINGS


def test_verbatim_only_for_final_stage():
    with pytest.raises(ShapeError):
        builtin_generator_spec(3, verbatim=True)


@pytest.mark.parametrize("stage", [0, 7])
def test_stage_range(stage):
    with pytest.raises(ShapeError):
        builtin_critic_spec(stage)


def test_identity_conv_network():
    spec = NetworkSpec("id", 1, (LayerSpec("Conv2D", k=1, p=0, s=1, out_channels=3),), TensorShape(3, 8, 8))
    assert validate_network(spec).ok


def test_spec_json_roundtrip():
    for spec in (builtin_generator_spec(6, verbatim=True), builtin_critic_spec(4)):
        data = json.loads(json.dumps(spec.to_json()))
        assert NetworkSpec.from_json(data) == spec


def test_schedule_constants():
    sched = stage_schedule()
    assert list(sched.resolution) == [7, 14, 28, 56, 112, 224]
    assert list(sched.epochs) == [250, 300, 350, 400, 450, 500]
    assert list(sched.batch_size) == [256, 128, 32, 16, 16, 8]
    assert (sched.latent_size, sched.n_critic, sched.learning_rate, sched.loss_model) == (112, 5, 1e-3, "WGAN-GP")


def test_wgan_gp_examples():
    zero = wgan_gp_loss([0.0], [0.0], [1.0], 10)
    assert (zero.critic_loss, zero.generator_loss) == (0.0, 0.0)
    out = wgan_gp_loss([2, 4], [1, 1], [1, 1], 10)
    assert (out.critic_loss, out.generator_loss) == (-2.0, -1.0)


def test_wgan_gp_without_penalty_is_wasserstein():
    out = wgan_gp_loss([0.5, 1.5, 2.0], [0.25, -1.0], [3.0, 0.1], 0.0)
    assert out.critic_loss == pytest.approx((0.25 - 1.0) / 2 - (0.5 + 1.5 + 2.0) / 3)
    assert out.critic_loss == out.wasserstein


def test_wgan_gp_penalty():
    out = wgan_gp_loss([0.0], [0.0], [3.0, 1.0], 2.0)
    assert out.critic_loss == pytest.approx(2.0 * (4.0 + 0.0) / 2)


def test_wgan_gp_rejects_empty():
    with pytest.raises(ValueError):
        wgan_gp_loss([], [1.0], [1.0])
