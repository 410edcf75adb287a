"""Model construction, bottleneck math, split consistency, checkpoints."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ibrobust import tensor as T
from ibrobust import nn
from ibrobust.checkpoint import load_model, save_model
from ibrobust.errors import (
    BadMagic,
    NonPositiveSigma,
    ShapeMismatch,
    TeacherMissing,
    UnsupportedShape,
)


def mnist_spec(objective="base", **kw):
    return nn.NetworkSpec("D1", (1, 28, 28), 10, objective, **kw)


@pytest.fixture(scope="module")
def base_d1():
    return nn.build_model(mnist_spec(), seed=0)


def test_d1_base_parameter_count(base_d1):
    assert 2e5 <= base_d1.param_count() <= 4e5


def test_svbi_encoder_size_bound(base_d1):
    svbi = nn.build_model(mnist_spec("svbi", beta=1.0), seed=1, teacher=base_d1)
    assert svbi.param_count("enc") / base_d1.param_count() <= 0.02


def test_same_seed_bit_identical():
    a = nn.build_model(mnist_spec(), seed=7)
    b = nn.build_model(mnist_spec(), seed=7)
    assert set(a.params) == set(b.params)
    for k in a.params:
        assert np.array_equal(a.params[k], b.params[k])


def test_tier_depth_ordering():
    counts = {}
    for tier in ("D1", "D2", "D3"):
        blocks = nn.TIER_BLOCKS[tier]
        counts[tier] = sum(blocks)
    assert counts["D1"] == 8 and counts["D2"] == 14 and counts["D3"] == 20
    assert counts["D1"] < counts["D2"] < counts["D3"]


def test_unsupported_shapes_rejected():
    with pytest.raises(UnsupportedShape):
        nn.NetworkSpec("D9", (1, 28, 28), 10)
    with pytest.raises(UnsupportedShape):
        nn.NetworkSpec("D1", (1, 6, 6), 10)
    with pytest.raises(UnsupportedShape):
        nn.NetworkSpec("D1", (1, 28, 28), 10, "nonsense")


def test_forward_rejects_wrong_input_shape(base_d1):
    tape = T.Tape(np.float32)
    with pytest.raises(ShapeMismatch):
        base_d1.forward(tape, tape.constant(np.zeros((2, 3, 28, 28), dtype=np.float32)))


def test_split_backbone_exact(base_d1):
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, (5, 1, 28, 28)).astype(np.float32)
    tape = T.Tape(np.float32)
    full = base_d1.forward(tape, tape.constant(x)).logits.data
    sb = nn.split_backbone(base_d1)
    tape2 = T.Tape(np.float32)
    h = sb.head(tape2, tape2.constant(x))
    composed = sb.tail(tape2, h).data
    assert np.max(np.abs(full - composed)) == 0.0


def test_svbi_requires_matching_teacher(base_d1):
    with pytest.raises(TeacherMissing):
        nn.build_model(mnist_spec("svbi"), seed=0)
    other = nn.build_model(nn.NetworkSpec("D2", (1, 28, 28), 10), seed=0)
    with pytest.raises(TeacherMissing):
        nn.build_model(mnist_spec("svbi"), seed=0, teacher=other)


# ---------------------------------------------------------------------------
# reparameterization and KL
# ---------------------------------------------------------------------------


def _tensors(*arrays):
    tape = T.Tape(np.float64)
    return tape, [tape.leaf(np.asarray(a, dtype=np.float64)) for a in arrays]


def test_reparam_zero_noise():
    tape, (mu, sigma) = _tensors([0.3, -1.2], [0.5, 2.0])
    z = nn.reparam_sample(mu, sigma, tape.constant([0.0, 0.0]))
    assert np.array_equal(z.data, mu.data)


def test_reparam_degenerate_sigma():
    tape, (mu,) = _tensors([1.0, 2.0])
    sigma = tape.constant([1e-6, 1e-6])
    z = nn.reparam_sample(mu, sigma, tape.constant([0.7, -0.7]))
    assert z.data == pytest.approx(mu.data, abs=1e-5)


def test_reparam_arithmetic():
    tape, _ = _tensors()
    z = nn.reparam_sample(tape.leaf([1.0]), tape.leaf([2.0]), tape.constant([0.5]))
    assert z.data == pytest.approx([2.0])


def test_reparam_shape_and_sigma_guards():
    tape, (mu,) = _tensors([1.0, 2.0])
    with pytest.raises(ShapeMismatch):
        nn.reparam_sample(mu, tape.leaf([1.0]), tape.constant([0.0, 0.0]))
    with pytest.raises(NonPositiveSigma):
        nn.reparam_sample(mu, tape.leaf([1.0, -1.0]), tape.constant([0.0, 0.0]))


def test_kl_closed_forms():
    tape, _ = _tensors()
    kl0 = nn.kl_std_normal(tape.leaf([0.0]), tape.leaf([1.0]))
    assert float(kl0.data) == pytest.approx(0.0, abs=1e-12)
    kl1 = nn.kl_std_normal(tape.leaf([1.0]), tape.leaf([1.0]))
    assert float(kl1.data) == pytest.approx(0.5, rel=1e-9)
    kl2 = nn.kl_std_normal(tape.leaf([0.0]), tape.leaf([math.e]))
    assert float(kl2.data) == pytest.approx((math.e**2 - 3) / 2, rel=1e-9)


def test_kl_batch_averages():
    tape, _ = _tensors()
    mu = tape.leaf([[1.0], [0.0]])
    sigma = tape.leaf([[1.0], [1.0]])
    kl = nn.kl_std_normal(mu, sigma)
    assert float(kl.data) == pytest.approx(0.25, rel=1e-9)


@settings(max_examples=100, deadline=None)
@given(
    mu=st.floats(-5, 5, allow_nan=False),
    sigma=st.floats(1e-3, 5, allow_nan=False),
)
def test_kl_nonnegative(mu, sigma):
    tape = T.Tape(np.float64)
    kl = nn.kl_std_normal(tape.leaf([mu]), tape.leaf([sigma]))
    assert float(kl.data) >= -1e-12
    if abs(mu) < 1e-9 and abs(sigma - 1.0) < 1e-9:
        assert float(kl.data) <= 1e-9


def test_kl_zero_iff_standard_normal():
    tape = T.Tape(np.float64)
    kl = nn.kl_std_normal(tape.leaf([0.1]), tape.leaf([1.0]))
    assert float(kl.data) > 1e-9


# ---------------------------------------------------------------------------
# objective-specific forwards
# ---------------------------------------------------------------------------


def test_dvib_eval_uses_posterior_mean():
    model = nn.build_model(mnist_spec("dvib", beta=0.01), seed=3)
    x = np.random.default_rng(1).uniform(0, 1, (2, 1, 28, 28)).astype(np.float32)
    tape = T.Tape(np.float32)
    a = model.forward(tape, tape.constant(x)).logits.data
    tape2 = T.Tape(np.float32)
    b = model.forward(tape2, tape2.constant(x)).logits.data
    assert np.array_equal(a, b)  # no sampling at eval


def test_dvib_train_forward_is_stochastic():
    model = nn.build_model(mnist_spec("dvib", beta=0.01), seed=3)
    x = np.random.default_rng(1).uniform(0, 1, (2, 1, 28, 28)).astype(np.float32)
    tape = T.Tape(np.float32)
    a = model.forward(tape, tape.constant(x), train=True, rng=np.random.default_rng(0))
    tape2 = T.Tape(np.float32)
    b = model.forward(tape2, tape2.constant(x), train=True, rng=np.random.default_rng(1))
    assert not np.array_equal(a.logits.data, b.logits.data)


def test_svbi_round_quantizes_at_eval(base_d1):
    model = nn.build_model(mnist_spec("svbi"), seed=4, teacher=base_d1)
    x = np.random.default_rng(2).uniform(0, 1, (2, 1, 28, 28)).astype(np.float32)
    tape = T.Tape(np.float32)
    out = model.forward(tape, tape.constant(x))
    assert np.array_equal(out.latent_q.data, np.round(out.latent.data))


def test_svbi_straight_through_gradient(base_d1):
    # quantized forward still yields usable input gradients
    model = nn.build_model(mnist_spec("svbi"), seed=4, teacher=base_d1)
    x = np.random.default_rng(2).uniform(0, 1, (2, 1, 28, 28)).astype(np.float32)
    tape = T.Tape(np.float32)
    xt = tape.leaf(x)
    out = model.forward(tape, xt)
    loss = T.sum_(T.square(out.logits))
    T.backward(loss, wrt=[xt])
    assert np.abs(xt.grad).max() > 0


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_bit_exact_roundtrip(tmp_path, base_d1):
    path = tmp_path / "model.ckpt"
    save_model(base_d1, path)
    loaded = load_model(path)
    assert loaded.spec == base_d1.spec
    assert set(loaded.params) == set(base_d1.params)
    for k in base_d1.params:
        assert loaded.params[k].dtype == base_d1.params[k].dtype
        assert np.array_equal(loaded.params[k], base_d1.params[k])


def test_checkpoint_svbi_roundtrip_forward(tmp_path, base_d1):
    model = nn.build_model(mnist_spec("svbi"), seed=4, teacher=base_d1)
    path = tmp_path / "svbi.ckpt"
    save_model(model, path)
    loaded = load_model(path)
    x = np.random.default_rng(5).uniform(0, 1, (2, 1, 28, 28)).astype(np.float32)
    tape1, tape2 = T.Tape(np.float32), T.Tape(np.float32)
    a = model.forward(tape1, tape1.constant(x)).logits.data
    b = loaded.forward(tape2, tape2.constant(x)).logits.data
    assert np.array_equal(a, b)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(BadMagic):
        load_model(path)
