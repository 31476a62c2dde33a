import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssbl.autodiff import Tensor, backward, gradcheck, mul, total
from ssbl.networks import (
    HEAD_SCALE,
    CheckpointError,
    SSNetConfig,
    SSSLConfig,
    cast_parameters,
    init_parameters,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
    sssl_forward,
    ssnet_forward,
)


def vol(seed, c, n):
    return Tensor(np.random.default_rng(seed).random((c, n, n, n)).astype(np.float32))


def test_ssnet_shape_and_near_zero_init():
    cfg = SSNetConfig(base_channels=4, depth=4)
    p = init_parameters(cfg, seed=0)
    out = ssnet_forward(p, vol(1, 1, 32), vol(2, 1, 32), cfg)
    assert out.shape == (3, 32, 32, 32)
    assert np.abs(out.value).max() < 1e-2
    assert np.abs(p["head.w"].value).max() <= HEAD_SCALE and np.abs(p["head.b"].value).max() <= HEAD_SCALE


def test_ssnet_rejects_bad_extents():
    cfg = SSNetConfig(base_channels=2, depth=2)
    p = init_parameters(cfg)
    with pytest.raises(ValueError, match="divisible"):
        ssnet_forward(p, vol(0, 1, 6), vol(1, 1, 6), cfg)
    with pytest.raises(ValueError):
        ssnet_forward(p, vol(0, 1, 8), vol(1, 1, 4), cfg)


def test_parameter_count_closed_form():
    # widths 8..128; enc0, four stride-2 stages, four decoder stages with skips, 3-channel head
    assert parameter_count(SSNetConfig(base_channels=8, depth=4)) == 735851
    assert parameter_count(SSNetConfig(base_channels=8, depth=4)) < 1_000_000


def test_init_is_deterministic():
    a, b = init_parameters(SSSLConfig(base_channels=2, depth=2), 5), init_parameters(SSSLConfig(base_channels=2, depth=2), 5)
    assert all(a[k].value.tobytes() == b[k].value.tobytes() for k in a)
    assert all(t.requires_grad for t in a.values()) and len(set(a)) == len(a)


def test_sssl_softmax_contract():
    cfg = SSSLConfig(base_channels=2, depth=3)
    p = init_parameters(cfg, 1)
    out = sssl_forward(p, vol(0, 1, 32), vol(1, 1, 32), vol(2, 3, 32), cfg)
    assert out.shape == (2, 32, 32, 32)
    assert np.allclose(out.value.sum(0), 1, atol=1e-5)


def test_sssl_extent_mismatch():
    cfg = SSSLConfig(base_channels=2, depth=1)
    p = init_parameters(cfg)
    with pytest.raises(ValueError):
        sssl_forward(p, vol(0, 1, 4), vol(1, 1, 4), vol(2, 3, 6), cfg)


def test_sssl_zero_motion_inputs_are_pure():
    cfg = SSSLConfig(base_channels=2, depth=2)
    p = init_parameters(cfg, 2)
    img = vol(3, 1, 8)
    z1 = Tensor(np.zeros((1, 8, 8, 8), np.float32))
    f1 = Tensor(np.zeros((3, 8, 8, 8), np.float32))
    f2 = Tensor(-np.zeros((3, 8, 8, 8), np.float32))
    a = sssl_forward(p, img, z1, f1, cfg).value
    b = sssl_forward(p, img, Tensor(np.zeros((1, 8, 8, 8), np.float32)), f2, cfg).value
    assert np.array_equal(a, b)


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 3), st.lists(st.integers(1, 3), min_size=3, max_size=3))
def test_output_extents_match_inputs(depth, mult):
    dims = tuple(m * 2 ** depth for m in mult)
    rng = np.random.default_rng(0)
    cfg = SSNetConfig(base_channels=1, depth=depth)
    a = Tensor(rng.random((1, *dims)))
    assert ssnet_forward(init_parameters(cfg), a, a, cfg).shape == (3, *dims)
    scfg = SSSLConfig(base_channels=1, depth=depth)
    out = sssl_forward(init_parameters(scfg), a, a, Tensor(rng.random((3, *dims))), scfg)
    assert out.shape == (2, *dims)


@pytest.mark.parametrize("cfg", [SSNetConfig(base_channels=2, depth=2), SSSLConfig(base_channels=2, depth=2)])
def test_every_parameter_gets_gradient(cfg):
    p = init_parameters(cfg, 3)
    rng = np.random.default_rng(4)
    if isinstance(cfg, SSNetConfig):
        out = ssnet_forward(p, vol(5, 1, 8), vol(6, 1, 8), cfg)
    else:
        out = sssl_forward(p, vol(5, 1, 8), vol(6, 1, 8), Tensor(rng.normal(size=(3, 8, 8, 8))), cfg)
    backward(total(mul(out, Tensor(rng.normal(size=out.shape)))))
    dead = [k for k, t in p.items() if t.grad is None or not np.any(t.grad)]
    assert not dead


def test_ssnet_full_gradcheck_float64():
    cfg = SSNetConfig(base_channels=2, depth=2)
    p = cast_parameters(init_parameters(cfg, 6), np.float64)
    names = list(p)
    rng = np.random.default_rng(7)
    # a larger head lets the loss depend on every layer at a measurable scale
    p["head.w"] = Tensor(rng.normal(0, 0.3, p["head.w"].shape))
    ia, ib = rng.random((1, 8, 8, 8)), rng.random((1, 8, 8, 8))
    weight = Tensor(rng.normal(size=(3, 8, 8, 8)))

    def fn(a, b, *params):
        out = ssnet_forward(dict(zip(names, params)), a, b, cfg)
        return total(mul(out, weight))

    r = gradcheck(fn, [ia, ib] + [p[k].value for k in names], samples=6, seed=1)
    assert r.max_rel_error <= 1e-4


def test_forward_is_deterministic():
    cfg = SSNetConfig(base_channels=2, depth=2)
    p = init_parameters(cfg, 8)
    a, b = vol(0, 1, 8), vol(1, 1, 8)
    assert ssnet_forward(p, a, b, cfg).value.tobytes() == ssnet_forward(p, a, b, cfg).value.tobytes()


def test_swapped_inputs_share_parameters_and_shape():
    cfg = SSNetConfig(base_channels=2, depth=2)
    p = init_parameters(cfg, 9)
    a, b = vol(0, 1, 8), vol(1, 1, 8)
    fwd, bwd = ssnet_forward(p, a, b, cfg), ssnet_forward(p, b, a, cfg)
    assert fwd.shape == bwd.shape
    assert not np.array_equal(fwd.value, bwd.value)


def test_checkpoint_round_trip(tmp_path):
    cfg = SSSLConfig(base_channels=2, depth=2)
    p = init_parameters(cfg, 10)
    save_checkpoint(p, tmp_path / "m", cfg, extra={"epoch": 3})
    ck = load_checkpoint(tmp_path / "m")
    assert ck.config == cfg and ck.extra == {"epoch": 3}
    assert all(ck.params[k].value.tobytes() == p[k].value.tobytes() for k in p)
    inputs = (vol(0, 1, 8), vol(1, 1, 8), vol(2, 3, 8))
    before = sssl_forward(p, *inputs, cfg).value
    after = sssl_forward(ck.params, *inputs, cfg).value
    assert before.tobytes() == after.tobytes()


def test_checkpoint_errors(tmp_path):
    cfg = SSNetConfig(base_channels=2, depth=2)
    save_checkpoint(init_parameters(cfg), tmp_path / "m", cfg)
    with pytest.raises(CheckpointError, match="enc0.w"):
        load_checkpoint(tmp_path / "m", SSNetConfig(base_channels=3, depth=2))
    with pytest.raises(CheckpointError, match="down3"):
        load_checkpoint(tmp_path / "m", SSNetConfig(base_channels=2, depth=3))
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "absent")
    (tmp_path / "m.json").write_text('{"format": "other"}')
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m")


def test_config_invariants():
    with pytest.raises(ValueError):
        SSNetConfig(depth=0)
    with pytest.raises(ValueError):
        SSSLConfig(num_classes=1)
    with pytest.raises(ValueError):
        SSSLConfig(dist_mode="gate")
