import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sav_deeponet import net_core
from sav_deeponet.deeponet import (
    DeepONetModel,
    DeepONetWeights,
    FieldSample,
    evaluate,
    evaluate_field,
    init_weights,
    jacobian_blocks,
    load_model,
    save_model,
)
from sav_deeponet.net_core import MlpSpec

from oracles import assert_close_rel, central_fd_jacobian


def small_model(m=3, d=1, p=4, hidden=(5,), bias=True):
    return DeepONetModel.build(m, d, p, hidden, use_bias=bias)


def test_bias_only_output():
    model = small_model()
    w = init_weights(model, 0)
    w.branch[:] = 0.0
    w.b0 = 3.5
    s = FieldSample(np.array([0.1, 0.2, 0.3]))
    for y in (0.0, 0.7, 1.9):
        assert evaluate(model, w, s, [y]) == 3.5


def test_scalar_product():
    # affine single-layer nets with zero weights: branch = bias 2, trunk = bias 5
    model = DeepONetModel(MlpSpec((1, 1)), MlpSpec((1, 1)), use_bias=False)
    w = DeepONetWeights(branch=np.array([0.0, 2.0]), trunk=np.array([0.0, 5.0]))
    assert evaluate(model, w, FieldSample([0.3]), [0.4]) == 10.0


def test_evaluate_matches_dot_product():
    model = small_model(m=4, p=6, hidden=(7, 5))
    w = init_weights(model, 3)
    w.b0 = -0.25
    rng = np.random.default_rng(1)
    u = rng.normal(size=4)
    y = rng.uniform(size=1)
    b = net_core.forward(model.branch_spec, w.branch, u)
    g = net_core.forward(model.trunk_spec, w.trunk, y)
    assert evaluate(model, w, FieldSample(u), y) == pytest.approx(float(b @ g) - 0.25, abs=1e-14)


def test_evaluate_field_degenerate_and_loop():
    model = small_model(m=50, p=8, hidden=(10,))
    w = init_weights(model, 5)
    w.b0 = 0.1
    sensors = np.linspace(0, 2, 50, endpoint=False)
    samples = [FieldSample(a * np.sin(np.pi * sensors), a) for a in (1.0, 1.4, 1.9)]
    ys = np.linspace(0, 2, 51)
    U = evaluate_field(model, w, samples, ys)
    assert U.shape == (3, 51)
    loop = np.array([[evaluate(model, w, s, [y]) for y in ys] for s in samples])
    np.testing.assert_allclose(U, loop, rtol=0, atol=1e-14)
    one = evaluate_field(model, w, samples[:1], ys[:1])
    assert one.shape == (1, 1) and one[0, 0] == pytest.approx(loop[0, 0], abs=1e-15)


def test_permuting_points_permutes_columns():
    model = small_model()
    w = init_weights(model, 2)
    s = [FieldSample([0.2, -0.1, 0.4])]
    ys = np.linspace(0, 1, 9)
    perm = np.random.default_rng(0).permutation(9)
    np.testing.assert_array_equal(evaluate_field(model, w, s, ys[perm]), evaluate_field(model, w, s, ys)[:, perm])


def test_dimension_errors():
    model = small_model()
    w = init_weights(model, 0)
    with pytest.raises(ValueError):
        evaluate(model, w, FieldSample([1.0, 2.0]), [0.5])
    with pytest.raises(ValueError):
        evaluate(model, w, FieldSample([1.0, 2.0, 3.0]), [0.5, 0.5])
    with pytest.raises(ValueError):
        DeepONetModel(MlpSpec((3, 4)), MlpSpec((1, 5)))


def test_unit_branch_gives_trunk_jacobian():
    # branch is an affine 1->1 map with zero weight and bias 1: b == 1
    trunk = MlpSpec((1, 4, 1))
    model = DeepONetModel(MlpSpec((1, 1)), trunk, use_bias=False)
    w = DeepONetWeights(branch=np.array([0.0, 1.0]), trunk=net_core.init_params(trunk, 9))
    ys = np.linspace(0, 1, 5)
    J1, _ = jacobian_blocks(model, w, FieldSample([0.7]), ys)
    np.testing.assert_allclose(J1, net_core.param_jacobian(trunk, w.trunk, ys[:, None])[:, 0, :], atol=1e-15)


def test_zero_trunk_kills_branch_block():
    model = small_model()
    w = init_weights(model, 4)
    w.trunk[:] = 0.0
    _, J2 = jacobian_blocks(model, w, FieldSample([0.1, 0.5, 0.9]), np.linspace(0, 1, 6))
    assert np.all(J2[:, :-1] == 0.0)
    assert np.all(J2[:, -1] == 1.0)


def _flat_eval(model, sample, ys):
    def f(vec):
        return evaluate_field(model, DeepONetWeights.from_flat(model, vec), [sample], ys)[0]
    return f


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("d", [1, 2])
def test_jacobian_blocks_vs_fd(seed, d):
    model = small_model(m=3, d=d, p=3, hidden=(4,))
    w = init_weights(model, seed)
    w.b0 = 0.3
    rng = np.random.default_rng(seed)
    sample = FieldSample(rng.normal(size=3))
    ys = rng.uniform(-1, 1, size=(6, d))
    J1, J2 = jacobian_blocks(model, w, sample, ys)
    fd = central_fd_jacobian(_flat_eval(model, sample, ys), w.flat(model))
    assert J1.shape[1] + J2.shape[1] == model.n_params
    assert_close_rel(np.hstack([J1, J2]), fd, 1e-5)


def test_product_rule_first_order():
    model = small_model(m=3, p=4, hidden=(6,))
    w = init_weights(model, 8)
    sample = FieldSample([0.3, -0.2, 0.5])
    ys = np.linspace(0, 2, 11)
    J = np.hstack(jacobian_blocks(model, w, sample, ys))
    gamma = np.random.default_rng(0).normal(size=model.n_params)
    base = evaluate_field(model, w, [sample], ys)[0]
    errs = []
    for eta in (1e-4, 1e-5):
        moved = evaluate_field(model, DeepONetWeights.from_flat(model, w.flat(model) + eta * gamma), [sample], ys)[0]
        errs.append(np.max(np.abs(moved - base - eta * J @ gamma)))
    assert np.log10(errs[0] / errs[1]) >= 1.9


@given(s=st.floats(-4, 4).filter(lambda v: abs(v) > 1e-3), seed=st.integers(0, 2**16))
@settings(max_examples=25, deadline=None)
def test_bilinear_in_branch_outputs(s, seed):
    model = small_model()
    w = init_weights(model, seed)
    w.b0 = 0.7
    sample = FieldSample(np.random.default_rng(seed).normal(size=3))
    ys = np.linspace(0, 1, 4)
    # scaling the last branch layer scales every b_k
    scaled = w.copy()
    *_, (_, _, ws, bs) = model.branch_spec.slices()
    scaled.branch[ws] *= s
    scaled.branch[bs] *= s
    u = evaluate_field(model, w, [sample], ys) - 0.7
    v = evaluate_field(model, scaled, [sample], ys) - 0.7
    np.testing.assert_allclose(v, s * u, rtol=1e-12, atol=1e-14)


def test_save_load_roundtrip(tmp_path):
    model = small_model(d=2)
    w = init_weights(model, 6)
    w.b0 = 1.25
    save_model(tmp_path / "m.txt", model, w)
    model2, w2 = load_model(tmp_path / "m.txt")
    assert model2 == model
    np.testing.assert_array_equal(w2.flat(model2), w.flat(model))
