import numpy as np
import pytest

from letf_lab.dsfm import (
    BasisSpec,
    ConvergenceReport,
    DayPanel,
    DsfmModel,
    default_basis,
    explained_variance,
    factor_surface,
    fit,
    gram_matrix,
    orthonormalize_model,
    read_panels,
    rmse,
    rmspe,
    surface_at,
    tensor_design,
    write_panels,
)

BASIS = default_basis()
GM = np.linspace(0, 1, 11)
GT = np.linspace(0, 1, 6)


def _truth(L=2, T=25, seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((L + 1, BASIS.K))
    Z = np.hstack([np.ones((T, 1)), rng.standard_normal((T, L)) * np.arange(L, 0, -1) * 2.0])
    model = DsfmModel(BASIS, L, A, Z, list(range(T)), ConvergenceReport(0, True))
    return orthonormalize_model(model), rng


def _panels(model, rng, n=60, noise=0.0):
    out = []
    for t, z in zip(model.days, model.Z):
        xm, xt = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
        y = tensor_design(xm, xt, model.basis) @ model.A.T @ z + noise * rng.standard_normal(n)
        out.append(DayPanel(t, xm, xt, y))
    return out


def test_basis_dimensions_and_validation():
    assert (len(BASIS.knots_m), len(BASIS.knots_t)) == (9, 7)
    assert (BASIS.U, BASIS.V, BASIS.K) == (6, 4, 24)
    with pytest.raises(ValueError):
        BasisSpec(3, 3, (0, 0, 0.5, 1, 1, 1), BASIS.knots_t)
    with pytest.raises(ValueError):
        BasisSpec(3, 3, (0, 0, 0, 0.7, 0.5, 1, 1, 1), BASIS.knots_t)
    assert BasisSpec.from_dict(BASIS.to_dict()) == BASIS


def test_partition_of_unity_and_endpoints():
    rng = np.random.default_rng(1)
    d = tensor_design(rng.uniform(0, 1, 200), rng.uniform(0, 1, 200), BASIS)
    np.testing.assert_allclose(d.sum(1), 1.0, atol=1e-12)
    corner = tensor_design([0.0, 1.0], [0.0, 1.0], BASIS)
    assert corner[0, 0] == 1.0 and corner[1, -1] == 1.0
    assert np.count_nonzero(corner[0]) == 1 and np.count_nonzero(corner[1]) == 1
    with pytest.raises(ValueError):
        tensor_design([1.2], [0.5], BASIS)


def test_noiseless_recovery():
    truth, rng = _truth()
    panels = _panels(truth, rng)
    model = fit(panels, 2, BASIS)
    assert rmse(model, panels) < 1e-6
    assert explained_variance(model, panels) >= 0.999
    assert model.report.monotone
    obj = np.array(model.report.objective)
    assert np.all(np.diff(obj) <= 1e-10 * obj[:-1] + 1e-14)
    for l in range(3):
        true_s = factor_surface(truth, l, GM, GT)
        got = factor_surface(model, l, GM, GT)
        if l:
            got = got * np.sign(np.sum(got * true_s))
        assert np.max(np.abs(got - true_s)) < 1e-4
    # loadings of the next day recover its data
    nxt = _panels(truth, np.random.default_rng(9))[3]
    assert rmspe(model, truth.Z[3], nxt) < 1e-6


def test_static_model_is_pooled_least_squares():
    truth, rng = _truth(L=1)
    panels = _panels(truth, rng, noise=0.01)
    model = fit(panels, 0, BASIS)
    d = np.vstack([tensor_design(p.x_m, p.x_t, BASIS) for p in panels])
    y = np.concatenate([p.y for p in panels])
    coef = np.linalg.lstsq(d, y, rcond=None)[0]
    np.testing.assert_allclose(model.A[0], coef, atol=1e-10)
    np.testing.assert_allclose(surface_at(model, [1.0], GM, GT), factor_surface(model, 0, GM, GT))


def test_orthonormalization_properties():
    truth, rng = _truth(L=3, seed=2)
    panels = _panels(truth, rng, noise=0.005)
    raw = fit(panels, 3, BASIS, orthonormalize=False)
    model = orthonormalize_model(raw)
    for p in panels:
        np.testing.assert_allclose(model.predict(p), raw.predict(p), atol=1e-10)
    m = model.A[1:]
    np.testing.assert_allclose(m @ gram_matrix(BASIS) @ m.T, np.eye(3), atol=1e-8)
    var = model.Z[:, 1:].var(0)
    assert np.all(np.diff(var) <= 0)
    assert np.all(model.Z[:, 0] == 1.0)


def test_surface_linearity_and_pointwise_prediction():
    truth, rng = _truth()
    panels = _panels(truth, rng)
    model = fit(panels, 2, BASIS)
    z, dz = np.array([1.0, 0.3, -0.2]), np.array([0.0, 0.5, 0.7])
    lhs = surface_at(model, z + dz, GM, GT) - surface_at(model, z, GM, GT)
    rhs = surface_at(model, np.array([1.0, 0.5, 0.7]), GM, GT) - factor_surface(model, 0, GM, GT)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)
    p = panels[4]
    pts = np.array([surface_at(model, model.Z[4], [a], [b])[0, 0] for a, b in zip(p.x_m[:5], p.x_t[:5])])
    np.testing.assert_allclose(pts, model.predict(p)[:5], atol=1e-10)
    coarse = surface_at(model, z, GM[::2], GT)
    np.testing.assert_array_equal(coarse, surface_at(model, z, GM, GT)[::2])
    with pytest.raises(ValueError):
        surface_at(model, [0.0, 1.0, 1.0], GM, GT)


def test_fit_criteria_arithmetic():
    truth, rng = _truth()
    panels = _panels(truth, rng)
    shifted = [DayPanel(p.t, p.x_m, p.x_t, p.y + 0.05) for p in panels]
    assert rmse(truth, panels) < 1e-10
    assert rmse(truth, shifted) == pytest.approx(0.05, abs=1e-10)
    mean = np.concatenate([p.y for p in panels]).mean()
    flat = DsfmModel(BASIS, 0, np.full((1, BASIS.K), mean), np.ones((len(panels), 1)), truth.days,
                     ConvergenceReport(0, True))
    assert explained_variance(flat, panels) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        explained_variance(flat, [DayPanel(0, [0.5], [0.5], [1.0])])


def test_ev_nondecreasing_with_warm_start():
    truth, rng = _truth(L=3, seed=5)
    panels = _panels(truth, rng, noise=0.05)
    prev, evs = None, []
    for L in range(4):
        prev = fit(panels, L, BASIS, init=prev)
        evs.append(explained_variance(prev, panels))
    assert all(b >= a - 1e-12 for a, b in zip(evs, evs[1:]))


def test_preconditions():
    truth, rng = _truth()
    panels = _panels(truth, rng, n=3)
    with pytest.raises(ValueError, match="observations"):
        fit(panels, 2, BASIS)
    with pytest.raises(ValueError, match="days"):
        fit(_panels(truth, rng)[:3], 2, BASIS)
    with pytest.raises(ValueError):
        DayPanel(0, [1.5], [0.2], [0.1])


def test_panels_and_model_roundtrip(tmp_path):
    truth, rng = _truth(T=6)
    panels = _panels(truth, rng, n=5)
    write_panels(tmp_path / "p.csv", panels, ["seed=1"])
    back = read_panels(tmp_path / "p.csv")
    assert [p.t for p in back] == [p.t for p in panels]
    np.testing.assert_array_equal(back[2].y, panels[2].y)
    truth.save(tmp_path / "m.json", header={"seed": 1})
    again = DsfmModel.load(tmp_path / "m.json")
    np.testing.assert_array_equal(again.A, truth.A)
    assert again.basis == truth.basis
