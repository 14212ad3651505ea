import math

import numpy as np
import pytest

from pdmkin import (
    InfeasibleFitError,
    KinematicMap,
    PDMSample,
    SingularReductionError,
    SOSModel,
    TerrainModel,
    TrackSpeeds,
    BodyVelocity,
    extract_kinematic_map,
    fit_sos,
    flipper_preset,
    sample_pdm,
)
from pdmkin.reduction import (
    _psd_least_squares,
    _to_vector,
    _upper_pairs,
    default_input_grid,
    monomial_exponents,
    monomial_label,
    probe_velocities,
)

K_TRUE = np.array([[0.5, 0.5], [0.02, -0.01], [1.9, -1.8]])
Q_TRUE = np.array([[2.0, 0.1, 0.0], [0.1, 1.0, 0.2], [0.0, 0.2, 0.05]])
R_TRUE = np.array([[0.3, 0.1], [0.1, 0.4]])


def synthetic_D(q, u):
    e = np.asarray(q) - K_TRUE @ np.asarray(u)
    return float(e @ Q_TRUE @ e + np.asarray(u) @ R_TRUE @ np.asarray(u))


def synthetic_samples(step=0.25):
    samples = []
    for u in default_input_grid(-0.5, 0.5, step):
        v = K_TRUE @ np.array(u)
        probes = [(tuple(p), synthetic_D(p, u)) for p in probe_velocities(v, u, 0.135)]
        samples.append(PDMSample(u, BodyVelocity(*v), synthetic_D(v, u), True, tuple(probes)))
    return samples


class TestBasis:
    @pytest.mark.parametrize("k", [0, 1, 2, 3])
    def test_size_is_binomial(self, k):
        assert len(monomial_exponents(k)) == math.comb(5 + k, k)

    def test_order_one_labels(self):
        labels = [monomial_label(e) for e in monomial_exponents(1)]
        assert labels == ["1", "xdot", "ydot", "thetadot", "Sr", "Sl"]

    def test_degree_two_includes_cross_terms(self):
        labels = {monomial_label(e) for e in monomial_exponents(2)}
        assert {"xdot*ydot", "xdot*thetadot", "xdot^2", "Sr*Sl"} <= labels


class TestSyntheticRecovery:
    def test_fit_recovers_known_map(self):
        model = fit_sos(synthetic_samples())
        kin = extract_kinematic_map(model)
        assert kin.K == pytest.approx(K_TRUE, abs=1e-8)
        assert kin.offset == pytest.approx(np.zeros(3), abs=1e-8)
        assert model.stationarity_residual < 1e-8
        assert model.min_eigenvalue > -1e-9

    def test_fit_recovers_coefficients(self):
        model = fit_sos(synthetic_samples())
        A = model.coeff_A
        assert A[1:4, 1:4] == pytest.approx(Q_TRUE, abs=1e-7)
        assert A[1:4, 4:] == pytest.approx(-Q_TRUE @ K_TRUE, abs=1e-7)
        assert model.evaluate((0.1, 0.0, 0.3), (0.2, 0.1)) == pytest.approx(
            synthetic_D((0.1, 0.0, 0.3), (0.2, 0.1)), abs=1e-9
        )

    def test_stationary_at_samples(self):
        model = fit_sos(synthetic_samples())
        u = (0.25, -0.5)
        assert model.velocity_gradient(K_TRUE @ np.array(u), u) == pytest.approx(np.zeros(3), abs=1e-8)

    def test_turning_coefficient_property(self):
        kin = KinematicMap(K_TRUE)
        assert kin.turning_coefficient == pytest.approx(1.85)
        assert kin.apply((0.5, 0.3)) == pytest.approx(tuple(K_TRUE @ [0.5, 0.3]))


class TestPSDProjection:
    def test_matches_eigenvalue_clipping(self):
        rng = np.random.default_rng(7)
        M = rng.normal(size=(4, 4))
        M = 0.5 * (M + M.T)
        pairs = _upper_pairs(4)
        weight = np.sqrt([1.0 if i == j else 2.0 for i, j in pairs])
        # |A - M|_F^2 in upper-triangular coordinates
        A = _psd_least_squares(np.diag(weight), weight * _to_vector(M, pairs), 4, pairs)
        w, V = np.linalg.eigh(M)
        expected = (V * np.clip(w, 0, None)) @ V.T
        assert A == pytest.approx(expected, abs=1e-8)
        assert np.linalg.eigvalsh(A).min() > -1e-10


class TestFitErrors:
    def test_too_few_samples(self):
        with pytest.raises(ValueError, match="need at least 21"):
            fit_sos(synthetic_samples()[:10])

    def test_degenerate_inputs_excluded(self):
        zero = [s for s in synthetic_samples() if s.u == (0.0, 0.0)]
        assert zero
        n = len([s for s in synthetic_samples() if s.u != (0.0, 0.0)])
        assert fit_sos(synthetic_samples()).n_samples == n

    def test_rank_deficient_inputs(self):
        samples = [
            PDMSample(TrackSpeeds(s, s), BodyVelocity(s, 0, 0), 0.0) for s in np.linspace(0.05, 0.5, 30)
        ]
        with pytest.raises(ValueError, match="do not span"):
            fit_sos(samples)

    def test_infeasible_when_tolerance_unreachable(self):
        noisy = [
            PDMSample(s.u, BodyVelocity(*(np.array(s.v_star) + 0.01 * i % 3)), s.objective, True, s.probes)
            for i, s in enumerate(synthetic_samples())
        ]
        with pytest.raises(InfeasibleFitError, match="stationarity residual"):
            fit_sos(noisy, residual_tol=1e-12)

    def test_singular_velocity_block(self):
        model = SOSModel(1, np.zeros((6, 6)), tuple(monomial_exponents(1)))
        with pytest.raises(SingularReductionError):
            extract_kinematic_map(model)

    def test_higher_order_not_extracted(self):
        model = SOSModel(2, np.eye(21), tuple(monomial_exponents(2)))
        with pytest.raises(ValueError, match="order-1"):
            extract_kinematic_map(model)


class TestPipeline:
    def test_flat_reduction_matches_solver(self, flat_reduction):
        samples, model, kin, elapsed = flat_reduction
        worst = max(
            np.max(np.abs(np.array(kin.apply(s.u)) - np.array(s.v_star))) for s in samples
        )
        assert worst < 1e-5
        assert elapsed < 60

    def test_grouser_reduction_matches_solver(self, grouser_reduction):
        samples, _, kin, _ = grouser_reduction
        worst = max(
            np.max(np.abs(np.array(kin.apply(s.u)) - np.array(s.v_star))) for s in samples
        )
        assert worst < 1e-5

    def test_default_grid(self):
        grid = default_input_grid()
        assert len(grid) == 121
        assert grid[0] == (-0.5, -0.5) and grid[-1] == (0.5, 0.5)

    def test_held_out_grid_gives_same_map(self, flat_reduction, flipper):
        shifted = [TrackSpeeds(sr + 0.05, sl - 0.05) for sr, sl in default_input_grid(-0.4, 0.4, 0.2)]
        kin = extract_kinematic_map(fit_sos(sample_pdm(flipper, TerrainModel.flat_smooth(), shifted)))
        assert kin.K == pytest.approx(flat_reduction[2].K, abs=1e-5)

    def test_threads_do_not_change_samples(self, flipper, monkeypatch):
        grid = default_input_grid(-0.5, 0.5, 0.5)
        serial = sample_pdm(flipper, TerrainModel.flat_smooth(), grid)
        monkeypatch.setenv("PDMKIN_THREADS", "3")
        threaded = sample_pdm(flipper, TerrainModel.flat_smooth(), grid)
        assert serial == threaded

    def test_probes_bracket_minimum(self, flat_reduction):
        sample = flat_reduction[0][17]
        assert all(value >= sample.objective for _, value in sample.probes)
        assert len(sample.probes) == 12


def test_flipper_sample_count():
    grid = default_input_grid(-0.5, 0.5, 0.25)
    assert len(grid) == 25
    assert flipper_preset().half_spacing == 0.135
