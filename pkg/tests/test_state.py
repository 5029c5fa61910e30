import itertools

import numpy as np
import pytest
from scipy.special import betaln, comb

from fvclust.basis import BasisConfig, default_knots
from fvclust.errors import ValidationError
from fvclust.rand import RngStream
from fvclust.state import (ChainState, ClusterParams, Hyperparams, StickState, draw_from_base_measure,
                           log_prior_gamma, stick_weights)


def test_stick_weights_examples():
    np.testing.assert_allclose(stick_weights([0.5, 0.5, 1.0]), [0.5, 0.25, 0.25])
    np.testing.assert_allclose(stick_weights([1.0, 0.3, 1.0]), [1.0, 0.0, 0.0])


def test_stick_weights_sum_to_one():
    rng = np.random.default_rng(0)
    for _ in range(50):
        V = rng.random(10)
        V[-1] = 1.0
        w = stick_weights(V)
        assert w.sum() == pytest.approx(1.0) and np.all(w >= 0)


def test_stick_state_validation():
    with pytest.raises(ValidationError):
        StickState(np.array([0.5, 0.9]))
    assert StickState(np.array([0.2, 1.0])).weights.sum() == pytest.approx(1.0)


def test_hyperparams_defaults_and_validation():
    h = Hyperparams.default(450, 2, 2)
    assert (h.K, h.nu, h.a, h.b, h.u) == (10, 1.0, 1.0, 1.0, 4.0)
    assert h.tau_shape == 0.5 and h.tau_scale == 225.0
    np.testing.assert_array_equal(h.P, 100 * np.eye(2))
    for bad in ({"K": 0}, {"nu": 0.0}, {"a": -1.0}, {"u": 0.5}):
        with pytest.raises(ValidationError):
            Hyperparams.default(10, 2, 2, **bad)
    back = Hyperparams.from_dict(h.to_dict(), 450, 2, 2)
    assert back.K == h.K and np.array_equal(back.D, h.D)


def test_log_prior_gamma_normalizes():
    # summing the unnormalized mass over every pattern of M+1 free indicators gives B(a, b)
    M, a, b = 3, 1.5, 0.7
    total = 0.0
    for bits in itertools.product([0, 1], repeat=M + 1):
        g = np.array([1, *bits], dtype=bool)
        total += np.exp(log_prior_gamma(g, M, a, b))
    assert total == pytest.approx(np.exp(betaln(a, b)))


def test_log_prior_gamma_uniform_counts():
    # a = b = 1: every count 0..M+1 is equally likely
    M = 4
    mass = [comb(M + 1, c) * np.exp(log_prior_gamma(np.array([1] + [1] * c + [0] * (M + 1 - c), bool), M, 1, 1))
            for c in range(M + 2)]
    np.testing.assert_allclose(mass, mass[0])


def test_log_prior_ignores_constant():
    g = np.array([1, 1, 0, 0], bool)
    h = np.array([0, 1, 0, 0], bool)
    assert log_prior_gamma(g, 2, 1, 1) == log_prior_gamma(h, 2, 1, 1)


def _toy_basis():
    return BasisConfig((np.array([0.3, 0.6]),))


def test_base_measure_draws():
    basis = _toy_basis()
    hyper = Hyperparams.default(100, 0, 0)
    t = np.linspace(0, 1, 50)
    from fvclust.basis import basis_matrix
    F = basis_matrix(t, basis.knots[0])
    G = F.T @ F
    rng = RngStream(1).generator()
    sizes = []
    for _ in range(2000):
        cp = draw_from_base_measure(hyper, basis, G, rng)
        assert cp.gamma_star[0][0] and cp.tau > 0
        assert cp.phi_star.size == cp.gamma_star[0].sum()
        sizes.append(cp.gamma_star[0][1:].sum())
    # a = b = 1: the free count is uniform on 0..3
    freq = np.bincount(sizes, minlength=4) / len(sizes)
    assert np.all(np.abs(freq - 0.25) < 0.04)


def test_base_measure_forced_gamma_covariance():
    basis = _toy_basis()
    hyper = Hyperparams.default(100, 0, 0, tau_shape=50.0, tau_scale=50.0)
    G = np.diag([2.0, 1.0, 1.0, 1.0])
    g = [np.array([1, 0, 0, 0], bool)]
    rng = RngStream(2).generator()
    x = np.array([draw_from_base_measure(hyper, basis, G, rng, g).phi_star[0] for _ in range(20000)])
    # phi | tau ~ N(0, tau / 2), E tau = 50 / 49
    assert x.var() == pytest.approx(50 / 49 / 2, rel=0.05)


def test_cluster_params_validation():
    with pytest.raises(ValidationError):
        ClusterParams([np.array([1, 1, 0], bool)], np.zeros(1), 1.0)
    with pytest.raises(ValidationError):
        ClusterParams([np.array([1, 0, 0], bool)], np.zeros(1), 0.0)


def _state(rng, K=3, P=7, N=6):
    mask = rng.random((K, P)) < 0.5
    mask[:, 0] = True
    phi = np.where(mask, rng.standard_normal((K, P)), 0.0)
    V = np.array([0.4, 0.5, 1.0])
    return ChainState(mask, phi, np.ones(K), V, rng.integers(0, K, N), rng.standard_normal(2),
                      rng.standard_normal((N, 1)), np.eye(1) * 2, rng.standard_normal(20))


def test_snapshot_round_trip(tmp_path):
    st = _state(np.random.default_rng(3))
    st.save(tmp_path / "s.npz", sweep=17)
    back, meta = ChainState.load(tmp_path / "s.npz")
    assert meta["sweep"] == 17
    for f in ChainState._FIELDS:
        np.testing.assert_array_equal(getattr(back, f), getattr(st, f))


def test_snapshot_rejects_foreign(tmp_path):
    np.savez(tmp_path / "x.npz", header=np.frombuffer(b'{"format": "other"}', np.uint8))
    with pytest.raises(ValidationError):
        ChainState.load(tmp_path / "x.npz")


def test_cluster_accessors():
    rng = np.random.default_rng(4)
    st = _state(rng)
    basis = BasisConfig((np.array([0.2, 0.5]), np.array([0.5])))
    cp = st.cluster(1, basis)
    st2 = st.copy()
    st2.phi[1] = 0
    st2.mask[1] = False
    st2.set_cluster(1, cp)
    np.testing.assert_array_equal(st2.phi, st.phi)
    np.testing.assert_array_equal(st2.mask, st.mask)


def test_state_validate():
    rng = np.random.default_rng(5)
    st = _state(rng)
    st.validate()
    bad = st.copy()
    bad.C[0] = 5
    with pytest.raises(ValidationError):
        bad.validate()
    bad = st.copy()
    bad.phi[~bad.mask] = 1.0
    with pytest.raises(ValidationError):
        bad.validate()
    bad = st.copy()
    bad.Psi = -np.eye(1)
    with pytest.raises(ValidationError):
        bad.validate()
