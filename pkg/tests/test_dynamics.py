import math

import numpy as np
import pytest
from scipy.linalg import expm

from qpnormal.dynamics import (DenseModel, _finish, compare_effective, conjugacy_check,
                               default_dt, drift_curve, frame_unitary, lieb_robinson_probe,
                               propagate, self_convergence, spectral_norm)
from qpnormal.errors import DomainError, InvariantError, ResourceError
from qpnormal.lattice import Lattice
from qpnormal.models import SX, SZ
from qpnormal.normalform import make_schedule, run_normal_form
from qpnormal.opalg import CAP_ENV, NumberFamily, QPOperator, site_operator, to_dense, to_sparse

from _util import OMEGA, ising

SP = np.array([[0, 1], [0, 0]], dtype=complex)


def ising_model(eps=0.05, modes=None):
    spec, fam, V = ising(eps=eps, modes=modes)
    return fam, V, DenseModel.from_ops([fam.h0(2), V], OMEGA)


def test_zero_drive_closed_form():
    fam, _, model = ising_model(modes={})
    assert model.is_static()
    tr = propagate(model, 2.0, 0.1, snapshot_every=5)
    d = np.real(np.diagonal(to_dense(fam.h0())))
    for t, U in zip(tr.t_grid, tr.U_snapshots):
        assert np.abs(U - np.diag(np.exp(-1j * d * t))).max() < 1e-13
    assert np.array_equal(tr.U_snapshots[0], np.eye(64))


def test_static_nondiagonal():
    lat = Lattice.segment(3)
    H = site_operator(lat, 2, SX, [0]) + site_operator(lat, 2, SZ, [1]) * 0.5
    model = DenseModel.from_ops([H], [])
    tr = propagate(model, 1.0, 0.25, snapshot_every=2)
    for t, U in zip(tr.t_grid, tr.U_snapshots):
        assert np.abs(U - expm(-1j * t * to_dense(H))).max() < 1e-12


@pytest.mark.parametrize("method,order", [("midpoint", 2), ("magnus4", 4)])
def test_self_convergence_order(method, order):
    fam, _, model = ising_model()
    O = to_dense(site_operator(fam.lattice, 2, SZ, [0]))
    ratio = self_convergence(model, 1.0, 0.05, O, method)
    assert ratio == pytest.approx(2 ** order, rel=0.2)


def test_times_reached_exactly():
    _, _, model = ising_model()
    tr = propagate(model, 1.0, 0.1, times=[0.05, 0.37, 1.0])
    assert list(tr.t_grid) == [0.0, 0.05, 0.37, 1.0]
    ref = propagate(model, 0.37, 0.37 / 40, snapshot_every=40).U_snapshots[-1]
    assert np.abs(tr.U_snapshots[2] - ref).max() < 1e-3


def test_propagate_errors(monkeypatch):
    _, _, model = ising_model()
    with pytest.raises(DomainError):
        propagate(model, 1.0, 0.0)
    with pytest.raises(DomainError):
        propagate(model, 1.0, 0.1, method="euler")
    monkeypatch.setenv(CAP_ENV, "16")
    with pytest.raises(ResourceError):
        propagate(model, 1.0, 0.1)


def test_unitarity_guard():
    bad = [np.eye(2), 1.01 * np.eye(2)]
    with pytest.raises(InvariantError, match="unitarity"):
        _finish([0.0, 1.0], bad, "midpoint", 0.1)


def test_default_dt():
    _, fam, _ = ising()
    expect = 0.1 / (float(np.abs(fam.J).sum()) * 4 * fam.max_norm0() * 6 + (1 + math.sqrt(2)) * 8)
    assert default_dt(fam, OMEGA, 8, 6) == pytest.approx(min(0.01, expect))
    assert default_dt(fam, 200 * OMEGA, 8, 6) < default_dt(fam, OMEGA, 8, 6)


def test_spectral_norm_paths():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(40, 40))
    X = X + X.T
    assert spectral_norm(X, hermitian=True) == pytest.approx(np.linalg.norm(X, 2))
    import scipy.sparse as sp
    assert spectral_norm(sp.csr_matrix(X), hermitian=True) == pytest.approx(np.linalg.norm(X, 2),
                                                                           rel=1e-8)


# ------------------------------------------------------------------ drift

def test_drift_zero_epsilon():
    fam, _, model = ising_model(eps=0.0)
    tr = propagate(model, 3.0, 0.05, snapshot_every=10)
    dc = drift_curve(tr, fam, 0.0)
    assert np.abs(dc.values).max() < 1e-12
    assert dc.rows()[0] == (0.0, 1, 0.0)


def test_drift_starts_at_zero_and_grows():
    fam, _, model = ising_model()
    tr = propagate(model, 3.0, 0.02, snapshot_every=25)
    dc = drift_curve(tr, fam, 0.05)
    assert np.all(dc.values[0] == 0)
    assert np.all(dc.values >= 0)
    assert dc.values[1:].max() > 0
    assert len(dc.rows()) == dc.values.size


# ---------------------------------------------------------------- compare

def test_compare_static_exact():
    fam, _, model = ising_model(modes={})
    tr = propagate(model, 2.0, 0.1, snapshot_every=4)
    O = to_dense(site_operator(fam.lattice, 2, SX, [2]))
    err = compare_effective(tr, model.static, O)
    assert err.max() < 1e-12


def test_compare_identity_observable():
    _, _, model = ising_model()
    tr = propagate(model, 1.0, 0.05, snapshot_every=5)
    err = compare_effective(tr, model.static, np.eye(model.dim))
    assert err.max() < 1e-12


# --------------------------------------------------------------- conjugacy

def _toy_step():
    lat = Lattice.segment(1)
    N = QPOperator.from_terms(lat, 1, 2, [((0,), (0,), SZ)], hermitian=True)
    fam = NumberFamily([N], [0.7])
    V = QPOperator.from_terms(lat, 1, 2, [((0,), (1,), 0.1 * SP), ((0,), (-1,), 0.1 * SP.T)],
                              hermitian=True)
    sch = make_schedule(1.0, 1.0, 1, 1.0, "small", "inv", epsilon=0.1, tau=1.0, override_steps=1)
    out = run_normal_form(fam, V, [1.3], sch, tol=1e-15)
    H = DenseModel.from_ops([fam.h0(), V], [1.3])
    Hnf = DenseModel.from_ops([fam.h0(), out.Z, out.V_res], [1.3])
    return H, Hnf, out


def test_conjugacy_zero_generators():
    _, _, model = ising_model()
    dev, devs, grid = conjugacy_check(model, model, [], OMEGA, np.linspace(0, 1, 5), 0.01)
    assert dev == 0.0


def test_conjugacy_one_step_toy():
    H, Hnf, out = _toy_step()
    grid = np.linspace(0, 5, 11)
    dev, _, _ = conjugacy_check(H, Hnf, out.generators, np.array([1.3]), grid, 1e-3)
    assert dev <= 1e-6
    bad = [out.generators[0] * 1.2]
    dev_bad, _, _ = conjugacy_check(H, Hnf, bad, np.array([1.3]), grid, 1e-3)
    assert dev_bad > 100 * max(dev, 1e-9)


def test_frame_unitary_product():
    _, _, out = _toy_step()
    G = out.generators[0]
    Y = frame_unitary([G, G], [0.4])
    E = expm(-1j * to_dense(G, [0.4]))
    assert np.abs(Y - E @ E).max() < 1e-13


# ---------------------------------------------------------- Lieb-Robinson

def _lr_setup():
    _, fam, _ = ising(modes={}, m=0)
    lat = fam.lattice
    Z = fam.h0() + QPOperator.from_terms(lat, 0, 2, [((i,), (), 0.7 * SX) for i in range(6)],
                                         hermitian=True)
    A = to_sparse(site_operator(lat, 2, SX, [0]))
    Bs = [(d, to_sparse(site_operator(lat, 2, SZ, [d])), 1) for d in (1, 2, 3)]
    return lat, Z, A, Bs


def test_lr_initial_time_zero():
    _, Z, A, Bs = _lr_setup()
    tab = lieb_robinson_probe(Z, A, 1, Bs, [0.0, 0.5], kappa=1.0)
    for row in tab.rows:
        if row.t == 0:
            assert row.measured < 1e-12
    assert tab.valid


def test_lr_zero_generator_constant():
    lat, _, A, _ = _lr_setup()
    Z0 = QPOperator.zero(lat, 0, 2)
    B = to_sparse(site_operator(lat, 2, SZ, [0]))
    tab = lieb_robinson_probe(Z0, A, 1, [(0, B, 1)], [0.0, 1.0, 3.0], kappa=1.0)
    vals = [r.measured for r in tab.rows]
    assert vals[0] == pytest.approx(2.0) and np.allclose(vals, vals[0])


def test_lr_decay_in_distance():
    _, Z, A, Bs = _lr_setup()
    tab = lieb_robinson_probe(Z, A, 1, Bs, [0.8], kappa=1.0)
    meas = [r.measured for r in tab.rows]
    assert meas[0] > meas[1] > meas[2]
    assert tab.valid and tab.C_fit >= 0
