import itertools

import numpy as np
import pytest

from qpnormal.errors import DomainError, InvariantError, ResonanceError
from qpnormal.models import (N_DN, N_UP, SX, HubbardSpec, IsingSpec, build_custom,
                             build_hubbard_1d, build_ising, first_order_zeff_hubbard,
                             hop_matrix, ising_custom_config, ising_h0_literal,
                             jw_annihilators, occupation_basis_index, selection_table)
from qpnormal.opalg import NumberFamily, QPOperator, check_strong_locality, double_bracket, to_dense

from _util import ISING_H, ISING_J, OMEGA, commutator_norm, hubbard, ising


def test_ising_h0_matches_literal():
    spec, fam, _ = ising(modes={})
    h0 = to_dense(fam.h0())
    assert np.abs(h0 - ising_h0_literal(spec)).max() < 1e-12


def test_ising_spectrum_brute_force():
    spec, fam, _ = ising(modes={})
    ev = np.sort(np.linalg.eigvalsh(to_dense(fam.h0())))
    brute = []
    for s in itertools.product((1, -1), repeat=6):
        e = -ISING_J * sum(s[i] * s[(i + 1) % 6] for i in range(6))
        e -= sum(ISING_H[i % 3] * s[i] for i in range(6))
        brute.append(e)
    assert np.allclose(ev, np.sort(brute), atol=1e-12)


def test_ising_all_up_domain_walls():
    _, fam, _ = ising()
    assert to_dense(fam.operators[3])[0, 0] == pytest.approx(6.0)


@pytest.mark.parametrize("L", [1, 2])
def test_ising_family_checks(L):
    _, fam, V = ising(L=L)
    assert fam.validate()
    assert check_strong_locality(V, fam).ok
    if L == 1:
        Ns = [to_dense(N) for N in fam.operators]
        for a, b in itertools.combinations(Ns, 2):
            assert commutator_norm(a, b) == 0


def test_ising_drive_hermitian():
    rng = np.random.default_rng(0)
    _, fam, V = ising()
    for _ in range(5):
        h = to_dense(fam.h0(2) + V, rng.uniform(0, 2 * np.pi, 2))
        assert np.abs(h - h.conj().T).max() < 1e-12


def test_ising_rejects_bad_input():
    with pytest.raises(DomainError):
        build_ising(IsingSpec(L=0))
    with pytest.raises(DomainError):
        build_ising(IsingSpec(L=1, drive_modes={(1,): 1.0, (-1,): 0.5}))


def test_jw_anticommutation():
    a = jw_annihilators(8)  # 4 sites x 2 spins
    eye = np.eye(a[0].shape[0])
    for i, j in itertools.product(range(8), repeat=2):
        ac = a[i] @ a[j].conj().T + a[j].conj().T @ a[i]
        assert np.abs(ac - (eye if i == j else 0)).max() < 1e-12
        assert np.abs(a[i] @ a[j] + a[j] @ a[i]).max() < 1e-12


def test_hubbard_counts_two_sites():
    spec = HubbardSpec(L=2, r=2, J=(1.0, 0.5), hopping_modes={(0,): 1.0}, m=1)
    fam, _ = build_hubbard_1d(spec)
    idx = occupation_basis_index([(1, 0), (0, 1)])
    vals = [to_dense(N)[idx, idx].real for N in fam.operators]
    assert vals == [1.0, 0.0]


def test_hubbard_numbers_diagonal_and_conserved():
    _, fam, V = hubbard(L=3)
    assert fam.diagonal
    h0 = to_dense(fam.h0())
    for N in fam.operators:
        n = to_dense(N)
        assert np.count_nonzero(n - np.diag(np.diag(n))) == 0
        assert commutator_norm(h0, n) == 0
    assert check_strong_locality(V, fam).ok


def test_hubbard_rejects_2d():
    with pytest.raises(DomainError):
        build_hubbard_1d(HubbardSpec(L=3, d=2))


def test_selection_table():
    spec = HubbardSpec(L=3, r=2, J=(1.0, 1.0), hopping_modes={(0,): 1.0}, m=1)
    occ = [(1, 1), (1, 0), (0, 1)]
    rows = selection_table(spec, occ)
    assert rows
    fam, _ = build_hubbard_1d(spec)
    Ns = [np.real(np.diag(to_dense(N))) for N in fam.operators]
    i0 = occupation_basis_index(occ)
    for r in rows:
        new = [list(o) for o in occ]
        s = "ud".index(r["spin"])
        new[r["from"]][s], new[r["to"]][s] = 0, 1
        i1 = occupation_basis_index(new)
        assert r["dN"] == tuple(int(N[i1] - N[i0]) for N in Ns)
        assert r["resonant"] == (sum(r["dN"]) == 0)


def _dense_zeff_oracle(spec, omega):
    """Z^(1) by brute force on the full space: grade each hop with the dense
    diagonal N and weight every (k, l) piece."""
    fam, V = build_hubbard_1d(spec)
    n = spec.L
    Ns = [np.real(np.diag(to_dense(N))) for N in fam.operators]
    E = tuple(range(n))
    dim = 4 ** n
    Z = np.zeros((dim, dim), dtype=complex)
    J = np.asarray(spec.J)
    for x in range(n - 1):
        y = x + 1
        for s in (0, 1):
            h = hop_matrix(x, y, s, E)
            for X in (h, h.conj().T):
                rows, cols = np.nonzero(X)
                for l, v in spec.hopping_modes.items():
                    for i, j in zip(rows, cols):
                        k = np.array([N[i] - N[j] for N in Ns])
                        jk = float(J @ k)
                        if not any(l) and not k.any():
                            c = 1.0
                        elif not k.any():
                            continue
                        else:
                            c = jk / (float(np.dot(omega, l)) + jk)
                        Z[i, j] += spec.epsilon * c * v * X[i, j]
    return Z


def test_zeff_two_site_hand_formula():
    spec = HubbardSpec(L=2, r=1, J=(0.8,), hopping_modes={(1,): 0.5, (-1,): 0.5}, m=1)
    w = np.array([1.9])
    Z = to_dense(first_order_zeff_hubbard(spec, w))
    assert np.abs(Z - _dense_zeff_oracle(spec, w)).max() < 1e-12
    # one explicit element: up hop 1 -> 0 with a down at 1 creates a pair, k = +1
    i = occupation_basis_index([(0, 0), (1, 1)])
    j = occupation_basis_index([(1, 0), (0, 1)])
    h = to_dense(QPOperator.from_terms(build_hubbard_1d(spec)[0].lattice, 1, 4,
                                       [((0, 1), (0,), hop_matrix(0, 1, 0, (0, 1)))]))
    c = 0.8 / (1.9 + 0.8) * 0.5 + 0.8 / (-1.9 + 0.8) * 0.5
    assert Z[j, i] == pytest.approx(spec.epsilon * c * h[j, i], abs=1e-14)


def test_zeff_static_reduces_to_average():
    spec = HubbardSpec(L=3, r=1, J=(1.0,), hopping_modes={(0,): 1.0}, m=1)
    fam, V = build_hubbard_1d(spec)
    from qpnormal.opalg import average
    Z = first_order_zeff_hubbard(spec, np.array([1.3]))
    # at l = 0 every weight J.k / (0 + J.k) is 1: Z is the drive itself, and its
    # k = 0 part (the projector line) is the plain average
    assert np.abs(to_dense(Z) - to_dense(V)).max() < 1e-12
    assert np.abs(to_dense(average(Z, fam)) - to_dense(average(V, fam))).max() < 1e-12
    assert average(V, fam).terms


def test_zeff_matches_double_bracket():
    spec, fam, V = hubbard(L=3)
    w = np.array([np.sqrt(3)])
    Z = to_dense(first_order_zeff_hubbard(spec, w))
    assert np.abs(Z - to_dense(double_bracket(V, fam, omega=w))).max() < 1e-10
    assert np.abs(Z - _dense_zeff_oracle(spec, w)).max() < 1e-12


def test_zeff_resonance():
    spec = HubbardSpec(L=2, r=1, J=(1.0,), hopping_modes={(1,): 0.5, (-1,): 0.5}, m=1)
    with pytest.raises(ResonanceError):
        first_order_zeff_hubbard(spec, np.array([1.0]))


def test_custom_roundtrip_ising():
    rng = np.random.default_rng(1)
    spec, fam, V = ising()
    fam2, V2 = build_custom(ising_custom_config(spec))
    for _ in range(5):
        phi = rng.uniform(0, 2 * np.pi, 2)
        a = to_dense(fam.h0(2) + V, phi)
        b = to_dense(fam2.h0(2) + V2, phi)
        assert np.abs(a - b).max() < 1e-14


def test_custom_rejects_weak_locality():
    spec, _, _ = ising()
    cfg = ising_custom_config(spec)
    for d in cfg["drive"]:
        d["sites"] = d["eff"]
    with pytest.raises(InvariantError, match="strong locality"):
        build_custom(cfg)


def test_custom_empty_drive():
    spec, _, _ = ising()
    cfg = ising_custom_config(spec)
    cfg["drive"] = []
    fam, V = build_custom(cfg)
    assert not V.terms
