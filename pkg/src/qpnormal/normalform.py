"""Normal-form iteration: repeated homological solves and Ad-conjugations.

One step maps H_n = J.N + Z_n + V_n(nu t) to H_{n+1} = e^{-iG} H_n e^{iG}
+ int_0^1 e^{-iGs} (nu.dG) e^{iGs} ds. With the homological identity
-i ad_G(J.N) = Z_new - V_solved - nu.dG the new remainder is

    V_{n+1} = [Ad(Z_n + V_n) - (Z_n + V_n)] + [Phi(Z_new - V_solved) - (Z_new - V_solved)] + V_uv

where Ad(X) = sum_p (-i)^p/p! ad_G^p X and Phi(X) = sum_p (-i)^p/(p+1)! ad_G^p X,
so J.N itself is never commuted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import opalg
from .errors import ConvergenceError, QPError, RegimeError
from .homological import fast_cutoffs, solve_hom_ff, solve_hom_inv, solve_hom_obs
from .opalg import ad_series, guard_ratio, norm_kappa, norm_kappa_rho

TRACE_COLUMNS = ("n", "kappa_n", "rho_n", "norm_V", "norm_Z", "norm_G",
                 "divisor_min", "trunc_residual")


@dataclass
class Schedule:
    n_steps: int
    kappa_seq: list
    rho_seq: list
    regime: str
    variant: str
    param: float
    paper_steps: int
    constants: dict = field(default_factory=dict)

    def sigma(self, n):
        """delta_n = (rho_n - rho_{n+1}) / 2, the analyticity loss of step n."""
        return 0.5 * (self.rho_seq[n] - self.rho_seq[n + 1])

    def eps_targets(self, norm_V0):
        if self.regime == "small":
            return [math.exp(-n) * norm_V0 for n in range(self.n_steps + 1)]
        tw = self.constants["tau_omega"]
        return [math.exp(-(n - 1)) * self.param ** (-1 / (4 * tw)) * norm_V0
                for n in range(self.n_steps + 1)]


def make_schedule(kappa, rho, r, max_norm0, regime="small", variant="inv", epsilon=None,
                  lam=None, tau=None, tau_J=None, tau_omega=None, override_steps=None):
    if regime == "small":
        if epsilon is None or not 0 < epsilon < 1:
            raise RegimeError("small regime needs 0 < epsilon < 1")
        if tau is None:
            raise RegimeError("small regime needs the Diophantine exponent tau")
        bb = 1.0 / (4 * (tau + r + 2))
        paper = math.floor(epsilon ** (-2 * bb) if variant == "inv" else epsilon ** (-bb))
        param = float(epsilon)
        consts = {"b_exp": bb}
    elif regime == "fast":
        if lam is None or lam <= 1:
            raise RegimeError("fast regime needs lambda > 1")
        if tau_J is None or tau_omega is None:
            raise RegimeError("fast regime needs tau_J and tau_omega")
        beta = 1.0 / (16 * tau_omega * (tau_J + r + 2))
        paper = math.floor(lam ** (2 * beta) if variant == "inv" else lam ** beta)
        param = float(lam)
        consts = {"beta": beta, "tau_omega": tau_omega, "tau_J": tau_J}
    else:
        raise RegimeError(f"unknown regime {regime!r}")
    if variant not in ("inv", "obs"):
        raise RegimeError(f"unknown variant {variant!r}")
    n = paper if override_steps is None else int(override_steps)
    if n < 1:
        raise RegimeError(f"schedule has {n} steps (paper formula gives {paper}); "
                          "pass an explicit step override")
    k0 = min(kappa, rho)
    c = 8 * r * max_norm0
    r0 = 2 * k0 / (c + 1)
    b = 1.0 / (2 * n)
    ks = [k0 * math.sqrt(1 - b * j) for j in range(n + 1)]
    rs = [r0 * math.sqrt(1 - b * j) for j in range(n + 1)]
    consts.update({"c": c, "kappa0": k0, "rho0": r0, "b": b,
                   "kappa_star": k0 / math.sqrt(2),
                   "rho_star": k0 / (8 * math.sqrt(2) * r * max_norm0) if max_norm0 else math.inf})
    return Schedule(n, ks, rs, regime, variant, param, paper, consts)


@dataclass
class NormalFormOutput:
    Z: object
    V_res: object
    generators: list
    H_eff: object
    trace: list
    variant: str
    regime: str
    nu: np.ndarray
    family: object
    schedule: Schedule
    best_step: int
    error: str | None = None
    stopped_early: bool = False
    truncation: float = 0.0

    def trace_rows(self):
        return [tuple(rec.get(c, float("nan")) for c in TRACE_COLUMNS) for rec in self.trace]


def _ad_sign():
    return -opalg._CONVENTION.sign


def normal_form_step(family, Z, V, nu, schedule, n, tol=1e-12, lmax=None, guard="report",
                     eta=0.99, cert=None, fast=None, max_support=None, max_order=80):
    """One iteration. Returns (Z_new, V_new, G, record)."""
    kn, rn = schedule.kappa_seq[n], schedule.rho_seq[n]
    k1, r1 = schedule.kappa_seq[n + 1], schedule.rho_seq[n + 1]
    rec = {"n": n, "kappa_n": kn, "rho_n": rn, "norm_V": norm_kappa_rho(V, kn, rn),
           "norm_Z": norm_kappa(Z, kn)}
    if not V.terms:
        rec.update(norm_G=0.0, divisor_min=float("nan"), trunc_residual=0.0, guard_ratio=0.0,
                   orders=0)
        return Z, V, V.like({}), rec
    leftover = None
    if schedule.regime == "fast":
        sol, leftover = solve_hom_ff(V, family, schedule.param, fast["omega"], fast["K_cut"],
                                     fast["L_cut"], fast["gamma_omega"], fast.get("gamma_J"),
                                     fast.get("tau_J"), variant=schedule.variant,
                                     check=False, residual=False)
        V_solved = sol.P_solved
    else:
        solver = solve_hom_inv if schedule.variant == "inv" else solve_hom_obs
        sol = solver(V, family, nu, cert=cert, check=False, residual=False)
        V_solved = V
    G, Znew = sol.G, sol.Z
    sigma = schedule.sigma(n)
    ratio = guard_ratio(G, k1, sigma, r1)
    rec.update(norm_G=norm_kappa_rho(G, kn, rn), divisor_min=sol.divisor_min,
               guard_ratio=ratio)
    if guard == "strict" and ratio > eta:
        raise ConvergenceError(f"step {n}: convergence guard ratio {ratio:.3e} > {eta}",
                               ratio=ratio)
    s = _ad_sign() * 1j
    A = Z + V
    Bq = Znew - V_solved
    ad1, i1 = ad_series(G, A, lambda p: s ** p / math.factorial(p), k1, r1, tol, max_order,
                        lmax, max_support)
    ad2, i2 = ad_series(G, Bq, lambda p: s ** p / math.factorial(p + 1), k1, r1, tol,
                        max_order, lmax, max_support)
    Vn = ad1 + ad2
    if leftover is not None and leftover.terms:
        Vn = Vn + leftover
    Vn.hermitian = True
    Zn = Z + Znew
    Zn.hermitian = True
    rec.update(trunc_residual=i1.truncation + i2.truncation, orders=max(i1.orders, i2.orders))
    return Zn, Vn, G, rec


def run_normal_form(family, V, omega, schedule, tol=1e-12, lmax=None, guard="report",
                    eta=0.99, cert=None, fast=None, max_support=None, early_stop=True,
                    max_order=80):
    """Iterate `schedule.n_steps` steps; stops early when ||V^(n)|| stops decreasing.

    Errors inside a step are caught: the output then holds the state before the
    failing step and `error` carries the message.
    """
    omega = np.asarray(omega, dtype=float)
    nu = omega * (schedule.param if schedule.regime == "fast" else 1.0)
    if schedule.regime == "fast" and fast is None:
        raise RegimeError("fast regime needs cutoff parameters")
    if fast is not None:
        fast = dict(fast)
        fast["omega"] = omega
    Z = V.like({}, hermitian=True).static_part()
    gens, trace = [], []
    error, stopped = None, False
    cur_V, cur_Z = V, Z
    total_trunc = 0.0
    best = 0
    for n in range(schedule.n_steps):
        try:
            Zn, Vn, G, rec = normal_form_step(family, cur_Z, cur_V, nu, schedule, n, tol, lmax,
                                              guard, eta, cert, fast, max_support, max_order)
        except QPError as exc:
            error = f"step {n}: {exc}"
            trace.append({"n": n, "kappa_n": schedule.kappa_seq[n], "rho_n": schedule.rho_seq[n],
                          "norm_V": norm_kappa_rho(cur_V, schedule.kappa_seq[n], schedule.rho_seq[n]),
                          "norm_Z": norm_kappa(cur_Z, schedule.kappa_seq[n])})
            break
        new_norm = norm_kappa_rho(Vn, schedule.kappa_seq[n + 1], schedule.rho_seq[n + 1])
        if early_stop and new_norm > rec["norm_V"]:
            rec["rejected"] = True
            trace.append(rec)
            stopped = True
            break
        trace.append(rec)
        gens.append(G)
        total_trunc += rec["trunc_residual"]
        cur_Z, cur_V = Zn, Vn
        best = n + 1
    if error is None and not stopped:
        k, r = schedule.kappa_seq[best], schedule.rho_seq[best]
        trace.append({"n": best, "kappa_n": k, "rho_n": r,
                      "norm_V": norm_kappa_rho(cur_V, k, r), "norm_Z": norm_kappa(cur_Z, k)})
    H_eff = family.h0(V.m) + cur_Z if schedule.variant == "obs" else None
    if H_eff is not None:
        H_eff.hermitian = True
    return NormalFormOutput(cur_Z, cur_V, gens, H_eff, trace, schedule.variant, schedule.regime,
                            nu, family, schedule, best, error, stopped, total_trunc)


def apply_frame(generators, P, phi=None, tol=1e-13, lmax=None, max_order=80):
    """Y P Y* with Y = e^{-iG_{n-1}} ... e^{-iG_0}; at a torus point if phi is given."""
    out = P.at(phi) if phi is not None else P
    s = _ad_sign() * 1j
    for G in generators:
        Gx = G.at(phi) if phi is not None else G
        rest, _ = ad_series(Gx, out, lambda p: s ** p / math.factorial(p), 0.0, 0.0, tol,
                            max_order, lmax)
        out = out + rest
    return out


def fast_params(lam, omega, J, gamma_omega, tau_omega, gamma_J=None, tau_J=None):
    K, L = fast_cutoffs(lam, gamma_omega, tau_omega, J)
    return {"K_cut": K, "L_cut": L, "gamma_omega": gamma_omega, "tau_omega": tau_omega,
            "gamma_J": gamma_J, "tau_J": tau_J, "omega": np.asarray(omega, dtype=float)}
