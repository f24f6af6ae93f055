"""Plain-text operator files.

Layout, one item per line::

    qpnormal-operator 1
    lattice {"kind": "ising_ring", ...}
    m 2
    q 2
    hermitian 1
    term S=0,1,2 l=1,0 E=1
    <re> <im> <re> <im> ...        (row-major entries of the local matrix)

Floats are written with repr, so reading back is exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .lattice import Lattice
from .opalg import QPOperator

MAGIC = "qpnormal-operator 1"


def _ints(text):
    return tuple(int(x) for x in text.split(",")) if text else ()


def dumps(A):
    lines = [MAGIC, "lattice " + json.dumps(A.lattice.describe(), sort_keys=True),
             f"m {A.m}", f"q {A.q}", f"hermitian {int(A.hermitian)}"]
    for (S, l), (E, M) in sorted(A.terms.items()):
        lines.append("term S=%s l=%s E=%s" % (",".join(map(str, S)), ",".join(map(str, l)),
                                              ",".join(map(str, E))))
        flat = np.asarray(M, dtype=complex).reshape(-1)
        lines.append(" ".join(f"{z.real!r} {z.imag!r}" for z in flat.tolist()))
    return "\n".join(lines) + "\n"


def loads(text):
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0].strip() != MAGIC:
        raise ConfigError("not an operator file (bad header)")
    head = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("term "):
        key, _, val = lines[i].partition(" ")
        head[key] = val
        i += 1
    try:
        lat = Lattice.from_description(json.loads(head["lattice"]))
        m, q = int(head["m"]), int(head["q"])
        herm = bool(int(head.get("hermitian", "0")))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"operator file header: {exc}") from exc
    terms = {}
    while i < len(lines):
        fields = dict(f.split("=", 1) for f in lines[i].split()[1:])
        S, l, E = _ints(fields["S"]), _ints(fields.get("l", "")), _ints(fields["E"])
        if i + 1 >= len(lines):
            raise ConfigError("operator file truncated")
        vals = np.array(lines[i + 1].split(), dtype=float)
        D = q ** len(E)
        if vals.size != 2 * D * D:
            raise ConfigError(f"term {S}: expected {2 * D * D} numbers, got {vals.size}")
        M = (vals[0::2] + 1j * vals[1::2]).reshape(D, D)
        terms[(S, l)] = (E, M)
        i += 2
    return QPOperator(lat, m, q, terms, hermitian=herm)


def save(A, path):
    Path(path).write_text(dumps(A))


def load(path):
    return loads(Path(path).read_text())


def save_normal_form(out, directory):
    """Z, V_res, H_eff (obs) and each generator as separate operator files."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save(out.Z, d / "Z.op")
    save(out.V_res, d / "V_res.op")
    if out.H_eff is not None:
        save(out.H_eff, d / "H_eff.op")
    for j, G in enumerate(out.generators):
        save(G, d / f"G_{j}.op")
    return d
