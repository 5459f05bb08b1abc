"""Mean-field jump models on a finite state space.

A model is a state count ``r``, a set of admissible directed edges and one
rate expression per edge.  Rates depend on the current occupation measure
``mu`` (a probability vector over the ``r`` states).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from itertools import combinations
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from . import kernels
from .expr import Node, RateDomainError, compile_postfix, evaluate, max_index, parse_rate_expr, to_text

SIMPLEX_TOL = 1e-12


class ModelError(ValueError):
    pass


def simplex_point(weights, tol: float = 1e-9) -> np.ndarray:
    """Validate and renormalize a probability vector.

    Entries in ``[-tol, 0)`` are clipped to zero; anything more negative, or
    a total mass off by more than ``tol``, raises ``ValueError``.
    """
    w = np.array(weights, dtype=float).ravel()
    if w.size == 0 or not np.all(np.isfinite(w)):
        raise ValueError("simplex point must be a finite nonempty vector")
    if w.min() < -tol:
        raise ValueError(f"negative weight {w.min()!r}")
    w = np.maximum(w, 0.0)
    s = w.sum()
    if abs(s - 1.0) > tol:
        raise ValueError(f"weights sum to {s!r}, not 1")
    return w / s


def simplex_grid(r: int, resolution: int) -> np.ndarray:
    """All compositions of ``resolution`` into ``r`` parts, divided by it."""
    rows = []
    # stars and bars: choose r-1 bar positions among resolution + r - 1 slots
    for bars in combinations(range(resolution + r - 1), r - 1):
        prev = -1
        parts = []
        for b in bars:
            parts.append(b - prev - 1)
            prev = b
        parts.append(resolution + r - 1 - prev - 1)
        rows.append(parts)
    return np.asarray(rows, dtype=float) / resolution


def is_irreducible(r: int, edges) -> bool:
    """Strong connectivity of the directed graph ({0..r-1}, edges)."""
    if r == 1:
        return True
    if not edges:
        return False
    src, dst = zip(*edges)
    g = csr_matrix((np.ones(len(edges)), (src, dst)), shape=(r, r))
    n_comp, _ = connected_components(g, directed=True, connection="strong")
    return n_comp == 1


class Program(NamedTuple):
    """Compiled rate programs plus edge endpoints, as the kernels take them."""

    code: np.ndarray
    args: np.ndarray
    offsets: np.ndarray
    max_stack: int
    src: np.ndarray
    dst: np.ndarray


@dataclass(frozen=True, eq=False)
class Model:
    """Immutable mean-field model.

    ``rates`` maps each edge ``(i, j)`` to expression text or a parsed AST.
    Edges are stored sorted so that per-edge arrays have a canonical order.
    """

    r: int
    rates: Mapping
    name: str = "model"
    edges: tuple = field(init=False)
    exprs: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.r < 1:
            raise ModelError("state count must be positive")
        edges = []
        exprs = []
        for key in sorted(self.rates):
            i, j = (int(k) for k in key)
            if i == j:
                raise ModelError(f"self-loop ({i},{j}) is not an admissible edge")
            if not (0 <= i < self.r and 0 <= j < self.r):
                raise ModelError(f"edge ({i},{j}) outside state space of size {self.r}")
            node = self.rates[key]
            if isinstance(node, str):
                node = parse_rate_expr(node)
            if max_index(node) >= self.r:
                raise ModelError(f"rate for ({i},{j}) references mu[{max_index(node)}] but r = {self.r}")
            edges.append((i, j))
            exprs.append(node)
        if len(set(edges)) != len(edges):
            raise ModelError("duplicate edge")
        object.__setattr__(self, "edges", tuple(edges))
        object.__setattr__(self, "exprs", tuple(exprs))
        object.__setattr__(self, "rates", dict(zip(self.edges, self.exprs)))

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @cached_property
    def src(self) -> np.ndarray:
        return np.array([e[0] for e in self.edges], dtype=np.int64)

    @cached_property
    def dst(self) -> np.ndarray:
        return np.array([e[1] for e in self.edges], dtype=np.int64)

    @cached_property
    def program(self) -> Program:
        code: list[int] = []
        args: list[float] = []
        offsets = [0]
        depth = 1
        for node in self.exprs:
            c, a, d = compile_postfix(node)
            code += c
            args += a
            offsets.append(len(code))
            depth = max(depth, d)
        return Program(
            np.asarray(code, dtype=np.int64),
            np.asarray(args, dtype=np.float64),
            np.asarray(offsets, dtype=np.int64),
            depth,
            self.src,
            self.dst,
        )

    def rate_texts(self) -> dict:
        return {e: to_text(n) for e, n in zip(self.edges, self.exprs)}

    def lam(self, mu) -> np.ndarray:
        """Per-edge rates at ``mu`` with domain checking."""
        return np.array([evaluate(n, mu) for n in self.exprs])

    def rates_batch(self, mus) -> np.ndarray:
        p = self.program
        mus = np.ascontiguousarray(np.atleast_2d(mus), dtype=float)
        return kernels.rates_batch(p.code, p.args, p.offsets, p.max_stack, mus)

    def drift_batch(self, mus) -> np.ndarray:
        """McKean-Vlasov velocity A*_mu mu for each row of ``mus``."""
        mus = np.ascontiguousarray(np.atleast_2d(mus), dtype=float)
        return kernels.drift_batch(*self.program, mus)

    def drift(self, mu) -> np.ndarray:
        return self.drift_batch(mu)[0]


def rate_matrix(m: Model, xi) -> np.ndarray:
    """Generator matrix A_xi: off-diagonal rates on edges, zero row sums."""
    xi = np.asarray(xi, dtype=float)
    a = np.zeros((m.r, m.r))
    lam = m.lam(xi)
    a[m.src, m.dst] = lam
    np.fill_diagonal(a, 0.0)
    np.fill_diagonal(a, -a.sum(axis=1))
    return a


@dataclass
class ValidationReport:
    irreducible: bool
    c_hat: float
    C_hat: float
    lipschitz: float
    grid_resolution: int
    n_points: int
    a1: bool
    a2: bool
    a3: bool
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.a1 and self.a2 and self.a3

    def to_dict(self) -> dict:
        return {
            "irreducible": self.irreducible,
            "c_hat": self.c_hat,
            "C_hat": self.C_hat,
            "lipschitz": self.lipschitz,
            "grid_resolution": self.grid_resolution,
            "n_points": self.n_points,
            "A1": self.a1,
            "A2": self.a2,
            "A3": self.a3,
            "passed": self.passed,
            "notes": list(self.notes),
        }


def default_resolution(r: int) -> int:
    return 50 if r <= 4 else 20


def _raise_domain_error(m: Model, grid: np.ndarray, lam: np.ndarray):
    row, col = np.argwhere(~np.isfinite(lam))[0]
    # re-evaluate with the checking evaluator for a precise message
    evaluate(m.exprs[col], grid[row])
    raise RateDomainError(f"rate for edge {m.edges[col]} is not finite at mu = {grid[row].tolist()}")


def validate_model(m: Model, grid_resolution: int | None = None) -> ValidationReport:
    """Check irreducibility, positivity and a Lipschitz bound on a grid.

    Rates are sampled on the uniform simplex lattice of the given resolution;
    the reported constants are grid extrema, not certified bounds.
    Expression domain errors are raised, not clipped.
    """
    n = grid_resolution or default_resolution(m.r)
    if m.n_edges == 0:
        raise ModelError("model has no edges")
    grid = simplex_grid(m.r, n)
    lam = m.rates_batch(grid)
    if not np.all(np.isfinite(lam)):
        _raise_domain_error(m, grid, lam)
    irreducible = is_irreducible(m.r, m.edges)
    c_hat = float(lam.min())
    C_hat = float(lam.max())

    # neighbours differ by moving 1/n of mass between two states (L1 step 2/n)
    index = {tuple(np.rint(g * n).astype(int)): k for k, g in enumerate(grid)}
    lip = 0.0
    for k, g in enumerate(grid):
        counts = np.rint(g * n).astype(int)
        for i in range(m.r):
            if counts[i] == 0:
                continue
            for j in range(m.r):
                if j == i:
                    continue
                nb = counts.copy()
                nb[i] -= 1
                nb[j] += 1
                k2 = index[tuple(nb)]
                if k2 > k:
                    lip = max(lip, float(np.abs(lam[k2] - lam[k]).max()) * n / 2.0)

    notes = [
        f"rate bounds and Lipschitz constant are extrema over a {n}-resolution simplex grid "
        f"({len(grid)} points); they are estimates, not certified bounds"
    ]
    if not irreducible:
        notes.append("edge graph is not strongly connected")
    if c_hat <= 0:
        notes.append("some admissible rate is not positive on the grid")
    return ValidationReport(
        irreducible=irreducible,
        c_hat=c_hat,
        C_hat=C_hat,
        lipschitz=lip,
        grid_resolution=n,
        n_points=len(grid),
        a1=irreducible,
        a2=math.isfinite(lip),
        a3=c_hat > 0,
        notes=notes,
    )


# ---------------------------------------------------------------------------
# config files
#
#   name = "const2"
#   r = 2
#   [[edges]]
#   from = 0
#   to = 1
#   rate = "1.0"


def model_to_dict(m: Model) -> dict:
    return {
        "name": m.name,
        "r": m.r,
        "edges": [{"from": i, "to": j, "rate": text} for (i, j), text in m.rate_texts().items()],
    }


def model_from_dict(d: Mapping) -> Model:
    try:
        r = int(d["r"])
        rates = {(int(e["from"]), int(e["to"])): str(e["rate"]) for e in d["edges"]}
    except (KeyError, TypeError) as exc:
        raise ModelError(f"malformed model table: {exc}") from exc
    return Model(r=r, rates=rates, name=str(d.get("name", "model")))


def dumps_model_toml(m: Model) -> str:
    lines = [f'name = "{m.name}"', f"r = {m.r}", ""]
    for (i, j), text in m.rate_texts().items():
        lines += ["[[edges]]", f"from = {i}", f"to = {j}", f'rate = "{text}"', ""]
    return "\n".join(lines)


def load_model(path) -> Model:
    import tomli

    data = tomli.loads(Path(path).read_text())
    return model_from_dict(data.get("model", data))
