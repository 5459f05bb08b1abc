"""Deterministic large-population limit: integrate mu' = A*_mu mu, locate and
classify equilibria, and check that every omega-limit set is a point."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import kernels
from .model import Model, ValidationReport, simplex_grid, validate_model

log = logging.getLogger(__name__)

CLIP_TOL = 1e-6
MAX_HALVINGS = 20
MERGE_TOL = 1e-6
UNDETERMINED_MERGE_TOL = 0.1
RESIDUAL_TOL = 1e-10
EIG_TOL = 1e-8
FD_STEP = 1e-6


class UnsupportedDynamics(RuntimeError):
    """Raised when omega-limit sets other than isolated points are detected."""


@lru_cache(maxsize=64)
def validation(m: Model) -> ValidationReport:
    return validate_model(m)


def tangent_basis(r: int) -> np.ndarray:
    """Orthonormal basis (r x r-1) of {v : sum(v) = 0}."""
    q, _ = np.linalg.qr(np.eye(r) - 1.0 / r)
    return q[:, : r - 1]


def default_dt(m: Model) -> float:
    rep = validation(m)
    out_degree = np.bincount(m.src, minlength=m.r).max()
    return float(min(0.05, 0.25 / (rep.C_hat * max(out_degree, 1))))


def default_horizon(m: Model) -> float:
    return 50.0 / validation(m).c_hat


@dataclass
class OdePath:
    times: np.ndarray
    mus: np.ndarray
    max_clip: float
    halvings: int
    ok: bool

    @property
    def final(self) -> np.ndarray:
        return self.mus[-1]


def integrate(m: Model, nu, horizon: float, dt: float) -> OdePath:
    """Classical RK4 with a fixed step ``dt``.

    After each step negative coordinates are clipped to zero and the point is
    renormalized; a step whose clip exceeds 1e-6 is retried with the step
    halved (up to 20 times).  ``ok`` is False if some step never got under
    the clip tolerance.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    nu = np.ascontiguousarray(nu, dtype=float)
    n_steps = int(round(horizon / dt))
    path, max_clip, halvings, ok = kernels.rk4_path(*m.program, nu, float(dt), n_steps, CLIP_TOL, MAX_HALVINGS, True)
    times = np.arange(n_steps + 1) * dt
    return OdePath(times, path, float(max_clip), int(halvings), bool(ok))


def endpoints(m: Model, starts: np.ndarray, horizon: float, dt: float) -> np.ndarray:
    starts = np.ascontiguousarray(np.atleast_2d(starts), dtype=float)
    n_steps = int(round(horizon / dt))
    return kernels.rk4_endpoints(*m.program, starts, float(dt), n_steps, CLIP_TOL, MAX_HALVINGS)


def tangent_jacobian(m: Model, xi, h: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of the drift restricted to the tangent space."""
    xi = np.asarray(xi, dtype=float)
    basis = tangent_basis(m.r)
    pts = np.concatenate([xi + h * basis.T, xi - h * basis.T])
    f = m.drift_batch(pts)
    k = basis.shape[1]
    cols = (f[:k] - f[k:]) / (2 * h)
    return basis.T @ cols.T


def newton_polish(m: Model, x0, max_iter: int = 100, tol: float = 1e-13):
    """Damped Newton on the drift within the simplex.  Returns (x, residual, converged)."""
    basis = tangent_basis(m.r)
    x = np.asarray(x0, dtype=float).copy()
    f = m.drift(x)
    res = np.abs(f).max()
    for _ in range(max_iter):
        if res <= tol:
            return x, res, True
        jac = tangent_jacobian(m, x)
        try:
            y = np.linalg.solve(jac, -(basis.T @ f))
        except np.linalg.LinAlgError:
            y = np.linalg.lstsq(jac, -(basis.T @ f), rcond=None)[0]
        step = basis @ y
        t = 1.0
        while t > 1e-10:
            trial = np.maximum(x + t * step, 0.0)
            trial /= trial.sum()
            ft = m.drift(trial)
            rt = np.abs(ft).max()
            if rt < res:
                break
            t *= 0.5
        else:
            return x, res, res <= RESIDUAL_TOL
        x, f, res = trial, ft, rt
    return x, res, res <= RESIDUAL_TOL


def classify(eigs: np.ndarray) -> str:
    re = np.real(eigs)
    if re.size == 0:
        return "stable"
    if np.all(re < -EIG_TOL):
        return "stable"
    if np.all(re > EIG_TOL):
        return "unstable"
    if np.any(re > EIG_TOL) and np.any(re < -EIG_TOL):
        return "saddle"
    if np.any(re > EIG_TOL):
        return "unstable"
    return "undetermined"


@dataclass
class EquilibriumCatalog:
    points: np.ndarray
    labels: list
    eigenvalues: list
    residuals: np.ndarray
    merge_tol: float = MERGE_TOL
    notes: list = field(default_factory=list)

    @property
    def stable_indices(self) -> list:
        return [k for k, lab in enumerate(self.labels) if lab == "stable"]

    @property
    def stable(self) -> np.ndarray:
        return self.points[self.stable_indices]

    @property
    def l(self) -> int:
        return len(self.stable_indices)

    def nearest(self, x) -> tuple[int, float]:
        d = np.abs(self.points - np.asarray(x)).sum(axis=1)
        k = int(np.argmin(d))
        return k, float(d[k])

    def relaxation_time(self, x=None) -> float:
        """1/|slowest decay rate| at the stable point nearest ``x`` (or the slowest overall)."""
        idx = self.stable_indices
        if not idx:
            return float("nan")
        if x is not None:
            d = np.abs(self.points[idx] - np.asarray(x)).sum(axis=1)
            idx = [idx[int(np.argmin(d))]]
        rates = [np.min(np.abs(np.real(self.eigenvalues[k]))) if len(self.eigenvalues[k]) else np.inf for k in idx]
        return float(1.0 / min(rates))

    def to_dict(self) -> dict:
        return {
            "l": self.l,
            "equilibria": [
                {
                    "point": p.tolist(),
                    "label": lab,
                    "eigenvalues_real": np.real(ev).tolist(),
                    "eigenvalues_imag": np.imag(ev).tolist(),
                    "residual": float(res),
                }
                for p, lab, ev, res in zip(self.points, self.labels, self.eigenvalues, self.residuals)
            ],
            "notes": list(self.notes),
        }


def random_simplex(rng: np.random.Generator, n: int, r: int) -> np.ndarray:
    return rng.dirichlet(np.ones(r), size=n)


def find_equilibria(m: Model, starts: int = 20, seed: int = 0, horizon: float | None = None,
                    dt: float | None = None) -> EquilibriumCatalog:
    """Multi-start search for equilibria.

    Candidates are the endpoints of forward integrations from random simplex
    points (these find attractors) together with damped-Newton roots started
    from the same points (these also find saddles and repellers).  Candidates
    are polished, merged within 1e-6 in L1, and classified by the tangent
    Jacobian spectrum.  An integration endpoint that Newton cannot polish is
    kept with the label ``undetermined``.
    """
    if starts < 1:
        raise ValueError("need at least one start")
    rng = np.random.Generator(np.random.Philox(seed))
    pts = random_simplex(rng, starts, m.r)
    horizon = default_horizon(m) if horizon is None else horizon
    dt = default_dt(m) if dt is None else dt
    ends = endpoints(m, pts, horizon, dt)
    candidates = list(ends) + list(pts)

    found: list[np.ndarray] = []
    residuals: list[float] = []
    converged: list[bool] = []
    unconverged = 0
    for k, c in enumerate(candidates):
        x, res, ok = newton_polish(m, c)
        from_endpoint = k < len(ends)
        if not ok:
            unconverged += 1
            if not from_endpoint:
                continue
            # an integration cluster Newton cannot polish is kept as undetermined
            x = c
        tol = MERGE_TOL if ok else UNDETERMINED_MERGE_TOL
        if any(np.abs(x - y).sum() <= tol for y in found):
            continue
        found.append(x)
        residuals.append(res)
        converged.append(ok)

    # deterministic order: by coordinates
    order = sorted(range(len(found)), key=lambda k: tuple(np.round(found[k], 9)))
    points = np.array([found[k] for k in order]).reshape(-1, m.r)
    residuals = np.array([residuals[k] for k in order])
    eigs = [np.linalg.eigvals(tangent_jacobian(m, p)) for p in points]
    labels = [classify(ev) if converged[k] else "undetermined" for ev, k in zip(eigs, order)]
    notes = []
    if unconverged:
        notes.append(f"{unconverged} of {len(candidates)} Newton runs did not converge")
    # integration endpoints that did not polish are possible non-point limit sets
    for e in ends:
        if not any(np.abs(e - p).sum() <= 1e-4 for p, lab in zip(points, labels) if lab != "undetermined"):
            notes.append("an integration endpoint is far from every equilibrium (possible non-point limit set)")
            break
    return EquilibriumCatalog(points, labels, eigs, residuals, notes=notes)


@dataclass
class OmegaLimitReport:
    flagged: bool
    n_starts: int
    n_flagged: int
    max_speed: float
    max_distance: float
    examples: list

    def to_dict(self) -> dict:
        return {
            "flagged": self.flagged,
            "n_starts": self.n_starts,
            "n_flagged": self.n_flagged,
            "max_endpoint_speed": self.max_speed,
            "max_endpoint_distance": self.max_distance,
            "examples": self.examples,
        }


def omega_limit_check(m: Model, catalog: EquilibriumCatalog, resolution: int = 8,
                      horizon: float | None = None, dt: float | None = None,
                      dist_tol: float = 1e-4, speed_tol: float = 1e-6) -> OmegaLimitReport:
    """Integrate from a uniform simplex grid and flag endpoints that are still
    moving or are not near a catalogued equilibrium."""
    horizon = default_horizon(m) if horizon is None else horizon
    dt = default_dt(m) if dt is None else dt
    grid = simplex_grid(m.r, resolution)
    ends = endpoints(m, grid, horizon, dt)
    speed = np.abs(m.drift_batch(ends)).max(axis=1)
    if len(catalog.points):
        dist = np.abs(ends[:, None, :] - catalog.points[None, :, :]).sum(axis=2).min(axis=1)
    else:
        dist = np.full(len(ends), np.inf)
    bad = (speed > speed_tol) | (dist > dist_tol)
    examples = [
        {"start": grid[k].tolist(), "end": ends[k].tolist(), "speed": float(speed[k]), "distance": float(dist[k])}
        for k in np.flatnonzero(bad)[:5]
    ]
    return OmegaLimitReport(bool(bad.any()), len(grid), int(bad.sum()), float(speed.max()),
                            float(dist.max()), examples)


def require_point_limits(report: OmegaLimitReport):
    if report.flagged:
        raise UnsupportedDynamics(
            f"{report.n_flagged} of {report.n_starts} trajectories do not settle on a catalogued "
            "equilibrium; only isolated point limit sets are supported"
        )
