"""Markov-chain approximation of a controlled diffusion on a regular grid.

One chain step is the composition of two sub-steps, each treated one
dimension at a time:

* drift: with ``c = |f_d| dt_h / h_d`` move ``sign(f_d) * floor(c)`` cells, and
  one more with probability ``c - floor(c)``.  The conditional mean
  displacement is exactly ``f_d dt_h``; for ``c <= 1`` this is the classical
  biased jump of at most one cell.
* diffusion: from the post-drift node ``x'`` jump ``+-r_d`` cells, each with
  probability ``0.5 * Sigma_dd(x') * mu_d / r_d**2`` where ``mu_d = dt_h / h_d**2``.

Any sub-step outcome that would leave the grid is replaced by staying put in
that dimension, so probability mass is conserved.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .exceptions import StabilityViolation

_PROB_TOL = 1e-12


@dataclass(frozen=True)
class Grid:
    """Tensor grid; dimension ``d`` has ``n[d]`` nodes from ``lo[d]`` to ``hi[d]``."""

    lo: tuple
    hi: tuple
    n: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        n = tuple(int(v) for v in np.atleast_1d(self.n))
        if not (len(lo) == len(hi) == len(n)):
            raise ValueError("lo, hi and n must have one entry per dimension")
        for d, (a, b, k) in enumerate(zip(lo, hi, n)):
            if k < 3:
                raise ValueError(f"grid dimension {d} needs at least 3 nodes, got {k}")
            if not b > a:
                raise ValueError(f"grid dimension {d} has hi <= lo")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "n", n)

    @property
    def dim(self) -> int:
        return len(self.n)

    @property
    def h(self) -> np.ndarray:
        return (np.array(self.hi) - np.array(self.lo)) / (np.array(self.n) - 1)

    @property
    def size(self) -> int:
        return int(np.prod(self.n))

    def axis(self, d: int) -> np.ndarray:
        return self.lo[d] + self.h[d] * np.arange(self.n[d])

    def ravel(self, multi) -> np.ndarray:
        multi = np.asarray(multi)
        return np.ravel_multi_index(tuple(np.moveaxis(multi, -1, 0)), self.n)

    def unravel(self, flat) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(flat), self.n), axis=-1)

    def multi_indices(self) -> np.ndarray:
        return self.unravel(np.arange(self.size))

    def nodes(self, multi=None) -> np.ndarray:
        """Coordinates of all nodes (C order), or of the given multi-indices."""
        multi = self.multi_indices() if multi is None else np.asarray(multi)
        return np.asarray(self.lo) + multi * self.h

    def nearest(self, x) -> np.ndarray:
        """Multi-index of the nearest node after clamping; ties go to the lower index."""
        x = np.asarray(x, dtype=float)
        rel = (x - np.asarray(self.lo)) / self.h
        idx = np.ceil(rel - 0.5).astype(np.int64)
        return np.clip(idx, 0, np.asarray(self.n) - 1)

    def nearest_flat(self, x) -> np.ndarray:
        return self.ravel(self.nearest(x))


@dataclass(frozen=True)
class MCAConfig:
    dt_h: float
    r: tuple

    def __post_init__(self):
        r = tuple(int(v) for v in np.atleast_1d(self.r))
        if any(v < 1 for v in r):
            raise ValueError("skip factors must be positive integers")
        if not self.dt_h > 0:
            raise ValueError("dt_h must be positive")
        object.__setattr__(self, "r", r)

    def mu(self, grid: Grid) -> np.ndarray:
        return self.dt_h / grid.h**2

    @classmethod
    def auto(cls, model, grid: Grid, dt_h: float) -> "MCAConfig":
        """Smallest per-dimension skip factors satisfying the diffusion bound."""
        sigma_max = max_diffusion(model, grid)
        mu = dt_h / grid.h**2
        r = [max(1, math.ceil(math.sqrt(s * m) - 1e-12)) for s, m in zip(sigma_max, mu)]
        return cls(dt_h=dt_h, r=tuple(r))


@dataclass
class TransitionStencil:
    """(offset, probability) pairs; offsets are integer cell displacements."""

    offsets: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.offsets = np.atleast_2d(np.asarray(self.offsets, dtype=np.int64))
        self.probs = np.asarray(self.probs, dtype=float)

    def as_dict(self) -> dict:
        out = {}
        for off, p in zip(map(tuple, self.offsets), self.probs):
            out[off] = out.get(off, 0.0) + float(p)
        return out

    def mean(self) -> np.ndarray:
        return self.probs @ self.offsets

    def variance(self) -> np.ndarray:
        m = self.mean()
        return self.probs @ (self.offsets - m) ** 2


def _product(per_dim):
    offsets, probs = [], []
    for combo in itertools.product(*per_dim):
        offsets.append([o for o, _ in combo])
        probs.append(math.prod(p for _, p in combo))
    return TransitionStencil(np.array(offsets), np.array(probs))


def _drift_1d(f, dt_h, h):
    c = abs(f) * dt_h / h
    k = math.floor(c)
    frac = c - k
    s = 1 if f > 0 else -1
    if frac <= 0.0:
        return [(s * k, 1.0)]
    return [(s * (k + 1), frac), (s * k, 1.0 - frac)]


def drift_stencil(model, grid: Grid, node, theta, u, dt_h) -> TransitionStencil:
    """Drift sub-step from ``node`` (multi-index), before the boundary rule."""
    x = grid.nodes(np.asarray(node))
    f = np.asarray(model.drift(x[None, :], theta, u))[0]
    return _product([_drift_1d(float(f[d]), dt_h, grid.h[d]) for d in range(grid.dim)])


def diffusion_stencil(model, grid: Grid, node_after_drift, dt_h, r) -> TransitionStencil:
    """Symmetric +-r random walk at the post-drift node."""
    node = np.asarray(node_after_drift)
    sigma = np.asarray(model.diffusion_diag(grid.nodes(node)[None, :]))[0]
    mu = dt_h / grid.h**2
    r = np.broadcast_to(np.asarray(r), (grid.dim,))
    per_dim = []
    for d in range(grid.dim):
        p = 0.5 * sigma[d] * mu[d] / r[d] ** 2
        if p < 0 or 2 * p > 1 + _PROB_TOL:
            raise StabilityViolation(
                f"diffusion stay-probability {1 - 2 * p:.6g} outside [0, 1] at node "
                f"{tuple(int(v) for v in node)}, dimension {d}", node=tuple(node), dimension=d)
        per_dim.append([(0, 1.0 - 2 * p)] if p == 0 else
                       [(int(r[d]), p), (-int(r[d]), p), (0, max(0.0, 1.0 - 2 * p))])
    return _product(per_dim)


def _apply_boundary(grid, start, offsets):
    target = np.asarray(start) + offsets
    out = (target < 0) | (target >= np.asarray(grid.n))
    return np.where(out, np.asarray(start), target)


def composite_expectation(V, grid: Grid, node, drift: TransitionStencil,
                          diffusion_at=None) -> float:
    """E[V(x'')] after the drift stencil then the diffusion sub-step.

    ``diffusion_at(multi_index) -> TransitionStencil`` supplies the diffusion
    stencil at each post-drift node; ``None`` means no diffusion sub-step.
    """
    V = np.asarray(V).reshape(grid.n)
    node = np.asarray(node)
    total = 0.0
    for off1, p1 in zip(drift.offsets, drift.probs):
        mid = _apply_boundary(grid, node, off1)
        if diffusion_at is None:
            total += p1 * V[tuple(mid)]
            continue
        st = diffusion_at(mid)
        for off2, p2 in zip(st.offsets, st.probs):
            end = _apply_boundary(grid, mid, off2)
            total += p1 * p2 * V[tuple(end)]
    return float(total)


def max_diffusion(model, grid: Grid) -> np.ndarray:
    return np.max(model.diffusion_diag(grid.nodes()), axis=0)


def transition_matrix(model, grid: Grid, cfg: MCAConfig, theta, u,
                      sigma_nodes=None) -> sparse.csr_matrix:
    """Row-stochastic matrix of the composite chain step for one (theta, u).

    Vectorised over all nodes; equals enumerating ``composite_expectation``
    node by node.
    """
    d = grid.dim
    n = np.asarray(grid.n)
    h = grid.h
    multi = grid.multi_indices()
    S = grid.size
    x = grid.nodes(multi)
    f = np.asarray(model.drift(x, theta, u), dtype=float).reshape(S, d)
    if not np.all(np.isfinite(f)):
        f = np.nan_to_num(f, nan=0.0, posinf=1e300, neginf=-1e300)
    if sigma_nodes is None:
        sigma_nodes = model.diffusion_diag(x)
    sigma_nodes = np.asarray(sigma_nodes, dtype=float).reshape(S, d)
    mu = cfg.dt_h / h**2
    r = np.asarray(cfg.r)
    p_side = 0.5 * sigma_nodes * mu / r**2
    bad = (p_side < 0) | (2 * p_side > 1 + _PROB_TOL)
    if np.any(bad):
        i, dd = np.argwhere(bad)[0]
        raise StabilityViolation(
            f"diffusion probability {2 * p_side[i, dd]:.6g} > 1 at node "
            f"{tuple(int(v) for v in multi[i])}, dimension {dd}; increase r or reduce dt_h",
            node=tuple(multi[i]), dimension=int(dd))
    p_side = np.minimum(p_side, 0.5)

    c = np.minimum(np.abs(f) * cfg.dt_h / h, 4.0 * n)  # beyond ~n cells all exits are equivalent
    k = np.floor(c)
    frac = c - k
    sgn = np.where(f > 0, 1, -1)
    drift_opts = []  # per dim: list of (target index (S,), prob (S,))
    for dd in range(d):
        lo_off = (sgn[:, dd] * k[:, dd]).astype(np.int64)
        hi_off = (sgn[:, dd] * (k[:, dd] + 1)).astype(np.int64)
        opts = []
        for off, p in ((lo_off, 1.0 - frac[:, dd]), (hi_off, frac[:, dd])):
            tgt = multi[:, dd] + off
            tgt = np.where((tgt < 0) | (tgt >= n[dd]), multi[:, dd], tgt)
            opts.append((tgt, p))
        drift_opts.append(opts)

    rows, cols, vals = [], [], []
    idx_all = np.arange(S)
    for combo in itertools.product(range(2), repeat=d):
        mid = np.stack([drift_opts[dd][combo[dd]][0] for dd in range(d)], axis=-1)
        p1 = np.prod(np.stack([drift_opts[dd][combo[dd]][1] for dd in range(d)], axis=-1), axis=-1)
        keep = p1 > 0
        if not np.any(keep):
            continue
        mid_flat = grid.ravel(mid)
        ps = p_side[mid_flat]  # Sigma at the post-drift node
        diff_opts = []
        for dd in range(d):
            plus = mid[:, dd] + r[dd]
            minus = mid[:, dd] - r[dd]
            plus = np.where(plus >= n[dd], mid[:, dd], plus)
            minus = np.where(minus < 0, mid[:, dd], minus)
            diff_opts.append([(mid[:, dd], 1.0 - 2 * ps[:, dd]),
                              (plus, ps[:, dd]), (minus, ps[:, dd])])
        for combo2 in itertools.product(range(3), repeat=d):
            end = np.stack([diff_opts[dd][combo2[dd]][0] for dd in range(d)], axis=-1)
            p2 = np.prod(np.stack([diff_opts[dd][combo2[dd]][1] for dd in range(d)], axis=-1), axis=-1)
            p = p1 * p2
            m = keep & (p > 0)
            rows.append(idx_all[m])
            cols.append(grid.ravel(end[m]))
            vals.append(p[m])
    P = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(S, S)).tocsr()
    P.sum_duplicates()
    return P


@dataclass
class ValidationReport:
    ok: bool
    dt_h: float
    r: tuple
    diffusion_ratio: np.ndarray            # max over nodes of Sigma_dd * mu_d / r_d**2, per dim
    max_drift_cells: np.ndarray            # max over (node, theta, u) of |f_d| dt_h / h_d
    multi_cell_fraction: float             # share of (node, theta, u) with some c_d > 1
    max_admissible_dt_h: float
    min_skip: tuple
    violations: list = field(default_factory=list)

    def lines(self):
        yield f"dt_h = {self.dt_h:g}, r = {self.r}"
        for d, v in enumerate(self.diffusion_ratio):
            yield (f"  dim {d}: Sigma*mu/r^2 max = {v:.4g} (<= 1 required), "
                   f"max drift cells = {self.max_drift_cells[d]:.4g}")
        yield f"  multi-cell drift jumps at {100 * self.multi_cell_fraction:.2f}% of (node, theta, u)"
        yield f"  largest admissible dt_h = {self.max_admissible_dt_h:.6g}; minimal r = {self.min_skip}"
        yield "  status: " + ("OK" if self.ok else f"{len(self.violations)} violation(s)")
        for v in self.violations[:20]:
            yield f"    {v}"

    def __str__(self):
        return "\n".join(self.lines())


def validate(model, grid: Grid, cfg: MCAConfig, thetas, controls) -> ValidationReport:
    """Check every (node, theta, u) against the transition-probability bounds.

    Never raises on violations; they are listed in the report.
    """
    x = grid.nodes()
    sigma = model.diffusion_diag(x)
    mu = cfg.mu(grid)
    r = np.asarray(cfg.r)
    ratio_nodes = sigma * mu / r**2
    violations = []
    neg = np.argwhere(sigma < 0)
    for i, d in neg[:50]:
        violations.append(f"negative diffusion {sigma[i, d]:.4g} at node {tuple(grid.unravel(i))}, dim {d}")
    over = np.argwhere(ratio_nodes > 1 + _PROB_TOL)
    for i, d in over[:50]:
        violations.append(
            f"diffusion probability {ratio_nodes[i, d]:.4g} > 1 at node {tuple(grid.unravel(i))}, dim {d}")
    if len(over) > 50:
        violations.append(f"... {len(over) - 50} more diffusion violations")
    max_cells = np.zeros(grid.dim)
    multi = 0
    total = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for th in np.atleast_1d(thetas):
            for u in np.atleast_1d(controls):
                f = np.asarray(model.drift(x, th, u))
                if not np.all(np.isfinite(f)):
                    violations.append(f"non-finite drift at theta={th}, u={u}")
                    f = np.nan_to_num(f)
                c = np.abs(f) * cfg.dt_h / grid.h
                max_cells = np.maximum(max_cells, c.max(axis=0))
                multi += int(np.count_nonzero(np.any(c > 1, axis=-1)))
                total += c.shape[0]
    sigma_max = sigma.max(axis=0)
    with np.errstate(divide="ignore"):
        adm = np.where(sigma_max > 0, r**2 * grid.h**2 / sigma_max, np.inf)
    min_skip = tuple(int(max(1, math.ceil(math.sqrt(s * m) - 1e-12))) for s, m in zip(sigma_max, mu))
    return ValidationReport(
        ok=not violations,
        dt_h=cfg.dt_h,
        r=cfg.r,
        diffusion_ratio=ratio_nodes.max(axis=0),
        max_drift_cells=max_cells,
        multi_cell_fraction=multi / max(total, 1),
        max_admissible_dt_h=float(np.min(adm)),
        min_skip=min_skip,
        violations=violations,
    )
