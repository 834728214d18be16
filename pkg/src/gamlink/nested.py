"""Nested composition models ``m[sum_l1 m_l1{sum_l2 m_l1l2[... m_l1..lp(x)]}]``.

Only the outer function ``m`` is penalised, by ``lambda^2 [T_1^2(m) + c T_k^2(m)]^nu``;
every group of siblings satisfies ``sum_l T_1^2(m_l) + c_l T_k^2(m_l) = 1``.

Nodes are addressed by 0-based paths: ``()`` is the outer function, ``(l1,)``
its children, and paths of length ``depth`` are leaves, each reading one
covariate column.  Non-outer nodes are anchored (value 0 at the left end of
their domain).  Leaves live on [0, 1].  An inner node at depth ``j`` reads the
sum of its ``L`` children; with anchoring and the group norm each child moves
by at most ``sqrt(W)`` over a domain of width ``W``, so the symmetric domain
``[-sqrt(L W), sqrt(L W)]`` always contains the input and is kept fixed.  The
outer function is re-knotted to the padded input range, as in the GAM fit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path as FsPath
from typing import Mapping

import numpy as np
import scipy.linalg as sla

from ._solvers import RootFindingError, _sym_solve, solve_norm_constrained, solve_penalized_spline
from .gam import (
    SQUARED,
    Dataset,
    FitConfig,
    FitResult,
    GamModel,
    _Problem,
    end_sensitivities,
    init_additive,
    init_model,
    reknot_link,
    squarem_point,
)
from .penalty import PenaltyConfig, t_l_squared
from .splines import BasisSpec, SplineFunction, design_matrix, gram_matrix, linear_spline, make_uniform_basis, project_onto_basis

Path = tuple[int, ...]

LAYER_NORM_TOL = 1e-6


@dataclass(frozen=True)
class NetworkSpec:
    depth: int
    widths: tuple[int, ...]
    leaf_map: Mapping[Path, int]
    c: float = 1.0
    c_path: Mapping[Path, float] = field(default_factory=dict)  # missing paths weigh 1
    nu: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "leaf_map", {tuple(int(i) for i in p): int(c) for p, c in dict(self.leaf_map).items()})
        object.__setattr__(self, "c_path", {tuple(int(i) for i in p): float(v) for p, v in dict(self.c_path).items()})
        if self.depth < 1 or len(self.widths) != self.depth:
            raise ValueError("need depth >= 1 and one width per layer")
        if any(w < 1 for w in self.widths):
            raise ValueError("widths must be >= 1")
        leaves = set(self.leaf_paths())
        if set(self.leaf_map) != leaves:
            raise ValueError("leaf_map must assign exactly one column to every leaf path")
        if any(c < 0 for c in self.leaf_map.values()):
            raise ValueError("columns must be >= 0")
        if not (self.c > 0 and self.nu > 0):
            raise ValueError("c and nu must be positive")
        for p, v in self.c_path.items():
            if not 1 <= len(p) <= self.depth or any(not 0 <= i < w for i, w in zip(p, self.widths)):
                raise ValueError(f"c_path key {p} is not a node path")
            if not (v > 0 and np.isfinite(v)):
                raise ValueError("c_path weights must lie in (0, inf)")

    def leaf_paths(self) -> list[Path]:
        return list(product(*(range(w) for w in self.widths)))

    def children(self, path: Path) -> list[Path]:
        if len(path) >= self.depth:
            return []
        return [path + (l,) for l in range(self.widths[len(path)])]

    def groups(self) -> list[Path]:
        """Parent paths of all sibling groups, depth-first pre-order."""
        out = []

        def walk(p):
            if len(p) < self.depth:
                out.append(p)
                for ch in self.children(p):
                    walk(ch)

        walk(())
        return out

    def weight(self, path: Path) -> float:
        return self.c_path.get(path, 1.0)

    @property
    def n_columns(self) -> int:
        return max(self.leaf_map.values()) + 1

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "widths": list(self.widths),
            "leaf_map": [list(p) + [c] for p, c in sorted(self.leaf_map.items())],
            "c": self.c,
            "c_path": [list(p) + [v] for p, v in sorted(self.c_path.items())],
            "nu": self.nu,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        depth = int(d["depth"])
        leaf_map = {tuple(row[:-1]): row[-1] for row in d["leaf_map"]}
        raw = d.get("c_path") or []
        if isinstance(raw, dict):
            c_path = {tuple(int(i) for i in k.split(",")): v for k, v in raw.items()}
        else:
            c_path = {tuple(row[:-1]): row[-1] for row in raw}
        return cls(depth, tuple(d["widths"]), leaf_map, float(d.get("c", 1.0)), c_path, float(d.get("nu", 1.0)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(s))

    @classmethod
    def load(cls, path: str | FsPath) -> "NetworkSpec":
        return cls.from_json(FsPath(path).read_text())

    @classmethod
    def additive(cls, d: int, c: float = 1.0, c_path: Mapping[Path, float] | None = None, nu: float = 1.0):
        """Depth-1 network ``m[m_1(x_1) + ... + m_d(x_d)]``."""
        return cls(1, (d,), {(j,): j for j in range(d)}, c, dict(c_path or {}), nu)


@dataclass(frozen=True, eq=False)
class NestedModel:
    nodes: Mapping[Path, SplineFunction]
    spec: NetworkSpec
    k: int = 2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        nodes = {tuple(p): f for p, f in dict(self.nodes).items()}
        expected = {()} | {p for g in self.spec.groups() for p in self.spec.children(g)}
        if set(nodes) != expected:
            raise ValueError("nodes must cover exactly the network's paths")
        object.__setattr__(self, "nodes", nodes)

    @property
    def outer(self) -> SplineFunction:
        return self.nodes[()]

    def to_dict(self) -> dict:
        def tree(p):
            d = {"spline": self.nodes[p].to_dict()}
            if len(p) == self.spec.depth:
                d["column"] = self.spec.leaf_map[p]
            else:
                d["children"] = [tree(ch) for ch in self.spec.children(p)]
            return d

        return {"spec": self.spec.to_dict(), "k": self.k, "root": tree(()), "meta": _jsonable(self.meta)}

    @classmethod
    def from_dict(cls, d: dict) -> "NestedModel":
        spec = NetworkSpec.from_dict(d["spec"])
        nodes = {}

        def walk(node, p):
            nodes[p] = SplineFunction.from_dict(node["spline"])
            for l, ch in enumerate(node.get("children", [])):
                walk(ch, p + (l,))

        walk(d["root"], ())
        return cls(nodes, spec, int(d.get("k", 2)), dict(d.get("meta", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "NestedModel":
        return cls.from_dict(json.loads(s))


def _jsonable(meta: dict) -> dict:
    out = {}
    for key, v in meta.items():
        if isinstance(v, (np.floating, np.integer, np.bool_)):
            v = v.item()
        if isinstance(v, (str, int, float, bool)) or v is None:
            out[key] = v
        elif isinstance(v, (list, tuple)) and all(isinstance(e, (str, int, float, bool)) for e in v):
            out[key] = list(v)
    return out


# -- evaluation -------------------------------------------------------------------

def _forward(model: NestedModel, x: np.ndarray):
    """Inputs and outputs of every node, plus the number of clamped evaluations per point."""
    spec = model.spec
    inputs, outputs = {}, {}
    clamps = np.zeros(x.shape[0], dtype=int)

    def walk(p):
        f = model.nodes[p]
        if len(p) == spec.depth:
            u = x[:, spec.leaf_map[p]]
        else:
            u = sum(walk(ch) for ch in spec.children(p))
        inputs[p] = u
        v, dist = f.clamped(u)
        clamps[:] += dist > 0
        outputs[p] = v
        return v

    walk(())
    return inputs, outputs, clamps


def evaluate_network(model: NestedModel, x):
    """Network output at ``x`` (one point or an (n, d) array) and the number of
    node evaluations whose argument had to be clamped into the node's domain."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    _, out, clamps = _forward(model, np.atleast_2d(x))
    if single:
        return float(out[()][0]), int(clamps[0])
    return out[()], clamps


def node_norm(f: SplineFunction, k: int, weight: float) -> float:
    return t_l_squared(f, 1) + weight * t_l_squared(f, k)


def check_layer_norms(model: NestedModel) -> dict[Path, float]:
    """``|sum_l T_1^2 + c_l T_k^2 - 1|`` for every sibling group, keyed by parent path."""
    spec = model.spec
    return {
        g: abs(sum(node_norm(model.nodes[ch], model.k, spec.weight(ch)) for ch in spec.children(g)) - 1.0)
        for g in spec.groups()
    }


def outer_penalty(f: SplineFunction, spec: NetworkSpec, k: int) -> float:
    return (t_l_squared(f, 1) + spec.c * t_l_squared(f, k)) ** spec.nu


def nested_objective(model: NestedModel, data: Dataset, lam: float, spec: NetworkSpec | None = None, loss=SQUARED) -> float:
    """``n^-1 sum loss(residual) + lambda^2 [T_1^2(m) + c T_k^2(m)]^nu``."""
    if spec is not None and spec.to_dict() != model.spec.to_dict():
        model = replace(model, spec=spec)
    spec = model.spec
    bad = {g: r for g, r in check_layer_norms(model).items() if r > LAYER_NORM_TOL}
    if bad:
        raise ValueError(f"layer norm constraint violated at groups {sorted(bad)}")
    val, _ = evaluate_network(model, data.x)
    r = data.y - val
    return float(np.mean(loss.value(r)) + lam**2 * outer_penalty(model.outer, spec, model.k))


# -- fitting ----------------------------------------------------------------------

def inner_half_widths(spec: NetworkSpec) -> dict[int, float]:
    """Half-width of the fixed symmetric domain of inner nodes at each depth."""
    h = {}
    width_below = 1.0  # leaves live on [0, 1]
    for depth in range(spec.depth - 1, 0, -1):
        h[depth] = float(np.sqrt(spec.widths[depth] * width_below))
        width_below = 2.0 * h[depth]
    return h


class _Net:
    """Stacked anchored coefficients of all non-outer nodes plus cached designs."""

    def __init__(self, data: Dataset, spec: NetworkSpec, cfg: FitConfig, loss=SQUARED):
        if spec.n_columns > data.d:
            raise ValueError(f"leaf_map uses column {spec.n_columns - 1} but data has {data.d} columns")
        self.data, self.spec, self.cfg, self.loss = data, spec, cfg, loss
        k, order = cfg.penalty.k, cfg.order
        half = inner_half_widths(spec)
        self.bases: dict[Path, BasisSpec] = {}
        for g in spec.groups():
            for ch in spec.children(g):
                if len(ch) == spec.depth:
                    self.bases[ch] = make_uniform_basis(0.0, 1.0, cfg.m_interior_knots, order)
                else:
                    h = half[len(ch)]
                    self.bases[ch] = make_uniform_basis(-h, h, cfg.m_interior_knots, order)
        self.groups = spec.groups()
        self.slices: dict[Path, slice] = {}
        self.Q: dict[Path, np.ndarray] = {}
        start = 0
        for g in self.groups:
            blocks = []
            for ch in spec.children(g):
                b = self.bases[ch]
                q = (gram_matrix(b, 1) + spec.weight(ch) * gram_matrix(b, k))[1:, 1:]
                blocks.append(q)
                self.slices[ch] = slice(start, start + b.basis_count - 1)
                start += b.basis_count - 1
            self.Q[g] = sla.block_diag(*blocks)
        self.size = start
        self.leaf_design = {
            p: design_matrix(self.bases[p], data.x[:, spec.leaf_map[p]])[:, 1:]
            for p in self.bases if len(p) == spec.depth
        }

    # representation ------------------------------------------------------
    def group_slice(self, g: Path) -> slice:
        chs = self.spec.children(g)
        return slice(self.slices[chs[0]].start, self.slices[chs[-1]].stop)

    def spline(self, p: Path, theta: np.ndarray) -> SplineFunction:
        return SplineFunction(self.bases[p], np.concatenate([[0.0], theta[self.slices[p]]]))

    def model(self, F: SplineFunction, theta: np.ndarray, **meta) -> NestedModel:
        nodes = {p: self.spline(p, theta) for p in self.bases}
        nodes[()] = F
        return NestedModel(nodes, self.spec, self.cfg.penalty.k, dict(meta))

    def design(self, p: Path, u: np.ndarray) -> np.ndarray:
        if p in self.leaf_design:
            return self.leaf_design[p]
        lo, hi = self.bases[p].domain
        return design_matrix(self.bases[p], np.clip(u, lo, hi))[:, 1:]

    def forward(self, theta: np.ndarray):
        """Per-node inputs, outputs and anchored designs; returns the outer input too."""
        spec = self.spec
        inputs, outputs, designs = {}, {}, {}

        def walk(p):
            if len(p) == spec.depth:
                u = None
            else:
                u = sum(walk(ch) for ch in spec.children(p))
            if p == ():
                return u
            D = self.design(p, u)
            inputs[p], designs[p] = u, D
            outputs[p] = D @ theta[self.slices[p]]
            return outputs[p]

        z = walk(())
        return z, inputs, outputs, designs

    def normalize(self, theta: np.ndarray, groups=None) -> np.ndarray | None:
        theta = theta.copy()
        for g in groups if groups is not None else self.groups:
            sl = self.group_slice(g)
            nrm = float(theta[sl] @ self.Q[g] @ theta[sl])
            if not nrm > 0:
                return None
            theta[sl] /= np.sqrt(nrm)
        return theta

    # objective -----------------------------------------------------------
    def penalty(self, F: SplineFunction) -> float:
        return self.cfg.lam**2 * outer_penalty(F, self.spec, self.cfg.penalty.k)

    def objective(self, F: SplineFunction, z: np.ndarray) -> float:
        r = self.data.y - F.clamped(z)[0]
        return float(np.mean(self.loss.value(r))) + self.penalty(F)

    def end_gradient(self, F: SplineFunction) -> tuple[float, float]:
        k, spec = self.cfg.penalty.k, self.spec
        t = t_l_squared(F, 1) + spec.c * t_l_squared(F, k)
        if not t > 0:
            return 0.0, 0.0
        dp = self.cfg.lam**2 * spec.nu * t ** (spec.nu - 1.0)
        return end_sensitivities(F, [(dp, 1), (dp * spec.c, k)], self.cfg.f_domain_padding)

    # steps ----------------------------------------------------------------
    def update_outer(self, F: SplineFunction, z: np.ndarray):
        cfg = self.cfg
        obj0 = self.objective(F, z)
        F_start = reknot_link(F, z, cfg)
        if F_start is None:
            return F, obj0, True
        basis, c0 = F_start.basis, F_start.coefficients
        B = design_matrix(basis, z)
        w, shift = self.loss.majorizer(self.data.y - B @ c0)
        Om = gram_matrix(basis, 1) + self.spec.c * gram_matrix(basis, cfg.penalty.k)
        terms = [(cfg.lam**2, Om, self.spec.nu)]
        c = solve_penalized_spline(B, self.data.y + shift, w, terms, c0, cfg.mm_floor, cfg.tol_objective, cfg.mm_max_iter)
        F_new = SplineFunction(basis, c)
        obj = self.objective(F_new, z)
        if obj <= obj0:
            return F_new, obj, False
        obj_start = self.objective(F_start, z)
        if obj_start <= obj0:
            return F_start, obj_start, False
        return F, obj0, False

    def chain(self, g: Path, theta: np.ndarray, inputs) -> np.ndarray:
        """Derivative of the outer input with respect to the input of node ``g``."""
        w = np.ones(self.data.n)
        p = g
        while p != ():
            f = self.bases[p]
            lo, hi = f.domain
            u = inputs[p]
            inside = (u >= lo) & (u <= hi)
            w = w * np.where(inside, design_matrix(f, np.clip(u, lo, hi), 1)[:, 1:] @ theta[self.slices[p]], 0.0)
            p = p[:-1]
        return w

    def update_group(self, g: Path, F: SplineFunction, theta: np.ndarray):
        """Linearised, norm-constrained step for the children of ``g``."""
        y, n = self.data.y, self.data.n
        z0, inputs, outputs, designs = self.forward(theta)
        sl = self.group_slice(g)
        Dg = np.hstack([designs[ch] for ch in self.spec.children(g)])
        u0 = Dg @ theta[sl]
        zc = np.clip(z0, *F.domain)
        fz = F(zc)
        dz = self.chain(g, theta, inputs)
        dF = F(zc, 1) * dz
        w, shift = self.loss.majorizer(y - fz)
        G = dF[:, None] * Dg
        Gw = G * w[:, None]
        A = Gw.T @ G / n
        b = Gw.T @ (y + shift - fz + dF * u0) / n
        g_lo, g_hi = self.end_gradient(F)
        i_lo, i_hi = int(np.argmin(z0)), int(np.argmax(z0))
        b -= 0.5 * (g_hi * dz[i_hi] * Dg[i_hi] + g_lo * dz[i_lo] * Dg[i_lo])
        obj0 = self.objective(F, z0)
        if not np.any(dF != 0):
            return theta, F, obj0, True
        try:
            target, _ = solve_norm_constrained(0.5 * (A + A.T), b, self.Q[g])
        except (RootFindingError, sla.LinAlgError, ValueError):
            return theta, F, obj0, True
        t = 1.0
        while t >= 1e-12:
            trial = self._trial(g, F, theta, target, t)
            if trial is not None and trial[2] <= obj0:
                break
            t *= 0.5
        else:
            return theta, F, obj0, False
        if t == 1.0:
            while t < 64.0:
                longer = self._trial(g, F, theta, target, 2.0 * t)
                if longer is None or longer[2] >= trial[2]:
                    break
                trial, t = longer, 2.0 * t
        cand, F_cand, obj = trial
        return cand, F_cand, obj, False

    def _trial(self, g, F, theta, target, t):
        sl = self.group_slice(g)
        cand = theta.copy()
        cand[sl] = theta[sl] + t * (target - theta[sl])
        cand = self.normalize(cand, [g])
        if cand is None:
            return None
        z = self.forward(cand)[0]
        F_cand = reknot_link(F, z, self.cfg)
        if F_cand is None:
            return None
        return cand, F_cand, self.objective(F_cand, z)

    def joint_step(self, F: SplineFunction, theta: np.ndarray, obj0: float):
        """Gauss-Newton step in every node and the outer function at once, each
        sibling group moving in the tangent space of its norm surface."""
        cfg, spec = self.cfg, self.spec
        y, n = self.data.y, self.data.n
        basis, c0 = F.basis, F.coefficients
        G, N, r = self.linearize(F, theta)
        w, shift = self.loss.majorizer(r)
        q = basis.basis_count
        Om = gram_matrix(basis, 1) + spec.c * gram_matrix(basis, cfg.penalty.k)
        t0 = max(float(c0 @ Om @ c0), cfg.mm_floor)
        P = np.zeros((G.shape[1], G.shape[1]))
        P[:q, :q] = cfg.lam**2 * spec.nu * t0 ** (spec.nu - 1.0) * Om
        Gw = G * w[:, None]
        A = Gw.T @ G / n + P
        m = A.shape[0] - q
        A[q:, q:] += 1e-12 * np.trace(A[q:, q:]) / max(m, 1) * np.eye(m)
        sol = _sym_solve(A, Gw.T @ (y + shift) / n)
        dc, du = sol[:q] - c0, N @ sol[q:]
        t = 1.0
        while t >= 1e-6:
            moved = self.move(F, theta, t * dc, t * du)
            if moved is not None:
                obj = self.objective(moved[0], self.forward(moved[1])[0])
                if obj < obj0:
                    return moved[1], moved[0], obj
            t *= 0.5
        return None

    def tangent_jacobian(self, theta: np.ndarray):
        """``(z, Jz, N)``: the outer input, its derivative with respect to the
        tangent coordinates of all sibling groups, and the block-diagonal map
        ``N`` from those coordinates to ``theta``."""
        z0, inputs, _, designs = self.forward(theta)
        cols, Ns = [], []
        for g in self.groups:
            sl = self.group_slice(g)
            Ng = sla.null_space((self.Q[g] @ theta[sl])[None, :])
            Dg = np.hstack([designs[ch] for ch in self.spec.children(g)])
            cols.append((self.chain(g, theta, inputs)[:, None] * Dg) @ Ng)
            Ns.append((sl, Ng))
        N = np.zeros((self.size, sum(Ng.shape[1] for _, Ng in Ns)))
        pos = 0
        for sl, Ng in Ns:
            N[sl, pos:pos + Ng.shape[1]] = Ng
            pos += Ng.shape[1]
        return z0, np.hstack(cols), N

    def linearize(self, F: SplineFunction, theta: np.ndarray):
        """``(G, N, r)`` as for the additive model: residuals ``r`` and their
        Jacobian ``-G`` in the outer coefficients and the tangent coordinates."""
        z0, Jz, N = self.tangent_jacobian(theta)
        lo, hi = F.domain
        zc = np.clip(z0, lo, hi)
        B = design_matrix(F.basis, zc)
        dF = np.where((z0 >= lo) & (z0 <= hi), F(zc, 1), 0.0)
        return np.hstack([B, dF[:, None] * Jz]), N, self.data.y - B @ F.coefficients

    def move(self, F: SplineFunction, theta: np.ndarray, dc: np.ndarray, du: np.ndarray):
        cand = self.normalize(theta + du)
        if cand is None:
            return None
        F_cand = reknot_link(SplineFunction(F.basis, F.coefficients + dc), self.forward(cand)[0], self.cfg)
        if F_cand is None:
            return None
        return F_cand, cand

    def extrapolate(self, F: SplineFunction, history, obj: float):
        cand = squarem_point(*history)
        if cand is None:
            return None
        cand = self.normalize(cand)
        if cand is None:
            return None
        z = self.forward(cand)[0]
        F_cand = reknot_link(F, z, self.cfg)
        if F_cand is None:
            return None
        F_cand, obj_cand, stalled = self.update_outer(F_cand, z)
        if stalled or not obj_cand < obj:
            return None
        return cand, F_cand, obj_cand


def _gam_equivalent(spec: NetworkSpec, cfg: FitConfig) -> FitConfig:
    """GAM configuration whose starts and steps coincide with a depth-1 network."""
    rho = tuple(float(np.sqrt(spec.weight((j,)))) for j in range(spec.widths[0]))
    pc = PenaltyConfig(k=cfg.penalty.k, nu1=2.0, nu2=2.0, rho0=float(np.sqrt(spec.c)), rho=rho)
    return replace(cfg, penalty=pc)


def _outer_for(net: _Net, theta: np.ndarray, cfg: FitConfig) -> SplineFunction:
    z = net.forward(theta)[0]
    lo, hi = float(z.min()), float(z.max())
    if hi - lo < 1e-10:
        lo, hi = lo - 0.5, hi + 0.5
    pad = cfg.f_domain_padding * (hi - lo)
    return linear_spline(make_uniform_basis(lo - pad, hi + pad, cfg.f_interior_knots, cfg.order))


def _pattern_starts(net: _Net, spec: NetworkSpec, cfg: FitConfig, count: int, seed: int):
    """Starts mixing linear and centred-square inner nodes with leaf signs.

    A monotone start cannot turn an inner node into a bump, so products and
    squares of differences (a common nested shape) are out of reach of the
    marginal start alone.  Every inner node is either linear or ``t^2``; every
    leaf is ``+-x`` (the first child of each group keeps +).  When there are
    more patterns than ``count`` a seeded subset is used.
    """
    inner = [p for p in net.bases if 0 < len(p) < spec.depth]
    flips = [p for p in net.bases if len(p) == spec.depth and p[-1] > 0]
    n_bits = len(inner) + len(flips)
    total = 2**n_bits
    if count <= 0:
        return []
    codes = range(total) if total <= count else np.random.default_rng(seed).choice(total, count, replace=False)
    out = []
    for code in codes:
        code = int(code)
        bits = {p: (code >> i) & 1 for i, p in enumerate(inner + flips)}
        theta = np.zeros(net.size)
        for p, b in net.bases.items():
            lo = b.domain_lo
            if len(p) == spec.depth:
                f = linear_spline(b, -1.0 if bits.get(p) else 1.0, 0.0)
            elif bits[p]:
                f = project_onto_basis(lambda t, lo=lo: t * t - lo * lo, b)
            else:
                f = linear_spline(b, 1.0, -lo)
            theta[net.slices[p]] = f.coefficients[1:]
        theta = net.normalize(theta)
        if theta is not None:
            out.append((f"pattern-{code}", _outer_for(net, theta, cfg), theta))
    return out


def _starts(net: _Net, data: Dataset, spec: NetworkSpec, cfg: FitConfig, max_starts: int, seed: int):
    """(kind, outer, theta) starting points, all satisfying the layer norms."""
    out = []
    if spec.depth == 1:
        gcfg = _gam_equivalent(spec, cfg)
        cols = [spec.leaf_map[(j,)] for j in range(spec.widths[0])]
        gdata = Dataset(data.x[:, cols], data.y)
        prob = _Problem(gdata, gcfg)
        for kind in cfg.starts:
            gm = init_additive(gdata, gcfg) if kind == "additive" else init_model(gdata, gcfg)
            F, theta = prob.theta_of(gm)
            out.append((kind, F, theta))
        return out
    # leaves follow the marginal least-squares slope of their column, inner
    # nodes start increasing and linear
    theta = np.zeros(net.size)
    x, y = data.x, data.y
    xc = x - x.mean(axis=0)
    var = np.sum(xc * xc, axis=0)
    slopes = np.where(var > 0, xc.T @ (y - y.mean()) / np.where(var > 0, var, 1.0), 0.0)
    for p, b in net.bases.items():
        if len(p) == spec.depth:
            s = slopes[spec.leaf_map[p]]
            s = s if abs(s) > 1e-12 else 1.0
        else:
            s = 1.0
        lin = linear_spline(b, s, -s * b.domain_lo)
        theta[net.slices[p]] = lin.coefficients[1:]
    theta = net.normalize(theta)
    out.append(("marginal", _outer_for(net, theta, cfg), theta))
    out.extend(_pattern_starts(net, spec, cfg, max_starts - 1, seed))
    return out


_SCREEN_SWEEPS = 10  # sweeps given to every start before pruning
_KEEP = 3


def _run(net: _Net, F: SplineFunction, theta: np.ndarray, cfg: FitConfig):
    z = net.forward(theta)[0]
    F, obj, stalled_any = net.update_outer(F, z)
    trace = [obj]
    converged = False
    sweeps = 0
    history = [theta]
    for sweeps in range(1, cfg.max_sweeps + 1):
        for g in net.groups:
            theta, F, _, st = net.update_group(g, F, theta)
            stalled_any |= st
        z = net.forward(theta)[0]
        F, obj_new, st = net.update_outer(F, z)
        stalled_any |= st
        joint = net.joint_step(F, theta, obj_new)
        if joint is not None:
            theta, F, obj_new = joint
        history.append(theta)
        if len(history) == 3:
            jump = net.extrapolate(F, history, obj_new)
            if jump is not None:
                theta, F, obj_new = jump
            history = [theta]
        trace.append(obj_new)
        if trace[-2] - obj_new <= cfg.tol_objective * abs(trace[-2]):
            converged = True
            break
    return F, theta, trace, converged, sweeps, stalled_any


def fit_nested(data: Dataset, spec: NetworkSpec, cfg: FitConfig, loss=SQUARED,
               start_from_least_squares: bool = False, max_starts: int = 16, seed: int = 0) -> FitResult:
    """Penalised least squares for a nested network by cyclic block updates.

    Each sweep updates every sibling group (depth-first, parents before
    children) with a linearised step on its norm surface, then the outer
    function.  A depth-1 network follows the GAM backfitting path exactly.
    Deeper networks are started from the marginal slopes plus up to
    ``max_starts - 1`` sign/shape patterns (see :func:`_pattern_starts`).
    With ``start_from_least_squares`` the least-squares fit is one more start
    (useful for non-quadratic losses).
    """
    if max_starts < 1:
        raise ValueError("max_starts must be >= 1")
    net = _Net(data, spec, cfg, loss)
    starts = _starts(net, data, spec, cfg, max_starts, seed)
    if start_from_least_squares:
        ls = fit_nested(data, spec, cfg, max_starts=max_starts, seed=seed)
        theta = np.concatenate([ls.model.nodes[p].coefficients[1:] for p in sorted(net.slices, key=lambda p: net.slices[p].start)])
        starts.append(("least_squares", ls.model.outer, theta))
    runs = []
    screen = len(starts) > _KEEP
    budget = replace(cfg, max_sweeps=min(cfg.max_sweeps, _SCREEN_SWEEPS)) if screen else cfg
    for kind, F0, theta0 in starts:
        F, theta, trace, converged, sweeps, stalled = _run(net, F0, theta0, budget)
        runs.append([kind, F, theta, trace, converged, sweeps, stalled])
    if screen:
        # finish only the most promising screened runs
        runs.sort(key=lambda r: r[3][-1])
        runs = runs[:_KEEP]
        for r in runs:
            if not r[4]:
                F, theta, trace, converged, sweeps, stalled = _run(
                    net, r[1], r[2], replace(cfg, max_sweeps=cfg.max_sweeps - r[5]))
                r[1:] = [F, theta, r[3] + trace[1:], converged, r[5] + sweeps, r[6] or stalled]
    best = None
    for kind, F, theta, trace, converged, sweeps, stalled in runs:
        model = net.model(F, theta, start=kind)
        res = FitResult(
            model, trace, outer_penalty(F, spec, cfg.penalty.k), converged, sweeps, stalled,
            diagnostics={"start": kind, "layer_norms": check_layer_norms(model)},
        )
        if best is None or res.objective < best.objective:
            best = res
    return best


def nested_from_gam(model: GamModel, c: float = 1.0, c_path: Mapping[Path, float] | None = None, nu: float = 1.0) -> NestedModel:
    """The depth-1 network with the GAM's link as outer function."""
    spec = NetworkSpec.additive(model.d, c, c_path, nu)
    nodes = {(j,): m for j, m in enumerate(model.components)}
    nodes[()] = model.link
    k = model.meta.get("k", 2)
    return NestedModel(nodes, spec, int(k), dict(model.meta))
