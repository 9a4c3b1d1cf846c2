"""Distribute rotational and translational errors along basis cycles.

Every non-tree edge of the filtered graph closes exactly one basis
cycle with the spanning tree. Each cycle's residual rotation is split
across its edges in fractions proportional to their reprojection
errors (log/exp fractional rotations); edges shared by several cycles
take the chordal mean of their per-cycle estimates, iterated to
convergence. Translations are then decoupled about the inter-marker
midpoint and re-solved as a quadratic program with one linear closure
constraint per cycle (KKT system, Lagrange multipliers).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateCycle, RankDeficientCycles
from .geometry import Transform4, matrix_to_rodrigues, rodrigues_to_matrix
from .posegraph import PoseGraph, SpanningTree

WEIGHT_FLOOR = 1e-12  # px^2, keeps alpha/w defined on zero-error edges
CLOSURE_TARGET = 1e-9  # rad, max cycle residual angle at convergence
STALL_TOL = 1e-13  # rad, per-edge change below which iteration has stalled
MAX_ROTATION_ITERS = 100
CONSISTENT_ANGLE = 1e-12  # rad, cycles below this need no correction


@dataclass
class CycleBasis:
    cycles: list  # node tuples; consecutive nodes (wrapping) are graph edges
    generator_edges: list  # the non-tree (i, j), i < j, that created each cycle

    def __len__(self):
        return len(self.cycles)


@dataclass
class CycleWeights:
    """Per-cycle normalized confidences w and correction fractions alpha."""

    edges: list  # directed (from, to) factor keys in traversal order
    w: np.ndarray
    alpha: np.ndarray


@dataclass
class CorrectionResult:
    graph: PoseGraph
    basis: CycleBasis
    cycle_weights: list  # CycleWeights per cycle
    rotations: dict  # directed edge -> corrected rotation
    decoupled: dict  # directed edge -> decoupled translation
    translations: dict  # directed edge -> corrected translation
    iterations: int = 0


def compute_cycle_basis(g: PoseGraph, tree: SpanningTree) -> CycleBasis:
    """One cycle per non-tree edge: tree path between its endpoints + the edge.

    Cycles start at the tree junction of the two endpoints and traverse
    the generator edge from its lower to its higher node id.
    """
    tree_edges = set(tree.edges())
    cycles, gens = [], []
    for (u, v) in g.undirected_edges():
        if (u, v) in tree_edges:
            continue
        up = tree.path_to_root(u)
        vp = tree.path_to_root(v)
        in_up = {n: k for k, n in enumerate(up)}
        vi = 0
        while vp[vi] not in in_up:
            vi += 1
        lca = vp[vi]
        down_to_u = up[:in_up[lca] + 1][::-1]  # lca .. u
        v_side = vp[:vi]  # v .. child of lca
        cycles.append(tuple(down_to_u + v_side))
        gens.append((u, v))
    return CycleBasis(cycles=cycles, generator_edges=gens)


def _factor_keys(cycle):
    """Directed edges whose transforms compose to identity around the cycle.

    Factor k maps frame n_{k+1} into frame n_k, so the left-to-right
    matrix product of the factors is a map of frame n_0 onto itself.
    """
    m = len(cycle)
    return [(cycle[(k + 1) % m], cycle[k]) for k in range(m)]


def cycle_weights(g: PoseGraph, cycle) -> CycleWeights:
    keys = _factor_keys(cycle)
    errs = np.array([max(g.weight(a, b), WEIGHT_FLOOR) for (a, b) in keys])
    inv = 1.0 / errs
    return CycleWeights(edges=keys, w=inv / inv.sum(), alpha=errs / errs.sum())


def _rotation_angle(R):
    # atan2 of the skew/symmetric parts stays exact near identity, where the
    # arccos-of-trace form bottoms out around sqrt(eps)
    s = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return abs(float(np.arctan2(np.linalg.norm(s), 0.5 * (np.trace(R) - 1.0))))


def _chordal_mean(mats):
    if len(mats) == 1:
        return mats[0]
    m = np.mean(mats, axis=0)
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def distribute_rotation_errors(g: PoseGraph, basis: CycleBasis,
                               max_iters: int = MAX_ROTATION_ITERS,
                               closure_target: float = CLOSURE_TARGET):
    """Corrected per-edge rotations closing every basis cycle.

    Returns ({directed edge: rotation}, iterations). Iterates until the
    largest cycle residual angle drops below `closure_target`, the
    per-edge updates stall, or `max_iters` passes. A no-op (original
    rotations, zero iterations) when the basis is empty or every cycle
    already composes to identity.
    """
    rot = {key: g.pose(*key).rotation.copy() for key in g.edges}
    if not basis.cycles:
        return rot, 0
    alphas = [cycle_weights(g, c).alpha for c in basis.cycles]
    iterations = 0
    for _ in range(max_iters):
        proposals = {}
        max_residual = 0.0
        for cycle, alpha in zip(basis.cycles, alphas):
            keys = _factor_keys(cycle)
            m = len(keys)
            prefix = [np.eye(3)]
            for k in range(m):
                prefix.append(prefix[k] @ rot[keys[k]])
            residual_angle = _rotation_angle(prefix[m])
            max_residual = max(max_residual, residual_angle)
            # consistent cycles still propose their current rotations: they
            # anchor shared edges in the averaging step
            suffix = [np.eye(3)] * (m + 1)
            for k in range(m - 1, -1, -1):
                suffix[k] = rot[keys[k]] @ suffix[k + 1]
            for k in range(m):
                err = prefix[k + 1].T @ suffix[k + 1].T
                r_err = matrix_to_rodrigues(err)
                if np.linalg.norm(r_err) > np.pi - 1e-7:
                    raise DegenerateCycle(
                        f"cycle {cycle}: residual rotation at edge {keys[k]} is ~180 deg")
                estimate = rot[keys[k]] @ rodrigues_to_matrix(alpha[k] * r_err)
                a, b = keys[k]
                if a < b:
                    proposals.setdefault((a, b), []).append(estimate)
                else:
                    proposals.setdefault((b, a), []).append(estimate.T)
        if max_residual < closure_target:
            break
        iterations += 1
        max_change = 0.0
        for (i, j), cands in proposals.items():
            new = _chordal_mean(cands)
            max_change = max(max_change, _rotation_angle(new @ rot[(i, j)].T))
            rot[(i, j)] = new
            rot[(j, i)] = new.T
        if max_change < STALL_TOL:
            break
    return rot, iterations


def decouple_translations(g: PoseGraph, rotations: dict) -> dict:
    """Translations re-expressed so the rotation change pivots about the
    midpoint of the two marker origins (in each transform's input frame)."""
    out = {}
    for key in g.edges:
        pose = g.pose(*key)
        R_old = pose.rotation
        t_old = pose.translation
        midpoint = -0.5 * (R_old.T @ t_old)
        out[key] = (R_old - rotations[key]) @ midpoint + t_old
    return out


def optimize_translations(g: PoseGraph, basis: CycleBasis, rotations: dict,
                          decoupled: dict, weighted: bool = False) -> dict:
    """Closest translations to the decoupled ones that close every cycle.

    Minimizes sum ||t - t_decoupled||^2 (optionally weighted by inverse
    edge error) subject to, per cycle, the prefix-rotation-weighted sum
    of factor translations vanishing; solved as one dense KKT system.
    """
    canon = g.undirected_edges()
    col = {e: 3 * k for k, e in enumerate(canon)}
    n_x = 3 * len(canon)
    b = np.concatenate([decoupled[e] for e in canon]) if canon else np.zeros(0)

    rows = []
    for cycle in basis.cycles:
        keys = _factor_keys(cycle)
        block = np.zeros((3, n_x))
        prefix = np.eye(3)
        for key in keys:
            a, bb = key
            if a < bb:
                block[:, col[(a, bb)]:col[(a, bb)] + 3] += prefix
            else:
                # reversed factor: t(a->b) = -R(a->b) @ t(b->a)
                block[:, col[(bb, a)]:col[(bb, a)] + 3] += prefix @ (-rotations[key])
            prefix = prefix @ rotations[key]
        rows.append(block)

    out = dict(decoupled)
    if rows:
        A = np.vstack(rows)
        scale = max(np.linalg.norm(b), 1.0)
        if np.linalg.norm(A @ b) > 1e-12 * scale:
            if weighted:
                wdiag = np.repeat([1.0 / max(g.weight(*e), WEIGHT_FLOOR) for e in canon], 3)
            else:
                wdiag = np.ones(n_x)
            n_c = A.shape[0]
            kkt = np.zeros((n_x + n_c, n_x + n_c))
            kkt[:n_x, :n_x] = np.diag(2.0 * wdiag)
            kkt[:n_x, n_x:] = A.T
            kkt[n_x:, :n_x] = A
            rhs = np.concatenate([2.0 * wdiag * b, np.zeros(n_c)])
            try:
                sol = np.linalg.solve(kkt, rhs)
            except np.linalg.LinAlgError as exc:
                raise RankDeficientCycles("translation KKT system is singular") from exc
            x = sol[:n_x]
            for e in canon:
                out[e] = x[col[e]:col[e] + 3].copy()
    for (i, j) in canon:
        out[(j, i)] = -(rotations[(j, i)] @ out[(i, j)])
    return out


def correct_graph(g: PoseGraph, tree: SpanningTree, basis: CycleBasis | None = None,
                  weighted_translations: bool = False,
                  max_iters: int = MAX_ROTATION_ITERS,
                  closure_target: float = CLOSURE_TARGET) -> CorrectionResult:
    """Full per-component correction pass: rotations, decoupling, translations."""
    if basis is None:
        basis = compute_cycle_basis(g, tree)
    rotations, iterations = distribute_rotation_errors(g, basis, max_iters, closure_target)
    decoupled = decouple_translations(g, rotations)
    translations = optimize_translations(g, basis, rotations, decoupled,
                                         weighted=weighted_translations)
    corrected = PoseGraph()
    corrected.nodes = set(g.nodes)
    for (i, j) in g.undirected_edges():
        pose = Transform4.from_rt(rotations[(i, j)], translations[(i, j)])
        corrected.add_edge(i, j, pose, g.weight(i, j))
    weights = [cycle_weights(g, c) for c in basis.cycles]
    return CorrectionResult(graph=corrected, basis=basis, cycle_weights=weights,
                            rotations=rotations, decoupled=decoupled,
                            translations=translations, iterations=iterations)


def cycle_closure_residual(g: PoseGraph, cycle) -> float:
    """Frobenius distance from identity of the composed cycle transform."""
    total = np.eye(4)
    for key in _factor_keys(cycle):
        total = total @ g.pose(*key).m
    return float(np.linalg.norm(total - np.eye(4)))
