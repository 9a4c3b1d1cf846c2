"""Directed pose graph over markers: best relative poses as weighted edges.

Both edge directions are stored (inverse pose, equal weight). The
starting node of each connected component is the one minimizing the sum
of shortest-path costs to every other node (all-pairs Floyd-Warshall);
initial marker poses are composed along the shortest-path tree rooted
there, and non-tree edges far outside the tree-weight distribution are
dropped before cycle correction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Transform4

OUTLIER_SIGMA = 2.58  # 99% confidence interval on the tree-edge weight mean


class PoseGraph:
    """Markers as nodes; edges[(i, j)] = (pose marker i -> marker j, weight px^2)."""

    def __init__(self):
        self.nodes = set()
        self.edges = {}

    def add_edge(self, i: int, j: int, pose: Transform4, weight: float):
        self.nodes.add(i)
        self.nodes.add(j)
        self.edges[(i, j)] = (pose, weight)
        self.edges[(j, i)] = (pose.inverse(), weight)

    def pose(self, i: int, j: int) -> Transform4:
        return self.edges[(i, j)][0]

    def weight(self, i: int, j: int) -> float:
        return self.edges[(i, j)][1]

    def neighbors(self, i: int):
        return sorted(j for (a, j) in self.edges if a == i)

    def undirected_edges(self):
        return sorted((i, j) for (i, j) in self.edges if i < j)

    def subgraph(self, nodes) -> "PoseGraph":
        keep = set(nodes)
        g = PoseGraph()
        g.nodes = set(keep)
        g.edges = {(i, j): v for (i, j), v in self.edges.items() if i in keep and j in keep}
        return g

    def copy(self) -> "PoseGraph":
        g = PoseGraph()
        g.nodes = set(self.nodes)
        g.edges = dict(self.edges)
        return g


@dataclass
class SpanningTree:
    root: int
    parent: dict  # node -> parent node (root absent)
    depth: dict  # node -> hops from root

    def edges(self):
        """Undirected tree edges as sorted (min, max) pairs."""
        return sorted((min(c, p), max(c, p)) for c, p in self.parent.items())

    def path_to_root(self, node):
        path = [node]
        while path[-1] != self.root:
            path.append(self.parent[path[-1]])
        return path

    def max_depth(self):
        return max(self.depth.values()) if self.depth else 0


def build_graph(best_edges: dict) -> PoseGraph:
    """Materialize both directions from the per-pair best edges (i < j keys).

    Edge weights are the cross-validated mean reprojection errors so the
    tree, outlier filter, and cycle fractions compare pairs on a common
    per-frame scale.
    """
    g = PoseGraph()
    for (i, j), e in sorted(best_edges.items()):
        g.add_edge(i, j, e.rel, e.weight)
    return g


def connected_components(g: PoseGraph):
    """Components sorted by (descending size, smallest id); nodes sorted."""
    seen = set()
    comps = []
    adj = {n: [] for n in g.nodes}
    for (i, j) in g.edges:
        adj[i].append(j)
    for start in sorted(g.nodes):
        if start in seen:
            continue
        stack = [start]
        comp = set()
        while stack:
            n = stack.pop()
            if n in comp:
                continue
            comp.add(n)
            stack.extend(m for m in adj[n] if m not in comp)
        seen |= comp
        comps.append(sorted(comp))
    comps.sort(key=lambda c: (-len(c), c[0]))
    return comps


def _dijkstra_tree(g: PoseGraph, nodes, root):
    dist = {n: np.inf for n in nodes}
    dist[root] = 0.0
    parent = {}
    depth = {root: 0}
    visited = set()
    while len(visited) < len(nodes):
        u = min((n for n in nodes if n not in visited), key=lambda n: (dist[n], n))
        if not np.isfinite(dist[u]):
            break
        visited.add(u)
        for v in g.neighbors(u):
            if v in visited or v not in dist:
                continue
            nd = dist[u] + g.weight(u, v)
            if nd < dist[v] or (nd == dist[v] and v in parent and u < parent[v]):
                dist[v] = nd
                parent[v] = u
                depth[v] = depth[u] + 1
    return parent, depth


def choose_start_node(g: PoseGraph, forced_root: int | None = None):
    """Root minimizing the total shortest-path cost to all nodes, plus its tree.

    All-pairs distances come from Floyd-Warshall on the component; ties
    break toward the lowest marker id. The graph must be connected.
    """
    nodes = sorted(g.nodes)
    if not nodes:
        raise ValueError("empty graph")
    idx = {n: k for k, n in enumerate(nodes)}
    n = len(nodes)
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    for (i, j), (_, w) in g.edges.items():
        dist[idx[i], idx[j]] = w
    for k in range(n):
        dist = np.minimum(dist, dist[:, k:k + 1] + dist[k:k + 1, :])
    if not np.isfinite(dist).all():
        raise ValueError("graph is not connected; split into components first")
    if forced_root is not None:
        if forced_root not in g.nodes:
            raise ValueError(f"forced root {forced_root} not in graph")
        root = forced_root
    else:
        costs = dist.sum(axis=0)
        root = nodes[int(np.argmin(costs))]  # argmin takes the first (lowest id) on ties
    parent, depth = _dijkstra_tree(g, nodes, root)
    return root, SpanningTree(root=root, parent=parent, depth=depth)


def filter_outliers(g: PoseGraph, tree: SpanningTree) -> PoseGraph:
    """Drop non-tree edges with weight beyond mean + 2.58 sigma of tree weights."""
    tree_edges = set(tree.edges())
    weights = np.array([g.weight(i, j) for (i, j) in tree_edges])
    if weights.size == 0:
        return g.copy()
    mu = float(weights.mean())
    sigma = float(weights.std())
    limit = mu + OUTLIER_SIGMA * sigma
    out = g.copy()
    for (i, j) in g.undirected_edges():
        if (i, j) in tree_edges:
            continue
        if g.weight(i, j) > limit:
            del out.edges[(i, j)]
            del out.edges[(j, i)]
    return out


def initial_marker_poses(g: PoseGraph, tree: SpanningTree) -> dict:
    """marker -> world poses composed along the tree; the root is the world origin.

    Each child pose is the parent pose composed with the child -> parent
    edge, so applying it to marker-frame corners lands them in the root
    (world) frame.
    """
    poses = {tree.root: Transform4.identity()}
    pending = sorted(tree.parent, key=lambda n: tree.depth[n])
    for node in pending:
        parent = tree.parent[node]
        poses[node] = poses[parent] @ g.pose(node, parent)
    return poses
