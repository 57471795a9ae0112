"""Random-walk re-ranking across the drone/satellite similarity graph.

A column-stochastic transition matrix is built from cosine similarities in
the satellite-drone embedding space (top-k sparsified, symmetrized, column
normalized). A query starts the walk by placing weight on its nearest drone
nodes, measured in the ground-drone space; after the walk converges the
satellite-node weights give the ranking. The walk solves
f <- alpha * S @ f + (1 - alpha) * f0, either by iteration or via the linear
system (I - alpha * S) x = f0, which shares its fixed point up to scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataspace import DRONE, SATELLITE
from .encoder import l2_normalize
from .ranking import RankingList, rank_gallery

EMB_MAGIC = "#plcd-emb v1"


@dataclass(frozen=True)
class DiffusionConfig:
    alpha: float = 0.9
    gamma: float = 3.0
    k_graph: int = 10
    k_init: int = 10
    max_iters: int = 1000
    tol: float = 1e-9
    closed_form: bool = True
    closed_form_cap: int = 2000

    def validate(self) -> None:
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must be in (0, 1) (got {self.alpha})")
        if self.k_graph < 1:
            raise ValueError(f"k_graph must be >= 1 (got {self.k_graph})")
        if self.k_init < 1:
            raise ValueError(f"k_init must be >= 1 (got {self.k_init})")
        if self.tol <= 0:
            raise ValueError(f"tol must be positive (got {self.tol})")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1 (got {self.max_iters})")


@dataclass
class TransitionGraph:
    """Column-stochastic transition matrix plus node bookkeeping.

    Nodes are ordered drones first, satellites after; ``node_ids`` maps node
    index to record id.
    """

    matrix: np.ndarray
    node_ids: list[int]
    node_views: list[str]

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def satellite_indices(self) -> list[int]:
        return [i for i, v in enumerate(self.node_views) if v == SATELLITE]

    def drone_indices(self) -> list[int]:
        return [i for i, v in enumerate(self.node_views) if v == DRONE]


@dataclass
class DiffusionResult:
    state: np.ndarray
    converged: bool
    iterations: int


def _normalized_rows(embs: Sequence[np.ndarray], what: str) -> np.ndarray:
    rows = []
    for i, e in enumerate(embs):
        n = float(np.linalg.norm(e))
        if n < 1e-12:
            raise ValueError(f"zero-norm embedding at {what} index {i}")
        rows.append(e / n)
    return np.stack(rows)


def build_graph(drone_embs: Sequence[np.ndarray], sat_embs: Sequence[np.ndarray],
                drone_ids: Sequence[int], sat_ids: Sequence[int],
                k_graph: int) -> TransitionGraph:
    """Top-k cosine graph over drones + satellites, symmetrized, column-stochastic.

    Negative similarities are clamped to zero after neighbor selection; a
    column left all-zero falls back to uniform 1/k over that node's k nearest
    neighbors regardless of sign, so every column sums to one.
    """
    n_drone, n_sat = len(drone_embs), len(sat_embs)
    n = n_drone + n_sat
    if n < 2:
        raise ValueError(f"graph needs at least 2 nodes (got {n})")
    if not 1 <= k_graph < n:
        raise ValueError(f"k_graph must be in [1, {n - 1}] (got {k_graph})")
    emb = _normalized_rows(list(drone_embs) + list(sat_embs), "graph node")
    sims = emb @ emb.T
    np.fill_diagonal(sims, -np.inf)

    neighbors = []
    affinity = np.zeros((n, n))
    for i in range(n):
        order = sorted(range(n), key=lambda j: (-sims[i, j], j))
        top = [j for j in order if j != i][:k_graph]
        neighbors.append(top)
        for j in top:
            affinity[i, j] = max(float(sims[i, j]), 0.0)

    affinity = (affinity + affinity.T) / 2.0
    col_sums = affinity.sum(axis=0)
    for j in range(n):
        if col_sums[j] <= 0.0:
            affinity[:, j] = 0.0
            affinity[neighbors[j], j] = 1.0 / len(neighbors[j])
            col_sums[j] = affinity[:, j].sum()
    matrix = affinity / col_sums

    node_ids = [int(i) for i in drone_ids] + [int(i) for i in sat_ids]
    node_views = [DRONE] * n_drone + [SATELLITE] * n_sat
    return TransitionGraph(matrix=matrix, node_ids=node_ids, node_views=node_views)


def init_state(query_emb: np.ndarray, drone_gd_embs: Sequence[np.ndarray],
               cfg: DiffusionConfig, total_nodes: int) -> np.ndarray:
    """Initial walk weights: clamped gd-space similarity ** gamma on the
    k_init nearest drone nodes, zero elsewhere (satellites included)."""
    cfg.validate()
    if len(drone_gd_embs) == 0:
        raise ValueError("init_state needs at least one drone node")
    q = l2_normalize(np.asarray(query_emb, dtype=float))
    sims = _normalized_rows(drone_gd_embs, "drone(gd)") @ q
    order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))
    nearest = order[: min(cfg.k_init, len(sims))]
    f0 = np.zeros(total_nodes)
    for i in nearest:
        f0[i] = max(float(sims[i]), 0.0) ** cfg.gamma
    return f0


def diffuse_iterative(matrix: np.ndarray, f0: np.ndarray, alpha: float,
                      max_iters: int, tol: float) -> DiffusionResult:
    """Fixed-point iteration of the restarted walk; sup-norm stopping rule."""
    f = f0.copy()
    for it in range(1, max_iters + 1):
        nxt = alpha * (matrix @ f) + (1.0 - alpha) * f0
        delta = float(np.max(np.abs(nxt - f)))
        f = nxt
        if delta < tol:
            return DiffusionResult(state=f, converged=True, iterations=it)
    return DiffusionResult(state=f, converged=False, iterations=max_iters)


def diffuse_closed_form(matrix: np.ndarray, f0: np.ndarray, alpha: float,
                        cap: int = 2000) -> np.ndarray:
    """Solve (I - alpha * S) x = f0; x is the walk's limit up to scale."""
    n = matrix.shape[0]
    if n > cap:
        raise ValueError(f"graph size {n} exceeds the direct-solve cap {cap}")
    return np.linalg.solve(np.eye(n) - alpha * matrix, f0)


def rank_satellites(state: np.ndarray, graph: TransitionGraph,
                    query_id: int) -> RankingList:
    """Restrict the converged state to satellite nodes and sort descending."""
    sat_idx = graph.satellite_indices()
    if not sat_idx:
        raise ValueError("graph contains no satellite nodes")
    ids = [graph.node_ids[i] for i in sat_idx]
    weights = [float(state[i]) for i in sat_idx]
    degenerate = all(w == 0.0 for w in weights)
    return rank_gallery(query_id, ids, weights, degenerate=degenerate)


# ---------------------------------------------------------------------------
# cached gallery index and the per-query flow
# ---------------------------------------------------------------------------

@dataclass
class DiffusionIndex:
    """One-time gallery artifacts shared by every query: the sd-space graph
    and the gd-space drone embeddings used for walk initialization."""

    graph: TransitionGraph | None
    drone_gd_embs: list[np.ndarray]
    sat_ids: list[int]
    cfg: DiffusionConfig


def build_index(drone_sd_embs: Sequence[np.ndarray], sat_sd_embs: Sequence[np.ndarray],
                drone_gd_embs: Sequence[np.ndarray], drone_ids: Sequence[int],
                sat_ids: Sequence[int], cfg: DiffusionConfig) -> DiffusionIndex:
    cfg.validate()
    if len(drone_sd_embs) == 0:
        graph = None  # queries degrade to zero-weight satellite rankings
    else:
        graph = build_graph(drone_sd_embs, sat_sd_embs, drone_ids, sat_ids,
                            min(cfg.k_graph, len(drone_ids) + len(sat_ids) - 1))
    return DiffusionIndex(graph=graph, drone_gd_embs=list(drone_gd_embs),
                          sat_ids=[int(i) for i in sat_ids], cfg=cfg)


def query(index: DiffusionIndex, query_id: int, query_emb: np.ndarray,
          alpha: float | None = None) -> RankingList:
    """Rank the satellite gallery for one ground query.

    Drone reference records enter only through their embeddings; their
    identity labels are never consulted. With no drone references the walk
    cannot reach any satellite, and the result is a degenerate (zero-score)
    ranking ordered by gallery id.
    """
    cfg = index.cfg
    a = cfg.alpha if alpha is None else alpha
    if index.graph is None:
        return rank_gallery(query_id, index.sat_ids, [0.0] * len(index.sat_ids),
                            degenerate=True)
    f0 = init_state(query_emb, index.drone_gd_embs, cfg, index.graph.size)
    if cfg.closed_form:
        state = diffuse_closed_form(index.graph.matrix, f0, a, cfg.closed_form_cap)
    else:
        state = diffuse_iterative(index.graph.matrix, f0, a,
                                  cfg.max_iters, cfg.tol).state
    return rank_satellites(state, index.graph, query_id)


# ---------------------------------------------------------------------------
# embedding exchange files
# ---------------------------------------------------------------------------

def format_embeddings(entries: Sequence[tuple[int, str, int, np.ndarray]]) -> str:
    """Entries are (record id, view, landmark-or-0, vector)."""
    if not entries:
        raise ValueError("no embeddings to write")
    dim = len(entries[0][3])
    lines = [f"{EMB_MAGIC} {len(entries)} {dim}"]
    for rid, view, landmark, vec in entries:
        values = " ".join(repr(float(v)) for v in vec)
        lines.append(f"{rid} {view} {landmark} {values}")
    return "\n".join(lines) + "\n"


def write_embeddings(path, entries) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_embeddings(entries))


def read_embeddings(path) -> list[tuple[int, str, int, np.ndarray]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith(EMB_MAGIC):
        raise ValueError(f"{path}: missing '{EMB_MAGIC}' header")
    count, dim = int(lines[0].split()[2]), int(lines[0].split()[3])
    if len(lines) - 1 != count:
        raise ValueError(f"{path}: header promises {count} entries, found {len(lines) - 1}")
    out = []
    for ln in lines[1:]:
        tok = ln.split()
        vec = np.array([float(t) for t in tok[3:]])
        if vec.size != dim:
            raise ValueError(f"{path}: entry {tok[0]} has {vec.size} dims, needs {dim}")
        out.append((int(tok[0]), tok[1], int(tok[2]), vec))
    return out
