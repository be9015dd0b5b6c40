"""Similarity-graph construction by clustering with adaptive neighbors.

Learns a row-stochastic sparse similarity matrix S from a sample matrix:
each row solves  min_s  sum_j d_ij s_ij + gamma_i s_ij^2  on the simplex,
which has a closed form with exactly k nonzero neighbor weights. A rank
constraint on the graph Laplacian (number of zero eigenvalues = number of
connected components) is enforced by an outer loop that augments the row
distances with a spectral term and doubles/halves its weight until the
graph splits into exactly the requested number of components.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class DegenerateRow(ValueError):
    """All k+1 nearest distances in a row are equal; closed form is 0/0."""


class RankNotAchieved(RuntimeError):
    def __init__(self, requested_c: int, achieved_c: int, iterations: int):
        self.requested_c = requested_c
        self.achieved_c = achieved_c
        self.iterations = iterations
        super().__init__(
            f"could not reach {requested_c} connected components after "
            f"{iterations} outer iterations (achieved {achieved_c})"
        )


@dataclass(frozen=True)
class CanGraph:
    """Learned similarity matrix with its Laplacian and component count."""

    s: np.ndarray                 # (n, n), rows sum to 1, zero diagonal
    gamma: np.ndarray             # per-row regularizer from the closed form
    laplacian: np.ndarray         # L = D - (S + S^T)/2
    n_components: int
    lam: float = 0.0              # final spectral weight (0 when no outer loop ran)

    @property
    def n(self) -> int:
        return self.s.shape[0]

    def edges(self, eps: float = 1e-10) -> list[tuple[int, int, float]]:
        """Undirected edges of the symmetrized graph with their weights."""
        w = 0.5 * (self.s + self.s.T)
        out = []
        for i in range(self.n):
            for j in range(i + 1, self.n):
                if w[i, j] > eps:
                    out.append((i, j, float(w[i, j])))
        return out


def pairwise_distances(z: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """Squared Euclidean distance matrix d_ij = ||z_i - z_j||^2."""
    if metric != "euclidean":
        raise ValueError(f"unsupported metric {metric!r}")
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError(f"sample matrix must be (n >= 2, m), got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("sample matrix contains non-finite entries")
    sq = (z * z).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _solve_row(dist_row: np.ndarray, i: int, k: int, eps: float = 1e-12):
    """Closed-form k-sparse simplex solution for one row.

    With d_(1) <= ... <= d_(n-1) the off-diagonal distances in ascending
    order, the optimum puts weight (d_(k+1) - d_(j))_+ / (k d_(k+1) -
    sum_{h<=k} d_(h)) on the j-th nearest neighbor and fixes gamma at half
    the denominator. Fully tied rows (zero denominator) fall back to a
    uniform split over the tied set, the limit of the closed form.
    """
    n = dist_row.shape[0]
    others = np.delete(np.arange(n), i)
    d = dist_row[others]
    order = np.argsort(d, kind="stable")
    d_sorted = d[order]
    d_kp1 = d_sorted[k]
    denom = k * d_kp1 - d_sorted[:k].sum()
    s_row = np.zeros(n)
    if denom <= eps:
        tied = others[np.abs(d - d_sorted[0]) <= eps]
        s_row[tied] = 1.0 / tied.size
        gamma = 0.0
    else:
        val = (d_kp1 - d_sorted[:k]) / denom
        s_row[others[order[:k]]] = val
        gamma = denom / 2.0
    return s_row, gamma


def assign_neighbors(d: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise adaptive neighbor assignment from a distance matrix.

    Returns (S, gamma): S has exactly k nonzeros per row (modulo fully tied
    rows), each row on the probability simplex, zero diagonal.
    """
    n = d.shape[0]
    if d.shape != (n, n):
        raise ValueError(f"distance matrix must be square, got {d.shape}")
    if not (1 <= k <= n - 1):
        raise ValueError(f"k must be in [1, {n - 1}], got {k}")
    s = np.zeros((n, n))
    gamma = np.zeros(n)
    for i in range(n):
        s[i], gamma[i] = _solve_row(d[i], i, k)
    return s, gamma


def laplacian_of(s: np.ndarray) -> np.ndarray:
    w = 0.5 * (s + s.T)
    return np.diag(w.sum(axis=1)) - w


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[ra] = rb


def count_components(s: np.ndarray, eps: float = 1e-10) -> tuple[int, np.ndarray]:
    """Connected components of the symmetrized graph, edges where s_ij + s_ji > eps."""
    n = s.shape[0]
    uf = _UnionFind(n)
    sym = s + s.T
    ii, jj = np.where(np.triu(sym, 1) > eps)
    for a, b in zip(ii, jj):
        uf.union(int(a), int(b))
    roots = [uf.find(i) for i in range(n)]
    uniq = {r: c for c, r in enumerate(dict.fromkeys(roots))}
    labels = np.array([uniq[r] for r in roots])
    return len(uniq), labels


def enforce_rank_constraint(s: np.ndarray, d: np.ndarray, c: int, k: int,
                            gamma: np.ndarray | None = None,
                            max_outer: int = 50) -> CanGraph:
    """Tune the spectral-penalty weight until the graph has exactly c components.

    Each outer iteration takes the c smallest-eigenvalue eigenvectors F of the
    current Laplacian, augments the row distances with the pairwise spectral
    distances ||f_i - f_j||^2 scaled by lam, and re-solves all rows. lam
    doubles while the graph has too few components and halves when it
    over-fragments. Raises RankNotAchieved when max_outer passes without an
    exact match.
    """
    n = d.shape[0]
    if not (1 <= c <= n):
        raise ValueError(f"c must be in [1, {n}], got {c}")
    if gamma is None:
        _, gamma = assign_neighbors(d, k)
    lam = float(np.mean(gamma)) if np.mean(gamma) > 0 else 1.0
    achieved = None
    for _ in range(max_outer):
        n_comp, _ = count_components(s)
        achieved = n_comp
        if n_comp == c:
            return CanGraph(s=s, gamma=gamma, laplacian=laplacian_of(s),
                            n_components=n_comp, lam=lam)
        lap = laplacian_of(s)
        evals, evecs = np.linalg.eigh(lap)
        f = evecs[:, :c]
        if n_comp < c:
            lam *= 2.0
        else:
            lam *= 0.5
        d_aug = d + lam * pairwise_distances(f)
        s, gamma = assign_neighbors(d_aug, k)
    n_comp, _ = count_components(s)
    if n_comp == c:
        return CanGraph(s=s, gamma=gamma, laplacian=laplacian_of(s),
                        n_components=n_comp, lam=lam)
    raise RankNotAchieved(requested_c=c, achieved_c=n_comp, iterations=max_outer)


def build_can_graph(z: np.ndarray, c: int, k: int, max_outer: int = 50) -> CanGraph:
    """Full pipeline: distances -> adaptive neighbors -> rank-constrained graph."""
    d = pairwise_distances(z)
    s, gamma = assign_neighbors(d, k)
    return enforce_rank_constraint(s, d, c, k, gamma=gamma, max_outer=max_outer)


def adaptive_k_select(d: np.ndarray, k_candidates) -> int:
    """Pick k by a local-density consistency score.

    For each candidate k, the local density at i is the inverse mean of its k
    smallest neighbor distances; the score is the mean over i of the ratio of
    that density to the mean density among those k neighbors. Consistent
    neighborhood scales score near 1; mixing across density scales drags the
    ratio down. Ties break toward smaller k.
    """
    cands = list(k_candidates)
    if not cands:
        raise ValueError("k_candidates must be non-empty")
    n = d.shape[0]
    eps = 1e-12
    best_k, best_score = None, -np.inf
    for k in sorted(cands):
        if not (1 <= k <= n - 1):
            raise ValueError(f"candidate k={k} out of range [1, {n - 1}]")
        dens = np.zeros(n)
        nbrs = []
        for i in range(n):
            others = np.delete(np.arange(n), i)
            order = np.argsort(d[i][others], kind="stable")[:k]
            idx = others[order]
            nbrs.append(idx)
            dens[i] = 1.0 / (d[i][idx].mean() + eps)
        ratios = np.array([dens[i] / (dens[nbrs[i]].mean() + eps) for i in range(n)])
        score = float(ratios.mean())
        if score > best_score + 1e-12:
            best_score = score
            best_k = k
    return int(best_k)


def save_can_graph(graph: CanGraph, c_requested: int, path) -> None:
    """Output JSON: {n, c_requested, c_achieved, edges: [{i, j, s_ij}], gamma: [...]}."""
    payload = {
        "n": graph.n,
        "c_requested": c_requested,
        "c_achieved": graph.n_components,
        "edges": [{"i": i, "j": j, "s_ij": w} for i, j, w in graph.edges()],
        "gamma": graph.gamma.tolist(),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f)
        f.write("\n")
