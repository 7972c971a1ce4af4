"""Personalized-PageRank feature diffusion.

``S = a (I - (1 - a) A_hat)^-1`` with teleport probability ``a`` and the
symmetrically normalized adjacency ``A_hat``.  :func:`ppr_exact` builds the
dense matrix with an LU solve and serves as the oracle; :func:`ppr_power`
evaluates ``S @ X`` as a truncated Neumann series on the tape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.linalg

from .autodiff import SparseMatrix, Tensor, _record, matmul
from .graph import Graph, sym_normalize

MAX_DENSE_NODES = 2048


@dataclass(frozen=True)
class DiffusionConfig:
    teleport: float = 0.15
    mode: Literal["exact", "power_series"] = "power_series"
    max_terms: int = 10
    tolerance: float = 1e-4
    stop_gradient: bool = False

    def __post_init__(self):
        if not 0.0 < self.teleport <= 1.0:
            raise ValueError(f"teleport must lie in (0, 1], got {self.teleport}")
        if self.max_terms < 1:
            raise ValueError("max_terms must be >= 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.mode not in ("exact", "power_series"):
            raise ValueError(f"unknown diffusion mode {self.mode!r}")

    @classmethod
    def oracle(cls, teleport: float = 0.15) -> "DiffusionConfig":
        """Settings used when the series must match the exact solve tightly."""
        return cls(teleport=teleport, max_terms=200, tolerance=1e-10)


def ppr_exact(norm_adj: SparseMatrix, teleport: float) -> np.ndarray:
    """Dense PPR matrix via LU factorization with partial pivoting."""
    n = norm_adj.rows
    if n > MAX_DENSE_NODES:
        raise ValueError(f"dense PPR solve limited to {MAX_DENSE_NODES} nodes, got {n}")
    if not 0.0 < teleport <= 1.0:
        raise ValueError(f"teleport must lie in (0, 1], got {teleport}")
    system = np.eye(n) - (1.0 - teleport) * norm_adj.to_dense()
    try:
        lu = scipy.linalg.lu_factor(system, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise np.linalg.LinAlgError(f"PPR system could not be factorized: {exc}") from None
    if np.any(np.diag(lu[0]) == 0.0):
        raise np.linalg.LinAlgError("PPR system is singular")
    s = scipy.linalg.lu_solve(lu, teleport * np.eye(n))
    residual = np.abs(system @ s - teleport * np.eye(n)).sum(axis=1).max()
    if residual >= 1e-8:
        raise np.linalg.LinAlgError(f"PPR solve residual {residual:.2e} exceeds 1e-8")
    return s


def series_terms(norm_adj: SparseMatrix, x: np.ndarray, cfg: DiffusionConfig) -> list[np.ndarray]:
    """The individual Neumann-series terms ``a (1-a)^t A_hat^t X`` that get summed.

    Stops after ``max_terms`` terms, or once the largest entry of the newest
    term falls below ``tolerance`` times the largest entry of the running sum.
    """
    return _series(norm_adj.to_scipy(), x, cfg)


def _series(op, x, cfg: DiffusionConfig) -> list[np.ndarray]:
    a = cfg.teleport
    term = a * np.asarray(x, dtype=np.float64)
    terms = [term]
    if a == 1.0:
        return terms
    running = term.copy()
    while len(terms) < cfg.max_terms:
        term = (1.0 - a) * (op @ term)
        terms.append(term)
        running += term
        acc = np.abs(running).max(initial=0.0)
        if np.abs(term).max(initial=0.0) < cfg.tolerance * acc or acc == 0.0:
            break
    return terms


def _series_sum(op, x, cfg: DiffusionConfig) -> tuple[np.ndarray, int]:
    # same stopping rule as _series, keeping only the running sum
    a = cfg.teleport
    term = a * np.asarray(x, dtype=np.float64)
    out = term.copy()
    n = 1
    if a == 1.0:
        return out, n
    while n < cfg.max_terms:
        term = op @ term
        term *= 1.0 - a
        out += term
        n += 1
        acc = np.abs(out).max(initial=0.0)
        if np.abs(term).max(initial=0.0) < cfg.tolerance * acc or acc == 0.0:
            break
    return out, n


def _fixed_series(op, x: np.ndarray, a: float, n_terms: int) -> np.ndarray:
    term = a * x
    out = term.copy()
    for _ in range(n_terms - 1):
        term = op @ term
        term *= 1.0 - a
        out += term
    return out


def mean_row(norm_adj: SparseMatrix, cfg: DiffusionConfig) -> np.ndarray:
    """The ``1 x N`` row ``r`` with ``r @ X`` equal to the node mean of the diffused ``X``.

    Diffusion is linear, so the mean over nodes of ``S X`` is ``(S^T 1 / N)^T X``;
    the series runs on the transposed operator with the same settings.
    """
    n = norm_adj.rows
    v = np.full((n, 1), 1.0 / n)
    if cfg.mode == "exact":
        return (ppr_exact(norm_adj, cfg.teleport).T @ v).T
    return _series_sum(norm_adj.transposed(), v, cfg)[0].T


def ppr_power(norm_adj: SparseMatrix, x: Tensor, cfg: DiffusionConfig) -> Tensor:
    """Truncated-series PPR diffusion of ``x`` recorded as a single tape operation.

    The backward pass applies the same truncated series with the transposed
    operator, so the gradient is exact for the map actually evaluated.
    """
    if norm_adj.cols != x.rows:
        raise ValueError(f"adjacency is {norm_adj.shape} but input has {x.rows} rows")
    if cfg.stop_gradient:
        x = x.detach()
    out, n = _series_sum(norm_adj.to_scipy(), x.data, cfg)
    a = cfg.teleport
    return _record(out, (x,), lambda g: (_fixed_series(norm_adj.transposed(), g, a, n),))


def diffuse_features(x: Tensor | Graph, cfg: DiffusionConfig, norm_adj: SparseMatrix | None = None) -> Tensor:
    """Apply PPR diffusion to a graph's features or to a hidden tensor.

    For a hidden tensor ``norm_adj`` must be given; for a graph it defaults to
    the self-loop-free symmetric normalization of its adjacency.
    """
    if isinstance(x, Graph):
        if norm_adj is None:
            norm_adj = sym_normalize(x, add_self_loops=False)
        x = x.features
    elif norm_adj is None:
        raise ValueError("diffusing a hidden tensor needs the normalized adjacency")
    if norm_adj.rows != x.rows:
        raise ValueError(f"input has {x.rows} rows for a {norm_adj.rows}-node graph")
    if cfg.mode == "exact":
        if cfg.stop_gradient:
            x = x.detach()
        return matmul(Tensor(ppr_exact(norm_adj, cfg.teleport)), x)
    return ppr_power(norm_adj, x, cfg)
