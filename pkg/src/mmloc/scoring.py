"""Orthogonal-projection proposal scoring (OPS) and the query ranking loss.

The query vectors of one category span a subspace. Every proposal vector is
projected onto it and the projection is scored against the proposal itself.
The projector carries no parameters of its own.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DegenerateQueryError, ShapeMismatchError

DEFAULT_RIDGE = 1e-6
COND_LIMIT = 1e8
M_PLUS = 0.3
M_MINUS = 0.7


def _as_tensor(x, dtype=torch.float64):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def basis_matrix(queries):
    """Stack query vectors as columns of a (d, k) matrix."""
    if isinstance(queries, torch.Tensor) and queries.dim() == 2:
        return queries
    if isinstance(queries, np.ndarray) and queries.ndim == 2:
        return torch.as_tensor(queries)
    cols = [_as_tensor(q).reshape(-1) for q in queries]
    if not cols:
        raise DegenerateQueryError("at least one query vector is required")
    if len({c.shape[0] for c in cols}) != 1:
        raise ShapeMismatchError("query vectors have different lengths")
    return torch.stack(cols, dim=1)


@dataclass
class ProjectionOperator:
    P: torch.Tensor
    basis: torch.Tensor

    def __call__(self, r):
        return project(self, r)


def build_projection(queries, ridge=DEFAULT_RIDGE):
    """P = B (B^T B + ridge I)^-1 B^T.

    With ``ridge == 0`` and an ill-conditioned Gram matrix the pseudo-inverse
    (SVD based) is used instead of a solve.
    """
    B = basis_matrix(queries)
    d, k = B.shape
    if not 1 <= k <= d:
        raise ShapeMismatchError(f"need 1 <= k <= d, got k={k}, d={d}")
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    norms = torch.linalg.vector_norm(B, dim=0)
    if bool((norms == 0).any()):
        raise DegenerateQueryError("zero query vector cannot span a subspace")
    G = B.T @ B
    if ridge == 0 and float(torch.linalg.cond(G)) > COND_LIMIT:
        P = B @ torch.linalg.pinv(B)
    else:
        eye = torch.eye(k, dtype=B.dtype, device=B.device)
        P = B @ torch.linalg.solve(G + ridge * eye, B.T)
    return ProjectionOperator(P, B)


def project(P, r):
    """q = P r for a vector (d,) or a stack of row vectors (n, d)."""
    M = P.P if isinstance(P, ProjectionOperator) else _as_tensor(P)
    as_numpy = not isinstance(r, torch.Tensor)
    r = _as_tensor(r, M.dtype)
    if r.shape[-1] != M.shape[-1]:
        raise ShapeMismatchError(f"vector length {r.shape[-1]} != operator size {M.shape[-1]}")
    q = r @ M.T
    return q.numpy() if as_numpy else q


def project_batch(basis, r, ridge=DEFAULT_RIDGE):
    """Project rows of ``r`` (n, d) onto span of ``basis`` (d, k) without forming P.

    Differentiable in both arguments; used on the training path.
    """
    k = basis.shape[-1]
    G = basis.transpose(-1, -2) @ basis + ridge * torch.eye(k, dtype=basis.dtype, device=basis.device)
    coef = torch.linalg.solve(G, basis.transpose(-1, -2) @ r.transpose(-1, -2))
    return (basis @ coef).transpose(-1, -2)


class ScoringHead(nn.Module):
    """One linear layer on ``[r; q]`` followed by a sigmoid."""

    def __init__(self, d=64):
        super().__init__()
        self.d = d
        self.linear = nn.Linear(2 * d, 1)

    def logits(self, r, q):
        return self.linear(torch.cat([r, q], dim=-1)).squeeze(-1)

    def forward(self, r, q):
        return torch.sigmoid(self.logits(r, q))


def cosine_score(r, q, eps=0.0):
    """(cos(r, q) + 1) / 2. With ``eps == 0`` zero vectors are an error."""
    nr = torch.linalg.vector_norm(r, dim=-1)
    nq = torch.linalg.vector_norm(q, dim=-1)
    if eps == 0 and (bool((nr == 0).any()) or bool((nq == 0).any())):
        raise DegenerateQueryError("cosine score is undefined for zero vectors")
    denom = (nr * nq).clamp_min(eps) if eps else nr * nq
    return ((r * q).sum(-1) / denom + 1) / 2


def score(r, q, head="cosine"):
    """Foreground probability of a proposal vector ``r`` given its query vector ``q``."""
    r = _as_tensor(r)
    q = _as_tensor(q, r.dtype)
    if r.shape[-1] != q.shape[-1]:
        raise ShapeMismatchError(f"r length {r.shape[-1]} != q length {q.shape[-1]}")
    if isinstance(head, str):
        if head != "cosine":
            raise ValueError(f"unknown scoring head {head!r}")
        return cosine_score(r, q)
    return head(r, q)


def hinge_loss(a, y, m_plus=M_PLUS, m_minus=M_MINUS):
    """y max(m+ - a, 0) + (1 - y) max(a - m-, 0), elementwise."""
    a = _as_tensor(a)
    y = _as_tensor(y, a.dtype).to(a.dtype)
    return y * F.relu(m_plus - a) + (1 - y) * F.relu(a - m_minus)


def margin_rank_loss(scores, labels, m_plus=M_PLUS, m_minus=M_MINUS):
    """Pairwise ranking term summed over all pairs k < l."""
    a = _as_tensor(scores).reshape(-1)
    y = _as_tensor(labels, a.dtype).reshape(-1)
    n = a.shape[0]
    if n < 2:
        return a.sum() * 0
    i, j = torch.triu_indices(n, n, offset=1, device=a.device)
    gap = (a[i] - a[j]).abs()
    same = (y[i] == y[j]).to(a.dtype)
    return (same * F.relu(gap - m_minus) + (1 - same) * F.relu(m_plus - gap)).sum()


def total_query_loss(scores, labels, m_plus=M_PLUS, m_minus=M_MINUS):
    """Per-proposal hinge terms plus the pairwise ranking term, unit weights."""
    return hinge_loss(scores, labels, m_plus, m_minus).sum() + margin_rank_loss(scores, labels, m_plus, m_minus)


def margins_from_m(m):
    """Single margin knob: m+ = m, m- = 1 - m."""
    return float(m), 1.0 - float(m)
