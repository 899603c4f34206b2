"""Sparse assembly of the P2/P1 Lagrange operators on a region.

Vector unknowns are blocked by component: dof ``i`` of component ``k`` sits at
``k * n + i``.  Pressure uses the P1 numbering of the same region.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .mesh import Space


def _scatter(rows, cols, vals, shape):
    return sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape).tocsr()


def assemble_local(space: Space, local: np.ndarray, row_dofs=None, col_dofs=None, shape=None):
    """Scatter per-cell blocks (nc, r, c) into a CSR matrix."""
    rd = space.cell_dofs if row_dofs is None else row_dofs
    cd = space.cell_dofs if col_dofs is None else col_dofs
    rows = np.broadcast_to(rd[:, :, None], local.shape)
    cols = np.broadcast_to(cd[:, None, :], local.shape)
    if shape is None:
        shape = (space.n, space.n)
    return _scatter(rows, cols, local, shape)


def mass(space: Space, weight=None) -> sp.csr_matrix:
    """Scalar P2 mass matrix, optionally with a quadrature-point weight (nc, nq)."""
    w = space.qweight if weight is None else space.qweight * weight
    local = np.einsum("cq,qi,qj->cij", w, space.qval, space.qval)
    return assemble_local(space, local)


def stiffness(space: Space, coeff=None) -> sp.csr_matrix:
    """Scalar P2 matrix of int (A grad u) . grad v; A defaults to the identity."""
    if coeff is None:
        local = np.einsum("cq,cqid,cqjd->cij", space.qweight, space.qgrad, space.qgrad)
    else:
        local = np.einsum("cq,cqid,cqde,cqje->cij", space.qweight, space.qgrad, coeff, space.qgrad)
    return assemble_local(space, local)


def vector(mat: sp.spmatrix) -> sp.csr_matrix:
    """Two-component block-diagonal copy of a scalar operator."""
    return sp.block_diag([mat, mat], format="csr")


def strain_stiffness(space: Space) -> sp.csr_matrix:
    """Matrix of int 2 D(u) : D(v) on blocked vector dofs."""
    g = space.qgrad
    w = space.qweight
    n = space.n
    lap = np.einsum("cq,cqad,cqbd->cab", w, g, g)
    blocks = [[None, None], [None, None]]
    for k in range(2):
        for l in range(2):
            local = np.einsum("cq,cqa,cqb->cab", w, g[..., l], g[..., k])
            if k == l:
                local = local + lap
            blocks[k][l] = assemble_local(space, local)
    return sp.bmat(blocks, format="csr") if n else sp.csr_matrix((0, 0))


def divergence(space: Space) -> sp.csr_matrix:
    """Matrix B with (B u)_q = int q div u for P1 q and blocked P2 u."""
    blocks = []
    for l in range(2):
        local = np.einsum("cq,qa,cqb->cab", space.qweight, space.p1val, space.qgrad[..., l])
        blocks.append(
            assemble_local(space, local, row_dofs=space.cell_p1, shape=(space.n_p1, space.n))
        )
    return sp.hstack(blocks, format="csr")


def p1_mass(space: Space) -> sp.csr_matrix:
    local = np.einsum("cq,qa,qb->cab", space.qweight, space.p1val, space.p1val)
    return assemble_local(
        space, local, row_dofs=space.cell_p1, col_dofs=space.cell_p1, shape=(space.n_p1, space.n_p1)
    )


def p1_integrals(space: Space) -> np.ndarray:
    """Vector of int q_i over the region for every P1 basis function."""
    return space.load_p1(np.ones(space.qweight.shape))


def boundary_mass(space: Space, tag: str) -> sp.csr_matrix:
    """Scalar edge mass matrix on a tagged boundary (P2 trace)."""
    b = space.boundary[tag]
    local = np.einsum("mq,qa,qb->mab", b["weight"], b["trace_val"], b["trace_val"])
    rows = np.broadcast_to(b["dofs"][:, :, None], local.shape)
    cols = np.broadcast_to(b["dofs"][:, None, :], local.shape)
    return _scatter(rows, cols, local, (space.n, space.n))


def flatten(v: np.ndarray) -> np.ndarray:
    """(n, 2) nodal values to blocked vector."""
    return np.concatenate([v[:, 0], v[:, 1]])


def unflatten(x: np.ndarray, n: int) -> np.ndarray:
    return np.stack([x[:n], x[n : 2 * n]], axis=1)


def blocked(idx: np.ndarray, n: int) -> np.ndarray:
    """Blocked indices of both components of the given nodes."""
    return np.concatenate([idx, idx + n])
