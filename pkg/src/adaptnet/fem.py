"""P1 Galerkin discretization of -div(grad u) = f with u = 0 on the boundary.

The source f is piecewise constant on the initial mesh and inherited by
descendants through the elements' root ids.  All integrals are closed-form
(area and edge-length formulas), so there is no quadrature error.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ContractError, GeometryError, SolverError
from . import mesh as msh_mod


@dataclass(frozen=True)
class DiscreteSolution:
    """Nodal coefficients over all mesh vertices; zero on boundary vertices."""

    coefficients: np.ndarray
    mesh_generation: int

    def __post_init__(self):
        self.coefficients.flags.writeable = False


@dataclass(frozen=True)
class SparseSystem:
    """Reduced SPD system in triplet form plus the Dirichlet bookkeeping."""

    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    rhs: np.ndarray
    interior: np.ndarray  # vertex ids of the unknowns
    n_vertices: int
    mesh_generation: int

    def matrix(self):
        n = len(self.interior)
        return sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=(n, n))


@dataclass(frozen=True)
class EstimatorField:
    """Per-element squared error indicators, ordered like the element list."""

    values: np.ndarray
    mesh_generation: int

    def __post_init__(self):
        self.values.flags.writeable = False

    def total(self):
        return float(np.sum(self.values))


def source_per_element(mesh, f):
    """Resolve f (scalar or per-root array) to one constant per element."""
    if np.isscalar(f):
        return np.full(mesh.n_elements, float(f))
    f = np.asarray(f, dtype=float)
    return f[mesh.root_ids]


def _gradients(mesh):
    """Per-element P1 basis gradients and areas.

    Returns (grads, area) with grads[t, i] = grad of the hat at local vertex i.
    """
    p = mesh.element_coords()
    v0, v1, v2 = p[:, 0], p[:, 1], p[:, 2]
    d1 = v1 - v0
    d2 = v2 - v0
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    if np.any(det <= 0):
        raise GeometryError("degenerate element in assembly")
    area = 0.5 * det
    grads = np.empty((mesh.n_elements, 3, 2))
    # grad lambda_i = perp(opposite edge) / (2 area), oriented inward
    grads[:, 0, 0] = (v1[:, 1] - v2[:, 1]) / det
    grads[:, 0, 1] = (v2[:, 0] - v1[:, 0]) / det
    grads[:, 1, 0] = (v2[:, 1] - v0[:, 1]) / det
    grads[:, 1, 1] = (v0[:, 0] - v2[:, 0]) / det
    grads[:, 2, 0] = (v0[:, 1] - v1[:, 1]) / det
    grads[:, 2, 1] = (v1[:, 0] - v0[:, 0]) / det
    return grads, area


def boundary_vertices(mesh):
    out = set()
    for a, b in mesh.boundary_edges():
        out.add(a)
        out.add(b)
    return np.array(sorted(out), dtype=np.int64)


def _full_stiffness_triplets(mesh):
    grads, area = _gradients(mesh)
    tris = mesh.triangles
    rows, cols, vals = [], [], []
    for i in range(3):
        for j in range(3):
            rows.append(tris[:, i])
            cols.append(tris[:, j])
            vals.append(area * (grads[:, i] * grads[:, j]).sum(axis=1))
    return (
        np.concatenate(rows),
        np.concatenate(cols),
        np.concatenate(vals),
        area,
    )


def full_stiffness(mesh):
    r, c, v, _ = _full_stiffness_triplets(mesh)
    n = mesh.n_vertices
    return sp.csr_matrix((v, (r, c)), shape=(n, n))


def assemble(mesh, f):
    """Stiffness and load with Dirichlet rows/columns eliminated."""
    r, c, v, area = _full_stiffness_triplets(mesh)
    n = mesh.n_vertices
    fe = source_per_element(mesh, f)
    load = np.zeros(n)
    contrib = fe * area / 3.0
    for i in range(3):
        np.add.at(load, mesh.triangles[:, i], contrib)

    bdry = boundary_vertices(mesh)
    keep = np.ones(n, dtype=bool)
    keep[bdry] = False
    interior = np.nonzero(keep)[0]
    renum = -np.ones(n, dtype=np.int64)
    renum[interior] = np.arange(len(interior))

    mask = keep[r] & keep[c]
    K = sp.coo_matrix(
        (v[mask], (renum[r[mask]], renum[c[mask]])),
        shape=(len(interior), len(interior)),
    ).tocsr()
    K.sum_duplicates()
    Kc = K.tocoo()
    return SparseSystem(
        rows=Kc.row.astype(np.int64),
        cols=Kc.col.astype(np.int64),
        vals=Kc.data,
        rhs=load[interior],
        interior=interior,
        n_vertices=n,
        mesh_generation=mesh.generation,
    )


def solve(system, rel_tol=1e-10, max_iter=None):
    """Jacobi-preconditioned conjugate gradients on the reduced system."""
    A = system.matrix()
    b = system.rhs
    n = len(b)
    full = np.zeros(system.n_vertices)
    if n == 0:
        return DiscreteSolution(full, system.mesh_generation)
    if max_iter is None:
        max_iter = max(2000, 40 * int(np.sqrt(n) + 1) * 10)
    dinv = 1.0 / A.diagonal()
    x = np.zeros(n)
    r = b.copy()
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return DiscreteSolution(full, system.mesh_generation)
    z = dinv * r
    p = z.copy()
    rz = float(r @ z)
    res = float(np.linalg.norm(r))
    it = 0
    while res > rel_tol * bnorm:
        if it >= max_iter:
            raise SolverError(
                f"CG did not converge in {max_iter} iterations (residual {res:.3e})",
                residual=res,
            )
        Ap = A @ p
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        z = dinv * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
        res = float(np.linalg.norm(r))
        it += 1
    full[system.interior] = x
    return DiscreteSolution(full, system.mesh_generation)


def energy_norm_sq(mesh, U):
    """Dirichlet energy of U: integral of |grad U|^2 over the domain."""
    if U.mesh_generation != mesh.generation or len(U.coefficients) != mesh.n_vertices:
        raise ContractError("solution does not match the mesh")
    gx, gy = element_gradients(mesh, U)
    _, area = _gradients(mesh)
    return float(np.sum(area * (gx * gx + gy * gy)))


def element_gradients(mesh, U):
    """Constant gradient of the P1 function per element (two arrays)."""
    grads, _ = _gradients(mesh)
    u = U.coefficients[mesh.triangles]  # (M, 3)
    gx = (u * grads[:, :, 0]).sum(axis=1)
    gy = (u * grads[:, :, 1]).sum(axis=1)
    return gx, gy


def _edge_data(mesh):
    """Per element: edge lengths, local edge normals, and neighbor ids."""
    p = mesh.element_coords()
    e2e = mesh.edge_to_elements()
    tris = mesh.triangles
    M = mesh.n_elements
    nbrs = -np.ones((M, 3), dtype=np.int64)
    lengths = np.empty((M, 3))
    for t in range(M):
        a, b, c = tris[t]
        for k, (i, j) in enumerate(((b, c), (c, a), (a, b))):
            key = (i, j) if i < j else (j, i)
            owners = e2e[key]
            nbrs[t, k] = next((o for o in owners if o != t), -1)
            d = mesh.vertices[i] - mesh.vertices[j]
            lengths[t, k] = float(np.hypot(d[0], d[1]))
    return p, nbrs, lengths


def euclid_diameters(mesh):
    p = mesh.element_coords()
    d = np.zeros(mesh.n_elements)
    for i, j in ((0, 1), (1, 2), (2, 0)):
        d = np.maximum(d, np.hypot(p[:, i, 0] - p[:, j, 0], p[:, i, 1] - p[:, j, 1]))
    return d


def inf_diameters(mesh):
    p = mesh.element_coords()
    d = np.zeros(mesh.n_elements)
    for i, j in ((0, 1), (1, 2), (2, 0)):
        d = np.maximum(
            d,
            np.maximum(
                np.abs(p[:, i, 0] - p[:, j, 0]), np.abs(p[:, i, 1] - p[:, j, 1])
            ),
        )
    return d


def residual_estimator(mesh, U, f, form="euclid"):
    """Residual error indicators rho_T^2.

    form="euclid": diam(T)^2 ||f||_T^2 + diam(T) ||[dn U]||^2 over interior
    edges (the classical definition; Delta U = 0 for P1).
    form="inf": the equivalent scaled variant
    diam_inf^4 |T|^-1 ||f||_T^2 + diam_inf^2 |dT|^-1 ||[grad U]||^2,
    which is what the estimator network emulates.
    """
    if U.mesh_generation != mesh.generation or len(U.coefficients) != mesh.n_vertices:
        raise ContractError("solution does not match the mesh")
    if form not in ("euclid", "inf"):
        raise ValueError(f"unknown estimator form {form!r}")
    fe = source_per_element(mesh, f)
    area = msh_mod.areas(mesh)
    gx, gy = element_gradients(mesh, U)
    p, nbrs, lengths = _edge_data(mesh)

    jump_sq = np.zeros((mesh.n_elements, 3))
    for k in range(3):
        nb = nbrs[:, k]
        inner = nb >= 0
        dgx = np.where(inner, gx - gx[nb], 0.0)
        dgy = np.where(inner, gy - gy[nb], 0.0)
        if form == "euclid":
            # normal component of the jump; tangential part vanishes for
            # conforming P1, using it here keeps (2.8a) literal
            i = (k + 1) % 3
            j = (k + 2) % 3
            tx = p[:, j, 0] - p[:, i, 0]
            ty = p[:, j, 1] - p[:, i, 1]
            ln = lengths[:, k]
            nxj = ty / ln
            nyj = -tx / ln
            jump_sq[:, k] = np.where(inner, (nxj * dgx + nyj * dgy) ** 2, 0.0)
        else:
            jump_sq[:, k] = dgx * dgx + dgy * dgy

    edge_term = (lengths * jump_sq).sum(axis=1)
    if form == "euclid":
        diam = euclid_diameters(mesh)
        vals = diam ** 2 * fe ** 2 * area + diam * edge_term
    else:
        dinf = inf_diameters(mesh)
        perim = lengths.sum(axis=1)
        vals = dinf ** 4 * fe ** 2 + dinf ** 2 * edge_term / perim
    return EstimatorField(values=vals, mesh_generation=mesh.generation)
