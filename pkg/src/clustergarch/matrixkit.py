"""Spectral matrix functions, vectorization operators and Kronecker-structured
derivative matrices.

Vectorization is column-major throughout: ``vecl`` stacks the strictly lower
triangle column by column, ``vech`` the lower triangle including the diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import InvalidInput, SingularMatrix

EIG_TIE_TOL = 1e-10


@dataclass(frozen=True)
class Spectral:
    """Eigen-decomposition ``m = vectors @ diag(values) @ vectors.T``.

    Eigenvalues are sorted in descending order and each eigenvector has its
    largest-magnitude component positive.
    """

    vectors: np.ndarray
    values: np.ndarray

    def apply(self, f) -> np.ndarray:
        out = (self.vectors * f(self.values)) @ self.vectors.T
        return 0.5 * (out + out.T)


def symmetrize(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return 0.5 * (m + m.T)


def spectral(m: np.ndarray) -> Spectral:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidInput(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInput("matrix has non-finite entries")
    w, v = np.linalg.eigh(symmetrize(m))
    w, v = w[::-1], v[:, ::-1]
    pivot = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[pivot, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return Spectral(vectors=np.ascontiguousarray(v * signs), values=w.copy())


def _positive(values: np.ndarray, what: str) -> None:
    if np.any(values <= 0):
        bad = float(values[np.argmin(values)])
        raise SingularMatrix(f"{what} needs positive eigenvalues, found {bad:.3e}", eigenvalue=bad)


def matrix_function(m: np.ndarray, kind: str, power: float | None = None) -> np.ndarray:
    """Apply ``log``, ``exp`` or ``power`` to the eigenvalues of a symmetric matrix."""
    s = spectral(m)
    if kind == "exp":
        return s.apply(np.exp)
    if kind == "log":
        _positive(s.values, "log")
        return s.apply(np.log)
    if kind == "power":
        if power is None:
            raise InvalidInput("power requires an exponent")
        if power < 0 or not float(power).is_integer():
            _positive(s.values, f"power {power}")
        return s.apply(lambda w: np.power(w, power))
    raise InvalidInput(f"unknown matrix function {kind!r}")


def logm(m: np.ndarray) -> np.ndarray:
    return matrix_function(m, "log")


def expm(m: np.ndarray) -> np.ndarray:
    return matrix_function(m, "exp")


def powm(m: np.ndarray, p: float) -> np.ndarray:
    return matrix_function(m, "power", p)


# ---------------------------------------------------------------- vec operators


@lru_cache(maxsize=None)
def lower_indices(n: int, strict: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices of the (strictly) lower triangle in column-major order."""
    cols, rows = np.triu_indices(n, 1 if strict else 0)
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


def vec(m: np.ndarray) -> np.ndarray:
    return np.asarray(m).reshape(-1, order="F")


def unvec(v: np.ndarray, n: int) -> np.ndarray:
    return np.asarray(v).reshape((n, n), order="F")


def vech(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    r, c = lower_indices(m.shape[0], strict=False)
    return m[r, c]


def vecl(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m)
    r, c = lower_indices(m.shape[0], strict=True)
    return m[r, c]


def vecl_upper(m: np.ndarray) -> np.ndarray:
    """``vecl`` of the transpose, i.e. the strictly upper triangle."""
    return vecl(np.asarray(m).T)


def vec_ops(m: np.ndarray, kind: str) -> np.ndarray:
    funcs = {"vec": vec, "vech": vech, "vecl": vecl, "veclUpper": vecl_upper, "diag": np.diag}
    if kind not in funcs:
        raise InvalidInput(f"unknown vec operator {kind!r}")
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidInput(f"expected a square matrix, got shape {m.shape}")
    return np.asarray(funcs[kind](m)).copy()


def dim_from_vech(length: int) -> int:
    k = int(round((np.sqrt(8 * length + 1) - 1) / 2))
    if k * (k + 1) // 2 != length:
        raise InvalidInput(f"{length} is not a triangular number")
    return k


def dim_from_vecl(length: int) -> int:
    return dim_from_vech(length) + 1


def unvech(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    k = dim_from_vech(v.size)
    out = np.zeros((k, k))
    r, c = lower_indices(k, strict=False)
    out[r, c] = v
    out[c, r] = v
    return out


def unvecl(v: np.ndarray, diagonal=0.0) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = dim_from_vecl(v.size)
    out = np.zeros((n, n))
    r, c = lower_indices(n, strict=True)
    out[r, c] = v
    out[c, r] = v
    out[np.diag_indices(n)] = diagonal
    return out


def _selector(rows: int, cols: int, col_of_row: np.ndarray) -> sp.csr_matrix:
    data = np.ones(rows)
    return sp.csr_matrix((data, (np.arange(rows), col_of_row)), shape=(rows, cols))


@lru_cache(maxsize=None)
def commutation_matrix(n: int) -> sp.csr_matrix:
    """``K_n vec(B) = vec(B')``."""
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    # row i + j*n of vec(B') holds B[j, i], stored at j + i*n of vec(B)
    return _selector(n * n, n * n, (j + i * n).reshape(-1, order="F"))


@lru_cache(maxsize=None)
def elimination_matrix(kind: str, n: int) -> sp.csr_matrix:
    """0/1 matrices with ``E vec(B)`` equal to vech, vecl, upper vecl or diag of B."""
    if kind == "vech":
        r, c = lower_indices(n, strict=False)
        pos = r + c * n
    elif kind == "vecl":
        r, c = lower_indices(n, strict=True)
        pos = r + c * n
    elif kind == "veclUpper":
        r, c = lower_indices(n, strict=True)
        pos = c + r * n
    elif kind == "diag":
        pos = np.arange(n) * (n + 1)
    else:
        raise InvalidInput(f"unknown elimination kind {kind!r}")
    return _selector(pos.size, n * n, pos)


@lru_cache(maxsize=None)
def duplication_matrix(n: int) -> sp.csr_matrix:
    """``D_n vech(A) = vec(A)`` for symmetric A."""
    idx = np.zeros((n, n), dtype=int)
    r, c = lower_indices(n, strict=False)
    idx[r, c] = np.arange(r.size)
    idx[c, r] = np.arange(r.size)
    return _selector(n * n, r.size, vec(idx))


def kron_basis(vectors: np.ndarray) -> np.ndarray:
    return np.kron(vectors, vectors)


# ---------------------------------------------------------- derivative matrices


def divided_differences(values: np.ndarray, f=np.exp, df=None) -> np.ndarray:
    """First divided differences of ``f`` at all eigenvalue pairs, column-major flattened."""
    df = f if df is None else df
    li = values[:, None]
    lj = values[None, :]
    gap = li - lj
    tie = np.abs(gap) < EIG_TIE_TOL * np.maximum(1.0, np.abs(li))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(tie, df(np.broadcast_to(li, gap.shape)), (f(li) - f(lj)) / np.where(tie, 1.0, gap))
    return vec(out)


def exp_frechet_from_log(log_spec: Spectral, inverse: bool = False) -> np.ndarray:
    """``d vec(exp L) / d vec(L)'`` for symmetric L given its spectral factorization."""
    delta = divided_differences(log_spec.values)
    if inverse:
        delta = 1.0 / delta
    qq = kron_basis(log_spec.vectors)
    return (qq * delta) @ qq.T


def gamma_frechet(c: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Derivative of ``vec(C)`` with respect to ``vec(log C)``, or its inverse."""
    s = spectral(c)
    _positive(s.values, "gamma_frechet")
    return exp_frechet_from_log(Spectral(s.vectors, np.log(s.values)), inverse=inverse)


def oplus_inverse(s: np.ndarray, spec: Spectral | None = None) -> np.ndarray:
    """``(s (+) I)^{-1} = (s kron I + I kron s)^{-1}`` via the spectral closed form."""
    spec = spectral(s) if spec is None else spec
    w = spec.values
    sums = vec(w[:, None] + w[None, :])
    scale = max(1.0, float(np.max(np.abs(w))))
    if np.any(np.abs(sums) < 1e-12 * scale):
        raise SingularMatrix("eigenvalue pair sums to zero in Kronecker sum")
    qq = kron_basis(spec.vectors)
    return (qq / sums) @ qq.T


def m_matrix(c: np.ndarray) -> np.ndarray:
    """``d vec(C) / d gamma'`` for ``gamma = vecl(log C)``."""
    n = c.shape[0]
    g = gamma_frechet(c)
    e_l = elimination_matrix("vecl", n)
    e_u = elimination_matrix("veclUpper", n)
    e_d = elimination_matrix("diag", n)
    sym = (e_l + e_u).T.toarray()
    g_sym = g @ sym
    dg = e_d @ g_sym
    inner = e_d @ (e_d @ g).T
    proj = g_sym - g @ e_d.T @ np.linalg.solve(inner, dg)
    return sym @ (e_l @ proj)


def omega_matrix(c: np.ndarray) -> np.ndarray:
    """``(I kron C^{-1/2}) (C^{1/2} (+) I)^{-1}``, diagonal in the eigenbasis of C."""
    s = spectral(c)
    _positive(s.values, "omega_matrix")
    root = np.sqrt(s.values)
    diag = vec((1.0 / root)[:, None] / (root[:, None] + root[None, :]))
    qq = kron_basis(s.vectors)
    return (qq * diag) @ qq.T
