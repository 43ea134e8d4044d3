from typing import TypeVar

import numpy as np
import scipy.linalg
import torch

Tensor_or_Array = TypeVar("Tensor_or_Array", torch.Tensor, np.ndarray)

SYMMETRY_TOL = 1e-10


def _check_square(M: Tensor_or_Array):
    if M.ndim < 2 or M.shape[-1] != M.shape[-2]:
        raise ValueError(f"Invalid matrix shape (expected square): {tuple(M.shape)}")


def pinv(M: np.ndarray, tol: float = None, return_rank=False):
    """Moore-Penrose pseudoinverse via SVD.

    `tol` is a relative cutoff: singular values below `tol * s_max` are dropped.
    The default cutoff is `eps * max(rows, cols) * s_max`.
    """
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    if not np.all(np.isfinite(M)):
        raise ValueError("Invalid matrix: non-finite entries")
    if M.size == 0:
        out = np.zeros(M.shape[::-1])
        return (out, 0) if return_rank else out
    U, s, Vt = scipy.linalg.svd(M, full_matrices=False, lapack_driver="gesvd")
    s_max = s[0] if s.size else 0.0
    if tol is None:
        cutoff = np.finfo(np.float64).eps * max(M.shape) * s_max
    else:
        assert tol >= 0, f"{tol=}"
        cutoff = tol * s_max
    keep = s > cutoff
    rank = int(np.count_nonzero(keep))
    s_inv = np.zeros_like(s)
    s_inv[keep] = 1.0 / s[keep]
    out = (Vt.T * s_inv) @ U.T
    return (out, rank) if return_rank else out


def symmetrize(M: Tensor_or_Array) -> Tensor_or_Array:
    """(..., n, n)"""
    _check_square(M)
    return 0.5 * (M + M.swapaxes(-1, -2))


def _max_abs(M: Tensor_or_Array) -> float:
    if isinstance(M, torch.Tensor):
        return M.abs().max().item() if M.numel() else 0.0
    return float(np.max(np.abs(M))) if M.size else 0.0


def asymmetry(M: Tensor_or_Array) -> float:
    _check_square(M)
    return _max_abs(M - M.swapaxes(-1, -2))


def is_symmetric(M: Tensor_or_Array, tol=SYMMETRY_TOL) -> bool:
    scale = max(1.0, _max_abs(M))
    return asymmetry(M) <= tol * scale


def min_eigenvalue(M: np.ndarray, tol=SYMMETRY_TOL) -> float:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    _check_square(M)
    if not is_symmetric(M, tol):
        raise ValueError(f"Invalid matrix (asymmetric by {asymmetry(M):.3e}): min_eigenvalue needs a symmetric input")
    return float(scipy.linalg.eigh(symmetrize(M), eigvals_only=True)[0])


def is_psd(M: np.ndarray, tol=1e-10) -> bool:
    return min_eigenvalue(M) >= -tol * max(1.0, _max_abs(M))
