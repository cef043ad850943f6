"""Masked-FFN forward kernels: compiled core with a pure-numpy fallback.

The compiled extension is selected at import when available; otherwise the
chunked-gather numpy implementation stands in with identical semantics.
Both iterate only the retained hidden indices, so their work scales with
the active fraction rather than the full hidden width.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import _gelu_np

try:
    from . import _ckernels
    HAVE_COMPILED = True
except ImportError:  # pragma: no cover - build always succeeds in CI
    _ckernels = None
    HAVE_COMPILED = False


def mask_to_indices(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Dense per-token mask -> (indices [T, A] int32, values [T, A]).

    Requires the same number of retained (nonzero) entries per row, which
    the top-fraction mask construction guarantees for continuous scores.
    """
    tokens, d_ff = mask.shape
    a = int(np.count_nonzero(mask[0])) if tokens else 0
    if HAVE_COMPILED and mask.dtype in (np.float32, np.float64) and a and \
            mask.flags.c_contiguous:
        idx = np.empty((tokens, a), dtype=np.int32)
        vals = np.empty((tokens, a), dtype=mask.dtype)
        extract = (_ckernels.extract_indices_f64 if mask.dtype == np.float64
                   else _ckernels.extract_indices_f32)
        try:
            extract(mask, idx, vals)
        except ValueError as exc:
            raise ContractError(str(exc)) from exc
        return idx, vals
    flat = np.flatnonzero(mask)
    if flat.size % max(tokens, 1) != 0 or (tokens and flat.size != tokens * a):
        raise ContractError("mask rows retain unequal entry counts")
    if a == 0:
        return (np.empty((tokens, 0), dtype=np.int32),
                np.empty((tokens, 0), dtype=mask.dtype))
    idx = (flat.reshape(tokens, a) - np.arange(tokens)[:, None] * d_ff).astype(np.int32)
    vals = np.take_along_axis(mask, idx.astype(np.int64), axis=1)
    return idx, vals


def fused_masked_ffn_numpy(x: np.ndarray, w1: np.ndarray, w2t: np.ndarray,
                           mvals: np.ndarray, idx: np.ndarray,
                           out: np.ndarray, chunk: int = 8) -> None:
    """Fallback: gather retained rows per token chunk and contract in numpy."""
    tokens = x.shape[0]
    if idx.shape[1] == 0:
        out[...] = 0.0
        return
    for c0 in range(0, tokens, chunk):
        sl = slice(c0, min(c0 + chunk, tokens))
        rows = idx[sl]
        w1g = w1[rows]                                   # [c, A, d_in]
        h = _gelu_np(np.einsum("caj,cj->ca", w1g, x[sl])) * mvals[sl]
        w2g = w2t[rows]                                  # [c, A, d_out]
        out[sl] = np.einsum("ca,cao->co", h, w2g)


def fused_masked_ffn(x: np.ndarray, w1: np.ndarray, w2t: np.ndarray,
                     mvals: np.ndarray, idx: np.ndarray, out: np.ndarray,
                     force_numpy: bool = False) -> None:
    """Single-pass masked FFN forward into ``out`` [tokens, d_out].

    ``w2t`` is the output projection stored neuron-major ([d_ff, d_out]).
    Dispatches to the compiled kernel unless unavailable or overridden.
    """
    if x.shape[0] != out.shape[0] or w2t.shape[1] != out.shape[1]:
        raise ShapeError("fused_masked_ffn: output buffer shape mismatch")
    if x.shape[1] != w1.shape[1]:
        raise ShapeError("fused_masked_ffn: x and w1 disagree on d_in")
    if idx.shape != mvals.shape:
        raise ShapeError("fused_masked_ffn: idx and mvals must align")
    if force_numpy or not HAVE_COMPILED:
        fused_masked_ffn_numpy(x, w1, w2t, mvals, idx, out)
        return
    if x.dtype == np.float64:
        _ckernels.fused_masked_ffn_f64(x, w1, w2t, mvals, idx, out)
    elif x.dtype == np.float32:
        _ckernels.fused_masked_ffn_f32(x, w1, w2t, mvals, idx, out)
    else:
        raise ContractError(f"unsupported dtype {x.dtype}")
