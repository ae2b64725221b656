"""Position-error metrics (mm) and the differentiable MPJPE loss."""

from __future__ import annotations

import warnings

import numpy as np

from . import tensor as tn
from .errors import DimensionError
from .tensor import Tensor


def mpjpe_loss(pred: Tensor, gt) -> Tensor:
    """Mean Euclidean joint error over every frame and joint (and batch item)."""
    gt = tn.as_tensor(gt, like=pred)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return tn.mean(tn.norm_lastdim(tn.sub(pred, gt)))


def mpjpe(pred, gt) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Similarity-align one frame ``pred [J, 3]`` onto ``gt`` (no reflections).

    Returns ``None`` when either centred point set has rank < 2.
    """
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    p0, g0 = pred - mu_p, gt - mu_g
    if np.linalg.matrix_rank(p0, tol=1e-9) < 2 or np.linalg.matrix_rank(g0, tol=1e-9) < 2:
        return None
    u, s, vt = np.linalg.svd(p0.T @ g0)
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    s = s.copy()
    s[-1] *= d
    u[:, -1] *= d
    rot = u @ vt
    scale = s.sum() / (p0 * p0).sum()
    return scale * p0 @ rot + mu_g


def p_mpjpe_frames(pred, gt) -> np.ndarray:
    """Per-frame aligned error for ``[..., J, 3]`` inputs; NaN marks degenerate frames."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    lead, (J, D) = pred.shape[:-2], pred.shape[-2:]
    p0 = pred.reshape(-1, J, D)
    g0 = gt.reshape(-1, J, D)
    p0 = p0 - p0.mean(axis=1, keepdims=True)
    g0 = g0 - g0.mean(axis=1, keepdims=True)
    sp = np.linalg.svd(p0, compute_uv=False)
    sg = np.linalg.svd(g0, compute_uv=False)
    ok = (sp[:, 1] > 1e-9 * np.maximum(sp[:, 0], 1e-300)) & (sg[:, 1] > 1e-9 * np.maximum(sg[:, 0], 1e-300))
    u, s, vt = np.linalg.svd(np.einsum("nji,njk->nik", p0, g0))
    d = np.sign(np.linalg.det(u @ vt))
    d[d == 0] = 1.0
    s[:, -1] *= d
    u[:, :, -1] *= d[:, None]
    rot = u @ vt
    denom = np.where(ok, (p0 * p0).sum(axis=(1, 2)), 1.0)
    scale = s.sum(axis=1) / denom
    aligned = scale[:, None, None] * (p0 @ rot)
    err = np.linalg.norm(aligned - g0, axis=-1).mean(axis=1)
    err[~ok] = np.nan
    return err.reshape(lead)


def p_mpjpe(pred, gt) -> float:
    """MPJPE after per-frame similarity alignment.

    Inputs are ``[..., J, 3]``; degenerate frames are excluded with a warning.
    """
    errs = np.asarray(p_mpjpe_frames(pred, gt)).reshape(-1)
    skipped = int(np.isnan(errs).sum())
    if skipped:
        warnings.warn(f"p_mpjpe: skipped {skipped} degenerate frame(s)", RuntimeWarning)
    return float(np.nanmean(errs)) if skipped < errs.size else float("nan")
