"""Evaluation metrics: Fréchet distance between feature sets."""

from __future__ import annotations

import logging

import numpy as np

from .errors import ContractError

log = logging.getLogger(__name__)


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def toy_frechet(features_a, features_b) -> float:
    """Fréchet distance between Gaussians fitted to two feature sets.

    ``|mu_a - mu_b|^2 + tr(S_a) + tr(S_b) - 2 tr((S_a S_b)^(1/2))``.  The trace
    of the product root is taken from the eigenvalues of the symmetric
    ``S_a^(1/2) S_b S_a^(1/2)``, which share the spectrum of ``S_a S_b``;
    negative eigenvalues from round-off are clamped to zero.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ContractError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    dim = a.shape[1]
    for name, x in (("a", a), ("b", b)):
        if len(x) < dim + 1:
            raise ContractError(f"feature set {name} has {len(x)} samples; need at least {dim + 1}")
    mu_a, mu_b = a.mean(0), b.mean(0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))
    ra = _sqrt_psd(cov_a)
    mid = ra @ cov_b @ ra
    eig = np.linalg.eigvalsh((mid + mid.T) / 2)
    clamped = -eig[eig < 0].sum()
    if clamped > 1e-6 * max(1.0, abs(eig).sum()):
        log.warning("toy_frechet clamped %.3g of negative eigenvalue mass", clamped)
    tr_root = np.sqrt(np.clip(eig, 0.0, None)).sum()
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_root)
    return max(d, 0.0)
