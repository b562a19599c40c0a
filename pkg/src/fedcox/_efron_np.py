"""Pure-numpy evaluation of the tied-event partial log-likelihood.

Reference implementation of the kernel contract in :mod:`fedcox.kernels`;
the Cython module ``fedcox._efron_cy`` computes the same quantities in a
single C pass and is preferred when available.
"""

import numpy as np

__all__ = ["efron_eval"]


def _segment_sums(values, starts, ends):
    # cumulative-sum trick; O(n) regardless of segment count
    padded = np.concatenate([np.zeros((1,) + values.shape[1:]), np.cumsum(values, axis=0)])
    return padded[ends] - padded[starts]


def efron_eval(x, lp, risk_len, tie_counts, want_derivatives=True):
    """Log-likelihood (and optionally gradient/Hessian) on presorted data.

    Parameters
    ----------
    x : ndarray (n, p)
        Covariate rows sorted by survival time descending, with event rows
        placed after censored rows inside each tied-time block.
    lp : ndarray (n,)
        Linear predictor for the sorted rows (may be shifted by a constant;
        the result is invariant to that shift).
    risk_len : ndarray (B,) int64
        Per distinct event time, latest first: number of sorted rows at risk.
    tie_counts : ndarray (B,) int64
        Number of events at each distinct event time (same order).
    want_derivatives : bool
        When False only the log-likelihood is computed.

    Returns
    -------
    (loglik, gradient, hessian)
        ``gradient``/``hessian`` are None when ``want_derivatives`` is False.

    Raises
    ------
    ValueError
        If a non-finite intermediate or non-positive risk-set mass occurs.
    """
    n, p = x.shape
    theta = np.exp(lp)
    if not np.all(np.isfinite(theta)):
        raise ValueError("non-finite hazard ratios")

    ends = np.asarray(risk_len, dtype=np.int64)
    m = np.asarray(tie_counts, dtype=np.int64)
    tie_lo = ends - m

    cum_theta = np.concatenate([[0.0], np.cumsum(theta)])
    s0 = cum_theta[ends]                                   # risk-set theta mass
    h0 = cum_theta[ends] - cum_theta[tie_lo]               # tied-event theta mass
    lp_sums = _segment_sums(lp, tie_lo, ends)

    # expand one row per (event time, within-tie index l = 0..m_j-1)
    block = np.repeat(np.arange(len(ends)), m)
    offsets = np.concatenate([[0], np.cumsum(m)[:-1]])
    l_idx = np.arange(m.sum()) - np.repeat(offsets, m)
    frac = l_idx / np.repeat(m, m)
    phi = s0[block] - frac * h0[block]
    if not np.all(phi > 0.0) or not np.all(np.isfinite(phi)):
        raise ValueError("non-positive risk-set mass")

    loglik = float(lp_sums.sum() - np.log(phi).sum())
    if not want_derivatives:
        return loglik, None, None

    xt = x * theta[:, None]
    s1 = _segment_sums(xt, np.zeros_like(ends), ends)      # (B, p)
    h1 = _segment_sums(xt, tie_lo, ends)
    x_sum = _segment_sums(x, tie_lo, ends)

    x2t = xt[:, :, None] * x[:, None, :]
    s2 = _segment_sums(x2t, np.zeros_like(ends), ends)     # (B, p, p)
    h2 = _segment_sums(x2t, tie_lo, ends)

    d1 = s1[block] - frac[:, None] * h1[block]             # (L, p)
    d2 = s2[block] - frac[:, None, None] * h2[block]       # (L, p, p)
    inv_phi = 1.0 / phi

    gradient = x_sum.sum(axis=0) - (d1 * inv_phi[:, None]).sum(axis=0)
    hessian = -(
        (d2 * inv_phi[:, None, None]).sum(axis=0)
        - np.einsum("la,lb,l->ab", d1, d1, inv_phi**2)
    )
    hessian = 0.5 * (hessian + hessian.T)
    if not (np.all(np.isfinite(gradient)) and np.all(np.isfinite(hessian))):
        raise ValueError("non-finite derivatives")
    return loglik, gradient, hessian
