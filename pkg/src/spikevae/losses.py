"""Training objective and quantitative metrics.

The objective is pixel MSE plus a weighted squared maximum mean
discrepancy (MMD) between posterior and prior firing-rate batches. MMD
is computed with an RBF kernel as the biased V-statistic, which is zero
on identical sample sets and never meaningfully negative, and is
registered on the tape as a single fused op with a hand-derived
backward. Also here: the synaptic-operation energy model and rate
histograms used for reporting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import DiffTensor
from .errors import NumericError, ShapeError, ValidationError

# Energy per accumulate (spiking) and per multiply-accumulate-equivalent
# FLOP (non-spiking), in joules. 45nm process figures.
E_AC = 0.9e-12
E_MAC = 4.6e-12


@dataclass(frozen=True)
class LossReport:
    """Scalar summary of one objective evaluation. ``node`` is the live
    differentiable total for the caller that wants to run backward."""

    mse: float
    mmd2: float
    total: float
    lam: float
    sigma2: float
    node: DiffTensor

    def __post_init__(self):
        if self.mmd2 < -1e-6:
            raise NumericError(f"mmd2 fell below its noise floor: {self.mmd2}")


@dataclass(frozen=True)
class EnergyReport:
    flops_add: float
    flops_mul: float
    avg_rate: float
    steps: int
    sops: float
    energy_joules: float
    spiking: bool


def mse_loss(x: DiffTensor, x_hat: DiffTensor) -> DiffTensor:
    """Mean over batch and pixels of the squared reconstruction error."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"mse_loss shapes differ: {x.shape} vs {x_hat.shape}")
    diff = engine.sub(x_hat, x)
    return engine.mean_all(engine.mul(diff, diff))


def rbf_kernel(a: np.ndarray, b: np.ndarray, sigma2: float) -> float:
    """exp(-||a-b||^2 / (2 sigma2)) for two rate vectors."""
    if sigma2 <= 0:
        raise ValidationError(f"bandwidth sigma2 must be positive, got {sigma2}")
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise ShapeError(f"rbf_kernel shapes differ: {a.shape} vs {b.shape}")
    d2 = np.square(a - b).sum(dtype=np.float32)
    return float(np.exp(-d2 / np.float32(2.0 * sigma2)))


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = np.square(a).sum(axis=1, dtype=np.float32)
    bn = np.square(b).sum(axis=1, dtype=np.float32)
    d2 = an[:, None] + bn[None, :] - np.float32(2.0) * (a @ b.T)
    return np.maximum(d2, np.float32(0.0))


def _kernel_matrix(a: np.ndarray, b: np.ndarray, sigma2: float) -> np.ndarray:
    return np.exp(-_pairwise_sq_dists(a, b) / np.float32(2.0 * sigma2))


def median_sigma2(p: np.ndarray, q: np.ndarray) -> float:
    """Median heuristic bandwidth: half the median pairwise squared
    distance of the pooled batch. Falls back to 1.0 when the median
    degenerates to zero (all points coincide). Treated as a constant by
    the gradient (no backward through the bandwidth choice).
    """
    pooled = np.concatenate([np.asarray(p, dtype=np.float32), np.asarray(q, dtype=np.float32)], axis=0)
    n = pooled.shape[0]
    if n < 2:
        return 1.0
    d2 = _pairwise_sq_dists(pooled, pooled)
    iu = np.triu_indices(n, k=1)
    med = float(np.median(d2[iu]))
    sigma2 = med / 2.0
    return sigma2 if sigma2 > 0.0 else 1.0


def mmd_squared(p: DiffTensor, q: DiffTensor, sigma2: float) -> DiffTensor:
    """Biased V-statistic MMD^2 between two rate batches.

    mean k(P,P) + mean k(Q,Q) - 2 mean k(P,Q), all n^2 / m^2 / nm pairs
    including self-pairs. Registered as one fused op; backward uses the
    closed form d k(x,y)/dx = k(x,y) * (y-x)/sigma2 and touches only the
    three kernel matrices already computed in forward.
    """
    if p.ndim != 2 or q.ndim != 2:
        raise ShapeError(f"rate batches must be 2-D, got {p.shape} and {q.shape}")
    if p.shape[0] == 0 or q.shape[0] == 0:
        raise ValidationError("mmd_squared needs nonempty batches")
    if p.shape[1] != q.shape[1]:
        raise ShapeError(f"rate dimensions differ: {p.shape} vs {q.shape}")
    if sigma2 <= 0:
        raise ValidationError(f"bandwidth sigma2 must be positive, got {sigma2}")
    pd, qd = p.data, q.data
    n, m = pd.shape[0], qd.shape[0]
    kpp = _kernel_matrix(pd, pd, sigma2)
    kqq = _kernel_matrix(qd, qd, sigma2)
    kpq = _kernel_matrix(pd, qd, sigma2)
    val = kpp.mean(dtype=np.float32) + kqq.mean(dtype=np.float32) \
        - np.float32(2.0) * kpq.mean(dtype=np.float32)

    inv_s2 = np.float32(1.0 / sigma2)

    def bwd(g):
        g = np.float32(g.reshape(()))
        dp = None
        if p.requires_grad:
            # d/dp_a of mean k(P,P): self-term row sums appear twice by
            # symmetry; the (a,a) diagonal contributes zero.
            row_pp = kpp.sum(axis=1, dtype=np.float32)
            dp = (np.float32(-2.0) / np.float32(n * n)) * (row_pp[:, None] * pd - kpp @ pd)
            row_pq = kpq.sum(axis=1, dtype=np.float32)
            dp += (np.float32(2.0) / np.float32(n * m)) * (row_pq[:, None] * pd - kpq @ qd)
            dp = (g * inv_s2) * dp
        dq = None
        if q.requires_grad:
            row_qq = kqq.sum(axis=1, dtype=np.float32)
            dq = (np.float32(-2.0) / np.float32(m * m)) * (row_qq[:, None] * qd - kqq @ qd)
            col_pq = kpq.sum(axis=0, dtype=np.float32)
            dq += (np.float32(2.0) / np.float32(n * m)) * (col_pq[:, None] * qd - kpq.T @ pd)
            dq = (g * inv_s2) * dq
        return (dp, dq)

    return engine.record_op(np.asarray(val), (p, q), bwd)


def total_loss(
    x: DiffTensor,
    x_hat: DiffTensor,
    p_rates: DiffTensor,
    q_rates: DiffTensor,
    lam: float = 1.0,
    sigma2: float | None = None,
) -> LossReport:
    """Objective: mse + lam * mmd2 on the rate batches.

    When ``sigma2`` is omitted the median-heuristic bandwidth of the
    pooled rate batch is used, recomputed here on every call.
    """
    if sigma2 is None:
        sigma2 = median_sigma2(p_rates.data, q_rates.data)
    mse = mse_loss(x, x_hat)
    mmd2 = mmd_squared(p_rates, q_rates, sigma2)
    total = engine.add(mse, engine.smul(mmd2, lam)) if lam != 0.0 else mse
    report = LossReport(
        mse=mse.item(),
        mmd2=mmd2.item(),
        total=total.item(),
        lam=float(lam),
        sigma2=float(sigma2),
        node=total,
    )
    if not np.isfinite(report.total):
        raise NumericError(
            f"non-finite objective: mse={report.mse}, mmd2={report.mmd2}"
        )
    return report


def energy_report(flops_add: float, flops_mul: float, avg_rate: float,
                  steps: int, spiking: bool) -> EnergyReport:
    """Inference energy from operation counts.

    Spiking layers perform one accumulate per synaptic event, so the
    synaptic operation count is avg_rate * T * FLOPs and each costs
    0.9 pJ. Non-spiking layers pay 4.6 pJ per FLOP with no rate factor.
    """
    if flops_add < 0 or flops_mul < 0:
        raise ValidationError("operation counts must be nonnegative")
    if not 0.0 <= avg_rate <= 1.0:
        raise ValidationError(f"avg_rate must lie in [0, 1], got {avg_rate}")
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    flops = float(flops_add) + float(flops_mul)
    if spiking:
        sops = avg_rate * steps * flops
        energy = sops * E_AC
    else:
        sops = 0.0
        energy = flops * E_MAC
    return EnergyReport(
        flops_add=float(flops_add),
        flops_mul=float(flops_mul),
        avg_rate=float(avg_rate),
        steps=int(steps),
        sops=sops,
        energy_joules=energy,
        spiking=spiking,
    )


def rate_histogram(rates: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalised frequency of firing rates over [0, 1].

    Returns (frequencies summing to 1, bin edges of length bins+1).
    """
    if bins < 2:
        raise ValidationError(f"need at least 2 bins, got {bins}")
    rates = np.asarray(rates, dtype=np.float32).reshape(-1)
    if rates.size == 0:
        raise ValidationError("rate_histogram of an empty batch")
    counts, edges = np.histogram(rates, bins=bins, range=(0.0, 1.0))
    return counts.astype(np.float64) / rates.size, edges
