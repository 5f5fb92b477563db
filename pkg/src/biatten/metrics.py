"""Quality-prediction statistics and classical full-reference baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

PSNR_CAP = 99.0
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def _as_vectors(x, y, min_len: int = 2):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_len:
        raise ValueError(f"need at least {min_len} samples, got {x.size}")
    return x, y


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    den = math.sqrt(float(xc @ xc) * float(yc @ yc))
    if den == 0.0:
        return math.nan
    return float(np.clip((xc @ yc) / den, -1.0, 1.0))


def plcc(x, y) -> float:
    """Pearson linear correlation; NaN when either input is constant."""
    return _pearson(*_as_vectors(x, y))


def srcc(x, y) -> float:
    """Spearman rank correlation with mean ranks for ties; NaN when either input is constant."""
    x, y = _as_vectors(x, y)
    return _pearson(rankdata(x), rankdata(y))


def krcc(x, y) -> float:
    """Kendall tau-b."""
    x, y = _as_vectors(x, y)
    n = x.size
    iu = np.triu_indices(n, 1)
    dx = np.sign(x[:, None] - x[None, :])[iu]
    dy = np.sign(y[:, None] - y[None, :])[iu]
    n0 = n * (n - 1) // 2
    ties_x = int(np.count_nonzero(dx == 0))
    ties_y = int(np.count_nonzero(dy == 0))
    den = math.sqrt((n0 - ties_x) * (n0 - ties_y))
    if den == 0.0:
        return math.nan
    return float(np.clip(int((dx * dy).sum()) / den, -1.0, 1.0))


def rmse(x, y) -> float:
    x, y = _as_vectors(x, y, min_len=1)
    return math.sqrt(float(np.mean((x - y) ** 2)))


# ---------------------------------------------------------------------------
# five-parameter logistic mapping


@dataclass(frozen=True)
class LogisticParams:
    beta1: float
    beta2: float
    beta3: float
    beta4: float
    beta5: float
    converged: bool = True
    sse: float = math.nan
    iterations: int = 0

    @property
    def beta(self) -> np.ndarray:
        return np.array([self.beta1, self.beta2, self.beta3, self.beta4, self.beta5])

    def __call__(self, x) -> np.ndarray:
        return logistic5(np.asarray(x, dtype=np.float64), self.beta)


def logistic5(x: np.ndarray, beta: Sequence[float]) -> np.ndarray:
    """``b1 * (1/2 - 1/(1 + exp(b2 (x - b3)))) + b4 x + b5``."""
    b1, b2, b3, b4, b5 = beta
    return b1 * (0.5 - expit(-b2 * (x - b3))) + b4 * x + b5


def _jacobian(x: np.ndarray, beta: np.ndarray) -> np.ndarray:
    b1, b2, b3, _, _ = beta
    s = expit(-b2 * (x - b3))
    ds = s * (1.0 - s)
    return np.column_stack([0.5 - s, b1 * ds * (x - b3), -b1 * ds * b2, x, np.ones_like(x)])


def _project_linear(x: np.ndarray, y: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Solve beta1, beta4, beta5 exactly by least squares with beta2, beta3 held fixed."""
    basis = np.column_stack([0.5 - expit(-beta[1] * (x - beta[2])), x, np.ones_like(x)])
    coef = np.linalg.lstsq(basis, y, rcond=None)[0]
    return np.array([coef[0], beta[1], beta[2], coef[1], coef[2]])


def fit_logistic5(pred, mos, max_iter: int = 500, rtol: float = 1e-10) -> LogisticParams:
    """Least-squares fit of :func:`logistic5` mapping ``pred`` onto ``mos``.

    Damped Gauss-Newton (Levenberg-Marquardt with diagonal scaling) over all
    five coefficients; after every accepted step the three linear
    coefficients are re-solved exactly, which removes the slow valley where
    beta1 grows while beta2 shrinks. Stops when an accepted step changes the
    SSE by less than ``rtol`` relative, or when no damping level reduces it.
    Hitting ``max_iter`` returns the best point with ``converged=False``.
    """
    x, y = _as_vectors(pred, mos, min_len=5)
    sd = x.std()
    if sd == 0.0:
        raise ValueError("fit_logistic5: predictions are constant")
    beta = np.array([y.max() - y.min(), 1.0 / sd, x.mean(), 0.0, y.mean()])

    def sse_of(b):
        r = y - logistic5(x, b)
        return float(r @ r)

    sse = sse_of(beta)
    projected = _project_linear(x, y, beta)
    if sse_of(projected) < sse:
        beta, sse = projected, sse_of(projected)
    lam = 1e-3
    converged = sse == 0.0
    it = 0
    while not converged and it < max_iter:
        it += 1
        J = _jacobian(x, beta)
        r = y - logistic5(x, beta)
        scale = np.sqrt(np.maximum((J * J).sum(axis=0), 1e-12))
        trial = None
        while lam <= 1e16:
            A = np.vstack([J, math.sqrt(lam) * np.diag(scale)])
            step = np.linalg.lstsq(A, np.concatenate([r, np.zeros(5)]), rcond=None)[0]
            cand = beta + step
            cand_sse = sse_of(cand)
            if np.isfinite(cand_sse) and cand_sse < sse:
                trial, trial_sse = cand, cand_sse
                break
            lam *= 10.0
        if trial is None:
            converged = True
            break
        projected = _project_linear(x, y, trial)
        projected_sse = sse_of(projected)
        if np.isfinite(projected_sse) and projected_sse < trial_sse:
            trial, trial_sse = projected, projected_sse
        rel = (sse - trial_sse) / sse
        beta, sse = trial, trial_sse
        lam = max(lam / 10.0, 1e-15)
        converged = rel < rtol or sse == 0.0
    return LogisticParams(*map(float, beta), converged=converged, sse=sse, iterations=it)


# ---------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class EvalReport:
    srcc: float
    krcc: float
    plcc: float
    rmse: float
    logistic: LogisticParams
    n: int

    CSV_HEADER = (
        "dataset", "mode", "n", "srcc", "krcc", "plcc", "rmse",
        "beta1", "beta2", "beta3", "beta4", "beta5", "converged",
    )

    def csv_row(self, dataset: str, mode: str) -> list:
        lg = self.logistic
        return [
            dataset, mode, self.n,
            repr(self.srcc), repr(self.krcc), repr(self.plcc), repr(self.rmse),
            repr(lg.beta1), repr(lg.beta2), repr(lg.beta3), repr(lg.beta4), repr(lg.beta5),
            int(lg.converged),
        ]


def evaluate(pred_scores, mos) -> EvalReport:
    """SRCC/KRCC on raw predictions, PLCC/RMSE after the logistic mapping.

    Pairs are put into a canonical order first so the report does not depend
    on the order the images were listed in.
    """
    x, y = _as_vectors(pred_scores, mos, min_len=5)
    order = np.lexsort((y, x))
    x, y = x[order], y[order]
    params = fit_logistic5(x, y)
    mapped = params(x)
    return EvalReport(
        srcc=srcc(x, y),
        krcc=krcc(x, y),
        plcc=plcc(mapped, y),
        rmse=rmse(mapped, y),
        logistic=params,
        n=int(x.size),
    )


# ---------------------------------------------------------------------------
# classical baselines


def _array(img) -> np.ndarray:
    return np.asarray(getattr(img, "data", img), dtype=np.float64)


def to_luminance(img) -> np.ndarray:
    """Channel-first RGB (3, H, W) to a single (H, W) plane; 2-d input passes through."""
    a = _array(img)
    if a.ndim == 2:
        return a
    if a.ndim == 3 and a.shape[0] == 1:
        return a[0]
    if a.ndim == 3 and a.shape[0] == 3:
        return np.tensordot(np.asarray(LUMA_WEIGHTS), a, axes=1)
    raise ValueError(f"expected (H, W), (1, H, W) or (3, H, W) image, got {a.shape}")


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical inputs."""
    a, b = _array(a), _array(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes {a.shape} and {b.shape} differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def capped_psnr(value: float) -> float:
    return min(value, PSNR_CAP)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalised 1-d Gaussian taps; the 2-d window is its outer product."""
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(t**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    k = taps.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ taps
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ taps


def ssim(a, b, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Single-scale SSIM with a Gaussian window, averaged over valid positions.

    Three-channel inputs are reduced to luminance first.
    """
    x, y = to_luminance(a), to_luminance(b)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shapes {x.shape} and {y.shape} differ")
    if min(x.shape) < win_size:
        raise ValueError(f"ssim: image {x.shape} smaller than the {win_size}x{win_size} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = gaussian_window(win_size, sigma)
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mu_x**2
    syy = _filter_valid(y * y, g) - mu_y**2
    sxy = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def minmax(img: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; constant maps become all zeros."""
    a = np.asarray(img, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def metric_pair(a, b) -> tuple:
    """(PSNR dB, SSIM) between two images on a [0, 1] scale."""
    return psnr(a, b), ssim(a, b)


__all__ = [
    "EvalReport", "LogisticParams", "PSNR_CAP", "capped_psnr", "evaluate", "fit_logistic5",
    "krcc", "logistic5", "metric_pair", "minmax", "plcc", "psnr", "rmse", "srcc", "ssim",
    "to_luminance",
]
