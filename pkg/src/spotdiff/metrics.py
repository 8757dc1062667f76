"""Evaluation suite: per-gene Pearson, MSE/MAE, spatial SSIM, correlation
matrices, and the paired Wilcoxon signed-rank test.

Conventions fixed here and relied on by the tests:
  - Per-gene Pearson is computed across spots; genes where either vector has
    zero variance contribute 0.
  - Top-k gene selection ranks by variance of the truth, ties broken by gene
    index ascending.
  - SSIM uses a 7x7 uniform window with C1 = (0.01 L)^2, C2 = (0.03 L)^2 where
    L is the truth map's dynamic range (1 when the truth map is constant).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.stats import rankdata

SSIM_WINDOW = 7
WILCOXON_EXACT_MAX_N = 25


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation with the zero-variance-contributes-0 convention."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da = a - a.mean()
    db = b - b.mean()
    na = np.sqrt(np.sum(da**2))
    nb = np.sqrt(np.sum(db**2))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(da, db) / (na * nb), -1.0, 1.0))


def per_gene_pcc(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Across-spot Pearson for every gene column."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError("shape mismatch")
    if pred.shape[0] < 2:
        raise ValueError("need at least 2 spots")
    return np.array([_pearson(pred[:, g], truth[:, g]) for g in range(pred.shape[1])])


def top_variable_genes(truth: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k most variable genes; ties break by gene index."""
    truth = np.asarray(truth, dtype=np.float64)
    if k > truth.shape[1]:
        raise ValueError("k exceeds gene count")
    variances = truth.var(axis=0)
    order = np.lexsort((np.arange(truth.shape[1]), -variances))
    return np.sort(order[:k])


def pcc_topk(pred: np.ndarray, truth: np.ndarray, k: int) -> float:
    """Mean per-gene Pearson over the k most variable genes of the truth."""
    genes = top_variable_genes(truth, k)
    return float(per_gene_pcc(pred[:, genes], truth[:, genes]).mean())


def mse_mae(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """Means over all spot-gene entries."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError("shape mismatch")
    diff = pred - truth
    return float(np.mean(diff**2)), float(np.mean(np.abs(diff)))


def rasterize(values: np.ndarray, coords: np.ndarray, grid: tuple[int, int] | None = None) -> np.ndarray:
    """Scatter per-spot values onto a (rows, cols) grid.

    Absent cells are filled with the mean of the present values.
    """
    coords = np.asarray(coords)
    if grid is None:
        grid = (int(coords[:, 0].max()) + 1, int(coords[:, 1].max()) + 1)
    out = np.full(grid, np.mean(values), dtype=np.float64)
    out[coords[:, 0], coords[:, 1]] = values
    return out


def ssim_gene_map(pred_grid: np.ndarray, truth_grid: np.ndarray) -> float:
    """Mean local structural similarity between two 2-D expression maps."""
    pred_grid = np.asarray(pred_grid, dtype=np.float64)
    truth_grid = np.asarray(truth_grid, dtype=np.float64)
    if pred_grid.size == 0 or truth_grid.size == 0:
        raise ValueError("empty grid")
    if pred_grid.shape != truth_grid.shape:
        raise ValueError("shape mismatch")
    L = float(truth_grid.max() - truth_grid.min())
    if L == 0.0:
        L = 1.0
    c1 = (0.01 * L) ** 2
    c2 = (0.03 * L) ** 2

    def win(a: np.ndarray) -> np.ndarray:
        return uniform_filter(a, size=SSIM_WINDOW, mode="reflect")

    mu_p = win(pred_grid)
    mu_t = win(truth_grid)
    var_p = win(pred_grid**2) - mu_p**2
    var_t = win(truth_grid**2) - mu_t**2
    cov = win(pred_grid * truth_grid) - mu_p * mu_t
    num = (2 * mu_p * mu_t + c1) * (2 * cov + c2)
    den = (mu_p**2 + mu_t**2 + c1) * (var_p + var_t + c2)
    return float(np.mean(num / den))


def gene_correlation_matrix(X: np.ndarray) -> np.ndarray:
    """Gene-gene Pearson matrix; zero-variance genes get zero off-diagonals."""
    X = np.asarray(X, dtype=np.float64)
    centered = X - X.mean(axis=0)
    norms = np.sqrt(np.sum(centered**2, axis=0))
    ok = norms > 0.0
    safe = np.where(ok, norms, 1.0)
    unit = centered / safe
    corr = unit.T @ unit
    corr[~ok, :] = 0.0
    corr[:, ~ok] = 0.0
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, -1.0, 1.0)


def corr_matrix_compare(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """(Frobenius distance, upper-triangle Pearson) of gene-gene matrices."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError("shape mismatch")
    if pred.shape[0] < 2 or pred.shape[1] < 2:
        raise ValueError("need at least 2 spots and 2 genes")
    cp = gene_correlation_matrix(pred)
    ct = gene_correlation_matrix(truth)
    frob = float(np.linalg.norm(cp - ct))
    iu = np.triu_indices(cp.shape[0], k=1)
    return frob, _pearson(cp[iu], ct[iu])


def _wilcoxon_exact_two_sided(ranks: np.ndarray, w_plus: float) -> float:
    """Exact two-sided p by enumerating the 2^n sign assignments.

    Ranks may be half-integers (average ranks), so the DP runs over doubled
    rank sums.
    """
    doubled = np.round(2.0 * ranks).astype(int)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for d in doubled:
        shifted = np.zeros_like(counts)
        shifted[d:] = counts[: total + 1 - d]
        counts = counts + shifted
    counts /= counts.sum()
    w2 = int(round(2.0 * w_plus))
    p_le = counts[: w2 + 1].sum()
    p_ge = counts[w2:].sum()
    return float(min(1.0, 2.0 * min(p_le, p_ge)))


def wilcoxon_paired(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sided paired signed-rank test.

    Zero differences are dropped; tied magnitudes get average ranks. Exact
    null enumeration for effective n <= 25, normal approximation with tie
    and continuity corrections beyond that. All-zero differences give p = 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("length mismatch")
    d = a - b
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = rankdata(np.abs(d), method="average")
    w_plus = float(ranks[d > 0].sum())
    if n <= WILCOXON_EXACT_MAX_N:
        return _wilcoxon_exact_two_sided(ranks, w_plus)
    mu = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    if var <= 0.0:
        return 1.0
    delta = w_plus - mu
    if delta == 0.0:
        return 1.0
    z = (delta - 0.5 * math.copysign(1.0, delta)) / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return float(min(1.0, max(p, 5e-324)))


@dataclass
class RunReport:
    """Metric bundle for one evaluated slice/fold."""

    pcc_topk: dict[int, float]
    mse: float
    mae: float
    ssim_per_gene: np.ndarray
    corr_distance: float
    corr_agreement: float
    provenance: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not all(-1.0 <= v <= 1.0 for v in self.pcc_topk.values()):
            raise ValueError("pcc values must lie in [-1, 1]")
        if len(self.ssim_per_gene) and not np.all(
            (self.ssim_per_gene >= -1.0) & (self.ssim_per_gene <= 1.0)
        ):
            raise ValueError("ssim values must lie in [-1, 1]")
        if self.mse < 0.0 or self.mae < 0.0:
            raise ValueError("mse and mae must be nonnegative")
        if not (-1.0 <= self.corr_agreement <= 1.0):
            raise ValueError("corr_agreement must lie in [-1, 1]")

    def to_json_dict(self) -> dict:
        return {
            "pcc_topk": {str(k): v for k, v in self.pcc_topk.items()},
            "mse": self.mse,
            "mae": self.mae,
            "ssim_per_gene": [float(v) for v in self.ssim_per_gene],
            "ssim_mean": float(np.mean(self.ssim_per_gene)) if len(self.ssim_per_gene) else None,
            "corr_distance": self.corr_distance,
            "corr_agreement": self.corr_agreement,
            "provenance": self.provenance,
        }


def evaluate_predictions(
    pred: np.ndarray,
    truth: np.ndarray,
    coords: np.ndarray | None = None,
    ks: tuple[int, ...] = (10, 30),
    provenance: dict | None = None,
) -> RunReport:
    """Full metric bundle for one slice of predictions."""
    mse, mae = mse_mae(pred, truth)
    pccs = {k: pcc_topk(pred, truth, k) for k in ks}
    if coords is not None:
        grid = (int(coords[:, 0].max()) + 1, int(coords[:, 1].max()) + 1)
        ssim = np.array(
            [
                ssim_gene_map(rasterize(pred[:, g], coords, grid), rasterize(truth[:, g], coords, grid))
                for g in range(truth.shape[1])
            ]
        )
    else:
        ssim = np.array([])
    frob, agree = corr_matrix_compare(pred, truth)
    report = RunReport(
        pcc_topk=pccs,
        mse=mse,
        mae=mae,
        ssim_per_gene=ssim,
        corr_distance=frob,
        corr_agreement=agree,
        provenance=provenance or {},
    )
    report.validate()
    return report
