"""Synthetic paired (condition, expression, coordinate) data with known structure.

Each slice is a full grid of spots. A latent vector z in R^latent_dim is drawn
per spot from smooth spatial fields built on a low-frequency sinusoid basis;
the sin/cos pairing makes z marginally N(0, I) at every spot, so the joint
distribution of (x, v) is the same everywhere and closed-form Gaussian
conditioning applies:

    linear_gaussian:  x = A z + sigma_x * eps,   v = M z + sigma_v * eps
    poisson_log:      counts ~ Poisson(exp(A z + bias)), x = log1p(counts)

The condition vector v mimics a two-encoder concatenation: it is split into
two labeled sub-blocks that ablations can zero independently.

Persisted layout: manifest.json plus per-slice expr.csv / cond.csv /
coords.csv. Values are float32, written with 9 significant digits, which
round-trips float32 exactly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .util import derive_rng


@dataclass
class Spot:
    """One spatial location: grid coordinates, expression, condition."""

    row: int
    col: int
    x: np.ndarray  # (G,) float32, log scale
    v: np.ndarray  # (C,) float32


@dataclass(frozen=True)
class GeneratorSpec:
    family: str  # "linear_gaussian" | "poisson_log"
    G: int
    latent_dim: int
    grid: tuple[int, int]
    cond_blocks: tuple[int, int]
    A: np.ndarray  # (G, latent_dim)
    M: np.ndarray  # (C, latent_dim)
    sigma_x: float
    sigma_v: float
    length_scale: float
    seed: int
    poisson_bias: np.ndarray | None = None  # (G,), poisson_log only
    mix_archetypes: int = 0
    mix_concentration: float = 1.0

    @property
    def C(self) -> int:
        return int(self.cond_blocks[0] + self.cond_blocks[1])

    def validate(self) -> None:
        if self.family not in ("linear_gaussian", "poisson_log"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.grid[0] < 1 or self.grid[1] < 1:
            raise ValueError("degenerate grid")
        if self.A.shape != (self.G, self.latent_dim):
            raise ValueError("A must be (G, latent_dim)")
        if self.M.shape != (self.C, self.latent_dim):
            raise ValueError("M must be (C, latent_dim)")
        if np.linalg.matrix_rank(self.A) < self.latent_dim:
            raise ValueError("A must have full column rank")
        if np.linalg.matrix_rank(self.M) < self.latent_dim:
            raise ValueError("M must have full column rank")
        if not (self.sigma_x > 0.0 and self.sigma_v > 0.0):
            raise ValueError("noise scales must be > 0")


def make_spec(
    seed: int = 42,
    family: str = "linear_gaussian",
    G: int = 100,
    latent_dim: int = 8,
    grid: tuple[int, int] = (24, 24),
    cond_blocks: tuple[int, int] = (32, 16),
    sigma_x: float = 0.75,
    sigma_v: float = 0.1,
    length_scale: float = 0.2,
    mix_archetypes: int = 0,
    mix_concentration: float = 1.0,
) -> GeneratorSpec:
    """Draw loading/view matrices from the seed and assemble a validated spec."""
    rng = derive_rng(seed, "genspec")
    A = rng.normal(0.0, 1.0 / np.sqrt(latent_dim), size=(G, latent_dim))
    C = cond_blocks[0] + cond_blocks[1]
    M = rng.normal(0.0, 1.0, size=(C, latent_dim))
    bias = rng.normal(1.0, 0.5, size=G) if family == "poisson_log" else None
    spec = GeneratorSpec(
        family=family, G=G, latent_dim=latent_dim, grid=grid, cond_blocks=cond_blocks,
        A=A, M=M, sigma_x=sigma_x, sigma_v=sigma_v, length_scale=length_scale,
        seed=seed, poisson_bias=bias,
        mix_archetypes=mix_archetypes, mix_concentration=mix_concentration,
    )
    spec.validate()
    return spec


class OracleHandle:
    """Closed-form conditional structure of the linear_gaussian family.

    With z ~ N(0, I): Cov(x) = A A^T + sigma_x^2 I, Cov(v) = M M^T +
    sigma_v^2 I, Cov(x, v) = A M^T. Conditioning gives E[x|v] and the
    per-gene best-achievable Pearson sqrt(Var E[x_g|v] / Var x_g).
    """

    def __init__(self, A: np.ndarray, M: np.ndarray, sigma_x: float, sigma_v: float):
        self.A = np.asarray(A, dtype=np.float64)
        self.M = np.asarray(M, dtype=np.float64)
        self.sigma_x = float(sigma_x)
        self.sigma_v = float(sigma_v)
        # push-through identity: M^T (M M^T + s I)^-1 = (M^T M + s I)^-1 M^T;
        # the latent-side inverse stays well conditioned as sigma_v -> 0.
        k = self.M.shape[1]
        gram = self.M.T @ self.M
        inv = np.linalg.inv(gram + self.sigma_v**2 * np.eye(k))
        self._readout = self.A @ inv @ self.M.T  # (G, C)
        self._shrink = inv @ gram  # (latent, latent)

    def conditional_mean(self, V: np.ndarray) -> np.ndarray:
        """E[x | v] for each row of V: (n, C) -> (n, G)."""
        return np.asarray(V, dtype=np.float64) @ self._readout.T

    def bayes_pcc(self) -> np.ndarray:
        """Per-gene Pearson of the Bayes-optimal predictor against x."""
        var_mu = np.einsum("gl,lk,gk->g", self.A, self._shrink, self.A)
        var_x = np.sum(self.A**2, axis=1) + self.sigma_x**2
        return np.sqrt(np.maximum(var_mu, 0.0) / var_x)

    def gene_covariance(self) -> np.ndarray:
        return self.A @ self.A.T + self.sigma_x**2 * np.eye(self.A.shape[0])

    def gene_correlation(self) -> np.ndarray:
        cov = self.gene_covariance()
        d = np.sqrt(np.diag(cov))
        return cov / np.outer(d, d)


def _field_basis(
    spec: GeneratorSpec, grid: tuple[int, int], f_max: int = 5
) -> tuple[np.ndarray, np.ndarray]:
    """Sinusoid basis over the grid and per-column coefficient scales.

    Returns (basis, scales): basis is (n_spots, n_cols) with spots in
    row-major order; scales[j] is the std of column j's coefficient. The
    sin/cos pairing per frequency keeps the per-spot field variance at
    exactly 1 regardless of position.
    """
    rows, cols = grid
    r = np.repeat(np.arange(rows), cols)
    c = np.tile(np.arange(cols), rows)
    freqs = [(fr, fc) for fr in range(f_max + 1) for fc in range(f_max + 1) if (fr, fc) != (0, 0)]
    weights = np.array(
        [1.0] + [np.exp(-0.5 * (fr**2 + fc**2) * spec.length_scale**2) for fr, fc in freqs]
    )
    norm = np.sqrt(np.sum(weights**2))
    columns = [np.ones(rows * cols)]
    scales = [weights[0] / norm]
    for (fr, fc), w in zip(freqs, weights[1:]):
        theta = 2.0 * np.pi * (fr * r / rows + fc * c / cols)
        columns.extend([np.cos(theta), np.sin(theta)])
        scales.extend([w / norm, w / norm])
    return np.stack(columns, axis=1), np.asarray(scales)


def _latents(spec: GeneratorSpec, grid: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Per-spot latent matrix (n_spots, latent_dim), marginally N(0, I)."""
    n = grid[0] * grid[1]
    if spec.mix_archetypes > 0:
        arch = rng.standard_normal((spec.mix_archetypes, spec.latent_dim))
        w = rng.dirichlet(np.full(spec.mix_archetypes, spec.mix_concentration), size=n)
        # l2 normalization keeps z | w ~ N(0, I), preserving the oracle.
        return (w @ arch) / np.linalg.norm(w, axis=1, keepdims=True)
    basis, scales = _field_basis(spec, grid)
    coeffs = rng.standard_normal((basis.shape[1], spec.latent_dim)) * scales[:, None]
    return basis @ coeffs


def generate_slice_arrays(
    spec: GeneratorSpec, slice_id: int = 0, grid: tuple[int, int] | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray, OracleHandle | None]:
    """(coords, X, V, oracle) for one slice; deterministic in (spec.seed, slice_id).

    grid overrides spec.grid for this slice (slice sizes vary in real data).
    """
    spec.validate()
    rng = derive_rng(spec.seed, "slice", slice_id)
    rows, cols = grid if grid is not None else spec.grid
    n = rows * cols
    coords = np.stack(
        [np.repeat(np.arange(rows), cols), np.tile(np.arange(cols), rows)], axis=1
    ).astype(np.int32)
    z = _latents(spec, (rows, cols), rng)
    if spec.family == "linear_gaussian":
        X = z @ spec.A.T + spec.sigma_x * rng.standard_normal((n, spec.G))
        oracle = OracleHandle(spec.A, spec.M, spec.sigma_x, spec.sigma_v)
    else:
        rate = np.exp(z @ spec.A.T + spec.poisson_bias[None, :])
        X = log_transform(rng.poisson(rate).astype(np.float64))
        oracle = None
    V = z @ spec.M.T + spec.sigma_v * rng.standard_normal((n, spec.C))
    return coords, X.astype(np.float32), V.astype(np.float32), oracle


def generate_slice(spec: GeneratorSpec, slice_id: int = 0) -> tuple[list[Spot], OracleHandle | None]:
    """Spot list plus the closed-form oracle (linear_gaussian only)."""
    coords, X, V, oracle = generate_slice_arrays(spec, slice_id)
    spots = [Spot(row=int(r), col=int(c), x=X[i], v=V[i]) for i, (r, c) in enumerate(coords)]
    return spots, oracle


@dataclass
class SliceData:
    name: str
    role: str  # "benchmark" | "pretrain"
    coords: np.ndarray  # (n, 2) int32
    X: np.ndarray  # (n, G) float32
    V: np.ndarray  # (n, C) float32


@dataclass
class Dataset:
    spec: GeneratorSpec
    slices: list[SliceData]

    @property
    def benchmark_slices(self) -> list[SliceData]:
        return [s for s in self.slices if s.role == "benchmark"]

    @property
    def pretrain_slices(self) -> list[SliceData]:
        return [s for s in self.slices if s.role == "pretrain"]

    def oracle(self) -> OracleHandle | None:
        if self.spec.family != "linear_gaussian":
            return None
        return OracleHandle(self.spec.A, self.spec.M, self.spec.sigma_x, self.spec.sigma_v)


#: Grid of the non-representative benchmark slices; slice 0 keeps spec.grid.
#: Real datasets mix slice sizes (a few hundred to ~1200 spots); the smaller
#: training slices keep fine-tune supervision scarce relative to the
#: pre-training corpus.
DEFAULT_TRAIN_GRID = (17, 17)


def generate_dataset(
    spec: GeneratorSpec,
    n_slices: int = 6,
    n_pretrain: int = 2,
    train_grid: tuple[int, int] | None = DEFAULT_TRAIN_GRID,
) -> Dataset:
    """n_slices benchmark slices plus n_pretrain expression-only slices.

    Benchmark slice 0 is the representative evaluation slice at spec.grid;
    the others use train_grid (spec.grid when None). Pretrain slices use
    spec.grid and distinct slice ids, so the backbone never sees benchmark
    expressions during pre-training.
    """
    slices = []
    for i in range(n_slices):
        grid = spec.grid if i == 0 or train_grid is None else train_grid
        coords, X, V, _ = generate_slice_arrays(spec, slice_id=i, grid=grid)
        slices.append(SliceData(name=f"slice_{i:02d}", role="benchmark", coords=coords, X=X, V=V))
    for j in range(n_pretrain):
        coords, X, V, _ = generate_slice_arrays(spec, slice_id=n_slices + j)
        slices.append(
            SliceData(name=f"pretrain_{j:02d}", role="pretrain", coords=coords, X=X, V=V)
        )
    return Dataset(spec=spec, slices=slices)


def log_transform(counts: np.ndarray) -> np.ndarray:
    """Elementwise log(1 + count); rejects negative entries."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    return np.log1p(counts)


def hmhvg_select(X: np.ndarray, k: int) -> np.ndarray:
    """Intersection of top-k genes by mean and top-k by variance.

    Ties at the cutoff break by gene index ascending; the result is sorted.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        raise ValueError("empty matrix")
    if k > X.shape[1]:
        raise ValueError("k exceeds gene count")
    idx = np.arange(X.shape[1])

    def top(metric: np.ndarray) -> set[int]:
        order = np.lexsort((idx, -metric))
        return set(order[:k].tolist())

    chosen = top(X.mean(axis=0)) & top(X.var(axis=0))
    return np.array(sorted(chosen), dtype=int)


CONDITION_BLOCK_MODES = ("both", "first", "second")


def select_condition_blocks(V: np.ndarray, mode: str, blocks: tuple[int, int]) -> np.ndarray:
    """Zero out one of the two condition sub-blocks (encoder ablations)."""
    if mode not in CONDITION_BLOCK_MODES:
        raise ValueError(f"unknown block mode {mode!r}")
    out = np.array(V, copy=True)
    b0 = blocks[0]
    if mode == "first":
        out[..., b0:] = 0.0
    elif mode == "second":
        out[..., :b0] = 0.0
    return out


# --- persistence -----------------------------------------------------------


def _write_csv(path: Path, header: list[str], rows: np.ndarray, fmt: str) -> None:
    with path.open("w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(fmt % v for v in row) + "\n")


def _spec_to_json(spec: GeneratorSpec) -> dict:
    return {
        "family": spec.family,
        "G": spec.G,
        "latent_dim": spec.latent_dim,
        "grid": list(spec.grid),
        "cond_blocks": list(spec.cond_blocks),
        "A": spec.A.tolist(),
        "M": spec.M.tolist(),
        "sigma_x": spec.sigma_x,
        "sigma_v": spec.sigma_v,
        "length_scale": spec.length_scale,
        "seed": spec.seed,
        "poisson_bias": None if spec.poisson_bias is None else spec.poisson_bias.tolist(),
        "mix_archetypes": spec.mix_archetypes,
        "mix_concentration": spec.mix_concentration,
    }


def _spec_from_json(doc: dict) -> GeneratorSpec:
    return GeneratorSpec(
        family=doc["family"],
        G=doc["G"],
        latent_dim=doc["latent_dim"],
        grid=tuple(doc["grid"]),
        cond_blocks=tuple(doc["cond_blocks"]),
        A=np.asarray(doc["A"], dtype=np.float64),
        M=np.asarray(doc["M"], dtype=np.float64),
        sigma_x=doc["sigma_x"],
        sigma_v=doc["sigma_v"],
        length_scale=doc["length_scale"],
        seed=doc["seed"],
        poisson_bias=None if doc["poisson_bias"] is None else np.asarray(doc["poisson_bias"]),
        mix_archetypes=doc["mix_archetypes"],
        mix_concentration=doc["mix_concentration"],
    )


def save_dataset(dataset: Dataset, out_dir: str | Path) -> None:
    """Write manifest.json plus per-slice expr/cond/coords CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": 1,
        "generator": _spec_to_json(dataset.spec),
        "slices": [
            {"name": s.name, "role": s.role, "n_spots": int(s.coords.shape[0])}
            for s in dataset.slices
        ],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    gene_names = [f"gene_{i:03d}" for i in range(dataset.spec.G)]
    cond_names = [f"cond_{i:03d}" for i in range(dataset.spec.C)]
    for s in dataset.slices:
        sdir = out / "slices" / s.name
        sdir.mkdir(parents=True, exist_ok=True)
        # %.9g round-trips float32 exactly.
        _write_csv(sdir / "expr.csv", gene_names, s.X.astype(np.float64), "%.9g")
        _write_csv(sdir / "cond.csv", cond_names, s.V.astype(np.float64), "%.9g")
        _write_csv(sdir / "coords.csv", ["row", "col"], s.coords, "%d")


def load_dataset(in_dir: str | Path) -> Dataset:
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest.get("schema_version") != 1:
        raise ValueError("unsupported dataset schema version")
    spec = _spec_from_json(manifest["generator"])
    slices = []
    for entry in manifest["slices"]:
        sdir = root / "slices" / entry["name"]
        X = np.loadtxt(sdir / "expr.csv", delimiter=",", skiprows=1, dtype=np.float32, ndmin=2)
        V = np.loadtxt(sdir / "cond.csv", delimiter=",", skiprows=1, dtype=np.float32, ndmin=2)
        coords = np.loadtxt(sdir / "coords.csv", delimiter=",", skiprows=1, dtype=np.int32, ndmin=2)
        slices.append(SliceData(name=entry["name"], role=entry["role"], coords=coords, X=X, V=V))
    return Dataset(spec=spec, slices=slices)


def dataset_fingerprint(in_dir: str | Path) -> str:
    """Stable hash of the dataset manifest, used to guard stage mixing."""
    data = (Path(in_dir) / "manifest.json").read_bytes()
    return hashlib.sha256(data).hexdigest()[:16]
