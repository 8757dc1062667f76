"""Command-line pipeline: data generation, training, sampling, evaluation.

Every stage writes its resolved config (with hash) next to its artifacts and
refuses inputs whose recorded dataset hash differs from the dataset on disk.

Exit codes: 0 success, 2 invalid config, 3 missing prerequisite,
4 numerical divergence.
"""

from __future__ import annotations

import functools
import json
import shutil
import sys
from pathlib import Path

import click
import numpy as np

from . import runconfig as rc
from .checkpoint import apply_checkpoint, save_checkpoint
from .diffusion import DivergenceError, sample_many
from .metrics import evaluate_predictions, gene_correlation_matrix, per_gene_pcc
from .schedule import build_schedule, log_gene_zeta, schedule_table, subsample_schedule
from .synthdata import (
    DEFAULT_TRAIN_GRID,
    Dataset,
    dataset_fingerprint,
    generate_dataset,
    hmhvg_select,
    load_dataset,
    save_dataset,
    select_condition_blocks,
)
from .trainer import build_model, finetune, pretrain_backbone, validation_split
from .util import derive_rng, fmt_float

EXIT_INVALID_CONFIG = 2
EXIT_MISSING_PREREQ = 3
EXIT_DIVERGENCE = 4


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except rc.ConfigError as exc:
            _fail(EXIT_INVALID_CONFIG, str(exc))
        except FileNotFoundError as exc:
            _fail(EXIT_MISSING_PREREQ, str(exc))
        except DivergenceError as exc:
            _fail(EXIT_DIVERGENCE, str(exc))

    return wrapper


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = []
            for v in row:
                if v is None:
                    cells.append("")
                elif isinstance(v, (int, np.integer)):
                    cells.append(str(int(v)))
                elif isinstance(v, str):
                    cells.append(v)
                else:
                    cells.append(fmt_float(v))
            fh.write(",".join(cells) + "\n")


def _load_dataset(path: str) -> Dataset:
    root = Path(path)
    if not (root / "manifest.json").exists():
        raise FileNotFoundError(f"dataset manifest not found under {root}")
    return load_dataset(root)


def _sync_data_keys(cfg: dict, dataset: Dataset) -> dict:
    """Make the stored config's data.* section describe the actual dataset."""
    spec = dataset.spec
    cfg = dict(cfg)
    cfg.update(
        {
            "data.family": spec.family,
            "data.genes": spec.G,
            "data.latent_dim": spec.latent_dim,
            "data.grid_rows": spec.grid[0],
            "data.grid_cols": spec.grid[1],
            "data.cond_block1": spec.cond_blocks[0],
            "data.cond_block2": spec.cond_blocks[1],
            "data.sigma_x": spec.sigma_x,
            "data.sigma_v": spec.sigma_v,
            "data.length_scale": spec.length_scale,
            "data.mix_archetypes": spec.mix_archetypes,
            "data.mix_concentration": spec.mix_concentration,
            "data.seed": spec.seed,
            "data.slices": len(dataset.benchmark_slices),
            "data.pretrain_slices": len(dataset.pretrain_slices),
        }
    )
    return cfg


def _fold_pool(dataset: Dataset, fold: int, blocks: str):
    slices = dataset.benchmark_slices
    if not (0 <= fold < len(slices)):
        raise rc.ConfigError(f"fold {fold} out of range for {len(slices)} slices")
    train = [s for i, s in enumerate(slices) if i != fold]
    X = np.concatenate([s.X for s in train]).astype(np.float64)
    V = np.concatenate([s.V for s in train]).astype(np.float64)
    V = select_condition_blocks(V, blocks, dataset.spec.cond_blocks)
    return X, V, slices[fold]


def _check_dataset_hash(stage_cfg: dict, data_dir: str, what: str) -> None:
    recorded = stage_cfg.get("dataset_hash")
    actual = dataset_fingerprint(data_dir)
    if recorded is not None and recorded != actual:
        raise rc.ConfigError(
            f"{what} was produced for a different dataset "
            f"(hash {recorded} != {actual}); refusing to mix artifacts"
        )


@click.group()
def cli() -> None:
    """Histology-conditioned masked diffusion, desk scale."""


@cli.command("gen-data")
@click.option("--out", required=True, type=click.Path())
@click.option("--family", default=None, type=click.Choice(["linear_gaussian", "poisson_log"]))
@click.option("--slices", default=None, type=int)
@click.option("--pretrain-slices", default=None, type=int)
@click.option("--genes", default=None, type=int)
@click.option("--grid-rows", default=None, type=int)
@click.option("--grid-cols", default=None, type=int)
@click.option("--train-grid-rows", default=None, type=int,
              help="grid of the non-representative benchmark slices")
@click.option("--train-grid-cols", default=None, type=int)
@click.option("--sigma-x", default=None, type=float)
@click.option("--sigma-v", default=None, type=float)
@click.option("--seed", default=None, type=int)
@_guarded
def cmd_gen_data(out, family, slices, pretrain_slices, genes, grid_rows, grid_cols,
                 train_grid_rows, train_grid_cols, sigma_x, sigma_v, seed) -> None:
    """Generate a synthetic paired dataset; idempotent for a fixed seed."""
    cfg = rc.resolve_config(
        {
            "data.family": family,
            "data.slices": slices,
            "data.pretrain_slices": pretrain_slices,
            "data.genes": genes,
            "data.grid_rows": grid_rows,
            "data.grid_cols": grid_cols,
            "data.sigma_x": sigma_x,
            "data.sigma_v": sigma_v,
            "data.seed": seed,
        }
    )
    spec = rc.dataset_spec_from_config(cfg)
    if train_grid_rows is not None and train_grid_cols is not None:
        train_grid = (train_grid_rows, train_grid_cols)
    elif DEFAULT_TRAIN_GRID[0] * DEFAULT_TRAIN_GRID[1] < spec.grid[0] * spec.grid[1]:
        train_grid = DEFAULT_TRAIN_GRID
    else:
        train_grid = None
    dataset = generate_dataset(spec, int(cfg["data.slices"]), int(cfg["data.pretrain_slices"]),
                               train_grid=train_grid)
    save_dataset(dataset, out)
    click.echo(f"wrote {len(dataset.slices)} slices to {out}")


@cli.command("pretrain")
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--epochs", default=None, type=int, help="override train.pretrain_epochs")
@click.option("--seed", default=None, type=int)
@_guarded
def cmd_pretrain(data_dir, out, epochs, seed) -> None:
    """Masked-autoencoder pre-training of the backbone; emits a frozen checkpoint."""
    dataset = _load_dataset(data_dir)
    cfg = rc.resolve_config({"train.pretrain_epochs": epochs, "train.seed": seed})
    cfg = _sync_data_keys(cfg, dataset)
    pool = dataset.pretrain_slices or dataset.benchmark_slices
    X = np.concatenate([s.X for s in pool]).astype(np.float64)
    model, losses = pretrain_backbone(X, rc.backbone_from_config(cfg), rc.train_from_config(cfg))
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "checkpoint-pretrain", model)
    _write_csv(out_dir / "trainlog.csv", ["epoch", "train_loss"],
               [(i + 1, v) for i, v in enumerate(losses)])
    rc.save_config(
        cfg, out_dir / "config.json",
        extra={"dataset_hash": dataset_fingerprint(data_dir),
               "consumed": [str(Path(data_dir) / "manifest.json")]},
    )
    click.echo(f"pre-trained backbone saved to {out_dir}")


@cli.command("finetune")
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--pretrain", "pretrain_dir", default=None, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--fold", default=0, type=int)
@click.option("--scheme", default=None,
              type=click.Choice(["modulators_only", "scratch", "decoder_tune", "backbone_lora"]))
@click.option("--objective", default=None,
              type=click.Choice(["mask_diff", "mask_diff_randmask", "gauss_diff"]))
@click.option("--conditioning", default=None,
              type=click.Choice(["softadaln", "softadaln_nosoftnorm", "softadaln_noidinit",
                                 "hist_affine_ln"]))
@click.option("--blocks", default=None, type=click.Choice(["both", "first", "second"]))
@click.option("--schedule-kind", default=None, type=click.Choice(["power", "linear", "cosine"]))
@click.option("--horizon", "-T", "horizon", default=None, type=int, help="diffusion steps T")
@click.option("--zeta", default=None, help='power exponent or "auto"')
@click.option("--warm-epochs", default=None, type=int)
@click.option("--max-epochs", default=None, type=int)
@click.option("--seed", default=None, type=int)
@_guarded
def cmd_finetune(data_dir, pretrain_dir, out, fold, scheme, objective, conditioning, blocks,
                 schedule_kind, horizon, zeta, warm_epochs, max_epochs, seed) -> None:
    """Conditional fine-tuning on all slices except the held-out fold."""
    dataset = _load_dataset(data_dir)
    if zeta is not None and zeta != "auto":
        zeta = float(zeta)
    cfg = rc.resolve_config(
        {
            "train.update_scheme": scheme,
            "diffusion.variant": objective,
            "conditioning.variant": conditioning,
            "conditioning.blocks": blocks,
            "schedule.kind": schedule_kind,
            "schedule.T": horizon,
            "schedule.zeta": zeta,
            "train.warm_epochs": warm_epochs,
            "train.max_epochs": max_epochs,
            "train.seed": seed,
        }
    )
    cfg = _sync_data_keys(cfg, dataset)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)

    pretrain_prefix = None
    if cfg["train.update_scheme"] != "scratch":
        if pretrain_dir is None:
            raise rc.ConfigError("--pretrain is required unless --scheme scratch")
        src = Path(pretrain_dir)
        if not (src / "checkpoint-pretrain.bin").exists():
            raise FileNotFoundError(f"no pre-train checkpoint under {src}")
        pre_cfg = rc.load_config(src / "config.json")
        _check_dataset_hash(pre_cfg, data_dir, "pre-train checkpoint")
        for suffix in (".bin", ".manifest.json"):
            shutil.copyfile(src / f"checkpoint-pretrain{suffix}",
                            out_dir / f"checkpoint-pretrain{suffix}")
        pretrain_prefix = out_dir / "checkpoint-pretrain"

    X, V, _ = _fold_pool(dataset, fold, str(cfg["conditioning.blocks"]))
    state, log = finetune(
        pretrain_prefix, X, V,
        rc.train_from_config(cfg), rc.diffusion_from_config(cfg), rc.backbone_from_config(cfg),
        conditioning=str(cfg["conditioning.variant"]),
    )
    save_checkpoint(out_dir / "checkpoint-best", state.model)
    _write_csv(
        out_dir / "trainlog.csv",
        ["epoch", "train_loss", "val_mse", "lr", "is_best"],
        [
            (e + 1, log.train_loss[e], log.val_mse[e], log.lr[e], int(e + 1 == log.best_epoch))
            for e in range(len(log.val_mse))
        ],
    )
    n_bins = len(log.timestep_hist[0])
    _write_csv(
        out_dir / "timestep_hist.csv",
        ["epoch"] + [f"t{t}" for t in range(1, n_bins + 1)],
        [(e + 1, *hist) for e, hist in enumerate(log.timestep_hist)],
    )
    rc.save_config(
        cfg, out_dir / "config.json",
        extra={"dataset_hash": dataset_fingerprint(data_dir),
               "consumed": [str(Path(data_dir) / "manifest.json"),
                            str(pretrain_prefix) if pretrain_prefix else None],
               "notes": {"fold": fold, "best_epoch": log.best_epoch,
                         "stopped_epoch": log.stopped_epoch}},
    )
    click.echo(f"fine-tuned model saved to {out_dir} (best epoch {log.best_epoch})")


def _rebuild_model(run_dir: Path, dataset: Dataset, fold: int):
    """Reconstruct the trained model of a finetune run directory."""
    cfg = rc.load_config(run_dir / "config.json")
    best = run_dir / "checkpoint-best"
    if not (run_dir / "checkpoint-best.bin").exists():
        raise FileNotFoundError(f"no best checkpoint under {run_dir}")
    dcfg = rc.diffusion_from_config(cfg)
    tcfg = rc.train_from_config(cfg)
    pre = None
    if cfg["train.update_scheme"] != "scratch":
        pre = run_dir / "checkpoint-pretrain"
    cond_dim = int(cfg["data.cond_block1"]) + int(cfg["data.cond_block2"])
    model = build_model(pre, rc.backbone_from_config(cfg), cond_dim, tcfg, dcfg,
                        conditioning=str(cfg["conditioning.variant"]))
    apply_checkpoint(model, best)
    if dcfg.variant == "gauss_diff":
        X, _, _ = _fold_pool(dataset, fold, str(cfg["conditioning.blocks"]))
        train_idx, _ = validation_split(X.shape[0], tcfg)
        mu = X[train_idx].mean(axis=0)
        sigma = X[train_idx].std(axis=0)
        model.normalization = (mu, np.where(sigma > 0, sigma, 1.0))
    return model, dcfg, cfg


@cli.command("sample")
@click.option("--run", "run_dir", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--fold", default=0, type=int)
@click.option("--steps", "-K", default=None, type=int, help="inference budget K (default T)")
@click.option("--seed", default=7, type=int)
@click.option("--out", required=True, type=click.Path())
@_guarded
def cmd_sample(run_dir, data_dir, fold, steps, seed, out) -> None:
    """Sample expression predictions for every spot of the held-out slice."""
    run_dir = Path(run_dir)
    dataset = _load_dataset(data_dir)
    cfg = rc.load_config(run_dir / "config.json")
    _check_dataset_hash(cfg, data_dir, "finetune run")
    model, dcfg, cfg = _rebuild_model(run_dir, dataset, fold)
    _, _, test_slice = _fold_pool(dataset, fold, str(cfg["conditioning.blocks"]))
    V = select_condition_blocks(
        test_slice.V.astype(np.float64), str(cfg["conditioning.blocks"]), dataset.spec.cond_blocks
    )
    K = steps if steps is not None else dcfg.schedule.T
    pred = sample_many(V, model, dcfg, K, derive_rng(seed, "cli-sample"))
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    gene_names = [f"gene_{i:03d}" for i in range(pred.shape[1])]
    _write_csv(out, gene_names, pred)
    sidecar = {
        "config_hash": cfg["config_hash"],
        "dataset_hash": dataset_fingerprint(data_dir),
        "fold": fold,
        "steps": K,
        "seed": seed,
        "consumed": [str(run_dir / "config.json"), str(run_dir / "checkpoint-best.bin"),
                     str(Path(data_dir) / "manifest.json")],
    }
    Path(str(out) + ".provenance.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
    click.echo(f"wrote predictions for {pred.shape[0]} spots to {out}")


@cli.command("evaluate")
@click.option("--pred", "pred_csv", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--fold", default=0, type=int)
@click.option("--out", required=True, type=click.Path())
@click.option("--hmhvg-k", default=None, type=int,
              help="restrict evaluation to the HMHVG set computed on training slices")
@click.option("--small-k", default=None, type=int, help="PCC-50 stand-in k (default 10)")
@click.option("--large-k", default=None, type=int, help="PCC-200 stand-in k (default 30)")
@_guarded
def cmd_evaluate(pred_csv, data_dir, fold, out, hmhvg_k, small_k, large_k) -> None:
    """Metric bundle for a prediction CSV against the held-out slice."""
    pred_path = Path(pred_csv)
    if not pred_path.exists():
        raise FileNotFoundError(f"prediction file {pred_path} not found")
    dataset = _load_dataset(data_dir)
    sidecar_path = Path(str(pred_path) + ".provenance.json")
    provenance = {}
    if sidecar_path.exists():
        provenance = json.loads(sidecar_path.read_text())
        if provenance.get("dataset_hash") not in (None, dataset_fingerprint(data_dir)):
            raise rc.ConfigError("prediction provenance does not match the dataset")
    pred = np.loadtxt(pred_path, delimiter=",", skiprows=1, ndmin=2)
    slices = dataset.benchmark_slices
    if not (0 <= fold < len(slices)):
        raise rc.ConfigError(f"fold {fold} out of range")
    test_slice = slices[fold]
    truth = test_slice.X.astype(np.float64)
    if pred.shape != truth.shape:
        raise rc.ConfigError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    genes = np.arange(truth.shape[1])
    if hmhvg_k is not None:
        train_X = np.concatenate([s.X for i, s in enumerate(slices) if i != fold])
        genes = hmhvg_select(train_X.astype(np.float64), hmhvg_k)
        if len(genes) == 0:
            raise rc.ConfigError("HMHVG selection is empty at this k")
        pred, truth = pred[:, genes], truth[:, genes]

    small_k = small_k if small_k is not None else int(rc.DEFAULT_CONFIG["eval.pcc_small_k"])
    large_k = large_k if large_k is not None else int(rc.DEFAULT_CONFIG["eval.pcc_large_k"])
    if large_k > truth.shape[1]:
        raise rc.ConfigError(f"large-k {large_k} exceeds evaluated gene count {truth.shape[1]}")
    report = evaluate_predictions(
        pred, truth, coords=test_slice.coords, ks=(small_k, large_k), provenance=provenance
    )
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = report.to_json_dict()
    doc["pcc_50equiv"] = report.pcc_topk[small_k]
    doc["pcc_200equiv"] = report.pcc_topk[large_k]
    doc["k_mapping"] = {"pcc_50equiv": small_k, "pcc_200equiv": large_k}
    doc["genes"] = [int(g) for g in genes]
    doc["consumed"] = [str(pred_path), str(sidecar_path) if sidecar_path.exists() else None,
                       str(Path(data_dir) / "manifest.json")]
    (out_dir / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    pccs = per_gene_pcc(pred, truth)
    ssim = report.ssim_per_gene
    _write_csv(out_dir / "per_gene.csv", ["gene", "pcc", "ssim"],
               [(f"gene_{int(g):03d}", pccs[i], ssim[i]) for i, g in enumerate(genes)])
    _write_csv(out_dir / "corr_pred.csv", [f"gene_{int(g):03d}" for g in genes],
               gene_correlation_matrix(pred))
    _write_csv(out_dir / "corr_truth.csv", [f"gene_{int(g):03d}" for g in genes],
               gene_correlation_matrix(truth))
    click.echo(f"report written to {out_dir / 'report.json'}")


ABLATION_GRIDS = {
    "update_schemes": [
        ("scratch", {"train.update_scheme": "scratch"}),
        ("decoder_tune", {"train.update_scheme": "decoder_tune"}),
        ("backbone_lora", {"train.update_scheme": "backbone_lora"}),
        ("modulators_only", {"train.update_scheme": "modulators_only"}),
    ],
    "objectives": [
        ("gauss_diff", {"diffusion.variant": "gauss_diff"}),
        ("mask_diff_nocurr", {"train.warm_epochs": 0}),
        ("mask_diff_randmask", {"diffusion.variant": "mask_diff_randmask"}),
        ("mask_diff", {}),
    ],
    "conditioning": [
        ("hist_affine_ln", {"conditioning.variant": "hist_affine_ln"}),
        ("softadaln_nosoftnorm", {"conditioning.variant": "softadaln_nosoftnorm"}),
        ("softadaln_noidinit", {"conditioning.variant": "softadaln_noidinit"}),
        ("softadaln", {}),
    ],
    "encoders": [
        ("block1_only", {"conditioning.blocks": "first"}),
        ("block2_only", {"conditioning.blocks": "second"}),
        ("both_blocks", {}),
    ],
    "schedules": [
        ("linear", {"schedule.kind": "linear", "schedule.zeta": 1.0}),
        ("cosine", {"schedule.kind": "cosine"}),
        ("zeta_0.5", {"schedule.kind": "power", "schedule.zeta": 0.5}),
        ("zeta_2", {"schedule.kind": "power", "schedule.zeta": 2.0}),
        ("zeta_log_gene", {"schedule.kind": "power", "schedule.zeta": "auto"}),
    ],
    "t_sweep": [
        (f"T{T}", {"schedule.T": T}) for T in (10, 25, 50, 100)
    ],
    "k_sweep": [(f"K{K}", {}) for K in (1, 5, 25, 50)],
}


@cli.command("ablate")
@click.option("--grid", "grid_name", required=True, type=click.Choice(sorted(ABLATION_GRIDS)))
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--pretrain", "pretrain_dir", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--seeds", default=3, type=int)
@click.option("--fold", default=0, type=int)
@click.option("--max-epochs", default=None, type=int)
@click.option("--warm-epochs", default=None, type=int)
@click.option("--steps", default=None, type=int, help="sampling budget (default T)")
@click.option("--horizon", "-T", "horizon", default=None, type=int, help="diffusion steps T")
@click.option("--small-k", default=None, type=int)
@click.option("--large-k", default=None, type=int)
@_guarded
def cmd_ablate(grid_name, data_dir, pretrain_dir, out, seeds, fold, max_epochs, warm_epochs,
               steps, horizon, small_k, large_k) -> None:
    """Run a named ablation grid and emit one consolidated CSV."""
    dataset = _load_dataset(data_dir)
    pre_dir = Path(pretrain_dir)
    if not (pre_dir / "checkpoint-pretrain.bin").exists():
        raise FileNotFoundError(f"no pre-train checkpoint under {pre_dir}")
    pre_cfg = rc.load_config(pre_dir / "config.json")
    _check_dataset_hash(pre_cfg, data_dir, "pre-train checkpoint")
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)

    small_k = small_k if small_k is not None else int(rc.DEFAULT_CONFIG["eval.pcc_small_k"])
    large_k = large_k if large_k is not None else int(rc.DEFAULT_CONFIG["eval.pcc_large_k"])
    rows = []
    trained: dict[str, object] = {}
    for variant, overrides in ABLATION_GRIDS[grid_name]:
        for seed_offset in range(seeds):
            seed = 42 + seed_offset
            merged = dict(overrides)
            merged["train.seed"] = seed
            if max_epochs is not None:
                merged["train.max_epochs"] = max_epochs
            if warm_epochs is not None and "train.warm_epochs" not in merged:
                merged["train.warm_epochs"] = warm_epochs
            if horizon is not None and "schedule.T" not in merged:
                merged["schedule.T"] = horizon
            cfg = _sync_data_keys(rc.resolve_config(merged), dataset)
            tcfg = rc.train_from_config(cfg)
            dcfg = rc.diffusion_from_config(cfg)
            bbcfg = rc.backbone_from_config(cfg)
            blocks = str(cfg["conditioning.blocks"])
            X, V, test_slice = _fold_pool(dataset, fold, blocks)
            pre = None if tcfg.update_scheme == "scratch" else pre_dir / "checkpoint-pretrain"
            cache_key = rc.config_hash(cfg)
            if cache_key not in trained:
                state, _ = finetune(pre, X, V, tcfg, dcfg, bbcfg,
                                    conditioning=str(cfg["conditioning.variant"]))
                trained[cache_key] = state
            state = trained[cache_key]
            if grid_name == "k_sweep":
                K = min(int(variant[1:]), dcfg.schedule.T)
            else:
                K = steps if steps is not None else dcfg.schedule.T
            V_test = select_condition_blocks(test_slice.V.astype(np.float64), blocks,
                                             dataset.spec.cond_blocks)
            pred = sample_many(V_test, state.model, dcfg, K, derive_rng(seed, "ablate", variant))
            truth = test_slice.X.astype(np.float64)
            report = evaluate_predictions(pred, truth, coords=None, ks=(small_k, large_k))
            rows.append(
                (variant, seed, report.pcc_topk[small_k], report.pcc_topk[large_k],
                 report.mse, report.mae)
            )
            click.echo(
                f"{grid_name}/{variant} seed={seed}: "
                f"pcc_50equiv={report.pcc_topk[small_k]:.4f} mse={report.mse:.4f}"
            )
    _write_csv(out_dir / "ablation.csv",
               ["variant", "seed", "pcc_50equiv", "pcc_200equiv", "mse", "mae"], rows)
    (out_dir / "grid.json").write_text(json.dumps(
        {"grid": grid_name, "fold": fold, "seeds": seeds,
         "dataset_hash": dataset_fingerprint(data_dir),
         "k_mapping": {"pcc_50equiv": small_k, "pcc_200equiv": large_k}},
        indent=1, sort_keys=True))
    click.echo(f"grid results written to {out_dir / 'ablation.csv'}")


@cli.command("schedule-dump")
@click.option("--kind", default="power", type=click.Choice(["power", "linear", "cosine"]))
@click.option("--horizon", "-T", "horizon", default=50, type=int)
@click.option("--zeta", default="auto")
@click.option("--genes", default=100, type=int, help='gene count used when zeta is "auto"')
@click.option("--subsample", default=None, type=int, help="emit the K-step subsampled table")
@click.option("--out", required=True, type=click.Path())
@_guarded
def cmd_schedule_dump(kind, horizon, zeta, genes, subsample, out) -> None:
    """Emit the schedule table (t, alpha_bar, drop, revive, weight) as CSV."""
    z = log_gene_zeta(horizon, genes) if zeta == "auto" else float(zeta)
    try:
        sched = build_schedule(kind, horizon, z)
        if subsample is not None:
            sched = subsample_schedule(sched, subsample)
    except ValueError as exc:
        raise rc.ConfigError(str(exc)) from exc
    rows = [
        (r["t"], r["alpha_bar"], r["drop"], r["revive"], r["weight"])
        for r in schedule_table(sched)
    ]
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(out, ["t", "alpha_bar", "drop", "revive", "weight"], rows)
    click.echo(f"schedule table written to {out}")


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
