"""Shared heavy fixtures for the acceptance suite.

The benchmark fixtures pre-train one backbone and fine-tune the models that
criteria 8-10 share. Everything is derived from the package defaults so the
acceptance tests exercise the exact shipped configuration.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from spotdiff import runconfig as rc
from spotdiff.checkpoint import save_checkpoint
from spotdiff.diffusion import DiffusionConfig, sample_many
from spotdiff.metrics import per_gene_pcc
from spotdiff.synthdata import generate_dataset
from spotdiff.trainer import TrainConfig, finetune, pretrain_backbone
from spotdiff.util import derive_rng

BENCH_SEEDS = (42, 43, 44)
BENCH_FOLD = 0


@pytest.fixture(scope="session")
def bench_dataset():
    cfg = rc.resolve_config()
    spec = rc.dataset_spec_from_config(cfg)
    ds = generate_dataset(spec, int(cfg["data.slices"]), int(cfg["data.pretrain_slices"]))
    return ds


@pytest.fixture(scope="session")
def bench_pretrain(bench_dataset, tmp_path_factory):
    """Stand-in for the externally pre-trained foundation backbone (shared)."""
    cfg = rc.resolve_config()
    t0 = time.time()
    X = np.concatenate([s.X for s in bench_dataset.pretrain_slices]).astype(np.float64)
    backbone, losses = pretrain_backbone(
        X, rc.backbone_from_config(cfg), rc.train_from_config(cfg)
    )
    prefix = tmp_path_factory.mktemp("bench") / "pretrain"
    save_checkpoint(prefix, backbone)
    print(f"\n[fixture] backbone pre-training: {time.time() - t0:.0f}s, "
          f"final masked MSE {losses[-1]:.3f}")
    return prefix


def _fold_arrays(dataset, fold):
    slices = dataset.benchmark_slices
    train = [s for i, s in enumerate(slices) if i != fold]
    X = np.concatenate([s.X for s in train]).astype(np.float64)
    V = np.concatenate([s.V for s in train]).astype(np.float64)
    return X, V, slices[fold]


def train_and_sample(dataset, pretrain_prefix, overrides, seed, K=50, fold=BENCH_FOLD):
    """One benchmark run: finetune with overrides, sample the held-out slice."""
    merged = dict(overrides)
    merged["train.seed"] = seed
    cfg = rc.resolve_config(merged)
    tcfg = rc.train_from_config(cfg)
    dcfg = rc.diffusion_from_config(cfg)
    bbcfg = rc.backbone_from_config(cfg)
    X, V, test_slice = _fold_arrays(dataset, fold)
    pre = None if tcfg.update_scheme == "scratch" else pretrain_prefix
    t0 = time.time()
    state, log = finetune(pre, X, V, tcfg, dcfg, bbcfg,
                          conditioning=str(cfg["conditioning.variant"]))
    train_s = time.time() - t0
    t0 = time.time()
    pred = sample_many(test_slice.V.astype(np.float64), state.model, dcfg, K,
                       derive_rng(seed, "bench-sample"))
    sample_s = time.time() - t0
    pcc = float(per_gene_pcc(pred, test_slice.X.astype(np.float64)).mean())
    return {
        "state": state,
        "dcfg": dcfg,
        "pcc": pcc,
        "epochs": len(log.val_mse),
        "train_s": train_s,
        "sample_s": sample_s,
        "test_slice": test_slice,
    }


@pytest.fixture(scope="session")
def bench_hinge_runs(bench_dataset, bench_pretrain):
    """Default-config runs (one per seed); shared by criteria 8 and 10."""
    runs = {}
    for seed in BENCH_SEEDS:
        runs[seed] = train_and_sample(bench_dataset, bench_pretrain, {}, seed)
        print(f"[fixture] hinge seed {seed}: PCC {runs[seed]['pcc']:.4f} "
              f"({runs[seed]['epochs']} epochs, {runs[seed]['train_s']:.0f}s train, "
              f"{runs[seed]['sample_s']:.0f}s sample)")
    return runs
