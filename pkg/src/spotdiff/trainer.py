"""Two-stage training: masked-autoencoder pre-training of the backbone, then
conditional fine-tuning under the warm-start curriculum.

Fine-tuning update schemes:
  - modulators_only  only the conditioning pathway trains (default)
  - scratch          whole model trainable from random init, no checkpoint
  - decoder_tune     modulators plus the decoder head
  - backbone_lora    modulators plus rank-r additive factors on every
                     attention / feed-forward weight matrix (frozen bases)

The warm-start curriculum restricts timestep sampling to the low-mask band
{t : abar_t >= 1 - rho} for the first warm_epochs epochs, then switches to
uniform over 1..T. The masking level at any draw is determined solely by the
sampled t.

Every stochastic choice (splits, shuffles, masks, timesteps) flows from
numpy Generators derived from cfg.seed, so runs reproduce bit-for-bit.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .backbone import BackboneConfig, ToyBackbone
from .checkpoint import apply_checkpoint, freezing_manifest
from .conditioning import ConditionedModel, Modulators
from .diffusion import (
    DiffusionConfig,
    DivergenceError,
    corrupt_batch,
    gauss_corrupt,
    gauss_loss,
    training_loss_batch,
)
from .schedule import VisibilitySchedule
from .util import derive_rng

UPDATE_SCHEMES = ("modulators_only", "scratch", "decoder_tune", "backbone_lora")

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 0.0
    batch: int = 32
    milestones: tuple[int, ...] = (20, 30)
    lr_decay: float = 0.2
    max_epochs: int = 50
    patience: int = 5
    val_warmup: int = 15
    warm_epochs: int = 5
    rho: float = 0.20
    seed: int = 42
    val_fraction: float = 0.10
    update_scheme: str = "modulators_only"
    lora_rank: int = 8
    pretrain_epochs: int = 100
    pretrain_lr: float = 1e-3
    # an epoch counts as improved only if val MSE drops by this fraction
    min_rel_improvement: float = 0.005

    def __post_init__(self) -> None:
        if not (0.0 < self.rho < 1.0):
            raise ValueError("rho must lie in (0, 1)")
        if self.warm_epochs > self.max_epochs:
            raise ValueError("warm_epochs must not exceed max_epochs")
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.update_scheme not in UPDATE_SCHEMES:
            raise ValueError(f"unknown update scheme {self.update_scheme!r}")


@dataclass
class TrainLog:
    train_loss: list[float] = field(default_factory=list)
    val_mse: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    timestep_hist: list[np.ndarray] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0


@dataclass
class ModelState:
    """Trained model plus its freezing manifest and provenance."""

    model: ConditionedModel
    manifest: list[dict]
    dcfg: DiffusionConfig
    cfg: TrainConfig


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """lr * decay^(number of milestones strictly below epoch)."""
    passed = sum(1 for m in cfg.milestones if epoch > m)
    return cfg.lr * cfg.lr_decay**passed


def warm_band(schedule: VisibilitySchedule, rho: float) -> list[int]:
    """Timesteps with abar_t >= 1 - rho; falls back to {1} when empty."""
    if not (0.0 < rho < 1.0):
        raise ValueError("rho must lie in (0, 1)")
    band = [t for t in range(1, schedule.T + 1) if schedule.alpha_bar[t] >= 1.0 - rho]
    return band or [1]


def sample_timestep(
    epoch: int, cfg: TrainConfig, schedule: VisibilitySchedule, rng: np.random.Generator
) -> int:
    """One curriculum draw: warm band during warm epochs, uniform afterwards."""
    return int(sample_timesteps(epoch, cfg, schedule, rng, 1)[0])


def sample_timesteps(
    epoch: int, cfg: TrainConfig, schedule: VisibilitySchedule, rng: np.random.Generator, size: int
) -> np.ndarray:
    if epoch <= cfg.warm_epochs:
        band = np.asarray(warm_band(schedule, cfg.rho))
        return band[rng.integers(0, len(band), size=size)]
    return rng.integers(1, schedule.T + 1, size=size)


def _to_tensor(arr: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def pretrain_backbone(
    X: np.ndarray,
    bb_cfg: BackboneConfig,
    cfg: TrainConfig,
    dtype: torch.dtype = torch.float32,
) -> tuple[ToyBackbone, list[float]]:
    """Masked-autoencoder pre-training on expression vectors (conditions unused).

    Per sample, a uniformly random rho-fraction of genes is masked and the
    loss is the mean squared error on the masked coordinates. All parameters
    are frozen before returning, ready for the fine-tune stage.
    """
    n_masked = round(cfg.rho * bb_cfg.G)
    if n_masked < 1:
        raise ValueError("rho too small: no masked coordinates to supervise")
    model = ToyBackbone(bb_cfg, derive_rng(cfg.seed, "pretrain-init"), dtype=dtype)
    rng = derive_rng(cfg.seed, "pretrain-train")
    opt = torch.optim.AdamW(
        model.parameters(), lr=cfg.pretrain_lr, betas=ADAM_BETAS, eps=ADAM_EPS,
        weight_decay=cfg.weight_decay,
    )
    n = X.shape[0]
    losses = []
    for epoch in range(1, cfg.pretrain_epochs + 1):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, cfg.batch):
            idx = order[start : start + cfg.batch]
            xb = _to_tensor(X[idx], dtype)
            # Exactly n_masked masked genes per sample.
            scores = rng.random((len(idx), bb_cfg.G))
            masked_cols = np.argsort(scores, axis=1)[:, :n_masked]
            m = np.ones((len(idx), bb_cfg.G), dtype=np.float64)
            np.put_along_axis(m, masked_cols, 0.0, axis=1)
            mb = _to_tensor(m, dtype)
            recon = model.reconstruct(xb * mb, mb)
            loss = (((1.0 - mb) * (recon - xb)) ** 2).sum() / (1.0 - mb).sum()
            if not torch.isfinite(loss):
                raise DivergenceError(f"pre-training diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
        losses.append(float(np.mean(epoch_losses)))
    for p in model.parameters():
        p.requires_grad_(False)
    return model, losses


class LoRALinear(nn.Module):
    """Frozen base linear plus a trainable rank-r additive factor."""

    def __init__(self, base: nn.Linear, rank: int, rng: np.random.Generator):
        super().__init__()
        self.base = base
        self.rank = rank
        self.scaling = 1.0  # alpha = rank
        dtype = base.weight.dtype
        a = rng.normal(0.0, 0.02, size=(rank, base.in_features))
        self.lora_a = nn.Parameter(torch.from_numpy(a).to(dtype))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * ((x @ self.lora_a.T) @ self.lora_b.T)


def _lora_targets(backbone: ToyBackbone) -> list[tuple[nn.Module, str]]:
    targets = []
    for layer in backbone.layers:
        for name in ("q", "k", "v", "o"):
            targets.append((layer.attn, name))
        for name in ("gate", "value", "out"):
            targets.append((layer.ff, name))
    return targets


def inject_lora(backbone: ToyBackbone, rank: int, rng: np.random.Generator) -> None:
    """Wrap every attention / feed-forward weight matrix with a LoRA adapter."""
    for parent, name in _lora_targets(backbone):
        base = getattr(parent, name)
        base.weight.requires_grad_(False)
        base.bias.requires_grad_(False)
        setattr(parent, name, LoRALinear(base, rank, rng))


def lora_parameter_count(bb_cfg: BackboneConfig, rank: int) -> int:
    """Closed-form count of LoRA factor parameters for the toy architecture."""
    D, F = bb_cfg.D, bb_cfg.ff_dim
    per_layer = 4 * rank * (D + D) + 2 * rank * (D + F) + rank * (F + D)
    return bb_cfg.L * per_layer


def build_model(
    pretrain_prefix: str | Path | None,
    bb_cfg: BackboneConfig,
    cond_dim: int,
    cfg: TrainConfig,
    dcfg: DiffusionConfig,
    conditioning: str = "softadaln",
    dtype: torch.dtype = torch.float32,
) -> ConditionedModel:
    """Assemble the retrofitted model with the update scheme applied."""
    scheme = cfg.update_scheme
    if scheme == "scratch":
        backbone = ToyBackbone(bb_cfg, derive_rng(cfg.seed, "scratch-backbone"), dtype=dtype)
    else:
        if pretrain_prefix is None:
            raise ValueError(f"update scheme {scheme!r} requires a pre-trained checkpoint")
        backbone = ToyBackbone(bb_cfg, derive_rng(cfg.seed, "backbone-shape"), dtype=dtype)
        apply_checkpoint(backbone, pretrain_prefix)
    modulators = Modulators(cond_dim, bb_cfg, conditioning, derive_rng(cfg.seed, "modulators"))
    if dtype is not torch.float32:
        modulators.to(dtype)
    value_embed_all = dcfg.variant in ("mask_diff_randmask", "gauss_diff")
    model = ConditionedModel(backbone, modulators, value_embed_all=value_embed_all)

    if scheme == "scratch":
        for p in backbone.parameters():
            p.requires_grad_(True)
    elif scheme == "decoder_tune":
        backbone.decoder.weight.requires_grad_(True)
        backbone.decoder.bias.requires_grad_(True)
    elif scheme == "backbone_lora":
        inject_lora(backbone, cfg.lora_rank, derive_rng(cfg.seed, "lora"))
    return model


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def _make_optimizer(model: nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(
        trainable_parameters(model), lr=cfg.lr, betas=ADAM_BETAS, eps=ADAM_EPS,
        weight_decay=cfg.weight_decay,
    )


def _train_batch(
    model: ConditionedModel,
    opt: torch.optim.Optimizer,
    X: np.ndarray,
    V: np.ndarray,
    ts: np.ndarray,
    dcfg: DiffusionConfig,
    rng: np.random.Generator,
    epoch: int,
) -> float:
    dtype = model.dtype
    vb = _to_tensor(V, dtype)
    tb = _to_tensor(ts.astype(np.float64), dtype)
    if dcfg.variant == "gauss_diff":
        noisy = np.stack([gauss_corrupt(X[i], int(ts[i]), dcfg.gauss, rng) for i in range(len(ts))])
        xb = _to_tensor(noisy, dtype)
        ones = torch.ones_like(xb)
        pred = model.predict_x0(xb, ones, vb, tb)
        loss = gauss_loss(_to_tensor(X, dtype), pred)
    else:
        Xt, M = corrupt_batch(X, ts, dcfg, rng)
        xb = _to_tensor(Xt, dtype)
        mb = _to_tensor(M.astype(np.float64), dtype)
        pred = model.predict_x0(xb, mb, vb, tb)
        w = _to_tensor(dcfg.schedule.weight[ts - 1], dtype)
        loss = training_loss_batch(_to_tensor(X, dtype), pred, mb, w)
    if not torch.isfinite(loss):
        raise DivergenceError(f"fine-tuning diverged at epoch {epoch}")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach())


def _validation_mse(
    model: ConditionedModel, X_val: np.ndarray, V_val: np.ndarray, dcfg: DiffusionConfig
) -> float:
    """Deterministic conditional prediction from a fully masked input."""
    dtype = model.dtype
    n, G = X_val.shape
    if dcfg.variant == "gauss_diff":
        t_val = float(len(dcfg.gauss.alpha_bar))
    else:
        t_val = float(dcfg.schedule.T)
    xb = torch.zeros((n, G), dtype=dtype)
    mb = (
        torch.ones((n, G), dtype=dtype)
        if dcfg.variant == "gauss_diff"
        else torch.zeros((n, G), dtype=dtype)
    )
    vb = _to_tensor(V_val, dtype)
    tb = torch.full((n,), t_val, dtype=dtype)
    with torch.no_grad():
        pred = model.predict_x0(xb, mb, vb, tb).cpu().numpy().astype(np.float64)
    if model.normalization is not None:
        mu, sigma = model.normalization
        pred = pred * sigma[None, :] + mu[None, :]
    return float(np.mean((pred - X_val) ** 2))


def validation_split(n: int, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """(train_idx, val_idx); depends only on (seed, n), not on the scheme."""
    rng = derive_rng(cfg.seed, "valsplit")
    perm = rng.permutation(n)
    n_val = max(1, round(cfg.val_fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def finetune(
    pretrain_prefix: str | Path | None,
    X: np.ndarray,
    V: np.ndarray,
    cfg: TrainConfig,
    dcfg: DiffusionConfig,
    bb_cfg: BackboneConfig,
    conditioning: str = "softadaln",
    dtype: torch.dtype = torch.float32,
) -> tuple[ModelState, TrainLog]:
    """Conditional fine-tuning with curriculum, milestone decay, early stop."""
    X = np.asarray(X, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    train_idx, val_idx = validation_split(X.shape[0], cfg)
    model = build_model(pretrain_prefix, bb_cfg, V.shape[1], cfg, dcfg, conditioning, dtype)

    X_train, V_train = X[train_idx], V[train_idx]
    X_val, V_val = X[val_idx], V[val_idx]
    if dcfg.variant == "gauss_diff":
        mu = X_train.mean(axis=0)
        sigma = X_train.std(axis=0)
        sigma = np.where(sigma > 0, sigma, 1.0)
        model.normalization = (mu, sigma)
        X_fit = (X_train - mu[None, :]) / sigma[None, :]
    else:
        X_fit = X_train

    opt = _make_optimizer(model, cfg)
    rng = derive_rng(cfg.seed, "train")
    log = TrainLog()
    n_bins = len(dcfg.gauss.alpha_bar) if dcfg.variant == "gauss_diff" else dcfg.schedule.T
    best_val = math.inf
    sig_val = math.inf
    best_state = None
    streak = 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = lr_at_epoch(cfg, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(len(X_fit))
        hist = np.zeros(n_bins, dtype=np.int64)
        batch_losses = []
        for start in range(0, len(order), cfg.batch):
            idx = order[start : start + cfg.batch]
            if dcfg.variant == "gauss_diff":
                ts = rng.integers(1, n_bins + 1, size=len(idx))
            else:
                ts = sample_timesteps(epoch, cfg, dcfg.schedule, rng, len(idx))
            hist += np.bincount(ts - 1, minlength=n_bins)
            batch_losses.append(
                _train_batch(model, opt, X_fit[idx], V_train[idx], ts, dcfg, rng, epoch)
            )
        val = _validation_mse(model, X_val, V_val, dcfg)
        log.train_loss.append(float(np.mean(batch_losses)))
        log.val_mse.append(val)
        log.lr.append(lr)
        log.timestep_hist.append(hist)
        if val < best_val:
            best_val = val
            log.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        if val < sig_val * (1.0 - cfg.min_rel_improvement):
            sig_val = val
            streak = 0
        elif epoch > cfg.val_warmup:
            streak += 1
            if streak >= cfg.patience:
                log.stopped_epoch = epoch
                break
    if log.stopped_epoch == 0:
        log.stopped_epoch = len(log.val_mse)
    if best_state is not None:
        model.load_state_dict(best_state)
    state = ModelState(model=model, manifest=freezing_manifest(model), dcfg=dcfg, cfg=cfg)
    return state, log


def finetune_steps(
    model: ConditionedModel,
    X: np.ndarray,
    V: np.ndarray,
    cfg: TrainConfig,
    dcfg: DiffusionConfig,
    n_steps: int,
    epoch: int = 6,
) -> list[float]:
    """Bare optimization-step driver used by the freezing-contract tests."""
    opt = _make_optimizer(model, cfg)
    rng = derive_rng(cfg.seed, "steps")
    losses = []
    n = X.shape[0]
    for _ in range(n_steps):
        idx = rng.integers(0, n, size=cfg.batch)
        if dcfg.variant == "gauss_diff":
            ts = rng.integers(1, len(dcfg.gauss.alpha_bar) + 1, size=cfg.batch)
        else:
            ts = sample_timesteps(epoch, cfg, dcfg.schedule, rng, cfg.batch)
        losses.append(_train_batch(model, opt, X[idx], V[idx], ts, dcfg, rng, epoch))
    return losses


def run_leave_one_out(
    slices: list,
    pretrain_prefix: str | Path | None,
    cfg: TrainConfig,
    dcfg: DiffusionConfig,
    bb_cfg: BackboneConfig,
    conditioning: str = "softadaln",
    sample_steps: int | None = None,
    config_hash: str = "",
    ks: tuple[int, ...] = (10, 30),
    dtype: torch.dtype = torch.float32,
):
    """Hold each slice out in turn: fine-tune on the rest, sample, evaluate."""
    from .diffusion import sample_many
    from .metrics import evaluate_predictions

    if len(slices) < 2:
        raise ValueError("need at least 2 slices for leave-one-out")
    reports = []
    for fold, test_slice in enumerate(slices):
        train_slices = [s for i, s in enumerate(slices) if i != fold]
        X = np.concatenate([s.X for s in train_slices]).astype(np.float64)
        V = np.concatenate([s.V for s in train_slices]).astype(np.float64)
        state, _ = finetune(pretrain_prefix, X, V, cfg, dcfg, bb_cfg, conditioning, dtype)
        K = sample_steps if sample_steps is not None else dcfg.schedule.T
        rng = derive_rng(cfg.seed, "sample", fold)
        pred = sample_many(test_slice.V.astype(np.float64), state.model, dcfg, K, rng)
        report = evaluate_predictions(
            pred,
            test_slice.X.astype(np.float64),
            coords=test_slice.coords,
            ks=ks,
            provenance={"fold": fold, "seed": cfg.seed, "config_hash": config_hash},
        )
        reports.append(report)
    return reports
