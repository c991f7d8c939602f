"""Mask-to-predict training: one-step supervised loss on observed points,
artificial-mask input augmentation with a consistency term, AdamW, and a
one-cycle learning-rate schedule.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import masking as mk
from . import model as md
from . import tensor as T
from .tensor import Tensor


class TrainingDiverged(RuntimeError):
    def __init__(self, what: str):
        super().__init__(f"training diverged: {what}")


@dataclass
class MaskSpec:
    pattern: str = mk.PATCHWISE
    missing_rate: float = 0.25
    patch_size: int = 4

    def generate(self, h: int, w: int, seed: int) -> mk.ObservationMask:
        return mk.gen_mask(self.pattern, h, w, self.missing_rate, seed,
                           patch_size=self.patch_size)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3          # one-cycle peak
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 16
    peak_fraction: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mpt_enabled: bool = True
    mpt_rate: float | None = None        # None: uniform in [0, missing_rate]
    consistency_weight: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.consistency_weight < 0:
            raise ValueError("consistency_weight must be >= 0")


# -- losses ---------------------------------------------------------------------

def masked_one_step_loss(pred: Tensor, target: np.ndarray,
                         mask: np.ndarray) -> Tensor:
    """Mean squared error restricted to observed points.

    pred: (B, H, W, C) tensor; target alike; mask (B, H, W).  Ground truth
    exists only on the observed set, so unobserved residuals carry no
    gradient.  Per-sample means (over observed points and channels) are
    averaged over the batch.
    """
    b, h, w, c = pred.shape
    mask = np.asarray(mask, dtype=pred.dtype).reshape(b, h, w)
    counts = mask.sum(axis=(1, 2))
    if np.any(counts == 0):
        raise ValueError("mask has no observed points; loss undefined")
    diff = pred - np.asarray(target, dtype=pred.dtype)
    masked = diff * mask[..., None]
    per_sample = (masked * masked).sum(axis=(1, 2, 3))
    scale = (1.0 / (counts * c)).astype(pred.dtype)
    return (per_sample * scale).mean()


def consistency_loss(pred_clean, pred_masked: Tensor) -> Tensor:
    """Full-domain mean squared gap between the two prediction branches.

    The clean branch is a fixed target: pass it detached (or as a plain
    array) so gradient flows only through the masked-input branch.
    """
    clean = pred_clean.data if isinstance(pred_clean, Tensor) else pred_clean
    diff = pred_masked - np.asarray(clean, dtype=pred_masked.dtype)
    return (diff * diff).mean()


# -- optimizer -------------------------------------------------------------------

@dataclass
class TrainState:
    params: md.ModelParams
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, t in self.params.items():
            self.m.setdefault(name, np.zeros_like(t.data))
            self.v.setdefault(name, np.zeros_like(t.data))


def adamw_step(state: TrainState, grads: dict, lr: float,
               cfg: TrainConfig) -> TrainState:
    """Bias-corrected Adam moments with decoupled weight decay."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {name}")
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        p.data = p.data - lr * update - lr * cfg.weight_decay * p.data
    return state


def one_cycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Cosine warmup to the peak, cosine anneal to the floor; continuous."""
    if total_steps <= 0 or step >= total_steps:
        raise ValueError("step must lie inside [0, total_steps)")
    peak = cfg.learning_rate
    initial = peak / cfg.div_factor
    final = peak / cfg.final_div_factor
    t_peak = int(round(cfg.peak_fraction * (total_steps - 1)))
    t_peak = min(max(t_peak, 0), total_steps - 1)
    if step <= t_peak:
        frac = 1.0 if t_peak == 0 else step / t_peak
        return initial + (peak - initial) * 0.5 * (1 - np.cos(np.pi * frac))
    frac = (step - t_peak) / max(total_steps - 1 - t_peak, 1)
    return final + (peak - final) * 0.5 * (1 + np.cos(np.pi * frac))


# -- batching ---------------------------------------------------------------------

def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def make_pairs(n_traj: int, t_all: int, history: int):
    """(trajectory, target_index) rolling windows; one pair per window."""
    if t_all < history + 1:
        raise ValueError(f"need t_all >= history+1, got {t_all} vs {history}+1")
    return [(j, i) for j in range(n_traj) for i in range(history, t_all)]


def assemble_batch(trajs, pairs, history):
    frames = np.stack([trajs[j].frames[i - history:i] for j, i in pairs])
    targets = np.stack([trajs[j].frames[i] for j, i in pairs])
    return frames.astype(np.float32), targets.astype(np.float32)


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    best_val: float
    final_val: float
    epochs_run: int


def _relative_l2(pred: np.ndarray, truth: np.ndarray) -> float:
    denom = float(np.linalg.norm(truth.reshape(-1)))
    if denom == 0.0:
        raise ValueError("zero-norm truth in relative L2")
    return float(np.linalg.norm((pred - truth).reshape(-1)) / denom)


def _validate(params, trajs, masks, coords, history) -> float:
    errs = []
    with T.no_grad():
        for traj, mask in zip(trajs, masks):
            frames = traj.frames[None, :history].astype(np.float32)
            truth = traj.frames[history].astype(np.float32)
            pred = md.lano_forward(coords, frames, mask.grid[None].astype(np.float32),
                                   params)
            errs.append(_relative_l2(pred.data[0], truth))
    return float(np.mean(errs))


def train_on_splits(splits: dict, grid_hw: tuple, mask_spec: MaskSpec,
                    model_cfg: md.ModelConfig, train_cfg: TrainConfig,
                    out_dir) -> TrainResult:
    """Core MPT loop over in-memory trajectory splits.

    Every trajectory carries its own observation mask (seeded from the run
    seed and trajectory index).  Per step the input is further occluded by
    a fresh artificial mask; supervision stays on the trajectory mask.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gh, gw = grid_hw
    train = splits["train"]
    val = splits.get("val") or splits.get("test") or []
    if not train:
        raise ValueError("empty training split")

    history = model_cfg.history
    t_all = train[0].t_all
    pairs = make_pairs(len(train), t_all, history)
    coords = _grid_coords(gh, gw)

    train_masks = [mask_spec.generate(gh, gw, _derived_seed(train_cfg.seed, 1, j))
                   for j in range(len(train))]
    val_masks = [mask_spec.generate(gh, gw, _derived_seed(train_cfg.seed, 2, j))
                 for j in range(len(val))]

    params = md.ModelParams(model_cfg, seed=_derived_seed(train_cfg.seed, 0))
    state = TrainState(params)
    rng = np.random.default_rng(_derived_seed(train_cfg.seed, 3))

    steps_per_epoch = max(1, int(np.ceil(len(pairs) / train_cfg.batch_size)))
    total_steps = steps_per_epoch * train_cfg.epochs

    ckpt_path = out / "model.pobw"
    metrics_path = out / "metrics.csv"
    best_val = np.inf
    final_val = np.inf
    t0 = time.perf_counter()
    rows = []
    step = 0
    try:
        for epoch in range(train_cfg.epochs):
            order = rng.permutation(len(pairs))
            epoch_losses = []
            for start in range(0, len(pairs), train_cfg.batch_size):
                batch_idx = order[start:start + train_cfg.batch_size]
                batch_pairs = [pairs[i] for i in batch_idx]
                frames, targets = assemble_batch(train, batch_pairs, history)
                masks = np.stack([train_masks[j].grid for j, _ in batch_pairs]
                                 ).astype(np.float32)

                lr = one_cycle_lr(step, total_steps, train_cfg)
                loss_val = _train_step(params, state, coords, frames, targets,
                                       masks,
                                       [train_masks[j] for j, _ in batch_pairs],
                                       mask_spec, train_cfg, rng, lr)
                if not np.isfinite(loss_val):
                    raise TrainingDiverged(f"loss became {loss_val} at step {step}")
                epoch_losses.append(loss_val)
                step += 1

            val_err = _validate(params, val, val_masks, coords, history) \
                if val else float("nan")
            final_val = val_err
            if not val or val_err <= best_val:
                best_val = val_err if val else float("nan")
                md.save_checkpoint(params, ckpt_path)
            rows.append({
                "epoch": epoch, "step": step,
                "lr": repr(float(lr)),
                "train_loss": repr(float(np.mean(epoch_losses))),
                "val_rel_l2": repr(float(val_err)),
                "wall_seconds": repr(time.perf_counter() - t0),
            })
    finally:
        # the last good checkpoint survives a divergence abort
        with open(metrics_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=[
                "epoch", "step", "lr", "train_loss", "val_rel_l2", "wall_seconds"])
            writer.writeheader()
            writer.writerows(rows)

    if not ckpt_path.exists():
        md.save_checkpoint(params, ckpt_path)
    return TrainResult(ckpt_path, metrics_path, float(best_val),
                       float(final_val), train_cfg.epochs)


def _train_step(params, state, coords, frames, targets, masks, mask_objs,
                mask_spec: MaskSpec, cfg: TrainConfig, rng, lr) -> float:
    b = frames.shape[0]
    if cfg.mpt_enabled:
        aug = np.empty_like(masks)
        for i in range(b):
            r_max = cfg.mpt_rate if cfg.mpt_rate is not None \
                else mask_spec.missing_rate
            rate = float(rng.uniform(0.0, r_max)) if cfg.mpt_rate is None \
                else float(cfg.mpt_rate)
            m_aug, _ = mk.mpt_augment(mask_objs[i], rate,
                                      seed=int(rng.integers(2 ** 32)))
            aug[i] = m_aug.grid
    else:
        aug = masks

    pred = md.lano_forward(coords, frames, aug, params)
    loss = masked_one_step_loss(pred, targets, masks)

    lam = cfg.consistency_weight
    if cfg.mpt_enabled and lam > 0:
        with T.no_grad():
            clean = md.lano_forward(coords, frames, masks, params)
        loss = loss + consistency_loss(clean, pred) * lam

    loss_val = float(loss.data)
    grads_by_tensor = T.backward(loss)
    grads = {name: grads_by_tensor[t] for name, t in params.items()
             if t in grads_by_tensor}
    adamw_step(state, grads, lr, cfg)
    return loss_val


def _grid_coords(gh: int, gw: int) -> np.ndarray:
    ys = np.arange(gh, dtype=np.float64) / gh
    xs = np.arange(gw, dtype=np.float64) / gw
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx, yy], axis=-1).reshape(-1, 2)


def train(dataset, mask_spec: MaskSpec, model_cfg: md.ModelConfig,
          train_cfg: TrainConfig, out_dir) -> TrainResult:
    """Train from a dataset directory/manifest written by the generator."""
    from . import pdegen
    manifest, splits = pdegen.read_dataset(dataset)
    if model_cfg.phys_channels != manifest.channels:
        raise ValueError(
            f"config phys_channels {model_cfg.phys_channels} != dataset "
            f"channels {manifest.channels}")
    return train_on_splits(splits, (manifest.h, manifest.w), mask_spec,
                           model_cfg, train_cfg, out_dir)
