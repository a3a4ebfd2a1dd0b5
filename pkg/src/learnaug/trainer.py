"""Joint training loop over model weights and augmentation parameters.

Every step draws M transforms per datapoint, runs the model on the n*M
augmented inputs, updates the weights with the mean cross-entropy
gradient, and (during the joint phase) updates the fire probabilities
and ranges with the shared-sample estimates plus the analytic
regularizer gradient, then clamps them. The clamp constant shrinks
linearly to zero over the joint epochs, as does the augmentation
learning rate. A model-only phase afterwards keeps sampling from the
frozen distribution while training just the weights.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import blocks as B
from . import net, pacreg, warp
from .gradest import SampleLossRecords, alpha_grads_shared, pi_grads_shared

#: pi is kept this far inside (0, 1) even when the schedule reaches c = 0,
#: so the regularizer gradient stays finite at the next step.
PI_EPS = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    arch: str = "cnn5"  # cnn5 | mlp | feature-mlp
    mc_samples: int = 4
    batch_size: int = 128
    epochs_joint: int = 200
    epochs_model_only: int = 100
    optimizer: str = "adam"
    lr_model: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_aug: float = 0.001
    c0: float | None = None  # None -> 0.4 / K
    lambda_reg: float = 0.006
    lambda_reg_schedule: str = "constant"
    beta: float = 0.01
    seed: int = 0
    dtype: str = "float64"
    eval_fraction: float = 0.0
    checkpoint_every: int = 0  # epochs between checkpoints; 0 disables
    hidden: int = 256
    cnn_widths: tuple = (16, 32, 32, 64, 64)
    bound_s: float = 1.0
    bound_lipschitz: float = 1.0
    bound_delta: float = 0.05

    def validate(self) -> None:
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.c0 is not None and not 0.0 <= self.c0 < 0.5:
            raise ValueError("c0 must lie in [0, 0.5)")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if self.arch not in ("cnn5", "mlp", "feature-mlp"):
            raise ValueError(f"unknown arch {self.arch!r}")
        pacreg.RegConfig(self.beta, self.lambda_reg, self.lambda_reg_schedule).validate()


def clamp_schedule(cfg: TrainConfig, epoch: int, k_blocks: int) -> float:
    """Clamp constant at a given epoch: c0 shrinking linearly to 0 over the
    joint phase (c0 defaults to 0.4/K)."""
    c0 = 0.4 / k_blocks if cfg.c0 is None else cfg.c0
    if cfg.epochs_joint == 0:
        return 0.0
    return c0 * max(0.0, 1.0 - epoch / cfg.epochs_joint)


def aug_lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """Augmentation learning rate, decayed linearly to zero over the joint phase."""
    if cfg.epochs_joint == 0:
        return 0.0
    return cfg.lr_aug * max(0.0, 1.0 - epoch / cfg.epochs_joint)


@dataclass
class StepInfo:
    loss: float
    data_loss: float
    reg: float
    n_augmented: int


@dataclass
class TrainResult:
    params: net.ModelParams
    opt: net.OptimState
    dist: B.AugDistribution
    metrics: list = field(default_factory=list)


def _dtype(cfg: TrainConfig):
    return np.float64 if cfg.dtype == "float64" else np.float32


def _alpha_chain_records(dist, transforms, cropped, grad_input, n, m):
    """d(loss)/d(alpha_s) per augmented sample, via the warp adjoint
    (image mode) or the direct matrix action (feature mode)."""
    k = dist.k_parametric
    out = np.zeros((n * m, k))
    if k == 0:
        return out.reshape(n, m, k)
    image_mode = cropped.ndim == 4
    for s in range(k):
        idx = [t for t, st in enumerate(transforms) if st.applied[s]]
        if not idx:
            continue
        dmats = np.stack(
            [B.composed_matrix_derivative(dist, transforms[t], s) for t in idx]
        )
        eps = np.array([transforms[t].draws[s] for t in idx])
        if image_mode:
            mats = np.stack([transforms[t].matrix for t in idx])
            _, grad_a = warp.warp_backward(cropped[idx], mats, dmats, grad_input[idx])
        else:
            # loss grad w.r.t. features, chained through d(A x)/da
            dx = np.einsum("tij,tj->ti", dmats[:, :2, :2], cropped[idx])
            grad_a = np.einsum("ti,ti->t", grad_input[idx], dx)
        out[idx, s] = eps * grad_a  # d a/d alpha = eps
    return out.reshape(n, m, k)


def train_step(
    params: net.ModelParams,
    opt: net.OptimState,
    dist: B.AugDistribution,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    c: float,
    lr_aug_t: float,
    lambda_reg_t: float,
    update_dist: bool = True,
):
    """One optimization step; returns (new distribution, StepInfo)."""
    n, m = x.shape[0], cfg.mc_samples
    reg_cfg = pacreg.RegConfig(cfg.beta, cfg.lambda_reg, cfg.lambda_reg_schedule)

    transforms = [B.sample_transform(dist, rng) for _ in range(n * m)]
    x_rep = np.repeat(x, m, axis=0)
    y_rep = np.repeat(y, m)
    if x.ndim == 4:
        cropped = x_rep  # np.repeat returned a fresh array; safe to edit in place
        for t, st in enumerate(transforms):
            if st.crop_offset is not None:
                cropped[t] = warp.apply_crop(
                    cropped[t : t + 1], B.CROP_PAD, st.crop_offset
                )[0]
        aug_x = warp.warp_bilinear(cropped, np.stack([st.matrix for st in transforms]))
    else:
        cropped = x_rep
        aug_x = B.apply_transforms(x_rep, transforms)

    res = net.loss_and_grad(params, aug_x, y_rep, dtype=_dtype(cfg))
    if not np.isfinite(res.loss):
        raise FloatingPointError("non-finite training loss; aborting run")
    net.optimizer_step(opt, params, res.grad_w)

    reg = pacreg.reg_value(dist, reg_cfg)
    info = StepInfo(
        loss=res.loss + lambda_reg_t * reg,
        data_loss=res.loss,
        reg=reg,
        n_augmented=n * m,
    )
    if not update_dist or lr_aug_t == 0.0:
        return dist, info

    records = SampleLossRecords(
        losses=res.sample_losses.reshape(n, m),
        applied=np.stack([st.applied for st in transforms]).reshape(n, m, dist.k),
        alpha_grads=_alpha_chain_records(
            dist, transforms, cropped, res.grad_input, n, m
        ),
    )
    g_pi = pi_grads_shared(records)
    g_alpha = alpha_grads_shared(records)
    r_pi, r_alpha = pacreg.reg_grad(dist, reg_cfg)
    new_pis = dist.pis() - lr_aug_t * (g_pi + lambda_reg_t * r_pi)
    new_alphas = dist.alphas() - lr_aug_t * (g_alpha + lambda_reg_t * r_alpha)
    new_dist = B.clamp_distribution(
        dist.with_params(new_pis, new_alphas), max(c, PI_EPS)
    )
    return new_dist, info


def _build_model(cfg: TrainConfig, dataset, rng) -> net.ModelParams:
    shape = dataset.x.shape[1:]
    if cfg.arch == "cnn5":
        spec = net.cnn5_spec(shape, dataset.num_classes, cfg.cnn_widths)
    elif cfg.arch == "mlp":
        spec = net.mlp_spec(shape, cfg.hidden, dataset.num_classes)
    else:
        spec = net.feature_mlp_spec(shape[0], cfg.hidden, dataset.num_classes)
    return net.build_model(spec, shape, rng)


def metric_columns(dist: B.AugDistribution) -> list:
    cols = ["epoch", "phase", "train_loss", "reg", "pac_bound", "acc_val"]
    cols += [f"pi_{f}" for f in dist.families]
    cols += [f"alpha_{b.family}" for b in dist.blocks if b.kind == B.CONTINUOUS]
    return cols


def write_metrics_csv(path, metrics: list, dist: B.AugDistribution) -> None:
    """Metrics rows to CSV; floats via repr so reruns compare bit-exactly."""
    cols = metric_columns(dist)
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(cols)
        for row in metrics:
            wr.writerow([_csv_cell(row.get(c, "")) for c in cols])


def _csv_cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def train_run(
    dataset,
    cfg: TrainConfig,
    dist: B.AugDistribution | None = None,
    out_dir=None,
    resume_from=None,
) -> TrainResult:
    """Run the joint phase then the model-only phase over a dataset.

    With checkpointing enabled (cfg.checkpoint_every and out_dir), a run
    can resume from a saved epoch and reproduce the uninterrupted
    trajectory, since every (epoch, batch) derives its own seed.
    """
    cfg.validate()
    if dist is None:
        dist = B.default_distribution()
    dist.validate()
    x, y = dataset.x, dataset.labels
    if x.ndim == 2 and any(b.family == B.CROP for b in dist.blocks):
        raise ValueError("crop block cannot be used with feature-vector data")

    split_rng = np.random.default_rng([cfg.seed, 0xD5])
    order = split_rng.permutation(len(y))
    n_eval = int(round(cfg.eval_fraction * len(y)))
    eval_idx, train_idx = order[:n_eval], order[n_eval:]
    x_tr, y_tr = x[train_idx], y[train_idx]
    x_ev, y_ev = x[eval_idx], y[eval_idx]

    n = len(y_tr)
    batches = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    total_epochs = cfg.epochs_joint + cfg.epochs_model_only
    params = _build_model(cfg, dataset, np.random.default_rng([cfg.seed, 0x11]))
    opt = net.make_optimizer(
        cfg.optimizer,
        cfg.lr_model,
        horizon=max(1, total_epochs * batches),
        p=params.p,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )
    reg_cfg = pacreg.RegConfig(cfg.beta, cfg.lambda_reg, cfg.lambda_reg_schedule)
    metrics: list = []
    start_epoch = 0
    if resume_from is not None:
        params, opt, extra = net.load_checkpoint(resume_from)
        dist = B.AugDistribution.from_dict(extra["dist"])
        start_epoch = extra["epoch"] + 1
        metrics = extra.get("metrics", [])

    bound_cfg = pacreg.BoundConfig(
        n=max(n, 1),
        p=params.p,
        s=cfg.bound_s,
        lipschitz=cfg.bound_lipschitz,
        delta=cfg.bound_delta,
    )

    for epoch in range(start_epoch, total_epochs):
        joint = epoch < cfg.epochs_joint
        c = clamp_schedule(cfg, epoch, dist.k)
        lr_aug_t = aug_lr_schedule(cfg, epoch) if joint else 0.0
        lam_t = pacreg.lambda_reg_at(reg_cfg, min(epoch, cfg.epochs_joint), cfg.epochs_joint)
        perm = np.random.default_rng([cfg.seed, epoch, 0x5F]).permutation(n)
        losses = []
        for b in range(batches):
            sel = perm[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if sel.size == 0:
                continue
            step_rng = np.random.default_rng([cfg.seed, epoch, b])
            dist, info = train_step(
                params, opt, dist, x_tr[sel], y_tr[sel], cfg, step_rng,
                c, lr_aug_t, lam_t, update_dist=joint,
            )
            losses.append(info.loss)

        row = {
            "epoch": epoch,
            "phase": "joint" if joint else "model-only",
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "reg": pacreg.reg_value(dist, reg_cfg),
            "pac_bound": pacreg.pac_bound(
                float(np.mean(losses)) if losses else 0.0, params, dist, reg_cfg, bound_cfg
            ),
            "acc_val": _plain_accuracy(params, x_ev, y_ev, cfg) if n_eval else "",
        }
        for blk in dist.blocks:
            row[f"pi_{blk.family}"] = blk.pi
            if blk.kind == B.CONTINUOUS:
                row[f"alpha_{blk.family}"] = blk.alpha
        metrics.append(row)

        if out_dir is not None and cfg.checkpoint_every and (
            (epoch + 1) % cfg.checkpoint_every == 0 or epoch == total_epochs - 1
        ):
            _checkpoint(out_dir, epoch, params, opt, dist, metrics)

    return TrainResult(params=params, opt=opt, dist=dist, metrics=metrics)


def _plain_accuracy(params, x, y, cfg) -> float:
    if len(y) == 0:
        return float("nan")
    probs = net.forward(params, x, dtype=_dtype(cfg))
    return float(np.mean(probs.argmax(axis=1) == y))


def _checkpoint(out_dir, epoch, params, opt, dist, metrics):
    from pathlib import Path

    ck = Path(out_dir) / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    net.save_checkpoint(
        ck / f"epoch_{epoch:04d}.npz",
        params,
        opt,
        extra={"epoch": epoch, "dist": dist.to_dict(), "metrics": metrics},
    )
