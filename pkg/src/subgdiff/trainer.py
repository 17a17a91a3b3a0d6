"""Training: combined masked denoising + subgraph-prediction objective."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .denoiser import DenoiserConfig, DenoiserParams, GraphBatch, forward_batch, gfn_backward, init_params
from .graph import MolGraph, center_coords, sample_mask, torsional_decompose
from .process import ProcessConfig

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    process: ProcessConfig
    lambda_bce: float = 1.0
    batch_size: int = 32
    iters: int = 1000
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    optimizer: str = "adam"
    denoise_norm: str = "mean"  # "mean" over selected coordinates, or "sum"
    center_noise: bool = False

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.iters < 0:
            raise ValueError("batch_size must be >= 1 and iters >= 0")
        if self.lambda_bce < 0:
            raise ValueError("lambda_bce must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.denoise_norm not in ("mean", "sum"):
            raise ValueError(f"unknown denoise_norm {self.denoise_norm!r}")


@dataclass
class LossResult:
    loss: float
    denoise: float
    bce: float
    empty_masks: int = 0
    grads: dict | None = None


def _noisy_coords(proc: ProcessConfig, r0, s, t_nodes, eps):
    mean, var = proc.marginal(t_nodes, s)
    return mean[:, None] * r0 + np.sqrt(var)[:, None] * eps


def batch_loss(params: DenoiserParams, batch: GraphBatch, r0, t, s, eps, cfg: TrainConfig,
               with_grad: bool = True) -> LossResult:
    """Loss averaged over the molecules of ``batch``.

    ``r0``, ``s`` and ``eps`` are stacked node-major over the batch; ``t``
    holds one time step per molecule.
    """
    r0 = np.asarray(r0, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if s.shape != (batch.num_nodes,) or eps.shape != r0.shape:
        raise ValueError("mask or noise shape does not match the batch")
    if cfg.center_noise:
        eps = eps - np.concatenate([np.broadcast_to(e.mean(0), e.shape) for e in batch.split(eps)])
    t_nodes = np.asarray(t)[batch.node_mol]
    r_t = _noisy_coords(cfg.process, r0, s, t_nodes, eps)
    out = forward_batch(params, batch, r_t, t_nodes, return_cache=with_grad)
    eps_hat, logits = out[0], out[1]

    B = batch.num_graphs
    mol = batch.node_mol
    n_sel = np.bincount(mol, weights=s, minlength=B)
    n_nodes = np.bincount(mol, minlength=B).astype(float)
    resid = eps - eps_hat
    sq = np.bincount(mol, weights=s * np.einsum("nc,nc->n", resid, resid), minlength=B)
    empty = n_sel == 0
    if cfg.denoise_norm == "mean":
        scale = np.where(empty, 0.0, 1.0 / (3.0 * np.where(empty, 1.0, n_sel)))
    else:
        scale = np.ones(B)
    denoise_mol = sq * scale
    bce_node = np.logaddexp(0.0, logits) - s * logits
    bce_mol = np.bincount(mol, weights=bce_node, minlength=B) / n_nodes
    denoise, bce = float(denoise_mol.mean()), float(bce_mol.mean())
    res = LossResult(denoise + cfg.lambda_bce * bce, denoise, bce, int(empty.sum()))
    if with_grad:
        d_eps = -2.0 * (s * scale[mol])[:, None] * resid / B
        d_logits = cfg.lambda_bce * (expit(logits) - s) / n_nodes[mol] / B
        res.grads = gfn_backward(params, out[2], d_eps, d_logits)
    return res


def subgdiff_loss(params, g: MolGraph, r0, t: int, s_block, eps, cfg: TrainConfig):
    """Single-molecule loss; returns ``(loss, {"denoise": ..., "bce": ...})``."""
    res = batch_loss(params, GraphBatch([g]), r0, [t], s_block, eps, cfg, with_grad=False)
    if res.empty_masks:
        log.warning("all-zero block mask: denoising term is zero")
    return res.loss, {"denoise": res.denoise, "bce": res.bce}


class Adam:
    def __init__(self, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params: DenoiserParams, grads: dict) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1**self.step_count
        c2 = 1.0 - self.b2**self.step_count
        for name, g in grads.items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params.arrays[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class SGD:
    def __init__(self, lr=1e-3):
        self.lr = lr

    def step(self, params: DenoiserParams, grads: dict) -> None:
        for name, g in grads.items():
            params.arrays[name] -= self.lr * g


@dataclass
class TrainResult:
    params: DenoiserParams
    metrics: list[dict] = field(default_factory=list)
    empty_masks: int = 0


def draw_training_batch(graphs, spaces, proc: ProcessConfig, batch_size, rng):
    """Sample molecules, a reference conformer each, t, block masks and noise."""
    idx = rng.choice(len(graphs), size=min(batch_size, len(graphs)), replace=False)
    chosen = [graphs[i] for i in idx]
    r0 = []
    for g in chosen:
        confs = g.conformers or [g.coords]
        r0.append(center_coords(confs[rng.integers(len(confs))]))
    t = rng.integers(1, proc.T + 1, size=len(chosen))
    s = np.concatenate([sample_mask(spaces[i], rng) for i in idx]).astype(np.float64)
    r0 = np.concatenate(r0)
    eps = rng.standard_normal(r0.shape)
    return GraphBatch(chosen), r0, t, s, eps


def train_loop(dataset: list[MolGraph], cfg: TrainConfig, rng=None, params=None,
               denoiser_cfg: DenoiserConfig | None = None, metrics_path=None,
               log_every: int = 1) -> TrainResult:
    """Run ``cfg.iters`` optimizer steps; deterministic given ``cfg.seed``."""
    if not dataset:
        raise ValueError("dataset is empty")
    cfg.validate()
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if params is None:
        params = init_params(denoiser_cfg or DenoiserConfig(T=cfg.process.T), rng)
    else:
        params = params.copy()
    spaces = [torsional_decompose(g) for g in dataset]
    opt = Adam(cfg.learning_rate, cfg.adam_betas) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)
    result = TrainResult(params)
    for it in range(cfg.iters):
        batch, r0, t, s, eps = draw_training_batch(dataset, spaces, cfg.process, cfg.batch_size, rng)
        res = batch_loss(params, batch, r0, t, s, eps, cfg)
        if not np.isfinite(res.loss):
            raise TrainingDivergedError(f"non-finite loss at iteration {it}")
        opt.step(params, res.grads)
        result.empty_masks += res.empty_masks
        if it % log_every == 0 or it == cfg.iters - 1:
            result.metrics.append(
                {"iter": it, "loss": res.loss, "denoise": res.denoise, "bce": res.bce}
            )
    if result.empty_masks:
        log.warning("%d all-zero block masks contributed no denoising signal", result.empty_masks)
    if metrics_path is not None:
        write_metrics(metrics_path, result.metrics)
    return result


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["iter", "loss", "denoise", "bce"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if k != "iter" else v) for k, v in r.items()})
