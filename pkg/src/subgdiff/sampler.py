"""Reverse-time samplers: subgraph diffusion, plain DDPM and Langevin dynamics.

All samplers run a whole batch of molecules in lockstep.  Noise is drawn
from one generator per step as a node-major ``(N, 3)`` block; no noise is
drawn at t = 1.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy.special import expit

from .denoiser import DenoiserParams, GraphBatch, forward_batch
from .graph import MolGraph, torsional_decompose
from .process import ProcessConfig, expectation_reverse_step, subgdiff_reverse_step
from .schedule import NoiseSchedule


class SamplingError(FloatingPointError):
    def __init__(self, t: int, node: int, value):
        super().__init__(f"non-finite state at t={t}, node {node}: {value}")
        self.t, self.node, self.value = t, node, value


def _check_finite(r, t):
    bad = ~np.isfinite(r).all(axis=1)
    if bad.any():
        node = int(np.flatnonzero(bad)[0])
        raise SamplingError(t, node, r[node].tolist())


def _as_batch(graphs):
    if isinstance(graphs, GraphBatch):
        return graphs
    if isinstance(graphs, MolGraph):
        return GraphBatch([graphs])
    return GraphBatch(list(graphs))


def _model_fn(params, batch):
    def fn(r, t):
        return forward_batch(params, batch, r, np.full(batch.num_nodes, t))
    return fn


def _spaces(batch):
    cache = {}
    return [cache.setdefault(id(g), torsional_decompose(g)) for g in batch.graphs]


def _draw_candidates(spaces, batch, logits, rng) -> np.ndarray:
    """Per molecule, draw one candidate mask with weight given by its logit likelihood."""
    s_hat = np.empty(batch.num_nodes, dtype=np.int8)
    log_on, log_off = -np.logaddexp(0, -logits), -np.logaddexp(0, logits)
    for space, a, b in zip(spaces, batch.offsets[:-1], batch.offsets[1:]):
        if space.bernoulli:
            s_hat[a:b] = rng.random(b - a) < expit(logits[a:b])
            continue
        cand = space.candidates
        score = cand @ log_on[a:b] + (1 - cand) @ log_off[a:b]
        w = np.exp(score - score.max())
        s_hat[a:b] = cand[rng.choice(len(cand), p=w / w.sum())]
    return s_hat


def refresh_steps(T: int, k: int) -> list[int]:
    """Steps at which the predicted block mask is recomputed."""
    return [t for t in range(T, 0, -1) if t == T or t % k == 0]


def sample_subgdiff(params: DenoiserParams, graphs, cfg: ProcessConfig, rng: np.random.Generator,
                    mask_mode: str = "subgraph", threshold: float = 0.5,
                    mask_override: Callable[[int], np.ndarray | None] | None = None,
                    trace: Callable | None = None, model=None, step_kind: str = "twophase"):
    """Ancestral sampling with predicted block masks.

    ``mask_mode`` is ``"predict"`` (threshold sigmoid(logits)),
    ``"bernoulli"`` (draw each bit from sigmoid(logits)), ``"subgraph"``
    (draw one candidate of the subgraph space, weighted by the logits) or
    ``"ones"``.
    ``mask_override(t)`` may return a mask that replaces the refreshed one.
    ``model(r, t) -> (eps_hat, logits)`` substitutes the network.
    ``step_kind="expectation"`` uses the explicit single-step sampler (k = 1).

    Mask bits come from a generator spawned off ``rng`` so the coordinate
    noise stream is the same for every mask mode.
    """
    batch = _as_batch(graphs)
    model = model or _model_fn(params, batch)
    N = batch.num_nodes
    if step_kind == "expectation" and cfg.k != 1:
        raise ValueError("the explicit expectation sampler requires k = 1")
    mask_rng = rng.spawn(1)[0]
    spaces = _spaces(batch) if mask_mode == "subgraph" else None
    r = rng.standard_normal((N, 3))
    s_hat = None
    for t in range(cfg.T, 0, -1):
        eps_hat, logits = model(r, t)
        if t == cfg.T or t % cfg.k == 0:
            if mask_mode == "predict":
                s_hat = (expit(logits) > threshold).astype(np.int8)
            elif mask_mode == "bernoulli":
                s_hat = (mask_rng.random(N) < expit(logits)).astype(np.int8)
            elif mask_mode == "subgraph":
                s_hat = _draw_candidates(spaces, batch, logits, mask_rng)
            elif mask_mode == "ones":
                s_hat = np.ones(N, dtype=np.int8)
            else:
                raise ValueError(f"unknown mask_mode {mask_mode!r}")
            if mask_override is not None:
                forced = mask_override(t)
                if forced is not None:
                    s_hat = np.asarray(forced, dtype=np.int8)
        z = rng.standard_normal((N, 3)) if t > 1 else np.zeros((N, 3))
        if step_kind == "expectation":
            r = expectation_reverse_step(cfg.p, cfg.schedule, r, s_hat, eps_hat, t, z)
        else:
            r = subgdiff_reverse_step(cfg, r, s_hat, eps_hat, t, z)
        _check_finite(r, t)
        if trace is not None:
            trace(t, r, s_hat)
    return r


def ddpm_step(sched: NoiseSchedule, r_t, eps_hat, t: int, z):
    beta = sched.beta(t)
    c, c_prev = sched.one_minus_beta_bar(t), sched.one_minus_beta_bar(t - 1)
    std = math.sqrt(c_prev / c * beta)
    return (r_t - beta / math.sqrt(c) * eps_hat) / math.sqrt(1.0 - beta) + std * z


def sample_ddpm(params: DenoiserParams, graphs, sched: NoiseSchedule, rng: np.random.Generator,
                trace: Callable | None = None, model=None):
    batch = _as_batch(graphs)
    model = model or _model_fn(params, batch)
    N = batch.num_nodes
    r = rng.standard_normal((N, 3))
    for t in range(sched.T, 0, -1):
        eps_hat, _ = model(r, t)
        z = rng.standard_normal((N, 3)) if t > 1 else np.zeros((N, 3))
        r = ddpm_step(sched, r, eps_hat, t, z)
        _check_finite(r, t)
        if trace is not None:
            trace(t, r, None)
    return r


def langevin_step(r, score, alpha: float, z):
    return r + alpha * score + math.sqrt(2.0 * alpha) * z


def sample_langevin(params: DenoiserParams, graphs, sched: NoiseSchedule, step_scale_h: float,
                    rng: np.random.Generator, trace: Callable | None = None, model=None):
    """Annealed Langevin dynamics with step alpha_t = h * sigma_t^2.

    The network predicts noise, so the score at level t is -eps_hat / sigma_t
    with sigma_t^2 = 1 - alpha_bar_t.
    """
    if step_scale_h < 0:
        raise ValueError("step_scale_h must be non-negative")
    batch = _as_batch(graphs)
    model = model or _model_fn(params, batch)
    N = batch.num_nodes
    r = rng.standard_normal((N, 3))
    for t in range(sched.T, 0, -1):
        eps_hat, _ = model(r, t)
        var = sched.one_minus_beta_bar(t)
        score = -eps_hat / math.sqrt(var)
        z = rng.standard_normal((N, 3)) if t > 1 else np.zeros((N, 3))
        r = langevin_step(r, score, step_scale_h * var, z)
        _check_finite(r, t)
        if trace is not None:
            trace(t, r, None)
    return r
