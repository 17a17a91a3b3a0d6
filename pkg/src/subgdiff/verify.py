"""Oracle suites behind ``subgdiff verify``.

Each suite compares the implementation against an independent route
(grid integration, direct summation, stepwise simulation, finite
differences, brute-force search) and reports the measured error.
Faults can be injected to confirm that a broken kernel is caught.
"""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass, field, replace
from unittest import mock

import numpy as np
from scipy.integrate import trapezoid

from . import denoiser, evaluation, posterior, process, sampler, trainer
from .denoiser import DenoiserConfig, DenoiserParams, GraphBatch, forward_batch, init_params
from .evaluation import coverage_matching, kabsch_rmsd
from .graph import MolGraph, center_coords
from .posterior import MomentSpec, posterior_from_moments
from .process import ProcessConfig, naive_loss_weight
from .schedule import ScheduleConfig, build_schedule
from .toyset import generate_molecule

FAULTS = ("lemma", "delta", "gradient", "equivariance", "kabsch")


@dataclass
class Check:
    name: str
    measured: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.measured) and self.measured <= self.tolerance)

    def to_dict(self):
        return {"name": self.name, "measured": float(self.measured),
                "tolerance": self.tolerance, "passed": self.passed}


@dataclass
class SuiteResult:
    name: str
    checks: list[Check] = field(default_factory=list)
    seconds: float = 0.0
    time_limit: float | None = None

    @property
    def passed(self) -> bool:
        in_time = self.time_limit is None or self.seconds <= self.time_limit
        return in_time and all(c.passed for c in self.checks)

    def to_dict(self):
        return {"name": self.name, "passed": self.passed, "seconds": self.seconds,
                "time_limit": self.time_limit, "checks": [c.to_dict() for c in self.checks]}


# ---------------------------------------------------------------- oracles

def grid_posterior(m: MomentSpec, r_t: float, r0: float, lo=-10.0, hi=10.0, n=20001):
    """Mean and variance of p(x | r_t, r0) by trapezoidal integration on a grid."""
    x = np.linspace(lo, hi, n)
    logw = -0.5 * (r_t - m.mu1 * x) ** 2 / m.sigma1_sq - 0.5 * (x - m.mu2 * r0) ** 2 / m.sigma2_sq
    w = np.exp(logw - logw.max())
    z = trapezoid(w, x)
    mean = trapezoid(w * x, x) / z
    return mean, trapezoid(w * (x - mean) ** 2, x) / z


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def euler_zyz(a, b, c):
    """Stack of rotation matrices for broadcast Euler angles (radians)."""
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    R = np.empty(np.broadcast(a, b, c).shape + (3, 3))
    R[..., 0, 0] = ca * cb * cc - sa * sc
    R[..., 0, 1] = -ca * cb * sc - sa * cc
    R[..., 0, 2] = ca * sb
    R[..., 1, 0] = sa * cb * cc + ca * sc
    R[..., 1, 1] = -sa * cb * sc + ca * cc
    R[..., 1, 2] = sa * sb
    R[..., 2, 0] = -sb * cc
    R[..., 2, 1] = sb * sc
    R[..., 2, 2] = cb
    return R


def brute_force_rmsd(a, b, coarse_deg=6.0, fine_deg=1.0, keep=8) -> float:
    """Minimum RMSD over a coarse Euler grid, refined on a 1-degree grid."""
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)

    def rmsd(R):
        d = np.einsum("nc,...cd->...nd", a, R) - b
        return np.sqrt(np.einsum("...nd,...nd->...", d, d) / len(a))

    step = math.radians(coarse_deg)
    A, B, C = np.meshgrid(np.arange(0, 2 * math.pi, step), np.arange(0, math.pi + 1e-9, step),
                          np.arange(0, 2 * math.pi, step), indexing="ij")
    vals = rmsd(euler_zyz(A, B, C))
    best = math.inf
    fine = math.radians(fine_deg)
    off = np.arange(-coarse_deg, coarse_deg + 1e-9, fine_deg) * (fine / fine_deg)
    for idx in np.argsort(vals, axis=None)[:keep]:
        i, j, k = np.unravel_index(idx, vals.shape)
        a0, b0, c0 = A[i, j, k], B[i, j, k], C[i, j, k]
        oa, ob, oc = np.meshgrid(off, off, off, indexing="ij")
        best = min(best, float(rmsd(euler_zyz(a0 + oa, b0 + ob, c0 + oc)).min()))
    return best


def simulate_twophase(sched, p, k, t_max, n_traj, rng, n_masks=512):
    """Stepwise simulation of the two-phase chain from r0 = 1.

    Returns per-step (mean, var) arrays for both block bits.  The
    expectation prefix is realized by averaging the block outcome over
    ``n_masks`` resampled block masks that share one noise path.
    """
    x = np.ones(n_traj)  # expectation state at the last boundary
    mean_on, var_on, mean_off, var_off = (np.zeros(t_max + 1) for _ in range(4))
    t = 0
    while t < t_max:
        y = x.copy()
        for step in range(t + 1, min(t + k, t_max) + 1):
            beta = sched.beta(step)
            y = math.sqrt(1.0 - beta) * y + math.sqrt(beta) * rng.standard_normal(n_traj)
            mean_on[step], var_on[step] = y.mean(), y.var()
            mean_off[step], var_off[step] = x.mean(), x.var()
        frac = rng.binomial(n_masks, p, size=n_traj) / n_masks
        x = frac * y + (1.0 - frac) * x
        t += k
    return mean_on[1:], var_on[1:], mean_off[1:], var_off[1:]


def toy_molecule(template="branched6", seed=0) -> MolGraph:
    return generate_molecule(template, np.random.default_rng(seed))


def permute_graph(g: MolGraph, perm) -> MolGraph:
    inv = np.argsort(perm)
    return MolGraph(g.atom_type[perm], [(inv[i], inv[j], b) for i, j, b in g.bonds],
                    g.coords[perm])


# ----------------------------------------------------------------- suites

def suite_lemma(seed=0, n_specs=50) -> SuiteResult:
    rng = np.random.default_rng(seed)
    mean_err = var_err = 0.0
    for _ in range(n_specs):
        m = MomentSpec(mu1=rng.uniform(0.3, 1.0), sigma1_sq=rng.uniform(0.01, 1.0),
                       mu2=rng.uniform(0.1, 1.0), sigma2_sq=rng.uniform(0.01, 1.0))
        r0 = rng.normal(0.0, 1.0)
        r_t = m.mu1 * m.mu2 * r0 + math.sqrt(m.mu1**2 * m.sigma2_sq + m.sigma1_sq) * rng.normal()
        pp = posterior_from_moments(m)
        g_mean, g_var = grid_posterior(m, r_t, r0)
        mean_err = max(mean_err, abs(float(pp.mean_from_r0(r_t, r0)) - g_mean))
        var_err = max(var_err, abs(pp.variance - g_var))
    return SuiteResult("lemma", [Check("posterior mean vs grid", mean_err, 1e-6),
                                 Check("posterior variance vs grid", var_err, 1e-6)], time_limit=10.0)


def suite_reduction(seed=0) -> SuiteResult:
    sched = build_schedule(ScheduleConfig(5000, 1e-7, 2e-3))
    cfg = ProcessConfig(1.0, 1, sched)
    ab = sched.beta_bar_array()
    comp = -np.expm1(sched.log_survival)  # 1 - alpha_bar without cancellation
    betas = sched.betas
    t = np.arange(1, sched.T + 1)
    checks = []
    mean, var = cfg.marginal(t, np.ones_like(t))
    checks.append(Check("forward mean coefficient", np.abs(mean - np.sqrt(ab[1:])).max(), 1e-10))
    checks.append(Check("forward variance", np.abs(var - comp[1:]).max(), 1e-10))
    _, delta = cfg.prev_marginal(t, np.ones_like(t))
    checks.append(Check("delta = 1 - beta_bar(t-1)", np.abs(delta - comp[:-1]).max(), 1e-10))
    inv = eps = std = lw = nlw = 0.0
    for step in range(1, sched.T + 1):
        b = betas[step - 1]
        pp = cfg.posterior_on(step)
        inv = max(inv, abs(pp.inv_mu1 - 1.0 / math.sqrt(1.0 - b)))
        eps = max(eps, abs(pp.eps_coef - b / math.sqrt(comp[step])))
        std = max(std, abs(pp.noise_std - math.sqrt(comp[step - 1] / comp[step] * b)))
        if step > 1:
            lw = max(lw, abs(pp.loss_weight - b / (2.0 * (1.0 - b) * comp[step - 1])))
            # the history-tracking weight takes gamma_bar itself as input
            ref = b / (2.0 * (1.0 - b) * (1.0 - ab[step - 1]))
            nlw = max(nlw, abs(naive_loss_weight(1, sched, ab[step - 1], step) - ref))
    checks += [Check("reverse 1/mu1", inv, 1e-10), Check("reverse eps coefficient", eps, 1e-10),
               Check("reverse noise std", std, 1e-10), Check("loss weight", lw, 1e-10),
               Check("naive loss weight", nlw, 1e-10)]

    small = build_schedule(ScheduleConfig(200, 1e-7, 5e-2))
    g = toy_molecule()
    params = init_params(DenoiserConfig(hidden_dim=8, num_layers=2, time_embed_dim=8, T=200),
                         np.random.default_rng(seed))
    traj = {}
    for name in ("subgdiff", "ddpm"):
        rec = []
        rng = np.random.default_rng(seed + 1)
        if name == "subgdiff":
            sampler.sample_subgdiff(params, g, ProcessConfig(1.0, 1, small), rng, mask_mode="ones",
                                    trace=lambda t, r, s: rec.append(r.copy()))
        else:
            sampler.sample_ddpm(params, g, small, rng, trace=lambda t, r, s: rec.append(r.copy()))
        traj[name] = np.array(rec)
    checks.append(Check("sampling trajectory", np.abs(traj["subgdiff"] - traj["ddpm"]).max(), 1e-10))
    return SuiteResult("ddpm_reduction", checks, time_limit=5.0)


def suite_montecarlo(seed=0, n_traj=200_000) -> SuiteResult:
    sched = build_schedule(ScheduleConfig(50, 1e-7, 5e-2))
    p, k = 0.5, 5
    cfg = ProcessConfig(p, k, sched)
    emp = simulate_twophase(sched, p, k, sched.T, n_traj, np.random.default_rng(seed))
    t = np.arange(1, sched.T + 1)
    checks = []
    for bit, (em, ev) in ((1, emp[:2]), (0, emp[2:])):
        mean, var = cfg.marginal(t, np.full_like(t, bit))
        checks.append(Check(f"mean coefficient, bit {bit} (relative)", np.max(np.abs(em - mean) / mean), 0.01))
        live = var > 0
        verr = np.max(np.abs(ev[live] - var[live]) / var[live]) if live.any() else 0.0
        if not live.all():
            verr = max(verr, float(np.abs(ev[~live]).max()))
        checks.append(Check(f"variance, bit {bit} (relative)", verr, 0.02))
    return SuiteResult("forward_montecarlo", checks, time_limit=60.0)


def _loss_setup(seed):
    rng = np.random.default_rng(seed)
    graphs = [toy_molecule("branched6", seed), toy_molecule("chain5", seed + 1)]
    sched = build_schedule(ScheduleConfig(200, 1e-7, 5e-2))
    cfg = trainer.TrainConfig(process=ProcessConfig(0.5, 10, sched))
    params = init_params(DenoiserConfig(hidden_dim=16, num_layers=2, time_embed_dim=8, T=200), rng)
    batch = GraphBatch(graphs)
    r0 = np.concatenate([center_coords(g.conformers[0]) for g in graphs])
    s = np.concatenate([(rng.random(g.num_nodes) < 0.5) for g in graphs]).astype(float)
    s[0] = 1.0
    return params, batch, r0, np.array([150, 37]), s, rng.standard_normal(r0.shape), cfg


def suite_gradient(seed=0, n_params=240, h=1e-5) -> SuiteResult:
    params, batch, r0, t, s, eps, cfg = _loss_setup(seed)
    res = trainer.batch_loss(params, batch, r0, t, s, eps, cfg)
    analytic = np.concatenate([res.grads[n].ravel() for n in params.names])
    flat = params.flatten()
    rng = np.random.default_rng(seed + 7)
    idx = rng.choice(flat.size, size=n_params, replace=False)

    def loss_at(vec):
        p = DenoiserParams.unflatten(params.config, vec)
        return trainer.batch_loss(p, batch, r0, t, s, eps, cfg, with_grad=False).loss

    # gradients smaller than the rounding noise of a step-h difference
    floor = 1e4 * np.finfo(float).eps * max(abs(res.loss), 1.0) / h
    worst = 0.0
    for i in idx:
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        fd = (loss_at(up) - loss_at(dn)) / (2 * h)
        worst = max(worst, abs(fd - analytic[i]) / max(abs(fd), abs(analytic[i]), floor))
    return SuiteResult("gradient", [Check(f"relative error on {n_params} parameters", worst, 1e-4)],
                       time_limit=30.0)


def suite_equivariance(seed=0, n_trials=20) -> SuiteResult:
    rng = np.random.default_rng(seed)
    params = init_params(DenoiserConfig(hidden_dim=16, num_layers=3, time_embed_dim=8, T=200), rng)
    eq = inv = perm_err = 0.0
    for trial in range(n_trials):
        g = toy_molecule(("branched6", "ring_tail8", "chain6")[trial % 3], seed + trial)
        R = g.coords + rng.normal(0.0, 0.5, g.coords.shape)
        t = int(rng.integers(1, 201))
        e0, l0 = denoiser.gfn_forward(params, g, R, t)
        Q, b = random_rotation(rng), rng.normal(0.0, 5.0, 3)
        e1, l1 = denoiser.gfn_forward(params, g, R @ Q.T + b, t)
        eq = max(eq, np.abs(e1 - e0 @ Q.T).max())
        inv = max(inv, np.abs(l1 - l0).max())
        perm = rng.permutation(g.num_nodes)
        e2, l2 = denoiser.gfn_forward(params, permute_graph(g, perm), R[perm], t)
        perm_err = max(perm_err, np.abs(e2 - e0[perm]).max(), np.abs(l2 - l0[perm]).max())
    return SuiteResult("equivariance", [Check("eps_hat rotation/translation", eq, 1e-8),
                                        Check("mask logits invariance", inv, 1e-8),
                                        Check("permutation", perm_err, 1e-8)])


def suite_metrics(seed=0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    rigid = 0.0
    for _ in range(20):
        a = rng.normal(size=(int(rng.integers(3, 10)), 3))
        rigid = max(rigid, kabsch_rmsd(a, a @ random_rotation(rng).T + rng.normal(0, 3, 3)))
    confs = [rng.normal(size=(6, 3)) for _ in range(4)]
    m = coverage_matching(confs, confs, 0.5)
    exact = max(abs(m["cov_r"] - 100.0), abs(m["cov_p"] - 100.0), m["mat_r"], m["mat_p"])
    brute = abs(kabsch_rmsd([[0, 0, 0], [1, 0, 0]], [[0, 0, 0], [2, 0, 0]]) - 0.5)
    for _ in range(3):
        n = int(rng.integers(3, 5))
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        brute = max(brute, abs(brute_force_rmsd(a, b) - kabsch_rmsd(a, b)))
    return SuiteResult("kabsch_cov_mat", [Check("rigid-motion RMSD", rigid, 1e-8),
                                          Check("identical sets COV/MAT", exact, 0.0),
                                          Check("rotation-grid brute force", brute, 2e-3)])


SUITES = {
    "lemma": suite_lemma,
    "ddpm_reduction": suite_reduction,
    "forward_montecarlo": suite_montecarlo,
    "gradient": suite_gradient,
    "equivariance": suite_equivariance,
    "kabsch_cov_mat": suite_metrics,
}


# ------------------------------------------------------------ fault hooks

@contextlib.contextmanager
def inject_fault(name: str | None):
    if name is None:
        yield
        return
    if name not in FAULTS:
        raise ValueError(f"unknown fault {name!r}; choose from {FAULTS}")
    if name == "lemma":
        real = posterior.posterior_from_moments

        def broken(m):
            pp = real(m)
            return replace(pp, eps_coef=pp.eps_coef * (1 + 1e-3), noise_std=pp.noise_std * (1 + 1e-3))

        patches = [mock.patch.object(posterior, "posterior_from_moments", broken),
                   mock.patch.object(process, "posterior_from_moments", broken),
                   mock.patch(f"{__name__}.posterior_from_moments", broken)]
    elif name == "delta":
        real_prev = ProcessConfig.prev_marginal

        def broken_prev(self, t, s):
            mu2, var = real_prev(self, t, s)
            return mu2, var * (1 + 1e-3)

        patches = [mock.patch.object(ProcessConfig, "prev_marginal", broken_prev)]
    elif name == "gradient":
        real_bw = trainer.gfn_backward
        patches = [mock.patch.object(
            trainer, "gfn_backward",
            lambda *a, **kw: {k: v * (1 + 1e-3) for k, v in real_bw(*a, **kw).items()})]
    elif name == "equivariance":
        real_fw = denoiser.forward_batch

        def broken_fw(*a, **kw):
            out = real_fw(*a, **kw)
            return (out[0] + np.array([1e-3, 0.0, 0.0]),) + tuple(out[1:])

        patches = [mock.patch.object(denoiser, "forward_batch", broken_fw)]
    else:
        patches = [mock.patch.object(evaluation, "kabsch_rotation", lambda a, b: np.eye(3))]
    with contextlib.ExitStack() as stack:
        for p in patches:
            stack.enter_context(p)
        yield


def run_verify(suites=None, fault: str | None = None, seed: int = 0) -> dict:
    names = list(suites or SUITES)
    unknown = set(names) - set(SUITES)
    if unknown:
        raise ValueError(f"unknown suites: {sorted(unknown)}")
    results = []
    with inject_fault(fault):
        for name in names:
            start = time.perf_counter()
            res = SUITES[name](seed=seed)
            res.seconds = time.perf_counter() - start
            results.append(res)
    return {
        "format": "subgdiff-verify",
        "version": 1,
        "passed": all(r.passed for r in results),
        "fault": fault,
        "seed": seed,
        "suites": [r.to_dict() for r in results],
    }
