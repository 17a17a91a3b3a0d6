"""Graph field network with a hand-written reverse pass.

Per layer, for every directed edge (i <- j):

    m_ij   = Phi_m([h_i, h_j, |x_i - x_j|^2, rbf(d_ij), bond_ij])
    h_i'   = h_i + Phi_h([h_i, sum_j m_ij])
    x_i'   = sum_j (R_i - R_j) / d_ij * Phi_x(m_ij)

with x^0 = R.  The noise prediction is x^L and the mask logits come from an
MLP on h^L.  Every Phi is a two-layer perceptron with a shifted softplus.

Weights use the row-vector convention ``y = x @ W + b``.  Molecules are
batched as a disjoint union; edges never cross molecule boundaries.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .graph import MolGraph

LOG2 = math.log(2.0)
N_RBF = 16


class CacheMismatchError(ValueError):
    """Raised when a backward pass is fed a cache from different inputs."""


@dataclass(frozen=True)
class DenoiserConfig:
    hidden_dim: int = 64
    num_layers: int = 3
    radius_tau: float = 10.0
    time_embed_dim: int = 32
    num_atom_types: int = 10
    num_bond_types: int = 4
    T: int = 5000

    def validate(self) -> None:
        if self.hidden_dim < 1 or self.num_layers < 1:
            raise ValueError("hidden_dim and num_layers must be >= 1")
        if not self.radius_tau > 0:
            raise ValueError(f"radius_tau must be positive, got {self.radius_tau}")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be an even integer >= 2")

    @property
    def edge_in_dim(self) -> int:
        return 2 * self.hidden_dim + 1 + N_RBF + self.num_bond_types + 1


def _mlp_shapes(prefix, d_in, d_hid, d_out):
    return {
        f"{prefix}.W1": (d_in, d_hid),
        f"{prefix}.b1": (d_hid,),
        f"{prefix}.W2": (d_hid, d_out),
        f"{prefix}.b2": (d_out,),
    }


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    H = cfg.hidden_dim
    shapes = {
        "embed": (cfg.num_atom_types, H),
        "time.W": (cfg.time_embed_dim, H),
        "time.b": (H,),
    }
    for l in range(cfg.num_layers):
        shapes.update(_mlp_shapes(f"l{l}.m", cfg.edge_in_dim, H, H))
        shapes.update(_mlp_shapes(f"l{l}.h", 2 * H, H, H))
        shapes.update(_mlp_shapes(f"l{l}.x", H, H, 1))
    shapes.update(_mlp_shapes("mask", H, H, 1))
    return shapes


class DenoiserParams:
    """Named parameter arrays in a fixed (sorted) order."""

    def __init__(self, cfg: DenoiserConfig, arrays: dict[str, np.ndarray]):
        shapes = param_shapes(cfg)
        if set(arrays) != set(shapes):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in shapes.items():
            if arrays[name].shape != shape:
                raise ValueError(f"{name}: shape {arrays[name].shape} != {shape}")
        self.config = cfg
        self.arrays = {k: np.asarray(arrays[k], dtype=np.float64) for k in sorted(shapes)}

    @property
    def names(self) -> list[str]:
        return list(self.arrays)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def __getitem__(self, name):
        return self.arrays[name]

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    @classmethod
    def unflatten(cls, cfg: DenoiserConfig, flat) -> "DenoiserParams":
        flat = np.asarray(flat, dtype=np.float64)
        shapes = param_shapes(cfg)
        total = sum(math.prod(s) for s in shapes.values())
        if flat.shape != (total,):
            raise ValueError(f"expected {total} values, got {flat.shape}")
        arrays, off = {}, 0
        for name in sorted(shapes):
            n = math.prod(shapes[name])
            arrays[name] = flat[off : off + n].reshape(shapes[name]).copy()
            off += n
        return cls(cfg, arrays)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def fingerprint(self) -> int:
        crc = 0
        for a in self.arrays.values():
            crc = zlib.crc32(a.tobytes(), crc)
        return crc


def init_params(cfg: DenoiserConfig, rng: np.random.Generator) -> DenoiserParams:
    cfg.validate()
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith((".b", ".b1", ".b2")):
            arrays[name] = np.zeros(shape)
        elif name == "embed":
            arrays[name] = rng.standard_normal(shape)
        else:
            arrays[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
    return DenoiserParams(cfg, arrays)


def time_embedding(t, dim: int, T: int) -> np.ndarray:
    """Sinusoidal features [sin(t w_j), cos(t w_j)], w_j geometric in j."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > T):
        raise IndexError(f"time step outside [1, {T}]: {t}")
    return _time_features(t_arr, dim)


def _time_features(t, dim):
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def ssp(x):
    return np.logaddexp(0.0, x) - LOG2


def _rbf(d, tau):
    centers = np.linspace(0.0, tau, N_RBF)
    width = tau / (N_RBF - 1)
    return np.exp(-(((d[:, None] - centers) / width) ** 2))


class GraphBatch:
    """Static structure of a disjoint union of molecules.

    Candidate edges are all ordered pairs inside a molecule; the radius
    cut is applied per forward call since it depends on the coordinates.
    """

    def __init__(self, graphs: list[MolGraph]):
        if not graphs:
            raise ValueError("empty batch")
        self.graphs = list(graphs)
        sizes = np.array([g.num_nodes for g in graphs])
        self.offsets = np.concatenate(([0], np.cumsum(sizes)))
        self.num_nodes = int(self.offsets[-1])
        self.node_mol = np.repeat(np.arange(len(graphs)), sizes)
        self.atom_type = np.concatenate([g.atom_type for g in graphs])
        src, dst, bond = [], [], []
        for g, off in zip(graphs, self.offsets[:-1]):
            n = g.num_nodes
            btype = np.zeros((n, n), dtype=np.int64)
            for i, j, b in g.bonds:
                btype[i, j] = btype[j, i] = b
            ii, jj = np.nonzero(~np.eye(n, dtype=bool))
            src.append(ii + off)
            dst.append(jj + off)
            bond.append(btype[ii, jj])
        self.pair_i = np.concatenate(src)
        self.pair_j = np.concatenate(dst)
        self.pair_bond = np.concatenate(bond)

    @property
    def num_graphs(self) -> int:
        return len(self.graphs)

    def split(self, arr):
        return [arr[a:b] for a, b in zip(self.offsets[:-1], self.offsets[1:])]


def _check_inputs(params, batch, coords):
    cfg = params.config
    if coords.shape != (batch.num_nodes, 3):
        raise ValueError(f"coords shape {coords.shape} != ({batch.num_nodes}, 3)")
    if not np.all(np.isfinite(coords)):
        raise ValueError("coords must be finite")
    if batch.atom_type.max() >= cfg.num_atom_types or batch.pair_bond.max(initial=0) > cfg.num_bond_types:
        raise ValueError("atom or bond type exceeds the configured vocabulary")


def forward_batch(params: DenoiserParams, batch: GraphBatch, coords, t_nodes, return_cache=False):
    """Returns (eps_hat, mask_logits[, cache]) for all nodes of the batch."""
    cfg = params.config
    P = params.arrays
    coords = np.asarray(coords, dtype=np.float64)
    _check_inputs(params, batch, coords)
    N, H = batch.num_nodes, cfg.hidden_dim

    diff_all = coords[batch.pair_i] - coords[batch.pair_j]
    d_all = np.sqrt(np.einsum("ec,ec->e", diff_all, diff_all))
    keep = (batch.pair_bond > 0) | (d_all < cfg.radius_tau)
    ei, ej = batch.pair_i[keep], batch.pair_j[keep]
    E = ei.size
    d = d_all[keep]
    unit = diff_all[keep] / np.maximum(d, 1e-6)[:, None]
    static = np.concatenate(
        [_rbf(d, cfg.radius_tau), np.eye(cfg.num_bond_types + 1)[batch.pair_bond[keep]]], axis=1
    )
    S_i = sp.csr_matrix((np.ones(E), (ei, np.arange(E))), shape=(N, E))
    S_j = sp.csr_matrix((np.ones(E), (ej, np.arange(E))), shape=(N, E))

    temb = _time_features(np.asarray(t_nodes), cfg.time_embed_dim)
    h = P["embed"][batch.atom_type] + temb @ P["time.W"] + P["time.b"]
    x = coords
    layers = []
    for l in range(cfg.num_layers):
        dx = x[ei] - x[ej]
        q = np.einsum("ec,ec->e", dx, dx)
        z = np.concatenate([h[ei], h[ej], q[:, None], static], axis=1)
        pre_m = z @ P[f"l{l}.m.W1"] + P[f"l{l}.m.b1"]
        act_m = ssp(pre_m)
        m = act_m @ P[f"l{l}.m.W2"] + P[f"l{l}.m.b2"]
        agg = S_i @ m
        hcat = np.concatenate([h, agg], axis=1)
        pre_h = hcat @ P[f"l{l}.h.W1"] + P[f"l{l}.h.b1"]
        act_h = ssp(pre_h)
        h_new = h + act_h @ P[f"l{l}.h.W2"] + P[f"l{l}.h.b2"]
        pre_x = m @ P[f"l{l}.x.W1"] + P[f"l{l}.x.b1"]
        act_x = ssp(pre_x)
        phi = (act_x @ P[f"l{l}.x.W2"] + P[f"l{l}.x.b2"])[:, 0]
        x_new = S_i @ (unit * phi[:, None])
        layers.append(dict(dx=dx, z=z, pre_m=pre_m, act_m=act_m, m=m, hcat=hcat,
                           pre_h=pre_h, act_h=act_h, pre_x=pre_x, act_x=act_x))
        h, x = h_new, x_new

    pre_o = h @ P["mask.W1"] + P["mask.b1"]
    act_o = ssp(pre_o)
    logits = (act_o @ P["mask.W2"] + P["mask.b2"])[:, 0]
    eps_hat = x
    if not return_cache:
        return eps_hat, logits
    cache = dict(
        fingerprint=params.fingerprint(), N=N, ei=ei, ej=ej, S_i=S_i, S_j=S_j,
        unit=unit, temb=temb, atom_type=batch.atom_type, layers=layers,
        h_last=h, pre_o=pre_o, act_o=act_o,
    )
    return eps_hat, logits, cache


def gfn_forward(params: DenoiserParams, g: MolGraph, coords, t: int, return_cache=False):
    """Single-molecule convenience wrapper around :func:`forward_batch`."""
    t_nodes = np.full(g.num_nodes, int(t))
    time_embedding(t, params.config.time_embed_dim, params.config.T)
    return forward_batch(params, GraphBatch([g]), coords, t_nodes, return_cache)


def _mlp_back(P, prefix, inp, pre, act, dout, grads, frozen):
    """Backprop through x -> ssp(x W1 + b1) W2 + b2; returns d(input)."""
    if prefix not in frozen:
        grads[f"{prefix}.W2"] = act.T @ dout
        grads[f"{prefix}.b2"] = dout.sum(axis=0)
    dpre = (dout @ P[f"{prefix}.W2"].T) * expit(pre)
    if prefix not in frozen:
        grads[f"{prefix}.W1"] = inp.T @ dpre
        grads[f"{prefix}.b1"] = dpre.sum(axis=0)
    return dpre @ P[f"{prefix}.W1"].T


def gfn_backward(params: DenoiserParams, cache, d_eps, d_logits, frozen=()) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given its gradients w.r.t. both outputs.

    ``frozen`` holds module prefixes (``"embed"``, ``"time"``, ``"l0.m"``,
    ``"mask"``, ...) whose weights are left out of the result.
    """
    cfg = params.config
    P = params.arrays
    frozen = set(frozen)
    if cache["fingerprint"] != params.fingerprint():
        raise CacheMismatchError("parameters changed since the forward pass")
    N = cache["N"]
    d_eps = np.asarray(d_eps, dtype=np.float64)
    d_logits = np.asarray(d_logits, dtype=np.float64)
    if d_eps.shape != (N, 3) or d_logits.shape != (N,):
        raise CacheMismatchError("upstream gradient shapes do not match the cached forward")
    H = cfg.hidden_dim
    ei, ej, S_i, S_j, unit = (cache[k] for k in ("ei", "ej", "S_i", "S_j", "unit"))
    grads: dict[str, np.ndarray] = {}

    dh = _mlp_back(P, "mask", cache["h_last"], cache["pre_o"], cache["act_o"],
                   d_logits[:, None], grads, frozen)
    dx = d_eps
    for l in reversed(range(cfg.num_layers)):
        c = cache["layers"][l]
        dphi = np.einsum("ec,ec->e", unit, dx[ei])
        dm = _mlp_back(P, f"l{l}.x", c["m"], c["pre_x"], c["act_x"], dphi[:, None], grads, frozen)
        dhcat = _mlp_back(P, f"l{l}.h", c["hcat"], c["pre_h"], c["act_h"], dh, grads, frozen)
        dh = dh + dhcat[:, :H]
        dm = dm + dhcat[:, H:][ei]
        dz = _mlp_back(P, f"l{l}.m", c["z"], c["pre_m"], c["act_m"], dm, grads, frozen)
        dh = dh + S_i @ dz[:, :H] + S_j @ dz[:, H : 2 * H]
        if l > 0:
            # q = |x_i - x_j|^2 feeds back into the previous coordinate stream
            dd = 2.0 * dz[:, 2 * H, None] * c["dx"]
            dx = S_i @ dd - S_j @ dd
    if "time" not in frozen:
        grads["time.W"] = cache["temb"].T @ dh
        grads["time.b"] = dh.sum(axis=0)
    if "embed" not in frozen:
        ge = np.zeros_like(P["embed"])
        np.add.at(ge, cache["atom_type"], dh)
        grads["embed"] = ge
    return grads
