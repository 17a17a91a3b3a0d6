"""Kabsch-aligned RMSD and coverage / matching metrics for conformer sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EvalConfig:
    threshold_delta: float = 0.5

    def __post_init__(self):
        if not self.threshold_delta > 0:
            raise ValueError(f"threshold_delta must be positive, got {self.threshold_delta}")


def kabsch_rotation(a, b) -> np.ndarray:
    """Proper rotation U minimising |(a - mean a) U - (b - mean b)|."""
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    u, _, vt = np.linalg.svd(a.T @ b)
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    u[:, -1] *= d
    return u @ vt


def kabsch_rmsd(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3 or a.shape[0] < 1:
        raise ValueError(f"conformer shapes differ or are invalid: {a.shape} vs {b.shape}")
    if np.array_equal(a, b):
        return 0.0
    ac = a - a.mean(axis=0)
    bc = b - b.mean(axis=0)
    diff = ac @ kabsch_rotation(a, b) - bc
    return float(np.sqrt(np.sum(diff * diff) / a.shape[0]))


def rmsd_matrix(gen, ref) -> np.ndarray:
    """D[i, j] = RMSD(ref[i], gen[j])."""
    return np.array([[kabsch_rmsd(r, g) for g in gen] for r in ref])


def metrics_from_rmsd(D, delta: float) -> dict[str, float]:
    """COV in percent and MAT in the RMSD unit from a (ref x gen) matrix."""
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2 or 0 in D.shape:
        raise ValueError("both conformer sets must be non-empty")
    best_r = D.min(axis=1)
    best_p = D.min(axis=0)
    return {
        "cov_r": 100.0 * float(np.mean(best_r <= delta)),
        "mat_r": float(best_r.mean()),
        "cov_p": 100.0 * float(np.mean(best_p <= delta)),
        "mat_p": float(best_p.mean()),
    }


def coverage_matching(S_g, S_r, cfg: EvalConfig | float = EvalConfig()) -> dict[str, float]:
    delta = cfg.threshold_delta if isinstance(cfg, EvalConfig) else float(cfg)
    if len(S_g) == 0 or len(S_r) == 0:
        raise ValueError("both conformer sets must be non-empty")
    return metrics_from_rmsd(rmsd_matrix(S_g, S_r), delta)


def summarize(per_molecule: list[dict[str, float]]) -> dict[str, dict[str, float]]:
    """Mean and median of each metric over molecules."""
    if not per_molecule:
        raise ValueError("no molecules to summarize")
    keys = per_molecule[0].keys()
    return {
        k: {
            "mean": float(np.mean([m[k] for m in per_molecule])),
            "median": float(np.median([m[k] for m in per_molecule])),
        }
        for k in keys
    }
