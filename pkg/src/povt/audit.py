"""Dependency audit: the realized Jacobian structure versus generation order.

The reference conditioning sets are derived by enumerating the generation
order directly (frame t-1 available, then each object's pres/x/y/w/h, then
the latent grid in raster order); they do not consult the attention masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import POVT, ModelConfig

_START = (-1, 0, 0, 0)


def _event_rank_of_obj_slot(cfg: ModelConfig, t: int, l: int, k: int) -> tuple:
    if l < cfg.P:
        return (t, 0, 0, 0)  # content of frame t-1 (pad token at t = 0)
    return (t, 1, k, l - cfg.P)


def _event_rank_of_base_slot(cfg: ModelConfig, T: int, n_b: int, pos: int) -> tuple:
    if pos == 0:
        return _START
    prev = pos - 1
    hw = cfg.tokens_per_frame
    return (T - n_b + prev // hw, 2, prev % hw, 0)


def conditioning_sets(cfg: ModelConfig, T: int, n_b: int) -> dict[tuple, tuple[np.ndarray, np.ndarray]]:
    """For every modeled output, boolean masks of the input slots it may depend on.

    Keys: ("box", t, k, j) for box token j of object k at time t, and
    ("z", jb, i) for latent i of base timestep jb.  Values: (obj [T,K,L], base [S_b]).
    """
    K, L, hw = cfg.K, cfg.L, cfg.tokens_per_frame
    obj_rank = [[[_event_rank_of_obj_slot(cfg, t, l, k) for l in range(L)] for k in range(K)] for t in range(T)]
    base_rank = [_event_rank_of_base_slot(cfg, T, n_b, s) for s in range(n_b * hw)]

    def allowed(target):
        obj = np.array([[[r < target for r in row] for row in plane] for plane in obj_rank], dtype=bool).reshape(T, K, L)
        base = np.array([r < target for r in base_rank], dtype=bool)
        return obj, base

    out = {}
    for t in range(T):
        for k in range(K):
            for j in range(5):
                out[("box", t, k, j)] = allowed((t, 1, k, j))
    for jb in range(n_b):
        for i in range(hw):
            out[("z", jb, i)] = allowed((T - n_b + jb, 2, i, 0))
    return out


@dataclass
class AuditResult:
    outputs: int
    violations: list  # (output key, number of forbidden nonzero entries)
    dead: list  # outputs with no nonzero allowed entry

    @property
    def ok(self) -> bool:
        return not self.violations and not self.dead


def jacobian_audit(model: POVT, T: int | None = None, n_b: int | None = None, seed: int = 0) -> AuditResult:
    """Backpropagate every output logit (random projection) to the embedded inputs."""
    cfg = model.cfg
    T = cfg.W_o if T is None else T
    n_b = cfg.W_b if n_b is None else n_b
    rng = np.random.default_rng(seed)
    obj_in = nx.Tensor(rng.standard_normal((1, T, cfg.K, cfg.L, cfg.D)), requires_grad=True)
    base_in = nx.Tensor(rng.standard_normal((1, n_b * cfg.tokens_per_frame, cfg.D)), requires_grad=True)
    out = model.forward_embedded(obj_in, base_in, n_b)
    sets = conditioning_sets(cfg, T, n_b)
    violations, dead = [], []
    hw = cfg.tokens_per_frame
    for key, (ok_obj, ok_base) in sets.items():
        if key[0] == "box":
            _, t, k, j = key
            logit = out.pres_logits[0, t, k] if j == 0 else out.coord_logits[0, t, k, j - 1]
        else:
            _, jb, i = key
            logit = out.z_logits[0, jb, i // cfg.latent_w, i % cfg.latent_w]
        obj_in.grad = None
        base_in.grad = None
        nx.backward(nx.tsum(logit * rng.standard_normal(logit.shape)))
        g_obj = np.zeros(obj_in.shape) if obj_in.grad is None else obj_in.grad
        g_base = np.zeros(base_in.shape) if base_in.grad is None else base_in.grad
        nz_obj = np.any(g_obj[0] != 0.0, axis=-1)  # [T,K,L]
        nz_base = np.any(g_base[0] != 0.0, axis=-1)
        bad = int((nz_obj & ~ok_obj).sum() + (nz_base & ~ok_base).sum())
        if bad:
            violations.append((key, bad))
        if not (nz_obj & ok_obj).any() and not (nz_base & ok_base).any():
            dead.append(key)
    return AuditResult(len(sets), violations, dead)
