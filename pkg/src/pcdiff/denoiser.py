"""Noise-prediction network: three-level set-abstraction encoder and propagation decoder.

Level one runs at every current point (each grouped with its own kNN
neighbourhood, added back onto the point's own features), levels two and three at ceil(N/4) and ceil(N/16)
farthest-point centres.  Groups are always kNN (never radius balls)
so diffuse, noise-like clouds still produce full groups.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from . import numerics as nx
from .conditioning import GroupPlan, LocalCondition, concatsquash, set_abstraction, time_context
from .layers import Params, mlp
from .numerics import ShapeError, Tensor


@dataclass
class TrunkPlan:
    """Parameter-free geometry of one forward pass over a given cloud."""

    positions: np.ndarray
    level0: GroupPlan  # every point with its own kNN group
    level1: GroupPlan
    level2: GroupPlan
    up2_idx: np.ndarray  # level3 -> level2 interpolation
    up2_w: np.ndarray
    up1_idx: np.ndarray  # level2 -> points
    up1_w: np.ndarray

    @classmethod
    def build(cls, positions: np.ndarray, k_enc: int = 16, k_dec: int = 8) -> "TrunkPlan":
        pos = np.ascontiguousarray(positions, dtype=np.float32)
        n = len(pos)
        l0 = GroupPlan.around_all(pos, k_enc)
        l1 = GroupPlan.build(pos, -(-n // 4), k_enc)
        l2 = GroupPlan.build(l1.positions, -(-n // 16), k_enc)
        i2, w2 = geo.idw_weights(l2.positions, l1.positions, min(k_dec, len(l2.positions)))
        i1, w1 = geo.idw_weights(l1.positions, pos, min(k_dec, len(l1.positions)))
        return cls(pos, l0, l1, l2, i2, w2, i1, w1)


FOURIER_OCTAVES = 4


def fourier_features(positions: np.ndarray, octaves: int = FOURIER_OCTAVES) -> np.ndarray:
    """``sin``/``cos`` of each coordinate at frequencies ``2^k * pi``, shape ``(N, 6 * octaves)``."""
    pos = np.asarray(positions, dtype=np.float64)[:, :3]
    ang = pos[:, :, None] * (np.pi * 2.0 ** np.arange(octaves))
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).reshape(len(pos), -1).astype(np.float32)


def init_denoiser(params: Params, d: int, c_raw: int, c_l: int, z: int,
                  hidden: tuple[int, int, int]) -> None:
    h1, h2, h3 = hidden
    ctx = 3 + z
    params.mlp("den.lift", [c_raw + 6 * FOURIER_OCTAVES, h1, h1])
    params.mlp("den.edge", [3 + h1, h1, h1])
    params.mlp("den.local", [h1 + c_l, h1, h1])
    params.mlp("den.sa1", [3 + h1, h2, h2])
    params.mlp("den.sa2", [3 + h2, h3, h3])
    params.mlp("den.fp2", [h3 + h2, h2, h2])
    params.mlp("den.fp1", [h2 + h1, h1, h1])
    params.mlp("den.head", [h1, h1, d], last_gain=0.0)
    for name, c in (("cs0", h1), ("cs1", h2), ("cs2", h3), ("cs3", h2), ("cs4", h1)):
        params.dense(f"den.{name}.gate", ctx, c, gain=1.0)
        params.dense(f"den.{name}.shift", ctx, c, gain=1.0, bias=False)


def feature_propagation(params: Params, name: str, coarse: Tensor, idx: np.ndarray,
                        w: np.ndarray, skip: Tensor) -> Tensor:
    """Interpolate coarse features onto fine points, append skip features, MLP."""
    up = nx.weighted_rows(coarse, idx, w)
    return mlp(nx.concat([up, skip]), params, name)


def _expect(stage: str, got: int, want: int) -> None:
    if got != want:
        raise ShapeError(f"{stage}: expected width {want}, got {got}")


def denoiser_forward(params: Params, plan: TrunkPlan, c_raw: Tensor, c_local: LocalCondition,
                     z: Tensor, t_norm: float, k_interp: int = 4) -> Tensor:
    """Predicted noise for every point, shape ``(N, D)``."""
    _expect("raw condition", c_raw.shape[1] + 6 * FOURIER_OCTAVES, params["den.lift.0.w"].shape[0])
    _expect("raw condition rows", c_raw.shape[0], len(plan.positions))
    _expect("local condition", c_local.features.shape[1],
            params["den.local.0.w"].shape[0] - params["den.lift.0.w"].shape[1])
    _expect("global condition", z.shape[1] + 3, params["den.cs0.gate.w"].shape[0])
    ctx = time_context(t_norm, z)

    p1 = mlp(nx.concat([c_raw, Tensor(fourier_features(plan.positions))]), params, "den.lift")
    # residual: pooling mixes neighbours, and per-point channels such as colour noise must survive it
    p1 = nx.add(p1, set_abstraction(params, "den.edge", plan.level0, p1))
    li, lw = geo.idw_weights(c_local.positions, plan.positions, min(k_interp, len(c_local.positions)))
    local = nx.weighted_rows(c_local.features, li, lw)
    p1 = mlp(nx.concat([p1, local]), params, "den.local")
    p1 = concatsquash(params, "den.cs0", p1, ctx)

    p2 = set_abstraction(params, "den.sa1", plan.level1, p1)
    p2 = concatsquash(params, "den.cs1", p2, ctx)
    p3 = set_abstraction(params, "den.sa2", plan.level2, p2)
    p3 = concatsquash(params, "den.cs2", p3, ctx)

    u2 = feature_propagation(params, "den.fp2", p3, plan.up2_idx, plan.up2_w, p2)
    u2 = concatsquash(params, "den.cs3", u2, ctx)
    u1 = feature_propagation(params, "den.fp1", u2, plan.up1_idx, plan.up1_w, p1)
    u1 = concatsquash(params, "den.cs4", u1, ctx)
    return mlp(u1, params, "den.head", final_relu=False)
