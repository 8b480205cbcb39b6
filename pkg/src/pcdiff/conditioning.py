"""Raw, local and global conditions built from the input cloud and image.

* raw: image features sampled at each current point's pixel plus input-cloud
  features interpolated onto the current point positions; rebuilt each step.
* local: two set-abstraction levels over the input cloud, the coarse one fused
  with image patches by cross-attention, merged top-down onto the finer level.
* global: per-point MLP over the local map, max-pooled to one vector.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import geometry as geo
from . import numerics as nx
from .layers import Params, dense, mlp
from .numerics import Tensor


@dataclass
class ConditionBundle:
    c_raw: Tensor
    c_local: "LocalCondition"
    c_global: Tensor


@dataclass
class LocalCondition:
    positions: np.ndarray
    features: Tensor

    @property
    def width(self) -> int:
        return 3 + self.features.shape[1]


@dataclass
class ImageFeatureMap:
    features: Tensor  # (H * W, C1), row-major pixels
    height: int
    width: int

    @property
    def channels(self) -> int:
        return self.features.shape[1]


# image encoder


@lru_cache(maxsize=16)
def conv_taps(height: int, width: int) -> np.ndarray:
    """3x3 neighbourhood of every pixel; out-of-image taps point at row H*W."""
    ii, jj = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    taps = []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            y, x = ii + di, jj + dj
            ok = (y >= 0) & (y < height) & (x >= 0) & (x < width)
            taps.append(np.where(ok, y * width + x, height * width).reshape(-1))
    return np.stack(taps, axis=1)


def conv3x3(x: Tensor, taps: np.ndarray, params: Params, name: str) -> Tensor:
    padded = nx.concat([x, Tensor(np.zeros((1, x.shape[1])))], axis=0)
    cols = nx.reshape(nx.gather(padded, taps), (taps.shape[0], -1))
    return dense(cols, params, name)


def init_image_encoder(params: Params, c1: int, layers: int = 3) -> None:
    cin = 3
    for i in range(layers):
        params.dense(f"img.conv{i}", 9 * cin, c1)
        cin = c1


def encode_image(params: Params, image: np.ndarray) -> ImageFeatureMap:
    """Three stride-1 3x3 conv + relu layers, H x W x 3 -> H x W x C1."""
    h, w, c = image.shape
    if h < 16 or w < 16:
        raise ValueError(f"image must be at least 16x16, got {h}x{w}")
    if c != 3:
        raise ValueError(f"expected an RGB image, got {c} channels")
    taps = conv_taps(h, w)
    x = Tensor(image.reshape(h * w, 3))
    i = 0
    while f"img.conv{i}.w" in params:
        x = nx.relu(conv3x3(x, taps, params, f"img.conv{i}"))
        i += 1
    return ImageFeatureMap(x, h, w)


@lru_cache(maxsize=16)
def patch_taps(height: int, width: int, patch: int) -> np.ndarray:
    ph, pw = height // patch, width // patch
    if ph == 0 or pw == 0:
        raise ValueError(f"patch {patch} larger than image {height}x{width}")
    bi, bj, di, dj = np.meshgrid(np.arange(ph), np.arange(pw), np.arange(patch), np.arange(patch),
                                 indexing="ij")
    rows = (bi * patch + di) * width + (bj * patch + dj)
    return rows.reshape(ph * pw, patch * patch)


def image_patches(fmap: ImageFeatureMap, patch: int) -> Tensor:
    """Mean feature of each non-overlapping ``patch`` x ``patch`` block."""
    return nx.mean_pool(nx.gather(fmap.features, patch_taps(fmap.height, fmap.width, patch)), 1)


# raw condition


def init_point_lift(params: Params, c2: int) -> None:
    params.mlp("raw.lift", [3, c2, c2])


def lift_input_points(params: Params, positions: np.ndarray) -> Tensor:
    return mlp(Tensor(positions), params, "raw.lift")


def image_sample_weights(camera: geo.Camera, positions: np.ndarray, radius_px: float = 2.0):
    """Bilinear taps at each point's pixel; weights are zero for hidden points."""
    uv, _, inside = geo.project_points(camera, positions)
    vis = geo.visibility_mask(camera, positions, radius_px) & inside
    idx, w = geo.bilinear_taps(uv, camera.height, camera.width)
    w = w * vis[:, None]
    return idx, w, vis


def build_raw_condition(fmap: ImageFeatureMap, camera: geo.Camera, input_positions: np.ndarray,
                        lifted: Tensor, x_t: np.ndarray, k: int = 4,
                        radius_px: float = 2.0) -> Tensor:
    """``[x_t | image features at projected pixels | interpolated input features]``."""
    pos = np.ascontiguousarray(x_t[:, :3])
    idx, w, _ = image_sample_weights(camera, pos, radius_px)
    img = nx.weighted_rows(fmap.features, idx, w)
    pidx, pw = geo.idw_weights(input_positions, pos, min(k, len(input_positions)))
    pts = nx.weighted_rows(lifted, pidx, pw)
    return nx.concat([Tensor(x_t), img, pts])


# local condition


@dataclass
class GroupPlan:
    """Geometry of one set-abstraction level: centres and their neighbour groups."""

    centers: np.ndarray  # indices into the previous level
    groups: np.ndarray  # (M, K) indices into the previous level
    offsets: np.ndarray  # (M, K, 3) neighbour minus centre
    positions: np.ndarray  # (M, 3) centre coordinates

    @classmethod
    def build(cls, positions: np.ndarray, m: int, k: int) -> "GroupPlan":
        pos = np.asarray(positions, dtype=np.float32)
        centers = geo.fps_sample(pos, m, start=geo.canonical_start(pos))
        groups, _ = geo.knn_brute(pos, pos[centers], min(k, len(pos)))
        return cls(centers, groups, pos[groups] - pos[centers][:, None, :], pos[centers])

    @classmethod
    def around_all(cls, positions: np.ndarray, k: int) -> "GroupPlan":
        """No downsampling: every point is a centre."""
        pos = np.asarray(positions, dtype=np.float32)
        groups, _ = geo.knn_brute(pos, pos, min(k, len(pos)))
        return cls(np.arange(len(pos)), groups, pos[groups] - pos[:, None, :], pos)


def set_abstraction(params: Params, name: str, plan: GroupPlan, feats: Tensor) -> Tensor:
    """Shared MLP on ``(offset | neighbour features)`` then max over each group."""
    grouped = nx.concat([Tensor(plan.offsets), nx.gather(feats, plan.groups)])
    return nx.max_pool(mlp(grouped, params, name), axis=1)


@dataclass
class InputPlan:
    """Everything about the input cloud that does not depend on parameters."""

    positions: np.ndarray
    level_a: GroupPlan
    level_b: GroupPlan
    up_idx: np.ndarray
    up_w: np.ndarray

    @classmethod
    def build(cls, positions: np.ndarray, k_group: int = 16, k_interp: int = 4) -> "InputPlan":
        n = len(positions)
        if n < 16:
            raise ValueError(f"input cloud needs at least 16 points, got {n}")
        a = GroupPlan.build(positions, -(-n // 4), k_group)
        b = GroupPlan.build(a.positions, -(-n // 16), k_group)
        up_idx, up_w = geo.idw_weights(b.positions, a.positions, min(k_interp, len(b.positions)))
        return cls(np.asarray(positions, dtype=np.float32), a, b, up_idx, up_w)


def init_point_encoder(params: Params, c_sa: tuple[int, int]) -> None:
    params.mlp("local.sa0", [6, c_sa[0], c_sa[0]])
    params.mlp("local.sa1", [3 + c_sa[0], c_sa[1], c_sa[1]])


def encode_points_local(params: Params, plan: InputPlan) -> tuple[Tensor, Tensor]:
    """Features at ceil(N/4) and ceil(N/16) points."""
    fa = set_abstraction(params, "local.sa0", plan.level_a, Tensor(plan.positions))
    fb = set_abstraction(params, "local.sa1", plan.level_b, fa)
    return fa, fb


def init_fusion(params: Params, c_point: int, c_img: int, d_k: int) -> None:
    params.dense("fuse.q", c_point, d_k, gain=1.0, bias=False)
    params.dense("fuse.k", c_img, d_k, gain=1.0, bias=False)
    params.dense("fuse.v", c_img, c_point, gain=1.0, bias=False)
    params.mlp("fuse.out", [c_point, c_point, c_point])


def attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k)) v; returns the output and the weight rows."""
    d_k = q.shape[1]
    scores = nx.mul(nx.matmul(q, nx.transpose(k)), 1.0 / np.sqrt(d_k))
    w = nx.softmax(scores, axis=1)
    return nx.matmul(w, v), w


def cross_attention_fuse(params: Params, img_feats: Tensor, pt_feats: Tensor):
    """Point queries attend over image patches; residual add, then a per-point MLP."""
    q = nx.matmul(pt_feats, params["fuse.q.w"])
    k = nx.matmul(img_feats, params["fuse.k.w"])
    v = nx.matmul(img_feats, params["fuse.v.w"])
    att, w = attention(q, k, v)
    return mlp(nx.add(pt_feats, att), params, "fuse.out"), w


def init_local_merge(params: Params, c_sa: tuple[int, int], c_l: int) -> None:
    params.mlp("local.merge", [c_sa[0] + c_sa[1], c_l, c_l])


def build_local_condition(params: Params, plan: InputPlan, fmap: ImageFeatureMap,
                          patch: int = 4) -> LocalCondition:
    fa, fb = encode_points_local(params, plan)
    fused, _ = cross_attention_fuse(params, image_patches(fmap, patch), fb)
    up = nx.weighted_rows(fused, plan.up_idx, plan.up_w)
    merged = mlp(nx.concat([up, fa]), params, "local.merge")
    return LocalCondition(plan.level_a.positions, merged)


# global condition


def init_global(params: Params, c_l: int, z: int) -> None:
    params.mlp("global", [3 + c_l, z, z])


def build_global_condition(params: Params, c_local: LocalCondition) -> Tensor:
    rows = nx.concat([Tensor(c_local.positions), c_local.features])
    return nx.reshape(nx.max_pool(mlp(rows, params, "global"), axis=0), (1, -1))


# concatsquash


def time_context(t_norm: float, z: Tensor) -> Tensor:
    emb = Tensor(np.array([[t_norm, np.sin(t_norm), np.cos(t_norm)]]))
    return nx.concat([emb, z])


def init_concatsquash(params: Params, name: str, c: int, ctx: int) -> None:
    params.dense(f"{name}.gate", ctx, c, gain=1.0)
    params.dense(f"{name}.shift", ctx, c, gain=1.0, bias=False)


def concatsquash(params: Params, name: str, h: Tensor, ctx: Tensor) -> Tensor:
    """``h * sigmoid(W1 c + b1) + W2 c`` with the gate shared by all rows."""
    gate = nx.sigmoid(dense(ctx, params, f"{name}.gate"))
    shift = nx.matmul(ctx, params[f"{name}.shift.w"])
    return nx.add(nx.mul(h, gate), shift)
