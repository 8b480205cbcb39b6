"""The full conditioned noise predictor: widths, parameters and per-pair context."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import conditioning as cond
from . import geometry as geo
from . import numerics as nx
from .denoiser import TrunkPlan, denoiser_forward, init_denoiser
from .layers import Params
from .numerics import Tensor

ABLATIONS = ("raw", "local", "global")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 3
    c1: int = 16
    c2: int = 16
    c_sa1: int = 32
    c_sa2: int = 64
    c_l: int = 64
    z: int = 128
    d_k: int = 32
    h1: int = 64
    h2: int = 128
    h3: int = 256
    k_enc: int = 16
    k_dec: int = 8
    k_interp: int = 4
    patch: int = 4
    radius_px: float = 2.0

    @property
    def c_raw(self) -> int:
        return self.d + self.c1 + self.c2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def build_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    params = Params(rng)
    cond.init_image_encoder(params, cfg.c1)
    cond.init_point_lift(params, cfg.c2)
    cond.init_point_encoder(params, (cfg.c_sa1, cfg.c_sa2))
    cond.init_fusion(params, cfg.c_sa2, cfg.c1, cfg.d_k)
    cond.init_local_merge(params, (cfg.c_sa1, cfg.c_sa2), cfg.c_l)
    cond.init_global(params, cfg.c_l, cfg.z)
    init_denoiser(params, cfg.d, cfg.c_raw, cfg.c_l, cfg.z, (cfg.h1, cfg.h2, cfg.h3))
    return params


@dataclass
class Context:
    """One input pair in normalised coordinates plus its parameter-free geometry.

    Normalisation centres the input cloud at its centroid and scales it to unit
    bounding-sphere radius; the camera is moved along with it.
    """

    input_positions: np.ndarray
    image: np.ndarray
    camera: geo.Camera
    center: np.ndarray
    scale: float
    plan: cond.InputPlan

    @classmethod
    def build(cls, cloud: geo.PointCloud, image: np.ndarray, camera: geo.Camera,
              cfg: ModelConfig) -> "Context":
        center = cloud.positions.astype(np.float64).mean(axis=0)
        scale = geo.bounding_sphere_radius(cloud) or 1.0
        pos = ((cloud.positions - center) / scale).astype(np.float32)
        plan = cond.InputPlan.build(pos, cfg.k_enc, cfg.k_interp)
        return cls(pos, np.asarray(image, dtype=np.float32), camera.normalized(center, scale),
                   center, scale, plan)

    def normalize(self, cloud: geo.PointCloud, d: int) -> np.ndarray:
        x = (cloud.positions - self.center) / self.scale
        if d == 6:
            if not cloud.has_colors:
                raise ValueError("colour mode needs a coloured target")
            x = np.concatenate([x, 2.0 * cloud.features - 1.0], axis=1)
        return x.astype(np.float32)

    def denormalize(self, x: np.ndarray) -> geo.PointCloud:
        pos = x[:, :3].astype(np.float64) * self.scale + self.center
        feats = np.clip((x[:, 3:6] + 1.0) / 2.0, 0.0, 1.0) if x.shape[1] == 6 else None
        return geo.PointCloud(pos, feats)


@dataclass
class Conditions:
    fmap: cond.ImageFeatureMap
    lifted: Tensor
    c_local: cond.LocalCondition
    c_global: Tensor


def compute_conditions(params: Params, cfg: ModelConfig, ctx: Context,
                       ablate: tuple[str, ...] = ()) -> Conditions:
    """The parts of the conditioning that depend only on the input pair."""
    fmap = cond.encode_image(params, ctx.image)
    lifted = cond.lift_input_points(params, ctx.input_positions)
    c_local = cond.build_local_condition(params, ctx.plan, fmap, cfg.patch)
    c_global = cond.build_global_condition(params, c_local)
    if "local" in ablate:
        c_local = cond.LocalCondition(c_local.positions, Tensor(np.zeros(c_local.features.shape)))
    if "global" in ablate:
        c_global = Tensor(np.zeros(c_global.shape))
    return Conditions(fmap, lifted, c_local, c_global)


def raw_condition(cfg: ModelConfig, ctx: Context, conds: Conditions, x_t: np.ndarray,
                  ablate: tuple[str, ...] = ()) -> Tensor:
    c_raw = cond.build_raw_condition(conds.fmap, ctx.camera, ctx.input_positions, conds.lifted,
                                     x_t, cfg.k_interp, cfg.radius_px)
    if "raw" in ablate:
        keep = nx.slice_last(c_raw, 0, cfg.d)
        c_raw = nx.concat([keep, Tensor(np.zeros((len(x_t), cfg.c1 + cfg.c2)))])
    return c_raw


def predict_eps(params: Params, cfg: ModelConfig, ctx: Context, conds: Conditions,
                x_t: np.ndarray, t: int, T: int, ablate: tuple[str, ...] = ()) -> Tensor:
    c_raw = raw_condition(cfg, ctx, conds, x_t, ablate)
    plan = TrunkPlan.build(x_t[:, :3], cfg.k_enc, cfg.k_dec)
    return denoiser_forward(params, plan, c_raw, conds.c_local, conds.c_global, t / T,
                            cfg.k_interp)


def eps_function(params: Params, cfg: ModelConfig, ctx: Context, T: int,
                 ablate: tuple[str, ...] = ()):
    """Closure ``(x_t, t) -> eps_hat`` for sampling; pair conditions computed once."""
    unknown = set(ablate) - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation {sorted(unknown)}")
    with nx.no_grad():
        conds = compute_conditions(params, cfg, ctx, ablate)

    def eps_fn(x_t: np.ndarray, t: int) -> np.ndarray:
        with nx.no_grad():
            return predict_eps(params, cfg, ctx, conds, x_t, t, T, ablate).data

    return eps_fn
