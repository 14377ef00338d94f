"""Structured-light depth sensor noise for simulated observations.

Per valid pixel: read the depth raster at a laterally jittered sub-pixel
location (bilinear), add axial Gaussian noise whose standard deviation grows
quadratically with range, optionally quantize, then drop out at random.
Segmentation rasters pass through untouched. Everything is a fixed sequence of
whole-raster draws from one seeded stream, so output is bit-deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import DepthObservation
from .seeding import stream_rng

Array = np.ndarray

# Published structured-light axial-noise fit adopted as the default profile.
KINECT_AXIAL_A = 0.0012   # meters
KINECT_AXIAL_B = 0.0019   # meters^-1 against (z - 0.4)^2
AXIAL_PIVOT = 0.4         # meters


@dataclass(frozen=True)
class DepthNoiseModel:
    axial_a: float = KINECT_AXIAL_A
    axial_b: float = KINECT_AXIAL_B
    lateral_sigma: float = 0.4      # pixels
    dropout_rate: float = 0.005
    quantization_step: float = 0.001  # meters, 0 disables

    def __post_init__(self):
        if min(self.axial_a, self.axial_b, self.lateral_sigma, self.quantization_step) < 0:
            raise ValueError("noise coefficients must be non-negative")
        if not (0.0 <= self.dropout_rate <= 1.0):
            raise ValueError("dropout_rate must be in [0, 1]")

    def sigma_z(self, z) -> Array:
        return self.axial_a + self.axial_b * (np.asarray(z) - AXIAL_PIVOT) ** 2

    @staticmethod
    def off() -> "DepthNoiseModel":
        return DepthNoiseModel(0.0, 0.0, 0.0, 0.0, 0.0)

    @staticmethod
    def kinect_default() -> "DepthNoiseModel":
        return DepthNoiseModel()

    def to_dict(self) -> dict:
        return {
            "axial_a": self.axial_a,
            "axial_b": self.axial_b,
            "lateral_sigma": self.lateral_sigma,
            "dropout_rate": self.dropout_rate,
            "quantization_step": self.quantization_step,
        }

    @staticmethod
    def from_dict(d: dict) -> "DepthNoiseModel":
        return DepthNoiseModel(**{k: float(v) for k, v in d.items()})


def load_noise_profile(name_or_path: str) -> DepthNoiseModel:
    """Resolve --noise-profile values: off, kinect-default, or a JSON path."""
    if name_or_path == "off":
        return DepthNoiseModel.off()
    if name_or_path == "kinect-default":
        return DepthNoiseModel.kinect_default()
    with open(name_or_path) as f:
        return DepthNoiseModel.from_dict(json.load(f))


def _bilinear_read(depth: Array, u: Array, v: Array) -> Array:
    """Sample depth at float pixel coordinates; NaN off-raster or near invalid."""
    h, w = depth.shape
    out = np.full(u.shape, np.nan)
    ok = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    if not ok.any():
        return out
    uu = u[ok]
    vv = v[ok]
    u0 = np.clip(np.floor(uu).astype(np.int64), 0, max(w - 2, 0))
    v0 = np.clip(np.floor(vv).astype(np.int64), 0, max(h - 2, 0))
    fu = uu - u0
    fv = vv - v0
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    taps = np.stack([depth[v0, u0], depth[v0, u1], depth[v1, u0], depth[v1, u1]])
    weights = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv])
    # Only taps that actually carry weight must be valid; this keeps exact
    # integer reads (zero lateral noise) independent of invalid neighbors.
    tap_ok = np.isfinite(taps) & (taps > 0)
    usable = (tap_ok | (weights == 0)).all(axis=0)
    val = (np.where(tap_ok, taps, 0.0) * weights).sum(axis=0)
    out[ok] = np.where(usable, val, np.nan)
    return out


def inject_depth_noise(obs: DepthObservation, model: DepthNoiseModel,
                       rng_seed: int, stream_index: int = 0) -> DepthObservation:
    """Corrupt one observation; bit-identical given (obs, model, seed, index).

    stream_index separates the draws of multiple views under one run seed.
    """
    rng = stream_rng(rng_seed, "noise", stream_index)
    h, w = obs.depth.shape
    # Fixed draw order regardless of model coefficients keeps streams aligned.
    du = rng.standard_normal((h, w))
    dv = rng.standard_normal((h, w))
    axial = rng.standard_normal((h, w))
    drop = rng.uniform(size=(h, w))

    valid = obs.valid_mask
    depth = np.where(valid, obs.depth, np.nan)

    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    sampled = _bilinear_read(depth, uu + model.lateral_sigma * du, vv + model.lateral_sigma * dv)
    sampled = np.where(valid, sampled, np.nan)

    noisy = sampled + model.sigma_z(sampled) * axial
    if model.quantization_step > 0:
        noisy = np.round(noisy / model.quantization_step) * model.quantization_step
    if model.dropout_rate > 0:
        noisy = np.where(drop < model.dropout_rate, np.nan, noisy)

    return DepthObservation(noisy, obs.segmentation, obs.intrinsics, obs.pose)
