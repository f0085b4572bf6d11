"""Keypoint geometry and first-order motion.

Soft-argmax coordinate extraction, per-keypoint 2x2 Jacobians, affine
composition through a canonical frame, thin-plate-spline deformations with
analytic spatial Jacobians, dense backward flow mixed over soft part maps,
and differentiable bilinear feature warping.

Every operation shares one coordinate convention: normalized [-1, 1]^2 with
x rightward, y downward, and the outermost grid cell centers at exactly +-1
(align-corners). All functions are pure and accept arbitrary leading batch
dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ContractViolation, SamplingError

# |det| below this means the Jacobian is treated as collapsed.
DET_FLOOR = 1e-4
# Ridge added to collapsed Jacobians before inversion.
INVERSION_RIDGE = 1e-3


def make_grid(h: int, w: int, *, dtype: torch.dtype = torch.float64,
              device: torch.device | None = None) -> Tensor:
    """Normalized (h, w, 2) grid of cell coordinates, (x, y) in [-1, 1]."""
    ys = torch.linspace(-1.0, 1.0, h, dtype=dtype, device=device)
    xs = torch.linspace(-1.0, 1.0, w, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def soft_argmax(heatmaps: Tensor, *, tol: float = 1e-4) -> Tensor:
    """Expected grid coordinate under each heatmap.

    heatmaps: (..., h, w), each map a probability distribution over the grid.
    Returns (..., 2) coordinates, differentiable in the heatmap values.
    Raises ContractViolation if any map does not sum to 1 within ``tol``.
    """
    h, w = heatmaps.shape[-2:]
    sums = heatmaps.detach().sum(dim=(-2, -1))
    if not torch.allclose(sums, torch.ones_like(sums), atol=tol):
        raise ContractViolation(
            f"soft_argmax expects normalized heatmaps; got mass in "
            f"[{float(sums.min()):.6f}, {float(sums.max()):.6f}]")
    grid = make_grid(h, w, dtype=heatmaps.dtype, device=heatmaps.device)
    return torch.einsum("...hw,hwc->...c", heatmaps, grid)


def jacobian_field(fields: Tensor, heatmaps: Tensor) -> Tensor:
    """Aggregate per-cell 2x2 fields into per-keypoint Jacobians.

    fields: (..., K, 2, 2, h, w) per-cell matrix predictions.
    heatmaps: (..., K, h, w) normalized weights.
    Returns (..., K, 2, 2), the heatmap-weighted sum over the grid.
    """
    return torch.einsum("...ijhw,...hw->...ij", fields, heatmaps)


class JacobianHead(nn.Module):
    """Linear per-cell matrix head aggregated with heatmap weights.

    Initialized to emit the identity matrix everywhere, so an untrained
    head yields J_k = I for any normalized heatmap.
    """

    def __init__(self, in_channels: int, num_keypoints: int):
        super().__init__()
        self.num_keypoints = num_keypoints
        self.proj = nn.Conv2d(in_channels, 4 * num_keypoints, kernel_size=1)
        nn.init.zeros_(self.proj.weight)
        with torch.no_grad():
            self.proj.bias.copy_(
                torch.tensor([1.0, 0.0, 0.0, 1.0]).repeat(num_keypoints))

    def forward(self, featmap: Tensor, heatmaps: Tensor) -> Tensor:
        """(B, C, h, w), (B, K, h, w) -> (B, K, 2, 2)."""
        b, _, h, w = featmap.shape
        fields = self.proj(featmap).view(b, self.num_keypoints, 2, 2, h, w)
        return jacobian_field(fields, heatmaps)


@dataclass
class KeypointState:
    """Per-image keypoints: coordinates plus local 2x2 Jacobians.

    coords: (..., K, 2) in normalized [-1, 1]^2.
    jacobians: (..., K, 2, 2).
    """

    coords: Tensor
    jacobians: Tensor

    @property
    def num_keypoints(self) -> int:
        return self.coords.shape[-2]


@dataclass
class AffineSet:
    """Per-keypoint affine maps from an output grid into a sampled image.

    A point z near ``anchors[k]`` (keypoint in the output-grid image) maps to
    ``offsets[k] + linear[k] @ (z - anchors[k])`` (a point in the sampled
    image). ``degenerate[k]`` marks keypoints whose inverse had to be
    regularized; callers may treat those as unreliable.
    """

    offsets: Tensor     # (..., K, 2)
    linear: Tensor      # (..., K, 2, 2)
    anchors: Tensor     # (..., K, 2)
    degenerate: Tensor  # (..., K) bool

    @classmethod
    def identity(cls, anchors: Tensor) -> "AffineSet":
        """Affines that move nothing: offsets == anchors, linear == I."""
        eye = torch.eye(2, dtype=anchors.dtype, device=anchors.device)
        linear = eye.expand(*anchors.shape[:-1], 2, 2).clone()
        degenerate = torch.zeros(anchors.shape[:-1], dtype=torch.bool,
                                 device=anchors.device)
        return cls(offsets=anchors.clone(), linear=linear,
                   anchors=anchors.clone(), degenerate=degenerate)


def inverse_2x2(m: Tensor) -> Tensor:
    """Closed-form inverse of (..., 2, 2) matrices."""
    a, b = m[..., 0, 0], m[..., 0, 1]
    c, d = m[..., 1, 0], m[..., 1, 1]
    det = a * d - b * c
    adj = torch.stack([torch.stack([d, -b], dim=-1),
                       torch.stack([-c, a], dim=-1)], dim=-2)
    return adj / det[..., None, None]


def compose_affine(ref: KeypointState, tgt: KeypointState) -> AffineSet:
    """First-order affine maps from the ``tgt`` frame into the ``ref`` frame.

    Per keypoint k the linear part is ref.J_k @ inv(tgt.J_k); collapsed
    target Jacobians (|det| < DET_FLOOR) are ridge-regularized before
    inversion and flagged in ``degenerate``.
    """
    if ref.num_keypoints != tgt.num_keypoints:
        raise ContractViolation("keypoint counts differ between frames")
    jt = tgt.jacobians
    det = jt[..., 0, 0] * jt[..., 1, 1] - jt[..., 0, 1] * jt[..., 1, 0]
    degenerate = det.detach().abs() < DET_FLOOR
    eye = torch.eye(2, dtype=jt.dtype, device=jt.device)
    jt_safe = torch.where(degenerate[..., None, None], jt + INVERSION_RIDGE * eye, jt)
    linear = ref.jacobians @ inverse_2x2(jt_safe)
    return AffineSet(offsets=ref.coords, linear=linear,
                     anchors=tgt.coords, degenerate=degenerate)


def dense_flow(tgt_parts: Tensor, affines: AffineSet) -> Tensor:
    """Dense backward flow over the output grid.

    tgt_parts: (..., K+1, h, w) soft part maps of the output-grid image
        (last channel is background) forming a per-pixel simplex.
    affines: per-keypoint maps from the output grid into the sampled image.

    Returns (..., h, w, 2) where field[z] is the coordinate in the sampled
    image for output cell z. Each foreground part contributes its affine
    motion weighted by its map; the background channel contributes identity
    motion. Computed in displacement form so that identity affines produce
    the identity field exactly.
    """
    k = affines.offsets.shape[-2]
    if tgt_parts.shape[-3] != k + 1:
        raise ContractViolation(
            f"expected {k + 1} part channels for {k} keypoints, "
            f"got {tgt_parts.shape[-3]}")
    h, w = tgt_parts.shape[-2:]
    grid = make_grid(h, w, dtype=tgt_parts.dtype, device=tgt_parts.device)
    eye = torch.eye(2, dtype=tgt_parts.dtype, device=tgt_parts.device)
    # offsets + linear @ (z - anchors)  ==  z + shift_k + (linear - I) @ (z - anchors)
    shift = affines.offsets - affines.anchors                       # (..., K, 2)
    rel = grid[..., None, :, :, :] - affines.anchors[..., :, None, None, :]
    disp = shift[..., :, None, None, :] + torch.einsum(
        "...kij,...khwj->...khwi", affines.linear - eye, rel)
    weighted = torch.einsum("...khw,...khwc->...hwc", tgt_parts[..., :k, :, :], disp)
    return grid + weighted


def warp_features(featmap: Tensor, flow: Tensor) -> Tensor:
    """Bilinearly sample ``featmap`` at ``flow`` coordinates.

    featmap: (..., C, h, w); flow: (..., h, w, 2) normalized coordinates.
    Out-of-range coordinates clamp to the border. Differentiable in both
    arguments; identity flow reproduces the input exactly at grid points.
    """
    if featmap.shape[-2:] != flow.shape[-3:-1]:
        raise ContractViolation(
            f"flow grid {tuple(flow.shape[-3:-1])} does not match feature "
            f"grid {tuple(featmap.shape[-2:])}")
    lead = featmap.shape[:-3]
    if flow.shape[:-3] != lead:
        flow = flow.expand(*lead, *flow.shape[-3:])
    c, h, w = featmap.shape[-3:]
    fm = featmap.reshape(-1, c, h, w)
    fl = flow.reshape(-1, h, w, 2)
    out = F.grid_sample(fm, fl, mode="bilinear", padding_mode="border",
                        align_corners=True)
    return out.reshape(*lead, c, h, w)


@dataclass
class TPSConfig:
    """Magnitudes for sampled thin-plate-spline deformations."""

    grid_points: int = 5          # control lattice is grid_points x grid_points
    displacement_std: float = 0.1  # per-control-point shift, normalized units
    rotate_std: float = 0.1        # radians
    scale_std: float = 0.05        # log-scale
    translate_std: float = 0.1
    probe_points: int = 12         # determinant probe resolution per axis
    max_retries: int = 20


@dataclass
class TPSDeformation:
    """A fitted thin-plate-spline map on [-1, 1]^2.

    Maps are exact at any query point and carry an analytic spatial
    Jacobian. ``affine`` is the 2x3 global part [A | t]; ``nonrigid`` holds
    the kernel weights of the control points.
    """

    control_points: Tensor        # (n, 2)
    nonrigid: Tensor              # (n, 2)
    affine: Tensor                # (2, 3)
    _eps: float = field(default=1e-12, repr=False)

    @classmethod
    def identity(cls, *, dtype: torch.dtype = torch.float64) -> "TPSDeformation":
        pts = torch.zeros(1, 2, dtype=dtype)
        aff = torch.cat([torch.eye(2, dtype=dtype),
                         torch.zeros(2, 1, dtype=dtype)], dim=1)
        return cls(control_points=pts, nonrigid=torch.zeros(1, 2, dtype=dtype),
                   affine=aff)

    def _kernel_terms(self, coords: Tensor) -> tuple[Tensor, Tensor]:
        diff = coords[..., None, :] - self.control_points       # (..., n, 2)
        s = (diff * diff).sum(dim=-1)                           # squared radius
        safe = s.clamp_min(self._eps)
        u = torch.where(s > self._eps, safe * torch.log(safe),
                        torch.zeros_like(s))
        return diff, u

    def __call__(self, coords: Tensor) -> Tensor:
        """Map (..., 2) coordinates through the deformation, exactly."""
        diff, u = self._kernel_terms(coords)
        lin = coords @ self.affine[:, :2].T + self.affine[:, 2]
        return lin + u @ self.nonrigid

    def jacobian(self, coords: Tensor) -> Tensor:
        """Analytic spatial Jacobian dT/dp at (..., 2) points, as (..., 2, 2)."""
        diff, _ = self._kernel_terms(coords)
        s = (diff * diff).sum(dim=-1)
        safe = s.clamp_min(self._eps)
        # d/dp [s log s] = 2 (p - c) (log s + 1); vanishes as s -> 0.
        du = torch.where(s[..., None] > self._eps,
                         2.0 * diff * (torch.log(safe)[..., None] + 1.0),
                         torch.zeros_like(diff))                 # (..., n, 2)
        nonrigid_jac = torch.einsum("ni,...nj->...ij", self.nonrigid, du)
        return self.affine[:, :2] + nonrigid_jac


def sample_tps(rng: np.random.Generator, config: TPSConfig | None = None,
               *, dtype: torch.dtype = torch.float64) -> TPSDeformation:
    """Draw a random diffeomorphic TPS on [-1, 1]^2.

    Control-point targets are a sampled global affine of the lattice plus
    i.i.d. Gaussian displacements; the spline is fit exactly through them.
    Samples failing the Jacobian-determinant probe are redrawn; persistent
    failure raises SamplingError.
    """
    cfg = config or TPSConfig()
    g = cfg.grid_points
    axis = np.linspace(-1.0, 1.0, g)
    src = np.stack(np.meshgrid(axis, axis, indexing="ij"), axis=-1).reshape(-1, 2)
    probe_axis = torch.linspace(-1.0, 1.0, cfg.probe_points, dtype=dtype)
    probe = torch.stack(torch.meshgrid(probe_axis, probe_axis, indexing="ij"),
                        dim=-1).reshape(-1, 2)

    for _ in range(cfg.max_retries):
        theta = rng.normal(0.0, cfg.rotate_std) if cfg.rotate_std > 0 else 0.0
        scale = math.exp(rng.normal(0.0, cfg.scale_std)) if cfg.scale_std > 0 else 1.0
        trans = (rng.normal(0.0, cfg.translate_std, size=2)
                 if cfg.translate_std > 0 else np.zeros(2))
        rot = np.array([[math.cos(theta), -math.sin(theta)],
                        [math.sin(theta), math.cos(theta)]])
        disp = (rng.normal(0.0, cfg.displacement_std, size=src.shape)
                if cfg.displacement_std > 0 else np.zeros_like(src))
        dst = src @ (scale * rot).T + trans + disp

        tps = _fit_tps(src, dst, dtype=dtype)
        det = torch.linalg.det(tps.jacobian(probe))
        if bool((det > 0).all()):
            return tps
    raise SamplingError(
        f"no diffeomorphic TPS found in {cfg.max_retries} draws; "
        f"reduce displacement_std ({cfg.displacement_std})")


def _fit_tps(src: np.ndarray, dst: np.ndarray, *, dtype: torch.dtype) -> TPSDeformation:
    """Exact thin-plate-spline interpolation src -> dst (n >= 3 points)."""
    n = src.shape[0]
    d2 = ((src[:, None, :] - src[None, :, :]) ** 2).sum(-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(d2 > 0, d2 * np.log(d2), 0.0)
    p = np.concatenate([np.ones((n, 1)), src], axis=1)
    lhs = np.zeros((n + 3, n + 3))
    lhs[:n, :n] = k
    lhs[:n, n:] = p
    lhs[n:, :n] = p.T
    rhs = np.concatenate([dst, np.zeros((3, 2))], axis=0)
    sol = np.linalg.solve(lhs, rhs)
    nonrigid = sol[:n]
    affine = np.concatenate([sol[n + 1:].T, sol[n:n + 1].T], axis=1)  # [A | t]
    return TPSDeformation(
        control_points=torch.as_tensor(src, dtype=dtype),
        nonrigid=torch.as_tensor(nonrigid, dtype=dtype),
        affine=torch.as_tensor(affine, dtype=dtype))


def apply_deformation(x: Tensor, tps: TPSDeformation) -> Tensor:
    """Apply a deformation to coordinates (exact) or an image (bilinear).

    Arrays with >= 3 dims are treated as images (..., C, H, W) and backward
    warped: out[p] = x(tps(p)), sampled with border padding. Arrays of
    shape (..., 2) with <= 2 dims are treated as coordinates and mapped
    exactly.
    """
    if x.dim() >= 3:
        h, w = x.shape[-2:]
        grid = make_grid(h, w, dtype=x.dtype, device=x.device)
        flow = tps(grid.reshape(-1, 2)).reshape(h, w, 2)
        return warp_features(x, flow)
    return tps(x)
