"""Geometric pseudo-label losses for weakly supervised 3D boxes.

Coordinates follow the camera frame: x right, y down, z forward. A box's
local frame has x along its length, y along its height and z along its
width; yaw rotates about the vertical (y) axis. Boxes are handled as a
7-parameter tensor ``(x, y, z, l, w, h, yaw)`` so every loss stays
differentiable with respect to the prediction.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .errors import EmptyInputError, GeometryError, ParseError
from .numerics import DTYPE

# car-analogue frozen dimensions (l, w, h)
CAR_DIMS = (4.0, 1.8, 1.6)
DENSITY_RADIUS = 0.4


@dataclass
class OrientedBox3D:
    center: tuple[float, float, float]
    dims: tuple[float, float, float]  # l, w, h
    yaw: float

    def __post_init__(self):
        if min(self.dims) <= 0:
            raise GeometryError(f"box dimensions must be positive, got {self.dims}")
        if not -math.pi < self.yaw <= math.pi:
            raise GeometryError(f"yaw {self.yaw} outside (-pi, pi]")

    @classmethod
    def from_params(cls, params) -> "OrientedBox3D":
        p = [float(v) for v in params]
        return cls(tuple(p[0:3]), tuple(p[3:6]), p[6])

    def params(self) -> Tensor:
        return torch.tensor([*self.center, *self.dims, self.yaw], dtype=DTYPE)


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")


KITTI_INTRINSICS = CameraIntrinsics(721.5377, 721.5377, 609.5593, 172.854)


@dataclass
class GGAWeights:
    bpl: float = 0.3
    srl: float = 0.1
    pal: float = 0.1
    score: float = 5.0  # kept for completeness; no score term is computed here


def _as_params(box) -> Tensor:
    if isinstance(box, OrientedBox3D):
        return box.params()
    return torch.as_tensor(box, dtype=DTYPE)


def _rotation(yaw: Tensor) -> Tensor:
    """Local-to-camera rotation about the y axis, shape ``(..., 3, 3)``."""
    c, s = torch.cos(yaw), torch.sin(yaw)
    zero, one = torch.zeros_like(c), torch.ones_like(c)
    rows = [
        torch.stack([c, zero, s], dim=-1),
        torch.stack([zero, one, zero], dim=-1),
        torch.stack([-s, zero, c], dim=-1),
    ]
    return torch.stack(rows, dim=-2)


def _half_extents(params: Tensor) -> Tensor:
    # local axes: x <- length, y <- height, z <- width
    return torch.stack([params[..., 3], params[..., 5], params[..., 4]], dim=-1) / 2


def to_local(points: Tensor, params: Tensor) -> Tensor:
    """Camera-frame points into the box frame; ``points`` is ``(..., 3)``."""
    rot = _rotation(params[..., 6])
    return ((points - params[..., 0:3]).unsqueeze(-2) @ rot).squeeze(-2)


def to_world(local: Tensor, params: Tensor) -> Tensor:
    rot = _rotation(params[..., 6])
    return (rot @ local.unsqueeze(-1)).squeeze(-1) + params[..., 0:3]


def box_corners(box) -> Tensor:
    params = _as_params(box)
    half = _half_extents(params)
    signs = torch.tensor(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=DTYPE
    )
    return to_world(signs * half.unsqueeze(-2), params.unsqueeze(-2))


def inside_function(points: Tensor, box) -> Tensor:
    """max_a(|x_a| / half_a) - 1 in the box frame: negative inside, 0 on the surface."""
    params = _as_params(box)
    local = to_local(points, params)
    return (local.abs() / _half_extents(params)).amax(dim=-1) - 1.0


def _ray_hits(origin: Tensor, direction: Tensor, params: Tensor) -> tuple[Tensor, Tensor]:
    """Slab test in the box frame. Returns ray parameter ``t`` and hit mask."""
    o = to_local(origin, params)
    rot = _rotation(params[..., 6])
    d = (direction.unsqueeze(-2) @ rot).squeeze(-2)
    half = _half_extents(params)
    nonzero = d != 0
    safe_d = torch.where(nonzero, d, torch.ones_like(d))
    t1 = (-half - o) / safe_d
    t2 = (half - o) / safe_d
    inside_slab = o.abs() <= half
    inf = torch.full_like(t1, math.inf)
    lo = torch.where(nonzero, torch.minimum(t1, t2), torch.where(inside_slab, -inf, inf))
    hi = torch.where(nonzero, torch.maximum(t1, t2), torch.where(inside_slab, inf, -inf))
    t_near = lo.amax(dim=-1)
    t_far = hi.amin(dim=-1)
    hit = (t_near <= t_far) & (t_far >= 0)
    t = torch.where(t_near >= 0, t_near, t_far)
    t = torch.where(hit, t, torch.zeros_like(t))
    return t, hit


def ray_box_intersect(origin, target, box) -> Tensor | None:
    """First surface point on the ray from ``origin`` through ``target``.

    When ``origin`` lies inside the box this is the exit point. Returns
    ``None`` for a miss.
    """
    origin = torch.as_tensor(origin, dtype=DTYPE)
    target = torch.as_tensor(target, dtype=DTYPE)
    direction = target - origin
    if not torch.any(direction != 0):
        raise GeometryError("degenerate ray: origin equals target")
    t, hit = _ray_hits(origin, direction, _as_params(box))
    if not bool(hit):
        return None
    return origin + t * direction


def density_weights(points, radius: float = DENSITY_RADIUS) -> Tensor:
    """Neighbour count within ``radius`` for each point (self excluded)."""
    pts = torch.as_tensor(points, dtype=DTYPE)
    dist = torch.cdist(pts, pts)
    close = dist < radius
    close.fill_diagonal_(False)
    return close.sum(dim=1)


@dataclass
class WeakM3DLosses:
    geo: Tensor
    ray: Tensor
    center: Tensor
    total: Tensor


def weakm3d_losses(points, box, weights=None, lambda_center: float = 1.0, radius: float = DENSITY_RADIUS) -> WeakM3DLosses:
    """Geometric alignment, ray tracing and centre terms, density balanced.

    The centre term is the L1 distance between the bird's-eye-view point
    centroid and the box centre. Isolated points (zero neighbours) get
    weight 1.
    """
    pts = torch.as_tensor(points, dtype=DTYPE)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise EmptyInputError("weakm3d_losses needs at least one point")
    params = _as_params(box)
    if weights is None:
        weights = density_weights(pts.detach(), radius)
    w = torch.clamp(torch.as_tensor(weights, dtype=DTYPE), min=1.0)

    center = params[0:3].expand_as(pts)
    to_point = pts - center
    degenerate = (to_point == 0).all(dim=-1)
    safe_dir = torch.where(degenerate.unsqueeze(-1), torch.ones_like(to_point), to_point)
    t_geo, hit_geo = _ray_hits(center, safe_dir, params.expand(pts.shape[0], 7))
    geo_point = center + t_geo.unsqueeze(-1) * safe_dir
    geo = torch.where(hit_geo & ~degenerate, (pts - geo_point).abs().sum(-1), torch.zeros_like(t_geo))

    cam = torch.zeros_like(pts)
    t_ray, hit_ray = _ray_hits(cam, pts, params.expand(pts.shape[0], 7))
    ray_point = t_ray.unsqueeze(-1) * pts
    ray = torch.where(hit_ray, (pts - ray_point).abs().sum(-1), torch.zeros_like(t_ray))

    centroid = pts.mean(dim=0)
    center_term = (centroid[0] - params[0]).abs() + (centroid[2] - params[2]).abs()
    total = ((geo + ray + lambda_center * center_term) / w).mean()
    return WeakM3DLosses(geo, ray, center_term, total)


def project_points(points: Tensor, intrinsics: CameraIntrinsics) -> Tensor:
    if torch.any(points[..., 2] <= 0):
        raise GeometryError("point behind the camera (z <= 0)")
    u = intrinsics.fx * points[..., 0] / points[..., 2] + intrinsics.cx
    v = intrinsics.fy * points[..., 1] / points[..., 2] + intrinsics.cy
    return torch.stack([u, v], dim=-1)


def projected_box2d(box, intrinsics: CameraIntrinsics) -> Tensor:
    """Enclosing rectangle ``(u_min, v_min, u_max, v_max)`` of the projected corners."""
    uv = project_points(box_corners(box), intrinsics)
    return torch.cat([uv.amin(dim=-2), uv.amax(dim=-2)], dim=-1)


def gga_bpl(box, intrinsics: CameraIntrinsics, gt2d) -> Tensor:
    pred = projected_box2d(box, intrinsics)
    return (pred - torch.as_tensor(gt2d, dtype=DTYPE)).abs().sum(-1)


def gga_srl(box, r_prior: float) -> Tensor:
    params = _as_params(box)
    length, width = params[..., 3], params[..., 4]
    if torch.any(length <= 0) or torch.any(width <= 0):
        raise GeometryError("length and width must be positive")
    ratio = torch.minimum(length, width) / torch.maximum(length, width)
    return (ratio - r_prior).abs()


def edge_distances(points, box) -> Tensor:
    """Bird's-eye-view distances from each point to the four box edges.

    Columns are the two length-normal edges then the two width-normal edges,
    so a point at the centre gets ``(l/2, l/2, w/2, w/2)``.
    """
    params = _as_params(box)
    local = to_local(torch.as_tensor(points, dtype=DTYPE), params)
    u, v = local[..., 0], local[..., 2]
    hl, hw = params[..., 3] / 2, params[..., 4] / 2
    return torch.stack([(u + hl).abs(), (u - hl).abs(), (v + hw).abs(), (v - hw).abs()], dim=-1)


def gga_pal(points, box) -> tuple[Tensor, Tensor]:
    """Points-to-box alignment terms ``(PAL1, PAL2)`` summed over points.

    PAL1 hinges on how far a point lies beyond the half-extent along each
    box axis, which is zero for every point inside the footprint. PAL2 pulls
    each point to its nearest edge.
    """
    pts = torch.as_tensor(points, dtype=DTYPE)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise EmptyInputError("gga_pal needs at least one point")
    params = _as_params(box)
    local = to_local(pts, params)
    hl, hw = params[3] / 2, params[4] / 2
    pal1 = (torch.relu(local[:, 0].abs() - hl) + torch.relu(local[:, 2].abs() - hw)).sum()
    pal2 = edge_distances(pts, params).amin(dim=-1).sum()
    return pal1, pal2


def gga_total(bpl, srl, pal1, pal2, weights: GGAWeights = GGAWeights()) -> Tensor:
    return weights.bpl * bpl + weights.srl * srl + weights.pal * (pal1 + pal2)


def sample_visible_faces(box: OrientedBox3D, n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Sample points on the (up to) two vertical faces that face the camera."""
    params = box.params()
    half = _half_extents(params).numpy()
    rot = _rotation(params[6]).numpy()
    center = np.asarray(box.center, dtype=np.float64)
    faces = []
    for axis in (0, 2):
        for sign in (-1.0, 1.0):
            normal_local = np.zeros(3)
            normal_local[axis] = sign
            normal = rot @ normal_local
            face_center = center + rot @ (normal_local * half)
            facing = float(normal @ (-face_center))
            if facing > 0:
                faces.append((facing / np.linalg.norm(face_center), axis, sign))
    faces.sort(key=lambda f: -f[0])
    faces = faces[:2]
    if not faces:
        raise GeometryError("no vertical face faces the camera")
    out = np.empty((n_points, 3))
    for i in range(n_points):
        _, axis, sign = faces[i % len(faces)]
        local = rng.uniform(-1.0, 1.0, size=3) * half
        local[axis] = sign * half[axis]
        out[i] = rot @ local + center
    return out


def save_geometry_vectors(path, records: list[dict]) -> None:
    """Write oracle records ``{box, ray|points|intrinsics, expected}`` as JSON."""
    def plain(v):
        if isinstance(v, (Tensor, np.ndarray)):
            return v.tolist()
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v

    with open(path, "w") as fh:
        json.dump([plain(r) for r in records], fh, indent=1)


def load_geometry_vectors(path) -> list[dict]:
    with open(path) as fh:
        records = json.load(fh)
    if not isinstance(records, list):
        raise ParseError("geometry vector file must hold a JSON list")
    for i, r in enumerate(records):
        if "box" not in r or "expected" not in r or not ({"ray", "points", "intrinsics"} & r.keys()):
            raise ParseError(f"record {i} needs box, expected and one of ray/points/intrinsics", line=i + 1)
        OrientedBox3D.from_params(r["box"])
    return records
