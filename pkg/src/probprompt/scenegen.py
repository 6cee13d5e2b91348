"""Synthetic scenes with scene-level latent context, plus JSON scene files.

Each RoI feature mixes a category signature with its scene's latent
context: ``feature = A @ onehot(category) + B @ context + noise``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ParseError, SizeError
from .pseudo3d import KITTI_INTRINSICS, CameraIntrinsics, OrientedBox3D, projected_box2d, sample_visible_faces

CATEGORY_NAMES = ("car", "pedestrian", "cyclist")
# template (l, w, h) per category; generated boxes scale these uniformly so
# the width/length ratio matches the stored prior exactly
CATEGORY_DIMS = {
    "car": (4.0, 1.8, 1.6),
    "pedestrian": (0.8, 0.6, 1.75),
    "cyclist": (1.76, 0.6, 1.73),
}
GENERIC_DIMS = (1.0, 0.5, 1.0)
CAMERA_HEIGHT = 1.65


def category_names(n: int) -> list[str]:
    return [CATEGORY_NAMES[i] if i < len(CATEGORY_NAMES) else f"category{i}" for i in range(n)]


def category_dims(name: str) -> tuple[float, float, float]:
    return CATEGORY_DIMS.get(name, GENERIC_DIMS)


def ratio_prior(name: str) -> float:
    length, width, _ = category_dims(name)
    return min(length, width) / max(length, width)


@dataclass
class RoI:
    roi_id: str
    category: str
    box2d: tuple[float, float, float, float]
    feature: np.ndarray
    box3d: np.ndarray | None = None
    points: np.ndarray | None = None

    def __post_init__(self):
        x0, y0, x1, y1 = self.box2d
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"RoI {self.roi_id}: degenerate box2d {self.box2d}")
        if not np.isfinite(self.feature).all():
            raise ValueError(f"RoI {self.roi_id}: non-finite feature")


@dataclass
class Scene:
    scene_id: str
    context: np.ndarray
    rois: list[RoI]
    intrinsics: CameraIntrinsics | None = None

    def __post_init__(self):
        if not self.rois:
            raise ValueError(f"scene {self.scene_id} has no RoIs")

    def context_feature(self) -> np.ndarray:
        """Mean RoI feature, the visual scene-context signal."""
        return np.mean([r.feature for r in self.rois], axis=0)


@dataclass
class SceneSet:
    dim_v: int
    dim_c: int
    ratio_priors: dict[str, float]
    scenes: list[Scene] = field(default_factory=list)

    def __len__(self):
        return len(self.scenes)

    @property
    def categories(self) -> list[str]:
        return list(self.ratio_priors)

    @property
    def n_rois(self) -> int:
        return sum(len(s.rois) for s in self.scenes)


def generate_dataset(
    n_scenes: int,
    rois_per_scene: int,
    n_categories: int,
    noise_scale: float,
    seed: int,
    dim_v: int = 32,
    dim_c: int = 8,
    with_3d: bool = True,
    points_per_roi: int = 24,
) -> SceneSet:
    if min(n_scenes, rois_per_scene, n_categories, dim_v, dim_c) < 1:
        raise SizeError("all counts and dimensions must be >= 1")
    if noise_scale < 0:
        raise SizeError("noise_scale must be >= 0")
    rng = np.random.default_rng(seed)
    names = category_names(n_categories)
    mix_category = rng.standard_normal((dim_v, n_categories))
    mix_context = rng.standard_normal((dim_v, dim_c)) / np.sqrt(dim_c)
    scenes = []
    for s in range(n_scenes):
        context = rng.standard_normal(dim_c)
        base = mix_context @ context
        rois = []
        for r in range(rois_per_scene):
            cat = int(rng.integers(n_categories))
            feature = mix_category[:, cat] + base + noise_scale * rng.standard_normal(dim_v)
            box3d = points = None
            if with_3d:
                box = _random_box(names[cat], rng)
                box3d = box.params().numpy()
                points = sample_visible_faces(box, points_per_roi, rng)
                box2d = tuple(float(v) for v in projected_box2d(box, KITTI_INTRINSICS))
            else:
                x0, y0 = rng.uniform(0, 1000), rng.uniform(0, 300)
                box2d = (x0, y0, x0 + rng.uniform(10, 200), y0 + rng.uniform(10, 100))
            rois.append(RoI(f"r{r}", names[cat], box2d, feature, box3d, points))
        scenes.append(Scene(f"s{s:03d}", context, rois, KITTI_INTRINSICS if with_3d else None))
    return SceneSet(dim_v, dim_c, {n: ratio_prior(n) for n in names}, scenes)


def _random_box(category: str, rng: np.random.Generator) -> OrientedBox3D:
    scale = rng.uniform(0.9, 1.1)
    length, width, height = (scale * d for d in category_dims(category))
    x = rng.uniform(2.0, 8.0) * rng.choice([-1.0, 1.0])
    z = rng.uniform(10.0, 40.0)
    yaw = rng.uniform(-np.pi, np.pi)
    return OrientedBox3D((x, CAMERA_HEIGHT - height / 2, z), (length, width, height), yaw)


# ---------------------------------------------------------------------------
# Batches


@dataclass
class Batch:
    selections: list[tuple[int, list[int]]]

    @property
    def rois(self) -> list[tuple[int, int]]:
        return [(s, r) for s, picks in self.selections for r in picks]

    def __len__(self):
        return sum(len(p) for _, p in self.selections)


def _pick_rois(scenes, scene_indices, rois_per_scene, rng) -> Batch:
    selections = []
    for s in scene_indices:
        n = len(scenes[s].rois)
        picks = rng.choice(n, size=min(rois_per_scene, n), replace=False)
        selections.append((int(s), [int(i) for i in picks]))
    return Batch(selections)


def sample_batch(scenes, batch_scenes: int, rois_per_scene: int, rng: np.random.Generator) -> Batch:
    """Draw ``batch_scenes`` distinct scenes and up to ``rois_per_scene`` RoIs from each."""
    if batch_scenes > len(scenes):
        raise SizeError(f"batch of {batch_scenes} scenes requested from {len(scenes)}")
    picked = rng.choice(len(scenes), size=batch_scenes, replace=False)
    return _pick_rois(scenes, picked, rois_per_scene, rng)


def epoch_batches(scenes, batch_scenes: int, rois_per_scene: int, rng: np.random.Generator) -> list[Batch]:
    """One pass over all scenes in shuffled chunks of ``batch_scenes``."""
    order = rng.permutation(len(scenes))
    return [
        _pick_rois(scenes, order[i : i + batch_scenes], rois_per_scene, rng)
        for i in range(0, len(order), batch_scenes)
    ]


# ---------------------------------------------------------------------------
# Scene file


def _floats(xs) -> list[float]:
    return [float(x) for x in np.asarray(xs, dtype=np.float64).reshape(-1)]


def sceneset_to_dict(data: SceneSet) -> dict:
    scenes = []
    for scene in data.scenes:
        rois = []
        for roi in scene.rois:
            entry = {
                "id": roi.roi_id,
                "category": roi.category,
                "box2d": _floats(roi.box2d),
                "feature": _floats(roi.feature),
            }
            if roi.box3d is not None:
                entry["box3d"] = _floats(roi.box3d)
            if roi.points is not None:
                entry["points"] = [_floats(p) for p in roi.points]
            rois.append(entry)
        item = {"id": scene.scene_id, "context": _floats(scene.context), "rois": rois}
        if scene.intrinsics is not None:
            k = scene.intrinsics
            item["intrinsics"] = {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy}
        scenes.append(item)
    return {"dim_v": data.dim_v, "dim_c": data.dim_c, "ratio_priors": dict(data.ratio_priors), "scenes": scenes}


def dumps_sceneset(data: SceneSet) -> str:
    return json.dumps(sceneset_to_dict(data), indent=1) + "\n"


def save_scene_file(data: SceneSet, path) -> str:
    """Write the scene file and return its SHA-256 digest."""
    text = dumps_sceneset(data)
    Path(path).write_text(text, encoding="utf-8")
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"missing required field in {where}", field=key)
    return obj[key]


def _vector(value, n: int | None, where: str, key: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise ParseError(f"non-numeric vector in {where}", field=key) from None
    if arr.ndim != 1 or (n is not None and arr.shape[0] != n):
        raise ParseError(f"expected {n} values in {where}", field=key)
    if not np.isfinite(arr).all():
        raise ParseError(f"non-finite values in {where}", field=key)
    return arr


def sceneset_from_dict(doc: dict) -> SceneSet:
    dim_v = int(_require(doc, "dim_v", "header"))
    dim_c = int(_require(doc, "dim_c", "header"))
    priors = {str(k): float(v) for k, v in _require(doc, "ratio_priors", "header").items()}
    scenes = []
    seen = set()
    for si, raw in enumerate(_require(doc, "scenes", "header")):
        where = f"scenes[{si}]"
        sid = str(_require(raw, "id", where))
        if sid in seen:
            raise ParseError(f"duplicate scene id {sid!r}", field="id")
        seen.add(sid)
        context = _vector(_require(raw, "context", where), dim_c, where, "context")
        rois = []
        for ri, rr in enumerate(_require(raw, "rois", where)):
            rwhere = f"{where}.rois[{ri}]"
            box3d = points = None
            if "box3d" in rr:
                box3d = _vector(rr["box3d"], 7, rwhere, "box3d")
            if "points" in rr:
                points = np.asarray(rr["points"], dtype=np.float64)
                if points.ndim != 2 or points.shape[1] != 3:
                    raise ParseError(f"points must be Mx3 in {rwhere}", field="points")
            try:
                rois.append(
                    RoI(
                        str(_require(rr, "id", rwhere)),
                        str(_require(rr, "category", rwhere)),
                        tuple(_vector(_require(rr, "box2d", rwhere), 4, rwhere, "box2d")),
                        _vector(_require(rr, "feature", rwhere), dim_v, rwhere, "feature"),
                        box3d,
                        points,
                    )
                )
            except ValueError as exc:
                if isinstance(exc, ParseError):
                    raise
                raise ParseError(str(exc), field="box2d") from None
        intr = None
        if "intrinsics" in raw:
            k = raw["intrinsics"]
            intr = CameraIntrinsics(*(float(_require(k, f, f"{where}.intrinsics")) for f in ("fx", "fy", "cx", "cy")))
        if not rois:
            raise ParseError(f"scene {sid!r} has no RoIs", field="rois")
        scenes.append(Scene(sid, context, rois, intr))
    return SceneSet(dim_v, dim_c, priors, scenes)


def load_scene_file(path) -> SceneSet:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from None
    return sceneset_from_dict(doc)


def digest(data: SceneSet) -> str:
    return hashlib.sha256(dumps_sceneset(data).encode("utf-8")).hexdigest()


def scene_tensors(data: SceneSet, batch: Batch):
    """Features, scene-context features and category names for a batch."""
    feats, ctx, cats = [], [], []
    for s, picks in batch.selections:
        scene = data.scenes[s]
        c = scene.context_feature()
        for r in picks:
            feats.append(scene.rois[r].feature)
            ctx.append(c)
            cats.append(scene.rois[r].category)
    return torch.as_tensor(np.array(feats)), torch.as_tensor(np.array(ctx)), cats
