"""Training loops, embedding dumps and the ablation harness."""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .encoders import save_embedding_file
from .errors import ConfigError
from .latentmetrics import LabeledEmbeddings, calinski_harabasz, silhouette
from .mgpm import FUSION_STRATEGIES, IMAGE_TEXT_FUSIONS
from .model import Stage1Model, Stage2Model, load_checkpoint, save_checkpoint
from .numerics import DTYPE, AdamWState, adamw_step, check_finite, make_generator, zero_grads
from .objective import distill_mse, stage2_loss
from .pseudo3d import KITTI_INTRINSICS, GGAWeights, gga_bpl, gga_pal, gga_srl, gga_total, weakm3d_losses
from .scenegen import Batch, SceneSet, category_dims, epoch_batches, generate_dataset, load_scene_file, scene_tensors

log = logging.getLogger(__name__)

STAGE1_HEADER = ["step", "epoch", "l_contrast", "l_div", "kl", "l_prompt", "l_stage1", "tau"]
STAGE2_HEADER = ["step", "epoch", "l_mse", "l_3d", "l_stage2"]


def _g(x) -> str:
    return format(float(x), ".9g")


def write_loss_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([row[0], row[1]] + [_g(v) for v in row[2:]])


def full_batch(data: SceneSet) -> Batch:
    return Batch([(s, list(range(len(scene.rois)))) for s, scene in enumerate(data.scenes)])


def roi_keys(data: SceneSet, batch: Batch) -> list[str]:
    return [f"{data.scenes[s].scene_id}/{data.scenes[s].rois[r].roi_id}" for s, r in batch.rois]


def _adamw(params, cfg: RunConfig, lr: float) -> AdamWState:
    return AdamWState.create(params, lr=lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps, weight_decay=cfg.weight_decay)


@dataclass
class Stage1Result:
    model: Stage1Model
    losses: list[list]
    image_init: np.ndarray
    text_init: np.ndarray
    image_final: np.ndarray
    text_final: np.ndarray
    keys: list[str]
    labels: list[str]


def embed_all(model: Stage1Model, data: SceneSet) -> tuple[np.ndarray, np.ndarray]:
    """Image and text embeddings for every RoI, with fixed prompt subsets and no noise."""
    batch = full_batch(data)
    feats, ctx, cats = scene_tensors(data, batch)
    rng = np.random.default_rng(model.cfg.seed + 1000)
    draws = model.draw(len(cats), rng, make_generator(0), sampling=False)
    with torch.no_grad():
        img = model.image_embeddings(feats)
        txt = model.eval_text_embeddings(feats, ctx, cats, draws.subset)
    return img.numpy(), txt.numpy()


def train_stage1(cfg: RunConfig, data: SceneSet, out_dir=None) -> Stage1Result:
    cfg.validate()
    model = Stage1Model(cfg, data.categories)
    params = dict(model.named_parameters())
    state = _adamw(params, cfg, cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    gen = make_generator(cfg.seed + 17)
    keys = roi_keys(data, full_batch(data))
    labels = [k.split("/")[0] for k in keys]
    image_init, text_init = embed_all(model, data)

    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        for batch in epoch_batches(data.scenes, cfg.batch_scenes, cfg.rois_per_scene, rng):
            feats, ctx, cats = scene_tensors(data, batch)
            if len(cats) < 2:
                continue
            draws = model.draw(len(cats), rng, gen)
            out = model(feats, ctx, cats, draws)
            out.check_finite()
            zero_grads(params.values())
            out.l_stage1.backward()
            for name, p in params.items():
                if p.grad is not None:
                    check_finite(f"grad of {name}", p.grad)
            adamw_step(params, state)
            rows.append([step, epoch, out.l_contrast.item(), out.l_div.item(), out.kl_mean.item(),
                         out.l_prompt.item(), out.l_stage1.item(), model.temperature.tau])
            step += 1
        if rows:
            log.info("epoch %d  l_stage1 %.6g  tau %.4g", epoch, rows[-1][6], model.temperature.tau)

    image_final, text_final = embed_all(model, data)
    result = Stage1Result(model, rows, image_init, text_init, image_final, text_final, keys, labels)
    if out_dir is not None:
        write_stage1_outputs(result, cfg, Path(out_dir))
    return result


def write_stage1_outputs(result: Stage1Result, cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    write_loss_csv(out / "loss_stage1.csv", STAGE1_HEADER, result.losses)
    save_checkpoint(result.model, out / "checkpoint")
    save_embedding_file(out / "image_init.emb", list(zip(result.keys, result.image_init)), dim=cfg.dim)
    save_embedding_file(out / "text_init.emb", list(zip(result.keys, result.text_init)), dim=cfg.dim)
    if cfg.epochs > 0:
        save_embedding_file(out / "image_final.emb", list(zip(result.keys, result.image_final)), dim=cfg.dim)
        save_embedding_file(out / "text_final.emb", list(zip(result.keys, result.text_final)), dim=cfg.dim)


def scene_metrics(X: np.ndarray, labels) -> tuple[float, float]:
    data = LabeledEmbeddings(X, np.asarray(labels))
    return calinski_harabasz(data), silhouette(data)[0]


# ---------------------------------------------------------------------------
# Stage 2


@dataclass
class Stage2Result:
    model: Stage2Model
    losses: list[list]


def _anchors(data: SceneSet, batch: Batch, mode: str) -> torch.Tensor:
    rows = []
    for s, r in batch.rois:
        roi = data.scenes[s].rois[r]
        if mode == "gt":
            rows.append(np.asarray(roi.box3d, dtype=np.float64))
        else:
            centroid = roi.points.mean(axis=0)
            rows.append(np.array([*centroid, *category_dims(roi.category), 0.0]))
    return torch.as_tensor(np.array(rows), dtype=DTYPE)


def pseudo3d_loss(cfg: RunConfig, data: SceneSet, batch: Batch, boxes: torch.Tensor) -> torch.Tensor:
    """Mean per-RoI pseudo-label loss for predicted ``boxes`` (N, 7)."""
    weights = GGAWeights(*cfg.gga_lambdas)
    terms = []
    for i, (s, r) in enumerate(batch.rois):
        scene = data.scenes[s]
        roi = scene.rois[r]
        pts = torch.as_tensor(roi.points, dtype=DTYPE)
        if cfg.pseudo3d_loss == "weakm3d":
            terms.append(weakm3d_losses(pts, boxes[i], lambda_center=cfg.lambda_center, radius=cfg.density_radius).total)
        else:
            intr = scene.intrinsics or KITTI_INTRINSICS
            bpl = gga_bpl(boxes[i], intr, roi.box2d)
            srl = gga_srl(boxes[i], data.ratio_priors[roi.category])
            pal1, pal2 = gga_pal(pts, boxes[i])
            terms.append(gga_total(bpl, srl, pal1, pal2, weights))
    return torch.stack(terms).mean()


def teacher_embeddings(cfg: RunConfig, data: SceneSet, stage1_dir) -> dict[str, torch.Tensor]:
    stage1_dir = Path(stage1_dir)
    teacher = Stage1Model(cfg, data.categories)
    load_checkpoint(teacher, stage1_dir / "checkpoint" if (stage1_dir / "checkpoint").exists() else stage1_dir)
    batch = full_batch(data)
    feats, _, _ = scene_tensors(data, batch)
    with torch.no_grad():
        emb = teacher.image_embeddings(feats)
    return dict(zip(roi_keys(data, batch), emb))


def train_stage2(cfg: RunConfig, data: SceneSet, teacher: dict[str, torch.Tensor], out_dir=None) -> Stage2Result:
    cfg.validate()
    if cfg.lam > 0:
        for scene in data.scenes:
            for roi in scene.rois:
                if roi.points is None or (cfg.pseudo3d_loss == "gga" or cfg.box_init == "gt") and roi.box3d is None:
                    raise ConfigError(f"RoI {scene.scene_id}/{roi.roi_id} lacks the 3D data stage 2 needs")
    model = Stage2Model(cfg)
    params = dict(model.named_parameters())
    state = _adamw(params, cfg, cfg.stage2_lr)
    rng = np.random.default_rng(cfg.seed + 2)
    rows = []
    step = 0
    for epoch in range(cfg.stage2_epochs):
        for batch in epoch_batches(data.scenes, cfg.batch_scenes, cfg.rois_per_scene, rng):
            feats, _, _ = scene_tensors(data, batch)
            target = torch.stack([teacher[k] for k in roi_keys(data, batch)])
            student = model(feats)
            l_mse = distill_mse(student, target)
            if cfg.lam > 0:
                boxes = model.boxes(student, _anchors(data, batch, cfg.box_init))
                l_3d = pseudo3d_loss(cfg, data, batch, boxes)
            else:
                l_3d = torch.zeros((), dtype=DTYPE)
            total = stage2_loss(l_mse, l_3d, cfg.lam)
            check_finite("l_stage2", total)
            zero_grads(params.values())
            total.backward()
            adamw_step(params, state)
            rows.append([step, epoch, l_mse.item(), l_3d.item(), total.item()])
            step += 1
    result = Stage2Result(model, rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
        write_loss_csv(out / "loss_stage2.csv", STAGE2_HEADER, rows)
        save_checkpoint(model, out / "checkpoint")
    return result


# ---------------------------------------------------------------------------
# Ablation grid


ABLATION_HEADER = ["fusion", "image_text_fusion", "gaussian_sampling", "first_l_stage1", "final_l_stage1", "ch", "silhouette", "finite"]


def ablation_cells():
    return list(itertools.product(FUSION_STRATEGIES, IMAGE_TEXT_FUSIONS, (True, False)))


def run_ablation(cfg: RunConfig, data: SceneSet, out_dir=None) -> list[dict]:
    results = []
    out = Path(out_dir) if out_dir is not None else None
    for fusion, itf, sampling in ablation_cells():
        cell = replace(cfg, fusion=fusion, image_text_fusion=itf, gaussian_sampling=sampling)
        name = f"{fusion}-{itf}-{'gs' if sampling else 'nogs'}"
        res = train_stage1(cell, data, out / name if out is not None else None)
        losses = np.array([r[2:] for r in res.losses]) if res.losses else np.zeros((0, 6))
        finite = bool(np.isfinite(losses).all() and np.isfinite(res.image_final).all())
        ch, sil = scene_metrics(res.image_final, res.labels)
        results.append({
            "fusion": fusion,
            "image_text_fusion": itf,
            "gaussian_sampling": sampling,
            "first_l_stage1": res.losses[0][6] if res.losses else float("nan"),
            "final_l_stage1": res.losses[-1][6] if res.losses else float("nan"),
            "ch": ch,
            "silhouette": sil,
            "finite": finite,
            "losses": res.losses,
        })
        log.info("ablation %s done", name)
    if out is not None:
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ABLATION_HEADER)
            for r in results:
                w.writerow([r["fusion"], r["image_text_fusion"], int(r["gaussian_sampling"]), _g(r["first_l_stage1"]),
                            _g(r["final_l_stage1"]), _g(r["ch"]), _g(r["silhouette"]), int(r["finite"])])
    return results


def make_dataset(cfg: RunConfig) -> SceneSet:
    """Load ``cfg.scene_file`` when set, otherwise generate from the config."""
    if cfg.scene_file:
        return load_scene_file(cfg.scene_file)
    cfg.validate()
    return generate_dataset(cfg.n_scenes, cfg.rois_per_scene_gen, cfg.n_categories, cfg.noise_scale, cfg.seed,
                            cfg.dim_v, cfg.dim_c, cfg.with_3d, cfg.points_per_roi)
