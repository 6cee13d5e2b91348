"""Command-line driver.

Exit codes: 0 success, 1 check or runtime failure, 2 usage or validation error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .encoders import load_embedding_file, save_embedding_file
from .errors import (
    ClusterCountError,
    ConfigError,
    DegenerateError,
    EmbeddingKeyError,
    ParseError,
    ProbPromptError,
    SizeError,
)
from .latentmetrics import (
    LabeledEmbeddings,
    calinski_harabasz,
    centroid_distances,
    pca_project,
    silhouette,
    write_distance_csv,
    write_metric_csv,
    write_scatter_csv,
)
from .scenegen import load_scene_file, save_scene_file

log = logging.getLogger("probprompt")

USAGE_ERRORS = (ConfigError, ParseError, SizeError, ClusterCountError, EmbeddingKeyError, KeyError, FileNotFoundError)


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "scenes", None):
        cfg = replace(cfg, scene_file=str(args.scenes))
    return cfg.validate()


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    from .training import make_dataset

    cfg = replace(load_config(args), scene_file=None)
    data = make_dataset(cfg)
    out = _out(args)
    cfg.save(out / "config.json")
    digest = save_scene_file(data, out / "scenes.json")
    entries = [(f"{s.scene_id}/{r.roi_id}", r.feature) for s in data.scenes for r in s.rois]
    save_embedding_file(out / "features.emb", entries, dim=data.dim_v)
    print(digest)
    return 0


def cmd_train_stage1(args) -> int:
    from .training import make_dataset, train_stage1

    cfg = load_config(args)
    result = train_stage1(cfg, make_dataset(cfg), _out(args))
    if result.losses:
        first, last = result.losses[0][6], result.losses[-1][6]
        print(f"steps {len(result.losses)}  l_stage1 {first:.6g} -> {last:.6g}")
    else:
        print("steps 0")
    return 0


def cmd_train_stage2(args) -> int:
    from .training import make_dataset, teacher_embeddings, train_stage2

    cfg = load_config(args)
    stage1 = Path(args.stage1)
    teacher_cfg = RunConfig.load(stage1 / "config.json") if (stage1 / "config.json").exists() else cfg
    data = make_dataset(cfg)
    teacher = teacher_embeddings(teacher_cfg, data, stage1)
    result = train_stage2(cfg, data, teacher, _out(args))
    if result.losses:
        first, last = result.losses[0], result.losses[-1]
        print(f"steps {len(result.losses)}  l_mse {first[2]:.6g} -> {last[2]:.6g}  l_3d {first[3]:.6g} -> {last[3]:.6g}")
    return 0


def scene_labels(keys, known_scenes=None) -> list[str]:
    labels = []
    for key in keys:
        if key.count("/") != 1 or not all(key.split("/")):
            raise EmbeddingKeyError(f"embedding key {key!r} is not '<scene_id>/<roi_id>'")
        scene = key.split("/")[0]
        if known_scenes is not None and scene not in known_scenes:
            raise EmbeddingKeyError(f"embedding key {key!r} names an unknown scene")
        labels.append(scene)
    return labels


def evaluate_dump(path, out: Path, known_scenes=None) -> tuple[str, float | None, float]:
    """Metrics for one embedding dump; writes its scatter and distance CSVs."""
    keys, X = load_embedding_file(path)
    labels = scene_labels(keys, known_scenes)
    data = LabeledEmbeddings(X, np.array(labels))
    if data.k < 2:
        raise ClusterCountError(f"{path}: scene metrics need >= 2 scenes, found {data.k}")
    s_mean, _ = silhouette(data)
    try:
        ch = calinski_harabasz(data)
    except DegenerateError:
        ch = None
    stem = Path(path).name.removesuffix(".emb")
    write_scatter_csv(out / f"scatter_{stem}.csv", labels, pca_project(X, min(2, X.shape[0] - 1, X.shape[1])).coords)
    write_distance_csv(out / f"distances_{stem}.csv", [str(g) for g in data.groups], centroid_distances(data))
    return stem, ch, s_mean


def cmd_eval(args) -> int:
    out = _out(args)
    known = None
    if args.scenes:
        known = {s.scene_id for s in load_scene_file(args.scenes).scenes}
    rows = [evaluate_dump(p, out, known) for p in args.embeddings]
    write_metric_csv(out / "metrics.csv", rows)
    for label, ch, s in rows:
        print(f"{label}: ch {'degenerate' if ch is None else f'{ch:.6g}'}  silhouette {s:.6g}")
    return 0


def cmd_ablate(args) -> int:
    from .training import make_dataset, run_ablation

    cfg = load_config(args)
    out = _out(args)
    cfg.save(out / "config.json")
    results = run_ablation(cfg, make_dataset(cfg), out)
    bad = [r for r in results if not r["finite"]]
    print(f"{len(results)} cells, {len(bad)} non-finite")
    return 1 if bad else 0


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    cfg = load_config(args)
    results = run_selfcheck(cfg, tol=args.tol, quick=args.quick)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("selfcheck " + ("passed" if ok else "FAILED"))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="probprompt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", type=Path, help="RunConfig JSON")
        p.add_argument("--seed", type=int, help="override the config seed")
        if out:
            p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate the synthetic scene file")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-stage1", help="prompt learning and object-level alignment")
    common(p)
    p.add_argument("--scenes", type=Path, help="scene file (default: generate from the config)")
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="distil stage-1 embeddings into a student with pseudo-3D losses")
    common(p)
    p.add_argument("--stage1", type=Path, required=True, help="stage-1 output directory")
    p.add_argument("--scenes", type=Path)
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("eval", help="latent-space metrics for embedding dumps")
    p.add_argument("--embeddings", type=Path, nargs="+", required=True)
    p.add_argument("--scenes", type=Path, help="scene file used to validate keys")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the 24-cell ablation grid")
    common(p)
    p.add_argument("--scenes", type=Path)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("selfcheck", help="gradient, KL, geometry and metric oracles")
    common(p, out=False)
    p.add_argument("--tol", type=float, default=1e-4, help="relative tolerance for gradient checks")
    p.add_argument("--quick", action="store_true", help="smaller Monte Carlo and oracle sample counts")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ProbPromptError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
