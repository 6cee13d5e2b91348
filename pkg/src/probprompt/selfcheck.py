"""Self-check suite: finite-difference gradients plus the slow oracles."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import oracles
from .errors import DegenerateError
from .config import RunConfig
from .latentmetrics import LabeledEmbeddings, calinski_harabasz, centroid_distances, silhouette
from .mgpm import FUSION_STRATEGIES, IMAGE_TEXT_FUSIONS, PromptDecoders, PromptFusion, decode_mean, decode_std, fuse_prompts, sample_reparam
from .model import Stage1Model
from .scenegen import Batch, generate_dataset, scene_tensors
from .numerics import AttentionWeights, attention, grad_check, l2_normalize, make_generator
from .objective import contrastive_loss, diversity_loss, distill_mse, kl_to_standard_normal, stage2_loss
from .pseudo3d import KITTI_INTRINSICS, gga_bpl, gga_pal, gga_srl, gga_total, ray_box_intersect, weakm3d_losses


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


# A grad case builds (loss_fn, params) from a torch generator and a size index.
GradCase = Callable[[torch.Generator, int], tuple[Callable[[], torch.Tensor], dict]]

SIZES = ((2, 3, 4), (3, 4, 6), (4, 5, 8))  # (m, n, D) per seeded shape


def _leaf(x: torch.Tensor) -> torch.Tensor:
    return x.detach().clone().requires_grad_(True)


def _probe(out: torch.Tensor, gen) -> torch.Tensor:
    # fixed random linear read-out so every output element feeds the loss
    return torch.randn(out.shape, generator=gen)


def _module_params(prefix: str, module: torch.nn.Module) -> dict:
    return {f"{prefix}.{n}": p for n, p in module.named_parameters()}


def _case_attention(gen, i):
    m, n, d = SIZES[i]
    w = AttentionWeights(d, gen)
    q, k, v = (_leaf(torch.randn(s, d, generator=gen)) for s in (m, n, n))
    c = _probe(torch.empty(m, d), gen)
    return (lambda: (attention(q, k, v, w) * c).sum()), {"q": q, "k": k, "v": v, **_module_params("attn", w)}


def _case_decode_mean(gen, i):
    m, n, d = SIZES[i]
    dec = PromptDecoders(d, "cross_attention", int(torch.randint(0, 2**31, (1,), generator=gen)))
    prompts = _leaf(torch.randn(2, n, d, generator=gen))
    c = _probe(torch.empty(2, n, d), gen)
    params = {"prompts": prompts, **_module_params("dec", dec.phi_mu), **_module_params("sa", dec.self_attn_mu)}
    return (lambda: (decode_mean(prompts, prompts, dec) * c).sum()), params


def _decode_std_case(variant: str) -> GradCase:
    def case(gen, i):
        m, n, d = SIZES[i]
        dec = PromptDecoders(d, variant, int(torch.randint(0, 2**31, (1,), generator=gen)))
        q = _leaf(torch.randn(2, m, d, generator=gen))
        vis = _leaf(torch.randn(2, n, d, generator=gen))
        c = _probe(torch.empty(2, m, d), gen)
        params = {"q": q, "visual": vis, **_module_params("dec", dec)}
        params = {k: p for k, p in params.items() if "mu" not in k}
        return (lambda: (decode_std(q, vis, dec) * c).sum()), params
    return case


def _case_sampling(gen, i):
    m, n, d = SIZES[i]
    mu = _leaf(torch.randn(m, d, generator=gen))
    sigma = _leaf(torch.rand(m, d, generator=gen) + 0.5)
    eps = torch.randn(m, n, d, generator=gen)
    c = _probe(eps, gen)
    return (lambda: (sample_reparam(mu, sigma, n, eps=eps).z * c).sum()), {"mu": mu, "sigma": sigma}


def _fusion_case(strategy: str) -> GradCase:
    def case(gen, i):
        m, n, d = SIZES[i]
        fusion = PromptFusion(strategy, d, n, int(torch.randint(0, 2**31, (1,), generator=gen)))
        rows = _leaf(torch.randn(m, n, d, generator=gen))
        c = _probe(torch.empty(m, d), gen)
        return (lambda: (fuse_prompts(rows, fusion) * c).sum()), {"rows": rows, **_module_params("fusion", fusion)}
    return case


def _case_contrastive(gen, i):
    m, n, d = SIZES[i]
    a = _leaf(torch.randn(n, d, generator=gen))
    b = _leaf(torch.randn(n, d, generator=gen))
    t = _leaf(torch.tensor(math.log(1 / 0.07)) + 0.3 * torch.randn((), generator=gen))
    return (lambda: contrastive_loss(a, b, t)[0]), {"e_txt": a, "e_img": b, "log_inv_tau": t}


def _case_diversity(gen, i):
    m, n, d = SIZES[i]
    x = _leaf(torch.randn(2, n, d, generator=gen))
    return (lambda: diversity_loss(l2_normalize(x))), {"x": x}


def _case_kl(gen, i):
    m, n, d = SIZES[i]
    mu = _leaf(torch.randn(m, d, generator=gen))
    sigma = _leaf(torch.rand(m, d, generator=gen) + 0.3)
    return (lambda: kl_to_standard_normal(mu, sigma).mean()), {"mu": mu, "sigma": sigma}


def _case_stage2_mse(gen, i):
    m, n, d = SIZES[i]
    s = _leaf(torch.randn(n, d, generator=gen))
    t = torch.randn(n, d, generator=gen)
    l3 = _leaf(torch.rand((), generator=gen))
    return (lambda: stage2_loss(distill_mse(s, t), l3, 0.7)), {"student": s, "l_3d": l3}


def _box_and_points(gen, i):
    rng = np.random.default_rng(int(torch.randint(0, 2**31, (1,), generator=gen)))
    dims = np.array([4.0, 1.8, 1.6]) * rng.uniform(0.8, 1.2)
    params = np.array([rng.uniform(-4, 4), 1.0, rng.uniform(12, 30), *dims, rng.uniform(-3, 3)])
    n = (8, 16, 24)[i]
    pts = params[:3] + rng.uniform(-1.5, 1.5, size=(n, 3)) * np.array([dims[0] / 2, dims[2] / 2, dims[0] / 2])
    # a slightly perturbed box keeps points strictly off the surface
    box = _leaf(torch.as_tensor(params + rng.normal(0, 0.05, 7)))
    return box, torch.as_tensor(pts)


def _case_weakm3d(gen, i):
    box, pts = _box_and_points(gen, i)
    return (lambda: weakm3d_losses(pts, box, radius=0.4).total), {"box": box}


def _case_gga(gen, i):
    box, pts = _box_and_points(gen, i)
    gt2d = torch.tensor([500.0, 150.0, 700.0, 230.0])

    def loss():
        pal1, pal2 = gga_pal(pts, box)
        return gga_total(gga_bpl(box, KITTI_INTRINSICS, gt2d), gga_srl(box, 0.45), pal1, pal2)
    return loss, {"box": box}


def _case_stage1(gen, i):
    # micro model on a 2-scene batch: every parameter of the full stage-1 objective at once
    d = (4, 5, 6)[i]
    seed = int(torch.randint(0, 2**31, (1,), generator=gen))
    data = generate_dataset(2, 2, 2, 0.1, seed, dim_v=d, dim_c=3, with_3d=False)
    # a wide descriptor init keeps the attention gradients well above round-off
    cfg = RunConfig(seed=seed, dim=d, dim_v=d, n_prompts=4, prompt_length=2, k_sample=2, n_samples=2, init_scale=0.5)
    model = Stage1Model(cfg, data.categories)
    feats, ctx, cats = scene_tensors(data, Batch([(0, [0, 1]), (1, [0, 1])]))
    draws = model.draw(len(cats), np.random.default_rng(seed), gen, sampling=True)
    return (lambda: model(feats, ctx, cats, draws).l_stage1), dict(model.named_parameters())


GRAD_CASES: dict[str, GradCase] = {
    "attention": _case_attention,
    "decode_mean": _case_decode_mean,
    **{f"decode_std[{v}]": _decode_std_case(v) for v in IMAGE_TEXT_FUSIONS},
    "sampling": _case_sampling,
    **{f"fusion[{s}]": _fusion_case(s) for s in FUSION_STRATEGIES},
    "contrastive": _case_contrastive,
    "diversity": _case_diversity,
    "kl": _case_kl,
    "stage2": _case_stage2_mse,
    "weakm3d": _case_weakm3d,
    "gga": _case_gga,
    "stage1": _case_stage1,
}


def run_grad_checks(seed: int = 0, tol: float = 1e-4, names=None) -> list[CheckResult]:
    out = []
    for name, case in GRAD_CASES.items():
        if names is not None and name not in names:
            continue
        worst = 0.0
        ok = True
        for i in range(len(SIZES)):
            gen = make_generator(seed * 1000 + i)
            for _ in range(10):
                loss_fn, params = case(gen, i)
                try:
                    loss_fn()
                    break
                except DegenerateError:
                    continue  # e.g. every hidden ReLU dead; draw a fresh fixture
            report = grad_check(loss_fn, params, tol=tol)
            ok &= report.passed
            worst = max(worst, report.worst()[1])
        out.append(CheckResult(f"grad[{name}]", ok, f"max rel err {worst:.2e} over {len(SIZES)} shapes (tol {tol:g})"))
    return out


def check_kl(seed: int = 0, n_pairs: int = 20, n_samples: int = 1_000_000, tol: float = 1e-2) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for j in range(n_pairs):
        mu = rng.uniform(-1, 1, 4)
        sigma = rng.uniform(0.5, 1.5, 4)
        closed = kl_to_standard_normal(torch.as_tensor(mu), torch.as_tensor(sigma)).item()
        worst = max(worst, abs(closed - oracles.monte_carlo_kl(mu, sigma, n_samples, seed * 100 + j)))
    zero = kl_to_standard_normal(torch.zeros(4), torch.ones(4)).item()
    half = kl_to_standard_normal(torch.ones(4), torch.ones(4)).item()
    ok = worst < tol and zero == 0.0 and half == 2.0
    return CheckResult("kl_monte_carlo", ok, f"max |closed - MC| {worst:.2e} over {n_pairs} pairs; KL(0,1)={zero}, KL(1,1)={half}")


def check_reparam(seed: int = 0) -> CheckResult:
    gen = make_generator(seed)
    mu = torch.tensor([0.5, -1.0, 2.0])
    sigma = torch.tensor([0.3, 1.0, 2.5])
    worst = 0.0
    ok = True
    for n in (10**3, 10**4, 10**5):
        z = sample_reparam(mu, sigma, n, generator=gen).z
        dm = ((z.mean(0) - mu).abs() / sigma).max().item()
        dv = ((z.var(0) - sigma**2).abs() / sigma**2).max().item()
        ok &= dm < 4 / math.sqrt(n) and dv < 4 * math.sqrt(2 / n)
        worst = max(worst, dm * math.sqrt(n) / 4, dv / (4 * math.sqrt(2 / n)))
    return CheckResult("reparam_stats", ok, f"worst deviation {worst:.2f} of the allowed band")


def ray_cases(seed: int, n: int):
    rng = np.random.default_rng(seed)
    for j in range(n):
        dims = np.array([4.0, 1.8, 1.6]) * rng.uniform(0.5, 1.5)
        params = np.array([rng.uniform(-6, 6), rng.uniform(0, 2), rng.uniform(8, 40), *dims, rng.uniform(-math.pi, math.pi)])
        kind = j % 4
        if kind == 3:
            # origin inside the box: exit point expected
            origin = params[:3] + rng.uniform(-0.4, 0.4, 3) * np.array([dims[0], dims[2], dims[1]])
        else:
            origin = rng.uniform(-2, 2, 3) * np.array([1, 0.5, 1])
        if kind in (0, 3):
            local = rng.uniform(-0.45, 0.45, 3) * np.array([dims[0], dims[2], dims[1]])
            c, s = math.cos(params[6]), math.sin(params[6])
            target = params[:3] + np.array([c * local[0] + s * local[2], local[1], -s * local[0] + c * local[2]])
        else:
            target = params[:3] + rng.uniform(-4, 4, 3)
        yield origin, target, params


def check_geometry(seed: int = 0, n: int = 1000, tol: float = 1e-3) -> CheckResult:
    worst = 0.0
    mismatched = 0
    for origin, target, params in ray_cases(seed, n):
        fast = ray_box_intersect(origin, target, params)
        slow = oracles.march_ray(origin, target, params)
        if (fast is None) != (slow is None):
            mismatched += 1
            continue
        if fast is not None:
            worst = max(worst, float(np.abs(fast.numpy() - slow).max()))
    ok = mismatched == 0 and worst < tol
    return CheckResult("ray_box_vs_marching", ok, f"{n} rays, {mismatched} hit/miss mismatches, max error {worst:.2e}")


def random_labeled(rng: np.random.Generator):
    k = int(rng.integers(2, 7))
    n = int(rng.integers(k + 1, 31))  # at least one cluster with two members
    d = int(rng.integers(1, 6))
    labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    X = rng.normal(size=(n, d)) + rng.normal(scale=2.0, size=(k, d))[labels]
    return X, labels


def check_metrics(seed: int = 0, n_sets: int = 100, tol: float = 1e-9) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_sets):
        X, labels = random_labeled(rng)
        data = LabeledEmbeddings(X, labels)
        ch = calinski_harabasz(data)
        s_mean, s = silhouette(data)
        b_mean, b = oracles.brute_silhouette(X, labels)
        worst = max(
            worst,
            abs(ch - oracles.brute_ch(X, labels)) / max(1.0, abs(ch)),
            abs(s_mean - b_mean),
            float(np.abs(s - np.array(b)).max()),
            float(np.abs(centroid_distances(data) - oracles.brute_centroid_distances(X, labels)).max()),
        )
    fixture = LabeledEmbeddings(np.array([0.0, 1.0, 4.0, 5.0]), np.array([0, 0, 1, 1]))
    ch_fix = calinski_harabasz(fixture)
    s_fix = silhouette(fixture)[0]
    ok = worst < tol and abs(ch_fix - 32) < 1e-6 and abs(s_fix - 0.746032) < 1e-6
    return CheckResult("metrics_vs_bruteforce", ok, f"{n_sets} datasets, max deviation {worst:.2e}; fixture CH={ch_fix:.6f} s={s_fix:.6f}")


def run_selfcheck(cfg: RunConfig | None = None, tol: float = 1e-4, quick: bool = False) -> list[CheckResult]:
    cfg = cfg or RunConfig()
    seed = cfg.seed
    t0 = time.perf_counter()
    results = run_grad_checks(seed, tol)
    # fewer samples would put the MC noise within a few sigma of the tolerance
    results.append(check_kl(seed))
    results.append(check_reparam(seed))
    results.append(check_geometry(seed, n=100 if quick else 1000))
    results.append(check_metrics(seed, n_sets=20 if quick else 100))
    results.append(CheckResult("runtime", True, f"{time.perf_counter() - t0:.1f} s"))
    return results
