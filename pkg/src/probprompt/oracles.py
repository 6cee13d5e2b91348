"""Slow, independent reference implementations used to audit the fast paths.

Nothing here shares code with the modules it checks: geometry is redone in
numpy with explicit trigonometry, metrics with plain Python loops, and the KL
term by Monte Carlo.
"""
from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# clustering metrics


def _mean(rows):
    n = len(rows)
    return [sum(r[j] for r in rows) / n for j in range(len(rows[0]))]


def _dist(a, b) -> float:
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def _clusters(X, labels) -> dict:
    out: dict = {}
    for x, lab in zip(np.asarray(X, dtype=float).tolist(), np.asarray(labels).tolist()):
        out.setdefault(lab, []).append(x if isinstance(x, list) else [x])
    return dict(sorted(out.items()))


def brute_ch(X, labels) -> float:
    groups = _clusters(X, labels)
    everything = [x for rows in groups.values() for x in rows]
    overall = _mean(everything)
    b = w = 0.0
    for rows in groups.values():
        c = _mean(rows)
        b += len(rows) * _dist(c, overall) ** 2
        for x in rows:
            w += _dist(x, c) ** 2
    n, k = len(everything), len(groups)
    return b / w * (n - k) / (k - 1)


def brute_silhouette(X, labels) -> tuple[float, list[float]]:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    pts = X.tolist()
    labels = np.asarray(labels).tolist()
    s = []
    for i, (x, li) in enumerate(zip(pts, labels)):
        same = [_dist(x, y) for j, (y, lj) in enumerate(zip(pts, labels)) if lj == li and j != i]
        if not same:
            s.append(0.0)
            continue
        a = sum(same) / len(same)
        b = math.inf
        for other in set(labels) - {li}:
            d = [_dist(x, y) for y, lj in zip(pts, labels) if lj == other]
            b = min(b, sum(d) / len(d))
        m = max(a, b)
        s.append(0.0 if m == 0 else (b - a) / m)
    return sum(s) / len(s), s


def brute_centroid_distances(X, labels) -> np.ndarray:
    groups = _clusters(X, labels)
    cents = [_mean(rows) for rows in groups.values()]
    k = len(cents)
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            if i != j:
                out[i, j] = _dist(cents[i], cents[j])
    return out


# ---------------------------------------------------------------------------
# geometry


def _local(points: np.ndarray, params) -> np.ndarray:
    x, y, z, _, _, _, yaw = params
    c, s = math.cos(yaw), math.sin(yaw)
    d = np.atleast_2d(points) - np.array([x, y, z])
    # inverse of the yaw rotation about the vertical axis
    return np.stack([c * d[:, 0] - s * d[:, 2], d[:, 1], s * d[:, 0] + c * d[:, 2]], axis=1)


def inside_oracle(points, params) -> np.ndarray:
    """Signed box membership: < 0 inside, > 0 outside."""
    half = np.array([params[3], params[5], params[4]]) / 2
    return (np.abs(_local(points, params)) / half).max(axis=1) - 1.0


def march_ray(origin, target, params, step: float = 1e-3, reach: float = 200.0):
    """First boundary crossing along ``origin -> target`` by marching plus bisection.

    Returns the crossing point or ``None`` when no crossing is found within
    ``reach`` metres.
    """
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(target, dtype=float) - origin
    length = float(np.linalg.norm(direction))
    unit = direction / length
    ts = np.arange(0.0, reach + step, step)
    f = inside_oracle(origin + ts[:, None] * unit, params)
    inside0 = f[0] < 0
    flips = np.nonzero((f < 0) != inside0)[0]
    if flips.size == 0:
        return None
    lo, hi = ts[flips[0] - 1], ts[flips[0]]
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if (inside_oracle(origin + mid * unit, params)[0] < 0) == inside0:
            lo = mid
        else:
            hi = mid
    return origin + 0.5 * (lo + hi) * unit


# ---------------------------------------------------------------------------
# KL


def monte_carlo_kl(mu, sigma, n: int = 1_000_000, seed: int = 0) -> float:
    """Monte Carlo estimate of KL(N(mu, diag sigma^2) || N(0, I))."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, mu.size))
    z = mu + sigma * eps
    log_q = -0.5 * eps**2 - np.log(sigma) - 0.5 * math.log(2 * math.pi)
    log_p = -0.5 * z**2 - 0.5 * math.log(2 * math.pi)
    return float((log_q - log_p).sum(axis=1).mean())
