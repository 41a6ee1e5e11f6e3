from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def check_gradients(f: Callable[..., Tensor], point: Tensor | Sequence[Tensor],
                    eps: float = 1e-5, max_coords: int | None = None,
                    rng: np.random.Generator | None = None) -> float:
    """Max relative disagreement between tape gradients and central differences.

    ``f`` maps the tensor(s) in ``point`` to a scalar tensor. The error for each
    coordinate is ``|analytic - numeric| / max(1, |numeric|)``. With
    ``max_coords`` only a random subset of coordinates is probed (at least one
    per tensor), which keeps checks of large models affordable.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    points = [point] if isinstance(point, Tensor) else list(point)
    for p in points:
        p.requires_grad = True

    def value() -> float:
        out = f(*points)
        v = float(np.asarray(out.data).reshape(-1)[0])
        if out.size != 1:
            raise ValueError(f"f must return a scalar, got shape {out.shape}")
        return v

    if not np.isfinite(value()):
        raise ValueError("f(point) is not finite")

    with Tape() as tape:
        loss = f(*points)
    if loss.requires_grad:
        analytic = tape.backward(loss, points)
    else:
        analytic = [np.zeros_like(p.data) for p in points]

    probes = [range(p.data.size) for p in points]
    total = sum(p.data.size for p in points)
    if max_coords is not None and max_coords < total:
        rng = rng or np.random.default_rng(0)
        chosen = rng.choice(total, size=max_coords, replace=False)
        bounds = np.cumsum([0] + [p.data.size for p in points])
        probes = []
        for k, p in enumerate(points):
            local = chosen[(chosen >= bounds[k]) & (chosen < bounds[k + 1])] - bounds[k]
            if not len(local) and p.data.size:
                local = rng.integers(p.data.size, size=1)
            probes.append(np.sort(local))

    worst = 0.0
    for p, grad, idx in zip(points, analytic, probes):
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(gflat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
