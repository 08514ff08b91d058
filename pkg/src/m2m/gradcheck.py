from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, unchecked


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    worst: tuple[str, tuple[int, ...]] | None = None
    flagged: list[tuple[str, tuple[int, ...], float, float]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.flagged


def relative_error(analytic: float, numeric: float, floor: float = 1e-7) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _central(f, flat: np.ndarray, c: int, h: float) -> float:
    orig = flat[c]
    try:
        with unchecked():
            flat[c] = orig + h
            fp = f().item()
            flat[c] = orig - h
            fm = f().item()
    finally:
        flat[c] = orig
    return (fp - fm) / (2.0 * h)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-4,
    tol: float = 1e-4,
    floor: float = 1e-7,
    max_coords: int | None = None,
    seed: int = 0,
    retries: int = 2,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` with central differences.

    ``f`` must rebuild the graph from the current parameter values on every
    call. With ``max_coords`` set, each parameter contributes at most that many
    randomly chosen coordinates.

    A coordinate that misses ``tol`` is re-probed with steps h/10 and h/100
    (``retries``): a probe that straddles a LeakyReLU kink is wrong at one step
    size only, whereas a wrong analytic gradient disagrees at all of them.
    """
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst_err, worst_at, n = 0.0, None, 0
    flagged = []
    for i, p in enumerate(params):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            a = analytic[i].reshape(-1)[c]
            for step in (h, h / 10, h / 100)[: 1 + retries]:
                numeric = _central(f, flat, c, step)
                err = relative_error(a, numeric, floor) if np.isfinite(numeric) else np.inf
                if err <= tol:
                    break
            idx = tuple(int(j) for j in np.unravel_index(c, p.shape))
            name = p.name or f"param{i}"
            n += 1
            if err > worst_err:
                worst_err, worst_at = err, (name, idx)
            if err > tol:
                flagged.append((name, idx, float(a), float(numeric)))
    for p in params:
        p.zero_grad()
    return GradCheckReport(worst_err, n, worst_at, flagged)
