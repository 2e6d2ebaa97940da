"""Central-difference gradient oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .params import ParamStore
from .tensor import Graph, Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    rtol: float
    failures: List[Tuple[str, tuple, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_error:.3e} over {self.checked} coords "
                f"(rtol {self.rtol:g}, {len(self.failures)} failing)")


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps vanishing
    gradients from turning round-off into a huge ratio."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def relu_margin(output: Tensor) -> float:
    """Smallest ``|x|`` fed to any ReLU in the graph of ``output`` (inf if none).

    Central differences straddling a kink disagree with the one-sided
    analytic gradient, so checks should run where this margin is large
    compared with the perturbation.
    """
    margin = np.inf
    for node in Graph(output).nodes:
        if node.op == "relu":
            margin = min(margin, float(np.abs(node._parents[0].data).min(initial=np.inf)))
    return margin


def check_gradients(f: Callable[[], Tensor], params: ParamStore, eps: float = 1e-4,
                    rtol: float = 1e-3, max_coords: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None, floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` with central differences.

    ``f`` must rebuild its graph from the current parameter values on every
    call. With ``max_coords`` set, at most that many coordinates per tensor
    are sampled (seeded by ``rng``).
    """
    params.zero_grad()
    loss = f()
    backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for name, t in params.items()}
    params.zero_grad()
    rng = rng or np.random.default_rng(0)

    worst, checked, failures = 0.0, 0, []
    for name, t in params.items():
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = f().item()
            flat[c] = orig - eps
            down = f().item()
            flat[c] = orig
            numeric = (up - down) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[c])
            err = relative_error(a, numeric, floor)
            worst = max(worst, err)
            checked += 1
            if err >= rtol:
                failures.append((name, np.unravel_index(c, t.shape), a, numeric))
    return GradCheckReport(worst, checked, rtol, failures)
