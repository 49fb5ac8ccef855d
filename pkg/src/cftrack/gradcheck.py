"""Central finite-difference verification of analytic gradients.

Storage is 32-bit, which is too noisy for per-coordinate difference
quotients of a full network objective (rounding of the loss alone is
~1e-7 and h is 1e-3).  The harness therefore promotes the checked
parameters to 64-bit for the duration of the check and restores the
original 32-bit buffers afterwards; the formulas being differentiated
are identical in both modes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class TensorCheck:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    tolerance: float
    h: float
    per_tensor: list[TensorCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((t.max_rel_error for t in self.per_tensor), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def failures(self) -> list[TensorCheck]:
        return [t for t in self.per_tensor if t.max_rel_error >= self.tolerance]

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: max relative error {self.max_rel_error:.3e} "
            f"(tolerance {self.tolerance:.1e}, h {self.h:.1e}, "
            f"{len(self.per_tensor)} tensors)"
        )


def relative_error(a: float, n: float, floor: float = 1e-4) -> float:
    """|a - n| over the larger magnitude, floored.

    The floor turns the comparison into an absolute one for coordinates whose
    gradient sits below what central differences can resolve; without it,
    difference-quotient noise on near-zero entries dominates the report.
    """
    return abs(a - n) / max(abs(a), abs(n), floor)


def finite_diff_check(
    loss_fn,
    named_params: list[tuple[str, Tensor]],
    h: float = 1e-3,
    tolerance: float = 1e-3,
    max_coords_per_tensor: int = 5,
    seed: int = 0,
    high_precision: bool = True,
    corrupt: str | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must be deterministic and return a scalar Tensor built from
    ``named_params``.  Coordinates are sampled per tensor (all of them when the
    tensor is small).  ``corrupt`` scales one tensor's analytic gradient by 2,
    a hook for verifying that the check itself detects broken gradients.
    """
    rng = np.random.default_rng(seed)
    originals = {name: p.data for name, p in named_params}
    try:
        if high_precision:
            for _, p in named_params:
                p.data = p.data.astype(np.float64)

        for _, p in named_params:
            p.zero_grad()
        loss = loss_fn()
        loss.backward()
        analytic = {}
        for name, p in named_params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            g = np.array(g, dtype=np.float64, copy=True)
            if corrupt is not None and name == corrupt:
                g *= 2.0
            analytic[name] = g

        report = GradCheckReport(tolerance=tolerance, h=h)
        for name, p in named_params:
            flat = p.data.reshape(-1)
            n_coords = flat.size
            if n_coords <= max_coords_per_tensor:
                coords = np.arange(n_coords)
            else:
                coords = rng.choice(n_coords, size=max_coords_per_tensor, replace=False)
            worst = TensorCheck(name, 0.0, (), 0.0, 0.0)
            for c in coords:
                c = int(c)
                saved = flat[c]

                def quotient(step):
                    flat[c] = saved + step
                    hi = loss_fn().data.item()
                    flat[c] = saved - step
                    lo = loss_fn().data.item()
                    flat[c] = saved
                    return (hi - lo) / (2.0 * step)

                numeric = quotient(h)
                a = float(analytic[name].reshape(-1)[c])
                err = relative_error(a, numeric)
                # A stencil that straddles a relu joint shows truncation error
                # that vanishes as the step shrinks; a wrong gradient does not.
                for shrink in (8.0, 64.0):
                    if err < tolerance:
                        break
                    numeric = quotient(h / shrink)
                    err = min(err, relative_error(a, numeric))
                if err >= worst.max_rel_error:
                    worst = TensorCheck(
                        name, err, np.unravel_index(c, p.data.shape), a, numeric
                    )
            report.per_tensor.append(worst)
        return report
    finally:
        for name, p in named_params:
            p.data = originals[name]
            p.zero_grad()
