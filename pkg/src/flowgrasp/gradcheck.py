"""Central finite-difference verification of analytic gradients.

Perturbs parameter entries one at a time, re-evaluates the loss closure, and
compares (f(x+eps) - f(x-eps)) / 2eps against the tape gradient. Only valid
in float64; float32 rounding drowns the difference quotient.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericError, PrecisionError, backward

# |a - n| is measured against max(|a|, |n|, REL_FLOOR). The central difference
# of an O(1) loss at eps=1e-5 carries ~1e-10 of rounding noise, so gradients
# below the floor are compared absolutely at floor*tol resolution; a sign or
# scale error on any gradient above ~1e-9 still reads as a large ratio.
REL_FLOOR = 1e-5


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    n_checked: int
    worst_index: tuple = ()


@dataclass
class GradCheckReport:
    tol: float
    eps: float
    passed: bool
    results: list = field(default_factory=list)

    @property
    def max_rel_err(self):
        return max((r.max_rel_err for r in self.results), default=0.0)

    def summary(self):
        lines = [f"grad check: tol={self.tol:g} eps={self.eps:g} "
                 f"{'PASS' if self.passed else 'FAIL'}"]
        for r in sorted(self.results, key=lambda r: -r.max_rel_err):
            lines.append(f"  {r.name:<32s} max_rel_err={r.max_rel_err:.3e} "
                         f"(n={r.n_checked})")
        return "\n".join(lines)


def grad_check(f, params, eps=1e-5, tol=1e-4, max_elements_per_param=None, rng=None):
    """Check d f() / d p for every tensor in `params`.

    f is a zero-argument closure rebuilding the graph and returning the scalar
    loss. When `max_elements_per_param` is set, a seeded random subset of each
    parameter's entries is probed instead of the full sweep (still covers
    every parameter; use for model-sized checks).
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise PrecisionError(
                f"grad_check requires float64 parameters, got {p.data.dtype} "
                f"for {p.name or 'unnamed'}")
    if rng is None:
        rng = np.random.default_rng(0)

    for p in params:
        p.zero_grad()
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("grad check aborted: loss is not finite")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    report = GradCheckReport(tol=tol, eps=eps, passed=True)
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_elements_per_param is not None and n > max_elements_per_param:
            idxs = rng.choice(n, size=max_elements_per_param, replace=False)
        else:
            idxs = np.arange(n)
        worst = 0.0
        worst_idx = ()
        a_flat = a.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_hi = float(f().data)
            flat[i] = orig - eps
            f_lo = float(f().data)
            flat[i] = orig
            if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
                raise NumericError(
                    f"grad check aborted: perturbed loss not finite at "
                    f"{p.name or 'param'}[{i}]")
            numeric = (f_hi - f_lo) / (2.0 * eps)
            rel = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), REL_FLOOR)
            if rel > worst:
                worst = rel
                worst_idx = np.unravel_index(int(i), p.data.shape)
        report.results.append(ParamCheck(
            name=p.name or f"param{len(report.results)}",
            max_rel_err=worst, n_checked=len(idxs), worst_index=worst_idx))
        if worst > tol:
            report.passed = False
    return report
