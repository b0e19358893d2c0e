"""Central finite-difference verification of analytic gradients."""

from dataclasses import dataclass, field

import numpy as np

from .network import backward, forward


class GradCheckError(ValueError):
    pass


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)  # name -> max relative error

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def failures(self):
        return {k: v for k, v in self.errors.items() if not v <= self.tolerance}

    @property
    def ok(self):
        return not self.failures

    def merge(self, other, prefix=""):
        for k, v in other.errors.items():
            self.errors[prefix + k] = v
        return self


def relative_error(analytic, numeric, floor=1e-8):
    """Largest elementwise discrepancy scaled by the tensor's gradient magnitude.

    ``max|a - n| / max(max|a|, max|n|, floor)``.  Normalizing by the tensor
    scale rather than per element keeps tiny entries, which 32-bit finite
    differences cannot resolve, from dominating the figure.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)


def numerical_grad(f, arrays, step=1e-3):
    """Central differences of scalar ``f()`` with respect to each array.

    Arrays are perturbed in place and restored.  The effective step is
    recomputed in the array's own precision, so rounding of ``x + h`` does
    not bias the quotient.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    out = []
    for arr in arrays:
        g = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError("numerical_grad needs contiguous arrays")
        for idx in range(flat.size):
            orig = flat[idx]
            hi = flat.dtype.type(orig + step)
            lo = flat.dtype.type(orig - step)
            flat[idx] = hi
            fp = f()
            flat[idx] = lo
            fm = f()
            flat[idx] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError("loss is not finite during finite differencing")
            g.reshape(-1)[idx] = (fp - fm) / (float(hi) - float(lo))
        out.append(g)
    return out


def check_arrays(f, arrays, analytic, names, step=1e-3, tolerance=1e-3):
    """Compare ``analytic`` gradients of ``f`` w.r.t. ``arrays`` to finite differences."""
    value = f()
    if not np.isfinite(value):
        raise GradCheckError("loss is not finite")
    numeric = numerical_grad(f, arrays, step)
    report = GradCheckReport(tolerance)
    for name, a, n in zip(names, analytic, numeric):
        report.errors[name] = relative_error(a, n)
    return report


def param_names(net):
    names = []
    for i, (spec, group) in enumerate(zip(net.specs, net.params)):
        for j, _ in enumerate(group):
            names.append(f"layer{i}.{spec.kind}.{'weight' if j == 0 else 'bias'}")
    return names


def grad_check(net, inputs, loss_evaluator, step=1e-3, tolerance=1e-3,
               oracle_dtype=np.float64):
    """Check ``backward`` against finite differences for every parameter.

    ``loss_evaluator(trace)`` maps a :class:`ForwardTrace` to
    ``(loss, logit_grad, tapped_grad)``; either gradient may be ``None``.

    The analytic gradient runs in the network's own precision.  The finite
    differences are taken on a copy of the parameters cast to
    ``oracle_dtype`` (exact for float32 -> float64), so the oracle's
    rounding noise stays well below ``tolerance``.  Pass ``None`` to
    difference in the network's precision.
    """
    trace = forward(net, inputs)
    value, logit_grad, tapped_grad = loss_evaluator(trace)
    if not np.isfinite(value):
        raise GradCheckError("loss is not finite")
    if logit_grad is None and tapped_grad is None:
        grads = [[np.zeros_like(a) for a in g] for g in net.params]
    else:
        grads = backward(net, trace, logit_grad, tapped_grad)
    analytic = [g for group in grads for g in group]

    oracle = net if oracle_dtype is None else cast(net, oracle_dtype)

    def f():
        return float(loss_evaluator(forward(oracle, inputs))[0])

    return check_arrays(f, oracle.parameters(), analytic, param_names(net), step, tolerance)


def cast(net, dtype):
    out = net.copy()
    out.params = [[a.astype(dtype) for a in g] for g in net.params]
    return out
