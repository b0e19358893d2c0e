"""Finite-difference checks over every layer kind and every loss.

Each instance draws a small random problem.  Inputs are redrawn when a ReLU
pre-activation or a max-pool/maxout runner-up lies within ``margin`` of the
switching point, since central differences straddling a kink do not measure
the derivative.
"""

import numpy as np

from .losses import (DistillConfig, FitNetAdapter, affinity, hint_loss, kd_loss, lp_grad,
                     lp_loss, soften_softmax, total_loss)
from .nn import layers as L
from .nn.gradcheck import GradCheckReport, check_arrays, grad_check
from .nn.network import forward, init_network


def _windows(x, size, stride):
    m, c, h, w = x.shape
    ho, wo = (h - size) // stride + 1, (w - size) // stride + 1
    views = [L._offset(x, i, j, stride, ho, wo) for i in range(size) for j in range(size)]
    return np.stack(views, axis=-1)


def _top_gap(values):
    s = np.sort(values, axis=-1)
    return float((s[..., -1] - s[..., -2]).min())


def kink_margin(net, inputs):
    """Smallest distance of any piecewise-linear layer from a switch point."""
    x = inputs.astype(np.float64)
    gap = np.inf
    for spec, params in zip(net.specs, net.params):
        if spec.kind == "relu":
            gap = min(gap, float(np.abs(x).min()))
        elif spec.kind == "maxpool2d":
            gap = min(gap, _top_gap(_windows(x, *spec.dims)))
        elif spec.kind == "maxout":
            (p,) = spec.dims
            grouped = x.reshape((x.shape[0], x.shape[1] // p, p) + x.shape[2:])
            gap = min(gap, _top_gap(np.moveaxis(grouped, 2, -1)))
        x, _ = L.forward(spec, [a.astype(np.float64) for a in params], x)
    return gap


LAYER_CASES = {
    "dense": ([L.dense(6, 5), L.dense(5, 3)], (6,)),
    "conv2d": ([L.conv2d(2, 3, 3), L.flatten(), L.dense(3 * 4 * 4, 3)], (2, 6, 6)),
    "conv2d-stride2": ([L.conv2d(2, 3, 3, 2), L.flatten(), L.dense(3 * 3 * 3, 3)], (2, 7, 7)),
    "maxpool2d": ([L.conv2d(1, 2, 3), L.maxpool2d(2), L.flatten(), L.dense(2 * 3 * 3, 3)],
                  (1, 8, 8)),
    "maxpool2d-overlap": ([L.conv2d(1, 2, 3), L.maxpool2d(3, 2), L.flatten(),
                           L.dense(2 * 3 * 3, 3)], (1, 9, 9)),
    "relu": ([L.dense(6, 5), L.relu(), L.dense(5, 3)], (6,)),
    "maxout": ([L.dense(6, 8), L.maxout(2), L.dense(4, 3)], (6,)),
    "flatten": ([L.conv2d(1, 2, 2), L.flatten(), L.dense(2 * 3 * 3, 3)], (1, 4, 4)),
}


def _ce_evaluator(labels):
    def evaluate(trace):
        z = trace.logits
        t = soften_softmax(z, 1.0)
        terms = kd_loss(labels, z, t, t, 0.0)
        return terms.value, terms.logit_grad, None
    return evaluate


def _draw_net(specs, shape, rng, m, margin, tries=100):
    for _ in range(tries):
        net = init_network(specs, shape, int(rng.integers(2**31)))
        x = rng.standard_normal((m,) + shape).astype(np.float32)
        if kink_margin(net, x) > margin:
            return net, x
    raise RuntimeError("could not draw an instance away from the kinks")


def check_layers(rng, step, tolerance, margin, m=3):
    report = GradCheckReport(tolerance)
    for name, (specs, shape) in LAYER_CASES.items():
        net, x = _draw_net(specs, shape, rng, m, margin)
        labels = rng.integers(0, 3, size=m)
        report.merge(grad_check(net, x, _ce_evaluator(labels), step, tolerance), f"{name}/")
    return report


def _check_fn(f64, fn, analytic, names, step, tolerance):
    return check_arrays(fn, f64, analytic, names, step, tolerance)


def check_losses(rng, step, tolerance, m=6, classes=4, d_s=5, d_t=7, k=2):
    report = GradCheckReport(tolerance)
    labels = rng.integers(0, classes, size=m)
    z = (2 * rng.standard_normal((m, classes))).astype(np.float32)
    zt = (2 * rng.standard_normal((m, classes))).astype(np.float32)
    tau, lam = 0.5, 2.0

    # cross-entropy alone
    z64 = z.astype(np.float64)
    t1 = soften_softmax(z, 1.0)
    ce = kd_loss(labels, z, t1, t1, 0.0)
    report.merge(_check_fn([z64], lambda: kd_loss(labels, z64, soften_softmax(z64, 1.0),
                                                  soften_softmax(z64, 1.0), 0.0).value,
                           [ce.logit_grad], ["logits"], step, tolerance), "ce/")

    # soft-target loss with the teacher's targets held fixed
    soft_t = soften_softmax(zt, tau)
    kd = kd_loss(labels, z, soft_t, soften_softmax(z, tau), lam)
    report.merge(_check_fn([z64], lambda: kd_loss(labels, z64, soft_t,
                                                  soften_softmax(z64, tau), lam).value,
                           [kd.logit_grad], ["logits"], step, tolerance), "kd/")

    # hint loss through the adapter
    f_s = rng.standard_normal((m, d_s)).astype(np.float32)
    f_t = rng.standard_normal((m, d_t)).astype(np.float32)
    adapter = FitNetAdapter.init(d_s, d_t, seed=int(rng.integers(2**31)))
    adapter.bias[:] = rng.standard_normal(d_t).astype(np.float32) * 0.1
    h = hint_loss(f_s, f_t, adapter)
    a64 = FitNetAdapter(adapter.weight.astype(np.float64), adapter.bias.astype(np.float64))
    fs64 = f_s.astype(np.float64)
    report.merge(_check_fn([fs64, a64.weight, a64.bias],
                           lambda: hint_loss(fs64, f_t.astype(np.float64), a64).value,
                           [h.grad_f_s, h.grad_weight, h.grad_bias],
                           ["f_s", "weight", "bias"], step, tolerance), "hint/")

    # LP loss on a fixed teacher graph
    g = affinity(f_t, DistillConfig(k=k))
    grad = lp_grad(f_s, g)
    fs64 = f_s.astype(np.float64)
    report.merge(_check_fn([fs64], lambda: lp_loss(fs64, g), [grad], ["f_s"],
                           step, tolerance), "lp/")
    return report


def check_total(rng, step, tolerance, margin, m=8, k=3):
    """Combined CE + KD + LP objective backpropagated through a student."""
    report = GradCheckReport(tolerance)
    t_specs = [L.dense(6, 9), L.relu(), L.dense(9, 4)]
    s_specs = [L.dense(6, 5), L.relu(), L.dense(5, 4)]
    teacher = init_network(t_specs, (6,), int(rng.integers(2**31)), tap_index=1)
    student, x = _draw_net(s_specs, (6,), rng, m, margin)
    student.tap_index = 1
    labels = rng.integers(0, 4, size=m)
    t_trace = forward(teacher, x)
    for strategy in ("lp", "kd"):
        cfg = DistillConfig(k=k, strategy=strategy, gamma=1.0)

        def evaluate(trace):
            terms = total_loss(labels, trace, t_trace, cfg)
            return terms.total, terms.logit_grad, terms.tapped_grad
        report.merge(grad_check(student, x, evaluate, step, tolerance), f"total-{strategy}/")
    return report


def gradcheck_suite(instances=20, seed=0, step=1e-3, tolerance=1e-3, margin=0.02):
    """Run every check on ``instances`` random problems; returns one merged report."""
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance)
    for i in range(instances):
        report.merge(check_layers(rng, step, tolerance, margin), f"{i}/layer/")
        report.merge(check_losses(rng, step, tolerance), f"{i}/loss/")
        report.merge(check_total(rng, step, tolerance, margin), f"{i}/")
    return report
