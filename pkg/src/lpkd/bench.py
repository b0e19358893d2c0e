"""Cost of bridging teacher and student feature spaces.

The LP bridge builds a kNN graph on teacher features and evaluates the LP
loss and its gradient on student features; its cost is quadratic in the
batch size and linear in the feature widths.  The FitNet bridge runs a
``d_S x d_T`` fully-connected adapter forward and backward; its cost is
linear in the batch size and bilinear in the widths.
"""

import json
import statistics
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import DistillConfig, FitNetAdapter, affinity, hint_loss, lp_grad, lp_loss


@dataclass
class CostModel:
    """Operation counts with constant factors dropped."""

    m: int
    d_s: int
    d_t: int
    k: int
    teacher_dist: int  # m^2 d_T
    knn_select: int  # k m^2
    student_dist: int  # m^2 d_S
    fitnet: int  # m d_S d_T

    @property
    def lp(self):
        return self.teacher_dist + self.knn_select + self.student_dist

    @property
    def ratio(self):
        """FitNet count over the dominant LP terms, ``d_S d_T / (m (d_S + d_T))``."""
        return self.fitnet / (self.teacher_dist + self.student_dist)


def bridge_cost_model(m, d_s, d_t, k=5):
    for name, v in (("m", m), ("d_s", d_s), ("d_t", d_t), ("k", k)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v}")
    m, d_s, d_t, k = int(m), int(d_s), int(d_t), int(k)
    return CostModel(m, d_s, d_t, k, teacher_dist=m * m * d_t, knn_select=k * m * m,
                     student_dist=m * m * d_s, fitnet=m * d_s * d_t)


def param_overhead(strategy, d_s, d_t, bias=True):
    """Trainable parameters the bridge adds on top of the student."""
    if strategy == "fitnet":
        return d_s * d_t + (d_t if bias else 0)
    if strategy in ("lp", "kd", "bp"):
        return 0
    raise ValueError(f"unknown strategy {strategy!r}")


@dataclass
class Timing:
    median: float
    spread: float  # max minus min over the repetitions
    samples: list = field(default_factory=list)


def _lp_bridge(m, d_s, d_t, k, rng):
    f_s = rng.standard_normal((m, d_s), dtype=np.float32)
    f_t = rng.standard_normal((m, d_t), dtype=np.float32)
    cfg = DistillConfig(k=k)

    def run():
        g = affinity(f_t, cfg)
        lp_loss(f_s, g)
        lp_grad(f_s, g)
    return run


def _fitnet_bridge(m, d_s, d_t, rng):
    f_s = rng.standard_normal((m, d_s), dtype=np.float32)
    f_t = rng.standard_normal((m, d_t), dtype=np.float32)
    adapter = FitNetAdapter.init(d_s, d_t, seed=0)

    def run():
        hint_loss(f_s, f_t, adapter)
    return run


def measure_bridge(m, d_s, d_t, k=5, strategy="lp", repetitions=5, warmup=1, seed=0):
    """Wall-clock of one bridge evaluation (loss plus gradients) on random data.

    Inputs are drawn once with ``seed``; ``warmup`` untimed runs precede
    ``repetitions`` timed ones.
    """
    if repetitions < 5:
        raise ValueError("use at least 5 repetitions")
    if strategy == "lp" and m < k + 1:
        raise ValueError(f"m={m} too small for k={k}")
    rng = np.random.default_rng(seed)
    if strategy == "lp":
        run = _lp_bridge(m, d_s, d_t, k, rng)
    elif strategy == "fitnet":
        run = _fitnet_bridge(m, d_s, d_t, rng)
    else:
        raise ValueError(f"no bridge for strategy {strategy!r}")
    for _ in range(warmup):
        run()
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        run()
        samples.append(time.perf_counter() - t0)
    return Timing(statistics.median(samples), max(samples) - min(samples), samples)


@dataclass
class BridgeCostReport:
    m: int
    d_s: int
    d_t: int
    k: int
    model: dict
    ratio: float
    overhead: dict
    measured: dict = field(default_factory=dict)  # strategy -> Timing as dict

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    def table(self):
        rows = [("m", self.m), ("d_S", self.d_s), ("d_T", self.d_t), ("k", self.k),
                ("lp ops m^2(d_S+d_T+k)", self.model["lp"]),
                ("fitnet ops m d_S d_T", self.model["fitnet"]),
                ("analytic ratio", f"{self.ratio:.2f}"),
                ("lp extra params", self.overhead["lp"]),
                ("fitnet extra params", self.overhead["fitnet"])]
        for name, t in self.measured.items():
            rows.append((f"{name} median s", f"{t['median']:.6f} (spread {t['spread']:.6f})"))
        if {"lp", "fitnet"} <= set(self.measured):
            ratio = self.measured["fitnet"]["median"] / self.measured["lp"]["median"]
            rows.append(("measured fitnet/lp", f"{ratio:.2f}"))
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)


def bridge_report(m, d_s, d_t, k=5, repetitions=5, measure=True, seed=0):
    model = bridge_cost_model(m, d_s, d_t, k)
    fields = asdict(model)
    fields.update(lp=model.lp, fitnet=model.fitnet)
    report = BridgeCostReport(m, d_s, d_t, k, fields, model.ratio,
                              {s: param_overhead(s, d_s, d_t) for s in ("lp", "fitnet")})
    if measure:
        for strategy in ("lp", "fitnet"):
            t = measure_bridge(m, d_s, d_t, k, strategy, repetitions, seed=seed)
            report.measured[strategy] = asdict(t)
    return report


def scaling(base_m, base_d_s, base_d_t, k=5, repetitions=5, seed=0):
    """LP bridge time ratios for doubled widths and for a doubled batch."""
    t0 = measure_bridge(base_m, base_d_s, base_d_t, k, "lp", repetitions, seed=seed).median
    t_d = measure_bridge(base_m, 2 * base_d_s, 2 * base_d_t, k, "lp", repetitions,
                         seed=seed).median
    t_m = measure_bridge(2 * base_m, base_d_s, base_d_t, k, "lp", repetitions, seed=seed).median
    return {"base": t0, "double_d": t_d, "double_m": t_m,
            "ratio_d": t_d / t0, "ratio_m": t_m / t0}
