"""Distillation objectives and their gradients.

Covers the softened softmax and soft-target (KD) loss, the FitNet hint loss
with its fully-connected adapter, the teacher-feature kNN affinity graph and
the locality preserving (LP) loss built on it, and the combined objective
consumed by the trainer.

All reductions run in float64; gradients are returned in the dtype of the
features or logits they refer to.
"""

from dataclasses import dataclass, field

import numpy as np

EPS = 1e-12
SIGMA2_FLOOR = 1e-12
STRATEGIES = ("bp", "kd", "fitnet", "lp")
SIGMA_POLICIES = ("batch_mean", "fixed")


@dataclass
class DistillConfig:
    """Scalar knobs of the distillation objective.

    ``one_sided`` skips the symmetrization of the affinity matrix and
    applies the one-sided update ``1/m * sum_j alpha_ij (f_i - f_j)`` in
    place of the exact gradient of the LP loss.
    """

    tau: float = 0.5
    lam: float = 2.0
    gamma: float = 1.0
    k: int = 5
    sigma_policy: str = "batch_mean"
    sigma: float = 1.0
    strategy: str = "lp"
    one_sided: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not (self.lam >= 0 and np.isfinite(self.lam)):
            raise ValueError("lambda must be finite and nonnegative")
        if not (self.gamma >= 0 and np.isfinite(self.gamma)):
            raise ValueError("gamma must be finite and nonnegative")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError("k must be a positive integer")
        if self.sigma_policy not in SIGMA_POLICIES:
            raise ValueError(f"sigma_policy must be one of {SIGMA_POLICIES}")
        if self.sigma_policy == "fixed" and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")


# -- soft targets and cross-entropy ------------------------------------------

@dataclass
class SoftTargets:
    probs: np.ndarray
    tau: float


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def soften_softmax(logits, tau):
    """Row-wise ``softmax(logits / tau)``."""
    if not tau > 0:
        raise ValueError("temperature tau must be positive")
    return SoftTargets(softmax(np.asarray(logits, dtype=np.float64) / tau), tau)


def one_hot(labels, class_count):
    labels = np.asarray(labels)
    out = np.zeros((len(labels), class_count))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _targets(labels, class_count):
    labels = np.asarray(labels)
    return one_hot(labels, class_count) if labels.ndim == 1 else labels.astype(np.float64)


def cross_entropy(targets, probs):
    """Batch mean of ``-sum_c t_c log p_c`` with ``p`` clamped at 1e-12."""
    t = np.asarray(targets, dtype=np.float64)
    p = np.asarray(probs, dtype=np.float64)
    if t.shape != p.shape:
        raise ValueError(f"targets shape {t.shape} != probs shape {p.shape}")
    return float(-(t * np.log(np.maximum(p, EPS))).sum(axis=1).mean())


@dataclass
class KDTerms:
    value: float
    ce: float
    kd: float
    logit_grad: np.ndarray


def kd_loss(labels, student_logits, soft_t, soft_s, lam):
    """``H(y, P_S) + lam * H(tau(P_T), tau(P_S))`` and its student-logit gradient.

    The teacher's soft targets are constants.  With ``lam == 0`` the soft
    term contributes nothing to the gradient.
    """
    if soft_t.tau != soft_s.tau:
        raise ValueError(f"temperature mismatch: teacher {soft_t.tau}, student {soft_s.tau}")
    z = np.asarray(student_logits)
    m, K = z.shape
    y = _targets(labels, K)
    p = softmax(z)
    ce = cross_entropy(y, p)
    kd = cross_entropy(soft_t.probs, soft_s.probs)
    grad = (p - y) / m
    if lam:
        grad = grad + lam * (soft_s.probs - soft_t.probs) / (soft_s.tau * m)
    return KDTerms(ce + lam * kd, ce, kd, grad.astype(z.dtype))


# -- FitNet hint loss ---------------------------------------------------------

@dataclass
class FitNetAdapter:
    """Fully-connected map ``r(f) = f W^T + b`` from student to teacher features."""

    weight: np.ndarray  # (d_T, d_S)
    bias: np.ndarray  # (d_T,)

    @classmethod
    def init(cls, d_s, d_t, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        bound = np.sqrt(6.0 / d_s)
        return cls(rng.uniform(-bound, bound, size=(d_t, d_s)).astype(dtype),
                   np.zeros(d_t, dtype=dtype))

    @property
    def param_count(self):
        return self.weight.size + self.bias.size

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, f_s):
        return f_s @ self.weight.T + self.bias


@dataclass
class HintTerms:
    value: float
    grad_f_s: np.ndarray
    grad_weight: np.ndarray
    grad_bias: np.ndarray


def hint_loss(f_s, f_t, adapter):
    """Half the batch-mean squared distance between ``r(f_S)`` and ``f_T``."""
    d_t, d_s = adapter.weight.shape
    if f_s.ndim != 2 or f_s.shape[1] != d_s:
        raise ValueError(f"student features {f_s.shape} do not match adapter input {d_s}")
    if f_t.shape != (f_s.shape[0], d_t):
        raise ValueError(f"teacher features {f_t.shape} do not match adapter output {d_t}")
    m = f_s.shape[0]
    diff = adapter(f_s) - f_t
    value = 0.5 * float(np.square(diff, dtype=np.float64).sum()) / m
    g = diff / diff.dtype.type(m)
    return HintTerms(value, (g @ adapter.weight).astype(f_s.dtype),
                     g.T @ f_s, g.sum(axis=0))


# -- affinity graph and LP loss -----------------------------------------------

@dataclass
class AffinityGraph:
    neighbors: np.ndarray  # (m, k) indices, nearest first, self excluded
    alpha: np.ndarray  # (m, m) float64 weights in [0, 1]
    sigma2: float
    symmetrized: bool

    @property
    def m(self):
        return self.alpha.shape[0]


def pairwise_sq_dists(f):
    """Squared Euclidean distances between rows, via a centered Gram matrix."""
    x = np.array(f, dtype=np.float64)
    x -= x.mean(axis=0)
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def knn_neighbors(f_t, k, dists=None):
    """Each row's ``k`` nearest other rows, nearest first, ties to lower index.

    Selection is a per-row partial partition followed by an ordering of the
    (usually exactly ``k``) candidates at or below the k-th distance.
    """
    m = len(f_t)
    if not 1 <= k <= m - 1:
        raise ValueError(f"k={k} must lie in [1, m-1] for a batch of m={m}")
    d = pairwise_sq_dists(f_t) if dists is None else dists.copy()
    np.fill_diagonal(d, np.inf)
    kth = np.partition(d, k - 1, axis=1)[:, k - 1:k]
    mask = d <= kth
    counts = mask.sum(axis=1)
    out = np.empty((m, k), dtype=np.int64)
    exact = counts == k
    if exact.any():
        rows = np.flatnonzero(exact)
        cols = np.nonzero(mask[rows])[1].reshape(len(rows), k)
        vals = np.take_along_axis(d[rows], cols, axis=1)
        order = np.argsort(vals, axis=1, kind="stable")
        out[rows] = np.take_along_axis(cols, order, axis=1)
    for i in np.flatnonzero(~exact):
        cand = np.flatnonzero(mask[i])
        out[i] = cand[np.argsort(d[i, cand], kind="stable")[:k]]
    return out


def affinity(f_t, cfg):
    """Gaussian-kernel kNN affinities of the teacher features of one batch.

    ``alpha_ij = exp(-|f_i - f_j|^2 / sigma^2)`` for ``j`` among the ``k``
    nearest neighbors of ``i`` and 0 otherwise.  Under ``batch_mean`` the
    bandwidth ``sigma^2`` is the mean selected squared distance (floored at
    1e-12).  Unless ``cfg.one_sided`` is set the result is symmetrized as
    ``max(alpha, alpha^T)``.
    """
    d = pairwise_sq_dists(f_t)
    nbr = knn_neighbors(f_t, cfg.k, dists=d)
    rows = np.repeat(np.arange(len(d)), cfg.k)
    sel = d[rows, nbr.ravel()]
    if cfg.sigma_policy == "batch_mean":
        sigma2 = max(float(sel.mean()), SIGMA2_FLOOR)
    else:
        sigma2 = float(cfg.sigma) ** 2
    alpha = np.zeros_like(d)
    alpha[rows, nbr.ravel()] = np.exp(-sel / sigma2)
    symmetric = not cfg.one_sided
    if symmetric:
        alpha = np.maximum(alpha, alpha.T)
    return AffinityGraph(nbr, alpha, sigma2, symmetric)


def _check(f_s, g):
    if f_s.ndim != 2 or f_s.shape[0] != g.m:
        raise ValueError(f"features {f_s.shape} do not match a graph over {g.m} samples")


def lp_loss(f_s, g):
    """``1/(2m) * sum_ij alpha_ij |f_i - f_j|^2`` over the student features."""
    f_s = np.asarray(f_s)
    _check(f_s, g)
    m = g.m
    x = f_s.astype(np.float64)
    x -= x.mean(axis=0)
    a = g.alpha
    sq = np.einsum("ij,ij->i", x, x)
    weight = a.sum(axis=1) + a.sum(axis=0)
    cross = np.einsum("ij,ij->", x, a @ x)
    return max(float(sq @ weight - 2.0 * cross), 0.0) / (2 * m)


def lp_grad(f_s, g, one_sided=False, strict=False):
    """Gradient of :func:`lp_loss` with respect to each student feature row.

    The exact gradient is ``1/m * sum_j (alpha_ij + alpha_ji)(f_i - f_j)``,
    i.e. ``2/m * sum_j alpha_ij (f_i - f_j)`` for a symmetric graph.  With
    ``one_sided`` the update ``1/m * sum_j alpha_ij (f_i - f_j)``
    is applied as is.  ``strict`` rejects graphs that are not symmetric.
    """
    f_s = np.asarray(f_s)
    _check(f_s, g)
    a = g.alpha
    if strict and not np.array_equal(a, a.T):
        raise ValueError("affinity graph is not symmetric")
    x = f_s.astype(np.float64)
    s = a if one_sided else a + a.T
    grad = s.sum(axis=1)[:, None] * x
    grad -= s @ x
    grad /= g.m
    return grad.astype(f_s.dtype, copy=False)


# -- combined objective -------------------------------------------------------

@dataclass
class LossTerms:
    """Scalar loss, its breakdown, and the upstream gradients for backward."""

    total: float
    ce: float = 0.0
    kd: float = 0.0
    lp: float = 0.0
    hint: float = 0.0
    logit_grad: np.ndarray = None
    tapped_grad: np.ndarray = None
    adapter_grads: list = field(default_factory=list)
    graph: AffinityGraph = None


def total_loss(labels, student, teacher, cfg, adapter=None, stage="kd"):
    """Objective selected by ``cfg.strategy`` on one batch.

    ``student`` and ``teacher`` are forward traces (anything exposing
    ``logits`` and ``tapped``).  Strategies:

    - ``bp``: cross-entropy only
    - ``kd``: ``CE + lam * KD``
    - ``lp``: ``CE + lam * KD + gamma * LP`` with the graph built from the
      teacher's tapped features
    - ``fitnet``: the hint loss when ``stage == "hint"``, otherwise KD

    Terms whose weight is zero add nothing to the gradients.
    """
    if cfg.strategy == "fitnet" and stage == "hint":
        if adapter is None:
            raise ValueError("fitnet strategy needs an adapter")
        h = hint_loss(student.tapped, teacher.tapped, adapter)
        return LossTerms(h.value, hint=h.value, tapped_grad=h.grad_f_s,
                         adapter_grads=[h.grad_weight, h.grad_bias])
    if cfg.strategy == "fitnet" and adapter is None:
        raise ValueError("fitnet strategy needs an adapter")
    lam = 0.0 if cfg.strategy == "bp" else cfg.lam
    soft_t = soften_softmax(teacher.logits, cfg.tau)
    soft_s = soften_softmax(student.logits, cfg.tau)
    terms = kd_loss(labels, student.logits, soft_t, soft_s, lam)
    out = LossTerms(terms.value, ce=terms.ce, kd=terms.kd, logit_grad=terms.logit_grad)
    if cfg.strategy == "lp" and cfg.gamma:
        g = affinity(teacher.tapped, cfg)
        f_s = student.tapped
        out.graph = g
        out.lp = lp_loss(f_s, g)
        out.total += cfg.gamma * out.lp
        out.tapped_grad = (cfg.gamma * lp_grad(f_s, g, cfg.one_sided)).astype(f_s.dtype)
    return out
