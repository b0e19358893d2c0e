"""Teacher training, student training under each strategy, and evaluation."""

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import BatchPlan, batch_indices
from .losses import DistillConfig, FitNetAdapter, lp_loss, total_loss
from .nn.network import backward, features, forward, predict
from .nn.optim import OptimizerState, optimizer_step, update_arrays

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    seed: int = 0
    optimizer: str = "rmsprop"
    lr: float = 1e-3
    rho: float = 0.9
    momentum: float = 0.0
    weight_decay: float = 0.0
    lr_step: int = 0  # decay the learning rate every lr_step epochs; 0 disables
    lr_decay: float = 0.1
    eval_every: int = 1
    fitnet_stage1_frac: float = 1 / 3
    cache_teacher: bool = True  # precompute frozen-teacher outputs once per run
    distill: DistillConfig = field(default_factory=DistillConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.distill.strategy == "lp" and self.batch_size < 2:
            raise ValueError("the lp strategy needs batches of at least 2 samples")
        if not 0 < self.fitnet_stage1_frac < 1:
            raise ValueError("fitnet_stage1_frac must lie in (0, 1)")

    def optimizer_state(self):
        return OptimizerState(self.optimizer, self.lr, self.rho,
                              momentum=self.momentum, weight_decay=self.weight_decay)

    def lr_at(self, epoch):
        if self.lr_step:
            return self.lr * self.lr_decay ** (epoch // self.lr_step)
        return self.lr


@dataclass
class RunRecord:
    """Per-epoch history and final summary of one training run."""

    strategy: str
    epochs: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def losses(self):
        return [e["loss"] for e in self.epochs]

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for e in self.epochs:
                fh.write(json.dumps(e) + "\n")
            fh.write(json.dumps({"summary": self.summary}) + "\n")

    @classmethod
    def read_jsonl(cls, path):
        epochs, summary = [], {}
        with open(path) as fh:
            for line in fh:
                obj = json.loads(line)
                if "summary" in obj:
                    summary = obj["summary"]
                else:
                    epochs.append(obj)
        steps = [s for e in epochs for s in e.get("step_losses", [])]
        return cls(summary.get("strategy", ""), epochs, steps, summary)


@dataclass
class EvalResult:
    accuracy: float
    per_class: list  # accuracy per class (nan for absent classes)
    counts: list

    def to_dict(self):
        return {"accuracy": self.accuracy,
                "per_class": [None if np.isnan(a) else a for a in self.per_class],
                "counts": self.counts}


def evaluate(net, ds):
    """Top-1 accuracy overall and per class."""
    if net.class_count != ds.class_count:
        raise ValueError(f"network predicts {net.class_count} classes, "
                         f"dataset has {ds.class_count}")
    if len(ds) == 0:
        return EvalResult(float("nan"), [float("nan")] * ds.class_count, [0] * ds.class_count)
    pred = predict(net, ds.inputs).argmax(axis=1)
    hit = pred == ds.labels
    counts = np.bincount(ds.labels, minlength=ds.class_count)
    hits = np.bincount(ds.labels, weights=hit, minlength=ds.class_count)
    with np.errstate(invalid="ignore", divide="ignore"):
        per = hits / counts
    return EvalResult(float(hit.mean()), [float(a) for a in per], [int(c) for c in counts])


def _check_finite(value, epoch):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss at epoch {epoch}")


def train_teacher(net, train, val, cfg):
    """Cross-entropy training with best-validation checkpoint selection.

    ``net`` is trained in place; the returned network is a copy holding the
    parameters of the best validation epoch (the last epoch when ``val`` is
    empty).
    """
    cfg = replace(cfg, distill=replace(cfg.distill, strategy="bp"))
    return _train(net, None, train, val, cfg)


@dataclass
class TeacherOutputs:
    """Frozen-teacher logits and tapped features for a batch or a dataset.

    The teacher never changes during student training, so these can be
    computed once per training set and sliced per mini-batch.
    """

    logits: np.ndarray
    tapped: np.ndarray

    def __getitem__(self, idx):
        return TeacherOutputs(self.logits[idx], self.tapped[idx])

    @classmethod
    def compute(cls, teacher, inputs, batch_size=500):
        logits, tapped = [], []
        for i in range(0, len(inputs), batch_size):
            tr = forward(teacher, inputs[i:i + batch_size])
            logits.append(tr.logits)
            tapped.append(tr.tapped)
        return cls(np.concatenate(logits), np.concatenate(tapped))


@dataclass
class StepResult:
    terms: object
    stage: str


def student_step(student, teacher, inputs, labels, cfg, state, adapter=None,
                 adapter_state=None, stage="kd", teacher_out=None):
    """One iteration: teacher and student forward, losses, backward, update.

    The teacher is only read.  ``stage`` selects the FitNet phase
    (``"hint"`` trains the student up to its guided layer plus the adapter).
    ``teacher_out`` (a :class:`TeacherOutputs` for this batch) skips the
    teacher forward pass.
    """
    dc = cfg.distill
    if dc.strategy == "lp" and dc.gamma and len(labels) < dc.k + 1:
        raise ValueError(f"batch of {len(labels)} too small for k={dc.k} neighbors")
    hint = dc.strategy == "fitnet" and stage == "hint"
    t_trace = teacher_out
    if t_trace is None:
        t_trace = forward(teacher, inputs, upto=teacher.tap_index if hint else None)
    s_trace = forward(student, inputs, upto=student.tap_index if hint else None)
    terms = total_loss(labels, s_trace, t_trace, dc, adapter=adapter, stage=stage)
    grads = backward(student, s_trace, None if hint else terms.logit_grad, terms.tapped_grad)
    optimizer_step(student, grads, state)
    if hint:
        update_arrays(adapter.parameters(), terms.adapter_grads, adapter_state)
    return StepResult(terms, stage)


def _train(net, teacher, train, val, cfg):
    dc = cfg.distill
    record = RunRecord(dc.strategy)
    state = cfg.optimizer_state()
    adapter = adapter_state = None
    stage1 = 0
    if dc.strategy == "fitnet":
        adapter = FitNetAdapter.init(net.tap_dim, teacher.tap_dim, seed=cfg.seed + 1,
                                     dtype=net.dtype)
        adapter_state = cfg.optimizer_state()
        stage1 = max(1, round(cfg.epochs * cfg.fitnet_stage1_frac))
    plan = BatchPlan(cfg.seed, cfg.batch_size)
    cached = None
    if teacher is not None and cfg.cache_teacher:
        cached = TeacherOutputs.compute(teacher, train.inputs)
    best, best_acc, best_epoch = net.copy(), -1.0, -1
    for epoch in range(cfg.epochs):
        stage = "hint" if epoch < stage1 else "kd"
        if epoch == stage1 and stage1:
            state = cfg.optimizer_state()  # fresh accumulators for the second stage
        state.lr = cfg.lr_at(epoch - stage1 if stage == "kd" else epoch)
        if adapter_state is not None:
            adapter_state.lr = state.lr
        t0 = time.perf_counter()
        sums = dict(loss=0.0, ce=0.0, kd=0.0, lp=0.0, hint=0.0)
        steps = []
        for idx in batch_indices(len(train), plan, epoch):
            x, y = train.inputs[idx], train.labels[idx]
            if teacher is None:
                trace = forward(net, x)
                terms = total_loss(y, trace, trace, dc)
                optimizer_step(net, backward(net, trace, terms.logit_grad), state)
            else:
                terms = student_step(net, teacher, x, y, cfg, state, adapter,
                                     adapter_state, stage,
                                     None if cached is None else cached[idx]).terms
            _check_finite(terms.total, epoch)
            steps.append(terms.total)
            for key, val_ in (("loss", terms.total), ("ce", terms.ce), ("kd", terms.kd),
                              ("lp", terms.lp), ("hint", terms.hint)):
                sums[key] += val_ * len(idx)
        seconds = time.perf_counter() - t0
        row = {"epoch": epoch, "stage": stage}
        row.update({k: v / len(train) for k, v in sums.items()})
        row["seconds"] = seconds
        row["step_losses"] = steps
        record.step_losses.extend(steps)
        selectable = stage == "kd" or teacher is None
        if len(val) and selectable and ((epoch + 1) % cfg.eval_every == 0
                                        or epoch == cfg.epochs - 1):
            acc = evaluate(net, val).accuracy
            row["val_acc"] = acc
            if acc > best_acc:
                best, best_acc, best_epoch = net.copy(), acc, epoch
        elif not len(val) and selectable:
            best, best_epoch = net.copy(), epoch
        record.epochs.append(row)
        log.info("epoch %d %s loss %.4f val %s (%.1fs)", epoch, stage, row["loss"],
                 row.get("val_acc"), seconds)
    record.summary = {
        "strategy": dc.strategy,
        "best_epoch": best_epoch,
        "best_val_acc": best_acc if best_acc >= 0 else None,
        "params": net.param_count(),
        "adapter_params": adapter.param_count if adapter is not None else 0,
        "seed": cfg.seed,
        "distill": asdict(dc),
        "train_seconds": sum(e["seconds"] for e in record.epochs),
    }
    if teacher is None:
        return best, record
    return best, record, adapter


def train_student(student, teacher, train, val, cfg):
    """Distillation loop over epochs for ``cfg.distill.strategy``.

    Returns ``(best_student, record, adapter)``; ``adapter`` is ``None``
    except under ``fitnet``.  Neighbors for the LP loss are found only inside
    each mini-batch.  FitNet runs a hint stage (first
    ``fitnet_stage1_frac`` of the epochs) then a KD stage.
    """
    if student.class_count != teacher.class_count:
        raise ValueError("teacher and student disagree on the class count")
    return _train(student, teacher, train, val, cfg)


def lp_term_at(student, teacher, inputs, cfg):
    """LP loss of ``student`` on one batch, computed from scratch."""
    from .losses import affinity
    g = affinity(forward(teacher, inputs).tapped, cfg)
    return lp_loss(forward(student, inputs).tapped, g)


# -- embeddings -----------------------------------------------------------------

def layer_index(net, layer):
    if layer == "tap":
        return net.tap_index
    if layer == "penultimate":
        return net.penultimate_index()
    return int(layer)


def export_embeddings(net, ds, layer="penultimate", path=None):
    """Feature vectors of ``layer`` for every sample, in dataset order.

    Returns ``(ids, labels, feats)`` and, when ``path`` is given, writes a CSV
    with columns ``id,label,f0,...``.
    """
    feats = features(net, ds.inputs, layer_index(net, layer))
    ids = np.arange(len(ds))
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "label"] + [f"f{j}" for j in range(feats.shape[1])])
            for i, lab, row in zip(ids, ds.labels, feats):
                w.writerow([int(i), int(lab)] + [repr(float(v)) for v in row])
    return ids, ds.labels.copy(), feats


def read_embeddings(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    labels = np.array([int(r[1]) for r in rows], dtype=np.int64)
    feats = np.array([[float(v) for v in r[2:]] for r in rows], dtype=np.float32)
    return ids, labels, feats


def one_nn_accuracy(train_feats, train_labels, test_feats, test_labels, chunk=500):
    """Accuracy of a 1-nearest-neighbor classifier in feature space."""
    a = np.asarray(train_feats, dtype=np.float64)
    sq = (a * a).sum(axis=1)
    hits = 0
    for i in range(0, len(test_feats), chunk):
        b = np.asarray(test_feats[i:i + chunk], dtype=np.float64)
        d = sq[None, :] - 2.0 * b @ a.T
        hits += int((train_labels[d.argmin(axis=1)] == test_labels[i:i + chunk]).sum())
    return hits / len(test_feats)


# -- hyper-parameter sweep ------------------------------------------------------

def sweep(make_student, teacher, train, val, base_cfg, ks, gammas, path=None):
    """Train one LP student per ``(k, gamma)`` grid point with a fixed seed.

    ``make_student()`` must return a freshly initialized student.  Returns a
    list of row dicts and optionally writes them as CSV.
    """
    if not ks or not gammas:
        raise ValueError("sweep grid must be nonempty")
    rows = []
    for k in ks:
        for gamma in gammas:
            dc = replace(base_cfg.distill, strategy="lp", k=int(k), gamma=float(gamma))
            cfg = replace(base_cfg, distill=dc)
            net, record, _ = train_student(make_student(), teacher, train, val, cfg)
            rows.append({"k": int(k), "gamma": float(gamma),
                         "val_acc": record.summary["best_val_acc"],
                         "final_loss": record.losses[-1]})
            log.info("sweep k=%s gamma=%s val=%s", k, gamma, rows[-1]["val_acc"])
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return rows
