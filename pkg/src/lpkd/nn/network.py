"""Sequential networks with a designated feature-tap layer."""

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .layers import ShapeError


@dataclass
class Network:
    """An ordered layer stack plus its parameters.

    ``tap_index`` names the layer whose (flattened) output is exposed as the
    network's feature for distillation: the hint layer of a teacher or the
    guided layer of a student.
    """

    specs: list
    input_shape: tuple
    params: list  # params[i] is the list of arrays owned by layer i
    tap_index: int
    class_count: int
    shapes: list = field(default_factory=list)  # per-sample output shape of each layer

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        if not self.shapes:
            self.shapes = infer_shapes(self.specs, self.input_shape)
        if not 0 <= self.tap_index < len(self.specs):
            raise ValueError(f"tap_index {self.tap_index} outside [0, {len(self.specs)})")
        if self.shapes[-1] != (self.class_count,):
            raise ShapeError(
                f"last layer {self.specs[-1]} outputs {self.shapes[-1]}, "
                f"expected ({self.class_count},) logits")
        for i, spec in enumerate(self.specs):
            want = [tuple(s) for s in L.param_shapes(spec)]
            got = [a.shape for a in self.params[i]]
            if want != got:
                raise ShapeError(f"layer {i} ({spec}) expects params {want}, got {got}")

    @property
    def tap_dim(self):
        return int(np.prod(self.shapes[self.tap_index]))

    @property
    def dtype(self):
        for group in self.params:
            for arr in group:
                return arr.dtype
        return np.dtype(np.float32)

    def parameters(self):
        """Flat list of parameter arrays in declaration order."""
        return [a for group in self.params for a in group]

    def param_count(self):
        return sum(L.param_count(s) for s in self.specs)

    def copy(self):
        return Network(list(self.specs), self.input_shape,
                       [[a.copy() for a in g] for g in self.params],
                       self.tap_index, self.class_count, list(self.shapes))

    def penultimate_index(self):
        """Index of the layer feeding the final (logit) layer."""
        if len(self.specs) < 2:
            raise ValueError("network has no penultimate layer")
        return len(self.specs) - 2


def infer_shapes(specs, input_shape):
    shapes = []
    shape = tuple(input_shape)
    prev = "input"
    for i, spec in enumerate(specs):
        try:
            shape = L.output_shape(spec, shape)
        except ShapeError as exc:
            raise ShapeError(f"layer {i} ({spec}) cannot follow {prev}: {exc}") from None
        shapes.append(shape)
        prev = f"layer {i} ({spec}) with output {shape}"
    return shapes


def init_network(specs, input_shape, seed, scheme="scaled", low=-0.005, high=0.005,
                 tap_index=None, class_count=None, dtype=np.float32):
    """Build a network with freshly drawn parameters.

    ``scheme="uniform"`` draws every parameter (biases included) i.i.d. from
    ``U(low, high)``.  ``scheme="scaled"`` draws weights from a He-style
    uniform ``U(-sqrt(6/fan_in), sqrt(6/fan_in))`` and zeroes the biases.

    ``tap_index`` defaults to the architectural midpoint and ``class_count``
    to the width of the final layer.
    """
    specs = list(specs)
    shapes = infer_shapes(specs, input_shape)
    rng = np.random.default_rng(seed)
    params = []
    for spec in specs:
        group = []
        for j, shape in enumerate(L.param_shapes(spec)):
            if scheme == "uniform":
                arr = rng.uniform(low, high, size=shape)
            elif scheme == "scaled":
                if j == 0:
                    bound = np.sqrt(6.0 / L.fan_in(spec))
                    arr = rng.uniform(-bound, bound, size=shape)
                else:
                    arr = np.zeros(shape)
            else:
                raise ValueError(f"unknown init scheme {scheme!r}")
            group.append(arr.astype(dtype))
        params.append(group)
    if tap_index is None:
        tap_index = (len(specs) - 1) // 2
    if class_count is None:
        class_count = shapes[-1][0]
    return Network(specs, input_shape, params, tap_index, class_count, shapes)


@dataclass
class ForwardTrace:
    """Everything one forward pass produced for a mini-batch."""

    inputs: np.ndarray
    outputs: list
    caches: list
    tap_index: int

    @property
    def logits(self):
        return self.outputs[-1]

    @property
    def tapped(self):
        out = self.outputs[self.tap_index]
        return out.reshape(out.shape[0], -1)

    def layer_output(self, index):
        out = self.outputs[index]
        return out.reshape(out.shape[0], -1)


def forward(net, inputs, upto=None):
    """Run ``net`` on a batch; stop after layer ``upto`` if given."""
    inputs = np.asarray(inputs)
    if inputs.shape[1:] != net.input_shape:
        raise ShapeError(f"expected input shape (m, {', '.join(map(str, net.input_shape))}), "
                         f"got {inputs.shape}")
    x = inputs.astype(net.dtype, copy=False)
    outputs, caches = [], []
    last = len(net.specs) - 1 if upto is None else upto
    for spec, params in zip(net.specs[:last + 1], net.params[:last + 1]):
        x, cache = L.forward(spec, params, x)
        outputs.append(x)
        caches.append(cache)
    return ForwardTrace(inputs, outputs, caches, net.tap_index)


def backward(net, trace, logit_grad, tapped_grad=None):
    """Gradients of every parameter given upstream gradients.

    ``logit_grad`` is injected at the final layer and ``tapped_grad`` (shaped
    like ``trace.tapped``) is added at the tap layer, so parameters before the
    tap receive both contributions.  Pass ``logit_grad=None`` to backpropagate
    from the tap layer only.
    """
    n = len(trace.outputs)
    if n != len(net.specs) and logit_grad is not None:
        raise ShapeError("trace was truncated; cannot inject a logit gradient")
    if trace.tap_index != net.tap_index:
        raise ValueError("trace was produced with a different tap index")
    m = trace.inputs.shape[0]
    grads = [[np.zeros_like(a) for a in g] for g in net.params]
    if logit_grad is not None:
        logit_grad = np.asarray(logit_grad, dtype=net.dtype)
        if logit_grad.shape != trace.logits.shape:
            raise ShapeError(f"logit_grad shape {logit_grad.shape} != logits {trace.logits.shape}")
        start, g = n - 1, logit_grad
    else:
        if tapped_grad is None:
            return grads
        start, g = net.tap_index, None
    if tapped_grad is not None:
        tapped_grad = np.asarray(tapped_grad, dtype=net.dtype)
        if tapped_grad.shape != (m, net.tap_dim):
            raise ShapeError(f"tapped_grad shape {tapped_grad.shape} != ({m}, {net.tap_dim})")
    for i in range(start, -1, -1):
        if i == net.tap_index and tapped_grad is not None:
            tg = tapped_grad.reshape(trace.outputs[i].shape)
            g = tg if g is None else g + tg
        g, pg = L.backward(net.specs[i], net.params[i], trace.caches[i], g,
                           need_input_grad=i > 0)
        grads[i] = pg
    return grads


def predict(net, inputs, batch_size=1000):
    """Logits for ``inputs`` computed in chunks."""
    out = [forward(net, inputs[i:i + batch_size]).logits
           for i in range(0, len(inputs), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.class_count), net.dtype)


def features(net, inputs, layer, batch_size=1000):
    """Flattened outputs of layer ``layer`` for ``inputs`` computed in chunks."""
    out = [forward(net, inputs[i:i + batch_size], upto=layer).layer_output(layer)
           for i in range(0, len(inputs), batch_size)]
    return np.concatenate(out)
