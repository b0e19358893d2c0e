"""Named architectures used by the CLI and the desk-scale experiments.

Each builder returns ``(specs, input_shape, tap_index)``.  The MNIST pair
share a convolutional trunk; the student halves every convolution and, in
the LeNet++ manner, squeezes its features through a 3-D layer that feeds
the softmax classifier.
"""

from .nn.layers import conv2d, dense, flatten, maxpool2d, relu


def mnist_cnn(width=16, hidden=None, feature_dim=3):
    """Two conv/pool stages then either a ReLU head of ``hidden`` units or a
    linear ``feature_dim`` bottleneck before the classifier.

    The tap is the layer feeding the classifier.
    """
    specs = [
        conv2d(1, width, 5), relu(), maxpool2d(2),
        conv2d(width, 2 * width, 5), relu(), maxpool2d(2),
        flatten(),
    ]
    if hidden:
        specs += [dense(2 * width * 16, hidden), relu(), dense(hidden, 10)]
    else:
        specs += [dense(2 * width * 16, feature_dim), dense(feature_dim, 10)]
    return specs, (1, 28, 28), len(specs) - 2


def mnist_teacher():
    return mnist_cnn(16, hidden=64)


def mnist_student():
    # half the filters, and a 3-D embedding feeding the classifier
    return mnist_cnn(8, feature_dim=3)


def mlp(dim, hidden, classes, feature_dim=None):
    specs = [dense(dim, hidden), relu()]
    if feature_dim:
        specs += [dense(hidden, feature_dim), dense(feature_dim, classes)]
    else:
        specs += [dense(hidden, classes)]
    return specs, (dim,), len(specs) - 2


ARCHS = {
    "mnist-teacher": mnist_teacher,
    "mnist-student": mnist_student,
}


def build(name, dim=None, classes=None):
    """Resolve an architecture name; ``mlp-H`` and ``mlp-H-F`` need ``dim``/``classes``."""
    if name in ARCHS:
        return ARCHS[name]()
    if name.startswith("mlp-"):
        parts = [int(p) for p in name.split("-")[1:]]
        return mlp(dim, parts[0], classes, parts[1] if len(parts) > 1 else None)
    raise ValueError(f"unknown architecture {name!r}")
