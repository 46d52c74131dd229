"""Prototype model constructors (CIFAR-adapted) and their eligible cut points."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import (BatchNorm2d, Conv2d, Dense, Flatten, GlobalAvgPool, InvertedResidual, MaxPool,
                 ModelGraph, ReLU, ReLU6, ResidualBlock, param_count)

ARCHS = ("cnn_s", "mobilenet_v2", "resnet18", "vgg16")
LEVELS = ("S", "M", "L")
GROUPS = {
    "standard": ("cnn_s", "mobilenet_v2", "resnet18"),
    "large": ("mobilenet_v2", "resnet18", "vgg16"),
}
# Hidden width of the small CNN's first dense layer; lands its count near 0.21 M.
CNN_HIDDEN = 96
_VGG16 = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")
_MBV2 = ((1, 16, 1, 1), (6, 24, 2, 1), (6, 32, 3, 2), (6, 64, 4, 2),
         (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1))


@dataclass
class PrototypeModel:
    arch_id: str
    level: str
    graph: ModelGraph
    cut_candidates: list[int]
    num_classes: int
    width: float = 1.0
    seed: int = 0
    build_args: dict = field(default_factory=dict)

    @property
    def params(self) -> int:
        return param_count(self.graph)


def _scale(c: int, width: float) -> int:
    return max(1, int(round(c * width)))


def _cnn_s(num_classes, input_shape, width, rng, dtype):
    c1, c2, hid = _scale(32, width), _scale(64, width), _scale(CNN_HIDDEN, width)
    ch, h, w = input_shape
    layers = [
        ("conv1", Conv2d(ch, c1, 5, rng=rng, dtype=dtype)), ("relu1", ReLU()), ("pool1", MaxPool(2)),
        ("conv2", Conv2d(c1, c2, 5, rng=rng, dtype=dtype)), ("relu2", ReLU()), ("pool2", MaxPool(2)),
        ("flatten", Flatten()),
    ]
    probe = ModelGraph(layers, input_shape)
    flat = probe.output_shape(input_shape)[0]
    layers += [("fc1", Dense(flat, hid, rng=rng, dtype=dtype)), ("relu3", ReLU()),
               ("fc2", Dense(hid, num_classes, rng=rng, dtype=dtype))]
    return layers, [2, 3, 5, 6]


def _basic_block(cin, cout, stride, rng, dtype):
    body = [("conv1", Conv2d(cin, cout, 3, stride, 1, bias=False, rng=rng, dtype=dtype)),
            ("bn1", BatchNorm2d(cout, dtype=dtype)), ("relu", ReLU()),
            ("conv2", Conv2d(cout, cout, 3, 1, 1, bias=False, rng=rng, dtype=dtype)),
            ("bn2", BatchNorm2d(cout, dtype=dtype))]
    proj = None
    if stride != 1 or cin != cout:
        proj = [("conv", Conv2d(cin, cout, 1, stride, bias=False, rng=rng, dtype=dtype)),
                ("bn", BatchNorm2d(cout, dtype=dtype))]
    return ResidualBlock(body, proj)


def _resnet18(num_classes, input_shape, width, rng, dtype):
    c0 = _scale(64, width)
    layers = [("conv1", Conv2d(input_shape[0], c0, 3, 1, 1, bias=False, rng=rng, dtype=dtype)),
              ("bn1", BatchNorm2d(c0, dtype=dtype)), ("relu", ReLU())]
    cuts = [len(layers)]
    cin = c0
    for stage, (c, stride) in enumerate(((64, 1), (128, 2), (256, 2), (512, 2)), start=1):
        cout = _scale(c, width)
        for b in range(2):
            layers.append((f"layer{stage}_{b}", _basic_block(cin, cout, stride if b == 0 else 1, rng, dtype)))
            cin = cout
        cuts.append(len(layers))
    layers += [("pool", GlobalAvgPool()), ("flatten", Flatten()),
               ("fc", Dense(cin, num_classes, rng=rng, dtype=dtype))]
    return layers, cuts


def _mobilenet_v2(num_classes, input_shape, width, rng, dtype):
    c0 = _scale(32, width)
    layers = [("conv1", Conv2d(input_shape[0], c0, 3, 1, 1, bias=False, rng=rng, dtype=dtype)),
              ("bn1", BatchNorm2d(c0, dtype=dtype)), ("relu1", ReLU6())]
    cuts = [len(layers)]
    cin = c0
    idx = 0
    for t, c, n, s in _MBV2:
        cout = _scale(c, width)
        for i in range(n):
            layers.append((f"block{idx}", InvertedResidual(cin, cout, t, s if i == 0 else 1, rng=rng, dtype=dtype)))
            cin = cout
            idx += 1
            cuts.append(len(layers))
    last = _scale(1280, width)
    layers += [("conv2", Conv2d(cin, last, 1, bias=False, rng=rng, dtype=dtype)),
               ("bn2", BatchNorm2d(last, dtype=dtype)), ("relu2", ReLU6())]
    cuts.append(len(layers))
    layers += [("pool", GlobalAvgPool()), ("flatten", Flatten()),
               ("fc", Dense(last, num_classes, rng=rng, dtype=dtype))]
    return layers, cuts


def _vgg16(num_classes, input_shape, width, rng, dtype):
    layers, cuts = [], []
    cin = input_shape[0]
    conv_i = pool_i = 0
    for v in _VGG16:
        if v == "M":
            pool_i += 1
            layers.append((f"pool{pool_i}", MaxPool(2)))
            cuts.append(len(layers))
            continue
        conv_i += 1
        cout = _scale(v, width)
        layers += [(f"conv{conv_i}", Conv2d(cin, cout, 3, 1, 1, rng=rng, dtype=dtype)),
                   (f"bn{conv_i}", BatchNorm2d(cout, dtype=dtype)), (f"relu{conv_i}", ReLU())]
        cin = cout
    layers.append(("flatten", Flatten()))
    flat = ModelGraph(layers, input_shape).output_shape(input_shape)[0]
    hid = _scale(4096, width)
    layers += [("fc1", Dense(flat, hid, rng=rng, dtype=dtype)), ("relu_fc1", ReLU()),
               ("fc2", Dense(hid, hid, rng=rng, dtype=dtype)), ("relu_fc2", ReLU()),
               ("fc3", Dense(hid, num_classes, rng=rng, dtype=dtype))]
    return layers, cuts


_BUILDERS = {"cnn_s": _cnn_s, "resnet18": _resnet18, "mobilenet_v2": _mobilenet_v2, "vgg16": _vgg16}


def build(arch_id: str, num_classes: int = 10, input_shape=(3, 32, 32), width: float = 1.0,
          seed: int = 0, level: str = "", dtype=np.float32) -> PrototypeModel:
    """Construct a freshly initialised prototype.

    ``width`` scales every channel/hidden width (1.0 is the canonical model); it exists
    so that desk-scale experiments can run the same architectures cheaply.
    """
    if arch_id not in _BUILDERS:
        raise ValueError(f"unknown arch_id {arch_id!r}; expected one of {ARCHS}")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    input_shape = tuple(int(v) for v in input_shape)
    if len(input_shape) != 3:
        raise ValueError(f"input_shape must be (C, H, W), got {input_shape}")
    rng = np.random.default_rng(seed)
    layers, cuts = _BUILDERS[arch_id](num_classes, input_shape, width, rng, dtype)
    graph = ModelGraph(layers, input_shape, name=arch_id)
    shapes = graph.boundary_shapes()
    # adapters are convolutional, so only spatial boundaries qualify
    cuts = [c for c in cuts if 0 < c < len(graph) and len(shapes[c]) == 3]
    if not cuts:
        raise ValueError(f"{arch_id} has no eligible cut for input {input_shape}")
    return PrototypeModel(arch_id, level, graph, cuts, num_classes, width, seed,
                          dict(num_classes=num_classes, input_shape=list(input_shape), width=width, seed=seed))


def default_zoo(group: str = "standard", num_classes: int = 10, input_shape=(3, 32, 32),
                width: float = 1.0, seed: int = 0, dtype=np.float32) -> list[PrototypeModel]:
    """The three prototypes of a group, ordered S < M < L by parameter count."""
    if group not in GROUPS:
        raise ValueError(f"unknown zoo group {group!r}; expected one of {sorted(GROUPS)}")
    zoo = [build(arch, num_classes, input_shape, width, seed + i, level=lvl, dtype=dtype)
           for i, (arch, lvl) in enumerate(zip(GROUPS[group], LEVELS))]
    counts = [m.params for m in zoo]
    if counts != sorted(counts):
        raise ValueError(f"zoo {group} not ordered by size at width={width}: {counts}")
    return zoo
