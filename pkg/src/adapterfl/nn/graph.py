from __future__ import annotations

from collections import OrderedDict
from typing import Sequence

import numpy as np

from .layers import Module, Parameter, Sequential, ShapeError


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch size {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    return loss, grad / n


class ModelGraph(Sequential):
    """An executable layer sequence for (N, C, H, W) inputs.

    Boundary ``b`` is the point after the first ``b`` top-level layers, so
    boundary 0 is the raw input and boundary ``len(self)`` the logits.
    """

    def __init__(self, layers: Sequence[tuple[str, Module]], input_shape: tuple[int, int, int],
                 name: str = "model"):
        super().__init__(layers)
        self.input_shape = tuple(input_shape)
        self.name = name
        self.dtype = next((p.data.dtype for _, p in self.named_parameters()), np.dtype(np.float32))

    @property
    def num_outputs(self) -> int:
        return self.output_shape(self.input_shape)[0]

    def boundary_shapes(self) -> list[tuple[int, ...]]:
        shapes = [self.input_shape]
        shape = self.input_shape
        for name, layer in self.layers:
            try:
                shape = layer.output_shape(shape)
            except ShapeError as e:
                raise e.under(name) from None
            shapes.append(shape)
        return shapes

    def forward(self, x, train=False, capture: Sequence[int] | None = None):
        """Run the model. With ``capture``, also record activations at those boundaries
        in ``self.captured`` (a dict boundary -> array)."""
        x = np.asarray(x)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            first = self.layers[0][0] if self.layers else "<input>"
            raise ShapeError(first, f"(N, {', '.join(map(str, self.input_shape))})", tuple(x.shape))
        x = x.astype(self.dtype, copy=False)
        slots = dict.fromkeys(capture) if capture is not None else None
        if slots is not None and 0 in slots:
            slots[0] = x
        out = self._run(x, train, slots)
        self.captured = slots or {}
        return out

    def astype(self, dtype):
        super().astype(dtype)
        self.dtype = np.dtype(dtype)
        return self


def parameters(model: Module) -> "OrderedDict[str, Parameter]":
    return OrderedDict(model.named_parameters())


def param_count(model: Module) -> int:
    """Trainable element count (running statistics excluded)."""
    return int(sum(p.size for _, p in model.named_parameters()))


def state_dict(model: Module) -> "OrderedDict[str, np.ndarray]":
    """Copies of all parameters followed by all buffers."""
    out = OrderedDict((n, p.data.copy()) for n, p in model.named_parameters())
    out.update((n, b.copy()) for n, b in model.named_buffers())
    return out


def load_state_dict(model: Module, state: dict[str, np.ndarray], strict: bool = True) -> None:
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    if strict:
        missing = (set(params) | set(buffers)) - set(state)
        extra = set(state) - set(params) - set(buffers)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
    for name, value in state.items():
        if name in params:
            p = params[name]
            if p.data.shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.data.shape}")
            p.data[...] = value
        elif name in buffers:
            if buffers[name].shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != {buffers[name].shape}")
            model.set_buffer(name, value)


def zero_grad(model: Module) -> None:
    for _, p in model.named_parameters():
        p.grad[...] = 0


def loss_and_grads(model: ModelGraph, batch: np.ndarray,
                   labels: np.ndarray) -> tuple[float, "OrderedDict[str, Parameter]"]:
    """Forward, mean cross-entropy, backward. Gradients are written into (not added to)
    each ``Parameter.grad``."""
    zero_grad(model)
    logits = model.forward(batch, train=True)
    loss, dlogits = cross_entropy(logits, labels)
    model.backward(dlogits)
    return loss, parameters(model)
