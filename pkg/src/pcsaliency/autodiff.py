"""Minimal reverse-mode differentiation over dense float64 arrays.

A program is a Wengert list of ``(output, primitive, inputs)`` triples.  Any
name that is read but never written is a leaf and must be bound when the
program is evaluated.  Float leaves (parameters, the input cloud) receive
gradients; integer leaves (labels, row indices) are constants.

Supported primitives::

    identity      (x)            -> x
    affine        (x, W, b)      -> x @ W + b          over the last axis
    relu          (x)            -> max(x, 0)          subgradient 0 at 0
    maxpool       (x)            -> max over axis -2   records argmax
    softmax_xent  (logits, y)    -> mean cross-entropy against integer labels
    gather        (x, idx)       -> x[..., idx, :]     row gather / drop

Example::

    prog = [("h", "affine", ["x", "W", "b"]), ("u", "maxpool", ["h"])]
    tape = evaluate(prog, {"x": cloud, "W": W, "b": b})
    tape["u"], tape.aux["u"]          # pooled features, winning rows
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from pcsaliency.errors import NumericError, StateError, StructuralError

Instruction = tuple[str, str, Sequence[str]]


def _check_finite(name: str, value: np.ndarray) -> None:
    if value.dtype.kind == "f" and not np.isfinite(value).all():
        raise NumericError(f"non-finite values in {name!r}")


# -- primitives ---------------------------------------------------------------
# forward(*inputs) -> (value, aux); backward(g, inputs, value, aux) -> grads


def _identity_fwd(x):
    return x, None


def _identity_bwd(g, inputs, value, aux):
    return [g]


ROW_BLOCK = 64


def row_stable_matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` where each output row is bitwise independent of the other rows.

    BLAS picks different kernels (and summation orders) depending on the row
    count, so a point's features could change in the last bit when the cloud
    around it shrinks.  Running every product as equal-shape blocks of
    ``ROW_BLOCK`` rows keeps max-pool winners and leave-one-out losses exact.
    """
    rows = x.reshape(-1, x.shape[-1])
    m = len(rows)
    blocks = -(-m // ROW_BLOCK)
    padded = np.zeros((blocks * ROW_BLOCK, rows.shape[1]))
    padded[:m] = rows
    out = np.matmul(padded.reshape(blocks, ROW_BLOCK, -1), w).reshape(blocks * ROW_BLOCK, -1)[:m]
    return out.reshape(*x.shape[:-1], w.shape[1])


def _affine_fwd(x, w, b):
    if w.ndim != 2 or b.ndim != 1 or x.ndim < 1:
        raise StructuralError(f"affine expects W 2-D and b 1-D, got {w.shape}, {b.shape}")
    if x.shape[-1] != w.shape[0] or b.shape[0] != w.shape[1]:
        raise StructuralError(f"affine shape mismatch: x{x.shape} W{w.shape} b{b.shape}")
    return row_stable_matmul(x, w) + b, None


def _affine_bwd(g, inputs, value, aux):
    x, w, _ = inputs
    g2 = g.reshape(-1, w.shape[1])
    return [g @ w.T, x.reshape(-1, w.shape[0]).T @ g2, g2.sum(axis=0)]


def _relu_fwd(x):
    return np.maximum(x, 0.0), None


def _relu_bwd(g, inputs, value, aux):
    return [g * (inputs[0] > 0.0)]


def _maxpool_fwd(x):
    if x.ndim < 2 or x.shape[-2] == 0:
        raise StructuralError(f"maxpool needs at least one row, got shape {x.shape}")
    # np.argmax returns the first occurrence: ties go to the lowest row index
    idx = np.argmax(x, axis=-2)
    value = np.take_along_axis(x, idx[..., None, :], axis=-2)[..., 0, :]
    return value, idx


def _maxpool_bwd(g, inputs, value, aux):
    gx = np.zeros_like(inputs[0])
    np.put_along_axis(gx, aux[..., None, :], g[..., None, :], axis=-2)
    return [gx]


def _softmax_xent_fwd(logits, labels):
    if labels.dtype.kind not in "iu":
        raise StructuralError("softmax_xent labels must be integers")
    if logits.ndim < 1 or labels.shape != logits.shape[:-1]:
        raise StructuralError(
            f"softmax_xent shape mismatch: logits{logits.shape} labels{labels.shape}"
        )
    k = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise StructuralError(f"label out of range [0, {k})")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, labels[..., None], axis=-1)[..., 0]
    losses = log_z - picked
    return np.asarray(losses.mean()), np.exp(shifted - log_z[..., None])


def _softmax_xent_bwd(g, inputs, value, probs):
    _, labels = inputs
    grad = probs.copy()
    np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], -1) - 1.0, -1)
    count = max(labels.size, 1)
    return [grad * (g / count), None]


def _gather_fwd(x, idx):
    if idx.dtype.kind not in "iu" or idx.ndim != 1:
        raise StructuralError("gather indices must be a 1-D integer array")
    if x.ndim < 2:
        raise StructuralError(f"gather needs rows, got shape {x.shape}")
    n = x.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise StructuralError(f"gather index out of range [0, {n})")
    return np.take(x, idx, axis=-2), None


def _gather_bwd(g, inputs, value, aux):
    x, idx = inputs
    gx = np.zeros_like(x)
    moved = np.moveaxis(gx, -2, 0)
    np.add.at(moved, idx, np.moveaxis(g, -2, 0))
    return [gx, None]


PRIMITIVES: dict[str, tuple[Callable, Callable, int]] = {
    "identity": (_identity_fwd, _identity_bwd, 1),
    "affine": (_affine_fwd, _affine_bwd, 3),
    "relu": (_relu_fwd, _relu_bwd, 1),
    "maxpool": (_maxpool_fwd, _maxpool_bwd, 1),
    "softmax_xent": (_softmax_xent_fwd, _softmax_xent_bwd, 2),
    "gather": (_gather_fwd, _gather_bwd, 2),
}


def leaves(program: Iterable[Instruction]) -> list[str]:
    """Names read by ``program`` that no instruction produces, in first-use order."""
    produced: set[str] = set()
    out: list[str] = []
    for name, _, inputs in program:
        for inp in inputs:
            if inp not in produced and inp not in out:
                out.append(inp)
        produced.add(name)
    return out


class Tape:
    """Single-use record of one evaluation of a program.

    ``forward`` may be called with ``stop_at`` to evaluate a prefix, then
    called again with the remaining bindings (used to pick a label from the
    prediction without a second pass).
    """

    def __init__(self, program: Sequence[Instruction]):
        produced: set[str] = set()
        for name, prim, inputs in program:
            if prim not in PRIMITIVES:
                raise StructuralError(f"unknown primitive {prim!r}")
            if len(inputs) != PRIMITIVES[prim][2]:
                raise StructuralError(f"{prim} takes {PRIMITIVES[prim][2]} inputs, got {len(inputs)}")
            if name in produced:
                raise StructuralError(f"{name!r} assigned twice")
            produced.add(name)
        self.program = list(program)
        self.leaves = leaves(self.program)
        produced_leaf = produced.intersection(self.leaves)
        if produced_leaf:
            raise StructuralError(f"{sorted(produced_leaf)} read before assignment")
        self.values: dict[str, np.ndarray] = {}
        self.aux: dict[str, object] = {}
        self._pc = 0
        self._used = False

    @property
    def complete(self) -> bool:
        return self._pc == len(self.program)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def forward(self, bindings: Mapping[str, object], stop_at: str | None = None) -> "Tape":
        if self.complete and self._pc:
            raise StateError("tape already evaluated; tapes are single-use")
        for name, value in bindings.items():
            if name not in self.leaves:
                raise StructuralError(f"{name!r} is not a leaf of this program")
            arr = np.asarray(value)
            if arr.dtype.kind not in "iu":
                arr = arr.astype(np.float64, copy=False)
            _check_finite(name, arr)
            self.values[name] = arr
        while self._pc < len(self.program):
            name, prim, inputs = self.program[self._pc]
            missing = [i for i in inputs if i not in self.values]
            if missing:
                raise StructuralError(f"unbound leaf {missing[0]!r} needed by {name!r}")
            args = [self.values[i] for i in inputs]
            for inp, arr in zip(inputs, args):
                _check_finite(inp, arr)
            value, aux = PRIMITIVES[prim][0](*args)
            self.values[name] = value
            if aux is not None:
                self.aux[name] = aux
            self._pc += 1
            if name == stop_at:
                break
        return self

    def backward(self, output: str, wrt: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        """Gradients of scalar ``output`` for every float leaf (or just ``wrt``)."""
        if output not in self.values or not self.complete:
            raise StateError("backward called before forward completed")
        if self._used:
            raise StateError("backward already run on this tape")
        if self.values[output].size != 1:
            raise StructuralError(f"backward needs a scalar output, {output!r} has shape {self.values[output].shape}")
        self._used = True
        grads: dict[str, np.ndarray] = {output: np.ones_like(self.values[output])}
        for name, prim, inputs in reversed(self.program):
            g = grads.pop(name, None)
            if g is None:
                continue
            args = [self.values[i] for i in inputs]
            parts = PRIMITIVES[prim][1](g, args, self.values[name], self.aux.get(name))
            for inp, part in zip(inputs, parts):
                if part is None:
                    continue
                if inp in grads:
                    grads[inp] = grads[inp] + part
                else:
                    grads[inp] = part
        float_leaves = [n for n in self.leaves if self.values[n].dtype.kind == "f"]
        names = float_leaves if wrt is None else list(wrt)
        return {n: grads.get(n, np.zeros_like(self.values[n])).reshape(self.values[n].shape) for n in names}


def evaluate(program: Sequence[Instruction], bindings: Mapping[str, object]) -> Tape:
    """Run ``program`` to completion and return its tape."""
    return Tape(program).forward(bindings)
