"""Mini PointNet: a shared per-point MLP, feature-wise max pooling, and an MLP head.

The per-point stack is 3 -> 32 -> 64 -> F with a ReLU after every layer;
the head is F -> 64 -> k with a ReLU on the hidden layer only.  Everything runs through the
tape engine in :mod:`pcsaliency.autodiff`, so gradients with respect to both
weights and point coordinates come from one backward pass.
"""

from __future__ import annotations

import io
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from pcsaliency.autodiff import Instruction, Tape
from pcsaliency.errors import FormatError, NumericError, StructuralError

log = logging.getLogger(__name__)

MAGIC = b"PCSM"
VERSION = 1
POINT_WIDTHS = (32, 64, 64)
HEAD_WIDTHS = (64,)


@dataclass(frozen=True)
class ModelParams:
    """Immutable weights, kept in declaration order ``p0.W, p0.b, ..., g0.W, ...``."""

    weights: dict[str, np.ndarray]
    n_point_layers: int

    def __post_init__(self):
        shapes = [w.shape for w in self.weights.values()]
        if len(shapes) % 2 or len(shapes) < 4:
            raise StructuralError("weights must be (W, b) pairs with at least one layer on each side")
        width = 3
        for i in range(0, len(shapes), 2):
            w, b = shapes[i], shapes[i + 1]
            if len(w) != 2 or w[0] != width or b != (w[1],):
                raise StructuralError(f"inconsistent layer shapes at layer {i // 2}: {w}, {b}")
            width = w[1]
        for arr in self.weights.values():
            if not np.isfinite(arr).all():
                raise NumericError("non-finite model weight")
            arr.flags.writeable = False

    @property
    def k(self) -> int:
        return list(self.weights.values())[-1].shape[0]

    @property
    def F(self) -> int:
        return self.weights[f"p{self.n_point_layers - 1}.W"].shape[1]

    @property
    def layer_names(self) -> list[str]:
        return [n[:-2] for n in self.weights if n.endswith(".W")]

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of every weight."""
        return (
            self.n_point_layers == other.n_point_layers
            and list(self.weights) == list(other.weights)
            and all(
                a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in zip(self.weights.values(), other.weights.values())
            )
        )


@dataclass
class Prediction:
    logits: np.ndarray
    probabilities: np.ndarray
    predicted: int
    pool_argmax: np.ndarray


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.01
    optimizer: str = "momentum"
    momentum: float = 0.9
    seed: int = 0
    point_widths: tuple[int, ...] = POINT_WIDTHS
    head_widths: tuple[int, ...] = HEAD_WIDTHS

    def __post_init__(self):
        if self.epochs < 1:
            raise StructuralError("epochs must be >= 1")
        if not self.lr > 0:
            raise StructuralError("learning rate must be > 0")
        if self.batch_size < 1:
            raise StructuralError("batch size must be >= 1")
        if self.optimizer not in ("sgd", "momentum"):
            raise StructuralError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainResult:
    params: ModelParams
    epoch_losses: list[float] = field(default_factory=list)
    train_accuracy: float = 0.0


def init_params(
    k: int,
    seed: int = 0,
    point_widths: Sequence[int] = POINT_WIDTHS,
    head_widths: Sequence[int] = HEAD_WIDTHS,
) -> ModelParams:
    """He-uniform weights, zero biases."""
    if k < 2:
        raise StructuralError("need at least two classes")
    rng = np.random.default_rng(seed)
    weights: dict[str, np.ndarray] = {}
    dims = [3, *point_widths]
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        bound = np.sqrt(6.0 / a)
        weights[f"p{i}.W"] = rng.uniform(-bound, bound, (a, b))
        weights[f"p{i}.b"] = np.zeros(b)
    dims = [point_widths[-1], *head_widths, k]
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        bound = np.sqrt(6.0 / a)
        weights[f"g{i}.W"] = rng.uniform(-bound, bound, (a, b))
        weights[f"g{i}.b"] = np.zeros(b)
    return ModelParams(weights, len(point_widths))


def build_program(model: ModelParams, gather: bool = False) -> list[Instruction]:
    """Instruction list for ``loss(x, label)``; ``gather`` inserts a row selection on ``x``."""
    prog: list[Instruction] = []
    cur = "x"
    if gather:
        prog.append(("xs", "gather", ["x", "keep"]))
        cur = "xs"
    n_head = len(model.weights) // 2 - model.n_point_layers
    for i in range(model.n_point_layers):
        prog.append((f"p{i}", "affine", [cur, f"p{i}.W", f"p{i}.b"]))
        cur = f"p{i}"
        prog.append((f"p{i}.relu", "relu", [cur]))
        cur = f"p{i}.relu"
    prog.append(("pooled", "maxpool", [cur]))
    cur = "pooled"
    for j in range(n_head):
        out = "logits" if j == n_head - 1 else f"g{j}"
        prog.append((out, "affine", [cur, f"g{j}.W", f"g{j}.b"]))
        cur = out
        if j < n_head - 1:
            prog.append((f"g{j}.relu", "relu", [cur]))
            cur = f"g{j}.relu"
    prog.append(("loss", "softmax_xent", ["logits", "label"]))
    return prog


def _as_cloud(cloud) -> np.ndarray:
    x = np.asarray(getattr(cloud, "points", cloud), dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] != 3:
        raise StructuralError(f"cloud must be N x 3, got shape {x.shape}")
    if x.shape[-2] == 0:
        raise StructuralError("empty cloud")
    return x


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _check_label(model: ModelParams, label) -> None:
    if not 0 <= int(label) < model.k:
        raise StructuralError(f"label {label} out of range [0, {model.k})")


def _prediction(tape: Tape) -> Prediction:
    logits = tape["logits"]
    return Prediction(
        logits=logits,
        probabilities=_softmax(logits),
        predicted=int(np.argmax(logits)),
        pool_argmax=tape.aux["pooled"],
    )


def forward(model: ModelParams, cloud) -> Prediction:
    x = _as_cloud(cloud)
    if x.ndim != 2:
        raise StructuralError("forward takes a single N x 3 cloud; use forward_batch")
    tape = Tape(build_program(model)).forward({"x": x, **model.weights}, stop_at="logits")
    return _prediction(tape)


def forward_batch(model: ModelParams, clouds) -> tuple[np.ndarray, np.ndarray]:
    """Logits ``(B, k)`` and pool argmax ``(B, F)`` for a stack of equal-size clouds."""
    x = _as_cloud(clouds)
    tape = Tape(build_program(model)).forward({"x": x, **model.weights}, stop_at="logits")
    return tape["logits"], tape.aux["pooled"]


def loss(model: ModelParams, cloud, label: int) -> float:
    """Cross-entropy ``-ln p(label)`` for one cloud."""
    _check_label(model, label)
    x = _as_cloud(cloud)
    tape = Tape(build_program(model)).forward({"x": x, "label": np.int64(label), **model.weights})
    return float(tape["loss"])


def loss_and_prediction(model: ModelParams, cloud, label: int) -> tuple[float, Prediction]:
    """Loss and prediction from one forward pass."""
    _check_label(model, label)
    x = _as_cloud(cloud)
    tape = Tape(build_program(model)).forward({"x": x, "label": np.int64(label), **model.weights})
    return float(tape["loss"]), _prediction(tape)


def batch_losses(model: ModelParams, clouds, labels) -> np.ndarray:
    """Per-cloud losses for a ``(B, N, 3)`` stack."""
    logits, _ = forward_batch(model, clouds)
    labels = np.asarray(labels)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    return lse - np.take_along_axis(shifted, labels[:, None], axis=-1)[:, 0]


@dataclass
class InputGradient:
    loss: float
    grad: np.ndarray
    prediction: Prediction
    label: int
    label_source: str


def input_gradient(model: ModelParams, cloud, label: int | None = None) -> InputGradient:
    """One forward and one backward pass giving dL/dx for every point.

    Without a label the model's own predicted class is used.
    """
    x = _as_cloud(cloud)
    tape = Tape(build_program(model)).forward({"x": x, **model.weights}, stop_at="logits")
    pred = _prediction(tape)
    if label is None:
        label, source = pred.predicted, "predicted"
    else:
        _check_label(model, label)
        source = "ground_truth"
    tape.forward({"label": np.int64(label)})
    grad = tape.backward("loss", wrt=["x"])["x"]
    return InputGradient(float(tape["loss"]), grad, pred, int(label), source)


def _stack(dataset) -> tuple[list[np.ndarray], np.ndarray]:
    points = [_as_cloud(c) for c in dataset]
    labels = np.array([int(c.label) for c in dataset], dtype=np.int64)
    return points, labels


def _batches(points: list[np.ndarray], order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        idx = order[start : start + size]
        shapes = {points[i].shape for i in idx}
        if len(shapes) != 1:
            raise StructuralError("clouds within a batch must share N")
        yield idx, np.stack([points[i] for i in idx])


def train(dataset, config: TrainConfig | None = None, k: int | None = None) -> TrainResult:
    """Minibatch SGD (optionally with momentum) on the mean cross-entropy."""
    config = config or TrainConfig()
    if len(dataset) == 0:
        raise StructuralError("empty dataset")
    points, labels = _stack(dataset)
    k = k if k is not None else int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= k:
        raise StructuralError(f"labels must lie in [0, {k})")
    rng = np.random.default_rng(config.seed)
    params = init_params(k, int(rng.integers(2**31)), config.point_widths, config.head_widths)
    weights = {n: w.copy() for n, w in params.weights.items()}
    velocity = {n: np.zeros_like(w) for n, w in weights.items()}
    mu = config.momentum if config.optimizer == "momentum" else 0.0
    program_template = build_program(params)
    history: list[float] = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(points))
        total, count = 0.0, 0
        for idx, x in _batches(points, order, config.batch_size):
            tape = Tape(program_template)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    tape.forward({"x": x, "label": labels[idx], **weights})
            except NumericError as exc:
                raise NumericError(f"training diverged in epoch {epoch}: {exc}") from exc
            value = float(tape["loss"])
            if not np.isfinite(value):
                raise NumericError(f"training diverged in epoch {epoch}: loss is {value}")
            grads = tape.backward("loss", wrt=list(weights))
            for n in weights:
                velocity[n] = mu * velocity[n] - config.lr * grads[n]
                weights[n] = weights[n] + velocity[n]
            total += value * len(idx)
            count += len(idx)
        history.append(total / count)
        log.debug("epoch %d loss %.5f", epoch, history[-1])
    try:
        final = ModelParams(weights, params.n_point_layers)
    except NumericError as exc:
        raise NumericError(f"training diverged in epoch {config.epochs}: {exc}") from exc
    return TrainResult(final, history, accuracy(final, dataset))


def predict_labels(model: ModelParams, clouds: Sequence, chunk: int = 64) -> np.ndarray:
    """Predicted class per cloud; clouds of equal N are batched together."""
    pts = [_as_cloud(c) for c in clouds]
    out = np.empty(len(pts), dtype=np.int64)
    by_n: dict[int, list[int]] = {}
    for i, p in enumerate(pts):
        by_n.setdefault(p.shape[0], []).append(i)
    for members in by_n.values():
        for start in range(0, len(members), chunk):
            idx = members[start : start + chunk]
            logits, _ = forward_batch(model, np.stack([pts[i] for i in idx]))
            out[idx] = np.argmax(logits, axis=-1)
    return out


def accuracy(model: ModelParams, dataset) -> float:
    if len(dataset) == 0:
        raise StructuralError("empty dataset")
    _, labels = _stack(dataset)
    return int((predict_labels(model, dataset) == labels).sum()) / len(dataset)


# -- checkpoints ----------------------------------------------------------------


def checkpoint_bytes(model: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    arrays = list(model.weights.values())
    buf.write(struct.pack("<5I", VERSION, model.k, model.F, model.n_point_layers, len(arrays)))
    for arr in arrays:
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for arr in arrays:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def atomic_write(path, data: bytes | str) -> None:
    """Write via a sibling temp file and rename; nothing is left behind on failure."""
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {path.parent}")
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    mode = "wb" if isinstance(data, bytes) else "w"
    try:
        with open(tmp, mode, **({} if mode == "wb" else {"newline": "", "encoding": "utf-8"})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def save_checkpoint(model: ModelParams, path) -> None:
    atomic_write(path, checkpoint_bytes(model))


def _names(n_point_layers: int, n_arrays: int) -> list[str]:
    names = []
    for i in range(n_arrays // 2):
        prefix = f"p{i}" if i < n_point_layers else f"g{i - n_point_layers}"
        names += [f"{prefix}.W", f"{prefix}.b"]
    return names


def parse_checkpoint(data: bytes, expect_k: int | None = None) -> ModelParams:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated checkpoint: wanted {n} bytes at offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("not a checkpoint: bad magic string")
    version, k, F, n_point, n_arrays = struct.unpack("<5I", take(20))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if n_arrays % 2 or n_point < 1 or n_point * 2 >= n_arrays:
        raise FormatError(f"bad layer table: {n_arrays} arrays, {n_point} point layers")
    shapes = []
    for _ in range(n_arrays):
        (ndim,) = struct.unpack("<I", take(4))
        if ndim not in (1, 2):
            raise FormatError(f"bad array rank {ndim}")
        shapes.append(struct.unpack(f"<{ndim}I", take(4 * ndim)))
    weights = {}
    for name, shape in zip(_names(n_point, n_arrays), shapes):
        count = int(np.prod(shape))
        arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        weights[name] = arr
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after weights")
    try:
        model = ModelParams(weights, n_point)
    except StructuralError as exc:
        raise FormatError(f"layer shapes inconsistent: {exc}") from exc
    if model.k != k or model.F != F:
        raise FormatError(f"header says k={k}, F={F} but layers give k={model.k}, F={model.F}")
    if expect_k is not None and k != expect_k:
        raise FormatError(f"checkpoint has k={k}, expected k={expect_k}")
    return model


def load_checkpoint(path, expect_k: int | None = None) -> ModelParams:
    return parse_checkpoint(Path(path).read_bytes(), expect_k)
