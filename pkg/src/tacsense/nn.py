"""From-scratch neural reference models: a small 1-D CNN and an SVM head.

The CNN stacks three same-padded convolution blocks (32 filters, kernels
3/5/7, ReLU, max-pool 2) over a global average pool and a logistic output.
The SVM head flattens the window, applies dropout (train only), reduces to
128 features through a ReLU layer, and scores with a linear hinge-loss
classifier.

Training is plain minibatch gradient descent, deterministic for a fixed
seed; dropout masks come from a counter-based generator keyed by
(seed, epoch, batch, sample). Parameters are snapped to float32 precision
at initialization and after training so checkpoints (32-bit tensors, see
docs/FORMATS.md) round-trip bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_FORMAT = "TNN1"


class NnError(ValueError):
    """Base error for model failures."""


class ShapeError(NnError):
    """Input tensor has the wrong shape."""


class NumericError(NnError):
    """Loss or gradients became non-finite."""


class TrainingError(NnError):
    """Training preconditions were violated."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    l2: float = 1e-4  # hinge-loss weight decay; unused by the CNN


def _snap_f32(params: dict[str, np.ndarray]) -> None:
    """Round parameters to float32-representable values (kept as float64)."""
    for k in params:
        params[k] = params[k].astype(np.float32).astype(np.float64)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _bce_from_logits(z: np.ndarray, y: np.ndarray) -> float:
    # log(1 + e^-|z|) + max(z, 0) - y*z, numerically stable
    return float(np.mean(np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0) - y * z))


def _conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Same-padded stride-1 convolution; returns output and the im2col cache."""
    batch, _, n = x.shape
    f, c, k = w.shape
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    cols = sliding_window_view(xp, k, axis=2)  # (B, C, N, K)
    cols2 = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(batch * n, c * k)
    out = (cols2 @ w.reshape(f, c * k).T).reshape(batch, n, f).transpose(0, 2, 1)
    return out + b[None, :, None], cols2


def _conv1d_backward(dy: np.ndarray, cols2: np.ndarray, w: np.ndarray, n_in: int):
    """Gradients of a same-padded convolution wrt weights, bias, and input."""
    batch, f, n = dy.shape
    _, c, k = w.shape
    dy2 = np.ascontiguousarray(dy.transpose(0, 2, 1)).reshape(batch * n, f)
    dw = (dy2.T @ cols2).reshape(f, c, k)
    db = dy.sum(axis=(0, 2))
    dcols = (dy2 @ w.reshape(f, c * k)).reshape(batch, n, c, k).transpose(0, 2, 1, 3)
    pad = (k - 1) // 2
    dxp = np.zeros((batch, c, n_in + 2 * pad))
    for j in range(k):
        dxp[:, :, j : j + n] += dcols[:, :, :, j]
    return dw, db, dxp[:, :, pad : pad + n_in]


def _maxpool2_forward(x: np.ndarray):
    batch, c, n = x.shape
    half = n // 2
    r = x[:, :, : 2 * half].reshape(batch, c, half, 2)
    idx = r.argmax(axis=3)
    out = np.take_along_axis(r, idx[..., None], axis=3)[..., 0]
    return out, (idx, n)


def _maxpool2_backward(dy: np.ndarray, cache) -> np.ndarray:
    idx, n = cache
    batch, c, half = dy.shape
    dr = np.zeros((batch, c, half, 2))
    np.put_along_axis(dr, idx[..., None], dy[..., None], axis=3)
    dx = np.zeros((batch, c, n))
    dx[:, :, : 2 * half] = dr.reshape(batch, c, 2 * half)
    return dx


class CnnModel:
    """Three-block 1-D CNN emitting an intoxication probability."""

    kind = "cnn"

    def __init__(
        self,
        in_channels: int = 7,
        input_length: int = 800,
        filters: int = 32,
        kernel_sizes: tuple[int, int, int] = (3, 5, 7),
        seed: int = 0,
    ):
        self.in_channels = in_channels
        self.input_length = input_length
        self.filters = filters
        self.kernel_sizes = tuple(kernel_sizes)
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        f = filters
        chans = [in_channels, f, f]
        self.params: dict[str, np.ndarray] = {}
        for i, k in enumerate(self.kernel_sizes, start=1):
            c = chans[i - 1]
            self.params[f"conv{i}_w"] = rng.normal(0.0, np.sqrt(2.0 / (c * k)), (f, c, k))
            self.params[f"conv{i}_b"] = np.zeros(f)
        self.params["dense_w"] = rng.normal(0.0, np.sqrt(1.0 / f), (f,))
        self.params["dense_b"] = np.zeros(())
        _snap_f32(self.params)

    PARAM_ORDER = (
        "conv1_w", "conv1_b", "conv2_w", "conv2_b",
        "conv3_w", "conv3_b", "dense_w", "dense_b",
    )

    @property
    def hyper(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "input_length": self.input_length,
            "filters": self.filters,
            "kernel_sizes": list(self.kernel_sizes),
            "seed": self.seed,
        }

    def _forward_batch(self, x: np.ndarray, want_cache: bool = False):
        p = self.params
        cache = []
        h = x
        for i in range(1, 4):
            z, cols2 = _conv1d_forward(h, p[f"conv{i}_w"], p[f"conv{i}_b"])
            a = np.maximum(z, 0.0)
            pooled, pool_cache = _maxpool2_forward(a)
            if want_cache:
                cache.append((cols2, z, h.shape[2], pool_cache))
            h = pooled
        gap = h.mean(axis=2)  # (B, F)
        z_out = gap @ p["dense_w"] + p["dense_b"]
        probs = _sigmoid(z_out)
        if want_cache:
            return probs, (cache, h, gap, z_out)
        return probs, None

    def forward(self, window: np.ndarray) -> float:
        """Probability of intoxication for one window; pure and thread-safe."""
        x = np.asarray(window, dtype=np.float64)
        if x.shape != (self.in_channels, self.input_length):
            raise ShapeError(
                f"expected ({self.in_channels}, {self.input_length}) window, got {x.shape}"
            )
        probs, _ = self._forward_batch(x[None])
        return float(probs[0])

    def forward_batch(self, windows: np.ndarray) -> np.ndarray:
        x = np.asarray(windows, dtype=np.float64)
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(f"expected (batch, {self.in_channels}, length), got {x.shape}")
        probs, _ = self._forward_batch(x)
        return probs

    def gradients(self, batch: np.ndarray, labels: np.ndarray):
        """Mean binary cross-entropy loss and gradients for every parameter."""
        x = np.asarray(batch, dtype=np.float64)
        y = np.asarray(labels, dtype=np.float64)
        if len(x) == 0:
            raise TrainingError("empty batch")
        p = self.params
        probs, (cache, h_last, gap, z_out) = self._forward_batch(x, want_cache=True)
        loss = _bce_from_logits(z_out, y)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss {loss} (batch size {len(x)})")
        grads: dict[str, np.ndarray] = {}
        b = len(x)
        dz = (probs - y) / b  # (B,)
        grads["dense_w"] = gap.T @ dz
        grads["dense_b"] = np.asarray(dz.sum())
        dgap = dz[:, None] * p["dense_w"][None, :]  # (B, F)
        n_last = h_last.shape[2]
        dh = np.repeat(dgap[:, :, None] / n_last, n_last, axis=2)
        for i in range(3, 0, -1):
            cols2, z, n_in, pool_cache = cache[i - 1]
            da = _maxpool2_backward(dh, pool_cache)
            dzc = da * (z > 0)
            dw, db, dh = _conv1d_backward(dzc, cols2, p[f"conv{i}_w"], n_in)
            grads[f"conv{i}_w"] = dw
            grads[f"conv{i}_b"] = db
        return loss, grads


class SvmHeadModel:
    """Flatten -> dropout -> dense(128) -> ReLU -> linear hinge scorer."""

    kind = "svm"

    def __init__(
        self,
        input_dim: int = 7 * 800,
        hidden: int = 128,
        dropout_rate: float = 0.1,
        seed: int = 0,
    ):
        self.input_dim = input_dim
        self.hidden = hidden
        self.dropout_rate = float(dropout_rate)
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)
        self.params: dict[str, np.ndarray] = {
            "w1": rng.normal(0.0, np.sqrt(2.0 / input_dim), (hidden, input_dim)),
            "b1": np.zeros(hidden),
            "w2": rng.normal(0.0, np.sqrt(1.0 / hidden), (hidden,)),
            "b2": np.zeros(()),
        }
        _snap_f32(self.params)

    PARAM_ORDER = ("w1", "b1", "w2", "b2")

    @property
    def hyper(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": self.hidden,
            "dropout_rate": self.dropout_rate,
            "seed": self.seed,
        }

    def _flatten(self, window: np.ndarray) -> np.ndarray:
        x = np.asarray(window, dtype=np.float64).ravel()
        if x.shape[0] != self.input_dim:
            raise ShapeError(f"expected {self.input_dim} features, got {x.shape[0]}")
        return x

    def forward(self, window: np.ndarray) -> float:
        """Margin score for one window; dropout is inference-disabled."""
        x = self._flatten(window)
        p = self.params
        h = np.maximum(p["w1"] @ x + p["b1"], 0.0)
        return float(p["w2"] @ h + p["b2"])

    def forward_batch(self, windows: np.ndarray) -> np.ndarray:
        x = np.asarray(windows, dtype=np.float64).reshape(len(windows), -1)
        if x.shape[1] != self.input_dim:
            raise ShapeError(f"expected {self.input_dim} features, got {x.shape[1]}")
        p = self.params
        h = np.maximum(x @ p["w1"].T + p["b1"], 0.0)
        return h @ p["w2"] + p["b2"]

    def predict(self, window: np.ndarray) -> int:
        """Label from the margin sign; a zero score ties to sober."""
        return 1 if self.forward(window) > 0 else 0

    def gradients(
        self,
        batch: np.ndarray,
        labels: np.ndarray,
        l2: float = 1e-4,
        dropout_masks: np.ndarray | None = None,
    ):
        """Mean hinge loss (labels in {0,1} mapped to +/-1) and gradients.

        ``dropout_masks`` holds per-sample keep masks already scaled by
        1/(1-rate); None disables dropout (inference behavior).
        """
        x = np.asarray(batch, dtype=np.float64).reshape(len(batch), -1)
        y = np.asarray(labels, dtype=np.float64) * 2.0 - 1.0
        if len(x) == 0:
            raise TrainingError("empty batch")
        if dropout_masks is not None:
            x = x * dropout_masks
        p = self.params
        pre = x @ p["w1"].T + p["b1"]  # (B, H)
        h = np.maximum(pre, 0.0)
        s = h @ p["w2"] + p["b2"]
        margins = 1.0 - y * s
        active = margins > 0
        loss = float(np.mean(np.maximum(margins, 0.0))) + l2 * (
            float((p["w1"] ** 2).sum()) + float((p["w2"] ** 2).sum())
        )
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss {loss} (batch size {len(x)})")
        b = len(x)
        ds = np.where(active, -y, 0.0) / b  # (B,)
        grads = {
            "w2": h.T @ ds + 2.0 * l2 * p["w2"],
            "b2": np.asarray(ds.sum()),
        }
        dh = ds[:, None] * p["w2"][None, :]
        dpre = dh * (pre > 0)
        grads["w1"] = dpre.T @ x + 2.0 * l2 * p["w1"]
        grads["b1"] = dpre.sum(axis=0)
        return loss, grads


def dropout_mask(
    shape: int, rate: float, seed: int, epoch: int, batch: int, index: int
) -> np.ndarray:
    """Deterministic keep-mask scaled by 1/(1-rate), from a counter-based RNG."""
    gen = np.random.Generator(
        np.random.Philox(key=[seed % (1 << 64), epoch], counter=[batch, index, 0, 0])
    )
    keep = gen.random(shape) >= rate
    return keep / (1.0 - rate)


def _check_two_classes(labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if not ((labels == 0).any() and (labels == 1).any()):
        raise TrainingError("need at least one sample per class")


def train_cnn(model: CnnModel, windows, labels, config: TrainConfig = TrainConfig()):
    """Minibatch gradient descent on mean BCE; returns (model, loss curve).

    Deterministic for a fixed config seed: shuffling, batching, and updates
    are all seeded, and parameters are float32-snapped on completion.
    """
    x = np.asarray(windows, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    _check_two_classes(y)
    rng = np.random.default_rng(config.seed)
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), config.batch_size):
            sel = order[start : start + config.batch_size]
            loss, grads = model.gradients(x[sel], y[sel])
            total += loss * len(sel)
            for k, g in grads.items():
                model.params[k] = model.params[k] - config.learning_rate * g
        curve.append(total / len(x))
    _snap_f32(model.params)
    return model, curve


def train_svm(model: SvmHeadModel, windows, labels, config: TrainConfig = TrainConfig()):
    """Hinge-loss gradient descent with train-only counter-keyed dropout."""
    x = np.asarray(windows, dtype=np.float64).reshape(len(windows), -1)
    y = np.asarray(labels, dtype=np.float64)
    _check_two_classes(y)
    rng = np.random.default_rng(config.seed)
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for batch_idx, start in enumerate(range(0, len(x), config.batch_size)):
            sel = order[start : start + config.batch_size]
            masks = np.stack(
                [
                    dropout_mask(
                        model.input_dim, model.dropout_rate,
                        config.seed, epoch, batch_idx, i,
                    )
                    for i in range(len(sel))
                ]
            )
            loss, grads = model.gradients(x[sel], y[sel], l2=config.l2, dropout_masks=masks)
            total += loss * len(sel)
            for k, g in grads.items():
                model.params[k] = model.params[k] - config.learning_rate * g
        curve.append(total / len(x))
    _snap_f32(model.params)
    return model, curve


def save_checkpoint(model, path) -> None:
    """Write layer-ordered little-endian float32 tensors plus a JSON sidecar."""
    path = Path(path)
    with open(path, "wb") as fh:
        for name in model.PARAM_ORDER:
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f4").tobytes())
    sidecar = {
        "format": CHECKPOINT_FORMAT,
        "kind": model.kind,
        "hyper": model.hyper,
        "tensors": [
            {"name": name, "shape": list(model.params[name].shape)}
            for name in model.PARAM_ORDER
        ],
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n"
    )


def load_checkpoint(path):
    """Rebuild a model from a checkpoint written by save_checkpoint."""
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if sidecar.get("format") != CHECKPOINT_FORMAT:
        raise NnError(f"unsupported checkpoint format: {sidecar.get('format')!r}")
    kind = sidecar["kind"]
    hyper = sidecar["hyper"]
    if kind == "cnn":
        model = CnnModel(
            in_channels=hyper["in_channels"],
            input_length=hyper["input_length"],
            filters=hyper["filters"],
            kernel_sizes=tuple(hyper["kernel_sizes"]),
            seed=hyper["seed"],
        )
    elif kind == "svm":
        model = SvmHeadModel(
            input_dim=hyper["input_dim"],
            hidden=hyper["hidden"],
            dropout_rate=hyper["dropout_rate"],
            seed=hyper["seed"],
        )
    else:
        raise NnError(f"unknown model kind {kind!r}")
    raw = path.read_bytes()
    offset = 0
    for spec in sidecar["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        tensor = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        model.params[spec["name"]] = tensor.reshape(shape).astype(np.float64)
        offset += 4 * count
    return model
