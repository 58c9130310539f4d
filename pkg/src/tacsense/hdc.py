"""Hyperdimensional computing classifier over bipolar hypervectors.

A window is encoded key-value style: each channel owns a random bipolar key
vector, each quantized magnitude owns a level vector from a correlated
chain, and key (x) level products are bundled per timestep, cyclically
permuted by the timestep index, summed, and sign-thresholded back to
bipolar. Class prototypes are integer accumulators trained in a single
pass and then adaptively refined: a sample updates the prototypes only
when it is misclassified or its similarity margin is too small.

All randomness derives from a single 64-bit seed, so item memories and
encodings are reproducible; prototypes use fixed-point integer arithmetic
(1.0 == 65536) so refinement weights stay exact and order-auditable.

Model files use the versioned ``THD1`` layout documented in
docs/FORMATS.md.
"""

from __future__ import annotations

import struct
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

DEFAULT_DIM = 3000
DEFAULT_LEVELS = 64
DEFAULT_REFINE_MARGIN = 0.2
DEFAULT_REFINE_EPOCHS = 20
DEFAULT_RANGE_PERCENTILES = (1.0, 99.0)

# fixed-point scale for prototype accumulators: weight 1.0 == 65536
FIXED_POINT_ONE = 65536

KEY_ORTHOGONALITY_BOUND = 0.1

MODEL_MAGIC = b"THD1"


class HdcError(ValueError):
    """Base error for hypervector operations."""


class SimilarityError(HdcError):
    """Cosine similarity is undefined for a zero vector."""


class TrainingError(HdcError):
    """Training preconditions were violated (missing class, untrained model)."""


def random_hypervector(dim: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a uniform random bipolar vector with entries in {-1, +1}."""
    return (rng.integers(0, 2, size=dim, dtype=np.int8) * 2 - 1).astype(np.int8)


def _check_same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise HdcError(f"dimension mismatch: {a.shape} vs {b.shape}")


def bind(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise product; commutative and self-inverse on bipolar vectors."""
    _check_same_dim(a, b)
    return (a * b).astype(np.int8)


def permute(a: np.ndarray, shift: int) -> np.ndarray:
    """Cyclic rotation; permute(permute(a, s), -s) == a."""
    return np.roll(a, shift)


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    """Standard cosine similarity in [-1, 1]."""
    _check_same_dim(np.asarray(a), np.asarray(b))
    af = np.asarray(a, dtype=np.float64)
    bf = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(af)
    nb = np.linalg.norm(bf)
    if na == 0.0 or nb == 0.0:
        raise SimilarityError("cosine similarity undefined for zero vector")
    return float(af @ bf / (na * nb))


def make_level_vectors(
    levels: int, dim: int, rng: np.random.Generator | int
) -> np.ndarray:
    """Build a chain of correlated level vectors for magnitude quantization.

    Level 0 is random; each subsequent level flips a fresh disjoint batch of
    floor(dim / (2*(levels-1))) positions. Neighbors stay highly similar
    while the chain ends are quasi-orthogonal, and similarity decreases
    linearly with level distance.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.Generator(np.random.PCG64(int(rng)))
    if levels < 2:
        raise HdcError(f"need at least 2 levels, got {levels}")
    if levels > dim // 2:
        raise HdcError(f"levels {levels} too large for dimension {dim}")
    out = np.empty((levels, dim), dtype=np.int8)
    out[0] = random_hypervector(dim, rng)
    flip_order = rng.permutation(dim)
    batch = dim // (2 * (levels - 1))
    for lvl in range(1, levels):
        out[lvl] = out[lvl - 1]
        flips = flip_order[(lvl - 1) * batch : lvl * batch]
        out[lvl, flips] = -out[lvl, flips]
    return out


class ItemMemory:
    """Seeded channel keys, level chain, and per-channel quantization ranges.

    All vectors are derived deterministically from the seed in a fixed
    order (keys, levels, tie-break signs), so a memory can be rebuilt from
    (n_channels, dim, levels, seed) alone. Quantization ranges must be
    fitted on training data before encoding.
    """

    def __init__(
        self,
        n_channels: int = 7,
        dim: int = DEFAULT_DIM,
        levels: int = DEFAULT_LEVELS,
        seed: int = 0,
    ):
        if n_channels < 1:
            raise HdcError("need at least one channel")
        self.n_channels = n_channels
        self.dim = dim
        self.levels = levels
        self.seed = int(seed)
        rng = np.random.Generator(np.random.PCG64(self.seed))
        self.channel_keys = self._draw_quasi_orthogonal_keys(rng)
        self.level_vectors = make_level_vectors(levels, dim, rng)
        self.tie_signs = random_hypervector(dim, rng)
        self.ranges: np.ndarray | None = None  # (n_channels, 2) lo/hi
        self._kl: np.ndarray | None = None

    def _draw_quasi_orthogonal_keys(self, rng: np.random.Generator) -> np.ndarray:
        keys = np.empty((self.n_channels, self.dim), dtype=np.int8)
        bound = KEY_ORTHOGONALITY_BOUND * self.dim
        for i in range(self.n_channels):
            for _ in range(100):
                candidate = random_hypervector(self.dim, rng)
                dots = keys[:i].astype(np.int64) @ candidate.astype(np.int64)
                if i == 0 or np.abs(dots).max() < bound:
                    keys[i] = candidate
                    break
            else:
                raise HdcError("failed to draw quasi-orthogonal channel keys")
        return keys

    @property
    def fitted(self) -> bool:
        return self.ranges is not None

    def fit_ranges(
        self,
        windows: np.ndarray,
        percentiles: tuple[float, float] = DEFAULT_RANGE_PERCENTILES,
    ) -> "ItemMemory":
        """Set per-channel [lo, hi] from training data percentile clamps."""
        arr = np.asarray(windows, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.shape[1] != self.n_channels:
            raise HdcError(
                f"expected {self.n_channels} channels, got {arr.shape[1]}"
            )
        lo = np.percentile(arr, percentiles[0], axis=(0, 2))
        hi = np.percentile(arr, percentiles[1], axis=(0, 2))
        self.ranges = np.stack([lo, hi], axis=1)
        return self

    def set_ranges(self, ranges: np.ndarray) -> "ItemMemory":
        ranges = np.asarray(ranges, dtype=np.float64)
        if ranges.shape != (self.n_channels, 2):
            raise HdcError(f"ranges must have shape ({self.n_channels}, 2)")
        self.ranges = ranges
        return self

    def quantize(self, window: np.ndarray) -> np.ndarray:
        """Map channel values to level indices; out-of-range values clamp."""
        if self.ranges is None:
            raise HdcError("quantization ranges not fitted; call fit_ranges first")
        x = np.asarray(window, dtype=np.float64)
        lo = self.ranges[:, 0][:, None]
        hi = self.ranges[:, 1][:, None]
        span = hi - lo
        degenerate = span <= 0
        safe_span = np.where(degenerate, 1.0, span)
        idx = np.floor((x - lo) / safe_span * self.levels).astype(np.int64)
        idx = np.clip(idx, 0, self.levels - 1)
        return np.where(degenerate, self.levels // 2, idx)

    @property
    def key_level_tables(self) -> np.ndarray:
        """Precomputed key (x) level products, shape (n_channels, levels, dim)."""
        if self._kl is None:
            self._kl = (
                self.channel_keys[:, None, :] * self.level_vectors[None, :, :]
            ).astype(np.int8)
        return self._kl


def _permuted_row_sum(bundles: np.ndarray) -> np.ndarray:
    """Sum roll(bundles[t], t) over t via a strided skew-diagonal view."""
    t, d = bundles.shape
    if t >= d:
        out = np.zeros(d, dtype=np.int64)
        for i in range(t):
            out += np.roll(bundles[i].astype(np.int64), i)
        return out
    doubled = np.concatenate([bundles, bundles], axis=1)
    flat = doubled.reshape(-1)
    s = flat.strides[0]
    view = as_strided(flat[d:], shape=(t, d), strides=((2 * d - 1) * s, s))
    return view.sum(axis=0, dtype=np.int64)


def encode_window(window: np.ndarray, memory: ItemMemory) -> np.ndarray:
    """Encode a (channels, samples) window into one bipolar hypervector.

    Per timestep, channel keys are bound to the level vectors of the
    quantized values and bundled; the bundle is permuted by the timestep
    index and all timesteps are summed, then sign-thresholded. Exact zeros
    take the memory's seed-keyed tie-break sign. Deterministic for a fixed
    memory.
    """
    x = np.asarray(window, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != memory.n_channels:
        raise HdcError(
            f"expected ({memory.n_channels}, samples) window, got shape {x.shape}"
        )
    if not np.isfinite(x).all():
        raise HdcError("window contains non-finite values")
    q = memory.quantize(x)
    tables = memory.key_level_tables
    t = x.shape[1]
    bundles = np.zeros((t, memory.dim), dtype=np.int16)
    for c in range(memory.n_channels):
        np.add(bundles, tables[c][q[c]], out=bundles, casting="unsafe")
    total = _permuted_row_sum(bundles)
    hv = np.where(total > 0, 1, -1).astype(np.int8)
    ties = total == 0
    if ties.any():
        hv[ties] = memory.tie_signs[ties]
    return hv


def encode_windows(windows: Sequence[np.ndarray] | np.ndarray, memory: ItemMemory) -> np.ndarray:
    """Encode a stack of windows into an (N, dim) bipolar matrix."""
    out = np.empty((len(windows), memory.dim), dtype=np.int8)
    for i, w in enumerate(windows):
        out[i] = encode_window(w, memory)
    return out


class HdcModel:
    """Two-class prototype classifier with single-pass training and refinement."""

    def __init__(
        self,
        memory: ItemMemory,
        refine_margin: float = DEFAULT_REFINE_MARGIN,
        refine_epochs: int = DEFAULT_REFINE_EPOCHS,
    ):
        if not 0 <= refine_margin < 1:
            raise HdcError(f"refine_margin must be in [0, 1), got {refine_margin}")
        if refine_epochs < 1:
            raise HdcError(f"refine_epochs must be positive, got {refine_epochs}")
        self.memory = memory
        self.refine_margin = float(refine_margin)
        self.refine_epochs = int(refine_epochs)
        self.class_accumulators = np.zeros((2, memory.dim), dtype=np.int64)
        self.class_counts = np.zeros(2, dtype=np.int64)

    @property
    def trained(self) -> bool:
        return bool(self.class_counts.min() > 0)

    def _require_trained(self) -> None:
        if not self.trained:
            raise TrainingError("model is untrained: call train_single_pass first")

    def _encodings(self, windows, encodings) -> np.ndarray:
        if encodings is None:
            return encode_windows(windows, self.memory)
        encodings = np.asarray(encodings)
        if encodings.ndim != 2 or encodings.shape[1] != self.memory.dim:
            raise HdcError(f"bad encoding shape {encodings.shape}")
        return encodings

    def train_single_pass(self, windows, labels, encodings: np.ndarray | None = None) -> "HdcModel":
        """Add each encoded sample to its class accumulator exactly once.

        Accumulators are order-independent (integer sums commute). Raises
        TrainingError if either class is absent.
        """
        labels = np.asarray(labels, dtype=np.int64)
        if not np.isin(labels, (0, 1)).all():
            raise TrainingError("labels must be binary")
        if not ((labels == 0).any() and (labels == 1).any()):
            raise TrainingError("need at least one sample per class")
        enc = self._encodings(windows, encodings)
        for cls in (0, 1):
            members = enc[labels == cls].astype(np.int64)
            self.class_accumulators[cls] += FIXED_POINT_ONE * members.sum(axis=0)
            self.class_counts[cls] += len(members)
        return self

    def _sims(self, enc_f: np.ndarray, acc_f: np.ndarray, acc_norms: np.ndarray) -> np.ndarray:
        enc_norm = np.sqrt(enc_f.shape[0])
        return (acc_f @ enc_f) / (acc_norms * enc_norm)

    def _refine_step(
        self,
        enc: np.ndarray,
        label: int,
        acc_f: np.ndarray,
        acc_norms: np.ndarray,
    ) -> bool:
        """Apply the adaptive update rule for one sample; True if it fired."""
        if acc_norms.min() == 0.0:
            raise TrainingError("prototype collapsed to zero vector")
        enc_f = enc.astype(np.float64)
        sims = self._sims(enc_f, acc_f, acc_norms)
        score = sims[1] - sims[0]
        predicted = 1 if score > 0 else 0
        other = 1 - label
        margin = sims[label] - sims[other]
        if predicted == label and margin >= self.refine_margin:
            return False
        w_true = int(round((1.0 - sims[label]) * FIXED_POINT_ONE))
        w_other = int(round(sims[other] * FIXED_POINT_ONE))
        enc_i = enc.astype(np.int64)
        self.class_accumulators[label] += w_true * enc_i
        self.class_accumulators[other] -= w_other * enc_i
        acc_f[label] = self.class_accumulators[label]
        acc_f[other] = self.class_accumulators[other]
        acc_norms[label] = np.linalg.norm(acc_f[label])
        acc_norms[other] = np.linalg.norm(acc_f[other])
        return True

    def refine(self, windows, labels, encodings: np.ndarray | None = None) -> int:
        """Run adaptive refinement passes; returns the number of epochs used.

        Each epoch visits samples in order and updates the prototypes for
        every sample that is misclassified or has margin below
        ``refine_margin``; refinement stops early after an epoch with no
        updates.
        """
        self._require_trained()
        labels = np.asarray(labels, dtype=np.int64)
        enc = self._encodings(windows, encodings)
        acc_f = self.class_accumulators.astype(np.float64)
        acc_norms = np.linalg.norm(acc_f, axis=1)
        epochs_run = 0
        for _ in range(self.refine_epochs):
            epochs_run += 1
            updates = 0
            for i in range(len(enc)):
                if self._refine_step(enc[i], int(labels[i]), acc_f, acc_norms):
                    updates += 1
            if updates == 0:
                break
        return epochs_run

    def online_update(self, window: np.ndarray, label: int) -> bool:
        """Single-sample refine step; constant time in the dataset size."""
        self._require_trained()
        enc = encode_window(window, self.memory)
        acc_f = self.class_accumulators.astype(np.float64)
        acc_norms = np.linalg.norm(acc_f, axis=1)
        return self._refine_step(enc, int(label), acc_f, acc_norms)

    def predict_encoded(self, encoding: np.ndarray) -> tuple[int, float]:
        self._require_trained()
        enc_f = np.asarray(encoding, dtype=np.float64)
        acc_f = self.class_accumulators.astype(np.float64)
        acc_norms = np.linalg.norm(acc_f, axis=1)
        if acc_norms.min() == 0.0:
            raise TrainingError("prototype collapsed to zero vector")
        sims = self._sims(enc_f, acc_f, acc_norms)
        score = float(sims[1] - sims[0])
        return (1 if score > 0 else 0), score

    def predict(self, window: np.ndarray) -> tuple[int, float]:
        """Classify one window; score is sim(intoxicated) - sim(sober).

        Ties (score exactly 0) are conservatively labeled sober.
        """
        return self.predict_encoded(encode_window(window, self.memory))

    def save(self, path) -> None:
        """Write the THD1 model file (see docs/FORMATS.md)."""
        if self.memory.ranges is None:
            raise HdcError("cannot save a model without fitted quantization ranges")
        with open(path, "wb") as fh:
            fh.write(MODEL_MAGIC)
            fh.write(
                struct.pack(
                    "<IIII",
                    self.memory.dim,
                    self.memory.levels,
                    self.memory.n_channels,
                    self.refine_epochs,
                )
            )
            fh.write(struct.pack("<Q", self.memory.seed % (1 << 64)))
            fh.write(struct.pack("<d", self.refine_margin))
            fh.write(np.ascontiguousarray(self.memory.ranges, dtype="<f8").tobytes())
            fh.write(np.asarray(self.class_counts, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(self.class_accumulators, dtype="<i8").tobytes())

    @classmethod
    def load(cls, path) -> "HdcModel":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[:4] != MODEL_MAGIC:
            raise HdcError(f"bad magic {data[:4]!r}, expected {MODEL_MAGIC!r}")
        offset = 4
        dim, levels, n_channels, refine_epochs = struct.unpack_from("<IIII", data, offset)
        offset += 16
        (seed,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        (margin,) = struct.unpack_from("<d", data, offset)
        offset += 8
        ranges = np.frombuffer(data, dtype="<f8", count=n_channels * 2, offset=offset)
        offset += n_channels * 16
        counts = np.frombuffer(data, dtype="<i8", count=2, offset=offset)
        offset += 16
        acc = np.frombuffer(data, dtype="<i8", count=2 * dim, offset=offset)
        memory = ItemMemory(n_channels=n_channels, dim=dim, levels=levels, seed=seed)
        memory.set_ranges(ranges.reshape(n_channels, 2).copy())
        model = cls(memory, refine_margin=margin, refine_epochs=refine_epochs)
        model.class_counts = counts.astype(np.int64).copy()
        model.class_accumulators = acc.reshape(2, dim).astype(np.int64).copy()
        return model
