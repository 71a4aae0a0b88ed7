"""Dataset ingestion, sliding windows, normalization, splits and missingness.

File formats:
  - series csv: UTF-8, comma separated, optional single header row,
    T rows by N columns (single feature).
  - stbin container (little endian): magic ``STB1``, u32 N, u32 T, u32 F,
    then N*T*F float64 values in (n, t, f) row-major order.
  - adjacency csv: rows ``i,j,value`` with 0-based indices.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

STBIN_MAGIC = b"STB1"


class DataError(ValueError):
    pass


class ParseError(DataError):
    pass


@dataclass
class RawSeries:
    data: np.ndarray  # (N, T, F) float64
    granularity_minutes: int = 5

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DataError(f"series array must be (N, T, F), got shape {self.data.shape}")
        n, t, f = self.data.shape
        if n < 1 or t < 1 or f < 1:
            raise DataError(f"series dimensions must be positive, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise DataError("series contains NaN or Inf; express gaps via a MissingMask")

    @property
    def N(self) -> int:
        return self.data.shape[0]

    @property
    def T(self) -> int:
        return self.data.shape[1]

    @property
    def F(self) -> int:
        return self.data.shape[2]


@dataclass
class WindowedSample:
    input: np.ndarray   # (N, W, F) past observations
    target: np.ndarray  # (N, nu, F) future values
    anchor_t: int       # first forecast timestep


@dataclass
class NormStats:
    mean: np.ndarray  # per feature
    std: np.ndarray   # per feature, positive
    computed_on: str = "train"

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.std = np.atleast_1d(np.asarray(self.std, dtype=np.float64))
        if (self.std <= 0).any():
            raise DataError("normalization std must be positive (constant series rejected)")


@dataclass
class MissingMask:
    mask: np.ndarray  # (N, T) bool, True = observed
    scheme: str
    requested_rate: float
    realized_rate: float = field(init=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        self.realized_rate = float(1.0 - self.mask.mean())


@dataclass
class Adjacency:
    A: np.ndarray  # (N, N) symmetric nonnegative
    source: str = "edge-list"

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1]:
            raise DataError(f"adjacency must be square, got {self.A.shape}")
        if not np.isfinite(self.A).all():
            raise DataError("adjacency contains non-finite entries")
        if (self.A < 0).any():
            raise DataError("adjacency entries must be nonnegative")
        if np.abs(self.A - self.A.T).max() > 1e-12:
            raise DataError("adjacency must be symmetric within 1e-12")

    @property
    def N(self) -> int:
        return self.A.shape[0]


# ---------------------------------------------------------------------------
# loading / saving
# ---------------------------------------------------------------------------

def load_series(path, format: str = "csv", granularity_minutes: int = 5) -> RawSeries:
    path = Path(path)
    if format == "csv":
        return _load_csv(path, granularity_minutes)
    if format == "stbin":
        return _load_stbin(path, granularity_minutes)
    raise DataError(f"unknown series format {format!r} (expected csv or stbin)")


def _load_csv(path: Path, granularity_minutes: int) -> RawSeries:
    rows = []
    ncols = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if ncols is None:
                # optional single header row: skip if any cell is non-numeric
                try:
                    rows.append([float(c) for c in cells])
                    ncols = len(cells)
                except ValueError:
                    ncols = len(cells)
                    continue
                continue
            if len(cells) != ncols:
                raise ParseError(f"{path}: row {lineno} has {len(cells)} columns, expected {ncols}")
            try:
                rows.append([float(c) for c in cells])
            except ValueError as e:
                col = next(i for i, c in enumerate(cells) if not _is_float(c))
                raise ParseError(f"{path}: row {lineno}, column {col}: {e}") from None
    if not rows:
        raise ParseError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=np.float64)  # (T, N)
    if not np.isfinite(arr).all():
        t, n = np.argwhere(~np.isfinite(arr))[0]
        raise ParseError(f"{path}: non-finite value at row {t + 1}, column {n}")
    data = arr.T[:, :, None]  # (N, T, 1)
    return RawSeries(data, granularity_minutes)


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _load_stbin(path: Path, granularity_minutes: int) -> RawSeries:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != STBIN_MAGIC:
        raise ParseError(f"{path}: not an stbin file (bad magic)")
    n, t, f = struct.unpack("<III", raw[4:16])
    expected = 16 + n * t * f * 8
    if len(raw) != expected:
        raise ParseError(f"{path}: payload size {len(raw)} does not match header ({n}x{t}x{f})")
    data = np.frombuffer(raw[16:], dtype="<f8").reshape(n, t, f)
    if not np.isfinite(data).all():
        raise ParseError(f"{path}: non-finite value in payload")
    return RawSeries(data.copy(), granularity_minutes)


def save_series(series: RawSeries, path) -> None:
    n, t, f = series.data.shape
    with open(path, "wb") as fh:
        fh.write(STBIN_MAGIC)
        fh.write(struct.pack("<III", n, t, f))
        fh.write(series.data.astype("<f8").tobytes())


def load_adjacency(path, mode: str = "edgelist", threshold_kappa: float = 0.0) -> Adjacency:
    path = Path(path)
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != 3:
                raise ParseError(f"{path}: row {lineno} needs 3 fields i,j,value")
            try:
                i, j, v = int(cells[0]), int(cells[1]), float(cells[2])
            except ValueError:
                if lineno == 1:
                    continue  # header row
                raise ParseError(f"{path}: row {lineno}: unparsable entry") from None
            rows.append((i, j, v))
    if not rows:
        raise ParseError(f"{path}: no edges")
    n = max(max(i, j) for i, j, _ in rows) + 1
    a = np.zeros((n, n))
    if mode == "edgelist":
        for i, j, w in rows:
            if i < 0 or j < 0:
                raise DataError(f"negative node index ({i},{j})")
            if w < 0:
                raise DataError(f"negative edge weight at ({i},{j})")
            a[i, j] = max(a[i, j], w)
        a = np.maximum(a, a.T)
        return Adjacency(a, source="edge-list")
    if mode == "distance":
        dists = np.array([v for _, _, v in rows])
        sigma = dists.std()
        if sigma == 0:
            sigma = 1.0
        for i, j, d in rows:
            if i < 0 or j < 0:
                raise DataError(f"negative node index ({i},{j})")
            if d < 0:
                raise DataError(f"negative distance at ({i},{j})")
            w = float(np.exp(-(d * d) / (sigma * sigma)))
            a[i, j] = max(a[i, j], w)
            a[j, i] = a[i, j]
        a[a < threshold_kappa] = 0.0
        return Adjacency(a, source="distance-kernel")
    raise DataError(f"unknown adjacency mode {mode!r}")


def save_adjacency(adj: Adjacency, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(adj.N):
            for j in range(i + 1, adj.N):
                if adj.A[i, j] != 0.0:
                    fh.write(f"{i},{j},{adj.A[i, j]!r}\n")


# ---------------------------------------------------------------------------
# windows, splits, normalization
# ---------------------------------------------------------------------------

def make_windows(series: RawSeries, W: int, nu: int) -> list[WindowedSample]:
    """Stride-1 sliding (input, target) pairs in chronological order."""
    if W < 1 or nu < 1:
        raise DataError(f"window sizes must be positive, got W={W}, nu={nu}")
    t_total = series.T
    if t_total < W + nu:
        raise DataError(f"series too short: T={t_total} < W+nu={W + nu}")
    out = []
    for anchor in range(W, t_total - nu + 1):
        out.append(
            WindowedSample(
                input=series.data[:, anchor - W:anchor, :],
                target=series.data[:, anchor:anchor + nu, :],
                anchor_t=anchor,
            )
        )
    return out


def split_chrono(samples: list[WindowedSample], ratios=(0.6, 0.2, 0.2)):
    """Contiguous chronological (train, val, test) partition.

    Train and val sizes are floored; the remainder goes to test.
    """
    r = np.asarray(ratios, dtype=np.float64)
    if (r <= 0).any():
        raise DataError(f"split ratios must be positive, got {ratios}")
    if abs(r.sum() - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {ratios}")
    n = len(samples)
    n_train = int(n * r[0])
    n_val = int(n * r[1])
    n_test = n - n_train - n_val
    if n_train == 0 or n_val == 0 or n_test <= 0:
        raise DataError(f"split of {n} samples with ratios {ratios} leaves an empty part")
    return samples[:n_train], samples[n_train:n_train + n_val], samples[n_train + n_val:]


def fit_norm(train_samples: list[WindowedSample]) -> NormStats:
    """Per-feature mean/std over the training samples (inputs and targets)."""
    if not train_samples:
        raise DataError("cannot fit normalization on an empty split")
    f = train_samples[0].input.shape[-1]
    vals = np.concatenate(
        [s.input.reshape(-1, f) for s in train_samples]
        + [s.target.reshape(-1, f) for s in train_samples],
        axis=0,
    )
    mean = vals.mean(axis=0)
    std = vals.std(axis=0)
    if (std <= 0).any():
        raise DataError("zero-variance feature in training split")
    return NormStats(mean, std, computed_on="train")


def standardize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - stats.mean) / stats.std


def destandardize(x: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * stats.std + stats.mean


# ---------------------------------------------------------------------------
# missingness
# ---------------------------------------------------------------------------

def gen_mcar(N: int, T: int, rate: float, seed: int) -> MissingMask:
    """Independent Bernoulli missingness per cell (random sensor failures)."""
    if not 0.0 <= rate <= 0.95:
        raise DataError(f"MCAR rate must be in [0, 0.95], got {rate}")
    rng = np.random.default_rng(seed)
    observed = rng.random((N, T)) >= rate
    return MissingMask(observed, scheme="MCAR", requested_rate=float(rate))


def gen_block(N: int, T: int, rate: float, block_len_range=(4, 12), seed: int = 0) -> MissingMask:
    """Contiguous per-sensor missing blocks until the requested rate is reached.

    Block lengths are uniform in [lo, hi]; placements that would touch an
    existing missing run are resampled so realized runs keep their sampled
    length (runs at the series end may be truncated). When space gets tight
    overlapping placements are allowed and merge.
    """
    lo, hi = int(block_len_range[0]), int(block_len_range[1])
    if not 1 <= lo <= hi <= T:
        raise DataError(f"block length range {block_len_range} invalid for T={T}")
    if not 0.0 <= rate <= 1.0:
        raise DataError(f"block missing rate must be in [0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    observed = np.ones((N, T), dtype=bool)
    total = N * T
    missing = 0
    stale = 0
    while missing < rate * total:
        sensor = int(rng.integers(0, N))
        length = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, T))
        end = min(start + length, T)
        # avoid touching an existing run so realized run lengths stay in range
        touch_lo = max(start - 1, 0)
        touch_hi = min(end + 1, T)
        if stale < 200 and not observed[sensor, touch_lo:touch_hi].all():
            stale += 1
            continue
        stale = 0
        observed[sensor, start:end] = False
        missing = int((~observed).sum())
    return MissingMask(observed, scheme="block", requested_rate=float(rate))


def apply_mask(window: np.ndarray, mask: np.ndarray):
    """Zero-fill missing entries and emit a 0/1 observation channel.

    ``window`` is a standardized (N, W) or (N, W, F) slice; ``mask`` is the
    matching (N, W) observed-flags slice.
    """
    window = np.asarray(window, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != window.shape[:2]:
        raise DataError(f"mask shape {mask.shape} does not match window {window.shape}")
    channel = mask.astype(np.float64)
    if window.ndim == 3:
        masked = window * channel[:, :, None]
    else:
        masked = window * channel
    return masked, channel
