"""OHLC ingestion, look-ahead labeling, chronological split, normalization, windowing.

Everything here is a pure function over immutable inputs: the same CSV always
produces the same SampleSet, bit for bit.
"""

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

FEATURE_COLUMNS = ("open", "high", "low", "close")
HIGH_IDX = FEATURE_COLUMNS.index("high")

SAMPLES_MAGIC = "ohlc-cnn/samples"
SAMPLES_VERSION = 1


@dataclass
class RawFrame:
    """Cleaned OHLC rows in file order, plus any non-price columns as strings."""
    prices: np.ndarray                 # (n, 4) float64: open, high, low, close
    extra: dict = field(default_factory=dict)
    dropped_rows: int = 0

    def __len__(self) -> int:
        return self.prices.shape[0]


@dataclass
class LabeledFrame:
    """OHLC features with a binary look-ahead movement label per row."""
    features: np.ndarray               # (n, 4) float64
    labels: np.ndarray                 # (n,) uint8
    horizon: int
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class NormStats:
    """Per-feature min/max, fitted on the training partition only."""
    minimum: np.ndarray                # (4,)
    maximum: np.ndarray                # (4,)


@dataclass
class SampleSet:
    """Sliding windows ready for the network: (n, 4 channels, window_len)."""
    windows: np.ndarray
    labels: np.ndarray                 # (n,) uint8
    window_len: int

    def __len__(self) -> int:
        return self.windows.shape[0]


def load_ohlc_csv(path) -> RawFrame:
    """Read an OHLC CSV, silently dropping rows with missing/non-numeric prices.

    The header must name Open, High, Low and Close (case-insensitive); other
    columns are carried along as strings. The number of dropped rows is
    reported on the returned frame.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file, no header row")
        lower = [h.strip().lower() for h in header]
        col_idx = {}
        for name in FEATURE_COLUMNS:
            if name not in lower:
                raise ValueError(f"{path}: header is missing required column '{name}'")
            col_idx[name] = lower.index(name)
        price_positions = set(col_idx.values())
        extra_cols = [(h, i) for i, h in enumerate(header) if i not in price_positions]

        rows = []
        extra = {name: [] for name, _ in extra_cols}
        dropped = 0
        for row in reader:
            try:
                values = [float(row[col_idx[c]]) for c in FEATURE_COLUMNS]
            except (ValueError, IndexError):
                dropped += 1
                continue
            if not all(math.isfinite(v) for v in values):
                dropped += 1
                continue
            rows.append(values)
            for name, i in extra_cols:
                extra[name].append(row[i] if i < len(row) else "")

    if not rows:
        raise ValueError(f"{path}: no usable rows after dropping {dropped} bad rows")
    return RawFrame(np.array(rows, dtype=np.float64), extra, dropped)


def label_high15(frame: RawFrame, horizon: int = 15) -> LabeledFrame:
    """Label row i as 1 when high(i + horizon) strictly exceeds high(i).

    Ties label 0. The final `horizon` rows have no look-ahead value and are
    dropped. The look-ahead highs are kept as an extra column until
    select_features removes them.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    n = len(frame)
    if n <= horizon:
        raise ValueError(f"need more than {horizon} rows to label, got {n}")
    highs = frame.prices[:, HIGH_IDX]
    future = highs[horizon:]
    labels = (future > highs[:-horizon]).astype(np.uint8)
    extra = {name: list(col[: n - horizon]) for name, col in frame.extra.items()}
    extra["future_high"] = [float(v) for v in future]
    return LabeledFrame(frame.prices[: n - horizon].copy(), labels, horizon, extra)


def select_features(frame: LabeledFrame) -> LabeledFrame:
    """Keep only the four price features and the label; drop every extra column."""
    return LabeledFrame(frame.features.copy(), frame.labels.copy(), frame.horizon, {})


def _slice(frame: LabeledFrame, start: int, stop: int) -> LabeledFrame:
    extra = {name: list(col[start:stop]) for name, col in frame.extra.items()}
    return LabeledFrame(frame.features[start:stop].copy(),
                        frame.labels[start:stop].copy(), frame.horizon, extra)


def split_train_test(frame: LabeledFrame, train_fraction: float = 0.7):
    """Chronological split: first floor(n * fraction) rows train, rest test."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(frame)
    n_train = int(n * train_fraction)
    if n_train == 0 or n_train == n:
        raise ValueError(
            f"split of {n} rows at fraction {train_fraction} leaves an empty partition"
        )
    return _slice(frame, 0, n_train), _slice(frame, n_train, n)


def fit_minmax(train: LabeledFrame) -> NormStats:
    """Per-feature min/max over the training partition."""
    if len(train) == 0:
        raise ValueError("cannot fit normalization stats on an empty frame")
    return NormStats(train.features.min(axis=0), train.features.max(axis=0))


def apply_minmax(frame: LabeledFrame, stats: NormStats) -> LabeledFrame:
    """Rescale each feature by (x - min) / (max - min).

    A constant feature (max == min) maps to 0. Values outside the fitted range
    are NOT clipped, so test-partition features may leave [0, 1].
    """
    span = stats.maximum - stats.minimum
    safe = np.where(span > 0, span, 1.0)
    scaled = (frame.features - stats.minimum) / safe
    scaled[:, span == 0] = 0.0
    extra = {name: list(col) for name, col in frame.extra.items()}
    return LabeledFrame(scaled, frame.labels.copy(), frame.horizon, extra)


def make_windows(frame: LabeledFrame, window_len: int) -> SampleSet:
    """Stride-1 sliding windows of `window_len` rows as (4, window_len) maps.

    Window k covers rows k .. k+window_len-1 and takes the label of its final
    row, giving len(frame) - window_len + 1 samples.
    """
    if window_len < 1:
        raise ValueError(f"window_len must be >= 1, got {window_len}")
    if len(frame) < window_len:
        raise ValueError(f"frame has {len(frame)} rows, fewer than window_len {window_len}")
    view = np.lib.stride_tricks.sliding_window_view(frame.features, window_len, axis=0)
    windows = np.ascontiguousarray(view, dtype=np.float64)        # (n-L+1, 4, L)
    labels = frame.labels[window_len - 1:].copy()
    return SampleSet(windows, labels, window_len)


# ---------------------------------------------------------------------------
# on-disk formats
# ---------------------------------------------------------------------------

def save_samples(path, samples: SampleSet) -> None:
    """Write a SampleSet cache (versioned, timestamp-free, bit-exact round trip)."""
    buf = io.BytesIO()
    np.savez(
        buf,
        format_magic=np.str_(SAMPLES_MAGIC),
        format_version=np.int64(SAMPLES_VERSION),
        window_len=np.int64(samples.window_len),
        windows=samples.windows,
        labels=samples.labels,
    )
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_samples(path) -> SampleSet:
    with np.load(path, allow_pickle=False) as data:
        if "format_magic" not in data or str(data["format_magic"]) != SAMPLES_MAGIC:
            raise ValueError(f"{path} is not a prepared-sample file")
        version = int(data["format_version"])
        if version != SAMPLES_VERSION:
            raise ValueError(f"unsupported sample-file version {version}")
        return SampleSet(data["windows"], data["labels"], int(data["window_len"]))


def save_norm_stats(path, stats: NormStats) -> None:
    with open(path, "w") as fh:
        json.dump({"min": stats.minimum.tolist(), "max": stats.maximum.tolist()},
                  fh, sort_keys=True)
        fh.write("\n")


def load_norm_stats(path) -> NormStats:
    with open(path) as fh:
        d = json.load(fh)
    return NormStats(np.array(d["min"], dtype=np.float64),
                     np.array(d["max"], dtype=np.float64))
