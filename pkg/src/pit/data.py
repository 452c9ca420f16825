"""Dataset ingestion, the PITD tensor container, windowing, and splits.

PITD container layout (all integers little-endian unsigned 32-bit):

    magic  b"PITD"
    u32    format version (currently 1)
    u32    record count
    per record:
        u32      name length in bytes
        bytes    UTF-8 name
        u32      rank
        u32[]    one extent per axis
        f32[]    payload, little-endian IEEE-754, C order

One on-disk precision (float32) keeps the format simple and matches
training precision; float64 inputs are quantized on save.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

CONTAINER_MAGIC = b"PITD"
CONTAINER_VERSION = 1

SPLIT_TAGS = ("train", "val", "test")


class ParseError(ValueError):
    """A data file failed validation; the message carries the line number."""


@dataclass
class Dataset:
    """Immutable N x C x T samples with targets, split tags, and the
    per-channel normalization that was applied to the inputs."""

    inputs: T.Tensor
    targets: np.ndarray
    tags: np.ndarray
    norm_mean: np.ndarray
    norm_std: np.ndarray
    label_names: tuple = ()
    source: str = field(default="", compare=False)

    def __post_init__(self):
        if self.inputs.ndim != 3:
            raise ValueError(f"inputs must be N x C x T, got {self.inputs.shape}")
        if len(self.targets) != self.inputs.shape[0]:
            raise ValueError("targets do not match the sample count")
        if len(self.tags) != self.inputs.shape[0]:
            raise ValueError("tags do not match the sample count")
        for arr in (self.inputs.data, self.targets, self.tags,
                    self.norm_mean, self.norm_std):
            arr.flags.writeable = False

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def num_classes(self) -> int:
        if not np.issubdtype(self.targets.dtype, np.integer):
            raise ValueError("real-valued targets have no classes")
        return int(self.targets.max()) + 1

    def part(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        """Inputs and targets for one split tag, as plain arrays."""
        if tag not in SPLIT_TAGS:
            raise ValueError(f"unknown split tag {tag!r}")
        idx = np.flatnonzero(self.tags == tag)
        return self.inputs.data[idx], self.targets[idx]

    def retagged(self, tags: np.ndarray) -> "Dataset":
        return Dataset(self.inputs, self.targets, tags.copy(),
                       self.norm_mean, self.norm_std, self.label_names,
                       self.source)


def _detect_delimiter(line: str) -> str:
    # auto-detect is limited to comma vs tab; whitespace files are not UCR
    return "\t" if line.count("\t") > line.count(",") else ","


def _parse_rows(path: str, delimiter: str | None):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if delimiter is None:
                delimiter = _detect_delimiter(line)
            cells = line.split(delimiter)
            values = []
            for col, cell in enumerate(cells):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path} line {lineno}: column {col} is not a "
                        f"number: {cell.strip()!r}") from None
            if len(values) < 2:
                raise ParseError(f"{path} line {lineno}: need a label and "
                                 f"at least one value")
            if rows and len(values) != len(rows[0][1]) + 1:
                raise ParseError(
                    f"{path} line {lineno}: expected {len(rows[0][1]) + 1} "
                    f"cells, got {len(values)}")
            rows.append((lineno, values[1:], values[0]))
    if not rows:
        raise ParseError(f"{path}: no data rows")
    return rows


def load_ucr_csv(path: str, delimiter: str | None = None,
                 train: Dataset | None = None) -> Dataset:
    """Load a UCR-style file: one series per row, label first.

    Loaded standalone, the file is tagged "train", labels are remapped to
    0-based contiguous ints, and per-channel z-normalization is computed
    from (and applied to) its rows.  Pass an already-loaded training
    Dataset as `train` to load a test file with the training statistics
    and label mapping instead; labels unseen in training are rejected.
    """
    rows = _parse_rows(path, delimiter)
    series = np.asarray([vals for _, vals, _ in rows], dtype=np.float32)
    raw_labels = [lab for _, _, lab in rows]

    if train is None:
        names = tuple(sorted(set(raw_labels)))
        mean = np.asarray([series.mean()], dtype=np.float32)
        std = np.asarray([max(series.std(), 1e-8)], dtype=np.float32)
        tag = "train"
    else:
        names = train.label_names
        mean, std = train.norm_mean, train.norm_std
        tag = "test"
    label_of = {name: i for i, name in enumerate(names)}

    labels = np.empty(len(rows), dtype=np.int64)
    for i, (lineno, _, lab) in enumerate(rows):
        if lab not in label_of:
            raise ParseError(f"{path} line {lineno}: label {lab!r} does not "
                             f"appear in the training set")
        labels[i] = label_of[lab]

    inputs = (series[:, None, :] - mean[:, None]) / std[:, None]
    tags = np.full(len(rows), tag, dtype="<U5")
    return Dataset(T.Tensor(inputs), labels, tags, mean, std, names, path)


# ------------------------------------------------------------ container


def save_tensors(path: str, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays to a PITD container (see module docstring)."""
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC)
        fh.write(struct.pack("<II", CONTAINER_VERSION, len(arrays)))
        for name in sorted(arrays):
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            arr = np.asarray(arrays[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def _take(buf: bytes, offset: int, n: int, path: str) -> tuple[bytes, int]:
    if offset + n > len(buf):
        raise ValueError(f"{path}: truncated container")
    return buf[offset:offset + n], offset + n


def load_tensors(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    chunk, off = _take(buf, 0, 4, path)
    if chunk != CONTAINER_MAGIC:
        raise ValueError(f"{path}: bad magic {chunk!r}")
    chunk, off = _take(buf, off, 8, path)
    version, count = struct.unpack("<II", chunk)
    if version != CONTAINER_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        chunk, off = _take(buf, off, 4, path)
        chunk, off = _take(buf, off, struct.unpack("<I", chunk)[0], path)
        name = chunk.decode("utf-8")
        chunk, off = _take(buf, off, 4, path)
        rank = struct.unpack("<I", chunk)[0]
        chunk, off = _take(buf, off, 4 * rank, path)
        shape = struct.unpack(f"<{rank}I", chunk)
        n = 1
        for extent in shape:
            n *= extent
        chunk, off = _take(buf, off, 4 * n, path)
        out[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(
            np.float32)
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return out


# ------------------------------------------------------------ windowing


def window(dataset: Dataset, length: int, shift: int) -> Dataset:
    """Cut every series into floor((T - length) / shift) + 1 windows.

    Labels, tags, and normalization carry over from the source rows.
    """
    t = dataset.inputs.shape[2]
    if length > t:
        raise ValueError(f"window length {length} exceeds series length {t}")
    if shift < 1:
        raise ValueError("shift must be >= 1")
    views = np.lib.stride_tricks.sliding_window_view(
        dataset.inputs.data, length, axis=2)[:, :, ::shift]
    n, c, n_win, _ = views.shape
    inputs = np.ascontiguousarray(
        views.transpose(0, 2, 1, 3).reshape(n * n_win, c, length))
    targets = np.repeat(dataset.targets, n_win, axis=0)
    tags = np.repeat(dataset.tags, n_win)
    return Dataset(T.Tensor(inputs), targets, tags, dataset.norm_mean,
                   dataset.norm_std, dataset.label_names, dataset.source)


# ------------------------------------------------------------ synthetic task


def synth_dilated_task(n: int, t: int = 32, lags=(0, 4, 8),
                       noise_std: float = 0.1, rng_seed: int = 0) -> Dataset:
    """Binary task: the class is the sign of the sum of the final step's
    lagged samples.  Solving it needs a receptive field past max(lags),
    and the lag spacing rewards a matching dilation."""
    lags = sorted(set(int(l) for l in lags))
    if not lags:
        raise ValueError("need at least one lag")
    if lags[0] < 0 or lags[-1] >= t:
        raise ValueError(f"lags must lie in [0, {t})")
    rng = np.random.Generator(np.random.Philox(seed=rng_seed))
    clean = rng.standard_normal((n, 1, t), dtype=np.float32)
    score = sum(clean[:, 0, t - 1 - l] for l in lags)
    labels = (score > 0).astype(np.int64)
    noisy = clean + noise_std * rng.standard_normal((n, 1, t),
                                                    dtype=np.float32)
    tags = np.full(n, "train", dtype="<U5")
    return Dataset(T.Tensor(noisy), labels, tags,
                   np.zeros(1, np.float32), np.ones(1, np.float32),
                   (0.0, 1.0), f"synth_dilated{tuple(lags)}")


# ------------------------------------------------------------ splitting


def _allocate(total: int, fractions) -> list[int]:
    # largest-remainder rounding so the counts sum to the total
    raw = [f * total for f in fractions]
    counts = [int(x) for x in raw]
    order = sorted(range(len(raw)), key=lambda i: raw[i] - counts[i],
                   reverse=True)
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def split(dataset: Dataset, fractions, stratified: bool = True,
          rng_seed: int = 0) -> Dataset:
    """Retag samples into train/val/test by the given fractions.

    Deterministic per seed.  Stratified splitting keeps per-class
    proportions and requires integer labels.
    """
    fractions = list(fractions)
    if not 1 <= len(fractions) <= len(SPLIT_TAGS):
        raise ValueError(f"need 1 to {len(SPLIT_TAGS)} fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions sum to {sum(fractions)}, not 1")
    if min(fractions) < 0:
        raise ValueError("fractions must be non-negative")
    n_parts = sum(1 for f in fractions if f > 0)
    rng = np.random.Generator(np.random.Philox(seed=rng_seed))
    tags = np.empty(dataset.n_samples, dtype="<U5")

    if stratified:
        if not np.issubdtype(dataset.targets.dtype, np.integer):
            raise ValueError("stratified split needs integer labels")
        groups = [np.flatnonzero(dataset.targets == c)
                  for c in range(dataset.num_classes)]
    else:
        groups = [np.arange(dataset.n_samples)]

    for idx in groups:
        if len(idx) < n_parts:
            raise ValueError(f"a group of {len(idx)} samples cannot cover "
                             f"{n_parts} splits")
        idx = rng.permutation(idx)
        counts = _allocate(len(idx), fractions)
        for i, f in enumerate(fractions):
            # guarantee every requested part sees each group
            if f > 0 and counts[i] == 0:
                donor = max(range(len(counts)), key=lambda k: counts[k])
                counts[donor] -= 1
                counts[i] += 1
        start = 0
        for tag, count in zip(SPLIT_TAGS, counts):
            tags[idx[start:start + count]] = tag
            start += count
    return dataset.retagged(tags)
