"""Synthetic hierarchical feature sets, paired-view augmentation, and the
on-disk dataset formats.

The generator draws coarse prototypes, fine prototypes around them, and
instances around those, with strictly decreasing spreads, so the hidden
fine labels are geometrically meaningful but never exposed to training.
Datasets round-trip through a hand-inspectable CSV format and an equivalent
little-endian binary format.
"""

import io
import os
import re
from dataclasses import dataclass, field

import numpy as np

DATA_MAGIC = b"PEHCM1-DATA"
DATA_VERSION = 1

_HEADER_RE = re.compile(r"^dim=(\d+),has_fine=([01])$")


class ParseError(ValueError):
    """A dataset file is malformed; the message names the offending line."""


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape of a generated hierarchy: counts, dimension, spreads, seed."""

    n_coarse: int = 5
    fines_per_coarse: int = 4
    instances_per_fine: int = 200
    dim: int = 32
    spread_coarse: float = 1.0
    spread_fine: float = 0.25
    spread_instance: float = 0.05
    eval_instances_per_fine: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("n_coarse", "fines_per_coarse", "instances_per_fine",
                     "dim", "eval_instances_per_fine"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.spread_coarse > self.spread_fine > self.spread_instance > 0.0:
            raise ValueError("spreads must satisfy coarse > fine > instance > 0")

    @property
    def n_fine(self):
        return self.n_coarse * self.fines_per_coarse


@dataclass
class FeatureSet:
    """Feature rows with coarse labels, hidden fine labels (-1 when absent),
    and unique instance ids."""

    features: np.ndarray
    coarse: np.ndarray
    fine: np.ndarray
    instance_id: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.coarse = np.asarray(self.coarse, dtype=np.int64)
        self.fine = np.asarray(self.fine, dtype=np.int64)
        self.instance_id = np.asarray(self.instance_id, dtype=np.int64)
        n = len(self.features)
        if not (len(self.coarse) == len(self.fine) == len(self.instance_id) == n):
            raise ValueError("feature and label arrays must have equal lengths")

    @property
    def n(self):
        return len(self.features)

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def has_fine(self):
        return self.n > 0 and bool((self.fine >= 0).all())


def generate(spec):
    """Draw (train, eval) splits with disjoint instance pools.

    Fine prototypes sit around their coarse prototype, instances around
    their fine prototype. Identical specs produce bitwise-identical splits.
    """
    rng = np.random.default_rng(spec.seed)
    coarse_protos = rng.normal(0.0, spec.spread_coarse, (spec.n_coarse, spec.dim))
    fine_protos = (
        np.repeat(coarse_protos, spec.fines_per_coarse, axis=0)
        + rng.normal(0.0, spec.spread_fine, (spec.n_fine, spec.dim))
    )

    def draw(instances_per_fine, id_offset):
        n = spec.n_fine * instances_per_fine
        feats = (
            np.repeat(fine_protos, instances_per_fine, axis=0)
            + rng.normal(0.0, spec.spread_instance, (n, spec.dim))
        )
        fine = np.repeat(np.arange(spec.n_fine), instances_per_fine)
        coarse = fine // spec.fines_per_coarse
        ids = np.arange(n) + id_offset
        return FeatureSet(feats, coarse, fine, ids)

    train = draw(spec.instances_per_fine, 0)
    eval_pool = draw(spec.eval_instances_per_fine, train.n)
    return train, eval_pool


def augment_pair(x, sigma, rng, scale_low=0.8, scale_high=1.2):
    """Two noisy, independently rescaled views of the same feature rows.

    Each view adds Gaussian noise of scale sigma, then multiplies by a
    per-row scale drawn uniformly from [scale_low, scale_high]. Works on a
    single vector or a batch.
    """
    x = np.asarray(x, dtype=np.float64)
    if sigma < 0.0:
        raise ValueError("sigma must be nonnegative")
    if not 0.0 < scale_low <= scale_high:
        raise ValueError("need 0 < scale_low <= scale_high")
    lead = x.shape[:-1] + (1,)

    def view():
        noisy = x + rng.normal(0.0, sigma, x.shape) if sigma > 0.0 else x.copy()
        scale = rng.uniform(scale_low, scale_high, lead)
        return noisy * scale

    return view(), view()


# -- CSV format ------------------------------------------------------------------


def _format_csv(fs):
    has_fine = fs.has_fine
    lines = [f"dim={fs.dim},has_fine={1 if has_fine else 0}"]
    for i in range(fs.n):
        parts = [str(int(fs.coarse[i]))]
        if has_fine:
            parts.append(str(int(fs.fine[i])))
        parts.extend(repr(float(v)) for v in fs.features[i])
        lines.append(",".join(parts))
    return "\n".join(lines) + "\n"


def write_csv(path, fs):
    _atomic_write(path, _format_csv(fs).encode())


def _parse_csv(text, origin):
    lines = text.splitlines()
    if not lines:
        raise ParseError(f"{origin}: empty file")
    header = _HEADER_RE.match(lines[0].strip())
    if header is None:
        raise ParseError(f"{origin}: line 1: bad header {lines[0]!r}, "
                         "expected dim=<n>,has_fine=<0|1>")
    dim = int(header.group(1))
    has_fine = header.group(2) == "1"
    expected = 1 + (1 if has_fine else 0) + dim
    feats, coarse, fine = [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != expected:
            raise ParseError(f"{origin}: line {lineno}: expected {expected} "
                             f"columns, got {len(parts)}")
        try:
            coarse.append(int(parts[0]))
            cursor = 1
            if has_fine:
                fine.append(int(parts[1]))
                cursor = 2
            feats.append([float(v) for v in parts[cursor:]])
        except ValueError as exc:
            raise ParseError(f"{origin}: line {lineno}: {exc}") from exc
    n = len(feats)
    fine_arr = np.asarray(fine) if has_fine else np.full(n, -1)
    return FeatureSet(np.asarray(feats, dtype=np.float64).reshape(n, dim),
                      np.asarray(coarse), fine_arr, np.arange(n))


# -- binary format -----------------------------------------------------------------


def _format_binary(fs):
    import struct

    has_fine = fs.has_fine
    buf = io.BytesIO()
    buf.write(DATA_MAGIC)
    buf.write(struct.pack("<IBIQ", DATA_VERSION, 1 if has_fine else 0, fs.dim, fs.n))
    buf.write(fs.coarse.astype("<i8").tobytes())
    if has_fine:
        buf.write(fs.fine.astype("<i8").tobytes())
    buf.write(fs.features.astype("<f8").tobytes())
    return buf.getvalue()


def write_binary(path, fs):
    _atomic_write(path, _format_binary(fs))


def _parse_binary(blob, origin):
    import struct

    head = len(DATA_MAGIC) + struct.calcsize("<IBIQ")
    if len(blob) < head or not blob.startswith(DATA_MAGIC):
        raise ParseError(f"{origin}: not a {DATA_MAGIC.decode()} file")
    version, has_fine, dim, n = struct.unpack_from("<IBIQ", blob, len(DATA_MAGIC))
    if version != DATA_VERSION:
        raise ParseError(f"{origin}: unsupported format version {version}")
    expected = head + 8 * n * (1 + has_fine) + 8 * n * dim
    if len(blob) != expected:
        raise ParseError(f"{origin}: truncated payload, expected {expected} bytes, "
                         f"got {len(blob)}")
    offset = head
    coarse = np.frombuffer(blob, "<i8", n, offset).astype(np.int64)
    offset += 8 * n
    if has_fine:
        fine = np.frombuffer(blob, "<i8", n, offset).astype(np.int64)
        offset += 8 * n
    else:
        fine = np.full(n, -1)
    feats = np.frombuffer(blob, "<f8", n * dim, offset).astype(np.float64)
    return FeatureSet(feats.reshape(n, dim), coarse, fine, np.arange(n))


def ingest_features(path):
    """Load a dataset file, sniffing the binary magic vs. the CSV header."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob.startswith(DATA_MAGIC):
        return _parse_binary(blob, os.fspath(path))
    try:
        text = blob.decode()
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: neither binary magic nor CSV text") from exc
    return _parse_csv(text, os.fspath(path))


def _atomic_write(path, payload):
    path = os.fspath(path)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
