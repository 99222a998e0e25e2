"""Datasets: synthetic generators, IDX ingestion and the RFD1 container."""
from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import RngStream, as_diag, sample_gaussian

RFD_MAGIC = b"RFD1"
FLAG_IMAGE = 1


@dataclass
class LabeledDataset:
    """N x d float64 inputs, integer labels in [0, C), and a provenance manifest."""

    inputs: np.ndarray
    labels: np.ndarray
    n_classes: int
    manifest: dict = field(default_factory=dict)
    image_like: bool = False

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(np.atleast_2d(self.inputs), dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        n = self.inputs.shape[0]
        if n < 1:
            raise ValueError("dataset must contain at least one sample")
        if self.labels.shape != (n,):
            raise ValueError(f"expected {n} labels, got shape {self.labels.shape}")
        if self.n_classes < 1 or self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError("labels out of range")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("non-finite inputs")
        if self.image_like and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise ValueError("image-like inputs must lie in [0, 1]")

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def dim(self):
        return self.inputs.shape[1]

    def signed_labels(self):
        """Binary labels as -1/+1 (class 0 -> -1)."""
        if self.n_classes != 2:
            raise ValueError("signed labels need a binary task")
        return 2 * self.labels - 1

    def content_hash(self):
        h = hashlib.sha256()
        h.update(struct.pack("<III", len(self), self.dim, self.n_classes))
        h.update(self.inputs.astype("<f8").tobytes())
        h.update(self.labels.astype("<u4").tobytes())
        return h.hexdigest()

    def subset(self, idx, **manifest):
        idx = np.asarray(idx)
        man = dict(self.manifest, parent=self.content_hash(), **manifest)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.n_classes, man, self.image_like)

    def split(self, n_train, rng):
        """Shuffle with ``rng`` and split into (train, test)."""
        perm = rng.permutation(len(self))
        return (self.subset(perm[:n_train], split="train"),
                self.subset(perm[n_train:], split="test"))


# ------------------------------------------------------------ synthetic


@dataclass
class SyntheticSpec:
    """Parameters of a synthetic task.

    kind "two-gaussian": x ~ N(y mu_star, diag(sigma_star)).
    kind "robustness-vs-accuracy": one robust coordinate x1 = y u, u ~ U[1, 2],
    plus a non-robust block of ``split`` coordinates each equal to
    y * eps/(2 sqrt(split)) (block l2 norm eps/2); dim = 1 + split.
    """

    kind: str
    n: int
    dim: int = 2
    mu_star: list | None = None
    sigma_star: list | None = None
    epsilon_design: float = 0.5
    split: int = 1
    seed: int = 0

    def validate(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.kind == "two-gaussian":
            if self.mu_star is None or self.sigma_star is None:
                raise ValueError("two-gaussian needs mu_star and sigma_star")
            as_diag(self.sigma_star, "sigma_star")
            if len(self.mu_star) != len(self.sigma_star) or len(self.mu_star) != self.dim:
                raise ValueError("mu_star/sigma_star length must equal dim")
        elif self.kind == "robustness-vs-accuracy":
            if self.split < 1 or self.dim != 1 + self.split:
                raise ValueError("robustness-vs-accuracy needs dim = 1 + split")
            # robust coordinate: classes sit at |x1| >= 1, a gap of 2 around 0
            if not (0 < self.epsilon_design and 2.0 > 2 * self.epsilon_design):
                raise ValueError("margin violation: robust class gap must exceed 2*epsilon_design")
        else:
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        return self


def _signed_to_dataset(x, y, spec):
    labels = (y + 1) // 2
    return LabeledDataset(x, labels, 2, {"generator": asdict(spec)})


def gen_two_gaussian(spec):
    spec.validate()
    if spec.kind != "two-gaussian":
        raise ValueError("spec kind must be two-gaussian")
    rng = RngStream(spec.seed, 0)
    y = np.where(rng.integers(0, 2, spec.n) == 1, 1, -1)
    mu = np.asarray(spec.mu_star, dtype=np.float64)
    x = y[:, None] * mu + sample_gaussian(rng, np.zeros_like(mu), spec.sigma_star, spec.n)
    return _signed_to_dataset(x, y, spec)


def gen_robustness_vs_accuracy(spec):
    spec.validate()
    if spec.kind != "robustness-vs-accuracy":
        raise ValueError("spec kind must be robustness-vs-accuracy")
    rng = RngStream(spec.seed, 0)
    y = np.where(rng.integers(0, 2, spec.n) == 1, 1, -1)
    u = rng.uniform(1.0, 2.0, spec.n)
    x = np.empty((spec.n, spec.dim))
    x[:, 0] = y * u
    x[:, 1:] = (y * spec.epsilon_design / (2.0 * np.sqrt(spec.split)))[:, None]
    return _signed_to_dataset(x, y, spec)


def generate(spec):
    if spec.kind == "two-gaussian":
        return gen_two_gaussian(spec)
    return gen_robustness_vs_accuracy(spec)


# ------------------------------------------------------------------ IDX

_IDX_TYPES = {0x08: np.dtype(">u1"), 0x0D: np.dtype(">f4")}
_IDX_CODES = {np.dtype("u1"): 0x08, np.dtype("f4"): 0x0D}


def _open(path, mode):
    path = Path(path)
    return gzip.open(path, mode) if path.suffix == ".gz" else open(path, mode)


def load_idx(path, raw=False):
    """Parse an IDX file (optionally gzipped).

    Returns (array, meta).  Unsigned-byte payloads with 2+ dimensions are
    images and are rescaled to [0, 1] as float64 unless ``raw``.
    """
    with _open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[0] != 0 or buf[1] != 0:
        raise ValueError("bad IDX magic")
    code, ndim = buf[2], buf[3]
    if code not in _IDX_TYPES:
        raise ValueError(f"unsupported IDX type byte 0x{code:02X}")
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise ValueError("truncated IDX header")
    shape = struct.unpack(f">{ndim}I", buf[4:header])
    dt = _IDX_TYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - header != count * dt.itemsize:
        raise ValueError(f"truncated IDX payload: expected {count * dt.itemsize} bytes, got {len(buf) - header}")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=header).reshape(shape)
    arr = arr.astype(dt.newbyteorder("="))
    meta = {"type_byte": code, "shape": list(shape)}
    if not raw and code == 0x08 and ndim >= 2:
        arr = arr.astype(np.float64) / 255.0
        meta["rescaled"] = True
    return arr, meta


def save_idx(path, array):
    """Write a uint8 or float32 array as IDX (gzipped if the name ends in .gz)."""
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"IDX supports uint8 and float32, not {array.dtype}")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = array.astype(_IDX_TYPES[code]).tobytes()
    with _open(path, "wb") as fh:
        fh.write(header + payload)


def load_idx_dataset(images_path, labels_path, classes=None, limit=None):
    """Build an image-like dataset from an IDX image/label pair.

    ``classes`` selects and re-indexes digits (e.g. (3, 7) -> labels 0, 1);
    ``limit`` keeps the first N selected samples.
    """
    images, _ = load_idx(images_path)
    labels, _ = load_idx(labels_path)
    labels = labels.astype(np.int64)
    x = images.reshape(len(images), -1)
    if classes is None:
        classes = sorted(np.unique(labels).tolist())
    classes = list(classes)
    keep = np.flatnonzero(np.isin(labels, classes))
    if limit is not None:
        keep = keep[:limit]
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[v] for v in labels[keep]], dtype=np.int64)
    man = {"source": {"images": str(images_path), "labels": str(labels_path)}, "classes": classes}
    return LabeledDataset(x[keep], y, len(classes), man, image_like=True)


# ----------------------------------------------------------------- RFD1


def save_dataset(ds, path):
    """Write ``ds`` as an RFD1 container."""
    if len(ds) == 0:
        raise ValueError("refusing to save an empty dataset")
    man = json.dumps(ds.manifest, sort_keys=True).encode()
    flags = FLAG_IMAGE if ds.image_like else 0
    parts = [
        RFD_MAGIC,
        struct.pack("<IIII", len(ds), ds.dim, ds.n_classes, flags),
        ds.inputs.astype("<f8").tobytes(),
        ds.labels.astype("<u4").tobytes(),
        struct.pack("<I", len(man)),
        man,
    ]
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path):
    buf = Path(path).read_bytes()
    if buf[:4] != RFD_MAGIC:
        raise ValueError("magic mismatch: not an RFD1 file")
    if len(buf) < 20:
        raise ValueError("size mismatch: truncated header")
    n, d, c, flags = struct.unpack("<IIII", buf[4:20])
    off = 20
    need = off + 8 * n * d + 4 * n + 4
    if len(buf) < need:
        raise ValueError(f"size mismatch: expected at least {need} bytes, got {len(buf)}")
    x = np.frombuffer(buf, "<f8", n * d, off).reshape(n, d).astype(np.float64)
    off += 8 * n * d
    y = np.frombuffer(buf, "<u4", n, off).astype(np.int64)
    off += 4 * n
    (mlen,) = struct.unpack("<I", buf[off:off + 4])
    off += 4
    if len(buf) != off + mlen:
        raise ValueError(f"size mismatch: manifest length {mlen} vs {len(buf) - off} bytes left")
    try:
        man = json.loads(buf[off:].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"manifest parse failure: {exc}") from exc
    return LabeledDataset(x, y, c, man, bool(flags & FLAG_IMAGE))
