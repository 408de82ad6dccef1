"""On-disk model/token formats and deterministic synthetic generators.

Model directory layout::

    manifest.json   {"version": 1, "dtype": "float32-le", "dims": {...},
                     "tensors": [{"name", "shape", "offset"}, ...]}
    weights.bin     every tensor, row-major little-endian float32, in manifest order

Token file layout (all little-endian)::

    b"TOKS" | u32 vocab | u32 count | count x u32 id

Random numbers come from SplitMix64 evaluated in counter mode: output ``i``
for seed ``s`` is ``mix(s + (i + 1) * 0x9E3779B97F4A7C15)`` (mod 2**64).
Normals use Box-Muller on consecutive output pairs, so the same
``(dims, seed)`` produces bitwise-identical weights everywhere.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import (
    ManifestError,
    NonFiniteError,
    OffsetError,
    ShapeError,
    StorageError,
    TokenRangeError,
    TruncationError,
    ValidationError,
)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.bin"
TOKEN_MAGIC = b"TOKS"

LAYER_NAMES = ("attn_q", "attn_k", "attn_v", "attn_o", "mlp_fc1", "mlp_fc2")

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@dataclass(frozen=True)
class ModelDims:
    d_model: int
    n_heads: int
    d_ff: int
    n_blocks: int
    vocab: int

    def __post_init__(self):
        for name in ("d_model", "n_heads", "d_ff", "n_blocks", "vocab"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or value < 1:
                raise ValidationError(f"{name} must be a positive int, got {value!r}")
        if self.d_model % self.n_heads:
            raise ValidationError(
                f"n_heads={self.n_heads} does not divide d_model={self.d_model}"
            )

    @property
    def head_dim(self):
        return self.d_model // self.n_heads

    def layer_shape(self, name):
        if name == "mlp_fc1":
            return (self.d_ff, self.d_model)
        if name == "mlp_fc2":
            return (self.d_model, self.d_ff)
        if name in LAYER_NAMES:
            return (self.d_model, self.d_model)
        raise ValidationError(f"unknown layer name {name!r}")

    def block_param_count(self):
        return sum(int(np.prod(self.layer_shape(n))) for n in LAYER_NAMES)

    def tensor_specs(self):
        """``(name, shape)`` for every stored tensor, in manifest order."""
        specs = [("embedding", (self.vocab, self.d_model))]
        for b in range(self.n_blocks):
            specs.extend((f"blocks.{b}.{n}", self.layer_shape(n)) for n in LAYER_NAMES)
        specs.append(("final_norm_gain", (self.d_model,)))
        specs.append(("lm_head", (self.vocab, self.d_model)))
        return specs

    def to_dict(self):
        return {
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "n_blocks": self.n_blocks,
            "vocab": self.vocab,
        }


def _frozen(array, shape, name):
    arr = np.ascontiguousarray(array, dtype=np.float32)
    if arr.shape != tuple(shape):
        raise ShapeError(f"tensor {name}: expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"tensor {name} contains non-finite values")
    if arr is array:
        arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ModelBundle:
    """Dense decoder-only model: dims plus named float32 tensors.

    ``blocks[i]`` maps each name in :data:`LAYER_NAMES` to a weight matrix of
    shape ``(out_features, in_features)``.  Arrays are read-only.
    """

    dims: ModelDims
    embedding: np.ndarray
    blocks: tuple
    final_norm_gain: np.ndarray
    lm_head: np.ndarray

    def __post_init__(self):
        d = self.dims
        if len(self.blocks) != d.n_blocks:
            raise ShapeError(f"expected {d.n_blocks} blocks, got {len(self.blocks)}")
        object.__setattr__(self, "embedding", _frozen(self.embedding, (d.vocab, d.d_model), "embedding"))
        blocks = []
        for b, block in enumerate(self.blocks):
            if set(block) != set(LAYER_NAMES):
                raise ShapeError(f"block {b} has layers {sorted(block)}, expected {list(LAYER_NAMES)}")
            blocks.append(
                {n: _frozen(block[n], d.layer_shape(n), f"blocks.{b}.{n}") for n in LAYER_NAMES}
            )
        object.__setattr__(self, "blocks", tuple(blocks))
        object.__setattr__(
            self, "final_norm_gain", _frozen(self.final_norm_gain, (d.d_model,), "final_norm_gain")
        )
        object.__setattr__(self, "lm_head", _frozen(self.lm_head, (d.vocab, d.d_model), "lm_head"))

    def tensors(self):
        """``(name, array)`` pairs in manifest order."""
        out = [("embedding", self.embedding)]
        for b, block in enumerate(self.blocks):
            out.extend((f"blocks.{b}.{n}", block[n]) for n in LAYER_NAMES)
        out.append(("final_norm_gain", self.final_norm_gain))
        out.append(("lm_head", self.lm_head))
        return out

    @classmethod
    def from_tensors(cls, dims, named):
        named = dict(named)
        blocks = tuple(
            {n: named[f"blocks.{b}.{n}"] for n in LAYER_NAMES} for b in range(dims.n_blocks)
        )
        return cls(dims, named["embedding"], blocks, named["final_norm_gain"], named["lm_head"])

    def replace_layers(self, layers):
        """Copy with prunable weights swapped; ``layers`` maps ``(block, name)`` to arrays."""
        blocks = []
        for b, block in enumerate(self.blocks):
            new = dict(block)
            for n in LAYER_NAMES:
                if (b, n) in layers:
                    new[n] = layers[(b, n)]
            blocks.append(new)
        return ModelBundle(self.dims, self.embedding, tuple(blocks), self.final_norm_gain, self.lm_head)

    def prunable_param_count(self):
        return self.dims.n_blocks * self.dims.block_param_count()

    def equals(self, other):
        """Bitwise equality of dims and every tensor."""
        if self.dims != other.dims:
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for (_, a), (_, b) in zip(self.tensors(), other.tensors())
        )


@dataclass(frozen=True, eq=False)
class TokenStream:
    vocab: int
    ids: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.vocab < 1:
            raise ValidationError(f"vocab must be positive, got {self.vocab}")
        ids = np.asarray(self.ids)
        if ids.ndim != 1:
            raise ValidationError("token ids must be one-dimensional")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab):
            bad = int(ids[(ids < 0) | (ids >= self.vocab)][0])
            raise TokenRangeError(f"token id {bad} outside [0, {self.vocab})")
        ids = ids.astype(np.int64, copy=True)
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)

    def __len__(self):
        return int(self.ids.size)

    def windows(self, seq_len):
        """Consecutive non-overlapping chunks of ``seq_len`` ids (last may be shorter)."""
        return [self.ids[i : i + seq_len] for i in range(0, len(self), seq_len)]


# -- PRNG ------------------------------------------------------------------


def splitmix64(seed, start, count):
    """Outputs ``start .. start+count-1`` of the SplitMix64 stream for ``seed``."""
    key = np.uint64(int(seed) % (1 << 64))
    counter = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    z = key + counter * _GAMMA
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def standard_normals(seed, count):
    """``count`` N(0, 1) draws via Box-Muller, interleaving cos/sin outputs."""
    n_pairs = (count + 1) // 2
    bits = splitmix64(seed, 0, 2 * n_pairs)
    # (x >> 11 + 1) * 2^-53 lies in (0, 1], keeping log() finite
    u = ((bits >> np.uint64(11)) + np.uint64(1)).astype(np.float64) * 2.0**-53
    radius = np.sqrt(-2.0 * np.log(u[0::2]))
    theta = 2.0 * np.pi * u[1::2]
    out = np.empty(2 * n_pairs)
    out[0::2] = radius * np.cos(theta)
    out[1::2] = radius * np.sin(theta)
    return out[:count]


def generate_model(dims, seed):
    """Seeded synthetic model; each matrix ~ N(0, 1/fan_in), fan_in = columns.

    The final norm gain is all ones (a gain is not a fan-in weighted map).
    """
    specs = dims.tensor_specs()
    matrices = [(n, s) for n, s in specs if len(s) == 2]
    total = sum(s[0] * s[1] for _, s in matrices)
    z = standard_normals(seed, total)
    named = {"final_norm_gain": np.ones(dims.d_model, dtype=np.float32)}
    pos = 0
    for name, shape in matrices:
        size = shape[0] * shape[1]
        named[name] = (z[pos : pos + size] / np.sqrt(shape[1])).astype(np.float32).reshape(shape)
        pos += size
    return ModelBundle.from_tensors(dims, named)


def generate_tokens(vocab, length, seed):
    if vocab < 2:
        raise ValidationError(f"vocab must be >= 2, got {vocab}")
    if length < 1:
        raise ValidationError(f"length must be >= 1, got {length}")
    bits = splitmix64(seed, 0, length)
    # multiply-shift maps the high 32 bits into [0, vocab)
    ids = ((bits >> np.uint64(32)) * np.uint64(vocab)) >> np.uint64(32)
    return TokenStream(vocab, ids.astype(np.int64))


# -- model I/O ---------------------------------------------------------------


def write_model(bundle, path, metadata=None):
    """Write ``manifest.json`` + ``weights.bin``; ``metadata`` is stored verbatim."""
    path = Path(path)
    tensors = []
    offset = 0
    for name, arr in bundle.tensors():
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    manifest = {
        "version": FORMAT_VERSION,
        "dtype": "float32-le",
        "dims": bundle.dims.to_dict(),
        "tensors": tensors,
    }
    if metadata:
        manifest["metadata"] = dict(metadata)
    try:
        path.mkdir(parents=True, exist_ok=True)
        with open(path / WEIGHTS_NAME, "wb") as fh:
            for _, arr in bundle.tensors():
                fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))
        with open(path / MANIFEST_NAME, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise StorageError(f"cannot write model ({exc.strerror or exc})", path) from exc


def _load_manifest(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise StorageError("missing manifest", path) from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    except OSError as exc:
        raise StorageError(f"cannot read manifest ({exc})", path) from exc


def read_metadata(path):
    """The optional ``metadata`` object of a model manifest (empty if absent)."""
    manifest = _load_manifest(Path(path) / MANIFEST_NAME)
    meta = manifest.get("metadata", {}) if isinstance(manifest, dict) else {}
    return meta if isinstance(meta, dict) else {}


def read_model(path):
    path = Path(path)
    manifest = _load_manifest(path / MANIFEST_NAME)
    if not isinstance(manifest, dict):
        raise ManifestError("manifest must be a JSON object")
    if manifest.get("version") != FORMAT_VERSION:
        raise ManifestError(f"unsupported manifest version {manifest.get('version')!r}")
    if manifest.get("dtype", "float32-le") != "float32-le":
        raise ManifestError(f"unsupported dtype {manifest.get('dtype')!r}")
    try:
        dims = ModelDims(**manifest["dims"])
        entries = manifest["tensors"]
        expected = dims.tensor_specs()
        names = [e["name"] for e in entries]
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"manifest missing field: {exc}") from exc
    if names != [n for n, _ in expected]:
        raise ManifestError(f"tensor table {names} does not match architecture")

    try:
        blob = (path / WEIGHTS_NAME).read_bytes()
    except FileNotFoundError as exc:
        raise StorageError("missing weights blob", path / WEIGHTS_NAME) from exc
    except OSError as exc:
        raise StorageError(f"cannot read weights ({exc})", path / WEIGHTS_NAME) from exc

    named = {}
    cursor = 0
    for entry, (name, shape) in zip(entries, expected):
        if tuple(entry.get("shape", ())) != shape:
            raise ShapeError(f"tensor {name}: manifest shape {entry.get('shape')} != expected {list(shape)}")
        if entry.get("offset") != cursor:
            raise OffsetError(f"tensor {name}: offset {entry.get('offset')} != expected {cursor}")
        nbytes = int(np.prod(shape)) * 4
        if cursor + nbytes > len(blob):
            raise TruncationError(
                f"weights.bin truncated inside tensor {name} "
                f"(needs {cursor + nbytes} bytes, have {len(blob)})",
                tensor=name,
            )
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=cursor)
        named[name] = arr.astype(np.float32).reshape(shape)
        cursor += nbytes
    if cursor != len(blob):
        raise TruncationError(f"weights.bin has {len(blob) - cursor} trailing bytes")
    return ModelBundle.from_tensors(dims, named)


# -- token I/O ---------------------------------------------------------------


def write_tokens(stream, path):
    header = TOKEN_MAGIC + struct.pack("<II", stream.vocab, len(stream))
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(stream.ids.astype("<u4").tobytes())
    except OSError as exc:
        raise StorageError(f"cannot write tokens ({exc.strerror or exc})", path) from exc


def read_tokens(path):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read tokens ({exc.strerror or exc})", path) from exc
    if len(data) < 12 or data[:4] != TOKEN_MAGIC:
        raise ValidationError(f"{os.fspath(path)} is not a TOKS file")
    vocab, count = struct.unpack_from("<II", data, 4)
    if len(data) != 12 + 4 * count:
        raise TruncationError(f"token file holds {len(data) - 12} payload bytes, header says {4 * count}")
    ids = np.frombuffer(data, dtype="<u4", count=count, offset=12)
    return TokenStream(vocab, ids.astype(np.int64))
