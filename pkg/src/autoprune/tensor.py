"""Weight bundles, token corpora and their on-disk formats.

A bundle directory holds ``manifest.json`` and ``tensors.bin``. The data
file is the concatenation of little-endian float32 tensors in row-major
order; the manifest lists ``{name, kind, shape, byte_offset}`` for each.
Tensors are widened to float64 on load. Everything a bundle holds is
rounded onto the float32 grid at construction, so ``save`` followed by
``load`` reproduces a bundle exactly.
"""

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    EmptyCorpus,
    IoFailure,
    MalformedRecord,
    MissingManifest,
    NonFiniteTensor,
    ShapeMismatch,
    TokenOutOfRange,
    UnknownManifestVersion,
)
from .validation import frozen

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
DATA_NAME = "tensors.bin"

LAYER_KINDS = (
    "attention_q",
    "attention_k",
    "attention_v",
    "attention_o",
    "mlp_in",
    "mlp_out",
)
AUX_KINDS = ("embedding", "pos_embedding", "norm_scale", "norm_bias", "head")


@dataclass(frozen=True)
class Topology:
    vocab_size: int
    d_model: int
    n_heads: int
    n_blocks: int
    d_mlp: int
    max_seq_len: int
    tied_head: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_blocks", "d_mlp", "max_seq_len"):
            if int(getattr(self, name)) <= 0:
                raise ShapeMismatch(f"topology.{name} must be positive")
        if self.d_model % self.n_heads:
            raise ShapeMismatch("d_model must be divisible by n_heads")

    def layer_shape(self, kind):
        d, h = self.d_model, self.d_mlp
        return {"mlp_in": (h, d), "mlp_out": (d, h)}.get(kind, (d, d))

    def aux_shapes(self):
        """Expected shape of every auxiliary tensor, in canonical order."""
        d = self.d_model
        shapes = {
            "embedding": (self.vocab_size, d),
            "pos_embedding": (self.max_seq_len, d),
        }
        for b in range(self.n_blocks):
            for ln in ("ln1", "ln2"):
                shapes[f"blocks.{b}.{ln}.scale"] = (d,)
                shapes[f"blocks.{b}.{ln}.bias"] = (d,)
        shapes["final_norm.scale"] = (d,)
        shapes["final_norm.bias"] = (d,)
        if not self.tied_head:
            shapes["head"] = (self.vocab_size, d)
        return shapes


def layer_name(block, kind):
    return f"blocks.{block}.{kind}"


def _aux_kind(name):
    if name in ("embedding", "pos_embedding", "head"):
        return name
    return "norm_scale" if name.endswith(".scale") else "norm_bias"


def _storage(arr, name):
    """Round onto the float32 storage grid and return a read-only float64 copy."""
    a = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise NonFiniteTensor(f"tensor {name!r} contains non-finite entries")
    a32 = a.astype(np.float32)
    if not np.all(np.isfinite(a32)):
        raise NonFiniteTensor(f"tensor {name!r} overflows float32 storage")
    return frozen(a32.astype(np.float64))


@dataclass(frozen=True)
class LayerRecord:
    name: str
    index: int
    kind: str
    weight: np.ndarray = field(repr=False)

    @property
    def block(self):
        return self.index // len(LAYER_KINDS)

    @property
    def shape(self):
        return self.weight.shape

    @property
    def size(self):
        return int(self.weight.size)


class ModelBundle:
    """Ordered prunable layers of a tiny decoder LM plus its auxiliary tensors.

    Immutable: use :meth:`with_weights` to derive a modified copy.
    """

    def __init__(self, topology, layers, aux):
        self.topology = topology
        if isinstance(layers, dict):
            layers = [layers[layer_name(b, k)] for b in range(topology.n_blocks) for k in LAYER_KINDS]
        expected = 6 * topology.n_blocks
        if len(layers) != expected:
            raise ShapeMismatch(f"expected {expected} prunable layers, got {len(layers)}")
        records = []
        for idx, w in enumerate(layers):
            block, kind = divmod(idx, len(LAYER_KINDS))
            kind = LAYER_KINDS[kind]
            name = layer_name(block, kind)
            if isinstance(w, LayerRecord):
                w = w.weight
            w = _storage(w, name)
            if w.shape != topology.layer_shape(kind):
                raise ShapeMismatch(
                    f"{name} has shape {w.shape}, topology requires {topology.layer_shape(kind)}"
                )
            records.append(LayerRecord(name, idx, kind, w))
        self._layers = tuple(records)
        self._by_name = {r.name: r for r in records}

        shapes = topology.aux_shapes()
        missing = set(shapes) - set(aux)
        extra = set(aux) - set(shapes)
        if missing or extra:
            raise ShapeMismatch(
                f"auxiliary tensors mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        self._aux = {}
        for name, shape in shapes.items():
            t = _storage(aux[name], name)
            if t.shape != shape:
                raise ShapeMismatch(f"{name} has shape {t.shape}, topology requires {shape}")
            self._aux[name] = t

    @property
    def layers(self):
        return self._layers

    @property
    def aux(self):
        return dict(self._aux)

    def layer(self, name):
        return self._by_name[name]

    @property
    def layer_names(self):
        return [r.name for r in self._layers]

    @property
    def layer_sizes(self):
        return np.array([r.size for r in self._layers], dtype=np.int64)

    def head(self):
        return self._aux["embedding"] if self.topology.tied_head else self._aux["head"]

    def with_weights(self, weights):
        """Return a new bundle with some layer weights replaced (``name -> matrix``)."""
        unknown = set(weights) - set(self._by_name)
        if unknown:
            raise KeyError(f"unknown layers: {sorted(unknown)}")
        layers = [weights.get(r.name, r.weight) for r in self._layers]
        return ModelBundle(self.topology, layers, self._aux)

    def tensors(self):
        """All tensors in canonical storage order as ``(name, kind, array)``."""
        out = [
            ("embedding", "embedding", self._aux["embedding"]),
            ("pos_embedding", "pos_embedding", self._aux["pos_embedding"]),
        ]
        for b in range(self.topology.n_blocks):
            for ln, kinds in (("ln1", LAYER_KINDS[:4]), ("ln2", LAYER_KINDS[4:])):
                for part in ("scale", "bias"):
                    name = f"blocks.{b}.{ln}.{part}"
                    out.append((name, _aux_kind(name), self._aux[name]))
                for k in kinds:
                    rec = self._by_name[layer_name(b, k)]
                    out.append((rec.name, rec.kind, rec.weight))
        for name in ("final_norm.scale", "final_norm.bias"):
            out.append((name, _aux_kind(name), self._aux[name]))
        if not self.topology.tied_head:
            out.append(("head", "head", self._aux["head"]))
        return out

    def __eq__(self, other):
        if not isinstance(other, ModelBundle) or self.topology != other.topology:
            return NotImplemented
        mine, theirs = self.tensors(), other.tensors()
        return len(mine) == len(theirs) and all(
            a[0] == b[0] and np.array_equal(a[2], b[2]) for a, b in zip(mine, theirs)
        )

    def __repr__(self):
        t = self.topology
        return (
            f"ModelBundle(n_blocks={t.n_blocks}, d_model={t.d_model}, "
            f"vocab_size={t.vocab_size}, layers={len(self._layers)})"
        )


def save_bundle(bundle, path):
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name, kind, arr in bundle.tensors():
        raw = arr.astype("<f4").tobytes(order="C")
        entries.append({"name": name, "kind": kind, "shape": list(arr.shape), "byte_offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "topology": asdict(bundle.topology),
        "tensors": entries,
    }
    try:
        path.mkdir(parents=True, exist_ok=True)
        (path / DATA_NAME).write_bytes(b"".join(chunks))
        (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write bundle to {path}: {exc}") from exc


def load_bundle(path):
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise MissingManifest(f"no {MANIFEST_NAME} in {path}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        data = (path / DATA_NAME).read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"cannot read bundle at {path}: {exc}") from exc

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise UnknownManifestVersion(f"unsupported format_version {version!r}")
    try:
        topology = Topology(**manifest["topology"])
        table = manifest["tensors"]
    except (KeyError, TypeError) as exc:
        raise ShapeMismatch(f"malformed manifest: {exc}") from exc

    declared = 0
    tensors = {}
    for entry in table:
        name, shape, off = entry["name"], tuple(entry["shape"]), int(entry["byte_offset"])
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = 4 * count
        if off < 0 or off + nbytes > len(data):
            raise ShapeMismatch(
                f"{name}: shape {shape} needs bytes [{off}, {off + nbytes}) but data holds {len(data)}"
            )
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteTensor(f"tensor {name!r} contains non-finite entries")
        tensors[name] = arr.astype(np.float64)
        declared += nbytes
    if declared != len(data):
        raise ShapeMismatch(f"manifest declares {declared} bytes but {DATA_NAME} holds {len(data)}")

    layers = {}
    for b in range(topology.n_blocks):
        for k in LAYER_KINDS:
            name = layer_name(b, k)
            if name not in tensors:
                raise ShapeMismatch(f"missing prunable tensor {name}")
            layers[name] = tensors.pop(name)
    return ModelBundle(topology, layers, tensors)


@dataclass(frozen=True)
class TokenCorpus:
    tokens: np.ndarray = field(repr=False)

    def __post_init__(self):
        t = np.asarray(self.tokens)
        if t.ndim != 1 or t.size == 0:
            raise EmptyCorpus("corpus is empty")
        if t.size < 2:
            raise EmptyCorpus("corpus needs at least two tokens")
        if np.issubdtype(t.dtype, np.signedinteger) and np.any(t < 0):
            raise MalformedRecord("negative token id")
        if not np.issubdtype(t.dtype, np.integer):
            raise MalformedRecord(f"token ids must be integers, got {t.dtype}")
        object.__setattr__(self, "tokens", frozen(t.astype(np.uint32)))

    def __len__(self):
        return int(self.tokens.size)

    def check_vocab(self, vocab_size):
        bad = int(self.tokens.max())
        if bad >= vocab_size:
            raise TokenOutOfRange(f"token id {bad} >= vocab_size {vocab_size}")


def load_corpus(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read corpus {path}: {exc}") from exc
    if not raw:
        raise EmptyCorpus(f"{path} is empty")
    if len(raw) % 4:
        raise MalformedRecord(f"{path}: size {len(raw)} is not a multiple of 4 bytes")
    return TokenCorpus(np.frombuffer(raw, dtype="<u4").copy())


def save_corpus(corpus, path):
    try:
        with open(os.fspath(path), "wb") as fh:
            fh.write(np.asarray(corpus.tokens, dtype="<u4").tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write corpus {path}: {exc}") from exc
