"""Paired (image features, title) datasets: ingestion, caching, synthetic generation.

Ingestion format is line-delimited JSON, one pair per line::

    {"id": "p17", "title": "red wool scarf", "features": [0.1, ...], "group": "g3"}

``group`` is optional and marks duplicate groups. Splits come from an
explicit manifest (``{"train": [ids], "val": [...], "test": [...]}``) or, when
absent, from a deterministic hash of each id.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from crossembed.errors import ConfigError, DataError
from crossembed.text import Vocabulary, encode_batch, preprocess

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_PROPORTIONS = (0.9, 0.01, 0.09)


@dataclass
class PairedExample:
    id: str
    image_features: np.ndarray
    title: str
    group_id: Optional[str] = None

    def to_json(self) -> str:
        rec = {"id": self.id, "title": self.title,
               "features": [float(x) for x in self.image_features]}
        if self.group_id is not None:
            rec["group"] = self.group_id
        return json.dumps(rec)


@dataclass
class Dataset:
    examples: list[PairedExample]
    splits: dict[str, list[int]] = field(default_factory=dict)
    dropped: int = 0

    @property
    def feature_dim(self) -> int:
        return len(self.examples[0].image_features) if self.examples else 0

    def split(self, name: str) -> list[PairedExample]:
        return [self.examples[i] for i in self.splits.get(name, [])]

    def manifest(self) -> dict[str, list[str]]:
        return {name: [self.examples[i].id for i in idx] for name, idx in self.splits.items()}


def hash_split(example_id: str, proportions: Sequence[float] = DEFAULT_PROPORTIONS) -> str:
    """Map an id to a split through a uniform value derived from its SHA-256."""
    digest = hashlib.sha256(example_id.encode("utf-8")).digest()
    u = int.from_bytes(digest[:8], "little") / 2**64
    total = float(sum(proportions))
    acc = 0.0
    for name, p in zip(SPLITS, proportions):
        acc += p / total
        if u < acc:
            return name
    return SPLITS[len(proportions) - 1]


def _parse_record(line: str, lineno: int, path) -> PairedExample:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
    if not isinstance(rec, dict):
        raise DataError(f"{path}:{lineno}: expected a JSON object")
    try:
        ex_id, title, feats = rec["id"], rec["title"], rec["features"]
    except KeyError as exc:
        raise DataError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
    if not isinstance(ex_id, str) or not isinstance(title, str):
        raise DataError(f"{path}:{lineno}: 'id' and 'title' must be strings")
    try:
        vec = np.asarray(feats, dtype=np.float32)
    except (TypeError, ValueError):
        raise DataError(f"{path}:{lineno}: 'features' must be a list of numbers") from None
    if vec.ndim != 1 or not np.all(np.isfinite(vec)):
        raise DataError(f"{path}:{lineno}: 'features' must be a finite 1-D list")
    group = rec.get("group")
    return PairedExample(ex_id, vec, title, None if group is None else str(group))


def iter_jsonl(path) -> Iterable[PairedExample]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                yield _parse_record(line, lineno, path)


def load_dataset(path, manifest: Optional[Mapping[str, Sequence[str]]] = None,
                 proportions: Sequence[float] = DEFAULT_PROPORTIONS,
                 typos: Optional[Mapping[str, str]] = None) -> Dataset:
    """Stream a JSONL file into a :class:`Dataset` with split assignments.

    Examples whose title is empty after preprocessing are dropped and counted.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    examples: list[PairedExample] = []
    dim = None
    dropped = 0
    seen: set[str] = set()
    for lineno, ex in enumerate(iter_jsonl(path), 1):
        if dim is None:
            dim = len(ex.image_features)
        elif len(ex.image_features) != dim:
            raise DataError(
                f"{path}: example {ex.id!r} has {len(ex.image_features)} features, expected {dim}"
            )
        if ex.id in seen:
            raise DataError(f"{path}: duplicate id {ex.id!r}")
        seen.add(ex.id)
        if not preprocess(ex.title, typos):
            dropped += 1
            continue
        examples.append(ex)
    if not examples:
        raise DataError(f"{path}: no usable records")
    if dropped:
        log.info("dropped %d examples with empty titles after preprocessing", dropped)
    if manifest is not None:
        pos = {ex.id: i for i, ex in enumerate(examples)}
        splits = {}
        for name, ids in manifest.items():
            splits[name] = [pos[i] for i in ids if i in pos]
    else:
        splits = {name: [] for name in SPLITS[: len(proportions)]}
        for i, ex in enumerate(examples):
            splits[hash_split(ex.id, proportions)].append(i)
    return Dataset(examples, splits, dropped)


def write_jsonl(path, examples: Iterable[PairedExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")


def write_manifest(path, dataset: Dataset) -> None:
    Path(path).write_text(json.dumps(dataset.manifest(), sort_keys=True) + "\n")


def read_manifest(path) -> dict[str, list[str]]:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read split manifest ({exc})") from None


# ---------------------------------------------------------------------------
# packed binary cache
#
#   offset  size  field
#   0       8     magic b"XEMBDATA"
#   8       4     uint32 version (1)
#   12      8     uint64 N examples
#   20      4     uint32 F feature dim
#   24      8     uint64 J = byte length of the JSON text block
#   32      4*N*F float32 little-endian features, row-major
#   ...     J     UTF-8 JSON {"ids": [...], "titles": [...], "groups": [...], "splits": {...}}

CACHE_MAGIC = b"XEMBDATA"
CACHE_VERSION = 1


def write_cache(path, dataset: Dataset) -> None:
    n = len(dataset.examples)
    f = dataset.feature_dim
    feats = np.stack([ex.image_features for ex in dataset.examples]).astype("<f4") if n else \
        np.zeros((0, 0), "<f4")
    text = json.dumps({
        "ids": [ex.id for ex in dataset.examples],
        "titles": [ex.title for ex in dataset.examples],
        "groups": [ex.group_id for ex in dataset.examples],
        "splits": dataset.splits,
        "dropped": dataset.dropped,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<IQIQ", CACHE_VERSION, n, f, len(text)))
        fh.write(feats.tobytes())
        fh.write(text)


def read_cache(path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:8] != CACHE_MAGIC:
        raise DataError(f"{path}: not a dataset cache")
    version, n, f, jlen = struct.unpack_from("<IQIQ", buf, 8)
    if version != CACHE_VERSION:
        raise DataError(f"{path}: unsupported cache version {version}")
    off = 32
    feats = np.frombuffer(buf, dtype="<f4", count=n * f, offset=off).reshape(n, f)
    meta = json.loads(buf[off + 4 * n * f: off + 4 * n * f + jlen].decode("utf-8"))
    examples = [PairedExample(i, feats[k].astype(np.float32), t, g)
                for k, (i, t, g) in enumerate(zip(meta["ids"], meta["titles"], meta["groups"]))]
    return Dataset(examples, {k: list(v) for k, v in meta["splits"].items()}, meta["dropped"])


# ---------------------------------------------------------------------------
# model-ready arrays


@dataclass
class EncodedSplit:
    ids: list[str]
    features: np.ndarray
    tokens: np.ndarray
    lengths: np.ndarray
    groups: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.ids)


def encode_split(examples: Sequence[PairedExample], vocab: Vocabulary, max_len: int = 32,
                 typos: Optional[Mapping[str, str]] = None) -> EncodedSplit:
    """Tokenize titles and stack features. Group labels become dense integer codes."""
    if not examples:
        raise ConfigError("cannot encode an empty split")
    tokens, lengths = encode_batch([ex.title for ex in examples], vocab, max_len, typos)
    feats = np.stack([ex.image_features for ex in examples]).astype(np.float32)
    groups = None
    if any(ex.group_id is not None for ex in examples):
        codes: dict = {}
        groups = np.array([codes.setdefault(ex.group_id if ex.group_id is not None else f"\0{ex.id}",
                                            len(codes)) for ex in examples], dtype=np.int64)
    return EncodedSplit([ex.id for ex in examples], feats, tokens, lengths, groups)


# ---------------------------------------------------------------------------
# synthetic data

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class SyntheticSpec:
    """Knobs for the desk-scale paired-data generator.

    With ``order_coding`` the classes are partitioned into groups of
    ``order_group_size``; all classes of a group draw titles from the same
    bag of words and differ only in word order.
    """

    num_classes: int = 50
    samples: int = 5000
    val_samples: int = 500
    test_samples: int = 500
    feature_dim: int = 64
    latent_dim: int = 32
    feature_noise: float = 0.05
    title_mean: float = 17.0
    title_sd: float = 5.0
    min_title_len: int = 3
    order_coding: bool = False
    order_group_size: int = 2
    atoms_per_class: int = 4
    filler_words: int = 30
    filler_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.feature_noise < 0:
            raise ConfigError("feature_noise must be >= 0")
        if self.min_title_len < 3:
            raise ConfigError("min_title_len must be >= 3")
        if self.order_coding:
            if self.order_group_size < 2:
                raise ConfigError("order_group_size must be >= 2")
            if self.num_classes % self.order_group_size:
                raise ConfigError(
                    f"num_classes {self.num_classes} not divisible by order_group_size "
                    f"{self.order_group_size}"
                )
            if self.min_title_len < self.order_group_size:
                raise ConfigError("min_title_len must be >= order_group_size")


def _pseudo_words(rng: np.random.Generator, n: int) -> list[str]:
    words: list[str] = []
    seen: set[str] = set()
    while len(words) < n:
        syll = int(rng.integers(2, 4))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(syll))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _title_length(rng: np.random.Generator, spec: SyntheticSpec) -> int:
    return max(spec.min_title_len, int(round(rng.normal(spec.title_mean, spec.title_sd))))


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Deterministic synthetic pairs; ``group_id`` carries the class label.

    Image features are ``latent[class] @ A + noise`` for a fixed random
    projection ``A``. Ids are ``"<split>-<n>-c<class>"``; with order coding,
    examples emitted from one shared bag carry the same ``<n>``.
    """
    rng = np.random.default_rng(spec.seed)
    C = spec.num_classes
    latents = rng.standard_normal((C, spec.latent_dim))
    latents /= np.linalg.norm(latents, axis=1, keepdims=True)
    proj = rng.standard_normal((spec.latent_dim, spec.feature_dim)) / math.sqrt(spec.latent_dim)
    centers = latents @ proj

    if spec.order_coding:
        G = spec.order_group_size
        words = _pseudo_words(rng, C)
        group_atoms = [words[g * G:(g + 1) * G] for g in range(C // G)]
    else:
        words = _pseudo_words(rng, C * spec.atoms_per_class + spec.filler_words)
        class_atoms = [words[c * spec.atoms_per_class:(c + 1) * spec.atoms_per_class] for c in range(C)]
        fillers = words[C * spec.atoms_per_class:]

    def image(c: int) -> np.ndarray:
        noise = rng.standard_normal(spec.feature_dim) * spec.feature_noise
        return (centers[c] + noise).astype(np.float32)

    examples: list[PairedExample] = []
    splits: dict[str, list[int]] = {}
    for split, count in (("train", spec.samples), ("val", spec.val_samples), ("test", spec.test_samples)):
        idx: list[int] = []
        if spec.order_coding:
            G = spec.order_group_size
            n_groups = C // G
            for draw in range(math.ceil(count / G)):
                g = draw % n_groups
                atoms = group_atoms[g]
                n = _title_length(rng, spec)
                counts = 1 + rng.multinomial(n - G, [1.0 / G] * G)
                for j in range(G):
                    if len(idx) >= count:
                        break
                    c = g * G + j
                    # class j reads the shared bag starting from its own atom
                    order = [(j + s) % G for s in range(G)]
                    title = " ".join(" ".join([atoms[a]] * int(counts[a])) for a in order)
                    idx.append(len(examples))
                    examples.append(PairedExample(f"{split}-{draw}-c{c}", image(c), title, f"c{c}"))
        else:
            for n_ex in range(count):
                c = int(rng.integers(C))
                n = _title_length(rng, spec)
                toks = []
                for _ in range(n):
                    if rng.random() < spec.filler_rate:
                        toks.append(fillers[rng.integers(len(fillers))])
                    else:
                        toks.append(class_atoms[c][rng.integers(spec.atoms_per_class)])
                if all(t in fillers for t in toks):
                    toks[int(rng.integers(n))] = class_atoms[c][0]
                idx.append(len(examples))
                examples.append(PairedExample(f"{split}-{n_ex}-c{c}", image(c), " ".join(toks), f"c{c}"))
        splits[split] = idx
    return Dataset(examples, splits)
