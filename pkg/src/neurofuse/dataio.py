"""Connectome datasets, knowledge-embedding archives, and split handling.

File formats
------------
Connectome dataset ("cnx-v1"): JSON Lines, UTF-8. The first line is a header
object ``{"format": "cnx-v1", "num_nodes": V, "num_classes": C,
"groups": [...], "atlas": [...]}`` (atlas optional); every following line is
one subject ``{"subject_id": str, "label": int, "group": str,
"adjacency": [V*V floats, row-major]}``.

Knowledge embeddings ("KEMB"): little-endian binary. Magic ``KEMB``,
u32 version=1, u64 N, u64 d, then N*d float32 row-major, then an optional
UTF-8 JSON trailer that may carry ``item_ids``. Stored as 32-bit floats,
widened to 64-bit in memory.

Split file: JSON ``{"seed": int, "train": [...], "val": [...], "test": [...]}``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

KEMB_MAGIC = b"KEMB"
KEMB_VERSION = 1

FEATURE_MODES = ("identity", "profile")


class ValidationError(ValueError):
    """Input data violates a dataset invariant."""


class FormatError(ValueError):
    """File bytes do not conform to the declared format."""


class StratificationError(ValidationError):
    """A stratum is too small to split at the requested ratios."""


@dataclass
class Connectome:
    """One subject: a symmetric nonnegative weighted graph over fixed ROIs."""

    subject_id: str
    num_nodes: int
    adjacency: np.ndarray
    label: int
    group: str

    def validate(self, num_classes: int, groups: list[str]) -> None:
        w = self.adjacency
        if w.shape != (self.num_nodes, self.num_nodes):
            raise ValidationError(
                f"subject {self.subject_id}: adjacency shape {w.shape} does not match "
                f"num_nodes {self.num_nodes}"
            )
        if not np.isfinite(w).all():
            raise ValidationError(f"subject {self.subject_id}: non-finite adjacency entries")
        if (w < 0).any():
            raise ValidationError(f"subject {self.subject_id}: negative adjacency entries")
        if not np.array_equal(w, w.T):
            raise ValidationError(f"subject {self.subject_id}: adjacency is not symmetric")
        if np.diagonal(w).any():
            raise ValidationError(f"subject {self.subject_id}: adjacency diagonal is not zero")
        if not 0 <= self.label < num_classes:
            raise ValidationError(
                f"subject {self.subject_id}: label {self.label} outside [0, {num_classes})"
            )
        if self.group not in groups:
            raise ValidationError(f"subject {self.subject_id}: unknown group {self.group!r}")


@dataclass
class ConnectomeDataset:
    subjects: list[Connectome]
    num_classes: int
    groups: list[str]
    node_atlas: list[str] | None = None
    feature_mode: str = "identity"

    @property
    def num_nodes(self) -> int:
        return self.subjects[0].num_nodes if self.subjects else 0

    def validate(self) -> None:
        if self.feature_mode not in FEATURE_MODES:
            raise ValidationError(f"unknown feature_mode {self.feature_mode!r}")
        if not self.subjects:
            raise ValidationError("dataset has no subjects")
        v = self.subjects[0].num_nodes
        for s in self.subjects:
            if s.num_nodes != v:
                raise ValidationError(
                    f"subject {s.subject_id}: num_nodes {s.num_nodes} differs from {v}"
                )
            s.validate(self.num_classes, self.groups)
        if self.node_atlas is not None and len(self.node_atlas) != v:
            raise ValidationError(f"atlas has {len(self.node_atlas)} names for {v} nodes")


@dataclass
class KnowledgeBase:
    embeddings: np.ndarray
    item_ids: list[str] | None = None

    @property
    def count(self) -> int:
        return int(self.embeddings.shape[0])

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    def validate(self) -> None:
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise ValidationError(f"knowledge matrix must be (N>=1, d), got {self.embeddings.shape}")
        if not np.isfinite(self.embeddings).all():
            raise ValidationError("knowledge matrix has non-finite entries")
        if self.item_ids is not None and len(self.item_ids) != self.count:
            raise ValidationError(
                f"{len(self.item_ids)} item ids for {self.count} embedding rows"
            )


@dataclass
class Split:
    train: list[int] = field(default_factory=list)
    val: list[int] = field(default_factory=list)
    test: list[int] = field(default_factory=list)
    seed: int = 0

    def validate(self, n: int) -> None:
        parts = [self.train, self.val, self.test]
        if any(len(p) == 0 for p in parts):
            raise ValidationError("every split part must be nonempty")
        combined = sorted(self.train + self.val + self.test)
        if combined != list(range(n)):
            raise ValidationError("split parts must partition all subject indices exactly")


def load_dataset(path: str, feature_mode: str = "identity") -> ConnectomeDataset:
    """Read and validate a cnx-v1 JSONL file. Violations raise, never repair."""
    with open(path, "r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line:
            raise FormatError(f"{path}: empty file")
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: bad header line: {e}") from None
        if header.get("format") != "cnx-v1":
            raise FormatError(f"{path}: unknown format {header.get('format')!r}")
        v = int(header["num_nodes"])
        c = int(header["num_classes"])
        groups = list(header["groups"])
        atlas = header.get("atlas")
        subjects = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise FormatError(f"{path}:{lineno}: bad record: {e}") from None
            flat = np.asarray(rec["adjacency"], dtype=np.float64)
            if flat.size != v * v:
                raise ValidationError(
                    f"subject {rec.get('subject_id')}: adjacency has {flat.size} entries, "
                    f"expected {v * v}"
                )
            subjects.append(
                Connectome(
                    subject_id=str(rec["subject_id"]),
                    num_nodes=v,
                    adjacency=flat.reshape(v, v),
                    label=int(rec["label"]),
                    group=str(rec["group"]),
                )
            )
    ds = ConnectomeDataset(
        subjects=subjects,
        num_classes=c,
        groups=groups,
        node_atlas=list(atlas) if atlas is not None else None,
        feature_mode=feature_mode,
    )
    ds.validate()
    return ds


def save_dataset(ds: ConnectomeDataset, path: str) -> None:
    ds.validate()
    header: dict = {
        "format": "cnx-v1",
        "num_nodes": ds.num_nodes,
        "num_classes": ds.num_classes,
        "groups": ds.groups,
    }
    if ds.node_atlas is not None:
        header["atlas"] = ds.node_atlas
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for s in ds.subjects:
            rec = {
                "subject_id": s.subject_id,
                "label": s.label,
                "group": s.group,
                "adjacency": s.adjacency.reshape(-1).tolist(),
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_knowledge(path: str) -> KnowledgeBase:
    """Read a KEMB archive into a float64 matrix, checking header and payload."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24:
        raise FormatError(f"{path}: too short for a KEMB header")
    if blob[:4] != KEMB_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    version, = struct.unpack_from("<I", blob, 4)
    if version != KEMB_VERSION:
        raise FormatError(f"{path}: unsupported KEMB version {version}")
    n, d = struct.unpack_from("<QQ", blob, 8)
    payload_len = n * d * 4
    if len(blob) < 24 + payload_len:
        raise FormatError(
            f"{path}: truncated payload: need {payload_len} bytes for {n}x{d}, "
            f"have {len(blob) - 24}"
        )
    if n < 1 or d < 1:
        raise FormatError(f"{path}: degenerate dimensions {n}x{d}")
    mat = np.frombuffer(blob, dtype="<f4", count=n * d, offset=24).reshape(n, d)
    if not np.isfinite(mat).all():
        raise FormatError(f"{path}: non-finite embedding values")
    item_ids = None
    trailer_bytes = blob[24 + payload_len :]
    if trailer_bytes:
        try:
            trailer = json.loads(trailer_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: trailer is not valid JSON: {e}") from None
        ids = trailer.get("item_ids")
        if ids is not None:
            if len(ids) != n:
                raise FormatError(f"{path}: trailer has {len(ids)} item ids for {n} rows")
            item_ids = [str(x) for x in ids]
    kb = KnowledgeBase(embeddings=mat.astype(np.float64), item_ids=item_ids)
    kb.validate()
    return kb


def save_knowledge(kb: KnowledgeBase, path: str, trailer_extra: dict | None = None) -> None:
    kb.validate()
    n, d = kb.embeddings.shape
    with open(path, "wb") as fh:
        fh.write(KEMB_MAGIC)
        fh.write(struct.pack("<I", KEMB_VERSION))
        fh.write(struct.pack("<QQ", n, d))
        fh.write(kb.embeddings.astype("<f4").tobytes())
        trailer = dict(trailer_extra or {})
        if kb.item_ids is not None:
            trailer["item_ids"] = kb.item_ids
        if trailer:
            fh.write(json.dumps(trailer, separators=(",", ":")).encode("utf-8"))


def _apportion(counts: list[int], ratio: float, total: int, available: list[int]) -> list[int]:
    # largest-remainder allocation of `total` across strata, capped by availability
    quotas = [ratio * c for c in counts]
    alloc = [min(int(math.floor(q)), a) for q, a in zip(quotas, available)]
    remaining = total - sum(alloc)
    order = sorted(
        range(len(counts)),
        key=lambda i: (-(quotas[i] - math.floor(quotas[i])), i),
    )
    while remaining > 0:
        progressed = False
        for i in order:
            if remaining == 0:
                break
            if alloc[i] < available[i]:
                alloc[i] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            raise StratificationError("could not allocate split sizes within strata")
    return alloc


def split_dataset(
    ds: ConnectomeDataset,
    ratios: tuple[float, float, float],
    seed: int,
    stratify_by: str = "label",
) -> Split:
    """Stratified shuffle split.

    Train and val sizes are floor(ratio * n); the remainder goes to test.
    Per-stratum proportions deviate from the ratios by less than one sample.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValidationError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {ratios} (sum {sum(ratios)})")
    if stratify_by not in ("label", "group"):
        raise ValidationError(f"stratify_by must be 'label' or 'group', got {stratify_by!r}")
    n = len(ds.subjects)
    keyfn = (lambda s: s.label) if stratify_by == "label" else (lambda s: s.group)
    strata: dict = {}
    for i, s in enumerate(ds.subjects):
        strata.setdefault(keyfn(s), []).append(i)
    keys = sorted(strata.keys(), key=str)
    sizes = [len(strata[k]) for k in keys]
    if any(sz < 3 for sz in sizes):
        small = [k for k in keys if len(strata[k]) < 3]
        raise StratificationError(f"strata smaller than 3 subjects: {small}")

    n_train = int(math.floor(ratios[0] * n))
    n_val = int(math.floor(ratios[1] * n))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    shuffled = {k: [strata[k][j] for j in rng.permutation(len(strata[k]))] for k in keys}

    train_alloc = _apportion(sizes, ratios[0], n_train, sizes)
    left = [sz - a for sz, a in zip(sizes, train_alloc)]
    val_alloc = _apportion(sizes, ratios[1], n_val, left)

    split = Split(seed=seed)
    for k, tr, va in zip(keys, train_alloc, val_alloc):
        idx = shuffled[k]
        split.train.extend(idx[:tr])
        split.val.extend(idx[tr : tr + va])
        split.test.extend(idx[tr + va :])
    split.train.sort()
    split.val.sort()
    split.test.sort()
    split.validate(n)
    return split


def save_split(split: Split, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {"seed": split.seed, "train": split.train, "val": split.val, "test": split.test},
            fh,
            separators=(",", ":"),
        )


def load_split(path: str) -> Split:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    return Split(
        train=[int(i) for i in obj["train"]],
        val=[int(i) for i in obj["val"]],
        test=[int(i) for i in obj["test"]],
        seed=int(obj.get("seed", 0)),
    )


def subsample_knowledge(kb: KnowledgeBase, fraction: float, seed: int) -> KnowledgeBase:
    """Uniform sample without replacement of ceil(fraction * N) rows, original order."""
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"fraction must be in (0, 1], got {fraction}")
    n = kb.count
    k = int(math.ceil(fraction * n))
    if k >= n:
        return KnowledgeBase(
            embeddings=kb.embeddings.copy(),
            item_ids=list(kb.item_ids) if kb.item_ids is not None else None,
        )
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    return KnowledgeBase(
        embeddings=kb.embeddings[chosen].copy(),
        item_ids=[kb.item_ids[i] for i in chosen] if kb.item_ids is not None else None,
    )
