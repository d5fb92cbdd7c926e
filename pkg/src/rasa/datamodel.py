"""Cohort representation on disk: RASB feature bags, manifests and splits."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

BAG_MAGIC = b"RASB"
BAG_VERSION = 1
_BAG_HEADER = struct.Struct("<4sHBII")
MAX_BAG_ELEMENTS = 2**31 - 1

MANIFEST_SCHEMA = "rasa-manifest"
MANIFEST_VERSION = 1
N_TRIALS = 5
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


class BagFormatError(ValueError):
    pass


class BadMagicError(BagFormatError):
    pass


class TruncatedBagError(BagFormatError):
    pass


class DimensionOverflowError(BagFormatError):
    pass


class ManifestError(ValueError):
    """Manifest validation failure. ``case_ids`` lists the offending cases."""

    def __init__(self, problems: Sequence[str], case_ids: Sequence[str] = ()):
        self.problems = list(problems)
        self.case_ids = sorted(set(case_ids))
        super().__init__("; ".join(self.problems))


# ------------------------------------------------------------------ bags

@dataclass(eq=False)
class FeatureBag:
    """n x d instance features, optionally with integer grid coordinates.

    Values are rounded to float32 precision on construction so that the
    on-disk round trip is exact.
    """

    matrix: np.ndarray
    coords: Optional[np.ndarray] = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
            raise ValueError(f"feature bag must be a non-empty n x d matrix, got {m.shape}")
        with np.errstate(over="ignore"):
            m = m.astype(np.float32).astype(np.float64)
        if not np.all(np.isfinite(m)):
            raise ValueError("feature bag contains non-finite values")
        self.matrix = m
        if self.coords is not None:
            c = np.asarray(self.coords)
            if c.shape != (m.shape[0], 2):
                raise ValueError(f"coords must be {m.shape[0]} x 2, got {c.shape}")
            if not np.array_equal(c, c.astype(np.int32)):
                raise ValueError("coords must be 32-bit integers")
            self.coords = c.astype(np.int32)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def d(self) -> int:
        return self.matrix.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureBag):
            return NotImplemented
        if (self.coords is None) != (other.coords is None):
            return False
        same = self.matrix.shape == other.matrix.shape and \
            self.matrix.tobytes() == other.matrix.tobytes()
        if self.coords is not None:
            same = same and np.array_equal(self.coords, other.coords)
        return same


def encode_feature_bag(bag: FeatureBag) -> bytes:
    flags = 1 if bag.coords is not None else 0
    parts = [_BAG_HEADER.pack(BAG_MAGIC, BAG_VERSION, flags, bag.n, bag.d),
             bag.matrix.astype("<f4").tobytes()]
    if bag.coords is not None:
        parts.append(bag.coords.astype("<i4").tobytes())
    return b"".join(parts)


def decode_feature_bag(buf: bytes) -> FeatureBag:
    if len(buf) < _BAG_HEADER.size:
        if not buf.startswith(BAG_MAGIC[:len(buf)]):
            raise BadMagicError("not a RASB feature bag")
        raise TruncatedBagError(f"header needs {_BAG_HEADER.size} bytes, got {len(buf)}")
    magic, version, flags, n, d = _BAG_HEADER.unpack_from(buf)
    if magic != BAG_MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {BAG_MAGIC!r}")
    if version != BAG_VERSION:
        raise BagFormatError(f"unsupported RASB version {version}")
    if flags & ~1:
        raise BagFormatError(f"unknown flag bits {flags:#x}")
    if n == 0 or d == 0 or n * d > MAX_BAG_ELEMENTS:
        raise DimensionOverflowError(f"invalid bag dimensions n={n}, d={d}")
    has_coords = bool(flags & 1)
    expected = _BAG_HEADER.size + 4 * n * d + (8 * n if has_coords else 0)
    if len(buf) < expected:
        raise TruncatedBagError(f"payload needs {expected} bytes, got {len(buf)}")
    if len(buf) > expected:
        raise BagFormatError(f"{len(buf) - expected} trailing bytes after payload")
    off = _BAG_HEADER.size
    matrix = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    coords = None
    if has_coords:
        coords = np.frombuffer(buf, dtype="<i4", count=2 * n, offset=off + 4 * n * d)
        coords = coords.reshape(n, 2)
    return FeatureBag(matrix.astype(np.float64), None if coords is None else coords.copy())


def write_feature_bag(bag: FeatureBag, path) -> None:
    Path(path).write_bytes(encode_feature_bag(bag))


def read_feature_bag(path) -> FeatureBag:
    return decode_feature_bag(Path(path).read_bytes())


def read_bag_shape(path) -> tuple[int, int]:
    """(n, d) from the header alone."""
    with open(path, "rb") as fh:
        head = fh.read(_BAG_HEADER.size)
    if len(head) < _BAG_HEADER.size:
        raise TruncatedBagError(f"{path}: truncated header")
    magic, _, _, n, d = _BAG_HEADER.unpack(head)
    if magic != BAG_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    return n, d


# ------------------------------------------------------------------ labels / cases

@dataclass(frozen=True)
class SurvivalLabel:
    time: float
    event: float

    def __post_init__(self):
        if not (math.isfinite(self.time) and self.time > 0):
            raise ValueError(f"survival time must be positive, got {self.time}")
        if not 0.0 <= self.event <= 1.0:
            raise ValueError(f"event indicator must lie in [0, 1], got {self.event}")


@dataclass
class Case:
    id: str
    patch_file: str
    text_file: str
    token_strings: list
    keyword_token_indices: list
    label: SurvivalLabel


@dataclass
class Split:
    train: list
    val: list
    test: list


@dataclass
class CohortManifest:
    cases: list
    splits: list
    root: Path = field(default=Path("."), compare=False)

    def case(self, case_id: str) -> Case:
        for c in self.cases:
            if c.id == case_id:
                return c
        raise KeyError(case_id)

    def by_id(self) -> dict:
        return {c.id: c for c in self.cases}

    def patch_path(self, case: Case) -> Path:
        return self.root / case.patch_file

    def text_path(self, case: Case) -> Path:
        return self.root / case.text_file

    def load_bags(self, case: Case) -> tuple[FeatureBag, FeatureBag]:
        """(text bag, patch bag) for one case."""
        return read_feature_bag(self.text_path(case)), read_feature_bag(self.patch_path(case))


# ------------------------------------------------------------------ splits

def split_sizes(n: int) -> tuple[int, int, int]:
    n_test = int(math.floor(SPLIT_FRACTIONS[2] * n))
    n_val = int(math.floor(SPLIT_FRACTIONS[1] * n))
    return n - n_val - n_test, n_val, n_test


def make_splits(case_ids: Sequence[str], seed: int, n_trials: int = N_TRIALS) -> list:
    """Independent seeded 0.6/0.2/0.2 partitions, one per trial."""
    ids = list(case_ids)
    if len(ids) < 5:
        raise ValueError(f"need at least 5 cases to split, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("case ids must be unique")
    _, n_val, n_test = split_sizes(len(ids))
    splits = []
    for trial in range(n_trials):
        rng = np.random.default_rng([seed, trial])
        order = rng.permutation(len(ids))
        test = sorted(ids[i] for i in order[:n_test])
        val = sorted(ids[i] for i in order[n_test:n_test + n_val])
        train = sorted(ids[i] for i in order[n_test + n_val:])
        splits.append(Split(train, val, test))
    return splits


# ------------------------------------------------------------------ manifest io

def manifest_to_dict(manifest: CohortManifest) -> dict:
    return {
        "schema": MANIFEST_SCHEMA,
        "version": MANIFEST_VERSION,
        "cases": [
            {
                "id": c.id,
                "patch_file": c.patch_file,
                "text_file": c.text_file,
                "token_strings": list(c.token_strings),
                "keyword_token_indices": [int(i) for i in c.keyword_token_indices],
                "label": {"time": float(c.label.time), "event": float(c.label.event)},
            }
            for c in manifest.cases
        ],
        "splits": [
            {"train": list(s.train), "val": list(s.val), "test": list(s.test)}
            for s in manifest.splits
        ],
    }


def save_manifest(manifest: CohortManifest, path) -> None:
    text = json.dumps(manifest_to_dict(manifest), indent=2)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_manifest(path, check_files: bool = True) -> CohortManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError([f"{path}: not a valid manifest document ({exc})"]) from None
    return manifest_from_dict(doc, root=path.parent, check_files=check_files)


def manifest_from_dict(doc: dict, root=Path("."), check_files: bool = True) -> CohortManifest:
    problems: list[str] = []
    bad: list[str] = []
    if doc.get("schema") != MANIFEST_SCHEMA:
        raise ManifestError([f"schema must be {MANIFEST_SCHEMA!r}"])
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError([f"unsupported manifest version {doc.get('version')!r}"])
    root = Path(root)
    cases = []
    for raw in doc.get("cases", []):
        cid = str(raw.get("id", ""))
        try:
            label = SurvivalLabel(float(raw["label"]["time"]), float(raw["label"]["event"]))
            case = Case(cid, str(raw["patch_file"]), str(raw["text_file"]),
                        [str(s) for s in raw["token_strings"]],
                        [int(i) for i in raw["keyword_token_indices"]], label)
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"case {cid!r}: malformed entry ({exc})")
            bad.append(cid)
            continue
        cases.append(case)
        problems_before = len(problems)
        _validate_case(case, root, check_files, problems)
        if len(problems) > problems_before:
            bad.append(cid)

    ids = [c.id for c in cases]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        problems.append(f"duplicate case ids: {dupes}")
        bad.extend(dupes)

    splits = []
    raw_splits = doc.get("splits", [])
    if len(raw_splits) != N_TRIALS:
        problems.append(f"expected {N_TRIALS} trial splits, got {len(raw_splits)}")
    id_set = set(ids)
    for k, raw in enumerate(raw_splits):
        s = Split([str(i) for i in raw.get("train", [])], [str(i) for i in raw.get("val", [])],
                  [str(i) for i in raw.get("test", [])])
        splits.append(s)
        _validate_split(k, s, id_set, problems, bad)

    if problems:
        raise ManifestError(problems, bad)
    return CohortManifest(cases, splits, root)


def _validate_case(case: Case, root: Path, check_files: bool, problems: list) -> None:
    kw = case.keyword_token_indices
    if sorted(set(kw)) != list(kw):
        problems.append(f"case {case.id!r}: keyword indices must be sorted and unique")
    if any(i < 0 for i in kw):
        problems.append(f"case {case.id!r}: negative keyword index")
    n_tokens = len(case.token_strings)
    if any(i >= n_tokens for i in kw):
        problems.append(f"case {case.id!r}: keyword index out of range for "
                        f"{n_tokens} tokens")
    if not check_files:
        return
    for attr in ("patch_file", "text_file"):
        p = root / getattr(case, attr)
        if not p.is_file():
            problems.append(f"case {case.id!r}: missing {attr} {p}")
            return
    try:
        n_rows, _ = read_bag_shape(root / case.text_file)
        read_bag_shape(root / case.patch_file)
    except BagFormatError as exc:
        problems.append(f"case {case.id!r}: {exc}")
        return
    if n_rows != n_tokens:
        problems.append(f"case {case.id!r}: {n_tokens} token strings but {n_rows} text rows")


def _validate_split(k: int, s: Split, ids: set, problems: list, bad: list) -> None:
    parts = {"train": s.train, "val": s.val, "test": s.test}
    seen: dict[str, str] = {}
    for name, members in parts.items():
        for cid in members:
            if cid not in ids:
                problems.append(f"trial {k}: unknown case id {cid!r} in {name}")
                bad.append(cid)
            elif cid in seen:
                problems.append(f"trial {k}: case {cid!r} in both {seen[cid]} and {name}")
                bad.append(cid)
            else:
                seen[cid] = name
    missing = sorted(ids - set(seen))
    if missing:
        problems.append(f"trial {k}: cases not assigned to any split: {missing}")
        bad.extend(missing)
    n = len(ids)
    for name, frac in zip(("train", "val", "test"), SPLIT_FRACTIONS):
        if abs(len(parts[name]) - frac * n) >= 2:
            problems.append(f"trial {k}: {name} has {len(parts[name])} of {n} cases, "
                            f"expected about {frac:.0%}")
