"""Users, items, slates, click logs, and the JSONL dataset format.

Feature widths are fixed: 24 for the user descriptor, 32 for the item
descriptor, 8 for the position embedding; assembled per-position inputs are
their 64-wide concatenation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

USER_DIM = 24
ITEM_DIM = 32
POS_DIM = 8
FEATURE_DIM = USER_DIM + ITEM_DIM + POS_DIM

# JSONL field order, one log record per line.
LOG_FIELDS = ("user_id", "item_ids", "categories", "layouts", "clicks", "pool_ids")


class DataFormatError(ValueError):
    """A dataset line failed validation; the message names line and field."""


@dataclass(frozen=True)
class Item:
    item_id: int
    category: int
    layout: int
    tag_set: frozenset
    features: np.ndarray  # (32,)

    def __post_init__(self):
        if self.features.shape != (ITEM_DIM,):
            raise ValueError(f"item features must be ({ITEM_DIM},), got {self.features.shape}")


@dataclass(frozen=True)
class User:
    user_id: int
    features: np.ndarray  # (24,)

    def __post_init__(self):
        if self.features.shape != (USER_DIM,):
            raise ValueError(f"user features must be ({USER_DIM},), got {self.features.shape}")


@dataclass(frozen=True)
class PositionTable:
    """Fixed per-position embedding rows, one per display slot."""

    embeddings: np.ndarray  # (K_max, 8)

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.embeddings.shape[1] != POS_DIM:
            raise ValueError(f"position table must be (K_max, {POS_DIM})")

    @property
    def max_positions(self) -> int:
        return self.embeddings.shape[0]

    def row(self, position: int) -> np.ndarray:
        if not 1 <= position <= self.max_positions:
            raise ValueError(
                f"position {position} out of range [1, {self.max_positions}]"
            )
        return self.embeddings[position - 1]


@dataclass(frozen=True)
class CandidateSet:
    user_id: int
    item_ids: tuple[int, ...]  # N distinct candidates
    k: int  # target list length

    def __post_init__(self):
        n = len(self.item_ids)
        if len(set(self.item_ids)) != n:
            raise ValueError("candidate item ids must be distinct")
        if n < self.k:
            raise ValueError(f"need N >= K, got N={n} K={self.k}")


class RecList:
    """An ordered pick of K distinct 1-based indices into a candidate set."""

    __slots__ = ("indices",)

    def __init__(self, indices):
        indices = tuple(int(i) for i in indices)
        if len(set(indices)) != len(indices):
            raise ValueError(f"list indices must be distinct, got {indices}")
        if any(i < 1 for i in indices):
            raise ValueError("list indices are 1-based")
        self.indices = indices

    def __len__(self):
        return len(self.indices)

    def __eq__(self, other):
        return isinstance(other, RecList) and self.indices == other.indices

    def __hash__(self):
        return hash(self.indices)

    def __repr__(self):
        return f"RecList{self.indices}"

    def prefix(self, j: int) -> tuple[int, ...]:
        """Indices strictly above position j (1-based)."""
        return self.indices[: j - 1]

    def suffix(self, j: int) -> tuple[int, ...]:
        """Indices strictly below position j (1-based)."""
        return self.indices[j:]


@dataclass(frozen=True)
class LogRecord:
    """One impression: the exposed ordered items, their clicks, and the
    candidate pool they were drawn from."""

    user_id: int
    item_ids: tuple[int, ...]
    categories: tuple[int, ...]
    layouts: tuple[int, ...]
    clicks: tuple[int, ...]
    pool_ids: tuple[int, ...]

    def __post_init__(self):
        k = len(self.item_ids)
        if not (len(self.categories) == len(self.layouts) == len(self.clicks) == k):
            raise ValueError("per-position fields must share the list length")
        if any(c not in (0, 1) for c in self.clicks):
            raise ValueError("clicks must be binary")
        if not set(self.item_ids) <= set(self.pool_ids):
            raise ValueError("exposed items must come from the candidate pool")

    @property
    def k(self) -> int:
        return len(self.item_ids)

    @property
    def total_clicks(self) -> int:
        return sum(self.clicks)


def build_features(user: User, item: Item, position: int, table: PositionTable) -> np.ndarray:
    """Per-position model input: user desc, item desc, position embedding,
    concatenated in that order (24 + 32 + 8 = 64)."""
    return np.concatenate([user.features, item.features, table.row(position)])


def jaccard_distance(a: Item, b: Item) -> float:
    """1 - |A n B| / |A u B| over the items' tag sets.

    Two empty tag sets count as identical (distance 0).
    """
    union = a.tag_set | b.tag_set
    if not union:
        return 0.0
    return 1.0 - len(a.tag_set & b.tag_set) / len(union)


def write_log(path, records) -> int:
    """Write LogRecords as JSON Lines; returns the record count."""
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            row = {
                "user_id": rec.user_id,
                "item_ids": list(rec.item_ids),
                "categories": list(rec.categories),
                "layouts": list(rec.layouts),
                "clicks": list(rec.clicks),
                "pool_ids": list(rec.pool_ids),
            }
            f.write(json.dumps(row, separators=(",", ":"), sort_keys=True))
            f.write("\n")
            n += 1
    return n


def group_by_k(records) -> dict[int, tuple]:
    """Bucket records by list length into packed arrays.

    Returns {K: (user_ids (B,), item_ids (B, K), clicks (B, K), pool_ids
    (B, N))}; training and evaluation batch within these buckets.
    """
    buckets: dict[int, list] = {}
    for rec in records:
        buckets.setdefault(rec.k, []).append(rec)
    out = {}
    for k, recs in sorted(buckets.items()):
        out[k] = (
            np.asarray([r.user_id for r in recs], dtype=np.int64),
            np.asarray([r.item_ids for r in recs], dtype=np.int64),
            np.asarray([r.clicks for r in recs], dtype=np.int8),
            np.asarray([r.pool_ids for r in recs], dtype=np.int64),
        )
    return out


def read_log_grouped(path) -> dict[int, tuple]:
    """Stream a JSONL log straight into equal-K array buckets."""
    buckets: dict[int, list] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                users_items = (
                    int(row["user_id"]),
                    row["item_ids"],
                    row["clicks"],
                    row["pool_ids"],
                )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataFormatError(f"line {lineno}: {e}") from e
            buckets.setdefault(len(row["item_ids"]), []).append(users_items)
    out = {}
    for k, rows in sorted(buckets.items()):
        out[k] = (
            np.asarray([r[0] for r in rows], dtype=np.int64),
            np.asarray([r[1] for r in rows], dtype=np.int64),
            np.asarray([r[2] for r in rows], dtype=np.int8),
            np.asarray([r[3] for r in rows], dtype=np.int64),
        )
    return out


def read_log(path) -> list[LogRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"line {lineno}: invalid JSON ({e})") from e
            for field_name in LOG_FIELDS:
                if field_name not in row:
                    raise DataFormatError(f"line {lineno}: missing field {field_name!r}")
            try:
                rec = LogRecord(
                    user_id=int(row["user_id"]),
                    item_ids=tuple(int(x) for x in row["item_ids"]),
                    categories=tuple(int(x) for x in row["categories"]),
                    layouts=tuple(int(x) for x in row["layouts"]),
                    clicks=tuple(int(x) for x in row["clicks"]),
                    pool_ids=tuple(int(x) for x in row["pool_ids"]),
                )
            except (TypeError, ValueError) as e:
                raise DataFormatError(f"line {lineno}: {e}") from e
            records.append(rec)
    return records
