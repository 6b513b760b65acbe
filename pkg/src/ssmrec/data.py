"""Interaction logs -> chronological user sequences -> leave-one-out splits.

Also holds the training batch builder, a synthetic long-range-dependency log
generator, and the ``RECSEQ01`` binary cache.
"""

from __future__ import annotations

import csv
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, DataError, DataQualityError
from .model import pad_truncate
from .numerics.rng import make_rng

log = logging.getLogger(__name__)

CACHE_MAGIC = b"RECSEQ01"
MIN_INTERACTIONS = 3
MAX_MALFORMED_FRACTION = 0.01


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    timestamp: int


@dataclass
class UserSequence:
    user_index: int
    items: np.ndarray  # dense item indices, chronological

    @property
    def n(self) -> int:
        return int(self.items.size)


@dataclass
class IdMaps:
    """Dense index <-> original token. Index 0 is reserved (padding)."""

    user_tokens: list[str]
    item_tokens: list[str]
    _user_index: dict[str, int] = field(default=None, repr=False)
    _item_index: dict[str, int] = field(default=None, repr=False)

    def __post_init__(self):
        self._user_index = {t: i + 1 for i, t in enumerate(self.user_tokens)}
        self._item_index = {t: i + 1 for i, t in enumerate(self.item_tokens)}

    @property
    def n_users(self) -> int:
        return len(self.user_tokens)

    @property
    def n_items(self) -> int:
        return len(self.item_tokens)

    def user_index(self, token: str) -> int:
        return self._user_index[token]

    def item_index(self, token: str) -> int:
        return self._item_index[token]

    def user_token(self, index: int) -> str:
        return self.user_tokens[index - 1]

    def item_token(self, index: int) -> str:
        return self.item_tokens[index - 1]


@dataclass
class IngestStats:
    lines: int = 0
    records: int = 0
    malformed: int = 0
    samples: list[str] = field(default_factory=list)


# ---------------------------------------------------------------- ingestion

def _resolve_columns(columns: Sequence, header: list[str] | None) -> list[int]:
    resolved = []
    for col in columns:
        if isinstance(col, int) or (isinstance(col, str) and col.isdigit()):
            resolved.append(int(col))
        elif header is None:
            raise ConfigError(f"column {col!r} given by name but the file has no header")
        elif col not in header:
            raise DataError(f"column {col!r} not found in header {header}")
        else:
            resolved.append(header.index(col))
    return resolved


def iter_interactions(
    path,
    columns: Sequence = ("user", "item", "timestamp"),
    header: bool = True,
    delimiter: str = "\t",
    stats: IngestStats | None = None,
) -> Iterator[Interaction]:
    """Stream interactions from a delimited file in file order.

    ``columns`` names the user, item and timestamp columns by header name or
    by 0-based position. Lines with missing fields, empty tokens or a
    non-integer timestamp are skipped and counted in ``stats``.
    """
    stats = stats if stats is not None else IngestStats()
    path = Path(path)
    try:
        fh = path.open("r", encoding="utf-8", newline="")
    except OSError as exc:
        raise OSError(f"cannot read interaction file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh, delimiter=delimiter, quoting=csv.QUOTE_NONE)
        head = None
        if header:
            first = next(reader, None)
            if first is None:
                return
            head = [h.strip() for h in first]
        idx = _resolve_columns(columns, head)
        for row in reader:
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            stats.lines += 1
            try:
                user, item, ts = (row[i].strip() for i in idx)
                if not user or not item:
                    raise ValueError("empty token")
                stamp = int(ts)
            except (IndexError, ValueError):
                stats.malformed += 1
                if len(stats.samples) < 5:
                    stats.samples.append(delimiter.join(row))
                continue
            stats.records += 1
            yield Interaction(user, item, stamp)


def ingest(path, fmt: str = "tsv", columns: Sequence = ("user", "item", "timestamp"),
           header: bool = True) -> tuple[list[Interaction], IngestStats]:
    if fmt != "tsv":
        raise ConfigError(f"unsupported input format {fmt!r}; only 'tsv' is implemented")
    stats = IngestStats()
    records = list(iter_interactions(path, columns, header, "\t", stats))
    if stats.lines == 0:
        log.warning("interaction file %s is empty", path)
    elif stats.malformed > MAX_MALFORMED_FRACTION * stats.lines:
        raise DataQualityError(
            f"{stats.malformed} of {stats.lines} lines malformed in {path}; samples: {stats.samples}"
        )
    elif stats.malformed:
        log.warning("skipped %d malformed lines in %s", stats.malformed, path)
    return records, stats


def write_tsv(interactions: Iterable[Interaction], path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        fh.write("user\titem\ttimestamp\n")
        for r in interactions:
            fh.write(f"{r.user}\t{r.item}\t{r.timestamp}\n")


# ---------------------------------------------------------------- preprocessing

def build_sequences(interactions: Iterable[Interaction],
                    min_count: int = MIN_INTERACTIONS) -> tuple[list[UserSequence], IdMaps]:
    """Chronological per-user sequences after iterated min-count filtering.

    Items with fewer than ``min_count`` occurrences and users with fewer than
    ``min_count`` interactions are removed repeatedly until neither rule
    removes anything. Timestamp ties keep input order. Survivors are
    re-indexed from 1 in order of first appearance in the input.
    """
    by_user: dict[str, list[tuple[int, int, str]]] = {}
    for pos, r in enumerate(interactions):
        by_user.setdefault(r.user, []).append((r.timestamp, pos, r.item))
    first_seen_item: dict[str, int] = {}
    seqs: dict[str, list[str]] = {}
    for user, rows in by_user.items():
        rows.sort(key=lambda x: (x[0], x[1]))
        seqs[user] = [item for _, _, item in rows]
        for _, pos, item in rows:
            if item not in first_seen_item or pos < first_seen_item[item]:
                first_seen_item[item] = pos

    while True:
        counts = Counter(item for s in seqs.values() for item in s)
        changed = False
        filtered = {}
        for user, s in seqs.items():
            kept = [item for item in s if counts[item] >= min_count]
            if len(kept) != len(s):
                changed = True
            if len(kept) >= min_count:
                filtered[user] = kept
            else:
                changed = True
        seqs = filtered
        if not changed:
            break
    if not seqs:
        raise DataError(f"no users left after filtering to >= {min_count} interactions")

    user_tokens = list(seqs)  # dict order = first appearance in input
    surviving = {item for s in seqs.values() for item in s}
    item_tokens = sorted(surviving, key=lambda t: first_seen_item[t])
    maps = IdMaps(user_tokens, item_tokens)
    sequences = [
        UserSequence(maps.user_index(u), np.array([maps.item_index(t) for t in seqs[u]], dtype=np.int64))
        for u in user_tokens
    ]
    return sequences, maps


@dataclass
class SplitDataset:
    """Leave-one-out view over user sequences.

    For ``S = [v1 .. vn]``: training region ``v1 .. v(n-2)`` (inputs
    ``v1 .. v(n-3)``, next-item targets), validation ``([v1 .. v(n-2)], v(n-1))``,
    test ``([v1 .. v(n-1)], vn)``.
    """

    sequences: list[UserSequence]
    maps: IdMaps

    @property
    def n_users(self) -> int:
        return len(self.sequences)

    @property
    def n_items(self) -> int:
        return self.maps.n_items

    @property
    def vocab_size(self) -> int:
        return self.n_items + 1

    def train_region(self, u: int) -> np.ndarray:
        return self.sequences[u].items[:-2]

    def phase_pairs(self, phase: str) -> list[tuple[np.ndarray, int]]:
        if phase in ("validation", "valid"):
            return [(s.items[:-2], int(s.items[-2])) for s in self.sequences]
        if phase == "test":
            return [(s.items[:-1], int(s.items[-1])) for s in self.sequences]
        raise ConfigError(f"unknown phase {phase!r}; use validation or test")

    def training_users(self) -> list[int]:
        """Users whose training input is non-empty (n >= 4)."""
        return [u for u, s in enumerate(self.sequences) if s.n >= 4]

    def stats(self) -> dict[str, float]:
        n_inter = int(sum(s.n for s in self.sequences))
        return {
            "users": self.n_users,
            "items": self.n_items,
            "interactions": n_inter,
            "avg_len": n_inter / max(1, self.n_users),
        }


def leave_one_out_split(sequences: list[UserSequence], maps: IdMaps) -> SplitDataset:
    short = [s.user_index for s in sequences if s.n < MIN_INTERACTIONS]
    if short:
        raise DataError(f"users with fewer than {MIN_INTERACTIONS} interactions: {short[:5]}")
    return SplitDataset(sequences, maps)


def training_arrays(split: SplitDataset, L: int) -> tuple[np.ndarray, np.ndarray]:
    """Padded (input, target) rows for every training user."""
    users = split.training_users()
    inputs = np.zeros((len(users), L), dtype=np.int64)
    targets = np.zeros((len(users), L), dtype=np.int64)
    for row, u in enumerate(users):
        region = split.train_region(u)
        inputs[row] = pad_truncate(region[:-1], L)
        targets[row] = pad_truncate(region[1:], L)
    return inputs, targets


def make_training_batches(split: SplitDataset, L: int, batch_size: int, rng,
                          arrays: tuple[np.ndarray, np.ndarray] | None = None):
    """Yield ``(input, target, mask)`` batches of shape [B, L] in a shuffled user order.

    ``mask`` is 1.0 exactly where a target exists (non-padding position).
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    inputs, targets = arrays if arrays is not None else training_arrays(split, L)
    order = make_rng(rng).permutation(inputs.shape[0])
    for start in range(0, order.size, batch_size):
        idx = order[start:start + batch_size]
        tgt = targets[idx]
        yield inputs[idx], tgt, (tgt != 0).astype(np.float64)


# ---------------------------------------------------------------- synthetic logs

def gen_synthetic(num_users: int, num_items: int, seq_len: int, lag: int, noise: float,
                  rng) -> list[Interaction]:
    """Sequences following ``v_t = (v_{t-lag} mod V) + 1`` with probability
    ``1 - noise`` and a uniform random item otherwise; the first ``lag`` items
    are uniform. Items are ``"1" .. "V"``, timestamps ``1 .. seq_len``.
    """
    if num_users < 1 or num_items < 1 or seq_len < 1:
        raise ConfigError("num_users, num_items and seq_len must be positive")
    if not 1 <= lag < seq_len:
        raise ConfigError(f"lag must satisfy 1 <= lag < seq_len, got lag={lag}, seq_len={seq_len}")
    if not 0.0 <= noise < 1.0:
        raise ConfigError(f"noise must lie in [0, 1), got {noise}")
    rng = make_rng(rng)
    V = num_items
    seq = np.empty((num_users, seq_len), dtype=np.int64)
    seq[:, :lag] = rng.integers(1, V + 1, size=(num_users, lag))
    for t in range(lag, seq_len):
        follow = rng.random(num_users) >= noise
        random_items = rng.integers(1, V + 1, size=num_users)
        seq[:, t] = np.where(follow, seq[:, t - lag] % V + 1, random_items)
    width = len(str(num_users))
    out = []
    for u in range(num_users):
        token = f"u{u:0{width}d}"
        out.extend(Interaction(token, str(int(v)), t + 1) for t, v in enumerate(seq[u]))
    return out


# ---------------------------------------------------------------- cache

def _put_str(buf: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    buf += struct.pack("<I", len(raw))
    buf += raw


def save_cache(split: SplitDataset, path) -> None:
    """``RECSEQ01`` layout, little-endian throughout::

        magic[8] | u32 n_users | u32 n_items
        n_users x (u32 len, utf-8 user token)
        n_items x (u32 len, utf-8 item token)
        n_users x (u32 n, n x i32 deltas of the item-index sequence, first from 0)
    """
    buf = bytearray(CACHE_MAGIC)
    buf += struct.pack("<II", split.n_users, split.n_items)
    for t in split.maps.user_tokens:
        _put_str(buf, t)
    for t in split.maps.item_tokens:
        _put_str(buf, t)
    for s in split.sequences:
        deltas = np.diff(s.items, prepend=0).astype("<i4")
        buf += struct.pack("<I", s.n)
        buf += deltas.tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise DataError("dataset cache is truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def load_cache(path) -> SplitDataset:
    raw = Path(path).read_bytes()
    if raw[:6] == CACHE_MAGIC[:6] and raw[:8] != CACHE_MAGIC:
        raise DataError(f"unsupported dataset cache version {raw[6:8]!r}; expected {CACHE_MAGIC[6:]!r}")
    if raw[:8] != CACHE_MAGIC:
        raise DataError(f"{path} is not a dataset cache (bad magic)")
    r = _Reader(raw)
    r.take(8)
    n_users, n_items = r.u32(), r.u32()
    users = [r.string() for _ in range(n_users)]
    items = [r.string() for _ in range(n_items)]
    maps = IdMaps(users, items)
    sequences = []
    for u in range(n_users):
        n = r.u32()
        deltas = np.frombuffer(r.take(4 * n), dtype="<i4").astype(np.int64)
        sequences.append(UserSequence(u + 1, np.cumsum(deltas)))
    if r.pos != len(raw):
        raise DataError("trailing bytes after dataset cache payload")
    return leave_one_out_split(sequences, maps)


def prepare(path, min_count: int = MIN_INTERACTIONS, columns=("user", "item", "timestamp"),
            header: bool = True) -> tuple[SplitDataset, IngestStats]:
    records, stats = ingest(path, "tsv", columns, header)
    sequences, maps = build_sequences(records, min_count)
    return leave_one_out_split(sequences, maps), stats
