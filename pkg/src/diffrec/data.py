"""Dataset ingestion, k-core filtering, sequence building, batching, synthesis.

Vocabulary convention: id 0 is padding, id 1 is the inference placeholder
token, real items start at 2 and are numbered by first appearance after
filtering. Per-user sequences are chronological with timestamp ties broken
by input-file order. The last item of every sequence is the test target,
the second-to-last the validation target, the rest the training prefix.
"""

from __future__ import annotations

import io
import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
NUM_RESERVED_IDS = 2

_MAGIC = b"DFRC"
_VERSION = 1


@dataclass(frozen=True)
class InteractionRecord:
    user: str
    item: str
    timestamp: int


@dataclass
class InteractionDataset:
    sequences: list = field(default_factory=list)   # per-user remapped item ids
    user_ids: list = field(default_factory=list)    # original user keys
    item_ids: list = field(default_factory=list)    # original item keys; vocab id = index + 2

    @property
    def num_users(self) -> int:
        return len(self.sequences)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def vocab_size(self) -> int:
        return len(self.item_ids) + NUM_RESERVED_IDS

    @property
    def num_actions(self) -> int:
        return sum(len(s) for s in self.sequences)

    def train_prefix(self, u: int) -> list:
        return self.sequences[u][:-2]

    def valid_target(self, u: int) -> int:
        return self.sequences[u][-2]

    def test_target(self, u: int) -> int:
        return self.sequences[u][-1]


def ingest(path, fmt: str):
    """Parse an interaction file into records.

    fmt is one of 'csv', 'tsv', 'movielens'. csv/tsv lines are
    user,item,timestamp[,ignored]; movielens lines are
    user::item::rating::timestamp. Returns (records, malformed_count);
    malformed lines are skipped and counted.
    """
    if fmt == "csv":
        sep, ts_field = ",", 2
    elif fmt == "tsv":
        sep, ts_field = "\t", 2
    elif fmt == "movielens":
        sep, ts_field = "::", 3
    else:
        raise ValueError(f"unknown format tag {fmt!r}; expected csv, tsv or movielens")

    records = []
    malformed = 0
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(sep)
            if len(parts) <= ts_field:
                malformed += 1
                continue
            try:
                ts = int(parts[ts_field])
            except ValueError:
                malformed += 1
                continue
            if ts < 0:
                malformed += 1
                continue
            records.append(InteractionRecord(user=parts[0], item=parts[1], timestamp=ts))
    if not records:
        log.warning("no records parsed from %s (%d malformed lines)", path, malformed)
    elif malformed:
        log.warning("skipped %d malformed lines in %s", malformed, path)
    return records, malformed


def kcore_filter(records, k: int = 5, iterative: bool = True):
    """Drop users and items with fewer than k interactions.

    Iterative mode repeats until a fixed point (removing a user can push an
    item below k and vice versa); single-pass mode applies one round of both
    rules against the initial counts, matching common legacy preprocessing.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    current = list(records)
    while True:
        users = Counter(r.user for r in current)
        items = Counter(r.item for r in current)
        kept = [r for r in current if users[r.user] >= k and items[r.item] >= k]
        if len(kept) == len(current) or not iterative:
            return kept
        current = kept


def build_dataset(records) -> InteractionDataset:
    """Group filtered records into chronological per-user sequences."""
    if not records:
        raise ValueError("cannot build a dataset from zero records")
    per_user: dict = {}
    for rec in records:
        per_user.setdefault(rec.user, []).append(rec)

    item_to_id: dict = {}
    item_ids: list = []
    sequences = []
    user_ids = []
    for user, recs in per_user.items():
        recs.sort(key=lambda r: r.timestamp)  # stable: ties keep input order
        if len(recs) < 3:
            raise ValueError(
                f"user {user!r} has {len(recs)} interactions; need >= 3 for train/valid/test"
            )
        seq = []
        for rec in recs:
            vid = item_to_id.get(rec.item)
            if vid is None:
                vid = len(item_ids) + NUM_RESERVED_IDS
                item_to_id[rec.item] = vid
                item_ids.append(rec.item)
            seq.append(vid)
        sequences.append(seq)
        user_ids.append(user)
    return InteractionDataset(sequences=sequences, user_ids=user_ids, item_ids=item_ids)


def _eval_input(history, seq_len: int) -> list:
    """Last seq_len-1 interactions followed by the placeholder token, left-padded."""
    kept = list(history[-(seq_len - 1):])
    row = [PAD_ID] * (seq_len - 1 - len(kept)) + kept + [UNK_ID]
    return row


def _train_input(prefix, seq_len: int) -> list:
    kept = list(prefix[-seq_len:])
    return [PAD_ID] * (seq_len - len(kept)) + kept


def make_batches(dataset: InteractionDataset, split: str, seq_len: int = 50,
                 batch_size: int = 256, order=None):
    """Yield (user_indices, item_matrix, target_vector) batches for one split.

    Train rows end with the training target in the final slot; valid/test
    rows end with the placeholder token and the target is held out.
    """
    if split not in ("train", "valid", "test"):
        raise ValueError(f"unknown split {split!r}")
    if order is None:
        order = np.arange(dataset.num_users)
    order = np.asarray(order)
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        rows = []
        targets = []
        for u in chunk:
            seq = dataset.sequences[u]
            if split == "train":
                prefix = seq[:-2]
                rows.append(_train_input(prefix, seq_len))
                targets.append(prefix[-1])
            elif split == "valid":
                rows.append(_eval_input(seq[:-2], seq_len))
                targets.append(seq[-2])
            else:
                rows.append(_eval_input(seq[:-1], seq_len))
                targets.append(seq[-1])
        yield chunk, np.array(rows, dtype=np.int64), np.array(targets, dtype=np.int64)


def synth_generate(num_users: int, num_items: int, sharpness: float,
                   seed: int, min_len: int = 5, max_len: int = 50) -> InteractionDataset:
    """Sample sequences from a seeded order-1 Markov chain over items.

    The chain's preferred successor map is a random permutation, taken with
    probability 1/(1+(V-1)*exp(-sharpness)); otherwise the next item is
    uniform over the rest. Sharpness 0 gives a uniform walk (and a uniform
    item marginal); large sharpness approaches a deterministic cycle.
    """
    if num_users < 1 or num_items < 1:
        raise ValueError("num_users and num_items must be positive")
    rng = np.random.default_rng(seed)
    succ = rng.permutation(num_items)
    p_follow = 1.0 / (1.0 + (num_items - 1) * np.exp(-float(sharpness)))

    sequences = []
    for _ in range(num_users):
        length = int(rng.integers(min_len, max_len + 1))
        cur = int(rng.integers(num_items))
        seq = [cur]
        for _ in range(length - 1):
            if num_items == 1 or rng.random() < p_follow:
                cur = int(succ[cur])
            else:
                other = int(rng.integers(num_items - 1))
                if other >= succ[cur]:
                    other += 1
                cur = other
            seq.append(cur)
        sequences.append([i + NUM_RESERVED_IDS for i in seq])

    return InteractionDataset(
        sequences=sequences,
        user_ids=[f"u{i}" for i in range(num_users)],
        item_ids=[f"i{j}" for j in range(num_items)],
    )


def dataset_stats(dataset: InteractionDataset) -> dict:
    """Summary statistics in the conventional preprocessing-table columns."""
    users = dataset.num_users
    items = dataset.num_items
    actions = dataset.num_actions
    sparsity = 1.0 - actions / (users * items) if users and items else 0.0
    return {
        "#users": users,
        "#items": items,
        "#actions": actions,
        "avg.length": round(actions / users, 1) if users else 0.0,
        "sparsity": f"{100.0 * sparsity:.2f}%",
    }


# ---------------------------------------------------------------------------
# binary container


def _write_uvarint(buf: io.BytesIO, value: int) -> None:
    if value < 0:
        raise ValueError("uvarint cannot encode negative values")
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            buf.write(bytes((byte | 0x80,)))
        else:
            buf.write(bytes((byte,)))
            return


def _read_uvarint(view: memoryview, pos: int):
    result = 0
    shift = 0
    while True:
        if pos >= len(view):
            raise ValueError("truncated varint in dataset container")
        byte = view[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7


def _write_str_block(buf: io.BytesIO, strings) -> None:
    buf.write(struct.pack("<I", len(strings)))
    for s in strings:
        raw = s.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)


def _read_str_block(view: memoryview, pos: int):
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    out = []
    for _ in range(count):
        (length,) = struct.unpack_from("<H", view, pos)
        pos += 2
        out.append(bytes(view[pos:pos + length]).decode("utf-8"))
        pos += length
    return out, pos


def save_dataset(dataset: InteractionDataset, path) -> None:
    """Write the binary container: magic, version, vocab size, varint id lists,
    then the original user/item key blocks (needed for exact round trips)."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<H", _VERSION))
    buf.write(struct.pack("<I", dataset.vocab_size))
    buf.write(struct.pack("<I", dataset.num_users))
    for seq in dataset.sequences:
        _write_uvarint(buf, len(seq))
        for vid in seq:
            _write_uvarint(buf, vid)
    _write_str_block(buf, dataset.user_ids)
    _write_str_block(buf, dataset.item_ids)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_dataset(path) -> InteractionDataset:
    with open(path, "rb") as fh:
        raw = fh.read()
    view = memoryview(raw)
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a dataset container (bad magic)")
    (version,) = struct.unpack_from("<H", view, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    (vocab_size,) = struct.unpack_from("<I", view, 6)
    (num_users,) = struct.unpack_from("<I", view, 10)
    pos = 14
    sequences = []
    for _ in range(num_users):
        length, pos = _read_uvarint(view, pos)
        seq = []
        for _ in range(length):
            vid, pos = _read_uvarint(view, pos)
            seq.append(vid)
        sequences.append(seq)
    user_ids, pos = _read_str_block(view, pos)
    item_ids, pos = _read_str_block(view, pos)
    ds = InteractionDataset(sequences=sequences, user_ids=user_ids, item_ids=item_ids)
    if ds.vocab_size != vocab_size:
        raise ValueError(f"{path}: vocab size {vocab_size} does not match item table")
    return ds


def save_stats_sidecar(dataset: InteractionDataset, path) -> dict:
    stats = dataset_stats(dataset)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return stats
