"""Implicit-feedback data: ingestion, filtering, sparse storage and sampling."""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

MATRIX_MAGIC = b"RACTCSR1"
MAX_MALFORMED_FRACTION = 0.01


class DataError(ValueError):
    """Raised when input data cannot be ingested or filtered as requested."""


@dataclass(frozen=True)
class InteractionMatrix:
    """Binary user x item matrix in compressed-row form.

    Each stored entry is an observed interaction. Item ids within a row are
    sorted and unique.
    """

    n_users: int
    n_items: int
    row_offsets: np.ndarray
    item_ids: np.ndarray
    item_vocab: tuple = field(default=())

    def __post_init__(self):
        offsets = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        items = np.ascontiguousarray(self.item_ids, dtype=np.int64)
        object.__setattr__(self, "row_offsets", offsets)
        object.__setattr__(self, "item_ids", items)
        object.__setattr__(self, "item_vocab", tuple(self.item_vocab))
        if offsets.shape != (self.n_users + 1,) or offsets[0] != 0:
            raise DataError("row_offsets must have length n_users + 1 and start at 0")
        if np.any(np.diff(offsets) < 0) or offsets[-1] != items.size:
            raise DataError("row_offsets must be non-decreasing and end at nnz")
        if items.size and (items.min() < 0 or items.max() >= self.n_items):
            raise DataError("item id out of range")
        if self.item_vocab and len(self.item_vocab) != self.n_items:
            raise DataError("item_vocab length must equal n_items")
        for u in range(self.n_users):
            row = items[offsets[u] : offsets[u + 1]]
            if row.size > 1 and np.any(np.diff(row) <= 0):
                raise DataError(f"row {u} is not strictly increasing")
        offsets.setflags(write=False)
        items.setflags(write=False)

    @classmethod
    def from_rows(cls, rows, n_items, item_vocab=()):
        rows = [np.unique(np.asarray(r, dtype=np.int64)) for r in rows]
        offsets = np.zeros(len(rows) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([r.size for r in rows])
        items = np.concatenate(rows) if rows else np.zeros(0, dtype=np.int64)
        return cls(len(rows), n_items, offsets, items, item_vocab)

    @classmethod
    def from_csr(cls, X, item_vocab=()):
        X = sp.csr_matrix(X)
        X.sum_duplicates()
        X.eliminate_zeros()
        X.sort_indices()
        return cls(X.shape[0], X.shape[1], X.indptr, X.indices, item_vocab)

    @property
    def nnz(self):
        return int(self.item_ids.size)

    def row(self, u):
        return self.item_ids[self.row_offsets[u] : self.row_offsets[u + 1]]

    def row_lengths(self):
        return np.diff(self.row_offsets)

    def to_csr(self):
        data = np.ones(self.nnz)
        return sp.csr_matrix(
            (data, self.item_ids, self.row_offsets), shape=(self.n_users, self.n_items)
        )

    def dense_rows(self, users):
        out = np.zeros((len(users), self.n_items))
        for i, u in enumerate(users):
            out[i, self.row(u)] = 1.0
        return out

    def subset(self, users):
        """Matrix restricted to ``users`` (in the given order), same item space."""
        return InteractionMatrix.from_rows(
            [self.row(u) for u in users], self.n_items, self.item_vocab
        )

    def stats(self):
        cells = self.n_users * self.n_items
        return {
            "users": self.n_users,
            "items": self.n_items,
            "interactions": self.nnz,
            "sparsity_pct": 100.0 * (1.0 - self.nnz / cells) if cells else 100.0,
        }


# -- ingestion ------------------------------------------------------------


@dataclass
class LoadResult:
    events: list
    n_malformed: int

    def report(self):
        return f"{len(self.events)} events, {self.n_malformed} skipped"


def _looks_numeric(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_events(source):
    """Parse ``user, item, rating[, timestamp]`` lines from a path or text stream.

    The delimiter (tab or comma) is taken from the first line. A header is
    detected by a non-numeric rating column, since raw user ids may be
    arbitrary strings.
    """
    if isinstance(source, (str, Path)):
        try:
            with open(source, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise DataError(f"cannot read {source}: {exc}") from exc
    else:
        text = source.read()
    lines = [ln for ln in io.StringIO(text).read().splitlines() if ln.strip()]
    if not lines:
        return LoadResult([], 0)
    delim = "\t" if "\t" in lines[0] else ","
    first = [f.strip() for f in lines[0].split(delim)]
    if len(first) >= 3 and not _looks_numeric(first[2]):
        lines = lines[1:]
    events, bad = [], 0
    for line in lines:
        parts = [f.strip() for f in line.split(delim)]
        if len(parts) < 3 or not parts[0] or not parts[1]:
            bad += 1
            continue
        try:
            rating = float(parts[2])
        except ValueError:
            bad += 1
            continue
        if not math.isfinite(rating):
            bad += 1
            continue
        events.append((parts[0], parts[1], rating))
    total = len(events) + bad
    if total and bad / total > MAX_MALFORMED_FRACTION and bad > 1:
        raise DataError(f"{bad} of {total} lines malformed (more than 1%)")
    return LoadResult(events, bad)


def binarize_and_filter(events, min_rating=4.0, min_user_items=5, min_item_users=0):
    """Keep ratings >= ``min_rating`` then prune users/items to a fixed point.

    Users are ordered by first appearance; items by sorted raw id, so the
    output does not depend on event order beyond user ordering.
    """
    if min_rating < 0 or min_user_items < 0 or min_item_users < 0:
        raise DataError("thresholds must be non-negative")
    pairs = {(u, i) for u, i, r in events if r >= min_rating}
    if not pairs:
        raise DataError(f"no events left after rating filter (min_rating={min_rating})")
    while True:
        user_count, item_count = {}, {}
        for u, i in pairs:
            user_count[u] = user_count.get(u, 0) + 1
            item_count[i] = item_count.get(i, 0) + 1
        kept = {
            (u, i)
            for u, i in pairs
            if user_count[u] >= min_user_items and item_count[i] >= min_item_users
        }
        if len(kept) == len(pairs):
            break
        pairs = kept
        if not pairs:
            raise DataError(
                "no events left after user/item filter "
                f"(min_user_items={min_user_items}, min_item_users={min_item_users})"
            )
    kept_users = {u for u, _ in pairs}
    user_order = list(dict.fromkeys(u for u, _, _ in events if u in kept_users))
    vocab = sorted({i for _, i in pairs}, key=_raw_id_key)
    item_index = {raw: k for k, raw in enumerate(vocab)}
    user_index = {raw: k for k, raw in enumerate(user_order)}
    rows = [[] for _ in user_order]
    for u, i in pairs:
        rows[user_index[u]].append(item_index[i])
    return InteractionMatrix.from_rows(rows, len(vocab), vocab)


def _raw_id_key(raw):
    # numeric ids sort numerically, then anything else lexicographically
    try:
        return (0, float(raw), raw)
    except ValueError:
        return (1, 0.0, raw)


# -- binary persistence ---------------------------------------------------


def save_matrix(matrix, path):
    buf = io.BytesIO()
    buf.write(MATRIX_MAGIC)
    buf.write(struct.pack("<qqq", matrix.n_users, matrix.n_items, matrix.nnz))
    buf.write(matrix.row_offsets.astype("<i8").tobytes())
    buf.write(matrix.item_ids.astype("<i8").tobytes())
    vocab = matrix.item_vocab or tuple(str(k) for k in range(matrix.n_items))
    for name in vocab:
        raw = str(name).encode("utf-8")
        buf.write(struct.pack("<q", len(raw)))
        buf.write(raw)
    Path(path).write_bytes(buf.getvalue())


def load_matrix(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read matrix file {path}: {exc}") from exc
    if blob[:8] != MATRIX_MAGIC:
        raise DataError(f"{path} is not an interaction-matrix file (bad magic)")
    try:
        pos = 8
        n_users, n_items, nnz = struct.unpack_from("<qqq", blob, pos)
        pos += 24
        offsets = np.frombuffer(blob, "<i8", n_users + 1, pos).astype(np.int64)
        pos += 8 * (n_users + 1)
        items = np.frombuffer(blob, "<i8", nnz, pos).astype(np.int64)
        pos += 8 * nnz
        vocab = []
        for _ in range(n_items):
            (n,) = struct.unpack_from("<q", blob, pos)
            pos += 8
            if pos + n > len(blob):
                raise DataError("truncated vocab entry")
            vocab.append(blob[pos : pos + n].decode("utf-8"))
            pos += n
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path} is truncated or corrupt: {exc}") from exc
    if pos != len(blob):
        raise DataError(f"{path} has {len(blob) - pos} trailing bytes")
    return InteractionMatrix(n_users, n_items, offsets, items, vocab)


# -- splits and sampling --------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    n_heldout_val: int = 0
    n_heldout_test: int = 0
    seed: int = 0


@dataclass(frozen=True)
class UserSplit:
    train: InteractionMatrix
    train_users: np.ndarray
    val_users: np.ndarray
    test_users: np.ndarray


def split_users(matrix, spec):
    """Seeded disjoint partition of users into train / validation / test."""
    n_out = spec.n_heldout_val + spec.n_heldout_test
    if spec.n_heldout_val < 0 or spec.n_heldout_test < 0 or n_out >= matrix.n_users:
        raise DataError(
            f"cannot hold out {spec.n_heldout_val}+{spec.n_heldout_test} users "
            f"from {matrix.n_users}"
        )
    perm = np.random.default_rng(spec.seed).permutation(matrix.n_users)
    n_train = matrix.n_users - n_out
    train_users = np.sort(perm[:n_train])
    val_users = np.sort(perm[n_train : n_train + spec.n_heldout_val])
    test_users = np.sort(perm[n_train + spec.n_heldout_val :])
    return UserSplit(matrix.subset(train_users), train_users, val_users, test_users)


@dataclass(frozen=True)
class FoldInRow:
    observed: np.ndarray
    heldout: np.ndarray


def holdout_count(n, holdout_fraction):
    k = math.floor(holdout_fraction * n + 0.5)
    return min(max(k, 1), n - 1)


def fold_in_split(user_row, holdout_fraction=0.2, seed=0, user=0):
    """Hold out a random ``holdout_fraction`` of a user's items.

    Returns ``None`` for rows with fewer than two items, which cannot be
    evaluated. Deterministic in ``(seed, user)``.
    """
    if not 0.0 < holdout_fraction < 1.0:
        raise ValueError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
    row = np.asarray(user_row, dtype=np.int64)
    if row.size < 2:
        return None
    k = holdout_count(row.size, holdout_fraction)
    rng = np.random.default_rng([seed, user])
    pick = np.zeros(row.size, dtype=bool)
    pick[rng.choice(row.size, size=k, replace=False)] = True
    return FoldInRow(observed=np.sort(row[~pick]), heldout=np.sort(row[pick]))


def sample_mask(indices, alpha, rng):
    """Keep each interaction independently with probability ``alpha``.

    Returns the kept (observed) indices; the dropped ones form the held-out
    set for the iteration.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    indices = np.asarray(indices, dtype=np.int64)
    keep = rng.random(indices.size) < alpha
    return indices[keep]


def sample_mask_dense(X, alpha, rng):
    """Dense batch version: returns a 0/1 matrix ``b`` with ``b = 0`` off-support."""
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    return ((rng.random(X.shape) < alpha) & (X > 0)).astype(np.float64)


def batch_iter(users, batch_size, epoch_seed):
    """Yield shuffled batches covering each user exactly once."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    users = np.asarray(users)
    order = users[np.random.default_rng(epoch_seed).permutation(users.size)]
    for start in range(0, order.size, batch_size):
        yield order[start : start + batch_size]


def densify_row(indices, n_items, normalize=False):
    out = np.zeros(n_items)
    out[np.asarray(indices, dtype=np.int64)] = 1.0
    if normalize and indices is not None and len(indices):
        out /= np.sqrt(len(np.unique(indices)))
    return out


def l2_normalize_rows(X):
    norms = np.sqrt((X * X).sum(axis=1, keepdims=True))
    return np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)


# -- synthetic benchmark --------------------------------------------------


def synthesize(n_users, n_items, n_clusters, seed, p_in=0.3, p_out=0.01):
    """Cluster-structured implicit feedback.

    Items are split into ``n_clusters`` contiguous blocks and each user gets a
    uniformly drawn cluster. Returns ``(matrix, user_clusters, item_clusters)``.
    """
    if n_users < 1 or n_items < 1 or not 1 <= n_clusters <= n_items:
        raise DataError(
            f"degenerate synthetic sizes: users={n_users}, items={n_items}, "
            f"clusters={n_clusters}"
        )
    rng = np.random.default_rng(seed)
    item_clusters = (np.arange(n_items) * n_clusters) // n_items
    user_clusters = rng.integers(0, n_clusters, size=n_users)
    probs = np.where(user_clusters[:, None] == item_clusters[None, :], p_in, p_out)
    X = rng.random((n_users, n_items)) < probs
    vocab = tuple(f"i{k}" for k in range(n_items))
    matrix = InteractionMatrix.from_rows(
        [np.flatnonzero(X[u]) for u in range(n_users)], n_items, vocab
    )
    return matrix, user_clusters, item_clusters
