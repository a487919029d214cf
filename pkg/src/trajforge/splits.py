"""Trajectory-level, element-stratified, source-balanced train/test splits.

Any object with ``trajectory_id``, ``elements`` and ``source`` attributes
works as a trajectory here; full Trajectory objects are not required.
"""

from __future__ import annotations

import json
import math
from array import array
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .elements import ATOMIC_NUMBER
from .hashing import seeded_hash
from .schema import SourceId

TRAIN = "train"
TEST = "test"

DEFAULT_SOURCE_BALANCE = {
    SourceId.MP: 0.10,
    SourceId.OQMD: 0.10,
    SourceId.ALEXANDRIA: 0.80,
}


class SplitError(ValueError):
    pass


class Infeasible(SplitError):
    pass


class KeyCollision(Exception):
    """Two trajectories share a 64-bit order hash; ordering then needs their ids."""


class InsufficientPool(SplitError):
    def __init__(self, deficits):
        self.deficits = deficits
        detail = ", ".join(f"{s.value}: need {need}, have {have}"
                           for s, (need, have) in deficits.items())
        super().__init__(f"source pool too small ({detail})")


@dataclass(frozen=True)
class SplitConfig:
    test_fraction: float = 0.2
    seed: int = 0
    source_balance: dict = field(default_factory=lambda: dict(DEFAULT_SOURCE_BALANCE))
    target_size: Optional[int] = None

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must be in (0, 1)")
        balance = {SourceId(k): float(v) for k, v in self.source_balance.items()}
        if any(v < 0 or not math.isfinite(v) for v in balance.values()):
            raise ValueError("source_balance fractions must be finite and >= 0")
        if abs(sum(balance.values()) - 1.0) > 1e-9:
            raise ValueError("source_balance fractions must sum to 1")
        object.__setattr__(self, "source_balance", balance)
        if self.target_size is not None and self.target_size < 0:
            raise ValueError("target_size must be >= 0")


def signature_bits(elements) -> int:
    """Bitset over the element table: bit Z-1 set iff element Z occurs."""
    bits = 0
    for el in elements:
        bits |= 1 << (ATOMIC_NUMBER[el] - 1)
    return bits


def element_signature(traj) -> int:
    return signature_bits(traj.elements)


def signature_elements(bits: int) -> list:
    from .elements import SYMBOLS

    return [SYMBOLS[i] for i in range(118) if bits >> i & 1]


def _order_key(seed, tid):
    return (seeded_hash(seed, tid), tid)


def stratum_test_counts(sizes: dict, cfg: SplitConfig) -> dict:
    """Test slots per signature: floor(n * f), plus the slots lost to flooring
    handed back by largest remainder so the total is floor(N * f).

    Singleton strata always stay in train.
    """
    f = Fraction(repr(float(cfg.test_fraction)))
    n_test = {sig: math.floor(n * f) for sig, n in sizes.items()}
    spare = math.floor(sum(sizes.values()) * f) - sum(n_test.values())
    eligible = [sig for sig, n in sizes.items() if n >= 2 and n * f - n_test[sig] > 0]
    eligible.sort(key=lambda sig: (-(sizes[sig] * f - n_test[sig]),
                                   seeded_hash(cfg.seed, format(sig, "x"))))
    for sig in eligible[:max(spare, 0)]:
        n_test[sig] += 1
    return n_test


def stratified_split(trajs, cfg: SplitConfig) -> dict:
    """Assign each trajectory to train or test.

    Each element-signature stratum of size n gets floor(n * f) or
    ceil(n * f) test candidates, taken in seeded-hash order, with the total
    fixed at floor(N * f). Candidates carrying an element absent from the
    training side are then moved to train, in the same order, until every
    test element is covered.
    """
    trajs = list(trajs)
    if len(trajs) < 2:
        raise SplitError("need at least two trajectories to split")
    ids = [t.trajectory_id for t in trajs]
    if len(set(ids)) != len(ids):
        raise SplitError("duplicate trajectory ids")

    strata = defaultdict(list)
    for t in trajs:
        strata[element_signature(t)].append(t)
    n_test = stratum_test_counts({sig: len(m) for sig, m in strata.items()}, cfg)

    assignment = {}
    candidates = []
    for sig, members in strata.items():
        members.sort(key=lambda t: _order_key(cfg.seed, t.trajectory_id))
        for i, t in enumerate(members):
            if i < n_test[sig]:
                candidates.append(t)
            else:
                assignment[t.trajectory_id] = TRAIN

    train_elements = set()
    for t in trajs:
        if assignment.get(t.trajectory_id) == TRAIN:
            train_elements.update(t.elements)
    candidates.sort(key=lambda t: _order_key(cfg.seed, t.trajectory_id))
    for t in candidates:
        if set(t.elements) <= train_elements:
            assignment[t.trajectory_id] = TEST
        else:
            assignment[t.trajectory_id] = TRAIN
            train_elements.update(t.elements)

    if TEST not in assignment.values():
        raise Infeasible("no trajectory can be placed in the test set "
                         "without introducing unseen species")
    return assignment


def largest_remainder_quotas(fractions: dict, total: int) -> dict:
    """Integer quotas proportional to ``fractions`` summing to ``total``.

    Ties on the remainder go to the source listed first.
    """
    fr = {k: Fraction(repr(float(v))) for k, v in fractions.items()}
    norm = sum(fr.values())
    if norm == 0:
        raise SplitError("no source with a positive fraction")
    raw = {k: v / norm * total for k, v in fr.items()}
    quotas = {k: math.floor(v) for k, v in raw.items()}
    left = total - sum(quotas.values())
    order = sorted(raw, key=lambda k: (-(raw[k] - quotas[k]), list(raw).index(k)))
    for k in order[:left]:
        quotas[k] += 1
    return quotas


def source_quotas(pools: dict, cfg: SplitConfig, target_size: int) -> dict:
    available = {s: frac for s, frac in cfg.source_balance.items()
                 if frac > 0 and pools.get(s)}
    ordered = {s: available[s] for s in SourceId if s in available}
    return largest_remainder_quotas(ordered, target_size)


def balance_sources(trajs, cfg: SplitConfig) -> list:
    """Seeded uniform subsample of each source pool to its quota.

    Sources with no trajectories (e.g. only Materials Project provides SCAN)
    drop out and the remaining fractions are renormalized. Without a
    ``target_size`` every trajectory is kept.
    """
    trajs = list(trajs)
    if cfg.target_size is None:
        return sorted(trajs, key=lambda t: t.trajectory_id)
    pools = defaultdict(list)
    for t in trajs:
        pools[SourceId(t.source)].append(t)
    quotas = source_quotas(pools, cfg, cfg.target_size)
    deficits = {s: (q, len(pools[s])) for s, q in quotas.items() if len(pools[s]) < q}
    if deficits:
        raise InsufficientPool(deficits)
    chosen = []
    for s, q in quotas.items():
        pool = sorted(pools[s], key=lambda t: _order_key(cfg.seed, t.trajectory_id))
        chosen += pool[:q]
    return sorted(chosen, key=lambda t: t.trajectory_id)


def write_split(assignment: dict, path) -> None:
    from .ingest import atomic_write_text

    text = "".join(json.dumps({"trajectory_id": tid, "label": assignment[tid]}) + "\n"
                   for tid in sorted(assignment))
    atomic_write_text(path, text)


def read_split(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                d = json.loads(line)
                out[d["trajectory_id"]] = d["label"]
    return out


# --------------------------------------------------------------------------
# columnar form for large pools

SOURCE_ORDER = tuple(SourceId)


class SplitColumns:
    """Fixed-width per-trajectory split keys, in arrival order.

    Holds a source index, a stratum index and the two seeded order hashes
    (balance and split) per trajectory, about 21 bytes each; the ids stay
    wherever they came from. ``columnar_split`` gives the same labels as
    ``balance_sources`` followed by ``stratified_split``.
    """

    def __init__(self, balance_seed: int, split_seed: int):
        self.balance_seed, self.split_seed = balance_seed, split_seed
        self.source = array("B")
        self.stratum = array("i")
        self.balance_key = array("Q")
        self.split_key = array("Q")
        self.signatures = []
        self._stratum_of = {}

    def __len__(self):
        return len(self.source)

    def add(self, trajectory_id: str, elements, source) -> None:
        bits = signature_bits(elements)
        k = self._stratum_of.get(bits)
        if k is None:
            k = self._stratum_of[bits] = len(self.signatures)
            self.signatures.append(bits)
        self.source.append(SOURCE_ORDER.index(SourceId(source)))
        self.stratum.append(k)
        self.balance_key.append(seeded_hash(self.balance_seed, trajectory_id))
        self.split_key.append(seeded_hash(self.split_seed, trajectory_id))


def _has_ties(keys) -> bool:
    return len(keys) > 1 and bool(np.any(np.diff(np.sort(keys)) == 0))


def columnar_split(cols: SplitColumns, balance: SplitConfig, split: SplitConfig) -> np.ndarray:
    """Labels per trajectory in arrival order: -1 not selected, 0 train, 1 test.

    Raises KeyCollision when equal hashes would make the order depend on ids.
    """
    n = len(cols)
    source = np.frombuffer(cols.source, dtype=np.uint8) if n else np.zeros(0, np.uint8)
    stratum = np.frombuffer(cols.stratum, dtype=np.int32) if n else np.zeros(0, np.int32)
    bkey = np.frombuffer(cols.balance_key, dtype=np.uint64) if n else np.zeros(0, np.uint64)
    skey = np.frombuffer(cols.split_key, dtype=np.uint64) if n else np.zeros(0, np.uint64)

    chosen = np.zeros(n, dtype=bool)
    if balance.target_size is None:
        chosen[:] = True
    else:
        counts = np.bincount(source, minlength=len(SOURCE_ORDER))
        pools = {s: int(counts[i]) for i, s in enumerate(SOURCE_ORDER)}
        quotas = source_quotas(pools, balance, balance.target_size)
        deficits = {s: (q, pools[s]) for s, q in quotas.items() if pools[s] < q}
        if deficits:
            raise InsufficientPool(deficits)
        for s, q in quotas.items():
            idx = np.flatnonzero(source == SOURCE_ORDER.index(s))
            if _has_ties(bkey[idx]):
                raise KeyCollision(s.value)
            chosen[idx[np.argsort(bkey[idx], kind="stable")[:q]]] = True

    idx = np.flatnonzero(chosen)
    if len(idx) < 2:
        raise SplitError("need at least two trajectories to split")
    if _has_ties(skey[idx]):
        raise KeyCollision("split")

    sizes_arr = np.bincount(stratum[idx], minlength=len(cols.signatures))
    sizes = {cols.signatures[k]: int(c) for k, c in enumerate(sizes_arr) if c}
    n_test = stratum_test_counts(sizes, split)
    quota = np.array([n_test.get(sig, 0) for sig in cols.signatures], dtype=np.int64)

    # rank of each selected trajectory inside its stratum, in split-key order
    order = idx[np.lexsort((skey[idx], stratum[idx]))]
    st = stratum[order]
    starts = np.searchsorted(st, np.arange(len(cols.signatures)))
    rank = np.arange(len(order)) - starts[st]
    labels = np.full(n, -1, dtype=np.int8)
    labels[order] = (rank < quota[st]).astype(np.int8)

    # coverage repair: each move puts a stratum's first candidate in train,
    # which covers that stratum, so it is done at most once per stratum
    train_bits = 0
    for k, sig in enumerate(cols.signatures):
        if sizes_arr[k] > quota[k]:
            train_bits |= sig
    first = {k: order[starts[k]] for k in range(len(cols.signatures)) if quota[k] > 0}
    while True:
        uncovered = [k for k in first if cols.signatures[k] & ~train_bits]
        if not uncovered:
            break
        k = min(uncovered, key=lambda k: int(skey[first[k]]))
        labels[first.pop(k)] = 0
        train_bits |= cols.signatures[k]

    if not np.any(labels == 1):
        raise Infeasible("no trajectory can be placed in the test set "
                         "without introducing unseen species")
    return labels
