"""Uniform time-based segmentation of demonstrations into primitive datasets."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .core import Demonstration, read_csv_table


@dataclass(frozen=True)
class SegmentSpec:
    n_segments: int = 10
    jitter_lo: float = 0.9
    jitter_hi: float = 1.1
    seed: int = 0

    def __post_init__(self):
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")
        if not 0 < self.jitter_lo <= 1 <= self.jitter_hi:
            raise ValueError("need 0 < jitter_lo <= 1 <= jitter_hi")


@dataclass
class PrimitiveDataset:
    """Training pairs from one time segment of one demonstration.

    ``inputs[i]`` is the follower state F_k, ``targets[i]`` the next leader
    state L_{k+1}, and ``references[i]`` the follower state the upper layer
    would supply at tick k (see :func:`reference_index`).
    """

    inputs: np.ndarray
    targets: np.ndarray
    references: np.ndarray
    ticks: np.ndarray
    tick_range: tuple
    segment_index: int
    source_demo_id: str

    def __post_init__(self):
        if len(self.inputs) == 0:
            raise ValueError("primitive dataset is empty")

    def __len__(self):
        return len(self.inputs)

    @property
    def tag(self) -> tuple:
        return (self.source_demo_id, self.segment_index)

    @property
    def lower_inputs(self) -> np.ndarray:
        return np.hstack([self.inputs, self.references])


def reference_index(k, horizon: int, length: int):
    """Tick of the cached upper-layer target used at tick ``k``.

    The upper layer refreshes every ``horizon`` ticks, so ticks
    ``[j*n, (j+1)*n)`` all see the follower state at ``(j+1)*n``.
    """
    k = np.asarray(k)
    return np.minimum((k // horizon + 1) * horizon, length - 1)


def _round(x):
    return int(np.floor(x + 0.5))


def segment_ranges(T: int, spec: SegmentSpec, jitters=None, rng=None) -> list[tuple[int, int]]:
    """Half-open tick ranges of the jittered, center-anchored segments.

    Gaps left by short segments are given tick-by-tick to whichever
    segment's anchor is nearer, so every tick in ``[0, T)`` is covered.
    """
    n = spec.n_segments
    if T < 2 * n:
        raise ValueError(f"demonstration too short: {T} ticks for {n} segments")
    if jitters is None:
        rng = np.random.default_rng(spec.seed) if rng is None else rng
        jitters = rng.uniform(spec.jitter_lo, spec.jitter_hi, size=n)
    jitters = np.broadcast_to(np.asarray(jitters, dtype=np.float64), (n,))
    width = T / n
    anchors = (np.arange(n) + 0.5) * width
    starts, ends = [], []
    for a, j in zip(anchors, jitters):
        h = j * width / 2
        starts.append(min(max(_round(a - h), 0), T))
        ends.append(min(max(_round(a + h), 0), T))
    # repair gaps at the boundaries and between neighbours
    starts[0] = 0
    ends[-1] = T
    for i in range(n - 1):
        if ends[i] < starts[i + 1]:
            split = _round((i + 1) * width)
            split = min(max(split, ends[i]), starts[i + 1])
            ends[i], starts[i + 1] = split, split
    return list(zip(starts, ends))


def segment_uniform(demo: Demonstration, spec: SegmentSpec, horizon: int = 20,
                    demo_id: str | None = None, rng=None, jitters=None) -> list[PrimitiveDataset]:
    T = len(demo)
    ranges = segment_ranges(T, spec, jitters=jitters, rng=rng)
    demo_id = demo.name if demo_id is None else demo_id
    F, L = demo.follower.data, demo.leader.data
    out = []
    for i, (s, e) in enumerate(ranges):
        ks = np.arange(s, min(e, T - 1))
        if ks.size == 0:
            # final single-tick segment: borrow the last valid pair
            ks = np.array([T - 2])
        refs = reference_index(ks, horizon, T)
        out.append(PrimitiveDataset(F[ks].copy(), L[ks + 1].copy(), F[refs].copy(), ks,
                                    (s, e), i, demo_id))
    return out


def build_primitive_sets(demos, spec: SegmentSpec, horizon: int = 20) -> list[PrimitiveDataset]:
    """Segment every demonstration; jitter is drawn independently per demo."""
    demos = list(demos)
    if not demos:
        raise ValueError("no demonstrations")
    d0 = demos[0]
    for d in demos[1:]:
        if d.dim != d0.dim or d.dt != d0.dt:
            raise ValueError("demonstrations have inconsistent dimensions or dt")
    rng = np.random.default_rng(spec.seed)
    out = []
    for i, d in enumerate(demos):
        out += segment_uniform(d, spec, horizon, demo_id=d.name or f"demo{i}", rng=rng)
    return out


class UniformSegmenter(TransformerMixin, BaseEstimator):
    """Transforms a list of demonstrations into primitive datasets."""

    def __init__(self, n_segments=10, jitter_lo=0.9, jitter_hi=1.1, horizon=20, seed=0):
        self.n_segments = n_segments
        self.jitter_lo = jitter_lo
        self.jitter_hi = jitter_hi
        self.horizon = horizon
        self.seed = seed

    @property
    def spec(self) -> SegmentSpec:
        return SegmentSpec(self.n_segments, self.jitter_lo, self.jitter_hi, self.seed)

    def fit(self, X, y=None):
        self.spec_ = self.spec
        return self

    def transform(self, X):
        return build_primitive_sets(X, self.spec, self.horizon)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def export_primitives(datasets, out_dir, meta: dict | None = None) -> None:
    """Write one CSV per dataset plus ``manifest.csv``.

    Dataset rows are ``tick, in_*, ref_*, target_*``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prefix = "# " + " ".join(f"{k}={v}" for k, v in (meta or {}).items()) + "\n" if meta else ""
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        fh.write(prefix)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "demo_id", "segment_index", "tick_start", "tick_end", "n_pairs"])
        for j, ds in enumerate(datasets):
            name = f"prim_{j:03d}.csv"
            w.writerow([name, ds.source_demo_id, ds.segment_index, ds.tick_range[0],
                        ds.tick_range[1], len(ds)])
            width = ds.inputs.shape[1]
            header = (["tick"] + [f"in_{i}" for i in range(width)] + [f"ref_{i}" for i in range(width)]
                      + [f"target_{i}" for i in range(width)])
            with open(out_dir / name, "w") as g:
                g.write(prefix)
                g.write(",".join(header) + "\n")
                for k, a, r, t in zip(ds.ticks, ds.inputs, ds.references, ds.targets):
                    g.write(",".join([str(int(k))] + [repr(float(x)) for x in (*a, *r, *t)]) + "\n")


def load_primitives(in_dir) -> list[PrimitiveDataset]:
    in_dir = Path(in_dir)
    manifest = in_dir / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"missing primitive manifest {manifest}")
    rows = [line for line in manifest.read_text().splitlines() if line and not line.startswith("#")]
    out = []
    for row in csv.DictReader(rows):
        _, vals, _ = read_csv_table(in_dir / row["file"])
        width = (vals.shape[1] - 1) // 3
        out.append(PrimitiveDataset(vals[:, 1:1 + width], vals[:, 1 + 2 * width:],
                                    vals[:, 1 + width:1 + 2 * width], vals[:, 0].astype(int),
                                    (int(row["tick_start"]), int(row["tick_end"])),
                                    int(row["segment_index"]), row["demo_id"]))
    return out
