"""Frame-probability decoding and collar-based event F1."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ContractError, InputError

CLIP_SECONDS = 10.0
FRAME_SECONDS = 0.04


@dataclass(frozen=True, order=True)
class Event:
    clip_id: str
    onset: float
    offset: float
    label: str

    def __post_init__(self):
        if not self.offset > self.onset:
            raise InputError(
                f"event {self.label!r} in {self.clip_id!r}: offset {self.offset} <= onset {self.onset}"
            )


@dataclass(frozen=True)
class DecodeConfig:
    threshold: float = 0.5
    median_window: int = 7
    frame_duration: float = FRAME_SECONDS
    # "recursive": recursive median with replicated endpoints (idempotent);
    # "standard": plain sliding median with truncated edge windows.
    median_mode: str = "recursive"

    def __post_init__(self):
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise ContractError(f"median window must be odd, got {self.median_window}")
        if not 0.0 < self.threshold < 1.0:
            raise ContractError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.median_mode not in ("recursive", "standard"):
            raise ContractError(f"unknown median mode {self.median_mode!r}")


def median_filter_binary(seq, window: int, mode: str = "recursive") -> np.ndarray:
    """Median-smooth a 0/1 sequence with an odd window.

    The recursive variant feeds already-filtered samples back into the
    window and extends the ends by replication; its output is a fixed point
    of the filter. The standard variant shrinks the window at the edges
    (ties resolve to 0).
    """
    x = np.asarray(seq).astype(np.int64)
    n = len(x)
    h = window // 2
    if h == 0 or n == 0:
        return x.copy()
    if mode == "standard":
        c = np.concatenate([[0], np.cumsum(x)])
        idx = np.arange(n)
        lo = np.maximum(idx - h, 0)
        hi = np.minimum(idx + h + 1, n)
        ones = c[hi] - c[lo]
        return (2 * ones > (hi - lo)).astype(np.int64)
    padded = np.concatenate([np.full(h, x[0]), x, np.full(h, x[-1])])
    out = padded.copy()
    # running count of ones over out[i-h:i] + padded[i:i+h+1]
    ones = int(out[0:h].sum() + padded[h : 2 * h + 1].sum())
    for i in range(h, n + h):
        v = 1 if 2 * ones > window else 0
        ones += v - padded[i]  # position i moves from the input half to the output half
        out[i] = v
        ones -= out[i - h]
        if i + h + 1 < len(padded):
            ones += padded[i + h + 1]
    return out[h : n + h]


def binary_runs(seq) -> list[tuple[int, int]]:
    """Maximal runs of ones as half-open ``(start, stop)`` frame ranges."""
    x = np.asarray(seq).astype(np.int8)
    d = np.diff(np.concatenate([[0], x, [0]]))
    starts = np.flatnonzero(d == 1)
    stops = np.flatnonzero(d == -1)
    return list(zip(starts.tolist(), stops.tolist()))


def decode(
    strong,
    class_names,
    cfg: DecodeConfig = DecodeConfig(),
    clip_id: str = "",
) -> list[Event]:
    """Turn a ``(frames, classes)`` probability grid into events."""
    p = np.asarray(strong, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != len(class_names):
        raise ContractError(
            f"strong grid shape {p.shape} does not match {len(class_names)} classes"
        )
    events = []
    for c, name in enumerate(class_names):
        active = median_filter_binary(p[:, c] > cfg.threshold, cfg.median_window, cfg.median_mode)
        for start, stop in binary_runs(active):
            events.append(
                Event(
                    clip_id,
                    round(start * cfg.frame_duration, 6),
                    round(stop * cfg.frame_duration, 6),
                    name,
                )
            )
    events.sort()
    return events


def encode_events(
    events, class_names, frames: int = 250, frame_duration: float = FRAME_SECONDS
) -> np.ndarray:
    """Rasterize events of one clip into a ``(frames, classes)`` 0/1 grid."""
    index = {name: i for i, name in enumerate(class_names)}
    grid = np.zeros((frames, len(class_names)))
    for ev in events:
        if ev.label not in index:
            raise ContractError(f"unknown class {ev.label!r}")
        lo = int(np.clip(round(ev.onset / frame_duration), 0, frames))
        hi = int(np.clip(round(ev.offset / frame_duration), 0, frames))
        grid[lo:hi, index[ev.label]] = 1.0
    return grid


# ---------------------------------------------------------------------------
# event-based F1
# ---------------------------------------------------------------------------


@dataclass
class EventScores:
    f1: float
    precision: float
    recall: float
    per_class: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "macro": {"f1": self.f1, "precision": self.precision, "recall": self.recall},
                "per_class": self.per_class,
            },
            indent=2,
            sort_keys=True,
        )

    def table(self) -> str:
        rows = [f"{'class':<28}{'P':>8}{'R':>8}{'F1':>8}{'ref':>6}{'est':>6}"]
        for name, s in sorted(self.per_class.items()):
            rows.append(
                f"{name:<28}{s['precision']:>8.3f}{s['recall']:>8.3f}{s['f1']:>8.3f}"
                f"{s['n_ref']:>6d}{s['n_est']:>6d}"
            )
        rows.append(f"{'macro':<28}{self.precision:>8.3f}{self.recall:>8.3f}{self.f1:>8.3f}")
        return "\n".join(rows)


def _f1(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _eligible(r: Event, e: Event, onset_collar, offset_collar, pct) -> bool:
    off_c = max(offset_collar, pct * (r.offset - r.onset))
    # 1e-9 absorbs the binary rounding of decimal seconds
    return abs(e.onset - r.onset) <= onset_collar + 1e-9 and abs(e.offset - r.offset) <= off_c + 1e-9


def _count_matches(refs, ests, onset_collar, offset_collar, pct, matching) -> int:
    if not refs or not ests:
        return 0
    if matching == "optimal":
        ok = np.array(
            [[_eligible(r, e, onset_collar, offset_collar, pct) for e in ests] for r in refs],
            dtype=float,
        )
        rows, cols = linear_sum_assignment(-ok)
        return int(ok[rows, cols].sum())
    refs = sorted(refs)
    used = [False] * len(refs)
    tp = 0
    for e in sorted(ests):
        for i, r in enumerate(refs):
            if not used[i] and _eligible(r, e, onset_collar, offset_collar, pct):
                used[i] = True
                tp += 1
                break
    return tp


def event_f1(
    ref,
    est,
    onset_collar: float = 0.2,
    offset_collar: float = 0.2,
    percentage_of_length: float = 0.2,
    matching: str = "greedy",
) -> EventScores:
    """Macro-averaged event-based precision/recall/F1 over classes in ``ref ∪ est``.

    A matched estimate is a true positive when its onset is within
    ``onset_collar`` of the reference onset and its offset within
    ``max(offset_collar, percentage_of_length * ref duration)``.
    Matching is one-to-one per (clip, class).
    """
    if matching not in ("greedy", "optimal"):
        raise ContractError(f"unknown matching {matching!r}")
    groups: dict[tuple[str, str], tuple[list, list]] = defaultdict(lambda: ([], []))
    for ev in ref:
        if not ev.offset > ev.onset:
            raise InputError(f"malformed reference event {ev}")
        groups[(ev.clip_id, ev.label)][0].append(ev)
    for ev in est:
        if not ev.offset > ev.onset:
            raise InputError(f"malformed estimated event {ev}")
        groups[(ev.clip_id, ev.label)][1].append(ev)
    counts: dict[str, list[int]] = defaultdict(lambda: [0, 0, 0])  # tp, n_ref, n_est
    for (_, label), (refs, ests) in groups.items():
        c = counts[label]
        c[0] += _count_matches(refs, ests, onset_collar, offset_collar, percentage_of_length, matching)
        c[1] += len(refs)
        c[2] += len(ests)
    if not counts:
        return EventScores(1.0, 1.0, 1.0, {})
    per_class = {}
    for label, (tp, n_ref, n_est) in counts.items():
        p = tp / n_est if n_est else 0.0
        r = tp / n_ref if n_ref else 0.0
        per_class[label] = {
            "precision": p,
            "recall": r,
            "f1": _f1(p, r),
            "tp": tp,
            "n_ref": n_ref,
            "n_est": n_est,
        }
    k = len(per_class)
    return EventScores(
        f1=sum(s["f1"] for s in per_class.values()) / k,
        precision=sum(s["precision"] for s in per_class.values()) / k,
        recall=sum(s["recall"] for s in per_class.values()) / k,
        per_class=per_class,
    )
