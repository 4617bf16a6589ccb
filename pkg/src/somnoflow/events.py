"""Sleep-onset / wake-up detection from a per-minute probability sequence.

Stages: moving-median smoothing, thresholding to binary states, minimum-run
suppression of short state flips, then the confirmation rules: a sleep-onset
candidate is accepted once 45 minutes of sleep accrue after it without any
10-minute contiguous awake run, and a wake candidate needs 15 contiguous awake
minutes immediately after it with no later sleep run of 10+ minutes.

All durations are configurable; the run-length-encoded engine here is checked
exhaustively against the literal reference in `reference.py`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MINUTE_SECONDS = 60


@dataclass
class Hypnogram:
    """Per-minute sleep probabilities starting at `start` (seconds)."""

    start: int
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.size and (self.probs.min() < 0.0 or self.probs.max() > 1.0):
            raise ValueError("probabilities must lie in [0,1]")

    def __len__(self):
        return len(self.probs)


@dataclass
class BinaryHypnogram:
    """Per-minute states, 0 = awake, 1 = sleep."""

    start: int
    states: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int8)

    def __len__(self):
        return len(self.states)


@dataclass
class EventRuleConfig:
    threshold: float = 0.5
    median_width: int = 5
    min_run: int = 3
    sleep_confirm: int = 45
    awake_break: int = 10
    wake_confirm: int = 15
    reentry_run: int = 10

    def __post_init__(self):
        if self.median_width % 2 == 0:
            raise ValueError(f"median_width must be odd, got {self.median_width}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0,1), got {self.threshold}")
        for name in ("median_width", "min_run", "sleep_confirm", "awake_break",
                     "wake_confirm", "reentry_run"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class TraceEntry:
    kind: str           # "sleep_onset" or "wake_time"
    candidate: int      # minute index
    accepted: bool
    reason: str


@dataclass
class SleepEvents:
    sleep_onset: int | None = None   # timestamps (seconds)
    wake_time: int | None = None
    trace: list = field(default_factory=list)


def smooth_probs(h, median_width):
    """Moving median; near the edges the window shrinks symmetrically so the
    length is preserved. Width 1 is the identity."""
    if median_width % 2 == 0:
        raise ValueError(f"median width must be odd, got {median_width}")
    n = len(h)
    if median_width > n:
        raise ValueError(f"median width {median_width} exceeds length {n}")
    half = median_width // 2
    p = h.probs
    out = np.empty_like(p)
    for i in range(n):
        k = min(half, i, n - 1 - i)
        out[i] = np.median(p[i - k:i + k + 1])
    return Hypnogram(start=h.start, probs=out)


def binarize(h, threshold=0.5):
    """state = 1 iff p >= threshold (ties classify as sleep)."""
    return BinaryHypnogram(start=h.start, states=(h.probs >= threshold).astype(np.int8))


def _runs(states):
    """Run-length encoding: list of [state, start, length]."""
    a = np.asarray(states)
    if a.size == 0:
        return []
    idx = np.flatnonzero(a[1:] != a[:-1]) + 1
    starts = np.concatenate(([0], idx))
    ends = np.concatenate((idx, [a.size]))
    return [[int(a[s]), int(s), int(e - s)] for s, e in zip(starts, ends)]


def suppress_short_runs(b, min_run):
    """Flip interior runs shorter than min_run (leftmost first, to fixpoint).

    First and last runs are exempt. Flipping a run merges it with both
    neighbors, which necessarily share the opposite state.
    """
    if min_run < 1:
        raise ValueError(f"min_run must be >= 1, got {min_run}")
    runs = _runs(b.states)
    changed = True
    while changed:
        changed = False
        for i in range(1, len(runs) - 1):
            if runs[i][2] < min_run:
                prev, cur, nxt = runs[i - 1], runs[i], runs[i + 1]
                merged = [prev[0], prev[1], prev[2] + cur[2] + nxt[2]]
                runs[i - 1:i + 2] = [merged]
                changed = True
                break
    out = np.empty(len(b.states), dtype=np.int8)
    for state, start, length in runs:
        out[start:start + length] = state
    return BinaryHypnogram(start=b.start, states=out)


def detect_sleep_time(b, cfg, trace=None):
    """First accepted awake-to-sleep transition, as a minute index.

    A candidate is accepted once `sleep_confirm` sleep minutes accrue after it
    before any contiguous awake run of `awake_break` minutes. A candidate left
    undecided at end of record is rejected (batch semantics).
    """
    runs = _runs(b.states)
    for i, (state, start, length) in enumerate(runs):
        if state != 1:
            continue
        accrued = 0
        verdict = None
        for j in range(i, len(runs)):
            s, _, l = runs[j]
            if s == 1:
                accrued += l
                if accrued >= cfg.sleep_confirm:
                    verdict = (True, f"{cfg.sleep_confirm} sleep minutes accrued")
                    break
            else:
                if l >= cfg.awake_break:
                    verdict = (False, f"awake run of {l} >= {cfg.awake_break} min "
                                      f"after only {accrued} sleep minutes")
                    break
        if verdict is None:
            verdict = (False, f"record ended with only {accrued} sleep minutes accrued")
        if trace is not None:
            trace.append(TraceEntry("sleep_onset", start, verdict[0], verdict[1]))
        if verdict[0]:
            return start
    return None


def detect_wake_time(b, cfg, sleep_onset, trace=None):
    """Earliest accepted sleep-to-awake transition after `sleep_onset`.

    A candidate needs `wake_confirm` contiguous awake minutes immediately
    after it and no later sleep run of `reentry_run` minutes or more.
    """
    runs = _runs(b.states)
    # suffix check: does any sleep run of >= reentry_run start at or after run j?
    n = len(runs)
    reentry_after = [False] * (n + 1)
    for j in range(n - 1, -1, -1):
        s, _, l = runs[j]
        reentry_after[j] = reentry_after[j + 1] or (s == 1 and l >= cfg.reentry_run)
    for j in range(n):
        s, start, l = runs[j]
        if s != 0 or start == 0 or start <= sleep_onset:
            continue
        if l < cfg.wake_confirm:
            if trace is not None:
                trace.append(TraceEntry("wake_time", start, False,
                                        f"only {l} contiguous awake minutes "
                                        f"(< {cfg.wake_confirm})"))
            continue
        if reentry_after[j + 1]:
            if trace is not None:
                trace.append(TraceEntry("wake_time", start, False,
                                        f"later sleep run of >= {cfg.reentry_run} min"))
            continue
        if trace is not None:
            trace.append(TraceEntry("wake_time", start, True,
                                    f"{l} contiguous awake minutes, no sleep reentry"))
        return start
    return None


def predict_events(h, cfg=None):
    """Full chain: smooth, binarize, suppress short runs, detect both events."""
    if cfg is None:
        cfg = EventRuleConfig()
    n = len(h)
    eff_width = min(cfg.median_width, n if n % 2 == 1 else n - 1)
    smoothed = smooth_probs(h, eff_width) if n > 1 else h
    b = binarize(smoothed, cfg.threshold)
    b = suppress_short_runs(b, cfg.min_run)
    trace = []
    onset_idx = detect_sleep_time(b, cfg, trace)
    events = SleepEvents(trace=trace)
    if onset_idx is not None:
        events.sleep_onset = h.start + onset_idx * MINUTE_SECONDS
        wake_idx = detect_wake_time(b, cfg, onset_idx, trace)
        if wake_idx is not None:
            events.wake_time = h.start + wake_idx * MINUTE_SECONDS
    return events


def write_events(events, dest, trace_ref=""):
    """Event output rows: kind,timestamp,confidence_trace_ref."""
    import csv
    if isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__"):
        with open(dest, "w", newline="") as fh:
            write_events(events, fh, trace_ref)
            return
    w = csv.writer(dest, lineterminator="\n")
    w.writerow(["kind", "timestamp", "confidence_trace_ref"])
    if events.sleep_onset is not None:
        w.writerow(["sleep_onset", events.sleep_onset, trace_ref])
    if events.wake_time is not None:
        w.writerow(["wake_time", events.wake_time, trace_ref])


def format_trace(trace):
    lines = []
    for t in trace:
        verdict = "accept" if t.accepted else "reject"
        lines.append(f"{t.kind} candidate@{t.candidate}min {verdict}: {t.reason}")
    return "\n".join(lines)
