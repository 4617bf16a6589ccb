"""Literal, loop-based reference implementations of the event rules.

These mirror the rule statements one condition at a time, with no run-length
encoding or precomputation, and exist purely as an independent oracle for the
optimized engine in `events.py`. Keep them dumb.
"""

from __future__ import annotations


def ref_detect_sleep_time(states, sleep_confirm, awake_break):
    """Scan every awake-to-sleep transition in order; accept the first whose
    forward scan reaches `sleep_confirm` cumulative sleep minutes before any
    `awake_break`-minute contiguous awake stretch. Undecided at end = reject."""
    n = len(states)
    for c in range(n):
        if states[c] != 1:
            continue
        if c > 0 and states[c - 1] != 0:
            continue
        accrued = 0
        awake_run = 0
        accepted = False
        for i in range(c, n):
            if states[i] == 1:
                accrued += 1
                awake_run = 0
                if accrued >= sleep_confirm:
                    accepted = True
                    break
            else:
                awake_run += 1
                if awake_run >= awake_break:
                    break
        if accepted:
            return c
    return None


def ref_detect_wake_time(states, sleep_onset, wake_confirm, reentry_run):
    """Earliest sleep-to-awake transition after `sleep_onset` followed
    immediately by >= wake_confirm contiguous awake minutes, with no sleep run
    of >= reentry_run minutes anywhere later."""
    n = len(states)
    for c in range(sleep_onset + 1, n):
        if states[c] != 0 or states[c - 1] != 1:
            continue
        awake = 0
        i = c
        while i < n and states[i] == 0:
            awake += 1
            i += 1
        if awake < wake_confirm:
            continue
        # i is the first minute after the awake stretch; look for sleep reentry
        reentry = False
        run = 0
        for j in range(i, n):
            if states[j] == 1:
                run += 1
                if run >= reentry_run:
                    reentry = True
                    break
            else:
                run = 0
        if not reentry:
            return c
    return None


def ref_detect_wake_time_literal_paper(states, sleep_onset, wake_confirm):
    """The rule text as literally written: at least `wake_confirm` contiguous
    awake minutes somewhere before the candidate and zero awake minutes after
    it. Kept only for comparison; not used by the pipeline."""
    n = len(states)
    for c in range(sleep_onset + 1, n):
        if states[c] != 0 or states[c - 1] != 1:
            continue
        run = 0
        seen_before = False
        for j in range(c):
            if states[j] == 0:
                run += 1
                if run >= wake_confirm:
                    seen_before = True
                    break
            else:
                run = 0
        if not seen_before:
            continue
        if all(states[j] != 0 for j in range(c + 1, n)):
            return c
    return None


def ref_suppress_short_runs(states, min_run):
    """Flip the leftmost interior run shorter than min_run; repeat to fixpoint."""
    states = list(states)
    while True:
        runs = []
        for i, s in enumerate(states):
            if runs and runs[-1][0] == s:
                runs[-1][2] += 1
            else:
                runs.append([s, i, 1])
        for idx in range(1, len(runs) - 1):
            s, start, length = runs[idx]
            if length < min_run:
                for i in range(start, start + length):
                    states[i] = 1 - s
                break
        else:
            return states
