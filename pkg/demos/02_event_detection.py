"""Turn a per-minute probability sequence into sleep-onset / wake-up times.

Shows the rule engine stage by stage on a hand-built noisy hypnogram: median
smoothing, thresholding, short-run suppression, then the 45/10/15-minute
confirmation rules, with the decision trace printed at the end.

Run:  python3 demos/02_event_detection.py
"""

import numpy as np

from somnoflow.events import (EventRuleConfig, Hypnogram, binarize,
                              format_trace, predict_events, smooth_probs,
                              suppress_short_runs)


def main():
    # A synthetic 6-hour night: awake for an hour, asleep for four, awake after,
    # with some single-minute flickers the pipeline should ignore.
    rng = np.random.default_rng(0)
    probs = np.full(360, 0.15)
    probs[60:300] = 0.85
    flicker = rng.choice(360, size=12, replace=False)
    probs[flicker] = 1.0 - probs[flicker]
    hyp = Hypnogram(start=22 * 3600, probs=probs)  # night starts at 22:00

    cfg = EventRuleConfig()  # threshold 0.5, 45/10/15-minute rules
    raw = binarize(hyp, cfg.threshold)
    smoothed = smooth_probs(hyp, cfg.median_width)
    cleaned = suppress_short_runs(binarize(smoothed, cfg.threshold), cfg.min_run)
    print(f"{int(np.sum(raw.states != cleaned.states))} flicker minutes removed "
          f"by smoothing + run suppression")

    events = predict_events(hyp, cfg)

    def clock(ts):
        return f"{ts // 3600 % 24:02d}:{ts % 3600 // 60:02d}"

    print(f"sleep onset: {clock(events.sleep_onset)} (truth 23:00)")
    print(f"wake time:   {clock(events.wake_time)} (truth 03:00)")
    print("\ndecision trace:")
    print(format_trace(events.trace))


if __name__ == "__main__":
    main()
