"""Real-time inference: feed a night epoch by epoch through a SleepStream.

Trains a quick model, then replays a fresh night record-by-record exactly as
the `serve` subcommand would receive it over stdin or TCP, printing the wire
frames (`class,...` / `event,...`) as they are emitted, and verifies at the
end that the stream reproduced the batch pipeline bit for bit.

Run:  python3 demos/03_streaming.py
"""

import somnoflow as sf
from somnoflow.sleepnet import TrainingHyper
from somnoflow.stream import SleepStream, batch_emissions


def main():
    train_nights = [sf.synth_generate(sf.SynthConfig(seed=s, hours=8))
                    for s in range(4)]
    windows = sf.build_training_set(train_nights, context_hours=1, seed=0)
    stats = sf.fit_normalizer(windows)
    normed = [sf.apply_normalizer(w, stats) for w in windows]
    model = sf.build_model(sf.ModelConfig(seed=0))
    model.norm_stats = stats
    model, _ = sf.train(model, normed, None, TrainingHyper(n_epochs=8))

    # one wake -> sleep -> wake night, unseen by training
    night = sf.synth_generate(sf.SynthConfig(seed=99, hours=6, mean_sleep_min=240,
                                             single_sleep_period=True))

    stream = SleepStream(model)
    emissions = []
    for i in range(len(night)):
        # full precision so the stream sees exactly what the batch path sees
        line = (f"{night.timestamps[i]},{float(night.hr[i])!r},"
                f"{float(night.br[i])!r},{float(night.hr_conf[i])!r},"
                f"{float(night.movement[i])!r}")
        for em in stream.feed_line(line):
            emissions.append(em)
            if em.kind == "event" or len(emissions) <= 3:
                print(em.format())
    tail, events = stream.finalize()
    emissions.extend(tail)
    for em in tail:
        print(em.format())
    print(f"... {sum(1 for e in emissions if e.kind == 'class')} class frames total")

    batch, _ = batch_emissions(model, night)
    same = sorted(e.format() for e in emissions) == sorted(e.format() for e in batch)
    print(f"stream output identical to batch pipeline: {same}")
    truth = dict(night.transitions)
    if events.sleep_onset is not None:
        print(f"sleep onset off by "
              f"{abs(events.sleep_onset - truth['sleep_onset']) // 60} min")
    if events.wake_time is not None:
        print(f"wake time off by "
              f"{abs(events.wake_time - truth['wake_time']) // 60} min")


if __name__ == "__main__":
    main()
