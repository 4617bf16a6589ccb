"""Adapt a trained model to a new cohort by retraining only the trunk.

A base model is trained on subjects with ordinary physiology, then applied to
a cohort whose sleeping and waking vitals are inverted relative to the
training population. Fine-tuning retrains only the small fully connected
trunk after the head concatenation; every head parameter (convolutions,
batchnorm statistics, intermediate FC stacks) stays bit-identical.

Run:  python3 demos/04_transfer_learning.py
"""

import numpy as np

import somnoflow as sf
from somnoflow.sleepnet import TrainingHyper, finetune_transfer


def accuracy(model, windows):
    x = np.stack([sf.apply_normalizer(w, model.norm_stats).values for w in windows])
    y = np.array([w.label for w in windows], dtype=float)
    p, _ = model.forward_batch(x, train=False)
    return float(np.mean((p >= 0.5) == y))


def main():
    base_nights = [sf.synth_generate(sf.SynthConfig(seed=s, hours=8))
                   for s in range(4)]
    windows = sf.build_training_set(base_nights, context_hours=1, seed=0)
    stats = sf.fit_normalizer(windows)
    normed = [sf.apply_normalizer(w, stats) for w in windows]
    model = sf.build_model(sf.ModelConfig(seed=0))
    model.norm_stats = stats
    model, _ = sf.train(model, normed, None, TrainingHyper(n_epochs=8))

    # cohort with inverted state-conditional vitals
    swapped = dict(
        sleep_means={"hr": 72.0, "br": 16.0, "hr_conf": 0.75, "movement": 0.6},
        sleep_stds={"hr": 8.0, "br": 2.5, "hr_conf": 0.08, "movement": 0.3},
        wake_means={"hr": 58.0, "br": 13.0, "hr_conf": 0.92, "movement": 0.05},
        wake_stds={"hr": 4.0, "br": 1.5, "hr_conf": 0.03, "movement": 0.05})
    cohort = [sf.synth_generate(sf.SynthConfig(seed=100 + s, hours=8, **swapped))
              for s in range(3)]
    cohort_train = sf.build_training_set(cohort[:2], context_hours=1, seed=0)
    cohort_train = [sf.apply_normalizer(w, model.norm_stats) for w in cohort_train]
    cohort_test = sf.build_training_set(cohort[2:], context_hours=1, seed=0)

    before = accuracy(model, cohort_test)
    head_digest = {n: a.copy() for n, a in model.named_tensors()
                   if not n.startswith("trunk.")}
    finetune_transfer(model, cohort_train, TrainingHyper(n_epochs=20, lr=0.05))
    after = accuracy(model, cohort_test)

    unchanged = all(np.array_equal(a, dict(model.named_tensors())[n])
                    for n, a in head_digest.items())
    print(f"cohort accuracy before fine-tune: {before * 100:.1f}%")
    print(f"cohort accuracy after fine-tune:  {after * 100:.1f}%")
    print(f"all head parameters bit-identical: {unchanged}")


if __name__ == "__main__":
    main()
