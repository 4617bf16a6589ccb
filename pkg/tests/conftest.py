import pytest

import somnoflow as sf


def make_training_windows(n_subjects=3, hours=8.0, first_seed=0, limit=None,
                          balance_seed=0):
    series = [sf.synth_generate(sf.SynthConfig(seed=first_seed + s, hours=hours,
                                               subject_id=f"subject{s}"))
              for s in range(n_subjects)]
    windows = sf.build_training_set(series, context_hours=1, seed=balance_seed)
    if limit:
        windows = windows[:limit]
    return windows


def train_small_model(windows, model_seed=3, n_epochs=6, train_seed=0, config=None):
    stats = sf.fit_normalizer(windows)
    normed = [sf.apply_normalizer(w, stats) for w in windows]
    if config is None:
        config = sf.ModelConfig(seed=model_seed)
    model = sf.build_model(config)
    model.norm_stats = stats
    model, report = sf.train(model, normed, None,
                             sf.TrainingHyper(n_epochs=n_epochs, seed=train_seed))
    return model, report, normed


@pytest.fixture(scope="session")
def small_trained():
    """A quickly trained model shared by inference-side tests."""
    windows = make_training_windows(n_subjects=6, limit=2000)
    model, report, normed = train_small_model(windows, n_epochs=12)
    return model, report, normed
