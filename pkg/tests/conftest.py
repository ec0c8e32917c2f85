import numpy as np
import pytest

from cdvat import embedder


def random_small_config(rng):
    """A small embedder with random contexts, widths and window geometry."""
    n_layers = int(rng.integers(1, 3))
    contexts = []
    for _ in range(n_layers):
        lo, hi = int(rng.integers(-2, 1)), int(rng.integers(0, 3))
        ctx = sorted(set([lo, hi] + ([0] if rng.random() < 0.5 else [])))
        contexts.append(tuple(ctx))
    rf = 1 + sum(c[-1] - c[0] for c in contexts)
    stride = int(rng.integers(1, 3))
    n_place = int(rng.integers(1, 4))
    window = rf + stride * (n_place - 1)
    return embedder.EmbedderConfig(
        input_dim=int(rng.integers(2, 5)),
        layer_contexts=tuple(contexts),
        layer_sizes=tuple(int(rng.integers(3, 9)) for _ in contexts),
        attention_hidden=int(rng.integers(2, 6)),
        embedding_dim=int(rng.integers(2, 6)),
        window_len=window,
        base_shift=3,
        context_stride=stride,
    )


def jittered_parameters(cfg, n_classes, rng):
    """Random parameters with non-zero biases, so ReLU kinks are not hit at the origin."""
    params = embedder.init_parameters(cfg, n_classes, rng)
    for k in params:
        params[k] = params[k] + 0.1 * rng.standard_normal(params[k].shape)
    return params


@pytest.fixture
def small_model():
    rng = np.random.default_rng(7)
    cfg = embedder.EmbedderConfig(input_dim=3, layer_contexts=((-1, 0, 1), (0, 2)), layer_sizes=(6, 5),
                                  attention_hidden=4, embedding_dim=4, window_len=9, base_shift=3,
                                  context_stride=2)
    return cfg, jittered_parameters(cfg, 5, rng), rng


def tiny_experiment(**train_kw):
    """A seconds-scale experiment config: 6 labelled, 6 unlabelled, 4 held-out speakers."""
    from cdvat import experiment
    d = {
        "synth": {"n_speakers_labeled": 6, "n_speakers_unlabeled": 6, "n_speakers_eval": 4,
                  "utterances_per_speaker": 8, "feature_dim": 6, "utterance_len_range": [12, 30], "seed": 1},
        "split": {"n_labeled_speakers": 6, "n_eval_speakers": 4, "validation_fraction": 0.25, "seed": 1},
        "embedder": {"input_dim": 6, "layer_contexts": [[-1, 0, 1], [0]], "layer_sizes": [8, 6],
                     "attention_hidden": 4, "embedding_dim": 4, "window_len": 9, "base_shift": 4,
                     "context_stride": 2},
        "train": {"lr0": 0.05, "max_epochs": 3, "seed": 1,
                  "hp": {"alpha": 1.0, "epsilon": 1.0, "sup_batch": 8, "vat_batch": 16}, **train_kw},
        "perturb": {"n": 10, "K": 2},
    }
    return experiment.config_from_dict(d), d
