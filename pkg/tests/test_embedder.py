import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cdvat import embedder
from cdvat.container import FormatError
from cdvat.numerics import DegenerateVectorError, finite_diff_grad, l2_normalize, relative_error

from conftest import jittered_parameters, random_small_config


def test_default_config_geometry():
    cfg = embedder.EmbedderConfig()
    assert cfg.receptive_field == 5
    assert cfg.n_placements == 11


def test_full_size_geometry():
    cfg = embedder.EmbedderConfig.full_scale()
    assert cfg.receptive_field == 15
    assert cfg.n_placements == 34


def test_config_rejects_bad_geometry():
    with pytest.raises(ValueError):
        embedder.EmbedderConfig(window_len=4)
    with pytest.raises(ValueError):
        embedder.EmbedderConfig(window_len=26)
    with pytest.raises(ValueError):
        embedder.EmbedderConfig(embedding_dim=1)


def test_embedding_has_unit_norm(small_model):
    cfg, params, rng = small_model
    for _ in range(20):
        e = embedder.embed_window(rng.standard_normal((cfg.window_len, cfg.input_dim)), params, cfg)
        assert np.linalg.norm(e) == pytest.approx(1.0, abs=1e-6)


def test_wrong_shape_is_an_error(small_model):
    cfg, params, _ = small_model
    with pytest.raises(ValueError):
        embedder.embed_window(np.zeros((cfg.window_len + 1, cfg.input_dim)), params, cfg)


def _degenerate():
    cfg = embedder.EmbedderConfig(input_dim=3, layer_contexts=((0,),), layer_sizes=(3,), attention_hidden=2,
                                  embedding_dim=3, window_len=2, base_shift=1, context_stride=1)
    params = {
        "tdnn0.W": np.eye(3), "tdnn0.b": np.zeros(3),
        "att.V": np.ones((3, 2)), "att.w": np.zeros(2),
        "proj.W": np.eye(3), "proj.b": np.zeros(3),
        "cls.W": np.eye(3),
    }
    return cfg, params


def test_degenerate_config_hand_oracle():
    cfg, params = _degenerate()
    v = np.array([0.5, -2.0, 1.5])
    x = np.stack([v, v])
    np.testing.assert_allclose(embedder.embed_window(x, params, cfg), l2_normalize(np.maximum(v, 0)))


def test_uniform_attention_is_order_invariant():
    cfg, params = _degenerate()
    x = np.array([[1.0, 0.2, 0.0], [0.1, 2.0, 0.3]])
    np.testing.assert_allclose(embedder.embed_window(x, params, cfg), embedder.embed_window(x[::-1], params, cfg))
    # direct evaluation: mean of the two relu'd frames, normalised
    np.testing.assert_allclose(embedder.embed_window(x, params, cfg), l2_normalize(x.mean(axis=0)))


def test_zero_pre_normalisation_vector_is_an_error():
    cfg, params = _degenerate()
    with pytest.raises(DegenerateVectorError):
        embedder.embed_window(-np.ones((2, 3)), params, cfg)


def test_embedding_is_deterministic(small_model):
    cfg, params, rng = small_model
    x = rng.standard_normal((cfg.window_len, cfg.input_dim))
    assert embedder.embed_window(x, params, cfg).tobytes() == embedder.embed_window(x, params, cfg).tobytes()


# ---------------------------------------------------------------------------
# windowing

def test_window_starts_examples():
    cfg = embedder.EmbedderConfig.full_scale()
    assert embedder.window_starts(213, cfg) == ([0], 0, 0)
    assert embedder.window_starts(413, cfg) == ([0, 100, 200], 0, 0)
    assert embedder.window_starts(100, cfg) == ([0], 56, 57)


@given(st.integers(1, 2000))
def test_window_starts_properties(T):
    cfg = embedder.EmbedderConfig.full_scale()
    W = cfg.window_len
    plan = embedder.window_starts(T, cfg)
    if T < W:
        assert plan.starts == [0]
        assert plan.pad_left + plan.pad_right + T == W
        assert plan.pad_right - plan.pad_left in (0, 1)
        return
    assert plan.pad_left == plan.pad_right == 0
    n = math.ceil((T - W) / cfg.base_shift)
    assert len(plan.starts) == n + 1
    assert plan.starts[0] == 0 and plan.starts[-1] == T - W
    shifts = np.diff(plan.starts)
    assert np.all(shifts > 0) if len(shifts) else True
    if len(shifts):
        assert shifts.max() - shifts.min() <= 1
        assert shifts.max() <= cfg.base_shift


def test_extract_windows_replication_padding():
    cfg = embedder.EmbedderConfig(input_dim=1, layer_contexts=((0,),), layer_sizes=(2,), window_len=7,
                                  context_stride=1)
    x = np.arange(1.0, 4.0)[:, None]
    w = embedder.extract_windows(x, cfg)
    np.testing.assert_array_equal(w[0, :, 0], [1, 1, 1, 2, 3, 3, 3])
    x = np.arange(4.0)[:, None]
    np.testing.assert_array_equal(embedder.extract_windows(x, cfg)[0, :, 0], [0, 0, 1, 2, 3, 3, 3])


# ---------------------------------------------------------------------------
# utterance embeddings

def test_utterance_of_one_window_equals_window(small_model):
    cfg, params, rng = small_model
    x = rng.standard_normal((cfg.window_len, cfg.input_dim))
    np.testing.assert_array_equal(embedder.embed_utterance(x, params, cfg), embedder.embed_window(x, params, cfg))


def test_utterance_of_identical_windows(small_model):
    cfg, params, rng = small_model
    frame = rng.standard_normal(cfg.input_dim)
    x = np.tile(frame, (3 * cfg.window_len, 1))
    np.testing.assert_allclose(embedder.embed_utterance(x, params, cfg),
                               embedder.embed_window(x[:cfg.window_len], params, cfg))


def test_utterance_is_unnormalised_average():
    cfg, params = _degenerate()
    # windows [0:2] and [2:4] embed to orthogonal unit vectors
    x = np.array([[1.0, 0, 0], [1.0, 0, 0], [0, 1.0, 0], [0, 1.0, 0]])
    cfg = embedder.EmbedderConfig(**{**cfg.to_dict(), "base_shift": 2})
    assert embedder.window_starts(4, cfg).starts == [0, 2]
    e = embedder.embed_utterance(x, params, cfg)
    np.testing.assert_allclose(e, [0.5, 0.5, 0.0])
    assert np.linalg.norm(e) == pytest.approx(np.sqrt(2) / 2)


# ---------------------------------------------------------------------------
# gradients

def test_zero_upstream_gives_zero_gradients(small_model):
    cfg, params, rng = small_model
    grads, dx = embedder.forward_backward(rng.standard_normal((cfg.window_len, cfg.input_dim)), params, cfg,
                                          np.zeros(cfg.embedding_dim))
    assert not np.any(dx)
    assert not any(np.any(g) for g in grads.values())


def test_upstream_shape_checked(small_model):
    cfg, params, rng = small_model
    with pytest.raises(ValueError):
        embedder.forward_backward(np.zeros((cfg.window_len, cfg.input_dim)), params, cfg, np.zeros(2))


@pytest.mark.parametrize("seed", range(20))
def test_input_and_parameter_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    cfg = random_small_config(rng)
    params = jittered_parameters(cfg, 3, rng)
    x = rng.standard_normal((cfg.window_len, cfg.input_dim))
    g = rng.standard_normal(cfg.embedding_dim)
    grads, dx = embedder.forward_backward(x, params, cfg, g)

    fd = finite_diff_grad(lambda z: g @ embedder.embed_window(z, params, cfg), x, h=1e-6)
    assert relative_error(dx, fd) < 1e-5

    for name in params:
        if name == "cls.W":
            continue

        def f(w, name=name):
            q = dict(params)
            q[name] = w
            return g @ embedder.embed_window(x, q, cfg)

        assert relative_error(grads[name], finite_diff_grad(f, params[name], h=1e-6)) < 1e-5, name


def test_batched_forward_matches_single(small_model):
    cfg, params, rng = small_model
    X = rng.standard_normal((5, cfg.window_len, cfg.input_dim))
    E = embedder.embed_windows(X, params, cfg)
    for i in range(5):
        np.testing.assert_allclose(E[i], embedder.embed_window(X[i], params, cfg), rtol=1e-13)


# ---------------------------------------------------------------------------
# parameter files

def test_parameter_file_round_trip(small_model, tmp_path):
    cfg, params, _ = small_model
    path = tmp_path / "params.bin"
    embedder.save_parameters(params, cfg, path)
    loaded, cfg2 = embedder.load_parameters(path)
    assert cfg2 == cfg
    assert set(loaded) == set(params)
    for k in params:
        assert loaded[k].tobytes() == params[k].tobytes()


def test_parameter_file_corruption(small_model, tmp_path):
    cfg, params, _ = small_model
    data = embedder.parameters_to_bytes(params, cfg)
    with pytest.raises(FormatError):
        embedder.parameters_from_bytes(data[:-3])
    with pytest.raises(FormatError):
        embedder.parameters_from_bytes(b"XXXXXXXX" + data[8:])
