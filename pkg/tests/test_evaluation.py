import numpy as np
import pytest

from cdvat import evaluation
from cdvat.evaluation import eer, eer_bruteforce, isc, iss, speaker_centroids


def sweep_oracle(scores, labels):
    """Independent EER: FAR/FRR at every candidate threshold, then the FAR = FRR crossing of the polyline."""
    scores, labels = list(map(float, scores)), list(map(bool, labels))
    n_t = sum(labels)
    n_n = len(labels) - n_t
    pts = [(0.0, 1.0)]
    for th in sorted(set(scores), reverse=True):
        fa = sum(1 for s, l in zip(scores, labels) if s >= th and not l) / n_n
        fr = sum(1 for s, l in zip(scores, labels) if s < th and l) / n_t
        pts.append((fa, fr))
    for (fa0, fr0), (fa1, fr1) in zip(pts, pts[1:]):
        if fr1 - fa1 <= 0:
            d0, d1 = fr0 - fa0, fr1 - fa1
            return fa1 if d1 == 0 else fa0 + d0 / (d0 - d1) * (fa1 - fa0)
    raise AssertionError("no crossing")


def test_eer_endpoints():
    assert eer([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])[0] == 0.0
    assert eer([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])[0] == 1.0


def test_eer_interleaved_example():
    scores, labels = [0.9, 0.7, 0.8, 0.1], [1, 1, 0, 0]
    assert eer_bruteforce(scores, labels)[0] == 0.5
    assert eer(scores, labels)[0] == 0.5


def test_eer_needs_both_classes():
    with pytest.raises(ValueError):
        eer([0.1, 0.2], [1, 1])


def test_eer_all_ties_is_chance():
    assert eer([0.5] * 6, [1, 0, 1, 0, 1, 0])[0] == pytest.approx(0.5)


@pytest.mark.parametrize("seed", range(100))
def test_fast_eer_equals_bruteforce(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 1001))
    labels = rng.random(n) < rng.uniform(0.1, 0.9)
    labels[0], labels[1] = True, False
    # coarse rounding on some instances forces ties
    scores = rng.normal(labels * rng.uniform(0, 2), 1.0)
    if seed % 3 == 0:
        scores = np.round(scores, 1)
    fast = eer(scores, labels)
    assert fast == eer_bruteforce(scores, labels)
    assert fast[0] == pytest.approx(sweep_oracle(scores, labels), abs=1e-12)


def test_eer_invariant_to_monotone_transform():
    rng = np.random.default_rng(0)
    labels = rng.random(300) < 0.5
    scores = rng.normal(labels.astype(float), 1.0)
    assert eer(scores, labels)[0] == pytest.approx(eer(np.exp(3 * scores) + 2, labels)[0], abs=1e-12)


# ---------------------------------------------------------------------------
# compactness / separability

def test_isc_orthogonal_pair():
    value = isc({"a": [[1.0, 0.0], [0.0, 1.0]]})
    assert abs(value - 0.5 * (1 - 1 / np.sqrt(2))) <= 1e-9
    assert abs(value - 0.1464) < 1e-4


def test_isc_identical_embeddings_is_zero():
    assert isc({"a": [[0.6, 0.8]] * 3, "b": [[1.0, 0.0]] * 2}) == pytest.approx(0.0, abs=1e-12)


def test_iss_orthogonal_centroids():
    assert abs(iss({"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])}) - 0.5) <= 1e-9
    assert iss({"a": np.array([1.0, 0.0]), "b": np.array([-2.0, 0.0])}) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        iss({"a": np.array([1.0, 0.0])})


def test_isc_invariant_to_speaker_order_and_utterance_duplication():
    rng = np.random.default_rng(1)
    groups = {s: list(rng.standard_normal((4, 3)) + 2.0) for s in "abc"}
    base = isc(groups)
    assert isc(dict(reversed(list(groups.items())))) == pytest.approx(base, abs=1e-12)
    doubled = {s: v + v for s, v in groups.items()}
    assert isc(doubled) == pytest.approx(base, abs=1e-12)
    cents = speaker_centroids(groups)
    assert iss(dict(reversed(list(cents.items())))) == pytest.approx(iss(cents), abs=1e-12)


def test_zero_centroid_is_an_error():
    with pytest.raises(ValueError):
        isc({"a": [[1.0, 0.0], [-1.0, 0.0]]})


# ---------------------------------------------------------------------------
# trials and reports

def test_trial_file_round_trip(tmp_path):
    trials = [("u1", "u2", True), ("u1", "u3", False)]
    path = tmp_path / "t.txt"
    path.write_text(evaluation.format_trials(trials))
    assert evaluation.read_trials(path) == trials
    path.write_text("1 u1\n")
    with pytest.raises(ValueError, match=":1:"):
        evaluation.read_trials(path)


def test_make_trials_is_balanced_and_deterministic():
    from cdvat.dataio import Utterance
    utts = [Utterance(f"{s}{i}", np.zeros((1, 1)), s) for s in "abcd" for i in range(3)]
    trials = evaluation.make_trials(utts, seed=2)
    assert sum(t for *_, t in trials) == 12 == sum(not t for *_, t in trials)
    assert trials == evaluation.make_trials(utts, seed=2)
    spk = {u.id: u.speaker for u in utts}
    assert all((spk[a] == spk[b]) == t for a, b, t in trials)


def test_missing_trial_id_is_named():
    with pytest.raises(KeyError, match="ghost"):
        evaluation.score_trials([("a", "ghost", True)], {"a": np.ones(2)})


def test_scores_are_cosine_similarity():
    emb = {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 2.0]), "c": np.array([-1.0, 0.0])}
    np.testing.assert_allclose(evaluation.score_trials([("a", "b", 0), ("a", "c", 0), ("a", "a", 1)], emb),
                               [0.0, -1.0, 1.0], atol=1e-15)


def test_report_json_has_stable_keys():
    emb = {"a1": np.array([1.0, 0.1]), "a2": np.array([1.0, -0.1]), "b1": np.array([0.1, 1.0]),
           "b2": np.array([-0.1, 1.0])}
    spk = {k: k[0] for k in emb}
    trials = [("a1", "a2", True), ("b1", "b2", True), ("a1", "b1", False), ("a2", "b2", False)]
    rep = evaluation.report_from_embeddings(emb, spk, trials)
    assert rep.eer == 0.0
    import json
    assert {"eer", "isc", "iss", "eer_threshold", "n_trials"} <= set(json.loads(rep.to_json()))
