"""Verification scoring, EER, and the intra-/inter-speaker cosine metrics.

Scores are cosine similarities (higher means same speaker). This is a
decreasing affine map of the cosine distance, so the EER is unchanged.
"""
from dataclasses import dataclass, asdict
import itertools
import json

import numpy as np

from . import embedder
from .numerics import DegenerateVectorError, cosine_distance, cosine_distance_rows


@dataclass
class EvalReport:
    eer: float
    eer_threshold: float
    isc: float
    iss: float
    n_trials: int

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps({"score": "cosine_similarity", **self.to_dict()}, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# trials

def read_trials(path):
    """Trial file: one ``flag idA idB`` per line, flag 1 for same speaker."""
    trials = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: expected 'flag idA idB', got {line.strip()!r}")
            trials.append((parts[1], parts[2], parts[0] == "1"))
    return trials


def format_trials(trials):
    return "".join(f"{int(bool(t))} {a} {b}\n" for a, b, t in trials)


def make_trials(utterances, seed=0):
    """All same-speaker pairs plus an equal number of random cross-speaker pairs."""
    by_speaker = {}
    for u in utterances:
        by_speaker.setdefault(u.speaker, []).append(u.id)
    if len(by_speaker) < 2:
        raise ValueError("need at least two speakers to build a trial list")
    targets = [(a, b, True) for ids in by_speaker.values() for a, b in itertools.combinations(ids, 2)]
    if not targets:
        raise ValueError("no speaker has two utterances")
    ids = [u.id for u in utterances]
    spk = {u.id: u.speaker for u in utterances}
    rng = np.random.default_rng(seed)
    seen = set()
    nontargets = []
    n_possible = len(ids) * (len(ids) - 1) // 2 - len(targets)
    while len(nontargets) < min(len(targets), n_possible):
        i, j = sorted(rng.choice(len(ids), size=2, replace=False).tolist())
        if spk[ids[i]] == spk[ids[j]] or (i, j) in seen:
            continue
        seen.add((i, j))
        nontargets.append((ids[i], ids[j], False))
    return targets + nontargets


def score_trials(trials, embeddings):
    """Cosine similarity for every trial; ``embeddings`` maps id -> vector."""
    for a, b, _ in trials:
        for uid in (a, b):
            if uid not in embeddings:
                raise KeyError(f"trial references unknown utterance id {uid!r}")
    A = np.array([embeddings[a] for a, _, _ in trials], dtype=np.float64)
    B = np.array([embeddings[b] for _, b, _ in trials], dtype=np.float64)
    return 1.0 - 2.0 * cosine_distance_rows(A, B)


# ---------------------------------------------------------------------------
# EER

def _check_labels(labels):
    labels = np.asarray(labels, dtype=bool)
    n_t = int(labels.sum())
    if n_t == 0 or n_t == labels.size:
        raise ValueError("EER needs at least one target and one non-target trial")
    return labels, n_t, labels.size - n_t


def _crossing(far, frr, thresholds):
    """First ROC vertex with FAR >= FRR; interpolate linearly from the previous vertex.

    ``thresholds[k]`` is the acceptance threshold of vertex k. Between two
    vertices the threshold is the midpoint of their scores.
    """
    diff = frr - far
    k = int(np.argmax(diff <= 0))
    if diff[k] == 0:
        return float(far[k]), float(thresholds[k])
    d0, d1 = diff[k - 1], diff[k]
    t = d0 / (d0 - d1)
    eer = far[k - 1] + t * (far[k] - far[k - 1])
    return float(eer), float(0.5 * (thresholds[k - 1] + thresholds[k]))


def eer(scores, labels):
    """Equal error rate and its threshold. Trials with score >= threshold are accepted.

    The ROC is traced over every distinct score (plus "accept nothing"); the
    EER is where the piecewise-linear curve meets FAR = FRR.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels, n_t, n_n = _check_labels(labels)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    lab = labels[order]
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]
    tp = np.cumsum(lab)[last]
    fp = np.cumsum(~lab)[last]
    far = np.r_[0, fp] / n_n
    frr = np.r_[n_t, n_t - tp] / n_t
    thresholds = np.r_[s[0], s[last]]
    return _crossing(far, frr, thresholds)


def eer_bruteforce(scores, labels):
    """Reference EER: counts errors separately at every distinct threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels, n_t, n_n = _check_labels(labels)
    levels = sorted(set(scores.tolist()), reverse=True)
    far = [0.0]
    frr = [1.0]
    thresholds = [levels[0]]
    for th in levels:
        false_acc = sum(1 for sc, lb in zip(scores, labels) if not lb and sc >= th)
        false_rej = sum(1 for sc, lb in zip(scores, labels) if lb and sc < th)
        far.append(false_acc / n_n)
        frr.append(false_rej / n_t)
        thresholds.append(th)
    return _crossing(np.array(far), np.array(frr), np.array(thresholds))


# ---------------------------------------------------------------------------
# compactness / separability

def speaker_centroids(groups):
    cents = {}
    for spk, embs in groups.items():
        embs = np.asarray(embs, dtype=np.float64)
        if embs.ndim != 2 or len(embs) == 0:
            raise ValueError(f"speaker {spk!r} has no embeddings")
        c = embs.mean(axis=0)
        if np.linalg.norm(c) == 0:
            raise DegenerateVectorError(f"speaker {spk!r} has a zero-norm centroid")
        cents[spk] = c
    return cents


def isc(groups):
    """Mean over speakers of the mean cosine distance from each utterance to its speaker centroid."""
    cents = speaker_centroids(groups)
    per_speaker = []
    for spk in sorted(groups):
        embs = np.asarray(groups[spk], dtype=np.float64)
        per_speaker.append(cosine_distance_rows(embs, np.broadcast_to(cents[spk], embs.shape)).mean())
    return float(np.mean(per_speaker))


def iss(centroids):
    """Mean cosine distance over all unordered pairs of speaker centroids."""
    keys = sorted(centroids)
    if len(keys) < 2:
        raise ValueError("ISS needs at least two speakers")
    return float(np.mean([cosine_distance(centroids[a], centroids[b])
                          for a, b in itertools.combinations(keys, 2)]))


def report_from_embeddings(embeddings, speakers, trials):
    """``embeddings``: id -> vector, ``speakers``: id -> speaker."""
    scores = score_trials(trials, embeddings)
    value, threshold = eer(scores, [t for _, _, t in trials])
    groups = {}
    for uid in sorted(embeddings):
        if speakers.get(uid) is not None:
            groups.setdefault(speakers[uid], []).append(embeddings[uid])
    return EvalReport(value, threshold, isc(groups), iss(speaker_centroids(groups)), len(trials))


def embed_corpus(utterances, params, cfg):
    return {u.id: embedder.embed_utterance(u.features, params, cfg) for u in utterances}


def evaluate(utterances, params, cfg, trials):
    """Embed every utterance once and compute EER, ISC and ISS from those embeddings."""
    embeddings = embed_corpus(utterances, params, cfg)
    return report_from_embeddings(embeddings, {u.id: u.speaker for u in utterances}, trials)
