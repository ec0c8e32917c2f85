"""Synthetic speaker corpora, feature normalisation, speaker-disjoint splits and corpus files.

Corpus file layout (little-endian)::

    b"CDVCORP\\0"  uint32 version
    uint32 F, uint32 n_utterances
    per utterance:
        uint32 id length, id bytes (UTF-8)
        uint8 has_speaker; if 1: uint32 length, speaker bytes (UTF-8)
        uint32 T
        T*F float32 features, row major
"""
from dataclasses import dataclass, asdict, field
import struct
from typing import Optional

import numpy as np

from .container import FormatError, VersionError, atomic_write_bytes


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    speaker: Optional[str] = None

    def __post_init__(self):
        f = np.asarray(self.features)
        if f.ndim != 2 or f.shape[0] < 1:
            raise ValueError(f"utterance {self.id!r}: features must be a non-empty (T, F) matrix")
        if not np.all(np.isfinite(f)):
            raise ValueError(f"utterance {self.id!r}: non-finite features")

    @property
    def n_frames(self):
        return self.features.shape[0]


def check_corpus(corpus):
    ids = [u.id for u in corpus]
    if len(set(ids)) != len(ids):
        raise ValueError("utterance ids are not unique")
    dims = {u.features.shape[1] for u in corpus}
    if len(dims) > 1:
        raise ValueError(f"inconsistent feature dimensions {sorted(dims)}")


def speakers_of(corpus):
    return sorted({u.speaker for u in corpus if u.speaker is not None})


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass(frozen=True)
class SynthConfig:
    n_speakers_labeled: int = 20
    n_speakers_unlabeled: int = 80
    n_speakers_eval: int = 20
    utterances_per_speaker: int = 30
    feature_dim: int = 16
    utterance_len_range: tuple = (30, 80)
    speaker_sep: float = 1.0
    session_noise: float = 0.5
    frame_noise: float = 1.0
    ar_coeff: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "utterance_len_range", tuple(int(v) for v in self.utterance_len_range))
        for name in ("n_speakers_labeled", "n_speakers_unlabeled", "utterances_per_speaker", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_speakers_eval < 0:
            raise ValueError("n_speakers_eval must be >= 0")
        lo, hi = self.utterance_len_range
        if not 1 <= lo <= hi:
            raise ValueError("utterance_len_range must satisfy 1 <= min <= max")
        if not 0.0 <= self.ar_coeff < 1.0:
            raise ValueError("ar_coeff must lie in [0, 1)")
        for name in ("speaker_sep", "session_noise", "frame_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def n_speakers(self):
        return self.n_speakers_labeled + self.n_speakers_unlabeled + self.n_speakers_eval

    def to_dict(self):
        d = asdict(self)
        d["utterance_len_range"] = list(self.utterance_len_range)
        return d


def synth_generate(cfg):
    """Every frame is prototype + session offset + AR(1) noise; stored at float32 precision.

    Speakers are named ``spk0000`` onward, all labelled; ``partition`` decides
    which of them are seen as labelled, unlabelled or held out.
    """
    rng = np.random.default_rng(cfg.seed)
    F = cfg.feature_dim
    lo, hi = cfg.utterance_len_range
    innov = np.sqrt(1.0 - cfg.ar_coeff**2)
    corpus = []
    for s in range(cfg.n_speakers):
        mu = rng.normal(0.0, cfg.speaker_sep, F)
        for u in range(cfg.utterances_per_speaker):
            T = int(rng.integers(lo, hi + 1))
            offset = rng.normal(0.0, cfg.session_noise, F)
            eps = rng.normal(0.0, cfg.frame_noise, (T, F))
            noise = np.empty((T, F))
            # stationary start so every frame has variance frame_noise^2
            noise[0] = eps[0]
            for t in range(1, T):
                noise[t] = cfg.ar_coeff * noise[t - 1] + innov * eps[t]
            x = (mu + offset + noise).astype(np.float32)
            corpus.append(Utterance(f"spk{s:04d}-utt{u:03d}", x, f"spk{s:04d}"))
    return corpus


# ---------------------------------------------------------------------------
# normalisation

MEAN_POLICIES = ("utterance", "global")


@dataclass
class NormStats:
    """``utterance``: each utterance's own mean is removed; ``global``: a corpus mean is."""
    policy: str
    stds: np.ndarray
    means: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.policy not in MEAN_POLICIES:
            raise ValueError(f"unknown mean policy {self.policy!r}")


def _centre(x, stats):
    x = np.asarray(x, dtype=np.float64)
    if stats.policy == "utterance":
        return x - x.mean(axis=0)
    return x - stats.means


def fit_normalization(corpus, policy="utterance"):
    if not corpus:
        raise ValueError("cannot normalise an empty corpus")
    if policy not in MEAN_POLICIES:
        raise ValueError(f"unknown mean policy {policy!r}")
    frames = np.concatenate([np.asarray(u.features, dtype=np.float64) for u in corpus])
    means = frames.mean(axis=0) if policy == "global" else None
    stats = NormStats(policy, np.ones(frames.shape[1]), means)
    centred = np.concatenate([_centre(u.features, stats) for u in corpus])
    stds = np.sqrt(np.mean(centred**2, axis=0))
    if np.any(stds == 0):
        raise ValueError(f"zero global variance in dimensions {np.flatnonzero(stds == 0).tolist()}")
    stats.stds = stds
    return stats


def apply_normalization(corpus, stats):
    return [Utterance(u.id, _centre(u.features, stats) / stats.stds, u.speaker) for u in corpus]


def normalize_features(corpus, policy="utterance"):
    """Centre (per utterance by default) then divide by the global standard deviation.

    Returns ``(normalised corpus, NormStats)``; features come back as float64.
    """
    stats = fit_normalization(corpus, policy)
    return apply_normalization(corpus, stats), stats


STATS_MAGIC = b"CDVNORM\0"
STATS_VERSION = 1


def save_norm_stats(stats, path):
    F = stats.stds.size
    parts = [STATS_MAGIC, struct.pack("<IIB", STATS_VERSION, F, MEAN_POLICIES.index(stats.policy))]
    if stats.policy == "global":
        parts.append(np.asarray(stats.means, dtype="<f8").tobytes())
    parts.append(np.asarray(stats.stds, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_norm_stats(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != STATS_MAGIC:
        raise FormatError("bad magic in normalisation stats", 0)
    if len(data) < 17:
        raise FormatError("truncated normalisation stats header", len(data))
    version, F, marker = struct.unpack_from("<IIB", data, 8)
    if version != STATS_VERSION:
        raise VersionError(f"unsupported stats version {version}", 8)
    if marker >= len(MEAN_POLICIES):
        raise FormatError(f"unknown mean-policy marker {marker}", 16)
    policy = MEAN_POLICIES[marker]
    n = F * (2 if policy == "global" else 1)
    if len(data) != 17 + 8 * n:
        raise FormatError("stats payload has wrong length", len(data))
    values = np.frombuffer(data, dtype="<f8", offset=17).astype(np.float64)
    if policy == "global":
        return NormStats(policy, values[F:], values[:F])
    return NormStats(policy, values)


# ---------------------------------------------------------------------------
# splits

@dataclass
class CorpusSplit:
    train: list
    validation: list
    unlabeled: list
    evaluation: list = field(default_factory=list)
    sealed: dict = field(default_factory=dict)
    labeled_speakers: list = field(default_factory=list)

    @property
    def labeled(self):
        return self.train + self.validation

    def unsealed(self):
        """The unlabeled utterances with their true speakers restored (oracle experiments only)."""
        return [Utterance(u.id, u.features, self.sealed[u.id]) for u in self.unlabeled]


def partition(corpus, n_labeled_speakers, validation_fraction=0.1, seed=0, n_eval_speakers=0):
    """Speaker-disjoint split into labeled (train + validation), unlabeled and held-out evaluation.

    Validation utterances are drawn per labeled speaker so every validation
    speaker is also a training class. Unlabeled utterances lose their speaker
    field; the truth goes to ``sealed``.
    """
    check_corpus(corpus)
    speakers = speakers_of(corpus)
    if n_labeled_speakers < 1 or n_eval_speakers < 0 or n_labeled_speakers + n_eval_speakers >= len(speakers):
        raise ValueError(f"cannot take {n_labeled_speakers} labeled and {n_eval_speakers} evaluation "
                         f"speakers from {len(speakers)} while keeping some unlabeled")
    if not 0.0 <= validation_fraction < 1.0:
        raise ValueError("validation_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    order = [speakers[i] for i in rng.permutation(len(speakers))]
    labeled = sorted(order[:n_labeled_speakers])
    evaluation = set(order[n_labeled_speakers:n_labeled_speakers + n_eval_speakers])
    labeled_set = set(labeled)
    by_speaker = {}
    for u in corpus:
        by_speaker.setdefault(u.speaker, []).append(u)
    train, validation = [], []
    for spk in labeled:
        utts = by_speaker[spk]
        n_val = int(round(validation_fraction * len(utts)))
        n_val = min(n_val, len(utts) - 1)
        picks = set(rng.choice(len(utts), size=n_val, replace=False).tolist()) if n_val else set()
        for i, u in enumerate(utts):
            (validation if i in picks else train).append(u)
    unlabeled, sealed, held_out = [], {}, []
    for u in corpus:
        if u.speaker in labeled_set:
            continue
        if u.speaker in evaluation:
            held_out.append(u)
        else:
            sealed[u.id] = u.speaker
            unlabeled.append(Utterance(u.id, u.features, None))
    return CorpusSplit(train, validation, unlabeled, held_out, sealed, labeled)


# ---------------------------------------------------------------------------
# corpus files

CORPUS_MAGIC = b"CDVCORP\0"
CORPUS_VERSION = 1


def corpus_to_bytes(corpus):
    check_corpus(corpus)
    F = corpus[0].features.shape[1] if corpus else 0
    parts = [CORPUS_MAGIC, struct.pack("<III", CORPUS_VERSION, F, len(corpus))]
    for u in corpus:
        uid = u.id.encode("utf-8")
        parts.append(struct.pack("<I", len(uid)) + uid)
        if u.speaker is None:
            parts.append(b"\0")
        else:
            spk = u.speaker.encode("utf-8")
            parts.append(b"\1" + struct.pack("<I", len(spk)) + spk)
        parts.append(struct.pack("<I", u.features.shape[0]))
        parts.append(np.ascontiguousarray(u.features, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def text(self, what):
        start = self.pos
        raw = self.take(self.u32(what + " length"), what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{what} is not valid UTF-8", start) from None


def corpus_from_bytes(data):
    r = _Reader(data)
    if r.take(8, "magic") != CORPUS_MAGIC:
        raise FormatError("bad corpus magic", 0)
    version = r.u32("version")
    if version != CORPUS_VERSION:
        raise VersionError(f"unsupported corpus version {version}", 8)
    F = r.u32("feature dimension")
    n = r.u32("utterance count")
    corpus = []
    for _ in range(n):
        start = r.pos
        uid = r.text("utterance id")
        flag = r.take(1, "speaker flag")[0]
        if flag not in (0, 1):
            raise FormatError(f"invalid speaker flag {flag}", r.pos - 1)
        speaker = r.text("speaker id") if flag else None
        T = r.u32("frame count")
        if T < 1:
            raise FormatError("utterance with zero frames", r.pos - 4)
        feats = np.frombuffer(r.take(4 * T * F, "features"), dtype="<f4").reshape(T, F).astype(np.float32)
        try:
            corpus.append(Utterance(uid, feats, speaker))
        except ValueError as exc:
            raise FormatError(str(exc), start) from None
    if r.pos != len(data):
        raise FormatError("trailing bytes after last utterance", r.pos)
    try:
        check_corpus(corpus)
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    return corpus


def save_corpus(corpus, path):
    """Write ``corpus``. Features are stored as float32, so float64 data is rounded."""
    atomic_write_bytes(path, corpus_to_bytes(corpus))


def load_corpus(path):
    with open(path, "rb") as fh:
        return corpus_from_bytes(fh.read())
