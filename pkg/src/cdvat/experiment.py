"""End-to-end pipeline: synthesise, split, normalise, train in one of three regimes, evaluate.

The three regimes mirror the usual semi-supervised comparison:

* ``supervised``: labelled speakers only, no CD-VAT term;
* ``cdvat``: labelled speakers plus the CD-VAT term over labelled and unlabelled windows;
* ``oracle``: the unlabelled speakers' true labels unsealed and used for plain supervised training.
"""
from dataclasses import dataclass, asdict, field, replace
import json

import numpy as np

from . import dataio, embedder, evaluation, trainer
from .embedder import EmbedderConfig
from .losses import HyperParams
from .perturbation import EmbedderModel, adversarial_reports

MODES = ("supervised", "cdvat", "oracle")


@dataclass(frozen=True)
class SplitConfig:
    n_labeled_speakers: int = 20
    n_eval_speakers: int = 20
    validation_fraction: float = 0.15
    seed: int = 0
    mean_policy: str = "global"


@dataclass(frozen=True)
class EvalConfig:
    trial_seed: int = 0


@dataclass(frozen=True)
class PerturbDemoConfig:
    n: int = 50
    K: int = 2
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    synth: dataio.SynthConfig = field(default_factory=dataio.SynthConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    train: trainer.TrainConfig = field(default_factory=trainer.TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    perturb: PerturbDemoConfig = field(default_factory=PerturbDemoConfig)
    output_dir: str = "cdvat-output"

    def to_dict(self):
        d = {
            "synth": self.synth.to_dict(),
            "split": asdict(self.split),
            "embedder": self.embedder.to_dict(),
            "train": self.train.to_dict(),
            "eval": asdict(self.eval),
            "perturb": asdict(self.perturb),
            "output_dir": self.output_dir,
        }
        return d

    def with_seed(self, seed):
        """Same experiment with every random source re-seeded from ``seed``."""
        return replace(self, synth=replace(self.synth, seed=seed), split=replace(self.split, seed=seed),
                       train=replace(self.train, seed=seed), eval=replace(self.eval, trial_seed=seed))


class ConfigError(ValueError):
    """Invalid configuration; ``path`` is the dotted field name."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


_SECTIONS = {
    "synth": dataio.SynthConfig,
    "split": SplitConfig,
    "embedder": EmbedderConfig,
    "eval": EvalConfig,
    "perturb": PerturbDemoConfig,
}


def _build(cls, values, path):
    if not isinstance(values, dict):
        raise ConfigError(path, "expected a mapping")
    known = set(cls.__dataclass_fields__)
    for key in values:
        if key not in known:
            raise ConfigError(f"{path}.{key}", "unknown field")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        field_name = next((k for k in sorted(values, key=len, reverse=True) if k in msg), None)
        raise ConfigError(f"{path}.{field_name}" if field_name else path, msg) from None


def config_from_dict(d):
    d = dict(d)
    unknown = set(d) - set(_SECTIONS) - {"train", "output_dir"}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    kwargs = {name: _build(cls, d.get(name, {}), name) for name, cls in _SECTIONS.items()}
    train = dict(d.get("train", {}))
    hp = _build(HyperParams, train.pop("hp", {}), "train.hp")
    kwargs["train"] = _build(trainer.TrainConfig, {**train, "hp": hp}, "train")
    if kwargs["split"].mean_policy not in dataio.MEAN_POLICIES:
        raise ConfigError("split.mean_policy", f"must be one of {dataio.MEAN_POLICIES}")
    if kwargs["embedder"].input_dim != kwargs["synth"].feature_dim:
        raise ConfigError("embedder.input_dim", "must equal synth.feature_dim")
    return ExperimentConfig(output_dir=str(d.get("output_dir", "cdvat-output")), **kwargs)


def apply_overrides(d, overrides):
    """``overrides``: iterable of ``dotted.path=value``; values are parsed as JSON when possible."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like path=value")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        keys = path.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(path, "not a section")
        node[keys[-1]] = value
    return d


def load_config(path, overrides=()):
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"invalid JSON: {exc}") from None
    return config_from_dict(apply_overrides(d, overrides))


# ---------------------------------------------------------------------------
# pipeline stages

def prepare(corpus, cfg):
    """Split and normalise. Statistics come from the training-visible utterances only."""
    s = cfg.split
    split = dataio.partition(corpus, s.n_labeled_speakers, s.validation_fraction, s.seed, s.n_eval_speakers)
    stats = dataio.fit_normalization(split.train + split.validation + split.unlabeled, s.mean_policy)
    norm = lambda utts: dataio.apply_normalization(utts, stats)
    split = dataio.CorpusSplit(norm(split.train), norm(split.validation), norm(split.unlabeled),
                               norm(split.evaluation), split.sealed, split.labeled_speakers)
    return split, stats


def mode_setup(split, mode, cfg):
    """Training data, class list and effective train config for a regime."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    tcfg = cfg.train
    if mode == "cdvat":
        data, speakers = trainer.build_train_data(split.train, split.validation, split.unlabeled, cfg.embedder)
    else:
        tcfg = replace(tcfg, hp=replace(tcfg.hp, alpha=0.0))
        train = split.train + (split.unsealed() if mode == "oracle" else [])
        data, speakers = trainer.build_train_data(train, split.validation, [], cfg.embedder,
                                                  sorted({u.speaker for u in train}))
    return data, speakers, tcfg


def init_mode(split, mode, cfg):
    """Fresh ``(state, data, train config)`` for a regime."""
    data, speakers, tcfg = mode_setup(split, mode, cfg)
    params = embedder.init_parameters(cfg.embedder, len(speakers), np.random.default_rng([tcfg.seed, 2]))
    return trainer.init_state(params, tcfg), data, tcfg


def train_mode(split, mode, cfg, log=None):
    state, data, tcfg = init_mode(split, mode, cfg)
    return trainer.train(state, data, tcfg, cfg.embedder, log)


def eval_trials(split, cfg):
    return evaluation.make_trials(split.evaluation, cfg.eval.trial_seed)


def perturbation_demo(params, emb_cfg, windows, hp, K=2, seed=0):
    """Adversarial vs random-direction LCS for each window, with consecutive-iterate dot products."""
    pcfg = replace(hp.perturbation, K=K)
    return adversarial_reports(EmbedderModel(params, emb_cfg), windows, pcfg, np.random.default_rng(seed))


def held_out_windows(utterances, emb_cfg, n, seed=0):
    """``n`` windows, one per utterance, from a seeded shuffle of ``utterances``."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(utterances))[:n]
    return np.stack([trainer.random_window(utterances[i].features, emb_cfg, rng) for i in order])


def run_experiment(cfg, log_factory=None):
    """Synthesise, split, train all three regimes and evaluate. Returns ``(rows, recovery, states)``."""
    corpus = dataio.synth_generate(cfg.synth)
    split, _ = prepare(corpus, cfg)
    trials = eval_trials(split, cfg)
    rows, states = {}, {}
    for mode in MODES:
        log = log_factory(mode) if log_factory else None
        state, _ = train_mode(split, mode, cfg, log)
        rows[mode] = evaluation.evaluate(split.evaluation, state.params, cfg.embedder, trials)
        states[mode] = state
    return rows, eer_recovery(rows), states


def eer_recovery(rows):
    sup, vat, orc = rows["supervised"].eer, rows["cdvat"].eer, rows["oracle"].eer
    if sup == orc:
        return float("nan")
    return (sup - vat) / (sup - orc)


def format_table(rows, recovery):
    lines = ["mode        eer       isc       iss       n_trials"]
    for mode in MODES:
        r = rows[mode]
        lines.append(f"{mode:<11} {r.eer:<9.5f} {r.isc:<9.5f} {r.iss:<9.5f} {r.n_trials}")
    lines.append(f"eer_recovery {recovery:.5f}")
    return "\n".join(lines) + "\n"
