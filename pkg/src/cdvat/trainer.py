"""SGD with momentum and weight decay, NewBob scheduling, and the supervised + CD-VAT batch regime."""
from dataclasses import dataclass, asdict, field
import json
import math
import time

import numpy as np

from . import embedder
from .container import FormatError, atomic_write_bytes, pack, unpack
from .losses import HyperParams, combined_objective, supervised_loss
from .numerics import DegenerateVectorError


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    newbob_threshold: float = 0.001
    newbob_factor: float = 0.5
    max_epochs: int = 40
    hp: HyperParams = field(default_factory=HyperParams)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.hp, dict):
            object.__setattr__(self, "hp", HyperParams(**self.hp))
        if not self.lr0 > 0:
            raise ValueError("lr0 must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 < self.newbob_factor < 1.0:
            raise ValueError("newbob_factor must lie in (0, 1)")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainState:
    params: dict
    velocity: dict
    lr: float
    epoch: int = 0
    step: int = 0
    best_validation: float = math.inf
    decaying: bool = False
    stopped: bool = False
    rng: np.random.Generator = field(default_factory=np.random.default_rng)


def init_state(params, cfg):
    return TrainState(params=params,
                      velocity={k: np.zeros_like(v) for k, v in params.items()},
                      lr=cfg.lr0,
                      rng=np.random.default_rng([cfg.seed, 1]))


class DivergenceError(FloatingPointError):
    pass


def apply_update(state, grads, cfg):
    """v <- momentum v - lr (g + weight_decay theta);  theta <- theta + v."""
    for k, theta in state.params.items():
        v = state.velocity[k]
        v *= cfg.momentum
        v -= state.lr * (grads[k] + cfg.weight_decay * theta)
        theta += v


def train_step(state, sup_X, labels, vat_X, cfg, emb_cfg, perturber=None):
    """One update on the combined objective; perturbations use the pre-update parameters."""
    try:
        breakdown, grads, lcs_values = combined_objective(sup_X, labels, vat_X, state.params, emb_cfg,
                                                          cfg.hp, state.rng, perturber)
    except (FloatingPointError, DegenerateVectorError) as exc:
        raise DivergenceError(f"step {state.step}: {exc}") from None
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"step {state.step}: gradient of {k} is not finite "
                                  f"(L_sup={breakdown.supervised}, R_cdvat={breakdown.cdvat})")
    apply_update(state, grads, cfg)
    state.step += 1
    return state, breakdown, lcs_values


def newbob_update(state, validation_loss, cfg):
    """Hold the rate until the relative gain drops below the threshold, then halve every epoch
    until the gain drops below it again, at which point training stops."""
    if not math.isfinite(validation_loss):
        raise DivergenceError("validation loss is not finite")
    if math.isfinite(state.best_validation):
        gain = (state.best_validation - validation_loss) / abs(state.best_validation)
    else:
        gain = math.inf
    if state.decaying:
        if gain < cfg.newbob_threshold:
            state.stopped = True
        else:
            state.lr *= cfg.newbob_factor
    elif gain < cfg.newbob_threshold:
        state.decaying = True
        state.lr *= cfg.newbob_factor
    state.best_validation = min(state.best_validation, validation_loss)
    return state


# ---------------------------------------------------------------------------
# data plumbing

def random_window(x, emb_cfg, rng):
    """A uniformly placed window of one utterance (centred and padded when too short)."""
    T = x.shape[0]
    if T <= emb_cfg.window_len:
        return embedder.window_at(x, 0, emb_cfg)
    start = int(rng.integers(0, T - emb_cfg.window_len + 1))
    return np.asarray(x[start:start + emb_cfg.window_len], dtype=np.float64)


def validation_windows(utterances, label_of, emb_cfg):
    X, y = [], []
    for u in utterances:
        W = embedder.extract_windows(u.features, emb_cfg)
        X.append(W)
        y.extend([label_of[u.speaker]] * len(W))
    return np.concatenate(X).astype(np.float64), np.array(y)


@dataclass
class TrainData:
    """Training view: labelled utterances with class indices, plus the CD-VAT pool."""
    labeled: list
    labels: np.ndarray
    vat_pool: list
    val_X: np.ndarray = None
    val_y: np.ndarray = None


def build_train_data(train, validation, unlabeled, emb_cfg, speakers=None):
    speakers = speakers or sorted({u.speaker for u in train})
    label_of = {s: i for i, s in enumerate(speakers)}
    labels = np.array([label_of[u.speaker] for u in train])
    data = TrainData(list(train), labels, list(train) + list(unlabeled))
    if validation:
        data.val_X, data.val_y = validation_windows(validation, label_of, emb_cfg)
    return data, speakers


def n_steps_per_epoch(n_labeled, sup_batch):
    return -(-n_labeled // sup_batch)


def run_epoch(state, data, cfg, emb_cfg, log=None, perturber=None):
    """One pass over the labelled utterances (shuffled with the epoch folded into the seed).

    Each supervised batch is paired with ``vat_batch`` windows drawn uniformly
    from labelled and unlabelled utterances. Returns ``(state, summary)``.
    """
    hp = cfg.hp
    order = np.random.default_rng([cfg.seed, 0, state.epoch]).permutation(len(data.labeled))
    sums = {"L_sup": 0.0, "R_cdvat": 0.0, "combined": 0.0}
    n_steps = 0
    for b in range(0, len(order), hp.sup_batch):
        idx = order[b:b + hp.sup_batch]
        sup_X = np.stack([random_window(data.labeled[i].features, emb_cfg, state.rng) for i in idx])
        vat_X = None
        if hp.alpha > 0 and data.vat_pool:
            picks = state.rng.integers(0, len(data.vat_pool), size=hp.vat_batch)
            vat_X = np.stack([random_window(data.vat_pool[i].features, emb_cfg, state.rng) for i in picks])
        state, br, _ = train_step(state, sup_X, data.labels[idx], vat_X, cfg, emb_cfg, perturber)
        n_steps += 1
        for k, v in br.to_dict().items():
            if k in sums:
                sums[k] += v
        if log is not None:
            log({"kind": "step", "epoch": state.epoch, "step": state.step, "lr": state.lr, **br.to_dict()})
    summary = {k: v / n_steps for k, v in sums.items()}
    summary["steps"] = n_steps
    if data.val_X is not None and len(data.val_X):
        summary["validation_loss"] = supervised_loss(data.val_X, data.val_y, state.params, emb_cfg,
                                                     hp.logit_scale)
    summary["epoch"] = state.epoch
    summary["lr"] = state.lr
    state.epoch += 1
    return state, summary


def train(state, data, cfg, emb_cfg, log=None, perturber=None):
    """Epochs until NewBob stops or ``max_epochs``; returns ``(state, epoch summaries)``."""
    history = []
    while state.epoch < cfg.max_epochs and not state.stopped:
        state, summary = run_epoch(state, data, cfg, emb_cfg, log, perturber)
        if "validation_loss" in summary:
            newbob_update(state, summary["validation_loss"], cfg)
        summary["next_lr"] = state.lr
        if log is not None:
            log({"kind": "epoch", **summary})
        history.append(summary)
    return state, history


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"CDVATCKP"
CKPT_VERSION = 1


def checkpoint_bytes(state, emb_cfg, train_cfg=None):
    meta = {
        "embedder": emb_cfg.to_dict(),
        "train": train_cfg.to_dict() if train_cfg is not None else None,
        "lr": state.lr, "epoch": state.epoch, "step": state.step,
        "best_validation": state.best_validation if math.isfinite(state.best_validation) else None,
        "decaying": state.decaying, "stopped": state.stopped,
        "rng": state.rng.bit_generator.state,
    }
    arrays = {f"param/{k}": v for k, v in sorted(state.params.items())}
    arrays.update({f"velocity/{k}": v for k, v in sorted(state.velocity.items())})
    return pack(CKPT_MAGIC, CKPT_VERSION, meta, arrays)


def checkpoint(state, path, emb_cfg, train_cfg=None):
    atomic_write_bytes(path, checkpoint_bytes(state, emb_cfg, train_cfg))


def restore_bytes(data, emb_cfg=None):
    """Rebuild ``(state, embedder config, train config dict)``; raises on a config mismatch."""
    meta, arrays = unpack(data, CKPT_MAGIC, CKPT_VERSION)
    try:
        stored_cfg = embedder.EmbedderConfig.from_dict(meta["embedder"])
        params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
        velocity = {k[9:]: v for k, v in arrays.items() if k.startswith("velocity/")}
        embedder.check_parameters(params, stored_cfg)
        if set(velocity) != set(params) or any(velocity[k].shape != params[k].shape for k in params):
            raise ValueError("velocity does not match parameters")
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        best = meta["best_validation"]
        state = TrainState(params=params, velocity=velocity, lr=float(meta["lr"]), epoch=int(meta["epoch"]),
                           step=int(meta["step"]), best_validation=math.inf if best is None else float(best),
                           decaying=bool(meta["decaying"]), stopped=bool(meta["stopped"]), rng=rng)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"inconsistent checkpoint: {exc}") from None
    if emb_cfg is not None and emb_cfg != stored_cfg:
        raise ValueError(f"checkpoint embedder config {stored_cfg} does not match {emb_cfg}")
    return state, stored_cfg, meta.get("train")


def restore(path, emb_cfg=None):
    with open(path, "rb") as fh:
        return restore_bytes(fh.read(), emb_cfg)


def jsonl_logger(fh, timing_fh=None):
    """One JSON record per line. Wall-clock stamps go to ``timing_fh`` so ``fh`` stays reproducible."""
    def log(record):
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        if timing_fh is not None:
            stamp = {k: record[k] for k in ("kind", "epoch", "step") if k in record}
            stamp["timestamp"] = time.time()
            timing_fh.write(json.dumps(stamp, sort_keys=True) + "\n")
    return log
