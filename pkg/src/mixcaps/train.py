"""Adam training loop, metrics, bootstrap evaluation and the two desk experiments."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable

import numpy as np

from mixcaps import tensor as T
from mixcaps.capsule import margin_loss, one_hot
from mixcaps.checkpoint import ModelCheckpoint
from mixcaps.data import Dataset, add_noise
from mixcaps.errors import (
    ConfigError,
    ContractError,
    MissingClassError,
    NumericError,
    TrainingDivergedError,
)
from mixcaps.gate import MixCaps
from mixcaps.presets import PRESETS, build_preset

logger = logging.getLogger(__name__)

BOOTSTRAP_DEFAULTS = {"paper": 200, "desk": 20, "tiny": 2}


@dataclass
class TrainConfig:
    preset: str = "desk"
    model: str = "mixcaps"
    num_experts: int = 2
    side_features: bool = False
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    m_plus: float = 0.9
    m_minus: float = 0.1
    lam: float = 0.5
    seed: int = 0
    bootstrap_iterations: int | None = None
    sample_fraction: float = 0.8
    validation_fraction: float = 0.2
    select_best: bool = True

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.model not in ("mixcaps", "single"):
            raise ConfigError(f"model must be 'mixcaps' or 'single', got {self.model!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        for name in ("sample_fraction", "validation_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.bootstrap_iterations is None:
            self.bootstrap_iterations = BOOTSTRAP_DEFAULTS.get(self.preset, 20)
        if self.bootstrap_iterations < 1:
            raise ConfigError("bootstrap_iterations must be >= 1")

    @classmethod
    def from_mapping(cls, mapping: dict) -> "TrainConfig":
        """Build from string values (config files, CLI flags); unknown keys are errors."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(key, raw, types[key])
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)

    def margins(self) -> dict:
        return {"m_plus": self.m_plus, "m_minus": self.m_minus, "lam": self.lam}


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        return raw
    typ = str(typ)
    try:
        if "bool" in typ:
            low = raw.strip().lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return low in ("1", "true", "yes")
        if "int" in typ:
            return None if raw.strip().lower() == "none" else int(raw)
        if "float" in typ:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None
    return raw.strip()


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


class Adam:
    def __init__(self, params: dict[str, T.Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# model evaluation helpers -------------------------------------------------

def _side(model: MixCaps, ds: Dataset):
    return ds.side_features() if model.experts[0].config.side_feature_len else None


def predict(model: MixCaps, patches, side=None, batch_size: int = 64, with_gate: bool = False):
    """Blended outputs ``(N, 2)`` (and gate weights when requested), no tape."""
    outs, gates = [], []
    for i in range(0, len(patches), batch_size):
        sl = slice(i, i + batch_size)
        res = model.forward(patches[sl], None if side is None else side[sl])
        outs.append(res.o.data)
        if with_gate and res.g is not None:
            gates.append(res.g.data)
    o = np.concatenate(outs) if outs else np.zeros((0, 2))
    if with_gate:
        return o, (np.concatenate(gates) if gates else None)
    return o


def malignancy_score(o) -> np.ndarray:
    """``o1 / (o0 + o1)``; 0.5 when both lengths vanish."""
    o = np.asarray(o)
    tot = o[..., 0] + o[..., 1]
    return np.where(tot > 0, o[..., 1] / np.where(tot > 0, tot, 1.0), 0.5)


# metrics -------------------------------------------------------------------

def _require_both_classes(labels):
    labels = np.asarray(labels)
    if not np.any(labels == 1):
        raise MissingClassError("evaluation set has no malignant (label 1) samples")
    if not np.any(labels == 0):
        raise MissingClassError("evaluation set has no benign (label 0) samples")


def roc_curve(scores, labels):
    """ROC points for the rule ``score >= threshold``, thresholds descending.

    Returns ``(fpr, tpr, thresholds)``; the first point is ``(0, 0)`` at
    threshold ``+inf``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _require_both_classes(labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y == 1)[distinct]
    fp = np.cumsum(y == 0)[distinct]
    P, N = tp[-1], fp[-1]
    tpr = np.r_[0.0, tp / P]
    fpr = np.r_[0.0, fp / N]
    thr = np.r_[np.inf, s[distinct]]
    return fpr, tpr, thr


def auc_score(scores, labels) -> float:
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Accuracy read off the ROC point for ``score >= threshold``."""
    fpr, tpr, thr = roc_curve(scores, labels)
    labels = np.asarray(labels)
    P, N = np.sum(labels == 1), np.sum(labels == 0)
    k = np.nonzero(thr >= threshold)[0][-1]
    return float((tpr[k] * P + (1.0 - fpr[k]) * N) / (P + N))


def binary_metrics(scores, labels, threshold: float = 0.5) -> dict[str, float]:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    _require_both_classes(labels)
    pred = scores >= threshold
    pos, neg = labels == 1, labels == 0
    return {
        "accuracy": float(np.mean(pred == pos)),
        "sensitivity": float(np.sum(pred & pos) / np.sum(pos)),
        "specificity": float(np.sum(~pred & neg) / np.sum(neg)),
        "auc": auc_score(scores, labels),
    }


METRICS = ("accuracy", "sensitivity", "specificity", "auc")


@dataclass
class MetricsReport:
    accuracy: float
    sensitivity: float
    specificity: float
    auc: float
    ci95: dict[str, tuple[float, float]] = field(default_factory=dict)
    raw: dict[str, list[float]] = field(default_factory=dict)
    n: int = 0

    @classmethod
    def single(cls, values: dict[str, float], n: int) -> "MetricsReport":
        return cls(**values, ci95={k: (values[k], values[k]) for k in METRICS},
                   raw={k: [values[k]] for k in METRICS}, n=n)

    @classmethod
    def from_iterations(cls, per_iter: list[dict[str, float]], n: int) -> "MetricsReport":
        raw = {k: [it[k] for it in per_iter] for k in METRICS}
        point = {k: float(np.median(raw[k])) for k in METRICS}
        ci = {k: tuple(float(x) for x in np.percentile(raw[k], [2.5, 97.5])) for k in METRICS}
        return cls(**point, ci95=ci, raw=raw, n=n)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ci95"] = {k: list(v) for k, v in self.ci95.items()}
        return d


def evaluate(model, dataset: Dataset, noise_std: float = 0.0, noise_seed: int = 0,
             threshold: float = 0.5) -> MetricsReport:
    """Single-split metrics of ``model`` (or a checkpoint) on ``dataset``."""
    model = getattr(model, "model", model)
    _require_both_classes(dataset.labels)
    patches = dataset.patches
    if noise_std:
        patches = add_noise(patches, noise_std, np.random.default_rng(noise_seed))
    o = predict(model, patches, _side(model, dataset))
    return MetricsReport.single(binary_metrics(malignancy_score(o), dataset.labels, threshold), len(dataset))


# training --------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    log: list[dict]


def _snapshot(params):
    return {k: p.data.copy() for k, p in params.items()}


def _restore(params, snap):
    for k, p in params.items():
        p.data = snap[k].copy()


def _batch_loss(model, x, side, target, margins):
    out = model.forward(x, side)
    return margin_loss(out.o, target, **margins), out


def train(dataset: Dataset, config: TrainConfig, model: MixCaps | None = None,
          validation: Dataset | None = None, on_log: Callable[[dict], None] | None = None) -> TrainResult:
    """Minimise the blended margin loss with Adam over shuffled mini-batches.

    All of ``dataset`` is used for training; pass ``validation`` to have the
    validation loss/accuracy logged (and, with ``select_best``, to keep the
    parameters of the epoch with the lowest validation loss).
    """
    if len(dataset) == 0:
        raise ContractError("cannot train on an empty dataset")
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    if model is None:
        side_len = 2 if config.side_features else 0
        model = build_preset(config.preset, seed=int(seeds[0].generate_state(1)[0]), kind=config.model,
                             side_feature_len=side_len, num_experts=config.num_experts)
    rng = np.random.default_rng(seeds[1])
    params = model.parameters()
    names = list(params)
    opt = Adam(params, config.learning_rate, config.beta1, config.beta2, config.epsilon)
    margins = config.margins()
    targets = one_hot(dataset.labels)
    side_all = _side(model, dataset)
    log: list[dict] = []

    def emit(rec):
        log.append(rec)
        logger.debug("%s", rec)
        if on_log is not None:
            on_log(rec)

    def checkpoint():
        return ModelCheckpoint(model=model, step=opt.t, seed=config.seed,
                               rng_state=rng.bit_generator.state, train_config=config.to_dict())

    best = (np.inf, None, -1)
    n = len(dataset)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        tot_loss = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            good = _snapshot(params)
            try:
                with T.GradientTape() as tape:
                    loss, out = _batch_loss(model, dataset.patches[idx],
                                            None if side_all is None else side_all[idx], targets[idx], margins)
                grads = tape.backward(loss, [params[k] for k in names])
                grad_map = {k: grads[params[k]] for k in names}
                for k, g in grad_map.items():
                    if not np.isfinite(g).all():
                        raise NumericError(f"non-finite gradient for {k}")
            except NumericError as exc:
                _restore(params, good)
                raise TrainingDivergedError(
                    f"training diverged at epoch {epoch}, step {opt.t + 1}: {exc}", checkpoint()) from exc
            opt.step(grad_map)
            tot_loss += loss.item() * len(idx)
            correct += int(np.sum((malignancy_score(out.o.data) >= 0.5) == (dataset.labels[idx] == 1)))
        rec = {"event": "epoch", "epoch": epoch, "steps": opt.t, "train_loss": tot_loss / n,
               "train_accuracy": correct / n}
        if validation is not None and len(validation):
            vo = predict(model, validation.patches, _side(model, validation))
            vl = float(margin_loss(T.Tensor(vo), one_hot(validation.labels), **margins).item())
            rec["val_loss"] = vl
            rec["val_accuracy"] = float(np.mean((malignancy_score(vo) >= 0.5) == (validation.labels == 1)))
            if config.select_best and vl < best[0]:
                best = (vl, _snapshot(params), epoch)
        emit(rec)
    if best[1] is not None and best[2] != config.epochs:
        _restore(params, best[1])
        emit({"event": "restore", "epoch": best[2], "val_loss": best[0]})
    return TrainResult(checkpoint(), log)


def split_validation(dataset: Dataset, fraction: float, rng: np.random.Generator):
    idx = rng.permutation(len(dataset))
    nv = int(round(fraction * len(dataset)))
    return dataset.subset(np.sort(idx[nv:])), dataset.subset(np.sort(idx[:nv]))


# bootstrap ---------------------------------------------------------------------

@dataclass
class BootstrapResult:
    report: MetricsReport
    iterations: list[dict]
    log: list[dict]


def bootstrap_evaluate(dataset: Dataset, config: TrainConfig, iterations: int | None = None,
                       max_retries: int = 10, on_log: Callable[[dict], None] | None = None) -> BootstrapResult:
    """Resample-train-evaluate loop with out-of-bag test sets and percentile CIs."""
    iterations = config.bootstrap_iterations if iterations is None else iterations
    n = len(dataset)
    n_pool = int(round(config.sample_fraction * n))
    log, per_iter = [], []

    def emit(rec):
        log.append(rec)
        if on_log is not None:
            on_log(rec)

    for it in range(iterations):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, it]))
        for attempt in range(max_retries + 1):
            pool = rng.choice(n, size=n_pool, replace=True)
            oob = np.setdiff1d(np.arange(n), pool)
            labels = dataset.labels[oob]
            if len(oob) and np.any(labels == 0) and np.any(labels == 1):
                break
            emit({"event": "resample", "iteration": it, "attempt": attempt + 1, "oob": int(len(oob))})
        else:
            raise MissingClassError(f"bootstrap iteration {it}: no two-class out-of-bag set after {max_retries} retries")
        perm = rng.permutation(len(pool))
        nv = int(round(config.validation_fraction * len(pool)))
        val_idx, train_idx = pool[perm[:nv]], pool[perm[nv:]]
        cfg = replace(config, seed=int(rng.integers(2 ** 63)))
        res = train(dataset.subset(train_idx), cfg, validation=dataset.subset(val_idx))
        rep = evaluate(res.checkpoint.model, dataset.subset(oob))
        vals = {k: getattr(rep, k) for k in METRICS}
        per_iter.append(vals)
        emit({"event": "bootstrap_iteration", "iteration": it, "train": int(len(train_idx)),
              "validation": int(nv), "test": int(len(oob)), **vals})
    return BootstrapResult(MetricsReport.from_iterations(per_iter, n), per_iter, log)


# experiments -----------------------------------------------------------------------

def pearson(x, y) -> float | None:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.std(x) == 0 or np.std(y) == 0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


def gate_correlation(model, dataset: Dataset, gate_weights=None) -> dict:
    """Pearson r between the first expert's gate weight and volume / diameter.

    ``gate_weights`` overrides the model's gate (used to test the statistic).
    """
    if gate_weights is None:
        model = getattr(model, "model", model)
        if model.gate is None:
            raise ContractError("gate correlation needs a model with a gate")
        _, g = predict(model, dataset.patches, _side(model, dataset), with_gate=True)
        g1 = g[:, 0]
    else:
        g1 = np.asarray(gate_weights, dtype=np.float64)
    out = {"n": int(len(dataset))}
    for feat, vals in (("volume", dataset.volumes), ("diameter", dataset.diameters)):
        r = pearson(g1, vals)
        out[feat] = {"r": r, "defined": r is not None}
    return out


def noise_sweep(model, dataset: Dataset, stds, seed: int = 0) -> list[dict]:
    """Accuracy under additive Gaussian input noise for each std (fixed noise seed)."""
    stds = [float(s) for s in stds]
    if any(s < 0 for s in stds):
        raise ContractError("noise stds must be nonnegative")
    if stds != sorted(stds):
        raise ContractError("noise stds must be sorted ascending")
    return [{"std": s, "accuracy": evaluate(model, dataset, noise_std=s, noise_seed=seed).accuracy}
            for s in stds]
