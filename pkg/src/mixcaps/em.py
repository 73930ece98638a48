"""Mixture-of-experts reading of the model: responsibilities, the sequential
weight recursion, and a routing trace audit.

Everything here is diagnostic; none of it feeds back into training.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from mixcaps.errors import ContractError, DegenerateLikelihoodError

SIMPLEX_TOL = 1e-12


def _vector(x, name: str) -> np.ndarray:
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ContractError(f"{name} must be a non-empty vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} must be finite")
    if np.any(arr < 0):
        raise ContractError(f"{name} must be nonnegative")
    return arr


def _normalise(weights: np.ndarray, likelihoods: np.ndarray) -> np.ndarray:
    if weights.shape != likelihoods.shape:
        raise ContractError(f"prior {weights.shape} and likelihoods {likelihoods.shape} differ in length")
    # rescale first so tiny or huge likelihoods neither underflow nor overflow
    top = likelihoods.max()
    if top == 0.0:
        raise DegenerateLikelihoodError("every likelihood is zero")
    joint = weights * (likelihoods / top)
    total = joint.sum()
    if not total > 0.0:
        raise DegenerateLikelihoodError("prior and likelihoods share no support")
    return joint / total


def em_posterior(g, likelihoods) -> np.ndarray:
    """Responsibility of each expert: ``g_i L_i / sum_j g_j L_j``."""
    prior = _vector(g, "g")
    if abs(prior.sum() - 1.0) > 1e-9:
        raise ContractError(f"gate weights sum to {prior.sum()!r}, not 1")
    return _normalise(prior, _vector(likelihoods, "likelihoods"))


@dataclass(frozen=True)
class MMState:
    weights: np.ndarray
    step: int = 0

    def __post_init__(self):
        w = _vector(self.weights, "weights")
        if abs(w.sum() - 1.0) > SIMPLEX_TOL * max(1, w.size):
            raise ContractError(f"weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, m: int) -> "MMState":
        return cls(np.full(m, 1.0 / m))


def mm_update(state: MMState, likelihoods) -> MMState:
    """One step of the multiple-model recursion; the posterior becomes the next prior."""
    w = _normalise(state.weights, _vector(likelihoods, "likelihoods"))
    return MMState(w, state.step + 1)


def mm_sequence(state: MMState, sequence) -> list[MMState]:
    out = [state]
    for lik in sequence:
        out.append(mm_update(out[-1], lik))
    return out


@dataclass
class ResponsibilityRecord:
    sample_id: int
    g: np.ndarray
    likelihoods: np.ndarray
    posterior: np.ndarray
    label: int | None = None

    def to_dict(self) -> dict:
        return {"record": "responsibility", "sample": int(self.sample_id), "label": self.label,
                "g": self.g.tolist(), "likelihoods": self.likelihoods.tolist(),
                "posterior": self.posterior.tolist()}


def expert_likelihoods(expert_outputs: np.ndarray, labels, literal: bool = False) -> np.ndarray:
    """Per-sample likelihood of each expert from its class outputs.

    ``expert_outputs`` is ``(M, N, K)``.  By default each expert is scored by
    its output for the true class; ``literal=True`` always uses the malignant
    output (class 1) regardless of label.
    """
    out = np.asarray(expert_outputs, dtype=np.float64)
    if out.ndim != 3:
        raise ContractError(f"expert outputs must be (experts, samples, classes), got {out.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (out.shape[1],):
        raise ContractError(f"{labels.shape[0] if labels.ndim else 0} labels for {out.shape[1]} samples")
    if literal:
        return out[:, :, 1].T.copy()
    return out[:, np.arange(out.shape[1]), labels].T.copy()


def responsibilities(g: np.ndarray, expert_outputs: np.ndarray, labels,
                     literal: bool = False, sample_ids=None) -> list[ResponsibilityRecord]:
    """Responsibility records for a batch; ``g`` is ``(N, M)``."""
    g = np.asarray(g, dtype=np.float64)
    lik = expert_likelihoods(expert_outputs, labels, literal)
    if g.shape != lik.shape:
        raise ContractError(f"gate weights {g.shape} vs likelihoods {lik.shape}")
    ids = range(g.shape[0]) if sample_ids is None else sample_ids
    labels = np.asarray(labels)
    return [ResponsibilityRecord(int(i), g[n], lik[n], em_posterior(g[n], lik[n]), int(labels[n]))
            for n, i in enumerate(ids)]


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class RoutingReport:
    records: list[dict] = field(default_factory=list)
    max_normalisation_error: float = 0.0
    max_replay_error: float = 0.0
    tol: float = 1e-9

    @property
    def ok(self) -> bool:
        return not any(r.get("violations") for r in self.records)

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r) for r in self.records)


def routing_as_moe_report(state, tol: float = 1e-9, include_couplings: bool = True) -> RoutingReport:
    """Audit a routing trace as a chain of gates.

    For every sample and round: each lower capsule's couplings must sum to one,
    and round ``r+1`` couplings must equal the softmax of round ``r`` logits
    plus the logged agreements.
    """
    hb, hc, ha = state.history_b, state.history_c, state.history_a
    if hc.ndim == 3:
        hb, hc, ha = hb[:, None], hc[:, None], ha[:, None]
    rounds, n = hc.shape[0], hc.shape[1]
    report = RoutingReport(tol=tol)
    for sample in range(n):
        for r in range(rounds):
            c = hc[r, sample]
            norm_err = float(np.abs(c.sum(axis=-1) - 1.0).max())
            rec = {"record": "routing_round", "sample": sample, "round": r + 1,
                   "normalisation_error": norm_err}
            violations = []
            if norm_err >= tol:
                violations.append("normalisation")
            if r == 0:
                replay_err = float(np.abs(hb[0, sample]).max())
                replay_c = _softmax(np.zeros_like(c))
            else:
                logits = hb[r - 1, sample] + ha[r - 1, sample]
                replay_err = float(np.abs(hb[r, sample] - logits).max())
                replay_c = _softmax(logits)
            replay_err = max(replay_err, float(np.abs(replay_c - c).max()))
            rec["replay_error"] = replay_err
            if replay_err >= tol:
                violations.append("replay")
            rec["violations"] = violations
            if include_couplings:
                rec["c"] = c.tolist()
            report.records.append(rec)
            report.max_normalisation_error = max(report.max_normalisation_error, norm_err)
            report.max_replay_error = max(report.max_replay_error, replay_err)
    return report
