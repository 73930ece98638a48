"""Finite-difference audit of the full model gradient."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from mixcaps import tensor as T
from mixcaps.capsule import margin_loss, one_hot
from mixcaps.errors import ContractError, GradientCheckError


@dataclass
class BlockReport:
    name: str
    size: int
    coords_checked: int
    coordinate_error: float
    directional_error: float
    grad_norm: float
    kinks_skipped: int = 0

    @property
    def error(self) -> float:
        return max(self.coordinate_error, self.directional_error)

    def to_dict(self) -> dict:
        return {"block": self.name, "size": self.size, "coords_checked": self.coords_checked,
                "coordinate_error": self.coordinate_error, "directional_error": self.directional_error,
                "error": self.error, "grad_norm": self.grad_norm, "kinks_skipped": self.kinks_skipped}


@dataclass
class GradCheckReport:
    blocks: list[BlockReport] = field(default_factory=list)
    tol: float = 1e-4
    h: float = 1e-5
    loss: float = float("nan")

    @property
    def worst(self) -> BlockReport:
        return max(self.blocks, key=lambda b: b.error)

    @property
    def passed(self) -> bool:
        return all(b.error < self.tol for b in self.blocks)

    @property
    def failing(self) -> list[str]:
        return [b.name for b in self.blocks if not b.error < self.tol]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "tol": self.tol, "h": self.h, "loss": self.loss,
                "worst_block": self.worst.name, "worst_error": self.worst.error,
                "blocks": [b.to_dict() for b in self.blocks]}


def _rel(a: np.ndarray, b: np.ndarray, floor: float) -> float:
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b) / scale)


def gradient_check(model, batch, h: float = 1e-5, tol: float = 1e-4, coords_per_block: int = 48,
                   directions: int = 2, seed: int = 0, floor: float = 1e-8,
                   grad_transform: Callable[[str, np.ndarray], np.ndarray] | None = None,
                   raise_on_fail: bool = True, margins: dict | None = None) -> GradCheckReport:
    """Compare taped gradients of the margin loss with central differences.

    ``batch`` is ``(patches, labels)`` or ``(patches, labels, side_features)``.
    Routing couplings are frozen at their unperturbed values so the loss
    being differenced is the same function the tape differentiates.  Blocks
    with at most ``coords_per_block`` entries are checked exhaustively;
    larger ones on a sample biased towards the largest gradient entries,
    plus ``directions`` directional derivatives spanning the whole block.
    Probes whose perturbation flips any ReLU are not differentiable there;
    they are skipped (coordinates) or redrawn (directions) and counted.
    """
    patches, labels, *rest = batch
    side = rest[0] if rest else None
    params = model.parameters()
    first = next(iter(params.values())).data
    if first.dtype != np.float64:
        raise ContractError("gradient checking needs 64-bit parameters")
    patches = np.asarray(patches, dtype=np.float64)
    target = one_hot(labels, model.experts[0].config.num_classes)
    margins = margins or {}
    frozen = [e.routing.c for e in model.forward(patches, side).experts]

    def loss_value() -> tuple[float, bytes]:
        with T.watch_kinks() as w:
            val = margin_loss(model.forward(patches, side, frozen_couplings=frozen).o, target, **margins).item()
        return val, w.signature()

    base_sig = loss_value()[1]

    with T.GradientTape() as tape:
        loss = margin_loss(model.forward(patches, side, frozen_couplings=frozen).o, target, **margins)
    grads = tape.backward(loss, list(params.values()))
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol, h=h, loss=loss.item())

    for name, p in params.items():
        g = grads[p].copy()
        if grad_transform is not None:
            g = np.asarray(grad_transform(name, g), dtype=np.float64)
        flat, gflat = p.data.reshape(-1), g.reshape(-1)
        if flat.size <= coords_per_block:
            idx = np.arange(flat.size)
        else:
            half = coords_per_block // 2
            top = np.argsort(-np.abs(gflat), kind="stable")[:half]
            rest_idx = np.setdiff1d(np.arange(flat.size), top)
            idx = np.concatenate([top, rng.choice(rest_idx, coords_per_block - half, replace=False)])
        kept, numeric, skipped = [], [], 0
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            fp, sp = loss_value()
            flat[i] = old - h
            fm, sm = loss_value()
            flat[i] = old
            if sp != base_sig or sm != base_sig:
                skipped += 1
                continue
            kept.append(i)
            numeric.append((fp - fm) / (2 * h))
        coord_err = _rel(gflat[kept], np.array(numeric), floor) if kept else 0.0

        dir_err = 0.0
        original = p.data.copy()
        done = attempts = 0
        while done < directions and attempts < 4 * directions:
            attempts += 1
            d = rng.normal(size=p.shape)
            d /= np.linalg.norm(d)
            p.data = original + h * d
            fp, sp = loss_value()
            p.data = original - h * d
            fm, sm = loss_value()
            p.data = original.copy()
            if sp != base_sig or sm != base_sig:
                skipped += 1
                continue
            done += 1
            fd = (fp - fm) / (2 * h)
            an = float(np.sum(g * d))
            dir_err = max(dir_err, abs(fd - an) / max(abs(fd), abs(an), floor))
        p.data = original
        report.blocks.append(BlockReport(name, int(flat.size), len(kept), coord_err, dir_err,
                                         float(np.linalg.norm(g)), skipped))

    if raise_on_fail and not report.passed:
        worst = report.worst
        raise GradientCheckError(
            f"gradient mismatch in block {worst.name!r}: relative error {worst.error:.3e} >= {tol:g}",
            report=report)
    return report
