"""Capsule-network expert: conv front end, primary capsules, routing, class capsules."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from mixcaps import kernels
from mixcaps import tensor as T
from mixcaps.errors import ContractError, DimensionError, NumericError
from mixcaps.tensor import Tensor


@dataclass(frozen=True)
class ExpertConfig:
    patch_size: int = 80
    channels: int = 3
    input_pool: int = 1
    conv1_filters: int = 256
    conv2_filters: int = 256
    kernel: int = 9
    strides: tuple[int, int] = (1, 2)
    primary_capsule_dim: int = 8
    class_capsule_dim: int = 32
    num_classes: int = 2
    routing_iterations: int = 3
    side_feature_len: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strides", tuple(self.strides))
        if self.conv2_filters % self.primary_capsule_dim:
            raise ContractError(
                f"conv2_filters={self.conv2_filters} not divisible by primary_capsule_dim={self.primary_capsule_dim}")
        if self.routing_iterations < 1:
            raise ContractError("routing_iterations must be >= 1")
        if self.patch_size % self.input_pool:
            raise ContractError(f"input_pool={self.input_pool} does not divide patch_size={self.patch_size}")
        for name in ("patch_size", "channels", "input_pool", "conv1_filters", "conv2_filters", "kernel",
                     "primary_capsule_dim", "class_capsule_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.side_feature_len < 0:
            raise ContractError("side_feature_len must be >= 0")
        self.grid()

    def grid(self) -> tuple[int, int]:
        """Spatial extent after conv1 and conv2 (valid convolutions)."""
        size = self.patch_size // self.input_pool
        s1, s2 = self.strides
        h1 = (size - self.kernel) // s1 + 1
        if h1 < self.kernel or size < self.kernel:
            raise ContractError(f"kernel {self.kernel} too large for input {size} with strides {self.strides}")
        h2 = (h1 - self.kernel) // s2 + 1
        return h1, h2

    @property
    def num_primary_capsules(self) -> int:
        _, h2 = self.grid()
        return h2 * h2 * (self.conv2_filters // self.primary_capsule_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"] = list(self.strides)
        return d


@dataclass
class RoutingState:
    """Routing trace for a batch: final-round tensors plus per-round history.

    ``b``/``c`` have shape ``(N, I, J)``, ``predictions`` ``(N, I, J, D)`` and
    ``parents`` (squashed ``s_j``) ``(N, J, D)``.  ``history_b``/``history_c``
    hold every round, ``history_a`` the agreements of all but the last round.
    """

    b: np.ndarray
    c: np.ndarray
    predictions: np.ndarray
    parents: np.ndarray
    history_b: np.ndarray = field(repr=False)
    history_c: np.ndarray = field(repr=False)
    history_a: np.ndarray = field(repr=False)
    history_s: np.ndarray = field(repr=False)

    @property
    def rounds(self) -> int:
        return self.history_c.shape[0]


@dataclass
class ExpertOutput:
    o: Tensor
    class_capsules: Tensor
    routing: RoutingState | None


def squash(s, axis: int = -1) -> Tensor:
    return T.squash(s, axis=axis)


def predict_parents(u, W) -> Tensor:
    """Prediction vectors ``u_hat[j|i] = W_ij^T u_i``.

    ``u`` is ``(I, P)`` or ``(N, I, P)``; ``W`` is ``(I, J, P, D)``.
    """
    u, W = T.as_tensor(u), T.as_tensor(W)
    squeeze = u.ndim == 2
    ud = u.data[None] if squeeze else u.data
    if W.ndim != 4 or ud.ndim != 3 or ud.shape[1] != W.shape[0] or ud.shape[2] != W.shape[2]:
        raise DimensionError(f"predict_parents shape mismatch: u {u.shape} vs W {W.shape}")
    n, ni, p = ud.shape
    _, nj, _, d = W.shape
    # (I, N, P) @ (I, P, J*D) -> (I, N, J*D)
    ut = np.ascontiguousarray(ud.transpose(1, 0, 2))
    wm = W.data.transpose(0, 2, 1, 3).reshape(ni, p, nj * d)
    out = np.matmul(ut, wm).reshape(ni, n, nj, d).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out[0] if squeeze else out)

    def bw(g):
        gd = g[None] if squeeze else g
        gt = np.ascontiguousarray(gd.transpose(1, 0, 2, 3)).reshape(ni, n, nj * d)
        gu = gW = None
        if u.requires_grad:
            gu = np.matmul(gt, wm.transpose(0, 2, 1)).transpose(1, 0, 2)
            if squeeze:
                gu = gu[0]
        if W.requires_grad:
            gW = np.matmul(ut.transpose(0, 2, 1), gt).reshape(ni, p, nj, d).transpose(0, 2, 1, 3)
        return gu, gW

    return T.apply("predict_parents", out, (u, W), bw)


def _routing_op(u_hat: Tensor, iterations: int, frozen_c: np.ndarray | None):
    """Routing as one taped op; final couplings are constants for differentiation."""
    squeeze = u_hat.ndim == 3
    ud = u_hat.data[None] if squeeze else u_hat.data
    if ud.ndim != 4:
        raise DimensionError(f"route expects (N,)I,J,D predictions, got {u_hat.shape}")
    if frozen_c is None:
        if not np.isfinite(ud).all():
            raise NumericError("route: non-finite predictions")
        hb, hc, ha, hs, hv = kernels.route(ud, iterations)
        for r in range(iterations):
            if not (np.isfinite(hs[r]).all() and np.isfinite(hc[r]).all()):
                raise NumericError(f"route: non-finite value in routing round {r + 1}")
        c = hc[-1]
        s = hs[-1]
        v = hv[-1]
        state = RoutingState(b=hb[-1], c=c, predictions=ud, parents=v,
                             history_b=hb, history_c=hc, history_a=ha, history_s=hs)
    else:
        c = np.asarray(frozen_c, dtype=ud.dtype).reshape(ud.shape[:3])
        s = np.einsum("nij,nijd->njd", c, ud)
        v = kernels.squash_array(s)
        state = None
    eps = kernels.SQUASH_EPS
    q = np.sum(s * s, axis=-1, keepdims=True)
    ne2 = q + eps * eps
    phi = q / ((1.0 + q) * np.sqrt(ne2))

    def bw(g):
        gd = g[None] if squeeze else g
        dphi = (ne2 - 0.5 * q * (1.0 + q)) / ((1.0 + q) ** 2 * ne2 * np.sqrt(ne2))
        proj = np.sum(s * gd, axis=-1, keepdims=True)
        gs = phi * gd + 2.0 * dphi * proj * s
        gu = c[..., None] * gs[:, None, :, :]
        return (gu[0] if squeeze else gu,)

    out = T.apply("route", v[0] if squeeze else v, (u_hat,), bw)
    return out, state


def route(predictions, iterations: int = 3) -> RoutingState:
    """Routing by agreement over ``predictions`` of shape ``(N,)I,J,D``.

    Each round computes couplings ``c = softmax_j(b)``, parent vectors
    ``squash(sum_i c_ij u_hat_j|i)`` and, except after the last round,
    adds the agreements ``v_j . u_hat_j|i`` to the logits ``b``.
    """
    p = T.as_tensor(predictions)
    _, state = _routing_op(p, iterations, None)
    if p.ndim == 3:
        state = RoutingState(
            b=state.b[0], c=state.c[0], predictions=state.predictions[0], parents=state.parents[0],
            history_b=state.history_b[:, 0], history_c=state.history_c[:, 0],
            history_a=state.history_a[:, 0], history_s=state.history_s[:, 0])
    return state


def margin_loss(o, target, m_plus: float = 0.9, m_minus: float = 0.1, lam: float = 0.5,
                reduce: str = "mean") -> Tensor:
    """Squared-hinge margin loss summed over classes.

    ``o`` and ``target`` are ``(K,)`` or ``(N, K)``; ``target`` must be one-hot.
    With a batch the per-sample losses are averaged (``reduce="mean"``) or summed.
    """
    o = T.as_tensor(o)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=o.data.dtype)
    if t.shape != o.shape:
        raise DimensionError(f"margin_loss shape mismatch: o {o.shape} vs target {t.shape}")
    if not (np.isin(t, (0.0, 1.0)).all() and np.all(t.sum(axis=-1) == 1.0)):
        raise ContractError("margin_loss target must be one-hot")
    if not 0.0 < m_minus < m_plus < 1.0:
        raise ContractError(f"need 0 < m_minus < m_plus < 1, got {m_minus}, {m_plus}")
    od = o.data
    up = np.maximum(0.0, m_plus - od)
    down = np.maximum(0.0, od - m_minus)
    per = np.sum(t * up ** 2 + lam * (1.0 - t) * down ** 2, axis=-1)
    n = per.size if od.ndim > 1 else 1
    scale = 1.0 / n if (reduce == "mean" and od.ndim > 1) else 1.0
    out = np.asarray(per.sum() * scale)

    def bw(g):
        return (g * scale * (-2.0 * t * up + 2.0 * lam * (1.0 - t) * down),)

    return T.apply("margin_loss", out, (o,), bw)


def one_hot(labels, num_classes: int = 2) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (num_classes,), dtype=T.get_default_dtype())
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def _uniform(rng, shape, fan_in, gain=1.0):
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class CapsuleExpert:
    """One capsule network: conv1 -> ReLU -> conv2 -> primary capsules -> routing."""

    def __init__(self, config: ExpertConfig, rng: np.random.Generator | None = None, prefix: str = "expert"):
        self.config = config
        self.prefix = prefix
        rng = np.random.default_rng(0) if rng is None else rng
        cfg = config
        k, c = cfg.kernel, cfg.channels
        ni, nj = cfg.num_primary_capsules, cfg.num_classes
        p, d = cfg.primary_capsule_dim, cfg.class_capsule_dim
        self.params: dict[str, Tensor] = {}
        self._add("conv1.w", _uniform(rng, (k, k, c, cfg.conv1_filters), k * k * c))
        self._add("conv1.b", np.zeros(cfg.conv1_filters))
        self._add("conv2.w", _uniform(rng, (k, k, cfg.conv1_filters, cfg.conv2_filters), k * k * cfg.conv1_filters))
        self._add("conv2.b", np.zeros(cfg.conv2_filters))
        # primary capsules are short after squash, so a plain fan-in scale leaves
        # class capsules near zero length; this gain puts them mid-range at init
        self._add("caps.W", _uniform(rng, (ni, nj, p, d), p * ni, gain=6.0))
        if cfg.side_feature_len:
            self._add("box.w", _uniform(rng, (d + cfg.side_feature_len, d), d + cfg.side_feature_len))
            self._add("box.b", np.zeros(d))

    def _add(self, name, value):
        self.params[name] = T.parameter(value, name=f"{self.prefix}.{name}")

    def parameters(self) -> dict[str, Tensor]:
        return {f"{self.prefix}.{k}": v for k, v in self.params.items()}

    def forward(self, patch, side_features=None, frozen_couplings=None) -> ExpertOutput:
        """Class-capsule lengths for ``patch`` of shape ``(N,)H,W,C``."""
        cfg = self.config
        x = T.as_tensor(patch)
        squeeze = x.ndim == 3
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != (cfg.patch_size, cfg.patch_size, cfg.channels):
            raise DimensionError(
                f"expert expects patches of shape {(cfg.patch_size, cfg.patch_size, cfg.channels)}, got {T.as_tensor(patch).shape}")
        has_side = side_features is not None
        if has_side != (cfg.side_feature_len > 0):
            raise ContractError("side_features must be given iff side_feature_len > 0")
        n = x.shape[0]
        P = self.params
        h = T.avg_pool2d(x, cfg.input_pool)
        h = T.relu(T.conv2d(h, P["conv1.w"], cfg.strides[0]) + P["conv1.b"])
        h = T.conv2d(h, P["conv2.w"], cfg.strides[1]) + P["conv2.b"]
        u = T.squash(T.reshape(h, (n, cfg.num_primary_capsules, cfg.primary_capsule_dim)))
        u_hat = predict_parents(u, P["caps.W"])
        v, state = _routing_op(u_hat, cfg.routing_iterations, frozen_couplings)
        if has_side:
            side = T.as_tensor(side_features)
            side = T.reshape(side, (n, 1, cfg.side_feature_len)) if side.size == n * cfg.side_feature_len else None
            if side is None:
                raise DimensionError(f"side_features must have {cfg.side_feature_len} entries per sample")
            side = T.broadcast_to(side, (n, cfg.num_classes, cfg.side_feature_len))
            v = T.squash(T.matmul(T.concat([v, side], axis=-1), P["box.w"]) + P["box.b"])
        o = T.vector_length(v)
        if squeeze:
            o = T.reshape(o, (cfg.num_classes,))
            v = T.reshape(v, (cfg.num_classes, cfg.class_capsule_dim))
        return ExpertOutput(o=o, class_capsules=v, routing=state)


def expert_forward(patch, side_features, expert: CapsuleExpert) -> ExpertOutput:
    return expert.forward(patch, side_features)
