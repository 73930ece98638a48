"""Convolutional gating network and the mixture of capsule experts."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from mixcaps import tensor as T
from mixcaps.capsule import CapsuleExpert, ExpertOutput, margin_loss
from mixcaps.errors import ContractError, DimensionError
from mixcaps.tensor import Tensor


@dataclass(frozen=True)
class GateConfig:
    patch_size: int = 80
    channels: int = 3
    input_pool: int = 1
    conv_filters: int = 16
    kernel: int = 5
    stride: int = 2
    fc1_units: int = 64
    num_experts: int = 2

    def __post_init__(self):
        if self.num_experts < 2:
            raise ContractError(f"a gate needs num_experts >= 2, got {self.num_experts}")
        for name in ("patch_size", "channels", "input_pool", "conv_filters", "kernel", "stride", "fc1_units"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.patch_size % self.input_pool:
            raise ContractError(f"input_pool={self.input_pool} does not divide patch_size={self.patch_size}")
        if self.patch_size // self.input_pool < self.kernel:
            raise ContractError("gate kernel larger than its input")

    @property
    def conv_out(self) -> int:
        return (self.patch_size // self.input_pool - self.kernel) // self.stride + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GateOutput:
    g: Tensor
    pre_activations: Tensor


class GateNetwork:
    """conv -> ReLU -> flatten -> fc1 -> ReLU -> fc2 -> softmax over experts."""

    def __init__(self, config: GateConfig, rng: np.random.Generator | None = None, prefix: str = "gate"):
        self.config = config
        self.prefix = prefix
        rng = np.random.default_rng(0) if rng is None else rng
        cfg = config
        k = cfg.kernel
        flat = cfg.conv_out ** 2 * cfg.conv_filters

        def uni(shape, fan_in):
            b = np.sqrt(3.0 / fan_in)
            return rng.uniform(-b, b, size=shape)

        self.params = {
            "conv.w": uni((k, k, cfg.channels, cfg.conv_filters), k * k * cfg.channels),
            "conv.b": np.zeros(cfg.conv_filters),
            "fc1.w": uni((flat, cfg.fc1_units), flat),
            "fc1.b": np.zeros(cfg.fc1_units),
            "fc2.w": uni((cfg.fc1_units, cfg.num_experts), cfg.fc1_units),
            "fc2.b": np.zeros(cfg.num_experts),
        }
        self.params = {k: T.parameter(v, name=f"{prefix}.{k}") for k, v in self.params.items()}

    def parameters(self) -> dict[str, Tensor]:
        return {f"{self.prefix}.{k}": v for k, v in self.params.items()}

    def forward(self, patch) -> GateOutput:
        cfg = self.config
        x = T.as_tensor(patch)
        squeeze = x.ndim == 3
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != (cfg.patch_size, cfg.patch_size, cfg.channels):
            raise DimensionError(
                f"gate expects patches of shape {(cfg.patch_size, cfg.patch_size, cfg.channels)}, got {T.as_tensor(patch).shape}")
        n = x.shape[0]
        P = self.params
        h = T.avg_pool2d(x, cfg.input_pool)
        h = T.relu(T.conv2d(h, P["conv.w"], cfg.stride) + P["conv.b"])
        h = T.reshape(h, (n, cfg.conv_out ** 2 * cfg.conv_filters))
        h = T.relu(T.matmul(h, P["fc1.w"]) + P["fc1.b"])
        G = T.matmul(h, P["fc2.w"]) + P["fc2.b"]
        g = T.softmax(G, axis=-1)
        if squeeze:
            G = T.reshape(G, (cfg.num_experts,))
            g = T.reshape(g, (cfg.num_experts,))
        return GateOutput(g=g, pre_activations=G)


def gate_forward(patch, gate: GateNetwork) -> GateOutput:
    return gate.forward(patch)


def mix(outputs, g) -> Tensor:
    """Convex blend ``sum_i g_i o_i`` of expert outputs.

    ``outputs`` is a list of ``M`` tensors of shape ``(K,)`` or ``(N, K)``;
    ``g`` has shape ``(M,)`` or ``(N, M)``.
    """
    g = T.as_tensor(g)
    outputs = [T.as_tensor(o) for o in outputs]
    m = g.shape[-1]
    if len(outputs) != m:
        raise DimensionError(f"mix got {len(outputs)} expert outputs for {m} gate weights")
    shapes = {o.shape for o in outputs}
    if len(shapes) != 1:
        raise DimensionError(f"expert outputs disagree in shape: {sorted(shapes)}")
    stacked = np.stack([o.data for o in outputs], axis=-2)  # (..., M, K)
    gd = g.data
    if gd.shape[:-1] != stacked.shape[:-2]:
        raise DimensionError(f"gate shape {g.shape} does not match expert outputs {outputs[0].shape}")
    out = np.einsum("...m,...mk->...k", gd, stacked)

    def bw(grad):
        gg = np.einsum("...k,...mk->...m", grad, stacked)
        return (gg,) + tuple(gd[..., i, None] * grad for i in range(m))

    return T.apply("mix", out, (g, *outputs), bw)


@dataclass
class MixOutput:
    o: Tensor
    g: Tensor | None
    gate: GateOutput | None
    experts: list[ExpertOutput]


class MixCaps:
    """``M`` capsule experts blended by a convolutional gate.

    With a single expert and no gate the model degenerates to that expert
    (used as the single-network baseline).
    """

    def __init__(self, experts: list[CapsuleExpert], gate: GateNetwork | None):
        if gate is None and len(experts) != 1:
            raise ContractError("a gate is required with more than one expert")
        if gate is not None and gate.config.num_experts != len(experts):
            raise ContractError(f"gate expects {gate.config.num_experts} experts, got {len(experts)}")
        self.experts = experts
        self.gate = gate

    @property
    def kind(self) -> str:
        return "mixcaps" if self.gate is not None else "single"

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for e in self.experts:
            out.update(e.parameters())
        if self.gate is not None:
            out.update(self.gate.parameters())
        return out

    def forward(self, patch, side_features=None, frozen_couplings=None) -> MixOutput:
        frozen = frozen_couplings or [None] * len(self.experts)
        outs = [e.forward(patch, side_features, frozen_couplings=f) for e, f in zip(self.experts, frozen)]
        if self.gate is None:
            return MixOutput(o=outs[0].o, g=None, gate=None, experts=outs)
        gate_out = self.gate.forward(patch)
        o = mix([x.o for x in outs], gate_out.g)
        return MixOutput(o=o, g=gate_out.g, gate=gate_out, experts=outs)

    def couplings(self, patch, side_features=None) -> list[np.ndarray]:
        """Final-round coupling coefficients of each expert for ``patch``."""
        return [e.forward(patch, side_features).routing.c for e in self.experts]


def mixcaps_forward(patch, side_features, experts, gate) -> MixOutput:
    return MixCaps(list(experts), gate).forward(patch, side_features)


def mixcaps_loss(o, target, **margins) -> Tensor:
    """Margin loss evaluated on the blended output (gradients reach experts and gate)."""
    return margin_loss(o, target, **margins)
