"""Named model sizes and the factory that builds seeded models from them."""
from __future__ import annotations

import numpy as np

from mixcaps.capsule import CapsuleExpert, ExpertConfig
from mixcaps.errors import ConfigError
from mixcaps.gate import GateConfig, GateNetwork, MixCaps

PRESETS: dict[str, tuple[ExpertConfig, GateConfig]] = {
    # full-size front end at 80x80
    "paper": (
        ExpertConfig(),
        GateConfig(),
    ),
    # CI-scale model: 2x pooled input, about 46k parameters with two experts
    "desk": (
        ExpertConfig(patch_size=80, input_pool=2, conv1_filters=16, conv2_filters=16, kernel=5,
                     strides=(2, 2), primary_capsule_dim=8, class_capsule_dim=8),
        GateConfig(patch_size=80, input_pool=4, conv_filters=8, kernel=5, stride=3, fc1_units=16),
    ),
    # gradient-check scale on 20x20 patches
    "tiny": (
        ExpertConfig(patch_size=20, input_pool=1, conv1_filters=8, conv2_filters=8, kernel=5,
                     strides=(1, 2), primary_capsule_dim=4, class_capsule_dim=4),
        GateConfig(patch_size=20, input_pool=1, conv_filters=4, kernel=5, stride=3, fc1_units=8),
    ),
}


def preset_configs(preset: str, side_feature_len: int = 0, num_experts: int = 2):
    try:
        expert_cfg, gate_cfg = PRESETS[preset]
    except KeyError:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None
    if side_feature_len:
        expert_cfg = ExpertConfig(**{**expert_cfg.to_dict(), "side_feature_len": side_feature_len})
    if num_experts != gate_cfg.num_experts:
        gate_cfg = GateConfig(**{**gate_cfg.to_dict(), "num_experts": num_experts})
    return expert_cfg, gate_cfg


def build_model(expert_config: ExpertConfig, gate_config: GateConfig | None, seed: int = 0,
                kind: str = "mixcaps") -> MixCaps:
    """Seeded model; ``kind="single"`` gives one expert without a gate."""
    children = np.random.SeedSequence(seed).spawn(8)
    if kind == "single":
        return MixCaps([CapsuleExpert(expert_config, np.random.default_rng(children[0]), prefix="expert0")], None)
    if kind != "mixcaps":
        raise ConfigError(f"unknown model kind {kind!r}")
    m = gate_config.num_experts
    experts = [CapsuleExpert(expert_config, np.random.default_rng(children[i]), prefix=f"expert{i}")
               for i in range(m)]
    gate = GateNetwork(gate_config, np.random.default_rng(children[-1]))
    return MixCaps(experts, gate)


def build_preset(preset: str, seed: int = 0, kind: str = "mixcaps", side_feature_len: int = 0,
                 num_experts: int = 2) -> MixCaps:
    e, g = preset_configs(preset, side_feature_len, num_experts)
    return build_model(e, g, seed, kind)
