"""Transformer model/training configuration and closed-form memory footprints."""

from __future__ import annotations

from dataclasses import dataclass, fields

MODEL_KEYS = (
    "hidden_dim",
    "layers",
    "heads",
    "vocab",
    "seq_len",
    "global_batch_tokens",
    "bytes_per_element",
)

# (hidden_dim, layers, heads, vocab)
PRESETS = {
    "7b": (4096, 32, 32, 100_000),
    "13b": (5120, 40, 40, 100_000),
    "30b": (6144, 60, 48, 100_000),
    "65b": (8192, 80, 64, 100_000),
}


class ModelConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class ModelConfig:
    """LLaMA-shaped decoder plus the training batch geometry.

    ``global_batch_tokens`` is B in tokens, so the number of sequences per
    step is ``global_batch_tokens // seq_len``.
    """

    hidden_dim: int
    layers: int
    heads: int
    vocab: int
    seq_len: int
    global_batch_tokens: int
    bytes_per_element: int = 2

    def __post_init__(self):
        problems = model_problems(self)
        if problems:
            raise ModelConfigError(problems)

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def model_problems(cfg) -> list[str]:
    """Every violated field constraint, so callers can report them at once."""
    problems = []
    for key in MODEL_KEYS:
        value = getattr(cfg, key)
        if isinstance(value, bool) or not isinstance(value, int):
            problems.append(f"{key}: must be an integer, got {value!r}")
        elif value <= 0:
            problems.append(f"{key}: must be positive, got {value}")
    if not problems and cfg.hidden_dim % cfg.heads:
        problems.append(
            f"hidden_dim: {cfg.hidden_dim} is not divisible by heads={cfg.heads}"
        )
    return problems


def preset(name: str, seq_len: int = 4096, global_batch_tokens: int = 4 * 2**20,
           bytes_per_element: int = 2) -> ModelConfig:
    try:
        h, l, d, v = PRESETS[name.lower()]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ModelConfig(h, l, d, v, seq_len, global_batch_tokens, bytes_per_element)


@dataclass(frozen=True)
class Footprint:
    params_bytes: int
    grads_bytes: int
    optstate_bytes: int
    act_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.params_bytes + self.grads_bytes + self.optstate_bytes + self.act_bytes


def layer_param_count(hidden_dim: int) -> int:
    """Parameters of one transformer layer: 12H^2 + 2H."""
    return 12 * hidden_dim * hidden_dim + 2 * hidden_dim


def param_count(hidden_dim: int, layers: int, vocab: int) -> int:
    """Transformer layers plus the (untied) embedding and output head."""
    return layer_param_count(hidden_dim) * layers + 2 * vocab * hidden_dim


def total_param_count(cfg: ModelConfig) -> int:
    return param_count(cfg.hidden_dim, cfg.layers, cfg.vocab)


def unsharded_footprint(cfg: ModelConfig, micro_batch: int = 1) -> Footprint:
    """Replicated P/G/OS bytes and the activation bytes of one micro-batch.

    The per-parameter coefficients scale with ``bytes_per_element``:
    P and G take one element each, the optimizer state three (6 bytes at
    16-bit), so OS is always 3x P.
    """
    if micro_batch < 1:
        raise ValueError("micro_batch must be >= 1")
    bpe = cfg.bytes_per_element
    count = total_param_count(cfg)
    h, l, s = cfg.hidden_dim, cfg.layers, cfg.seq_len
    act = bpe * micro_batch * s * (17 * h * l + h + cfg.vocab)
    return Footprint(bpe * count, bpe * count, 3 * bpe * count, act)
