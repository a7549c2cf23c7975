"""Central finite-difference check of the pretraining-loss gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as nn
from .chansim import SimConfig, generate_channel
from .pretrain import PretrainConfig, build_example, loss
from .tokenizer import build_vocabulary

# gradients whose true value is zero come back from differencing as roundoff
# around 1e-10 (eps * |loss| / step); relative error is measured against this floor so those do not dominate
ABS_FLOOR = 1e-5


@dataclass
class GradCheckReport:
    per_tensor: dict  # name -> max relative error
    checked: int

    @property
    def max_error(self) -> float:
        return max(self.per_tensor.values())

    def worst(self) -> tuple[str, float]:
        name = max(self.per_tensor, key=self.per_tensor.get)
        return name, self.per_tensor[name]


def tiny_config(**kw) -> nn.ModelConfig:
    base = dict(num_layers=2, hidden_size=16, num_heads=2, ffn_size=32, vocab_size=32,
                max_freq_features=2, max_time_features=2, max_antenna_features=2, max_seq_len=13)
    base.update(kw)
    return nn.ModelConfig(**base)


def tiny_problem(cfg: nn.ModelConfig, seed: int = 0, batch: int = 2, param_std: float = 0.3):
    """Random non-degenerate parameters plus a batch of N=13 training examples."""
    grid = generate_channel(SimConfig(num_subcarriers=cfg.max_freq_features, num_frames=30, seed=seed))
    vocab = build_vocabulary([grid], cfg.vocab_size)
    pcfg = PretrainConfig(mask_rate=0.5)
    examples = [build_example(grid, t0, np.random.default_rng([seed, t0]), pcfg, vocab)
                for t0 in range(batch)]
    rng = np.random.default_rng(seed + 1)
    params = {}
    for name, shape in nn.param_shapes(cfg).items():
        noise = rng.normal(0.0, param_std, size=shape)
        params[name] = 1.0 + noise if name.endswith(".gamma") else noise
    return params, examples


def check_gradients(cfg: nn.ModelConfig, params, examples, step: float = 1e-5,
                    floor: float = ABS_FLOOR) -> GradCheckReport:
    analytic = loss(examples, params, cfg).grads
    per_tensor = {}
    checked = 0
    for name, p in params.items():
        worst = 0.0
        flat = p.reshape(-1)
        g = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss(examples, params, cfg, with_grads=False).total
            flat[i] = orig - step
            down = loss(examples, params, cfg, with_grads=False).total
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            err = abs(fd - g[i]) / max(abs(fd), abs(g[i]), floor)
            worst = max(worst, err)
            checked += 1
        per_tensor[name] = worst
    return GradCheckReport(per_tensor, checked)
