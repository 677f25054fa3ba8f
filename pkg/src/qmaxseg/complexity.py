"""Model complexity accounting: parameter count, analytic multiply-accumulate
estimate for one forward pass, and wall-clock inference latency.

MAC conventions: convolutions count out_elements * (in_channels/groups) * kh
* kw; linear layers count batch_elements * in * out; attention counts the
score computation and the value aggregation (2 * score_entries * head_dim).
Normalization, activations and resampling are ignored, as is standard.
"""

from __future__ import annotations

import time
from statistics import mean, stdev

import torch
import torch.nn as nn

from .backbone import FullAttention2d, RelPosAttention


def parameter_count(model: nn.Module) -> int:
    return sum(v.numel() for v in model.state_dict().values())


def count_macs(model: nn.Module, example_input) -> dict[str, int]:
    """Per-category MACs of one forward pass on example_input."""
    totals = {"conv": 0, "linear": 0, "attention": 0}
    hooks = []

    def conv_hook(module, inputs, output):
        kh, kw = module.kernel_size
        per_out = (module.in_channels // module.groups) * kh * kw
        totals["conv"] += output.numel() * per_out

    def linear_hook(module, inputs, output):
        totals["linear"] += (output.numel() // module.out_features
                             ) * module.in_features * module.out_features

    def attn_hook(module, inputs, output):
        if isinstance(module, (RelPosAttention, FullAttention2d)):
            x = inputs[0]
            if isinstance(module, RelPosAttention):
                groups, tokens = x.shape[0], x.shape[1]
            else:
                groups, tokens = x.shape[0], x.shape[-2] * x.shape[-1]
            entries = groups * module.num_heads * tokens * tokens
            totals["attention"] += 2 * entries * module.head_dim
        elif isinstance(module, nn.MultiheadAttention):
            # query/key/value projections are separate Linear-like weights
            q = inputs[0]
            k = inputs[1]
            b, tq, d = q.shape
            tk = k.shape[1]
            totals["linear"] += b * (tq + 2 * tk) * d * d + b * tq * d * d
            totals["attention"] += 2 * b * module.num_heads * tq * tk * (
                d // module.num_heads)

    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            hooks.append(module.register_forward_hook(conv_hook))
        elif isinstance(module, nn.Linear):
            hooks.append(module.register_forward_hook(linear_hook))
        elif isinstance(module, (RelPosAttention, FullAttention2d,
                                 nn.MultiheadAttention)):
            hooks.append(module.register_forward_hook(attn_hook))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(example_input)
    finally:
        for h in hooks:
            h.remove()
        if was_training:
            model.train()
    totals["total"] = sum(totals.values())
    return totals


def measure_latency(model: nn.Module, example_input, trials=100):
    """(mean_s, std_s) of single-forward wall time over `trials` runs."""
    model.eval()
    with torch.no_grad():
        model(example_input)  # warm-up
        times = []
        for _ in range(trials):
            t0 = time.perf_counter()
            model(example_input)
            times.append(time.perf_counter() - t0)
    return mean(times), (stdev(times) if len(times) > 1 else 0.0)


def complexity_report(model: nn.Module, input_size, in_channels=1,
                      trials=100) -> dict:
    example = torch.zeros(1, in_channels, input_size, input_size)
    macs = count_macs(model, example)
    latency_mean, latency_std = measure_latency(model, example, trials)
    return {
        "params": parameter_count(model),
        "macs": macs,
        "latency_mean_s": latency_mean,
        "latency_std_s": latency_std,
        "trials": trials,
        "input_size": input_size,
    }
