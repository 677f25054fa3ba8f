"""Checkpoint archive format.

A checkpoint is a single NPZ (zip of NPY entries). Every model parameter or
buffer is stored under its dotted state-dict name as a little-endian 32-bit
float array carrying its shape header; that keeps the format trivially
readable from other languages (each NPY member has a plain-text header with
dtype '<f4' and shape, followed by raw little-endian data).

Reserved members (absent from model state):
    __meta__       uint8 bytes of a UTF-8 JSON object (config snapshot and
                   any run bookkeeping)
    __rng_torch__  uint8 torch RNG state (training checkpoints only)
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

META_KEY = "__meta__"
RNG_KEY = "__rng_torch__"


def state_to_arrays(state_dict) -> dict[str, np.ndarray]:
    return {name: tensor.detach().cpu().numpy().astype("<f4")
            for name, tensor in state_dict.items()}


def save_checkpoint(path, state_dict, meta=None, rng_state=None):
    """Write a model state dict (plus optional JSON meta and torch RNG state)."""
    arrays = state_to_arrays(state_dict)
    if meta is not None:
        arrays[META_KEY] = np.frombuffer(
            json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8).copy()
    if rng_state is not None:
        arrays[RNG_KEY] = rng_state.numpy().astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **arrays)
    return path


def load_checkpoint(path):
    """Read back (arrays, meta, rng_state); meta is {} when absent."""
    with np.load(path) as archive:
        arrays = {k: archive[k] for k in archive.files}
    meta = {}
    if META_KEY in arrays:
        meta = json.loads(arrays.pop(META_KEY).tobytes().decode())
    rng_state = None
    if RNG_KEY in arrays:
        rng_state = torch.from_numpy(arrays.pop(RNG_KEY).astype(np.uint8))
    return arrays, meta, rng_state


def apply_arrays(model, arrays):
    """Load archive arrays into a model, casting to each entry's own dtype."""
    state = model.state_dict()
    missing = set(state) - set(arrays)
    unexpected = set(arrays) - set(state)
    if missing or unexpected:
        raise KeyError(
            f"checkpoint mismatch: missing {sorted(missing)[:5]}, "
            f"unexpected {sorted(unexpected)[:5]}")
    new_state = {}
    for name, ref in state.items():
        value = torch.from_numpy(np.ascontiguousarray(arrays[name]))
        new_state[name] = value.to(ref.dtype).reshape(ref.shape)
    model.load_state_dict(new_state)
    return model


def parameter_count(state_dict_or_arrays) -> int:
    total = 0
    for value in state_dict_or_arrays.values():
        shape = value.shape
        n = 1
        for s in shape:
            n *= int(s)
        total += n
    return total
