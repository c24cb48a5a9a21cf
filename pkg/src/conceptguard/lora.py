"""Low-rank adapters for the denoiser's cross-attention K/V projections.

The effective weight is W + A @ B.T. Snapshots freeze dense copies of every
delta at a task boundary; the memory preservation loss penalizes movement
away from the previous task's snapshot.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ArgumentError, ConsistencyError, ShapeError

DEFAULT_RANK = 4
_A_INIT_STD = 0.01


class LoraDelta(nn.Module):
    """One adapted layer: delta() = A @ B.T with A (m, r), B (n, r)."""

    def __init__(self, layer_id: str, m: int, n: int, rank: int = DEFAULT_RANK,
                 generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if rank < 1 or rank > min(m, n):
            raise ArgumentError(f"rank {rank} out of range for a {m}x{n} delta")
        self.layer_id = layer_id
        self.rank = rank
        a = torch.empty(m, rank, dtype=dtype).normal_(0.0, _A_INIT_STD, generator=generator)
        self.A = nn.Parameter(a)
        self.B = nn.Parameter(torch.zeros(n, rank, dtype=dtype))

    def delta(self) -> torch.Tensor:
        return self.A @ self.B.T


class LoraSnapshot:
    """Immutable dense copies of all deltas at a task boundary."""

    def __init__(self, task_index: int, deltas: dict[str, torch.Tensor]):
        self.task_index = task_index
        self.deltas = {k: v.detach().clone() for k, v in deltas.items()}


def apply_lora(w_base: torch.Tensor, delta: LoraDelta) -> torch.Tensor:
    """W + A @ B.T without mutating W."""
    d = delta.delta()
    if d.shape != w_base.shape:
        raise ShapeError(f"delta shape {tuple(d.shape)} != base {tuple(w_base.shape)}")
    return w_base + d


def inject_lora(net, rank: int = DEFAULT_RANK,
                generator: torch.Generator | None = None) -> dict[str, LoraDelta]:
    """Attach fresh K/V deltas to every cross-attention block of `net`."""
    dtype = next(net.parameters()).dtype
    deltas: dict[str, LoraDelta] = {}
    for name, block in net.cross_attention_blocks().items():
        for proj in ("to_k", "to_v"):
            w = getattr(block, proj).weight
            layer_id = f"{name}.{proj}"
            delta = LoraDelta(layer_id, w.shape[0], w.shape[1], rank,
                              generator=generator, dtype=dtype)
            deltas[layer_id] = delta
            setattr(block, "lora_k" if proj == "to_k" else "lora_v", delta)
    return deltas


def snapshot(deltas: dict[str, LoraDelta], task_index: int) -> LoraSnapshot:
    """Dense, detached copies of all current deltas."""
    return LoraSnapshot(task_index, {k: d.delta() for k, d in deltas.items()})


def memory_preservation_loss(deltas: dict[str, LoraDelta],
                             snap: LoraSnapshot) -> torch.Tensor:
    """Mean over layers of the squared Frobenius distance to the snapshot."""
    if set(deltas) != set(snap.deltas):
        raise ConsistencyError(
            f"layer sets differ: {sorted(deltas)} vs {sorted(snap.deltas)}"
        )
    total = None
    for layer_id, delta in deltas.items():
        diff = snap.deltas[layer_id] - delta.delta()
        term = (diff * diff).sum()
        total = term if total is None else total + term
    return total / len(deltas)
