import numpy as np
import pytest
import torch

from conceptguard.diffcore import DenoiserNet
from conceptguard.errors import ArgumentError, ConsistencyError, ShapeError
from conceptguard.lora import (
    LoraDelta,
    apply_lora,
    inject_lora,
    memory_preservation_loss,
    snapshot,
)


def _delta_with(layer_id, a, b):
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    d = LoraDelta(layer_id, a.shape[0], b.shape[0], rank=a.shape[1], dtype=torch.float64)
    with torch.no_grad():
        d.A.copy_(a)
        d.B.copy_(b)
    return d


def test_apply_lora_zero_a_is_identity():
    d = _delta_with("l", torch.zeros(3, 2), torch.randn(4, 2, dtype=torch.float64))
    w = torch.randn(3, 4, dtype=torch.float64)
    assert torch.equal(apply_lora(w, d), w)


def test_apply_lora_hand_rank_one():
    d = _delta_with("l", [[1.0], [0.0]], [[2.0], [3.0]])
    w = torch.zeros(2, 2, dtype=torch.float64)
    out = apply_lora(w, d)
    assert torch.equal(out, torch.tensor([[2.0, 3.0], [0.0, 0.0]], dtype=torch.float64))


def test_apply_lora_bilinear_in_a():
    a = torch.randn(3, 2, dtype=torch.float64)
    b = torch.randn(4, 2, dtype=torch.float64)
    w = torch.randn(3, 4, dtype=torch.float64)
    base = apply_lora(w, _delta_with("l", a, b)) - w
    scaled = apply_lora(w, _delta_with("l", 2.5 * a, b)) - w
    assert torch.allclose(scaled, 2.5 * base)


def test_apply_lora_never_mutates_base():
    d = _delta_with("l", torch.randn(3, 2, dtype=torch.float64), torch.randn(4, 2, dtype=torch.float64))
    w = torch.randn(3, 4, dtype=torch.float64)
    w_copy = w.clone()
    apply_lora(w, d)
    assert torch.equal(w, w_copy)


def test_apply_lora_shape_mismatch():
    d = _delta_with("l", torch.randn(3, 2, dtype=torch.float64), torch.randn(4, 2, dtype=torch.float64))
    with pytest.raises(ShapeError):
        apply_lora(torch.zeros(2, 2, dtype=torch.float64), d)


def test_rank_bounds():
    with pytest.raises(ArgumentError):
        LoraDelta("l", 2, 3, rank=3)
    with pytest.raises(ArgumentError):
        LoraDelta("l", 2, 3, rank=0)


def test_delta_starts_at_zero():
    d = LoraDelta("l", 8, 4, rank=2)
    assert torch.equal(d.delta(), torch.zeros(8, 4))


def test_snapshot_zero_steps_zero_loss():
    deltas = {"l1": LoraDelta("l1", 4, 4, 2), "l2": LoraDelta("l2", 6, 4, 2)}
    with torch.no_grad():
        deltas["l1"].B.normal_()
        deltas["l2"].B.normal_()
    snap = snapshot(deltas, task_index=1)
    assert memory_preservation_loss(deltas, snap).item() == pytest.approx(0.0, abs=1e-12)


def test_snapshot_immutable_under_inplace_updates():
    deltas = {"l": LoraDelta("l", 4, 4, 2)}
    with torch.no_grad():
        deltas["l"].B.normal_()
    snap = snapshot(deltas, task_index=2)
    stored = snap.deltas["l"].clone()
    with torch.no_grad():
        deltas["l"].A.add_(1.0)
    assert torch.equal(snap.deltas["l"], stored)
    assert memory_preservation_loss(deltas, snap).item() > 0


def test_snapshot_covers_default_net_adapted_layers():
    net = DenoiserNet()
    deltas = inject_lora(net, rank=4)
    snap = snapshot(deltas, task_index=3)
    assert snap.task_index == 3
    assert set(snap.deltas) == {"attn1.to_k", "attn1.to_v", "attn2.to_k", "attn2.to_v"}
    assert len(snap.deltas) == 4


def test_inject_lora_wires_forward_path():
    torch.manual_seed(0)
    net = DenoiserNet(base_channels=8, cond_dim=4, time_dim=8)
    z = torch.randn(1, 3, 32, 32)
    cond = torch.randn(1, 2, 4)
    t = torch.tensor([1])
    with torch.no_grad():
        before = net(z, t, cond)
    deltas = inject_lora(net, rank=2)
    with torch.no_grad():
        unchanged = net(z, t, cond)  # deltas start at zero
    assert torch.allclose(unchanged, before)
    with torch.no_grad():
        deltas["attn1.to_k"].B.normal_()
        after = net(z, t, cond)
    assert not torch.allclose(after, before)


def test_memory_preservation_hand_value():
    d = _delta_with("l", [[1.0], [0.0]], [[1.0], [1.0]])  # delta = [[1,1],[0,0]]
    snap = snapshot({"l": _delta_with("l", [[0.0], [0.0]], [[0.0], [0.0]])}, 1)
    loss = memory_preservation_loss({"l": d}, snap)
    assert loss.item() == pytest.approx(2.0)


def test_memory_preservation_quadratic_homogeneity():
    a = torch.randn(4, 2, dtype=torch.float64)
    b = torch.randn(3, 2, dtype=torch.float64)
    zero = _delta_with("l", torch.zeros(4, 2), torch.zeros(3, 2))
    snap = snapshot({"l": zero}, 1)
    base = memory_preservation_loss({"l": _delta_with("l", a, b)}, snap).item()
    scaled = memory_preservation_loss({"l": _delta_with("l", 3.0 * a, b)}, snap).item()
    assert scaled == pytest.approx(9.0 * base, rel=1e-10)


def test_memory_preservation_layer_mismatch():
    d1 = {"l1": LoraDelta("l1", 4, 4, 2)}
    snap = snapshot({"l2": LoraDelta("l2", 4, 4, 2)}, 1)
    with pytest.raises(ConsistencyError):
        memory_preservation_loss(d1, snap)


def test_memory_preservation_gradients_match_finite_differences():
    torch.manual_seed(3)
    cur = _delta_with("l", torch.randn(4, 2, dtype=torch.float64),
                      torch.randn(4, 2, dtype=torch.float64))
    prev = _delta_with("l", torch.randn(4, 2, dtype=torch.float64),
                       torch.randn(4, 2, dtype=torch.float64))
    snap = snapshot({"l": prev}, 1)

    loss = memory_preservation_loss({"l": cur}, snap)
    loss.backward()

    h = 1e-6
    for p in (cur.A, cur.B):
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = memory_preservation_loss({"l": cur}, snap).item()
            flat[i] = orig - h
            down = memory_preservation_loss({"l": cur}, snap).item()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            denom = max(abs(fd), abs(gflat[i].item()), 1e-6)
            assert abs(gflat[i].item() - fd) / denom < 1e-4


def test_full_rank_delta_recovers_arbitrary_target():
    rng = np.random.default_rng(0)
    target = torch.as_tensor(rng.normal(size=(6, 4)), dtype=torch.float64)
    u, s, vh = torch.linalg.svd(target, full_matrices=False)
    a = u * s  # (6, 4)
    b = vh.T  # (4, 4)
    d = _delta_with("l", a, b)
    recovered = apply_lora(torch.zeros(6, 4, dtype=torch.float64), d)
    assert torch.linalg.matrix_norm(recovered - target).item() < 1e-6
