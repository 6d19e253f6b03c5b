"""Release-gate self checks: mask construction, Hungarian assignment,
gradients, and metric arithmetic, each verified against an independent
in-process oracle. Meant to run in seconds on any CPU."""

from __future__ import annotations

import itertools
import math

import numpy as np
import torch

from .config import RefineConfig
from .fusion_decoder import build_fusion_mask
from .geometry import CornerBox
from .init_matching import hungarian
from .metrics import clear_metrics, idf1
from .nn_core import MultiHeadAttention, masked_softmax

NEG_INF = float("-inf")


def _mask_entry_oracle(i: int, j: int, n: int, beta: float) -> float:
    # literal three-case rule: opposite halves and same index mod n -> 0;
    # same half or diagonal -> -inf; otherwise beta
    center = (2 * n - 1) / 2.0
    opposite = (i - center) * (j - center) < 0
    if opposite and i % n == j % n:
        return 0.0
    if (i - center) * (j - center) > 0 or i == j:
        return NEG_INF
    return beta


def check_fusion_mask(inject_fault: bool = False) -> tuple[bool, str]:
    for n in range(1, 9):
        for beta in (0.0, -5.0, -10.0, NEG_INF):
            mask = build_fusion_mask(n, beta, dtype=torch.float64)
            if inject_fault:
                mask = mask.clone()
                mask[0, -1] = mask[0, -1] + 1.0
            for i in range(2 * n):
                for j in range(2 * n):
                    want = _mask_entry_oracle(i, j, n, beta)
                    got = float(mask[i, j])
                    if want != got and not (math.isinf(want) and math.isinf(got)):
                        return False, f"n={n} beta={beta} entry ({i},{j}): {got} != {want}"
    return True, "ok"


def _brute_force_assignment(cost: np.ndarray) -> float:
    r, c = cost.shape
    best = math.inf
    if r <= c:
        for perm in itertools.permutations(range(c), r):
            best = min(best, sum(cost[i, p] for i, p in enumerate(perm)))
    else:
        for perm in itertools.permutations(range(r), c):
            best = min(best, sum(cost[p, j] for j, p in enumerate(perm)))
    return best


def check_hungarian() -> tuple[bool, str]:
    rng = np.random.default_rng(7)
    for trial in range(100):
        r = int(rng.integers(1, 6))
        c = int(rng.integers(1, 6))
        cost = rng.uniform(0, 10, size=(r, c))
        got = hungarian(cost).cost
        want = _brute_force_assignment(cost)
        if abs(got - want) > 1e-9:
            return False, f"trial {trial}: cost {got} != {want}"
    return True, "ok"


def check_gradients() -> tuple[bool, str]:
    torch.manual_seed(0)
    attn = MultiHeadAttention(8, 2).double()
    q = torch.randn(3, 8, dtype=torch.float64)
    mask = torch.zeros(3, 3, dtype=torch.float64)
    mask[0, 2] = NEG_INF

    def loss_fn():
        out, _ = attn(q, q, q, mask)
        return (out ** 2).sum()

    loss = loss_fn()
    loss.backward()
    h = 1e-5
    for name, p in attn.named_parameters():
        flat = p.detach().view(-1)
        g = p.grad.view(-1)
        for k in (0, flat.numel() // 2):
            orig = float(flat[k])
            with torch.no_grad():
                flat[k] = orig + h
                up = float(loss_fn())
                flat[k] = orig - h
                down = float(loss_fn())
                flat[k] = orig
            fd = (up - down) / (2 * h)
            rel = abs(fd - float(g[k])) / max(abs(fd), abs(float(g[k])), 1e-8)
            if rel > 1e-4:
                return False, f"{name}[{k}]: rel err {rel:.2e}"
    # blocked entries get exactly zero weight
    _, w = attn(q, q, q, mask, return_weights=True)
    if float(w.detach()[:, 0, 2].abs().max()) != 0.0:
        return False, "masked attention weight not exactly zero"
    return True, "ok"


def check_metrics() -> tuple[bool, str]:
    box = CornerBox(0, 0, 10, 10)
    gt = {1: [(1, box)], 2: [(1, box)]}
    pred_switch = {1: [(5, box)], 2: [(6, box)]}
    rep = clear_metrics(gt, pred_switch)
    if rep.idsw != 1 or abs(rep.mota - 0.5) > 1e-12:
        return False, f"id-switch case: mota {rep.mota}, idsw {rep.idsw}"
    gt4 = {t: [(1, box)] for t in range(1, 5)}
    pred_split = {1: [(7, box)], 2: [(7, box)], 3: [(8, box)], 4: [(8, box)]}
    v = idf1(gt4, pred_split)
    if abs(v - 0.5) > 1e-12:
        return False, f"split-track idf1 {v} != 0.5"
    return True, "ok"


def check_softmax() -> tuple[bool, str]:
    scores = torch.zeros(1, 2, dtype=torch.float64)
    mask = torch.tensor([[0.0, -10.0]], dtype=torch.float64)
    out = masked_softmax(scores, mask)
    want = 1.0 / (1.0 + math.exp(-10))
    if abs(float(out[0, 0]) - want) > 1e-12:
        return False, f"soft-masked weight {float(out[0, 0])} != {want}"
    return True, "ok"


CHECKS = [
    ("fusion_mask_oracle", check_fusion_mask),
    ("hungarian_oracle", check_hungarian),
    ("gradient_check", check_gradients),
    ("metric_oracle", check_metrics),
    ("masked_softmax_oracle", check_softmax),
]


def run_selftest(inject_fault: str | None = None) -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in CHECKS:
        if name == "fusion_mask_oracle":
            ok, msg = fn(inject_fault == "fusion_mask")
        else:
            ok, msg = fn()
        results.append((name, ok, msg))
    return results
