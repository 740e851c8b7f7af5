"""Shared brute-force oracles and helpers for the test suite."""

import numpy as np
import pytest


def conv_loop(x, k):
    """Direct valid cross-correlation, one output element at a time."""
    B, H, W, Ci = x.shape
    n, _, _, Co = k.shape
    out = np.zeros((B, H - n + 1, W - n + 1, Co))
    for b in range(B):
        for y in range(H - n + 1):
            for xx in range(W - n + 1):
                for co in range(Co):
                    s = 0.0
                    for i in range(n):
                        for j in range(n):
                            for ci in range(Ci):
                                s += k[i, j, ci, co] * x[b, y + i, xx + j, ci]
                    out[b, y, xx, co] = s
    return out


def maxpool_loop(x, k):
    """Window maxima over the last three axes ``H, W, C``; leading axes pass through."""
    *lead, H, W, C = x.shape
    Ho, Wo = H // k, W // k
    flat = x.reshape(-1, H, W, C)
    out = np.zeros((flat.shape[0], Ho, Wo, C))
    for t in range(flat.shape[0]):
        for i in range(Ho):
            for j in range(Wo):
                for c in range(C):
                    best = -np.inf
                    for a in range(k):
                        for b in range(k):
                            best = max(best, flat[t, i * k + a, j * k + b, c])
                    out[t, i, j, c] = best
    return out.reshape(*lead, Ho, Wo, C)


def rotate_dense(op, kernel2d):
    """Apply a rotation operator via its per-target entry list (no sparse algebra)."""
    n = op.n
    out = np.zeros((n, n))
    for (r, q), srcs in op.entries.items():
        out[r, q] = sum(w * kernel2d[sr, sc] for (sr, sc), w in srcs)
    return out


def group_bank_loop(base, operators):
    """Two-step oracle: rotate every slice, then shift the orientation axis."""
    n, _, N, Ci, Co = base.shape
    bank = np.zeros((N, n, n, N, Ci, Co))
    for j, op in enumerate(operators):
        rot = np.zeros_like(base, dtype=np.float64)
        for m in range(N):
            for ci in range(Ci):
                for co in range(Co):
                    rot[:, :, m, ci, co] = rotate_dense(op, base[:, :, m, ci, co])
        for m in range(N):
            bank[j][:, :, m] = rot[:, :, (m - j) % N]
    return bank


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
