"""Slow, independent reference computations used to freeze expected values.

None of these share code paths with the package: the eigensolver is a
textbook cyclic Jacobi, products are explicit loops, and bf16 rounding is
done on the integer bit patterns.
"""

import math

import numpy as np


def jacobi_eigh(a, tol=1e-14, max_sweeps=100):
    """Cyclic Jacobi rotations; returns (eigenvalues desc, eigenvectors as columns)."""
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = math.sqrt(sum(a[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off <= tol * max(1.0, np.abs(a).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q], rot[q, p] = s, -s
                a = rot.T @ a @ rot
                v = v @ rot
    else:
        raise RuntimeError("jacobi did not converge")
    w = np.diag(a).copy()
    order = np.argsort(-w)
    return w[order], v[:, order]


def outer_sum_covariance(rows):
    rows = [np.asarray(r, dtype=np.float64) for r in rows]
    d = rows[0].size
    acc = [[0.0] * d for _ in range(d)]
    for r in rows:
        for i in range(d):
            for j in range(d):
                acc[i][j] += r[i] * r[j]
    return np.array(acc) / len(rows)


def loop_matmul(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            out[i, j] = math.fsum(a[i, k] * b[k, j] for k in range(a.shape[1]))
    return out


def bf16_bits_from_f64(x):
    """Round-to-nearest-even f64 -> bf16, via round-to-odd f32.

    Rounding to f32 with the sticky (odd) bit and then to bf16 with ties to
    even equals a single correctly rounded conversion, since f32 carries
    more than two extra bits over bf16.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    f32 = x.astype(np.float32)
    back = f32.astype(np.float64)
    inexact = back != x
    # step the rounded-to-nearest result toward zero where it overshot
    over = inexact & (np.abs(back) > np.abs(x))
    f32 = np.where(over, np.nextafter(f32, np.float32(0)), f32)
    bits = f32.view(np.uint32).copy()
    bits[inexact] |= 1
    lower = bits & 0xFFFF
    upper = bits >> 16
    round_up = (lower > 0x8000) | ((lower == 0x8000) & ((upper & 1) == 1))
    return (upper + round_up).astype(np.uint16)


def bf16_bits_to_f64(bits):
    bits = np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16
    return bits.view(np.float32).astype(np.float64)
