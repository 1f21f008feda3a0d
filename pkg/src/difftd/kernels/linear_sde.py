"""Batched Euler-Maruyama for linear SDEs under a linear-Gaussian policy with
quadratic reward rate, accumulating the discounted return.

Two paths advance together on the same Brownian draws: a fine one with step
``dt`` and a coarse one with step ``2 dt`` (summed increments, action draw of
the first fine step of each pair). ``2 * fine - coarse`` cancels the O(dt)
discretisation bias.

State arrays are updated in place. ``Zs`` is (T, N, m), ``Za`` is (T, N, k),
``T`` must be even and ``k0`` (global index of the first fine step) too.
"""

import math

import numpy as np

from .._accel import USE_NUMBA, njit, pick_by_batch


def _chunk_numpy(Sf, Sc, A, Bm, K, Sig, La, Q, R, Zs, Za, dt, gamma, k0, acc_f, acc_c, rho_max):
    sq = math.sqrt(dt)
    for j in range(Zs.shape[0]):
        k = k0 + j
        disc = math.exp(-gamma * k * dt)
        act = Sf @ K.T + Za[j] @ La.T
        rho = -np.einsum("bi,ij,bj->b", Sf, Q, Sf) - np.einsum("bi,ij,bj->b", act, R, act)
        np.maximum(rho_max, np.abs(rho), out=rho_max)
        acc_f += disc * rho * dt
        Sf += (Sf @ A.T + act @ Bm.T) * dt + (Zs[j] @ Sig.T) * sq
        if j % 2 == 0:
            act = Sc @ K.T + Za[j] @ La.T
            rho = -np.einsum("bi,ij,bj->b", Sc, Q, Sc) - np.einsum("bi,ij,bj->b", act, R, act)
            acc_c += disc * rho * (2.0 * dt)
            Sc += (Sc @ A.T + act @ Bm.T) * (2.0 * dt) + ((Zs[j] + Zs[j + 1]) @ Sig.T) * sq


@njit
def _quad(x, M):
    acc = 0.0
    for i in range(x.shape[0]):
        row = 0.0
        for j in range(x.shape[0]):
            row += M[i, j] * x[j]
        acc += x[i] * row
    return acc


@njit
def _chunk_numba(Sf, Sc, A, Bm, K, Sig, La, Q, R, Zs, Za, dt, gamma, k0, acc_f, acc_c, rho_max):
    T, N, m = Zs.shape
    n = Sf.shape[1]
    ka = Za.shape[2]
    sq = math.sqrt(dt)
    act = np.empty(ka)
    ds = np.empty(n)
    for b in range(N):
        for j in range(T):
            disc = math.exp(-gamma * (k0 + j) * dt)
            for stage in range(2):
                if stage == 1 and j % 2 == 1:
                    break
                S = Sf if stage == 0 else Sc
                h = dt if stage == 0 else 2.0 * dt
                for p in range(ka):
                    x = 0.0
                    for i in range(n):
                        x += K[p, i] * S[b, i]
                    for q in range(ka):
                        x += La[p, q] * Za[j, b, q]
                    act[p] = x
                rho = -_quad(S[b], Q) - _quad(act, R)
                for i in range(n):
                    x = 0.0
                    for q in range(n):
                        x += A[i, q] * S[b, q]
                    for p in range(ka):
                        x += Bm[i, p] * act[p]
                    w = 0.0
                    for r in range(m):
                        if stage == 0:
                            w += Sig[i, r] * Zs[j, b, r]
                        else:
                            w += Sig[i, r] * (Zs[j, b, r] + Zs[j + 1, b, r])
                    ds[i] = x * h + w * sq
                for i in range(n):
                    S[b, i] += ds[i]
                if stage == 0:
                    acc_f[b] += disc * rho * dt
                    if abs(rho) > rho_max[b]:
                        rho_max[b] = abs(rho)
                else:
                    acc_c[b] += disc * rho * h


# The compiled loop wins at every batch size for n >= 2; for scalar systems
# numpy overtakes it near 1000 paths.
_chunk_small = pick_by_batch(_chunk_numba, _chunk_numpy, 512, batch_arg=0)


def discounted_chunk(Sf, *rest):
    if USE_NUMBA and Sf.shape[1] >= 2:
        return _chunk_numba(Sf, *rest)
    return _chunk_small(Sf, *rest)
