"""Tanh-MLP kernels: value, input gradient, Hessian-vector product and
second-order directional jets with their parameter gradients.

Parameters are one flat float64 vector; layer ``l`` stores ``W_l`` (out x in,
row-major) followed by ``b_l``. ``widths`` is ``(n, h_1, ..., h_k, 1)``; every
layer except the last applies tanh.

Each kernel exists twice: ``*_numba`` loops over samples and is compiled with
numba, ``*_numpy`` is batched matrix algebra. Both take ``S`` of shape (B, n).
The public names dispatch on B: the compiled loop for tiny batches, numpy
otherwise.
"""

import numpy as np

from .._accel import njit, pick_by_batch


def param_count(widths):
    return int(sum(widths[i + 1] * (widths[i] + 1) for i in range(len(widths) - 1)))


def unpack(params, widths):
    layers = []
    off = 0
    for i in range(len(widths) - 1):
        n_in, n_out = int(widths[i]), int(widths[i + 1])
        W = params[off:off + n_out * n_in].reshape(n_out, n_in)
        off += n_out * n_in
        layers.append((W, params[off:off + n_out]))
        off += n_out
    return layers


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------

def _value_numpy(params, widths, S):
    h = S
    layers = unpack(params, widths)
    for W, b in layers[:-1]:
        h = np.tanh(h @ W.T + b)
    W, b = layers[-1]
    return (h @ W.T + b)[:, 0]


def _grad_numpy(params, widths, S):
    layers = unpack(params, widths)
    ts = []
    h = S
    for W, b in layers[:-1]:
        h = np.tanh(h @ W.T + b)
        ts.append(h)
    adj = np.broadcast_to(layers[-1][0], (S.shape[0], layers[-1][0].shape[1]))
    for (W, _), t in zip(reversed(layers[:-1]), reversed(ts)):
        adj = (adj * (1.0 - t * t)) @ W
    return np.array(adj)


def _hvp_numpy(params, widths, S, V):
    layers = unpack(params, widths)
    ts, zds = [], []
    h, hd = S, V
    for W, b in layers[:-1]:
        zd = hd @ W.T
        h = np.tanh(h @ W.T + b)
        g = 1.0 - h * h
        hd = g * zd
        ts.append(h)
        zds.append(zd)
    W_out = layers[-1][0]
    adj = np.broadcast_to(W_out, (S.shape[0], W_out.shape[1]))
    adj_dot = np.zeros_like(adj)
    for (W, _), t, zd in zip(reversed(layers[:-1]), reversed(ts), reversed(zds)):
        g = 1.0 - t * t
        q = -2.0 * t * g
        zbar = adj * g
        zbar_dot = adj_dot * g + adj * q * zd
        adj = zbar @ W
        adj_dot = zbar_dot @ W
    return np.array(adj_dot)


def _jet_forward_numpy(params, widths, S, U):
    layers = unpack(params, widths)
    h, hd, hdd = S, U, np.zeros_like(S)
    cache = []
    for W, b in layers[:-1]:
        cache.append((h, hd, hdd))
        z = h @ W.T + b
        zd = hd @ W.T
        zdd = hdd @ W.T
        t = np.tanh(z)
        g = 1.0 - t * t
        q = -2.0 * t * g
        h, hd, hdd = t, g * zd, g * zdd + q * zd * zd
        cache[-1] = cache[-1] + (t, zd, zdd)
    W, b = layers[-1]
    cache.append((h, hd, hdd))
    out = np.stack([(h @ W.T + b)[:, 0], (hd @ W.T)[:, 0], (hdd @ W.T)[:, 0]], axis=1)
    return out, layers, cache


def _jet_numpy(params, widths, S, U):
    return _jet_forward_numpy(params, widths, S, U)[0]


def _jet_param_grad_numpy(params, widths, S, U, C):
    _, layers, cache = _jet_forward_numpy(params, widths, S, U)
    grads = []
    h, hd, hdd = cache[-1]
    lz, lzd, lzdd = C[:, 0:1], C[:, 1:2], C[:, 2:3]
    W = layers[-1][0]
    grads.append((lz.T @ h + lzd.T @ hd + lzdd.T @ hdd, lz.sum(axis=0)))
    lh, lhd, lhdd = lz @ W, lzd @ W, lzdd @ W
    for l in range(len(layers) - 2, -1, -1):
        W = layers[l][0]
        h_in, hd_in, hdd_in, t, zd, zdd = cache[l]
        g = 1.0 - t * t
        q = -2.0 * t * g
        dq = -2.0 * g * g + 4.0 * t * t * g
        lz = lh * g + lhd * zd * q + lhdd * (q * zdd + dq * zd * zd)
        lzd = lhd * g + lhdd * 2.0 * q * zd
        lzdd = lhdd * g
        grads.append((lz.T @ h_in + lzd.T @ hd_in + lzdd.T @ hdd_in, lz.sum(axis=0)))
        lh, lhd, lhdd = lz @ W, lzd @ W, lzdd @ W
    flat = []
    for dW, db in reversed(grads):
        flat.append(dW.ravel())
        flat.append(db)
    return np.concatenate(flat)


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

@njit
def _offsets(widths):
    L = widths.shape[0] - 1
    off = np.zeros(L, dtype=np.int64)
    acc = 0
    for l in range(L):
        off[l] = acc
        acc += widths[l + 1] * (widths[l] + 1)
    return off


@njit
def _value_numba(params, widths, S):
    B = S.shape[0]
    L = widths.shape[0] - 1
    off = _offsets(widths)
    mw = widths.max()
    h = np.empty(mw)
    nh = np.empty(mw)
    out = np.empty(B)
    for bi in range(B):
        for j in range(widths[0]):
            h[j] = S[bi, j]
        for l in range(L):
            nin = widths[l]
            nout = widths[l + 1]
            o0 = off[l]
            for o in range(nout):
                z = params[o0 + nout * nin + o]
                base = o0 + o * nin
                for i in range(nin):
                    z += params[base + i] * h[i]
                nh[o] = np.tanh(z) if l < L - 1 else z
            for o in range(nout):
                h[o] = nh[o]
        out[bi] = h[0]
    return out


@njit
def _forward_store(params, widths, off, s, T, ZD, v):
    # fills tanh outputs T[l] and tangent pre-activations ZD[l] along v
    L = widths.shape[0] - 1
    mw = T.shape[1]
    h = np.empty(mw)
    hd = np.empty(mw)
    for j in range(widths[0]):
        h[j] = s[j]
        hd[j] = v[j]
    for l in range(L - 1):
        nin = widths[l]
        nout = widths[l + 1]
        o0 = off[l]
        for o in range(nout):
            z = params[o0 + nout * nin + o]
            zd = 0.0
            base = o0 + o * nin
            for i in range(nin):
                w = params[base + i]
                z += w * h[i]
                zd += w * hd[i]
            t = np.tanh(z)
            T[l, o] = t
            ZD[l, o] = zd
        for o in range(nout):
            t = T[l, o]
            h[o] = t
            hd[o] = (1.0 - t * t) * ZD[l, o]


@njit
def _grad_numba(params, widths, S):
    B, n = S.shape
    L = widths.shape[0] - 1
    off = _offsets(widths)
    mw = widths.max()
    T = np.empty((L, mw))
    ZD = np.empty((L, mw))
    zero = np.zeros(n)
    adj = np.empty(mw)
    zbar = np.empty(mw)
    out = np.empty((B, n))
    for bi in range(B):
        _forward_store(params, widths, off, S[bi], T, ZD, zero)
        nin = widths[L - 1]
        for i in range(nin):
            adj[i] = params[off[L - 1] + i]
        for l in range(L - 2, -1, -1):
            nin = widths[l]
            nout = widths[l + 1]
            o0 = off[l]
            for o in range(nout):
                t = T[l, o]
                zbar[o] = adj[o] * (1.0 - t * t)
            for i in range(nin):
                acc = 0.0
                for o in range(nout):
                    acc += params[o0 + o * nin + i] * zbar[o]
                adj[i] = acc
        for i in range(n):
            out[bi, i] = adj[i]
    return out


@njit
def _hvp_numba(params, widths, S, V):
    B, n = S.shape
    L = widths.shape[0] - 1
    off = _offsets(widths)
    mw = widths.max()
    T = np.empty((L, mw))
    ZD = np.empty((L, mw))
    adj = np.empty(mw)
    adj_dot = np.empty(mw)
    zbar = np.empty(mw)
    zbar_dot = np.empty(mw)
    out = np.empty((B, n))
    for bi in range(B):
        _forward_store(params, widths, off, S[bi], T, ZD, V[bi])
        nin = widths[L - 1]
        for i in range(nin):
            adj[i] = params[off[L - 1] + i]
            adj_dot[i] = 0.0
        for l in range(L - 2, -1, -1):
            nin = widths[l]
            nout = widths[l + 1]
            o0 = off[l]
            for o in range(nout):
                t = T[l, o]
                g = 1.0 - t * t
                zbar[o] = adj[o] * g
                zbar_dot[o] = adj_dot[o] * g - 2.0 * adj[o] * t * g * ZD[l, o]
            for i in range(nin):
                a = 0.0
                ad = 0.0
                for o in range(nout):
                    w = params[o0 + o * nin + i]
                    a += w * zbar[o]
                    ad += w * zbar_dot[o]
                adj[i] = a
                adj_dot[i] = ad
        for i in range(n):
            out[bi, i] = adj_dot[i]
    return out


@njit
def _jet_store(params, widths, off, s, u, H, HD, HDD, ZD, ZDD):
    # H[l], HD[l], HDD[l]: input jet of layer l; row L holds the final hidden jet
    L = widths.shape[0] - 1
    for j in range(widths[0]):
        H[0, j] = s[j]
        HD[0, j] = u[j]
        HDD[0, j] = 0.0
    for l in range(L - 1):
        nin = widths[l]
        nout = widths[l + 1]
        o0 = off[l]
        for o in range(nout):
            z = params[o0 + nout * nin + o]
            zd = 0.0
            zdd = 0.0
            base = o0 + o * nin
            for i in range(nin):
                w = params[base + i]
                z += w * H[l, i]
                zd += w * HD[l, i]
                zdd += w * HDD[l, i]
            t = np.tanh(z)
            g = 1.0 - t * t
            H[l + 1, o] = t
            HD[l + 1, o] = g * zd
            HDD[l + 1, o] = g * zdd - 2.0 * t * g * zd * zd
            ZD[l, o] = zd
            ZDD[l, o] = zdd


@njit
def _jet_numba(params, widths, S, U):
    B = S.shape[0]
    L = widths.shape[0] - 1
    off = _offsets(widths)
    mw = widths.max()
    H = np.empty((L, mw))
    HD = np.empty((L, mw))
    HDD = np.empty((L, mw))
    ZD = np.empty((L, mw))
    ZDD = np.empty((L, mw))
    out = np.empty((B, 3))
    for bi in range(B):
        _jet_store(params, widths, off, S[bi], U[bi], H, HD, HDD, ZD, ZDD)
        nin = widths[L - 1]
        o0 = off[L - 1]
        v = params[o0 + nin]
        vd = 0.0
        vdd = 0.0
        for i in range(nin):
            w = params[o0 + i]
            v += w * H[L - 1, i]
            vd += w * HD[L - 1, i]
            vdd += w * HDD[L - 1, i]
        out[bi, 0] = v
        out[bi, 1] = vd
        out[bi, 2] = vdd
    return out


@njit
def _jet_param_grad_numba(params, widths, S, U, C):
    B = S.shape[0]
    L = widths.shape[0] - 1
    off = _offsets(widths)
    mw = widths.max()
    H = np.empty((L, mw))
    HD = np.empty((L, mw))
    HDD = np.empty((L, mw))
    ZD = np.empty((L, mw))
    ZDD = np.empty((L, mw))
    lh = np.empty(mw)
    lhd = np.empty(mw)
    lhdd = np.empty(mw)
    lz = np.empty(mw)
    lzd = np.empty(mw)
    lzdd = np.empty(mw)
    grad = np.zeros(params.shape[0])
    for bi in range(B):
        a = C[bi, 0]
        c1 = C[bi, 1]
        c2 = C[bi, 2]
        if a == 0.0 and c1 == 0.0 and c2 == 0.0:
            continue
        _jet_store(params, widths, off, S[bi], U[bi], H, HD, HDD, ZD, ZDD)
        nin = widths[L - 1]
        o0 = off[L - 1]
        for i in range(nin):
            grad[o0 + i] += a * H[L - 1, i] + c1 * HD[L - 1, i] + c2 * HDD[L - 1, i]
            w = params[o0 + i]
            lh[i] = a * w
            lhd[i] = c1 * w
            lhdd[i] = c2 * w
        grad[o0 + nin] += a
        for l in range(L - 2, -1, -1):
            nin = widths[l]
            nout = widths[l + 1]
            o0 = off[l]
            for o in range(nout):
                t = H[l + 1, o]
                g = 1.0 - t * t
                q = -2.0 * t * g
                dq = -2.0 * g * g + 4.0 * t * t * g
                zd = ZD[l, o]
                lz[o] = lh[o] * g + lhd[o] * zd * q + lhdd[o] * (q * ZDD[l, o] + dq * zd * zd)
                lzd[o] = lhd[o] * g + lhdd[o] * 2.0 * q * zd
                lzdd[o] = lhdd[o] * g
                base = o0 + o * nin
                for i in range(nin):
                    grad[base + i] += lz[o] * H[l, i] + lzd[o] * HD[l, i] + lzdd[o] * HDD[l, i]
                grad[o0 + nout * nin + o] += lz[o]
            if l > 0:
                for i in range(nin):
                    x = 0.0
                    xd = 0.0
                    xdd = 0.0
                    for o in range(nout):
                        w = params[o0 + o * nin + i]
                        x += w * lz[o]
                        xd += w * lzd[o]
                        xdd += w * lzdd[o]
                    lh[i] = x
                    lhd[i] = xd
                    lhdd[i] = xdd
    return grad


# Largest batch at which the compiled per-sample loop still beats BLAS
# (hidden widths 64, state dims 2 to 64).
value = pick_by_batch(_value_numba, _value_numpy, 1)
grad_s = pick_by_batch(_grad_numba, _grad_numpy, 1)
hvp_s = pick_by_batch(_hvp_numba, _hvp_numpy, 2)
jet = pick_by_batch(_jet_numba, _jet_numpy, 4)
jet_param_grad = pick_by_batch(_jet_param_grad_numba, _jet_param_grad_numpy, 4)
