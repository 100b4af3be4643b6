"""Jitted inner loops shared by the equalizer, backprop and trainer modules.

Layout conventions
------------------
Signals are complex128 arrays of shape ``(2, n)``.  Linear taps are float64
``(n_steps, 2, 2, T)`` with ``out[a, n] = sum_{b,t} taps[a, b, t] * in[b, n + T-1-t]``
("valid" convolution: output ``n`` is centred on input ``n + (T-1)//2``).
The matched filter maps a window of ``2*(nsym-1) + M`` samples to ``nsym``
symbols, ``y[:, j] = sum_m h[m] * in[:, 2*j + M-1-m]``.

A tape holds the input of every layer: ``tape[l, :, :lengths[l]]`` is the
input of layer ``l`` and ``tape[n_layers]`` is the matched-filter input.
``kinds[l]`` is 0 for a Kerr layer and 1 for a linear layer; ``pidx[l]``
indexes the layer's parameters.  ``phis[pidx, :]`` stores the Kerr angles.
"""
import numpy as np
from numba import njit

from .numerics import Q_ADJ, Q_ANGLE, Q_SIGNAL, Q_TAPS, qck, qk

KERR, LINEAR = 0, 1


@njit(cache=True)
def taylor_cos_sin(phi, order):
    """Truncated Maclaurin series of cos and sin up to ``order``."""
    c = 1.0
    s = 0.0
    term = 1.0
    for k in range(1, order + 1):
        term = term * phi / k
        r = k % 4
        if r == 1:
            s += term
        elif r == 2:
            c -= term
        elif r == 3:
            s -= term
        else:
            c += term
    return c, s


@njit(cache=True)
def kerr_fwd(x, n, gam, out, phi_out, qt, quant):
    for i in range(n):
        a = x[0, i]
        b = x[1, i]
        p2 = a.real * a.real + a.imag * a.imag + b.real * b.real + b.imag * b.imag
        phi = gam * p2
        if quant:
            phi = qk(phi, qt[Q_ANGLE])
        phi_out[i] = phi
        e = complex(np.cos(phi), np.sin(phi))
        if quant:
            out[0, i] = qck(a * e, qt[Q_SIGNAL])
            out[1, i] = qck(b * e, qt[Q_SIGNAL])
        else:
            out[0, i] = a * e
            out[1, i] = b * e


@njit(cache=True)
def linear_fwd(x, n_in, w, out, qt, quant):
    T = w.shape[2]
    n_out = n_in - T + 1
    for a in range(2):
        for i in range(n_out):
            acc = 0j
            for b in range(2):
                for t in range(T):
                    acc += w[a, b, t] * x[b, i + T - 1 - t]
            if quant:
                acc = qck(acc, qt[Q_SIGNAL])
            out[a, i] = acc
    return n_out


@njit(cache=True)
def mf_fwd(x, h, nsym, y, qt, quant):
    M = h.shape[0]
    for p in range(2):
        for j in range(nsym):
            acc = 0j
            base = 2 * j + M - 1
            for m in range(M):
                acc += h[m] * x[p, base - m]
            if quant:
                acc = qck(acc, qt[Q_SIGNAL])
            y[p, j] = acc


@njit(cache=True)
def forward_window(x0, n0, kinds, pidx, taps, gams, h, nsym, tape, lengths, phis, y, qt, quant):
    """Run all layers over a window; fills ``tape``, ``lengths``, ``phis``, ``y``."""
    n_layers = kinds.shape[0]
    for i in range(n0):
        tape[0, 0, i] = x0[0, i]
        tape[0, 1, i] = x0[1, i]
    lengths[0] = n0
    for l in range(n_layers):
        n = lengths[l]
        if kinds[l] == KERR:
            kerr_fwd(tape[l], n, gams[pidx[l]], tape[l + 1], phis[pidx[l]], qt, quant)
            lengths[l + 1] = n
        else:
            lengths[l + 1] = linear_fwd(tape[l], n, taps[pidx[l]], tape[l + 1], qt, quant)
    mf_fwd(tape[n_layers], h, nsym, y, qt, quant)


@njit(cache=True)
def loss_adjoint(y, x, nsym, div, dy, qt, quant):
    loss = 0.0
    for p in range(2):
        for j in range(nsym):
            e = y[p, j] - x[p, j]
            loss += e.real * e.real + e.imag * e.imag
            d = 2.0 * div * e
            if quant:
                d = qck(d, qt[Q_ADJ])
            dy[p, j] = d
    return loss * div


@njit(cache=True)
def mf_bwd(dy, h, nsym, dx, n_in, qt, quant):
    M = h.shape[0]
    for p in range(2):
        for i in range(n_in):
            dx[p, i] = 0j
        for j in range(nsym):
            base = 2 * j + M - 1
            d = dy[p, j]
            for m in range(M):
                dx[p, base - m] += h[m] * d
        if quant:
            for i in range(n_in):
                dx[p, i] = qck(dx[p, i], qt[Q_ADJ])


@njit(cache=True)
def linear_bwd(dout, n_out, x_in, w, din, g, need_din, qt, quant):
    """Adds nothing to ``g``: overwrites it with this window's tap gradient."""
    T = w.shape[2]
    n_in = n_out + T - 1
    if need_din:
        for b in range(2):
            for i in range(n_in):
                din[b, i] = 0j
    for a in range(2):
        for b in range(2):
            for t in range(T):
                g[a, b, t] = 0.0
    for a in range(2):
        for i in range(n_out):
            d = dout[a, i]
            if d == 0j:
                continue
            for b in range(2):
                for t in range(T):
                    xi = x_in[b, i + T - 1 - t]
                    g[a, b, t] += d.real * xi.real + d.imag * xi.imag
                    if need_din:
                        din[b, i + T - 1 - t] += w[a, b, t] * d
    if quant:
        for a in range(2):
            for b in range(2):
                for t in range(T):
                    g[a, b, t] = qk(g[a, b, t], qt[Q_TAPS])
        if need_din:
            for b in range(2):
                for i in range(n_in):
                    din[b, i] = qck(din[b, i], qt[Q_ADJ])


@njit(cache=True)
def kerr_bwd(dv, n, u, v, phi, gam, din, taylor_order, sign_flip, qt, quant):
    """Jacobian-transpose of u -> u*exp(j*gam*|u|^2) at the taped point.

    ``v`` is the taped forward output, so only exp(-j*phi) is evaluated here;
    ``taylor_order > 0`` replaces its cos/sin by truncated series.
    ``sign_flip`` negates the power-coupling term (fault injection only).
    """
    for i in range(n):
        d0 = dv[0, i]
        d1 = dv[1, i]
        v0 = v[0, i]
        v1 = v[1, i]
        s = -((d0.real * v0.imag - d0.imag * v0.real) + (d1.real * v1.imag - d1.imag * v1.real))
        if taylor_order > 0:
            c, sn = taylor_cos_sin(phi[i], taylor_order)
        else:
            c = np.cos(phi[i])
            sn = np.sin(phi[i])
        em = complex(c, -sn)
        k = 2.0 * gam * s * sign_flip
        r0 = em * d0 + k * u[0, i]
        r1 = em * d1 + k * u[1, i]
        if quant:
            r0 = qck(r0, qt[Q_ADJ])
            r1 = qck(r1, qt[Q_ADJ])
        din[0, i] = r0
        din[1, i] = r1


@njit(cache=True)
def backward_window(dy, nsym, kinds, pidx, taps, gams, h, tape, lengths, phis, adj_a, adj_b, grads,
                    taylor_order, kerr_sign, qt, quant):
    """Reverse pass over a taped window; writes per-step tap gradients into ``grads``."""
    n_layers = kinds.shape[0]
    mf_bwd(dy, h, nsym, adj_a, lengths[n_layers], qt, quant)
    cur = adj_a
    nxt = adj_b
    for l in range(n_layers - 1, -1, -1):
        need = l > 0
        if kinds[l] == KERR:
            if need:
                kerr_bwd(cur, lengths[l], tape[l], tape[l + 1], phis[pidx[l]], gams[pidx[l]], nxt,
                         taylor_order, kerr_sign, qt, quant)
            else:
                continue
        else:
            linear_bwd(cur, lengths[l + 1], tape[l], taps[pidx[l]], nxt, grads[pidx[l]], need, qt, quant)
        tmp = cur
        cur = nxt
        nxt = tmp


@njit(cache=True)
def sgd_apply(taps, grads, xi, qt, quant):
    for s in range(taps.shape[0]):
        for a in range(2):
            for b in range(2):
                for t in range(taps.shape[3]):
                    v = taps[s, a, b, t] - xi * grads[s, a, b, t]
                    if quant:
                        v = qk(v, qt[Q_TAPS])
                    taps[s, a, b, t] = v


@njit(cache=True)
def normalize_input(r, start, n, scale, out, qt, quant):
    for p in range(2):
        for i in range(n):
            z = r[p, start + i] * scale
            if quant:
                z = qck(z, qt[Q_SIGNAL])
            out[p, i] = z


@njit(cache=True)
def train_loop(r, pilots, k_first, n_batches, B, kinds, pidx, taps, gams, h, half_window, phase,
               in_scale, div, xi, delay, taylor_order, qt, quant, snap_every,
               sq_err, batch_loss, snaps):
    """Online SGD over consecutive batches of ``B`` pilots.

    ``taps`` is updated in place.  The gradient of batch ``i`` is applied
    after batch ``i + delay`` has been processed.
    """
    n_steps = taps.shape[0]
    T = taps.shape[3]
    M = h.shape[0]
    n0 = 2 * (B - 1) + M + (T - 1) * n_steps
    n_layers = kinds.shape[0]
    tape = np.zeros((n_layers + 1, 2, n0), dtype=np.complex128)
    lengths = np.zeros(n_layers + 1, dtype=np.int64)
    phis = np.zeros((n_steps, n0))
    x0 = np.zeros((2, n0), dtype=np.complex128)
    y = np.zeros((2, B), dtype=np.complex128)
    dy = np.zeros((2, B), dtype=np.complex128)
    adj_a = np.zeros((2, n0), dtype=np.complex128)
    adj_b = np.zeros((2, n0), dtype=np.complex128)
    pending = np.zeros((delay + 1, n_steps, 2, 2, T))
    n_snap = 0
    for bi in range(n_batches):
        k0 = k_first + bi * B
        start = 2 * k0 + phase - half_window
        normalize_input(r, start, n0, in_scale, x0, qt, quant)
        forward_window(x0, n0, kinds, pidx, taps, gams, h, B, tape, lengths, phis, y, qt, quant)
        xb = pilots[:, k0:k0 + B]
        loss = loss_adjoint(y, xb, B, div, dy, qt, quant)
        if not np.isfinite(loss):
            return bi
        batch_loss[bi] = loss
        for j in range(B):
            e0 = y[0, j] - xb[0, j]
            e1 = y[1, j] - xb[1, j]
            sq_err[bi * B + j] = (e0.real * e0.real + e0.imag * e0.imag
                                  + e1.real * e1.real + e1.imag * e1.imag) / 2.0
        slot = bi % (delay + 1)
        backward_window(dy, B, kinds, pidx, taps, gams, h, tape, lengths, phis, adj_a, adj_b,
                        pending[slot], taylor_order, 1.0, qt, quant)
        apply_slot = (bi - delay) % (delay + 1)
        if bi >= delay:
            g = pending[apply_slot]
            for s in range(n_steps):
                for a in range(2):
                    for b in range(2):
                        for t in range(T):
                            if not np.isfinite(g[s, a, b, t]):
                                return bi
            sgd_apply(taps, g, xi, qt, quant)
        if snap_every > 0 and (bi + 1) % snap_every == 0 and n_snap < snaps.shape[0]:
            snaps[n_snap] = taps
            n_snap += 1
    return -1
