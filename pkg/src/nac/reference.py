"""Loop-level reference forward pass, independent of the tape implementation.

Everything here is written per token / per query with plain NumPy in a
caller-chosen dtype. ``np.longdouble`` gives the finite-difference gradient
check roughly three extra digits of headroom over float64.
"""
from __future__ import annotations

import numpy as np

from nac.attention import NACConfig, NACParams
from nac.wiring import NCPCell


def _arr(t, dtype):
    return np.asarray(t.data, dtype=dtype)


def cell_step(cell: NCPCell, u, x_prev, dtype=np.float64):
    """One literal full-width update of ``cell`` for a single input vector."""
    p = {k: _arr(v, dtype) for k, v in cell.params.items()}
    m_in = cell.m_in.astype(dtype)
    m_rec = cell.m_rec.astype(dtype)
    u_t = np.asarray(u, dtype=dtype) * p["w_in"] + p["b_in"]
    pre = u_t @ (p["W_in"] * m_in) + np.asarray(x_prev, dtype=dtype) @ (p["W_rec"] * m_rec) + p["b"]
    x = np.tanh(pre) * cell.mask_act.astype(dtype)
    y = x[cell.output_neurons] * p["w_out"] + p["b_out"]
    return y, x


def cell_run(cell: NCPCell, u, steps: int, dtype=np.float64):
    x = np.zeros(cell.wiring.n_total, dtype=dtype)
    for _ in range(steps):
        y, x = cell_step(cell, u, x, dtype)
    return y


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _logit(phi, omega, t, config: NACConfig):
    if config.mode == "exact":
        return phi / omega * (1.0 - np.exp(-omega * t))
    if config.mode == "euler":
        a = phi * 0.0
        dt = t / config.euler_steps
        for _ in range(config.euler_steps):
            a = a + dt * (-omega * a + phi)
        return a
    return phi / omega


def select_keys(q_vec, keys, k_eff):
    """Indices of the ``k_eff`` best keys by dot score, ties to the lower index."""
    scores = [float(np.dot(q_vec, kj)) for kj in keys]
    order = sorted(range(len(keys)), key=lambda j: (-scores[j], j))
    return order[:k_eff]


def reference_forward(params: NACParams, config: NACConfig, x, timestamps=None, dtype=np.float64):
    x = np.asarray(x, dtype=dtype)
    bsz, steps, d_model = x.shape
    heads, d = config.heads, config.d_head
    proj = {}
    for name, gate in (("q", params.q_gate), ("k", params.k_gate), ("v", params.v_gate)):
        out = np.empty_like(x)
        for b in range(bsz):
            for i in range(steps):
                out[b, i] = cell_run(gate, x[b, i], 1, dtype)
        proj[name] = out
    t_a, t_b = _arr(params.t_a, dtype)[0], _arr(params.t_b, dtype)[0]
    t_raw = np.ones((bsz, steps), dtype=dtype) if timestamps is None else np.asarray(timestamps, dtype=dtype)
    t_ps = _sigmoid(t_a * t_raw + t_b)
    eps = dtype(config.epsilon) if isinstance(dtype, type) else config.epsilon
    k_eff = steps if config.pairwise_full else min(config.top_k, steps)
    concat = np.empty((bsz, steps, d_model), dtype=dtype)
    for h, bb in enumerate(params.backbones):
        sl = slice(h * d, (h + 1) * d)
        split = bb.split
        for b in range(bsz):
            qs, ks, vs = proj["q"][b, :, sl], proj["k"][b, :, sl], proj["v"][b, :, sl]
            for i in range(steps):
                sel = select_keys(qs[i], ks, k_eff)
                logits = []
                for j in sel:
                    y = cell_run(bb.cell, np.concatenate([qs[i], ks[j]]), bb.steps, dtype)
                    phi = _sigmoid(np.mean(y[:split]))
                    omega = np.log1p(np.exp(np.mean(y[split:]))) + eps
                    logits.append(_logit(phi, omega, t_ps[b, i], config))
                logits = np.array(logits, dtype=dtype)
                w = np.exp(logits - logits.max())
                w = w / w.sum()
                acc = np.zeros(d, dtype=dtype)
                for wj, j in zip(w, sel):
                    acc = acc + wj * vs[j]
                concat[b, i, sl] = config.delta_t * acc
    return concat @ _arr(params.w_o, dtype) + _arr(params.b_o, dtype)


def scaled_dot_attention(q, k, v):
    """Textbook softmax(q k^T / sqrt(d)) v for one head, ``[T, D]`` inputs."""
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    s = q @ k.T / np.sqrt(q.shape[-1])
    w = np.exp(s - s.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    return w @ v
