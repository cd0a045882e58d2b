"""NumPy reference implementations of the hot kernels.

Selected by :mod:`nac.kernels` when the compiled extension is missing or
``NAC_PURE_PYTHON=1`` is set. Signatures and results match ``_ckernels``.
"""
import numpy as np

EXP_CLAMP = 60.0
_TOPK_ROW_BLOCK = 64


def topk_lastdim(x, k):
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[-1]
    k = int(k)
    if k < 1:
        raise ValueError(f"top-k needs k >= 1, got {k}")
    k = min(k, n)
    rows = x.reshape(-1, n)
    idx = np.empty((rows.shape[0], k), dtype=np.int64)
    # row blocks bound the argsort scratch memory
    for start in range(0, rows.shape[0], _TOPK_ROW_BLOCK):
        block = rows[start:start + _TOPK_ROW_BLOCK]
        order = np.argsort(-block, axis=-1, kind="stable")
        idx[start:start + _TOPK_ROW_BLOCK] = order[:, :k]
    vals = np.take_along_axis(rows, idx, axis=-1)
    shape = x.shape[:-1] + (k,)
    return vals.reshape(shape), idx.reshape(shape)


def _clamped_neg(z):
    return np.clip(-z, -EXP_CLAMP, EXP_CLAMP)


def exact_logits(phi, omega, t):
    em = np.expm1(_clamped_neg(omega * t))
    return -(phi / omega) * em


def exact_logits_grad(phi, omega, t, g):
    em = np.expm1(_clamped_neg(omega * t))
    e = em + 1.0
    a_star = phi / omega
    g_phi = g * (-em / omega)
    g_omega = g * (a_star / omega * em + a_star * t * e)
    g_t = g * (phi * e)
    return g_phi, g_omega, g_t


def euler_logits(phi, omega, t, n_steps):
    dt = t / n_steps
    a = np.zeros(np.broadcast(phi, omega, t).shape)
    for _ in range(n_steps):
        a = a + dt * (-omega * a + phi)
    return a


def euler_logits_grad(phi, omega, t, n_steps, g):
    dt = t / n_steps
    traj = [np.zeros(np.broadcast(phi, omega, t).shape)]
    for _ in range(n_steps):
        a = traj[-1]
        traj.append(a + dt * (-omega * a + phi))
    g_phi = np.zeros_like(traj[0])
    g_omega = np.zeros_like(traj[0])
    g_dt = np.zeros_like(traj[0])
    gn = np.array(g, dtype=np.float64, copy=True)
    for n in range(n_steps - 1, -1, -1):
        a = traj[n]
        g_phi += gn * dt
        g_omega += gn * (-dt * a)
        g_dt += gn * (-omega * a + phi)
        gn = gn * (1.0 - dt * omega)
    return g_phi, g_omega, g_dt / n_steps


def rnn_forward(x, w_x, w_h, b):
    """Elman recurrence h_t = tanh(x_t W_x + h_{t-1} W_h + b) over axis 1 of ``x``."""
    bsz, steps, _ = x.shape
    h = np.zeros((bsz, w_h.shape[0]))
    out = np.empty((bsz, steps, w_h.shape[0]))
    drive = x @ w_x + b
    for i in range(steps):
        h = np.tanh(drive[:, i] + h @ w_h)
        out[:, i] = h
    return out
