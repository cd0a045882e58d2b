"""Single-token emulation of a one-hidden-layer sigmoid network.

Setup: ``T = 1``, steady mode, sparsity 0. With one token the softmax over
its single key is exactly 1, so every head returns ``delta_t * v``. Three
checks follow from that:

* :func:`literal_gap` forces ``omega = 1`` and ``v = 1`` and compares the
  layer with ``sum_h W_o[h] sigmoid(z_h) + b_o``, where ``z_h`` is head ``h``'s
  content-gate pre-activation. The layer output is ``delta_t * sum_h W_o[h] +
  b_o`` whatever ``z_h`` is, so this gap does not close.
* :func:`logit_gap` checks that the steady logit itself equals
  ``sigmoid(z_h)`` once ``omega = 1``.
* :func:`value_path_gap` leaves the value gate free. Its one tanh layer is a
  sigmoid layer via ``tanh(z) = 2 sigmoid(2z) - 1``, which makes the layer an
  exact ``d_model``-unit sigmoid network.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from nac.attention import (NACConfig, NACParams, curate_pairs, gate_heads, logits_steady, nac_forward,
                           project_qkv)
from nac.tensor import no_grad


def omega_bias(epsilon: float) -> float:
    """Head value ``c`` with ``softplus(c) + epsilon == 1``."""
    return float(np.log(np.expm1(1.0 - epsilon)))


@dataclass
class Construction:
    config: NACConfig
    params: NACParams


def build(d_model: int = 8, heads: int = 4, seed: int = 0, delta_t: float = 1.0, force_value: bool = True):
    cfg = NACConfig(d_model=d_model, heads=heads, top_k=1, mode="steady", sparsity=0.0, seed=seed,
                    delta_t=delta_t)
    params = NACParams(cfg)
    c = omega_bias(cfg.epsilon)
    for bb in params.backbones:
        bb.params["w_out"].data[bb.split:] = 0.0
        bb.params["b_out"].data[bb.split:] = c
    if force_value:
        params.v_gate.params["w_out"].data[:] = 0.0
        params.v_gate.params["b_out"].data[:] = 1.0
    return Construction(cfg, params)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def head_preactivations(con: Construction, x) -> np.ndarray:
    """Content-gate pre-activation ``z_h`` per sample and head, ``[B, H]``."""
    with no_grad():
        q, k, _ = project_qkv(x, con.params, con.config)
        out = []
        for h, bb in enumerate(con.params.backbones):
            sel = curate_pairs(q[:, h], k[:, h], 1)
            z, _ = bb.heads(sel.pairs())
            out.append(z.data.reshape(-1))
    return np.stack(out, axis=-1)


def sigmoid_network(x, w, b, w_o, b_o):
    """``sigmoid(x w + b) w_o + b_o`` for ``x [B, n]``."""
    return _sigmoid(x @ w + b) @ w_o + b_o


def _inputs(con, n_samples, seed):
    return np.random.default_rng(seed).normal(size=(n_samples, 1, con.config.d_model))


def literal_gap(con: Construction, n_samples: int = 64, seed: int = 0) -> float:
    x = _inputs(con, n_samples, seed)
    with no_grad():
        y = nac_forward(x, con.config, con.params).data[:, 0]
    z = head_preactivations(con, x)
    d = con.config.d_head
    w_o = con.params.w_o.data
    # one hidden unit per head feeding that head's block of W_o
    w_head = np.stack([w_o[h * d:(h + 1) * d].sum(axis=0) for h in range(con.config.heads)])
    ref = _sigmoid(z) @ w_head + con.params.b_o.data
    return float(np.abs(y - ref).max())


def logit_gap(con: Construction, n_samples: int = 64, seed: int = 0) -> float:
    x = _inputs(con, n_samples, seed)
    z = head_preactivations(con, x)
    gaps = []
    with no_grad():
        q, k, _ = project_qkv(x, con.params, con.config)
        for h, bb in enumerate(con.params.backbones):
            sel = curate_pairs(q[:, h], k[:, h], 1)
            phi, omega = gate_heads(sel.pairs(), bb, con.config.epsilon)
            a = logits_steady(phi, omega).data.reshape(-1)
            gaps.append(np.abs(a - _sigmoid(z[:, h])).max())
    return float(max(gaps))


def value_path_weights(con: Construction):
    """Sigmoid-network weights equal to the single-token layer."""
    gate = con.params.v_gate
    p = {k: v.data for k, v in gate.params.items()}
    act, outs = gate.active, gate.output_neurons
    w_eff = (p["W_in"] * gate.m_in)[:, outs]
    w = 2.0 * p["w_in"][:, None] * w_eff
    b = 2.0 * (p["b_in"] @ w_eff + p["b"][outs])
    dt = con.config.delta_t
    w_o = con.params.w_o.data
    out_w = (2.0 * dt * p["w_out"])[:, None] * w_o
    out_b = dt * (p["b_out"] - p["w_out"]) @ w_o + con.params.b_o.data
    assert set(outs) <= set(act)
    return w, b, out_w, out_b


def value_path_gap(con: Construction, n_samples: int = 64, seed: int = 0) -> float:
    x = _inputs(con, n_samples, seed)
    with no_grad():
        y = nac_forward(x, con.config, con.params).data[:, 0]
    ref = sigmoid_network(x[:, 0], *value_path_weights(con))
    return float(np.abs(y - ref).max())
