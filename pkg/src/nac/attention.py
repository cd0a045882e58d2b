"""Neuronal attention circuit layer.

Per head, the pipeline is: sensory-gate projections, top-k pair curation,
backbone gate heads (phi, omega), logit trajectory at pseudo-time, softmax
over the selected keys, and a Riemann-step weighted sum of values.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from nac import kernels
from nac import tensor as T
from nac.tensor import Tensor
from nac.wiring import Backbone, NCPCell, make_backbone, make_sensory_gate

MODES = ("exact", "euler", "steady")


@dataclass(frozen=True)
class NACConfig:
    d_model: int = 64
    heads: int = 4
    top_k: int = 8
    mode: str = "exact"
    delta_t: float = 1.0
    epsilon: float = 1e-2
    euler_steps: int = 6
    sparsity: float = 0.5
    seed: int = 0
    pairwise_full: bool = False
    time_input: bool = False

    def __post_init__(self):
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} must be a positive multiple of heads={self.heads}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.5 <= self.delta_t <= 1.0:
            raise ValueError(f"delta_t must lie in [0.5, 1.0], got {self.delta_t}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.euler_steps < 1:
            raise ValueError(f"euler_steps must be >= 1, got {self.euler_steps}")
        if not 0.0 <= self.sparsity < 1.0:
            raise ValueError(f"sparsity must lie in [0, 1), got {self.sparsity}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "NACConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown NACConfig keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str) -> "NACConfig":
        return cls.from_dict(json.loads(text))


@dataclass
class PairSelection:
    scores: np.ndarray
    k_eff: int
    indices: np.ndarray
    q: Tensor
    k: Tensor

    def pairs(self) -> Tensor:
        """The explicit ``[q_i; k_j]`` pair tensor ``[..., T_q, K, 2D]``."""
        return T.concat_lastdim([T.tile(self.q, self.k_eff), T.gather_rows(self.k, self.indices)])


class NACParams:
    """All learnable state of one layer: three sensory gates, one backbone per
    head, the pseudo-time affine pair and the output projection."""

    def __init__(self, config: NACConfig):
        seqs = np.random.SeedSequence(config.seed).spawn(4 + config.heads)

        def wiring_seed(ss):
            return int(ss.generate_state(1, np.uint64)[0])

        gates = []
        for ss in seqs[:3]:
            gates.append(make_sensory_gate(config.d_model, config.sparsity, wiring_seed(ss),
                                           rng=np.random.default_rng(ss.spawn(1)[0])))
        self.q_gate, self.k_gate, self.v_gate = gates
        self.backbones = [
            make_backbone(2 * config.d_head, config.sparsity, wiring_seed(ss),
                          rng=np.random.default_rng(ss.spawn(1)[0]))
            for ss in seqs[4:]
        ]
        rng = np.random.default_rng(seqs[3])
        r = 1.0 / np.sqrt(config.d_model)
        self.t_a = Tensor(1.0, requires_grad=True, name="t_a")
        self.t_b = Tensor(0.0, requires_grad=True, name="t_b")
        self.w_o = Tensor(rng.uniform(-r, r, (config.d_model, config.d_model)), requires_grad=True, name="W_o")
        self.b_o = Tensor(np.zeros(config.d_model), requires_grad=True, name="b_o")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for tag, cell in (("q_gate", self.q_gate), ("k_gate", self.k_gate), ("v_gate", self.v_gate)):
            out += [(f"{tag}.{k}", v) for k, v in cell.params.items()]
        for h, bb in enumerate(self.backbones):
            out += [(f"backbone{h}.{k}", v) for k, v in bb.params.items()]
        out += [("t_a", self.t_a), ("t_b", self.t_b), ("W_o", self.w_o), ("b_o", self.b_o)]
        return out

    def cells(self) -> dict[str, NCPCell]:
        out = {"q_gate": self.q_gate, "k_gate": self.k_gate, "v_gate": self.v_gate}
        out.update({f"backbone{h}": bb.cell for h, bb in enumerate(self.backbones)})
        return out


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).swapaxes(1, 2)


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, d = x.shape
    return x.swapaxes(1, 2).reshape(b, t, h * d)


def project_qkv(x, params: NACParams, config: NACConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Sensory-gate projections of ``x [B, T, d_model]`` split to ``[B, H, T, D]``."""
    x = T.as_tensor(x)
    if x.ndim != 3 or x.shape[-1] != config.d_model:
        raise T.DimensionError(f"expected [B, T, {config.d_model}], got {x.shape}")
    return tuple(split_heads(gate.run(x, 1), config.heads)
                 for gate in (params.q_gate, params.k_gate, params.v_gate))


def curate_pairs(q, k, top_k: int, pairwise_full: bool = False) -> PairSelection:
    """Top-k key selection per query.

    Selected keys are ordered by descending score with ties to the lower key
    index. The full-pairwise path keeps every key in that same order.
    """
    q, k = T.as_tensor(q), T.as_tensor(k)
    if q.shape[-1] != k.shape[-1] or q.shape[:-2] != k.shape[:-2]:
        raise T.DimensionError(f"query/key shapes differ: {q.shape} vs {k.shape}")
    t_k = k.shape[-2]
    k_eff = t_k if pairwise_full else min(int(top_k), t_k)
    scores = q.data @ np.swapaxes(k.data, -1, -2)
    _, idx = kernels.topk_lastdim(scores, k_eff)
    return PairSelection(scores, k_eff, idx, q, k)


def gate_heads(pairs, backbone: Backbone, epsilon: float) -> tuple[Tensor, Tensor]:
    """``phi = sigmoid(head1)`` in (0, 1) and ``omega = softplus(head2) + eps``."""
    return _gates(backbone.heads(pairs), epsilon)


def gate_heads_selected(sel: PairSelection, backbone: Backbone, epsilon: float) -> tuple[Tensor, Tensor]:
    """Same gates as :func:`gate_heads` on ``sel.pairs()``, without materializing the pairs."""
    return _gates(backbone.pair_heads(sel.q, sel.k, sel.indices), epsilon)


def _gates(heads, epsilon):
    h1, h2 = heads
    return T.sigmoid(h1), T.softplus(h2) + epsilon


def pseudo_time(t_raw, t_a, t_b) -> Tensor:
    return T.sigmoid(T.as_tensor(t_a) * t_raw + t_b)


def logits_exact(phi, omega, t) -> Tensor:
    return T.exact_logits(phi, omega, t)


def logits_euler(phi, omega, t, n_steps: int) -> Tensor:
    return T.euler_logits(phi, omega, t, n_steps)


def logits_steady(phi, omega) -> Tensor:
    return T.div(phi, omega)


def compute_logits(phi, omega, t, config: NACConfig) -> Tensor:
    if config.mode == "exact":
        return logits_exact(phi, omega, t)
    if config.mode == "euler":
        return logits_euler(phi, omega, t, config.euler_steps)
    return logits_steady(phi, omega)


def attend(logits, v, indices, delta_t: float) -> Tensor:
    """``delta_t * sum_j softmax(logits)_j v[indices_j]`` per query."""
    alpha = T.softmax_lastdim(logits)
    v_sel = T.gather_rows(v, indices)
    lead = alpha.shape[:-1]
    mixed = alpha.reshape(lead + (1, alpha.shape[-1])) @ v_sel
    return mixed.reshape(lead + (v.shape[-1],)) * delta_t


def attention_head_forward(q, k, v, t_pseudo, backbone: Backbone, config: NACConfig,
                           return_state: bool = False):
    """One head: ``q, k, v`` are ``[B, T, D]``, ``t_pseudo`` broadcasts to ``[B, T, 1]``."""
    sel = curate_pairs(q, k, config.top_k, config.pairwise_full)
    phi, omega = gate_heads_selected(sel, backbone, config.epsilon)
    logits = compute_logits(phi, omega, t_pseudo, config)
    out = attend(logits, v, sel.indices, config.delta_t)
    if return_state:
        return out, {"selection": sel, "phi": phi, "omega": omega, "logits": logits}
    return out


def nac_forward(x, config: NACConfig, params: NACParams, timestamps=None) -> Tensor:
    """Multi-head NAC self-attention over ``x [B, T, d_model]``.

    ``timestamps [B, T]`` are the per-position elapsed times; without them
    every position uses ``t = 1``.
    """
    x = T.as_tensor(x)
    if config.time_input and timestamps is None:
        raise ValueError("config.time_input is set but no timestamps were given")
    q_all, k_all, v_all = project_qkv(x, params, config)
    b, t = x.shape[0], x.shape[1]
    if timestamps is None:
        t_raw = np.ones((b, t, 1))
    else:
        t_raw = np.asarray(timestamps, dtype=np.float64)
        if t_raw.shape != (b, t):
            raise T.DimensionError(f"timestamps must be [B, T] = {(b, t)}, got {t_raw.shape}")
        t_raw = t_raw[..., None]
    t_ps = pseudo_time(t_raw, params.t_a, params.t_b)
    heads = [
        attention_head_forward(q_all[:, h], k_all[:, h], v_all[:, h], t_ps, bb, config)
        for h, bb in enumerate(params.backbones)
    ]
    return T.concat_lastdim(heads) @ params.w_o + params.b_o


class NACLayer:
    def __init__(self, config: NACConfig):
        self.config = config
        self.params = NACParams(config)

    def __call__(self, x, timestamps=None) -> Tensor:
        return nac_forward(x, self.config, self.params, timestamps)

    def named_parameters(self):
        return self.params.named_parameters()

    def parameters(self):
        return [p for _, p in self.params.named_parameters()]
