"""Sparse four-group NCP wiring and the masked NCP cell built on it.

Neurons are laid out contiguously as sensory, inter, command, motor. A cell
only ever sees weights through their binary masks, so a masked-out entry
never reaches an output whatever its value.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from nac import tensor as T
from nac.tensor import Tensor

GROUPS = ("sensory", "inter", "command", "motor")
DEFAULT_ALLOWED = (
    ("sensory", "inter"),
    ("inter", "command"),
    ("command", "command"),
    ("command", "motor"),
    ("motor", "command"),
)
# inter -> command -> motor: input reaches the motor group after three updates
BACKBONE_STEPS = 3


class ConfigurationError(ValueError):
    pass


def size_for_dmodel(d_model: int) -> tuple[int, int]:
    """Unit counts ``(sensory_gate_units, backbone_units)`` for a model width.

    ``ceil((d - 0.5) / 0.6)`` and ``d + floor(d / 0.6)`` in exact integer form.
    """
    if d_model < 1:
        raise ValueError(f"d_model must be >= 1, got {d_model}")
    units_sensory = -(-(10 * d_model - 5) // 6)
    units_backbone = d_model + (10 * d_model) // 6
    return units_sensory, units_backbone


def split_rest(n: int, min_motor: int = 1) -> tuple[int, int, int]:
    """Split ``n`` non-sensory neurons 50/30/rest into inter/command/motor."""
    inter = max(1, n // 2)
    command = max(1, (3 * n) // 10)
    motor = max(min_motor, n - inter - command)
    return inter, command, motor


@dataclass
class WiringSpec:
    groups: tuple[int, int, int, int]
    sparsity: float
    seed: int
    d_in: int
    input_group: str
    allowed_edges: tuple[tuple[str, str], ...]
    a_in: np.ndarray
    a_rec: np.ndarray
    allowed_in: np.ndarray = field(repr=False)
    allowed_rec: np.ndarray = field(repr=False)
    density_pre_repair: float = 0.0
    repaired: int = 0

    @property
    def n_total(self) -> int:
        return sum(self.groups)

    def group_indices(self, name: str) -> np.ndarray:
        k = GROUPS.index(name)
        start = sum(self.groups[:k])
        return np.arange(start, start + self.groups[k])

    def to_json(self) -> str:
        return json.dumps({
            "groups": list(self.groups),
            "s": self.sparsity,
            "seed": self.seed,
            "d_in": self.d_in,
            "input_group": self.input_group,
            "allowed_edges": [list(e) for e in self.allowed_edges],
            "A_in": self.a_in.astype(int).tolist(),
            "A_rec": self.a_rec.astype(int).tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "WiringSpec":
        doc = json.loads(text)
        groups = tuple(doc["groups"])
        allowed = tuple(tuple(e) for e in doc["allowed_edges"])
        allowed_in, allowed_rec = _allowed_masks(groups, doc["d_in"], doc["input_group"], allowed)
        a_in = np.array(doc["A_in"], dtype=np.uint8).reshape(doc["d_in"], sum(groups))
        a_rec = np.array(doc["A_rec"], dtype=np.uint8).reshape(sum(groups), sum(groups))
        return cls(groups, doc["s"], doc["seed"], doc["d_in"], doc["input_group"], allowed,
                   a_in, a_rec, allowed_in, allowed_rec)


def _allowed_masks(groups, d_in, input_group, allowed_edges):
    n = sum(groups)
    offsets = np.cumsum((0,) + tuple(groups))
    span = {g: slice(offsets[i], offsets[i + 1]) for i, g in enumerate(GROUPS)}
    allowed_in = np.zeros((d_in, n), dtype=bool)
    allowed_in[:, span[input_group]] = True
    allowed_rec = np.zeros((n, n), dtype=bool)
    for src, dst in allowed_edges:
        if src not in span or dst not in span:
            raise ConfigurationError(f"unknown group in edge {src}->{dst}")
        allowed_rec[span[src], span[dst]] = True
    np.fill_diagonal(allowed_rec, False)
    return allowed_in, allowed_rec


def build_wiring(groups, d_in: int, sparsity: float, seed: int, input_group: str = "sensory",
                 allowed_edges=DEFAULT_ALLOWED) -> WiringSpec:
    """Seeded Bernoulli(1 - s) edge sampler over the allowed slots, plus repair.

    Any neuron that has allowed in-slots but drew none gets one uniformly
    chosen allowed in-edge.
    """
    groups = tuple(int(g) for g in groups)
    if len(groups) != 4 or min(groups) < 1:
        raise ValueError(f"need four group sizes >= 1, got {groups}")
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must lie in [0, 1), got {sparsity}")
    if d_in < 1:
        raise ValueError(f"d_in must be >= 1, got {d_in}")
    if input_group not in GROUPS:
        raise ConfigurationError(f"unknown input group {input_group!r}")
    allowed_edges = tuple(tuple(e) for e in allowed_edges)
    allowed_in, allowed_rec = _allowed_masks(groups, d_in, input_group, allowed_edges)

    rng = np.random.default_rng(seed)
    keep_p = 1.0 - sparsity
    a_in = (allowed_in & (rng.random(allowed_in.shape) < keep_p)).astype(np.uint8)
    a_rec = (allowed_rec & (rng.random(allowed_rec.shape) < keep_p)).astype(np.uint8)
    n_allowed = int(allowed_in.sum() + allowed_rec.sum())
    density = (a_in.sum() + a_rec.sum()) / n_allowed if n_allowed else 0.0

    repaired = 0
    for j in range(sum(groups)):
        slots_in = np.flatnonzero(allowed_in[:, j])
        slots_rec = np.flatnonzero(allowed_rec[:, j])
        total = slots_in.size + slots_rec.size
        if total == 0 or a_in[:, j].any() or a_rec[:, j].any():
            continue
        pick = int(rng.integers(total))
        if pick < slots_in.size:
            a_in[slots_in[pick], j] = 1
        else:
            a_rec[slots_rec[pick - slots_in.size], j] = 1
        repaired += 1

    return WiringSpec(groups, float(sparsity), int(seed), int(d_in), input_group, allowed_edges,
                      a_in, a_rec, allowed_in, allowed_rec, float(density), repaired)


class NCPCell:
    """Masked recurrent cell: ``x = tanh(x_prev W_rec + u~ W_in + b) * mask_act``.

    Parameters live in ``params`` as leaf tensors; masks and index lists are
    fixed at construction.
    """

    def __init__(self, wiring: WiringSpec, output_neurons, disabled_groups=(), rng=None):
        self.wiring = wiring
        n = wiring.n_total
        self.disabled_groups = tuple(disabled_groups)
        for g in self.disabled_groups:
            if g not in GROUPS:
                raise ConfigurationError(f"unknown group {g!r}")
        if wiring.input_group in self.disabled_groups:
            raise ConfigurationError(f"input group {wiring.input_group!r} is disabled")
        mask_act = np.ones(n)
        for g in self.disabled_groups:
            mask_act[wiring.group_indices(g)] = 0.0
        self.mask_act = mask_act
        self.output_neurons = np.asarray(output_neurons, dtype=np.int64)
        if self.output_neurons.size == 0:
            raise ConfigurationError("empty output neuron list")
        if (mask_act[self.output_neurons] == 0).any():
            raise ConfigurationError("output neurons reference a disabled group")
        self.m_in = wiring.a_in.astype(np.float64)
        self.m_rec = wiring.a_rec.astype(np.float64)
        self.active = np.flatnonzero(mask_act)
        pos = {int(j): i for i, j in enumerate(self.active)}
        self._out_in_active = np.array([pos[int(j)] for j in self.output_neurons], dtype=np.int64)

        rng = np.random.default_rng(0) if rng is None else rng
        fan_in = self.m_in.sum(axis=0) + self.m_rec.sum(axis=0)
        r = np.where(fan_in > 0, 1.0 / np.sqrt(np.maximum(fan_in, 1.0)), 1.0)
        d_in = wiring.d_in
        w_in = rng.uniform(-1.0, 1.0, (d_in, n)) * r
        w_rec = rng.uniform(-1.0, 1.0, (n, n)) * r
        # nonzero biases: with x0 = 0 and b = 0, recurrent edges out of
        # command/motor neurons would carry no signal within a short unroll
        b = rng.uniform(-1.0, 1.0, n) * r
        self.params = {
            "W_in": Tensor(w_in, requires_grad=True),
            "W_rec": Tensor(w_rec, requires_grad=True),
            "b": Tensor(b, requires_grad=True),
            "w_in": Tensor(np.ones(d_in), requires_grad=True),
            "b_in": Tensor(np.zeros(d_in), requires_grad=True),
            "w_out": Tensor(np.ones(self.output_neurons.size), requires_grad=True),
            "b_out": Tensor(np.zeros(self.output_neurons.size), requires_grad=True),
        }
        for k, v in self.params.items():
            v.name = k

    @property
    def d_in(self) -> int:
        return self.wiring.d_in

    @property
    def d_out(self) -> int:
        return int(self.output_neurons.size)

    def step(self, u, x_prev=None):
        """One full-width update. Returns ``(y, x)`` with ``x`` over all neurons."""
        p = self.params
        u = T.as_tensor(u)
        if u.shape[-1] != self.d_in:
            raise T.DimensionError(f"cell expects input width {self.d_in}, got {u.shape}")
        n = self.wiring.n_total
        u_t = u * p["w_in"] + p["b_in"]
        pre = u_t @ (p["W_in"] * self.m_in) + p["b"]
        if x_prev is not None:
            x_prev = T.as_tensor(x_prev)
            if x_prev.shape[-1] != n:
                raise T.DimensionError(f"state width {x_prev.shape[-1]} != {n}")
            pre = x_prev @ (p["W_rec"] * self.m_rec) + pre
        x = T.tanh(pre) * self.mask_act
        y = T.take_lastdim(x, self.output_neurons) * p["w_out"] + p["b_out"]
        return y, x

    def run(self, u, steps: int = 1):
        """Output after ``steps`` updates from the zero state, with ``u`` held fixed.

        Disabled neurons are exactly zero, so the work is restricted to active
        neurons; the result equals iterating :meth:`step` from ``x = 0``.
        """
        u = T.as_tensor(u)
        if u.shape[-1] != self.d_in:
            raise T.DimensionError(f"cell expects input width {self.d_in}, got {u.shape}")
        return self.iterate(self.input_drive(u, 0, self.d_in) + T.take_lastdim(self.params["b"], self.active),
                            steps)

    def input_drive(self, u, lo: int, hi: int) -> Tensor:
        """Contribution of input columns ``lo:hi`` to the active neurons' pre-activation.

        The input layer is affine in ``u``, so a concatenated input's drive is
        the sum of the drives of its pieces.
        """
        p, act = self.params, self.active
        cols = np.arange(lo, hi)
        u_t = T.as_tensor(u) * T.take_lastdim(p["w_in"], cols) + T.take_lastdim(p["b_in"], cols)
        w_in = T.take_lastdim(p["W_in"], act)[lo:hi] * self.m_in[lo:hi][:, act]
        return u_t @ w_in

    def iterate(self, drive, steps: int) -> Tensor:
        """Run ``steps`` updates on a fixed active-neuron drive (bias included)."""
        p, act = self.params, self.active
        x = T.tanh(drive)
        if steps > 1:
            w_rec = T.take_lastdim(T.take_lastdim(p["W_rec"], act).swapaxes(0, 1), act).swapaxes(0, 1)
            w_rec = w_rec * self.m_rec[np.ix_(act, act)]
            for _ in range(steps - 1):
                x = T.tanh(x @ w_rec + drive)
        return T.take_lastdim(x, self._out_in_active) * p["w_out"] + p["b_out"]

    def effective_mask(self, name: str) -> np.ndarray | None:
        """Entries of parameter ``name`` that can influence an output."""
        act = self.mask_act.astype(bool)
        if name == "W_in":
            return (self.m_in > 0) & act[None, :]
        if name == "W_rec":
            return (self.m_rec > 0) & act[:, None] & act[None, :]
        if name == "b":
            return act
        return None


def make_sensory_gate(d_model: int, sparsity: float, seed: int, n_sensory: int | None = None,
                      rng=None) -> NCPCell:
    """Cell with only sensory neurons active; maps width ``d_model`` to ``d_model``.

    The gate has ``size_for_dmodel(d_model)[0]`` units; with sixty percent of
    them sensory that is exactly ``d_model`` sensory neurons, all of which are
    outputs.
    """
    total, _ = size_for_dmodel(d_model)
    n_s = d_model if n_sensory is None else int(n_sensory)
    if d_model > n_s:
        raise ConfigurationError(f"d_model={d_model} exceeds {n_s} sensory units")
    groups = (n_s,) + split_rest(max(total - n_s, 3))
    wiring = build_wiring(groups, d_model, sparsity, seed, input_group="sensory")
    outputs = wiring.group_indices("sensory")[:d_model]
    return NCPCell(wiring, outputs, disabled_groups=("inter", "command", "motor"), rng=rng)


class Backbone:
    """Shared inter->command->motor trunk with two disjoint scalar heads.

    Motor neurons are split in half: the first half feeds the content-target
    head, the rest the time-constant head. Each head's scalar is the mean of
    its affine-mapped motor outputs.
    """

    def __init__(self, cell: NCPCell):
        if cell.d_out < 2:
            raise ConfigurationError(f"backbone needs >= 2 motor neurons, got {cell.d_out}")
        self.cell = cell
        self.split = (cell.d_out + 1) // 2
        self.steps = BACKBONE_STEPS

    @property
    def params(self):
        return self.cell.params

    def heads(self, u) -> tuple[Tensor, Tensor]:
        """Gate heads for explicit pair vectors ``u = [q; k]``."""
        return self._split_heads(self.cell.run(u, self.steps))

    def pair_heads(self, q, k, idx) -> tuple[Tensor, Tensor]:
        """Gate heads for the pairs ``[q_i; k_{idx[i, j]}]`` without building them.

        ``q, k`` are ``[..., T, D]`` and ``idx`` is ``[..., T_q, K]``. Equal to
        ``heads(concat(tile(q, K), gather_rows(k, idx)))`` up to rounding.
        """
        cell = self.cell
        d = q.shape[-1]
        dq = cell.input_drive(q, 0, d) + T.take_lastdim(cell.params["b"], cell.active)
        dk = cell.input_drive(k, d, 2 * d)
        lead = dq.shape[:-1]
        drive = dq.reshape(lead + (1, dq.shape[-1])) + T.gather_rows(dk, idx)
        return self._split_heads(cell.iterate(drive, self.steps))

    def _split_heads(self, y):
        k = self.split
        idx1, idx2 = np.arange(k), np.arange(k, self.cell.d_out)
        h1 = T.take_lastdim(y, idx1).mean(axis=-1)
        h2 = T.take_lastdim(y, idx2).mean(axis=-1)
        return h1, h2


def make_backbone(d_in: int, sparsity: float, seed: int, rng=None) -> Backbone:
    """Backbone over concatenated ``[q; k]`` pairs of width ``d_in = 2 * d_head``."""
    if d_in < 2 or d_in % 2:
        raise ConfigurationError(f"backbone input must be 2 * d_head, got {d_in}")
    d_head = d_in // 2
    _, total = size_for_dmodel(d_head)
    rest = total - d_head
    groups = (d_head,) + split_rest(rest, min_motor=2)
    wiring = build_wiring(groups, d_in, sparsity, seed, input_group="inter")
    cell = NCPCell(wiring, wiring.group_indices("motor"), disabled_groups=("sensory",), rng=rng)
    return Backbone(cell)
