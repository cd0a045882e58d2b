"""Property suites behind ``nac verify``.

Each property yields one report row ``{property, trials, violations,
worst_margin, seed}``. For bound checks ``worst_margin`` is the largest
signed excess over the bound (``<= 1e-9`` passes); for error checks it is
the largest observed error, compared against the tolerance listed in
:data:`TOLERANCES`.
"""
from __future__ import annotations

import csv
from dataclasses import replace

import numpy as np

from nac import oracle, uat
from nac import tensor as T
from nac.attention import NACConfig, NACParams, nac_forward
from nac.oracle import CampaignResult
from nac.reference import reference_forward
from nac.tensor import Tape, no_grad

CSV_FIELDS = ["property", "trials", "violations", "worst_margin", "seed"]

TOLERANCES = {
    "closed_form_vs_rk4": 1e-8,
    "euler_convergence": (1.8, 2.2),
    "exact_error_law": 1e-12,
    "sensitivity": 1e-6,
    "sensitivity_autodiff": 1e-9,
    "gradcheck": 1e-5,
    "softmax_sum": 1e-9,
    "uat": 1e-9,
}

GRADCHECK_SHAPE = {"d_model": 8, "heads": 2, "top_k": 3}
GRADCHECK_T = 5
GRADCHECK_B = 2
GRADCHECK_H = 1e-5


def _result(prop, errors, tol, seed, params_of=None) -> CampaignResult:
    errors = np.asarray(errors, dtype=np.float64).reshape(-1)
    i = int(np.argmax(errors))
    return CampaignResult(prop, errors.size, int(np.sum(errors > tol)), float(errors[i]), seed,
                          params_of(i) if params_of else {})


# ---- dynamics ---------------------------------------------------------------

def suite_closed_form(trials, seed):
    return [oracle.campaign_closed_form(trials, seed, tol=TOLERANCES["closed_form_vs_rk4"])]


def suite_euler(trials, seed):
    lo, hi = TOLERANCES["euler_convergence"]
    errs, ratios = oracle.euler_convergence(seed, trials)
    margins = [max(lo - r, r - hi) for r in ratios]
    worst = int(np.argmax(margins))
    return [CampaignResult("euler_convergence", trials, int(sum(m > 0 for m in margins)), float(margins[worst]),
                           seed, {"max_errors": errs, "ratios": ratios})]


def suite_bounds(trials, seed):
    return [oracle.campaign_state_bounds(trials, seed),
            oracle.campaign_state_bounds(trials, seed, multi=True),
            oracle.campaign_euler_invariance(trials, seed)]


def suite_decay(trials, seed):
    return oracle.campaign_decay(trials, seed) + [oracle.campaign_exact_law(trials, seed)]


def sensitivity_autodiff(trials, seed):
    """Tape gradients of the exact logits against the closed-form sensitivities."""
    rng = np.random.default_rng(seed)
    phi = T.Tensor(rng.uniform(0.0, 1.0, trials), requires_grad=True)
    omega = T.Tensor(np.exp(rng.uniform(np.log(1e-2), np.log(10.0), trials)), requires_grad=True)
    t = rng.uniform(1e-3, 1.0, trials)
    with Tape() as tape:
        loss = T.exact_logits(phi, omega, t).sum()
    g_phi, g_omega = tape.gradient(loss, [phi, omega])
    ref_phi = oracle.sensitivity_phi(omega.data, t)
    ref_omega = oracle.sensitivity_omega(phi.data, omega.data, 0.0, t)
    tol = TOLERANCES["sensitivity_autodiff"]
    err_phi = np.abs(g_phi - ref_phi) / np.abs(ref_phi)
    err_omega = np.abs(g_omega - ref_omega) / np.abs(ref_omega)

    def params(i):
        return {"phi": float(phi.data[i]), "omega": float(omega.data[i]), "t": float(t[i])}

    return [_result("sensitivity_phi_autodiff", err_phi, tol, seed, params),
            _result("sensitivity_omega_autodiff", err_omega, tol, seed, params)]


def suite_sensitivity(trials, seed):
    return oracle.campaign_sensitivities(trials, seed, TOLERANCES["sensitivity"]) + sensitivity_autodiff(trials, seed)


# ---- layer ----------------------------------------------------------------

def layer_gradcheck(mode: str, seed: int, h: float = GRADCHECK_H):
    """Per-parameter worst entry-wise relative error of tape gradients.

    The finite differences run the loop-level reference forward in extended
    precision; masked entries must have an exactly zero gradient instead.
    Returns ``{name: (entries_checked, worst_rel_err)}``.
    """
    cfg = NACConfig(mode=mode, seed=seed, **GRADCHECK_SHAPE)
    params = NACParams(cfg)
    rng = np.random.default_rng([seed, 17])
    x = rng.normal(size=(GRADCHECK_B, GRADCHECK_T, cfg.d_model))
    w = rng.normal(size=(GRADCHECK_B, GRADCHECK_T, cfg.d_model))
    named = params.named_parameters()
    with Tape() as tape:
        loss = (nac_forward(x, cfg, params) * w).sum()
    grads = tape.gradient(loss, [p for _, p in named])

    masks = {}
    for tag, cell in params.cells().items():
        for pname in ("W_in", "W_rec", "b"):
            masks[f"{tag}.{pname}"] = cell.effective_mask(pname)
    ld = np.longdouble
    w_ld = w.astype(ld)

    def f():
        return (reference_forward(params, cfg, x, dtype=ld) * w_ld).sum()

    out = {}
    for (name, p), g in zip(named, grads):
        mask = masks.get(name)
        worst, count = 0.0, 0
        for i in np.ndindex(p.data.shape):
            if mask is not None and not mask[i]:
                worst = max(worst, abs(g[i]) / 1e-8)
                count += 1
                continue
            orig = p.data[i]
            p.data[i] = orig + h
            up = f()
            p.data[i] = orig - h
            down = f()
            p.data[i] = orig
            fd = float((up - down) / (2 * h))
            worst = max(worst, abs(g[i] - fd) / (abs(fd) + 1e-8))
            count += 1
        out[name] = (count, worst)
    return out


def suite_gradcheck(trials, seed):
    rows = []
    for mode in ("exact", "euler", "steady"):
        per = layer_gradcheck(mode, seed)
        errs = [e for _, e in per.values()]
        worst_name = max(per, key=lambda n: per[n][1])
        rows.append(CampaignResult(f"gradcheck_{mode}", sum(c for c, _ in per.values()),
                                   int(sum(e > TOLERANCES["gradcheck"] for e in errs)), float(max(errs)), seed,
                                   {"parameter": worst_name, **GRADCHECK_SHAPE, "T": GRADCHECK_T}))
    return rows


def _random_small_config(rng, seed):
    heads = int(rng.choice([1, 2, 4]))
    d_head = int(rng.integers(1, 5))
    return NACConfig(d_model=heads * d_head, heads=heads, mode=str(rng.choice(["exact", "euler", "steady"])),
                     sparsity=float(rng.uniform(0.0, 0.9)), seed=seed, top_k=1)


def suite_topk(trials, seed):
    """``K >= T_k`` against the full-pairwise path, bit for bit."""
    rng = np.random.default_rng(seed)
    diffs, cases = [], []
    for _ in range(trials):
        base = _random_small_config(rng, int(rng.integers(2**31)))
        steps = int(rng.integers(1, 13))
        cfg = replace(base, top_k=steps + int(rng.integers(0, 4)))
        full = replace(cfg, pairwise_full=True)
        params = NACParams(cfg)
        x = rng.normal(size=(int(rng.integers(1, 3)), steps, cfg.d_model))
        with no_grad():
            a, b = nac_forward(x, cfg, params).data, nac_forward(x, full, params).data
        diffs.append(0.0 if np.array_equal(a, b) else float(np.abs(a - b).max()) + 1.0)
        cases.append({"config": cfg.to_json(), "T": steps})
    return [_result("topk_full_equivalence", diffs, 0.0, seed, lambda i: cases[i])]


def suite_softmax(trials, seed):
    rng = np.random.default_rng(seed)
    sums = []
    for _ in range(trials):
        n = int(rng.integers(1, 17))
        logits = rng.normal(size=n) * rng.uniform(0.1, 50.0)
        sums.append(abs(float(T.softmax_lastdim(logits).data.sum()) - 1.0))
    rows = [_result("softmax_weights_sum", sums, TOLERANCES["softmax_sum"], seed)]

    diffs, cases = [], []
    for _ in range(max(1, trials // 50)):
        cfg = replace(_random_small_config(rng, int(rng.integers(2**31))), top_k=int(rng.integers(1, 9)))
        steps = int(rng.integers(2, 13))
        params = NACParams(cfg)
        x = rng.normal(size=(1, steps, cfg.d_model))
        perm = rng.permutation(steps)
        with no_grad():
            y = nac_forward(x, cfg, params).data
            yp = nac_forward(x[:, perm], cfg, params).data
        diffs.append(0.0 if np.array_equal(y[:, perm], yp) else float(np.abs(y[:, perm] - yp).max()) + 1.0)
        cases.append({"config": cfg.to_json(), "T": steps, "perm": perm.tolist()})
    rows.append(_result("permutation_equivariance", diffs, 0.0, seed, lambda i: cases[i]))
    return rows


def suite_uat(trials, seed):
    tol = TOLERANCES["uat"]
    literal, logit, value = [], [], []
    for j in range(trials):
        s = seed + j
        con = uat.build(seed=s)
        literal.append(uat.literal_gap(con, 16, s))
        logit.append(uat.logit_gap(con, 16, s))
        value.append(uat.value_path_gap(uat.build(seed=s, force_value=False), 16, s))
    return [_result("uat_literal_construction", literal, tol, seed, lambda i: {"build_seed": seed + i}),
            _result("uat_logit_equals_sigmoid", logit, tol, seed, lambda i: {"build_seed": seed + i}),
            _result("uat_value_path_sigmoid_net", value, tol, seed, lambda i: {"build_seed": seed + i})]


SUITES = {
    "closed-form": suite_closed_form,
    "euler": suite_euler,
    "bounds": suite_bounds,
    "decay": suite_decay,
    "sensitivity": suite_sensitivity,
    "gradcheck": suite_gradcheck,
    "topk": suite_topk,
    "softmax": suite_softmax,
    "uat": suite_uat,
}
SUITE_NAMES = tuple(SUITES) + ("all",)

# trial counts when none is given; gradcheck always checks every entry of
# its fixed layer and reports that count instead
DEFAULT_TRIALS = {name: 10_000 for name in SUITES}
DEFAULT_TRIALS.update({"topk": 100, "uat": 100, "gradcheck": 0})


def run_suite(name: str, trials: int | None, seed: int) -> list[CampaignResult]:
    if name == "all":
        rows = []
        for suite in SUITES:
            rows += run_suite(suite, trials, seed)
        return rows
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {', '.join(SUITE_NAMES)}")
    return SUITES[name](DEFAULT_TRIALS[name] if trials is None else trials, seed)


def write_report(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow(r.row())
