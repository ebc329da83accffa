"""Recover source and detector parameters from measured coherence curves.

The objective is the weighted sum of squares between measured ḡ curves and
the fast (delta-mode) response model. Optimisation works in natural-log
coordinates: a coarse log-spaced grid over the bounds picks the best starts,
each of which is refined with bounded Nelder-Mead. Uncertainties come from a
finite-difference Hessian of chi^2 at the optimum; a near-singular Hessian is
reported as an identifiability problem rather than returned as a number.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.optimize import minimize

from . import __version__
from .errors import FitError, IdentifiabilityError, ParameterError
from .model import SpdcParams
from .response import CoincidenceConfig, DetectorModel, g2bar_c, g2bar_si

PARAMS = ("rate_per_mw", "bandwidth", "jitter")
DEFAULT_BOUNDS = {"rate_per_mw": (1e3, 1e9), "bandwidth": (1e10, 1e14), "jitter": (0.0, 5e-9)}
DEFAULT_START = {"rate_per_mw": 1.2e6, "bandwidth": 3e12, "jitter": 350e-12}
#: Jitter is optimised in log space, so its lower bound of 0 is replaced by this.
JITTER_FLOOR = 1e-13
COND_LIMIT = 1e8
PROBLEM_SCHEMA = "hsps.fit-problem/1"
RESULT_SCHEMA = "hsps.fit-result/1"
KINDS = ("g2si", "g2c")


@dataclass
class Dataset:
    """One measured curve at a given pump power (mW) and window half-width (s).

    A point may stand for ``span`` merged bins spaced ``bin_step`` apart; its
    model value is then the mean over those bins.
    """

    kind: str
    pump_power: float
    tau_coin: float
    tau: np.ndarray
    value: np.ndarray
    sigma: np.ndarray
    span: np.ndarray = None
    bin_step: float = 0.0
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"dataset kind must be one of {KINDS}, got {self.kind!r}")
        self.tau = np.asarray(self.tau, dtype=float)
        self.value = np.asarray(self.value, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        self.span = np.ones(len(self.tau), dtype=int) if self.span is None else np.asarray(self.span, dtype=int)
        if not (self.tau.shape == self.value.shape == self.sigma.shape == self.span.shape):
            raise ParameterError("tau, value, sigma and span must have the same length")
        if len(self.tau) == 0:
            raise ParameterError("empty dataset")
        if not np.all(np.isfinite(self.value)) or not np.all(np.isfinite(self.sigma)):
            raise ParameterError("dataset values and sigmas must be finite")
        if np.any(self.sigma <= 0):
            raise ParameterError("all sigma must be > 0")
        if not self.pump_power > 0 or not self.tau_coin > 0:
            raise ParameterError("pump_power and tau_coin must be > 0")

    def to_dict(self):
        return {"kind": self.kind, "pump_power": self.pump_power, "tau_coin": self.tau_coin,
                "tau": self.tau.tolist(), "value": self.value.tolist(), "sigma": self.sigma.tolist(),
                "span": self.span.tolist(), "bin_step": self.bin_step, "label": self.label}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _merge_groups(counts, min_counts):
    """Split consecutive bins into groups holding at least ``min_counts`` counts each."""
    groups, cur, tot = [], [], 0
    for i, c in enumerate(counts):
        cur.append(i)
        tot += c
        if tot >= min_counts:
            groups.append(cur)
            cur, tot = [], 0
    if cur:
        if groups:
            groups[-1].extend(cur)
        else:
            groups.append(cur)
    return groups


def dataset_from_histogram(hist, pump_power, *, max_tau=None, min_counts=5, label=""):
    """ḡ_si dataset from a 1-D delay histogram whose bins are one window wide."""
    tau = hist.centers
    keep = np.ones(len(tau), bool) if max_tau is None else np.abs(tau) <= max_tau + 1e-15
    counts = hist.counts[keep]
    tau = tau[keep]
    ra, rb = (hist.singles[c] for c in hist.channels)
    norm = ra * rb * hist.duration * hist.bin_width
    rows = []
    for g in _merge_groups(counts, min_counts):
        n = float(counts[g].sum())
        rows.append((tau[g].mean(), n / (norm * len(g)), math.sqrt(max(n, 1.0)) / (norm * len(g)), len(g)))
    t, v, s, span = map(np.array, zip(*rows))
    return Dataset("g2si", pump_power, 0.5 * hist.bin_width, t, v, s, span, hist.bin_width, label)


def dataset_from_profile(profile, pump_power, bin_step, *, max_tau=None, min_counts=5, label=""):
    """ḡ_c dataset from a heralded profile; sparse bins are merged by pooling triples."""
    tau = profile.tau
    keep = (profile.pairs_s2 > 0) & (np.ones(len(tau), bool) if max_tau is None else np.abs(tau) <= max_tau + 1e-15)
    tau, trip, n2 = tau[keep], profile.triples[keep], profile.pairs_s2[keep]
    base = profile.heralds / profile.pairs_s1_zero
    rows = []
    for g in _merge_groups(trip, min_counts):
        a, b = float(trip[g].sum()), float(n2[g].sum())
        val = base * a / b
        rel = math.sqrt(1.0 / max(a, 1.0) + 1.0 / profile.heralds + 1.0 / profile.pairs_s1_zero + 1.0 / b)
        rows.append((tau[g].mean(), val, base * max(a, 1.0) / b * rel, len(g)))
    t, v, s, span = map(np.array, zip(*rows))
    return Dataset("g2c", pump_power, profile.tau_coin, t, v, s, span, bin_step, label)


@dataclass
class FitProblem:
    """Datasets plus which parameters are free and where they may roam.

    ``fixed`` holds values for parameters that are not free and starting
    values for those that are. ``tag_resolution`` (s) switches on timestamp
    flooring in the forward model; leave it None for idealised data.
    """

    datasets: list
    free: tuple = ("rate_per_mw", "jitter")
    bounds: dict = field(default_factory=dict)
    fixed: dict = field(default_factory=dict)
    tag_resolution: float = None
    reference_power: float = None
    grid_points: int = 8
    n_starts: int = 3
    xtol: float = 1e-4

    def __post_init__(self):
        self.datasets = [d if isinstance(d, Dataset) else Dataset.from_dict(d) for d in self.datasets]
        self.free = tuple(self.free)
        bad = set(self.free) - set(PARAMS)
        if bad:
            raise ParameterError(f"unknown free parameter(s) {sorted(bad)}; choose from {PARAMS}")
        if not self.free:
            raise ParameterError("at least one parameter must be free")
        self.bounds = {**DEFAULT_BOUNDS, **{k: tuple(v) for k, v in self.bounds.items()}}
        self.fixed = {**DEFAULT_START, **self.fixed}
        for name, (lo, hi) in self.bounds.items():
            if not lo < hi:
                raise ParameterError(f"bounds for {name} are empty")
        if not self.datasets:
            raise IdentifiabilityError("no datasets to fit")
        keys = {(d.pump_power, d.tau_coin) for d in self.datasets}
        if len({k[0] for k in keys}) < 2 and len({k[1] for k in keys}) < 2:
            raise IdentifiabilityError(
                "need datasets at two or more distinct pump powers or coincidence windows; with a single "
                "setting the jitter and window widths are confounded",
                direction="jitter")
        if self.reference_power is None:
            self.reference_power = max(d.pump_power for d in self.datasets)

    @property
    def n_points(self):
        return int(sum(len(d.tau) for d in self.datasets))

    def log_bounds(self):
        out = []
        for name in self.free:
            lo, hi = self.bounds[name]
            if name == "jitter":
                lo = max(lo, JITTER_FLOOR)
            out.append((math.log(lo), math.log(hi)))
        return out

    def params_from_log(self, z):
        vals = dict(self.fixed)
        for name, zi in zip(self.free, z):
            vals[name] = math.exp(zi)
        return vals

    def predict(self, vals, ds: Dataset):
        p = SpdcParams(None, vals["bandwidth"], vals["rate_per_mw"], ds.pump_power)
        d = DetectorModel(jitter=vals["jitter"], tag_resolution=self.tag_resolution or 156.25e-12)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            c = CoincidenceConfig(ds.tau_coin)
        q = self.tag_resolution is not None
        fn = g2bar_si if ds.kind == "g2si" else g2bar_c
        if np.all(ds.span == 1):
            return np.atleast_1d(fn(p, d, c, ds.tau, quantize=q))
        out = np.empty(len(ds.tau))
        for i, (t, n) in enumerate(zip(ds.tau, ds.span)):
            pts = t + (np.arange(n) - 0.5 * (n - 1)) * ds.bin_step
            out[i] = np.mean(fn(p, d, c, pts, quantize=q))
        return out

    def chi2(self, vals):
        try:
            total = 0.0
            for ds in self.datasets:
                r = (self.predict(vals, ds) - ds.value) / ds.sigma
                total += float(np.dot(r, r))
        except ParameterError:
            return math.inf
        return total if math.isfinite(total) else math.inf

    def to_dict(self):
        return {"schema": PROBLEM_SCHEMA, "datasets": [d.to_dict() for d in self.datasets],
                "free": list(self.free), "bounds": {k: list(v) for k, v in self.bounds.items()},
                "fixed": self.fixed, "tag_resolution": self.tag_resolution,
                "reference_power": self.reference_power, "grid_points": self.grid_points,
                "n_starts": self.n_starts, "xtol": self.xtol}

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        schema = d.pop("schema", PROBLEM_SCHEMA)
        if schema != PROBLEM_SCHEMA:
            raise ParameterError(f"unsupported fit problem schema {schema!r}")
        return cls(**d)

    @classmethod
    def from_json(cls, text_or_path):
        text = text_or_path
        if not text.lstrip().startswith("{"):
            with open(text_or_path) as fh:
                text = fh.read()
        return cls.from_dict(json.loads(text))


@dataclass
class FitResult:
    params: dict
    sigma: dict
    free: list
    covariance: list
    chi2: float
    dof: int
    g2c0: float
    g2c0_sigma: float
    reference_power: float
    n_evals: int
    start_index: int
    history: list = field(default_factory=list)
    version: str = __version__

    @property
    def chi2_dof(self):
        return self.chi2 / self.dof if self.dof > 0 else math.nan

    def to_dict(self):
        d = asdict(self)
        d["schema"] = RESULT_SCHEMA
        d["chi2_dof"] = self.chi2_dof
        return d

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        schema = d.pop("schema", RESULT_SCHEMA)
        if schema != RESULT_SCHEMA:
            raise ParameterError(f"unsupported fit result schema {schema!r}")
        d.pop("chi2_dof", None)
        d.pop("config_sha256", None)
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def infer_true_g2c0(rate, bandwidth, rate_sigma=0.0, bandwidth_sigma=0.0, cov=0.0):
    """Trigger-time coherence (2/g)(2 - 1/g), g = 1 + B/R, with linear error propagation.

    ``cov`` is the rate-bandwidth covariance. A zero rate gives 0 exactly.
    """
    if rate < 0 or bandwidth <= 0:
        raise ParameterError("rate must be >= 0 and bandwidth > 0")
    if rate == 0:
        return 0.0, 0.0
    g = 1.0 + bandwidth / rate
    value = (2.0 / g) * (2.0 - 1.0 / g)
    dvalue_dg = -4.0 / g**2 + 4.0 / g**3
    jr = dvalue_dg * (-bandwidth / rate**2)
    jb = dvalue_dg * (1.0 / rate)
    var = jr * jr * rate_sigma**2 + jb * jb * bandwidth_sigma**2 + 2 * jr * jb * cov
    return value, math.sqrt(max(var, 0.0))


def _hessian(f, z, h=1e-3):
    n = len(z)
    H = np.empty((n, n))
    f0 = f(z)
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h
        H[i, i] = (f(z + ei) - 2 * f0 + f(z - ei)) / h**2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = h
            H[i, j] = H[j, i] = (f(z + ei + ej) - f(z + ei - ej) - f(z - ei + ej) + f(z - ei - ej)) / (4 * h * h)
    return H


def fit(problem: FitProblem) -> FitResult:
    """Multi-start bounded least squares; see the module docstring."""
    lb = problem.log_bounds()
    n_evals = [0]

    def objective(z):
        n_evals[0] += 1
        return problem.chi2(problem.params_from_log(z))

    axes = [np.linspace(lo, hi, problem.grid_points) for lo, hi in lb]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(lb))
    grid_vals = np.array([objective(z) for z in mesh])
    if not np.any(np.isfinite(grid_vals)):
        raise FitError("objective is not finite anywhere on the start grid")
    order = np.argsort(grid_vals, kind="stable")[: problem.n_starts]

    best = None
    for idx, start in enumerate(mesh[order]):
        history = [objective(start)]

        def monitor(xk, history=history):
            val = objective(xk)
            if val > history[-1] * (1 + 1e-12) + 1e-300:
                raise FitError(f"chi^2 increased during refinement ({history[-1]!r} -> {val!r})")
            history.append(val)

        res = minimize(objective, start, method="Nelder-Mead", bounds=lb, callback=monitor,
                       options={"xatol": problem.xtol, "fatol": 1e-10 * max(history[0], 1.0), "maxiter": 4000 * len(lb),
                                "adaptive": len(lb) > 2})
        if best is None or res.fun < best[0].fun:
            best = (res, idx, history)
    res, start_index, history = best
    if not math.isfinite(res.fun):
        raise FitError("refinement did not reach a finite chi^2")

    z = np.asarray(res.x, float)
    H = _hessian(objective, z)
    evals, evecs = np.linalg.eigh(H)
    if evals[-1] <= 0:
        raise IdentifiabilityError("chi^2 is flat in every direction at the optimum", direction=problem.free[0])
    cond = evals[-1] / evals[0] if evals[0] > 0 else math.inf
    if not cond <= COND_LIMIT:
        weak = evecs[:, 0]
        name = problem.free[int(np.argmax(np.abs(weak)))]
        parts = ", ".join(f"{n}:{w:+.3f}" for n, w in zip(problem.free, weak))
        raise IdentifiabilityError(
            f"chi^2 curvature condition number {cond:.3g} exceeds {COND_LIMIT:g}; "
            f"flat direction (log-parameter weights) [{parts}] is dominated by {name}",
            direction=name)
    cov_log = 2.0 * np.linalg.inv(H)
    vals = problem.params_from_log(z)
    x = np.array([vals[n] for n in problem.free])
    cov = cov_log * np.outer(x, x)
    sig = {n: float(math.sqrt(max(cov[i, i], 0.0))) for i, n in enumerate(problem.free)}

    # Inferred trigger-time coherence at the reference power.
    P = problem.reference_power
    rate = vals["rate_per_mw"] * P
    i_r = problem.free.index("rate_per_mw") if "rate_per_mw" in problem.free else None
    i_b = problem.free.index("bandwidth") if "bandwidth" in problem.free else None
    rs = sig.get("rate_per_mw", 0.0) * P
    bs = sig.get("bandwidth", 0.0)
    c_rb = cov[i_r, i_b] * P if (i_r is not None and i_b is not None) else 0.0
    g0, g0s = infer_true_g2c0(rate, vals["bandwidth"], rs, bs, c_rb)

    dof = problem.n_points - len(problem.free)
    return FitResult({k: float(v) for k, v in vals.items() if k in PARAMS}, sig, list(problem.free),
                     cov.tolist(), float(res.fun), int(dof), float(g0), float(g0s), float(P), n_evals[0],
                     int(start_index), [float(h) for h in history])
