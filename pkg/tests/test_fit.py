import json
import math

import numpy as np
import pytest

from hsps import model
from hsps.coincidence import count_stream
from hsps.errors import FitError, IdentifiabilityError, ParameterError
from hsps.fit import (Dataset, FitProblem, FitResult, dataset_from_histogram, dataset_from_profile, fit,
                      infer_true_g2c0)
from hsps.model import SpdcParams
from hsps.response import CoincidenceConfig, DetectorModel, g2bar_c, g2bar_si
from hsps.simulate import SimConfig, generate

TRUTH = dict(rate_per_mw=1.2e6, bandwidth=3e12, jitter=0.35e-9)
POWERS = (2.0, 6.0, 12.0)
TAU = np.arange(-3, 4) * 0.78e-9


def curves(kind="g2si", rel=0.02, powers=POWERS, tau_coin=0.39e-9):
    out = []
    for P in powers:
        p = SpdcParams(None, TRUTH["bandwidth"], TRUTH["rate_per_mw"], P)
        d = DetectorModel(jitter=TRUTH["jitter"])
        c = CoincidenceConfig(tau_coin)
        fn = g2bar_si if kind == "g2si" else g2bar_c
        v = np.atleast_1d(fn(p, d, c, TAU))
        out.append((P, v, rel * v + (1e-3 if kind == "g2c" else 0.0)))
    return out


def datasets(seed=None, kind="g2si", **kw):
    rng = np.random.default_rng(seed) if seed is not None else None
    return [Dataset(kind, P, 0.39e-9, TAU, v + (rng.normal(0, s) if rng is not None else 0.0), s)
            for P, v, s in curves(kind, **kw)]


def test_noiseless_round_trip():
    r = fit(FitProblem(datasets() + datasets(kind="g2c")))
    for k in ("rate_per_mw", "jitter"):
        assert r.params[k] == pytest.approx(TRUTH[k], rel=1e-3)
    assert r.chi2 < 1e-4
    assert r.g2c0 == pytest.approx(model.g2_cond_at_zero(SpdcParams(1.2e6 * 12.0, 3e12)), rel=1e-3)
    assert r.reference_power == 12.0


def test_noisy_round_trip_coverage():
    hits = {"rate_per_mw": 0, "jitter": 0}
    for seed in range(50):
        r = fit(FitProblem(datasets(seed)))
        for k in hits:
            hits[k] += abs(r.params[k] - TRUTH[k]) < 2 * r.sigma[k]
    assert all(h >= 0.95 * 50 for h in hits.values()), hits


def test_chi2_history_is_monotone():
    r = fit(FitProblem(datasets(1)))
    assert all(b <= a for a, b in zip(r.history, r.history[1:]))
    assert r.dof == 3 * len(TAU) - 2
    assert r.chi2_dof == pytest.approx(r.chi2 / r.dof)


def test_single_setting_is_not_identifiable():
    with pytest.raises(IdentifiabilityError) as err:
        FitProblem(datasets()[:1])
    assert err.value.direction == "jitter"


def test_free_bandwidth_is_degenerate():
    # the sub-picosecond source width is invisible behind nanosecond jitter
    with pytest.raises(IdentifiabilityError) as err:
        fit(FitProblem(datasets(), free=("rate_per_mw", "bandwidth", "jitter")))
    assert err.value.direction in ("bandwidth", "rate_per_mw")
    assert "condition number" in str(err.value)


def test_problem_validation():
    with pytest.raises(ParameterError):
        FitProblem(datasets(), free=("speed",))
    with pytest.raises(ParameterError):
        FitProblem(datasets(), free=())
    with pytest.raises(ParameterError):
        FitProblem(datasets(), bounds={"jitter": (1e-9, 1e-10)})
    with pytest.raises(IdentifiabilityError):
        FitProblem([])


def test_dataset_validation():
    with pytest.raises(ParameterError):
        Dataset("g3", 1.0, 1e-9, [0.0], [1.0], [0.1])
    with pytest.raises(ParameterError):
        Dataset("g2si", 1.0, 1e-9, [0.0], [1.0], [0.0])
    with pytest.raises(ParameterError):
        Dataset("g2si", 1.0, 1e-9, [0.0, 1.0], [1.0], [0.1])
    with pytest.raises(ParameterError):
        Dataset("g2si", 0.0, 1e-9, [0.0], [1.0], [0.1])
    with pytest.raises(ParameterError):
        Dataset("g2si", 1.0, 1e-9, [], [], [])


def test_out_of_regime_parameters_give_infinite_chi2():
    prob = FitProblem(datasets())
    assert prob.chi2(dict(rate_per_mw=1e12, bandwidth=3e12, jitter=0.35e-9)) == math.inf


def test_unfittable_problem_raises_fit_error():
    # every start lies outside the low-gain regime
    prob = FitProblem(datasets(), bounds={"rate_per_mw": (1e11, 1e12)})
    with pytest.raises(FitError):
        fit(prob)


def test_json_round_trips(tmp_path):
    prob = FitProblem(datasets(2), tag_resolution=156.25e-12)
    back = FitProblem.from_json(prob.to_json())
    assert back.to_dict() == prob.to_dict()
    prob.to_json(tmp_path / "p.json")
    assert FitProblem.from_json(str(tmp_path / "p.json")).to_dict() == prob.to_dict()
    r = fit(prob)
    r2 = FitResult.from_json(r.to_json())
    assert r2 == r
    d = json.loads(r.to_json())
    assert d["schema"] == "hsps.fit-result/1"
    with pytest.raises(ParameterError):
        FitResult.from_dict({**d, "schema": "other/9"})
    with pytest.raises(ParameterError):
        FitProblem.from_dict({**prob.to_dict(), "schema": "other/9"})


def test_infer_true_g2c0_propagation():
    R, B = 1.5e7, 3e12
    v, s = infer_true_g2c0(R, B, rate_sigma=1e5)
    assert v == pytest.approx(model.g2_cond_at_zero(SpdcParams(R, B)))
    h = 1e3
    deriv = (infer_true_g2c0(R + h, B)[0] - infer_true_g2c0(R - h, B)[0]) / (2 * h)
    assert s == pytest.approx(abs(deriv) * 1e5, rel=1e-5)
    assert infer_true_g2c0(0.0, B) == (0.0, 0.0)
    with pytest.raises(ParameterError):
        infer_true_g2c0(-1.0, B)


def test_datasets_from_counts():
    det = DetectorModel(jitter=0.35e-9, efficiency=0.4)
    cfg = SimConfig(SpdcParams(None, 3e12, 1.2e6, 11.9), {0: det, 1: det, 2: det}, duration=0.05, rng_seed=3)
    r = count_stream(generate(cfg), 0.39e-9, 5e-9)
    ds = dataset_from_histogram(r.histogram(1), 11.9, max_tau=2e-9, label="s1")
    assert ds.kind == "g2si" and np.all(np.abs(ds.tau) <= 2e-9 + 1e-15)
    assert ds.tau_coin == pytest.approx(r.tau_coin)
    k = int(np.argmin(np.abs(ds.tau)))
    assert ds.value[k] > 50
    prof = dataset_from_profile(r.g2c_profile(), 11.9, 2 * r.tau_coin, max_tau=2e-9, min_counts=5)
    assert prof.kind == "g2c"
    # sparse triple bins are pooled, so every point carries at least min_counts triples or is a merged span
    assert prof.span.sum() <= len(r.g2c_profile().tau)
    assert np.all(prof.sigma > 0)
