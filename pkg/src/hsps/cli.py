"""Command-line front end: ``hsps predict|simulate|count|fit|report CONFIG ...``.

Configs are JSON documents validated against ``schemas/config.json``
(unknown keys are rejected). User-facing units: ns for windows and jitter,
ps for tag resolution, mW for pump power, MHz for rates, THz for bandwidth.
Everything is converted to SI once, here.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 fit error.
Every file written embeds the SHA-256 of the canonical config.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import math
import os
import platform
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import scipy

from . import __version__
from .coincidence import (BACKEND, BinaryTagWriter, CountResult, StreamCounter, TagStream, iter_binary,
                          peak_wall, read_text, write_text)
from .errors import ConfigError, DataError, FitError, HspsError, ParameterError
from .fit import Dataset, FitProblem, dataset_from_histogram, dataset_from_profile, fit
from .model import SpdcParams
from .response import (CoincidenceConfig, DetectorModel, g2bar_c, g2bar_c_zero_sweep, g2bar_si)
from .simulate import RNG_ALGORITHM, SimConfig, inject_background, iter_generate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_FIT = 0, 2, 3, 4
CONFIG_SCHEMA = "hsps.config/1"
REPORT_SCHEMA = "hsps.report/1"

DEFAULTS = {
    "source": {"bandwidth_thz": 3.0, "pump_mw": 11.9},
    "detectors": {"jitter_ns": 0.35, "efficiency": 0.4, "dead_time_ns": 45.0, "tag_resolution_ps": 156.25},
    "coincidence": {"window_ns": 0.78, "range_ns": 20.0},
    "predict": {"tau_ns": {"start": -5.0, "stop": 5.0, "num": 201},
                "powers_mw": [float(x) for x in range(1, 21)],
                "windows_ns": [0.5, 0.78, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0, 7.0, 10.0, 14.0, 20.0],
                "mode": "delta", "quantize": False},
    "simulate": {"duration_s": 1.0, "seed": 1, "splitter_ratio": 0.5, "background_hz": 0.0,
                 "format": "binary"},
    "fit": {"free": ["rate_per_mw", "jitter"], "bounds": {}, "max_tau_ns": 1.2, "curves": ["g2si"],
            "quantize": True},
}

REPORT_JSON_SCHEMA = {
    "type": "object",
    "required": ["schema", "config_sha256", "versions", "seeds", "runs", "fit", "g2c0_true", "timing"],
    "properties": {
        "schema": {"const": REPORT_SCHEMA},
        "config_sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "runs": {"type": "array", "minItems": 1},
        "fit": {"type": "object", "required": ["params", "sigma", "chi2"]},
        "g2c0_true": {"type": "object", "required": ["value", "sigma"]},
    },
}


class Stage(Exception):
    """Wraps a failure with the name of the pipeline stage it happened in."""

    def __init__(self, stage, error):
        self.stage = stage
        self.error = error
        super().__init__(f"stage '{stage}' failed: {error}")


# ---------------------------------------------------------------------------
# config


def _schema():
    return json.loads(resources.files("hsps").joinpath("schemas/config.json").read_text())


def load_config(path):
    """Parse and validate a config file. Returns ``(config_with_defaults, sha256)``."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return validate_config(raw)


def validate_config(raw):
    try:
        jsonschema.validate(raw, _schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    digest = hashlib.sha256(json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
    cfg = json.loads(json.dumps(DEFAULTS))
    for section, values in raw.items():
        if isinstance(values, dict) and section in cfg:
            cfg[section].update(values)
        else:
            cfg[section] = values
    return cfg, digest


def _detector(base, over=None):
    d = {**base, **(over or {})}
    return DetectorModel(jitter=d["jitter_ns"] * 1e-9, efficiency=d["efficiency"],
                         dead_time=d["dead_time_ns"] * 1e-9, tag_resolution=d["tag_resolution_ps"] * 1e-12)


def build_objects(cfg, pump=None):
    """Turn a validated config into model objects, mapping parameter errors to ConfigError."""
    try:
        src = cfg["source"]
        pump = src["pump_mw"] if pump is None else pump
        if not pump > 0:
            raise ParameterError(f"pump power must be > 0 mW, got {pump!r}")
        p = SpdcParams(None, src["bandwidth_thz"] * 1e12, src["rate_per_mw_mhz"] * 1e6, float(pump))
        base = {k: v for k, v in cfg["detectors"].items() if k != "channels"}
        common = _detector(base)
        chans = cfg["detectors"].get("channels", {})
        dets = {name: _detector(base, chans.get(name)) for name in ("i", "s1", "s2")}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            coin = CoincidenceConfig(0.5 * cfg["coincidence"]["window_ns"] * 1e-9)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None
    return p, common, dets, coin


def _header(kind, digest):
    return [f"hsps {kind}", f"version={__version__}", f"config_sha256={digest}"]


def _write_csv(path, header, columns, rows):
    with open(path, "w", newline="\n") as fh:
        for h in header:
            fh.write(f"# {h}\n")
        fh.write(",".join(columns) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(x)) for x in r) + "\n")


def _write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _tau_grid(spec):
    return np.linspace(spec["start"], spec["stop"], spec["num"])


# ---------------------------------------------------------------------------
# stages


def run_predict(cfg, digest, out: Path):
    p, det, _, coin = build_objects(cfg)
    pr = cfg["predict"]
    mode, q = pr["mode"], pr["quantize"]
    tau_ns = _tau_grid(pr["tau_ns"])
    tau = tau_ns * 1e-9
    head = _header("predict", digest)
    files = {}
    files["g2si_tau"] = out / "g2si_tau.csv"
    _write_csv(files["g2si_tau"], head, ["tau_ns", "g2si"],
               zip(tau_ns, np.atleast_1d(g2bar_si(p, det, coin, tau, mode, q))))
    files["g2c_tau"] = out / "g2c_tau.csv"
    _write_csv(files["g2c_tau"], head, ["tau_ns", "g2c"],
               zip(tau_ns, np.atleast_1d(g2bar_c(p, det, coin, tau, mode, q))))
    sweep = g2bar_c_zero_sweep(p, det, coin, powers=pr["powers_mw"], mode=mode, quantize=q)
    files["g2c0_vs_power"] = out / "g2c0_vs_power.csv"
    _write_csv(files["g2c0_vs_power"], head, ["pump_mw", "g2c0"], sweep)
    win = np.asarray(pr["windows_ns"], float) * 1e-9
    real = g2bar_c_zero_sweep(p, det, windows=win, mode=mode, quantize=q)
    ideal_det = DetectorModel(jitter=0.0, tag_resolution=det.tag_resolution)
    ideal = g2bar_c_zero_sweep(p, ideal_det, windows=win, mode=mode, quantize=q)
    files["g2c0_vs_window"] = out / "g2c0_vs_window.csv"
    _write_csv(files["g2c0_vs_window"], head, ["window_ns", "g2c0", "g2c0_ideal_detectors"],
               zip(win * 1e9, real[:, 1], ideal[:, 1]))
    return {k: str(v) for k, v in files.items()}


def _sim_config(cfg, pump, seed):
    p, _, dets, _ = build_objects(cfg, pump)
    s = cfg["simulate"]
    try:
        return SimConfig(p, {"i": dets["i"], "s1": dets["s1"], "s2": dets["s2"]}, s["splitter_ratio"],
                         s["duration_s"], int(seed))
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None


def _powers(cfg):
    return cfg["simulate"].get("powers_mw") or [cfg["source"]["pump_mw"]]


def _chunks(sc: SimConfig, background, seed):
    """Simulated chunks, with optional background merged per chunk."""
    for ch, tk in iter_generate(sc):
        if background > 0 and len(tk):
            lo, hi = int(tk[0]), int(tk[-1])
            part = TagStream(ch, tk - np.uint64(lo), sc.resolution, 3, (hi - lo + 1) * sc.resolution)
            part = inject_background(part, background, seed=seed * 1_000_003 + lo)
            yield part.channel, part.ticks + np.uint64(lo)
        else:
            yield ch, tk


def run_simulate(cfg, digest, out: Path):
    s = cfg["simulate"]
    manifest = {"config_sha256": digest, "version": __version__, "rng": RNG_ALGORITHM, "runs": []}
    for k, pump in enumerate(_powers(cfg)):
        seed = s["seed"] + k
        sc = _sim_config(cfg, pump, seed)
        if s["format"] == "binary":
            path = out / f"tags_{pump:g}mW.htag"
            with BinaryTagWriter(path, sc.resolution) as wr:
                for ch, tk in _chunks(sc, s["background_hz"], seed):
                    wr.write(ch, tk)
                n = wr.n_tags
        else:
            path = out / f"tags_{pump:g}mW.csv"
            parts = list(_chunks(sc, s["background_hz"], seed))
            ch = np.concatenate([c for c, _ in parts]) if parts else np.zeros(0, np.uint8)
            tk = np.concatenate([t for _, t in parts]) if parts else np.zeros(0, np.uint64)
            stream = TagStream(ch, tk, sc.resolution, 3, sc.duration)
            write_text(stream, path, comments=_header("simulate", digest) + [f"pump_mw={pump!r}", f"seed={seed}"])
            n = len(stream)
        manifest["runs"].append({"pump_mw": pump, "seed": seed, "duration_s": sc.duration, "path": str(path),
                                 "n_tags": int(n)})
    _write_json(out / "simulate.json", manifest)
    return manifest


def _counter(cfg, resolution):
    c = cfg["coincidence"]
    return StreamCounter(resolution, 0.5 * c["window_ns"] * 1e-9, c["range_ns"] * 1e-9)


def _count_outputs(res: CountResult, pump, digest, out: Path, stem):
    head = _header("count", digest) + [f"pump_mw={pump!r}"]
    paths = {"hist_is1": out / f"{stem}_hist_is1.csv", "hist_is2": out / f"{stem}_hist_is2.csv",
             "surface": out / f"{stem}_surface.csv", "g2c": out / f"{stem}_g2c.csv"}
    res.histogram(1).to_csv(paths["hist_is1"], head)
    res.histogram(2).to_csv(paths["hist_is2"], head)
    res.surface_histogram().to_csv(paths["surface"], head)
    prof = res.g2c_profile()
    prof.to_csv(paths["g2c"], head)
    g0, g0s = prof.at_zero
    try:
        _, _, ratio, ratio_s = peak_wall(res.surface_histogram())
    except DataError:
        ratio, ratio_s = math.nan, math.nan
    summary = {
        "config_sha256": digest, "version": __version__, "backend": res.backend, "pump_mw": pump,
        "singles_hz": {str(k): v for k, v in res.singles().items()},
        "g2c0": g0, "g2c0_sigma": g0s, "peak_wall_ratio": ratio, "peak_wall_sigma": ratio_s,
        "triples_at_zero": int(prof.triples[len(prof.triples) // 2]),
        "files": {k: str(v) for k, v in paths.items()}, "counts": res.to_dict(),
    }
    _write_json(out / f"{stem}_counts.json", summary)
    return summary


def run_count(cfg, digest, tagfile, out: Path, pump=None, duration=None):
    pump = cfg["source"]["pump_mw"] if pump is None else pump
    path = Path(tagfile)
    try:
        with open(path, "rb") as fh:
            binary = fh.read(4) == b"HTAG"
    except OSError as exc:
        raise DataError(f"cannot read tag file {path}: {exc}") from None
    if binary:
        ctr, last = None, -1
        for res_s, _, ch, tk in iter_binary(path):
            ctr = ctr or _counter(cfg, res_s)
            ctr.feed(ch, tk)
            if len(tk):
                last = int(tk[-1])
        if ctr is None:
            raise DataError(f"tag file {path} holds no tags")
        dur = duration if duration is not None else (last + 1) * ctr.resolution
    else:
        stream = read_text(path, duration=duration)
        ctr = _counter(cfg, stream.resolution)
        ctr.feed(stream.channel, stream.ticks)
        dur = stream.duration
    if not dur > 0:
        raise DataError("cannot determine a positive acquisition duration")
    res = ctr.finish(dur)
    return _count_outputs(res, pump, digest, out, path.stem)


def _fit_problem(cfg, summaries):
    f = cfg["fit"]
    _, det, _, _ = build_objects(cfg)
    max_tau = f["max_tau_ns"] * 1e-9
    datasets = []
    for s in summaries:
        res = CountResult.from_dict(s["counts"])
        pump = s["pump_mw"]
        if "g2si" in f["curves"]:
            for arm in (1, 2):
                datasets.append(dataset_from_histogram(res.histogram(arm), pump, max_tau=max_tau,
                                                       label=f"{pump:g}mW s{arm}"))
        if "g2c" in f["curves"]:
            datasets.append(dataset_from_profile(res.g2c_profile(), pump, 2 * res.tau_coin, max_tau=max_tau,
                                                 label=f"{pump:g}mW g2c"))
    scale = {"rate_per_mw_mhz": ("rate_per_mw", 1e6), "bandwidth_thz": ("bandwidth", 1e12),
             "jitter_ns": ("jitter", 1e-9)}
    bounds = {scale[k][0]: (v[0] * scale[k][1], v[1] * scale[k][1]) for k, v in f["bounds"].items()}
    fixed = {"rate_per_mw": cfg["source"]["rate_per_mw_mhz"] * 1e6, "bandwidth": cfg["source"]["bandwidth_thz"] * 1e12,
             "jitter": det.jitter}
    try:
        return FitProblem(datasets, tuple(f["free"]), bounds, fixed,
                          det.tag_resolution if f["quantize"] else None,
                          f.get("reference_pump_mw") or cfg["source"]["pump_mw"])
    except ParameterError as exc:
        raise ConfigError(str(exc)) from None


def run_fit(cfg, digest, count_files, out: Path):
    summaries = []
    for cf in count_files:
        try:
            summaries.append(json.loads(Path(cf).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read count summary {cf}: {exc}") from None
    problem = _fit_problem(cfg, summaries)
    result = fit(problem)
    doc = result.to_dict()
    doc["config_sha256"] = digest
    pdoc = problem.to_dict()
    pdoc["config_sha256"] = digest
    _write_json(out / "fit_problem.json", pdoc)
    _write_json(out / "fit_result.json", doc)
    return doc


def run_report(cfg, digest, out: Path):
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    t0 = time.perf_counter()
    s = cfg["simulate"]
    powers = _powers(cfg)
    for pump in powers:  # surface config errors before any work starts
        _sim_config(cfg, pump, 0)

    def one(k, pump):
        seed = s["seed"] + k
        stage = f"simulate+count {pump:g} mW"
        try:
            sc = _sim_config(cfg, pump, seed)
            ctr = _counter(cfg, sc.resolution)
            for ch, tk in _chunks(sc, s["background_hz"], seed):
                ctr.feed(ch, tk)
            res = ctr.finish(sc.duration)
            stage = f"count {pump:g} mW"
            summary = _count_outputs(res, pump, digest, out, f"run_{pump:g}mW")
        except HspsError as exc:
            raise Stage(stage, exc) from exc
        run = {"pump_mw": pump, "seed": seed, "duration_s": sc.duration, "singles_hz": summary["singles_hz"],
               "g2c0": summary["g2c0"], "g2c0_sigma": summary["g2c0_sigma"],
               "peak_wall_ratio": summary["peak_wall_ratio"], "files": summary["files"]}
        return summary, run

    # Runs at different pump powers are independent; results are collected in
    # config order so the report does not depend on scheduling.
    with ThreadPoolExecutor(max_workers=min(len(powers), os.cpu_count() or 1)) as pool:
        futures = [pool.submit(one, k, pump) for k, pump in enumerate(powers)]
        done = [f.result() for f in futures]
    summaries = [d[0] for d in done]
    runs = [d[1] for d in done]
    try:
        problem = _fit_problem(cfg, summaries)
        result = fit(problem)
    except (ConfigError, FitError):
        raise
    except HspsError as exc:
        raise Stage("fit", exc) from exc
    _write_json(out / "fit_result.json", {**result.to_dict(), "config_sha256": digest})
    report = {
        "schema": REPORT_SCHEMA,
        "config_sha256": digest,
        "versions": {"hsps": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "backend": BACKEND,
        "rng": RNG_ALGORITHM,
        "seeds": [r["seed"] for r in runs],
        "runs": runs,
        "fit": {"params": result.params, "sigma": result.sigma, "chi2": result.chi2, "dof": result.dof,
                "free": result.free},
        "g2c0_true": {"value": result.g2c0, "sigma": result.g2c0_sigma, "pump_mw": result.reference_power},
        "timing": {"started": started, "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
                   "elapsed_s": time.perf_counter() - t0},
    }
    jsonschema.validate(report, REPORT_JSON_SCHEMA)
    _write_json(out / "report.json", report)
    return report


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    ap = argparse.ArgumentParser(prog="hsps", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"hsps {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("config", help="JSON run configuration (schema hsps.config/1)")
        sp.add_argument("-o", "--out", default=".", help="output directory (created if missing)")
        return sp

    add("predict", "write theory curves as CSV")
    add("simulate", "generate time-tag files for each configured pump power")
    sp = add("count", "count coincidences in a tag file")
    sp.add_argument("tags", help="tag file (binary HTAG or text CSV)")
    sp.add_argument("--pump", type=float, help="pump power of this acquisition in mW (default: config)")
    sp.add_argument("--duration", type=float, help="acquisition time in s (default: from the file)")
    sp = add("fit", "fit source parameters to count summaries")
    sp.add_argument("counts", nargs="+", help="*_counts.json files written by 'count'")
    add("report", "simulate, count and fit in one go; writes report.json")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        cfg, digest = load_config(args.config)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "predict":
            result = run_predict(cfg, digest, out)
        elif args.command == "simulate":
            result = run_simulate(cfg, digest, out)
        elif args.command == "count":
            result = run_count(cfg, digest, args.tags, out, args.pump, args.duration)
            result = {k: v for k, v in result.items() if k != "counts"}
        elif args.command == "fit":
            result = run_fit(cfg, digest, args.counts, out)
        else:
            result = run_report(cfg, digest, out)
    except Stage as exc:
        print(f"hsps {args.command}: {exc}", file=sys.stderr)
        inner = exc.error
        return EXIT_FIT if isinstance(inner, FitError) else EXIT_CONFIG if isinstance(inner, ConfigError) else EXIT_DATA
    except ConfigError as exc:
        print(f"hsps {args.command}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FitError as exc:
        print(f"hsps {args.command}: fit error: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (DataError, HspsError) as exc:
        print(f"hsps {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
