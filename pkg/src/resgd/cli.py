"""Command line entry point: ``resgd <mode> --config <path> [--out <dir>] [--seed <u64>] [--quiet]``.

Modes: solve, unrolled-infer, grad-check, cert-check, bench. Configs are TOML;
the accepted keys are listed in ``SCHEMA`` and documented in docs/config.md.
Unknown sections or keys are rejected.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .kkt import construct_certificate, verify_certificate
from .linops import fidelity_gradient, fidelity_value, save_matrix
from .problems import (
    ReconstructionInstance,
    load_instance,
    make_fourier_cs,
    make_gaussian_cs,
    mse,
    psnr,
)
from .regularizer import (
    FilterBank,
    g_apply,
    g_jacobian_transpose_apply,
    r_eta_gradient,
    r_eta_value,
)
from .solver import (
    ConfigError,
    SolverConfig,
    objective_F_eta,
    resolve_constants,
    run,
    step_sizes,
    write_trace_csv,
)
from .unrolled import NetworkParams, PhaseParams, load_network, loss_constraint, network_forward

MODES = ("solve", "unrolled-infer", "grad-check", "cert-check", "bench")

EXIT_OK, EXIT_CONFIG, EXIT_MAX_ITERS, EXIT_DIVERGED, EXIT_CHECK_FAILED = 0, 1, 2, 3, 4

GRAD_TOL = 1e-5

_num = (int, float)
_str = (str,)
_bool = (bool,)
_list = (list,)

# section -> key -> (accepted types, default); a default of None means "unset"
SCHEMA = {
    "": {"mode": (_str, None), "out": (_str, None)},
    "instance": {
        "path": (_str, None),
        "builder": (_str, "gaussian"),
        "h": (_num, 16),
        "w": (_num, 16),
        "ratio": (_num, 0.5),
        "seed": (_num, 0),
        "phantom": (_str, "blocks"),
        "mask_kind": (_str, "radial"),
    },
    "filter_bank": {
        "init": (_str, "seeded-random"),
        "d": (_num, None),
        "kernel_size": (_num, 3),
        "delta": (_num, 0.1),
        "seed": (_num, 0),
        "gain": (_num, 1.0),
        "zero_mean": (_bool, True),
        "path": (_str, None),
        "learned_perturbation": (_num, 0.0),
        "perturbation_seed": (_num, 0),
    },
    "solver": {
        "eta": (_num, 0.01),
        "eps": (_num, 1e-4),
        "alpha_bar": (_num, 2.0),
        "beta_bar": (_num, 1.5),
        "max_iters": (_num, 1000),
        "alphas": (_list, None),
        "betas": (_list, None),
        "eta_equals_eps": (_bool, False),
        "use_u_step": (_bool, True),
        "L_eta": (_num, None),
        "x0": (_str, "adjoint"),
    },
    "grad_check": {
        "points": (_num, 3),
        "seed": (_num, 0),
        "learned": (_bool, False),
    },
    "cert": {
        "point": (_str, "solve"),
        "eps": (_num, None),
        "seed": (_num, 0),
    },
    "unrolled": {
        "K": (_num, 5),
        "network": (_str, None),
        "vartheta": (_num, 1e-3),
    },
    "bench": {
        "seeds": (_list, [0, 1, 2, 3]),
    },
}

_INT_KEYS = {"h", "w", "seed", "d", "kernel_size", "max_iters", "points", "K",
             "perturbation_seed"}


@dataclass
class RunConfig:
    mode: str
    out: Path
    base_dir: Path
    sections: dict

    def __getitem__(self, section: str) -> dict:
        return self.sections[section]


def _check_value(section: str, key: str, value, types):
    where = f"[{section}] {key}" if section else key
    if isinstance(value, bool) and types is not _bool:
        raise ConfigError(f"{where}: expected {types[0].__name__}, got a boolean")
    if not isinstance(value, types):
        raise ConfigError(f"{where}: expected {types[0].__name__}, got {type(value).__name__}")
    if key in _INT_KEYS and value is not None and int(value) != value:
        raise ConfigError(f"{where}: expected an integer")
    if key in _INT_KEYS:
        value = int(value)
    return value


def parse_config(path, mode: str, out=None, seed=None) -> RunConfig:
    """Read and validate a TOML config; every problem surfaces as ``ConfigError``."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None

    sections = {name: {k: v[1] for k, v in keys.items()} for name, keys in SCHEMA.items()}
    given = {name: set() for name in SCHEMA}
    for key, value in raw.items():
        if isinstance(value, dict):
            if key not in SCHEMA or key == "":
                raise ConfigError(f"unknown section [{key}]")
            for sub, sub_val in value.items():
                if sub not in SCHEMA[key]:
                    raise ConfigError(f"unknown key [{key}] {sub}")
                sections[key][sub] = _check_value(key, sub, sub_val, SCHEMA[key][sub][0])
                given[key].add(sub)
        else:
            if key not in SCHEMA[""]:
                raise ConfigError(f"unknown top-level key {key}")
            sections[""][key] = _check_value("", key, value, SCHEMA[""][key][0])
            given[""].add(key)

    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if sections[""]["mode"] is not None and sections[""]["mode"] != mode:
        raise ConfigError(f"config is for mode {sections['']['mode']!r}, not {mode!r}")
    if seed is not None:
        if not 0 <= seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        sections["instance"]["seed"] = seed
        sections["grad_check"]["seed"] = seed
        sections["cert"]["seed"] = seed

    base = path.resolve().parent
    for section in ("instance", "filter_bank"):
        p = sections[section]["path"]
        if p is not None:
            full = (base / p).resolve()
            if not full.exists():
                raise ConfigError(f"[{section}] path does not exist: {full}")
            sections[section]["path"] = full
    net = sections["unrolled"]["network"]
    if net is not None:
        full = (base / net).resolve()
        if not full.exists():
            raise ConfigError(f"[unrolled] network does not exist: {full}")
        sections["unrolled"]["network"] = full

    fbs = sections["filter_bank"]
    if fbs["init"] not in ("identity-like", "seeded-random", "from-file"):
        raise ConfigError("[filter_bank] init must be identity-like, seeded-random or from-file")
    if fbs["init"] == "from-file" and fbs["path"] is None:
        raise ConfigError("[filter_bank] init = from-file needs a path")
    if fbs["init"] == "identity-like" and fbs["d"] not in (None, 1):
        raise ConfigError("[filter_bank] identity-like banks have d = 1")
    if sections["solver"]["x0"] not in ("adjoint", "zero"):
        raise ConfigError("[solver] x0 must be 'adjoint' or 'zero'")
    if sections["cert"]["point"] not in ("solve", "initial", "random"):
        raise ConfigError("[cert] point must be solve, initial or random")
    if sections["unrolled"]["K"] < 1:
        raise ConfigError("[unrolled] K must be >= 1")
    sections["_given"] = given

    out_dir = out or sections[""]["out"] or "resgd-out"
    return RunConfig(mode, (base / out_dir) if out is None else Path(out), base, sections)


# -- builders ----------------------------------------------------------------------

def build_instance(cfg: RunConfig, seed=None) -> ReconstructionInstance:
    s = cfg["instance"]
    if s["path"] is not None:
        try:
            return load_instance(s["path"])
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load instance {s['path']}: {exc}") from None
    seed = s["seed"] if seed is None else seed
    try:
        if s["builder"] == "gaussian":
            return make_gaussian_cs(s["h"], s["w"], s["ratio"], seed=seed, phantom=s["phantom"])
        if s["builder"] == "fourier":
            return make_fourier_cs(s["h"], s["w"], s["ratio"], mask_kind=s["mask_kind"], seed=seed,
                                   phantom=s["phantom"])
    except ValueError as exc:
        raise ConfigError(f"[instance] {exc}") from None
    raise ConfigError(f"[instance] builder must be 'gaussian' or 'fourier', got {s['builder']!r}")


def build_filter_bank(cfg: RunConfig, shape) -> FilterBank:
    s = cfg["filter_bank"]
    given = cfg["_given"]["filter_bank"]
    try:
        if s["init"] == "identity-like":
            fb = FilterBank.identity(shape, delta=s["delta"], kernel_size=s["kernel_size"])
        elif s["init"] == "seeded-random":
            fb = FilterBank.random(shape, d=s["d"] or 8, kernel_size=s["kernel_size"],
                                   delta=s["delta"], seed=s["seed"], gain=s["gain"],
                                   zero_mean=s["zero_mean"])
        else:
            fb = load_network(s["path"], shape=tuple(shape)).fb
            for key, have in (("d", fb.d), ("kernel_size", fb.kernel_size), ("delta", fb.act.delta)):
                if key in given and s[key] != have:
                    raise ConfigError(f"[filter_bank] {key} = {s[key]} disagrees with the file ({have})")
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot load filter bank: {exc}") from None
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"[filter_bank] {exc}") from None
    if s["learned_perturbation"]:
        fb = fb.perturb_learned(s["learned_perturbation"], seed=s["perturbation_seed"])
    return fb


def build_solver_config(cfg: RunConfig, **overrides) -> SolverConfig:
    s = {k: v for k, v in cfg["solver"].items() if k != "x0"}
    s.update(overrides)
    for key in ("alphas", "betas"):
        if s[key] is not None:
            s[key] = tuple(float(v) for v in s[key])
    try:
        return SolverConfig(**s)
    except ValueError as exc:
        raise ConfigError(f"[solver] {exc}") from None


def initial_point(cfg: RunConfig, inst: ReconstructionInstance) -> np.ndarray:
    if cfg["solver"]["x0"] == "zero":
        return np.zeros(inst.problem.op.n_in)
    return inst.problem.op.adjoint_apply(inst.problem.z)


# -- output helpers ------------------------------------------------------------------

def _json_float(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return v


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps({"schema": 1, **data}, indent=2, sort_keys=True) + "\n")


def _quality(inst: ReconstructionInstance, x) -> dict:
    if inst.x_true is None:
        return {"psnr": None, "mse": None}
    peak = float(inst.meta.get("peak", 1.0))
    return {"psnr": _json_float(psnr(x, inst.x_true, peak)), "mse": mse(x, inst.x_true)}


class _Reporter:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def __call__(self, msg: str) -> None:
        if not self.quiet:
            print(msg)


# -- modes ---------------------------------------------------------------------------

_STATUS_EXIT = {"converged": EXIT_OK, "max_iters": EXIT_MAX_ITERS, "diverged": EXIT_DIVERGED}


def cmd_solve(cfg: RunConfig, say) -> int:
    inst = build_instance(cfg)
    fb = build_filter_bank(cfg, inst.shape)
    scfg = build_solver_config(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        res = run(inst.problem, fb, initial_point(cfg, inst), scfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    wall = (time.perf_counter() - t0) * 1e3
    write_trace_csv(cfg.out / "trace.csv", res.trace)
    save_matrix(cfg.out / "x_final.rgdm", res.x)
    # iters counts trace rows; updates counts accepted steps (one fewer on convergence)
    metrics = {**_quality(inst, res.x), "iters": len(res.trace), "updates": res.n_updates,
               "stop_reason": res.status, "L_eta": res.L_eta}
    _write_json(cfg.out / "metrics.json", metrics)
    _write_json(cfg.out / "timing.json", {"wall_time_ms": wall})
    say(f"{res.status} after {len(res.trace)} iterations; psnr={metrics['psnr']}")
    return _STATUS_EXIT[res.status]


def _unrolled_params(cfg: RunConfig, inst: ReconstructionInstance) -> NetworkParams:
    u = cfg["unrolled"]
    if u["network"] is not None:
        try:
            return load_network(u["network"], shape=inst.shape)
        except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load network: {exc}") from None
    # no trained network: take the solver's own step schedule
    fb = build_filter_bank(cfg, inst.shape)
    scfg = build_solver_config(cfg)
    L_eta = resolve_constants(inst.problem, fb, scfg)[0]
    phases = [PhaseParams(*step_sizes(scfg, L_eta, k)) for k in range(1, u["K"] + 1)]
    return NetworkParams(fb, scfg.effective_eta, phases, u["vartheta"])


def cmd_unrolled_infer(cfg: RunConfig, say) -> int:
    inst = build_instance(cfg)
    params = _unrolled_params(cfg, inst)
    cfg.out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    x = network_forward(params, inst.problem.z, inst.problem)
    wall = (time.perf_counter() - t0) * 1e3
    save_matrix(cfg.out / "x_final.rgdm", x)
    metrics = {**_quality(inst, x), "K": params.K, "loss_constraint": loss_constraint(params),
               "F_eta": objective_F_eta(inst.problem, params.fb, x, params.eta)}
    _write_json(cfg.out / "metrics.json", metrics)
    _write_json(cfg.out / "timing.json", {"wall_time_ms": wall})
    say(f"K={params.K} psnr={metrics['psnr']}")
    return EXIT_OK


def _fd_rel_error(fun, grad, x, h) -> float:
    fd = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        fd[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return float(np.linalg.norm(fd - grad) / max(np.linalg.norm(fd), 1e-300))


def grad_check_errors(inst, fb, eta, points: int, seed: int, learned: bool) -> dict:
    """Largest norm-wise relative error of each analytic gradient against central differences."""
    p = inst.problem
    h = max(1e-6, 1e-3 * eta)
    rng = np.random.default_rng(seed)
    worst = {"grad_f": 0.0, "grad_g": 0.0, "grad_r_eta": 0.0, "grad_F_eta": 0.0}
    for _ in range(points):
        x = rng.standard_normal(p.op.n_in)
        w = rng.standard_normal((fb.m, fb.d))
        checks = {
            "grad_f": (lambda v: fidelity_value(p, v), fidelity_gradient(p, x)),
            "grad_g": (lambda v: float(np.sum(w * g_apply(fb, v))),
                       g_jacobian_transpose_apply(fb, x, w, learned=learned)),
            "grad_r_eta": (lambda v: r_eta_value(g_apply(fb, v), eta),
                           r_eta_gradient(fb, x, eta, learned=learned)),
            "grad_F_eta": (lambda v: objective_F_eta(p, fb, v, eta),
                           fidelity_gradient(p, x) + r_eta_gradient(fb, x, eta, learned=learned)),
        }
        for name, (fun, grad) in checks.items():
            worst[name] = max(worst[name], _fd_rel_error(fun, grad, x, h))
    return worst


def cmd_grad_check(cfg: RunConfig, say) -> int:
    inst = build_instance(cfg)
    fb = build_filter_bank(cfg, inst.shape)
    scfg = build_solver_config(cfg)
    g = cfg["grad_check"]
    eta = scfg.effective_eta
    errors = grad_check_errors(inst, fb, eta, g["points"], g["seed"], g["learned"])
    L_eta, _, L_f = resolve_constants(inst.problem, fb, scfg)
    passed = all(e <= GRAD_TOL for e in errors.values())
    for name, e in errors.items():
        say(f"{name:11s} max rel error {e:.3e} {'ok' if e <= GRAD_TOL else 'FAIL'}")
    # L_eta / L_f grows like 1/eta and says how stiff the smoothed problem is
    say(f"L_eta = {L_eta:.6g} (L_f = {L_f:.6g}, ratio {L_eta / max(L_f, 1e-300):.3g})")
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.out / "grad_check.json", {"max_rel_error": errors, "tol": GRAD_TOL,
                                                "eta": eta, "L_eta": L_eta, "pass": passed})
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def cmd_cert_check(cfg: RunConfig, say) -> int:
    inst = build_instance(cfg)
    fb = build_filter_bank(cfg, inst.shape)
    scfg = build_solver_config(cfg)
    c = cfg["cert"]
    eta = scfg.effective_eta
    eps = c["eps"] if c["eps"] is not None else scfg.eps
    x = initial_point(cfg, inst)
    extra = {}
    if c["point"] == "solve":
        res = run(inst.problem, fb, x, scfg)
        x = res.x
        extra = {"iters": len(res.trace), "updates": res.n_updates, "stop_reason": res.status}
    elif c["point"] == "random":
        x = np.random.default_rng(c["seed"]).standard_normal(inst.problem.op.n_in)
    cert = construct_certificate(inst.problem, fb, x, eta, eps=eps)
    report = verify_certificate(inst.problem, fb, x, cert)
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "certificate.json").write_text(report.to_json() + "\n")
    if extra:
        _write_json(cfg.out / "metrics.json", {**_quality(inst, x), **extra})
    say(f"certificate {'passed' if report.passed else 'FAILED'}: "
        f"con1={report.con1_norm:.3e} con2={report.con2_max:.3e} eps={eps:g}")
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def _bench_one(args):
    cfg, seed = args
    inst = build_instance(cfg, seed=seed)
    fb = build_filter_bank(cfg, inst.shape)
    scfg = build_solver_config(cfg)
    t0 = time.perf_counter()
    res = run(inst.problem, fb, initial_point(cfg, inst), scfg)
    wall = (time.perf_counter() - t0) * 1e3
    return ({"seed": seed, **_quality(inst, res.x), "iters": len(res.trace),
             "updates": res.n_updates, "stop_reason": res.status}, wall)


def bench_workers(n_jobs: int) -> int:
    cap = os.environ.get("RESGD_THREADS")
    limit = os.cpu_count() or 1
    if cap:
        try:
            limit = max(1, int(cap))
        except ValueError:
            raise ConfigError(f"RESGD_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(limit, n_jobs))


def cmd_bench(cfg: RunConfig, say) -> int:
    seeds = cfg["bench"]["seeds"]
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        raise ConfigError("[bench] seeds must be a nonempty list of nonnegative integers")
    # fail fast on config problems before spawning workers
    build_solver_config(cfg)
    build_filter_bank(cfg, build_instance(cfg, seed=seeds[0]).shape)
    jobs = [(cfg, s) for s in seeds]
    workers = bench_workers(len(jobs))
    if workers == 1:
        results = [_bench_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_bench_one, jobs))
    cfg.out.mkdir(parents=True, exist_ok=True)
    _write_json(cfg.out / "bench.json", {"runs": [r for r, _ in results]})
    _write_json(cfg.out / "timing.json", {"wall_time_ms": [t for _, t in results],
                                          "workers": workers})
    for r, _ in results:
        say(f"seed {r['seed']}: {r['stop_reason']} after {r['iters']} iterations, psnr={r['psnr']}")
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "unrolled-infer": cmd_unrolled_infer,
    "grad-check": cmd_grad_check,
    "cert-check": cmd_cert_check,
    "bench": cmd_bench,
}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="resgd", description="Res-GD solver and checks")
    ap.add_argument("mode", choices=MODES)
    ap.add_argument("--config", required=True, help="TOML run configuration")
    ap.add_argument("--out", help="output directory (overrides the config)")
    ap.add_argument("--seed", type=int, help="override the instance and check seeds")
    ap.add_argument("--quiet", action="store_true", help="suppress progress output")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = parse_config(args.config, args.mode, out=args.out, seed=args.seed)
        return COMMANDS[args.mode](cfg, _Reporter(args.quiet))
    except ConfigError as exc:
        print(f"resgd: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
