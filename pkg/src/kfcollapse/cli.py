"""Command-line runner for the experiment suites.

Subcommands
-----------
run          generate a suite, run the filter(s) and write every data file
cross-check  compare Riccati, closed-form and symplectic propagation
lyapunov     exponents only
report       re-derive decay fits and rank traces from a run directory

Exit status is 0 on success, 2 for configuration errors and 3 for
numerical failures.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import __version__
from .diagnostics import (bound_audit, consecutive_distance, eigen_decay_fit,
                          gamma_inverse_trace, projected_information, stable_norms)
from .errors import InputContractError, NumericalError
from .kf import (FactoredCovariance, aggregate_trace, closed_form_covariance,
                 closed_form_trace, factored_analysis, factored_forecast,
                 riccati_trace, run_filter, step_precision)
from .linalg import random_factor, rel_frobenius, symmetrize
from .lyapunov import classify_spectrum, forward_qr_pass
from .models import Lorenz95Config, gen_model_sequence, save_matrices
from .symplectic import propagate_sequence

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

SUITES = {
    "exp1": ("autonomous-random", 30, 10),
    "exp2": ("nonautonomous-random", 30, 10),
    "exp3": ("lorenz95", 40, 15),
}
OBS = {"dense": "dense-random", "first": "first-component"}


class ConfigError(InputContractError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    """Settings of one experiment run.

    ``rank`` and ``rank2`` accept an integer or ``'full'``; ``rank2`` is
    optional and triggers a second filter run for pair distances.
    """

    suite: str = "exp2"
    n: int = None
    d: int = None
    steps: int = None
    seed: int = 0
    rank: object = "full"
    rank2: object = None
    rank_threshold: float = 1e-10
    neutral_tol: float = 1e-3
    obs: str = "dense"
    m_scale: float = 1.0
    lyap_seed: int = 12345
    audit_steps: int = 50
    dump_every: int = 0
    oracle: bool = False
    out: str = "out"
    F: float = 8.0
    dt: float = 0.1
    substeps: int = 10
    spinup: int = 5000

    def resolve(self, default_steps=5000):
        """Fill suite defaults and validate; returns self."""
        if self.suite not in SUITES:
            raise ConfigError(f"unknown suite {self.suite!r}")
        if self.obs not in OBS:
            raise ConfigError(f"obs must be one of {sorted(OBS)}")
        _, n, d = SUITES[self.suite]
        self.n = n if self.n is None else int(self.n)
        self.d = d if self.d is None else int(self.d)
        if self.obs == "first":
            self.d = 1
        self.steps = default_steps if self.steps is None else int(self.steps)
        if self.n < 1 or self.d < 1 or self.d > self.n:
            raise ConfigError("need 1 <= d <= n")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.suite == "exp3" and self.n < 4:
            raise ConfigError("exp3 needs n >= 4")
        self.rank = self._rank(self.rank)
        self.rank2 = None if self.rank2 in (None, "", "none") else self._rank(self.rank2)
        if self.rank_threshold <= 0 or self.neutral_tol <= 0 or self.m_scale <= 0:
            raise ConfigError("thresholds and m_scale must be positive")
        if self.suite == "exp3":
            try:
                self.l96()
            except InputContractError as exc:
                raise ConfigError(str(exc)) from exc
        return self

    def _rank(self, r):
        if r is None or r == "full":
            return self.n
        try:
            r = int(r)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"rank must be an integer or 'full', got {r!r}") from exc
        if not 1 <= r <= self.n:
            raise ConfigError(f"rank must lie in [1, {self.n}]")
        return r

    def l96(self):
        return Lorenz95Config(n=self.n, F=self.F, dt=self.dt, substeps=self.substeps,
                              spinup=self.spinup)

    def kind(self):
        return SUITES[self.suite][0]


_BOOL = {"1": True, "true": True, "yes": True, "0": False, "false": False, "no": False}


def _coerce(name, value):
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    t = types[name]
    if value is None:
        return None
    if name in ("rank", "rank2", "suite", "obs", "out"):
        return str(value).strip()
    try:
        if t in ("int", int):
            return int(value)
        if t in ("float", float):
            return float(value)
        if t in ("bool", bool):
            v = str(value).strip().lower()
            if v not in _BOOL:
                raise ValueError(value)
            return _BOOL[v]
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc
    return value


def read_config(path):
    """Parse a flat ``key = value`` file; '#' starts a comment."""
    out = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for num, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{num}: expected key = value")
        key, val = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        out[key] = _coerce(key, val)
    return out


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


class RunDirectory:
    """Collects written files and their hashes for the manifest."""

    def __init__(self, path):
        self.path = path
        os.makedirs(path, exist_ok=True)
        self.files = {}

    def _record(self, name):
        h = hashlib.sha256()
        with open(os.path.join(self.path, name), "rb") as fh:
            h.update(fh.read())
        self.files[name] = h.hexdigest()

    def csv(self, name, header, rows):
        with open(os.path.join(self.path, name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) if not isinstance(v, str) else v for v in row])
        self._record(name)

    def json(self, name, obj):
        with open(os.path.join(self.path, name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        self._record(name)

    def matrices(self, name, mats):
        save_matrices(os.path.join(self.path, name), mats)
        self._record(name)

    def manifest(self, cfg, extra=None):
        obj = {
            "software": {"name": "kfcollapse", "version": __version__},
            "prng": "numpy.random.PCG64",
            "seed": cfg.seed,
            "config": asdict(cfg),
            "files": dict(sorted(self.files.items())),
        }
        if cfg.suite == "exp3":
            obj["lorenz95"] = asdict(cfg.l96())
        if extra:
            obj.update(extra)
        with open(os.path.join(self.path, "manifest.json"), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        return obj


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _trace_rows(eigs, threshold):
    for k, e in enumerate(eigs):
        yield [k, *e, int(np.sum(e > threshold)), float(np.sqrt(np.sum(e ** 2)))]


def _trace_header(n):
    return ["k"] + [f"eigenvalue_{i + 1}" for i in range(n)] + ["rank", "frobenius_norm"]


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def build_sequence(cfg):
    return gen_model_sequence(cfg.kind(), cfg.n, cfg.d, cfg.seed, cfg.steps, OBS[cfg.obs],
                              m_scale=cfg.m_scale,
                              l96=cfg.l96() if cfg.suite == "exp3" else None)


def initial_factor(n, rank, seed):
    """Random factor X (n x rank) of the initial covariance X X^T."""
    return random_factor(n, rank, np.random.default_rng([seed, rank, 7]))


def _pair_run(Xa, Xb, seq, K):
    # two factored filters in lockstep; returns per-k analysis distances
    fa, fb = FactoredCovariance.from_factor(Xa), FactoredCovariance.from_factor(Xb)
    out = np.empty(K)
    for k in range(K):
        Om = step_precision(seq[k])
        aa, ab = factored_analysis(fa, Om), factored_analysis(fb, Om)
        out[k] = np.linalg.norm(aa.dense() - ab.dense())
        fa, fb = factored_forecast(aa, seq[k].M), factored_forecast(ab, seq[k].M)
    return out


def checkpoints(K, count=10):
    return sorted(set(int(round(K * j / count)) for j in range(1, count + 1)))


def run_experiment(cfg):
    """Execute the ``run`` subcommand; returns a summary dict."""
    seq = build_sequence(cfg)
    K = cfg.steps
    rd = RunDirectory(cfg.out)
    n = cfg.n

    cps = checkpoints(K)
    proj_ks = sorted(set(min(c, K - 1) for c in cps) - {-1})
    qr = forward_qr_pass(seq, K, seed=cfg.lyap_seed, keep=proj_ks + [K])
    lam = qr.exponents
    spec = classify_spectrum(lam, cfg.neutral_tol)
    n0 = spec.n0
    rd.csv("exponents.csv", ["index", "lambda"] + [f"running_k{k}" for k in cps],
           ([i + 1, lam[i]] + [qr.running(k)[i] for k in cps] for i in range(n)))

    tail = range(int(0.9 * K), K + 1)
    X0 = initial_factor(n, cfg.rank, cfg.seed)
    tr = run_filter(FactoredCovariance.from_factor(X0), seq, K, keep_forecast=tail,
                    keep_analysis=proj_ks)
    rd.csv("forecast_a.csv", _trace_header(n), _trace_rows(tr.forecast_eigs, cfg.rank_threshold))
    rd.csv("analysis_a.csv", _trace_header(n), _trace_rows(tr.analysis_eigs, cfg.rank_threshold))

    fits = eigen_decay_fit(tr.analysis_eigs, lam, range(n0, min(cfg.rank, n)))
    rd.csv("decay.csv", ["index", "slope", "residual", "reference", "ratio", "points"],
           ([f.index + 1, f.slope, f.residual, f.reference, f.ratio, f.points] for f in fits))

    proj_rows = []
    for k in proj_ks:
        U = qr.bases[k]
        proj_rows.append([k, *np.diag(U.T @ tr.analysis[k] @ U)])
    rd.csv("projection.csv", ["k"] + [f"u{i + 1}" for i in range(n)], proj_rows)

    stable = list(spec.stable)
    snorm = float(stable_norms(tr.final, qr.bases[K], stable).max()) if stable else 0.0

    summary = {"n0": n0, "neutral": list(spec.neutral), "exponents": lam,
               "terminal_rank": int(np.sum(tr.analysis_eigs[-1] > cfg.rank_threshold)),
               "max_stable_norm": snorm,
               "decay_ratios": {f.index + 1: f.ratio for f in fits}}

    if n0 >= 1:
        pinfo = projected_information(seq, n0, K, seed=cfg.lyap_seed, keep=tail)
        rows = []
        for k in tail:
            try:
                S = pinfo.asymptote(k)
            except NumericalError:
                continue
            P = tr.forecast[k]
            rows.append([k, float(np.linalg.norm(P - S)), float(np.linalg.norm(S))])
        rd.csv("asymptote.csv", ["k", "distance", "asymptote_norm"], rows)
        summary["condition2_min_eig"] = float(pinfo.min_eig[-1])
        if rows:
            summary["asymptote_rel_max"] = max(r[1] / r[2] for r in rows)

    if cfg.rank2 is not None:
        Xb = initial_factor(n, cfg.rank2, cfg.seed + 1)
        dist = _pair_run(X0, Xb, seq, K)
        rd.csv("pairdist.csv", ["k", "distance"], ([k, v] for k, v in enumerate(dist)))
        summary["pair_tail_max"] = float(dist[int(0.9 * K):].max())

    if cfg.suite == "exp1":
        cd = consecutive_distance(tr.forecast)
        rd.csv("consecutive.csv", ["k", "distance"], ([k, v] for k, v in cd.items()))

    Ka = min(cfg.audit_steps, K)
    Ps, _ = riccati_trace(X0 @ X0.T, seq, Ka)
    aud = bound_audit(Ps, aggregate_trace(seq, Ka), X0 @ X0.T,
                      gamma_inv=gamma_inverse_trace(seq, Ka))
    names = list(aud.margins)
    rd.csv("audit.csv", ["k"] + names,
           ([k] + [aud.margins[m][k] for m in names] for k in range(Ka + 1)))
    summary["audit_worst"] = {m: aud.worst(m) for m in names}

    if cfg.dump_every > 0:
        idx = sorted(k for k in tr.forecast if k % cfg.dump_every == 0)
        if idx:
            rd.matrices("forecast_dump.kfm", [tr.forecast[k] for k in idx])

    rd.json("summary.json", summary)
    rd.manifest(cfg)
    return summary


def cross_check(cfg):
    """Execute the ``cross-check`` subcommand; returns a summary dict."""
    seq = build_sequence(cfg)
    K = cfg.steps
    n = cfg.n
    X0 = initial_factor(n, cfg.rank, cfg.seed)
    P0 = symmetrize(X0 @ X0.T)
    tr = run_filter(P0, seq, K, keep_forecast=range(K + 1))
    ric = [tr.forecast[k] for k in range(K + 1)]
    closed = closed_form_trace(P0, seq, K)
    sym = propagate_sequence(P0, seq, K, mode="orthogonal")
    # every route starts from the same seed state
    ric[0] = closed[0] = sym[0] = P0
    dense, _ = riccati_trace(P0, seq, K)
    aggs = aggregate_trace(seq, K)
    rows = []
    first_bad = None
    for k in range(K + 1):
        a, b, c = ric[k], closed[k], sym[k]
        dev = [rel_frobenius(a, b), rel_frobenius(a, c), rel_frobenius(b, c)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            theta_form = closed_form_covariance(P0, aggs[k])
        inner = np.eye(X0.shape[1]) + X0.T @ aggs[k].theta @ X0
        cond = float(np.linalg.cond(inner))
        if first_bad is None and cond > 1e14:
            first_bad = k
        rows.append([k, *dev, max(dev), rel_frobenius(dense[k], a),
                     rel_frobenius(theta_form, a), cond])
    rd = RunDirectory(cfg.out)
    rd.csv("crosscheck.csv", ["k", "riccati_vs_closed", "riccati_vs_symplectic",
                              "closed_vs_symplectic", "max_deviation", "dense_riccati_vs_factored",
                              "theta_direct_vs_factored", "theta_condition"], rows)
    summary = {"max_deviation": max(r[4] for r in rows), "conditioning_degrades_at": first_bad}
    rd.json("crosscheck.json", summary)
    rd.manifest(cfg)
    return summary


def lyapunov_only(cfg):
    """Execute the ``lyapunov`` subcommand."""
    seq = build_sequence(cfg)
    qr = forward_qr_pass(seq, cfg.steps, seed=cfg.lyap_seed)
    spec = classify_spectrum(qr.exponents, cfg.neutral_tol)
    rd = RunDirectory(cfg.out)
    cps = checkpoints(cfg.steps)
    rd.csv("exponents.csv", ["index", "lambda"] + [f"running_k{k}" for k in cps],
           ([i + 1, qr.exponents[i]] + [qr.running(k)[i] for k in cps]
            for i in range(cfg.n)))
    summary = {"n0": spec.n0, "neutral": list(spec.neutral),
               "near_degenerate": list(spec.near_degenerate)}
    rd.json("lyapunov.json", summary)
    rd.manifest(cfg)
    return summary


def _read_csv(path):
    with open(path) as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [[float(v) for v in row] for row in r]
    return header, np.array(rows)


def report(run_dir, neutral_tol=1e-3, threshold=1e-10):
    """Re-derive decay fits and the rank trace from a run directory."""
    man_path = os.path.join(run_dir, "manifest.json")
    try:
        with open(man_path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {man_path}: {exc}") from exc
    mismatched = []
    for name, digest in manifest["files"].items():
        with open(os.path.join(run_dir, name), "rb") as fh:
            if hashlib.sha256(fh.read()).hexdigest() != digest:
                mismatched.append(name)
    _, ex = _read_csv(os.path.join(run_dir, "exponents.csv"))
    lam = ex[:, 1]
    header, an = _read_csv(os.path.join(run_dir, "analysis_a.csv"))
    n = len(lam)
    eigs = an[:, 1:1 + n]
    spec = classify_spectrum(lam, neutral_tol)
    rank0 = manifest["config"]["rank"]
    fits = eigen_decay_fit(eigs, lam, range(spec.n0, min(rank0, n)))
    ranks = np.sum(eigs > threshold, axis=1)
    out = {"n0": spec.n0, "terminal_rank": int(ranks[-1]), "hash_mismatches": mismatched,
           "decay": [{"index": f.index + 1, "slope": f.slope, "reference": f.reference,
                      "ratio": f.ratio} for f in fits]}
    with open(os.path.join(run_dir, "report.json"), "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    return out


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _parser():
    p = argparse.ArgumentParser(prog="kfcollapse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("run", "cross-check", "lyapunov"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat key = value file")
        s.add_argument("--suite", choices=sorted(SUITES))
        s.add_argument("--n", type=int)
        s.add_argument("--d", type=int)
        s.add_argument("--steps", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--rank")
        s.add_argument("--rank2")
        s.add_argument("--obs", choices=sorted(OBS))
        s.add_argument("--m-scale", dest="m_scale", type=float)
        s.add_argument("--out")
    r = sub.add_parser("report")
    r.add_argument("run_dir")
    r.add_argument("--neutral-tol", type=float, default=1e-3)
    return p


def config_from_args(args):
    values = read_config(args.config) if getattr(args, "config", None) else {}
    for key in ("suite", "n", "d", "steps", "seed", "rank", "rank2", "obs", "m_scale", "out"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    default_steps = 50 if args.command == "cross-check" else 5000
    if args.command == "cross-check":
        values.setdefault("n", 10)
        values.setdefault("d", 4)
    return ExperimentConfig(**values).resolve(default_steps)


def main(argv=None):
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "report":
            out = report(args.run_dir, args.neutral_tol)
        else:
            cfg = config_from_args(args)
            fn = {"run": run_experiment, "cross-check": cross_check,
                  "lyapunov": lyapunov_only}[args.command]
            out = fn(cfg)
    except (ConfigError, InputContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(out, indent=2, sort_keys=True, default=_json_default))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
