"""Command-line front end.

One subcommand per pipeline, file-based inputs and outputs only. Exit
codes: 0 success, 1 usage problems, 2 numerical failure; the latter
also drops a flat machine-readable `error.json` into the output
directory. Outputs are byte-deterministic for identical invocations,
inputs and --seed: every float is serialized with repr, and all
randomness flows from the seed.

Options may come from a `--config` file of key=value lines (one per
line, # comments allowed); explicit flags win over the file, the file
wins over built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, fieldio
from .fields import InversionError
from .kernel import SobolevKernel
from .lddmm import RegistrationProblem, register
from .metamorphosis import morph_register
from .netgeo import (
    InfluenceSolveError,
    NetDivergenceError,
    NetSpec,
    curve_complexity,
    dynamic_isometry,
    fisher_rao_norm,
    influence_report,
    read_dataset,
    read_points,
    reweight_train,
    total_loss,
    train,
)
from .shooting import conservation_table, register_shooting
from .transport import FlowBlowupError

SUBCOMMANDS = (
    "register",
    "shoot",
    "morph",
    "net-train",
    "net-influence",
    "net-reweight",
    "net-complexity",
    "net-isometry",
    "selftest",
)

NUMERIC_ERRORS = (
    InversionError,
    FlowBlowupError,
    InfluenceSolveError,
    NetDivergenceError,
    FloatingPointError,
    np.linalg.LinAlgError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; the contract here reserves 2 for
    # numerical failures, so route usage problems through UsageError
    def error(self, message):
        raise UsageError(message)


def _to_bool(s: str) -> bool:
    low = str(s).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _to_widths(s: str) -> tuple:
    s = str(s).strip()
    if not s:
        return ()
    return tuple(int(tok) for tok in s.split(","))


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fail(out: Path | None, kind: str, message: str, **extra) -> int:
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        payload = {"error": kind, "message": message}
        payload.update({k: _fmt(v) if isinstance(v, (bool, np.bool_)) else v for k, v in extra.items()})
        with open(out / "error.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, sort_keys=True)
            fh.write("\n")
    return 2


# ---------------------------------------------------------------------------
# option plumbing


class _Options:
    """Flag declarations shared by the parser and the config merger."""

    def __init__(self, parser: argparse.ArgumentParser):
        self.parser = parser
        self.table = {}  # dest -> (converter, default, required)

    def add(self, *flags, convert=str, default=None, required=False, flag=False, help=None):
        dest = flags[0].lstrip("-").replace("-", "_")
        if flag:
            self.parser.add_argument(*flags, dest=dest, action="store_true", help=help)
            self.table[dest] = (_to_bool, False, False)
        else:
            self.parser.add_argument(*flags, dest=dest, type=str, help=help)
            self.table[dest] = (convert, default, required)

    def resolve(self, ns: argparse.Namespace) -> argparse.Namespace:
        """defaults <- config file <- explicit flags."""
        values = {dest: default for dest, (_, default, _) in self.table.items()}
        explicit = vars(ns)
        config_path = explicit.get("config")
        if config_path is not None:
            for key, raw in _read_config(Path(config_path)).items():
                dest = key.replace("-", "_")
                if dest not in self.table:
                    raise UsageError(f"unknown config key {key!r}")
                convert, _, _ = self.table[dest]
                try:
                    values[dest] = convert(raw)
                except (TypeError, ValueError) as exc:
                    raise UsageError(f"bad config value for {key!r}: {exc}") from exc
        for dest, raw in explicit.items():
            if dest in ("command", "config"):
                continue
            if raw is None or raw is False:
                continue  # flag not given (str options) / store_true default
            convert, _, _ = self.table[dest]
            if isinstance(raw, bool):
                values[dest] = raw
            else:
                try:
                    values[dest] = convert(raw)
                except (TypeError, ValueError) as exc:
                    raise UsageError(f"bad value for --{dest.replace('_', '-')}: {exc}") from exc
        for dest, (_, _, required) in self.table.items():
            if required and values[dest] is None:
                raise UsageError(f"missing required option --{dest.replace('_', '-')}")
        return argparse.Namespace(**values)


def _read_config(path: Path) -> dict:
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def _common(opt: _Options) -> None:
    opt.add("--out", convert=str, help="output directory")
    opt.add("--seed", convert=int, default=0, help="seed for all randomness")
    # --config is handled before conversion; declare for help only
    opt.parser.add_argument("--config", type=str, help="key=value option file; flags win")
    opt.table["config"] = (str, None, False)


def _registration_flags(opt: _Options) -> None:
    opt.add("--source", convert=str, required=True, help="source image (PGM)")
    opt.add("--target", convert=str, required=True, help="target image (PGM)")
    opt.add("--beta", convert=float, default=1.0, help="matching weight")
    opt.add("--alpha", convert=float, default=2.0, help="kernel length in pixels")
    opt.add("--steps", convert=int, default=16, help="time steps")
    opt.add("--max-iters", convert=int, default=200, help="iteration budget")
    opt.add("--tol", convert=float, default=1e-8, help="relative-decrease stop")


def _net_flags(opt: _Options) -> None:
    opt.add("--train", "--train-csv", convert=str, required=True, help="training CSV")
    opt.add("--widths", convert=_to_widths, default=(), help="hidden widths, e.g. 8,4")
    opt.add("--loss", convert=str, default="bce", help="bce or mse")
    opt.add("--residual", flag=True, help="residual blocks instead of feed-forward")
    opt.add("--no-bias", flag=True, help="drop bias parameters")
    opt.add("--out-dim", convert=int, default=1, help="output width (1 for losses)")
    opt.add("--lr", convert=float, default=1.0, help="initial step size")
    opt.add("--max-iters", convert=int, default=500, help="iteration budget")
    opt.add("--tol", convert=float, default=1e-8, help="gradient-norm stop")
    opt.add("--l2", convert=float, default=0.0, help="ridge coefficient")


def build_parser():
    parser = _Parser(prog="geoflow", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"geoflow {__version__}")
    subs = parser.add_subparsers(dest="command")
    opts = {}

    def sub(name, help):
        p = subs.add_parser(name, help=help)
        o = _Options(p)
        opts[name] = o
        _common(o)
        return o

    o = sub("register", "diffeomorphic registration of two images")
    _registration_flags(o)

    o = sub("shoot", "registration via the initial momentum")
    _registration_flags(o)

    o = sub("morph", "registration with an appearance channel")
    _registration_flags(o)
    o.add("--sigma2", convert=float, default=1.0, help="appearance penalty scale")
    o.add("--alternate", flag=True, help="alternate flow/appearance updates")

    o = sub("net-train", "train a small network")
    _net_flags(o)

    o = sub("net-influence", "per-point influence of the training data")
    _net_flags(o)
    o.add("--test", "--test-csv", convert=str, required=True, help="test points CSV")
    o.add("--delta", convert=float, help="Hessian damping (default trace-scaled)")

    o = sub("net-reweight", "two-level reweighted training")
    _net_flags(o)
    o.add("--valid", "--valid-csv", convert=str, required=True, help="clean validation CSV")
    o.add("--outer-iters", convert=int, default=50, help="reweighting rounds")
    o.add("--inner-lr", convert=float, default=0.1, help="inner step size")

    o = sub("net-complexity", "curve-length complexity of a residual net")
    _net_flags(o)

    o = sub("net-isometry", "input-output Jacobian spectrum")
    _net_flags(o)
    o.add("--probe", convert=str, help="probe point, comma-separated (default seeded)")

    o = sub("selftest", "run the built-in invariant suite")

    return parser, opts


# ---------------------------------------------------------------------------
# registration-side commands


def _load_pair(ns):
    src = fieldio.read_pgm(ns.source)
    tgt = fieldio.read_pgm(ns.target)
    if src.grid != tgt.grid:
        raise UsageError("source and target images have different sizes")
    kern = SobolevKernel(src.grid, ns.alpha * src.grid.spacing[0])
    return src, tgt, kern


def _write_path(out: Path, stem: str, path) -> None:
    for k, sample in enumerate(path):
        values = sample.displacement if hasattr(sample, "displacement") else sample
        fieldio.write_field(out / f"{stem}_{k:03d}.f32", values)


def _cmd_register(ns) -> int:
    src, tgt, kern = _load_pair(ns)
    problem = RegistrationProblem(
        src, tgt, kern, beta=ns.beta, steps=ns.steps, max_iters=ns.max_iters, tol=ns.tol
    )
    res = register(problem)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_path(out, "u", res.u_path)
    _write_path(out, "phi", res.phi_path)
    _write_csv(
        out / "energy.csv",
        ("iter", "E_kin", "E_match", "E_total"),
        [(i, k, m, t) for i, (k, m, t) in enumerate(res.energy_trace)],
    )
    _write_csv(out / "report.csv", ("ep_residual", "converged"), [(res.ep_residual, res.converged)])
    if not res.converged:
        return _fail(
            out,
            "no-convergence",
            f"registration stopped after {res.iterations} iterations",
            iterations=res.iterations,
        )
    return 0


def _cmd_shoot(ns) -> int:
    src, tgt, kern = _load_pair(ns)
    res = register_shooting(
        src, tgt, kern, beta=ns.beta, steps=ns.steps, max_iters=ns.max_iters, tol=ns.tol
    )
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    fieldio.write_field(out / "p0.f32", res.p0)
    _write_csv(
        out / "energy.csv",
        ("iter", "E_kin", "E_match", "E_total"),
        [(i, k, m, t) for i, (k, m, t) in enumerate(res.energy_trace)],
    )
    _write_csv(out / "conservation.csv", ("t", "kinetic", "mass"), conservation_table(res.path, kern))
    if not res.converged:
        return _fail(
            out,
            "no-convergence",
            f"shooting stopped after {res.iterations} iterations",
            iterations=res.iterations,
        )
    return 0


def _cmd_morph(ns) -> int:
    src, tgt, kern = _load_pair(ns)
    res = morph_register(
        src,
        tgt,
        kern,
        beta=ns.beta,
        sigma2=ns.sigma2,
        steps=ns.steps,
        max_iters=ns.max_iters,
        tol=ns.tol,
        alternate=ns.alternate,
    )
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_path(out, "u", res.u_path)
    _write_path(out, "z", res.z_path)
    _write_path(out, "phi", res.phi_path)
    _write_csv(
        out / "energy.csv",
        ("iter", "E_kin", "E_source", "E_match", "E_total"),
        [(i, k, s, m, t) for i, (k, s, m, t) in enumerate(res.energy_trace)],
    )
    _write_csv(out / "report.csv", ("converged", "iterations"), [(res.converged, res.iterations)])
    if not res.converged:
        return _fail(
            out,
            "no-convergence",
            f"metamorphosis stopped after {res.iterations} iterations",
            iterations=res.iterations,
        )
    return 0


# ---------------------------------------------------------------------------
# network-side commands


def _net_spec(ns, dataset) -> NetSpec:
    try:
        return NetSpec(
            in_dim=dataset.in_dim,
            widths=ns.widths,
            loss=ns.loss,
            residual=ns.residual,
            bias=not ns.no_bias,
            out_dim=ns.out_dim,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _train(ns, spec, dataset):
    return train(
        spec,
        dataset,
        lr=ns.lr,
        max_iters=ns.max_iters,
        tol=ns.tol,
        l2=ns.l2,
        seed=ns.seed,
    )


def _write_theta(out: Path, theta) -> None:
    _write_csv(out / "theta.csv", ("index", "value"), list(enumerate(theta)))


def _train_report(out: Path, res) -> None:
    _write_csv(
        out / "report.csv",
        ("loss", "grad_norm", "iterations", "converged"),
        [(res.loss, res.grad_norm, res.iterations, res.converged)],
    )


def _cmd_net_train(ns) -> int:
    dataset = read_dataset(ns.train)
    spec = _net_spec(ns, dataset)
    res = _train(ns, spec, dataset)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_theta(out, res.theta)
    _train_report(out, res)
    if not res.converged:
        return _fail(
            out,
            "no-convergence",
            f"gradient norm {res.grad_norm:.3e} after {res.iterations} iterations",
            grad_norm=res.grad_norm,
        )
    return 0


def _cmd_net_influence(ns) -> int:
    dataset = read_dataset(ns.train)
    tests = read_points(ns.test)
    spec = _net_spec(ns, dataset)
    res = _train(ns, spec, dataset)
    report = influence_report(
        spec,
        dataset,
        res.theta,
        test_points=tests,
        delta=ns.delta,
        l2=ns.l2,
    )
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_theta(out, res.theta)
    header = ["index", "self_influence"] + [f"I_up_loss_{j}" for j in range(len(tests))]
    rows = [
        (i, report.self_influence[i], *report.loss_table[i]) for i in range(dataset.n)
    ]
    _write_csv(out / "influence.csv", header, rows)
    _write_csv(
        out / "report.csv",
        ("delta", "loss", "grad_norm", "converged"),
        [(report.delta, res.loss, res.grad_norm, res.converged)],
    )
    if not res.converged:
        return _fail(
            out,
            "no-convergence",
            f"influence needs a trained model; gradient norm {res.grad_norm:.3e}",
            grad_norm=res.grad_norm,
        )
    return 0


def _cmd_net_reweight(ns) -> int:
    train_set = read_dataset(ns.train)
    valid_set = read_dataset(ns.valid)
    spec = _net_spec(ns, train_set)
    theta, eps = reweight_train(
        spec,
        train_set,
        valid_set,
        outer_iters=ns.outer_iters,
        inner_lr=ns.inner_lr,
        seed=ns.seed,
        l2=ns.l2,
    )
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_theta(out, theta)
    _write_csv(out / "weights.csv", ("index", "eps"), list(enumerate(eps)))
    _write_csv(
        out / "report.csv",
        ("valid_loss", "outer_iters"),
        [(total_loss(spec, theta, valid_set), ns.outer_iters)],
    )
    return 0


def _cmd_net_complexity(ns) -> int:
    dataset = read_dataset(ns.train)
    spec = _net_spec(ns, dataset)
    if not spec.residual:
        raise UsageError("net-complexity needs --residual (curve energy is per block)")
    res = _train(ns, spec, dataset)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_theta(out, res.theta)
    _write_csv(
        out / "report.csv",
        ("curve_complexity", "fisher_rao_norm", "loss", "converged"),
        [
            (
                curve_complexity(spec, dataset, res.theta),
                fisher_rao_norm(spec, dataset, res.theta),
                res.loss,
                res.converged,
            )
        ],
    )
    return 0


def _cmd_net_isometry(ns) -> int:
    dataset = read_dataset(ns.train)
    spec = _net_spec(ns, dataset)
    res = _train(ns, spec, dataset)
    if ns.probe is not None:
        probe = np.array([float(tok) for tok in str(ns.probe).split(",")])
        if probe.size != spec.in_dim:
            raise UsageError(f"probe needs {spec.in_dim} coordinates")
    else:
        probe = np.random.default_rng(ns.seed + 1).standard_normal(spec.in_dim)
    spectrum = dynamic_isometry(spec, res.theta, probe)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_theta(out, res.theta)
    _write_csv(out / "spectrum.csv", ("index", "singular_value"), list(enumerate(spectrum)))
    return 0


# ---------------------------------------------------------------------------
# selftest


def _cmd_selftest(ns) -> int:
    from . import autodiff as ad
    from .fields import Grid, ScalarField, compose, identity_map, jacobian_det
    from .kernel import apply_K, apply_L
    from .netgeo import LabeledDataset, fisher_metric, net_loss

    checks = []

    g = Grid((16, 16), (1 / 16, 1 / 16))
    rng = np.random.default_rng(ns.seed)
    ident = identity_map(g)
    checks.append(("identity jacobian_det == 1", np.allclose(jacobian_det(ident).values, 1.0)))
    f = ScalarField(g, rng.normal(0, 1, g.shape))
    kern = SobolevKernel(g, 2 / 16)
    checks.append(
        ("K(L f) == f", np.allclose(apply_K(kern, apply_L(kern, f)).values, f.values, atol=1e-10))
    )
    checks.append(
        (
            "compose with identity",
            np.allclose(compose(ident, ident).displacement.values, 0.0, atol=1e-12),
        )
    )
    t = ad.Tape()
    v = t.leaf(rng.normal(0, 1, g.shape))
    val = ad.value(ad.mul(v, v))
    checks.append(("autodiff square", np.allclose(val, v.value**2)))

    toy = NetSpec(in_dim=1, widths=(), loss="bce")
    z0 = np.zeros(2)
    checks.append(
        ("bce at zero is ln 2", abs(net_loss(toy, z0, np.array([0.4]), 1.0) - np.log(2)) < 1e-12)
    )
    ds = LabeledDataset(rng.normal(0, 1, (8, 1)), rng.integers(0, 2, 8))
    eig = np.linalg.eigvalsh(fisher_metric(toy, ds, rng.normal(0, 1, 2)))
    checks.append(("gradient metric is PSD", eig.min() >= -1e-10))

    failed = [name for name, ok in checks if not ok]
    for name, ok in checks:
        print(f"{'ok' if ok else 'FAIL'}  {name}")
    if failed:
        out = Path(ns.out) if ns.out else None
        return _fail(out, "selftest", f"{len(failed)} checks failed: {', '.join(failed)}")
    return 0


COMMANDS = {
    "register": (_cmd_register, True),
    "shoot": (_cmd_shoot, True),
    "morph": (_cmd_morph, True),
    "net-train": (_cmd_net_train, True),
    "net-influence": (_cmd_net_influence, True),
    "net-reweight": (_cmd_net_reweight, True),
    "net-complexity": (_cmd_net_complexity, True),
    "net-isometry": (_cmd_net_isometry, True),
    "selftest": (_cmd_selftest, False),
}


def dispatch(argv) -> int:
    parser, opts = build_parser()
    try:
        try:
            ns = parser.parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        if ns.command is None:
            raise UsageError("a subcommand is required")
        runner, needs_out = COMMANDS[ns.command]
        resolved = opts[ns.command].resolve(ns)
        if needs_out and resolved.out is None:
            raise UsageError("missing required option --out")
        out = Path(resolved.out) if resolved.out else None
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("run `geoflow --help` for usage", file=sys.stderr)
        return 1
    try:
        return runner(resolved)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NUMERIC_ERRORS as exc:
        extra = {}
        if isinstance(exc, InversionError):
            extra["residual"] = exc.residual
        if isinstance(exc, InfluenceSolveError):
            extra["condition"] = exc.condition
        return _fail(out, type(exc).__name__, str(exc), **extra)


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
