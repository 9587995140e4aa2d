"""Command-line entry point.

Subcommands: ``train`` (density fitting or conditional mode), ``generate``
(sample a trained checkpoint), ``sample`` (analytic-drift sampling with
decay diagnostics), ``bayes`` (conditional flow on a built-in inverse
problem), ``analyze`` (two-sample and density diagnostics on CSVs), and
``selftest`` (fast invariant battery). Every run writes a resolved-config
file under the output directory, and rerunning with it reproduces the
outputs bitwise. Exit codes: 0 success, 1 configuration error, 2 numerical
abort, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import analysis, datasets
from .datasets import (GaussianPrior, StandardNormalBase, export_samples_csv,
                       import_samples_csv, linear_gaussian_problem,
                       lorenz_observe, sample_benchmark)
from .dynamics import TimeGrid, export_trajectory_csv, generate
from .exceptions import NumericsError, TrainingAbort
from .layer import RwpoParams
from .potential import load_checkpoint, save_checkpoint
from .training import (ConditionalProblem, TrainConfig, config_from_text,
                       config_to_text, train, write_loss_history,
                       write_val_history)

__all__ = ["main", "run"]


class ConfigError(Exception):
    pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxflow",
                                     description="prox-attention probability flows")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")

    p_train = sub.add_parser("train", help="fit a flow to data")
    common(p_train)
    p_train.add_argument("--config", default=None, help="key=value config file")
    p_train.add_argument("--dataset", default=None)
    p_train.add_argument("--n", type=int, default=2000, help="dataset size")
    p_train.add_argument("--lambda", dest="lam", type=float, default=None)
    p_train.add_argument("--beta", type=float, default=None)
    p_train.add_argument("--steps", type=int, default=None)
    p_train.add_argument("--detach-attention", action="store_true")

    p_gen = sub.add_parser("generate", help="sample a trained checkpoint")
    common(p_gen)
    p_gen.add_argument("--checkpoint", required=True)
    p_gen.add_argument("--n", type=int, default=1000)
    p_gen.add_argument("--trajectory", action="store_true",
                       help="also dump the full trajectory CSV")

    p_sample = sub.add_parser("sample", help="analytic-drift sampling diagnostics")
    common(p_sample)
    p_sample.add_argument("--target", default="gaussian", choices=["gaussian"])
    p_sample.add_argument("--lambda", dest="lam", type=float, default=2.0)
    p_sample.add_argument("--beta", type=float, default=1.0)
    p_sample.add_argument("--steps", type=int, default=64)
    p_sample.add_argument("--n", type=int, default=2000)
    p_sample.add_argument("--horizon", type=float, default=0.5)
    p_sample.add_argument("--sigma2", type=float, default=1.0)
    p_sample.add_argument("--tau2", type=float, default=4.0)

    p_bayes = sub.add_parser("bayes", help="conditional flow on a built-in problem")
    common(p_bayes)
    p_bayes.add_argument("--config", default=None)
    p_bayes.add_argument("--dataset", default="linear_gaussian",
                         choices=["linear_gaussian", "lorenz63"])
    p_bayes.add_argument("--n", type=int, default=1000,
                         help="posterior sample count")

    p_an = sub.add_parser("analyze", help="two-sample diagnostics on CSVs")
    common(p_an)
    p_an.add_argument("--samples", required=True)
    p_an.add_argument("--reference", required=True)
    p_an.add_argument("--bandwidth", type=float, default=None)
    p_an.add_argument("--kde", action="store_true", help="also write a KDE grid")

    p_self = sub.add_parser("selftest", help="fast invariant battery")
    common(p_self)
    return parser


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_resolved(out: Path, mapping: dict) -> None:
    with open(out / "resolved.cfg", "w") as fh:
        fh.write("# resolved run parameters\n")
        for key, value in mapping.items():
            fh.write(f"{key}={value}\n")


def _load_train_config(args) -> TrainConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "dataset", None):
        overrides["dataset"] = args.dataset
    if getattr(args, "lam", None) is not None:
        overrides["lam_init"] = str(args.lam)
    if getattr(args, "beta", None) is not None:
        overrides["beta_init"] = str(args.beta)
    if getattr(args, "steps", None) is not None:
        overrides["grid_steps"] = str(args.steps)
    if getattr(args, "detach_attention", False):
        overrides["detach_attention"] = "true"
    if args.config is None:
        text = ""
    else:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
    try:
        return config_from_text(text, overrides=overrides)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def _benchmark_data(config: TrainConfig, n: int) -> np.ndarray:
    embed = config.dim if config.dim > 2 else None
    return sample_benchmark(config.dataset, n, config.seed, embed_dim=embed)


LORENZ_PRIOR_MEAN = np.array([10.0, 28.0, 8.0 / 3.0])
LORENZ_PRIOR_STD = np.array([2.0, 2.0, 0.5])


def _conditional_problem(config: TrainConfig, name: str) -> ConditionalProblem:
    rng = np.random.default_rng(config.seed + 1)
    if name == "linear_gaussian":
        problem = linear_gaussian_problem(config.dim, config.dim, config.seed)
        x_true = rng.normal(size=config.dim)
        y = problem.observe(x_true, rng)
        return ConditionalProblem(y=y, forward_op=problem.forward,
                                  sigma=problem.noise_std,
                                  prior=GaussianPrior(problem.prior_mean,
                                                      problem.prior_cov),
                                  dim=config.dim)
    if name == "lorenz63":
        # Tokens live in standardized parameter space; the operator
        # de-standardizes before simulating averaged observations.
        params_true = LORENZ_PRIOR_MEAN + 0.5 * LORENZ_PRIOR_STD * rng.normal(size=3)
        noise = 1e-2
        y = lorenz_observe(params_true, t_spin=5.0, t_ob=0.5, n_mea=3,
                           noise_std=noise, seed=config.seed)

        def forward_op(x_std):
            params = LORENZ_PRIOR_MEAN + LORENZ_PRIOR_STD * np.asarray(x_std)
            return lorenz_observe(params, t_spin=5.0, t_ob=0.5, n_mea=3,
                                  noise_std=0.0, seed=0)

        return ConditionalProblem(y=y, forward_op=forward_op, sigma=max(noise, 0.05),
                                  prior=GaussianPrior(np.zeros(3), np.eye(3)),
                                  dim=3)
    raise ConfigError(f"unknown conditional dataset {name!r}")


def _cmd_train(args) -> int:
    config = _load_train_config(args)
    out = _outdir(args)
    if config.mode == "generative":
        data = _benchmark_data(config, args.n)
        result = train(config, data, out_dir=str(out))
    else:
        problem = _conditional_problem(config, config.dataset)
        result = train(config, problem, out_dir=str(out))
    write_loss_history(out / "loss_history.csv", result.history)
    write_val_history(out / "val_history.csv", result.val_history)
    with open(out / "resolved.cfg", "w") as fh:
        fh.write(config_to_text(config))
    print(f"trained {config.n_iters} iterations; "
          f"final total {result.history[-1]['total']:.6g}" if result.history
          else "no iterations requested")
    return 0


def _cmd_generate(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    pot, extras = load_checkpoint(ckpt)
    seed = 0 if args.seed is None else args.seed
    grid = TimeGrid(steps=int(extras.get("grid_steps", 16)),
                    horizon=float(extras.get("horizon", 1.0)))
    rp = RwpoParams(lam=float(extras.get("lam", 0.0)),
                    beta=float(extras.get("beta", 1.0)), h=grid.h)
    attention = bool(extras.get("attention", 1.0))
    rng = np.random.default_rng(seed)
    x0 = StandardNormalBase(dim=pot.dim).sample(args.n, rng)
    traj = generate(pot, rp, grid, x0, attention=attention)
    out = _outdir(args)
    export_samples_csv(out / "samples.csv", traj.values(grid.steps))
    if args.trajectory:
        export_trajectory_csv(traj, out / "trajectory.csv")
    _write_resolved(out, {"command": "generate", "checkpoint": ckpt,
                          "n": args.n, "seed": seed})
    print(f"wrote {args.n} samples to {out / 'samples.csv'}")
    return 0


def _cmd_sample(args) -> int:
    seed = 0 if args.seed is None else args.seed
    grid = TimeGrid(steps=args.steps, horizon=args.horizon)
    rp = RwpoParams(lam=args.lam, beta=args.beta, h=grid.h)
    sigma2 = args.sigma2
    rng = np.random.default_rng(seed)
    x0 = np.sqrt(args.tau2) * rng.normal(size=(args.n, 1))

    def drift(x):
        return -x / (args.beta * sigma2)

    traj = analysis.sample_brwp(drift, rp, grid, x0)
    theory = analysis.TheoryParams(gamma=np.sqrt(2 / np.pi), c_ls=2.0 * sigma2,
                                   lam=args.lam)
    diag = analysis.gaussian_target_diagnostics(traj, sigma2, theory, n_boot=32,
                                                seed=seed)
    out = _outdir(args)
    analysis.write_metrics_csv(out / "metrics.csv", diag)
    export_samples_csv(out / "samples.csv", traj.values(grid.steps))
    _write_resolved(out, {"command": "sample", "target": args.target,
                          "lambda": args.lam, "beta": args.beta,
                          "steps": args.steps, "n": args.n,
                          "horizon": args.horizon, "sigma2": sigma2,
                          "tau2": args.tau2, "seed": seed})
    print(f"wrote decay metrics to {out / 'metrics.csv'}")
    return 0


def _cmd_bayes(args) -> int:
    ns = argparse.Namespace(config=args.config, seed=args.seed, dataset=None,
                            lam=None, beta=None, steps=None,
                            detach_attention=False)
    config = _load_train_config(ns)
    overrides = {"mode": "bayesian", "dataset": args.dataset}
    if args.dataset == "lorenz63":
        overrides["dim"] = "3"
    config = config_from_text(config_to_text(config), overrides=overrides)
    problem = _conditional_problem(config, args.dataset)
    out = _outdir(args)
    result = train(config, problem, out_dir=str(out))
    write_loss_history(out / "loss_history.csv", result.history)
    write_val_history(out / "val_history.csv", result.val_history)
    rng = np.random.default_rng(config.seed + 2)
    x0 = StandardNormalBase(dim=config.dim).sample(args.n, rng)
    traj = generate(result.potential, result.rwpo, config.grid(), x0)
    samples = traj.values(config.grid_steps)
    export_samples_csv(out / "posterior_samples.csv", samples)
    with open(out / "resolved.cfg", "w") as fh:
        fh.write(config_to_text(config))
    mean = samples.mean(axis=0)
    print("posterior sample mean:", " ".join(f"{v:.5g}" for v in mean))
    return 0


def _cmd_analyze(args) -> int:
    for path in (args.samples, args.reference):
        if not Path(path).exists():
            raise ConfigError(f"input file not found: {path}")
    x, _ = import_samples_csv(args.samples)
    ref, _ = import_samples_csv(args.reference)
    bandwidth = args.bandwidth
    if bandwidth is None:
        bandwidth = analysis.median_heuristic(x, ref)
    value = analysis.mmd(x, ref, bandwidth=bandwidth)
    out = _outdir(args)
    analysis.write_mmd_csv(out / "mmd.csv", [(Path(args.samples).stem, value, bandwidth)])
    if args.kde and x.shape[1] == 2:
        span = np.abs(x).max() + 3 * bandwidth
        gx = np.linspace(-span, span, 120)
        dens = analysis.kde_2d(x, bandwidth / 2, gx, gx)
        np.savetxt(out / "kde.csv", dens, delimiter=",", fmt="%.17g")
    _write_resolved(out, {"command": "analyze", "samples": args.samples,
                          "reference": args.reference, "bandwidth": bandwidth})
    print(f"MMD^2 = {value:.6g} (bandwidth {bandwidth:.6g})")
    return 0


def _cmd_selftest(args) -> int:
    checks = []

    def check(name, fn):
        try:
            fn()
            checks.append((name, True, ""))
        except Exception as err:
            checks.append((name, False, str(err)))

    from . import autodiff as ad
    from .layer import (attention_weights, soft_threshold,
                        sparse_attention_divergence, sparse_attention_step)

    def gradient_agreement():
        x0 = np.array([0.4, -0.7, 1.2])
        f = lambda x: ad.vsum(ad.mul(ad.tanh(x), x))
        with ad.Tape() as tape:
            x = ad.leaf(x0)
            (g,) = ad.grad(tape, f(x), [x])
        v = np.array([0.3, -0.5, 0.2])
        jv = ad.directional_derivative(f, x0, v)
        assert abs(float(g @ v) - float(jv)) < 1e-12

    def soft_threshold_identity():
        x = np.array([0.5, -2.0, 0.0])
        assert np.array_equal(soft_threshold(x, 0.0), x)

    def weights_normalized():
        pts = np.random.default_rng(0).normal(size=(16, 2))
        w = attention_weights(pts, RwpoParams(lam=1.0, beta=1.0, h=0.1))
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)
        assert (w >= 0).all()

    def single_token_identity():
        x = np.array([[0.3, 0.9]])
        out = sparse_attention_step(x, RwpoParams(lam=0.0, beta=1.0, h=0.1))
        assert np.array_equal(out, x)

    def divergence_fd():
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(5, 2)) + 0.5
        p = RwpoParams(lam=0.7, beta=1.0, h=0.1)
        div = sparse_attention_divergence(pts, p)
        delta = 1e-5
        j = 2
        acc = 0.0
        for i in range(2):
            for sign in (1, -1):
                shifted = pts.copy()
                shifted[j, i] += sign * delta
                disp = sparse_attention_step(shifted, p)[j] - shifted[j]
                acc += sign * disp[i] / (2 * delta)
        assert abs(div[j] - acc) < 1e-6

    def bound_reduction():
        params = analysis.TheoryParams(gamma=1.0, c_ls=1.0, lam=0.0)
        assert abs(analysis.kl_upper_bound(1.0, 0.5, params) - np.exp(-1.0)) < 1e-12

    check("reverse/forward gradient agreement", gradient_agreement)
    check("soft threshold identity at zero", soft_threshold_identity)
    check("attention weights normalized", weights_normalized)
    check("single-token step is identity", single_token_identity)
    check("attention divergence matches finite differences", divergence_fd)
    check("decay bound classical reduction", bound_reduction)

    failed = 0
    for name, ok, msg in checks:
        status = "PASS" if ok else "FAIL"
        line = f"[{status}] {name}"
        if not ok:
            line += f": {msg}"
            failed += 1
        print(line)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 0 if failed == 0 else 1


def run(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return 1 if err.code not in (0, None) else 0
    handlers = {"train": _cmd_train, "generate": _cmd_generate,
                "sample": _cmd_sample, "bayes": _cmd_bayes,
                "analyze": _cmd_analyze, "selftest": _cmd_selftest}
    try:
        return handlers[args.command](args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 1
    except TrainingAbort as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        if err.breakdown is not None:
            print(f"term breakdown: {err.breakdown.as_dict()}", file=sys.stderr)
        return 2
    except NumericsError as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"i/o failure: {err}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
