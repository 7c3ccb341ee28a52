"""Command line entry point: ``idon gen|train|eval|posterior|mcmc-compare|sweep``.

Exit codes: 0 success, 2 configuration error, 3 data or solver failure,
4 training divergence, 5 inference failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import multiprocessing
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from idon import bayes
from idon.checkpoint import Checkpoint
from idon.config import ExperimentConfig, load_config
from idon.estimator import InvertibleDeepONet, MixturePosterior
from idon.evaluation import NORM_NOTE, EvalReport, relative_errors
from idon.exceptions import (
    ConfigError,
    DatasetFormatError,
    DegenerateComponent,
    NotPositiveDefinite,
    SingularSystem,
    SolverDiverged,
    TrainingDiverged,
)
from idon.problems.dataset import OperatorDataset, make_dataset, solve_outputs
from idon.problems.gp import gp_cholesky
from idon.problems.spec import ProblemSpec
from idon.training import write_history, read_history

logger = logging.getLogger("idon")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_INFERENCE = 5

TEST_SEED_OFFSET = 10_000
COORD_STREAM = 0xC00D

# Full-scale reference errors (mean, std) at 10% labeled data, reported in eval footers.
REFERENCE_ERRORS = {
    "antiderivative": {"forward": (0.00791, 0.00799), "inverse": (0.034, 0.024)},
    "reaction_diffusion": {"forward": (0.0105, 0.0052), "inverse": (0.0184, 0.0058)},
}


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# helpers


def _write_meta(path: Path, cfg: ExperimentConfig, **extra) -> None:
    meta = {"config_hash": cfg.hash(), "seed": cfg.seed, "problem": cfg.problem.tag, **extra}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return str(x)


def _read_meta(path: Path) -> dict:
    meta_path = Path(str(path) + ".meta.json")
    if not meta_path.exists():
        raise ConfigError(f"metadata sidecar missing: {meta_path}")
    return json.loads(meta_path.read_text())


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _read_csv(path: Path) -> tuple:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigError(f"empty CSV file: {path}")
    return rows[0], rows[1:]


def _default_coords(cfg: ExperimentConfig) -> np.ndarray:
    return cfg.problem.observation_coords(np.random.default_rng([cfg.seed, COORD_STREAM]))


def _train_dataset(cfg: ExperimentConfig) -> OperatorDataset:
    d = cfg.data
    if d["train_path"]:
        ds = OperatorDataset.load(d["train_path"])
        _check_problem(cfg, ds)
        return ds
    return make_dataset(cfg.problem, int(d["n_unlabeled"]), cfg.n_labeled, cfg.seed)


def _test_dataset(cfg: ExperimentConfig, coords: np.ndarray) -> OperatorDataset:
    d = cfg.data
    if d["test_path"]:
        ds = OperatorDataset.load(d["test_path"])
        _check_problem(cfg, ds)
        return ds
    seed = d["test_seed"] if d["test_seed"] is not None else cfg.seed + TEST_SEED_OFFSET
    return make_dataset(cfg.problem, 0, int(d["n_test"]), seed, coords=coords)


def _check_problem(cfg: ExperimentConfig, ds: OperatorDataset) -> None:
    if ds.problem.tag != cfg.problem.tag or ds.problem.dim != cfg.problem.dim:
        raise ConfigError(f"dataset problem {ds.problem.tag}/{ds.problem.dim} does not match the configuration")


def _estimator(cfg: ExperimentConfig) -> InvertibleDeepONet:
    a = cfg.arch
    t = cfg.train_config
    return InvertibleDeepONet(
        problem=cfg.problem,
        n_blocks=a.n_blocks,
        coupling_hidden=a.coupling_hidden,
        trunk_hidden=a.trunk_hidden,
        s_max=a.s_max,
        iterations=t.iterations,
        batch_size_unlabeled=t.batch_size_unlabeled,
        labeled_per_batch=t.labeled_per_batch,
        lr0=t.lr0,
        decay_rate=t.decay_rate,
        decay_every=t.decay_every,
        eps=t.eps,
        clip_norm=t.clip_norm,
        detach_trunk_in_inverse_losses=t.detach_trunk_in_inverse_losses,
        resample_collocation=t.resample_collocation,
        loss_weights=cfg.loss_weights,
        log_every=t.log_every,
        random_state=cfg.seed,
    )


def _load_checkpoint(out: Path, path=None) -> Checkpoint:
    path = Path(path) if path else out / "checkpoint.json"
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    return Checkpoint.load(path)


def _sensor_columns(problem: ProblemSpec) -> tuple:
    sensors = problem.sensors()
    names = {1: ("x",), 2: ("x", "y"), 3: ("f1", "f2", "q")}[sensors.shape[1]]
    return names, sensors


def _coord_names(problem: ProblemSpec) -> tuple:
    return problem.coord_names


# --------------------------------------------------------------------------
# commands


def cmd_gen(cfg: ExperimentConfig, out: Path, args) -> int:
    """Write ``train.idon`` and ``test.idon`` and print their manifest."""
    out.mkdir(parents=True, exist_ok=True)
    d = cfg.data
    train = make_dataset(cfg.problem, int(d["n_unlabeled"]), cfg.n_labeled, cfg.seed)
    test = _test_dataset(cfg.replace_in("data", test_path=None), train.coords)
    manifest = []
    for name, ds in (("train", train), ("test", test)):
        ds.metadata["config_hash"] = cfg.hash()
        path = out / f"{name}.idon"
        ds.save(path)
        manifest.append(
            {
                "file": str(path),
                "rows": len(ds),
                "labeled": int(ds.labeled_mask.sum()),
                "inputs": list(ds.inputs.shape),
                "coords": list(ds.coords.shape),
                "outputs": None if ds.outputs is None else list(ds.outputs.shape),
            }
        )
    print(json.dumps(manifest, indent=2))
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, out: Path, args) -> int:
    """Train, writing ``checkpoint.json`` and ``history.csv``."""
    out.mkdir(parents=True, exist_ok=True)
    ds = _train_dataset(cfg)
    est = _estimator(cfg)
    target = cfg.train_config.iterations
    meta = {"config_hash": cfg.hash(), "detach_trunk_in_inverse_losses": cfg.train_config.detach_trunk_in_inverse_losses}
    ckpt_path = out / "checkpoint.json"
    hist_path = out / "history.csv"
    if args.resume:
        ckpt = Checkpoint.load(args.resume)
        est = InvertibleDeepONet.from_checkpoint(ckpt, coords=ds.coords)
        est.set_params(warm_start=True, iterations=max(0, target - ckpt.iteration))
        est.history_ = [r for r in read_history(hist_path) if r["iter"] < ckpt.iteration] if hist_path.exists() else []
        logger.info("resuming from iteration %d", ckpt.iteration)

    def save(result):
        est._set_state(ds.problem, est._architecture(ds.problem), result.params, result.opt_state, result.iteration, result.lr_scale, ds.coords)
        est.history_ = result.history
        est.to_checkpoint({**meta, "complete": False}).save(ckpt_path)
        write_history(result.history, hist_path)

    def log(row):
        logger.info("iter %d loss %.6g lr %.3g", row["iter"], row["total"], row["lr"])

    every = int(cfg.section("train")["checkpoint_every"])
    try:
        if est.iterations == 0 and not args.resume:
            est.init_only(coords=ds.coords)
        else:
            est = _fit_with_checkpoints(est, ds, log, every, save)
    except TrainingDiverged as exc:
        save(exc.result)
        raise CommandError(EXIT_DIVERGED, f"{exc}; last finite state saved to {ckpt_path}") from None
    est.to_checkpoint({**meta, "complete": True}).save(ckpt_path)
    write_history(est.history_, hist_path)
    _write_meta(hist_path, cfg, iterations=est.n_iter_, detach_trunk_in_inverse_losses=meta["detach_trunk_in_inverse_losses"])
    print(f"trained {est.n_iter_} iterations -> {ckpt_path}")
    return EXIT_OK


def _fit_with_checkpoints(est, ds, log, every, save):
    from idon.training import train

    resume = est.warm_start and hasattr(est, "params_")
    arch = est._architecture(ds.problem)
    result = train(
        ds.problem,
        arch,
        ds,
        est.train_config(),
        est.loss_weights or None,
        params=est.params_ if resume else None,
        opt_state=est.opt_state_ if resume else None,
        start_iteration=est.n_iter_ if resume else 0,
        history=est.history_ if resume else None,
        lr_scale=est.lr_scale_ if resume else 1.0,
        callback=log,
        checkpoint_every=every,
        on_checkpoint=save,
    )
    est._set_state(ds.problem, arch, result.params, result.opt_state, result.iteration, result.lr_scale, ds.coords)
    est.history_ = result.history
    return est


def cmd_eval(cfg: ExperimentConfig, out: Path, args) -> int:
    """Per-sample relative errors on the test set: ``eval.csv`` and ``eval_summary.csv``."""
    out.mkdir(parents=True, exist_ok=True)
    ckpt = _load_checkpoint(out, args.resume)
    est = InvertibleDeepONet.from_checkpoint(ckpt)
    if ckpt.arch.dim != cfg.problem.dim:
        raise ConfigError("checkpoint and configuration dimensions differ")
    test = _test_dataset(cfg, est.coords_)
    if test.outputs is None or not test.labeled_mask.all():
        raise ConfigError("the test set must be fully labeled")
    if test.coords.shape != est.coords_.shape or not np.allclose(test.coords, est.coords_):
        est.set_coords(test.coords)
    fwd = relative_errors(est.predict(test.inputs), test.outputs)
    inv = relative_errors(est.predict_inverse(test.outputs), test.inputs)
    ref = REFERENCE_ERRORS.get(cfg.problem.tag)
    report = EvalReport(fwd, inv, footer={"full_scale_reference": json.dumps(ref)} if ref else {})
    report.write_csv(out / "eval.csv")
    s = report.summary()
    _write_csv(out / "eval_summary.csv", list(s), [list(s.values())])
    _write_meta(
        out / "eval.csv",
        cfg,
        norm=NORM_NOTE,
        checkpoint_iteration=ckpt.iteration,
        detach_trunk_in_inverse_losses=ckpt.train_config.detach_trunk_in_inverse_losses if ckpt.train_config else False,
        full_scale_reference=ref,
        **s,
    )
    print(json.dumps(s))
    return EXIT_OK


def _observations(cfg: ExperimentConfig, est: InvertibleDeepONet, out: Path):
    """Observation file (``x(,t|,y),s_obs``) plus the ground-truth input, generated when not configured."""
    b = cfg.section("bayes")
    problem = cfg.problem
    if b["observations"]:
        header, rows = _read_csv(Path(b["observations"]))
        data = np.asarray(rows, dtype=np.float64)
        coords, s_obs = data[:, : problem.coord_dim], data[:, problem.coord_dim]
        truth_path = Path(str(b["observations"]) + ".truth.csv")
        u_true = None
        if truth_path.exists():
            _, trows = _read_csv(truth_path)
            u_true = np.asarray(trows, dtype=np.float64)[:, -1]
        return coords, s_obs, u_true, str(b["observations"])
    obs_seed = b["obs_seed"] if b["obs_seed"] is not None else cfg.seed
    test_seed = cfg.data["test_seed"] if cfg.data["test_seed"] is not None else cfg.seed + TEST_SEED_OFFSET
    idx = int(b["truth_index"])
    truth = make_dataset(problem, idx + 1, 0, test_seed, coords=est.coords_)
    u_true = truth.inputs[idx]
    fine = None if truth.fine_inputs is None else truth.fine_inputs[idx]
    rng = np.random.default_rng([obs_seed, 5])
    coords = problem.collocation_points(int(b["n_obs"]), rng)
    s_obs = solve_outputs(problem, u_true, fine, coords) + np.sqrt(b["sigma2"]) * rng.standard_normal(len(coords))
    path = out / "observations.csv"
    _write_csv(path, [*problem.coord_names, "s_obs"], [[*c, s] for c, s in zip(coords, s_obs)])
    names, sensors = _sensor_columns(problem)
    _write_csv(Path(str(path) + ".truth.csv"), ["coord_index", *names, "u_true"], [[i, *sensors[i], u_true[i]] for i in range(len(u_true))])
    _write_meta(path, cfg, sigma2=b["sigma2"], truth_index=idx, test_seed=test_seed, obs_seed=obs_seed)
    return coords, s_obs, u_true, str(path)


def cmd_posterior(cfg: ExperimentConfig, out: Path, args) -> int:
    """Mixture posterior report ``posterior.csv`` with a metadata sidecar."""
    out.mkdir(parents=True, exist_ok=True)
    b = cfg.section("bayes")
    if b["sigma2"] is None or not b["sigma2"] > 0:
        raise ConfigError("bayes.sigma2 must be given and positive")
    ckpt = _load_checkpoint(out, args.resume)
    est = InvertibleDeepONet.from_checkpoint(ckpt)
    coords, s_obs, u_true, obs_path = _observations(cfg, est, out)
    post = MixturePosterior(
        n_components=int(b["n_components"]),
        n_prior_samples=int(b["n_prior_samples"]),
        n_posterior_samples=int(b["n_posterior_samples"]),
        n_init=int(b["n_init"]),
        random_state=cfg.seed,
    ).fit(est)
    result = post.infer(s_obs, coords, float(b["sigma2"]))
    names, sensors = _sensor_columns(cfg.problem)
    header = ["coord_index", *names] + (["u_true"] if u_true is not None else []) + ["u_post_mean", "u_post_std"]
    rows = []
    for i in range(len(result.u_mean)):
        truth = [u_true[i]] if u_true is not None else []
        rows.append([i, *sensors[i], *truth, result.u_mean[i], result.u_std[i]])
    report = out / "posterior.csv"
    _write_csv(report, header, rows)
    extra = {}
    if u_true is not None:
        inside = np.abs(u_true - result.u_mean) <= 2 * result.u_std
        extra["coverage_2std"] = float(inside.mean())
    _write_meta(
        report,
        cfg,
        sigma2=float(b["sigma2"]),
        K=len(s_obs),
        M=post.prior_.n_components,
        seeds={"config": cfg.seed, "prior_samples": [cfg.seed, 1], "posterior_samples": [cfg.seed, 2]},
        weights=result.mixture.weights.tolist(),
        prior_weights=post.prior_.weights.tolist(),
        n_prior_samples=int(b["n_prior_samples"]),
        n_posterior_samples=int(b["n_posterior_samples"]),
        observations=obs_path,
        checkpoint=str(args.resume or out / "checkpoint.json"),
        **extra,
    )
    print(json.dumps({"report": str(report), "weights": result.mixture.weights.tolist(), **extra}))
    return EXIT_OK


def _read_report(path: Path) -> tuple:
    header, rows = _read_csv(path)
    data = np.asarray(rows, dtype=np.float64)
    col = {h: i for i, h in enumerate(header)}
    return header, data, data[:, col["u_post_mean"]], data[:, col["u_post_std"]]


def reference_log_likelihood(problem: ProblemSpec, coords, s_obs, sigma2: float):
    """``u -> -||s_obs - G_ref(u)(coords)||^2 / (2 sigma2)`` with the reference solver."""

    def ll(u):
        s = solve_outputs(problem, u, None, coords)
        r = s_obs - s
        return -0.5 * float(r @ r) / sigma2

    return ll


def cmd_mcmc_compare(cfg: ExperimentConfig, out: Path, args) -> int:
    """Compare a posterior report against an MCMC reference: ``mcmc_compare.csv``."""
    out.mkdir(parents=True, exist_ok=True)
    m = cfg.section("mcmc")
    report_path = out / "posterior.csv"
    if not report_path.exists():
        raise ConfigError(f"posterior report not found: {report_path}")
    header, data, gmm_mean, gmm_std = _read_report(report_path)
    n_coord_cols = header.index("u_true") if "u_true" in header else header.index("u_post_mean")
    extra = {}
    if m["reference_report"]:
        _, _, ref_mean, ref_std = _read_report(Path(m["reference_report"]))
        method = "report"
    else:
        meta = _read_meta(report_path)
        problem = cfg.problem
        if problem.tag == "darcy_cg":
            raise ConfigError("MCMC reference is not available for darcy_cg inputs")
        _, obs_rows = _read_csv(Path(meta["observations"]))
        obs = np.asarray(obs_rows, dtype=np.float64)
        coords, s_obs = obs[:, : problem.coord_dim], obs[:, problem.coord_dim]
        ll = reference_log_likelihood(problem, coords, s_obs, float(meta["sigma2"]))
        seed = m["seed"] if m["seed"] is not None else cfg.seed
        n = int(m["n_samples"])
        if m["method"] == "pcn" and problem.tag in ("antiderivative", "reaction_diffusion"):
            sensors = problem.sensors()[:, 0]
            chol = gp_cholesky(problem.gp, sensors)
            chain = bayes.pcn_mcmc(ll, problem.gp.mean, chol, float(m["beta"]), n, seed, u0=gmm_mean, thin=int(m["thin"]))
            method = "pcn"
        else:
            if problem.tag != "darcy_features":
                raise ConfigError("random-walk Metropolis is only configured for darcy_features inputs")
            x0 = np.clip(gmm_mean, 1e-6, 1 - 1e-6)
            chain = bayes.rw_metropolis(ll, x0, float(m["step"]), n, seed, thin=int(m["thin"]))
            method = "rwm"
        burn = int(m["burn"] * n) if m["burn"] < 1 else int(m["burn"])
        ref_mean, ref_std = chain.summary(burn)
        stderr = bayes.batch_means_stderr(chain.samples[burn:])
        extra = {"acceptance_rate": chain.acceptance_rate, "burn": burn, "n_samples": n, "mc_stderr_mean": float(stderr.mean())}
    diff = np.abs(gmm_mean - ref_mean)
    within = diff <= 2 * ref_std
    rows = [[int(r[0]), *r[1:n_coord_cols], gm, gs, mm, ms, d, int(w)] for r, gm, gs, mm, ms, d, w in zip(data, gmm_mean, gmm_std, ref_mean, ref_std, diff, within)]
    path = out / "mcmc_compare.csv"
    _write_csv(path, [*header[:n_coord_cols], "gmm_mean", "gmm_std", "mcmc_mean", "mcmc_std", "abs_diff", "within_2std"], rows)
    summary = {"method": method, "frac_within_2std": float(within.mean()), "max_abs_diff": float(diff.max()), **extra}
    _write_meta(path, cfg, report=str(report_path), **summary)
    print(json.dumps(summary))
    return EXIT_OK


def _sweep_cell(cfg: ExperimentConfig, out: str) -> dict:
    """Train and evaluate one sweep cell; returns the summary row."""
    out_path = Path(out)
    args = argparse.Namespace(resume=None)
    row = {"n_unlabeled": int(cfg.data["n_unlabeled"]), "labeled_pct": 100.0 * cfg.n_labeled / max(1, cfg.data["n_unlabeled"])}
    try:
        cmd_train(cfg, out_path, args)
        cmd_eval(cfg, out_path, args)
        report = EvalReport.read_csv(out_path / "eval.csv")
        row.update(report.summary())
        row.pop("n")
        row["status"] = "ok"
    except Exception as exc:  # recorded, the sweep continues
        row.update(fwd_err_mean=float("nan"), fwd_err_std=float("nan"), inv_err_mean=float("nan"), inv_err_std=float("nan"))
        row["status"] = f"failed: {type(exc).__name__}: {exc}"
    return row


def cmd_sweep(cfg: ExperimentConfig, out: Path, args) -> int:
    """Train/evaluate across labeled fractions or unlabeled counts: ``sweep.csv``."""
    out.mkdir(parents=True, exist_ok=True)
    s = cfg.section("sweep")
    if not s["values"]:
        raise ConfigError("sweep.values must list at least one value")
    cells = []
    for i, v in enumerate(s["values"]):
        if s["axis"] == "labeled_fraction":
            c = cfg.replace_in("data", labeled_fraction=float(v), n_labeled=None)
        else:
            c = cfg.replace_in("data", n_unlabeled=int(v))
        cells.append((c, str(out / f"cell_{i:03d}")))
    jobs = max(1, int(args.jobs or 1))
    if jobs == 1:
        rows = [_sweep_cell(c, o) for c, o in cells]
    else:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            rows = list(pool.map(_sweep_cell, *zip(*cells)))
    header = ["n_unlabeled", "labeled_pct", "fwd_err_mean", "fwd_err_std", "inv_err_mean", "inv_err_std", "status"]
    path = out / "sweep.csv"
    _write_csv(path, header, [[r[h] for h in header] for r in rows])
    _write_meta(path, cfg, axis=s["axis"], values=s["values"], norm=NORM_NOTE)
    print(path.read_text(), end="")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "posterior": cmd_posterior,
    "mcmc-compare": cmd_mcmc_compare,
    "sweep": cmd_sweep,
}

# which failures map to which exit code, per command
_DATA_ERRORS = (SolverDiverged, DatasetFormatError, SingularSystem)
_INFERENCE_ERRORS = (NotPositiveDefinite, DegenerateComponent, SingularSystem)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idon", description="Invertible DeepONet experiments.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="experiment configuration (TOML)")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--resume", default=None, help="checkpoint to resume from / evaluate")
    parser.add_argument("--jobs", type=int, default=1, help="parallel sweep cells")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("jax").setLevel(logging.WARNING)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be non-negative")
            cfg = cfg.with_seed(args.seed)
        out = Path(args.out or cfg.out or ".")
        return COMMANDS[args.command](cfg, out, args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except _DATA_ERRORS if args.command in ("gen", "train", "eval", "sweep") else () as exc:
        print(f"data/solver error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _INFERENCE_ERRORS if args.command == "posterior" else () as exc:
        print(f"inference error: {exc}", file=sys.stderr)
        return EXIT_INFERENCE
    except (SolverDiverged, DatasetFormatError) as exc:
        print(f"data/solver error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
