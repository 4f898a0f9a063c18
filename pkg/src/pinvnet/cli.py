"""Command-line entry point: ``pinvnet <command> [flags]``.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, config, linalg, verify
from .data import AttributeStats, attribute_stats, generate, load_dataset, save_dataset
from .diffusion import Denoiser, GuidanceContractError, sample_guided, train_denoiser
from .losses import FrozenParameterViolation, train_phase1, train_phase2
from .nlbp import PINV_VARIANTS, covariance_target, dynamic_target, resolve_pinv
from .nn import Rng
from .spnn import SpnnModel

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("pinvnet")


class UsageError(Exception):
    pass


class MetricsWriter:
    """Append-only JSON-lines sink; ``None`` path discards records."""

    def __init__(self, path=None, append: bool = False):
        self.fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "a" if append else "w")

    def __call__(self, rec: dict) -> None:
        if self.fh:
            self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _emit(rec: dict) -> None:
    print(json.dumps(rec, sort_keys=True))


def _load_cfg(args, **flags) -> dict:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for key, value in flags.items():
        config.set_key(overrides, key, value)
    return config.load_config(getattr(args, "config", None), overrides)


def _load_model(path, kind="spnn"):
    if path is None or not Path(path).exists():
        raise UsageError(f"checkpoint {path} does not exist")
    model, manifest = checkpoint.load(path)
    if manifest["kind"] != kind:
        raise UsageError(f"{path} holds a {manifest['kind']} checkpoint, expected {kind}")
    return model, manifest


def _load_data(path):
    if path is None or not Path(path).exists():
        raise UsageError(f"dataset {path} does not exist")
    return load_dataset(path)


# -- commands ---------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    if args.spec:
        cfg["data"]["spec"] = json.loads(Path(args.spec).read_text())
    n = args.n if args.n is not None else cfg["data"]["n_train"] + cfg["data"]["n_test"]
    if n < 1:
        raise UsageError("--n must be at least 1")
    spec = config.synthetic_spec(cfg)
    ds = generate(spec, n, cfg["seed"], args.split)
    save_dataset(ds, args.out)
    _emit({"command": "gen-data", "out": str(args.out), "n": n, "seed": cfg["seed"], "spec_hash": ds.spec_hash})
    return EXIT_OK


def _split(ds, cfg, test_path):
    if test_path:
        return ds, _load_data(test_path)
    n_train = min(cfg["data"]["n_train"], len(ds) - 1) if len(ds) > 1 else len(ds)
    return ds.split_at(n_train)


def cmd_train_forward(args) -> int:
    cfg = _load_cfg(args, **{"train.phase1_epochs": args.epochs})
    ds = _load_data(args.data)
    train, test = _split(ds, cfg, args.test)
    tcfg = config.train_config(cfg)
    start = 0
    if args.resume:
        m, manifest = _load_model(args.resume)
        start = manifest["extra"].get("phase1_epochs_done", 0)
    else:
        mc = cfg["model"]
        m = SpnnModel.build(tuple(mc["input_shape"]), mc["block_dims"], Rng(cfg["seed"]).child(0), mc["unshuffle"],
                            mc["hidden"], mc["depth"], mc["activation"], mc["mixer_scale"])
    if m.input_dim != train.samples.shape[1] or m.output_dim != train.labels.shape[1]:
        raise UsageError("model dims do not match the dataset")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume and Path(args.resume).resolve() != out.resolve() and (Path(args.resume) / "metrics.jsonl").exists():
        (out / "metrics.jsonl").write_bytes((Path(args.resume) / "metrics.jsonl").read_bytes())
    writer = MetricsWriter(out / "metrics.jsonl", append=bool(args.resume))
    try:
        held_out = (test.samples, test.labels) if len(test) else None
        metrics = train_phase1(m, train.samples, train.labels.astype(np.float64), tcfg, test=held_out,
                               log_fn=writer, start_epoch=start)
    finally:
        writer.close()
    done = start + len(metrics)
    stats = attribute_stats(train, m.forward(train.samples))
    checkpoint.save(m, out, cfg, cfg["seed"], {"phase": 1, "phase1_epochs_done": done, "phase2_epochs_done": 0,
                                                "data_hash": ds.spec_hash, "attribute_stats": stats.to_dict()})
    _emit({"command": "train-forward", "out": str(out), "epochs_done": done,
           "accuracy": metrics[-1]["accuracy"] if metrics else None})
    return EXIT_OK


def cmd_train_pinv(args) -> int:
    m, manifest = _load_model(args.model)
    cfg = _load_cfg(args, **{"train.phase2_epochs": args.epochs})
    ds = _load_data(args.data)
    train, _ = _split(ds, cfg, None)
    tcfg = config.train_config(cfg)
    before = {k: v.copy() for k, v in m.forward_parameters().items()}
    extra = dict(manifest["extra"])
    start = extra.get("phase2_epochs_done", 0) if extra.get("phase2_objective", args.objective) == args.objective else 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if Path(args.model).resolve() != out.resolve() and (Path(args.model) / "metrics.jsonl").exists():
        (out / "metrics.jsonl").write_bytes((Path(args.model) / "metrics.jsonl").read_bytes())
    writer = MetricsWriter(out / "metrics.jsonl", append=True)
    try:
        metrics = train_phase2(m, m.forward(train.samples), tcfg, x_samples=train.samples, log_fn=writer,
                               start_epoch=start, objective=args.objective)
    finally:
        writer.close()
    for k, v in m.forward_parameters().items():
        if not np.array_equal(v, before[k]):
            raise FrozenParameterViolation(f"forward parameter {k} changed during phase II")
    extra.update({"phase": 2, "phase2_epochs_done": start + len(metrics), "phase2_objective": args.objective})
    checkpoint.save(m, out, cfg, cfg["seed"], extra)
    _emit({"command": "train-pinv", "out": str(out), "objective": args.objective,
           "epochs_done": extra["phase2_epochs_done"], "loss_natural": metrics[-1]["loss_natural"] if metrics else None})
    return EXIT_OK


def cmd_train_diffusion(args) -> int:
    cfg = _load_cfg(args, **{"denoiser.steps": args.steps})
    ds = _load_data(args.data)
    train, test = _split(ds, cfg, None)
    sched = config.schedule(cfg)
    d = cfg["denoiser"]
    den = Denoiser.create(train.samples.shape[1], sched.T, Rng(cfg["seed"]).child(5), d["width"], d["depth"],
                          d["emb_dim"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    writer = MetricsWriter(out / "metrics.jsonl")
    try:
        metrics = train_denoiser(den, train.samples, sched, config.denoiser_config(cfg),
                                 val=test.samples if len(test) else None, log_fn=writer)
    finally:
        writer.close()
    checkpoint.save(den, out, cfg, cfg["seed"], {"schedule": sched.to_dict()})
    _emit({"command": "train-diffusion", "out": str(out), "val_loss": metrics[-1]["val_loss"]})
    return EXIT_OK


def _guidance_setup(args, task):
    m, manifest = _load_model(args.model)
    den, dman = _load_model(args.denoiser, "denoiser")
    if den.data_dim != m.input_dim:
        raise UsageError(f"denoiser dim {den.data_dim} does not match model input dim {m.input_dim}")
    cfg = _load_cfg(args, **{f"{task}.nlbp.lam": getattr(args, "lam", None),
                             f"{task}.nlbp.pinv_mode": getattr(args, "mode", None),
                             f"{task}.chains": args.chains})
    if getattr(args, "adaptive", False):
        cfg[task]["nlbp"]["adaptive"] = True
    sched = config.schedule({"schedule": {**cfg["schedule"], **_schedule_of(dman)}})
    return m, manifest, den, cfg, sched


def _schedule_of(manifest) -> dict:
    s = manifest["extra"].get("schedule")
    if not s:
        return {}
    # stored betas are already rescaled
    return {"T": s["T"], "beta_start": s["beta_start"], "beta_end": s["beta_end"], "reference_T": s["T"]}


def _write_outputs(args, x0, trajectory, summary):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "samples.npy", x0)
    writer = MetricsWriter(out / "trajectory.jsonl")
    for rec in trajectory:
        writer(rec)
    writer.close()
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit(summary)


def _pinv_for(args, m, seed):
    mn = None
    if args.mode == "min_norm_r":
        if not args.min_norm_model:
            raise UsageError("--mode min_norm_r needs --min-norm-model")
        mn, _ = _load_model(args.min_norm_model)
    return resolve_pinv(m, args.mode or "natural_closed_form", Rng(seed).child(14), mn)


def cmd_restore(args) -> int:
    m, _, den, cfg, sched = _guidance_setup(args, "restore")
    scfg = config.sampler_config(cfg, "restore", sched.T)
    args.mode = scfg.nlbp.pinv_mode
    ds = _load_data(args.target)
    n = cfg["restore"]["chains"]
    if n > len(ds):
        raise UsageError(f"target file holds {len(ds)} samples, {n} chains requested")
    targets = m.forward(ds.samples[args.offset:args.offset + n])
    pm, mode = _pinv_for(args, m, cfg["seed"])
    seeds = [cfg["seed"] + k for k in range(len(targets))]
    res = sample_guided(den, m, targets, sched, scfg, seeds, pinv_model=pm, pinv_mode=mode)
    summary = {"command": "restore", "chains": len(targets), "seed": cfg["seed"], "pinv_mode": scfg.nlbp.pinv_mode,
               "lambda": scfg.nlbp.lam, "agreement": verify.attribute_agreement(m, res.x0, targets),
               "residual": float(np.mean(np.linalg.norm(m.forward(res.x0) - targets, axis=1)))}
    _write_outputs(args, res.x0, res.trajectory, summary)
    return EXIT_OK


def cmd_edit(args) -> int:
    m, manifest, den, cfg, sched = _guidance_setup(args, "edit")
    if not 0 <= args.attribute < m.output_dim:
        raise UsageError(f"--attribute must lie in [0, {m.output_dim})")
    stats_d = manifest["extra"].get("attribute_stats")
    if args.stats_data:
        ds = _load_data(args.stats_data)
        stats = attribute_stats(ds, m.forward(ds.samples))
    elif stats_d:
        stats = AttributeStats.from_dict(stats_d)
    else:
        raise UsageError("model checkpoint carries no attribute statistics; pass --stats-data")
    scfg = config.sampler_config(cfg, "edit", sched.T, args.attribute)
    n = args.attribute
    rule = (lambda y: covariance_target(y, n, stats)) if args.covariance_adjust else (lambda y: dynamic_target(y, n, stats))
    seeds = [cfg["seed"] + k for k in range(cfg["edit"]["chains"])]
    res = sample_guided(den, m, rule, sched, scfg, seeds)
    y = m.forward(res.x0)
    summary = {"command": "edit", "attribute": n, "chains": len(seeds), "seed": cfg["seed"],
               "adaptive": scfg.nlbp.adaptive, "covariance_adjust": bool(args.covariance_adjust),
               "success_rate": float(np.mean(y[:, n] > 0)),
               "attribute_rates": [float(v) for v in np.mean(y > 0, axis=0)]}
    _write_outputs(args, res.x0, res.trajectory, summary)
    return EXIT_OK


def cmd_verify(args) -> int:
    suites = ["linear", "penrose", "projection", "natural", "ablation"] if args.suite == "all" else [args.suite]
    cfg = _load_cfg(args)
    seed = cfg["seed"]
    m = None
    if set(suites) - {"linear"}:
        m, _ = _load_model(args.model)
        if args.corrupt:
            m = verify.corrupted_inverse(m)
    reports = []
    for s in suites:
        if s == "linear":
            reports.append(verify.run_linear_suite(seed=seed))
        elif s == "penrose":
            reports.append(verify.run_penrose_suite(m, args.samples, seed=seed))
        elif s == "projection":
            reports.append(verify.run_projection_suite(m, args.samples, seed=seed))
        elif s == "natural":
            reports.append(verify.run_natural_suite(m, args.targets, seed=seed))
        elif s == "ablation":
            if args.suite == "all" and not (args.denoiser and args.data and args.min_norm_model):
                continue
            den, dman = _load_model(args.denoiser, "denoiser")
            mn, _ = _load_model(args.min_norm_model)
            ds = _load_data(args.data)
            sched = config.schedule({"schedule": {**cfg["schedule"], **_schedule_of(dman)}})
            scfg = config.sampler_config(cfg, "restore", sched.T)
            targets = m.forward(ds.samples[:cfg["restore"]["chains"]])
            reports.append(verify.run_ablation_grid(m, den, targets, sched, mn, scfg, seed=seed))
    writer = MetricsWriter(args.report)
    for rep in reports:
        for rec in rep.records + [rep.summary()]:
            writer(rec)
            if args.verbose or rec["check"] == "summary" or not rec["pass"]:
                _emit(rec)
    writer.close()
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VERIFY


def cmd_pinv(args) -> int:
    try:
        a = np.loadtxt(args.matrix_file, ndmin=2)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read matrix: {exc}") from exc
    ap = linalg.pinv(a)
    res = linalg.penrose_residuals(a, ap)
    ok = max(res) <= args.tol
    _emit({"command": "pinv", "shape": list(a.shape), "pinv": ap.tolist(),
           "penrose_residuals": [float(r) for r in res], "tol": args.tol, "pass": ok})
    return EXIT_OK if ok else EXIT_VERIFY


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pinvnet", description="Surjective pseudo-invertible networks toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--config", help="JSON config; flags override its keys")
        sp.add_argument("--seed", type=int)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate a synthetic attribute dataset")
    sp.add_argument("--spec", help="JSON file with synthetic spec fields")
    sp.add_argument("--n", type=int)
    sp.add_argument("--split", default="train", choices=["train", "test"])
    sp.add_argument("--out", required=True)

    sp = add("train-forward", cmd_train_forward, "phase I: task training")
    sp.add_argument("--data", required=True)
    sp.add_argument("--test", help="held-out dataset; default splits --data")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--out", required=True)

    sp = add("train-pinv", cmd_train_pinv, "phase II: auxiliary-network training")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--objective", default="natural", choices=["natural", "min_norm"])
    sp.add_argument("--out", required=True)

    sp = add("train-diffusion", cmd_train_diffusion, "train the toy denoiser")
    sp.add_argument("--data", required=True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--out", required=True)

    for name, fn, help_ in (("restore", cmd_restore, "static-target guided sampling"),
                            ("edit", cmd_edit, "single-attribute editing")):
        sp = add(name, fn, help_)
        sp.add_argument("--model", required=True)
        sp.add_argument("--denoiser", required=True)
        sp.add_argument("--chains", type=int)
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--out", required=True)
        if name == "restore":
            sp.add_argument("--target", required=True, help="dataset whose images define the targets")
            sp.add_argument("--offset", type=int, default=0)
            sp.add_argument("--mode", choices=PINV_VARIANTS)
            sp.add_argument("--min-norm-model")
        else:
            sp.add_argument("--attribute", type=int, required=True)
            sp.add_argument("--adaptive", action="store_true")
            sp.add_argument("--covariance-adjust", action="store_true")
            sp.add_argument("--stats-data")

    sp = add("verify", cmd_verify, "run invariant suites")
    sp.add_argument("--suite", default="all", choices=["linear", "penrose", "projection", "natural", "ablation", "all"])
    sp.add_argument("--model")
    sp.add_argument("--samples", type=int, default=1000)
    sp.add_argument("--targets", type=int, default=100)
    sp.add_argument("--denoiser")
    sp.add_argument("--min-norm-model")
    sp.add_argument("--data")
    sp.add_argument("--corrupt", action="store_true", help="fault injection: skip the division by s")
    sp.add_argument("--report", help="write all records as JSON lines")

    sp = sub.add_parser("pinv", help="Moore-Penrose pseudo-inverse of a whitespace-separated matrix")
    sp.set_defaults(fn=cmd_pinv)
    sp.add_argument("--matrix-file", required=True)
    sp.add_argument("--tol", type=float, default=1e-8)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except (FrozenParameterViolation, GuidanceContractError) as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (FloatingPointError, linalg.NumericalError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, config.ConfigError, checkpoint.CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
