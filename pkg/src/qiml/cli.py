"""Command-line pipeline: gen-data, train-qcbm, train-surrogate, rollout-eval, report-storage, run-all."""

import argparse
import logging
import os
import sys
import warnings

_threads = os.environ.get("QIML_THREADS")
if _threads:
    # must happen before numpy loads its BLAS
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import numpy as np  # noqa: E402

from . import config as cfgmod  # noqa: E402
from . import dynamics, koopman, metrics, qcbm  # noqa: E402
from .numcore import RandomStream  # noqa: E402

log = logging.getLogger("qiml")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_WARNING = 3

SPLITS = ("train", "val", "test")


class PipelineError(RuntimeError):
    pass


def _out(cfg, *parts):
    path = os.path.join(cfg["run"]["output_dir"], *parts)
    os.makedirs(os.path.dirname(path) if os.path.splitext(path)[1] else path, exist_ok=True)
    return path


def _archive(cfg, stage):
    cfgmod.save(cfg, _out(cfg, stage, "config.toml"))


def _stream(cfg, key):
    return RandomStream(cfg["run"]["seed"]).spawn(key)


def ks_config(cfg):
    d = cfg["dynamics"]
    return dynamics.KSConfig(
        L=d["L"], N=d["N"], nu=d["nu"], mu=d["mu"], dt=d["dt"], save_every=d["save_every"],
        transient_steps=d["transient_steps"], ic_amplitude=d["ic_amplitude"], ic_max_mode=d["ic_max_mode"],
    )


def split_spec(cfg):
    s = cfg["dynamics"]["split"]
    return dynamics.SplitSpec(s["train"], s["val"], s["test"])


def split_path(cfg, name):
    return os.path.join(cfg["run"]["output_dir"], "data", f"{name}.qimd")


def load_split(cfg, name):
    path = split_path(cfg, name)
    if not os.path.exists(path):
        raise PipelineError(f"missing {name} split at {path}; run gen-data first")
    return dynamics.ingest_field_series(path)


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(cfg, dry_run=False):
    d = cfg["dynamics"]
    spec = split_spec(cfg)
    itemsize = 4 if d["dtype"] == "f32" else 8
    if d["source"] == "ks":
        grid = (d["N"],)
        n_traj, n_frames = d["n_trajectories"], d["n_frames"]
    else:
        hdr = dynamics.read_qimd_header(d["ingest_path"])
        grid, n_traj, n_frames = hdr["grid_shape"], hdr["n_trajectories"], hdr["n_frames"]
    sizes = spec.sizes(n_traj)
    if dry_run:
        total = dynamics.estimate_dataset_bytes(n_traj, n_frames, grid, itemsize)
        print(f"dataset: {n_traj} trajectories x {n_frames} frames x grid {tuple(grid)} ({d['dtype']})")
        print(f"estimated payload: {total} bytes ({total / 1e9:.3f} GB)")
        for name, n in zip(SPLITS, sizes):
            print(f"  {name:5s} {n:6d} trajectories  {dynamics.estimate_dataset_bytes(n, n_frames, grid, itemsize)} bytes")
        return EXIT_OK

    if d["source"] == "ks":
        try:
            series = dynamics.generate_ks_dataset(ks_config(cfg), n_traj, n_frames, _stream(cfg, 0))
        except dynamics.IntegrationError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_ERROR
    else:
        series = dynamics.ingest_field_series(d["ingest_path"])
    parts = dynamics.split_dataset(series, spec)
    lines = []
    for name, part in zip(SPLITS, parts):
        nbytes = dynamics.write_field_series(part, _out(cfg, "data", f"{name}.qimd"), d["dtype"])
        lines.append(f"{name}.qimd trajectories={part.n_trajectories} frames={part.n_frames} "
                     f"grid={'x'.join(map(str, part.grid_shape))} dt={part.dt!r} bytes={nbytes}")
    with open(_out(cfg, "data", "manifest.txt"), "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    _archive(cfg, "data")
    for line in lines:
        print(line)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-qcbm


def grid_mapping(cfg, grid_shape):
    q = cfg["qcbm"]
    return qcbm.GridMapping(tuple(grid_shape), q["block"], q["n_qubits"])


def cmd_train_qcbm(cfg):
    q = cfg["qcbm"]
    train = load_split(cfg, "train")
    mapping = grid_mapping(cfg, train.grid_shape)
    try:
        target = qcbm.empirical_target(train, mapping)
    except qcbm.DegenerateTargetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ansatz = qcbm.build_ansatz(q["n_qubits"], q["layers"], q["rotations_per_layer"], q["parameter_cap"])
        tc = qcbm.QCBMTrainConfig(q["epochs"], q["learning_rate"], tuple(q["bandwidths"]), q["mode"], q["shots"])
        prior = qcbm.train_qcbm(ansatz, target, tc, _stream(cfg, q["seed"]), mapping=mapping)
    prior.seed = int(cfg["run"]["seed"])
    prior.dataset_id = cfg["run"]["dataset_id"]
    prior.timestamp = cfg["run"]["timestamp"]
    path = _out(cfg, "qcbm", "qprior.json")
    qcbm.save_qprior(prior, path)
    with open(_out(cfg, "qcbm", "loss.csv"), "w", newline="\n") as fh:
        fh.write("epoch,mmd,best_mmd,max_prob\n")
        for r in prior.loss_log:
            fh.write(f"{r['epoch']},{r['mmd']!r},{r['best_mmd']!r},{r['max_prob']!r}\n")
        for w in prior.warnings:
            fh.write(f"# warning: {w}\n")
    _archive(cfg, "qcbm")
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    tv = 0.5 * float(np.abs(prior.distribution() - target).sum())
    print(f"qcbm: {ansatz.parameter_count} parameters, final MMD {prior.final_loss:.3e}, "
          f"TV to target {tv:.4f}, leaked mass {prior.leaked_mass():.2e}")
    print(f"checkpoint: {path} ({os.path.getsize(path)} bytes)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-surrogate


def surrogate_config(cfg, baseline):
    s = cfg["surrogate"]
    return koopman.SurrogateConfig(
        latent_dim=s["latent_dim"], hidden=tuple(s["hidden"]), epochs=s["epochs"], batch_size=s["batch_size"],
        learning_rate=s["learning_rate"], lambda_kl=0.0 if baseline else s["lambda_kl"],
        lambda_mmd=0.0 if baseline else s["lambda_mmd"], unitary_weight=s["unitary_weight"],
    )


def default_prior_path(cfg):
    return os.path.join(cfg["run"]["output_dir"], "qcbm", "qprior.json")


def cmd_train_surrogate(cfg, prior_path=None, baseline=False):
    sc = surrogate_config(cfg, baseline)
    name = "baseline" if baseline else "prior"
    prior = None
    if sc.lambda_kl or sc.lambda_mmd:
        prior_path = prior_path or default_prior_path(cfg)
        if not os.path.exists(prior_path):
            print(f"error: lambda_kl={sc.lambda_kl}, lambda_mmd={sc.lambda_mmd} need a Q-prior but "
                  f"{prior_path} does not exist; run train-qcbm, pass --prior PATH, or use --baseline",
                  file=sys.stderr)
            return EXIT_USAGE
        prior = qcbm.load_qprior(prior_path)
    train, val = load_split(cfg, "train"), load_split(cfg, "val")
    if prior is not None and tuple(prior.mapping.grid_shape) != tuple(train.grid_shape):
        print(f"error: prior grid {tuple(prior.mapping.grid_shape)} does not match dataset grid "
              f"{tuple(train.grid_shape)}", file=sys.stderr)
        return EXIT_ERROR
    model, tlog = koopman.train_surrogate(train, val, prior, sc, _stream(cfg, cfg["surrogate"]["seed"]))
    path = _out(cfg, "surrogate", name, "model.qims")
    koopman.save_model(model, path)
    tlog.write_csv(_out(cfg, "surrogate", name, "log.csv"))
    _archive(cfg, os.path.join("surrogate", name))
    last = tlog.rows[-1] if tlog.rows else None
    print(f"surrogate[{name}]: best epoch {tlog.best_epoch}, "
          f"||K^T K - I||_F = {koopman.unitarity_residual(model.K):.4f}")
    if last:
        print(f"  last epoch: recon {last['recon']:.5f} kl {last['kl']:.5f} mmd {last['mmd']:.3e} "
              f"val_recon {last['val_recon']:.5f}")
    if tlog.aborted:
        print(f"warning: training aborted ({tlog.aborted}); best checkpoint kept", file=sys.stderr)
        return EXIT_WARNING
    return EXIT_OK


# ---------------------------------------------------------------------------
# rollout-eval


def spectrum_k_max(cfg, grid_shape):
    k = cfg["metrics"]["spectrum_k_max"]
    if k:
        return int(k)
    # 1D KS data are 2/3-dealiased: modes above N/3 carry no resolved energy
    return grid_shape[0] // 3 if len(grid_shape) == 1 else grid_shape[0] // 2


def spectrum(values):
    return metrics.energy_spectrum_1d(values) if values.ndim == 3 else metrics.energy_spectrum_2d_radial(values)


def evaluate_against(truth, pred, cfg, pdf_range):
    m = cfg["metrics"]
    h_true = metrics.value_pdf(truth, m["pdf_bins"], pdf_range)
    h_pred = metrics.value_pdf(pred, m["pdf_bins"], pdf_range)
    tv, kl = metrics.distribution_distance(h_pred, h_true)
    kmax = spectrum_k_max(cfg, truth.shape[2:])
    mae = metrics.spectrum_log_mae(spectrum(pred), spectrum(truth), k_max=kmax)
    n = min(truth.shape[1], pred.shape[1])
    err = metrics.relative_error(pred[:, :n], truth[:, :n])
    return {"pdf_tv": tv, "pdf_kl": kl, "spectrum_log_mae": mae,
            "er_mean": float(np.nanmean(err.curve)), "er_last": float(err.curve[-1])}, err


def cmd_rollout_eval(cfg, checkpoints=None):
    test = load_split(cfg, "test")
    truth = test.values
    horizon = cfg["rollout"]["horizon"]
    L = cfg["dynamics"]["L"] if test.rank == 1 else None
    pdf_range = metrics.default_pdf_range(truth, cfg["metrics"]["pdf_std_range"])
    if checkpoints is None:
        checkpoints = {}
        for name in ("baseline", "prior"):
            p = os.path.join(cfg["run"]["output_dir"], "surrogate", name, "model.qims")
            if os.path.exists(p):
                checkpoints[name] = p
    summary = []
    status = EXIT_OK

    rep = metrics.series_report(truth, L, pdf_range, cfg["metrics"]["pdf_bins"])
    rep.provenance = {"dataset_id": cfg["run"]["dataset_id"], "source": "test split"}
    metrics.write_report(rep, _out(cfg, "eval", "truth"))
    scores, _ = evaluate_against(truth, truth, cfg, pdf_range)
    summary.append({"model": "truth", **scores, "unitarity": 0.0, "latent_drift": 0.0, "frames": truth.shape[1],
                    "truncated": 0})

    for name, path in sorted(checkpoints.items()):
        model = koopman.load_model(path)
        rolls = [koopman.rollout(model, test.values[i, 0], horizon, cfg["rollout"]["latent_only"])
                 for i in range(test.n_trajectories)]
        n = min(r.frames.shape[0] for r in rolls)
        truncated = any(r.truncated for r in rolls)
        if truncated:
            status = EXIT_WARNING
            print(f"warning: {name} rollout diverged; metrics use the first {n} frames", file=sys.stderr)
        if n == 0:
            summary.append({"model": name, "frames": 0, "truncated": 1})
            continue
        pred = np.stack([r.frames[:n] for r in rolls])
        rep = metrics.series_report(pred, L, pdf_range, cfg["metrics"]["pdf_bins"])
        # rollout frame k predicts ground-truth frame k+1
        scores, err = evaluate_against(truth[:, 1:], pred, cfg, pdf_range)
        rep.add_curve("relative_error", metrics.FORMULAS["relative_error"], test.n_trajectories,
                      frame=np.arange(1, err.curve.size + 1), E_r=err.curve)
        rep.provenance = {"dataset_id": cfg["run"]["dataset_id"], "checkpoint": os.path.basename(os.path.dirname(path)),
                          "horizon": horizon}
        rep.scalars = dict(scores)
        metrics.write_report(rep, _out(cfg, "eval", name))
        summary.append({"model": name, **scores, "unitarity": koopman.unitarity_residual(model.K),
                        "latent_drift": max(r.latent_drift() for r in rolls), "frames": n,
                        "truncated": int(truncated)})

    cols = ["model", "pdf_tv", "pdf_kl", "spectrum_log_mae", "er_mean", "er_last", "unitarity",
            "latent_drift", "frames", "truncated"]
    with open(_out(cfg, "eval", "summary.csv"), "w", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for row in summary:
            fh.write(",".join(_cell(row.get(c, "")) for c in cols) + "\n")
    _archive(cfg, "eval")
    _print_table(summary, cols)
    return status


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _print_table(rows, cols):
    fmt = {c: (lambda v: f"{v:.4g}" if isinstance(v, float) else str(v)) for c in cols}
    table = [[fmt[c](r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(t[i]) for t in table)) for i, c in enumerate(cols)]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for t in table:
        print("  ".join(v.ljust(w) for v, w in zip(t, widths)))


# ---------------------------------------------------------------------------
# report-storage


def storage_report(dataset_paths, prior_paths, snapshots=None):
    """Byte accounting measured from files on disk."""
    if not prior_paths:
        raise PipelineError("no Q-prior checkpoints given; compression ratio is undefined")
    for p in list(dataset_paths) + list(prior_paths):
        if not os.path.exists(p):
            raise PipelineError(f"missing file {p}")
    raw = sum(os.path.getsize(p) for p in dataset_paths)
    sizes = [os.path.getsize(p) for p in prior_paths]
    per_ckpt = sum(sizes) / len(sizes)
    if snapshots:
        count = int(snapshots)
        total = per_ckpt * count
    else:
        count = len(sizes)
        total = float(sum(sizes))
    return {"raw_bytes": raw, "per_checkpoint_bytes": per_ckpt, "checkpoint_count": count,
            "total_prior_bytes": total, "ratio": raw / total}


def cmd_report_storage(cfg, dataset_paths=None, prior_paths=None, snapshots=None):
    out = cfg["run"]["output_dir"]
    if dataset_paths is None:
        dataset_paths = [split_path(cfg, s) for s in SPLITS]
    if prior_paths is None:
        prior_paths = [default_prior_path(cfg)]
    try:
        rep = storage_report(dataset_paths, prior_paths, snapshots)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    lines = [
        f"raw_bytes             {rep['raw_bytes']}",
        f"per_checkpoint_bytes  {rep['per_checkpoint_bytes']:.1f}",
        f"checkpoint_count      {rep['checkpoint_count']}",
        f"total_prior_bytes     {rep['total_prior_bytes']:.1f}",
        f"compression_ratio     {rep['ratio']:.2f}",
    ]
    os.makedirs(os.path.join(out, "storage"), exist_ok=True)
    with open(os.path.join(out, "storage", "report.txt"), "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    _archive(cfg, "storage")
    print("\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------


def cmd_run_all(cfg):
    os.makedirs(cfg["run"]["output_dir"], exist_ok=True)
    cfgmod.save(cfg, os.path.join(cfg["run"]["output_dir"], "config.toml"))
    status = EXIT_OK
    steps = [
        ("gen-data", lambda: cmd_gen_data(cfg)),
        ("train-qcbm", lambda: cmd_train_qcbm(cfg)),
        ("train-surrogate --baseline", lambda: cmd_train_surrogate(cfg, baseline=True)),
        ("train-surrogate", lambda: cmd_train_surrogate(cfg)),
        ("rollout-eval", lambda: cmd_rollout_eval(cfg)),
        ("report-storage", lambda: cmd_report_storage(cfg)),
    ]
    for label, step in steps:
        print(f"== {label}")
        code = step()
        if code in (EXIT_ERROR, EXIT_USAGE):
            return code
        status = max(status, code)
    return status


def build_parser():
    p = argparse.ArgumentParser(prog="qiml", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="TOML run configuration")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--output", help="override run.output_dir")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    g = common(sub.add_parser("gen-data", help="generate or ingest data and write split QIMD files"))
    g.add_argument("--dry-run", action="store_true", help="print size estimates only")
    common(sub.add_parser("train-qcbm", help="train the Q-prior on the training split"))
    t = common(sub.add_parser("train-surrogate", help="train the Koopman surrogate"))
    t.add_argument("--prior", help="Q-prior checkpoint (default: <output>/qcbm/qprior.json)")
    t.add_argument("--baseline", action="store_true", help="no prior: lambda_kl = lambda_mmd = 0")
    r = common(sub.add_parser("rollout-eval", help="roll out trained surrogates and write metrics"))
    r.add_argument("--checkpoint", action="append", default=None, metavar="NAME=PATH")
    s = common(sub.add_parser("report-storage", help="raw data vs Q-prior storage accounting"))
    s.add_argument("--dataset", action="append", help="dataset file (repeatable)")
    s.add_argument("--prior", action="append", help="Q-prior checkpoint (repeatable)")
    s.add_argument("--snapshots", type=int, help="one checkpoint per snapshot: multiply by this count")
    common(sub.add_parser("run-all", help="gen-data, train-qcbm, both surrogates, rollout-eval, report-storage"))
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config, seed=args.seed, output_dir=args.output)
    except (OSError, cfgmod.ConfigError, ValueError) as exc:
        print(f"error: bad config {args.config}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "gen-data":
            return cmd_gen_data(cfg, dry_run=args.dry_run)
        if args.command == "train-qcbm":
            return cmd_train_qcbm(cfg)
        if args.command == "train-surrogate":
            return cmd_train_surrogate(cfg, prior_path=args.prior, baseline=args.baseline)
        if args.command == "rollout-eval":
            ck = None
            if args.checkpoint:
                ck = dict(item.split("=", 1) for item in args.checkpoint)
            return cmd_rollout_eval(cfg, ck)
        if args.command == "report-storage":
            return cmd_report_storage(cfg, args.dataset, args.prior, args.snapshots)
        return cmd_run_all(cfg)
    except (PipelineError, dynamics.FieldSeriesFormatError, qcbm.QPriorFormatError,
            koopman.ModelFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
