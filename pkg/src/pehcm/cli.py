"""Command-line driver.

Subcommands: gen-data, train, eval, gradcheck, cluster-inspect, plot.
Configuration comes from built-in defaults, an optional `key = value`
config file, and repeated --set key=value overrides, applied in that order
(last writer wins). Successful commands exit 0; failures print one JSON
object to stderr and exit nonzero. The PEHCM_THREADS environment variable
caps worker threads (default 1, which keeps runs bitwise reproducible).
"""

import argparse
import json
import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def _cap_threads():
    # Must run before numpy is imported anywhere in this process.
    raw = os.environ.get("PEHCM_THREADS", "1")
    try:
        n = max(1, int(raw))
    except ValueError:
        raise UsageError(f"PEHCM_THREADS must be an integer, got {raw!r}") from None
    for var in _THREAD_VARS:
        os.environ.setdefault(var, str(n))
    return n


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj, stream=None):
    print(json.dumps(obj, indent=2, sort_keys=True), file=stream or sys.stdout)


def _load_cfg(args):
    from . import config

    assignments = list(args.set or [])
    cfg = config.load_config(args.config, assignments)
    return config.validate(cfg)


def _add_common(sub):
    sub.add_argument("--config", default=None, help="key = value config file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override one config key (repeatable, last wins)")


def _cmd_gen_data(args):
    from . import data

    cfg = _load_cfg(args)
    train, eval_pool = data.generate(cfg.synthetic_spec())
    os.makedirs(args.out, exist_ok=True)
    ext = "bin" if args.format == "bin" else "csv"
    writer = data.write_binary if args.format == "bin" else data.write_csv
    paths = {}
    for name, fs in (("train", train), ("eval", eval_pool)):
        path = os.path.join(args.out, f"{name}.{ext}")
        writer(path, fs)
        paths[name] = path
    _emit({"train_path": paths["train"], "eval_path": paths["eval"],
           "n_train": train.n, "n_eval": eval_pool.n, "dim": train.dim})
    return 0


def _cmd_train(args):
    from . import trainer

    cfg = _load_cfg(args)
    result = trainer.train(cfg)
    last = result.metrics[-1] if result.metrics else None
    _emit({
        "out_dir": cfg.out_dir,
        "checkpoint": result.checkpoint_path,
        "metrics": result.metrics_path,
        "resolved_config": result.config_path,
        "epochs": cfg.epochs,
        "final_loss_total": None if last is None else last.loss_total,
        "final_coarse_acc": None if last is None else last.coarse_acc,
        "final_d1": None if last is None else last.d1,
        "final_d2": None if last is None else last.d2,
    })
    return 0


def _cmd_eval(args):
    from . import trainer

    cfg = _load_cfg(args)
    ks = [int(k) for k in args.recall_ks.split(",")] if args.retrieval else None
    report = trainer.evaluate_checkpoint(cfg, args.checkpoint, retrieval_ks=ks)
    text = report.to_json()
    if args.report:
        tmp = f"{args.report}.tmp.{os.getpid()}"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        os.replace(tmp, args.report)
    print(text)
    return 0


def _cmd_gradcheck(args):
    from . import network

    cfg = _load_cfg(args)
    dims = [int(d) for d in args.dims.split(",")]
    if any(d > 8 for d in dims) or args.batch > 8:
        raise UsageError("gradcheck runs on tiny instances only (dims and batch <= 8)")
    encoder_dims = (dims[0], dims[1], dims[1])
    projector_dims = (dims[1], dims[1], dims[2])
    reports = {}
    for label, alpha in (("alpha_zero", 0.0), ("alpha_full", cfg.alpha if cfg.alpha > 0 else 800.0)):
        reports[label] = network.composite_gradcheck(
            encoder_dims=encoder_dims, projector_dims=projector_dims,
            batch=args.batch, alpha=alpha, curvature=cfg.curvature, seed=cfg.seed)
    worst = max(r["max_rel_err"] for r in reports.values())
    passed = bool(worst < args.tolerance)
    _emit({
        "pass": passed,
        "tolerance": args.tolerance,
        "max_rel_err": worst,
        "alpha_zero": reports["alpha_zero"],
        "alpha_full": reports["alpha_full"],
    })
    return 0 if passed else 3


def _cmd_cluster_inspect(args):
    import numpy as np

    from . import checkpoint, network, pseudo_labels, trainer

    cfg = _load_cfg(args)
    meta, store, _ = checkpoint.load_checkpoint(args.checkpoint)
    net, _ = network.build_model(
        meta["space"], meta["n_coarse"], meta["encoder_dims"],
        meta["projector_dims"], meta["curvature"], store, np.random.default_rng(0))
    train_set, _ = trainer.load_datasets(cfg)
    features = net.embed(train_set.features)
    bank = pseudo_labels.MemoryBank(np.unique(train_set.coarse), cfg.memory_size)
    bank.push(features, train_set.coarse)
    model = pseudo_labels.recluster(bank, cfg.resolved_k_clusters(), seed=cfg.seed,
                                    n_init=cfg.kmeans_restarts)
    assigned = pseudo_labels.assign_pseudo(features, train_set.coarse, model)
    summary = {}
    for cls in bank.classes():
        rows = train_set.coarse == cls
        cents = model.centroids.get(cls)
        hist = np.bincount(assigned[rows][assigned[rows] >= 0],
                           minlength=0 if cents is None else len(cents))
        summary[str(cls)] = {
            "stored": bank.count(cls),
            "n_centroids": 0 if cents is None else int(len(cents)),
            "assignment_histogram": hist.tolist(),
        }
    _emit({"k_clusters": cfg.resolved_k_clusters(), "classes": summary})
    return 0


def _cmd_plot(args):
    import csv as csv_mod

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(args.out, exist_ok=True)
    outputs = {}
    if args.metrics:
        epochs, d1, d2 = [], [], []
        with open(args.metrics, newline="", encoding="utf-8") as fh:
            for row in csv_mod.DictReader(fh):
                epochs.append(int(row["epoch"]))
                d1.append(float(row["d1"]))
                d2.append(float(row["d2"]))
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(epochs, d1, label="d1 (same pseudo-fine)")
        ax.plot(epochs, d2, label="d2 (same coarse)")
        ax.set_xlabel("epoch")
        ax.set_ylabel("target cosine distance")
        ax.legend()
        ax.grid(alpha=0.3)
        path = os.path.join(args.out, "d1_d2.svg")
        fig.savefig(path)
        plt.close(fig)
        outputs["d1_d2"] = path
    if args.alpha_sweep:
        rows = [("alpha", "mean_acc", "ci95", "mode", "metric")]
        for item in args.alpha_sweep:
            if "=" not in item:
                raise UsageError(f"bad --alpha-sweep entry {item!r}, expected ALPHA=report.json")
            alpha, path = item.split("=", 1)
            with open(path, encoding="utf-8") as fh:
                rep = json.load(fh)
            rows.append((alpha, str(rep["mean_acc"]), str(rep["ci95"]),
                         rep["mode"], rep["metric"]))
        path = os.path.join(args.out, "alpha_sweep.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(",".join(r) for r in rows) + "\n")
        outputs["alpha_sweep"] = path
    if not outputs:
        raise UsageError("plot needs --metrics and/or --alpha-sweep inputs")
    _emit(outputs)
    return 0


def build_parser():
    parser = _Parser(prog="pehcm",
                     description="Hierarchical cosine-margin embeddings in the "
                                 "Poincare ball, trained from coarse labels.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset to disk")
    _add_common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=("csv", "bin"), default="csv")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write its artifacts")
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="episodic evaluation of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", default=None, help="also write the JSON report here")
    p.add_argument("--retrieval", action="store_true",
                   help="include Recall@k and mAP over the evaluation pool")
    p.add_argument("--recall-ks", default="1,5")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    _add_common(p)
    p.add_argument("--dims", default="6,8,4",
                   help="input,hidden,embed dims (each <= 8)")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("cluster-inspect",
                       help="dump per-class centroid counts and assignment histograms")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=_cmd_cluster_inspect)

    p = sub.add_parser("plot", help="render d1/d2 curves and alpha-sweep tables")
    p.add_argument("--metrics", default=None, help="metrics.csv from a training run")
    p.add_argument("--alpha-sweep", action="append", metavar="ALPHA=REPORT_JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_plot)

    return parser


def main(argv=None):
    try:
        _cap_threads()
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        _emit({"error": "usage", "message": str(exc)}, stream=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports all failures
        _emit({"error": type(exc).__name__, "message": str(exc)}, stream=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
