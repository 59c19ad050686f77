"""Command-line entry point.

Verbs: synth (synthetic corpus), train (single run), eval (checkpoint
metrics, detections, PR curve), ablate (component grid x seeds plus the
report table and chart), plot (render curves from training logs).  Exit
codes: 0 success, 1 runtime failure, 2 usage error.  Commands refuse to
clobber existing outputs unless --overwrite is passed.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from .config import Config
from .data import load_manifest, synthesize_dataset
from .errors import OutputsExist, TbAttrError

PROG = "tbattr"


def _build_parser():
    parser = argparse.ArgumentParser(
        prog=PROG, description="attribute-assisted lesion detection toolkit"
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    synth = sub.add_parser("synth", help="generate a synthetic labeled corpus")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--n", type=int, default=16, help="number of images")
    synth.add_argument("--size", type=int, default=64, help="square image size")
    synth.add_argument("--n-attributes", type=int, default=7)
    synth.add_argument("--attr-only", type=float, default=0.3)
    synth.add_argument("--box-only", type=float, default=0.3)
    synth.add_argument("--out", required=True)
    synth.add_argument("--overwrite", action="store_true")

    train = sub.add_parser("train", help="train one configuration")
    train.add_argument("--data", required=True, help="directory with manifest.jsonl")
    train.add_argument("--out", required=True)
    train.add_argument("--config", help="key = value config file")
    train.add_argument("--quiet", action="store_true")
    train.add_argument("--overwrite", action="store_true")
    train.add_argument("overrides", nargs="*", metavar="key=value")

    evaluate = sub.add_parser("eval", help="evaluate a checkpoint")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--data", required=True)
    evaluate.add_argument("--split", default="val", choices=("train", "val"))
    evaluate.add_argument("--out", required=True)
    evaluate.add_argument("--overwrite", action="store_true")

    ablate = sub.add_parser("ablate", help="run the component grid")
    ablate.add_argument("--config", help="key = value config file")
    ablate.add_argument("--seeds", type=int, default=3)
    ablate.add_argument("--data", help="reuse an existing corpus directory")
    ablate.add_argument("--jobs", type=int, default=1)
    ablate.add_argument("--out", required=True)
    ablate.add_argument("--quiet", action="store_true")
    ablate.add_argument("--overwrite", action="store_true")
    ablate.add_argument("overrides", nargs="*", metavar="key=value")

    plot = sub.add_parser("plot", help="render curves from training logs")
    plot.add_argument("--logs", nargs="*", default=[])
    plot.add_argument("--out", required=True)
    plot.add_argument("--overwrite", action="store_true")
    return parser


def _guard_outputs(paths, overwrite):
    existing = [p for p in paths if os.path.exists(p)]
    if existing and not overwrite:
        raise OutputsExist(
            f"outputs exist: {', '.join(existing)} (pass --overwrite to replace)"
        )


def _load_config(path, overrides):
    cfg = Config.from_file(path) if path else Config()
    cfg.apply_overrides(overrides or [])
    return cfg


def _cmd_synth(args):
    manifest_path = os.path.join(args.out, "manifest.jsonl")
    _guard_outputs([manifest_path], args.overwrite)
    synthesize_dataset(
        args.out,
        seed=args.seed,
        n_records=args.n,
        image_size=args.size,
        n_attributes=args.n_attributes,
        attr_only_fraction=args.attr_only,
        box_only_fraction=args.box_only,
    )
    print(manifest_path)
    return 0


def _cmd_train(args):
    from .training import run_training

    _guard_outputs(
        [os.path.join(args.out, "log.csv"), os.path.join(args.out, "checkpoint.pt")],
        args.overwrite,
    )
    cfg = _load_config(args.config, args.overrides)
    log_fn = None if args.quiet else print
    last = run_training(args.data, args.out, cfg, log_fn=log_fn)
    print(last["checkpoint"])
    return 0


def _cmd_eval(args):
    import torch

    from .detector import write_detections
    from .evaluation import compute_pr_curve, evaluate_model
    from .model import load_checkpoint
    from .plots import make_pr_figure, save_figure
    from .training import make_batch

    out_paths = [
        os.path.join(args.out, name)
        for name in ("metrics.csv", "detections.jsonl", "pr_curve.png")
    ]
    _guard_outputs(out_paths, args.overwrite)
    os.makedirs(args.out, exist_ok=True)
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(os.path.join(args.data, "manifest.jsonl"))
    records = manifest.records_in(args.split)
    metrics = evaluate_model(model, records, args.data)

    model.eval()
    by_image, gts = {}, []
    with torch.no_grad():
        for start in range(0, len(records), 8):
            chunk = records[start : start + 8]
            batch = make_batch(chunk, args.data, manifest.n_attributes)
            dets = model.detect(batch.images)
            for record, det in zip(chunk, dets):
                by_image[record.image_path] = det
                gts.append(record.boxes or [])
    write_detections(out_paths[1], by_image)
    precision, recall = compute_pr_curve(list(by_image.values()), gts)
    save_figure(make_pr_figure(precision, recall), out_paths[2])
    with open(out_paths[0], "w", encoding="utf-8") as fh:
        fh.write("accuracy,f1,map\n")
        fh.write(f"{metrics['accuracy']:.6f},{metrics['f1']:.6f},{metrics['map']:.6f}\n")
    print(f"accuracy {metrics['accuracy']:.4f} f1 {metrics['f1']:.4f} map {metrics['map']:.4f}")
    return 0


def _key_slug(key):
    scale, flags = key
    if scale == "baseline":
        return "baseline"
    return f"{scale}-" + "".join("1" if f else "0" for f in flags)


def _final_metrics(log_path):
    """Percent metrics from the last evaluated epoch of a training log."""
    from .errors import MalformedLog
    from .plots import read_log

    columns = read_log(log_path)
    for i in range(len(columns["epoch"]) - 1, -1, -1):
        if columns["val_acc"][i] is not None:
            return {
                "f_score": 100.0 * columns["val_f1"][i],
                "accuracy": 100.0 * columns["val_acc"][i],
                "map": 100.0 * columns["val_map"][i],
            }
    raise MalformedLog(f"{log_path}: no evaluated epochs")


def _cmd_ablate(args):
    from .evaluation import ROW_ORDER, ablation_report, row_key, write_ablation_report
    from .plots import make_ablation_figure, save_figure
    from .training import run_training

    report_paths = [
        os.path.join(args.out, "ablation_report." + ext) for ext in ("csv", "txt", "png")
    ]
    _guard_outputs(report_paths, args.overwrite)
    if args.seeds < 1:
        raise TbAttrError(f"--seeds must be >= 1, got {args.seeds}")
    cfg = _load_config(args.config, args.overrides)
    data_dir = args.data
    if data_dir is None:
        data_dir = os.path.join(args.out, "data")
        if not os.path.exists(os.path.join(data_dir, "manifest.jsonl")):
            synthesize_dataset(data_dir, seed=0)

    tasks = []
    for label, scale_mode, flags in ROW_ORDER:
        for seed in range(args.seeds):
            tasks.append((row_key(scale_mode, flags), scale_mode, flags, seed))

    def run_one(task):
        key, scale_mode, flags, seed = task
        run_cfg = Config(cfg.resolved())
        run_cfg.set("ablation.group_conv", flags[0])
        run_cfg.set("ablation.a2_attn", flags[1])
        run_cfg.set("ablation.at_attn", flags[2])
        run_cfg.set("scale_mode", scale_mode)
        run_cfg.set("train.seed", seed)
        run_dir = os.path.join(args.out, "runs", _key_slug(key), f"seed{seed}")
        run_training(data_dir, run_dir, run_cfg)
        if not args.quiet:
            print(f"done: {_key_slug(key)} seed {seed}")
        return key, _final_metrics(os.path.join(run_dir, "log.csv"))

    results = {}
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(run_one, tasks))
    else:
        outcomes = [run_one(task) for task in tasks]
    for key, metrics in outcomes:
        results.setdefault(key, []).append(metrics)

    table = ablation_report(results)
    write_ablation_report(table, args.out)
    save_figure(make_ablation_figure(table), report_paths[2])
    if not args.quiet:
        print(table.to_text())
    return 0


def _cmd_plot(args):
    from .plots import emit_plots

    _guard_outputs(
        [os.path.join(args.out, name) for name in ("loss_curve.png", "val_metrics.png")],
        args.overwrite,
    )
    written = emit_plots(args.logs, args.out, warn=lambda m: print(m, file=sys.stderr))
    for path in written:
        print(path)
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "plot": _cmd_plot,
}


def dispatch(argv):
    """Run one command; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.verb](args)
    except TbAttrError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - contract: nonzero on any failure
        print(f"{PROG}: unexpected error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))
