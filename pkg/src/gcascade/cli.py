"""Command line front end.

Subcommands: ``synth`` (write a dataset directory), ``train``, ``eval``,
``count`` (params/FLOPs tables), ``gradcheck`` (finite-difference suite)
and ``graph-dump`` (neighbor graph as CSV). One flat ``key = value`` file
passed with ``--config`` drives every subcommand; ``--set key=value`` and
``--seed`` override single keys. GCASCADE_PRECISION (f32 or f64) selects
the default float width.
"""

import argparse
import os
import sys

import numpy as np

from . import complexity, gradcheck
from . import tensor as T
from .config import RunConfig, read_config
from .data import read_dataset, write_dataset
from .decoder import SegmentationModel
from .graph import build_knn_graph
from .metrics import evaluate_masks, predictions_from_logits
from .training import load_model, train


def _build_parser():
    p = argparse.ArgumentParser(
        prog="gcascade",
        description="graph-convolutional cascaded decoder tools")
    p.add_argument("--config", metavar="FILE",
                   help="flat 'key = value' run configuration")
    p.add_argument("--seed", type=int, metavar="N",
                   help="override the shared seed")
    p.add_argument("--set", action="append", default=[], dest="sets",
                   metavar="KEY=VALUE", help="override one config key")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset directory")
    s.add_argument("out", help="directory to create")

    s = sub.add_parser("train", help="train on a dataset directory")
    s.add_argument("data", help="dataset directory (from synth)")
    s.add_argument("out", help="run directory for log.csv and checkpoint/")

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    s.add_argument("checkpoint", help="checkpoint directory")
    s.add_argument("data", help="dataset directory")
    s.add_argument("--split", choices=("val", "train"), default="val")
    s.add_argument("--csv", metavar="FILE",
                   help="write per-sample metrics as CSV")
    s.add_argument("--no-hausdorff", action="store_true",
                   help="skip distance metrics")

    s = sub.add_parser("count", help="print parameter and FLOP tables")
    s.add_argument("--input-size", type=int, default=224, metavar="N")
    s.add_argument("--variant", help="graph conv variant override")
    s.add_argument("--aggregation",
                   help="skip-connection aggregation (add or concat)")
    s.add_argument("--csv", metavar="FILE",
                   help="write path,params,flops rows")

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--samples", type=int, default=2, metavar="N",
                   help="coordinates checked per decoder parameter")

    s = sub.add_parser("graph-dump", help="neighbor graph as CSV")
    s.add_argument("--size", type=int, default=8, metavar="N",
                   help="square grid side")
    s.add_argument("--channels", type=int, default=4, metavar="N")
    s.add_argument("--k", type=int, default=None)
    s.add_argument("--dilation", type=int, default=1)
    s.add_argument("--reduction", type=int, default=1)
    s.add_argument("--out", metavar="FILE", help="default: stdout")
    return p


def _predict_labels(model, images, batch=25):
    out = []
    for start in range(0, images.shape[0], batch):
        x = T.Tensor(images[start:start + batch].astype(T.default_dtype()))
        out.append(predictions_from_logits(model(x).aggregate.data))
    return np.concatenate(out)


def _cmd_synth(args, cfg):
    meta = write_dataset(args.out, cfg.synth)
    print("wrote %s train / %s val samples (%s classes, %spx) to %s"
          % (meta["train"], meta["val"], meta["classes"], meta["size"],
             args.out))
    return 0


def _cmd_train(args, cfg):
    meta, train_data, val_data = read_dataset(args.data)
    classes = int(meta["classes"])
    if classes != cfg.decoder.classes:
        # the model must match its data; the dataset wins
        cfg.decoder.classes = classes
        print("classes = %d (from dataset)" % classes)
    model = SegmentationModel(cfg.decoder, seed=cfg.train.seed)
    os.makedirs(args.out, exist_ok=True)
    rows = train(model, train_data, val_data, cfg.train,
                 log_path=os.path.join(args.out, "log.csv"),
                 checkpoint_dir=os.path.join(args.out, "checkpoint"))
    last = rows[-1]
    print("epoch %d  train_loss %.6f  val_dice %.6f  val_miou %.6f"
          % (last.epoch, last.train_loss, last.val_dice, last.val_miou))
    print("log: %s" % os.path.join(args.out, "log.csv"))
    print("checkpoint: %s" % os.path.join(args.out, "checkpoint"))
    return 0


def _cmd_eval(args, cfg):
    model, _ = load_model(args.checkpoint)
    meta, train_data, val_data = read_dataset(args.data)
    images, masks = val_data if args.split == "val" else train_data
    labels = _predict_labels(model, images, batch=cfg.train.eval_batch)
    report = evaluate_masks(labels, masks, model.config.classes,
                            with_hausdorff=not args.no_hausdorff)
    print("samples %d  classes %d  split %s"
          % (images.shape[0], model.config.classes, args.split))
    print("mean_dice %.6f  mean_iou %.6f" % (report.mean_dice, report.mean_iou))
    if not args.no_hausdorff:
        print("mean_hd95 %.6f" % report.mean_hd95)
    print("acc %.6f  sen %.6f  sp %.6f" % (report.acc, report.sen, report.sp))
    if args.csv:
        lines = ["sample,class,dice,iou,hd95"]
        n = report.dice.shape[0]
        for i in range(n):
            for c in range(model.config.classes):
                hd = report.hd95[i, c] if report.hd95 is not None else float("nan")
                lines.append("%d,%d,%.6f,%.6f,%.6f"
                             % (i, c, report.dice[i, c], report.iou[i, c], hd))
        lines.append("mean,foreground,%.6f,%.6f,%.6f"
                     % (report.mean_dice, report.mean_iou,
                        report.mean_hd95 if report.hd95 is not None
                        else float("nan")))
        with open(args.csv, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        print("csv: %s" % args.csv)
    return 0


def _cmd_count(args, cfg):
    dec = cfg.decoder
    if args.variant:
        dec.variant = args.variant
    if args.aggregation:
        dec.aggregation = args.aggregation
    dec.validate()
    root = complexity.count(dec, args.input_size)
    print(complexity.format_table(root))
    if args.csv:
        # headline column: 1 MAC = 2 FLOPs convention folded out, matching
        # the figures the tables report as FLOPs
        lines = ["path,params,flops"]
        for node, _ in root.walk():
            lines.append("%s,%d,%d" % (node.path, node.params, node.macs))
        with open(args.csv, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        print("csv: %s" % args.csv)
    return 0


def _cmd_gradcheck(args, cfg):
    results, worst = gradcheck.run_all(samples_per_param=args.samples,
                                       seed=cfg.train.seed)
    for r in results:
        note = "" if not r.skipped else "  (%d crease coords skipped)" % r.skipped
        print("%-24s %10.3e  %5.2fs  %s%s"
              % (r.name, r.max_rel_err, r.seconds,
                 "ok" if r.ok() else "FAIL", note))
    print("max relative error %.3e" % worst)
    return 0 if worst < gradcheck.TOLERANCE else 1


def _cmd_graph_dump(args, cfg):
    k = args.k if args.k is not None else cfg.decoder.k
    rng = np.random.default_rng(cfg.train.seed)
    feats = rng.normal(size=(1, args.channels, args.size, args.size))
    graph = build_knn_graph(feats, k=k, dilation=args.dilation,
                            reduction=args.reduction)
    lines = ["batch,node,slot,neighbor"]
    n, m, slots = graph.indices.shape
    for b in range(n):
        for i in range(m):
            for s in range(slots):
                lines.append("%d,%d,%d,%d" % (b, i, s, graph.indices[b, i, s]))
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print("csv: %s" % args.out)
    else:
        sys.stdout.write(text)
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "count": _cmd_count,
    "gradcheck": _cmd_gradcheck,
    "graph-dump": _cmd_graph_dump,
}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        precision = os.environ.get("GCASCADE_PRECISION")
        if precision:
            T.set_precision(precision)
        cfg = read_config(args.config) if args.config else RunConfig()
        for item in args.sets:
            key, eq, value = item.partition("=")
            if not eq:
                raise ValueError("--set expects KEY=VALUE, got %r" % item)
            cfg.set_key(key.strip(), value.strip())
        if args.seed is not None:
            cfg.set_key("seed", str(args.seed))
        return _COMMANDS[args.command](args, cfg)
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
