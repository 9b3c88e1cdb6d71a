"""Command-line interface: gen-data, train, eval, segment, gradcheck, bench."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .data import FormatError, SceneSample, load_split, read_ppm, write_dataset, write_pgm
from .tensor import Tensor, precision


def _cmd_gen_data(args) -> int:
    manifest = write_dataset(args.out, args.count, args.size, args.seed)
    print(f"wrote {args.count} scenes to {manifest.parent}")
    return 0


def _load_config(path):
    from .train import TrainConfig, parse_config

    if path is None:
        return TrainConfig()
    return parse_config(Path(path).read_text())


def _cmd_train(args) -> int:
    from . import plotting
    from .train import build_model, train_loop

    cfg = _load_config(args.config)
    train = load_split(args.data, "train")
    val = load_split(args.data, "val")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train.log"
    with log_path.open("w") as log_file:
        def log(line):
            print(line, flush=True)
            log_file.write(line + "\n")

        state = train_loop(build_model(cfg), train, val, cfg, out_dir=out, log=log)
    if state.history:
        fig = plotting.loss_curve(state.history, out / "loss_curve.png")
        print(f"figure {fig}")
    return 0


def _predict_split(model, samples: list[SceneSample], dtype: str, batch: int = 8):
    preds = []
    with precision(dtype):
        for i in range(0, len(samples), batch):
            x = np.stack([s.image for s in samples[i : i + batch]]).astype(dtype)
            preds.append(model.predict(Tensor(x)))
    return np.concatenate(preds)


def _cmd_eval(args) -> int:
    from .metrics import confusion_accumulate, metric_lines, text_report
    from .train import checkpoint_load

    model, _, cfg = checkpoint_load(args.ckpt, with_state=False)
    model.eval()
    samples = load_split(args.data, args.split)
    if not samples:
        raise ValueError(f"split {args.split!r} in {args.data} is empty")
    pred = _predict_split(model, samples, cfg.dtype)
    truth = np.stack([s.labels for s in samples])
    cm = confusion_accumulate(pred, truth)
    for line in metric_lines(cm):
        print(line)
    if args.report:
        from . import plotting

        report = Path(args.report)
        report.mkdir(parents=True, exist_ok=True)
        (report / "metrics.txt").write_text("\n".join(metric_lines(cm)) + "\n\n" + text_report(cm) + "\n")
        print(f"figure {plotting.confusion_heatmap(cm, report / 'confusion.png')}")
        images = np.stack([s.image for s in samples])
        print(f"figure {plotting.segmentation_grid(images, truth, pred, report / 'samples.png')}")
    return 0


def _cmd_segment(args) -> int:
    from .train import checkpoint_load

    model, _, cfg = checkpoint_load(args.ckpt, with_state=False)
    model.eval()
    image = read_ppm(args.image)
    h, w = image.shape[1:]
    ph, pw = -h % 16, -w % 16
    padded = np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="edge")
    with precision(cfg.dtype):
        labels = model.predict(Tensor(padded[None].astype(cfg.dtype)))[0, :h, :w]
    write_pgm(args.out, labels.astype(np.uint8))
    print(f"wrote {h}x{w} label map to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .checks import run_gradchecks

    reports = run_gradchecks(args.op, seed=args.seed)
    lines = [r.line() for r in reports]
    for line in lines:
        print(line)
    if args.report:
        Path(args.report).write_text("\n".join(lines) + "\n")
    failed = [r.op for r in reports if not r.passed]
    if failed:
        print(f"error: {len(failed)} gradient check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _cmd_bench(args) -> int:
    from .checks import bench_ratio, bench_time

    if args.ratio:
        t1, t2, ratio = bench_ratio(args.op, args.n, args.ratio, args.repeats)
        print(f"bench {args.op} n {args.n} seconds {t1:.6f}")
        print(f"bench {args.op} n {args.n * args.ratio} seconds {t2:.6f}")
        print(f"bench {args.op} ratio {ratio:.3f}")
    else:
        print(f"bench {args.op} n {args.n} seconds {bench_time(args.op, args.n, args.repeats):.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpcmnet", description="Cloud segmentation network: data, training, evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_cmd_gen_data)

    t = sub.add_parser("train", help="train on the train split, validate on val")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key = value config file")
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="print metric lines for a split")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--report", help="directory for metrics.txt and figures")
    e.set_defaults(func=_cmd_eval)

    s = sub.add_parser("segment", help="segment one PPM image into a PGM label map")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_segment)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite (float64)")
    c.add_argument("--op", action="append", help="case name (repeatable); default all")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--report", help="write check lines to this file")
    c.set_defaults(func=_cmd_gradcheck)

    b = sub.add_parser("bench", help="time an operator")
    b.add_argument("--op", required=True, choices=["sla", "softmax", "scan"])
    b.add_argument("--n", type=int, required=True)
    b.add_argument("--ratio", type=int, nargs="?", const=4, default=0, help="also time at ratio*n (default 4)")
    b.add_argument("--repeats", type=int, default=7)
    b.set_defaults(func=_cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)  # exits 2 with usage on bad flags
    try:
        return args.func(args)
    except (FormatError, ValueError, KeyError, FileNotFoundError, OSError) as e:
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
