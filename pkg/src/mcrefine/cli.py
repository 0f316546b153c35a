"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or configuration, 2 file-system errors.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, load_config
from .experiment import case_rows, format_summary, run_experiment
from .grid import read_mct1, read_patch, read_pgm_mask, write_mct1, write_pgm_mask
from .metrics import evaluate_case
from .nets import net_from_arrays, read_mcw1
from .rfprior import rf_sample
from .rng import substream
from .synth import make_labeled_patch
from .train import (PairSet, background_source, build_pairs, save_rf, save_segmentor, shifted_config,
                    train_rf, train_segmentor)
from .ttgpr import refine

log = logging.getLogger("mcrefine")


class UsageError(ValueError):
    pass


def _write_pairs(out: Path, data_x, data_y, data_s, counts, seed: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "puncta", "seed"])
        for i, (x, y, s, n) in enumerate(zip(data_x, data_y, data_s, counts)):
            write_mct1(out / f"xs_{i:06d}.mct1", x)
            write_pgm_mask(out / f"ys_{i:06d}.pgm", y)
            write_pgm_mask(out / f"ss_{i:06d}.pgm", s)
            w.writerow([i, int(n), seed])


def _read_pairs(directory: str) -> PairSet:
    root = Path(directory)
    xs = sorted(root.glob("xs_*.mct1"))
    if not xs:
        raise FileNotFoundError(f"no xs_*.mct1 files in {root}")
    x, y, s = [], [], []
    for path in xs:
        idx = path.stem[3:]
        x.append(read_mct1(path).astype(np.float64))
        y.append(read_pgm_mask(root / f"ys_{idx}.pgm"))
        s.append(read_pgm_mask(root / f"ss_{idx}.pgm"))
    return PairSet(np.stack(x), np.stack(y), np.stack(s), np.zeros(len(x), dtype=int))


def _training_data(cfg: RunConfig, directory: str | None) -> PairSet:
    if directory:
        return _read_pairs(directory)
    bg = background_source(cfg.seed, "data/train", cfg.texture, cfg.synth.patch_size, cfg.data.backgrounds)
    return build_pairs(cfg.seed, "synth/train", cfg.data.train_count, cfg.synth, bg)


def _load_net(path: str, prefixes: tuple[str, ...]):
    entries = read_mcw1(path)
    for prefix in prefixes:
        if any(k.startswith(prefix) for k in entries):
            return net_from_arrays(entries, prefix)
    raise UsageError(f"{path}: no weights under {' or '.join(prefixes)}")


def _out(args, fallback: str) -> Path:
    return Path(args.out or fallback)


def cmd_synth(args, cfg: RunConfig) -> None:
    synth = cfg.synth
    if args.shifted:
        synth = shifted_config(synth, cfg.shift.gain_scale, cfg.shift.blur_scale)
    backgrounds = args.backgrounds or cfg.data.backgrounds
    bg = background_source(cfg.seed, "data/cli", cfg.texture, synth.patch_size, backgrounds)
    xs, ys, ss, counts = [], [], [], []
    for i in range(args.count):
        lp = make_labeled_patch(bg(i), substream(cfg.seed, f"synth/cli/pair/{i}"), synth)
        xs.append(lp.x_s)
        ys.append(lp.y_s)
        ss.append(lp.s_s)
        counts.append(len(lp.puncta))
    _write_pairs(_out(args, "synth"), xs, ys, ss, counts, cfg.seed)


def cmd_train_seg(args, cfg: RunConfig) -> None:
    if args.steps is not None:
        cfg.seg.steps = args.steps
    net = train_segmentor(cfg.seg, _training_data(cfg, args.data), substream(cfg.seed, "train/seg"),
                          checkpoint=str(_out(args, "segmentor.mcw1")))
    save_segmentor(_out(args, "segmentor.mcw1"), net)


def cmd_train_rf(args, cfg: RunConfig) -> None:
    if args.steps is not None:
        cfg.rf.steps = args.steps
    path = _out(args, "rf.mcw1")
    net, ema = train_rf(cfg.rf, _training_data(cfg, args.data), substream(cfg.seed, "train/rf"),
                        checkpoint=str(path))
    save_rf(path, net, ema)


def cmd_sample(args, cfg: RunConfig) -> None:
    net = _load_net(args.ckpt, ("ema.", "velocity."))
    s = read_pgm_mask(args.seed_mask).astype(np.float64)
    z = substream(cfg.seed, "sample").standard_normal(s.shape)
    write_mct1(_out(args, "sample.mct1"), rf_sample(net, z, s, cfg.rf.sampler()))


def cmd_refine(args, cfg: RunConfig) -> None:
    seg = _load_net(args.seg, ("segmentor.",))
    velocity = _load_net(args.rf, ("ema.", "velocity."))
    x = read_patch(args.input)
    p, trace = refine(seg, velocity, x, cfg.ttgpr, substream(cfg.seed, "refine/cli"), cfg.rf.sampler())
    for path in (args.out_prob, args.out_mask, args.trace):
        if path:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_mct1(args.out_prob, p)
    if args.out_mask:
        write_pgm_mask(args.out_mask, p >= cfg.eval.threshold)
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "t", "seeds", "energy_before", "energy_after", "logit_change"])
            w.writerows(trace.rows())


def _prediction(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".pgm":
        return read_pgm_mask(path).astype(np.float64)
    return read_mct1(path).astype(np.float64)


def cmd_eval(args, cfg: RunConfig) -> None:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    gts = sorted(gt_dir.glob("*.pgm"))
    if not gts:
        raise FileNotFoundError(f"no .pgm ground truth in {gt_dir}")
    roi = read_pgm_mask(cfg.eval.roi) if cfg.eval.roi else None
    threshold = cfg.eval.threshold if args.threshold is None else args.threshold
    ids, cases = [], []
    for gt_path in gts:
        # ys_000001.pgm pairs with prob_000001.mct1 / *_000001.pgm by trailing index
        key = gt_path.stem.rsplit("_", 1)[-1]
        matches = sorted(p for p in pred_dir.iterdir()
                         if p.stem.rsplit("_", 1)[-1] == key and p.suffix.lower() in (".mct1", ".pgm"))
        if not matches:
            raise FileNotFoundError(f"no prediction for {gt_path.name} in {pred_dir}")
        ids.append(gt_path.stem)
        cases.append(evaluate_case(_prediction(matches[0]), read_pgm_mask(gt_path), threshold, roi))
    _out(args, "report.csv").write_text(case_rows(ids, cases))


def cmd_run(args, cfg: RunConfig) -> None:
    out = _out(args, "run")
    report = run_experiment(cfg, out)
    sys.stdout.write(format_summary(report))


def cmd_selfcheck(args, cfg: RunConfig) -> int:
    import pytest

    tests = Path(__file__).resolve().parents[2] / "tests"
    if not tests.is_dir():
        raise FileNotFoundError(f"test suite not found next to the package ({tests})")
    targets = [str(tests / n) for n in ("test_losses.py", "test_metrics.py", "test_nets.py", "test_ttgpr.py")]
    return 0 if pytest.main(["-q", *targets]) == 0 else 1


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # Subcommands repeat the global flags with suppressed defaults so a value
    # given before the subcommand is not reset by the subparser.
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (defaults when omitted)", **kw)
    common.add_argument("--seed", type=int, help="override the configuration seed", **kw)
    common.add_argument("--out", help="output file or directory", **kw)
    common.add_argument("--threads", type=int, help="torch intra-op threads (default 1)",
                        **(kw or {"default": 1}))
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mcrefine", parents=[_global_flags(False)],
                                 description="Synthetic microcalcification segmentation with test-time refinement")
    common = _global_flags(True)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write synthetic labeled pairs")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--backgrounds", help="directory of background patches")
    p.add_argument("--shifted", action="store_true", help="use the shifted test distribution")
    p.set_defaults(func=cmd_synth)

    for name, func in (("train-seg", cmd_train_seg), ("train-rf", cmd_train_rf)):
        p = sub.add_parser(name, parents=[common], help=f"{name.split('-')[1]} training")
        p.add_argument("--data", help="directory written by 'synth' (generated on the fly when omitted)")
        p.add_argument("--steps", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("sample", parents=[common], help="draw one image from the flow prior")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed-mask", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("refine", parents=[common], help="refine one patch")
    p.add_argument("--seg", required=True)
    p.add_argument("--rf", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out-prob", required=True)
    p.add_argument("--out-mask")
    p.add_argument("--trace")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", parents=[common], help="score predictions against masks")
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", parents=[common], help="full synthetic experiment")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("selfcheck", parents=[common], help="run the gradient and oracle suites")
    p.set_defaults(func=cmd_selfcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        return args.func(args, cfg) or 0
    except (ConfigError, UsageError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
