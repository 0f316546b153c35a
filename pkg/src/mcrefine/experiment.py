"""End-to-end desk-scale protocol: synthesize, train, refine, evaluate."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, dump_config
from .grid import read_pgm_mask, sigmoid_map
from .metrics import METRIC_NAMES, CaseMetrics, evaluate_case, evaluate_cohort
from .nets import segmentor_forward
from .rng import substream
from .train import (background_source, build_pairs, save_rf, save_segmentor, shifted_config,
                    train_rf, train_segmentor)
from .ttgpr import refine_batch

log = logging.getLogger(__name__)

REFINE_CHUNK = 50


@dataclass
class Report:
    rows: list[dict] = field(default_factory=list)
    cases: dict = field(default_factory=dict)

    def summary(self, test_set: str, method: str) -> dict[str, tuple[float, float]]:
        for r in self.rows:
            if r["set"] == test_set and r["method"] == method:
                return {k: (r[f"{k}_mean"], r[f"{k}_std"]) for k in METRIC_NAMES}
        raise KeyError((test_set, method))

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["set", "method", "cases"] + [f"{k}_{s}" for k in METRIC_NAMES for s in ("mean", "std")]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r[c] if isinstance(r[c], (str, int)) else f"{r[c]:.10f}" for c in cols])
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()


def case_rows(case_ids, cases: list[CaseMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case", *METRIC_NAMES, "degenerate"])
    for cid, c in zip(case_ids, cases):
        w.writerow([cid, *(f"{v:.10f}" for v in c.values()), int(c.degenerate)])
    cohort = evaluate_cohort(cases)
    w.writerow(["mean", *(f"{cohort[k][0]:.10f}" for k in METRIC_NAMES), ""])
    w.writerow(["std", *(f"{cohort[k][1]:.10f}" for k in METRIC_NAMES), ""])
    return buf.getvalue()


def _evaluate(probs, gts, threshold, roi):
    return [evaluate_case(p, g, threshold, roi) for p, g in zip(probs, gts)]


def run_experiment(cfg: RunConfig, out_dir=None) -> Report:
    torch.set_num_threads(1)
    seed = cfg.seed
    size = cfg.synth.patch_size
    roi = read_pgm_mask(cfg.eval.roi) if cfg.eval.roi else None

    bg = lambda name: background_source(seed, f"data/{name}", cfg.texture, size, cfg.data.backgrounds)
    # Test sets read the background directory with an offset so they do not
    # reuse the first training backgrounds.
    def test_bg(name):
        src = bg(name)
        return (lambda i: src(cfg.data.train_count + i)) if cfg.data.backgrounds else src

    train = build_pairs(seed, "synth/train", cfg.data.train_count, cfg.synth, bg("train"))
    tests = {
        "in_domain": build_pairs(seed, "synth/test", cfg.data.test_count, cfg.synth, test_bg("test")),
        "shifted": build_pairs(seed, "synth/shifted", cfg.data.test_count,
                               shifted_config(cfg.synth, cfg.shift.gain_scale, cfg.shift.blur_scale),
                               test_bg("shifted")),
    }
    log.info("built %d training pairs", len(train))

    seg = train_segmentor(cfg.seg, train, substream(seed, "train/seg"))
    rf_net, ema = train_rf(cfg.rf, train, substream(seed, "train/rf"))
    velocity = ema.module
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_segmentor(out / "segmentor.mcw1", seg)
        save_rf(out / "rf.mcw1", rf_net, ema)

    report = Report()
    for name, data in tests.items():
        init = sigmoid_map(segmentor_forward(seg, data.x))
        refined = np.empty_like(init)
        for lo in range(0, len(data), REFINE_CHUNK):
            hi = min(lo + REFINE_CHUNK, len(data))
            rngs = [substream(seed, f"refine/{name}/{i}") for i in range(lo, hi)]
            refined[lo:hi], _, _ = refine_batch(seg, velocity, data.x[lo:hi], cfg.ttgpr, rngs,
                                                cfg.rf.sampler())
        for method, probs in (("initializer", init), ("ttgpr", refined)):
            cases = _evaluate(probs, data.y, cfg.eval.threshold, roi)
            report.cases[(name, method)] = cases
            cohort = evaluate_cohort(cases)
            row = {"set": name, "method": method, "cases": len(cases)}
            for k in METRIC_NAMES:
                row[f"{k}_mean"], row[f"{k}_std"] = cohort[k]
            report.rows.append(row)
            if out_dir is not None:
                (out / f"cases_{name}_{method}.csv").write_text(case_rows(range(len(cases)), cases))
    if out_dir is not None:
        (out / "report.csv").write_text(report.to_csv())
        (out / "config.used").write_text(dump_config(cfg))
        (out / "summary.txt").write_text(format_summary(report))
    return report


def format_summary(report: Report) -> str:
    lines = []
    for r in report.rows:
        parts = [f"{k}={r[f'{k}_mean']:.3f}±{r[f'{k}_std']:.3f}" for k in METRIC_NAMES]
        lines.append(f"{r['set']:>9} {r['method']:>11}: " + " ".join(parts))
    lines.append(f"report sha256 {report.digest()}")
    return "\n".join(lines) + "\n"
