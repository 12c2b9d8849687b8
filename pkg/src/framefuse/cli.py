"""framefuse command line.

Every subcommand reads an optional JSON run config (--config) whose keys
are the training options plus the paths and blocks listed below; unknown keys
are rejected. --seed overrides the config seed and --out the output path.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import gates, numkernel, retrieval
from .calculators import Calculator
from .pipeline import config as cfgmod
from .pipeline.data import load_dataset, stack_frames, synth_dataset
from .pipeline.train import Checkpoint, evaluate, train

SYNTH_DEFAULTS = {
    "size": 64,
    "channels": 32,
    "n_min": 12,
    "n_max": 24,
    "separation": 4.0,
    "noise": 0.5,
    "irrelevant_max": 8,
    "distractor": 3.0,
    "heldout": 0,
}
GRAD_DEFAULTS = {"batch": 4, "frames": 6, "channels": 8, "max_entries": 16, "h": 1e-5, "tol": 1e-4}
RUN_KEYS = {
    "dataset": "manifest of the training/analysis dataset",
    "eval_dataset": "manifest evaluated by eval and sweep-ratio (defaults to dataset)",
    "checkpoint": "checkpoint read by eval and dump-weights",
    "variant": f"grad-check calculator variant, one of {sorted(cfgmod.VARIANTS)}",
    "synth": f"gen-data generator settings, defaults {SYNTH_DEFAULTS}",
    "grad_check": f"grad-check sizes and tolerances, defaults {GRAD_DEFAULTS}",
    "ratios": "sweep-ratio reduction ratios, default [2, 3, 4, 6]",
    "normalize": "analyze with cosine instead of dot-product similarity, default false",
}


class CliError(Exception):
    pass


def _train_keys():
    return {f.name for f in fields(cfgmod.TrainConfig)}


def load_run_config(path, seed=None) -> tuple[cfgmod.TrainConfig, dict]:
    doc = json.loads(Path(path).read_text()) if path else {}
    if not isinstance(doc, dict):
        raise CliError("run config must be a JSON object")
    unknown = set(doc) - _train_keys() - set(RUN_KEYS)
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    train_part = {k: v for k, v in doc.items() if k in _train_keys()}
    run = {k: v for k, v in doc.items() if k in RUN_KEYS}
    if seed is not None:
        train_part["seed"] = seed
    if "variant" in run:
        train_part = {**cfgmod.VARIANTS[_variant(run["variant"])], **train_part}
    return cfgmod.TrainConfig.from_dict(train_part), run


def _variant(name):
    if name not in cfgmod.VARIANTS:
        raise CliError(f"unknown variant {name!r}")
    return name


def _block(run, key, defaults):
    block = dict(run.get(key, {}))
    unknown = set(block) - set(defaults)
    if unknown:
        raise CliError(f"unknown {key} keys: {sorted(unknown)}")
    return {**defaults, **block}


def _require(run, key):
    if key not in run:
        raise CliError(f"config needs {key!r}")
    return Path(run[key])


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# -------------------------------------------------------------- subcommands


def cmd_gen_data(cfg, run, out):
    s = _block(run, "synth", SYNTH_DEFAULTS)
    out = Path(out or "data")
    total = s["size"] + s["heldout"]
    ds = synth_dataset(
        total,
        s["channels"],
        (s["n_min"], s["n_max"]),
        s["separation"],
        s["noise"],
        cfg.seed,
        (0, s["irrelevant_max"]),
        s["distractor"],
    )
    if s["heldout"]:
        ds.subset(range(s["size"])).save(out / "train")
        ds.subset(range(s["size"], total)).save(out / "heldout")
        print(out / "train" / "manifest.json")
        print(out / "heldout" / "manifest.json")
    else:
        print(ds.save(out))


def cmd_train(cfg, run, out):
    ds = load_dataset(_require(run, "dataset"))
    out = Path(out or "checkpoint.json")
    lines = []
    ckpt, history = train(cfg, ds, log=lambda r: lines.append(json.dumps(r, sort_keys=True)))
    ckpt.save(out)
    out.with_suffix(".log.jsonl").write_text("".join(line + "\n" for line in lines))
    last = next((r for r in reversed(history) if "T2V" in r), None)
    if last is not None:
        print(f"epochs={len(history)} T2V R@1={last['T2V']['R@1']:.1f} RSum={last['T2V']['RSum']:.1f}")
    print(out)


def cmd_eval(cfg, run, out):
    ckpt = Checkpoint.load(_require(run, "checkpoint"))
    ds = load_dataset(Path(run.get("eval_dataset") or _require(run, "dataset")))
    reports = evaluate(Calculator(ckpt.config), ckpt.params, ds)
    _emit(retrieval.reports_csv(reports), out)


def cmd_grad_check(cfg, run, out):
    g = _block(run, "grad_check", GRAD_DEFAULTS)
    cfg = cfgmod.TrainConfig.from_dict({**cfg.to_dict(), "frames": g["frames"], "channels": g["channels"]})
    report = grad_check_calculator(cfg, g["batch"], g["h"], g["tol"], g["max_entries"])
    rows = [[name, f"{err:.3e}"] for name, err in sorted(report.max_rel_error.items())]
    _emit(_rows_csv(["param", "max_rel_error"], rows), out)
    if not report.passed:
        name, idx, a, n = report.flagged[0]
        raise CliError(f"gradient mismatch in {name}{list(idx)}: analytic {a:.6g} vs numeric {n:.6g}")


def cmd_dump_weights(cfg, run, out):
    ckpt = Checkpoint.load(_require(run, "checkpoint"))
    c = ckpt.config
    if not (c.uses_excitation or c.uses_aggregation):
        raise CliError(f"no gates: calculator {c.calculator!r} has no excitation or aggregation stage")
    ds = load_dataset(_require(run, "dataset"))
    texts, videos = ds.batch(np.arange(len(ds)), c.frames)
    weights = Calculator(c).frame_weights(ckpt.params, texts, videos)
    rows = []
    for i, vid in enumerate(ds.ids):
        for stage in ("excitation", "aggregation"):
            if stage in weights:
                rows.extend([vid, j, stage, repr(float(w))] for j, w in enumerate(weights[stage][i]))
    _emit(_rows_csv(["video_id", "frame_index", "stage", "weight"], rows), out)


def cmd_analyze(cfg, run, out):
    ds = load_dataset(_require(run, "dataset"))
    normalize = bool(run.get("normalize", False))
    rows = []
    for vid, text, frames in zip(ds.ids, ds.captions, ds.frames):
        audit = retrieval.betweenness_audit(text, gates.FrameFeatures(frames), normalize=normalize)
        if not normalize and not audit.min_sim - 1e-12 <= audit.meanp_sim <= audit.max_sim + 1e-12:
            raise CliError(f"{vid}: mean-pooled similarity {audit.meanp_sim} outside [{audit.min_sim}, {audit.max_sim}]")
        rows.append([vid, len(frames), f"{audit.min_sim:.4f}", f"{audit.max_sim:.4f}", f"{audit.meanp_sim:.4f}"])
    _emit(_rows_csv(["video_id", "frame_len", "min_sim", "max_sim", "meanp_sim"], rows), out)


def cmd_sweep_ratio(cfg, run, out):
    ds = load_dataset(_require(run, "dataset"))
    held = load_dataset(Path(run["eval_dataset"])) if run.get("eval_dataset") else ds
    rows = []
    for r in run.get("ratios", [2, 3, 4, 6]):
        rc = cfgmod.TrainConfig.from_dict({**cfg.to_dict(), "r": int(r)})
        ckpt, _ = train(rc, ds)
        for direction, rep in evaluate(Calculator(rc), ckpt.params, held).items():
            rows.append([r] + rep.row(direction))
    _emit(_rows_csv(["ratio"] + retrieval.CSV_HEADER, rows), out)


def grad_check_calculator(cfg, batch=4, h=1e-5, tol=1e-4, max_entries=16):
    """Finite-difference check of the contrastive loss w.r.t. every calculator parameter."""
    rng = np.random.default_rng(cfg.seed)
    calc = Calculator(cfg)
    params = calc.init_params(rng)
    texts = rng.standard_normal((batch, cfg.channels))
    clips = [rng.standard_normal((int(rng.integers(max(1, cfg.frames // 2), cfg.frames + 1)), cfg.channels)) for _ in range(batch)]
    videos = stack_frames(clips, cfg.frames)
    return numkernel.grad_check(lambda P: calc.loss(P, texts, videos), params, h=h, tol=tol, max_entries=max_entries, seed=cfg.seed)


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate a synthetic paired dataset (FEAT files + manifest)"),
    "train": (cmd_train, "train a calculator; writes a checkpoint and <out>.log.jsonl"),
    "eval": (cmd_eval, "T2V and V2T retrieval metrics as CSV"),
    "grad-check": (cmd_grad_check, "finite-difference gradient check of a calculator"),
    "dump-weights": (cmd_dump_weights, "per-frame gate weights as CSV"),
    "analyze": (cmd_analyze, "per-video min/max/mean-pooled caption-frame similarity as CSV"),
    "sweep-ratio": (cmd_sweep_ratio, "retrain over reduction ratios and report each"),
}


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {k}: {v}" for k, v in RUN_KEYS.items())
    defaults = ", ".join(f"{f.name}={f.default!r}" for f in fields(cfgmod.TrainConfig))
    parser = argparse.ArgumentParser(
        prog="framefuse",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"run-config keys:\n{keys}\ntraining options (defaults): {defaults}\n"
        "FRAMEFUSE_THREADS caps evaluation threads (default: all cores).",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output path")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, run = load_run_config(args.config, args.seed)
        COMMANDS[args.command][0](cfg, run, args.out)
    except Exception as exc:  # single-line machine-parsable failure
        msg = " ".join(str(exc).split())
        print(f"framefuse: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
