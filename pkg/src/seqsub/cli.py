"""Command-line entry point.

Subcommands: synth | train | eval | segment | subsample | macs | framerate.
Config-driven commands read a JSON document; report-style commands write
delimited output (CSV/JSON) and, unless disabled, a matplotlib figure next
to it with the same stem. Exit codes: 0 success, 1 malformed config or I/O
problem, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis, harness, plots, segmenters
from .guidance import DistanceConfig, LossWeights
from .seqcore import (
    FormatError,
    load_frames,
    load_segmentation,
    save_frames,
    save_segmentation,
)
from .fixedsub import avg_pool, concat_pool


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; keep that for config errors
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def _take(doc: dict, context: str, allowed: dict):
    """Build kwargs from a config dict, rejecting unknown keys."""
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    out = {}
    for key, convert in allowed.items():
        if key in doc and doc[key] is not None:
            out[key] = convert(doc[key])
    return out


def _load_dataset(data_dir) -> list:
    data_dir = Path(data_dir)
    frame_files = sorted(data_dir.glob("*.sqp"))
    if not frame_files:
        raise ConfigError(f"no .sqp files in {data_dir}")
    data = []
    for fpath in frame_files:
        spath = fpath.with_suffix(".seg.json")
        if not spath.exists():
            raise ConfigError(f"missing segmentation {spath}")
        data.append((load_frames(fpath), load_segmentation(spath)))
    return data


def _student_config(doc: dict) -> harness.StudentConfig:
    kwargs = _take(doc, "student", {
        "subsampler": str, "stride": int, "upsampler": str,
        "encoder_layers": int, "use_attention": bool,
        "front_end_kernel": int, "cif_channels": int, "cif_kernel": int,
        "cif_activation": str, "head_layers": lambda v: tuple(int(x) for x in v),
        "seed": int,
    })
    return harness.StudentConfig(**kwargs)


def _train_config(doc: dict) -> harness.TrainConfig:
    kwargs = _take(doc, "train", {
        "steps": int, "batch_size": int, "lr": float, "beta1": float,
        "beta2": float, "eps": float, "topology": str,
        "card_divisor": float, "seed": int,
        "loss_weights": lambda v: LossWeights(**_take(v, "loss_weights", {
            "w_card": float, "w_seg": float, "w_frame": float})),
        "distance": lambda v: DistanceConfig(**_take(v, "distance", {
            "kind": str, "lambda_cos": float})),
    })
    return harness.TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    doc = _load_json(args.config)
    out_dir = Path(doc.pop("out_dir", "") or _fail("synth: out_dir is required"))
    cfg = harness.SynthConfig(**_take(doc, "synth", {
        "seed": int, "n_utterances": int, "min_len": int, "max_len": int,
        "dim": int, "mean_segment_len": float, "latent_dim": int,
        "noise_std": float, "frame_period_ms": float,
    }))
    data = harness.synth_data(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i, (frames, seg) in enumerate(data):
        stem = f"utt_{i:04d}"
        save_frames(frames, out_dir / f"{stem}.sqp")
        save_segmentation(seg, out_dir / f"{stem}.seg.json")
        names.append(stem)
    manifest = {
        "utterances": names,
        "ground_truth_rate_hz": harness.ground_truth_rate_hz(data),
    }
    _write_json(out_dir / "manifest.json", manifest)
    return 0


def cmd_train(args) -> int:
    doc = _load_json(args.config)
    for key in ("data_dir", "out_dir"):
        if key not in doc:
            _fail(f"train: {key} is required")
    data = _load_dataset(doc["data_dir"])
    out_dir = Path(doc["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    teacher_doc = doc.get("teacher", {})
    teacher = harness.ToyTeacher.create(
        seed=int(teacher_doc.get("seed", 0)),
        dim=data[0][0].dim,
        depth=int(teacher_doc.get("depth", 4)),
    )
    student_cfg = _student_config(doc.get("student", {}))
    train_cfg = _train_config(doc.get("train", {}))

    model = optimizer = None
    start_step = 0
    if doc.get("resume"):
        entries, start_step = harness.load_checkpoint(doc["resume"])
        model, optimizer = harness.restore(
            entries, start_step, student_cfg, data[0][0].dim, teacher.dim, train_cfg
        )
    model, records = harness.train(
        data, teacher, student_cfg, train_cfg,
        model=model, optimizer=optimizer, start_step=start_step,
    )

    with open(out_dir / "losses.jsonl", "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec) + "\n")
    opt = harness.Adam(model.params, train_cfg.lr) if optimizer is None else optimizer
    harness.save_checkpoint(out_dir / "checkpoint.ckp", model, opt, train_cfg.steps)
    _write_json(out_dir / "config.json", doc)
    if doc.get("plot", True):
        plots.plot_loss_curves(records, out_dir / "losses.png")
    return 0


def cmd_eval(args) -> int:
    doc = _load_json(args.config)
    for key in ("run_dir", "data_dir"):
        if key not in doc:
            _fail(f"eval: {key} is required")
    run_dir = Path(doc["run_dir"])
    run_doc = _load_json(run_dir / "config.json")
    data = _load_dataset(doc["data_dir"])
    teacher_doc = run_doc.get("teacher", {})
    teacher = harness.ToyTeacher.create(
        seed=int(teacher_doc.get("seed", 0)),
        dim=data[0][0].dim,
        depth=int(teacher_doc.get("depth", 4)),
    )
    student_cfg = _student_config(run_doc.get("student", {}))
    train_cfg = _train_config(run_doc.get("train", {}))
    entries, step = harness.load_checkpoint(run_dir / "checkpoint.ckp")
    model, _ = harness.restore(entries, step, student_cfg, data[0][0].dim,
                               teacher.dim, train_cfg)
    metrics = harness.evaluate(model, teacher, data, train_cfg)
    out = Path(doc.get("out", run_dir / "eval.json"))
    _write_json(out, metrics)
    if doc.get("plot", True):
        plots.plot_eval_metrics(metrics, out.with_suffix(".png"))
    return 0


def cmd_segment(args) -> int:
    doc = _load_json(args.config)
    if "out_dir" not in doc:
        _fail("segment: out_dir is required")
    if "inputs" in doc:
        inputs = [Path(p) for p in doc["inputs"]]
    elif "data_dir" in doc:
        inputs = sorted(Path(doc["data_dir"]).glob("*.sqp"))
    else:
        _fail("segment: needs 'inputs' or 'data_dir'")
    if not inputs:
        raise ConfigError("segment: no input files")
    sequences = [load_frames(p) for p in inputs]

    codebook = segmenters.kmeans_fit(
        sequences,
        n_clusters=int(doc.get("n_clusters", 8)),
        seed=int(doc.get("seed", 0)),
        iters=int(doc.get("kmeans_iters", 50)),
    )
    dists = [segmenters.centroid_distances(x, codebook) for x in sequences]

    if "target_rate_hz" in doc and doc["target_rate_hz"] is not None:
        cfg = segmenters.lambda_sweep_corpus(
            dists, float(doc["target_rate_hz"]), sequences[0].frame_period_ms
        )
    else:
        cfg = segmenters.DpConfig(lam=float(doc.get("lam", 0.0)))

    masks = doc.get("silence_masks")
    if masks is not None and len(masks) != len(inputs):
        raise ConfigError("segment: silence_masks must align with inputs")

    out_dir = Path(doc["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    total_segments = 0
    total_seconds = 0.0
    for i, (path, x, dist) in enumerate(zip(inputs, sequences, dists)):
        _, seg = segmenters.dp_smooth(dist, cfg)
        if masks is not None:
            seg = segmenters.overwrite_silence(seg, segmenters.read_silence_mask(masks[i]))
        save_segmentation(seg, out_dir / (path.stem + ".seg.json"))
        total_segments += seg.num_segments
        total_seconds += x.duration_s
    _write_json(out_dir / "summary.json", {
        "lam": cfg.lam,
        "achieved_rate_hz": total_segments / total_seconds,
        "n_inputs": len(inputs),
    })
    return 0


def cmd_subsample(args) -> int:
    x = load_frames(args.infile)
    if args.method == "avg":
        y = avg_pool(x, args.stride)
    else:
        y = concat_pool(x, args.stride)
    save_frames(y, args.out)
    return 0


def cmd_macs(args) -> int:
    doc = _load_json(args.model)
    layers, subsample_after = analysis.parse_model_doc(doc)
    strides = [int(s) for s in args.strides.split(",") if s]
    if not strides:
        _fail("macs: empty strides list")
    rows = analysis.macs_vs_frame_rate(layers, strides, args.length,
                                       subsample_after=subsample_after)
    analysis.write_csv(
        args.out,
        ["stride", "total_macs", "macs_c"],
        [[r["stride"], r["total_macs"], r["macs_c"]] for r in rows],
    )
    if args.plot:
        plots.plot_macs(rows, Path(args.out).with_suffix(".png"))
    return 0


def cmd_framerate(args) -> int:
    groups: dict[str, list[tuple[float, float]]] = {}
    order: list[str] = []
    with open(args.infile, "r", encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        if header != ["unit", "count", "duration_s"]:
            raise ConfigError(
                "framerate: input must have header 'unit,count,duration_s'"
            )
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ConfigError(f"framerate: line {lineno}: expected 3 fields")
            unit = parts[0]
            if unit not in groups:
                groups[unit] = []
                order.append(unit)
            groups[unit].append((float(parts[1]), float(parts[2])))
    if not order:
        raise ConfigError("framerate: no data rows")
    rows = [(unit, analysis.unit_frame_rate(groups[unit])) for unit in order]
    analysis.write_csv(args.out, ["unit", "frame_rate_hz"],
                       [[u, r] for u, r in rows])
    if args.plot:
        plots.plot_frame_rates(rows, Path(args.out).with_suffix(".png"))
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _fail(message: str):
    raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seqsub", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn in (("synth", cmd_synth), ("train", cmd_train),
                     ("eval", cmd_eval), ("segment", cmd_segment)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.set_defaults(fn=fn)

    p = sub.add_parser("subsample")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--method", choices=("avg", "cat"), required=True)
    p.add_argument("--stride", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_subsample)

    p = sub.add_parser("macs")
    p.add_argument("--model", required=True, help="model description JSON")
    p.add_argument("--len", dest="length", type=int, required=True)
    p.add_argument("--strides", required=True, help="comma-separated, e.g. 1,2,4,8")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(fn=cmd_macs)

    p = sub.add_parser("framerate")
    p.add_argument("--in", dest="infile", required=True,
                   help="CSV with header unit,count,duration_s")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(fn=cmd_framerate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except harness.DivergenceError as exc:
        print(f"seqsub: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, FormatError, ValueError, KeyError, OSError) as exc:
        print(f"seqsub: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
