"""Command-line surface wiring the modules into reproducible experiments.

Exit codes: 0 ok, 1 config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import time
from dataclasses import asdict
from typing import Optional, Sequence

import numpy as np

from . import diffusion, evalkit, synthdata
from .config import ConfigError, dumps_config, loads_config
from .denoiser import (ConditionBundle, Denoiser, DenoiserConfig, LossConfig,
                       TrainingDiverged, apply_feature_dropout, load_checkpoint, train)
from .diffusion import DiffusionConfig
from .events import (COMPONENT_NAMES, NoteList, REMAP_PRESETS, midi_export,
                     notes_from_grid, remap)
from .synthdata import ClipRecord, load_dataset, make_dataset

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


def worker_limit() -> int:
    """Worker cap from N2N_THREADS (data synthesis / per-clip evaluation)."""
    value = os.environ.get("N2N_THREADS", "")
    try:
        return max(1, int(value)) if value else max(1, os.cpu_count() or 1)
    except ValueError:
        return 1


def _write_atomic(path: str, data: bytes):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# --- run configuration -------------------------------------------------------


def load_run_config(path: Optional[str]) -> dict:
    sections = {}
    if path:
        with open(path) as fh:
            sections = loads_config(fh.read())
    den = DenoiserConfig(**sections.get("denoiser", {}))
    diff = DiffusionConfig(**sections.get("diffusion", {}))
    loss = LossConfig(**sections.get("loss", {}))
    trainsec = {"epochs": 20, "batch_size": 8, "lr": 3e-4, "lr_final": None,
                "seed": 0, "checkpoint_every": 5}
    trainsec.update(sections.get("train", {}))
    return {"denoiser": den, "diffusion": diff, "loss": loss, "train": trainsec}


def _provenance(run_cfg: dict, extra: Optional[dict] = None) -> str:
    sections = {
        "denoiser": asdict(run_cfg["denoiser"]),
        "diffusion": asdict(run_cfg["diffusion"]),
        "loss": asdict(run_cfg["loss"]),
        "train": dict(run_cfg["train"]),
    }
    if extra:
        sections["run"] = extra
    return dumps_config(sections)


# --- condition plumbing ---------------------------------------------------------


def _condition_for(record: ClipRecord, features: str) -> ConditionBundle:
    cond = ConditionBundle.full(record.spec_features, record.sem_features)
    if features == "spec":
        cond.sem_valid[:] = False
    elif features == "sem":
        cond.spec_valid[:] = False
    elif features != "both":
        raise ConfigError(f"unknown feature selection {features!r}")
    return cond


def _empty_condition(model: Denoiser) -> ConditionBundle:
    duration = model.cfg.n_frames / 100.0
    t_sem = max(1, int(duration * synthdata.SEM_FRAME_RATE))
    cond = ConditionBundle(
        spec_features=np.zeros((model.cfg.n_frames, model.cfg.spec_bins)),
        sem_features=np.zeros((t_sem, model.cfg.sem_dim)),
        spec_valid=np.zeros(model.cfg.n_frames, dtype=bool),
        sem_valid=np.zeros(t_sem, dtype=bool),
    )
    return cond


def transcribe_grid(model: Denoiser, cond: ConditionBundle, n_steps: int,
                    rng: np.random.Generator, method: str = "restart") -> np.ndarray:
    shape = (model.cfg.n_frames, model.cfg.n_components, 2)
    return diffusion.sample(model.denoise, cond, n_steps, rng, model.diff_cfg,
                            shape, method=method)


# --- piano-roll / plot SVG --------------------------------------------------------


def piano_roll_svg(notes: NoteList, duration: float, n_components: int = 7,
                   width: int = 800, lane_height: int = 24) -> str:
    height = n_components * lane_height
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 20}">',
        f'<rect width="{width}" height="{height}" fill="#fafafa"/>',
    ]
    for c in range(n_components):
        y = c * lane_height
        parts.append(f'<line x1="0" y1="{y}" x2="{width}" y2="{y}" stroke="#ddd"/>')
        name = COMPONENT_NAMES[c] if c < len(COMPONENT_NAMES) else str(c)
        parts.append(f'<text x="2" y="{y + 14}" font-size="10" fill="#888">{name}</text>')
    for note in notes:
        x = note.time / duration * width
        y = note.component * lane_height + 2
        opacity = max(0.15, note.velocity / 127.0)
        parts.append(
            f'<rect x="{x:.1f}" y="{y}" width="3" height="{lane_height - 4}" '
            f'fill="#1f77b4" opacity="{opacity:.3f}"/>')
    parts.append("</svg>")
    return "\n".join(parts)


def line_plot_svg(xs: Sequence[float], series: dict[str, Sequence[float]],
                  width: int = 640, height: int = 400) -> str:
    margin = 50
    all_y = [y for ys in series.values() for y in ys]
    y_lo, y_hi = min(all_y), max(all_y)
    if y_hi - y_lo < 1e-12:
        y_hi = y_lo + 1.0
    x_lo, x_hi = min(xs), max(xs)
    if x_hi - x_lo < 1e-12:
        x_hi = x_lo + 1.0

    def px(x):
        return margin + (x - x_lo) / (x_hi - x_lo) * (width - 2 * margin)

    def py(y):
        return height - margin - (y - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for i, (label, ys) in enumerate(series.items()):
        color = colors[i % len(colors)]
        points = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys))
        parts.append(f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - margin + 4}" y="{20 + 14 * i}" font-size="11" '
                     f'fill="{color}">{label}</text>')
    for x in xs:
        parts.append(f'<text x="{px(x):.0f}" y="{height - margin + 14}" font-size="10" '
                     f'text-anchor="middle">{x:g}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


# --- subcommands ----------------------------------------------------------------------


def cmd_synth(args) -> int:
    make_dataset(args.n_clips, args.seed, args.out, timbre_jitter=args.timbre_jitter)
    print(f"wrote {args.n_clips} clips to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run_cfg = load_run_config(args.config)
    trainsec = run_cfg["train"]
    if args.seed is not None:
        trainsec["seed"] = args.seed
    if args.loss:
        run_cfg["loss"].objective = args.loss
    records = [r for r in load_dataset(args.data) if r.split == "train"]
    if not records:
        print("no training clips found", file=sys.stderr)
        return EXIT_DATA
    model = Denoiser(run_cfg["denoiser"], run_cfg["diffusion"], run_cfg["loss"],
                     seed=trainsec["seed"], lr=trainsec["lr"])
    if args.features == "spec":
        model.cfg.p_complete_sem = 1.0
    elif args.features == "sem":
        model.cfg.p_complete_spec = 1.0
    log: list[str] = []
    try:
        train(model, records, epochs=trainsec["epochs"],
              batch_size=trainsec["batch_size"],
              checkpoint_dir=args.out, checkpoint_every=trainsec["checkpoint_every"],
              lr_final=trainsec["lr_final"], log=log)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    model.save(os.path.join(args.out, "final.dsck"))
    _write_atomic(os.path.join(args.out, "loss.csv"), ("\n".join(log) + "\n").encode())
    _write_atomic(os.path.join(args.out, "run.cfg"),
                  _provenance(run_cfg, {"data": args.data, "features": args.features}).encode())
    print(f"trained {model.step} steps; checkpoint at {args.out}/final.dsck")
    return EXIT_OK


def _load_model(path: str) -> Denoiser:
    return load_checkpoint(path)


def _emit_transcription(out_dir: str, stem: str, notes: NoteList, duration: float,
                        remap_name: str = "none"):
    if remap_name != "none":
        notes = remap(notes, REMAP_PRESETS[remap_name])
    base = os.path.join(out_dir, stem)
    _write_atomic(base + ".txt", notes.to_text().encode())
    _write_atomic(base + ".mid", midi_export(notes))
    _write_atomic(base + ".svg", piano_roll_svg(notes, duration).encode())


def cmd_transcribe(args) -> int:
    model = _load_model(args.checkpoint)
    records = load_dataset(args.data)
    if args.split:
        records = [r for r in records if r.split == args.split]
    if not records:
        print("no clips to transcribe", file=sys.stderr)
        return EXIT_DATA
    rng = np.random.default_rng(args.seed)
    duration = model.cfg.n_frames / 100.0
    for record in records:
        cond = _condition_for(record, args.features)
        grid = transcribe_grid(model, cond, args.steps, rng)
        notes = notes_from_grid(grid_to_obj(grid))
        _emit_transcription(args.out, f"{record.index:04d}", notes, duration, args.remap)
    print(f"transcribed {len(records)} clips to {args.out}")
    return EXIT_OK


def grid_to_obj(values: np.ndarray):
    from .events import Grid
    return Grid(values)


def cmd_inpaint(args) -> int:
    model = _load_model(args.checkpoint)
    records = [r for r in load_dataset(args.data) if r.index == args.clip]
    if not records:
        print(f"clip {args.clip} not found", file=sys.stderr)
        return EXIT_DATA
    record = records[0]
    duration = model.cfg.n_frames / 100.0
    start, end = args.mask
    cond = _condition_for(record, args.features)
    cond = apply_feature_dropout(cond, np.random.default_rng(0), model.cfg,
                                 "inpaint", mask_seconds=(start, end), duration=duration)
    rng = np.random.default_rng(args.seed)
    grid = transcribe_grid(model, cond, args.steps, rng)
    notes = notes_from_grid(grid_to_obj(grid))
    _emit_transcription(args.out, f"inpaint_{record.index:04d}", notes, duration)
    print(f"inpainted clip {record.index} with mask [{start}, {end})")
    return EXIT_OK


def cmd_generate(args) -> int:
    model = _load_model(args.checkpoint)
    cond = _empty_condition(model)
    rng = np.random.default_rng(args.seed)
    grid = transcribe_grid(model, cond, args.steps, rng)
    notes = notes_from_grid(grid_to_obj(grid))
    duration = model.cfg.n_frames / 100.0
    _emit_transcription(args.out, "generated", notes, duration)
    print(f"generated {len(notes)} events unconditionally")
    return EXIT_OK


def _read_notes_dir(path: str) -> dict[str, NoteList]:
    out = {}
    if os.path.isdir(os.path.join(path, "clips")):
        for r in load_dataset(path):
            out[f"{r.index:04d}"] = r.notes
        return out
    for name in sorted(os.listdir(path)):
        if name.endswith(".txt"):
            stem = name[:-4].replace(".notes", "")
            with open(os.path.join(path, name)) as fh:
                out[stem] = NoteList.from_text(fh.read())
    return out


def cmd_evaluate(args) -> int:
    ref = _read_notes_dir(args.ref)
    est = _read_notes_dir(args.est)
    keys = sorted(set(ref) & set(est))
    if not keys or len(ref) != len(est):
        print(f"clip mismatch: {len(ref)} ref vs {len(est)} est", file=sys.stderr)
        return EXIT_DATA
    cmap = REMAP_PRESETS[args.remap] if args.remap != "none" else None
    total, per_clip = evalkit.evaluate([ref[k] for k in keys], [est[k] for k in keys],
                                       component_map=cmap)
    if args.out:
        _write_atomic(os.path.join(args.out, "scores.csv"),
                      evalkit.scores_csv(per_clip).encode())
        _write_atomic(os.path.join(args.out, "summary.txt"),
                      evalkit.summary_text(total, COMPONENT_NAMES).encode())
    print(evalkit.summary_text(total, COMPONENT_NAMES))
    return EXIT_OK


def cmd_sweep(args) -> int:
    model = _load_model(args.checkpoint)
    records = [r for r in load_dataset(args.data) if r.split == args.split]
    if not records:
        print("no clips for sweep", file=sys.stderr)
        return EXIT_DATA
    steps_list = [int(s) for s in args.steps_list.split(",")]
    rows = [("steps", "onset_f1", "velocity_f1", "wall_clock_s")]
    f1s, vf1s, times = [], [], []
    for n_steps in steps_list:
        rng = np.random.default_rng(args.seed)
        started = time.perf_counter()
        est = []
        for record in records:
            cond = _condition_for(record, args.features)
            grid = transcribe_grid(model, cond, n_steps, rng)
            est.append(notes_from_grid(grid_to_obj(grid)))
        elapsed = time.perf_counter() - started
        refs = [r.notes for r in records]
        onset, _ = evalkit.evaluate(refs, est)
        vel, _ = evalkit.evaluate(refs, est, velocity=True)
        rows.append((n_steps, f"{onset.f1:.4f}", f"{vel.f1:.4f}", f"{elapsed:.3f}"))
        f1s.append(onset.f1)
        vf1s.append(vel.f1)
        times.append(elapsed)
        print(f"steps={n_steps}: onset F1 {onset.f1:.4f}, velocity F1 {vel.f1:.4f}, "
              f"{elapsed:.2f}s")
    buf = io.StringIO()
    csv.writer(buf).writerows(rows)
    _write_atomic(os.path.join(args.out, "sweep.csv"), buf.getvalue().encode())
    svg = line_plot_svg([float(s) for s in steps_list],
                        {"onset_f1": f1s, "velocity_f1": vf1s})
    _write_atomic(os.path.join(args.out, "sweep.svg"), svg.encode())
    return EXIT_OK


def cmd_ablate(args) -> int:
    run_cfg = load_run_config(args.config)
    records = load_dataset(args.data)
    train_recs = [r for r in records if r.split == "train"]
    test_recs = [r for r in records if r.split == "test"]
    if not train_recs or not test_recs:
        print("ablation needs train and test splits", file=sys.stderr)
        return EXIT_DATA
    cells = [("spec", "mse"), ("spec", "ph"), ("spec", "aph"),
             ("sem", "aph"), ("both", "aph")]
    rows = [("features", "loss", "onset_f1", "velocity_f1")]
    for features, objective in cells:
        loss_cfg = LossConfig(objective=objective, c_max=run_cfg["loss"].c_max,
                              c_min=run_cfg["loss"].c_min, norm=run_cfg["loss"].norm)
        model = Denoiser(run_cfg["denoiser"], run_cfg["diffusion"], loss_cfg,
                         seed=args.seed, lr=run_cfg["train"]["lr"])
        if features == "spec":
            model.cfg.p_complete_sem = 1.0
        elif features == "sem":
            model.cfg.p_complete_spec = 1.0
        try:
            train(model, train_recs, epochs=run_cfg["train"]["epochs"],
                  batch_size=run_cfg["train"]["batch_size"],
                  lr_final=run_cfg["train"]["lr_final"])
        except TrainingDiverged as exc:
            print(f"ablation cell ({features}, {objective}) diverged: {exc}",
                  file=sys.stderr)
            return EXIT_NUMERIC
        rng = np.random.default_rng(args.seed)
        est = []
        for record in test_recs:
            cond = _condition_for(record, features)
            grid = transcribe_grid(model, cond, args.steps, rng)
            est.append(notes_from_grid(grid_to_obj(grid)))
        refs = [r.notes for r in test_recs]
        onset, _ = evalkit.evaluate(refs, est)
        vel, _ = evalkit.evaluate(refs, est, velocity=True)
        rows.append((features, objective, f"{onset.f1:.4f}", f"{vel.f1:.4f}"))
        print(f"{features:>4} + {objective:<4}: onset F1 {onset.f1:.4f}, "
              f"velocity F1 {vel.f1:.4f}")
    buf = io.StringIO()
    csv.writer(buf).writerows(rows)
    _write_atomic(os.path.join(args.out, "ablation.csv"), buf.getvalue().encode())
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drumscribe",
                                     description="diffusion drum transcription toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, steps_default=10):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--steps", type=int, default=steps_default)
        p.add_argument("--out", default="out")
        p.add_argument("--features", choices=["spec", "sem", "both"], default="both")

    p = sub.add_parser("synth", help="build a synthetic corpus")
    p.add_argument("--n-clips", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="data")
    p.add_argument("--timbre-jitter", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a denoiser")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="runs")
    p.add_argument("--seed", type=int)
    p.add_argument("--loss", choices=["mse", "ph", "aph"])
    p.add_argument("--features", choices=["spec", "sem", "both"], default="both")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transcribe", help="sample transcriptions for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="")
    p.add_argument("--remap", choices=["none", "5", "3"], default="none")
    common(p)
    p.set_defaults(func=cmd_transcribe)

    p = sub.add_parser("inpaint", help="transcribe with a masked feature interval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--clip", type=int, required=True)
    p.add_argument("--mask", type=float, nargs=2, metavar=("START", "END"), required=True)
    common(p)
    p.set_defaults(func=cmd_inpaint)

    p = sub.add_parser("generate", help="unconditional generation")
    p.add_argument("--checkpoint", required=True)
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score est against ref")
    p.add_argument("ref")
    p.add_argument("est")
    p.add_argument("--remap", choices=["none", "5", "3"], default="none")
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="F1 / wall-clock against sampling step count")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--steps-list", default="1,2,5,10")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="feature x loss ablation grid")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
