"""Command-line entry point: ``spikedet <command> [options]``.

Settings come from built-in defaults, then an optional INI file
(``--config``), then flags. Every run writes ``run.json`` into its output
directory holding the fully resolved settings and SHA-256 digests of the
files it produced; ``spikedet rerun run.json --out DIR`` repeats it.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw

from . import __version__
from .errors import ConfigurationError, SpikedetError
from .experiments import GAMMA_GRID, SIGMA_GRID, discover_all, evaluate_model, noise_curve, novelty_grid, run_inference, sweep_t
from .noise import NoiseSpec
from .pipeline import ModelConfig, PipelineConfig, with_times
from .toyscenes import SceneSpec, build_dataset, load_dataset
from .training import TrainRecipe, fit, load_checkpoint, save_checkpoint

log = logging.getLogger("spikedet")

ENV_OUT = "SPIKEDET_OUT"
RUN_FILE = "run.json"
RUN_FORMAT = "spikedet-run"
RUN_VERSION = 1
TABLE_HEADER = "# spikedet-table {name} v1"

_MODEL_KEYS = ("trunk_channels", "pyramid_channels", "pyramid_stages", "rpn_hidden", "det_hidden", "spiking")
_PIPELINE_KEYS = ("t_rpn", "t_det", "k1", "k2", "nms_rpn_iou", "nms_det_iou", "score_thresh", "roi_size", "canonical_size", "min_box_size")


# -- settings ------------------------------------------------------------------

def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _defaults(command: str) -> dict[str, dict]:
    pc, mc = PipelineConfig(), ModelConfig()
    inputs = {"checkpoint": "", "data": ""}
    if command == "generate":
        return {
            "scenes": SceneSpec().to_dict(),
            "data": {"n_train": 500, "n_val": 100, "seed": 0},
            "run": {"threads": 1},
        }
    if command == "train":
        return {
            "inputs": {"data": ""},
            "model": {k: _plain(getattr(mc, k)) for k in _MODEL_KEYS},
            "pipeline": {k: getattr(pc, k) for k in _PIPELINE_KEYS},
            "recipe": TrainRecipe().to_dict(),
            "run": {"threads": 1},
        }
    times = {"t_rpn": 0, "t_det": 0}  # 0 keeps the checkpoint's values
    if command == "eval":
        return {
            "inputs": inputs,
            "pipeline": times,
            "eval": {"limit": 0},
            "noise": {"kind": "", "sigmas": list(SIGMA_GRID), "intensities": ["light", "heavy"], "seed": 0},
            "run": {"threads": 1},
        }
    if command == "sweep-t":
        return {"inputs": inputs, "sweep": {"t_rpn": [4, 6, 8, 10, 12], "t_det": [16]}, "eval": {"limit": 0}, "run": {"threads": 1}}
    if command == "discover":
        return {
            "inputs": inputs,
            "pipeline": times,
            "novelty": {"gamma_q": 0.005, "gammas": list(GAMMA_GRID), "iou_thr": 0.5, "overlays": 8},
            "eval": {"limit": 0},
            "run": {"threads": 1},
        }
    if command == "energy-report":
        return {"inputs": inputs, "pipeline": times, "eval": {"limit": 0}, "run": {"threads": 1}}
    raise ConfigurationError(f"unknown command {command!r}")


def coerce(text: str, default):
    """Parse an INI/flag string using the type of ``default``."""
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, list):
        proto = default[0] if default else ""
        return [coerce(x, proto) for x in text.split(",") if x.strip()] if text else []
    return text


def read_config(path: str | Path, command: str) -> dict[str, dict]:
    """Overlay an INI file on the command's defaults; unknown keys are errors."""
    cfg = _defaults(command)
    parser = configparser.ConfigParser(interpolation=None)
    if not parser.read(path):
        raise ConfigurationError(f"cannot read config file {path}")
    for section in parser.sections():
        if section not in cfg:
            continue  # sections for other commands may share one file
        for key, value in parser.items(section):
            if key not in cfg[section]:
                raise ConfigurationError(f"{path}: unknown key [{section}] {key}")
            cfg[section][key] = coerce(value, cfg[section][key])
    return cfg


def resolve(args: argparse.Namespace) -> dict[str, dict]:
    cfg = read_config(args.config, args.command) if args.config else _defaults(args.command)
    for dest, (section, key) in _FLAG_MAP.items():
        value = getattr(args, dest, None)
        if value is None or section not in cfg:
            continue
        if isinstance(value, str) and not isinstance(cfg[section].get(key), str):
            value = coerce(value, cfg[section][key])
        cfg[section][key] = value
    return cfg


# flag dest -> (section, key)
_FLAG_MAP = {
    "threads": ("run", "threads"),
    "n_train": ("data", "n_train"),
    "n_val": ("data", "n_val"),
    "seed": ("data", "seed"),
    "image_size": ("scenes", "image_size"),
    "unknown_prob": ("scenes", "unknown_prob"),
    "data": ("inputs", "data"),
    "checkpoint": ("inputs", "checkpoint"),
    "spiking": ("model", "spiking"),
    "epochs": ("recipe", "epochs"),
    "finetune_epochs": ("recipe", "finetune_epochs"),
    "lr": ("recipe", "learning_rate"),
    "batch_size": ("recipe", "batch_size"),
    "optimizer": ("recipe", "optimizer"),
    "rate_penalty": ("recipe", "rate_penalty"),
    "pretrain_epochs": ("recipe", "pretrain_epochs"),
    "pretrain_scenes": ("recipe", "pretrain_scenes"),
    "train_seed": ("recipe", "seed"),
    "t_rpn": ("pipeline", "t_rpn"),
    "t_det": ("pipeline", "t_det"),
    "limit": ("eval", "limit"),
    "noise": ("noise", "kind"),
    "sigmas": ("noise", "sigmas"),
    "intensities": ("noise", "intensities"),
    "noise_seed": ("noise", "seed"),
    "t_rpn_list": ("sweep", "t_rpn"),
    "t_det_list": ("sweep", "t_det"),
    "gamma_q": ("novelty", "gamma_q"),
    "gammas": ("novelty", "gammas"),
    "overlays": ("novelty", "overlays"),
}


# -- output helpers ---------------------------------------------------------------

def format_table(name: str, header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(TABLE_HEADER.format(name=name) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def read_table(path: str | Path) -> tuple[str, list[dict]]:
    """Parse a table written by this tool; numeric cells come back as int/float."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# spikedet-table "):
        raise ConfigurationError(f"{path}: missing table header")
    name = lines[0].split()[2]
    rows = []
    for row in csv.DictReader(lines[1:]):
        parsed = {}
        for k, v in row.items():
            try:
                parsed[k] = int(v)
            except ValueError:
                try:
                    parsed[k] = float(v)
                except ValueError:
                    parsed[k] = v
        rows.append(parsed)
    return name, rows


def _with_header(name: str, csv_text: str) -> str:
    return TABLE_HEADER.format(name=name) + "\n" + csv_text


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _prepare_out(out: str | None, command: str, overwrite: bool) -> Path:
    if out is None:
        root = os.environ.get(ENV_OUT)
        if not root:
            raise ConfigurationError(f"pass --out or set {ENV_OUT}")
        out = str(Path(root) / command)
    path = Path(out)
    if path.exists() and any(path.iterdir()) and not overwrite:
        raise FileExistsError(f"{path} is not empty; pass --overwrite to replace its contents")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(out: Path, command: str, cfg: dict) -> Path:
    outputs = {
        str(p.relative_to(out)): _digest(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != RUN_FILE
    }
    manifest = {
        "format": RUN_FORMAT,
        "version": RUN_VERSION,
        "artifact_version": __version__,
        "command": command,
        "config": cfg,
        "outputs": outputs,
    }
    path = out / RUN_FILE
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _limited(scenes, limit: int):
    return scenes[:limit] if limit and limit > 0 else scenes


def _load_model(cfg: dict):
    ck = cfg["inputs"]["checkpoint"]
    if not ck:
        raise ConfigurationError("a checkpoint is required (--checkpoint)")
    model, pc, meta = load_checkpoint(ck)
    model.eval()
    t = cfg.get("pipeline", {})
    pc = with_times(pc, t.get("t_rpn") or None, t.get("t_det") or None)
    return model, pc


def _load_data(cfg: dict, model=None):
    path = cfg["inputs"]["data"]
    if not path:
        raise ConfigurationError("a dataset directory is required (--data)")
    ds = load_dataset(path)
    if model is not None and ds.num_classes != model.num_classes:
        raise ConfigurationError(f"checkpoint has K={model.num_classes} classes but dataset {path} has K={ds.num_classes}")
    return ds


def _class_names(spec: SceneSpec) -> dict[int, str]:
    return {i + 1: n for i, n in enumerate(spec.known_classes)}


# -- commands -------------------------------------------------------------------

def cmd_generate(cfg: dict, out: Path) -> dict:
    spec = SceneSpec.from_dict(cfg["scenes"])
    d = cfg["data"]
    build_dataset(spec, d["n_train"], d["n_val"], d["seed"], out, overwrite=True)
    print(out / "manifest.json")
    return {"manifest": str(out / "manifest.json")}


def cmd_train(cfg: dict, out: Path) -> dict:
    ds = _load_data(cfg)
    mc = ModelConfig.from_dict(cfg["model"])
    pc = PipelineConfig.from_dict({**cfg["pipeline"], "num_classes": ds.num_classes})
    recipe = TrainRecipe(**cfg["recipe"])
    model, history = fit(ds.train, ds.spec, mc, pc, recipe)
    meta = {"recipe": recipe.to_dict(), "dataset": ds.manifest.get("seed"), "class_names": ds.spec.known_classes}
    save_checkpoint(out / "model.ckpt", model, pc, meta)
    rows = [(h["phase"], h["epoch"], float(h["loss"])) for h in history if h["phase"] != "pretrain"]
    (out / "history.csv").write_text(format_table("history", ("phase", "epoch", "loss"), rows))
    pre = [(h["epoch"], float(h["loss"])) for h in history if h["phase"] == "pretrain"]
    (out / "pretrain.csv").write_text(format_table("pretrain", ("epoch", "loss"), pre))
    print(out / "model.ckpt")
    return {"checkpoint": str(out / "model.ckpt")}


def _summary_row(run) -> list:
    r, e = run.result, run.energy
    return [r.map_50, r.map_50_95, r.mar_50, e.delta_e, e.delta_e_spiking, e.e_ann, e.e_snn]


SUMMARY_COLUMNS = ("map_50", "map_50_95", "mar_50", "delta_e", "delta_e_spiking", "e_ann_pj", "e_snn_pj")


def cmd_eval(cfg: dict, out: Path) -> dict:
    model, pc = _load_model(cfg)
    ds = _load_data(cfg, model)
    scenes = _limited(ds.val, cfg["eval"]["limit"])
    run = evaluate_model(model, scenes, pc, class_names=_class_names(ds.spec))
    (out / "metrics.json").write_text(run.result.to_json() + "\n")
    (out / "metrics.csv").write_text(_with_header("per-class-ap", run.result.table()))
    (out / "energy.json").write_text(run.energy.to_json() + "\n")
    (out / "energy.csv").write_text(_with_header("energy", run.energy.table()))
    (out / "summary.csv").write_text(format_table("summary", SUMMARY_COLUMNS, [_summary_row(run)]))
    (out / "predictions.jsonl").write_text("".join(o.to_json() + "\n" for o in run.outputs))
    nz = cfg["noise"]
    if nz["kind"]:
        base = NoiseSpec(nz["kind"], seed=nz["seed"])
        sigmas = nz["sigmas"] if nz["kind"] == "gaussian" else []
        intens = [i for i in nz["intensities"] if i] if nz["kind"] == "rain" else []
        points = noise_curve(model, scenes, pc, base, sigmas, intens)
        rows = [(p.kind, p.level, p.map_50, p.relative_decrease) for p in points]
        (out / "noise.csv").write_text(format_table("noise", ("kind", "level", "map_50", "relative_decrease"), rows))
    print(_with_header("summary", ",".join(SUMMARY_COLUMNS) + "\n" + ",".join(repr(float(x)) for x in _summary_row(run))))
    return {}


def cmd_sweep_t(cfg: dict, out: Path) -> dict:
    model, pc = _load_model(cfg)
    ds = _load_data(cfg, model)
    scenes = _limited(ds.val, cfg["eval"]["limit"])
    points = sweep_t(model, scenes, pc, cfg["sweep"]["t_rpn"], cfg["sweep"]["t_det"])
    rows = [(p.t_rpn, p.t_det, 100 * p.delta_e, 100 * p.map_50, 100 * p.delta_e_spiking, p.e_snn, p.e_snn_rpn) for p in points]
    text = format_table(
        "sweep-t", ("t_rpn", "t_det", "delta_e_pct", "map_50_pct", "delta_e_spiking_pct", "e_snn_pj", "e_snn_rpn_pj"), rows
    )
    (out / "sweep.csv").write_text(text)
    print(text, end="")
    return {}


def render_overlay(image: np.ndarray, known_boxes, novel_boxes, scale: int = 4) -> Image.Image:
    """Known-class detections in green, discovered candidates in red."""
    im = Image.fromarray(image, "RGB").resize((image.shape[1] * scale, image.shape[0] * scale), Image.Resampling.NEAREST)
    draw = ImageDraw.Draw(im)
    for boxes, colour in ((known_boxes, (0, 255, 0)), (novel_boxes, (255, 0, 0))):
        for b in boxes:
            draw.rectangle([b[0] * scale, b[1] * scale, b[2] * scale - 1, b[3] * scale - 1], outline=colour, width=2)
    return im


def cmd_discover(cfg: dict, out: Path) -> dict:
    model, pc = _load_model(cfg)
    ds = _load_data(cfg, model)
    scenes = _limited(ds.val, cfg["eval"]["limit"])
    nv = cfg["novelty"]
    outputs, _ = run_inference(model, [s.image for s in scenes], pc, [s.annotation.scene_id for s in scenes])
    cands = discover_all(outputs, nv["gamma_q"])
    rows = [
        (o.scene_id, *[float(x) for x in c.box.as_tuple()], c.q, c.support_count)
        for o, cs in zip(outputs, cands)
        for c in cs
    ]
    (out / "candidates.csv").write_text(format_table("candidates", ("scene_id", "x1", "y1", "x2", "y2", "q", "support"), rows))
    grid = novelty_grid(outputs, scenes, sorted(set(nv["gammas"]) | {nv["gamma_q"]}), nv["iou_thr"])
    (out / "novelty.csv").write_text(
        format_table("novelty", ("gamma_q", "recall", "precision", "candidates"), [(p.gamma_q, p.recall, p.precision, p.candidates) for p in grid])
    )
    if nv["overlays"] > 0:
        (out / "overlays").mkdir(exist_ok=True)
        for s, o, cs in list(zip(scenes, outputs, cands))[: nv["overlays"]]:
            im = render_overlay(s.image, [d.box.as_tuple() for d in o.known], [c.box.as_tuple() for c in cs])
            im.save(out / "overlays" / f"{o.scene_id}.png")
    chosen = next(p for p in grid if p.gamma_q == nv["gamma_q"])
    print(f"gamma_q={chosen.gamma_q} recall={chosen.recall:.4f} precision={chosen.precision:.4f} candidates={chosen.candidates}")
    return {}


def cmd_energy_report(cfg: dict, out: Path) -> dict:
    model, pc = _load_model(cfg)
    ds = _load_data(cfg, model)
    run = evaluate_model(model, _limited(ds.val, cfg["eval"]["limit"]), pc)
    (out / "energy.json").write_text(run.energy.to_json() + "\n")
    (out / "energy.csv").write_text(_with_header("energy", run.energy.table()))
    e = run.energy
    print(f"E_ANN={e.e_ann:.6g} pJ E_SNN={e.e_snn:.6g} pJ delta_E={e.delta_e:.4f} delta_E_spiking={e.delta_e_spiking:.4f}")
    return {}


COMMANDS: dict[str, Callable[[dict, Path], dict]] = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-t": cmd_sweep_t,
    "discover": cmd_discover,
    "energy-report": cmd_energy_report,
}


def execute(command: str, cfg: dict, out: str | Path | None, overwrite: bool = False) -> Path:
    """Run one command with fully resolved settings and write its manifest."""
    if command not in COMMANDS:
        raise ConfigurationError(f"unknown command {command!r}")
    path = _prepare_out(None if out is None else str(out), command, overwrite)
    torch.set_num_threads(int(cfg.get("run", {}).get("threads", 1)))
    COMMANDS[command](cfg, path)
    return _write_manifest(path, command, cfg)


def rerun(manifest_path: str | Path, out: str | Path | None, overwrite: bool = False) -> Path:
    m = json.loads(Path(manifest_path).read_text())
    if m.get("format") != RUN_FORMAT or m.get("version") != RUN_VERSION:
        raise ConfigurationError(f"{manifest_path}: not a {RUN_FORMAT} v{RUN_VERSION} manifest")
    return execute(m["command"], m["config"], out, overwrite)


# -- argument parsing -------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [section] key = value settings")
    p.add_argument("--out", help=f"output directory (default: ${ENV_OUT}/<command>)")
    p.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")
    p.add_argument("--threads", type=int, help="torch intra-op threads")


def _inputs(p: argparse.ArgumentParser, checkpoint: bool = True) -> None:
    if checkpoint:
        p.add_argument("--checkpoint")
    p.add_argument("--data", help="dataset directory written by 'generate'")
    p.add_argument("--limit", type=int, help="evaluate only the first N val scenes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikedet", description="Spiking two-stage detector on synthetic scenes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a seeded train/val dataset")
    _common(g)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--image-size", type=int)
    g.add_argument("--unknown-prob", type=float)

    t = sub.add_parser("train", help="pretrain the backbone and run the three training phases")
    _common(t)
    _inputs(t, checkpoint=False)
    mode = t.add_mutually_exclusive_group()
    mode.add_argument("--snn", dest="spiking", action="store_const", const=True, help="spiking heads (default)")
    mode.add_argument("--ann", dest="spiking", action="store_const", const=False, help="conventional ReLU heads")
    t.add_argument("--epochs", type=int)
    t.add_argument("--finetune-epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--optimizer", choices=("sgd", "adam"))
    t.add_argument("--rate-penalty", type=float)
    t.add_argument("--pretrain-epochs", type=int)
    t.add_argument("--pretrain-scenes", type=int)
    t.add_argument("--train-seed", type=int)
    t.add_argument("--t-rpn", type=int)
    t.add_argument("--t-det", type=int)

    e = sub.add_parser("eval", help="metrics, energy report and optional noise curve")
    _common(e)
    _inputs(e)
    e.add_argument("--t-rpn", type=int)
    e.add_argument("--t-det", type=int)
    e.add_argument("--noise", choices=("gaussian", "rain"))
    e.add_argument("--sigmas", help="comma-separated Gaussian sigmas, e.g. 0,10,20")
    e.add_argument("--intensities", help="comma-separated rain presets, e.g. light,heavy")
    e.add_argument("--noise-seed", type=int)

    s = sub.add_parser("sweep-t", help="(delta_E, mAP_.5) over time-step grids without retraining")
    _common(s)
    _inputs(s)
    s.add_argument("--t-rpn", dest="t_rpn_list", help="comma-separated T_rpn values")
    s.add_argument("--t-det", dest="t_det_list", help="comma-separated T_det values")

    d = sub.add_parser("discover", help="new-object candidates, overlays and novelty recall/precision")
    _common(d)
    _inputs(d)
    d.add_argument("--t-rpn", type=int)
    d.add_argument("--t-det", type=int)
    d.add_argument("--gamma-q", type=float)
    d.add_argument("--gammas", help="comma-separated threshold grid for the recall/precision table")
    d.add_argument("--overlays", type=int, help="number of overlay images to write")

    r = sub.add_parser("energy-report", help="per-layer FLOPs and energy of a checkpoint")
    _common(r)
    _inputs(r)
    r.add_argument("--t-rpn", type=int)
    r.add_argument("--t-det", type=int)

    rr = sub.add_parser("rerun", help="repeat a run from its run.json")
    rr.add_argument("manifest")
    rr.add_argument("--out", help=f"output directory (default: ${ENV_OUT}/<command>)")
    rr.add_argument("--overwrite", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "rerun":
            path = rerun(args.manifest, args.out, args.overwrite)
        else:
            path = execute(args.command, resolve(args), args.out, args.overwrite)
    except (SpikedetError, ValueError, FileExistsError, FileNotFoundError) as exc:
        print(f"spikedet: error: {exc}", file=sys.stderr)
        return 2
    log.info("run manifest: %s", path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
