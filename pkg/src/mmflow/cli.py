"""Command-line entry point: ``mmflow <subcommand> [flags]``.

Exit codes: 0 ok, 2 usage, 3 I/O failure, 4 numeric failure, 5 contract violation.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from mmflow.errors import DataIOError, MmflowError
from mmflow.modality import Modality
from mmflow.numerics import blob
from mmflow.numerics.rng import Rng

log = logging.getLogger("mmflow")

EPILOG = """exit codes:
  0  success
  2  usage error (unknown subcommand or flag)
  3  I/O failure (missing or unreadable files, unwritable output)
  4  numeric failure (non-finite loss or sample)
  5  contract violation (bad shapes, dtypes, configs or arguments)
"""


class UsageError(MmflowError):
    exit_code = 2


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def read_grid(path: str | Path) -> np.ndarray:
    """A ``.uft`` tensor, or a directory holding exactly one (``modality.uft`` preferred)."""
    p = Path(path)
    if p.is_dir():
        for name in ("modality.uft", "rgb.uft"):
            if (p / name).exists():
                return blob.load(p / name)
        files = sorted(p.glob("*.uft"))
        if len(files) != 1:
            raise DataIOError(f"{p} must contain one .uft grid, found {len(files)}")
        return blob.load(files[0])
    return blob.load(p)


def read_grids(path: str | Path) -> dict[str, np.ndarray]:
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.uft"))
        if not files:
            raise DataIOError(f"no .uft grids in {p}")
        return {f.stem: blob.load(f) for f in files}
    return {p.stem: blob.load(p)}


def write_grids(out: str | Path, grids: dict) -> None:
    d = Path(out)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create {d}: {exc}") from exc
    for name, g in grids.items():
        if g is not None:
            blob.save(d / f"{name}.uft", np.ascontiguousarray(g, dtype=np.float32))


# ------------------------------------------------------------------ commands

def cmd_gen_data(a) -> int:
    from mmflow.model import toy_config
    from mmflow.toyworld import make_dataset
    # Default extent matches the default training config.
    extent = tuple(a.extent) if a.extent else toy_config().grid
    manifest = make_dataset(Rng(a.seed), a.n, a.difficulty, a.out, extent)
    log.info("wrote %d samples to %s", len(manifest["samples"]), a.out)
    return 0


def _train_config(path):
    from mmflow.trainer import TrainConfig
    return TrainConfig() if path is None else TrainConfig.load(path)


def _data_dirs(items: list[str]) -> dict:
    data = {}
    for item in items:
        if "=" in item:
            k, v = item.split("=", 1)
        else:
            k, v = "standard", item
        if k not in ("easy", "standard"):
            raise UsageError(f"unknown data difficulty {k!r}")
        data[k] = v
    return data


def cmd_train(a) -> int:
    from mmflow.trainer import run_curriculum
    cfg = _train_config(a.config)
    res = run_curriculum(cfg, _data_dirs(a.data), a.out, resume=a.resume)
    log.info("final checkpoint: %s", res["checkpoint"])
    return 0


def cmd_convergence(a) -> int:
    from mmflow.toyworld import build_dataset
    from mmflow.trainer import ordering_report, run_convergence_suite
    cfg = _train_config(a.config)
    if a.data:
        data = _data_dirs(a.data)
    else:
        grid = cfg.model.grid
        data = {"easy": build_dataset(Rng(cfg.seed).derive(100), a.n_data // 4, "easy", grid),
                "standard": build_dataset(Rng(cfg.seed).derive(101), a.n_data, "standard", grid)}
    res = run_convergence_suite(cfg, data, a.out, seeds=tuple(a.seeds), eval_every=a.eval_every)
    rep = ordering_report(res["final"])
    (Path(a.out) / "report.json").write_text(json.dumps(rep, indent=1, sort_keys=True) + "\n")
    if not rep["ordered"]:
        log.warning("final ordering unified <= single <= rgb-only not reproduced: %s", rep["median"])
    _emit(rep)
    return 0


def cmd_sample(a) -> int:
    from mmflow.flowmatch import SamplerConfig, TaskMode, euler_sample
    from mmflow.trainer import load_checkpoint
    model, _, tcfg, _ = load_checkpoint(a.ckpt)
    task = TaskMode.parse(a.task)
    modality = a.modality
    if modality is None and not tcfg.rgb_only:
        modality = tcfg.modalities_enabled[0]
    cond = {"prompt": a.prompt, "modality": None if modality is None else Modality.parse(modality)}
    if task is TaskMode.CONDITIONAL:
        if a.input is None:
            raise UsageError("--task cond needs --input with the conditioning modality grid")
        cond["modality_grid"] = read_grid(a.input)
    if task is TaskMode.ESTIMATION:
        if a.input is None:
            raise UsageError("--task est needs --input with the RGB grid")
        cond["rgb_grid"] = read_grid(a.input)
    out = euler_sample(model, task, cond, SamplerConfig(a.steps, a.cfg, task), Rng(a.seed))
    write_grids(a.out, {"rgb": out["rgb"], "modality": out["modality"]})
    return 0


def cmd_estimate(a) -> int:
    from mmflow.flowmatch import SamplerConfig, TaskMode, euler_sample
    from mmflow.trainer import load_model
    model = load_model(a.ckpt)
    cond = {"prompt": a.prompt, "modality": Modality.parse(a.modality), "rgb_grid": read_grid(a.input)}
    out = euler_sample(model, TaskMode.ESTIMATION, cond,
                       SamplerConfig(a.steps, a.cfg, TaskMode.ESTIMATION), Rng(a.seed))
    write_grids(a.out, {"modality": out["modality"]})
    return 0


def cmd_eval_depth(a) -> int:
    from mmflow.evaluation import depth_metrics
    _emit(depth_metrics(read_grid(a.pred), read_grid(a.gt), align=a.align).to_dict())
    return 0


def cmd_eval_seg(a) -> int:
    from mmflow.evaluation import seg_metrics
    _emit(seg_metrics(read_grid(a.pred), read_grid(a.gt)).to_dict())
    return 0


def cmd_attn_stats(a) -> int:
    from mmflow.evaluation import attn_quadrants
    from mmflow.toyworld import read_dataset
    from mmflow.trainer import load_model
    model = load_model(a.ckpt)
    ds = read_dataset(a.data)
    mod = Modality.parse(a.modality)
    n = min(a.n, len(ds))
    stats = attn_quadrants(model, ds.grids[:n, 0], ds.grids[:n, int(mod)], mod, a.t_r, a.t_m,
                           ds.captions[:n])
    _emit(stats.to_dict())
    return 0


def cmd_gradcheck(a) -> int:
    from mmflow.model import tiny_config
    from mmflow.trainer import loss_grad_check
    cfg = tiny_config() if a.config is None else _model_config(a.config)
    res = loss_grad_check(cfg, a.seed, a.coords)
    _emit({"max_rel_error": res["max"], "per_mode": {k: v for k, v in res.items() if k != "max"}})
    return 0


def _model_config(path):
    from mmflow.model import ModelConfig
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataIOError(f"cannot read config {path}: {exc}") from exc
    return ModelConfig.from_dict(d.get("model", d))


def cmd_export_frames(a) -> int:
    from mmflow.evaluation import export_frames
    paths = export_frames(read_grids(a.grids), a.out_dir)
    log.info("wrote %d frames", len(paths))
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmflow", description="Unified RGB + auxiliary-modality video flow model.",
                                epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="subcommand")

    s = sub.add_parser("gen-data", help="render a toy dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--difficulty", choices=("easy", "standard"), default="standard")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--extent", type=int, nargs=3, metavar=("T", "H", "W"))
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", help="two-stage curriculum training")
    s.add_argument("--config", help="train.json (defaults when omitted)")
    s.add_argument("--data", nargs="+", required=True, metavar="[easy=|standard=]DIR")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("convergence", help="rgb-only vs single-modality vs unified comparison")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--data", nargs="+", metavar="[easy=|standard=]DIR")
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--eval-every", type=int, default=50)
    s.add_argument("--n-data", type=int, default=2048)
    s.set_defaults(fn=cmd_convergence)

    for name, fn, help_ in (("sample", cmd_sample, "generate with the guided Euler sampler"),
                            ("estimate", cmd_estimate, "predict a modality from an RGB grid")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--ckpt", required=True)
        if name == "sample":
            s.add_argument("--task", default="t2v", choices=("t2v", "cond", "est", "joint"))
            s.add_argument("--modality")
            s.add_argument("--input", help="conditioning grid (.uft) for cond / est")
        else:
            s.add_argument("--modality", required=True)
            s.add_argument("--input", required=True)
        s.add_argument("--prompt", default="")
        s.add_argument("--steps", type=int, default=50)
        s.add_argument("--cfg", type=float, default=7.5)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", required=True)
        s.set_defaults(fn=fn)

    for name, fn in (("eval-depth", cmd_eval_depth), ("eval-seg", cmd_eval_seg)):
        s = sub.add_parser(name, help="metrics JSON on stdout")
        s.add_argument("--pred", required=True)
        s.add_argument("--gt", required=True)
        if name == "eval-depth":
            s.add_argument("--align", action=argparse.BooleanOptionalAction, default=True)
        s.set_defaults(fn=fn)

    s = sub.add_parser("attn-stats", help="self-attention quadrant masses")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--modality", default="depth")
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--t-r", type=float, default=0.5)
    s.add_argument("--t-m", type=float, default=0.5)
    s.set_defaults(fn=cmd_attn_stats)

    s = sub.add_parser("gradcheck", help="finite-difference check of the mode losses")
    s.add_argument("--config", help="model config JSON (tiny model when omitted)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--coords", type=int, default=8, help="coordinates differenced per parameter")
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("export-frames", help="write P6 PPM frames")
    s.add_argument("--grids", required=True, help=".uft grid or directory of them")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(fn=cmd_export_frames)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except MmflowError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
