"""Command-line entry point: ``cali <command> [--config FILE] [--key value ...]``.

Settings come from built-in defaults, then a plain ``key=value`` config file, then flags.
Every run writes ``resolved_config.txt`` into its output directory; feeding that file back
with ``--config`` reproduces the run.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import divergence as V
from . import metrics as Mx
from . import planner as P
from . import sim as S
from .diffcore import ConfigError, DimensionError
from .losses import ValidationError
from .models import load_model
from .trainer import TrainConfig, train

log = logging.getLogger("cali")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

REQUIRED = object()


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _opt_float(text: str):
    return None if str(text).strip().lower() in ("", "none", "preset") else float(text)


# per command: key -> (parser, default); REQUIRED marks mandatory keys
COMMANDS: dict[str, dict[str, tuple]] = {
    "gen-data": {
        "out": (str, REQUIRED), "n": (int, 200), "hw": (int, 32), "k": (int, 3),
        "shift": (str, "none"), "seed": (int, 0), "kind": (str, "blobs"), "labeled": (str, "auto"),
    },
    "train": {
        "src": (str, REQUIRED), "tgt": (str, REQUIRED), "out": (str, REQUIRED),
        "baseline": (str, "CALI"), "m": (int, 2000), "interval": (int, 200), "seed": (int, 0),
        "preset": (str, "toy"), "lr_seg": (_opt_float, None), "lr_class": (_opt_float, None),
        "lr_class_heads": (_opt_float, None), "lr_disc": (_opt_float, None), "w_adv": (_opt_float, None),
        "eval_every": (int, 100), "order": (str, "G_first"), "gen_loss": (str, "flipped"),
        "batch_size": (int, 1),
    },
    "eval": {
        "model": (str, REQUIRED), "data": (str, REQUIRED), "out": (str, REQUIRED), "head": (str, "mean"),
    },
    "divergence": {
        "src": (str, REQUIRED), "tgt": (str, REQUIRED), "out": (str, REQUIRED), "model": (str, ""),
        "seed": (int, 0), "epochs": (int, 40), "hidden": (str, "32,32"), "n": (int, 0), "tol": (float, 0.05),
    },
    "plan": {
        "seg": (str, REQUIRED), "out": (str, REQUIRED), "navigable": (str, "1,0,1"),
        "alpha": (float, 0.25), "w1": (float, 1.0), "w2": (float, 1.0), "a": (float, 0.25),
        "b": (float, 1.0), "p": (float, 2.0), "goal_x": (float, 3.0), "goal_y": (float, 0.0),
        "fx": (float, 16.0), "fy": (float, 16.0), "cx": (float, 15.5), "cy": (float, 15.5),
        "height": (float, 0.5), "pitch": (float, 0.8), "v": (float, 0.3), "n_prims": (int, 7),
        "max_omega": (float, 0.6), "horizon": (float, 4.0), "poses": (int, 10),
    },
    "navigate": {
        "out": (str, REQUIRED), "world_seed": (int, 0), "model": (str, ""), "shift": (str, "none"),
        "seed": (int, 0), "max_steps": (int, 150), "alpha": (float, 0.1), "w1": (float, 10.0),
        "w2": (float, 1.0), "exec_fraction": (float, 0.25), "snapshots": (_bool, False),
    },
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cali", description="Coarse-to-fine domain adaptation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, keys in COMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None)
        for key in keys:
            sp.add_argument("--" + key, "--" + key.replace("_", "-"), dest=key, default=None)
    return parser


def read_config(path: str | Path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value")
        k, _, v = line.partition("=")
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(command: str, file_values: dict[str, str], flag_values: dict[str, str]) -> dict:
    spec = COMMANDS[command]
    unknown = sorted(set(file_values) - set(spec))
    if unknown:
        raise ConfigError(f"unknown key(s) for {command}: {', '.join(unknown)}")
    merged = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
    cfg = {}
    for key, (conv, default) in spec.items():
        if key in merged:
            try:
                cfg[key] = conv(merged[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {merged[key]!r}") from exc
        elif default is REQUIRED:
            raise ConfigError(f"missing required key {key!r}")
        else:
            cfg[key] = default
    return cfg


def _render(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if value is None:
        return "none"
    return str(value)


def write_resolved(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"# cali {command}"] + [f"{k}={_render(cfg[k])}" for k in sorted(cfg)]
    (out / "resolved_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _check_out(out: Path, *inputs: str) -> None:
    for i in inputs:
        if i and Path(i).resolve() == out.resolve():
            raise ConfigError("output directory must differ from input directories")


def _camera_for(h: int, w: int, cfg: dict | None = None) -> P.CameraModel:
    if cfg is None:
        return P.CameraModel(fx=w / 2, fy=h / 2, cx=(w - 1) / 2, cy=(h - 1) / 2, H=h, W=w)
    return P.CameraModel(cfg["fx"], cfg["fy"], cfg["cx"], cfg["cy"], cfg["height"], cfg["pitch"], h, w)


def _shift(text: str, seed: int) -> D.ShiftSpec | None:
    if text in ("none", ""):
        return None
    if text == "standard":
        return D.STANDARD_SHIFT
    if text == "nav":
        return S.NAV_SHIFT
    return D.ShiftSpec.parse(text, seed=seed)


# ---------------------------------------------------------------- commands

def cmd_gen_data(cfg: dict) -> None:
    out = Path(cfg["out"])
    shift = _shift(cfg["shift"], cfg["seed"])
    labeled = None if cfg["labeled"] == "auto" else _bool(cfg["labeled"])
    if cfg["n"] < 1:
        raise ConfigError("n must be >= 1")
    if cfg["kind"] == "blobs":
        ds = D.generate_dataset(cfg["n"], (cfg["hw"], cfg["hw"]), cfg["k"], cfg["seed"], shift, labeled)
    elif cfg["kind"] == "camera":
        if cfg["k"] != S.N_CLASSES:
            raise ConfigError(f"camera views have exactly {S.N_CLASSES} classes")
        ds = S.camera_dataset(cfg["n"], cfg["seed"], _camera_for(cfg["hw"], cfg["hw"]), shift, labeled)
    else:
        raise ConfigError("kind must be blobs or camera")
    write_resolved(out, "gen-data", cfg)
    D.save_dataset(ds, out, {"shift": cfg["shift"], "seed": cfg["seed"], "kind": cfg["kind"]})


def cmd_train(cfg: dict) -> None:
    out = Path(cfg["out"])
    _check_out(out, cfg["src"], cfg["tgt"])
    src, tgt = D.load_dataset(cfg["src"]), D.load_dataset(cfg["tgt"])
    if src.k != tgt.k:
        raise ValidationError(f"source has K={src.k}, target K={tgt.k}")
    if src.shape != tgt.shape:
        raise ValidationError(f"image sizes differ: {src.shape} vs {tgt.shape}")
    kw = dict(max_iters=cfg["m"], interval=cfg["interval"], baseline=cfg["baseline"], seed=cfg["seed"],
              eval_every=cfg["eval_every"], order=cfg["order"], gen_loss=cfg["gen_loss"],
              batch_size=cfg["batch_size"], num_classes=src.k)
    for key in ("lr_seg", "lr_class", "lr_class_heads", "lr_disc", "w_adv"):
        if cfg[key] is not None:
            kw[key] = cfg[key]
    if cfg["preset"] == "toy":
        tc = TrainConfig.toy(**kw)
    elif cfg["preset"] == "full":
        tc = TrainConfig.full_scale(**kw)
    else:
        raise ConfigError("preset must be toy or full")
    write_resolved(out, "train", cfg)
    eval_tgt = [s.image for s in tgt.samples[:8]]
    _, curves = train(tc, src, tgt, eval_target=eval_tgt, out_dir=out)
    lines = ["iter,d_acc"] + [f"{m},{a:.6g}" for m, a in curves.d_acc]
    (out / "d_acc.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_eval(cfg: dict) -> None:
    out = Path(cfg["out"])
    _check_out(out, cfg["data"])
    model = load_model(cfg["model"])
    ds = D.load_dataset(cfg["data"])
    if not ds.labeled:
        raise ValidationError("evaluation data must carry labels")
    if cfg["head"] not in ("mean", "C1", "C2"):
        raise ConfigError("head must be mean, C1 or C2")
    k = model.cls.num_classes
    if ds.k != k:
        raise ValidationError(f"model predicts K={k}, data has K={ds.k}")
    write_resolved(out, "eval", cfg)
    cm = Mx.evaluate_model(model, ds.samples, k, cfg["head"])
    (out / "iou.csv").write_text(Mx.iou_table_csv(cm), encoding="utf-8")
    (out / "summary.txt").write_text(f"n: {len(ds)}\nmiou: {Mx.miou_star(cm):.6g}\n", encoding="utf-8")


def cmd_divergence(cfg: dict) -> None:
    from .trainer import default_model

    out = Path(cfg["out"])
    _check_out(out, cfg["src"], cfg["tgt"])
    src, tgt = D.load_dataset(cfg["src"]), D.load_dataset(cfg["tgt"])
    if not src.labeled:
        raise ValidationError("source data must carry labels for the source-risk term")
    n = cfg["n"] or None
    s_samples, t_samples = src.samples[:n], tgt.samples[:n]
    model = load_model(cfg["model"]) if cfg["model"] else default_model(src.k, cfg["seed"])
    hidden = tuple(int(h) for h in cfg["hidden"].split(",") if h)
    ncfg = V.NeuralDiscCfg(hidden=hidden, epochs=cfg["epochs"], seed=cfg["seed"])
    write_resolved(out, "divergence", cfg)
    rep = V.bound_probe_neural(model, [s.image for s in s_samples], [s.label for s in s_samples],
                               [s.image for s in t_samples], ncfg, cfg["tol"])
    (out / "divergence.txt").write_text(rep.to_text(), encoding="utf-8")
    (out / "divergence.csv").write_text(rep.csv_header() + rep.to_csv_row(), encoding="utf-8")


def cmd_plan(cfg: dict) -> None:
    out = Path(cfg["out"])
    tensors = D.read_tensorpack(cfg["seg"])
    if "seg" not in tensors:
        raise ValidationError("segmentation pack needs a tensor named 'seg'")
    seg = np.asarray(tensors["seg"]).astype(np.int64)
    if seg.ndim != 2:
        raise DimensionError(f"segmentation must be (H, W), got {seg.shape}")
    nav = tuple(_bool(v) for v in cfg["navigable"].split(","))
    cam = _camera_for(seg.shape[0], seg.shape[1], cfg)
    weights = P.PlannerWeights(cfg["w1"], cfg["w2"], cfg["a"], cfg["b"], cfg["p"])
    lib = P.default_library(cfg["v"], cfg["n_prims"], cfg["max_omega"], cfg["horizon"], cfg["poses"])
    robot = P.Pose2(0.0, 0.0, 0.0)
    goal = P.goal_with_bearing(robot, cfg["goal_x"], cfg["goal_y"])
    write_resolved(out, "plan", cfg)
    result, field = P.plan_from_segmentation(seg, nav, lib, cam, robot, goal, weights, cfg["alpha"])
    (out / "plan.csv").write_text(result.to_csv(), encoding="utf-8")
    S.write_ppm(out / "sedf.ppm", S.field_to_rgb(field.field))


def cmd_navigate(cfg: dict) -> None:
    out = Path(cfg["out"])
    world = S.corridor_world(cfg["world_seed"])
    model = load_model(cfg["model"]) if cfg["model"] else None
    cam = P.CameraModel()
    weights = P.PlannerWeights(w1=cfg["w1"], w2=cfg["w2"])
    ecfg = S.EpisodeConfig(max_steps=cfg["max_steps"], alpha=cfg["alpha"], exec_fraction=cfg["exec_fraction"],
                           shift=_shift(cfg["shift"], cfg["seed"]), seed=cfg["seed"])
    write_resolved(out, "navigate", cfg)
    snap = out / "snapshots"
    hook = None
    if cfg["snapshots"]:
        snap.mkdir(exist_ok=True)

        def hook(step, img, seg, field, plan):
            S.write_ppm(snap / f"camera_{step:04d}.ppm", np.transpose(img, (1, 2, 0)))
            S.write_ppm(snap / f"sedf_{step:04d}.ppm", S.field_to_rgb(field.field))

    episode = S.run_episode(world, cam, model, weights=weights, cfg=ecfg, on_step=hook)
    (out / "episode.csv").write_text(episode.to_csv(), encoding="utf-8")
    S.write_ppm(out / "topdown.ppm", S.topdown_overlay(world, episode))
    summary = (f"reached: {int(episode.reached)}\nviolated: {int(episode.violated)}\n"
               f"steps: {len(episode.steps) - 1}\npath_length: {episode.path_length:.6g}\n")
    (out / "summary.txt").write_text(summary, encoding="utf-8")


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "divergence": cmd_divergence,
            "plan": cmd_plan, "navigate": cmd_navigate}

INVALID = (ConfigError, ValidationError, DimensionError, D.FormatError, FileNotFoundError, KeyError)


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise ConfigError("a command is required")
        flags = {k: getattr(args, k) for k in COMMANDS[args.command]}
        file_values = read_config(args.config) if args.config else {}
        cfg = resolve(args.command, file_values, flags)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        HANDLERS[args.command](cfg)
    except INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:     # numerical blow-ups, I/O failures mid-run
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    return dispatch(sys.argv[1:] if argv is None else list(argv))


if __name__ == "__main__":
    sys.exit(main())
