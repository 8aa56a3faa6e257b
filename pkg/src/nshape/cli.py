"""Command-line entry point: dataset generation, training, meshing, evaluation and reports.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

RESULTS_HEADER = ["scene", "shaping", "seed", "chamfer", "precision", "recall", "fscore",
                  "final_L_C", "steps", "seconds"]


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# config merging: built-in defaults < config file < explicit flags


def _defaults(cmd: str) -> dict:
    from .train import TrainConfig

    common = {"seed": 0, "threads": default_threads()}
    table = {
        "gen": dict(scene="sphere+box", views=8, size=64, layout="ring", noise_sem=0.05, noise_geo=5.0,
                    sem_dim=32, mesh_res=256, out=None),
        "train": dict(asdict(TrainConfig()), data=None, out=None, resume=False, checkpoint_every=1000,
                      wallclock=False),
        "mesh": dict(ckpt=None, res=256, out=None, binary=True),
        "eval": dict(pred=None, gt=None, views=None, samples=50_000, tau_frac=0.02, out=None),
        "verify-mi": dict(dim=[3, 8], samples=200_000, out=None),
        "render": dict(ckpt=None, pose_index=None, data=None, out=None, samples=64, stratified=False),
        "experiment": dict(scene="sphere+box", views=8, size=64, seeds=[0, 1, 2],
                           shapings=["normal", "none", "fo", "sdf", "color"], steps=20_000,
                           noise_sem=0.05, noise_geo=5.0, res=128, samples=50_000, out=None,
                           lambda_m=TrainConfig.lambda_m, wallclock=False),
        "report": dict(results=None, out=None),
    }
    d = dict(common)
    d.update(table[cmd])
    return d


def read_config(path) -> dict:
    """key=value lines; '#' starts a comment; hyphens in keys read as underscores."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _coerce(key: str, text: str, default):
    if isinstance(default, bool):
        low = text.lower()
        if low not in ("1", "0", "true", "false", "yes", "no"):
            raise UsageError(f"bad boolean for {key}: {text!r}")
        return low in ("1", "true", "yes")
    if isinstance(default, list):
        kind = type(default[0]) if default else str
        return [kind(s) for s in text.replace(",", " ").split()]
    try:
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {text!r}") from exc
    return text


def merge_config(cmd: str, args: argparse.Namespace) -> dict:
    cfg = _defaults(cmd)
    if getattr(args, "config", None):
        for k, v in read_config(args.config).items():
            if k not in cfg or k == "config":
                raise UsageError(f"unknown config key {k!r} for {cmd}")
            cfg[k] = _coerce(k, v, cfg[k])
    for k, v in vars(args).items():
        if k in cfg and v is not None:
            cfg[k] = v
    return cfg


def format_config(cfg: dict) -> str:
    def fmt(v):
        return " ".join(map(str, v)) if isinstance(v, list) else str(v)
    return "".join(f"{k}={fmt(v)}\n" for k, v in sorted(cfg.items()))


def _require(cfg: dict, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise UsageError(f"--{k.replace('_', '-')} is required")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    from .train import SHAPINGS

    p = _Parser(prog="nshape", description="Normal-Jacobian mutual-information shaping for neural SDFs")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value file; explicit flags override its values")
    common.add_argument("--print-config", action="store_true", help="print the merged configuration and exit")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--threads", type=int, help="worker threads (default: available cores)")

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--scene", choices=["sphere", "sphere+box", "room"], help="scene (default sphere+box)")
    g.add_argument("--views", type=int, help="number of views (default 8)")
    g.add_argument("--size", type=int, help="image side in pixels (default 64)")
    g.add_argument("--layout", choices=["ring", "hemisphere"], help="camera layout (default ring)")
    g.add_argument("--noise-sem", type=float, help="semantic feature noise std (default 0.05)")
    g.add_argument("--noise-geo", type=float, help="normal-feature noise in degrees (default 5)")
    g.add_argument("--sem-dim", type=int, help="semantic feature channels (default 32)")
    g.add_argument("--mesh-res", type=int, help="ground-truth mesh grid resolution (default 256)")
    g.add_argument("--out", help="output directory (required)")

    t = sub.add_parser("train", parents=[common], help="train a field on a dataset")
    t.add_argument("--data", help="dataset directory (required)")
    t.add_argument("--out", help="output directory for checkpoint.nshape and metrics.csv (required)")
    t.add_argument("--shaping", choices=SHAPINGS, help="shaping target (default normal)")
    t.add_argument("--lambda-m", type=float, help="shaping weight (default 0.01)")
    t.add_argument("--lambda-e", type=float, help="eikonal weight (default 0.1)")
    t.add_argument("--beta-s", type=float, help="semantic cosine threshold (default 0.65)")
    t.add_argument("--beta-g", type=float, help="geometric cosine threshold (default 0.99)")
    t.add_argument("--steps", type=int, help="total optimizer steps (default 20000)")
    t.add_argument("--rays", type=int, help="rays per step (default 64)")
    t.add_argument("--samples", type=int, help="samples per ray (default 64)")
    t.add_argument("--lr", type=float, help="learning rate (default 5e-4)")
    t.add_argument("--warmup", type=int, help="steps before shaping starts (default 1000)")
    t.add_argument("--theta-d", help="comma-separated parameter names differentiated in shaping")
    t.add_argument("--jacobian-samples", type=int,
                   help="highest-weight samples per ray in the normal Jacobian; 0 = all (default 16)")
    t.add_argument("--checkpoint-every", type=int, help="checkpoint interval in steps (default 1000)")
    t.add_argument("--resume", action="store_true", default=None, help="continue from OUT/checkpoint.nshape")
    t.add_argument("--wallclock", action="store_true", default=None,
                   help="log real step times in the seconds column (breaks byte-identical CSVs)")

    m = sub.add_parser("mesh", parents=[common], help="extract the zero level set of a checkpoint")
    m.add_argument("--ckpt", help="checkpoint file (required)")
    m.add_argument("--res", type=int, help="grid resolution per axis (default 256)")
    m.add_argument("--out", help="output PLY (required)")
    m.add_argument("--ascii", dest="binary", action="store_false", default=None, help="write ASCII PLY")

    e = sub.add_parser("eval", parents=[common], help="score a mesh against ground truth")
    e.add_argument("--pred", help="predicted mesh PLY (required)")
    e.add_argument("--gt", help="ground-truth mesh PLY (required)")
    e.add_argument("--views", help="poses file or dataset directory used for visibility culling")
    e.add_argument("--samples", type=int, help="surface samples per mesh (default 50000)")
    e.add_argument("--tau-frac", type=float, help="F-score threshold as a fraction of scene length (default 0.02)")
    e.add_argument("--out", help="CSV output (default stdout)")

    v = sub.add_parser("verify-mi", parents=[common], help="Monte Carlo checks of the entropy laws")
    v.add_argument("--dim", type=int, action="append", help="dimension; repeatable (default 3 and 8)")
    v.add_argument("--samples", type=int, help="Monte Carlo samples (default 200000)")
    v.add_argument("--out", help="report output (default stdout)")

    r = sub.add_parser("render", parents=[common], help="volume-render one training view")
    r.add_argument("--ckpt", help="checkpoint file (required)")
    r.add_argument("--data", help="dataset directory holding poses.txt (required)")
    r.add_argument("--pose-index", type=int, help="camera index (required)")
    r.add_argument("--samples", type=int, help="samples per ray (default 64)")
    r.add_argument("--stratified", action="store_true", default=None, help="jitter samples using --seed")
    r.add_argument("--out", help="output PPM (required)")

    x = sub.add_parser("experiment", parents=[common], help="run the shaping comparison grid")
    x.add_argument("--scene", choices=["sphere", "sphere+box", "room"], help="scene (default sphere+box)")
    x.add_argument("--views", type=int, help="number of views (default 8)")
    x.add_argument("--size", type=int, help="image side in pixels (default 64)")
    x.add_argument("--seeds", type=int, nargs="+", help="seeds (default 0 1 2)")
    x.add_argument("--shapings", nargs="+", choices=SHAPINGS, help="shaping targets (default all)")
    x.add_argument("--steps", type=int, help="steps per run (default 20000)")
    x.add_argument("--lambda-m", type=float, help="shaping weight (default 0.01)")
    x.add_argument("--noise-sem", type=float, help="semantic feature noise std (default 0.05)")
    x.add_argument("--noise-geo", type=float, help="normal-feature noise in degrees (default 5)")
    x.add_argument("--res", type=int, help="mesh extraction resolution (default 128)")
    x.add_argument("--samples", type=int, help="evaluation samples (default 50000)")
    x.add_argument("--wallclock", action="store_true", default=None, help="log real step times")
    x.add_argument("--out", help="experiment directory (required); finished runs are reused")

    rp = sub.add_parser("report", parents=[common], help="summary CSV and figures from an experiment")
    rp.add_argument("--results", help="experiment directory (required)")
    rp.add_argument("--out", help="report directory (default RESULTS/report)")
    p.subcommands = sub.choices
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: dict) -> int:
    from .scenegen import generate_dataset

    _require(cfg, "out")
    root = generate_dataset(cfg["scene"], cfg["out"], views=cfg["views"], size=cfg["size"],
                            layout=cfg["layout"], sigma_s=cfg["noise_sem"], sigma_g=cfg["noise_geo"],
                            seed=cfg["seed"], sem_dim=cfg["sem_dim"], mesh_res=cfg["mesh_res"])
    print(f"wrote dataset {root}")
    return EXIT_OK


def train_config(cfg: dict):
    from .train import TrainConfig

    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in cfg.items() if k in names})


def cmd_train(cfg: dict) -> int:
    from .field import FieldConfig
    from .scenegen import Dataset
    from .train import Trainer, TrainData, TrainState

    _require(cfg, "data", "out")
    tcfg = train_config(cfg)
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    ckpt = out / "checkpoint.nshape"
    if cfg["resume"] and ckpt.exists():
        state = TrainState.load(ckpt)
        state.tcfg = tcfg
    else:
        state = TrainState.fresh(FieldConfig(), tcfg)
    data = TrainData.from_dataset(Dataset.load(cfg["data"]))
    trainer = Trainer(state, data, threads=cfg["threads"])
    t0 = time.perf_counter()

    def progress(log):
        if log.step % 1000 == 0:
            print(f"step {log.step}: L_C={log.L_C:.5f} L_E={log.L_E:.5f} L_M={log.L_M:.5f} "
                  f"({time.perf_counter() - t0:.0f}s)", flush=True)

    try:
        trainer.run(metrics_path=out / "metrics.csv", wallclock=cfg["wallclock"], checkpoint_path=ckpt,
                    checkpoint_every=cfg["checkpoint_every"], progress=progress)
    finally:
        trainer.close()
    print(f"wrote {ckpt} and {out / 'metrics.csv'}")
    return EXIT_OK


def _load_field(path):
    from .field import Field
    from .train import TrainState

    state = TrainState.load(path)
    return Field(state.fcfg, state.params)


def cmd_mesh(cfg: dict) -> int:
    from .geomeval import grid_mesh, write_ply

    _require(cfg, "ckpt", "out")
    if cfg["res"] < 2:
        raise UsageError("--res must be at least 2")
    field = _load_field(cfg["ckpt"])
    mesh = grid_mesh(field.sdf_grid(cfg["res"]))
    write_ply(cfg["out"], mesh, binary=cfg["binary"])
    print(f"wrote {cfg['out']}: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces")
    return EXIT_OK


def _cameras(path):
    from .render import read_poses

    path = Path(path)
    return read_poses(path / "poses.txt" if path.is_dir() else path)


def cmd_eval(cfg: dict) -> int:
    from .geomeval import evaluate_meshes, read_ply

    _require(cfg, "pred", "gt")
    pred, gt = read_ply(cfg["pred"]), read_ply(cfg["gt"])
    cams = _cameras(cfg["views"]) if cfg["views"] else None
    rep = evaluate_meshes(pred, gt, cams, samples=cfg["samples"], tau_frac=cfg["tau_frac"], seed=cfg["seed"])
    _emit(rep.csv(), cfg["out"])
    return EXIT_OK


def _emit(text: str, path):
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_verify_mi(cfg: dict) -> int:
    from .mishape import format_report, verify_entropy_laws

    results = verify_entropy_laws(dims=tuple(cfg["dim"]), samples=cfg["samples"], seed=cfg["seed"])
    _emit(format_report(results), cfg["out"])
    if not all(r.passed for r in results):
        raise NumericError("entropy verification failed")
    return EXIT_OK


def cmd_render(cfg: dict) -> int:
    from .render import Renderer, cube_bounds, make_rays, pixel_centers, sample_ray
    from .scenegen import write_ppm
    from .train import TrainState

    _require(cfg, "ckpt", "data", "pose_index", "out")
    cams = _cameras(cfg["data"])
    k = cfg["pose_index"]
    if not 0 <= k < len(cams):
        raise UsageError(f"--pose-index {k} out of range; dataset has {len(cams)} cameras")
    state = TrainState.load(cfg["ckpt"])
    cam = cams[k]
    rend = Renderer(state.fcfg, n_samples=cfg["samples"])
    o, d = make_rays(cam, pixel_centers(cam, np.arange(cam.npix)))
    t = None
    if cfg["stratified"]:
        near, far = cube_bounds(o, d)
        t = sample_ray(near, far, cfg["samples"], "stratified", np.random.default_rng(cfg["seed"]))
    rgb, _ = rend.render_rays(state.params, o, d, t)
    write_ppm(cfg["out"], rgb.reshape(cam.height, cam.width, 3))
    print(f"wrote {cfg['out']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiment grid and report


def run_dir(root, shaping: str, seed: int) -> Path:
    return Path(root) / "runs" / f"{shaping}_s{seed}"


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in RESULTS_HEADER[2:]:
            r[k] = int(r[k]) if k in ("seed", "steps") else float(r[k])
    return rows


def write_results(path, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    for r in rows:
        w.writerow([r[k] if not isinstance(r[k], float) else repr(r[k]) for k in RESULTS_HEADER])
    Path(path).write_text(buf.getvalue())


def run_one(cfg: dict, data_root: Path, shaping: str, seed: int, out: Path) -> dict:
    """Train, mesh and score one (shaping, seed) cell; results are cached in out/result.csv."""
    from .field import Field, FieldConfig
    from .geomeval import MeshError, evaluate_meshes, grid_mesh, read_ply, write_ply
    from .scenegen import Dataset
    from .train import Trainer, TrainData, TrainState

    res_file = out / "result.csv"
    if res_file.exists():
        return read_results(res_file)[0]
    out.mkdir(parents=True, exist_ok=True)
    tcfg = train_config(dict(_defaults("train"), shaping=shaping, seed=seed, steps=cfg["steps"],
                             lambda_m=cfg["lambda_m"]))
    ds = Dataset.load(data_root)
    state = TrainState.fresh(FieldConfig(), tcfg)
    trainer = Trainer(state, TrainData.from_dataset(ds), threads=cfg["threads"])
    t0 = time.perf_counter()
    try:
        logs = trainer.run(metrics_path=out / "metrics.csv", wallclock=cfg["wallclock"],
                           checkpoint_path=out / "checkpoint.nshape")
    finally:
        trainer.close()
    seconds = time.perf_counter() - t0
    mesh = grid_mesh(Field(state.fcfg, state.params).sdf_grid(cfg["res"]))
    write_ply(out / "mesh.ply", mesh)
    try:
        rep = evaluate_meshes(mesh, read_ply(data_root / "gt_mesh.ply"), ds.cameras,
                              samples=cfg["samples"], seed=seed)
        scores = (rep.chamfer, rep.precision, rep.recall, rep.fscore)
    except MeshError as exc:
        # a surface with nothing visible from the views scores as a total miss
        if not str(exc).startswith("predicted mesh is empty"):
            raise
        print(f"  warning: {exc}; recording chamfer=inf", file=sys.stderr, flush=True)
        scores = (math.inf, 0.0, 0.0, 0.0)
    row = dict(scene=cfg["scene"], shaping=shaping, seed=seed, chamfer=scores[0],
               precision=scores[1], recall=scores[2], fscore=scores[3],
               final_L_C=float(np.mean([l.L_C for l in logs[-100:]])), steps=cfg["steps"],
               seconds=round(seconds, 1))
    write_results(res_file, [row])
    return row


def cmd_experiment(cfg: dict) -> int:
    from .scenegen import generate_dataset

    _require(cfg, "out")
    root = Path(cfg["out"])
    rows = []
    for seed in cfg["seeds"]:
        data_root = root / "data" / f"s{seed}"
        if not (data_root / "manifest.txt").exists():
            generate_dataset(cfg["scene"], data_root, views=cfg["views"], size=cfg["size"],
                             sigma_s=cfg["noise_sem"], sigma_g=cfg["noise_geo"], seed=seed)
        for shaping in cfg["shapings"]:
            print(f"run shaping={shaping} seed={seed}", flush=True)
            row = run_one(cfg, data_root, shaping, seed, run_dir(root, shaping, seed))
            print(f"  chamfer={row['chamfer']:.6g} fscore={row['fscore']:.4f} ({row['seconds']}s)", flush=True)
            rows.append(row)
    write_results(root / "results.csv", rows)
    print(f"wrote {root / 'results.csv'}")
    return EXIT_OK


def summarize(rows) -> list[dict]:
    out = []
    for shaping in dict.fromkeys(r["shaping"] for r in rows):
        sel = [r for r in rows if r["shaping"] == shaping]
        cd = np.array([r["chamfer"] for r in sel])
        fs = np.array([r["fscore"] for r in sel])
        out.append(dict(shaping=shaping, runs=len(sel), chamfer_mean=float(cd.mean()),
                        chamfer_std=float(cd.std(ddof=1)) if len(sel) > 1 else 0.0,
                        fscore_mean=float(fs.mean()),
                        fscore_std=float(fs.std(ddof=1)) if len(sel) > 1 else 0.0))
    return out


def cmd_report(cfg: dict) -> int:
    from . import plots

    _require(cfg, "results")
    root = Path(cfg["results"])
    res = root / "results.csv"
    if not res.exists():
        raise DataError(f"{res} not found; run the experiment first")
    rows = read_results(res)
    out = Path(cfg["out"] or root / "report")
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(rows)
    keys = ["shaping", "runs", "chamfer_mean", "chamfer_std", "fscore_mean", "fscore_std"]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, keys, lineterminator="\n")
        w.writeheader()
        w.writerows(summary)
    plots.chamfer_figure(rows, out / "chamfer.png")
    curves = {}
    for r in rows:
        m = run_dir(root, r["shaping"], r["seed"]) / "metrics.csv"
        if m.exists():
            curves.setdefault(r["shaping"], []).append(np.genfromtxt(m, delimiter=",", names=True))
    if curves:
        plots.loss_figure(curves, out / "losses.png")
    for s in summary:
        print(f"{s['shaping']:>7}: chamfer {s['chamfer_mean']:.6g} +- {s['chamfer_std']:.2g}, "
              f"fscore {s['fscore_mean']:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "mesh": cmd_mesh, "eval": cmd_eval,
            "verify-mi": cmd_verify_mi, "render": cmd_render, "experiment": cmd_experiment,
            "report": cmd_report}


def _exit_code(exc: BaseException) -> int | None:
    from .autodiff import AutodiffError
    from .field import CheckpointError, FieldError, NonFiniteError
    from .geomeval import MeshError
    from .mishape import MIError
    from .pairing import FeatureError, PairingError
    from .render import RenderError
    from .scenegen import SceneError
    from .train import NonFiniteLossError, TrainError

    if isinstance(exc, (NumericError, NonFiniteLossError, NonFiniteError, MIError)):
        return EXIT_NUMERIC
    if isinstance(exc, (UsageError, TrainError, FieldError)):
        return EXIT_USAGE
    if isinstance(exc, (DataError, CheckpointError, FeatureError, PairingError, SceneError, MeshError,
                        RenderError, OSError)):
        return EXIT_DATA
    if isinstance(exc, AutodiffError):
        return EXIT_NUMERIC
    return None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = merge_config(args.command, args)
        if args.print_config:
            sys.stdout.write(format_config(cfg))
            return EXIT_OK
        if cfg["threads"] < 1:
            raise UsageError("--threads must be at least 1")
        return COMMANDS[args.command](cfg)
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        if code == EXIT_USAGE:
            parser.subcommands[args.command].print_usage(sys.stderr)
        print(f"nshape {args.command}: error: {exc}", file=sys.stderr)
        dump = getattr(exc, "dump", None)
        if dump:
            print(f"state dumped to {dump}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
