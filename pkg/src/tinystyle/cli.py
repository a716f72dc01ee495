"""Command-line front end: prepare data, train, generate figures, evaluate.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure. Every command is deterministic given its resolved configuration;
the only run-to-run difference is the manifest timestamp.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import data as dat
from . import metrics as met
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, NumericalError, ShapeError
from .models import NoiseConfig, TruncationConfig, mean_w
from .snapshot import load_models
from .train import select_best_checkpoint, train_loop

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".ppm"}

METRIC_NAMES = ("fid", "ppl_zfull", "ppl_wfull", "ppl_zend", "ppl_wend",
                "ls_z", "ls_w")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# image helpers
# ---------------------------------------------------------------------------

def to_uint8(images: np.ndarray) -> np.ndarray:
    """(n,3,r,r) float in [-1,1] -> (n,r,r,3) uint8."""
    x = np.clip(np.asarray(images, np.float32), -1.0, 1.0)
    x = np.rint((x + 1.0) * 127.5).astype(np.uint8)
    return x.transpose(0, 2, 3, 1)


def render_grid(images, rows: int, cols: int) -> np.ndarray:
    """Row-major tiling of uniform (h,w,3) images, no padding."""
    images = list(images)
    if rows * cols != len(images):
        raise ValueError(f"render_grid: {rows}x{cols} grid cannot hold "
                         f"{len(images)} images")
    shape = images[0].shape
    for img in images:
        if img.shape != shape:
            raise ValueError(f"render_grid: mixed shapes {shape} and {img.shape}")
    h, w = shape[:2]
    out = np.zeros((rows * h, cols * w, shape[2]), images[0].dtype)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        out[r * h:(r + 1) * h, c * w:(c + 1) * w] = img
    return out


def _save_png(path: Path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(image).save(path, format="PNG")


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

def _emit_report(report: dat.FilterReport, out_dir: Path) -> None:
    text = report.render()
    print(text)
    (out_dir / "report.json").write_text(text + "\n", encoding="utf-8")


def cmd_prepare(args) -> int:
    cfg = load_config(args.config, args.set)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    capacity = cfg.get("data", "shard_capacity")

    if args.toy:
        spec = cfg.toy_spec()
        dat.synth_toy_dataset(spec, out_dir, shard_capacity=capacity)
        report = dat.FilterReport()
        for _ in range(spec.count):
            report.accept()
        _emit_report(report, out_dir)
        return EXIT_OK

    if not args.input:
        raise ConfigError("prepare needs --input (or --toy)")
    input_dir = Path(args.input)
    if not input_dir.is_dir():
        raise DataError(f"input directory not found: {input_dir}")
    corpus = [(p.name, p) for p in sorted(input_dir.iterdir())
              if p.suffix.lower() in IMAGE_EXTENSIONS]

    if args.heuristic_detector:
        detections = dat.detect_corpus(corpus)
    elif args.detections:
        detections = dat.group_detections(dat.load_detections(args.detections))
    else:
        raise ConfigError("prepare needs --detections FILE or --heuristic-detector")

    crops, report = dat.filter_corpus(corpus, detections, cfg.filter_policy())
    dat.write_shards(crops, out_dir, shard_capacity=capacity)
    _emit_report(report, out_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    overrides = list(args.set)
    if args.steps is not None:
        overrides.append(f"train.steps={args.steps}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    cfg = load_config(args.config, overrides)

    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.write(run_dir / "config.ini")

    reader = dat.read_shards(args.shards)
    model_cfg = cfg.model_config()
    if reader.count and (reader.width, reader.height) != (model_cfg.resolution,) * 2:
        print(f"error: shards are {reader.width}x{reader.height} but the model "
              f"resolution is {model_cfg.resolution}", file=sys.stderr)
        return EXIT_DATA

    result = train_loop(reader, model_cfg, cfg.train_config(), run_dir)

    best = select_best_checkpoint(result.scores) if result.scores else None
    manifest = {
        "run_id": run_dir.name,
        "tool_version": __version__,
        "config_hash": cfg.config_hash(),
        "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "log": "logs/train.csv",
        "epochs": result.epochs,
        "aborted": result.aborted,
        "best_checkpoint": best,
        "snapshots": [
            {"id": s.snapshot_id, "step": s.step,
             "path": str(s.path.relative_to(run_dir)),
             "fid": score.fid, "fid_samples": score.n}
            for s, score in zip(result.snapshots, result.scores)
        ],
        "reports": [],
    }
    for snap in manifest["snapshots"]:
        assert (run_dir / snap["path"]).exists()
    (run_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    if best is None:
        print("training finished: no snapshots taken")
    else:
        print(f"best checkpoint: {best} "
              f"(fid={min(s.fid for s in result.scores):.8g})")
    return EXIT_NUMERIC if result.aborted else EXIT_OK


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _load_ema_generator(path):
    snap = load_models(path)
    return snap


def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.set)
    gcfg = dict(cfg["generate"])
    if args.rows is not None:
        gcfg["rows"] = args.rows
    if args.cols is not None:
        gcfg["cols"] = args.cols
    if args.seed is not None:
        gcfg["seed"] = args.seed
    if args.psi is not None:
        gcfg["psi"] = args.psi

    snap = _load_ema_generator(args.snapshot)
    gen = snap.gen_ema
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    psis = [float(p) for p in args.psis.split(",")] if args.psis else cfg.psis()
    for value in psis + [float(gcfg["psi"])]:
        if not -2.0 <= value <= 2.0:
            print(f"warning: psi={value} outside [-2, 2]", file=sys.stderr)

    z_seq, noise_seq = np.random.SeedSequence(int(gcfg["seed"])).spawn(2)
    rng = np.random.default_rng(z_seq)
    noise = NoiseConfig.from_seed(int(noise_seq.generate_state(1)[0]),
                                  gen.num_layers, mode=str(gcfg["noise_mode"]),
                                  boundary=int(gcfg["noise_boundary"]))
    w_mean = mean_w(gen.mapping, int(gcfg["mean_w_samples"]),
                    int(gcfg["mean_w_seed"]))
    rows = int(gcfg["rows"])
    cols = int(gcfg["cols"])

    def cells_to_files(cells, n_rows, n_cols, name):
        composite = render_grid(cells, n_rows, n_cols)
        _save_png(out_dir / f"{name}.png", composite)
        for i, cell in enumerate(cells):
            r, c = divmod(i, n_cols)
            _save_png(out_dir / f"cell_r{r}_c{c}.png", cell)
        print(f"wrote {name}.png plus {len(cells)} cells to {out_dir}")

    if args.mode == "grid":
        z = rng.standard_normal((rows * cols, gen.cfg.z_dim), dtype=np.float32)
        trunc = TruncationConfig(psi=float(gcfg["psi"]), w_mean=w_mean,
                                 cutoff=int(gcfg["truncation_cutoff"]))
        imgs = to_uint8(gen.generate(z, noise=noise, truncation=trunc))
        cells_to_files(list(imgs), rows, cols, "grid")
    elif args.mode == "trunc_sweep":
        if not any(p == 0.0 for p in psis):
            psis = psis + [0.0]
        z = rng.standard_normal((rows, gen.cfg.z_dim), dtype=np.float32)
        columns = []
        for psi in psis:
            trunc = TruncationConfig(psi=psi, w_mean=w_mean,
                                     cutoff=int(gcfg["truncation_cutoff"]))
            columns.append(to_uint8(gen.generate(z, noise=noise, truncation=trunc)))
        cells = [columns[c][r] for r in range(rows) for c in range(len(psis))]
        cells_to_files(cells, rows, len(psis), "trunc_sweep")
    elif args.mode == "noise_ablation":
        modes = ("all", "none", "fine_only", "coarse_only")
        z = rng.standard_normal((rows, gen.cfg.z_dim), dtype=np.float32)
        columns = []
        for mode in modes:
            ablated = NoiseConfig(mode=mode, boundary=noise.boundary,
                                  seeds=noise.seeds)
            columns.append(to_uint8(gen.generate(z, noise=ablated)))
        cells = [columns[c][r] for r in range(rows) for c in range(len(modes))]
        cells_to_files(cells, rows, len(modes), "noise_ablation")
    else:
        raise ConfigError(f"unknown generate mode {args.mode!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _format_value(v) -> str:
    return v if isinstance(v, str) else f"{v:.8g}"


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.set)
    mcfg = cfg["metrics"]
    requested = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for name in requested:
        if name not in METRIC_NAMES:
            raise ConfigError(f"unknown metric {name!r}; choose from "
                              f"{', '.join(METRIC_NAMES)}")

    snap = load_models(args.snapshot)
    gen = snap.gen_ema
    probe = met.GeneratorProbe(gen)
    seed = int(mcfg["seed"])

    embedder_name = str(mcfg["embedder"])
    if embedder_name == "pixel":
        embedder = met.PixelEmbedder()
    elif embedder_name == "classifier":
        if not args.real_shards:
            raise ConfigError("classifier embedder needs --real-shards with a "
                              "labels.csv alongside the shards")
        reader = dat.read_shards(args.real_shards)
        labels = dat.read_labels(Path(args.real_shards) / "labels.csv")
        images = met.to_unit_images(np.stack(list(reader)))
        embedder = met.train_classifier_embedder(images, labels, seed=seed)
    else:
        raise ConfigError(f"unknown embedder {embedder_name!r}")

    rows = []
    for name in requested:
        if name == "fid":
            if not args.real_shards:
                print("error: fid needs --real-shards; writing an error row",
                      file=sys.stderr)
                rows.append(("fid", "", "", embedder_name,
                             int(mcfg["fid_samples"]), seed, "error"))
                continue
            reader = dat.read_shards(args.real_shards)
            value = met.fid(met.GeneratorSource(gen), met.ShardReplaySource(reader),
                            embedder, int(mcfg["fid_samples"]), seed)
            rows.append(("fid", "", "", embedder_name,
                         int(mcfg["fid_samples"]), seed, value))
        elif name.startswith("ppl_"):
            space, variant = name[4], name[5:]
            value = met.ppl(probe, embedder, met.PPLConfig(
                space=space, sampling=variant, epsilon=float(mcfg["ppl_epsilon"]),
                n_pairs=int(mcfg["ppl_pairs"]), seed=seed,
                batch=int(mcfg["ppl_batch"])))
            rows.append(("ppl", space, variant, embedder_name,
                         int(mcfg["ppl_pairs"]), seed, value))
        else:  # ls_z / ls_w
            space = name[3:]
            result = met.linear_separability(
                probe, dat.toy_attribute_oracles(), met.SeparabilityConfig(
                    space=space, n_samples=int(mcfg["ls_samples"]),
                    keep_fraction=float(mcfg["ls_keep_fraction"]),
                    train_steps=int(mcfg["ls_train_steps"]), seed=seed))
            for skipped in result.skipped:
                print(f"warning: ls_{space}: attribute {skipped} skipped "
                      f"(single class after filtering)", file=sys.stderr)
            rows.append(("ls", space, "", "", int(mcfg["ls_samples"]),
                         seed, result.score))

    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    header = "metric,space,variant,embedder,n,seed,value"
    lines = [header]
    for metric, space, variant, emb, n, sd, value in rows:
        lines.append(f"{metric},{space},{variant},{emb},{n},{sd},{_format_value(value)}")
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    widths = (10, 6, 8, 11, 7, 6)
    print("".join(h.ljust(w) for h, w in zip(
        ("metric", "space", "variant", "embedder", "n", "seed"), widths)) + "value")
    for metric, space, variant, emb, n, sd, value in rows:
        print("".join(str(v).ljust(w) for v, w in zip(
            (metric, space, variant, emb, n, sd), widths)) + _format_value(value))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _build_parser() -> _Parser:
    parser = _Parser(prog="tinystyle",
                     description="Small-scale style-based GAN pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="run configuration file (INI)")
        p.add_argument("--set", action="append", default=[], metavar="SEC.KEY=VAL",
                       help="override a config value (repeatable)")

    p = sub.add_parser("prepare", help="filter/crop a corpus into shards")
    common(p)
    p.add_argument("--input", help="directory of input images")
    p.add_argument("--detections", help="JSON-lines detection sidecar")
    p.add_argument("--heuristic-detector", action="store_true",
                   help="use the built-in blob detector instead of a sidecar")
    p.add_argument("--toy", action="store_true",
                   help="emit the procedural toy corpus instead of reading images")
    p.add_argument("--out", required=True, help="output shard directory")

    p = sub.add_parser("train", help="adversarial training on prepared shards")
    common(p)
    p.add_argument("--shards", required=True, help="shard directory")
    p.add_argument("--run-dir", required=True, help="run output directory")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--seed", type=int, help="override train.seed")

    p = sub.add_parser("generate", help="sample image grids from a snapshot")
    common(p)
    p.add_argument("--snapshot", required=True, help="snapshot file (.sgfw1)")
    p.add_argument("--mode", required=True,
                   choices=("grid", "trunc_sweep", "noise_ablation"))
    p.add_argument("--out", required=True, help="output image directory")
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--psi", type=float, help="truncation strength for grid mode")
    p.add_argument("--psis", help="comma list of psi values for trunc_sweep")

    p = sub.add_parser("eval", help="compute metric rows for a snapshot")
    common(p)
    p.add_argument("--snapshot", required=True, help="snapshot file (.sgfw1)")
    p.add_argument("--metrics", required=True,
                   help=f"comma list from: {', '.join(METRIC_NAMES)}")
    p.add_argument("--real-shards", help="real shard directory (fid, classifier)")
    p.add_argument("--out", required=True, help="metric report CSV path")

    return parser


_COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit as exc:  # argparse errors already printed
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, NotADirectoryError, IsADirectoryError,
            PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
