"""Command line: ``sofsim {evaluate|train|predict|serve|export-plot|synth}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .baselines import concat_predictions
from .data import DataError, DatasetSource, FeatureArrays, leave_one_out_splits, load_manifest
from .geometry import AngleBinPartition, GeometryError
from .metrics import MIN_SCOPES, EvalReport, evaluate_predictions
from .ndiff import CheckpointError
from .plotdata import export_plot_data
from .prediction import PredictionSet
from .predictors import PREDICTORS, SofganPredictor, make_predictor, predict_scenes
from .sfm import SfmParams
from .sofgan import ModelConfig, load_model, train

log = logging.getLogger("sofsim")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    command: str
    seed: int
    predictor: str | None = None
    manifest: str | None = None
    output: str | None = None
    latency_budget_ms: float = 100.0
    sfm: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)


def load_config(path) -> tuple[SfmParams, ModelConfig]:
    """JSON file with optional ``"sfm"`` and ``"model"`` sections of field overrides."""
    if path is None:
        return SfmParams(), ModelConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    unknown = set(raw) - {"sfm", "model"}
    if unknown:
        raise DataError(f"config {path}: unknown sections {sorted(unknown)}")
    try:
        return SfmParams(**raw.get("sfm", {})), ModelConfig.from_dict(raw.get("model", {}))
    except (TypeError, ValueError) as exc:
        raise DataError(f"config {path}: {exc}") from None


def _source(args) -> DatasetSource:
    path = Path(args.annotations)
    return DatasetSource(
        name=path.stem,
        annotations=path.resolve(),
        obstacles=Path(args.obstacles).resolve() if args.obstacles else None,
        homography=Path(args.homography).resolve() if args.homography else None,
        pixel_coordinates=args.pixel,
    )


def _load(source: DatasetSource, params: SfmParams, m_bins: int):
    scenes = source.load(params, AngleBinPartition(m_bins))
    if not scenes:
        raise DataError(f"{source.name}: no complete 20-frame windows")
    return scenes


def _resolve_out(path) -> Path:
    out = Path(path).resolve()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(out: Path, cfg: RunConfig) -> None:
    (out / "run_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")


# --- commands -----------------------------------------------------------------


def cmd_evaluate(args) -> int:
    params, model_cfg = load_config(args.config)
    if args.manifest:
        sources = load_manifest(args.manifest)
    elif args.annotations:
        src = _source(args)
        sources = {src.name: src}
    else:
        raise UsageError("evaluate needs --manifest or --annotations")
    if args.predictor == "sofgan" and not (args.checkpoint or args.checkpoint_dir or args.train_epochs):
        raise UsageError("sofgan evaluation needs --checkpoint, --checkpoint-dir or --train-epochs")
    out = _resolve_out(args.out)
    cfg = RunConfig("evaluate", args.seed, args.predictor, args.manifest, str(out),
                    sfm=asdict(params), model=model_cfg.to_dict())
    _write_run_config(out, cfg)
    log.info("evaluate: predictor=%s seed=%d datasets=%s", args.predictor, args.seed, list(sources))
    m_bins = model_cfg.m_bins
    if args.checkpoint:
        m_bins = load_model(args.checkpoint).config.m_bins
    loaded = {name: _load(src, params, m_bins) for name, src in sources.items()}
    report = EvalReport(args.predictor, 0, args.seed, args.min_scope)
    if args.predictor == "sofgan" and args.train_epochs:
        if len(loaded) < 2:
            raise DataError("leave-one-out training needs at least 2 datasets")
        folds = leave_one_out_splits(list(loaded))
    else:
        folds = [([], name) for name in loaded]
    for fold, (train_names, test_name) in enumerate(folds):
        checkpoint = args.checkpoint
        if args.checkpoint_dir:
            checkpoint = Path(args.checkpoint_dir) / f"{test_name}.ckpt"
            if not checkpoint.is_file():
                raise DataError(f"missing checkpoint for held-out set {test_name}: {checkpoint}")
        if train_names:
            scenes = [s for name in train_names for s in loaded[name]]
            checkpoint = out / f"{test_name}.ckpt"
            train(scenes, model_cfg, args.train_epochs, seed=args.seed + fold, checkpoint=checkpoint,
                  log_path=out / f"{test_name}.train_log.jsonl")
        predictor = make_predictor(args.predictor, checkpoint, args.k, args.oversample, args.seed + fold, params,
                                   args.angle_std)
        pred, feats = predict_scenes(predictor, loaded[test_name])
        report.k = pred.k
        report.results.append(evaluate_predictions(test_name, pred, feats.x_pred, args.min_scope))
    text, _ = report.write(out)
    sys.stdout.write(text.read_text())
    return EXIT_OK


def cmd_train(args) -> int:
    params, model_cfg = load_config(args.config)
    overrides = {}
    if args.no_cvae:
        overrides["use_cvae"] = False
    if args.no_augment:
        overrides["augment"] = False
    for name in ("batch", "k_samples"):
        if getattr(args, name) is not None:
            overrides[name] = getattr(args, name)
    model_cfg = model_cfg.replace(**overrides)
    sources = load_manifest(args.manifest)
    if args.holdout and args.holdout not in sources:
        raise DataError(f"held-out dataset {args.holdout!r} is not in the manifest")
    names = [n for n in (args.datasets.split(",") if args.datasets else sources) if n != args.holdout]
    missing = set(names) - set(sources)
    if missing:
        raise DataError(f"datasets not in manifest: {sorted(missing)}")
    if not names:
        raise DataError("no training datasets selected")
    scenes = [s for name in names for s in _load(sources[name], params, model_cfg.m_bins)]
    out = _resolve_out(args.out)
    cfg = RunConfig("train", args.seed, "sofgan", args.manifest, str(out), sfm=asdict(params),
                    model=model_cfg.to_dict())
    _write_run_config(out, cfg)
    log.info("train: %d scenes from %s, epochs=%d seed=%d", len(scenes), names, args.epochs, args.seed)
    _, history = train(scenes, model_cfg, args.epochs, seed=args.seed, checkpoint=out / "model.ckpt",
                       log_path=out / "train_log.jsonl")
    last = history[-1]
    print(f"trained {args.epochs} epochs: variety {history[0].variety:.4f} -> {last.variety:.4f}; "
          f"checkpoint {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    params, model_cfg = load_config(args.config)
    m_bins = load_model(args.checkpoint).config.m_bins if args.checkpoint else model_cfg.m_bins
    scenes = _load(_source(args), params, m_bins)
    predictor = make_predictor(args.predictor, args.checkpoint, args.k, args.oversample, args.seed, params,
                               args.angle_std)
    pred, _ = predict_scenes(predictor, scenes)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    pred.save(args.out)
    print(f"wrote {len(pred)} pedestrians x {pred.k} samples to {args.out}")
    return EXIT_OK


def cmd_export_plot(args) -> int:
    params, model_cfg = load_config(args.config)
    pred_path = Path(args.predictions)
    if not pred_path.is_file():
        raise DataError(f"prediction file not found: {pred_path}")
    pred = PredictionSet.load(pred_path)
    if len(pred):
        feats = FeatureArrays.from_batches(_load(_source(args), params, model_cfg.m_bins))
    else:
        feats = None
    rows = export_plot_data(args.out, pred, feats)
    print(f"wrote {rows} series to {args.out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    from .geometry import load_obstacles
    from .serve import PredictionServer, serve_tcp

    params, _ = load_config(args.config)
    if args.predictor == "gt":
        raise UsageError("the ground-truth predictor cannot serve live data")
    obstacles = load_obstacles(args.obstacles) if args.obstacles else ()
    predictor = make_predictor(args.predictor, args.checkpoint, args.k, args.oversample, args.seed, params,
                               args.angle_std)
    m_bins = predictor.engine.config.m_bins if isinstance(predictor, SofganPredictor) else 4
    server = PredictionServer(predictor, obstacles, params, args.timeout, args.frame_window, m_bins)
    log.info("serve: predictor=%s seed=%d", args.predictor, args.seed)
    if args.port is None:
        server.serve(sys.stdin, sys.stdout)
        if server.latencies:
            lat = np.array(server.latencies) * 1e3
            log.info("latency ms: p50 %.1f p95 %.1f max %.1f over %d frames (%d dropped)",
                     np.percentile(lat, 50), np.percentile(lat, 95), lat.max(), len(lat), server.dropped)
    else:
        serve_tcp(server, args.host, args.port)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import write_toy_suite

    manifest = write_toy_suite(args.out, args.n, args.seed, args.sets)
    print(f"wrote {args.sets} toy datasets, manifest {manifest}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------


def _dataset_args(p, required=True):
    p.add_argument("--annotations", required=required, help="annotation file: frame ped_id x y per line")
    p.add_argument("--obstacles", help="obstacle polygons, one per line as x1,y1,x2,y2,...")
    p.add_argument("--homography", help="3x3 image-to-world homography")
    p.add_argument("--pixel", action="store_true", help="annotations are in pixels (needs --homography)")


def _predictor_args(p):
    p.add_argument("--predictor", choices=PREDICTORS, required=True)
    p.add_argument("--checkpoint", help="trained model (sofgan)")
    p.add_argument("--k", type=int, help="samples per pedestrian (default: 20, or the model's k)")
    p.add_argument("--oversample", type=int, help="generator draws before k-means selection (sofgan)")
    p.add_argument("--angle-std", type=float, default=25.0, help="heading noise in degrees (cvm20)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON config with 'sfm' and 'model' sections")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sofsim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("evaluate", help="mADE/mFDE/%%c per dataset with leave-one-out")
    p.add_argument("--manifest", help="JSON dataset manifest")
    _dataset_args(p, required=False)
    _predictor_args(p)
    p.add_argument("--checkpoint-dir", help="directory with <held-out name>.ckpt per fold")
    p.add_argument("--train-epochs", type=int, help="train a sofgan model per leave-one-out fold")
    p.add_argument("--min-scope", choices=MIN_SCOPES, default="pedestrian")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("train", help="train the model on manifest datasets")
    p.add_argument("--manifest", required=True)
    p.add_argument("--datasets", help="comma separated subset (default: all)")
    p.add_argument("--holdout", help="dataset to leave out")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--batch", type=int)
    p.add_argument("--k-samples", type=int)
    p.add_argument("--no-cvae", action="store_true", help="goal input from the attractive force instead of the CVAE")
    p.add_argument("--no-augment", action="store_true", help="disable random rotation augmentation")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict every window of one dataset")
    _dataset_args(p)
    _predictor_args(p)
    p.add_argument("--out", required=True, help="prediction JSON file")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("serve", help="streaming predictions over stdio or TCP")
    _predictor_args(p)
    p.add_argument("--obstacles")
    p.add_argument("--port", type=int, help="listen on TCP instead of stdio")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--timeout", type=float, default=5.0, help="evict agents unseen for this many seconds")
    p.add_argument("--frame-window", type=float, default=0.05, help="timestamp tolerance within a frame (s)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("export-plot", help="write observed, ground-truth and sampled series for plotting")
    _dataset_args(p)
    p.add_argument("--predictions", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_plot)

    p = sub.add_parser("synth", help="write synthetic toy datasets and a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100, help="tracks per dataset")
    p.add_argument("--sets", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"sofsim: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GeometryError, CheckpointError, FileNotFoundError) as exc:
        print(f"sofsim: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"sofsim: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
