"""Command-line entry point: ``sense <subcommand> ...``.

Exit codes: 0 ok, 2 configuration error, 3 input or format error,
4 invariant breach.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from sense.errors import ConfigError, InputError, MissingFileError, SenseError

log = logging.getLogger("sense")


# -- helpers -------------------------------------------------------------


def _overrides(args) -> dict:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    return out


def _app_config(args, **extra):
    from sense.config import AppConfig

    ov = _overrides(args)
    ov.update({k: v for k, v in extra.items() if v is not None})
    cfg = AppConfig.load(args.config, ov)
    if cfg.describe():
        log.info("config overrides:\n%s", cfg.describe())
    return cfg


def _read_rgb(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"image not found: {p}")
    try:
        with Image.open(p) as im:
            return np.asarray(im.convert("RGB"))
    except UnidentifiedImageError as exc:
        raise InputError(f"{p}: not a readable image") from exc


def _disparity(args, shape):
    from sense.disparity import read_disparity_file, synthetic_disparity

    if args.disparity:
        return read_disparity_file(args.disparity, shape)
    if args.synthetic_disparity:
        return synthetic_disparity(shape, args.synthetic_disparity, args.seed or 0)
    return None


def _load_model(checkpoint, no_sdaf: bool = False):
    from sense.training import load_checkpoint, restore_model

    ckpt = load_checkpoint(checkpoint)
    if no_sdaf and ckpt.model_config.get("sdaf_variant", "off") != "off":
        raise ConfigError(f"--no-sdaf given, but {checkpoint} was trained with SDAF "
                          f"({ckpt.model_config['sdaf_variant']}); its weights need the SDAF head")
    return restore_model(ckpt)


def _emit(rows: dict, fmt: str = "tsv") -> None:
    """Delimited ``key<TAB>value`` lines on stdout."""
    for k, v in rows.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        print(f"{k}\t{v}")


# -- subcommands ---------------------------------------------------------


def cmd_synth(args) -> int:
    from sense.dataset import synth_corpus, synth_zeroshot

    out = Path(args.out_dir)
    if args.zeroshot:
        synth_zeroshot(args.n, args.resolution, args.seed or 0, out)
        manifest = out / "zeroshot.jsonl"
    else:
        synth_corpus(args.n, args.resolution, args.seed or 0, out)
        manifest = out / "manifest.jsonl"
    _emit({"manifest": str(manifest), "samples": args.n})
    return 0


def cmd_train(args) -> int:
    from sense import plotting
    from sense.dataset import load_manifest
    from sense.model import SenseModel
    from sense.training import fit, make_checkpoint, save_checkpoint

    cfg = _app_config(args, **{"train.total_steps": args.steps, "paths.manifest": args.manifest,
                               "paths.out_dir": args.out_dir})
    manifest = cfg["paths.manifest"]
    if not manifest:
        raise ConfigError("no manifest: pass --manifest or set paths.manifest")
    out = Path(cfg["paths.out_dir"] or "runs/train")
    out.mkdir(parents=True, exist_ok=True)
    samples = load_manifest(manifest)
    tcfg = cfg.train()
    model = SenseModel(cfg.model())
    result = fit(model, samples, tcfg, log_path=out / "train_log.jsonl")
    ckpt_path = out / "checkpoint.pt"
    save_checkpoint(make_checkpoint(model, tcfg, result.state), ckpt_path)
    fig = plotting.loss_curve(result.losses, result.lrs, out / "loss.png")
    _emit({"checkpoint": str(ckpt_path), "log": str(out / "train_log.jsonl"), "figure": str(fig),
           "steps": len(result.losses), "initial_loss": result.losses[0], "final_loss": result.losses[-1]})
    return 0


def cmd_infer(args) -> int:
    from sense import plotting
    from sense.model import predict_binary

    model = _load_model(args.checkpoint, args.no_sdaf)
    left, right = _read_rgb(args.left), _read_rgb(args.right)
    res = model.cfg.resolution
    if left.shape[:2] != (res, res) or right.shape[:2] != (res, res):
        raise InputError(f"image is {left.shape[1]}x{left.shape[0]} but the model takes {res}x{res}; "
                         f"use `sense segment` for tiled inference on other sizes")
    disp = _disparity(args, left.shape[:2]) if model.cfg.sdaf_enabled else None
    if model.cfg.sdaf_enabled and disp is None:
        raise InputError("this checkpoint uses SDAF: pass --disparity or --synthetic-disparity")
    prob = predict_binary(left, right, args.prompt, disp, model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(prob * 255).astype(np.uint8), mode="L").save(out)
    rows = {"probability_png": str(out), "mean_probability": float(prob.mean())}
    if args.overlay:
        tint = left.astype(np.float64)
        tint[..., 0] = tint[..., 0] * (1 - prob) + 255 * prob
        Image.fromarray(tint.round().astype(np.uint8)).save(args.overlay)
        rows["overlay_png"] = args.overlay
    if args.figure:
        rows["figure"] = str(plotting.probability_panel(left, prob, args.figure, args.prompt))
    _emit(rows)
    return 0


def cmd_segment(args) -> int:
    from sense import plotting
    from sense.disparity import write_dsp1
    from sense.tiling import multilabel_segment

    cfg = _app_config(args)
    model = _load_model(args.checkpoint, args.no_sdaf)
    if args.patch != model.cfg.resolution:
        raise ConfigError(f"--patch {args.patch} does not match the checkpoint resolution {model.cfg.resolution}")
    prompts_path = Path(args.prompts)
    if not prompts_path.exists():
        raise MissingFileError(f"prompt file not found: {prompts_path}")
    prompts = [ln.strip() for ln in prompts_path.read_text().splitlines() if ln.strip()]
    if not prompts:
        raise InputError(f"{prompts_path} holds no prompts")
    left, right = _read_rgb(args.left), _read_rgb(args.right)
    disp = _disparity(args, left.shape[:2]) if model.cfg.sdaf_enabled else None
    if model.cfg.sdaf_enabled and disp is None:
        raise InputError("this checkpoint uses SDAF: pass --disparity or --synthetic-disparity")
    seg = multilabel_segment(left, right, prompts, model, cfg.crf(), disparity=disp, use_crf=args.crf)
    palette = None
    if args.palette:
        try:
            palette = {int(k): v for k, v in json.loads(Path(args.palette).read_text()).items()}
        except (OSError, ValueError) as exc:
            raise InputError(f"{args.palette}: unreadable palette ({exc})") from exc
    rows = {"classes": len(prompts), "height": left.shape[0], "width": left.shape[1]}
    if args.out_labels:
        if len(prompts) > 256:
            raise InputError("label PNG holds at most 256 classes")
        Path(args.out_labels).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(seg.labels.astype(np.uint8), mode="L").save(args.out_labels)
        rows["labels_png"] = args.out_labels
    if args.out_probs:
        write_dsp1(args.out_probs, np.moveaxis(seg.probs, -1, 0))
        rows["probs_dsp"] = args.out_probs
    if args.figure:
        rows["figure"] = str(plotting.label_map(seg.labels, prompts, args.figure, palette))
    for j, name in enumerate(prompts):
        rows[f"fraction[{name}]"] = float((seg.labels == j).mean())
    _emit(rows)
    return 0


def cmd_evaluate(args) -> int:
    from sense import plotting

    model = _load_model(args.checkpoint)
    figures = Path(args.figures) if args.figures else None
    if args.task == "referring":
        from sense.dataset import _as_loaded, load_manifest
        from sense.evaluation import evaluate_referring, predict_samples

        samples = _as_loaded(load_manifest(args.manifest))
        report = evaluate_referring(model, samples, args.threshold, args.foreground_only)
        if figures:
            probs = predict_samples(model, samples[:1])
            plotting.probability_panel(samples[0].left, probs[0], figures / "example.png", samples[0].phrase,
                                       samples[0].mask)
    else:
        from sense.evaluation import zero_shot_miou
        from sense.dataset import _read_image, load_zeroshot_manifest, read_labels
        from sense.disparity import read_disparity_file
        from sense.tiling import multilabel_segment

        if not args.classes:
            raise ConfigError("--task zeroshot needs --classes <file: one class prompt per line>")
        classes = [c.strip() for c in Path(args.classes).read_text().splitlines() if c.strip()]
        cfg = _app_config(args)
        segs, gts = [], []
        for s in load_zeroshot_manifest(args.manifest):
            left, right = _read_image(s.left_path), _read_image(s.right_path)
            disp = read_disparity_file(s.disparity_path, left.shape[:2]) if s.disparity_path else None
            seg = multilabel_segment(left, right, classes, model, cfg.crf(), disparity=disp, use_crf=args.crf)
            segs.append(seg.labels)
            gts.append(read_labels(s.label_path))
        report = zero_shot_miou(segs, gts, classes)
        if figures:
            plotting.label_map(segs[0], classes, figures / "example_labels.png")
    out = report.to_dict()
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(out, indent=2))
    _emit({k: v for k, v in out.items() if not isinstance(v, dict)})
    for k, v in out["per_class_iou"].items():
        print(f"iou[{k}]\t{v:.6g}")
    return 0


def cmd_ablate(args) -> int:
    import yaml

    from sense import plotting
    from sense.ablation import ABLATION_GRID, AblationSettings, Cell, directional_check, format_table, run_ablation, to_csv

    if args.grid:
        try:
            spec = yaml.safe_load(Path(args.grid).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"{args.grid}: unreadable grid ({exc})") from exc
        if not isinstance(spec, list):
            raise ConfigError(f"{args.grid}: grid must be a list of cells")
        cells = [Cell.parse(c) for c in spec]
    else:
        cells = list(ABLATION_GRID)
    seeds = tuple(range(args.seed or 0, (args.seed or 0) + args.seeds))
    settings = AblationSettings(resolution=args.resolution, n_train=args.n_train, n_eval=args.n_eval,
                                steps=args.steps, lr=args.lr, seeds=seeds,
                                corpus_dir=str(Path(args.out_dir) / "corpus"))
    results = run_ablation(cells, settings)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table_csv = Path(args.out_table) if args.out_table else out / "ablation.csv"
    table_csv.write_text(to_csv(results))
    text = format_table(results)
    (out / "ablation.txt").write_text(text + "\n")
    fig = plotting.ablation_bars([r.row() for r in results], out / "ablation.png")
    print(to_csv(results), end="")
    print(text)
    if any(r.cell.is_default for r in results) and any(r.cell == Cell(sdaf="off") for r in results):
        ok, diff = directional_check(results)
        print(f"directional_check\t{'pass' if ok else 'fail'}\tAP(off)-AP(default)={diff:+.4f}")
    print(f"figure\t{fig}")
    return 0


def cmd_bench(args) -> int:
    from sense import plotting
    from sense.dataset import render_scene
    from sense.disparity import read_disparity_file, synthetic_disparity
    from sense.evaluation import benchmark
    from sense.model import ModelConfig, SenseModel

    if args.checkpoint:
        model = _load_model(args.checkpoint)
    else:
        model = SenseModel(_app_config(args).model())
    res = model.cfg.resolution
    if args.left:
        left, right = _read_rgb(args.left), _read_rgb(args.right)
    else:
        left, right, *_ = render_scene(np.random.default_rng(args.seed or 0), res)
    if args.disparity:
        disparity_fn = lambda: read_disparity_file(args.disparity, left.shape[:2]).values  # noqa: E731
    else:
        disparity_fn = lambda: synthetic_disparity(left.shape[:2], "random-smooth", args.seed or 0).values  # noqa: E731
    runs = []
    for _ in range(args.runs):
        rep = benchmark(model, left, right, args.prompt, disparity_fn, repeats=args.repeats, warmup=args.warmup)
        runs.append(rep.to_dict())
    report = {"runs": runs, "resolution": res,
              "without_le_with": all(r["total_without_disparity_ms"] <= r["total_ms"] for r in runs)}
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(report, indent=2))
    print("run\twith_disparity_ms\twithout_disparity_ms\tdisparity_ms\tencode_ms\tdecode_ms\trepeats")
    for i, r in enumerate(runs):
        print(f"{i}\t{r['total_ms']:.3f}\t{r['total_without_disparity_ms']:.3f}\t{r['disparity_ms']:.3f}\t"
              f"{r['encode_ms']:.3f}\t{r['decode_ms']:.3f}\t{r['repeats']}")
    for name, (with_ms, without_ms) in runs[0]["reference_ms"].items():
        print(f"reference\t{name}\t{with_ms}\t{without_ms}\t(published GPU figures, context only)")
    print(f"hardware\t{runs[0]['hardware']}")
    if args.figure:
        print(f"figure\t{plotting.runtime_bars(runs[0], args.figure)}")
    return 0


# -- parser --------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file (sections backbone, model, train, crf, paths)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one dotted config key, e.g. --set train.lr=3e-3 (repeatable)")
    p.add_argument("--seed", type=int, help="seed for every random stream (default 0)")


def _disparity_args(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--disparity", help="disparity file (PFM or DSP1) aligned with the left view")
    g.add_argument("--synthetic-disparity", choices=("planes", "ramps", "random-smooth"),
                   help="generate a synthetic disparity raster instead of reading a file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sense", description="Stereo open-vocabulary segmentation toolkit.")
    parser.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic stereo corpus and its manifest")
    p.add_argument("--n", type=int, default=16, help="number of samples")
    p.add_argument("--resolution", type=int, default=352)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--zeroshot", action="store_true", help="write label rasters for multi-label evaluation")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train fusion, decoder and SDAF on a manifest")
    _common(p)
    p.add_argument("--manifest", help="line-delimited JSON manifest (overrides paths.manifest)")
    p.add_argument("--out-dir", help="directory for checkpoint, log and loss figure (overrides paths.out_dir)")
    p.add_argument("--steps", type=int, help="number of optimizer steps (overrides train.total_steps)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="sigmoid probability map for one prompt at model resolution")
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    _disparity_args(p)
    p.add_argument("--prompt", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="grayscale probability PNG")
    p.add_argument("--overlay", help="optional probability-tinted left view PNG")
    p.add_argument("--figure", help="optional matplotlib panel (left, probability, overlay)")
    p.add_argument("--no-sdaf", action="store_true", help="refuse checkpoints that need disparity")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("segment", help="tiled multi-label segmentation of a full-resolution pair")
    _common(p)
    p.add_argument("--left", required=True)
    p.add_argument("--right", required=True)
    _disparity_args(p)
    p.add_argument("--prompts", required=True, help="text file, one prompt per line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--patch", type=int, choices=(352, 512), default=352, help="window size (model resolution)")
    p.add_argument("--crf", dest="crf", action="store_true", default=True, help="refine with the dense CRF (default)")
    p.add_argument("--no-crf", dest="crf", action="store_false", help="skip CRF refinement")
    p.add_argument("--out-labels", help="PNG with one label index per pixel")
    p.add_argument("--out-probs", help="DSP1 float volume [classes, H, W]")
    p.add_argument("--palette", help="optional JSON mapping label index to [R, G, B] for --figure")
    p.add_argument("--figure", help="optional color-coded label figure")
    p.add_argument("--no-sdaf", action="store_true", help="refuse checkpoints that need disparity")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="referring or zero-shot metrics for a checkpoint")
    _common(p)
    p.add_argument("--task", choices=("referring", "zeroshot"), required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", help="JSON report path")
    p.add_argument("--classes", help="zero-shot class prompts, one per line")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--foreground-only", action="store_true", help="referring mIoU from foreground IoU only")
    p.add_argument("--crf", dest="crf", action="store_true", default=True, help="CRF in zero-shot mode (default)")
    p.add_argument("--no-crf", dest="crf", action="store_false")
    p.add_argument("--figures", help="directory for example figures")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score an ablation grid on synthetic data")
    p.add_argument("--grid", help="YAML list of cells {sief, sf, sdaf, backbone}; default: published ablation rows")
    p.add_argument("--out-dir", default="runs/ablate")
    p.add_argument("--out-table", help="CSV path (default <out-dir>/ablation.csv)")
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--steps", type=int, default=150)
    p.add_argument("--n-train", type=int, default=24)
    p.add_argument("--n-eval", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-2, help="peak learning rate per cell")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds, starting at --seed")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="per-stage runtime with and without disparity")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint to time (default: freshly initialized model)")
    p.add_argument("--left")
    p.add_argument("--right")
    p.add_argument("--disparity", help="disparity file to load on every query")
    p.add_argument("--prompt", default="red circle")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--runs", type=int, default=1, help="independent benchmark runs")
    p.add_argument("--report", help="JSON report path")
    p.add_argument("--figure", help="optional runtime bar chart")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SenseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InputError.exit_code


if __name__ == "__main__":
    sys.exit(main())
