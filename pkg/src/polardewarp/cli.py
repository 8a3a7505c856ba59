"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 validation or tolerance failure,
3 I/O error. Every run is deterministic given its flags and seed; the fully
resolved configuration is logged to stderr and, for commands with an output
directory, echoed to ``run.cfg``. Flag values take precedence over the
optional ``key=value`` config file, which takes precedence over defaults;
unknown config keys are rejected.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io as pio
from .checks import run_gradient_checks
from .fit import ControlPointFitter, DewarpPredictor, dewarp_image
from .losses import LossWeights
from .metrics import MetricReport, ad_simplified, cer, edit_distance, ld_exact, ms_ssim
from .synth import DeformationSpec, make_suite, render_sample


class UsageError(Exception):
    pass


class ToleranceError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise UsageError(message)


def _load_config(path: str | None) -> dict[str, str]:
    if path is None:
        return {}
    return pio.read_kv(path, "PCFG1")


def _resolve(args: argparse.Namespace, defaults: dict, config: dict[str, str]) -> dict:
    """Merge flag values over config-file values over defaults."""
    unknown = set(config) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = flag
        elif key in config:
            raw = config[key]
            caster = type(default) if default is not None else str
            resolved[key] = caster(raw) if caster is not bool else raw.lower() in ("1", "true", "yes")
        else:
            resolved[key] = default
    return resolved


def _log_config(name: str, resolved: dict, out_dir: Path | None) -> None:
    print(f"[{name}] " + " ".join(f"{k}={v}" for k, v in resolved.items()), file=sys.stderr)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        pio.write_kv(out_dir / "run.cfg", "PCFG1", resolved)


def _weights_from(cfg: dict) -> LossWeights:
    return LossWeights(
        alpha1=cfg["alpha1"],
        alpha2=cfg["alpha2"],
        alpha3=cfg["alpha3"],
        alpha4=cfg["alpha4"],
        gamma=cfg["gamma"],
        focal_mode=cfg["focal_mode"],
    )


_WEIGHT_DEFAULTS = {
    "alpha1": 0.1,
    "alpha2": 1.0,
    "alpha3": 1.0,
    "alpha4": 0.5,
    "gamma": 2.0,
    "focal_mode": "iou-focal",
}


def _add_weight_flags(p: argparse.ArgumentParser) -> None:
    for i in range(1, 5):
        p.add_argument(f"--alpha{i}", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--focal-mode", dest="focal_mode", choices=("iou-focal", "literal"))


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args) -> int:
    defaults = {
        "count": 20,
        "seed": 7,
        "family": "suite",
        "amplitude": 0.05,
        "frequency": 1.0,
        "height": 256,
        "width": 256,
        "grid": 16,
        "contour_points": 64,
        "layers": 1,
        "jobs": 1,
        "out": None,
    }
    cfg = _resolve(args, defaults, _load_config(args.config))
    if cfg["out"] is None:
        raise UsageError("--out is required")
    out = Path(cfg["out"])
    _log_config("synth", cfg, out)

    def build(i: int):
        rng = np.random.default_rng([cfg["seed"], i])
        spec = DeformationSpec(
            family=cfg["family"],
            amplitude=cfg["amplitude"],
            frequency=cfg["frequency"],
            seed=int(rng.integers(0, 2**63)),
        )
        return render_sample(
            spec,
            doc_seed=int(rng.integers(0, 2**63)),
            image_shape=(cfg["height"], cfg["width"]),
            grid_shape=(cfg["grid"], cfg["grid"]),
            contour_points=cfg["contour_points"],
            contour_layers=cfg["layers"],
            background_seed=int(rng.integers(0, 2**63)),
        )

    if cfg["family"] == "suite":
        samples = make_suite(
            count=cfg["count"],
            seed=cfg["seed"],
            image_shape=(cfg["height"], cfg["width"]),
            grid_shape=(cfg["grid"], cfg["grid"]),
            contour_points=cfg["contour_points"],
            contour_layers=cfg["layers"],
            max_amplitude=cfg["amplitude"],
        )
        for i, sample in enumerate(samples):
            pio.write_sample(out / f"sample_{i:03d}", sample)
    else:
        indices = range(cfg["count"])
        if cfg["jobs"] > 1:
            with ThreadPoolExecutor(max_workers=cfg["jobs"]) as pool:
                samples = list(pool.map(build, indices))
        else:
            samples = [build(i) for i in indices]
        for i, sample in enumerate(samples):
            pio.write_sample(out / f"sample_{i:03d}", sample)
    print(f"wrote {cfg['count']} samples to {out}")
    return 0


# ---------------------------------------------------------------------------
# fit


def cmd_fit(args) -> int:
    defaults = {
        "sample": None,
        "out": None,
        "iterations": 2000,
        "step": 1e-2,
        "init": "lattice",
        "seed": 0,
        **_WEIGHT_DEFAULTS,
    }
    cfg = _resolve(args, defaults, _load_config(args.config))
    if cfg["sample"] is None or cfg["out"] is None:
        raise UsageError("--sample and --out are required")
    out = Path(cfg["out"])
    _log_config("fit", cfg, out)
    sample = pio.load_sample(cfg["sample"])
    fitter = ControlPointFitter(
        iterations=cfg["iterations"],
        step=cfg["step"],
        init=cfg["init"],
        seed=cfg["seed"],
        weights=_weights_from(cfg),
    ).fit(sample)
    pio.save_grid(out / "grid.pdoc", fitter.grid_)
    pio.save_contours(out / "contour.pdoc", fitter.contours_)
    np.savetxt(out / "trace.csv", fitter.loss_trace_, header="loss", comments="")
    rmse = float(np.sqrt(np.mean((fitter.grid_.xy - sample.gt_grid.xy) ** 2)))
    record = {
        "final_loss": float(fitter.loss_trace_[-1]),
        "initial_loss": float(fitter.loss_trace_[0]),
        "mapping_rmse": rmse,
    }
    print(json.dumps(record, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    defaults = {
        "data": None,
        "out": None,
        "epochs": 30,
        "step": 1e-3,
        "seed": 0,
        "hidden": 256,
        "input_side": 32,
        **_WEIGHT_DEFAULTS,
    }
    cfg = _resolve(args, defaults, _load_config(args.config))
    if cfg["data"] is None or cfg["out"] is None:
        raise UsageError("--data and --out are required")
    out = Path(cfg["out"])
    _log_config("train", cfg, out.parent if out.suffix else out)
    dirs = sorted(d for d in Path(cfg["data"]).iterdir() if d.is_dir())
    if not dirs:
        raise ValueError(f"no sample directories under {cfg['data']}")
    samples = [pio.load_sample(d) for d in dirs]
    g = samples[0].gt_grid
    c = samples[0].gt_contours
    predictor = DewarpPredictor(
        grid_shape=(g.h, g.w),
        contour_shape=c.radii.shape,
        input_side=cfg["input_side"],
        hidden=cfg["hidden"],
        epochs=cfg["epochs"],
        step=cfg["step"],
        seed=cfg["seed"],
        weights=_weights_from(cfg),
    ).fit(samples)
    pio.save_predictor(out, predictor)
    record = {
        "epochs": cfg["epochs"],
        "first_loss": float(predictor.loss_history_[0]),
        "last_loss": float(predictor.loss_history_[-1]),
        "samples": len(samples),
    }
    print(json.dumps(record, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# dewarp


def cmd_dewarp(args) -> int:
    defaults = {
        "image": None,
        "model": None,
        "grid": None,
        "out": None,
        "height": 0,
        "width": 0,
        "coarse": 128,
        "fill": 0.0,
    }
    cfg = _resolve(args, defaults, _load_config(args.config))
    if cfg["image"] is None or cfg["out"] is None:
        raise UsageError("--image and --out are required")
    if cfg["model"] is None and cfg["grid"] is None:
        raise UsageError("either --model or --grid is required")
    _log_config("dewarp", cfg, None)
    image = pio.read_image(cfg["image"])
    grid = pio.load_grid(cfg["grid"]) if cfg["grid"] is not None else None
    predictor = pio.load_predictor(cfg["model"]) if cfg["model"] is not None else None
    out_shape = None
    if cfg["height"] and cfg["width"]:
        out_shape = (cfg["height"], cfg["width"])
    result = dewarp_image(
        image,
        predictor=predictor,
        grid=grid,
        out_shape=out_shape,
        coarse=(cfg["coarse"], cfg["coarse"]),
        fill=cfg["fill"],
    )
    pio.write_image(cfg["out"], result)
    print(f"wrote {cfg['out']}")
    return 0


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    defaults = {
        "pred": None,
        "gt": None,
        "pred_map": None,
        "gt_map": None,
        "mask": None,
        "hyp_text": None,
        "ref_text": None,
    }
    cfg = _resolve(args, defaults, _load_config(args.config))
    _log_config("eval", cfg, None)
    report = MetricReport()
    if cfg["pred"] is not None and cfg["gt"] is not None:
        report.ms_ssim = ms_ssim(pio.read_image(cfg["pred"]), pio.read_image(cfg["gt"]))
    if cfg["pred_map"] is not None and cfg["gt_map"] is not None:
        pred_map = pio.load_map(cfg["pred_map"])
        gt_map = pio.load_map(cfg["gt_map"])
        mask = (
            pio.read_image(cfg["mask"]) > 0.5
            if cfg["mask"] is not None
            else np.ones(pred_map.shape, dtype=bool)
        )
        report.ld = ld_exact(pred_map, gt_map, mask)
        if cfg["gt"] is not None:
            ref = pio.read_image(cfg["gt"])
            if ref.shape[:2] == pred_map.shape:
                report.ad = ad_simplified(pred_map, gt_map, ref, mask)
    if cfg["hyp_text"] is not None and cfg["ref_text"] is not None:
        hyp = Path(cfg["hyp_text"]).read_text(encoding="utf-8")
        ref = Path(cfg["ref_text"]).read_text(encoding="utf-8")
        report.ed = edit_distance(hyp, ref)
        report.cer = cer(hyp, ref)
    values = report.as_dict()
    if not values:
        raise UsageError("nothing to evaluate: supply image, map or text pairs")
    print(json.dumps(values, sort_keys=True))
    width = max(len(k) for k in values)
    for key, value in sorted(values.items()):
        print(f"  {key:<{width}}  {value}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    defaults = {"seeds": 100, "epsilon": 1e-6, "tolerance": 1e-4}
    cfg = _resolve(args, defaults, _load_config(args.config))
    _log_config("gradcheck", cfg, None)
    worst = run_gradient_checks(seeds=cfg["seeds"], epsilon=cfg["epsilon"])
    width = max(len(k) for k in worst)
    failed = []
    for name, err in sorted(worst.items()):
        status = "ok" if err < cfg["tolerance"] else "FAIL"
        print(f"  {name:<{width}}  {err:.3e}  {status}")
        if err >= cfg["tolerance"]:
            failed.append(name)
    print(f"max relative error: {max(worst.values()):.3e}")
    if failed:
        raise ToleranceError(f"gradient check failed for: {failed}")
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="polardewarp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic warped-document samples")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--family", choices=("suite", "perspective", "fold-sine", "curl-cylinder", "tps-random", "composite"))
    p.add_argument("--amplitude", type=float)
    p.add_argument("--frequency", type=float)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--grid", type=int)
    p.add_argument("--contour-points", dest="contour_points", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit control points to one sample")
    p.add_argument("--sample")
    p.add_argument("--out")
    p.add_argument("--iterations", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--init", choices=("lattice", "perturbed-lattice", "ground-truth"))
    p.add_argument("--seed", type=int)
    _add_weight_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", help="train the two-head predictor on a sample directory")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--step", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--input-side", dest="input_side", type=int)
    _add_weight_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("dewarp", help="dewarp an image with a model or an explicit grid")
    p.add_argument("--image")
    p.add_argument("--model")
    p.add_argument("--grid")
    p.add_argument("--out")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--coarse", type=int)
    p.add_argument("--fill", type=float)
    p.set_defaults(func=cmd_dewarp)

    p = sub.add_parser("eval", help="compute metrics for image/map/text pairs")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--pred-map", dest="pred_map")
    p.add_argument("--gt-map", dest="gt_map")
    p.add_argument("--mask")
    p.add_argument("--hyp-text", dest="hyp_text")
    p.add_argument("--ref-text", dest="ref_text")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify analytic loss gradients by finite differences")
    p.add_argument("--seeds", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--tolerance", type=float)
    p.set_defaults(func=cmd_gradcheck)

    for sp in sub.choices.values():
        sp.add_argument("--config", help="key=value config file (PCFG1 header)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ToleranceError, pio.FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
