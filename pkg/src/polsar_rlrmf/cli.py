"""Command-line front end: one subcommand per pipeline stage plus ``run-all``.

Every option can also come from a ``key=value`` file given with ``--config``;
flags on the command line win. Keys use the long option name with dashes or
underscores (``max-iter`` or ``max_iter``).
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import cnn, evaluation, mrf
from .data import FeatureImage, LabelMap, SynthConfig, normalize_bands, pauli_image, synth_generate
from .formats import FormatError, load_labels, load_raster, render_ppm, save_labels, save_raster
from .patches import denoise_image, pixel_trace
from .rlrmf import EmConfig, EmError

log = logging.getLogger("polsar_rlrmf")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


class CliError(Exception):
    def __init__(self, message, code=EXIT_VALIDATION):
        super().__init__(message)
        self.code = code


def stage_seed(global_seed: int, stage: str) -> int:
    """Independent, reproducible 32-bit seed for one stage."""
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _mog(text):
    comps = []
    for part in str(text).split(","):
        w, s = part.split(":")
        comps.append((float(w), float(s)))
    return tuple(comps)


def _pixel(text):
    i, j = str(text).split(",")
    return int(i), int(j)


# name -> (type, default, role); role is "in", "out", "opt-out", "dir" or None
SYNTH_OPTS = {
    "height": (int, 128, None), "width": (int, 128, None), "classes": (int, 6, None),
    "rank-true": (int, 2, None), "mog": (_mog, "0.9:0.01,0.1:0.3", None),
    "granularity": (float, 25.0, None), "separation": (float, 0.08, None),
    "signature-scale": (float, 0.8, None),
}
DENOISE_OPTS = {
    "window": (int, 7, None), "rank": (int, 2, None), "k": (int, 4, None),
    "max-iter": (int, 100, None), "tol": (float, 0.01, None),
}
TRAIN_OPTS = {
    "fraction": (float, 0.02, None), "epochs": (int, 60, None), "patience": (int, 10, None),
    "val-fraction": (float, 0.2, None), "lr": (float, 0.001, None), "augment": (_bool, True, None),
    "p-in": (int, 12, None),
}
REFINE_OPTS = {"alpha": (float, 5.0, None), "iters": (int, 50, None), "damping": (float, 0.5, None)}

COMMANDS = {
    "synth": {"out-noisy": (str, None, "out"), "out-clean": (str, None, "opt-out"),
              "out-truth": (str, None, "out"), **SYNTH_OPTS},
    "normalize": {"in": (str, None, "in"), "out": (str, None, "out")},
    "denoise": {"in": (str, None, "in"), "out": (str, None, "out"), **DENOISE_OPTS,
                "normalize": (_bool, False, None), "trace": (str, None, "opt-out"),
                "trace-pixel": (_pixel, None, None)},
    "pauli": {"features": (str, None, "in"), "out": (str, None, "out")},
    "train": {"features": (str, None, "in"), "truth": (str, None, "in"), "out": (str, None, "out"),
              "log": (str, None, "opt-out"), "train-labels": (str, None, "opt-out"), **TRAIN_OPTS},
    "classify": {"features": (str, None, "in"), "kind": (str, "cnn", None), "model": (str, None, None),
                 "train-labels": (str, None, None), "out-labels": (str, None, "out"),
                 "out-probs": (str, None, "opt-out")},
    "refine": {"probs": (str, None, "in"), "pauli": (str, None, "in"), "out": (str, None, "out"), **REFINE_OPTS},
    "eval": {"truth": (str, None, "in"), "train-labels": (str, None, None), "pred": (str, None, None),
             "out": (str, None, "opt-out"), "text": (str, None, "opt-out")},
    "render": {"labels": (str, None, "in"), "out": (str, None, "out")},
    "run-all": {"out-dir": (str, "run", "dir"), **SYNTH_OPTS, **DENOISE_OPTS, **TRAIN_OPTS, **REFINE_OPTS},
}
COMMON = {"seed": (int, 0, None), "threads": (int, 1, None)}

HELP = {
    "synth": "generate a synthetic scene (noisy/clean rasters and truth labels)",
    "normalize": "rescale every band to [0, 1]",
    "denoise": "robust low-rank denoising of every pixel's neighbourhood",
    "pauli": "three-band Pauli magnitudes used by the MRF edge weights",
    "train": "train the CNN on a stratified subset of the truth labels",
    "classify": "per-pixel class probabilities and argmax labels (cnn or simple)",
    "refine": "MRF refinement of a probability map by min-sum belief propagation",
    "eval": "confusion-based accuracy report for one or more label maps",
    "render": "write a label map as a colour PPM image",
    "run-all": "the whole pipeline plus the ablation report from one seed",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polsar-rlrmf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", help="key=value file supplying defaults for this command")
        for opt, (typ, default, _) in {**opts, **COMMON}.items():
            kwargs = dict(dest=opt.replace("-", "_"), default=None)
            if typ is _bool:
                p.add_argument(f"--{opt}", action=argparse.BooleanOptionalAction, **kwargs)
            elif opt == "pred":
                p.add_argument("--pred", action="append", metavar="NAME=PATH", **kwargs)
            else:
                show = f" (default {default})" if default is not None else ""
                p.add_argument(f"--{opt}", type=str, help=f"{opt}{show}", **kwargs)
        if name == "eval":
            p.epilog = "--pred may be repeated; in a config file use a comma-separated list"
    return parser


def read_config(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value")
        key, val = (x.strip() for x in line.split("=", 1))
        values[key.replace("_", "-")] = val
    return values


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge flags over config-file values over defaults, converting types."""
    opts = {**COMMANDS[command], **COMMON}
    file_vals = {}
    if args.config:
        try:
            file_vals = read_config(args.config)
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc}", EXIT_IO) from exc
        unknown = sorted(set(file_vals) - set(opts))
        if unknown:
            raise CliError(f"{args.config}: unknown keys for '{command}': {', '.join(unknown)}")
    out = {}
    for opt, (typ, default, _) in opts.items():
        val = getattr(args, opt.replace("-", "_"))
        if val is None:
            val = file_vals.get(opt, default)
            if opt == "pred" and isinstance(val, str):
                val = [v for v in val.split(",") if v]
        if val is not None and opt != "pred":
            try:
                val = typ(val)
            except (TypeError, ValueError) as exc:
                raise CliError(f"--{opt}: invalid value {val!r} ({exc})") from exc
        out[opt] = val
    if out["threads"] < 0:
        raise CliError("--threads must be >= 0")
    if out["threads"] == 0:
        out["threads"] = os.cpu_count() or 1
    return out


def validate_paths(command: str, cfg: dict) -> None:
    for opt, (_, _, role) in COMMANDS[command].items():
        val = cfg.get(opt)
        if role in ("in", "out") and val is None:
            raise CliError(f"--{opt} is required")
        if val is None:
            continue
        if role == "in" and not Path(val).is_file():
            raise CliError(f"--{opt}: no such file {val}", EXIT_IO)
        if role in ("out", "opt-out") and not Path(val).resolve().parent.is_dir():
            raise CliError(f"--{opt}: directory of {val} does not exist", EXIT_IO)
        if role == "dir" and Path(val).exists() and not Path(val).is_dir():
            raise CliError(f"--{opt}: {val} exists and is not a directory", EXIT_IO)
    if command == "classify":
        need = "model" if cfg["kind"] == "cnn" else "train-labels"
        if cfg["kind"] not in ("cnn", "simple"):
            raise CliError("--kind must be 'cnn' or 'simple'")
        if cfg[need] is None or not Path(cfg[need]).is_file():
            raise CliError(f"--kind {cfg['kind']} needs an existing --{need}", EXIT_IO)
    if command == "eval":
        if not cfg["pred"]:
            raise CliError("eval needs at least one --pred NAME=PATH")
        for item in cfg["pred"]:
            if "=" not in item:
                raise CliError(f"--pred {item!r}: expected NAME=PATH")
            if not Path(item.split("=", 1)[1]).is_file():
                raise CliError(f"--pred: no such file {item.split('=', 1)[1]}", EXIT_IO)
        if cfg["train-labels"] is not None and not Path(cfg["train-labels"]).is_file():
            raise CliError(f"--train-labels: no such file {cfg['train-labels']}", EXIT_IO)


# ---------------------------------------------------------------------------
# stages


def _synth_config(cfg, seed):
    return SynthConfig(height=cfg["height"], width=cfg["width"], num_classes=cfg["classes"],
                       r_true=cfg["rank-true"], mog=cfg["mog"], granularity=cfg["granularity"],
                       seed=seed, separation=cfg["separation"], signature_scale=cfg["signature-scale"])


def _em_config(cfg, seed):
    return EmConfig(rank=cfg["rank"], k_init=cfg["k"], max_iter=cfg["max-iter"], u_tol=cfg["tol"], seed=seed)


def cmd_synth(cfg):
    scene = synth_generate(_synth_config(cfg, stage_seed(cfg["seed"], "synth")))
    save_raster(scene.noisy, cfg["out-noisy"])
    save_labels(scene.truth, cfg["out-truth"])
    if cfg["out-clean"]:
        save_raster(scene.clean, cfg["out-clean"])


def cmd_normalize(cfg):
    img, _ = normalize_bands(load_raster(cfg["in"]))
    save_raster(img, cfg["out"])


def cmd_denoise(cfg):
    img = load_raster(cfg["in"])
    if cfg["normalize"]:
        img, _ = normalize_bands(img)
    em = _em_config(cfg, stage_seed(cfg["seed"], "denoise"))
    res = denoise_image(img, cfg["window"], em, threads=cfg["threads"])
    log.info("denoise: %d fallback pixels, mean %.1f EM iterations", res.fallback_count, res.iterations.mean())
    save_raster(res.image, cfg["out"])
    if cfg["trace"]:
        i, j = cfg["trace-pixel"] or (img.height // 2, img.width // 2)
        if not (0 <= i < img.height and 0 <= j < img.width):
            raise CliError(f"--trace-pixel {i},{j} lies outside the {img.height}x{img.width} image")
        Path(cfg["trace"]).write_text(pixel_trace(img, i, j, cfg["window"], em).to_csv())


def cmd_pauli(cfg):
    save_raster(pauli_image(load_raster(cfg["features"])), cfg["out"])


def _training_subset(truth, fraction, seed):
    idx = evaluation.stratified_sample(truth, fraction, seed)
    flat = np.zeros(truth.labels.size, dtype=np.int64)
    flat[idx] = truth.labels.ravel()[idx]
    return idx, LabelMap(flat.reshape(truth.labels.shape), truth.num_classes)


def cmd_train(cfg):
    feats = load_raster(cfg["features"])
    truth = load_labels(cfg["truth"])
    if truth.labels.shape != (feats.height, feats.width):
        raise CliError("features and truth differ in size")
    seed = stage_seed(cfg["seed"], "train")
    idx, subset = _training_subset(truth, cfg["fraction"], seed)
    rows, cols = np.divmod(idx, feats.width)
    x = cnn.training_patches(feats, cfg["p-in"], rows, cols)
    spec = cnn.CnnSpec(cfg["p-in"], feats.depth, truth.num_classes)
    tcfg = cnn.TrainConfig(learning_rate=cfg["lr"], max_epochs=cfg["epochs"], patience=cfg["patience"],
                           val_fraction=cfg["val-fraction"], augment=cfg["augment"], seed=seed)
    net, tlog = cnn.train(x, truth.labels.ravel()[idx], spec, tcfg)
    log.info("train: best epoch %d of %d", tlog.best_epoch, len(tlog.epochs))
    cnn.save_checkpoint(net, cfg["out"])
    if cfg["log"]:
        Path(cfg["log"]).write_text(tlog.to_csv())
    if cfg["train-labels"]:
        save_labels(subset, cfg["train-labels"])


def cmd_classify(cfg):
    feats = load_raster(cfg["features"])
    h, w = feats.height, feats.width
    if cfg["kind"] == "cnn":
        net = cnn.load_checkpoint(cfg["model"])
        probs = cnn.predict_map(net, feats)
        c = net.spec.num_classes
    else:
        train = load_labels(cfg["train-labels"])
        if train.labels.shape != (h, w):
            raise CliError("features and training labels differ in size")
        flat = train.labels.ravel()
        idx = np.flatnonzero(flat)
        c = train.num_classes
        model = evaluation.fit_logistic(feats.data.reshape(h * w, -1)[idx], flat[idx], c)
        probs = model.predict_proba(feats.data.reshape(h * w, -1)).reshape(h, w, c)
    save_labels(LabelMap(probs.argmax(axis=-1) + 1, c), cfg["out-labels"])
    if cfg["out-probs"]:
        save_raster(FeatureImage(probs), cfg["out-probs"])


def cmd_refine(cfg):
    probs = load_raster(cfg["probs"]).data
    # float32 storage: renormalize so every pixel sums to one again
    probs = probs / probs.sum(axis=-1, keepdims=True)
    model = mrf.build_model(probs, load_raster(cfg["pauli"]), cfg["alpha"])
    labels, e = mrf.min_sum_bp(model, cfg["iters"], cfg["damping"])
    log.info("refine: energy %.6g", e)
    save_labels(labels, cfg["out"])


def cmd_eval(cfg):
    truth = load_labels(cfg["truth"])
    if cfg["train-labels"]:
        train = load_labels(cfg["train-labels"])
        lab = truth.labels.copy()
        lab[train.labels > 0] = 0
        truth = LabelMap(lab, truth.num_classes)
    report = evaluation.AblationReport()
    for item in cfg["pred"]:
        name, path = item.split("=", 1)
        report.rows[name] = evaluation.score(load_labels(path), truth)
    text = report.to_text()
    sys.stdout.write(text)
    if cfg["out"]:
        Path(cfg["out"]).write_text(report.to_csv())
    if cfg["text"]:
        Path(cfg["text"]).write_text(text)


def cmd_render(cfg):
    render_ppm(load_labels(cfg["labels"]), cfg["out"])


def cmd_run_all(cfg):
    out = Path(cfg["out-dir"])
    out.mkdir(parents=True, exist_ok=True)
    f = {k: str(out / v) for k, v in dict(
        noisy="noisy.pfc", clean="clean.pfc", truth="truth.plm", raw="features_raw.pfc",
        rlrmf="features_rlrmf.pfc", trace="em_trace.csv", train="train.plm",
        report="report.csv", text="report.txt").items()}
    shared = {"seed": cfg["seed"], "threads": cfg["threads"]}
    pick = lambda opts: {k: cfg[k] for k in opts}  # noqa: E731

    run_stage("synth", {**shared, **pick(SYNTH_OPTS), "out-noisy": f["noisy"], "out-clean": f["clean"],
                        "out-truth": f["truth"]})
    run_stage("normalize", {**shared, "in": f["noisy"], "out": f["raw"]})
    run_stage("denoise", {**shared, **pick(DENOISE_OPTS), "in": f["raw"], "out": f["rlrmf"],
                          "normalize": False, "trace": f["trace"], "trace-pixel": None})
    preds = []
    for src in ("raw", "rlrmf"):
        feats = f[src]
        run_stage("train", {**shared, **pick(TRAIN_OPTS), "features": feats, "truth": f["truth"],
                            "out": str(out / f"model_{src}.pcn"), "log": str(out / f"train_log_{src}.csv"),
                            "train-labels": f["train"]})
        run_stage("classify", {**shared, "features": feats, "kind": "simple", "model": None,
                               "train-labels": f["train"], "out-labels": str(out / f"{src}-simple.plm"),
                               "out-probs": None})
        run_stage("classify", {**shared, "features": feats, "kind": "cnn", "model": str(out / f"model_{src}.pcn"),
                               "train-labels": None, "out-labels": str(out / f"{src}-cnn.plm"),
                               "out-probs": str(out / f"probs_{src}.pfc")})
        run_stage("pauli", {**shared, "features": feats, "out": str(out / f"pauli_{src}.pfc")})
        run_stage("refine", {**shared, **pick(REFINE_OPTS), "probs": str(out / f"probs_{src}.pfc"),
                             "pauli": str(out / f"pauli_{src}.pfc"), "out": str(out / f"{src}-cnn-mrf.plm")})
        preds += [f"{src}-{k}={out / f'{src}-{k}.plm'}" for k in ("simple", "cnn", "cnn-mrf")]
    run_stage("eval", {**shared, "truth": f["truth"], "train-labels": f["train"], "pred": preds,
                       "out": f["report"], "text": f["text"]})
    for item in ["truth=" + f["truth"]] + preds:
        name, path = item.split("=", 1)
        run_stage("render", {**shared, "labels": path, "out": str(out / f"{name}.ppm")})


HANDLERS = {
    "synth": cmd_synth, "normalize": cmd_normalize, "denoise": cmd_denoise, "pauli": cmd_pauli,
    "train": cmd_train, "classify": cmd_classify, "refine": cmd_refine, "eval": cmd_eval,
    "render": cmd_render, "run-all": cmd_run_all,
}


def run_stage(command: str, cfg: dict) -> None:
    """Validate paths, then run one stage; errors are re-raised as CliError tagged with the stage."""
    try:
        validate_paths(command, cfg)
        log.info("stage %s", command)
        HANDLERS[command](cfg)
    except CliError as exc:
        if str(exc).startswith("["):
            raise
        raise CliError(f"[{command}] {exc}", exc.code) from exc
    except (FormatError, OSError) as exc:
        raise CliError(f"[{command}] {exc}", EXIT_IO) from exc
    except (EmError, FloatingPointError, np.linalg.LinAlgError) as exc:
        raise CliError(f"[{command}] numerical failure: {exc}", EXIT_NUMERICAL) from exc
    except ValueError as exc:
        raise CliError(f"[{command}] {exc}", EXIT_VALIDATION) from exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        cfg = resolve(args.command, args)
        run_stage(args.command, cfg)
    except CliError as exc:
        print(f"polsar-rlrmf: error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
