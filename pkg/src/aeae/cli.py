"""Command-line front end.

Every command reads a config (``--config``), writes only under the output
directory, and leaves a ``<command>.manifest.json`` beside its outputs.
Failures exit nonzero after printing one JSON line to stderr, e.g.::

    {"error": "missing-artifact", "command": "evaluate", "message": "..."}
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks as atk
from . import checkpoint, data, detector, models
from .config import ConfigError, ExperimentConfig, load_config, write_manifest

logger = logging.getLogger("aeae")

CLASSIFIER_FILE = "classifier.ckpt"
AUTOENCODER_FILE = "autoencoder.ckpt"
DETECTOR_FILE = "detector.ckpt"
ATTACK_DIR = "attacks"
ATTACK_INDEX = "index.json"
ATTACK_COLUMNS = ["index", "success", "l0_fraction", "l2", "linf"]
SUMMARY_COLUMNS = ["attack", "attempted", "successes", "l0", "l2", "linf"]

EXIT_CODES = {"config": 2, "missing-artifact": 3, "data": 4, "checkpoint": 5, "runtime": 1}


class CommandError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class MissingArtifactError(CommandError):
    def __init__(self, path: Path, producer: str):
        super().__init__("missing-artifact", f"{path} not found; run '{producer}' first")
        self.path = path


# data ---------------------------------------------------------------------------------


def load_splits(cfg: ExperimentConfig) -> dict[str, data.Dataset]:
    """``train``, ``fit`` and ``test`` splits, taken in that order from the dataset."""
    d = cfg["dataset"]
    n_train, n_fit, n_test = d["train"], d["fit"], d["test"]
    if d["source"] == "synthetic":
        ds = data.synth_dataset("shapes", d["count"], cfg.sub_seed("dataset"), size=d["size"], noise=d["noise"], contrast=cfg.contrast())
    else:
        ds = data.load_idx(d["images"], d["labels"])
    if len(ds) < n_train + n_fit + n_test:
        raise CommandError("data", f"dataset has {len(ds)} images; splits need {n_train + n_fit + n_test}")
    return {
        "train": ds.subset(slice(0, n_train), "train"),
        "fit": ds.subset(slice(n_train, n_train + n_fit), "fit"),
        "test": ds.subset(slice(n_train + n_fit, n_train + n_fit + n_test), "test"),
    }


def _require(path: Path, producer: str) -> Path:
    if not path.is_file():
        raise MissingArtifactError(path, producer)
    return path


def _load_classifier(cfg) -> models.ClassifierModel:
    return models.load_model(_require(cfg.out / CLASSIFIER_FILE, "train-classifier"))


def _load_detector(cfg) -> detector.DetectorModel:
    return detector.load_detector(_require(cfg.out / DETECTOR_FILE, "fit-detector"))


def _load_attack_sets(cfg) -> dict[str, data.Dataset]:
    root = cfg.out / ATTACK_DIR
    index = json.loads(_require(root / ATTACK_INDEX, "attack").read_text())
    sets = {}
    for name in index["attacks"]:
        imgs = _require(root / f"{name}-images.idx", "attack")
        labels = _require(root / f"{name}-labels.idx", "attack")
        sets[name] = data.load_idx(imgs, labels)
    return sets


# commands -----------------------------------------------------------------------------


def cmd_train_classifier(cfg: ExperimentConfig, args) -> list[Path]:
    splits = load_splits(cfg)
    train, test = splits["train"], splits["test"]
    c = cfg["classifier"]
    n_classes = int(train.labels.max()) + 1
    seed = cfg.sub_seed("classifier")
    model = models.build_classifier(train.image_shape, n_classes, cfg.classifier_filters(), seed=seed)
    tc = models.TrainConfig(c["learning_rate"], c["batch_size"], c["epochs"], seed)
    model, history = models.train_classifier(model, train.images, train.labels, tc)
    test_acc = float(np.mean(models.predict_label(model, test.images) == test.labels))
    logger.info("classifier: train accuracy %.4f, test accuracy %.4f", history[-1], test_acc)
    ckpt = cfg.out / CLASSIFIER_FILE
    models.save_model(model, ckpt)
    report = cfg.out / "classifier_history.csv"
    rows = [{"epoch": i + 1, "train_accuracy": a} for i, a in enumerate(history)]
    detector.write_rows(report, ["epoch", "train_accuracy"], rows)
    acc = cfg.out / "classifier_accuracy.csv"
    detector.write_rows(acc, ["split", "accuracy"], [{"split": "train", "accuracy": history[-1]}, {"split": "test", "accuracy": test_acc}])
    print(f"test accuracy {test_acc:.4f}")
    return [ckpt, report, acc]


def cmd_train_autoencoder(cfg: ExperimentConfig, args) -> list[Path]:
    train = load_splits(cfg)["train"]
    a = cfg["autoencoder"]
    seed = cfg.sub_seed("autoencoder")
    model = models.build_autoencoder(train.image_shape, a["filters"], seed=seed)
    tc = models.TrainConfig(a["learning_rate"], a["batch_size"], a["epochs"], seed)
    model, history = models.train_autoencoder(model, train.images, tc)
    ckpt = cfg.out / AUTOENCODER_FILE
    models.save_model(model, ckpt)
    report = cfg.out / "autoencoder_history.csv"
    detector.write_rows(report, ["epoch", "loss"], [{"epoch": i + 1, "loss": v} for i, v in enumerate(history)])
    print(f"final reconstruction loss {history[-1]:.6g}")
    return [ckpt, report]


def cmd_attack(cfg: ExperimentConfig, args) -> list[Path]:
    clf = _load_classifier(cfg)
    test = load_splits(cfg)["test"]
    n = cfg["dataset"]["attack"]
    x, y = test.images[:n], test.labels[:n]
    suite = atk.generate_suite(clf, x, y, cfg.attack_configs())
    root = cfg.out / ATTACK_DIR
    root.mkdir(exist_ok=True)
    outputs = []
    for name, res in suite.raw.items():
        rows = [
            {"index": i, "success": int(s), "l0_fraction": l0, "l2": l2, "linf": li}
            for i, (s, l0, l2, li) in enumerate(zip(res.success, res.l0_fraction, res.l2, res.linf))
        ]
        path = root / f"{name}.csv"
        detector.write_rows(path, ATTACK_COLUMNS, rows)
        outputs.append(path)
    for name, res in suite.results.items():
        ds = data.Dataset(res.adversarial, res.original_labels, name)
        img, lab = root / f"{name}-images.idx", root / f"{name}-labels.idx"
        data.save_idx(ds, img, lab, dtype="float64")
        outputs += [img, lab]
    summary = root / "summary.csv"
    detector.write_rows(summary, SUMMARY_COLUMNS, suite.summary)
    index = root / ATTACK_INDEX
    index.write_text(json.dumps({"attacks": list(suite.results), "attempted": n, "warnings": suite.warnings}, indent=2) + "\n")
    for w in suite.warnings:
        logger.warning(w)
    for row in suite.summary:
        print(f"{row['attack']}: {row['successes']}/{row['attempted']} successful, mean L2 {row['l2']:.4f}, mean Linf {row['linf']:.4f}")
    return outputs + [summary, index]


def cmd_fit_detector(cfg: ExperimentConfig, args) -> list[Path]:
    clf = _load_classifier(cfg)
    ae = models.load_model(_require(cfg.out / AUTOENCODER_FILE, "train-autoencoder"))
    fit = load_splits(cfg)["fit"]
    d = cfg["detector"]
    mode = None if d["pd_mode"] == "auto" else d["pd_mode"]
    det = detector.fit_detector(
        ae, clf, fit.images, d["contamination"], d["trees"], d["subsample"], cfg.sub_seed("forest"), mode, d["kl_floor"]
    )
    ckpt = cfg.out / DETECTOR_FILE
    detector.save_detector(det, ckpt)
    verdict = detector.detect(det, fit.images)
    feats = cfg.out / "fit_features.csv"
    _write_verdicts(feats, verdict)
    print(f"threshold {det.score_model.threshold:.6f}, training flag rate {np.mean(verdict.adversarial):.4f}")
    return [ckpt, feats]


def _write_verdicts(path: Path, verdict: detector.Verdict) -> None:
    rows = [
        {"index": i, "mse": f[0], "pd": f[1], "score": s, "adversarial": int(a)}
        for i, (f, s, a) in enumerate(zip(verdict.features, verdict.scores, verdict.adversarial))
    ]
    detector.write_rows(path, ["index", "mse", "pd", "score", "adversarial"], rows)


def cmd_detect(cfg: ExperimentConfig, args) -> list[Path]:
    det = _load_detector(cfg)
    if args.images:
        images = data.load_idx(_require(Path(args.images), "an IDX image file")).images
        name = Path(args.images).stem
    else:
        images, name = load_splits(cfg)["test"].images, "test"
    verdict = detector.detect(det, images)
    path = cfg.out / f"verdicts-{name}.csv"
    _write_verdicts(path, verdict)
    print(f"{int(np.sum(verdict.adversarial))}/{len(images)} images flagged adversarial")
    return [path]


def cmd_evaluate(cfg: ExperimentConfig, args) -> list[Path]:
    det = _load_detector(cfg)
    sets = _load_attack_sets(cfg)
    if not sets:
        raise CommandError("data", "no attack produced successful examples; nothing to evaluate")
    benign = load_splits(cfg)["test"].images
    report = detector.evaluate(det, benign, {k: v.images for k, v in sets.items()})
    path = cfg.out / "metrics.csv"
    report.write_csv(path)
    for row in report.rows():
        print(f"{row['attack']}: TPR {row['tpr']:.3f} FPR {row['fpr']:.3f} F1 {row['f1']:.3f}")
    return [path]


def cmd_scatter(cfg: ExperimentConfig, args) -> list[Path]:
    det = _load_detector(cfg)
    sets = _load_attack_sets(cfg)
    names = args.attack or cfg.scatter_attacks()
    benign = load_splits(cfg)["test"].images
    outputs = []
    for name in names:
        if name not in sets:
            raise CommandError("data", f"no successful examples stored for attack {name!r}")
        path = cfg.out / f"scatter-{name}.csv"
        detector.export_scatter(det, benign, sets[name].images, path)
        outputs.append(path)
    return outputs


def cmd_timing(cfg: ExperimentConfig, args) -> list[Path]:
    det = _load_detector(cfg)
    probe = load_splits(cfg)["test"].images[: args.probe]
    rep = detector.timing_report(det, probe)
    js = cfg.out / "timing.json"
    js.write_text(rep.to_json() + "\n")
    path = cfg.out / "timing.csv"
    detector.write_rows(path, ["step", "bytes", "seconds_per_image"], rep.rows())
    print(
        f"features {rep.feature_seconds * 1e3:.3f} ms, forest {rep.scoring_seconds * 1e3:.3f} ms "
        f"({100 * rep.scoring_fraction:.2f}% of total), checkpoint {rep.sizes['total']} bytes"
    )
    return [js, path]


COMMANDS = {
    "train-classifier": (cmd_train_classifier, "train the target classifier"),
    "train-autoencoder": (cmd_train_autoencoder, "train the autoencoder on benign images"),
    "attack": (cmd_attack, "generate adversarial examples against the classifier"),
    "fit-detector": (cmd_fit_detector, "fit the isolation forest on benign two-tuple features"),
    "detect": (cmd_detect, "flag images as adversarial or benign"),
    "evaluate": (cmd_evaluate, "recall/precision/F1/TPR/FPR per attack"),
    "scatter": (cmd_scatter, "export (mse, pd, class) rows for plotting"),
    "timing": (cmd_timing, "per-image latency and model sizes"),
}
PIPELINE = ["train-classifier", "train-autoencoder", "attack", "fit-detector", "evaluate", "scatter", "timing"]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI experiment config")
    common.add_argument("--seed", type=int, help="override experiment.seed")
    common.add_argument("--out", type=Path, help="override experiment.out")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="aeae", description="Autoencoder + isolation-forest adversarial example detector.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "detect":
            p.add_argument("--images", help="IDX image file to screen (default: the test split)")
        elif name == "scatter":
            p.add_argument("--attack", action="append", help="attack set to export (repeatable; default from config)")
        elif name == "timing":
            p.add_argument("--probe", type=int, default=50, help="number of test images to time")
    sub.add_parser("pipeline", parents=[common], help="run every step in order")
    return parser


def _run(name: str, cfg: ExperimentConfig, args) -> None:
    fn = COMMANDS[name][0]
    inputs = [p for p in (cfg.out / CLASSIFIER_FILE, cfg.out / AUTOENCODER_FILE, cfg.out / DETECTOR_FILE) if p.is_file()]
    outputs = fn(cfg, args)
    write_manifest(cfg, name, outputs, inputs)


def _error_kind(exc: BaseException) -> str:
    if isinstance(exc, CommandError):
        return exc.kind
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, checkpoint.CheckpointError):
        return "checkpoint"
    if isinstance(exc, (data.IdxError, FileNotFoundError)):
        return "data"
    return "runtime"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed, args.out)
        cfg.out.mkdir(parents=True, exist_ok=True)
        if args.command == "pipeline":
            for name in PIPELINE:
                if name == "scatter":
                    args.attack = None
                if name == "timing":
                    args.probe = 50
                _run(name, cfg, args)
        else:
            _run(args.command, cfg, args)
    except Exception as exc:  # one machine-parsable line, never a traceback
        kind = _error_kind(exc)
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(json.dumps({"error": kind, "command": args.command, "message": msg}), file=sys.stderr)
        return EXIT_CODES[kind]
    return 0


if __name__ == "__main__":
    sys.exit(main())
