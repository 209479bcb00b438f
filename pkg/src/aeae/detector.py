"""Autoencoder-based adversarial example detector.

Each image is mapped to a two-tuple feature ``(mse, pd)``: the reconstruction
error of the autoencoder and a prediction distance between the classifier's
outputs on the image and on its reconstruction. An isolation forest fitted
on benign features alone flags outliers as adversarial.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, iforest
from .models import AutoencoderModel, ClassifierModel, logits, model_from_bytes, reconstruct
from .tensor import ShapeError, softmax_array

logger = logging.getLogger(__name__)

MIN_FIT_IMAGES = 50
DEFAULT_KL_FLOOR = 1e-12
DETECTOR_FORMAT = 1


class PdMode(str, enum.Enum):
    KL = "kl"
    LABEL = "label"

    @classmethod
    def for_classes(cls, n_classes: int) -> PdMode:
        return cls.KL if n_classes <= 100 else cls.LABEL


class DigestMismatchError(checkpoint.CheckpointError):
    """The forest in a detector checkpoint was fitted on other models."""


# prediction distances ---------------------------------------------------------------


def kl_divergence(p, q, floor: float = DEFAULT_KL_FLOOR):
    """Natural-log ``KL(p || q)`` after clamping both to ``floor`` and renormalising.

    Accepts single vectors or (N, k) batches.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence: length mismatch {p.shape} vs {q.shape}")
    p = np.maximum(p, floor)
    q = np.maximum(q, floor)
    p = p / p.sum(axis=-1, keepdims=True)
    q = q / q.sum(axis=-1, keepdims=True)
    kl = np.sum(p * np.log(p / q), axis=-1)
    return np.maximum(kl, 0.0)


def label_distance(classifier: ClassifierModel, image, reconstruction):
    """1 where the arg-max class changes between ``image`` and ``reconstruction``."""
    a = np.argmax(logits(classifier, image), axis=-1)
    b = np.argmax(logits(classifier, reconstruction), axis=-1)
    return (a != b).astype(np.float64)


def reconstruction_error(ae: AutoencoderModel, images):
    """Per-image mean squared pixel error between ``images`` and ``ae(images)``."""
    arr = np.asarray(images, dtype=np.float64)
    batch = arr[None] if arr.ndim == 3 else arr
    rec = reconstruct(ae, batch)
    err = ((batch - rec) ** 2).reshape(len(batch), -1).mean(axis=1)
    return float(err[0]) if arr.ndim == 3 else err


# the detector ------------------------------------------------------------------------


@dataclass
class DetectorModel:
    autoencoder: AutoencoderModel
    classifier: ClassifierModel
    score_model: iforest.ScoreModel
    pd_mode: PdMode = PdMode.KL
    kl_floor: float = DEFAULT_KL_FLOOR

    def features(self, images) -> np.ndarray:
        """Two-tuple features, shape (N, 2) for a batch or (2,) for one image."""
        arr = np.asarray(images, dtype=np.float64)
        batch = arr[None] if arr.ndim == 3 else arr
        if batch.shape[1:] != self.autoencoder.input_shape:
            raise ShapeError(f"detector expects images of shape {self.autoencoder.input_shape}, got {batch.shape[1:]}")
        rec = reconstruct(self.autoencoder, batch)
        mse = ((batch - rec) ** 2).reshape(len(batch), -1).mean(axis=1)
        z_x = logits(self.classifier, batch)
        z_r = logits(self.classifier, rec)
        if self.pd_mode is PdMode.KL:
            pd = kl_divergence(softmax_array(z_x), softmax_array(z_r), self.kl_floor)
        else:
            pd = (np.argmax(z_x, axis=1) != np.argmax(z_r, axis=1)).astype(np.float64)
        out = np.column_stack([mse, pd])
        return out[0] if arr.ndim == 3 else out

    def to_bytes(self) -> bytes:
        ae_blob = self.autoencoder.to_bytes()
        clf_blob = self.classifier.to_bytes()
        forest_desc, forest_arrays = iforest.forest_arrays(self.score_model.forest)
        forest_desc.update(
            {
                "kind": "forest",
                "threshold": self.score_model.threshold,
                "contamination": self.score_model.contamination,
                "pd_mode": self.pd_mode.value,
                "kl_floor": self.kl_floor,
                "autoencoder_digest": checkpoint.digest(ae_blob),
                "classifier_digest": checkpoint.digest(clf_blob),
            }
        )
        forest_blob = checkpoint.pack(forest_desc, forest_arrays)
        return pack_container({"autoencoder": ae_blob, "classifier": clf_blob, "forest": forest_blob})

    def component_sizes(self) -> dict[str, int]:
        blob = self.to_bytes()
        sections = unpack_container(blob)
        sizes = {name: len(part) for name, part in sections.items()}
        sizes["container_overhead"] = len(blob) - sum(sizes.values())
        sizes["total"] = len(blob)
        return sizes


def pack_container(sections: dict[str, bytes]) -> bytes:
    """``AEAE`` | u16 version | u32 n | n x (u16 name len, name, u64 size, bytes)."""
    parts = [checkpoint.MAGIC, struct.pack("<HI", DETECTOR_FORMAT | 0x8000, len(sections))]
    for name, blob in sections.items():
        raw = name.encode()
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<Q", len(blob)), blob]
    return b"".join(parts)


def unpack_container(blob: bytes) -> dict[str, bytes]:
    if len(blob) < 4:
        raise checkpoint.CorruptCheckpointError("truncated detector checkpoint")
    if blob[:4] != checkpoint.MAGIC:
        raise checkpoint.CheckpointVersionError(f"bad magic {blob[:4]!r}")
    r = checkpoint._Reader(blob)
    r.take(4)
    version, count = r.unpack("<HI")
    if version != DETECTOR_FORMAT | 0x8000:
        raise checkpoint.CheckpointVersionError(f"not a detector container (version field 0x{version:04x})")
    sections = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (size,) = r.unpack("<Q")
        sections[name] = r.take(size)
    if r.pos != len(blob):
        raise checkpoint.CorruptCheckpointError("trailing bytes after detector sections")
    return sections


def detector_from_bytes(blob: bytes) -> DetectorModel:
    sections = unpack_container(blob)
    try:
        ae_blob, clf_blob, forest_blob = sections["autoencoder"], sections["classifier"], sections["forest"]
    except KeyError as exc:
        raise checkpoint.CorruptCheckpointError(f"detector checkpoint lacks section {exc}") from exc
    desc, arrays = checkpoint.unpack(forest_blob)
    if desc["autoencoder_digest"] != checkpoint.digest(ae_blob) or desc["classifier_digest"] != checkpoint.digest(clf_blob):
        raise DigestMismatchError("forest was fitted on a different autoencoder/classifier pair")
    forest = iforest.forest_from_arrays(desc, arrays)
    score_model = iforest.ScoreModel(forest, desc["threshold"], desc["contamination"])
    return DetectorModel(model_from_bytes(ae_blob), model_from_bytes(clf_blob), score_model, PdMode(desc["pd_mode"]), desc["kl_floor"])


def save_detector(detector: DetectorModel, path) -> None:
    Path(path).write_bytes(detector.to_bytes())


def load_detector(path) -> DetectorModel:
    return detector_from_bytes(Path(path).read_bytes())


def extract_feature(detector: DetectorModel, images) -> np.ndarray:
    return detector.features(images)


def fit_detector(
    autoencoder: AutoencoderModel,
    classifier: ClassifierModel,
    benign_images,
    contamination: float = 0.1,
    n_trees: int = 100,
    subsample_size: int = 256,
    seed: int = 0,
    pd_mode: PdMode | str | None = None,
    kl_floor: float = DEFAULT_KL_FLOOR,
) -> DetectorModel:
    """Fit the alarm model on features of benign images only."""
    benign = np.asarray(benign_images, dtype=np.float64)
    if len(benign) < MIN_FIT_IMAGES:
        raise ValueError(f"fit_detector needs at least {MIN_FIT_IMAGES} benign images, got {len(benign)}")
    mode = PdMode.for_classes(classifier.n_classes) if pd_mode is None else PdMode(pd_mode)
    placeholder = iforest.ScoreModel(None, 0.5, contamination)
    detector = DetectorModel(autoencoder, classifier, placeholder, mode, kl_floor)
    feats = detector.features(benign)
    forest = iforest.fit(feats, n_trees=n_trees, subsample_size=subsample_size, seed=seed)
    detector.score_model = iforest.calibrate_threshold(forest, feats, contamination)
    logger.info("detector fitted on %d benign features, threshold %.6f", len(feats), detector.score_model.threshold)
    return detector


@dataclass
class Verdict:
    adversarial: np.ndarray
    features: np.ndarray
    scores: np.ndarray


def detect(detector: DetectorModel, images) -> Verdict:
    """Flag images whose two-tuple feature is an outlier for the fitted forest."""
    arr = np.asarray(images, dtype=np.float64)
    feats = np.atleast_2d(detector.features(arr))
    flags, scores = iforest.predict_outlier(detector.score_model, feats)
    if arr.ndim == 3:
        return Verdict(bool(flags[0]), feats[0], float(scores[0]))
    return Verdict(flags, feats, scores)


# metrics --------------------------------------------------------------------------------


@dataclass
class Counts:
    name: str
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    tpr = recall

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def f1(self) -> float:
        return f1_score(self.precision, self.recall)

    @property
    def fpr(self) -> float:
        return _ratio(self.fp, self.fp + self.tn)

    def row(self) -> dict:
        return {
            "attack": self.name,
            "tp": self.tp,
            "fp": self.fp,
            "tn": self.tn,
            "fn": self.fn,
            "recall": self.recall,
            "precision": self.precision,
            "f1": self.f1,
            "tpr": self.tpr,
            "fpr": self.fpr,
        }


def _ratio(a: int, b: int) -> float:
    return a / b if b else 0.0


def f1_score(precision: float, recall: float) -> float:
    return 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


@dataclass
class EvalReport:
    overall: Counts
    per_attack: list[Counts] = field(default_factory=list)

    def rows(self) -> list[dict]:
        return [c.row() for c in self.per_attack] + [self.overall.row()]

    def write_csv(self, path) -> None:
        write_rows(path, METRIC_COLUMNS, self.rows())


METRIC_COLUMNS = ["attack", "tp", "fp", "tn", "fn", "recall", "precision", "f1", "tpr", "fpr"]


def evaluate_flags(benign_flags, adversarial_flags: dict[str, np.ndarray]) -> EvalReport:
    """Confusion counts from precomputed verdicts (True means flagged)."""
    benign_flags = np.asarray(benign_flags, dtype=bool)
    if benign_flags.size == 0 or not adversarial_flags:
        raise ValueError("evaluate needs a non-empty benign set and at least one adversarial set")
    fp = int(benign_flags.sum())
    tn = int(benign_flags.size - fp)
    per, tp_all, fn_all = [], 0, 0
    for name, flags in adversarial_flags.items():
        flags = np.asarray(flags, dtype=bool)
        if flags.size == 0:
            raise ValueError(f"adversarial set {name!r} is empty")
        tp = int(flags.sum())
        per.append(Counts(name, tp, fp, tn, int(flags.size - tp)))
        tp_all += tp
        fn_all += int(flags.size - tp)
    return EvalReport(Counts("all", tp_all, fp, tn, fn_all), per)


def evaluate(detector: DetectorModel, benign_images, adversarial_sets: dict[str, np.ndarray]) -> EvalReport:
    """Recall, precision, F1, TPR and FPR overall and per adversarial set.

    Each per-attack row pairs that attack's examples with the full benign set.
    """
    if len(benign_images) == 0:
        raise ValueError("evaluate: empty benign set")
    benign = detect(detector, benign_images).adversarial
    adv = {name: detect(detector, imgs).adversarial for name, imgs in adversarial_sets.items() if len(imgs)}
    return evaluate_flags(benign, adv)


# reports --------------------------------------------------------------------------------


def format_value(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_rows(path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([format_value(row[c]) for c in columns])


SCATTER_COLUMNS = ["mse", "pd", "class"]


def export_scatter(detector: DetectorModel, benign_images, adversarial_images, path) -> np.ndarray:
    """Write ``mse,pd,class`` rows for benign then adversarial images; returns the features."""
    fb = np.atleast_2d(detector.features(benign_images))
    fa = np.atleast_2d(detector.features(adversarial_images)) if len(adversarial_images) else np.empty((0, 2))
    rows = [{"mse": m, "pd": p, "class": "benign"} for m, p in fb]
    rows += [{"mse": m, "pd": p, "class": "adversarial"} for m, p in fa]
    write_rows(path, SCATTER_COLUMNS, rows)
    return np.vstack([fb, fa])


@dataclass
class TimingReport:
    n_images: int
    feature_seconds: float
    scoring_seconds: float
    sizes: dict[str, int]

    @property
    def total_seconds(self) -> float:
        return self.feature_seconds + self.scoring_seconds

    @property
    def scoring_fraction(self) -> float:
        return self.scoring_seconds / self.total_seconds if self.total_seconds else 0.0

    def rows(self) -> list[dict]:
        s = self.sizes
        return [
            {"step": "1_features", "bytes": s["autoencoder"], "seconds_per_image": self.feature_seconds},
            {"step": "2_forest", "bytes": s["forest"], "seconds_per_image": self.scoring_seconds},
            {"step": "all", "bytes": s["total"], "seconds_per_image": self.total_seconds},
        ]

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_images": self.n_images,
                "feature_seconds_per_image": self.feature_seconds,
                "scoring_seconds_per_image": self.scoring_seconds,
                "total_seconds_per_image": self.total_seconds,
                "scoring_fraction": self.scoring_fraction,
                "sizes_bytes": self.sizes,
            },
            indent=2,
            sort_keys=True,
        )


def timing_report(detector: DetectorModel, probe_images, clock=time.perf_counter) -> TimingReport:
    """Per-image latency of feature extraction and forest scoring, plus model sizes.

    Images are processed one at a time, as a deployed detector would see
    them; the reported times are means over the probe set.
    """
    probe = np.asarray(probe_images, dtype=np.float64)
    if probe.ndim == 3:
        probe = probe[None]
    t_feat = t_score = 0.0
    for img in probe:
        t0 = clock()
        feat = detector.features(img[None])
        t1 = clock()
        iforest.predict_outlier(detector.score_model, feat)
        t2 = clock()
        t_feat += t1 - t0
        t_score += t2 - t1
    n = len(probe)
    return TimingReport(n, t_feat / n, t_score / n, detector.component_sizes())
