"""White-box evasion attacks: FGSM, BIM, PGD, DeepFool and Carlini-Wagner L2.

All attacks work on batches. ``model`` is anything with a ``forward`` method
mapping a :class:`~aeae.tensor.Tensor` of images (N, ...) to logits (N, k);
images are expected in [0, 1] unless an attack is told otherwise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, backward, cross_entropy, maximum, square, tanh

logger = logging.getLogger(__name__)

METHODS = ("fgsm", "bim", "pgd", "deepfool", "cw")
L0_TOLERANCE = 1e-12


class AttackStalledError(RuntimeError):
    """DeepFool met an input whose class-difference gradients all vanish."""

    def __init__(self, message: str, indices):
        super().__init__(message)
        self.indices = list(indices)


@dataclass
class AdversarialResult:
    """A batch of adversarial examples and their perturbation statistics.

    Every array attribute is indexed by example along axis 0.
    """

    method: str
    original: np.ndarray
    adversarial: np.ndarray
    original_labels: np.ndarray
    adversarial_labels: np.ndarray
    iterations_used: np.ndarray
    l0_fraction: np.ndarray = field(init=False)
    l2: np.ndarray = field(init=False)
    linf: np.ndarray = field(init=False)

    def __post_init__(self):
        self.l0_fraction, self.l2, self.linf = lp_norms(self.original, self.adversarial)

    @property
    def success(self) -> np.ndarray:
        return self.adversarial_labels != self.original_labels

    def __len__(self) -> int:
        return len(self.original)

    def select(self, mask) -> AdversarialResult:
        return AdversarialResult(
            self.method,
            self.original[mask],
            self.adversarial[mask],
            self.original_labels[mask],
            self.adversarial_labels[mask],
            self.iterations_used[mask],
        )

    def successful(self) -> AdversarialResult:
        return self.select(self.success)


def lp_norms(original, adversarial):
    """(L0 fraction, L2, L-infinity) of ``adversarial - original``.

    Works per example for batches (first axis) and returns plain floats for
    1-D inputs.
    """
    a = np.asarray(original, dtype=np.float64)
    b = np.asarray(adversarial, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"lp_norms: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim <= 1:
        d = np.abs(b - a).reshape(1, -1)
        return float(np.mean(d > L0_TOLERANCE)), float(np.sqrt((d**2).sum())), float(d.max(initial=0.0))
    d = np.abs(b - a).reshape(len(a), int(np.prod(a.shape[1:])))
    return np.mean(d > L0_TOLERANCE, axis=1), np.sqrt((d**2).sum(axis=1)), d.max(axis=1, initial=0.0)


# helpers ---------------------------------------------------------------------------


def model_logits(model, x: np.ndarray) -> np.ndarray:
    return model.forward(Tensor(x)).data


def model_labels(model, x: np.ndarray) -> np.ndarray:
    return np.argmax(model_logits(model, x), axis=1)


def loss_gradient(model, x: np.ndarray, labels) -> np.ndarray:
    """Gradient of the summed cross-entropy w.r.t. each input image."""
    xt = Tensor(x, requires_grad=True)
    backward(cross_entropy(model.forward(xt), labels, reduction="sum"))
    return xt.grad


def _finish(method, model, x0, adv, orig_labels, iterations) -> AdversarialResult:
    return AdversarialResult(method, x0, adv, orig_labels, model_labels(model, adv), np.asarray(iterations, dtype=np.int64))


def _prepare(model, images, labels):
    x0 = np.array(images, dtype=np.float64)
    orig = model_labels(model, x0)
    labels = orig if labels is None else np.atleast_1d(np.asarray(labels, dtype=np.int64))
    return x0, orig, labels


# gradient-sign attacks --------------------------------------------------------------


def fgsm(model, images, labels, epsilon: float) -> AdversarialResult:
    """One signed-gradient step of size ``epsilon``, clipped to [0, 1]."""
    x0, orig, labels = _prepare(model, images, labels)
    if epsilon == 0:
        return _finish("fgsm", model, x0, x0.copy(), orig, np.ones(len(x0)))
    g = loss_gradient(model, x0, labels)
    adv = np.clip(x0 + epsilon * np.sign(g), 0.0, 1.0)
    return _finish("fgsm", model, x0, adv, orig, np.ones(len(x0)))


def default_bim_iterations(epsilon: float) -> int:
    """Step count for unit steps on the 0-255 scale: min(255 eps + 4, 1.25 * 255 eps)."""
    e = 255.0 * epsilon
    return max(1, int(math.ceil(min(e + 4.0, 1.25 * e))))


def _project(x, x0, epsilon):
    return np.clip(np.clip(x, x0 - epsilon, x0 + epsilon), 0.0, 1.0)


def bim(model, images, labels, epsilon: float, alpha: float = 1.0 / 255.0, iterations: int | None = None, on_iterate=None) -> AdversarialResult:
    """Iterated FGSM with per-pixel clipping to the epsilon-ball around the input.

    Args:
        alpha: Per-step size (one grey level by default).
        iterations: Number of steps; defaults to :func:`default_bim_iterations`.
        on_iterate: Optional ``callback(step, x)`` receiving every iterate.
    """
    if alpha <= 0:
        raise ValueError("bim: alpha must be positive")
    if iterations is None:
        iterations = default_bim_iterations(epsilon)
    if iterations < 1:
        raise ValueError("bim: iterations must be >= 1")
    x0, orig, labels = _prepare(model, images, labels)
    x = x0.copy()
    for step in range(iterations):
        x = _project(x + alpha * np.sign(loss_gradient(model, x, labels)), x0, epsilon)
        if on_iterate is not None:
            on_iterate(step, x)
    return _finish("bim", model, x0, x, orig, np.full(len(x0), iterations))


def pgd(model, images, labels, epsilon: float, alpha: float = 0.01, iterations: int = 40, seed: int = 0, on_iterate=None) -> AdversarialResult:
    """Projected signed-gradient ascent from a uniform random start.

    The start is uniform over the box ``[x - eps, x + eps] ∩ [0, 1]``; every
    iterate is projected back onto that box.
    """
    if alpha <= 0:
        raise ValueError("pgd: alpha must be positive")
    if iterations < 1:
        raise ValueError("pgd: iterations must be >= 1")
    x0, orig, labels = _prepare(model, images, labels)
    rng = np.random.default_rng(seed)
    lo, hi = np.clip(x0 - epsilon, 0.0, 1.0), np.clip(x0 + epsilon, 0.0, 1.0)
    x = lo + (hi - lo) * rng.random(x0.shape)
    if on_iterate is not None:
        on_iterate(-1, x)
    for step in range(iterations):
        x = _project(x + alpha * np.sign(loss_gradient(model, x, labels)), x0, epsilon)
        if on_iterate is not None:
            on_iterate(step, x)
    return _finish("pgd", model, x0, x, orig, np.full(len(x0), iterations))


# DeepFool ------------------------------------------------------------------------------


def _class_gradients(model, x: np.ndarray):
    """Logits (N, k) and their input gradients (k, N, ...) from one forward pass."""
    xt = Tensor(x, requires_grad=True)
    z = model.forward(xt)
    k = z.shape[1]
    grads = []
    for j in range(k):
        select = np.zeros(z.shape)
        select[:, j] = 1.0
        backward((z * select).sum())
        grads.append(xt.grad.copy())
    return z.data, np.stack(grads)


def deepfool(
    model,
    images,
    max_iterations: int = 50,
    overshoot: float = 0.02,
    labels=None,
    clip: tuple[float, float] | None = (0.0, 1.0),
    strict: bool = True,
) -> AdversarialResult:
    """Iterative minimal-perturbation attack by local linearisation.

    Each step linearises every class-score difference ``f_j = Z_j - Z_orig``
    at the current point, picks the class whose linearised boundary is
    nearest in L2, and adds the exact projection onto that hyperplane. The
    perturbations are accumulated and applied with a ``1 + overshoot`` factor.

    Args:
        labels: Optional ground truth; inputs the model already misclassifies
            are returned untouched with zero iterations.
        clip: Pixel range, or ``None`` for an unconstrained input domain.
        strict: Raise :class:`AttackStalledError` if some input made no
            progress because all its gradients vanished.
    """
    x0 = np.array(images, dtype=np.float64)
    n = len(x0)
    z0 = model_logits(model, x0)
    if z0.shape[1] < 2:
        raise ValueError("deepfool needs at least two classes")
    orig = np.argmax(z0, axis=1)
    active = np.ones(n, dtype=bool)
    if labels is not None:
        active &= orig == np.atleast_1d(np.asarray(labels))
    r_tot = np.zeros_like(x0)
    iterations = np.zeros(n, dtype=np.int64)
    stalled = np.zeros(n, dtype=bool)
    rows = np.arange(n)

    def current():
        x = x0 + (1.0 + overshoot) * r_tot
        return x if clip is None else np.clip(x, *clip)

    for _ in range(max_iterations):
        idx = rows[active]
        if idx.size == 0:
            break
        z, grads = _class_gradients(model, current()[idx])
        flipped = np.argmax(z, axis=1) != orig[idx]
        active[idx[flipped]] = False
        keep = ~flipped
        idx, z, grads = idx[keep], z[keep], grads[:, keep]
        if idx.size == 0:
            break
        m = len(idx)
        k0 = orig[idx]
        f = z - z[np.arange(m), k0][:, None]
        w = grads - grads[k0, np.arange(m)][None]
        w_flat = w.reshape(w.shape[0], m, -1)
        w_norm = np.sqrt((w_flat**2).sum(axis=2)).T
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.abs(f) / w_norm
        dist[np.arange(m), k0] = np.inf
        dist[~np.isfinite(dist)] = np.inf
        best = np.argmin(dist, axis=1)
        ok = np.isfinite(dist[np.arange(m), best])
        stalled[idx[~ok]] = True
        stalled[idx[ok]] = False
        sel = np.arange(m)[ok]
        wl = w[best[sel], sel]
        scale = np.abs(f[sel, best[sel]]) / w_norm[sel, best[sel]] ** 2
        r_tot[idx[sel]] += scale.reshape((-1,) + (1,) * (wl.ndim - 1)) * wl
        iterations[idx[sel]] += 1
    if strict and stalled.any():
        bad = np.flatnonzero(stalled)
        raise AttackStalledError(f"deepfool: no progress on {bad.size} input(s) with vanishing gradients", bad)
    adv = current()
    adv[iterations == 0] = x0[iterations == 0]
    return AdversarialResult("deepfool", x0, adv, orig, model_labels(model, adv), iterations)


# Carlini-Wagner L2 ---------------------------------------------------------------------


def cw_penalty(logits, target, confidence: float = 0.0):
    """``max(max_{i != t} Z_i - Z_t, -confidence)`` for one logit vector or a batch."""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    t = np.atleast_1d(np.asarray(target))
    rows = np.arange(len(z))
    others = z.copy()
    others[rows, t] = -np.inf
    g = np.maximum(others.max(axis=1) - z[rows, t], -confidence)
    return float(g[0]) if np.ndim(logits) == 1 else g


def _cw_targeted(model, x0, targets, confidence, initial_const, binary_steps, steps, learning_rate, box, abort_early=True):
    """Best (lowest-L2) successful example per row; rows never successful keep the input and L2 = inf."""
    n = len(x0)
    lo_box, hi_box = box
    k = model_logits(model, x0[:1]).shape[1]
    onehot = np.zeros((n, k))
    onehot[np.arange(n), targets] = 1.0
    mask_penalty = -1e9 * onehot
    mid, half = (hi_box + lo_box) / 2.0, (hi_box - lo_box) / 2.0
    w0 = np.arctanh(np.clip((x0 - mid) / half, -1.0, 1.0) * (1.0 - 1e-6))
    x_box = mid + half * np.tanh(w0)
    flat = (n, -1)

    lower = np.zeros(n)
    upper = np.full(n, 1e10)
    const = np.full(n, float(initial_const))
    best_l2 = np.full(n, np.inf)
    best_adv = x0.copy()

    for _ in range(binary_steps):
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        found = np.zeros(n, dtype=bool)
        prev_loss = np.inf
        for t in range(1, steps + 1):
            wt = Tensor(w, requires_grad=True)
            xp = tanh(wt) * half + mid
            l2sq = square(xp - Tensor(x_box)).reshape(flat).sum(axis=1)
            z = model.forward(xp)
            real = (z * onehot).sum(axis=1)
            other = (z + mask_penalty).max(axis=1)
            g = maximum(other - real, -confidence)
            loss = (l2sq + g * const).sum()
            backward(loss)

            zd = z.data
            ok = (np.argmax(zd, axis=1) == targets) & (real.data - other.data >= confidence)
            d2 = ((xp.data - x0).reshape(flat) ** 2).sum(axis=1)
            better = ok & (d2 < best_l2)
            best_l2[better] = d2[better]
            best_adv[better] = xp.data[better]
            found |= ok

            # stop once the summed objective has plateaued
            if abort_early and t % max(steps // 10, 1) == 0:
                if loss.item() > 0.9999 * prev_loss:
                    break
                prev_loss = loss.item()

            grad = wt.grad
            m = 0.9 * m + 0.1 * grad
            v = 0.999 * v + 0.001 * grad * grad
            w = w - learning_rate * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        upper = np.where(found, np.minimum(upper, const), upper)
        lower = np.where(found, lower, np.maximum(lower, const))
        const = np.where(upper < 1e9, (lower + upper) / 2.0, const * 10.0)
    return best_adv, best_l2


def cw_l2(
    model,
    images,
    target_labels=None,
    confidence: float = 0.0,
    initial_const: float = 1.0,
    binary_steps: int = 5,
    steps: int = 200,
    learning_rate: float = 0.01,
    box: tuple[float, float] = (0.0, 1.0),
) -> AdversarialResult:
    """Carlini-Wagner L2 attack in tanh space with a binary search on ``c``.

    Minimises ``||delta||_2^2 + c * g(x')`` where ``g`` is :func:`cw_penalty`.
    Without ``target_labels`` the attack runs against every non-original
    class and keeps the lowest-L2 success. Rows with no success at any
    ``c`` return the original image (``success`` is then False).
    """
    x0 = np.array(images, dtype=np.float64)
    n = len(x0)
    orig = model_labels(model, x0)
    k = model_logits(model, x0[:1]).shape[1]
    if target_labels is not None:
        targets = np.atleast_1d(np.asarray(target_labels, dtype=np.int64))
        if np.any(targets == orig):
            raise ValueError("cw_l2: target label equals the original label")
        adv, _ = _cw_targeted(model, x0, targets, confidence, initial_const, binary_steps, steps, learning_rate, box)
    else:
        # one row per (image, other class)
        others = np.array([[c for c in range(k) if c != o] for o in orig])
        rep = np.repeat(np.arange(n), k - 1)
        cand, l2 = _cw_targeted(model, x0[rep], others.reshape(-1), confidence, initial_const, binary_steps, steps, learning_rate, box)
        l2 = l2.reshape(n, k - 1)
        pick = np.argmin(l2, axis=1)
        cand = cand.reshape((n, k - 1) + x0.shape[1:])
        adv = np.where(
            np.isfinite(l2[np.arange(n), pick]).reshape((-1,) + (1,) * (x0.ndim - 1)),
            cand[np.arange(n), pick],
            x0,
        )
    return _finish("cw", model, x0, adv, orig, np.full(n, binary_steps * steps))


# configs and suites ---------------------------------------------------------------------


@dataclass
class AttackConfig:
    method: str
    epsilon: float = 0.0
    alpha: float | None = None
    iterations: int | None = None
    confidence: float = 0.0
    constant: float = 1.0
    binary_steps: int = 5
    steps: int = 200
    overshoot: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.method = self.method.lower()
        if self.method not in METHODS:
            raise ValueError(f"unknown attack method {self.method!r}; expected one of {METHODS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be > 0")

    @property
    def name(self) -> str:
        if self.method in ("fgsm", "bim", "pgd"):
            return f"{self.method}_eps{self.epsilon:g}"
        if self.method == "cw":
            return f"cw_k{self.confidence:g}"
        return self.method


def run_attack(model, images, labels, cfg: AttackConfig) -> AdversarialResult:
    if cfg.method == "fgsm":
        return fgsm(model, images, labels, cfg.epsilon)
    if cfg.method == "bim":
        return bim(model, images, labels, cfg.epsilon, cfg.alpha or 1.0 / 255.0, cfg.iterations)
    if cfg.method == "pgd":
        return pgd(model, images, labels, cfg.epsilon, cfg.alpha or 0.01, cfg.iterations or 40, cfg.seed)
    if cfg.method == "deepfool":
        return deepfool(model, images, cfg.iterations or 50, cfg.overshoot, labels=labels, strict=False)
    return cw_l2(model, images, None, cfg.confidence, cfg.constant, cfg.binary_steps, cfg.steps)


@dataclass
class SuiteResult:
    """Successful examples per attack plus an L0/L2/L-inf summary.

    ``raw`` keeps every attempted example (successful or not) for per-example
    reporting; ``results`` holds only the successes.
    """

    results: dict[str, AdversarialResult]
    attempted: dict[str, int]
    summary: list[dict]
    warnings: list[str]
    raw: dict[str, AdversarialResult] = field(default_factory=dict)


def generate_suite(model, images, labels, configs: list[AttackConfig]) -> SuiteResult:
    """Run each config on ``images`` and keep only successful examples.

    Configs with no successes are excluded and a warning is recorded.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("generate_suite: empty dataset")
    results, attempted, summary, warnings, raw = {}, {}, [], [], {}
    for cfg in configs:
        raw[cfg.name] = full = run_attack(model, images, labels, cfg)
        res = full.successful()
        attempted[cfg.name] = len(images)
        if len(res) == 0:
            msg = f"{cfg.name}: no successful adversarial examples; attack excluded"
            logger.warning(msg)
            warnings.append(msg)
            continue
        results[cfg.name] = res
        summary.append(
            {
                "attack": cfg.name,
                "attempted": len(images),
                "successes": len(res),
                "l0": float(res.l0_fraction.mean()),
                "l2": float(res.l2.mean()),
                "linf": float(res.linf.mean()),
            }
        )
    return SuiteResult(results, attempted, summary, warnings, raw)
