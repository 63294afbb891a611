"""Label and input augmentations: Mixup, label smoothing, AugMix, AugMixup, CAMixup.

All batch functions take features ``x`` [B, d] and one-hot or soft labels
``y`` [B, C] and draw randomness only from the generator they are given.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .calibration import per_class_stats


class AugmentConfigError(ValueError):
    pass


class MixedBatch(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    lam: np.ndarray
    partner: np.ndarray


def _mix(x, y, lam, partner):
    xl = lam[:, None]
    x_mix = xl * x + (1.0 - xl) * x[partner]
    y_mix = xl * y + (1.0 - xl) * y[partner]
    keep = xl == 1.0
    return np.where(keep, x, x_mix), np.where(keep, y, y_mix)


def _draw_pairing(n, a, rng, lam):
    if n < 2:
        raise AugmentConfigError("Mixup needs a batch of at least 2 examples")
    partner = rng.permutation(n)
    if lam is None:
        if a <= 0:
            raise AugmentConfigError("Beta concentration must be positive")
        lam = rng.beta(a, a, size=n)
    else:
        lam = np.broadcast_to(np.asarray(lam, dtype=float), (n,)).copy()
    return partner, lam


def mixup_batch(x, y, a: float = 1.0, rng: np.random.Generator | None = None,
                lam=None) -> MixedBatch:
    """Mix each example with an in-batch partner, one lambda ~ Beta(a, a) per example.

    ``lam`` (scalar or per-example) overrides sampling; lambda == 1 returns the
    example bitwise.
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    rng = rng if rng is not None else np.random.default_rng()
    partner, lam = _draw_pairing(len(x), a, rng, lam)
    xm, ym = _mix(x, y, lam, partner)
    return MixedBatch(xm, ym, lam, partner)


def gated_mixup(x, y, enabled, a: float, rng: np.random.Generator) -> MixedBatch:
    """Mixup restricted to rows where ``enabled``; other rows pass through unchanged.

    Consumes the generator exactly like :func:`mixup_batch`, so an all-true mask
    reproduces it draw for draw.
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    enabled = np.asarray(enabled, dtype=bool)
    partner, lam = _draw_pairing(len(x), a, rng, None)
    lam[~enabled] = 1.0
    xm, ym = _mix(x, y, lam, partner)
    return MixedBatch(xm, ym, lam, partner)


def label_smooth(y_onehot, alpha: float) -> np.ndarray:
    if not 0 <= alpha < 1:
        raise AugmentConfigError("smoothing alpha must lie in [0, 1)")
    y = np.asarray(y_onehot, dtype=float)
    c = y.shape[1]
    if alpha == 0:
        return y.copy()
    return y * (1.0 - alpha) + (1.0 - y) * (alpha / (c - 1))


# -- input transforms -------------------------------------------------------

AugmentOp = Callable[[np.ndarray, float, np.random.Generator], np.ndarray]


def rotate_op(x, intensity, rng):
    """Rotate each row within a random 2-D plane by up to intensity * pi/4."""
    n, d = x.shape
    if d < 2:
        return x.copy()
    basis = rng.standard_normal((n, d, 2))
    q, _ = np.linalg.qr(basis)
    u, v = q[:, :, 0], q[:, :, 1]
    theta = intensity * (np.pi / 4) * rng.uniform(-1, 1, size=n)
    cm1, s = np.cos(theta) - 1.0, np.sin(theta)
    a, b = np.sum(x * u, axis=1), np.sum(x * v, axis=1)
    return x + ((cm1 * a - s * b)[:, None] * u + (s * a + cm1 * b)[:, None] * v)


def noise_op(x, intensity, rng):
    return x + (0.5 * intensity) * rng.standard_normal(x.shape)


def scale_op(x, intensity, rng):
    return x * (1.0 + intensity * rng.uniform(-0.5, 0.5, size=x.shape))


def translate_op(x, intensity, rng):
    direction = rng.standard_normal(x.shape)
    direction /= np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
    return x + (intensity * rng.uniform(0, 1, size=(len(x), 1))) * direction


def identity_op(x, intensity, rng):
    return x.copy()


@dataclass
class AugmentOpSet:
    ops: Sequence[AugmentOp] = (rotate_op, noise_op, scale_op, translate_op)
    intensity: float = 0.3

    def __post_init__(self):
        if len(self.ops) == 0:
            raise AugmentConfigError("AugMix needs at least one operation")


IDENTITY_OPSET = AugmentOpSet(ops=(identity_op,))


def augmix(x, opset: AugmentOpSet | None = None, k: int = 3, dirichlet_a: float = 1.0,
           beta_a: float = 1.0, rng: np.random.Generator | None = None, m=None) -> np.ndarray:
    """m * x + (1 - m) * sum_i w_i op_i(x), per example, w ~ Dirichlet, m ~ Beta.

    Evaluated as offsets from ``x`` so identity ops and m == 1 reproduce ``x``
    exactly.
    """
    opset = opset if opset is not None else AugmentOpSet()
    if k < 1:
        raise AugmentConfigError("AugMix width k must be at least 1")
    if dirichlet_a <= 0 or beta_a <= 0:
        raise AugmentConfigError("concentrations must be positive")
    rng = rng if rng is not None else np.random.default_rng()
    x = np.asarray(x, dtype=float)
    n = len(x)
    w = rng.dirichlet(np.full(k, dirichlet_a), size=n)
    choice = rng.integers(len(opset.ops), size=(n, k))
    m = rng.beta(beta_a, beta_a, size=n) if m is None else np.broadcast_to(
        np.asarray(m, dtype=float), (n,))
    delta = np.zeros_like(x)
    for j in range(k):
        for o, op in enumerate(opset.ops):
            rows = np.flatnonzero(choice[:, j] == o)
            if len(rows):
                delta[rows] += w[rows, j, None] * (op(x[rows], opset.intensity, rng) - x[rows])
    return x + (1.0 - m)[:, None] * delta


def augmixup(x, y, a: float = 1.0, rng: np.random.Generator | None = None, lam=None,
             opset: AugmentOpSet | None = None, k: int = 3, dirichlet_a: float = 1.0,
             beta_a: float = 1.0, enabled=None) -> MixedBatch:
    """AugMix both partners independently, then mix inputs and labels with one lambda.

    Pairing and lambda are drawn first, exactly as in :func:`mixup_batch`. With
    ``enabled`` given, disabled rows keep lambda = 1 (AugMix only).
    """
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    rng = rng if rng is not None else np.random.default_rng()
    partner, lam = _draw_pairing(len(x), a, rng, lam)
    if enabled is not None:
        lam[~np.asarray(enabled, dtype=bool)] = 1.0
    own = augmix(x, opset, k, dirichlet_a, beta_a, rng)
    other = augmix(x[partner], opset, k, dirichlet_a, beta_a, rng)
    xl = lam[:, None]
    x_mix = np.where(xl == 1.0, own, xl * own + (1.0 - xl) * other)
    y_mix = np.where(xl == 1.0, y, xl * y + (1.0 - xl) * y[partner])
    return MixedBatch(x_mix, y_mix, lam, partner)


# -- confidence-adjusted Mixup ------------------------------------------------

@dataclass
class MixupPolicy:
    per_class_enabled: np.ndarray
    a: float = 1.0
    last_refresh_epoch: int = -1

    @classmethod
    def all_enabled(cls, n_classes: int, a: float = 1.0) -> "MixupPolicy":
        return cls(np.ones(n_classes, dtype=bool), a)


def camixup_refresh(policy: MixupPolicy, val_predictions, val_labels, epoch: int | None = None,
                    conf_mode: str = "max") -> MixupPolicy:
    """Enable Mixup for class i iff Acc(C_i) <= Conf(C_i) on validation data.

    Classes absent from the validation labels keep their previous flag.
    """
    n_classes = len(policy.per_class_enabled)
    stats = per_class_stats(val_predictions, val_labels, n_classes, conf_mode)
    flags = policy.per_class_enabled.copy()
    for c, (acc, conf, _) in enumerate(stats):
        if np.isnan(acc):
            warnings.warn(f"class {c} has no validation examples; keeping its Mixup flag",
                          RuntimeWarning, stacklevel=2)
            continue
        flags[c] = acc <= conf
    epoch = policy.last_refresh_epoch + 1 if epoch is None else epoch
    if epoch < policy.last_refresh_epoch:
        raise ValueError("policy refreshes must move forward in epochs")
    return replace(policy, per_class_enabled=flags, last_refresh_epoch=epoch)


def camixup_apply(x, y, policy: MixupPolicy, a: float | None = None,
                  rng: np.random.Generator | None = None) -> MixedBatch:
    """Mixup gated on the anchor example's true class."""
    y = np.asarray(y, dtype=float)
    if y.shape[1] != len(policy.per_class_enabled):
        raise AugmentConfigError("policy length does not match the number of classes")
    rng = rng if rng is not None else np.random.default_rng()
    enabled = policy.per_class_enabled[np.argmax(y, axis=1)]
    return gated_mixup(x, y, enabled, policy.a if a is None else a, rng)


# -- forgetting-count variant -------------------------------------------------

@dataclass
class ForgettingTracker:
    prev_acc: np.ndarray
    forget_count: np.ndarray
    mixup_coeff: np.ndarray

    @classmethod
    def create(cls, n: int) -> "ForgettingTracker":
        return cls(np.zeros(n, dtype=bool), np.zeros(n, dtype=np.int64), np.zeros(n))

    def __len__(self) -> int:
        return len(self.forget_count)


def forgetting_update(tracker: ForgettingTracker, batch_indices, correct) -> ForgettingTracker:
    """Count correct -> incorrect transitions; ``prev_acc`` is refreshed on every visit."""
    idx = np.asarray(batch_indices, dtype=np.int64)
    correct = np.asarray(correct, dtype=bool)
    if idx.size and (idx.min() < 0 or idx.max() >= len(tracker)):
        raise IndexError("example index outside the tracked dataset")
    forgot = tracker.prev_acc[idx] & ~correct
    np.add.at(tracker.forget_count, idx[forgot], 1)
    tracker.prev_acc[idx] = correct
    return tracker


def forgetting_policy(tracker: ForgettingTracker, a: float, indices=None) -> ForgettingTracker:
    """coeff = a where T[i] > sorted(T)[N // 2], else 0.

    ``indices`` limits the update to the examples just visited, as in the
    per-batch loop; by default every example is reassigned.
    """
    threshold = np.sort(tracker.forget_count)[len(tracker) // 2]
    idx = np.arange(len(tracker)) if indices is None else np.asarray(indices, dtype=np.int64)
    tracker.mixup_coeff[idx] = np.where(tracker.forget_count[idx] > threshold, a, 0.0)
    return tracker


# -- strategies used by the training loop -------------------------------------

class Strategy:
    """Stateful augmentation hook for one training run (or one ensemble member)."""

    name = "none"
    wants_validation = False
    wants_correctness = False
    # True when one instance should be shared by every ensemble member
    shared = False

    def apply(self, x, y, idx, rng):
        return x, y

    def refresh(self, epoch, preds, labels):
        pass

    def observe(self, idx, correct):
        pass

    def policy_flags(self):
        return None


@dataclass
class NoAugment(Strategy):
    name = "none"


@dataclass
class MixupStrategy(Strategy):
    a: float = 1.0
    name = "mixup"

    def apply(self, x, y, idx, rng):
        m = mixup_batch(x, y, self.a, rng)
        return m.x, m.y


@dataclass
class LabelSmoothStrategy(Strategy):
    alpha: float = 0.1
    name = "label_smooth"

    def apply(self, x, y, idx, rng):
        return x, label_smooth(y, self.alpha)


@dataclass
class AugMixStrategy(Strategy):
    opset: AugmentOpSet = field(default_factory=AugmentOpSet)
    k: int = 3
    dirichlet_a: float = 1.0
    beta_a: float = 1.0
    name = "augmix"

    def apply(self, x, y, idx, rng):
        return augmix(x, self.opset, self.k, self.dirichlet_a, self.beta_a, rng), y


@dataclass
class AugMixupStrategy(AugMixStrategy):
    a: float = 1.0
    name = "augmixup"

    def apply(self, x, y, idx, rng):
        m = augmixup(x, y, self.a, rng, None, self.opset, self.k, self.dirichlet_a, self.beta_a)
        return m.x, m.y


@dataclass
class CAMixupStrategy(Strategy):
    """Class-gated Mixup; with ``augmix`` set this is AugCAMixup."""

    n_classes: int = 5
    a: float = 1.0
    conf_mode: str = "max"
    augmix: AugMixStrategy | None = None
    shared: bool = True
    policy: MixupPolicy | None = None
    wants_validation = True

    def __post_init__(self):
        if self.policy is None:
            self.policy = MixupPolicy.all_enabled(self.n_classes, self.a)

    @property
    def name(self):
        return "augcamixup" if self.augmix is not None else "camixup"

    def apply(self, x, y, idx, rng):
        if self.augmix is None:
            m = camixup_apply(x, y, self.policy, self.a, rng)
        else:
            enabled = self.policy.per_class_enabled[np.argmax(y, axis=1)]
            am = self.augmix
            m = augmixup(x, y, self.a, rng, None, am.opset, am.k, am.dirichlet_a, am.beta_a,
                         enabled=enabled)
        return m.x, m.y

    def refresh(self, epoch, preds, labels):
        self.policy = camixup_refresh(self.policy, preds, labels, epoch, self.conf_mode)

    def policy_flags(self):
        return self.policy.per_class_enabled.copy()


@dataclass
class ForgettingCAMixupStrategy(Strategy):
    n_train: int = 0
    a: float = 1.0
    tracker: ForgettingTracker | None = None
    name = "forgetting_camixup"
    wants_correctness = True

    def __post_init__(self):
        if self.tracker is None:
            self.tracker = ForgettingTracker.create(self.n_train)

    def apply(self, x, y, idx, rng):
        coeff = self.tracker.mixup_coeff[idx]
        m = gated_mixup(x, y, coeff > 0, self.a, rng)
        return m.x, m.y

    def observe(self, idx, correct):
        forgetting_update(self.tracker, idx, correct)
        forgetting_policy(self.tracker, self.a, idx)


STRATEGIES = ("none", "mixup", "label_smooth", "augmix", "augmixup", "camixup", "augcamixup",
              "forgetting_camixup")


def make_strategy(name: str, n_classes: int, n_train: int, a: float = 1.0, alpha: float = 0.1,
                  k: int = 3, augmix_intensity: float = 0.3, conf_mode: str = "max",
                  camixup_scope: str = "ensemble") -> Strategy:
    opset = AugmentOpSet(intensity=augmix_intensity)
    if name == "none":
        return NoAugment()
    if name == "mixup":
        return MixupStrategy(a)
    if name == "label_smooth":
        return LabelSmoothStrategy(alpha)
    if name == "augmix":
        return AugMixStrategy(opset, k)
    if name == "augmixup":
        return AugMixupStrategy(opset, k, a=a)
    if name in ("camixup", "augcamixup"):
        if camixup_scope not in ("ensemble", "member"):
            raise AugmentConfigError(f"unknown CAMixup scope {camixup_scope!r}")
        am = AugMixStrategy(opset, k) if name == "augcamixup" else None
        return CAMixupStrategy(n_classes, a, conf_mode, am, shared=camixup_scope == "ensemble")
    if name == "forgetting_camixup":
        return ForgettingCAMixupStrategy(n_train, a)
    raise AugmentConfigError(f"unknown augmentation strategy {name!r}")
