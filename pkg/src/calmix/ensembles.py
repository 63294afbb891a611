"""Deep ensembles, MC-Dropout and BatchEnsemble on top of :mod:`calmix.netcore`."""

from __future__ import annotations

import copy
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from . import netcore
from .augment import NoAugment, Strategy
from .data import LabeledDataset, minibatches
from .netcore import DenseNet, MomentumState, PredictionBatch, TrainConfig

MODES = ("deep", "mc_dropout", "batch_ensemble")
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RankOneFactors:
    """Per-layer factor tables: r[l] is [K, m], s[l] is [K, d] for W_l of shape [m, d]."""

    r: list[np.ndarray]
    s: list[np.ndarray]

    @property
    def K(self) -> int:
        return self.r[0].shape[0]

    def member(self, k: int):
        if not 0 <= k < self.K:
            raise IndexError(f"member {k} out of range for K={self.K}")
        return [(r[k], s[k]) for r, s in zip(self.r, self.s)]

    def extra_params_per_layer(self) -> list[int]:
        return [r.size + s.size for r, s in zip(self.r, self.s)]

    @classmethod
    def init(cls, net: DenseNet, K: int, rng: np.random.Generator, std: float = 0.5):
        r = [rng.normal(1.0, std, size=(K, w.shape[0])) for w in net.weights]
        s = [rng.normal(1.0, std, size=(K, w.shape[1])) for w in net.weights]
        return cls(r, s)

    @classmethod
    def ones(cls, net: DenseNet, K: int):
        return cls([np.ones((K, w.shape[0])) for w in net.weights],
                   [np.ones((K, w.shape[1])) for w in net.weights])


@dataclass
class TrainingHistory:
    losses: list[float] = field(default_factory=list)
    # (epoch, member, class, enabled) for the policy in force during each epoch
    policy_log: list[tuple] = field(default_factory=list)
    # member -> (forget counts, mixup coefficients) at the end of training
    forgetting: dict = field(default_factory=dict)


@dataclass
class EnsembleModel:
    mode: str
    K: int
    members: list[DenseNet]
    factors: RankOneFactors | None = None
    seed: int = 0
    history: TrainingHistory = field(default_factory=TrainingHistory)
    strategies: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown ensemble mode {self.mode!r}")
        if self.K < 1:
            raise ValueError("ensemble size must be at least 1")
        if self.mode == "deep" and len(self.members) != self.K:
            raise ValueError("a deep ensemble holds one net per member")
        if self.mode == "batch_ensemble" and (self.factors is None or self.factors.K != self.K):
            raise ValueError("BatchEnsemble needs exactly K factor pairs per layer")


def batchensemble_forward(shared: DenseNet, factors: RankOneFactors, k: int, x,
                          mode: str = "eval", rng=None) -> PredictionBatch:
    """Member k's prediction with W'_k = W o (r_k s_k^T), never materialised."""
    return netcore.forward(shared, x, mode, rng, rank_one=factors.member(k))


def member_seed(seed: int, member: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(member, stream))


def _rng(seed, member, stream):
    return np.random.default_rng(member_seed(seed, member, stream))


# stream ids inside a member's seed sequence
_INIT, _SHUFFLE, _AUGMENT, _DROPOUT, _EVAL = range(5)


def member_predictions(model: EnsembleModel, x, rng: np.random.Generator | None = None,
                       n_samples: int | None = None) -> np.ndarray:
    """[K, N, C] member probabilities. MC-Dropout draws ``n_samples`` (default K) masks."""
    if model.mode == "deep":
        return np.stack([netcore.forward(net, x).probs for net in model.members])
    if model.mode == "batch_ensemble":
        return np.stack([batchensemble_forward(model.members[0], model.factors, k, x).probs
                         for k in range(model.K)])
    rng = rng if rng is not None else _rng(model.seed, 0, _EVAL)
    n = n_samples or model.K
    return np.stack([netcore.forward(model.members[0], x, "mc", rng).probs for _ in range(n)])


def aggregate(member_probs) -> PredictionBatch:
    return PredictionBatch(np.mean(np.asarray(member_probs), axis=0))


def predict_ensemble(model: EnsembleModel, x, rng: np.random.Generator | None = None,
                     n_samples: int | None = None) -> PredictionBatch:
    """Arithmetic mean of member probabilities."""
    return aggregate(member_predictions(model, x, rng, n_samples))


class _Unit:
    """One independently optimised parameter set plus its RNG streams."""

    def __init__(self, net, factors, seed, member, strategies):
        self.net = net
        self.factors = factors
        self.state = MomentumState()
        self.shuffle_seed = int(member_seed(seed, member, _SHUFFLE).generate_state(1)[0])
        self.aug_rng = _rng(seed, member, _AUGMENT)
        self.dropout_rng = _rng(seed, member, _DROPOUT)
        self.strategies = strategies

    @property
    def n_members(self):
        return self.factors.K if self.factors is not None else 1

    def member_forward(self, k, x):
        rank_one = self.factors.member(k) if self.factors is not None else None
        return netcore.forward(self.net, x, "eval", rank_one=rank_one)

    def step(self, idx, xb, yb, config, epoch):
        if self.factors is None:
            xa, ya = self.strategies[0].apply(xb, yb, idx, self.aug_rng)
            loss, g = netcore.loss_and_grads(self.net, xa, ya, config.l2, self.dropout_rng)
            netcore.sgd_step(self.net, g, config, epoch, self.state)
            return loss
        K = self.factors.K
        gw = [np.zeros_like(w) for w in self.net.weights]
        gb = [np.zeros_like(b) for b in self.net.biases]
        gr = [np.zeros_like(r) for r in self.factors.r]
        gs = [np.zeros_like(s) for s in self.factors.s]
        loss = 0.0
        for k in range(K):
            xa, ya = self.strategies[k].apply(xb, yb, idx, self.aug_rng)
            lk, g = netcore.loss_and_grads(self.net, xa, ya, 0.0, self.dropout_rng,
                                           rank_one=self.factors.member(k))
            loss += lk
            for l in range(len(gw)):
                gw[l] += g.weights[l]
                gb[l] += g.biases[l]
                gr[l][k] = g.r[l]
                gs[l][k] = g.s[l]
        for l, w in enumerate(self.net.weights):
            gw[l] = gw[l] / K + config.l2 * w
            gb[l] /= K
            gr[l] /= K
            gs[l] /= K
        netcore.sgd_step(self.net, netcore.Gradients(gw, gb), config, epoch, self.state,
                         extra_params=self.factors.r + self.factors.s, extra_grads=gr + gs)
        return loss / K


def _strategy_copies(prototype: Strategy, n: int) -> list[Strategy]:
    if prototype.shared:
        return [prototype] * n
    return [copy.deepcopy(prototype) for _ in range(n)]


def train_ensemble(mode: str, train: LabeledDataset, val: LabeledDataset | None,
                   config: TrainConfig, strategy: Strategy | None = None, K: int = 4,
                   hidden=(64, 64), dropout_rate: float = 0.1, factor_std: float = 0.5
                   ) -> EnsembleModel:
    """Train an ensemble with the given augmentation strategy.

    Deep-ensemble members are independent seeded trainings advanced in
    lockstep so an ensemble-wide CAMixup policy can be refreshed after every
    epoch. BatchEnsemble replicates each minibatch across members and averages the
    member losses. MC-Dropout trains one net with dropout on.
    """
    if mode not in MODES:
        raise ValueError(f"unknown ensemble mode {mode!r}")
    strategy = strategy if strategy is not None else NoAugment()
    if strategy.wants_validation and val is None:
        raise ValueError(f"strategy {strategy.name!r} needs a validation split")
    sizes = [train.x.shape[1], *hidden, train.n_classes]
    seed = config.seed

    units = []
    if mode == "deep":
        copies = _strategy_copies(strategy, K)
        for k in range(K):
            net = netcore.init_net(sizes, _rng(seed, k, _INIT), 0.0)
            units.append(_Unit(net, None, seed, k, [copies[k]]))
        model = EnsembleModel(mode, K, [u.net for u in units], seed=seed)
    elif mode == "mc_dropout":
        net = netcore.init_net(sizes, _rng(seed, 0, _INIT), dropout_rate)
        units.append(_Unit(net, None, seed, 0, _strategy_copies(strategy, 1)))
        model = EnsembleModel(mode, K, [net], seed=seed)
    else:
        init = _rng(seed, 0, _INIT)
        net = netcore.init_net(sizes, init, 0.0)
        factors = RankOneFactors.init(net, K, init, factor_std)
        units.append(_Unit(net, factors, seed, 0, _strategy_copies(strategy, K)))
        model = EnsembleModel(mode, K, [net], factors, seed=seed)

    history = model.history
    y_train = train.one_hot()
    val_labels = val.hard_labels if val is not None else None
    eval_rng = _rng(seed, 0, _EVAL)

    for epoch in range(config.epochs):
        _log_policies(history, epoch, units, strategy)
        total, count = 0.0, 0
        for unit in units:
            for idx, xb, _ in minibatches(train, config.batch_size, unit.shuffle_seed, epoch):
                yb = y_train[idx]
                if strategy.wants_correctness:
                    for k in range(unit.n_members):
                        pred = unit.member_forward(k, xb).labels
                        unit.strategies[k].observe(idx, pred == train.hard_labels[idx])
                loss = unit.step(idx, xb, yb, config, epoch)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"non-finite training loss at epoch {epoch}")
                total += loss * len(idx)
                count += len(idx)
        history.losses.append(total / count)
        if strategy.wants_validation:
            _refresh(model, units, strategy, epoch, val.x, val_labels, eval_rng)

    if strategy.wants_correctness:
        for unit_id, unit in enumerate(units):
            for k, strat in enumerate(unit.strategies):
                member = k if unit.factors is not None else unit_id
                history.forgetting[member] = (strat.tracker.forget_count.copy(),
                                              strat.tracker.mixup_coeff.copy())
    model.strategies = [s for u in units for s in u.strategies]
    return model


def _log_policies(history, epoch, units, strategy):
    if not strategy.wants_validation:
        return
    if strategy.shared:
        owners = [("ensemble", units[0].strategies[0])]
    else:
        owners = []
        for unit_id, unit in enumerate(units):
            for k, strat in enumerate(unit.strategies):
                owners.append((str(k if unit.factors is not None else unit_id), strat))
    for member, strat in owners:
        for c, flag in enumerate(strat.policy_flags()):
            history.policy_log.append((epoch, member, c, bool(flag)))


def _refresh(model, units, strategy, epoch, x_val, y_val, eval_rng):
    if strategy.shared:
        preds = predict_ensemble(model, x_val, eval_rng)
        strategy.refresh(epoch, preds, y_val)
        return
    for unit in units:
        if model.mode == "mc_dropout":
            unit.strategies[0].refresh(epoch, predict_ensemble(model, x_val, eval_rng), y_val)
            continue
        for k, strat in enumerate(unit.strategies):
            strat.refresh(epoch, unit.member_forward(k, x_val), y_val)


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(model: EnsembleModel, path, state: dict | None = None) -> None:
    """Write weights, factors and metadata to one ``.npz`` file.

    ``state`` maps names to arrays (policy flags, forgetting counters, ...) and
    is stored alongside.
    """
    arrays = {}
    for m, net in enumerate(model.members):
        for l, (w, b) in enumerate(zip(net.weights, net.biases)):
            arrays[f"member{m}_w{l}"] = w
            arrays[f"member{m}_b{l}"] = b
    if model.factors is not None:
        for l, (r, s) in enumerate(zip(model.factors.r, model.factors.s)):
            arrays[f"factor_r{l}"] = r
            arrays[f"factor_s{l}"] = s
    for key, value in (state or {}).items():
        arrays[f"state_{key}"] = np.asarray(value)
    meta = {"version": CHECKPOINT_VERSION, "mode": model.mode, "K": model.K, "seed": model.seed,
            "n_members": len(model.members), "n_layers": len(model.members[0].weights),
            "dropout_rate": model.members[0].dropout_rate}
    arrays["meta"] = np.array(json.dumps(meta))
    # fixed entry timestamps keep the file byte-identical across reruns
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for key, value in arrays.items():
            with zf.open(zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0)), "w") as fh:
                np.lib.format.write_array(fh, np.asanyarray(value), allow_pickle=False)


def load_checkpoint(path) -> tuple[EnsembleModel, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        L = meta["n_layers"]
        members = [DenseNet([data[f"member{m}_w{l}"] for l in range(L)],
                            [data[f"member{m}_b{l}"] for l in range(L)], meta["dropout_rate"])
                   for m in range(meta["n_members"])]
        factors = None
        if "factor_r0" in data:
            factors = RankOneFactors([data[f"factor_r{l}"] for l in range(L)],
                                     [data[f"factor_s{l}"] for l in range(L)])
        state = {k[len("state_"):]: data[k] for k in data.files if k.startswith("state_")}
    return EnsembleModel(meta["mode"], meta["K"], members, factors, meta["seed"]), state
