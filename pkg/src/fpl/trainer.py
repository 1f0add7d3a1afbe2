"""Training loop: AdamW over (mu, epsilon) with a cosine-annealed rate.

The training set is the pack's train-split queries; by convention those
are the support images themselves.  When a training query is bitwise
identical to one of its class's support maps, its own rows are excluded
from that class's pool for its reconstructions (leave-self-out), which
prevents the degenerate solution of shrinking the ridge to zero so every
query reconstructs itself.  Exact-paper pooling (no exclusion) is a
flag; 1-shot classes never exclude (the pool would be empty).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .classifier import FplParams, HyperParams, TextFeatureBank, clip_scores
from .dataio import FeaturePack
from .engine import EpisodeEngine
from .errors import EmptyBatch, EmptyClass, StepOutOfRange
from .projection import build_pool

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


@dataclass(frozen=True)
class Ablation:
    """Component toggles: drop the orthogonality term, or pin mu at 0."""

    po_off: bool = False
    freeze_mu: bool = False


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss: float
    accuracy: float
    mu: float
    epsilon: float

    def record(self) -> str:
        """Line-delimited training-log record."""
        return json.dumps(
            {
                "epoch": self.epoch,
                "lr": self.lr,
                "loss": self.loss,
                "accuracy": self.accuracy,
                "mu": self.mu,
                "epsilon": self.epsilon,
            },
            separators=(",", ":"),
        )


@dataclass
class _AdamScalar:
    """Decoupled-weight-decay Adam state for one scalar."""

    m: float = 0.0
    v: float = 0.0

    def step(self, value: float, grad: float, lr: float, t: int,
             weight_decay: float) -> float:
        self.m = _ADAM_BETA1 * self.m + (1.0 - _ADAM_BETA1) * grad
        self.v = _ADAM_BETA2 * self.v + (1.0 - _ADAM_BETA2) * grad * grad
        m_hat = self.m / (1.0 - _ADAM_BETA1 ** t)
        v_hat = self.v / (1.0 - _ADAM_BETA2 ** t)
        return value - lr * (m_hat / (math.sqrt(v_hat) + _ADAM_EPS)
                             + weight_decay * value)


@dataclass
class TrainState:
    """Optimizer state plus the per-epoch history."""

    params: FplParams
    step: int
    adam_mu: _AdamScalar
    adam_epsilon: _AdamScalar
    base_lr: float
    total_steps: int
    rng_seed: int
    history: list = field(default_factory=list)

    def num_trainable_scalars(self) -> int:
        return self.params.as_vector().size

    def to_json(self) -> dict:
        return {
            "mu": self.params.mu,
            "epsilon": self.params.epsilon,
            "step": self.step,
            "base_lr": self.base_lr,
            "total_steps": self.total_steps,
            "seed": self.rng_seed,
            "history": [
                {
                    "epoch": h.epoch,
                    "lr": h.lr,
                    "loss": h.loss,
                    "accuracy": h.accuracy,
                    "mu": h.mu,
                    "epsilon": h.epsilon,
                }
                for h in self.history
            ],
        }


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from base_lr at step 0 toward 0, no warmup."""
    if not 0 <= step < total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {total_steps})")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def _build_engine(pack: FeaturePack, hp: HyperParams):
    """Pools, train-query engine with leave-self-out overrides, clip probs."""
    pools = []
    for ci, maps in enumerate(pack.support):
        if not maps:
            raise EmptyClass(f"train: class {ci} has no support maps")
        pools.append(build_pool(maps, class_id=ci))

    train_queries = pack.queries_for_split("train")
    if not train_queries:
        raise EmptyBatch("train: pack has no train-split queries")

    maps = [q.feature_map for q in train_queries]
    labels = np.array([q.label for q in train_queries], dtype=np.int64)
    engine = EpisodeEngine(pools, maps)

    if hp.leave_self_out:
        for qi, q in enumerate(train_queries):
            cid = q.label
            support_maps = pack.support[cid]
            if len(support_maps) < 2:
                continue  # leave-one-out needs a second shot
            for sm in support_maps:
                if np.array_equal(sm.values, q.feature_map.values):
                    block = sm.values.T @ sm.values
                    loo_gram = pools[cid].gram - (block + block.T) * 0.5
                    engine.set_leave_one_out(qi, cid, loo_gram)
                    break

    bank = TextFeatureBank(tuple(pack.class_names), pack.text_features, pack.tau)
    clip_probs = np.stack(
        [clip_scores(q.global_feature, bank) for q in train_queries]
    )
    return engine, labels, clip_probs


def train(pack: FeaturePack, hp: HyperParams = HyperParams(),
          ablation: Ablation = Ablation(), log_stream=None) -> TrainState:
    """Optimize (mu, epsilon) on the pack's training queries.

    Returns the final TrainState with one EpochStats entry per epoch.
    Identical seeds give bit-identical histories.  If ``log_stream`` is
    given, one JSON record per epoch is written to it.
    """
    engine, labels, clip_probs = _build_engine(pack, hp)
    num_train = len(labels)
    batch_size = min(hp.batch_size, num_train)
    steps_per_epoch = math.ceil(num_train / batch_size)
    total_steps = hp.epochs * steps_per_epoch

    state = TrainState(
        params=FplParams(mu=0.0, epsilon=1.0),
        step=0,
        adam_mu=_AdamScalar(),
        adam_epsilon=_AdamScalar(),
        base_lr=hp.lr,
        total_steps=total_steps,
        rng_seed=hp.seed,
    )
    gamma = 0.0 if ablation.po_off else hp.gamma
    rng = np.random.default_rng(hp.seed)

    for epoch in range(1, hp.epochs + 1):
        order = rng.permutation(num_train)
        epoch_loss = 0.0
        epoch_correct = 0
        epoch_lr = cosine_lr(state.step, total_steps, hp.lr) if total_steps else 0.0
        for start in range(0, num_train, batch_size):
            idx = order[start:start + batch_size]
            loss, dmu, deps, ncorrect = engine.loss_and_grads(
                idx, labels[idx], clip_probs[idx],
                state.params.mu, state.params.epsilon, hp, gamma=gamma,
            )
            lr = cosine_lr(state.step, total_steps, hp.lr)
            t = state.step + 1
            if not ablation.freeze_mu:
                state.params.mu = state.adam_mu.step(
                    state.params.mu, dmu, lr, t, hp.weight_decay
                )
            state.params.epsilon = state.adam_epsilon.step(
                state.params.epsilon, deps, lr, t, hp.weight_decay
            )
            state.params.clamp()
            state.step += 1
            epoch_loss += loss * len(idx)
            epoch_correct += ncorrect
        stats = EpochStats(
            epoch=epoch,
            lr=epoch_lr,
            loss=epoch_loss / num_train,
            accuracy=epoch_correct / num_train,
            mu=state.params.mu,
            epsilon=state.params.epsilon,
        )
        state.history.append(stats)
        if log_stream is not None:
            log_stream.write(stats.record() + "\n")
    return state
