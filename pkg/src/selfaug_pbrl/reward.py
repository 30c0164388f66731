"""Ensemble reward model trained with the Bradley-Terry cross-entropy loss.

Each member maps a single state to a tanh-bounded reward. A segment's
return is the sum over its states, and

    P[seg1 > seg0] = exp(R1) / (exp(R0) + exp(R1)) = sigmoid(R1 - R0)

Labels follow :mod:`selfaug_pbrl.core`: y is the probability mass on seg1.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .approx import MLP, AdamState, MLPSpec, adam_step
from .core import PreferenceTriple, Source, StateLayout, TrajectorySegment


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _states(seg) -> np.ndarray:
    return seg.states if isinstance(seg, TrajectorySegment) else np.asarray(seg, dtype=np.float64)


def segment_return(member: MLP, segment) -> float:
    return float(np.sum(member(_states(segment))))


def preference_probability(member: MLP, seg0, seg1) -> float:
    """P[seg1 preferred over seg0] under ``member``."""
    return float(sigmoid(segment_return(member, seg1) - segment_return(member, seg0)))


def bt_loss_and_grads(member: MLP, s0: np.ndarray, s1: np.ndarray, labels: np.ndarray, need_grads=True):
    """Mean cross-entropy over a batch of segment pairs, and its parameter gradient.

    ``s0``/``s1`` have shape (batch, H, obs_dims); ``labels`` holds y per pair.
    """
    B, H, D = s0.shape
    flat = np.concatenate([s0.reshape(B * H, D), s1.reshape(B * H, D)], axis=0)
    out, cache = member.forward_cached(flat)
    returns = out[:, 0].reshape(2, B, H).sum(axis=2)
    z = returns[1] - returns[0]
    y = np.asarray(labels, dtype=np.float64)
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    if not need_grads:
        return loss, None
    dz = (sigmoid(z) - y) / B
    upstream = np.concatenate([np.repeat(-dz, H), np.repeat(dz, H)])[:, None]
    return loss, member.backward_cached(cache, upstream)


class PreferenceDataset:
    """Append-only store of preference triples with dense arrays for batching."""

    def __init__(self):
        self.triples: list[PreferenceTriple] = []
        self.counts = {Source.SAMPLED: 0, Source.AUGMENTED: 0}
        self._s0: list[np.ndarray] = []
        self._s1: list[np.ndarray] = []
        self._labels: list[float] = []
        self._cache = None

    def __len__(self):
        return len(self.triples)

    def append(self, triple: PreferenceTriple):
        if self.triples and triple.seg0.states.shape != self.triples[0].seg0.states.shape:
            raise ValueError("all triples in a dataset must share segment length and layout")
        self.triples.append(triple)
        self.counts[triple.source] += 1
        self._s0.append(triple.seg0.states)
        self._s1.append(triple.seg1.states)
        self._labels.append(triple.label)
        self._cache = None

    def extend(self, triples):
        for t in triples:
            self.append(t)

    def arrays(self):
        if self._cache is None:
            self._cache = (np.stack(self._s0), np.stack(self._s1), np.array(self._labels))
        return self._cache

    def by_source(self, source: Source) -> list[PreferenceTriple]:
        return [t for t in self.triples if t.source is source]

    # -- export / import ------------------------------------------------------

    def export_jsonl(self, path):
        """One row per triple; states rounded to 4 decimals for inspection."""
        with open(path, "w") as fh:
            for t in self.triples:
                row = {"label": t.label, "source": t.source.value}
                for key, seg in (("seg0", t.seg0), ("seg1", t.seg1)):
                    row[key] = {
                        "states": np.round(seg.states, 4).tolist(),
                        "privileged_rewards": np.round(seg.privileged_rewards, 4).tolist(),
                        "episode_id": seg.episode_id,
                        "start_step": seg.start_step,
                        "synthetic": seg.synthetic,
                    }
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    @classmethod
    def import_jsonl(cls, path, layout: StateLayout) -> "PreferenceDataset":
        ds = cls()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            segs = []
            for key in ("seg0", "seg1"):
                r = row[key]
                segs.append(
                    TrajectorySegment(
                        states=np.array(r["states"]),
                        layout=layout,
                        privileged_rewards=np.array(r["privileged_rewards"]),
                        episode_id=r["episode_id"],
                        start_step=r["start_step"],
                        synthetic=r["synthetic"],
                    )
                )
            ds.append(PreferenceTriple(segs[0], segs[1], row["label"], Source(row["source"])))
        return ds


class RewardEnsemble:
    def __init__(
        self,
        obs_dims: int,
        rng: np.random.Generator,
        n_members: int = 3,
        hidden_layers: int = 3,
        hidden_units: int = 256,
        lr: float = 3e-4,
    ):
        self.spec = MLPSpec(obs_dims, 1, hidden_layers, hidden_units, "leaky_relu", "tanh")
        self.rng = rng
        self.members = [MLP.create(self.spec, rng) for _ in range(n_members)]
        self.opts = [AdamState.for_params(m.params, lr=lr) for m in self.members]
        self.train_rounds = 0

    def __call__(self, states) -> np.ndarray:
        return self.ensemble_reward(states)

    def ensemble_reward(self, states) -> np.ndarray:
        """Mean member output per state, shape (n,)."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        total = np.zeros(states.shape[0])
        for m in self.members:
            total += m(states)[:, 0]
        return total / len(self.members)

    def train(self, dataset: PreferenceDataset, epochs: int = 10, batch_size: int = 512) -> list[list[float]]:
        """Full-dataset epochs per member with independent shuffles; returns per-epoch mean losses."""
        if len(dataset) == 0:
            raise ValueError("cannot train on an empty preference dataset")
        s0, s1, y = dataset.arrays()
        n = len(y)
        curves = []
        for member, opt in zip(self.members, self.opts):
            curve = []
            for _ in range(epochs):
                order = self.rng.permutation(n)
                total = 0.0
                for lo in range(0, n, batch_size):
                    idx = order[lo : lo + batch_size]
                    loss, grads = bt_loss_and_grads(member, s0[idx], s1[idx], y[idx])
                    adam_step(member.params, grads, opt)
                    total += loss * len(idx)
                curve.append(total / n)
            curves.append(curve)
        self.train_rounds += 1
        return curves

    def accuracy(self, triples, member: MLP | None = None) -> float:
        """Fraction of hard-labelled triples whose preferred side gets the larger predicted return."""
        hits = total = 0
        for t in triples:
            if t.label == 0.5:
                continue
            if member is None:
                r0 = float(np.sum(self.ensemble_reward(t.seg0.states)))
                r1 = float(np.sum(self.ensemble_reward(t.seg1.states)))
            else:
                r0, r1 = segment_return(member, t.seg0), segment_return(member, t.seg1)
            predicted = 0.0 if r0 >= r1 else 1.0
            hits += predicted == t.label
            total += 1
        if total == 0:
            raise ValueError("no hard-labelled triples to score")
        return hits / total
