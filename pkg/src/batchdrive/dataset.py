"""The static transition batch: records, sampling, and durable storage.

On disk a dataset is JSON Lines: a header object on line 1, then one
transition object per line. Floats are serialized with full repr precision
so a round-trip reproduces every value exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np


class DatasetError(RuntimeError):
    pass


@dataclass
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    done: bool

    def to_json(self):
        return json.dumps(
            {
                "s": np.asarray(self.s).tolist(),
                "a": np.asarray(self.a).tolist(),
                "r": float(self.r),
                "s2": np.asarray(self.s2).tolist(),
                "done": bool(self.done),
            }
        )


class BatchDataset:
    """Ordered transitions with a fixed (env, obs_dim, act_dim) signature."""

    def __init__(self, env_id, obs_dim, act_dim, seed=0):
        self.env_id = env_id
        self.obs_dim = int(obs_dim)
        self.act_dim = int(act_dim)
        self.seed = int(seed)
        self.transitions = []
        self._stacked = None

    @property
    def count(self):
        return len(self.transitions)

    def append(self, t):
        s = np.asarray(t.s, dtype=float)
        s2 = np.asarray(t.s2, dtype=float)
        a = np.asarray(t.a, dtype=float)
        if s.shape != (self.obs_dim,) or s2.shape != (self.obs_dim,):
            raise DatasetError(
                f"observation dims {s.shape}/{s2.shape} do not match header "
                f"obs_dim {self.obs_dim}"
            )
        if a.shape != (self.act_dim,):
            raise DatasetError(
                f"action dim {a.shape} does not match header act_dim {self.act_dim}"
            )
        if not math.isfinite(t.r):
            raise DatasetError("non-finite reward")
        self.transitions.append(Transition(s, a, float(t.r), s2, bool(t.done)))
        self._stacked = None

    def stacked(self):
        """(S, A, R, S2, D) matrices over the whole dataset, cached."""
        if self._stacked is None:
            if not self.transitions:
                raise DatasetError("empty dataset")
            self._stacked = (
                np.stack([t.s for t in self.transitions]),
                np.stack([t.a for t in self.transitions]),
                np.array([t.r for t in self.transitions]),
                np.stack([t.s2 for t in self.transitions]),
                np.array([float(t.done) for t in self.transitions]),
            )
        return self._stacked

    def sample_indices(self, n, rng):
        if not self.transitions:
            raise DatasetError("cannot sample from an empty dataset")
        return rng.integers(self.count, size=n)

    def sample_minibatch(self, n, rng):
        """n uniform-with-replacement draws, deterministic given rng state."""
        return [self.transitions[i] for i in self.sample_indices(n, rng)]

    def sample_arrays(self, n, rng):
        """Same draws as sample_minibatch, returned as stacked minibatch arrays."""
        idx = self.sample_indices(n, rng)
        S, A, R, S2, D = self.stacked()
        return S[idx], A[idx], R[idx], S2[idx], D[idx]

    def header(self):
        return {
            "env": self.env_id,
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "count": self.count,
            "seed": self.seed,
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(self.header()) + "\n")
            for t in self.transitions:
                fh.write(t.to_json() + "\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines:
            raise DatasetError(f"{path}: line 1: missing header")
        try:
            header = json.loads(lines[0])
        except json.JSONDecodeError as e:
            raise DatasetError(f"{path}: line 1: malformed header: {e}") from e
        required = {"env", "obs_dim", "act_dim", "count", "seed"}
        if not isinstance(header, dict) or not required.issubset(header):
            raise DatasetError(
                f"{path}: line 1: header missing fields "
                f"{sorted(required - set(header or {}))}"
            )
        ds = cls(header["env"], header["obs_dim"], header["act_dim"], header["seed"])
        body = lines[1:]
        if len(body) != header["count"]:
            raise DatasetError(
                f"{path}: header count {header['count']} but {len(body)} body lines"
            )
        for i, line in enumerate(body, start=2):
            try:
                rec = json.loads(line)
                ds.append(
                    Transition(
                        np.array(rec["s"], dtype=float),
                        np.array(rec["a"], dtype=float),
                        rec["r"],
                        np.array(rec["s2"], dtype=float),
                        rec["done"],
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError, DatasetError) as e:
                raise DatasetError(f"{path}: line {i}: {e}") from e
        return ds
