"""Offline dataset: trajectories, JSONL persistence, normalisation, candidate search."""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from stitchkit.errors import ConfigurationError, DatasetParseError, IntegrityError

FORMAT_VERSION = 1
STD_FLOOR = 1e-6
ROLE_CURRENT, ROLE_NEXT = 0, 1


@dataclass(frozen=True)
class Transition:
    traj_id: int
    t: int
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool


@dataclass(eq=False)
class Trajectory:
    """One episode stored column-wise; row ``t`` is transition ``t``.

    Position ``p`` in ``0..len`` names a state occurrence: ``states[p]`` for
    ``p < len`` and the final ``next_states[-1]`` for ``p == len``.
    """

    traj_id: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(len(self.rewards), -1)
        self.actions = np.asarray(self.actions, dtype=float).reshape(len(self.rewards), -1)
        self.rewards = np.asarray(self.rewards, dtype=float)
        self.next_states = np.asarray(self.next_states, dtype=float).reshape(len(self.rewards), -1)
        self.dones = np.asarray(self.dones, dtype=bool)

    def __len__(self):
        return len(self.rewards)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.traj_id == other.traj_id
            and np.array_equal(self.states, other.states)
            and np.array_equal(self.actions, other.actions)
            and np.array_equal(self.rewards, other.rewards)
            and np.array_equal(self.next_states, other.next_states)
            and np.array_equal(self.dones, other.dones)
        )

    def state_at(self, pos: int) -> np.ndarray:
        return self.states[pos] if pos < len(self) else self.next_states[-1]

    def transition(self, t: int) -> Transition:
        return Transition(self.traj_id, t, self.states[t], self.actions[t], float(self.rewards[t]),
                          self.next_states[t], bool(self.dones[t]))

    @property
    def transitions(self) -> list[Transition]:
        return [self.transition(t) for t in range(len(self))]

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    @classmethod
    def from_transitions(cls, traj_id: int, transitions) -> Trajectory:
        transitions = list(transitions)
        return cls(
            traj_id,
            np.array([tr.state for tr in transitions], dtype=float),
            np.array([tr.action for tr in transitions], dtype=float),
            np.array([tr.reward for tr in transitions], dtype=float),
            np.array([tr.next_state for tr in transitions], dtype=float),
            np.array([tr.done for tr in transitions], dtype=bool),
        )

    def validate(self, d_s: int, d_a: int) -> None:
        n = len(self)
        if n == 0:
            raise IntegrityError(self.traj_id, 0, "trajectory has no transitions")
        if self.states.shape != (n, d_s) or self.next_states.shape != (n, d_s):
            raise IntegrityError(self.traj_id, 0, f"state dimension differs from d_s={d_s}")
        if self.actions.shape != (n, d_a):
            raise IntegrityError(self.traj_id, 0, f"action dimension differs from d_a={d_a}")
        for t in range(n - 1):
            if self.dones[t]:
                raise IntegrityError(self.traj_id, t, "done set before the last transition")
            if not np.array_equal(self.next_states[t], self.states[t + 1]):
                raise IntegrityError(self.traj_id, t, "next_state does not equal the following state")


@dataclass(frozen=True)
class StateIndex:
    """Every state occurrence in the dataset exactly once, with back-references."""

    states: np.ndarray
    traj_ids: np.ndarray
    steps: np.ndarray
    roles: np.ndarray
    traj_rows: dict  # traj_id -> (first row, length)

    def row(self, traj_id: int, pos: int) -> int:
        first, _ = self.traj_rows[traj_id]
        return first + pos

    def successor_row(self, row: int) -> int | None:
        """Row of the state that follows ``row`` in its trajectory (None for final states)."""
        if self.roles[row] == ROLE_NEXT:
            return None
        return row + 1


@dataclass(frozen=True)
class Candidate:
    state: np.ndarray
    traj_id: int
    step: int
    distance: float


class CandidateSet(list):
    """List of :class:`Candidate`; ``capped`` records whether the top-K cap applied."""

    capped: bool = False

    @property
    def keys(self) -> list[tuple[int, int]]:
        return [(c.traj_id, c.step) for c in self]


class Dataset:
    def __init__(self, trajectories, d_s: int, d_a: int, validate: bool = True):
        self.trajectories = list(trajectories)
        self.d_s = int(d_s)
        self.d_a = int(d_a)
        ids = [tr.traj_id for tr in self.trajectories]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("duplicate trajectory ids")
        if validate:
            for tr in self.trajectories:
                tr.validate(self.d_s, self.d_a)

    def __len__(self):
        return len(self.trajectories)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.d_s, self.d_a) == (other.d_s, other.d_a) and self.trajectories == other.trajectories

    def __repr__(self):
        return f"Dataset({len(self.trajectories)} trajectories, {self.n_transitions} transitions, d_s={self.d_s}, d_a={self.d_a})"

    @property
    def n_transitions(self) -> int:
        return sum(len(tr) for tr in self.trajectories)

    def by_id(self, traj_id: int) -> Trajectory:
        return self._by_id[traj_id]

    @cached_property
    def _by_id(self) -> dict:
        return {tr.traj_id: tr for tr in self.trajectories}

    def _stack(self, attr, width):
        parts = [getattr(tr, attr) for tr in self.trajectories]
        if not parts:
            return np.zeros((0, width)) if width else np.zeros(0)
        return np.concatenate(parts)

    @cached_property
    def states(self) -> np.ndarray:
        return self._stack("states", self.d_s)

    @cached_property
    def actions(self) -> np.ndarray:
        return self._stack("actions", self.d_a)

    @cached_property
    def rewards(self) -> np.ndarray:
        return self._stack("rewards", 0)

    @cached_property
    def next_states(self) -> np.ndarray:
        return self._stack("next_states", self.d_s)

    @cached_property
    def dones(self) -> np.ndarray:
        parts = [tr.dones for tr in self.trajectories]
        return np.concatenate(parts) if parts else np.zeros(0, dtype=bool)

    @cached_property
    def state_index(self) -> StateIndex:
        states, traj_ids, steps, roles, rows = [], [], [], [], {}
        first = 0
        for tr in self.trajectories:
            n = len(tr)
            states.append(tr.states)
            states.append(tr.next_states[-1:])
            traj_ids.append(np.full(n + 1, tr.traj_id))
            steps.append(np.arange(n + 1))
            roles.append(np.r_[np.full(n, ROLE_CURRENT), ROLE_NEXT])
            rows[tr.traj_id] = (first, n)
            first += n + 1
        if not states:
            return StateIndex(np.zeros((0, self.d_s)), np.zeros(0, int), np.zeros(0, int), np.zeros(0, int), rows)
        return StateIndex(np.concatenate(states), np.concatenate(traj_ids), np.concatenate(steps),
                          np.concatenate(roles), rows)

    @cached_property
    def _tree(self) -> cKDTree:
        return cKDTree(self.state_index.states)

    def returns(self) -> np.ndarray:
        return np.array([tr.total_reward for tr in self.trajectories])


# -- persistence -------------------------------------------------------------


def _floats(x) -> list[float]:
    return [float(v) for v in np.asarray(x).reshape(-1)]


def save_dataset(dataset: Dataset, path) -> None:
    """Write JSON Lines: a header then one transition per line; atomic replace."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps({"version": FORMAT_VERSION, "d_s": dataset.d_s, "d_a": dataset.d_a}) + "\n")
            for tr in dataset.trajectories:
                for t in range(len(tr)):
                    rec = {
                        "traj": int(tr.traj_id),
                        "t": t,
                        "s": _floats(tr.states[t]),
                        "a": _floats(tr.actions[t]),
                        "r": float(tr.rewards[t]),
                        "s2": _floats(tr.next_states[t]),
                        "done": bool(tr.dones[t]),
                    }
                    fh.write(json.dumps(rec) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _vector(rec, key, dim, lineno):
    v = rec.get(key)
    if not isinstance(v, list) or len(v) != dim:
        raise DatasetParseError(lineno, f"field {key!r} must be a list of {dim} numbers")
    try:
        return [float(x) for x in v]
    except (TypeError, ValueError):
        raise DatasetParseError(lineno, f"field {key!r} contains a non-number") from None


def load_dataset(path) -> Dataset:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetParseError(1, "missing header record")
    try:
        header = json.loads(lines[0])
        d_s, d_a = int(header["d_s"]), int(header["d_a"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetParseError(1, f"bad header: {exc}") from None
    if header.get("version") != FORMAT_VERSION:
        raise DatasetParseError(1, f"unsupported version {header.get('version')!r}")

    groups: dict[int, list] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetParseError(lineno, f"invalid JSON: {exc.msg}") from None
        if not isinstance(rec, dict):
            raise DatasetParseError(lineno, "record is not an object")
        try:
            traj, t = rec["traj"], rec["t"]
            reward, done = float(rec["r"]), rec["done"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetParseError(lineno, f"missing or malformed field: {exc}") from None
        if not isinstance(traj, int) or not isinstance(t, int) or not isinstance(done, bool):
            raise DatasetParseError(lineno, "traj and t must be integers, done a boolean")
        steps = groups.setdefault(traj, [])
        if t != len(steps):
            raise IntegrityError(traj, t, f"expected step {len(steps)}")
        steps.append(Transition(traj, t, _vector(rec, "s", d_s, lineno), _vector(rec, "a", d_a, lineno),
                                reward, _vector(rec, "s2", d_s, lineno), done))
    trajs = [Trajectory.from_transitions(k, v) for k, v in groups.items()]
    return Dataset(trajs, d_s, d_a)


# -- statistics --------------------------------------------------------------


def normalization_stats(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and (population) std of the dataset's states, std floored."""
    states = dataset.states
    if len(states) < 2:
        raise ConfigurationError("normalization needs at least 2 transitions")
    mean = states.mean(axis=0)
    std = np.maximum(states.std(axis=0), STD_FLOOR)
    return mean, std


def input_stats(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Mean/std over every state occurrence, for scaling model inputs.

    Unlike :func:`normalization_stats`, constant dimensions get std 1 so that
    unseen values are not blown up by the floor.
    """
    states = dataset.state_index.states
    if len(states) == 0:
        raise ConfigurationError("cannot compute input statistics of an empty dataset")
    std = states.std(axis=0)
    return states.mean(axis=0), np.where(std > STD_FLOOR, std, 1.0)


def default_epsilon(dataset: Dataset, factor: float = 0.1) -> float:
    """``factor`` times the mean per-dimension standard deviation of the states."""
    return float(factor * dataset.states.std(axis=0).mean())


# -- candidate search --------------------------------------------------------


def candidate_rows(dataset: Dataset, s, s_next, eps: float, exclude: tuple[int, int] | None = None,
                   cap: int | None = None) -> tuple[np.ndarray, np.ndarray, bool]:
    """State-index rows of the candidates, their criterion distances, and whether the cap applied.

    Rows are ordered by ``(traj_id, step)``.
    """
    if eps < 0:
        raise ConfigurationError("epsilon must be non-negative")
    index = dataset.state_index
    empty = np.zeros(0, dtype=int), np.zeros(0), False
    if len(index.states) == 0:
        return empty
    s = np.asarray(s, dtype=float)
    s_next = np.asarray(s_next, dtype=float)
    tree = dataset._tree

    near_s = np.asarray(tree.query_ball_point(s, eps), dtype=int)
    if len(near_s):
        near_s = near_s[index.roles[near_s] == ROLE_CURRENT]  # final states have no successor
        d_a = np.linalg.norm(index.states[near_s] - s, axis=1)
        keep = d_a <= eps
        rows_a, d_a = near_s[keep] + 1, d_a[keep]
    else:
        rows_a, d_a = near_s, np.zeros(0)
    near_next = np.asarray(tree.query_ball_point(s_next, eps), dtype=int)
    if len(near_next):
        d_b = np.linalg.norm(index.states[near_next] - s_next, axis=1)
        keep = d_b <= eps
        rows_b, d_b = near_next[keep], d_b[keep]
    else:
        rows_b, d_b = near_next, np.zeros(0)

    rows = np.concatenate([rows_a, rows_b])
    dists = np.concatenate([d_a, d_b])
    if exclude is not None and exclude[0] in index.traj_rows:
        mask = rows != index.row(*exclude)
        rows, dists = rows[mask], dists[mask]
    if len(rows) == 0:
        return empty
    # dedupe keeping the smaller distance per row
    order = np.lexsort((dists, rows))
    rows, dists = rows[order], dists[order]
    first = np.r_[True, rows[1:] != rows[:-1]]
    rows, dists = rows[first], dists[first]
    capped = False
    if cap is not None and len(rows) > cap:
        nearest = np.lexsort((rows, dists))[:cap]
        rows, dists = rows[nearest], dists[nearest]
        order = np.argsort(rows, kind="stable")
        rows, dists = rows[order], dists[order]
        capped = True
    # rows of one trajectory are contiguous and increasing in step, and
    # trajectories are laid out in dataset order; sort by (traj_id, step)
    order = np.lexsort((index.steps[rows], index.traj_ids[rows]))
    return rows[order], dists[order], capped


def candidate_next_states(dataset: Dataset, s, s_next, eps: float, exclude: tuple[int, int] | None = None,
                          cap: int | None = None) -> CandidateSet:
    """Dataset states that could replace ``s_next`` as the successor of ``s``.

    Union of (a) successors of every state within ``eps`` of ``s`` and (b) every
    state within ``eps`` of ``s_next``. ``exclude`` is the ``(traj_id, step)``
    position of the observed next state. With ``cap``, only the ``cap``
    entries nearest by their own criterion's distance are kept.
    """
    rows, dists, capped = candidate_rows(dataset, s, s_next, eps, exclude, cap)
    index = dataset.state_index
    out = CandidateSet(
        Candidate(index.states[r], int(index.traj_ids[r]), int(index.steps[r]), float(d)) for r, d in zip(rows, dists)
    )
    out.capped = capped
    return out
