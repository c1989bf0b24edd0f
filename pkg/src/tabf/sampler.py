"""Euler–Maruyama integration of the biased overdamped Langevin dynamics.

All replicas advance together as ``(N, ·)`` arrays, but each replica draws
its Gaussian increments from its own Philox stream keyed by
``(seed, replica id)``, so results do not depend on how replicas are grouped
across workers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .domain import BoxSpec, ExtendedState, Potential, wrap
from .gridfn import TensorSum, bias_evaluator, value_and_grad
from .occupation import OccupationStore

CHECKPOINT_VERSION = 1


class FatalDivergence(RuntimeError):
    def __init__(self, replica: int, step: int, msg: str = "non-finite state"):
        super().__init__(f"{msg} (replica {replica}, step {step})")
        self.replica = replica
        self.step = step


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 25e-5
    record_stride: int = 20
    beta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")

    @property
    def record_dt(self) -> float:
        return self.dt * self.record_stride


def replica_rng(seed: int, replica: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), int(replica)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class ReplicaState:
    state: ExtendedState
    rng: np.random.Generator
    step: int = 0
    replica: int = 0


def apply_z_boundary(box: BoxSpec, z):
    return box.z_domain.apply(z)


def _bias_grad(bias, z):
    if bias is None:
        return np.zeros_like(z)
    if callable(bias):
        return bias(z)[1]
    if bias.n_terms == 0 and bias.baseline is None:
        return np.zeros_like(z)
    return value_and_grad(bias, z)[1]


def em_step(r: ReplicaState, pot: Potential, bias: TensorSum | None, cfg: IntegratorConfig,
            noise: bool = True) -> ReplicaState:
    """One Euler–Maruyama step for a single replica (returns a new state)."""
    box = pot.box()
    q = np.asarray(r.state.q, dtype=float)[None]
    z = np.asarray(r.state.z, dtype=float)[None]
    gq, gz = pot.gradient_batch(q, z)
    drift_z = -gz + _bias_grad(bias, z)
    amp = math.sqrt(2.0 * cfg.dt / cfg.beta)
    if noise:
        xi = r.rng.standard_normal(q.shape[1] + z.shape[1])
    else:
        xi = np.zeros(q.shape[1] + z.shape[1])
    qn = wrap(q[0] - gq[0] * cfg.dt + amp * xi[: q.shape[1]], box.box_length_q)
    zn = apply_z_boundary(box, z[0] + drift_z[0] * cfg.dt + amp * xi[q.shape[1]:])
    if not (np.all(np.isfinite(qn)) and np.all(np.isfinite(zn))):
        raise FatalDivergence(r.replica, r.step + 1)
    return ReplicaState(ExtendedState(qn, zn), r.rng, r.step + 1, r.replica)


class Ensemble:
    """State of ``N`` replicas advanced in lock-step."""

    def __init__(self, pot: Potential, q, z, cfg: IntegratorConfig,
                 replica_ids: Sequence[int] | None = None, step: int = 0, rngs=None):
        self.pot = pot
        self.box = pot.box()
        self.cfg = cfg
        self.q = np.array(q, dtype=float, ndmin=2)
        self.z = np.array(z, dtype=float, ndmin=2)
        n = self.q.shape[0]
        self.ids = np.arange(n) if replica_ids is None else np.asarray(replica_ids, dtype=np.int64)
        self.rngs = rngs if rngs is not None else [replica_rng(cfg.seed, i) for i in self.ids]
        self.step = int(step)
        self._forces = None

    @classmethod
    def from_state(cls, pot: Potential, state: ExtendedState, n: int, cfg: IntegratorConfig):
        q = np.repeat(np.asarray(state.q, dtype=float)[None], n, axis=0)
        z = np.repeat(np.asarray(state.z, dtype=float)[None], n, axis=0)
        return cls(pot, q, z, cfg)

    @property
    def n(self) -> int:
        return self.q.shape[0]

    def forces(self):
        if self._forces is None:
            self._forces = self.pot.gradient_batch(self.q, self.z)
        return self._forces

    def _noise(self, n_steps: int):
        dim = self.q.shape[1] + self.z.shape[1]
        xi = np.empty((n_steps, self.n, dim))
        for r, g in enumerate(self.rngs):
            xi[:, r, :] = g.standard_normal((n_steps, dim))
        return xi

    def advance(self, n_steps: int, bias=None, noise: bool = True, on_step: Callable | None = None):
        """Advance ``n_steps`` steps; ``on_step(k)`` is called after step ``k`` (1-based)."""
        cfg = self.cfg
        amp = math.sqrt(2.0 * cfg.dt / cfg.beta)
        nq = self.q.shape[1]
        L = self.box.box_length_q
        block = cfg.record_stride
        done = 0
        while done < n_steps:
            b = min(block, n_steps - done)
            xi = self._noise(b) if noise else None
            for k in range(b):
                gq, gz = self.forces()
                drift_z = -gz + _bias_grad(bias, self.z)
                q = self.q - gq * cfg.dt
                z = self.z + drift_z * cfg.dt
                if xi is not None:
                    q += amp * xi[k, :, :nq]
                    z += amp * xi[k, :, nq:]
                self.q = wrap(q, L)
                self.z = apply_z_boundary(self.box, z)
                self.step += 1
                self._forces = None
                bad = ~(np.all(np.isfinite(self.q), axis=1) & np.all(np.isfinite(self.z), axis=1))
                if np.any(bad):
                    raise FatalDivergence(int(self.ids[np.argmax(bad)]), self.step)
                if on_step is not None:
                    on_step(done + k + 1)
            done += b

    # -- checkpointing

    def save_checkpoint(self, directory, stem: str = "checkpoint"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savez(directory / f"{stem}.npz", q=self.q, z=self.z, ids=self.ids)
        states = []
        for g in self.rngs:
            st = g.bit_generator.state
            states.append(_jsonable(st))
        meta = {"version": CHECKPOINT_VERSION, "step": self.step, "rng": states,
                "config": {"dt": self.cfg.dt, "record_stride": self.cfg.record_stride,
                           "beta": self.cfg.beta, "seed": self.cfg.seed}}
        (directory / f"{stem}.json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load_checkpoint(cls, pot: Potential, directory, stem: str = "checkpoint"):
        directory = Path(directory)
        meta = json.loads((directory / f"{stem}.json").read_text())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        arr = np.load(directory / f"{stem}.npz")
        cfg = IntegratorConfig(**meta["config"])
        rngs = []
        for st in meta["rng"]:
            bg = np.random.Philox()
            bg.state = _from_jsonable(st)
            rngs.append(np.random.Generator(bg))
        return cls(pot, arr["q"], arr["z"], cfg, arr["ids"], meta["step"], rngs)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, np.ndarray):
        return {"__array__": [int(v) for v in x.ravel()], "dtype": str(x.dtype)}
    if isinstance(x, np.integer):
        return int(x)
    return x


def _from_jsonable(x):
    if isinstance(x, dict):
        if "__array__" in x:
            return np.array(x["__array__"], dtype=x["dtype"])
        return {k: _from_jsonable(v) for k, v in x.items()}
    return x


def run_segment(ens: Ensemble, bias: TensorSum | None, n_steps: int,
                stores: Sequence[OccupationStore] | OccupationStore | None,
                weight_bias: TensorSum | None = None, noise: bool = True):
    """Advance the ensemble and record ``(z, ∇_z V, w)`` every ``record_stride`` steps.

    ``stores`` is one store per replica or a single shared store (records
    then go in replica order at each recording time).  When ``weight_bias``
    is given the weight is ``exp(-β A(z))`` with that (frozen) bias,
    otherwise 1.
    """
    cfg = ens.cfg
    evaluator = None
    if bias is not None and (bias.n_terms > 0 or bias.baseline is not None):
        evaluator = bias_evaluator(bias)
    weight_eval = None
    if weight_bias is not None and (weight_bias.n_terms > 0 or weight_bias.baseline is not None):
        weight_eval = bias_evaluator(weight_bias)
    shared = isinstance(stores, OccupationStore)

    def record(k):
        if stores is None or ens.step % cfg.record_stride:
            return
        _, gz = ens.forces()
        if weight_eval is not None:
            w = np.exp(-cfg.beta * weight_eval(ens.z)[0])
        else:
            w = np.ones(ens.n)
        if shared:
            stores.record_batch(ens.z, gz, w, ens.ids, ens.step)
        else:
            for r, st in enumerate(stores):
                st.record_batch(ens.z[r:r + 1], gz[r:r + 1], w[r:r + 1], ens.ids[r], ens.step)

    ens.advance(n_steps, evaluator, noise=noise, on_step=record)
