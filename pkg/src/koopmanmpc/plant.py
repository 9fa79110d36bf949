"""Surrogate nonlinear controlled voltage dynamics.

A desk-scale stand-in for a multi-bus power network: each bus voltage
recovers toward a load-dependent equilibrium through a linear plus cubic
restoring term, neighbouring buses exchange deviation through a
row-stochastic coupling graph, and reactive-support controls push voltages
toward a ceiling ``v_max`` with a saturating (multiplicative) gain.  The
vector field for bus ``i`` is::

    dv_i/dt = a_i (v*_i - v_i) + b_i (v*_i - v_i)^3
              + c * sum_j W_ij [(v_j - v*_j) - (v_i - v*_i)]
              + (sum_l gamma_il u_l) * (v_max - v_i)

with the equilibrium ``v*(lambda) = 1 - 0.3 * lambda * d``.  The coupling
acts on deviations from equilibrium so that ``v*`` is an exact fixed point
of the uncontrolled field for every load factor.

All model objects are immutable after construction; ``step`` and
``rollout`` are pure functions of their inputs, so rollouts may safely run
concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

# Per-step ceiling on every control channel, in p.u. of reactive support.
U_MAX = 0.25

# RK4 integration: internal substeps never longer than this, and never
# fewer than 4 per call.  Keeps the one-control-interval halving error
# around 1e-9 for the default parameters.
_SUBSTEP_CAP = 0.05
_SUBSTEP_MIN = 4

#: Floor voltage a fault can sag a bus to.
FAULT_FLOOR = 0.05


class IntegrationError(RuntimeError):
    """Non-finite state or parameters encountered while integrating."""


def _readonly(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Schedule:
    """Sampling grid: simulation period ``ts``, control period ``tc``
    (an exact integer multiple of ``ts``) and number of control instants."""

    ts: float
    tc: float
    n_instants: int

    def __post_init__(self):
        if self.ts <= 0 or self.tc <= 0:
            raise ValueError("ts and tc must be positive")
        h = self.tc / self.ts
        if abs(h - round(h)) > 1e-9 or round(h) < 1:
            raise ValueError(f"tc must be an integer multiple of ts, got tc/ts={h}")
        if self.n_instants < 1:
            raise ValueError("n_instants must be >= 1")

    @property
    def h(self) -> int:
        """Samples per control interval."""
        return int(round(self.tc / self.ts))


@dataclass(frozen=True)
class FaultSpec:
    """Instantaneous post-clearing voltage sag on a set of buses."""

    affected: tuple[int, ...]
    depth: float

    def __post_init__(self):
        if len(self.affected) == 0:
            raise ValueError("fault must affect at least one bus")
        if not 0.0 < self.depth < 1.0:
            raise ValueError("fault depth must lie in (0, 1)")
        object.__setattr__(self, "affected", tuple(int(i) for i in self.affected))


@dataclass(frozen=True)
class PlantModel:
    """Parameters of the surrogate network.

    ``w`` is row-stochastic with zero diagonal; ``gamma`` maps the m
    control channels to bus injections; ``d`` scales how strongly the
    load factor ``lam`` depresses each bus equilibrium.
    """

    n: int
    m: int
    a: np.ndarray
    b: np.ndarray
    c: float
    w: np.ndarray
    gamma: np.ndarray
    v_max: float
    d: np.ndarray
    lam: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "a", _readonly(self.a))
        object.__setattr__(self, "b", _readonly(self.b))
        object.__setattr__(self, "w", _readonly(self.w))
        object.__setattr__(self, "gamma", _readonly(self.gamma))
        object.__setattr__(self, "d", _readonly(self.d))
        n, m = self.n, self.m
        if self.a.shape != (n,) or self.b.shape != (n,) or self.d.shape != (n,):
            raise ValueError("a, b, d must be n-vectors")
        if self.w.shape != (n, n) or self.gamma.shape != (n, m):
            raise ValueError("w must be n x n and gamma n x m")
        if not np.all(np.isfinite(self.a)) or not np.all(self.a > 0):
            raise ValueError("recovery rates a must be positive")
        if np.any(self.b < 0) or self.c < 0 or np.any(self.gamma < 0):
            raise ValueError("b, c and gamma must be nonnegative")
        if self.v_max <= 1.0:
            raise ValueError("v_max must exceed 1.0")
        if np.any(self.d < 0) or np.any(self.d > 1):
            raise ValueError("load sensitivities d must lie in [0, 1]")
        # an all-zero w is tolerated when coupling is switched off (c = 0),
        # which is the only way a single-bus model can exist
        if np.any(np.abs(self.w.sum(axis=1) - 1.0) > 1e-12) and not (
            self.c == 0.0 and not np.any(self.w)
        ):
            raise ValueError("every row of w must sum to 1")
        if np.any(np.abs(np.diag(self.w)) > 0):
            raise ValueError("w must have zero diagonal")
        v_eq = self.equilibrium()
        if np.any(v_eq <= 0) or np.any(v_eq > 1):
            raise ValueError("equilibrium voltages must lie in (0, 1]")

    def equilibrium(self, lam: float | None = None) -> np.ndarray:
        """Uncontrolled fixed point ``v* = 1 - 0.3 * lam * d``."""
        lam = self.lam if lam is None else lam
        return 1.0 - 0.3 * lam * self.d

    def with_load(self, lam: float) -> "PlantModel":
        return replace(self, lam=lam)

    def control_buses(self) -> tuple[int, ...]:
        """Injection bus of each control channel (dominant gamma row)."""
        return tuple(int(np.argmax(self.gamma[:, l])) for l in range(self.m))


@dataclass(frozen=True)
class PlantState:
    v: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "v", _readonly(self.v))
        if not np.all(np.isfinite(self.v)):
            raise IntegrationError("state voltages must be finite")


@dataclass(frozen=True)
class Trajectory:
    """Voltage samples on the ``ts`` grid plus the zero-order-held controls.

    ``voltages[k]`` is the sample at ``times[k]``; ``controls[j]`` was held
    over the j-th control interval.
    """

    times: np.ndarray
    voltages: np.ndarray
    controls: np.ndarray
    schedule: Schedule

    def __post_init__(self):
        object.__setattr__(self, "times", _readonly(self.times))
        object.__setattr__(self, "voltages", _readonly(self.voltages))
        object.__setattr__(self, "controls", _readonly(self.controls))

    @property
    def n_intervals(self) -> int:
        return self.controls.shape[0]

    def held_controls(self) -> np.ndarray:
        """Controls repeated onto the sample grid (first sample gets u_0)."""
        h = self.schedule.h
        held = np.repeat(self.controls, h, axis=0)
        return np.vstack([held, held[-1:]])


ControlPolicy = Callable[[int, np.ndarray], np.ndarray]
"""Maps (control-instant index, current voltage vector) -> m-vector in [0, U_MAX]."""


def vector_field(plant: PlantModel, v: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Time derivative of the voltages at state ``v`` under control ``u``."""
    e = v - plant.equilibrium()
    recover = plant.a * (-e) + plant.b * (-e) ** 3
    couple = plant.c * (plant.w @ e - e)
    inject = (plant.gamma @ u) * (plant.v_max - v)
    return recover + couple + inject


def n_substeps(dt: float) -> int:
    """Default internal substep count for one ``step`` call."""
    return max(_SUBSTEP_MIN, int(np.ceil(dt / _SUBSTEP_CAP)))


def step(
    plant: PlantModel,
    state: PlantState,
    u: np.ndarray,
    dt: float,
    substeps: int | None = None,
) -> PlantState:
    """Advance the state by ``dt`` under the constant control ``u``.

    Classical RK4 with internal substeps capped at 50 ms (at least 4 per
    call; override with ``substeps`` for convergence studies); voltages
    are clamped to [0, v_max] after every substep so the saturating
    control term stays well posed.  Deterministic: identical inputs give
    bit-identical outputs.
    """
    u = np.asarray(u, dtype=float)
    if dt <= 0:
        raise ValueError("dt must be positive")
    if u.shape != (plant.m,):
        raise ValueError(f"control must have shape ({plant.m},)")
    if np.any(u < -1e-9) or np.any(u > U_MAX + 1e-9):
        raise ValueError(f"control must lie in [0, {U_MAX}] componentwise")
    if not np.all(np.isfinite(u)):
        raise IntegrationError("control must be finite")

    n_sub = n_substeps(dt) if substeps is None else int(substeps)
    h = dt / n_sub
    v = np.array(state.v, dtype=float)
    for _ in range(n_sub):
        k1 = vector_field(plant, v, u)
        k2 = vector_field(plant, v + 0.5 * h * k1, u)
        k3 = vector_field(plant, v + 0.5 * h * k2, u)
        k4 = vector_field(plant, v + h * k3, u)
        v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(v)):
            raise IntegrationError("integration produced non-finite voltages")
        v = np.clip(v, 0.0, plant.v_max)
    return PlantState(v=v, t=state.t + dt)


def apply_fault(state: PlantState, affected: Sequence[int], depth: float) -> PlantState:
    """Sag the affected buses by ``depth`` p.u., floored at 0.05 p.u."""
    affected = tuple(int(i) for i in affected)
    if len(affected) == 0:
        raise ValueError("fault must affect at least one bus")
    if not 0.0 < depth < 1.0:
        raise ValueError("fault depth must lie in (0, 1)")
    v = np.array(state.v, dtype=float)
    for i in affected:
        v[i] = max(v[i] - depth, FAULT_FLOOR)
    return PlantState(v=v, t=state.t)


def faulted_initial_state(plant: PlantModel, fault: FaultSpec) -> PlantState:
    """Equilibrium state with the fault sag applied, at t = 0."""
    eq = PlantState(v=plant.equilibrium(), t=0.0)
    return apply_fault(eq, fault.affected, fault.depth)


def rollout(
    plant: PlantModel,
    init: PlantState,
    policy: ControlPolicy,
    sched: Schedule,
) -> Trajectory:
    """Simulate ``n_instants`` control intervals with zero-order-held controls.

    The policy is queried once per control instant with the instantaneous
    voltage vector; the returned trajectory holds ``n_instants * h + 1``
    samples at spacing ``ts``.
    """
    h = sched.h
    state = init
    samples = [np.array(init.v)]
    controls = np.zeros((sched.n_instants, plant.m))
    for k in range(sched.n_instants):
        u = np.asarray(policy(k, np.array(state.v)), dtype=float)
        controls[k] = u
        for _ in range(h):
            state = step(plant, state, u, sched.ts)
            samples.append(np.array(state.v))
    times = init.t + sched.ts * np.arange(len(samples))
    return Trajectory(
        times=times,
        voltages=np.vstack(samples),
        controls=controls,
        schedule=sched,
    )


def run_episode(
    plant: PlantModel,
    sched: Schedule,
    fault: FaultSpec,
    policy: ControlPolicy,
) -> Trajectory:
    """One experiment episode: fault at t = 0, one uncontrolled interval
    while the first measurement window accumulates, then ``n_instants``
    policy-controlled intervals.

    The returned trajectory spans ``(n_instants + 1)`` intervals; its
    control array has a leading all-zero row for the uncontrolled one.
    """
    init = faulted_initial_state(plant, fault)
    ext = Schedule(ts=sched.ts, tc=sched.tc, n_instants=sched.n_instants + 1)

    def shifted(k: int, v: np.ndarray) -> np.ndarray:
        if k == 0:
            return np.zeros(plant.m)
        return policy(k - 1, v)

    return rollout(plant, init, shifted, ext)


def zero_policy(plant: PlantModel) -> ControlPolicy:
    return lambda k, v: np.zeros(plant.m)


def full_policy(plant: PlantModel) -> ControlPolicy:
    return lambda k, v: np.full(plant.m, U_MAX)


def random_policy(plant: PlantModel, rng: np.random.Generator) -> ControlPolicy:
    """Controls drawn i.i.d. uniform on [0, U_MAX] at every instant."""
    return lambda k, v: rng.uniform(0.0, U_MAX, size=plant.m)


# ---------------------------------------------------------------------------
# Configuration


@dataclass(frozen=True)
class PlantConfig:
    """A plant together with its schedule and experiment fault."""

    model: PlantModel
    schedule: Schedule
    fault: FaultSpec


def ring_lattice(n: int) -> np.ndarray:
    """Row-stochastic ring: each bus coupled to its two neighbours at 0.5."""
    w = np.zeros((n, n))
    for i in range(n):
        w[i, (i - 1) % n] = 0.5
        w[i, (i + 1) % n] = 0.5
    return w


def default_config() -> PlantConfig:
    """Six-bus surrogate with three control channels on buses 0, 2, 4."""
    n, m = 6, 3
    gamma = np.zeros((n, m))
    for l, bus in enumerate((0, 2, 4)):
        gamma[bus, l] = 4.0
    model = PlantModel(
        n=n,
        m=m,
        a=np.full(n, 2.0),
        b=np.full(n, 5.0),
        c=1.0,
        w=ring_lattice(n),
        gamma=gamma,
        v_max=1.1,
        d=np.array([0.06, 0.08, 0.10, 0.10, 0.08, 0.06]),
        lam=1.0,
    )
    sched = Schedule(ts=0.75, tc=3.0, n_instants=5)
    fault = FaultSpec(affected=(1, 2, 3), depth=0.25)
    return PlantConfig(model=model, schedule=sched, fault=fault)


def mirror_config() -> PlantConfig:
    """Twelve-bus surrogate with five control channels, matching the
    monitored-region dimensions of the reference experiments."""
    n, m = 12, 5
    gamma = np.zeros((n, m))
    for l, bus in enumerate((0, 1, 3, 4, 11)):
        gamma[bus, l] = 4.0
    d = np.array([0.06, 0.07, 0.08, 0.09, 0.10, 0.11, 0.11, 0.10, 0.09, 0.08, 0.07, 0.06])
    model = PlantModel(
        n=n,
        m=m,
        a=np.full(n, 2.0),
        b=np.full(n, 5.0),
        c=1.0,
        w=ring_lattice(n),
        gamma=gamma,
        v_max=1.1,
        d=d,
        lam=1.0,
    )
    sched = Schedule(ts=0.75, tc=3.0, n_instants=5)
    fault = FaultSpec(affected=(9, 10, 11), depth=0.25)
    return PlantConfig(model=model, schedule=sched, fault=fault)


def config_to_dict(cfg: PlantConfig) -> dict:
    return {
        "n": cfg.model.n,
        "m": cfg.model.m,
        "a": cfg.model.a.tolist(),
        "b": cfg.model.b.tolist(),
        "c": cfg.model.c,
        "v_max": cfg.model.v_max,
        "W": cfg.model.w.tolist(),
        "gamma": cfg.model.gamma.tolist(),
        "d": cfg.model.d.tolist(),
        "lambda": cfg.model.lam,
        "schedule": {"Ts": cfg.schedule.ts, "Tc": cfg.schedule.tc, "n_instants": cfg.schedule.n_instants},
        "fault": {"affected": list(cfg.fault.affected), "depth": cfg.fault.depth},
    }


def config_from_dict(doc: dict) -> PlantConfig:
    try:
        model = PlantModel(
            n=int(doc["n"]),
            m=int(doc["m"]),
            a=doc["a"],
            b=doc["b"],
            c=float(doc["c"]),
            w=doc["W"],
            gamma=doc["gamma"],
            v_max=float(doc["v_max"]),
            d=doc["d"],
            lam=float(doc["lambda"]),
        )
        sched = Schedule(
            ts=float(doc["schedule"]["Ts"]),
            tc=float(doc["schedule"]["Tc"]),
            n_instants=int(doc["schedule"]["n_instants"]),
        )
        fault = FaultSpec(
            affected=tuple(doc["fault"]["affected"]),
            depth=float(doc["fault"]["depth"]),
        )
    except KeyError as exc:
        raise ValueError(f"plant config missing key {exc}") from exc
    return PlantConfig(model=model, schedule=sched, fault=fault)


def save_config(cfg: PlantConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(config_to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")


def load_config(path) -> PlantConfig:
    with open(path) as f:
        doc = json.load(f)
    return config_from_dict(doc)
