"""Training-data generation, windowing, normalization, splitting and storage.

A sample is the triple (voltage history before a control instant, control
applied at that instant, voltage history after it).  Histories are n x h
matrices of voltages sampled on the ``ts`` grid; the control is held for
one full control interval.

On disk a dataset is a ``dataset.json`` manifest plus a ``samples.csv``
table whose column order is normative: flattened pre-history row-major
(n*h values), control vector (m values), flattened post-history row-major
(n*h values).
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from koopmanmpc import plant as plant_mod
from koopmanmpc.plant import (
    FaultSpec,
    PlantModel,
    Schedule,
    Trajectory,
    U_MAX,
    full_policy,
    random_policy,
    run_episode,
    zero_policy,
)

LOAD_RANGE = (0.9, 1.1)

POLICIES = ("zero", "full", "random")


class DatasetFormatError(ValueError):
    """Malformed dataset files or manifest/data inconsistency."""


class ScalerError(ValueError):
    """Degenerate normalization range."""


def window_history(traj: Trajectory, k: int) -> np.ndarray:
    """The n x h voltage history between control instants k-1 and k.

    Column j is the sample (j+1) * ts after instant k-1; the last column
    is the sample at instant k itself.  Valid for 1 <= k <= n_intervals.
    """
    h = traj.schedule.h
    if not 1 <= k <= traj.n_intervals:
        raise IndexError(f"window index {k} outside 1..{traj.n_intervals}")
    block = traj.voltages[(k - 1) * h + 1 : k * h + 1]
    return block.T.copy()


@dataclass(frozen=True)
class Sample:
    """One training triple; histories are n x h, the control an m-vector."""

    v_k: np.ndarray
    u_k: np.ndarray
    v_next: np.ndarray

    def __post_init__(self):
        if self.v_k.shape != self.v_next.shape:
            raise ValueError("both histories must share n and h")
        if self.v_k.ndim != 2 or self.u_k.ndim != 1:
            raise ValueError("histories must be matrices and controls vectors")


@dataclass(frozen=True)
class Scaler:
    """Affine maps used for network inputs and outputs.

    Voltages: subtract ``v_ref``, then min-max map onto [0, 1] using the
    shifted-voltage range of the fitting data.  Controls: affine map of
    [u_lo, u_hi] onto [-1, 1].
    """

    v_ref: float
    v_lo: float
    v_hi: float
    u_lo: float = 0.0
    u_hi: float = U_MAX

    def __post_init__(self):
        if not self.v_hi > self.v_lo:
            raise ScalerError("voltage range is degenerate (v_hi <= v_lo)")
        if not self.u_hi > self.u_lo:
            raise ScalerError("control range is degenerate (u_hi <= u_lo)")

    def normalize_v(self, x):
        return ((np.asarray(x, dtype=float) - self.v_ref) - self.v_lo) / (self.v_hi - self.v_lo)

    def denormalize_v(self, x):
        return np.asarray(x, dtype=float) * (self.v_hi - self.v_lo) + self.v_lo + self.v_ref

    def normalize_u(self, u):
        return 2.0 * (np.asarray(u, dtype=float) - self.u_lo) / (self.u_hi - self.u_lo) - 1.0

    def denormalize_u(self, u):
        return (np.asarray(u, dtype=float) + 1.0) * 0.5 * (self.u_hi - self.u_lo) + self.u_lo

    def to_dict(self) -> dict:
        return {
            "v_ref": self.v_ref,
            "v_lo": self.v_lo,
            "v_hi": self.v_hi,
            "u_lo": self.u_lo,
            "u_hi": self.u_hi,
        }

    @staticmethod
    def from_dict(doc: dict) -> "Scaler":
        return Scaler(
            v_ref=float(doc["v_ref"]),
            v_lo=float(doc["v_lo"]),
            v_hi=float(doc["v_hi"]),
            u_lo=float(doc["u_lo"]),
            u_hi=float(doc["u_hi"]),
        )

    @staticmethod
    def identity() -> "Scaler":
        """No-op transform, handy for synthetic-system tests."""
        return Scaler(v_ref=0.0, v_lo=0.0, v_hi=1.0, u_lo=-1.0, u_hi=1.0)


@dataclass
class Dataset:
    samples: list[Sample]
    scaler: Scaler | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def dims(self) -> tuple[int, int, int]:
        """(n, h, m) of the samples; requires a nonempty dataset."""
        if not self.samples:
            raise ValueError("empty dataset has no dimensions")
        s = self.samples[0]
        n, h = s.v_k.shape
        return n, h, s.u_k.shape[0]

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Arrays (S, n, h), (S, m), (S, n, h) over all samples."""
        v_k = np.stack([s.v_k for s in self.samples])
        u_k = np.stack([s.u_k for s in self.samples])
        v_next = np.stack([s.v_next for s in self.samples])
        return v_k, u_k, v_next


# ---------------------------------------------------------------------------
# Deterministic per-rollout seeding


_MASK = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def rollout_seed(master_seed: int, load_index: int, policy_index: int) -> int:
    """64-bit mix of (master seed, load index, policy index).

    Chained splitmix64 rounds, so generation order never matters: each
    rollout owns an independent stream derived only from its indices.
    """
    s = _splitmix64(master_seed & _MASK)
    s = _splitmix64(s ^ (load_index & _MASK))
    s = _splitmix64(s ^ (policy_index & _MASK))
    return s


_LOAD_CHANNEL = 0xFF  # pseudo policy index reserved for the load-factor draw


def _case_load_factor(master_seed: int, load_index: int) -> float:
    rng = np.random.default_rng(rollout_seed(master_seed, load_index, _LOAD_CHANNEL))
    return float(rng.uniform(*LOAD_RANGE))


def plant_digest(cfg: plant_mod.PlantConfig) -> str:
    doc = json.dumps(plant_mod.config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()


def generate(
    plant: PlantModel,
    sched: Schedule,
    n_loads: int,
    seed: int,
    fault: FaultSpec | None = None,
    policies: tuple[str, ...] = POLICIES,
) -> Dataset:
    """Simulate ``n_loads`` random load cases under each control policy
    and window the episodes into training triples.

    Per case the load factor is drawn uniformly from [0.9, 1.1]; the
    fault defaults to sagging buses 1..3 by 0.25 p.u.  Each (case,
    policy) rollout is seeded independently via :func:`rollout_seed`, so
    rollouts could run concurrently and still merge deterministically in
    (load, policy) order.  Yields exactly ``n_loads * len(policies) *
    n_instants`` samples, plus a scaler fitted on the full set.
    """
    if n_loads < 1:
        raise ValueError("n_loads must be >= 1")
    unknown = set(policies) - set(POLICIES)
    if unknown:
        raise ValueError(f"unknown policies: {sorted(unknown)}")
    if fault is None:
        fault = FaultSpec(affected=(1, 2, 3), depth=0.25)

    samples: list[Sample] = []
    for load_idx in range(n_loads):
        lam = _case_load_factor(seed, load_idx)
        case_plant = plant.with_load(lam)
        for pol_idx, pol_name in enumerate(policies):
            if pol_name == "zero":
                policy = zero_policy(case_plant)
            elif pol_name == "full":
                policy = full_policy(case_plant)
            else:
                rng = np.random.default_rng(rollout_seed(seed, load_idx, pol_idx))
                policy = random_policy(case_plant, rng)
            traj = run_episode(case_plant, sched, fault, policy)
            for k in range(1, sched.n_instants + 1):
                samples.append(
                    Sample(
                        v_k=window_history(traj, k),
                        u_k=np.array(traj.controls[k]),
                        v_next=window_history(traj, k + 1),
                    )
                )

    ds = Dataset(
        samples=samples,
        meta={
            "master_seed": int(seed),
            "n_loads": int(n_loads),
            "policies": list(policies),
            "load_range": list(LOAD_RANGE),
            "fault": {"affected": list(fault.affected), "depth": fault.depth},
            "plant_digest": plant_digest(
                plant_mod.PlantConfig(model=plant, schedule=sched, fault=fault)
            ),
        },
    )
    ds.scaler = fit_scaler(ds)
    return ds


def fit_scaler(ds: Dataset, v_ref: float = 1.0) -> Scaler:
    """Min-max scaler over all shifted voltages in the dataset; control
    bounds are fixed at [0, U_MAX] rather than fitted."""
    if len(ds) == 0:
        raise ValueError("cannot fit a scaler on an empty dataset")
    v_k, _, v_next = ds.stacked()
    shifted = np.concatenate([v_k.ravel(), v_next.ravel()]) - v_ref
    lo, hi = float(shifted.min()), float(shifted.max())
    if hi <= lo:
        raise ScalerError("all voltages identical; normalization range degenerate")
    return Scaler(v_ref=v_ref, v_lo=lo, v_hi=hi)


def split(ds: Dataset, ratio: float, seed: int) -> tuple[Dataset, Dataset]:
    """Disjoint shuffled partition: first ``floor(ratio * N)`` samples into
    the training set.  Both halves keep the parent's scaler and meta."""
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < ratio < 1.0:
        raise ValueError("split ratio must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    n_train = int(len(ds) * ratio)
    pick = lambda idx: Dataset(
        samples=[ds.samples[i] for i in idx],
        scaler=ds.scaler,
        meta=dict(ds.meta),
    )
    return pick(perm[:n_train]), pick(perm[n_train:])


# ---------------------------------------------------------------------------
# Persistence

MANIFEST_NAME = "dataset.json"
SAMPLES_NAME = "samples.csv"


def _csv_header(n: int, h: int, m: int) -> list[str]:
    cols = [f"vk_{i}_{j}" for i in range(n) for j in range(h)]
    cols += [f"u_{l}" for l in range(m)]
    cols += [f"vnext_{i}_{j}" for i in range(n) for j in range(h)]
    return cols


def save(ds: Dataset, out_dir) -> None:
    """Write ``dataset.json`` + ``samples.csv`` under ``out_dir``.

    Floats are written with shortest round-trip repr, so regeneration
    with the same seed reproduces the files byte for byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if ds.samples:
        n, h, m = ds.dims
    else:
        n = h = m = 0
    manifest = {
        "n": n,
        "h": h,
        "m": m,
        "n_samples": len(ds),
        "scaler": ds.scaler.to_dict() if ds.scaler else None,
        "meta": ds.meta,
    }
    with open(out / MANIFEST_NAME, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out / SAMPLES_NAME, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_csv_header(n, h, m))
        for s in ds.samples:
            row = [repr(float(x)) for x in s.v_k.ravel()]
            row += [repr(float(x)) for x in s.u_k]
            row += [repr(float(x)) for x in s.v_next.ravel()]
            writer.writerow(row)


def load(in_dir) -> Dataset:
    """Inverse of :func:`save`; validates dimensions against the manifest."""
    src = Path(in_dir)
    try:
        with open(src / MANIFEST_NAME) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"cannot read manifest: {exc}") from exc
    try:
        n, h, m = int(manifest["n"]), int(manifest["h"]), int(manifest["m"])
        n_samples = int(manifest["n_samples"])
        scaler_doc = manifest["scaler"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(f"manifest missing or malformed field: {exc}") from exc

    width = 2 * n * h + m
    samples: list[Sample] = []
    with open(src / SAMPLES_NAME, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or (n_samples > 0 and len(header) != width):
            raise DatasetFormatError(
                f"samples.csv has {0 if header is None else len(header)} columns, "
                f"manifest implies {width}"
            )
        for row_idx, row in enumerate(reader):
            if len(row) != width:
                raise DatasetFormatError(f"row {row_idx} has {len(row)} columns, expected {width}")
            vals = np.array([float(x) for x in row])
            if not np.all(np.isfinite(vals)):
                raise DatasetFormatError(f"row {row_idx} contains non-finite values")
            samples.append(
                Sample(
                    v_k=vals[: n * h].reshape(n, h),
                    u_k=vals[n * h : n * h + m],
                    v_next=vals[n * h + m :].reshape(n, h),
                )
            )
    if len(samples) != n_samples:
        raise DatasetFormatError(f"manifest promises {n_samples} samples, file has {len(samples)}")
    scaler = Scaler.from_dict(scaler_doc) if scaler_doc else None
    return Dataset(samples=samples, scaler=scaler, meta=manifest.get("meta", {}))


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if len(a) != len(b) or (a.scaler is None) != (b.scaler is None):
        return False
    if a.scaler and a.scaler.to_dict() != b.scaler.to_dict():
        return False
    for sa, sb in zip(a.samples, b.samples):
        if not (
            np.array_equal(sa.v_k, sb.v_k)
            and np.array_equal(sa.u_k, sb.u_k)
            and np.array_equal(sa.v_next, sb.v_next)
        ):
            return False
    return a.meta == b.meta
