"""Dictionary-based lifting with least-squares system identification.

The classical baseline for the learned encoder: histories are flattened,
pushed through a fixed feature dictionary, and the lifted one-interval
dynamics ``z+ = A z + B u`` plus a linear projection ``C`` back to the
flattened history are fit by (optionally ridge-regularized) least squares
on the same normalized samples the network trains on.

Every dictionary starts with the constant feature and the raw
coordinates, so any linear (or affine, via the constant) system is inside
the span and is recovered exactly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from koopmanmpc.dataset import Dataset, Scaler


class SingularityError(np.linalg.LinAlgError):
    """Normal equations are rank deficient; a positive ridge is needed."""


@dataclass(frozen=True)
class Dictionary:
    """Feature map on flattened histories of dimension ``input_dim``.

    kinds: 'identity' (constant + coordinates), 'polynomial' (adds all
    monomials of total degree 2..degree), 'rbf' (adds Gaussian bumps
    exp(-|x - c|^2 / width^2) around the given centers).
    """

    kind: str
    input_dim: int
    degree: int = 1
    centers: np.ndarray | None = None
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "polynomial", "rbf"):
            raise ValueError(f"unknown dictionary kind {self.kind!r}")
        if self.kind == "polynomial" and self.degree < 1:
            raise ValueError("polynomial degree must be >= 1")
        if self.kind == "rbf":
            if self.centers is None or self.width <= 0:
                raise ValueError("rbf dictionary needs centers and a positive width")
            centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
            if centers.shape[1] != self.input_dim:
                raise ValueError("rbf centers must match the input dimension")
            object.__setattr__(self, "centers", centers)

    def _monomials(self):
        for deg in range(2, self.degree + 1):
            yield from itertools.combinations_with_replacement(range(self.input_dim), deg)

    @property
    def n_features(self) -> int:
        base = 1 + self.input_dim
        if self.kind == "polynomial":
            return base + sum(1 for _ in self._monomials())
        if self.kind == "rbf":
            return base + self.centers.shape[0]
        return base

    def lift(self, x: np.ndarray) -> np.ndarray:
        """(d,) -> (n_features,) or batched (S, d) -> (S, n_features).
        Features start with 1 followed by the raw coordinates."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x2 = x[None] if single else x
        if x2.shape[1] != self.input_dim:
            raise ValueError(f"expected inputs of dimension {self.input_dim}, got {x2.shape[1]}")
        cols = [np.ones((x2.shape[0], 1)), x2]
        if self.kind == "polynomial":
            for combo in self._monomials():
                feat = np.prod(x2[:, combo], axis=1, keepdims=True)
                cols.append(feat)
        elif self.kind == "rbf":
            d2 = ((x2[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
            cols.append(np.exp(-d2 / self.width**2))
        out = np.hstack(cols)
        return out[0] if single else out

    def to_dict(self) -> dict:
        doc = {"kind": self.kind, "input_dim": self.input_dim}
        if self.kind == "polynomial":
            doc["degree"] = self.degree
        if self.kind == "rbf":
            doc["width"] = self.width
            doc["centers"] = self.centers.tolist()
        return doc

    @staticmethod
    def from_dict(doc: dict) -> "Dictionary":
        return Dictionary(
            kind=doc["kind"],
            input_dim=int(doc["input_dim"]),
            degree=int(doc.get("degree", 1)),
            centers=np.array(doc["centers"], dtype=float) if "centers" in doc else None,
            width=float(doc.get("width", 1.0)),
        )


def identity_dictionary(input_dim: int) -> Dictionary:
    return Dictionary(kind="identity", input_dim=input_dim)


def polynomial_dictionary(input_dim: int, degree: int) -> Dictionary:
    return Dictionary(kind="polynomial", input_dim=input_dim, degree=degree)


def rbf_dictionary(input_dim: int, centers: np.ndarray, width: float) -> Dictionary:
    return Dictionary(kind="rbf", input_dim=input_dim, centers=centers, width=width)


def rbf_centers_from_data(x: np.ndarray, k: int, seed: int) -> np.ndarray:
    """A seeded random subset of the rows of x, for use as rbf centers."""
    rng = np.random.default_rng(seed)
    idx = rng.choice(x.shape[0], size=min(k, x.shape[0]), replace=False)
    return np.array(x[np.sort(idx)])


def _solve_normal(gram: np.ndarray, rhs: np.ndarray, context: str) -> np.ndarray:
    """Solve gram @ theta = rhs for an SPD-up-to-rounding gram matrix.

    Cholesky is the positive-definiteness gate; if it fails, fall back to
    pivoted elimination unless the system is genuinely (numerically)
    singular, in which case raise with a hint to add ridge.
    """
    try:
        np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        if not np.all(np.isfinite(gram)) or np.linalg.cond(gram) > 1e12:
            raise SingularityError(
                f"{context}: normal equations are rank deficient; "
                "use a positive ridge parameter"
            ) from None
    return np.linalg.solve(gram, rhs)


class EdmdModel:
    """Fitted lifted-linear model: dictionary, matrices A, B, projection C
    and the scaler defining the normalized units.  Immutable after fit."""

    kind = "edmd"

    def __init__(self, dictionary: Dictionary, A, B, C, scaler: Scaler, n: int, h: int,
                 residuals: dict | None = None):
        self.dictionary = dictionary
        self.A = np.array(A, dtype=float)
        self.B = np.array(B, dtype=float)
        self.C = np.array(C, dtype=float)
        self.scaler = scaler
        self.n, self.h = n, h
        self.residuals = dict(residuals or {})

    @property
    def lifted_dim(self) -> int:
        return self.dictionary.n_features

    def lift(self, v_hist: np.ndarray) -> np.ndarray:
        """Normalize, flatten row-major and apply the dictionary."""
        v_hist = np.asarray(v_hist, dtype=float)
        single = v_hist.ndim == 2
        flat = self.scaler.normalize_v(v_hist).reshape(-1 if single else (v_hist.shape[0], -1))
        return self.dictionary.lift(flat)

    def lift_reference(self, v_ref: float = 1.0) -> np.ndarray:
        return self.lift(np.full((self.n, self.h), v_ref))

    def project(self, z: np.ndarray) -> np.ndarray:
        """Lifted vector back to a raw-p.u. history matrix."""
        flat = self.C @ z
        return self.scaler.denormalize_v(flat.reshape(self.n, self.h))

    def predict(self, v_hist: np.ndarray, u_sequence: np.ndarray) -> np.ndarray:
        """Open-loop rollout in the lifted space.

        Returns (len(u_sequence) + 1, n, h) raw-p.u. histories; index 0 is
        the instantaneous reconstruction of ``v_hist`` and index i the
        prediction i control intervals later.
        """
        u_sequence = np.asarray(u_sequence, dtype=float).reshape(-1, self.B.shape[1])
        z = self.lift(v_hist)
        out = [self.project(z)]
        for u in u_sequence:
            z = self.A @ z + self.B @ self.scaler.normalize_u(u)
            out.append(self.project(z))
        return np.stack(out)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "dictionary": self.dictionary.to_dict(),
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "C": self.C.tolist(),
            "scaler": self.scaler.to_dict(),
            "n": self.n,
            "h": self.h,
            "residuals": self.residuals,
        }

    @staticmethod
    def from_dict(doc: dict) -> "EdmdModel":
        return EdmdModel(
            dictionary=Dictionary.from_dict(doc["dictionary"]),
            A=np.array(doc["A"], dtype=float),
            B=np.array(doc["B"], dtype=float),
            C=np.array(doc["C"], dtype=float),
            scaler=Scaler.from_dict(doc["scaler"]),
            n=int(doc["n"]),
            h=int(doc["h"]),
            residuals=doc.get("residuals", {}),
        )


def fit(ds: Dataset, dictionary: Dictionary, ridge: float = 0.0) -> EdmdModel:
    """Least-squares fit of [A B] and of the projection C.

    Stacks lifted predecessors against lifted successors and solves the
    ridge-regularized normal equations; a second least squares fits C so
    that C @ lift(x) reproduces the flattened history.  The constant and
    coordinate features make exact recovery possible whenever the true
    dynamics are linear in the dictionary span.  With m = 0 the control
    block is empty and only A (and C) are fit.
    """
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    if len(ds) == 0:
        raise ValueError("cannot fit on an empty dataset")
    scaler = ds.scaler
    if scaler is None:
        raise ValueError("fitting requires a dataset with a fitted scaler")
    v_k, u_k, v_next = ds.stacked()
    n, h, m = ds.dims
    if dictionary.input_dim != n * h:
        raise ValueError(
            f"dictionary input dimension {dictionary.input_dim} != flattened history {n * h}"
        )

    x_flat = scaler.normalize_v(v_k).reshape(len(ds), -1)
    y_flat = scaler.normalize_v(v_next).reshape(len(ds), -1)
    u_norm = scaler.normalize_u(u_k) if m > 0 else np.zeros((len(ds), 0))

    zx = dictionary.lift(x_flat)
    zy = dictionary.lift(y_flat)
    nd = dictionary.n_features

    g = np.hstack([zx, u_norm])
    gram = g.T @ g + ridge * np.eye(nd + m)
    theta = _solve_normal(gram, g.T @ zy, "dynamics fit")
    A = theta[:nd].T
    B = theta[nd:].T if m > 0 else np.zeros((nd, 0))

    gram_c = zx.T @ zx + ridge * np.eye(nd)
    c_t = _solve_normal(gram_c, zx.T @ x_flat, "projection fit")
    C = c_t.T

    dyn_res = float(np.sqrt(np.mean((g @ theta - zy) ** 2)))
    proj_res = float(np.sqrt(np.mean((zx @ c_t - x_flat) ** 2)))
    return EdmdModel(
        dictionary=dictionary,
        A=A,
        B=B,
        C=C,
        scaler=scaler,
        n=n,
        h=h,
        residuals={"dynamics_rms": dyn_res, "projection_rms": proj_res, "ridge": ridge},
    )
