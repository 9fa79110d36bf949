"""Command-line pipeline driver.

Subcommands wire config files to the library stages and write fixed-name
artifacts under ``--out``:

    gen-data  --config RUN.json --out DIR [--seed N]   dataset.json, samples.csv
    train     --data DIR --config RUN.json --out DIR   checkpoint.json, lifted_model.json, training_history.csv
    fit-edmd  --data DIR --dict SPEC --ridge X --out DIR    lifted_model.json
    run-mpc   --model FILE --config RUN.json --out DIR      closed_loop.csv, qp_diagnostics.json
    compare   --model FILE --config RUN.json --cases N --seed N --out DIR  comparison.csv, summary.json

Every run is deterministic given its config and flags; all randomness
flows from explicit seeds.  Failures print one machine-readable JSON line
to stderr and exit nonzero (2 for config validation, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from koopmanmpc import dataset as dataset_mod
from koopmanmpc import deep_koopman, edmd, evaluation
from koopmanmpc import mpc as mpc_mod
from koopmanmpc import plant as plant_mod


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass
class RunConfig:
    plant: plant_mod.PlantConfig
    seed: int
    n_loads: int
    policies: tuple[str, ...]
    train_ratio: float
    net: dict
    edmd: dict
    mpc: dict
    eval: dict


_NET_DEFAULTS = {
    "lifted_dim": 64,
    "lstm_hidden": 32,
    "batch_size": 32,
    "learning_rate": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "max_epochs": 500,
    "patience": 20,
}
_EDMD_DEFAULTS = {"dictionary": "poly:2", "ridge": 1e-8}
_MPC_DEFAULTS = {"r_weight": 0.0, "tol": mpc_mod.DEFAULT_TOL, "max_iter": mpc_mod.DEFAULT_MAX_ITER}
_EVAL_DEFAULTS = {"vvc_deadband": 0.95, "vvc_gain": 2.5, "n_cases": 100, "monitored": None}


def load_run_config(path) -> RunConfig:
    """Parse and validate a run config, collecting every violation."""
    path = Path(path)
    violations: list[str] = []
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError([f"config unreadable: {exc}"]) from exc

    plant_cfg = None
    plant_path = doc.get("plant")
    if not isinstance(plant_path, str):
        violations.append("plant: must be a path string")
    else:
        resolved = (path.parent / plant_path).resolve()
        if not resolved.exists():
            violations.append(f"plant: file {resolved} does not exist")
        else:
            try:
                plant_cfg = plant_mod.load_config(resolved)
            except (ValueError, json.JSONDecodeError) as exc:
                violations.append(f"plant: invalid plant config ({exc})")

    seed = doc.get("seed")
    if not isinstance(seed, int):
        violations.append("seed: required integer (no implicit entropy)")

    ds_doc = doc.get("dataset", {})
    n_loads = ds_doc.get("n_loads", 2500)
    if not (isinstance(n_loads, int) and n_loads >= 1):
        violations.append("dataset.n_loads: must be an integer >= 1")
    policies = tuple(ds_doc.get("policies", list(dataset_mod.POLICIES)))
    bad = set(policies) - set(dataset_mod.POLICIES)
    if bad or not policies:
        violations.append(f"dataset.policies: must be a nonempty subset of {list(dataset_mod.POLICIES)}")
    train_ratio = ds_doc.get("train_ratio", 0.7)
    if not (isinstance(train_ratio, (int, float)) and 0.0 < train_ratio < 1.0):
        violations.append("dataset.train_ratio: must lie in (0, 1)")

    net = {**_NET_DEFAULTS, **doc.get("koopman_net", {})}
    if net["batch_size"] < 1:
        violations.append("koopman_net.batch_size: must be >= 1")
    if net["max_epochs"] < 1:
        violations.append("koopman_net.max_epochs: must be >= 1")
    if plant_cfg is not None and net["lifted_dim"] <= plant_cfg.model.n:
        violations.append("koopman_net.lifted_dim: must exceed the bus count")

    edmd_doc = {**_EDMD_DEFAULTS, **doc.get("edmd", {})}
    mpc_doc = {**_MPC_DEFAULTS, **doc.get("mpc", {})}
    if mpc_doc["tol"] <= 0 or mpc_doc["max_iter"] < 1:
        violations.append("mpc: tol must be positive and max_iter >= 1")
    if mpc_doc["r_weight"] < 0:
        violations.append("mpc.r_weight: must be nonnegative")
    eval_doc = {**_EVAL_DEFAULTS, **doc.get("eval", {})}
    if eval_doc["n_cases"] < 1:
        violations.append("eval.n_cases: must be >= 1")

    if violations:
        raise ConfigError(violations)
    return RunConfig(
        plant=plant_cfg,
        seed=seed,
        n_loads=n_loads,
        policies=policies,
        train_ratio=float(train_ratio),
        net=net,
        edmd=edmd_doc,
        mpc=mpc_doc,
        eval=eval_doc,
    )


def parse_dictionary_spec(spec: str, input_dim: int, data: np.ndarray | None, seed: int):
    """'identity' | 'poly:DEGREE' | 'rbf:K:WIDTH' -> Dictionary."""
    parts = spec.split(":")
    if parts[0] == "identity" and len(parts) == 1:
        return edmd.identity_dictionary(input_dim)
    if parts[0] == "poly" and len(parts) == 2:
        return edmd.polynomial_dictionary(input_dim, int(parts[1]))
    if parts[0] == "rbf" and len(parts) == 3:
        if data is None:
            raise ConfigError(["dict: rbf centers require sample data"])
        centers = edmd.rbf_centers_from_data(data, int(parts[1]), seed)
        return edmd.rbf_dictionary(input_dim, centers, float(parts[2]))
    raise ConfigError([f"dict: cannot parse dictionary spec {spec!r}"])


def _out_dir(arg) -> Path:
    out = Path(arg)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    ds = dataset_mod.generate(
        cfg.plant.model,
        cfg.plant.schedule,
        n_loads=cfg.n_loads,
        seed=seed,
        fault=cfg.plant.fault,
        policies=cfg.policies,
    )
    out = _out_dir(args.out)
    dataset_mod.save(ds, out)
    print(f"wrote {len(ds)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    ds = dataset_mod.load(args.data)
    n, h, m = ds.dims
    train_ds, val_ds = dataset_mod.split(ds, cfg.train_ratio, seed=cfg.seed)
    net_cfg = deep_koopman.KoopmanNetConfig(
        n=n,
        h=h,
        m=m,
        lifted_dim=int(cfg.net["lifted_dim"]),
        lstm_hidden=int(cfg.net["lstm_hidden"]),
        seed=cfg.seed,
    )
    hyper = deep_koopman.TrainHyper(
        batch_size=int(cfg.net["batch_size"]),
        learning_rate=float(cfg.net["learning_rate"]),
        beta1=float(cfg.net["beta1"]),
        beta2=float(cfg.net["beta2"]),
        max_epochs=int(cfg.net["max_epochs"]),
        patience=int(cfg.net["patience"]),
    )
    net, history = deep_koopman.train(net_cfg, train_ds, val_ds, hyper)
    out = _out_dir(args.out)
    deep_koopman.save_net(net, out / "checkpoint.json", scaler=ds.scaler)
    model = deep_koopman.extract(net, ds.scaler)
    deep_koopman.save_lifted_model(model, out / "lifted_model.json")
    deep_koopman.history_to_csv(history, out / "training_history.csv")
    last = history[-1]
    print(
        f"trained {len(history)} epochs; "
        f"val MAE next={last.val_mae_next:.5f} recon={last.val_mae_recon:.5f}"
    )
    return 0


def cmd_fit_edmd(args) -> int:
    ds = dataset_mod.load(args.data)
    n, h, m = ds.dims
    seed = int(ds.meta.get("master_seed", 0))
    flat = None
    if args.dict.startswith("rbf"):
        v_k, _, _ = ds.stacked()
        flat = ds.scaler.normalize_v(v_k).reshape(len(ds), -1)
    dictionary = parse_dictionary_spec(args.dict, n * h, flat, seed)
    model = edmd.fit(ds, dictionary, ridge=args.ridge)
    out = _out_dir(args.out)
    deep_koopman.save_lifted_model(model, out / "lifted_model.json")
    print(
        f"fit {dictionary.kind} dictionary ({model.lifted_dim} features); "
        f"dynamics rms {model.residuals['dynamics_rms']:.3e}"
    )
    return 0


def cmd_run_mpc(args) -> int:
    cfg = load_run_config(args.config)
    model = deep_koopman.load_lifted_model(args.model)
    m = cfg.plant.model.m
    loop = mpc_mod.receding_horizon(
        model,
        cfg.plant.model,
        cfg.plant.schedule,
        v_ref=1.0,
        fault=cfg.plant.fault,
        R=cfg.mpc["r_weight"] * np.eye(m),
        tol=cfg.mpc["tol"],
        max_iter=int(cfg.mpc["max_iter"]),
    )
    out = _out_dir(args.out)
    loop.to_csv(out / "closed_loop.csv")
    loop.diagnostics_to_json(out / "qp_diagnostics.json")
    if loop.aborted:
        print("closed loop aborted on solver non-convergence", file=sys.stderr)
        return 1
    term = loop.trajectory.voltages[-1].mean()
    print(f"closed loop done; terminal mean voltage {term:.4f} p.u.")
    return 0


def cmd_compare(args) -> int:
    cfg = load_run_config(args.config)
    model = deep_koopman.load_lifted_model(args.model)
    seed = cfg.seed if args.seed is None else args.seed
    n_cases = cfg.eval["n_cases"] if args.cases is None else args.cases
    report = evaluation.compare(
        model,
        cfg.plant,
        n_cases=n_cases,
        seed=seed,
        monitored=cfg.eval["monitored"],
        vvc_params=evaluation.VvcParams(
            deadband=cfg.eval["vvc_deadband"], gain=cfg.eval["vvc_gain"]
        ),
        mpc_kwargs={
            "R": cfg.mpc["r_weight"] * np.eye(cfg.plant.model.m),
            "tol": cfg.mpc["tol"],
            "max_iter": int(cfg.mpc["max_iter"]),
        },
    )
    out = _out_dir(args.out)
    report.to_csv(out / "comparison.csv")
    report.to_json(out / "summary.json")
    print(f"win fraction (mpc beats vvc): {report.win_fraction:.3f} over {n_cases} cases")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="koopmanmpc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="simulate load cases and write the dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the deep lifting network")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit-edmd", help="fit the dictionary baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--dict", default="poly:2")
    p.add_argument("--ridge", type=float, default=1e-8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_edmd)

    p = sub.add_parser("run-mpc", help="run the receding-horizon closed loop")
    p.add_argument("--model", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run_mpc)

    p = sub.add_parser("compare", help="closed-loop comparison against baselines")
    p.add_argument("--model", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--cases", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(json.dumps({"error": "config validation failed", "fields": exc.violations}),
              file=sys.stderr)
        return 2
    except Exception as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
