"""Command line entry point: ``wfkoopman <subcommand> ...``.

Exit codes: 0 success, 1 usage error (bad arguments, missing files),
2 numerical failure (divergence, singular systems, non-finite values).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .autoencoder.training import (TrainingDiverged, ae1_config, ae2_config, train_bilevel,
                                   train_single_level)
from .dataset import Dataset
from .koopman import Lifting, Normalizer, build_snapshot_matrices, edmd_fit, load_model, prediction_vaf, save_model
from .plant import generate_excitation, simulate_openloop

log = logging.getLogger("wfkoopman")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_config(p):
    p.add_argument("--config", help="INI file with [plant] [training] [mpc] [reference] [scenario]")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="wfkoopman", description="Koopman models and MPC for a two-turbine farm")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", parser_class=_Parser)

    p = sub.add_parser("simulate", help="open-loop excitation dataset")
    _add_config(p)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int, help="excitation seed")
    p.add_argument("--cutoff", type=float)
    p.add_argument("--epsilon", type=float, help="plant power-coefficient offset")
    p.add_argument("--out", required=True)

    p = sub.add_parser("identify", help="fit and save a model")
    _add_config(p)
    p.add_argument("kind", choices=("edmd", "ae1", "ae2", "k24"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lifted", type=int, help="N_g")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--split", type=float)
    p.add_argument("--horizon", type=int, help="prediction steps for the VAF table (0 = free run)")
    p.add_argument("--history", help="loss curve CSV (autoencoders)")

    p = sub.add_parser("evaluate", help="VAF of a saved model on a dataset")
    _add_config(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", type=float, help="evaluate on the part after this fraction")
    p.add_argument("--horizon", type=int)

    p = sub.add_parser("control", help="closed-loop scenario run")
    _add_config(p)
    p.add_argument("--scenario", type=int, choices=(1, 2))
    p.add_argument("--controller", choices=("qlmpc_ae1", "kmpc_ae2", "qlmpc_k24_baseline"))
    p.add_argument("--model")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--T", type=int)
    p.add_argument("--seed", type=int, help="reference (deltaP) seed")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("report", help="aggregate metrics JSON files")
    p.add_argument("inputs", nargs="+", help="metrics JSON files or directories holding them")
    p.add_argument("--out", help="write the table here (a .csv and .png are written alongside)")
    p.add_argument("--no-figures", action="store_true")
    return ap


def _vaf_table(vafs: dict, title: str) -> str:
    w = max(len(k) for k in vafs)
    lines = [title, f"{'channel':<{w}}  VAF [%]"]
    lines += [f"{k:<{w}}  {v:6.2f}" for k, v in vafs.items()]
    return "\n".join(lines)


def _load_dataset(path) -> Dataset:
    if not Path(path).is_file():
        raise FileNotFoundError(f"dataset not found: {path}")
    return Dataset.from_csv(path)


def cmd_simulate(a, rc) -> int:
    from .experiments.config import with_overrides

    dc = with_overrides(rc.data, n=a.n, data_seed=a.seed, cutoff_hz=a.cutoff)
    pcfg = rc.plant if a.epsilon is None else rc.plant.with_(cp_offset=a.epsilon)
    u = generate_excitation(dc.n, dc.lo, dc.hi, dc.cutoff_hz, dc.data_seed, dt=pcfg.dt)
    d = simulate_openloop(pcfg, u)
    d.to_csv(a.out)
    print(f"wrote {d.n_o} samples to {a.out}")
    return EXIT_OK


def identify(kind: str, train: Dataset, rc, lifted: Optional[int] = None, epochs: Optional[int] = None,
             seed: Optional[int] = None):
    """Fit one model kind; returns (model, training history or None)."""
    opts = rc.training.overrides()
    if epochs is not None:
        opts["N_E"] = epochs
    if seed is not None:
        opts["seed"] = seed
    if kind == "ae1":
        cfg = ae1_config(lifted or rc.training.lifted or 24, **opts)
        return train_single_level(train, ("Ur1", "Ur2"), cfg)
    if kind == "ae2":
        cfg = ae2_config(lifted or rc.training.lifted or 2, **opts)
        return train_bilevel(train, ("P1", "P2"), cfg)
    if kind not in ("edmd", "k24"):
        raise UsageError(f"unknown model kind {kind!r}")
    # hand-crafted dictionaries on normalized winds
    x_norm = Normalizer.fit(train.states(("Ur1", "Ur2")))
    lift = Lifting("cubic" if kind == "k24" else "affine", 2, x_norm=x_norm)
    m = build_snapshot_matrices(train, lift, states=("Ur1", "Ur2"))
    return edmd_fit(m, lift, state_names=("Ur1", "Ur2"), output_names=("Ur1", "Ur2"),
                    input_names=train.input_names), None


def cmd_identify(a, rc) -> int:
    d = _load_dataset(a.data)
    split = a.split if a.split is not None else rc.data.split
    train, valid = d.split(split)
    model, hist = identify(a.kind, train, rc, a.lifted, a.epochs, a.seed)
    save_model(model, a.out)
    if hist is not None and a.history:
        hist.to_csv(a.history)
    horizon = a.horizon if a.horizon is not None else rc.training.horizon
    vafs = prediction_vaf(model, valid, horizon)
    print(_vaf_table(vafs, f"{a.kind} (N_g={model.n_g}) validation VAF, {horizon}-step prediction"))
    return EXIT_OK


def cmd_evaluate(a, rc) -> int:
    if not Path(a.model).is_file():
        raise FileNotFoundError(f"model not found: {a.model}")
    model = load_model(a.model)
    d = _load_dataset(a.data)
    if a.split is not None:
        d = d.split(a.split)[1]
    horizon = a.horizon if a.horizon is not None else rc.training.horizon
    vafs = prediction_vaf(model, d, horizon)
    print(_vaf_table(vafs, f"VAF, {horizon}-step prediction"))
    return EXIT_OK


def cmd_control(a, rc) -> int:
    from dataclasses import replace

    from .experiments.config import with_overrides
    from .experiments.scenarios import format_table, run_scenario, write_outputs

    rc = replace(rc, reference=with_overrides(rc.reference, T=a.T, deltaP_seed=a.seed))
    sc = rc.scenario_config(scenario=a.scenario, controller=a.controller, model=a.model,
                            epsilon=a.epsilon, seed=a.seed)
    res = run_scenario(sc)
    paths = write_outputs(res, a.out_dir, figures=not a.no_figures)
    print(format_table([res.metrics_dict()]), end="")
    print(f"outputs in {a.out_dir}: " + ", ".join(sorted(p.name for p in paths.values())))
    return EXIT_OK


def cmd_report(a, rc) -> int:
    from .experiments.scenarios import format_table

    files: List[Path] = []
    for item in a.inputs:
        p = Path(item)
        if p.is_dir():
            files += sorted(p.glob("*_metrics.json"))
        elif p.is_file():
            files.append(p)
        else:
            raise FileNotFoundError(f"no such metrics file or directory: {item}")
    if not files:
        raise FileNotFoundError("no metrics files found")
    rows = [json.loads(f.read_text()) for f in files]
    rows.sort(key=lambda r: (r["scenario"], r["controller"], r.get("seed", 0)))
    table = format_table(rows)
    print(table, end="")
    if a.out:
        out = Path(a.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(table)
        lines = ["scenario,controller,epsilon,seed,te_watts,aa,vaf_Ur1,vaf_Ur2,vaf_PWF"]
        for r in rows:
            v = r.get("vaf", {})
            lines.append(",".join([str(r["scenario"]), r["controller"], f"{r.get('epsilon', 0.0):.12g}",
                                   str(r.get("seed", 0)), f"{r['te_watts']:.12g}", f"{r['aa']:.12g}"]
                                  + [f"{v[c]:.12g}" if c in v else "" for c in ("Ur1", "Ur2", "PWF")]))
        out.with_suffix(".csv").write_text("\n".join(lines) + "\n")
        if not a.no_figures:
            from .experiments.figures import plot_te_bars

            plot_te_bars(rows, out.with_suffix(".png"))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "identify": cmd_identify, "evaluate": cmd_evaluate,
            "control": cmd_control, "report": cmd_report}


def main(argv: Optional[List[str]] = None) -> int:
    from .experiments.config import load_config

    ap = build_parser()
    try:
        a = ap.parse_args(argv)
        if a.cmd is None:
            ap.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        rc = load_config(getattr(a, "config", None))
        return COMMANDS[a.cmd](a, rc)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC if "diverged" in str(exc) or "non-finite" in str(exc) else EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
