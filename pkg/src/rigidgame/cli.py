"""Command-line entry point: ``rigidgame <command> --config run.yaml``.

Exit codes: 0 success, 2 config/validation/input error, 3 numerical failure,
4 partial batch failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import game, igso3, plotting, potential, sampler, structio
from .config import ConfigError, load_config, require_file, resolve
from .geom import complex_rmsd, tm_score
from .schedule import NoiseSchedule

log = logging.getLogger("rigidgame")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4


class NumericalFailure(RuntimeError):
    pass


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write(path, text):
    structio.atomic_write_text(path, text)
    log.info("wrote %s", path)


def _out(cfg) -> Path:
    return resolve(cfg, cfg["output"])


def build_potential(cfg):
    pot = cfg["potential"]
    if pot["kind"] == "surrogate":
        return potential.SurrogatePotential.load(require_file(cfg, "potential.path"))
    return potential.ContactPotential(
        pot["well_depth"], pot["contact_radius"], pot["repulsion_radius"], pot["repulsion_strength"]
    )


def build_game_config(cfg) -> game.GameConfig:
    g = cfg["game"]
    return game.GameConfig(
        steps=g["steps"],
        eta0=g["eta0"],
        eta_exponent=g["eta_exponent"],
        penalty=potential.GamePenaltyParams(g["lambda"], g["d_ths"]),
        update_mode=g["update_mode"],
        grad_backend=g["grad_backend"],
        convergence_tol=g["convergence_tol"],
        backtracking=g["backtracking"],
        seed=cfg["seed"],
    )


def _jobs(cfg):
    return cfg["jobs"] or os.cpu_count() or 1


# -- commands ------------------------------------------------------------------


def cmd_decoys(cfg):
    base_path = require_file(cfg, "input")
    f = build_potential(cfg)
    base = structio.load_assembly(base_path)
    d = cfg["decoys"]
    ds = structio.generate_decoys(base, d["count"], d["tr_scale"], d["rot_mode"], d["sigma"], seed=cfg["seed"])
    ds = structio.score_decoys(ds, f)
    out = _out(cfg)
    structio.save_assembly_json(base, out / "base.json")
    structio.save_decoys(ds, out / "decoys.jsonl")
    e0 = f.evaluate(base)
    rows = [["base", e0]] + [[j, e] for j, e in enumerate(ds.energies)]
    _write(out / "decoy_energies.csv", csv_text(["decoy", "energy"], rows))
    if cfg["figures"]:
        plotting.decoy_energies(e0, ds.energies, out / "decoy_energies.png")
    return EXIT_OK


def _load_dataset(cfg, entry):
    d = resolve(cfg, entry)
    if d.is_dir():
        base_p, dec_p = d / "base.json", d / "decoys.jsonl"
    else:
        base_p, dec_p = d.parent / "base.json", d
    for p in (base_p, dec_p):
        if not p.exists():
            raise ConfigError(f"training dataset file not found: {p}")
    return structio.load_decoys(dec_p, structio.load_assembly_json(base_p, normalize=False))


def cmd_train_potential(cfg):
    t = cfg["training"]
    if not t["datasets"]:
        raise ConfigError("training.datasets must list at least one decoy directory")
    datasets = [_load_dataset(cfg, e) for e in t["datasets"]]
    if sum(len(ds) for ds in datasets) < 2:
        raise ConfigError("need at least two scored decoys")
    init = potential.SurrogatePotential.zeros(t["n_bins"], t["cutoff"], t["restype_channels"])
    params = potential.TrainParams(
        steps=t["steps"], lr=t["lr"], l2=t["l2"], holdout_fraction=t["holdout_fraction"],
        batch_size=t["batch_size"], seed=cfg["seed"],
    )  # fmt: skip
    model, report = potential.train_surrogate(datasets, init, params)
    out = _out(cfg)
    model.save(out / "surrogate.json")
    _write(out / "loss_curve.csv", csv_text(["step", "loss"], list(enumerate(report.loss_curve))))
    d_learned, d_true = [], []
    for k, h, l in report.heldout_pairs:
        ds = datasets[k]
        d_learned.append(model.evaluate(ds.base.apply(ds.decoys[h])) - model.evaluate(ds.base.apply(ds.decoys[l])))
        d_true.append(ds.energies[h] - ds.energies[l])
    if len(d_true) >= 2:
        pearson = float(np.corrcoef(d_learned, d_true)[0, 1])
        agree = float(np.mean(np.sign(d_learned) == np.sign(d_true)))
    else:
        pearson = agree = float("nan")
    summary = {
        "train_accuracy": report.train_accuracy,
        "heldout_accuracy": report.heldout_accuracy,
        "heldout_pearson_r": pearson,
        "heldout_sign_agreement": agree,
        "n_train_pairs": report.n_train_pairs,
        "n_heldout_pairs": report.n_heldout_pairs,
        "final_loss": report.loss_curve[-1],
    }
    _write(out / "train_report.json", json.dumps(summary, indent=2) + "\n")
    print(f"held-out accuracy: {report.heldout_accuracy:.4f}")
    if cfg["figures"]:
        plotting.loss_curve(report.loss_curve, out / "loss_curve.png")
        if d_true:
            plotting.learned_vs_true(d_learned, d_true, out / "learned_vs_true.png")
    return EXIT_OK


def _cluster_doc(clusters, names=None):
    return [
        {
            "cluster": c_i,
            "count": c.count,
            "members": [names[m] if names else m for m in c.members],
            "energy": c.energy,
            "representative": structio.assembly_to_dict(c.representative),
        }
        for c_i, c in enumerate(clusters)
    ]


def cmd_equilibrate(cfg):
    base = structio.load_assembly(require_file(cfg, "input"))
    f = build_potential(cfg)
    gcfg = build_game_config(cfg)
    g = cfg["game"]
    trajs = game.enumerate_equilibria(
        base, f, gcfg, g["n_games"], (g["init_tr_scale"], g["init_rot_mode"]), jobs=_jobs(cfg)
    )
    ok = [tr for tr in trajs if not tr.failed]
    if not ok:
        raise NumericalFailure("all games failed")
    out = _out(cfg)
    rows = []
    for k, tr in enumerate(trajs):
        if tr.failed:
            _write(out / "games" / f"game_{k:03d}.error", tr.error + "\n")
            continue
        _write(out / "games" / f"game_{k:03d}.jsonl", tr.to_jsonl())
        for r, (p, q) in enumerate(tr.energies):
            rows.append([k, r, p, q, p + gcfg.penalty.lam * q])
    _write(out / "energy_rounds.csv", csv_text(["game", "round", "potential", "penalty", "objective"], rows))
    clusters = game.cluster_equilibria(trajs, g["cluster_radius"])
    _write(out / "clusters.json", json.dumps(_cluster_doc(clusters), indent=1) + "\n")
    if cfg["figures"]:
        plotting.energy_rounds(trajs, gcfg.penalty.lam, out / "energy_rounds.png")
    print(f"{len(ok)}/{len(trajs)} games succeeded, {len(clusters)} clusters")
    return EXIT_OK if len(ok) == len(trajs) else EXIT_PARTIAL


def cmd_sample(cfg):
    s = cfg["sampler"]
    if not s["modes"]:
        raise ConfigError("sampler.modes must list at least one assembly file")
    for p in s["modes"]:
        if not resolve(cfg, p).exists():
            raise ConfigError(f"mode file not found: {p}")
    modes = [structio.load_assembly(resolve(cfg, m)) for m in s["modes"]]
    base = structio.load_assembly(require_file(cfg, "input")) if cfg["input"] else modes[0]
    sched = NoiseSchedule(**cfg["schedule"])
    table = igso3.cached_table(cache_dir=_out(cfg) / ".cache")
    oracle = sampler.MixtureOracle(modes, s["weights"], table, sched)
    scfg = sampler.SamplerConfig(s["n_steps"], s["n_samples"], cfg["seed"], s["noise_on_final_step"])
    res = sampler.sample_equilibria(oracle, base, scfg, table, sched, s["cluster_radius"], jobs=_jobs(cfg))
    if not res.finals:
        raise NumericalFailure("all samples failed")
    out = _out(cfg)
    names = []
    for k, (tr, err) in enumerate(zip(res.trajectories, res.errors)):
        if tr is None:
            _write(out / "samples" / f"sample_{k:03d}.error", err + "\n")
            continue
        names.append(k)
        _write(out / "samples" / f"sample_{k:03d}.jsonl", sampler.trajectory_to_jsonl(tr))
    rows = []
    for c_i, c in enumerate(res.clusters):
        for m in c.members:
            fin = res.finals[m]
            rows.append([names[m], c_i] + [complex_rmsd(fin, mode) for mode in modes])
    rows.sort()
    header = ["sample", "cluster"] + [f"crmsd_mode{k}" for k in range(len(modes))]
    _write(out / "samples.csv", csv_text(header, rows))
    _write(out / "clusters.json", json.dumps(_cluster_doc(res.clusters, names), indent=1) + "\n")
    if cfg["figures"]:
        plotting.cluster_counts([c.count for c in res.clusters], out / "cluster_counts.png")
    print(f"{len(res.finals)}/{scfg.n_samples} samples, {len(res.clusters)} clusters")
    return EXIT_OK if len(res.finals) == scfg.n_samples else EXIT_PARTIAL


def cmd_score(cfg, paths):
    paths = [resolve(cfg, p) for p in paths] or [require_file(cfg, "input")]
    for p in paths:
        if not p.exists():
            raise ConfigError(f"assembly not found: {p}")
    f = build_potential(cfg)
    pen = potential.GamePenaltyParams(cfg["game"]["lambda"], cfg["game"]["d_ths"])
    rows = []
    for p in paths:
        st = structio.load_assembly(p)
        e, q = f.evaluate(st), potential.distance_penalty(st, pen)
        rows.append([str(p), e, q, e + pen.lam * q])
    _write(_out(cfg) / "scores.csv", csv_text(["assembly", "potential", "penalty", "objective"], rows))
    return EXIT_OK


def compute_metrics(preds, truth):
    rows = []
    for name, st in preds:
        try:
            c = complex_rmsd(st, truth)
        except ValueError as exc:
            raise ConfigError(f"{name} vs truth: {exc}") from exc
        tm = tm_score(st, truth) if sum(truth.sizes) >= 16 else float("nan")
        rows.append([name, c, tm])
    cr = np.array([r[1] for r in rows])
    tm = np.array([r[2] for r in rows])
    summary = [
        ["mean", float(np.mean(cr)), float(np.mean(tm))],
        ["median", float(np.median(cr)), float(np.median(tm))],
        ["std", float(np.std(cr)), float(np.std(tm))],
    ]
    return rows, summary


def cmd_metrics(cfg, preds, truth):
    preds = preds or cfg["metrics"]["predictions"]
    truth = truth or cfg["metrics"]["truth"]
    if not preds or not truth:
        raise ConfigError("metrics needs prediction files and a truth file")
    paths = [resolve(cfg, p) for p in preds]
    tpath = resolve(cfg, truth)
    for p in paths + [tpath]:
        if not p.exists():
            raise ConfigError(f"file not found: {p}")
    truth_state = structio.load_assembly(tpath)
    rows, summary = compute_metrics([(str(p), structio.load_assembly(p)) for p in paths], truth_state)
    _write(_out(cfg) / "metrics.csv", csv_text(["prediction", "crmsd", "tm_score"], rows + summary))
    if cfg["figures"]:
        plotting.metric_histograms([r[1] for r in rows], [r[2] for r in rows], _out(cfg) / "metrics.png")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (schema v1)")
    common.add_argument("--seed", type=int, help="RNG seed (overrides config)")
    common.add_argument("--jobs", type=int, help="worker processes (default: logical cores)")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--no-figures", action="store_true", help="skip matplotlib figures")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rigidgame", description="Game-theoretic rigid multi-body docking")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("decoys", parents=[common], help="generate and score decoys")
    sub.add_parser("train-potential", parents=[common], help="fit the surrogate potential")
    sub.add_parser("equilibrate", parents=[common], help="compute equilibria by gradient play")
    sub.add_parser("sample", parents=[common], help="sample equilibria by reverse diffusion")
    sc = sub.add_parser("score", parents=[common], help="evaluate potential and penalty")
    sc.add_argument("assemblies", nargs="*")
    m = sub.add_parser("metrics", parents=[common], help="C-RMSD and TM-score against a reference")
    m.add_argument("predictions", nargs="*")
    m.add_argument("--truth")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        # paths given on the command line are relative to the working directory
        cwd_path = lambda q: None if q is None else str(Path(q).resolve())
        overrides = {"seed": args.seed, "jobs": args.jobs, "output": cwd_path(args.out)}
        if args.no_figures:
            overrides["figures"] = False
        cfg = load_config(args.config, overrides)
        if args.command == "decoys":
            return cmd_decoys(cfg)
        if args.command == "train-potential":
            return cmd_train_potential(cfg)
        if args.command == "equilibrate":
            return cmd_equilibrate(cfg)
        if args.command == "sample":
            return cmd_sample(cfg)
        if args.command == "score":
            return cmd_score(cfg, [cwd_path(a) for a in args.assemblies])
        return cmd_metrics(cfg, [cwd_path(a) for a in args.predictions], cwd_path(args.truth))
    except (ConfigError, structio.StructureError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, game.GameDivergence, sampler.SamplerDivergence, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
