"""Experiment runner: ``unemo <subcommand>``.

Exit codes: 0 ok, 1 check failure, 2 usage/config error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import sys
from collections import OrderedDict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from .autodiff import ParamStore
from .config import RunConfig, load, model_config_for
from .encoders import autoencoder_train, init_autoencoder, label_table, view_corpus
from .errors import ConfigError, FormatError, TrainingError, UnemoError
from .evalmetrics import REPORT_COLUMNS, prediction_stats, write_histogram_csv
from .graphworld import build_split, load_world, save_world
from .training import LOG_COLUMNS, Agent, build_params, evaluate, train

EVAL_COLUMNS = ("row",) + REPORT_COLUMNS
SWEEP_COLUMNS = ("group", "cell", "status") + REPORT_COLUMNS
NAV_COLUMNS = ("TL", "NE", "OSR", "SR", "SPL")


class UsageError(UnemoError):
    """Missing inputs or mismatched files (exit 2)."""


# corpus ---------------------------------------------------------------------------
def world_files(root, split: str) -> list[Path]:
    root = Path(root)
    folder = root / split if (root / split).is_dir() else root
    files = sorted(folder.glob("world_*.jsonl"))
    if not files:
        raise UsageError(f"no world files under {folder}")
    return files


def load_split(root, split: str):
    return [(w, eps) for w, eps, _ in (load_world(p) for p in world_files(root, split))]


def write_split(out, cfg: RunConfig, split: str, count: int) -> list[Path]:
    folder = Path(out)
    folder.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (world, eps) in enumerate(build_split(cfg.world, split, count, cfg.episodes_per_world)):
        path = folder / f"world_{i:05d}.jsonl"
        save_world(path, world, eps, split)
        paths.append(path)
    return paths


# checkpoints ----------------------------------------------------------------------
def params_checkpoint(params: ParamStore, cfg: RunConfig) -> checkpoint.Checkpoint:
    model = model_config_for(cfg.world, cfg.model)
    return checkpoint.Checkpoint(cfg.digest(), checkpoint.model_dims(model), params.state())


def restore(store: ParamStore, ckpt: checkpoint.Checkpoint, cfg: RunConfig) -> ParamStore:
    model = model_config_for(cfg.world, cfg.model)
    if ckpt.dims != checkpoint.model_dims(model):
        raise UsageError(f"checkpoint dims {ckpt.dims_dict()} do not match config "
                         f"{dict(zip(checkpoint.DIM_FIELDS, checkpoint.model_dims(model)))}")
    missing = [n for n in store if n not in ckpt.tensors]
    if missing:
        raise UsageError(f"checkpoint lacks tensors {missing[:3]}")
    try:
        store.load_state({n: ckpt.tensors[n] for n in store})
    except UnemoError as exc:
        raise UsageError(str(exc)) from exc
    return store


def new_agent(cfg: RunConfig, ae: ParamStore) -> Agent:
    model = model_config_for(cfg.world, cfg.model)
    return Agent(model, build_params(model, cfg.train.seed), ae)


def load_ae(cfg: RunConfig, path=None) -> ParamStore:
    path = Path(path or cfg.ae_checkpoint)
    if not path.exists():
        raise UsageError(f"auto-encoder checkpoint {path} not found (run pretrain-ae)")
    model = model_config_for(cfg.world, cfg.model)
    return restore(init_autoencoder(model.feature_dim, model.s_dim, dtype=np.dtype(model.dtype)),
                   checkpoint.load(path), cfg)


# pipeline steps -------------------------------------------------------------------
def pretrain_ae(cfg: RunConfig, train_data):
    model = model_config_for(cfg.world, cfg.model)
    views = view_corpus([w for w, _ in train_data], cfg.ae_corpus_size, seed=cfg.train.seed)
    ae = init_autoencoder(model.feature_dim, model.s_dim, seed=cfg.train.seed, dtype=np.dtype(model.dtype))
    log = autoencoder_train(views, ae, epochs=cfg.ae_epochs, lr=cfg.ae_lr, seed=cfg.train.seed)
    return ae, log


def fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(row[c]) for c in columns])


def eval_rows(agent: Agent, data, cfg: RunConfig, split: str, oracle: bool = False):
    """Per-episode report rows plus the aggregate row, and pooled prediction stats."""
    tc = cfg.train
    res = evaluate(agent, data, tc, oracle=oracle)
    rows, preds_all, labels_all = [], [], []
    ids = [(wi, ei) for wi, (_, eps) in enumerate(data) for ei in range(len(eps))]
    for (wi, ei), traj, world, m in zip(ids, res.trajectories, res.worlds, res.report.rows):
        preds, labels = [], []
        if not oracle and tc.uses_world_model:
            table = label_table(world, agent.ae)
            for step in traj.steps:
                out = step.decision.mwm_out
                if out is not None:
                    preds.append(out.s_hat.data)
                    labels.append(table[step.decision.lookahead])
        st = prediction_stats(preds, labels)
        preds_all += preds
        labels_all += labels
        rows.append({"row": f"w{wi:05d}e{ei:03d}", "split": split, "seed": tc.seed,
                     "variant": tc.variant if tc.feedback or tc.variant == "none" else f"{tc.variant}-nofb",
                     "supervision": tc.supervision, "TL": m.tl, "NE": m.ne, "OSR": m.osr, "SR": m.sr,
                     "SPL": m.spl, "mwm_cos": st.mean_cosine, "mwm_mse": st.mean_mse})
    pooled = prediction_stats(preds_all, labels_all)
    agg = dict(rows[0]) if rows else {"split": split, "seed": tc.seed, "variant": tc.variant,
                                      "supervision": tc.supervision}
    agg["row"] = "aggregate"
    for c in NAV_COLUMNS:
        agg[c] = float(np.mean([r[c] for r in rows])) if rows else math.nan
    agg["mwm_cos"], agg["mwm_mse"] = pooled.mean_cosine, pooled.mean_mse
    return rows, agg, pooled


# ablation -------------------------------------------------------------------------
ABLATION_CELLS = OrderedDict([
    ("baseline", dict(variant="none", feedback=False, supervision="a2")),
    ("TopoState", dict(variant="TopoState", feedback=False, supervision="a2")),
    ("Cond2Vis", dict(variant="Cond2Vis", feedback=False, supervision="a2")),
    ("VisWM", dict(variant="VisWM", feedback=True, supervision="a2")),
    ("MWM", dict(variant="MWM", feedback=True, supervision="a2")),
    ("MWM-only", dict(variant="MWM", feedback=False, supervision="a2")),
    ("a1-only", dict(variant="MWM", feedback=True, supervision="a1")),
    ("a2-only", dict(variant="MWM", feedback=True, supervision="a2")),
    ("a1+a2", dict(variant="MWM", feedback=True, supervision="both")),
])
ABLATION_GROUPS = OrderedDict([
    ("predictor", ("baseline", "TopoState", "Cond2Vis", "VisWM", "MWM")),
    ("supervision", ("MWM-only", "a1-only", "a2-only", "a1+a2")),
])


def cell_config(cfg: RunConfig, cell: str, seed: int) -> RunConfig:
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed, **ABLATION_CELLS[cell]))


def run_cell(cfg: RunConfig, ae: ParamStore, train_data, val_data) -> dict:
    agent = new_agent(cfg, ae)
    train(agent, train_data, cfg.train)
    _, agg, _ = eval_rows(agent, val_data, cfg, "val")
    return agg


def ablate(cfg: RunConfig, ae: ParamStore, train_data, val_data, seeds: Sequence[int],
           cells: Sequence[str] | None = None, log=None) -> list[dict]:
    """One aggregate row per (group, cell, seed); cells shared by both groups run once."""
    wanted = set(cells) if cells is not None else set(ABLATION_CELLS)
    cache: dict[tuple[str, int], dict] = {}
    rows = []
    for group, members in ABLATION_GROUPS.items():
        for cell in members:
            if cell not in wanted:
                continue
            for seed in seeds:
                key = (repr(sorted(ABLATION_CELLS[cell].items())), seed)
                if key not in cache:
                    try:
                        agg = run_cell(cell_config(cfg, cell, seed), ae, train_data, val_data)
                        agg["status"] = "ok"
                    except UnemoError as exc:
                        agg = {c: math.nan for c in REPORT_COLUMNS}
                        agg.update(split="val", seed=seed, variant=ABLATION_CELLS[cell]["variant"],
                                   supervision=ABLATION_CELLS[cell]["supervision"], status=f"failed: {exc}")
                    cache[key] = agg
                    if log:
                        log(f"{group}/{cell} seed {seed}: SR {cache[key]['SR']}")
                rows.append({**cache[key], "group": group, "cell": cell})
    return rows


# subcommands ----------------------------------------------------------------------
def cmd_gen_worlds(args) -> int:
    cfg = load(args.config)
    if args.count is not None:
        if args.count < 1:
            raise ConfigError("--count must be >= 1")
        write_split(args.out, cfg, args.split if args.split != "all" else "train", args.count)
        return 0
    splits = {"train": cfg.train_worlds, "val": cfg.val_worlds}
    for split, n in splits.items():
        if args.split in ("all", split):
            write_split(Path(args.out) / split, cfg, split, n)
    return 0


def cmd_pretrain_ae(args) -> int:
    cfg = load(args.config)
    data = load_split(args.worlds or cfg.corpus_dir, "train")
    ae, log = pretrain_ae(cfg, data)
    checkpoint.save(args.out or cfg.ae_checkpoint, params_checkpoint(ae, cfg))
    print(f"held-out MSE {log.initial_heldout_mse:.6g} -> {log.final_heldout_mse:.6g} "
          f"(ratio {log.heldout_ratio:.4f})")
    return 0


def cmd_train(args) -> int:
    cfg = load(args.config)
    ae = load_ae(cfg, args.ae)
    data = load_split(args.worlds or cfg.corpus_dir, "train")
    val = load_split(args.worlds or cfg.corpus_dir, "val") if args.validate else None
    agent = new_agent(cfg, ae)
    result = train(agent, data, cfg.train, val_data=val)
    checkpoint.save(args.out, params_checkpoint(agent.params, cfg))
    write_csv(args.log or str(Path(args.out).with_suffix(".log.csv")), LOG_COLUMNS, result.log)
    return 0


def cmd_eval(args) -> int:
    cfg = load(args.config)
    data = load_split(args.worlds or cfg.corpus_dir, args.split)
    if args.oracle:
        model = model_config_for(cfg.world, cfg.model)
        agent = Agent(model, build_params(model, cfg.train.seed), init_autoencoder(model.feature_dim, model.s_dim))
    else:
        if not args.ckpt:
            raise UsageError("--ckpt is required unless --oracle is given")
        agent = new_agent(cfg, load_ae(cfg, args.ae))
        restore(agent.params, checkpoint.load(args.ckpt), cfg)
    rows, agg, pooled = eval_rows(agent, data, cfg, args.split, oracle=args.oracle)
    write_csv(args.out, EVAL_COLUMNS, rows + [agg])
    if args.hist:
        write_histogram_csv(args.hist, pooled)
    print(" ".join(f"{c}={agg[c]:.4f}" for c in NAV_COLUMNS + ("mwm_cos", "mwm_mse")))
    return 0


def cmd_ablate(args) -> int:
    cfg = load(args.config)
    ae = load_ae(cfg, args.ae)
    data = load_split(args.worlds or cfg.corpus_dir, "train")
    val = load_split(args.worlds or cfg.corpus_dir, "val")
    n = args.seeds or cfg.sweep_seeds
    if n < 1:
        raise ConfigError("need at least one seed")
    seeds = [cfg.train.seed + k for k in range(n)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ablate(cfg, ae, data, val, seeds, log=lambda s: print(s, flush=True))
    write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite
    results = run_suite(max_coords=args.max_coords)
    ok = True
    for r in results:
        status = "PASS" if r.report.passed else "FAIL"
        print(f"{status} {r.module:<24} max_rel_err={r.report.max_rel_error:.3e} "
              f"coords={r.report.checked} {r.seconds:.2f}s")
        if not r.report.passed:
            ok = False
            worst = sorted(r.report.failures, key=lambda f: -f[2])[:5]
            for name, idx, err in worst:
                print(f"    {name}{list(idx)} rel_err={err:.3e}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unemo", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-worlds", help="generate a world corpus")
    g.add_argument("--config", "--spec", dest="config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--split", choices=("train", "val", "all"), default="all")
    g.set_defaults(func=cmd_gen_worlds)

    a = sub.add_parser("pretrain-ae", help="train the view auto-encoder")
    a.add_argument("--config", required=True)
    a.add_argument("--worlds")
    a.add_argument("--out")
    a.set_defaults(func=cmd_pretrain_ae)

    t = sub.add_parser("train", help="train the navigator")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.add_argument("--worlds")
    t.add_argument("--ae")
    t.add_argument("--validate", action="store_true", help="log validation SR at phase ends")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--worlds")
    e.add_argument("--split", default="val")
    e.add_argument("--out", required=True)
    e.add_argument("--ae")
    e.add_argument("--hist", help="histogram CSV of prediction cosine/MSE")
    e.add_argument("--oracle", action="store_true", help="evaluate the expert instead")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="predictor and supervision sweeps")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", type=int)
    s.add_argument("--worlds")
    s.add_argument("--ae")
    s.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--max-coords", type=int, default=None)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, FormatError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
