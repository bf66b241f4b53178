"""Command-line entry point: generate, train the two phases, evaluate, ablate.

Exit codes: 0 success, 2 configuration error, 3 runtime limit or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import pickle
import sys
from pathlib import Path

from .config import SPLIT_OFFSETS, SPLITS, RunConfig, load_config
from .instances import InstanceFormatError, instance_hash, read_split, write_instance
from .learning import (
    ROW_COLUMNS,
    ConfigError,
    PhaseOrderError,
    TrainingLog,
    collect_expert,
    evaluate,
    finetune,
    pretrain_cut,
    summarize,
    train_bc,
)
from .policy import ParamFormatError, load_params

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
VIRTUAL_COLUMNS = tuple(c for c in ROW_COLUMNS if c != "wall_s")

log = logging.getLogger("collab_milp")


# ---------------------------------------------------------------------------
# locations


def _ckpt_dir(cfg: RunConfig) -> Path:
    return cfg.path("checkpoints") / cfg.family / f"seed-{cfg.seed}"


def _metrics_dir(cfg: RunConfig) -> Path:
    return cfg.path("metrics") / cfg.family / f"seed-{cfg.seed}"


def _split_dir(cfg: RunConfig, split: str) -> Path:
    return cfg.path("instances") / cfg.family / split


def _training_log(cfg: RunConfig) -> TrainingLog:
    return TrainingLog(_metrics_dir(cfg) / "training.csv", cfg.seed, cfg.config_hash())


def _read_split(cfg: RunConfig, split: str, limit: int | None = None):
    d = _split_dir(cfg, split)
    if not d.is_dir():
        raise FileNotFoundError(f"no instances at {d}; run 'generate' first")
    insts = read_split(d)
    if not insts:
        raise FileNotFoundError(f"split {d} is empty")
    return insts[:limit] if limit else insts


def _file_sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise PhaseOrderError(f"{what} not found at {path}; run the earlier phase first")
    return path


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _provenance(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, "config": cfg.to_dict()}


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig) -> Path:
    """Write every family's splits plus a manifest of seeds and content hashes."""
    root = cfg.path("instances")
    entries = []
    for spec in cfg.generator_specs():
        for split in SPLITS:
            count = cfg.instances["splits"].get(split, 0)
            d = root / spec.family / split
            d.mkdir(parents=True, exist_ok=True)
            for i in range(count):
                seed = cfg.seed * 10_000_000 + spec.seed + SPLIT_OFFSETS[split] + i
                inst = spec.generate(seed)
                path = d / f"{seed}.milp"
                write_instance(inst, path)
                entries.append({"family": spec.family, "split": split, "seed": seed,
                                "path": str(path.relative_to(root)), "sha256": instance_hash(inst)})
    manifest = root / "manifest.json"
    _write_json(manifest, {**_provenance(cfg), "instances": entries})
    return manifest


def _theta_path(cfg: RunConfig) -> Path:
    return _ckpt_dir(cfg) / f"pretrain_cut-{cfg.train_config().N_c}.params"


def _psi_path(cfg: RunConfig, sub: str = "") -> Path:
    base = _ckpt_dir(cfg) / sub if sub else _ckpt_dir(cfg)
    return base / f"train_bc-{cfg.train_config().N_b}.params"


def _finetune_paths(cfg: RunConfig) -> tuple[Path, Path]:
    n = cfg.train_config().N_f
    d = _ckpt_dir(cfg)
    return d / f"finetune_cut-{n}.params", d / f"finetune_branch-{n}.params"


def cmd_pretrain_cut(cfg: RunConfig) -> Path:
    tc = cfg.train_config()
    train = _read_split(cfg, "train")
    pretrain_cut(train, tc, cfg.solve_limits(), checkpoint_dir=_ckpt_dir(cfg),
                 training_log=_training_log(cfg))
    return _theta_path(cfg)


def _expert_path(cfg: RunConfig, sub: str = "") -> Path:
    base = _ckpt_dir(cfg) / sub if sub else _ckpt_dir(cfg)
    return base / "expert.pkl"


def cmd_collect_expert(cfg: RunConfig, communicate: bool = True) -> Path:
    """Expert data under the pretrained cut policy, or under the heuristic
    cut selector when ``communicate`` is False."""
    tc = cfg.train_config()
    theta = load_params(_require(_theta_path(cfg), "cut-policy checkpoint")) if communicate else None
    train = _read_split(cfg, "train")
    samples = collect_expert(train, theta, tc, cfg.solve_limits())
    out = _expert_path(cfg, "" if communicate else "nocomm")
    out.parent.mkdir(parents=True, exist_ok=True)
    doc = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "communicate": communicate,
           "theta_sha256": _file_sha(_theta_path(cfg)) if communicate else None,
           "samples": samples}
    tmp = out.with_suffix(".tmp")
    tmp.write_bytes(pickle.dumps(doc, protocol=4))
    tmp.replace(out)
    return out


def _load_expert(path: Path) -> list:
    doc = pickle.loads(_require(path, "expert dataset").read_bytes())
    return doc["samples"]


def cmd_train_bc(cfg: RunConfig, communicate: bool = True) -> Path:
    tc = cfg.train_config()
    sub = "" if communicate else "nocomm"
    expert = _load_expert(_expert_path(cfg, sub))
    ckpt = _ckpt_dir(cfg) / sub if sub else _ckpt_dir(cfg)
    logger = _training_log(cfg) if communicate else TrainingLog(
        _metrics_dir(cfg) / "training_nocomm.csv", cfg.seed, cfg.config_hash())
    _, report = train_bc(expert, tc, checkpoint_dir=ckpt, training_log=logger)
    _write_json(ckpt / "train_bc-report.json", {
        "config_hash": cfg.config_hash(), "seed": cfg.seed,
        "train_loss": report.train_loss, "val_loss": report.val_loss,
        "val_accuracy": report.val_accuracy, "uniform_baseline": report.uniform_baseline,
        "initial_loss": report.initial_loss, "final_loss": report.final_loss,
        "n_train": report.n_train, "n_val": report.n_val})
    return _psi_path(cfg, sub)


def cmd_finetune(cfg: RunConfig) -> tuple[Path, Path]:
    tc = cfg.train_config()
    theta = load_params(_require(_theta_path(cfg), "cut-policy checkpoint"))
    psi = load_params(_require(_psi_path(cfg), "branching checkpoint"))
    train = _read_split(cfg, "train")
    _, _, report = finetune(train, theta, psi, tc, cfg.solve_limits(),
                            checkpoint_dir=_ckpt_dir(cfg), training_log=_training_log(cfg))
    _write_json(_ckpt_dir(cfg) / "finetune-report.json", {
        "config_hash": cfg.config_hash(), "seed": cfg.seed,
        "theta_updates": report.theta_updates, "psi_updates": report.psi_updates,
        "theta_schedule": report.theta_schedule, "psi_schedule": report.psi_schedule})
    return _finetune_paths(cfg)


def _write_rows(out_dir: Path, rows: list[dict], cfg: RunConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    header = f"# config_hash={cfg.config_hash()} seed={cfg.seed}\n"
    for name, cols in (("per_instance.csv", ROW_COLUMNS), ("per_instance_virtual.csv", VIRTUAL_COLUMNS)):
        with (out_dir / name).open("w", newline="") as fh:
            fh.write(header)
            w = csv.writer(fh)
            w.writerow(cols)
            for r in rows:
                w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])


def _learned_params(cfg: RunConfig, stage: str):
    """Cut and branching parameters for evaluation, or (None, None) if absent."""
    ft_cut, ft_branch = _finetune_paths(cfg)
    if stage in ("auto", "finetune") and ft_cut.exists() and ft_branch.exists():
        return load_params(ft_cut), load_params(ft_branch), "finetune"
    if stage == "finetune":
        raise PhaseOrderError("finetuned checkpoints not found; run 'finetune' first")
    theta = load_params(_theta_path(cfg)) if _theta_path(cfg).exists() else None
    psi = load_params(_psi_path(cfg)) if _psi_path(cfg).exists() else None
    return theta, psi, "pretrain"


def cmd_evaluate(cfg: RunConfig, out_dir: Path | None = None) -> Path:
    ev = cfg.evaluate
    tests = _read_split(cfg, ev["split"], ev.get("max_instances"))
    combos = [tuple(c) for c in ev["combos"]]
    needs_learned = any("learned" in c for c in combos)
    theta = psi = None
    stage = None
    if needs_learned:
        theta, psi, stage = _learned_params(cfg, ev["stage"])
    rows, summary = evaluate(tests, theta, psi, cfg.solve_limits(), combos, ev["seeds"],
                             cfg.train_config().n_jobs)
    out_dir = out_dir or (cfg.path("metrics") / cfg.family / "evaluate")
    _write_rows(out_dir, rows, cfg)
    _write_json(out_dir / "summary.json", {**_provenance(cfg), "stage": stage, "summary": summary})
    return out_dir


ABLATION_COMBOS = ("full", "no_finetune", "no_finetune_no_comm")


def cmd_ablate(cfg: RunConfig, out_dir: Path | None = None) -> Path:
    """Full pipeline vs. no finetuning vs. no finetuning and no communication,
    each with learned cut and branching policies; runs missing phases first."""
    if not _theta_path(cfg).exists():
        cmd_pretrain_cut(cfg)
    if not _psi_path(cfg).exists():
        if not _expert_path(cfg).exists():
            cmd_collect_expert(cfg)
        cmd_train_bc(cfg)
    ft_cut, ft_branch = _finetune_paths(cfg)
    if not (ft_cut.exists() and ft_branch.exists()):
        cmd_finetune(cfg)
    if not _psi_path(cfg, "nocomm").exists():
        if not _expert_path(cfg, "nocomm").exists():
            cmd_collect_expert(cfg, communicate=False)
        cmd_train_bc(cfg, communicate=False)

    lineage = {
        "full": {"cut": ft_cut, "branch": ft_branch},
        "no_finetune": {"cut": _theta_path(cfg), "branch": _psi_path(cfg)},
        "no_finetune_no_comm": {"cut": _theta_path(cfg), "branch": _psi_path(cfg, "nocomm")},
    }
    ab = cfg.ablate
    tests = _read_split(cfg, ab["split"], ab.get("max_instances"))
    limits = cfg.solve_limits()
    jobs = cfg.train_config().n_jobs
    rows = []
    for combo in ABLATION_COMBOS:
        theta = load_params(lineage[combo]["cut"])
        psi = load_params(lineage[combo]["branch"])
        got, _ = evaluate(tests, theta, psi, limits, [("learned", "learned")], ab["seeds"], jobs)
        for r in got:
            r["policy_combo"] = combo
        rows.extend(got)
    ref_rows, _ = evaluate(tests, None, None, limits, [("heuristic", "heuristic")], ab["seeds"], jobs)
    out_dir = out_dir or (cfg.path("metrics") / cfg.family / "ablate")
    _write_rows(out_dir, rows, cfg)
    _write_json(out_dir / "summary.json", {
        **_provenance(cfg),
        "summary": summarize(rows),
        "reference": summarize(ref_rows),
        "lineage": {c: {role: {"path": str(p), "sha256": _file_sha(p)} for role, p in v.items()}
                    for c, v in lineage.items()},
    })
    return out_dir


# ---------------------------------------------------------------------------
# argument handling


COMMANDS = {
    "generate": cmd_generate,
    "pretrain-cut": cmd_pretrain_cut,
    "collect-expert": cmd_collect_expert,
    "train-bc": cmd_train_bc,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="collab-milp",
        description="Learned cut selection and branching for a branch-and-cut MILP solver.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", metavar="PATH", help="YAML run configuration")
    parser.add_argument("--seed", type=int, metavar="U64", help="run seed")
    parser.add_argument("--jobs", type=int, metavar="N", help="parallel solver processes")
    parser.add_argument("--limit-time", type=float, metavar="S", help="per-solve time limit (s)")
    parser.add_argument("--out", metavar="DIR", help="root directory for all run outputs")
    parser.add_argument("--print-config", action="store_true",
                        help="print the resolved configuration and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _overrides(args) -> dict:
    ov: dict = {}
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        ov["seed"] = args.seed
    if args.jobs is not None:
        ov["train"] = {"n_jobs": args.jobs}
    if args.limit_time is not None:
        ov["limits"] = {"time_limit_s": args.limit_time}
    if args.out is not None:
        ov["paths"] = {"root": args.out}
    return ov


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config is not None and not Path(args.config).is_file():
            raise ConfigError(f"config file {args.config} does not exist")
        cfg = load_config(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.print_config:
        sys.stdout.write(f"# config_hash: {cfg.config_hash()}\n")
        sys.stdout.write(cfg.to_yaml())
        return EXIT_OK
    try:
        out = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PhaseOrderError, ParamFormatError, InstanceFormatError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if isinstance(out, tuple):
        out = ", ".join(str(p) for p in out)
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
