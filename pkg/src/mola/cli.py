"""Command-line entry point.

One binary, subcommand style: dataset generation, the three training stages,
closed-loop evaluation, every ablation table, the latent-action probe, plot
rendering, and a `reproduce-all` orchestrator that chains the lot under a
single output directory.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 failed
acceptance assertion.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
import traceback
from pathlib import Path

from .checkpointio import file_sha256
from .config import (
    MODALITIES,
    RunConfig,
    config_from_dict,
    config_hash,
    load_config,
    resolved_dict,
)
from .errors import AcceptanceError, ConfigError, MolaError
from .evalharness import (
    StageParents,
    ablation_design,
    ablation_modalities,
    chained_eval,
    control_conditions,
    data_efficiency,
    denoise_step_sweep,
    ensure_policy,
    head_comparison,
    load_policy_stack,
    pretrain_and_freeze_ablations,
    probe_latent_actions,
    summarize,
    variant_cfg,
)
from .moidm import IdmBundle
from .pipeline import (
    IDM_VARIANTS,
    bundle_part_names,
    load_idm,
    read_manifest,
    stage1_train_video,
    stage2_all,
    stage2_pretrain_idm,
    stage3_train_policy,
)
from .plots import _TABLE_KINDS, plot_table
from .synthworld import EpisodeStore, generate_dataset, load_manifest

ABLATIONS = ("modalities", "design", "controls", "data-eff", "pretrain", "freeze", "denoise-steps", "head")


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------


def _load_cfg(path: str | None) -> RunConfig:
    if path is not None and str(path).endswith(".json"):
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        return config_from_dict(json.loads(p.read_text()))
    return load_config(path)


def _merge(cfg: RunConfig, top: dict | None = None, **sections: dict) -> RunConfig:
    """Rebuild a config with top-level and per-section overrides applied."""
    raw = resolved_dict(cfg)
    for key, value in (top or {}).items():
        if value is not None:
            raw[key] = value
    for section, kv in sections.items():
        for key, value in kv.items():
            if value is not None:
                raw[section][key] = value
    return config_from_dict(raw)


def _cfg_from(args: argparse.Namespace, **sections: dict) -> RunConfig:
    cfg = _load_cfg(args.config)
    top = {"seed": getattr(args, "seed", None), "deterministic": getattr(args, "deterministic", None)}
    if getattr(args, "noise_seed", None) is not None:
        top["noise_seed"] = args.noise_seed
    return _merge(cfg, top, **sections)


def _fresh(ckpt: Path, cfg: RunConfig) -> bool:
    """True when a prior run at this path matches the requested config exactly."""
    manifest = ckpt.parent / "manifest.json"
    if not (ckpt.exists() and manifest.exists()):
        return False
    try:
        man = read_manifest(manifest)
    except (OSError, ValueError, KeyError):
        return False
    return man.config_hash == config_hash(cfg) and man.outputs["checkpoint"]["sha256"] == file_sha256(ckpt)


def _collect_idms(args: argparse.Namespace) -> dict:
    """Gather variant -> checkpoint from --idms DIR and/or repeated --idm NAME=PATH."""
    found: dict = {}
    root = getattr(args, "idms", None)
    if root is not None:
        root = Path(root)
        for variant in IDM_VARIANTS:
            for candidate in (root / f"idm-{variant}" / f"idm-{variant}.ckpt", root / f"idm-{variant}.ckpt"):
                if candidate.exists():
                    found[variant] = candidate
                    break
    for spec in getattr(args, "idm", None) or []:
        name, sep, path = spec.partition("=")
        if not sep or name not in IDM_VARIANTS:
            raise ConfigError(f"--idm expects VARIANT=PATH with VARIANT in {sorted(IDM_VARIANTS)}, got {spec!r}")
        found[name] = Path(path)
    if not found:
        raise ConfigError("no inverse-dynamics checkpoints given; pass --idms DIR or --idm VARIANT=PATH")
    return found


def _load_bundle(idms: dict, trunk: str) -> IdmBundle:
    parts = {}
    for variant in MODALITIES:
        if variant not in idms:
            raise ConfigError(f"probe needs the '{variant}' checkpoint; have {sorted(idms)}")
        parts[variant] = load_idm(idms[variant])[0]
    return IdmBundle.from_idms(parts, trunk if trunk in parts else next(iter(parts)))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace) -> None:
    cfg = _cfg_from(args)
    episodes = args.episodes if args.episodes is not None else cfg.data.episodes
    seed = args.seed if args.seed is not None else cfg.data.seed
    out = Path(args.out)
    if (out / "manifest.json").exists():
        man = load_manifest(out)
        if (
            man["world"] == dataclasses.asdict(cfg.world)
            and man["n_episodes"] == episodes
            and man["seed"] == seed
        ):
            print(f"dataset up to date: {out} ({episodes} episodes)")
            return
    man = generate_dataset(cfg.world, episodes, out, seed=seed)
    print(f"wrote {man['n_episodes']} episodes to {out}")


def cmd_train_video(args: argparse.Namespace) -> None:
    cfg = _cfg_from(
        args,
        video={"autoencoder_steps": args.autoencoder_steps, "denoiser_steps": args.denoiser_steps},
    )
    ckpt = Path(args.out) / "video.ckpt"
    if _fresh(ckpt, cfg):
        print(f"video checkpoint up to date: {ckpt}")
        return
    path = stage1_train_video(cfg, args.data, args.out)
    print(f"trained video model -> {path}")


def cmd_train_idm(args: argparse.Namespace) -> None:
    cfg = _cfg_from(args, idm={"steps": args.steps})
    out = Path(args.out)
    variants = tuple(IDM_VARIANTS) if args.variant == "all" else (args.variant,)
    todo = []
    for v in variants:
        ckpt = out / f"idm-{v}" / f"idm-{v}.ckpt"
        if _fresh(ckpt, cfg):
            print(f"idm '{v}' up to date: {ckpt}")
        else:
            todo.append(v)
    if not todo:
        return
    if len(todo) > 1:
        paths = stage2_all(cfg, args.data, args.video, out, variants=tuple(todo), parallel=args.parallel)
        for v, p in paths.items():
            print(f"trained idm '{v}' -> {p}")
    else:
        p = stage2_pretrain_idm(cfg, args.data, args.video, todo[0], out / f"idm-{todo[0]}")
        print(f"trained idm '{todo[0]}' -> {p}")


def cmd_train_policy(args: argparse.Namespace) -> None:
    cfg = _cfg_from(
        args,
        policy={
            "design": args.design,
            "modalities": tuple(args.modalities.split(",")) if args.modalities else None,
            "head": args.head,
            "fraction": args.fraction,
            "freeze_moidm": True if args.freeze_moidm else None,
            "from_scratch": True if args.from_scratch else None,
            "steps": args.steps,
        },
    )
    ckpt = Path(args.out) / "policy.ckpt"
    if _fresh(ckpt, cfg):
        print(f"policy checkpoint up to date: {ckpt}")
        return
    parts = bundle_part_names(cfg.policy.design, cfg.policy.modalities)
    needs_idms = bool(parts) and not cfg.policy.from_scratch
    idms = _collect_idms(args) if (needs_idms or args.idms or args.idm) else {}
    path = stage3_train_policy(
        cfg, args.data, args.video, idms, args.out, allow_lineage_mismatch=args.allow_lineage_mismatch
    )
    print(f"trained policy -> {path}")


def cmd_eval(args: argparse.Namespace) -> None:
    policy = load_policy_stack(
        args.policy,
        args.video,
        mode=args.mode,
        noise_sigma=args.sigma,
        denoise_steps=args.denoise_steps,
        allow_lineage_mismatch=args.allow_lineage_mismatch,
    )
    cfg = policy.arts.cfg
    base = _load_cfg(args.config).eval if args.config else cfg.eval
    overrides = {
        "chains": args.chains,
        "chain_length": args.chain_length,
        "budget": args.budget,
        "seed": args.eval_seed,
    }
    eval_cfg = dataclasses.replace(base, **{k: v for k, v in overrides.items() if v is not None})
    result = chained_eval(
        policy, cfg.world, n_chains=eval_cfg.chains, chain_len=eval_cfg.chain_length,
        budget=eval_cfg.budget, seed=eval_cfg.seed,
    )
    rates = ", ".join(f"{r:.3f}" for r in result.rates)
    print(f"success={result.rates[0]:.3f} avg_len={result.avg_len:.3f} rates=[{rates}] chains={result.n_chains}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "mode": args.mode,
            "rates": list(result.rates),
            "avg_len": result.avg_len,
            "n_chains": result.n_chains,
            "eval": {"chains": eval_cfg.chains, "chain_length": eval_cfg.chain_length,
                     "budget": eval_cfg.budget, "seed": eval_cfg.seed},
        }
        (out / "eval.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
        print(f"wrote {out / 'eval.json'}")


def _run_ablation(kind: str, cfg: RunConfig, parents: StageParents, runs: Path, out_dir: Path, args) -> list[Path]:
    """Dispatch one ablation table; returns the CSV paths it wrote."""
    out_dir.mkdir(parents=True, exist_ok=True)
    n = args.seeds
    if kind == "modalities":
        ablation_modalities(cfg, parents, runs, out_dir / "modalities.csv", n_seeds=n)
        return [out_dir / "modalities.csv"]
    if kind == "design":
        ablation_design(cfg, parents, runs, out_dir / "design.csv", n_seeds=n)
        return [out_dir / "design.csv"]
    if kind == "controls":
        control_conditions(cfg, parents, runs, out_dir / "controls.csv", sigma=args.sigma, n_seeds=n)
        return [out_dir / "controls.csv"]
    if kind == "data-eff":
        data_efficiency(cfg, parents, runs, out_dir / "data-eff.csv", n_seeds=n)
        return [out_dir / "data-eff.csv"]
    if kind in ("pretrain", "freeze"):
        pretrain_and_freeze_ablations(cfg, parents, runs, out_dir, n_seeds=n)
        return [out_dir / f"{kind}.csv"]
    if kind == "denoise-steps":
        steps = tuple(int(s) for s in args.steps_list.split(","))
        denoise_step_sweep(cfg, parents, runs, out_dir / "denoise-steps.csv", steps_list=steps, n_seeds=n)
        return [out_dir / "denoise-steps.csv"]
    if kind == "head":
        head_comparison(cfg, parents, runs, out_dir / "head.csv", n_seeds=n)
        return [out_dir / "head.csv"]
    raise ConfigError(f"unknown ablation {kind!r}; choose from {ABLATIONS}")


def cmd_ablate(args: argparse.Namespace) -> None:
    cfg = _cfg_from(args)
    out_dir = Path(args.out)
    parents = StageParents(Path(args.data), Path(args.video), _collect_idms(args))
    runs = Path(args.runs) if args.runs else out_dir / "runs"
    csvs = _run_ablation(args.kind, cfg, parents, runs, out_dir / "tables", args)
    for path in csvs:
        print(f"wrote {path}")
        if args.plot:
            png = plot_table(path.stem, path, out_dir / "plots" / f"{path.stem}.png")
            print(f"wrote {png}")


def cmd_probe(args: argparse.Namespace) -> None:
    cfg = _cfg_from(args)
    bundle = _load_bundle(_collect_idms(args), cfg.idm.trunk_modality)
    store = EpisodeStore(args.data)
    seeds = tuple(int(s) for s in args.probe_seeds.split(","))
    out_csv = Path(args.out) if args.out else None
    rows = probe_latent_actions(
        bundle, store, cfg.idm.step_gap, out_csv, n_samples=args.samples, seeds=seeds, alpha=args.alpha
    )
    for feature in ("mixture", "pixel_diff", "oracle", "constant"):
        mean, std = summarize([r["r2_translation"] for r in rows if r["feature"] == feature])
        print(f"{feature:>10}: r2_translation {mean:+.4f} ± {std:.4f} over {len(seeds)} seeds")
    if out_csv:
        print(f"wrote {out_csv}")


def cmd_plot(args: argparse.Namespace) -> None:
    png = plot_table(args.kind, args.csv, args.out)
    print(f"wrote {png}")


def cmd_reproduce_all(args: argparse.Namespace) -> None:
    cfg = _cfg_from(args)
    if args.episodes is not None:
        cfg = _merge(cfg, data={"episodes": args.episodes})
    out = Path(args.out)
    t0 = time.perf_counter()

    def banner(msg: str) -> None:
        print(f"[{time.perf_counter() - t0:8.1f}s] {msg}", flush=True)

    banner(f"reproduce-all -> {out} ({cfg.data.episodes} episodes, seed {cfg.seed})")
    data = out / "data"
    if not (data / "manifest.json").exists():
        generate_dataset(cfg.world, cfg.data.episodes, data, seed=cfg.data.seed)
    banner("dataset ready")

    video = out / "video" / "video.ckpt"
    if not _fresh(video, cfg):
        stage1_train_video(cfg, data, out / "video")
    banner("stage 1 (video) ready")

    idms = {}
    todo = []
    for variant in IDM_VARIANTS:
        ckpt = out / "idm" / f"idm-{variant}" / f"idm-{variant}.ckpt"
        idms[variant] = ckpt
        if not _fresh(ckpt, cfg):
            todo.append(variant)
    if todo:
        stage2_all(cfg, data, video, out / "idm", variants=tuple(todo), parallel=args.parallel)
    banner("stage 2 (inverse dynamics, 5 variants) ready")

    parents = StageParents(data, video, idms)
    runs = out / "runs"
    main_ckpt = ensure_policy(variant_cfg(cfg, seed=cfg.seed), parents, runs)
    banner(f"stage 3 (main policy) ready: {main_ckpt}")

    tables = out / "tables"
    tables.mkdir(parents=True, exist_ok=True)
    for kind in ABLATIONS:
        if kind == "freeze":
            continue  # written together with "pretrain"
        ns = argparse.Namespace(seeds=args.seeds, sigma=0.1, steps_list=args.steps_list)
        _run_ablation(kind, cfg, parents, runs, tables, ns)
        banner(f"table '{kind}' ready")

    bundle = _load_bundle({m: idms[m] for m in MODALITIES}, cfg.idm.trunk_modality)
    probe_latent_actions(
        bundle, EpisodeStore(data), cfg.idm.step_gap, tables / "probe.csv",
        n_samples=args.probe_samples, seeds=(0, 1, 2),
    )
    banner("latent-action probe ready")

    plots = out / "plots"
    for kind in _TABLE_KINDS:
        csv_path = tables / f"{kind}.csv"
        if csv_path.exists():
            plot_table(kind, csv_path, plots / f"{kind}.png")
    banner("plots ready")
    banner("reproduce-all complete")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _common(sub: argparse.ArgumentParser, out_required: bool = True, out_help: str = "output directory") -> None:
    sub.add_argument("--config", default=None, help="TOML (or JSON) config file; defaults apply when omitted")
    sub.add_argument("--seed", type=int, default=None, help="override the run seed")
    sub.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="force (or disable) deterministic mode",
    )
    sub.add_argument("--out", required=out_required, default=None, help=out_help)


def _idm_inputs(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--idms", default=None, help="directory holding idm-<variant>/ training runs")
    sub.add_argument("--idm", action="append", default=None, metavar="VARIANT=PATH",
                     help="explicit checkpoint for one variant (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mola",
        description="Latent-action imitation pipeline on a synthetic 2D manipulation world.",
    )
    subs = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")

    p = subs.add_parser("gen-data", help="generate an expert-demonstration dataset")
    _common(p, out_help="dataset directory")
    p.add_argument("--episodes", type=int, default=None, help="number of episodes (default from config)")
    p.set_defaults(fn=cmd_gen_data)

    p = subs.add_parser("train-video", help="stage 1: frame autoencoder + latent denoiser")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--autoencoder-steps", type=int, default=None)
    p.add_argument("--denoiser-steps", type=int, default=None)
    p.add_argument("--noise-seed", type=int, default=None)
    p.set_defaults(fn=cmd_train_video)

    p = subs.add_parser("train-idm", help="stage 2: pretrain inverse-dynamics variants")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--video", required=True, help="stage-1 checkpoint")
    p.add_argument("--variant", default="all", choices=sorted(IDM_VARIANTS) + ["all"])
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--parallel", action="store_true", help="train variants in parallel threads")
    p.set_defaults(fn=cmd_train_idm)

    p = subs.add_parser("train-policy", help="stage 3: joint policy fine-tuning")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--video", required=True)
    _idm_inputs(p)
    p.add_argument("--design", default=None, choices=["moidm", "single_rgb", "single_multiloss", "direct", "baseline"])
    p.add_argument("--modalities", default=None, help="comma-separated subset of semantic,depth,flow")
    p.add_argument("--head", default=None, choices=["flow_match", "autoregressive"])
    p.add_argument("--fraction", type=float, default=None, help="training-data fraction (0.1/0.2/0.5/1.0)")
    p.add_argument("--freeze-moidm", action="store_true")
    p.add_argument("--from-scratch", action="store_true", help="skip stage-2 initialization")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--noise-seed", type=int, default=None)
    p.add_argument("--allow-lineage-mismatch", action="store_true")
    p.set_defaults(fn=cmd_train_policy)

    p = subs.add_parser("eval", help="chained closed-loop evaluation of a policy checkpoint")
    _common(p, out_required=False, out_help="optional directory for eval.json")
    p.add_argument("--policy", required=True, help="stage-3 checkpoint")
    p.add_argument("--video", required=True, help="stage-1 checkpoint")
    p.add_argument("--mode", default="full", choices=["full", "same_frame", "noisy_frame"])
    p.add_argument("--sigma", type=float, default=0.1, help="noise level for noisy_frame mode")
    p.add_argument("--denoise-steps", type=int, default=None, help="imagination steps at test time")
    p.add_argument("--chains", type=int, default=None)
    p.add_argument("--chain-length", type=int, default=None)
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--eval-seed", type=int, default=None)
    p.add_argument("--allow-lineage-mismatch", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = subs.add_parser("ablate", help="train + evaluate one ablation table")
    p.add_argument("kind", choices=ABLATIONS)
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--video", required=True)
    _idm_inputs(p)
    p.add_argument("--runs", default=None, help="variant training root (default: OUT/runs)")
    p.add_argument("--seeds", type=int, default=3, help="seeds per reported cell")
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--steps-list", default="1,2,10,20", help="denoise-steps sweep values")
    p.add_argument("--plot", action="store_true", help="also render the PNG")
    p.set_defaults(fn=cmd_ablate)

    p = subs.add_parser("probe", help="linear probe from latent actions to oracle actions")
    _common(p, out_required=False, out_help="optional CSV path")
    p.add_argument("--data", required=True)
    _idm_inputs(p)
    p.add_argument("--samples", type=int, default=1500)
    p.add_argument("--probe-seeds", default="0,1,2")
    p.add_argument("--alpha", type=float, default=1e-2, help="ridge regularization")
    p.set_defaults(fn=cmd_probe)

    p = subs.add_parser("plot", help="render a PNG from an emitted CSV table")
    p.add_argument("--kind", required=True, choices=sorted(_TABLE_KINDS))
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True, help="PNG path")
    p.set_defaults(fn=cmd_plot)

    p = subs.add_parser("reproduce-all", help="chain every stage, table, probe, and plot")
    _common(p)
    p.add_argument("--episodes", type=int, default=None, help="dataset size override (smoke profiles)")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--steps-list", default="1,2,10,20")
    p.add_argument("--probe-samples", type=int, default=1500)
    p.add_argument("--parallel", action="store_true")
    p.set_defaults(fn=cmd_reproduce_all)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if (exc.code or 0) == 0 else 1
    try:
        args.fn(args)
    except AcceptanceError as exc:
        print(f"acceptance assertion failed: {exc}", file=sys.stderr)
        return 3
    except MolaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 2
    return 0


def entry() -> None:
    raise SystemExit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
