"""``fairylab`` command line: every experiment is one run under ``$RUN_DIR``."""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("fairylab")

# typed exit codes
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_PLANNER = 4
EXIT_NUMERIC = 5

COMMANDS = {
    "corpus": ("gen",),
    "base": ("train",),
    "style": ("train", "synth", "ablate"),
    "motion": ("stage1", "stage2"),
    "ablate": ("mu",),
    "story": ("plan", "render"),
    "report": (),
}


class MissingInputError(FileNotFoundError):
    pass


def run_root() -> Path:
    import os

    return Path(os.environ.get("RUN_DIR", "runs"))


def code_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def run_id(command: str, cfg: RunConfig) -> str:
    return f"{command.replace(' ', '-')}-{cfg.digest()}"


def _input(cfg: RunConfig, name: str) -> Path:
    if name not in cfg.inputs:
        raise MissingInputError(f"this command needs inputs.{name} (path of an earlier run)")
    p = Path(cfg.inputs[name])
    if not (p / "run_manifest.json").exists():
        raise MissingInputError(f"inputs.{name}={p} is not a completed run")
    return p


def _checkpoint(cfg: RunConfig, name: str):
    from .diffusion import Checkpoint

    return Checkpoint.load(_input(cfg, name) / "checkpoint")


def _bank(cfg: RunConfig, name: str):
    from .adapters import AdapterBank

    return AdapterBank.load(_input(cfg, name) / "bank")


# ---------------------------------------------------------------- command bodies (each returns nothing; writes into out)

def cmd_corpus_gen(cfg: RunConfig, out: Path):
    from .corpus import CorpusConfig, generate_corpus

    c = cfg.corpus
    generate_corpus(out / "corpus", c.n_styles, c.clips_per_style,
                    CorpusConfig(frames=c.frames, size=c.size, seed=cfg.seed), overwrite=True)


def cmd_base_train(cfg: RunConfig, out: Path):
    b = cfg.base
    given = {k: v for k, v in b.model_dump().items() if k != "kind" and v is not None}
    if b.kind == "image":
        from .style import ImageBaseConfig, pretrain_image_base

        pretrain_image_base(ImageBaseConfig(**given, seed=cfg.seed), out / "checkpoint")
    else:
        from .motion import ClipBaseConfig, pretrain_clip_base

        pretrain_clip_base(ClipBaseConfig(**given, seed=cfg.seed), out / "checkpoint")


def _style_adapter_cfg(cfg: RunConfig, variant: str | None = None):
    from .style import StyleAdapterConfig

    s = cfg.style
    return StyleAdapterConfig(variant=variant or s.variant, rank=s.rank, dropout_p=s.dropout_p, steps=s.steps,
                              lr=s.lr, seed=cfg.seed)


def cmd_style_train(cfg: RunConfig, out: Path):
    from .corpus import describe_style, random_style
    from .style import style_frames, train_style_adapter

    base = _checkpoint(cfg, "image_base")
    style = random_style(cfg.style.style_id, cfg.style.style_seed)
    frames = style_frames(style, cfg.style.train_clips, cfg.seed, base.spec.size)
    bank = train_style_adapter(frames, base, _style_adapter_cfg(cfg), describe_style(style), out / "train")
    bank.save(out / "bank")
    (out / "style.json").write_text(json.dumps(style.to_dict(), sort_keys=True) + "\n")


def cmd_style_synth(cfg: RunConfig, out: Path):
    from .corpus import describe_style, random_style
    from .frames import grid, save_png
    from .style import style_frames, synthesize_scenes

    base = _checkpoint(cfg, "image_base")
    bank = _bank(cfg, "style")
    style = random_style(cfg.style.style_id, cfg.style.style_seed)
    frames = style_frames(style, (cfg.style.samples + 7) // 8, cfg.seed + 5000, base.spec.size)[: cfg.style.samples]
    kws = [cfg.style.backgrounds[i % len(cfg.style.backgrounds)] for i in range(len(frames))]
    scenes = synthesize_scenes(frames, kws, bank, base, cfg.seed, describe_style(style))
    for i, (im, kw) in enumerate(zip(scenes, kws)):
        save_png(out / "scenes" / f"scene_{i:02d}_{kw}.png", im)
    save_png(out / "grid.png", grid([list(scenes[i:i + 8]) for i in range(0, len(scenes), 8)]))


def cmd_style_ablate(cfg: RunConfig, out: Path):
    from .corpus import random_style
    from .evalkit import train_keyword_classifier
    from .style import StyleHarnessConfig, compare_adapter_variants

    base = _checkpoint(cfg, "image_base")
    clf = train_keyword_classifier(seed=cfg.seed, size=base.spec.size)
    clf.save(out / "classifier.json")
    style = random_style(cfg.style.style_id, cfg.style.style_seed)
    harness = StyleHarnessConfig(adapter=_style_adapter_cfg(cfg), train_clips=cfg.style.train_clips,
                                 samples=cfg.style.samples, seed=cfg.seed)
    compare_adapter_variants(style, cfg.style.variants, harness, base, clf, out_dir=out)


def _motion_parts(cfg: RunConfig):
    from .motion import MotionAdapterConfig, MotionHarnessConfig, StageConfig, TwoStagePlan
    from .timesteps import TimestepSampler

    m = cfg.motion
    acfg = MotionAdapterConfig(rank=m.rank, lr=m.lr, seed=cfg.seed)
    sampler = (TimestepSampler.uniform(cfg.base.T) if m.mu is None
               else TimestepSampler.shifted(cfg.base.T, m.mu, m.sigma))
    plan = TwoStagePlan(StageConfig(m.stage1_steps, m.dropout_p, True), StageConfig(m.stage2_steps, m.dropout_p, False),
                        sampler)
    harness = MotionHarnessConfig(style_id=m.style_id, style_seed=m.style_seed, motions=tuple(m.motions),
                                  train_clips_per_motion=m.train_clips_per_motion,
                                  eval_clips_per_motion=m.eval_clips_per_motion, adapter=acfg, plan=plan,
                                  mus=tuple(cfg.ablate.mus), sigma=m.sigma, run_direct=False)
    return acfg, plan, harness


def _motion_train_clips(cfg: RunConfig, base, harness):
    from .corpus import random_style
    from .motion import harness_clips

    style = random_style(harness.style_id, harness.style_seed)
    return harness_clips(style, harness, base.spec.size, base.spec.frames, cfg.seed)[0]


def cmd_motion_stage1(cfg: RunConfig, out: Path):
    from .motion import train_stage1_identity

    base = _checkpoint(cfg, "clip_base")
    acfg, plan, harness = _motion_parts(cfg)
    bank = train_stage1_identity(_motion_train_clips(cfg, base, harness), base, acfg, plan.stage1, out / "train")
    bank.save(out / "bank")


def cmd_motion_stage2(cfg: RunConfig, out: Path):
    from .motion import train_stage2_motion

    base = _checkpoint(cfg, "clip_base")
    stage1 = _bank(cfg, "stage1")
    acfg, plan, harness = _motion_parts(cfg)
    bank = train_stage2_motion(_motion_train_clips(cfg, base, harness), stage1, base, plan.sampler, acfg,
                               plan.stage2, out / "train")
    bank.save(out / "bank")


def cmd_ablate_mu(cfg: RunConfig, out: Path):
    from .motion import ablate_mu

    base = _checkpoint(cfg, "clip_base")
    _, _, harness = _motion_parts(cfg)
    seeds = [cfg.seed + k for k in range(cfg.ablate.seeds)]
    ablate_mu(cfg.ablate.mus, base, harness, seeds, out_dir=out)


def _planner(cfg: RunConfig):
    from .storyboard import HttpPlanner, StubPlanner

    return StubPlanner(cfg.seed) if cfg.story.planner == "stub" else HttpPlanner()


def cmd_story_plan(cfg: RunConfig, out: Path):
    from .storyboard import plan_storyboard

    board = plan_storyboard(cfg.story.description, cfg.story.n_shots, _planner(cfg))
    (out / "storyboard.json").write_text(board.to_json())


def cmd_story_render(cfg: RunConfig, out: Path):
    from .corpus import StyleSpec, describe_style
    from .storyboard import CharacterAssets, parse_storyboard, plan_storyboard, render_story

    st = cfg.story
    if st.storyboard:
        board = parse_storyboard(Path(st.storyboard).read_text())
    else:
        board = plan_storyboard(st.description, st.n_shots, _planner(cfg))
    (out / "storyboard.json").write_text(board.to_json())
    style_run = _input(cfg, "style")
    style = StyleSpec.from_dict(json.loads((style_run / "style.json").read_text()))
    assets = CharacterAssets(style=style, image_base=_checkpoint(cfg, "image_base"),
                             clip_base=_checkpoint(cfg, "clip_base"), style_bank=_bank(cfg, "style"),
                             motion_bank=_bank(cfg, "motion"), style_prompt=describe_style(style))
    render_story(board, assets, out / "story", cfg.seed, st.frames, parallel=st.parallel,
                 crop_factors=(st.close_up_factor, st.medium_factor))


def cmd_report(cfg: RunConfig, out: Path):
    from .report import emit_report

    runs = [Path(r) for r in cfg.report.runs]
    if not runs and run_root().exists():
        runs = sorted(p for p in run_root().iterdir() if p.is_dir() and p != out and not p.name.startswith("report-"))
    emit_report(runs, Path(cfg.report.out) if cfg.report.out else out)


HANDLERS = {
    ("corpus", "gen"): cmd_corpus_gen,
    ("base", "train"): cmd_base_train,
    ("style", "train"): cmd_style_train,
    ("style", "synth"): cmd_style_synth,
    ("style", "ablate"): cmd_style_ablate,
    ("motion", "stage1"): cmd_motion_stage1,
    ("motion", "stage2"): cmd_motion_stage2,
    ("ablate", "mu"): cmd_ablate_mu,
    ("story", "plan"): cmd_story_plan,
    ("story", "render"): cmd_story_render,
    ("report", None): cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairylab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"fairylab {__version__}")
    groups = parser.add_subparsers(dest="group", required=True)
    for group, subs in COMMANDS.items():
        g = groups.add_parser(group)
        targets = [g] if not subs else []
        if subs:
            sp = g.add_subparsers(dest="action", required=True)
            targets = [sp.add_parser(s) for s in subs]
        for t in targets:
            t.add_argument("-c", "--config", type=Path, help="YAML run configuration")
            t.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                           help="dotted-path override, e.g. --set style.steps=100")
            t.add_argument("--run-dir", type=Path, help="explicit output directory (default $RUN_DIR/<cmd>-<hash>)")
            t.add_argument("--planner", choices=("stub", "http"), help="shorthand for --set story.planner=...")
            t.add_argument("-v", "--verbose", action="store_true")
    return parser


def _artifacts(out: Path) -> list[str]:
    return sorted(p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file() and p.name != "run_manifest.json")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    action = getattr(args, "action", None)
    command = f"{args.group} {action}" if action else args.group
    overrides = list(args.overrides) + ([f"story.planner={args.planner}"] if args.planner else [])
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    out = args.run_dir or run_root() / run_id(command, cfg)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        HANDLERS[(args.group, action)](cfg, out)
    except MissingInputError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:
        from .diffusion import NonFiniteLossError
        from .storyboard import PlannerError, StoryboardError

        if isinstance(exc, (PlannerError, StoryboardError)):
            print(f"planner error: {exc}", file=sys.stderr)
            return EXIT_PLANNER
        if isinstance(exc, NonFiniteLossError):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        log.exception("run failed")
        return EXIT_FAILURE
    manifest = {
        "command": command,
        "run_id": out.name,
        "config": cfg.model_dump(mode="json"),
        "seeds": {"seed": cfg.seed},
        "code_version": code_version(),
        "wall_time": round(time.perf_counter() - start, 3),
        "artifacts": _artifacts(out),
    }
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(out)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
