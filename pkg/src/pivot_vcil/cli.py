"""Command line entry point: ``run``, ``build-cache``, ``report`` and ``selftest``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from .core import VARIANTS, ConfigError, ExperimentConfig

CACHE_ENV = "PIVOT_CACHE_DIR"
PROFILES = ("synthetic", "vit-b32")


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults < environment < config file < flags."""
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if cfg.cache_dir is None and os.environ.get(CACHE_ENV):
        changes["cache_dir"] = os.environ[CACHE_ENV]
    if args.variant is not None:
        changes["variant"] = args.variant
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.cache is not None:
        changes["cache_dir"] = args.cache
    return cfg.replace(**changes) if changes else cfg


def cmd_run(args) -> int:
    from .harness import emit_report, run_experiment

    cfg = resolve_config(args)
    rec = run_experiment(cfg)
    out = Path(args.out or f"runs/{cfg.variant}_seed{cfg.seed}")
    emit_report(rec, out)
    bwf = "n/a" if rec.bwf is None else f"{rec.bwf:.4f}"
    print(f"{cfg.variant} seed={cfg.seed} Acc={rec.acc:.4f} BWF={bwf} -> {out}")
    return 0


def _profile_encoder(name: str, seed: int):
    if name == "synthetic":
        from .encoders import SyntheticSpatialEncoder, synthetic_profile

        d = ExperimentConfig().dims
        return SyntheticSpatialEncoder(synthetic_profile(d.L, d.D_in, d.D_m), seed=seed)
    from .encoders import ClipSpatialEncoder

    return ClipSpatialEncoder.from_pretrained()


def cmd_build_cache(args) -> int:
    from .encoders import build_cache
    from .harness import read_frame_directory

    data, out = Path(args.data), Path(args.out)
    encoder = _profile_encoder(args.profile, args.seed)
    splits = [s for s in ("train", "eval") if (data / s).is_dir()]
    names = None
    for split in splits or [""]:
        samples, names = read_frame_directory(data / split, args.frames, split or "eval", args.seed, names)
        info = build_cache(samples, out / split, encoder)
        print(f"cached {info['header']['count']} videos -> {out / split}")
    return 0


def cmd_report(args) -> int:
    from .harness import emit_report, load_record

    dirs: List[Path] = []
    for d in map(Path, args.inputs):
        dirs += [d] if (d / "results.json").exists() else sorted(p.parent for p in d.rglob("results.json"))
    if not dirs:
        raise ConfigError("no results.json found under the given inputs")
    records = [load_record(d) for d in dirs]
    written = emit_report(records if len(records) > 1 else records[0], args.out)
    for r in records:
        bwf = "n/a" if r.bwf is None else f"{r.bwf:.4f}"
        print(f"{r.config['variant']:<26} seed={r.seed:<4} Acc={r.acc:.4f} BWF={bwf}")
    print(f"wrote {len(written)} report entries -> {args.out}")
    return 0


def cmd_selftest(args) -> int:
    from . import selftest

    return selftest.main(verbose=not args.quiet)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pivot-vcil", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-task progress")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate one task stream")
    run.add_argument("--config", type=Path, help="flat YAML config")
    run.add_argument("--variant", choices=VARIANTS)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", type=Path)
    run.add_argument("--cache", help=f"token cache directory (default: ${CACHE_ENV})")
    run.set_defaults(func=cmd_run)

    bc = sub.add_parser("build-cache", help="encode a frame directory once into a token cache")
    bc.add_argument("--data", required=True, help="root with <class>/<video>/<frames> (optionally under train/ eval/)")
    bc.add_argument("--out", required=True)
    bc.add_argument("--profile", choices=PROFILES, default="vit-b32")
    bc.add_argument("--frames", type=int, default=8, help="frames sampled per video")
    bc.add_argument("--seed", type=int, default=0)
    bc.set_defaults(func=cmd_build_cache)

    rep = sub.add_parser("report", help="collect result directories into summary files")
    rep.add_argument("--in", dest="inputs", nargs="+", required=True)
    rep.add_argument("--out", required=True)
    rep.set_defaults(func=cmd_report)

    st = sub.add_parser("selftest", help="run the oracle and invariant checks")
    st.add_argument("-q", "--quiet", action="store_true")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
