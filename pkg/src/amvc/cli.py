"""Command-line driver: dataset generation, training, evaluation, mask export.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 training
divergence. The effective configuration (file plus --set overrides) is echoed
to the run directory as JSON before any work starts.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

# Canonical flat configuration schema: key -> (type, default).
CONFIG_SCHEMA: dict[str, tuple[type, object]] = {
    "data.gamma": (float, 0.8),
    "data.n_per_class": (int, 200),
    "data.test_fraction": (float, 0.2),
    "data.frames": (int, 16),
    "data.spatial": (int, 32),
    "data.speed": (float, 2.0),
    "data.target_seed_offset": (int, 1),
    "data.imbalance": (float, 0.0),
    "model.clip_frames": (int, 16),
    "model.channels": (int, 3),
    "model.spatial": (int, 32),
    "model.tubelet_frames": (int, 2),
    "model.tubelet_size": (int, 8),
    "model.embed_dim": (int, 64),
    "model.depth": (int, 4),
    "model.heads": (int, 4),
    "model.mlp_ratio": (int, 4),
    "model.d_hidden": (int, 64),
    "model.k_classes": (int, 8),
    "model.unet_depth": (int, 4),
    "model.unet_base_channels": (int, 8),
    "train.lr": (float, 1e-4),
    "train.d_lr": (float, 1e-3),
    "train.m_lr": (float, 0.0),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.eps": (float, 1e-8),
    "train.weight_decay": (float, 0.05),
    "train.batch_size": (int, 8),
    "train.grl_lambda": (float, 1.0),
    "train.grl_ramp_steps": (int, 0),
    "train.keep_ratio": (float, 0.5),
    "train.encoder_steps": (int, 100),
    "train.generator_steps": (int, 20),
    "train.total_steps": (int, 2000),
    "train.tau": (float, 0.0),
    "train.add_supervised": (bool, False),
    "train.debug_ones_masks": (bool, False),
    "run.seed": (int, 0),
    "run.threads": (int, 1),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # exit code 1, not argparse's default 2
        raise UsageError(message)


def _parse_value(key: str, raw: str):
    typ, _ = CONFIG_SCHEMA[key]
    raw = raw.strip()
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise UsageError(f"config key {key} expects a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise UsageError(f"config key {key} expects {typ.__name__}, got {raw!r}") from exc


def load_config(config_path: str | None, overrides: list[str]) -> dict:
    """Defaults, then the flat key=value file, then --set overrides."""
    cfg = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}

    def apply(key: str, raw: str, origin: str) -> None:
        if key not in CONFIG_SCHEMA:
            raise UsageError(f"unknown config key {key!r} ({origin})")
        cfg[key] = _parse_value(key, raw)

    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise UsageError(f"config file not found: {config_path}")
        for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"config file line {ln} is not key=value: {line!r}")
            key, raw = line.split("=", 1)
            apply(key.strip(), raw, f"{config_path}:{ln}")
    for item in overrides or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        apply(key.strip(), raw, "--set")
    return cfg


def _echo_config(cfg: dict, out_dir: Path, extra: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = dict(cfg)
    payload.update(extra)
    (out_dir / "effective_config.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _resolve_threads(args, cfg: dict) -> int:
    if getattr(args, "threads", None) is not None:
        return args.threads
    env = os.environ.get("AMVC_THREADS")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"AMVC_THREADS must be an integer, got {env!r}") from exc
    return int(cfg["run.threads"])


def _pin_threads(n: int) -> None:
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=n)
    except ImportError:  # pragma: no cover
        pass


def _train_config(cfg: dict, seed: int, out_dir: Path, stage: int):
    from .train import TrainConfig

    return TrainConfig(
        stage=stage,
        lr=cfg["train.lr"],
        d_lr=cfg["train.d_lr"] or None,
        m_lr=cfg["train.m_lr"] or None,
        beta1=cfg["train.beta1"],
        beta2=cfg["train.beta2"],
        eps=cfg["train.eps"],
        weight_decay=cfg["train.weight_decay"],
        batch_size=cfg["train.batch_size"],
        grl_lambda=cfg["train.grl_lambda"],
        grl_ramp_steps=cfg["train.grl_ramp_steps"],
        keep_ratio=cfg["train.keep_ratio"],
        encoder_steps=cfg["train.encoder_steps"],
        generator_steps=cfg["train.generator_steps"],
        total_steps=cfg["train.total_steps"],
        seed=seed,
        tau=cfg["train.tau"],
        k_classes=cfg["model.k_classes"],
        d_hidden=cfg["model.d_hidden"],
        clip_frames=cfg["model.clip_frames"],
        channels=cfg["model.channels"],
        spatial=cfg["model.spatial"],
        tubelet_frames=cfg["model.tubelet_frames"],
        tubelet_size=cfg["model.tubelet_size"],
        embed_dim=cfg["model.embed_dim"],
        depth=cfg["model.depth"],
        heads=cfg["model.heads"],
        mlp_ratio=cfg["model.mlp_ratio"],
        unet_depth=cfg["model.unet_depth"],
        unet_base_channels=cfg["model.unet_base_channels"],
        add_supervised=cfg["train.add_supervised"],
        debug_ones_masks=cfg["train.debug_ones_masks"],
        metrics_path=str(out_dir / "metrics.jsonl"),
        checkpoint_path=str(out_dir / "checkpoint.amvc"),
    )


def _cmd_gen_data(args, cfg: dict, seed: int) -> int:
    from .data import DomainSpec, default_classes, generate_dataset

    out_dir = Path(args.out)
    _echo_config(cfg, out_dir, {"command": "gen-data", "seed": seed})
    classes = default_classes(speed=cfg["data.speed"])
    for name, dom_seed in (("source", seed), ("target", seed + cfg["data.target_seed_offset"])):
        dom = DomainSpec.make(name, cfg["data.gamma"])
        manifest = generate_dataset(
            dom,
            classes,
            cfg["data.n_per_class"],
            dom_seed,
            out_dir / name,
            test_fraction=cfg["data.test_fraction"],
            frames=cfg["data.frames"],
            size=cfg["data.spatial"],
            imbalance=cfg["data.imbalance"],
        )
        print(f"wrote {len(manifest.records)} {name} clips under {out_dir / name}")
    return 0


def _cmd_train_stage1(args, cfg: dict, seed: int) -> int:
    from .data import Manifest
    from .train import stage1_train

    out_dir = Path(args.out)
    _echo_config(
        cfg,
        out_dir,
        {
            "command": "train-stage1",
            "seed": seed,
            "source_manifest": str(Path(args.source_manifest).resolve()),
            "target_manifest": str(Path(args.target_manifest).resolve()),
        },
    )
    source = Manifest.load(args.source_manifest)
    target = Manifest.load(args.target_manifest)
    source.validate()
    target.validate()
    config = _train_config(cfg, seed, out_dir, stage=1)
    _, metrics = stage1_train(config, source, target)
    last = metrics[-1]
    print(json.dumps({"steps": len(metrics), "final": {k: last[k] for k in ("step", "phase", "l_s", "l_d_masked")}}))
    return 0


def _cmd_train_stage2(args, cfg: dict, seed: int) -> int:
    from .data import Manifest
    from .train import stage2_train

    out_dir = Path(args.out)
    _echo_config(
        cfg,
        out_dir,
        {
            "command": "train-stage2",
            "seed": seed,
            "target_manifest": str(Path(args.target_manifest).resolve()),
            "stage1_checkpoint": str(Path(args.checkpoint).resolve()),
        },
    )
    target = Manifest.load(args.target_manifest)
    target.validate()
    source = None
    if args.source_manifest:
        source = Manifest.load(args.source_manifest)
        source.validate()
    config = _train_config(cfg, seed, out_dir, stage=2)
    _, metrics = stage2_train(config, target, stage1_checkpoint=args.checkpoint, source_manifest=source)
    last = metrics[-1]
    print(json.dumps({"steps": len(metrics), "final": {k: last[k] for k in ("step", "phase", "l_c_masked")}}))
    return 0


def _cmd_eval(args, cfg: dict, seed: int) -> int:
    from .checkpoint import load_checkpoint
    from .data import Manifest
    from .train import evaluate

    manifest = Manifest.load(args.manifest)
    manifest.validate()
    bundle = load_checkpoint(args.checkpoint)
    report = evaluate(bundle, manifest, split=args.split, with_domain_probe=args.probe, probe_seed=seed)
    payload = {
        "accuracy": report.accuracy,
        "per_class": {str(k): v for k, v in report.per_class.items()},
        "n": report.n,
        "domain_probe_accuracy": report.domain_probe_accuracy,
        "split": args.split,
    }
    if args.out:
        _echo_config(cfg, Path(args.out), {"command": "eval", "seed": seed})
        (Path(args.out) / "eval.json").write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    print(json.dumps(payload, sort_keys=True))
    return 0


def _write_pgm(path: Path, image: "np.ndarray") -> None:
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def _cmd_export_masks(args, cfg: dict, seed: int) -> int:
    import numpy as np

    from .autodiff import Tensor, no_grad
    from .checkpoint import load_checkpoint
    from .data import Manifest, load_clip
    from .models import generate_mask

    out_dir = Path(args.out)
    _echo_config(cfg, out_dir, {"command": "export-masks", "seed": seed})
    bundle = load_checkpoint(args.checkpoint)
    clip_paths: list[Path] = [Path(p) for p in args.clips or []]
    if args.manifest:
        manifest = Manifest.load(args.manifest)
        recs = manifest.select(split=args.split)[: args.limit]
        clip_paths.extend(manifest.abs_path(r) for r in recs)
    if not clip_paths:
        raise UsageError("export-masks needs --clips or --manifest")
    rho = cfg["train.keep_ratio"]
    written = 0
    for cp in clip_paths:
        clip = load_clip(cp)
        with no_grad():
            mask = generate_mask(Tensor(clip[None]), bundle.mask_generator, rho)
        values = mask.values.data[0]  # (frames, h, w) in [0, 1]
        quantized = np.floor(values * 255.0 + 0.5).astype(np.uint8)  # round half up
        stem = cp.stem
        for t in range(quantized.shape[0]):
            _write_pgm(out_dir / f"{stem}_{t:03d}.pgm", quantized[t])
            written += 1
    print(f"wrote {written} mask frames to {out_dir}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="amvc", description="Masked adversarial video domain adaptation, desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: _Parser) -> None:
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--threads", type=int, help="BLAS/OpenMP thread count (AMVC_THREADS fallback)")

    p = sub.add_parser("gen-data", help="generate the synthetic two-domain benchmark")
    common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-stage1", help="adversarial domain alignment (encoder vs mask generator)")
    common(p)
    p.add_argument("--source-manifest", required=True)
    p.add_argument("--target-manifest", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-stage2", help="masked consistency fine-tuning from a stage-1 checkpoint")
    common(p)
    p.add_argument("--target-manifest", required=True)
    p.add_argument("--checkpoint", required=True, help="stage-1 checkpoint")
    p.add_argument("--source-manifest", help="needed only with train.add_supervised=true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="top-1 accuracy (and optional domain probe) on a manifest split")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--probe", action="store_true", help="also fit a linear domain probe")
    p.add_argument("--out")

    p = sub.add_parser("export-masks", help="run the frozen generator and write per-frame PGM masks")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clips", nargs="*", help="clip files to mask")
    p.add_argument("--manifest", help="take clips from a manifest instead")
    p.add_argument("--split", default="test")
    p.add_argument("--limit", type=int, default=8)
    p.add_argument("--out", required=True)
    return parser


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train-stage1": _cmd_train_stage1,
    "train-stage2": _cmd_train_stage2,
    "eval": _cmd_eval,
    "export-masks": _cmd_export_masks,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config, args.overrides)
        seed = args.seed if args.seed is not None else cfg["run.seed"]
        _pin_threads(_resolve_threads(args, cfg))
        return _HANDLERS[args.command](args, cfg, seed)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        from .errors import ConfigError, DataFormatError, DivergenceError

        if isinstance(exc, DivergenceError):
            print(
                f"divergence: {exc} (phase={exc.phase}, step={exc.step}, batch={exc.batch_index})",
                file=sys.stderr,
            )
            return 3
        if isinstance(exc, (DataFormatError, ConfigError)):
            print(f"data error: {exc}", file=sys.stderr)
            return 2
        raise


def entry() -> None:  # console-script shim
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
