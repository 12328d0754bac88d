"""Command-line surface: synth -> preprocess -> pretrain -> finetune ->
evaluate, plus embedding export and a parameter-count query.

Heavy imports happen inside command handlers so cheap commands (``params``)
stay fast. Exit codes: 0 ok, 2 configuration, 3 data, 4 numeric.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .config import (
    VARIANTS,
    ExperimentConfig,
    apply_overrides,
    derive_seed,
    load_config,
)
from .errors import ConfigurationError, DataError, UniFaultError, exit_code_for

log = logging.getLogger("unifault")

SEED_ENV_VAR = "UNIFAULT_SEED"


def _build_config(args: argparse.Namespace) -> ExperimentConfig:
    """File < env < flags precedence for the global seed; flags win elsewhere."""
    file_has_seed = False
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text())
        file_has_seed = "seed" in raw
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig()

    overrides: dict = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    elif not file_has_seed and os.environ.get(SEED_ENV_VAR):
        try:
            overrides["seed"] = int(os.environ[SEED_ENV_VAR])
        except ValueError as exc:
            raise ConfigurationError(f"{SEED_ENV_VAR} must be an integer: {exc}") from exc
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    if getattr(args, "threads", None):
        overrides["threads"] = args.threads
    if getattr(args, "data_root", None):
        overrides["data_root"] = args.data_root
    if getattr(args, "out_root", None):
        overrides["out_root"] = args.out_root
    if getattr(args, "epochs", None):
        overrides["pretrain_run.epochs"] = args.epochs
    if getattr(args, "mode", None):
        overrides["finetune_run.mode"] = args.mode
    if getattr(args, "no_fusion", False):
        overrides["pretrain_run.fusion_enabled"] = False
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def _prepare_run_dir(cfg: ExperimentConfig) -> Path:
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    return run_dir


def _data_dir(cfg: ExperimentConfig, run_dir: Path) -> Path:
    return Path(cfg.data_root) if cfg.data_root else run_dir / "data"


def _apply_threads(cfg: ExperimentConfig) -> None:
    if cfg.threads is not None:
        import torch

        torch.set_num_threads(cfg.threads)


def _load_layout(data_dir: Path) -> dict:
    path = data_dir / "benchmark.json"
    if not path.is_file():
        raise DataError(f"no benchmark layout at {path}; run `unifault synth` first")
    return json.loads(path.read_text())


def _window_rate(cfg: ExperimentConfig) -> float:
    return cfg.harmonize.target_length / cfg.harmonize.window_duration_s


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args: argparse.Namespace) -> int:
    from .synth import generate_benchmark

    cfg = _build_config(args)
    run_dir = _prepare_run_dir(cfg)
    data_dir = _data_dir(cfg, run_dir)
    layout = generate_benchmark(
        data_dir,
        seed=derive_seed(cfg.seed, f"synth:{cfg.synth.seed}"),
        recordings_scale=cfg.synth.recordings_scale,
        noise_scale=cfg.synth.noise_scale,
    )
    for domain in layout["domains"]:
        print(
            f"{domain['dataset_id']}: {domain['recordings']} recordings at "
            f"{domain['sample_rate_hz']:.0f} Hz, {domain['channels']} channel(s)"
        )
    print(f"target domain (excluded from pretraining): {layout['target_dataset']}")
    print(f"benchmark written to {data_dir}")
    return 0


def _harmonize_one(cfg: ExperimentConfig, data_dir: Path, domain: dict, ratios, emit_mc: bool):
    from .data import load_manifest
    from .harmonize import harmonize_dataset, split_dataset

    manifest = load_manifest(data_dir / domain["manifest"])
    split = split_dataset(manifest, ratios, derive_seed(cfg.seed, f"split:{manifest.dataset_id}"))
    root = data_dir / domain["root"]
    return manifest, harmonize_dataset(manifest, cfg.harmonize, split, root, emit_multichannel=emit_mc)


def cmd_preprocess(args: argparse.Namespace) -> int:
    from .config import SPLIT_NAMES
    from .corpus import write_corpus
    from .fusion import generate_fused_corpus

    cfg = _build_config(args)
    run_dir = _prepare_run_dir(cfg)
    data_dir = _data_dir(cfg, run_dir)
    layout = _load_layout(data_dir)
    domains = {d["dataset_id"]: d for d in layout["domains"]}

    merged_stats: dict = {}
    windows_by_split: dict[str, list] = {name: [] for name in SPLIT_NAMES}
    train_by_dataset: dict[str, list] = {}
    for ds in layout["pretrain_datasets"]:
        _, harmonized = _harmonize_one(cfg, data_dir, domains[ds], cfg.pretrain_split_ratios, False)
        merged_stats.update(harmonized.stats.groups)
        train_by_dataset[ds] = list(harmonized.splits["train"].windows)
        for name in SPLIT_NAMES:
            windows_by_split[name].extend(harmonized.splits[name].windows)

    raw_train = len(windows_by_split["train"])
    fused_count = 0
    if not args.no_fusion and cfg.fusion.fused_fraction > 0:
        fusion_cfg = dataclasses.replace(
            cfg.fusion, seed=derive_seed(cfg.seed, f"fusion:{cfg.fusion.seed}")
        )
        fused = generate_fused_corpus(train_by_dataset, fusion_cfg)
        windows_by_split["train"].extend(fused)
        fused_count = len(fused)

    from .harmonize import NormalizerStats

    pretrain_dir = run_dir / "corpus" / "pretrain"
    write_corpus(pretrain_dir, windows_by_split, _window_rate(cfg))
    stats = NormalizerStats(groups=merged_stats)
    (pretrain_dir / "stats.json").write_text(json.dumps(stats.to_dict(), indent=2))

    target_ds = layout["target_dataset"]
    _, target = _harmonize_one(cfg, data_dir, domains[target_ds], cfg.target_split_ratios, True)
    target_dir = run_dir / "corpus" / "target"
    write_corpus(
        target_dir,
        {name: list(target.splits[name].windows) for name in SPLIT_NAMES},
        _window_rate(cfg),
    )
    (target_dir / "stats.json").write_text(json.dumps(target.stats.to_dict(), indent=2))

    for name in SPLIT_NAMES:
        print(f"pretrain corpus {name}: {len(windows_by_split[name])} windows")
    print(f"fused windows: {fused_count} (of {raw_train} raw train windows)")
    for name in SPLIT_NAMES:
        print(f"target corpus {name}: {len(target.splits[name].windows)} windows")
    print(f"corpora written under {run_dir / 'corpus'}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    import hashlib

    from .corpus import read_corpus
    from .encoder import init_encoder
    from .pretrain import pretrain

    cfg = _build_config(args)
    _apply_threads(cfg)
    run_dir = _prepare_run_dir(cfg)
    corpus_dir = run_dir / "corpus" / "pretrain"
    windows = read_corpus(corpus_dir, split="train", provenance="raw")
    if cfg.pretrain_run.fusion_enabled:
        windows += read_corpus(corpus_dir, split="train", provenance="fused")
    if not windows:
        raise DataError(f"no training windows under {corpus_dir}; run `unifault preprocess`")

    model = init_encoder(
        cfg.encoder_config(), derive_seed(cfg.seed, f"init:{cfg.pretrain_run.seed}")
    )
    run_cfg = dataclasses.replace(
        cfg.pretrain_run,
        seed=derive_seed(cfg.seed, f"pretrain:{cfg.pretrain_run.seed}:{cfg.augment.seed}"),
    )
    out_dir = run_dir / "pretrain"
    pretrain(
        windows,
        model,
        cfg.contrastive,
        cfg.optimizer,
        cfg.schedule,
        run_cfg,
        cfg.augment,
        checkpoint_dir=out_dir,
        log_path=out_dir / "log.jsonl",
    )
    checkpoint = out_dir / "checkpoint.ufck"
    digest = hashlib.sha256(checkpoint.read_bytes()).hexdigest()
    print(f"pretrained on {len(windows)} windows ({cfg.pretrain_run.epochs} epochs)")
    print(f"checkpoint {checkpoint} sha256={digest[:16]}")
    return 0


def _load_backbone(cfg: ExperimentConfig, run_dir: Path, checkpoint_arg: str | None):
    from .encoder import load_checkpoint

    path = Path(checkpoint_arg) if checkpoint_arg else run_dir / "pretrain" / "checkpoint.ufck"
    if not path.is_file():
        raise DataError(f"no checkpoint at {path}; run `unifault pretrain`")
    return load_checkpoint(path), path


def _target_sets(cfg: ExperimentConfig, run_dir: Path):
    from .corpus import read_multichannel

    target_dir = run_dir / "corpus" / "target"
    if not (target_dir / "index.json").is_file():
        raise DataError(f"no target corpus under {target_dir}; run `unifault preprocess`")
    return (
        read_multichannel(target_dir, "train"),
        read_multichannel(target_dir, "validation"),
        read_multichannel(target_dir, "test"),
    )


def _target_num_classes(cfg: ExperimentConfig, run_dir: Path) -> int:
    from .data import load_manifest

    data_dir = _data_dir(cfg, run_dir)
    layout = _load_layout(data_dir)
    target = next(d for d in layout["domains"] if d["dataset_id"] == layout["target_dataset"])
    return len(load_manifest(data_dir / target["manifest"]).label_names)


def _save_adapter(head, path: Path) -> None:
    import numpy as np

    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        path,
        weight=head.linear.weight.detach().numpy(),
        bias=head.linear.bias.detach().numpy(),
    )


def _load_adapter(path: Path):
    import numpy as np
    import torch

    from .finetune import AdapterHead

    if not path.is_file():
        raise DataError(f"no adapter at {path}")
    blob = np.load(path)
    weight = blob["weight"]
    head = AdapterHead(weight.shape[1], weight.shape[0])
    with torch.no_grad():
        head.linear.weight.copy_(torch.from_numpy(weight))
        head.linear.bias.copy_(torch.from_numpy(blob["bias"]))
    return head


def cmd_finetune(args: argparse.Namespace) -> int:
    from .finetune import aggregate_metrics, evaluate, finetune, format_aggregate, sample_few_shot

    cfg = _build_config(args)
    _apply_threads(cfg)
    run_dir = _prepare_run_dir(cfg)
    model, _ = _load_backbone(cfg, run_dir, args.checkpoint)
    train_pool, val_set, test_set = _target_sets(cfg, run_dir)
    num_classes = _target_num_classes(cfg, run_dir)

    if args.kshot:
        ks = [int(k) for k in args.kshot.split(",")]
        specs = [
            (f"k{k}", dataclasses.replace(cfg.few_shot, mode="per_class_k", value=k)) for k in ks
        ]
    else:
        fs = cfg.few_shot
        specs = [(f"{fs.mode}_{fs.value:g}", fs)]

    for tag, spec in specs:
        per_seed = []
        for run_seed in cfg.finetune_run.seeds:
            sample_seed = derive_seed(cfg.seed, f"fewshot:{spec.seed}:{tag}:{run_seed}")
            subset = sample_few_shot(train_pool, dataclasses.replace(spec, seed=sample_seed))
            head, _, _ = finetune(
                model,
                subset,
                num_classes,
                cfg.finetune_run,
                cfg.optimizer,
                cfg.schedule,
                seed=derive_seed(cfg.seed, f"finetune:{tag}:{run_seed}"),
                val_set=val_set or None,
            )
            metrics = evaluate(model, head, test_set, num_classes, seed=run_seed)
            seed_dir = run_dir / "finetune" / tag / f"seed{run_seed}"
            seed_dir.mkdir(parents=True, exist_ok=True)
            (seed_dir / "metrics.json").write_text(json.dumps(metrics.to_dict(), indent=2))
            _save_adapter(head, seed_dir / "adapter.npz")
            per_seed.append(metrics)
            print(f"[{tag} seed {run_seed}] acc {metrics.accuracy:.4f} macro-F1 {metrics.macro_f1:.4f}")
        aggregate = aggregate_metrics(per_seed)
        group_dir = run_dir / "finetune" / tag
        (group_dir / "aggregate.json").write_text(json.dumps(aggregate, indent=2))
        report = format_aggregate(aggregate)
        (group_dir / "report.txt").write_text(report + "\n")
        print(f"[{tag}] {report}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    from .finetune import evaluate

    cfg = _build_config(args)
    _apply_threads(cfg)
    run_dir = _prepare_run_dir(cfg)
    model, _ = _load_backbone(cfg, run_dir, args.checkpoint)
    train_pool, val_set, test_set = _target_sets(cfg, run_dir)
    items = {"train": train_pool, "validation": val_set, "test": test_set}[args.split]
    head = _load_adapter(Path(args.adapter))
    metrics = evaluate(model, head, items, _target_num_classes(cfg, run_dir))
    out = run_dir / "evaluate" / f"metrics_{args.split}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(metrics.to_dict(), indent=2))
    print(f"acc {metrics.accuracy:.4f} macro-F1 {metrics.macro_f1:.4f} (n={metrics.n_eval})")
    print(f"metrics written to {out}")
    return 0


def cmd_export_embeddings(args: argparse.Namespace) -> int:
    from .corpus import read_corpus
    from .finetune import export_embeddings

    cfg = _build_config(args)
    _apply_threads(cfg)
    run_dir = _prepare_run_dir(cfg)
    model, _ = _load_backbone(cfg, run_dir, args.checkpoint)
    if args.corpus == "target":
        train_pool, val_set, test_set = _target_sets(cfg, run_dir)
        items = {"train": train_pool, "validation": val_set, "test": test_set}[args.split]
    else:
        items = read_corpus(run_dir / "corpus" / "pretrain", split=args.split)
    if not items:
        raise DataError(f"no {args.corpus}/{args.split} windows to export")
    out = Path(args.out) if args.out else run_dir / f"embeddings_{args.corpus}_{args.split}.csv"
    export_embeddings(model, items, out)
    print(f"wrote {len(items)} embedding rows to {out}")
    return 0


def cmd_params(args: argparse.Namespace) -> int:
    if args.variant:
        if args.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {args.variant!r}; pick from {sorted(VARIANTS)}")
        encoder_cfg = VARIANTS[args.variant]
        name = args.variant
    else:
        cfg = _build_config(args)
        encoder_cfg = cfg.encoder_config()
        name = cfg.variant
    print(f"{name}: {encoder_cfg.parameter_count()} parameters")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_common(parser: argparse.ArgumentParser, needs_config: bool = True) -> None:
    parser.add_argument("--config", help="experiment config (JSON)", required=False)
    parser.add_argument("--seed", type=int, help="global seed override")
    parser.add_argument("--threads", type=int, help="cap worker/thread count")
    parser.add_argument("--data-root", dest="data_root", help="override data_root")
    parser.add_argument("--out-root", dest="out_root", help="override out_root")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unifault",
        description="Harmonize vibration corpora, pretrain contrastively, evaluate few-shot.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic multi-domain benchmark")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="harmonize datasets and generate fused windows")
    _add_common(p)
    p.add_argument("--no-fusion", action="store_true", help="skip fused-sample generation")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain", help="contrastive pretraining of the encoder")
    _add_common(p)
    p.add_argument("--variant", choices=sorted(VARIANTS) + ["custom"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-fusion", action="store_true", help="exclude fused windows from training")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="few-shot fine-tune + evaluate over seeds")
    _add_common(p)
    p.add_argument("--checkpoint", help="backbone checkpoint path")
    p.add_argument("--kshot", help="comma-separated K values, e.g. 1,5,10")
    p.add_argument("--mode", choices=["head_only", "full"])
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("evaluate", help="evaluate a saved adapter on a target split")
    _add_common(p)
    p.add_argument("--checkpoint", help="backbone checkpoint path")
    p.add_argument("--adapter", required=True, help="adapter .npz written by finetune")
    p.add_argument("--split", default="test", choices=["train", "validation", "test"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-embeddings", help="dump pooled embeddings as CSV")
    _add_common(p)
    p.add_argument("--checkpoint", help="backbone checkpoint path")
    p.add_argument("--corpus", default="target", choices=["target", "pretrain"])
    p.add_argument("--split", default="test", choices=["train", "validation", "test"])
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("params", help="print the parameter count for a variant or config")
    _add_common(p)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.set_defaults(func=cmd_params)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UniFaultError as exc:
        log.error("%s", exc)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
