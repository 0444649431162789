"""Command-line entry point wiring the pipeline stages together.

Stages communicate only through on-disk artifacts (manifests, image and
embedding files, checkpoints), so any stage can be re-run in isolation:

    sslprof synth     --config synth.json --out data/
    sslprof train     --config train.json --manifest data/manifest.jsonl --out run/
    sslprof embed     --checkpoint run/checkpoint_epoch_030.cpck \\
                      --manifest data/manifest.jsonl --out emb/fluor
    sslprof aggregate --cls emb/fluor_cls.cpem --patch emb/fluor_patch.cpem \\
                      --out wells_fluor.cpem
    sslprof align     --embeddings wells.cpem --alpha 0.5 --out aligned.cpem
    sslprof fuse      --fluor wf.cpem --bright wb.cpem --out fused.cpem
    sslprof evaluate  --embeddings fused.cpem --labels data/manifest.jsonl \\
                      --out report.json
    sslprof report    --evals base=r0.json full=r1.json --out report/

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import dataio, evaluate, postprocess, synthgen, trainer
from .errors import SslprofError, ValidationError


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError(f"config {path} must hold a JSON object")
    return data


def _merged(config: dict, args: argparse.Namespace, names: list[str]) -> dict:
    """Config values overridden by explicitly provided CLI flags."""
    out = dict(config)
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    return out


def _cmd_synth(args) -> int:
    cfg_dict = _merged(
        _load_config(args.config),
        args,
        [
            "n_cell_lines",
            "n_plates_per_line",
            "n_well_positions",
            "n_perturbations",
            "sites_per_well",
            "seed",
            "nuisance_strength",
        ],
    )
    if "image_size" in cfg_dict:
        cfg_dict["image_size"] = tuple(cfg_dict["image_size"])
    names = {f.name for f in dataclasses.fields(synthgen.SynthConfig)}
    unknown = set(cfg_dict) - names
    if unknown:
        raise ValidationError(f"unknown synth config keys: {sorted(unknown)}")
    cfg = synthgen.SynthConfig(**cfg_dict)
    cfg.validate()
    if args.dry_run:
        print(f"synth config valid; would write dataset under {args.out}")
        return 0
    manifest = synthgen.generate_dataset(cfg, args.out)
    print(f"wrote {len(manifest.records)} records under {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg_dict = _load_config(args.config)
    for name in ("epochs", "batch_size", "base_lr", "seed", "channel_set"):
        value = getattr(args, name, None)
        if value is not None:
            cfg_dict[name] = value
    if args.out is not None:
        cfg_dict["out_dir"] = args.out
    cfg = trainer.train_config_from_dict(cfg_dict)
    cfg.validate()
    manifest = dataio.load_manifest(args.manifest)
    if args.dry_run:
        print(f"train config valid; would write to {cfg.out_dir}")
        return 0
    ckpt = trainer.train(manifest, cfg)
    print(f"checkpoint: {ckpt}")
    return 0


def _cmd_embed(args) -> int:
    config = _merged(_load_config(args.config), args, ["channel_set", "batch_size"])
    manifest = dataio.load_manifest(args.manifest)
    if args.dry_run:
        print(f"would embed {args.manifest} with {args.checkpoint}")
        return 0
    site = trainer.embed_dataset(
        args.checkpoint,
        manifest,
        channel_set=config.get("channel_set"),
        batch_size=int(config.get("batch_size", 64)),
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.write_embeddings(site.cls, f"{out}_cls.cpem")
    dataio.write_embeddings(site.patch_mean, f"{out}_patch.cpem")
    print(f"wrote {out}_cls.cpem and {out}_patch.cpem ({len(site.cls.keys)} sites)")
    return 0


def _cmd_aggregate(args) -> int:
    config = _merged(_load_config(args.config), args, ["site_repr", "merge"])
    site_repr = config.get("site_repr", "concat")
    merge = config.get("merge", "concat")
    if args.dry_run:
        print(f"would aggregate {args.cls} (site_repr={site_repr}, merge={merge})")
        return 0
    cls_table = dataio.read_embeddings(args.cls)
    patch_table = dataio.read_embeddings(args.patch) if args.patch else None
    wells = postprocess.aggregate_wells(
        cls_table, patch_table, site_repr=site_repr, merge=merge
    )
    dataio.write_embeddings(wells, args.out)
    print(f"wrote {args.out} ({len(wells.keys)} wells, dim {wells.vectors.shape[1]})")
    return 0


def _cmd_align(args) -> int:
    config = _merged(_load_config(args.config), args, ["alpha"])
    cfg = postprocess.AlignmentConfig(alpha_align=float(config.get("alpha", 0.5)))
    if args.dry_run:
        print(f"would align {args.embeddings} with alpha={cfg.alpha_align}")
        return 0
    table = dataio.read_embeddings(args.embeddings)
    aligned = postprocess.cross_plate_align(table, cfg)
    dataio.write_embeddings(aligned, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_fuse(args) -> int:
    if args.dry_run:
        print(f"would fuse {args.fluor} with {args.bright}")
        return 0
    fluor = dataio.read_embeddings(args.fluor)
    bright = dataio.read_embeddings(args.bright)
    fused = postprocess.fuse_channel_models(fluor, bright)
    dataio.write_embeddings(fused, args.out)
    print(f"wrote {args.out} (dim {fused.vectors.shape[1]})")
    return 0


def _cmd_evaluate(args) -> int:
    config = _merged(
        _load_config(args.config), args, ["k", "metric", "n_folds", "seed", "mode"]
    )
    names = {f.name for f in dataclasses.fields(evaluate.EvalConfig)}
    unknown = set(config) - names
    if unknown:
        raise ValidationError(f"unknown evaluate config keys: {sorted(unknown)}")
    cfg = evaluate.EvalConfig(**config)
    if args.dry_run:
        print(f"evaluate config valid for {args.embeddings}")
        return 0
    table = dataio.read_embeddings(args.embeddings)
    manifest = dataio.load_manifest(args.labels)
    site_table = (
        dataio.read_embeddings(args.site_embeddings) if args.site_embeddings else None
    )
    report = evaluate.evaluate_wells(table, manifest, cfg, site_table=site_table)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2))
    print(f"wrote {out}; mean within-line accuracy {report.mean_accuracy:.4f}")
    if args.plots:
        _emit_eval_plots(report, Path(args.plots))
    return 0


def _emit_eval_plots(report: evaluate.EvalReport, out_dir: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not installed; skipping plots", file=sys.stderr)
        return
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 3))
    accs = report.fold_accuracies
    ax.bar(range(len(accs)), accs)
    ax.set_xlabel("fold")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(out_dir / "fold_accuracies.png", dpi=120)
    plt.close(fig)


def _parse_named(pairs: list[str]) -> list[tuple[str, Path]]:
    out = []
    for pair in pairs:
        if "=" not in pair:
            raise ValidationError(f"expected NAME=PATH, got {pair!r}")
        name, path = pair.split("=", 1)
        out.append((name, Path(path)))
    return out


def _cmd_report(args) -> int:
    evals = _parse_named(args.evals or [])
    metrics = _parse_named(args.metrics or [])
    if args.dry_run:
        print(f"would render {len(evals)} eval(s) and {len(metrics)} metric log(s)")
        return 0
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    lines = ["# Pipeline report", "", "## Ablation", ""]
    lines.append("| variant | within-line accuracy | delta | cross-line (mean) | intra-well cosine |")
    lines.append("|---|---|---|---|---|")
    prev = None
    for name, path in evals:
        data = json.loads(path.read_text())
        acc = data.get("mean_accuracy", 0.0)
        cross = data.get("cross_line") or {}
        cross_mean = sum(cross.values()) / len(cross) if cross else float("nan")
        intra = data.get("diagnostics", {}).get("intra_well_cosine", float("nan"))
        delta = "" if prev is None else f"{acc - prev:+.3f}"
        lines.append(
            f"| {name} | {acc:.3f} | {delta} | {cross_mean:.3f} | {intra:.3f} |"
        )
        prev = acc
    lines.append("")

    plotted = _plot_metrics(metrics, out_dir)
    if metrics:
        lines.append("## Training losses")
        lines.append("")
        for name, path in metrics:
            steps, totals = _read_metric_series(path)
            if totals:
                lines.append(
                    f"- {name}: {len(totals)} steps, total {totals[0]:.3f} -> {totals[-1]:.3f}"
                )
        if plotted:
            lines.append("")
            lines.append("![loss curves](loss_curves.png)")
        lines.append("")

    consistency = [
        (name, json.loads(path.read_text()).get("diagnostics", {}).get("intra_well_cosine"))
        for name, path in evals
    ]
    consistency = [(n, v) for n, v in consistency if v is not None]
    if _plot_consistency(consistency, out_dir):
        lines.append("![intra-well consistency](intra_well_consistency.png)")
        lines.append("")

    (out_dir / "report.md").write_text("\n".join(lines))
    print(f"wrote {out_dir / 'report.md'}")
    return 0


def _read_metric_series(path: Path) -> tuple[list[int], list[float]]:
    steps, totals = [], []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        steps.append(obj["step"])
        totals.append(obj["total"])
    return steps, totals


def _plot_consistency(points: list[tuple[str, float]], out_dir: Path) -> bool:
    if not points:
        return False
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    names = [n for n, _ in points]
    values = [v for _, v in points]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(range(len(values)), values, marker="o")
    ax.set_xticks(range(len(names)), names, rotation=20, ha="right")
    ax.set_ylabel("intra-well cosine")
    fig.tight_layout()
    fig.savefig(out_dir / "intra_well_consistency.png", dpi=120)
    plt.close(fig)
    return True


def _plot_metrics(metrics: list[tuple[str, Path]], out_dir: Path) -> bool:
    if not metrics:
        return False
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not installed; skipping plots", file=sys.stderr)
        return False
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, path in metrics:
        steps, totals = _read_metric_series(path)
        ax.plot(steps, totals, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("total loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "loss_curves.png", dpi=120)
    plt.close(fig)
    return True


def build_parser() -> _Parser:
    parser = _Parser(prog="sslprof", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--dry-run", action="store_true", help="validate without writing")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-cell-lines", dest="n_cell_lines", type=int)
    p.add_argument("--n-plates-per-line", dest="n_plates_per_line", type=int)
    p.add_argument("--n-well-positions", dest="n_well_positions", type=int)
    p.add_argument("--n-perturbations", dest="n_perturbations", type=int)
    p.add_argument("--sites-per-well", dest="sites_per_well", type=int)
    p.add_argument("--nuisance-strength", dest="nuisance_strength", type=float)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train one channel model")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--base-lr", dest="base_lr", type=float)
    p.add_argument("--channel-set", dest="channel_set")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("embed", help="extract per-site embeddings")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output prefix for _cls/_patch tables")
    p.add_argument("--channel-set", dest="channel_set")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("aggregate", help="merge site embeddings into well vectors")
    common(p)
    p.add_argument("--cls", required=True)
    p.add_argument("--patch")
    p.add_argument("--site-repr", dest="site_repr", choices=["concat", "cls"])
    p.add_argument("--merge", choices=["concat", "average"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_aggregate)

    p = sub.add_parser("align", help="cross-plate alignment of well vectors")
    common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_align)

    p = sub.add_parser("fuse", help="concatenate channel-model well tables")
    common(p)
    p.add_argument("--fluor", required=True)
    p.add_argument("--bright", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("evaluate", help="kNN evaluation of well vectors")
    common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--labels", required=True, help="manifest providing labels")
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--metric", choices=list(evaluate.METRICS))
    p.add_argument("--n-folds", dest="n_folds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=list(evaluate.MODES))
    p.add_argument("--site-embeddings", dest="site_embeddings")
    p.add_argument("--plots")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("report", help="render metrics and evals to markdown")
    common(p)
    p.add_argument("--evals", nargs="*", help="NAME=eval_report.json, in table order")
    p.add_argument("--metrics", nargs="*", help="NAME=metrics.jsonl")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (SslprofError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
