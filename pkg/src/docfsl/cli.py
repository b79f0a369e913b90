"""Command-line entry point: ``docfsl {ingest,train,eval,report,patch-dump}``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .config import TrainConfig, config_from_sections, dump_config, load_config
from .dataset import (
    DocumentSample,
    Label,
    MetaSplit,
    load_image,
    load_manifests,
    repetition_plan,
    write_manifest,
    write_split_plan,
)
from .errors import CompatibilityError, ConfigError, DataError, DocFSLError
from .fsl import Mode
from .patching import document_patches
from .recurrent import read_tensor_file
from .training import (
    REPORT_SCHEMA,
    EvalReport,
    aggregate_repetitions,
    build_encoder,
    build_extractor,
    evaluate_run,
    final_report,
    load_model,
    save_model,
    train_run,
)

log = logging.getLogger("docfsl")

RUN_MANIFEST_SCHEMA = "docfsl.run-manifest/1"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _ref_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HEIGHTxWIDTH, got {text!r}")


def _mode(text: str) -> Mode:
    try:
        return Mode.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def _add_model_flags(p: argparse.ArgumentParser, training: bool) -> None:
    g = p.add_argument_group("overrides (win over the config file)")
    g.add_argument("--mode", type=_mode, help="c-fsl | u-fsl")
    g.add_argument("--k", type=int, help="support shots per label")
    g.add_argument("--q", type=int, help="query shots per label")
    g.add_argument("--seed", type=int)
    g.add_argument("--backbone", choices=["efficientnet_b3", "resnet50", "vit_s16", "transfg", "mock"])
    g.add_argument("--backbone-file", type=str)
    g.add_argument("--feature-dim", type=int, help="mock backbone width")
    g.add_argument("--backbone-seed", type=int)
    g.add_argument("--no-rescale", action="store_true", help="keep native resolution (variable-length sequences)")
    g.add_argument("--patch-size", type=int)
    g.add_argument("--ref-size", type=_ref_size, help="reference HEIGHTxWIDTH for rescaling")
    if training:
        g.add_argument("--head", choices=["prototype", "nearest_support"])
        g.add_argument("--episodes", type=int)
        g.add_argument("--eval-every", type=int)
        g.add_argument("--eval-episodes", type=int)
        g.add_argument("--lr", type=float)
        g.add_argument("--ru", choices=["rnn", "lstm", "gru"])
        g.add_argument("--hidden-dim", type=int)
        g.add_argument("--finetune-backbone", action="store_true")
        g.add_argument("--n-train", type=int)
        g.add_argument("--repetitions", type=int)
    else:
        g.add_argument("--episodes", type=int, help="evaluation episodes")


def _overrides(args) -> dict:
    o = {
        "mode": args.mode, "k": args.k, "q": args.q, "seed": args.seed,
        "backbone": args.backbone, "backbone_file": args.backbone_file,
        "feature_dim": args.feature_dim, "backbone_seed": args.backbone_seed,
        "patch_size": args.patch_size,
    }
    if args.no_rescale:
        o["rescale"] = False
    if args.ref_size:
        o["ref_height"], o["ref_width"] = args.ref_size
    if hasattr(args, "hidden_dim"):
        o.update({
            "head": args.head, "episodes": args.episodes, "eval_every": args.eval_every,
            "eval_episodes": args.eval_episodes, "lr": args.lr, "ru_kind": args.ru,
            "hidden_dim": args.hidden_dim, "n_train": args.n_train, "repetitions": args.repetitions,
        })
        if args.finetune_backbone:
            o["frozen"] = False
    else:
        o["eval_episodes"] = args.episodes
    return o


def _apply_overrides(base: TrainConfig, args) -> TrainConfig:
    cfg = base.replace(**_overrides(args))
    if cfg.backbone != "mock" and args.feature_dim is None:
        # a mock width from the file must not leak onto a real backbone
        cfg = dataclasses.replace(cfg, feature_dim=None)
    return cfg.validate()


def _check_manifests(paths) -> list[Path]:
    missing = [str(p) for p in paths if not Path(p).is_file()]
    if missing:
        raise ConfigError([f"manifest not found: {m}" for m in missing])
    return [Path(p).resolve() for p in paths]


# -- ingest ----------------------------------------------------------------

def cmd_ingest(args) -> int:
    paths = _check_manifests(args.manifest)
    index = load_manifests(paths)
    out = {"n_samples": len(index), "meta_classes": index.summary(), "datasets": list(index.dataset_ids)}
    if args.out:
        write_manifest(index, args.out)
        out["normalized_manifest"] = str(args.out)
    if args.split_plan:
        plan = repetition_plan(index, args.repetitions, args.n_train, args.seed)
        write_split_plan(plan, args.split_plan)
        out["split_plan"] = str(args.split_plan)
    print(json.dumps(out, indent=2, sort_keys=True))
    return EXIT_OK


# -- train -----------------------------------------------------------------

def _train_config(args) -> TrainConfig:
    return _apply_overrides(load_config(args.config) if args.config else TrainConfig(), args)


def _summary(config: TrainConfig, dataset_ids, run_report, plan) -> dict:
    return {
        "schema_version": REPORT_SCHEMA,
        "kind": "train",
        "tool_version": __version__,
        "backbone": config.backbone,
        "mode": config.mode.value,
        "rescale": config.rescale,
        "datasets": list(dataset_ids),
        "config": config.to_sections(),
        "splits": [s.to_dict() for s in plan],
        "report": run_report.to_dict(),
    }


def run_training(config: TrainConfig, manifests: list[Path], out: Path, plan: list[MetaSplit] | None = None,
                 parallel: int = 1, argv=None) -> dict:
    index = load_manifests(manifests)
    if plan is None:
        plan = repetition_plan(index, config.repetitions, config.n_train, config.seed)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "run_manifest.json", {
        "schema_version": RUN_MANIFEST_SCHEMA,
        "tool_version": __version__,
        "config": config.to_sections(),
        "manifests": [str(p) for p in manifests],
        "split_plan": [s.to_dict() for s in plan],
        "output_dir": str(out.resolve()),
        "master_seed": config.seed,
        "argv": list(argv) if argv is not None else None,
    })
    (out / "config.toml").write_text(dump_config(config), encoding="utf-8")
    encoder = build_encoder(config)

    def one(split: MetaSplit) -> EvalReport:
        rep_dir = out / f"rep_{split.repetition_index:02d}"
        _write_json(rep_dir / "split.json", split.to_dict())
        ckpt = rep_dir / "checkpoint.ckpt"
        model, history = train_run(config, index, split, encoder,
                                   on_eval=lambda ep, m, r: save_model(m, ckpt))
        save_model(model, ckpt)
        report = final_report(model, history, index, split, config, encoder)
        _write_json(rep_dir / "history.json", history.to_dict())
        _write_json(rep_dir / "report.json", report.to_dict())
        log.info("repetition %d: accuracy %.4f auc %.4f", split.repetition_index, report.accuracy, report.auc)
        return report

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            reports = list(pool.map(one, plan))
    else:
        reports = [one(s) for s in plan]
    run_report = aggregate_repetitions(reports)
    summary = _summary(config, index.dataset_ids, run_report, plan)
    _write_json(out / "summary.json", summary)
    return summary


def cmd_train(args) -> int:
    if args.replay:
        rm = json.loads(Path(args.replay).read_text(encoding="utf-8"))
        if rm.get("schema_version") != RUN_MANIFEST_SCHEMA:
            raise DataError(f"{args.replay}: not a run manifest ({rm.get('schema_version')!r})")
        config = config_from_sections(rm["config"]).validate()
        manifests = _check_manifests(rm["manifests"])
        plan = [MetaSplit.from_dict(d) for d in rm["split_plan"]]
    else:
        if not args.manifest:
            raise ConfigError("train needs --manifest (or --replay)")
        manifests = _check_manifests(args.manifest)
        config = _train_config(args)
        plan = None
    summary = run_training(config, manifests, Path(args.out), plan, args.parallel_repetitions, sys.argv[1:])
    r = summary["report"]
    print(f"accuracy {100 * r['mean_accuracy']:.2f} ± {100 * r['std_accuracy']:.2f}  "
          f"auc {100 * r['mean_auc']:.2f} ± {100 * r['std_auc']:.2f}  -> {Path(args.out) / 'summary.json'}")
    return EXIT_OK


# -- eval ------------------------------------------------------------------

def cmd_eval(args) -> int:
    manifests = _check_manifests(args.manifest)
    index = load_manifests(manifests)
    head, _ = read_tensor_file(args.checkpoint)
    if not head.get("config"):
        raise CompatibilityError(f"{args.checkpoint}: checkpoint carries no training config")
    cfg = _apply_overrides(TrainConfig.from_dict(head["config"]), args)
    # the backbone comes from the (possibly overridden) config and must fit the checkpoint
    model = load_model(args.checkpoint, build_extractor(cfg))
    if args.meta_classes:
        side = [m.strip() for m in args.meta_classes.split(",") if m.strip()]
    elif args.split:
        side = MetaSplit.from_dict(json.loads(Path(args.split).read_text(encoding="utf-8"))).test_meta_classes
    else:
        side = sorted(index.meta_classes)
    side = sorted(side)
    if len(side) == 1:
        log.warning("only one meta-class (%s): C-FSL and U-FSL evaluation coincide", side[0])
    encoder = build_encoder(cfg, model.extractor)
    episodes = [] if args.dump_episodes else None
    report = evaluate_run(model, index, side, cfg, encoder, episode_log=episodes)
    out = {
        "schema_version": REPORT_SCHEMA,
        "kind": "eval",
        "tool_version": __version__,
        "backbone": model.extractor.kind,
        "mode": cfg.mode.value,
        "rescale": cfg.rescale,
        "datasets": list(index.restrict(side).dataset_ids),
        "meta_classes": side,
        "config": cfg.to_sections(),
        "report": report.to_dict(),
    }
    text = json.dumps(out, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if episodes is not None:
        _write_json(Path(args.dump_episodes), episodes)
    log.info("accuracy %.4f auc %.4f over %d queries", report.accuracy, report.auc, report.n_queries)
    return EXIT_OK


# -- report ----------------------------------------------------------------

def _load_report(path: Path) -> dict:
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read report {path}: {e}") from e
    if d.get("schema_version") != REPORT_SCHEMA:
        raise DataError(f"{path}: schema version {d.get('schema_version')!r}, expected {REPORT_SCHEMA!r}")
    return d


def collect_table(paths) -> list[dict]:
    """One row per (dataset, backbone, mode) with mean/std over all repetitions found."""
    groups: dict[tuple[str, str, str], list[EvalReport]] = {}
    for p in paths:
        d = _load_report(Path(p))
        key = ("+".join(d.get("datasets") or ["?"]), d["backbone"], d["mode"])
        if d["kind"] == "train":
            reps = [EvalReport.from_dict(r) for r in d["report"]["per_repetition"]]
        else:
            reps = [EvalReport.from_dict(d["report"])]
        groups.setdefault(key, []).extend(reps)
    rows = []
    for (dataset, backbone, mode), reps in groups.items():
        rr = aggregate_repetitions(reps)
        rows.append({"dataset": dataset, "backbone": backbone, "mode": mode, "n": len(reps),
                     "accuracy_mean": 100 * rr.mean_accuracy, "accuracy_std": 100 * rr.std_accuracy,
                     "auc_mean": 100 * rr.mean_auc, "auc_std": 100 * rr.std_auc})
    return rows


def render_table(rows: list[dict]) -> str:
    """Backbones down the side, (dataset, U-FSL/C-FSL) x (Accuracy, AUC) across."""
    backbones = list(dict.fromkeys(r["backbone"] for r in rows))
    datasets = list(dict.fromkeys(r["dataset"] for r in rows))
    order = [Mode.UNCONDITIONAL.value, Mode.CONDITIONAL.value]
    cols = [(ds, m) for ds in datasets for m in order if any(r["dataset"] == ds and r["mode"] == m for r in rows)]
    cell = {(r["dataset"], r["backbone"], r["mode"]): r for r in rows}
    head1 = ["", *[f"{ds} {Mode(m).short}" for ds, m in cols for _ in (0, 1)]]
    head2 = ["Models", *[name for _ in cols for name in ("Accuracy", "AUC")]]
    body = []
    for b in backbones:
        line = [b]
        for ds, m in cols:
            r = cell.get((ds, b, m))
            if r is None:
                line += ["-", "-"]
            else:
                line += [f"{r['accuracy_mean']:.2f} ± {r['accuracy_std']:.2f}", f"{r['auc_mean']:.2f} ± {r['auc_std']:.2f}"]
        body.append(line)
    table = [head1, head2, *body]
    widths = [max(len(row[i]) for row in table) for i in range(len(head1))]
    fmt = lambda row: " | ".join(c.ljust(w) for c, w in zip(row, widths))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(head1), fmt(head2), sep, *map(fmt, body)]) + "\n"


def _plot(rows: list[dict], metric: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups = list(dict.fromkeys((r["dataset"], r["mode"]) for r in rows))
    backbones = list(dict.fromkeys(r["backbone"] for r in rows))
    cell = {(r["dataset"], r["mode"], r["backbone"]): r for r in rows}
    width = 0.8 / max(1, len(backbones))
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(groups), 3.6))
    x = np.arange(len(groups))
    for i, b in enumerate(backbones):
        means = [cell[(g[0], g[1], b)][f"{metric}_mean"] if (g[0], g[1], b) in cell else np.nan for g in groups]
        stds = [cell[(g[0], g[1], b)][f"{metric}_std"] if (g[0], g[1], b) in cell else 0.0 for g in groups]
        ax.bar(x + i * width, means, width, yerr=stds, capsize=3, label=b)
    ax.set_xticks(x + width * (len(backbones) - 1) / 2)
    ax.set_xticklabels([f"{ds}\n{Mode(m).short}" for ds, m in groups])
    ax.set_ylabel(f"{'Accuracy' if metric == 'accuracy' else 'AUC'} (%)")
    lo = min((r[f"{metric}_mean"] - r[f"{metric}_std"] for r in rows), default=0.0)
    ax.set_ylim(max(0.0, min(lo - 2.0, 90.0)), 100.5)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def cmd_report(args) -> int:
    rows = collect_table(args.reports)
    text = render_table(rows)
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(text, encoding="utf-8")
        import csv

        with (out / "table.csv").open("w", newline="", encoding="utf-8") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else ["dataset"], lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
        _plot(rows, "accuracy", out / "accuracy.png")
        _plot(rows, "auc", out / "auc.png")
    return EXIT_OK


# -- patch-dump ------------------------------------------------------------

def cmd_patch_dump(args) -> int:
    samples: list[DocumentSample] = []
    if args.image:
        p = Path(args.image)
        samples.append(DocumentSample(p.stem, p, Label.GENUINE, "-", "-"))
    if args.manifest:
        index = load_manifests(_check_manifests(args.manifest))
        ids = args.id or [s.id for s in index.samples]
        try:
            samples.extend(index.get(i) for i in ids)
        except KeyError as e:
            raise DataError(f"sample id {e.args[0]!r} not in manifest") from e
    if not samples:
        raise ConfigError("patch-dump needs --image or --manifest")
    ref = args.ref_size or (1047, 1564)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        seq, plan = document_patches(load_image(s), args.patch_size, not args.no_rescale, ref, s.id)
        for patch, (r, c) in zip(seq.patches, seq.positions):
            i, j = plan.row_starts.index(r), plan.col_starts.index(c)
            Image.fromarray(patch).save(out / f"{s.id}_{i}_{j}.png")
        _write_json(out / f"{s.id}_grid.json", {"id": s.id, "rescaled": not args.no_rescale, **plan.to_dict(),
                                                 "n_patches": plan.n_patches})
        log.info("%s: %d patches (%d x %d)", s.id, plan.n_patches, *plan.shape)
    return EXIT_OK


# -- wiring ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="docfsl", description="Few-shot genuine/forged document verification.")
    ap.add_argument("--version", action="version", version=f"docfsl {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate manifests, print counts, optionally write a split plan")
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--out", help="write the normalized manifest here")
    p.add_argument("--split-plan", help="write the repetition split plan (JSON) here")
    p.add_argument("--n-train", type=int, default=6)
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="episodic training over a repetition plan")
    p.add_argument("--config")
    p.add_argument("--manifest", action="append")
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--replay", help="re-execute a run_manifest.json")
    p.add_argument("--parallel-repetitions", type=int, default=1)
    _add_model_flags(p, training=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", action="append", required=True)
    p.add_argument("--meta-classes", help="comma-separated meta-classes to evaluate on (default: all)")
    p.add_argument("--split", help="split.json whose test side is evaluated")
    p.add_argument("--out", help="report path (default: stdout)")
    p.add_argument("--dump-episodes", help="write the sampled episodes (JSON) here")
    _add_model_flags(p, training=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="mean ± std tables and plots from report JSONs")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("patch-dump", help="write a document's patch grid as PNGs plus a JSON sidecar")
    p.add_argument("--manifest", action="append")
    p.add_argument("--id", action="append")
    p.add_argument("--image")
    p.add_argument("--patch-size", type=int, default=299)
    p.add_argument("--no-rescale", action="store_true")
    p.add_argument("--ref-size", type=_ref_size)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_patch_dump)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as e:
        for p in e.problems:
            print(f"config error: {p}", file=sys.stderr)
        return EXIT_USAGE
    except DocFSLError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
