"""Command-line entry point: manifest -> split -> balance -> train -> evaluate -> report.

Every command works inside a run directory (``--out``). The resolved
configuration is echoed to ``<out>/config.json`` and later commands in the
same directory start from it, so flags only need to be given once.
Precedence: command-line flags > ``--config`` file > run-directory echo > defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import yaml

from . import balance as balance_mod
from . import evaluate, models, protocol, synth, trainer
from .data import ImageCache, make_items
from .errors import PipelineError
from .manifest import Manifest, load_manifest, pair_multispectral, summarize
from .preprocess import AugmentPolicy

LOGGER = logging.getLogger("irispmi")

BAND_MODES = ("nir", "rgb", "multispectral")
_SCENARIO_TAG = {protocol.S1: "S1", protocol.S2: "S2", protocol.S3: "S3"}
_BAND_TAG = {"nir": "NIR", "rgb": "RGB", "multispectral": "multispectral"}


@dataclass
class RunConfig:
    manifest: str | None = None
    scenario: str = "S1"
    band: str = "nir"
    backbone: str = "toy_cnn"
    balancing: str = "none"
    k: int = 10
    seed: int = 0
    out: str = "run"
    train_dataset: str | None = None
    test_dataset: str | None = None
    synthetic_root: str | None = None
    target_count: int | None = None
    pmi_tolerance: float = 1.0
    pmi_cap: float = balance_mod.DEFAULT_PMI_CAP
    hidden_dim: int = models.DEFAULT_HIDDEN_DIM
    pretrained_weights: str | None = None
    margin_factor: float = 1.1
    # TrainConfig overrides
    epochs: int = 500
    learning_rate: float = 1e-4
    weight_decay: float = 1e-6
    batch_size: int = 32
    loss: str = "mse"
    normalize_target: bool = False
    augment: bool = True

    def validate(self) -> None:
        self.scenario = _SCENARIO_TAG[protocol.normalize_scenario(self.scenario)]
        if self.band not in BAND_MODES:
            raise PipelineError(f"band must be one of {BAND_MODES}, got {self.band!r}")
        if self.backbone not in models.BACKBONES:
            raise PipelineError(f"unknown backbone {self.backbone!r}")
        if self.balancing not in balance_mod.STRATEGIES:
            raise PipelineError(f"balancing must be one of {balance_mod.STRATEGIES}")
        if self.balancing != "none" and self.scenario != "S3":
            raise PipelineError("training-data balancing is only defined for the cross-dataset scenario S3")
        if self.balancing == "synthetic_supplement" and not self.synthetic_root:
            raise PipelineError("synthetic_supplement balancing needs --synthetic-root")
        if self.scenario == "S3" and not (self.train_dataset and self.test_dataset):
            raise PipelineError("S3 needs --train-dataset and --test-dataset")

    def train_config(self) -> trainer.TrainConfig:
        return trainer.TrainConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            loss=self.loss,
            seed=self.seed,
            normalize_target=self.normalize_target,
            augment=self.augment,
            augment_policy=AugmentPolicy(seed=self.seed),
            margin_factor=self.margin_factor,
        )

    @property
    def run_dir(self) -> Path:
        return Path(self.out)

    def tag(self, fold: int | None = None) -> str:
        parts = [self.scenario, _BAND_TAG[self.band], self.backbone]
        if fold is not None:
            parts.append(str(fold))
        return "_".join(parts)


_FIELDS = {f.name for f in fields(RunConfig)}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = asdict(RunConfig())
    out = getattr(args, "out", None) or values["out"]
    echo = Path(out) / "config.json"
    if echo.is_file():
        values.update({k: v for k, v in json.loads(echo.read_text()).items() if k in _FIELDS})
    if getattr(args, "config", None):
        loaded = yaml.safe_load(Path(args.config).read_text()) or {}
        unknown = set(loaded) - _FIELDS
        if unknown:
            raise PipelineError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    values.update({k: v for k, v in vars(args).items() if k in _FIELDS and v is not None})
    values["out"] = out
    for key in ("manifest", "synthetic_root", "pretrained_weights"):
        if values[key] and values[key] != "imagenet":
            values[key] = str(Path(values[key]).resolve())
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _persist(cfg: RunConfig) -> None:
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    (cfg.run_dir / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")


def _manifest(cfg: RunConfig) -> Manifest:
    if not cfg.manifest:
        raise PipelineError("no manifest given (--manifest)")
    return load_manifest(cfg.manifest)


def _units(cfg: RunConfig, manifest: Manifest) -> list:
    if cfg.band == "multispectral":
        pairs = pair_multispectral(manifest, cfg.pmi_tolerance).pairs
        if not pairs:
            raise PipelineError("multispectral mode needs NIR/RGB pairs, but the manifest has none")
        return pairs
    return manifest.by_band(_BAND_TAG[cfg.band])


def _load_split(cfg: RunConfig, units: list) -> protocol.SplitPlan:
    path = cfg.run_dir / "split.json"
    if not path.is_file():
        raise PipelineError(f"no split plan at {path}; run `split` first")
    plan = protocol.SplitPlan.load(path)
    if _SCENARIO_TAG[plan.scenario] != cfg.scenario:
        raise PipelineError(f"split plan is for {plan.scenario}, config says {cfg.scenario}")
    protocol.verify_split(plan, units)  # raises on fingerprint drift
    return plan


def _load_balancing(cfg: RunConfig) -> balance_mod.BalancingPlan | None:
    if cfg.balancing == "none":
        return None
    path = cfg.run_dir / "balancing.json"
    if not path.is_file():
        raise PipelineError(f"no balancing plan at {path}; run `balance` first")
    plan = balance_mod.BalancingPlan.load(path)
    if plan.strategy != cfg.balancing:
        raise PipelineError(f"balancing plan strategy {plan.strategy} differs from config {cfg.balancing}")
    return plan


def _build_model(cfg: RunConfig, seed: int):
    if cfg.band == "multispectral":
        return models.build_fusion_model(
            cfg.backbone, cfg.hidden_dim, cfg.pretrained_weights, cfg.pretrained_weights, seed=seed
        )
    spec = models.BackboneSpec(cfg.backbone, _BAND_TAG[cfg.band], cfg.pretrained_weights)
    return models.build_narrowband_model(spec, seed=seed)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_validate(args) -> int:
    try:
        manifest = load_manifest(args.manifest, check_images=args.check_images)
    except PipelineError as e:
        print(f"invalid manifest: {e}", file=sys.stderr)
        return 1
    summary = summarize(manifest)
    pairing = pair_multispectral(manifest, args.pmi_tolerance if args.pmi_tolerance is not None else 1.0)
    print(f"{len(manifest)} records, datasets: {', '.join(summary.dataset_ids)}")
    for key, stats in summary.to_dict().items():
        print(f"  {key}: n={stats['n']} PMI min/median/max = {stats['min']:.1f}/{stats['median']:.1f}/{stats['max']:.1f} h")
    print(f"multispectral pairs: {len(pairing.pairs)} ({len(pairing.unpaired)} records unpaired)")
    return 0


def cmd_split(cfg: RunConfig) -> int:
    manifest = _manifest(cfg)
    units = _units(cfg, manifest)
    if cfg.scenario == "S1":
        plan = protocol.make_sample_disjoint_folds(units, cfg.k, cfg.seed)
    elif cfg.scenario == "S2":
        plan = protocol.make_subject_disjoint_folds(units, cfg.k, cfg.seed)
    else:
        plan = protocol.make_cross_dataset_split(units, cfg.train_dataset, cfg.test_dataset)
    audit = protocol.verify_split(plan, units)
    if not audit.passed:
        raise PipelineError(f"generated split failed its audit: {audit.failures()}")
    plan.save(cfg.run_dir / "split.json")
    print(f"wrote {cfg.run_dir / 'split.json'} ({plan.scenario}, {plan.k} fold(s))")
    return 0


def cmd_balance(cfg: RunConfig) -> int:
    manifest = _manifest(cfg)
    units = _units(cfg, manifest)
    split = _load_split(cfg, units)
    train_units = protocol.select(units, split.folds[0].train)
    if cfg.balancing == "real_upsample":
        plan = balance_mod.plan_real_upsampling(train_units, cfg.seed)
    elif cfg.balancing == "synthetic_supplement":
        inventory = synth.load_inventory(cfg.synthetic_root)
        plan = balance_mod.plan_synthetic_supplement(
            train_units, inventory, cfg.seed, cfg.target_count, cfg.pmi_cap
        )
    else:
        plan = balance_mod.plan_identity(train_units, cfg.seed)
    plan.save(cfg.run_dir / "balancing.json")
    print(f"wrote {cfg.run_dir / 'balancing.json'} ({plan.strategy}, {plan.target_count} per class)")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    manifest = _manifest(cfg)
    units = _units(cfg, manifest)
    split = _load_split(cfg, units)
    plan = _load_balancing(cfg)
    tcfg = cfg.train_config()
    cache = ImageCache(cfg.margin_factor)
    for k, fold in enumerate(split.folds):
        train_items = make_items(protocol.select(units, fold.train), manifest.root)
        model = _build_model(cfg, seed=cfg.seed + k)
        fold_cfg = trainer.TrainConfig.from_dict({**tcfg.to_dict(), "seed": cfg.seed + k})
        model, history = trainer.train(model, train_items, plan if k == 0 else None, fold_cfg, cache=cache)
        ckpt = cfg.run_dir / "checkpoints" / models.checkpoint_name(cfg.scenario, _BAND_TAG[cfg.band], cfg.backbone, k)
        models.save_checkpoint(ckpt, model, {"run": asdict(cfg), "train": fold_cfg.to_dict()})
        hist_path = cfg.run_dir / "history" / f"{cfg.tag(k)}.json"
        hist_path.parent.mkdir(parents=True, exist_ok=True)
        hist_path.write_text(json.dumps(history.to_dict(), indent=2) + "\n")
        print(f"fold {k}: final train loss {history.train_loss[-1]:.4f} -> {ckpt}")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    manifest = _manifest(cfg)
    units = _units(cfg, manifest)
    split = _load_split(cfg, units)
    report = evaluate.MetricsReport(
        _SCENARIO_TAG_LONG[cfg.scenario], _BAND_TAG[cfg.band], cfg.backbone, cfg.balancing
    )
    cache = ImageCache(cfg.margin_factor)
    for k, fold in enumerate(split.folds):
        ckpt = cfg.run_dir / "checkpoints" / models.checkpoint_name(cfg.scenario, _BAND_TAG[cfg.band], cfg.backbone, k)
        if not ckpt.is_file():
            raise PipelineError(f"missing checkpoint {ckpt}; run `train` first")
        model, _ = models.load_checkpoint(ckpt, cfg.backbone, _BAND_TAG[cfg.band])
        preds = trainer.predict(model, make_items(protocol.select(units, fold.test), manifest.root), cache)
        trainer.write_predictions(cfg.run_dir / "predictions" / f"{cfg.tag(k)}.csv", preds)
        report.folds.append(evaluate.FoldMetrics.from_predictions([p.y_pred for p in preds], [p.y_true for p in preds]))
    path = report.save(cfg.run_dir / "metrics.json")
    s = report.summary
    print(f"RMSE {s.mean_rmse:.2f} +/- {s.std_rmse:.2f} h, MAE {s.mean_mae:.2f} +/- {s.std_mae:.2f} h -> {path}")
    return 0


_SCENARIO_TAG_LONG = {v: k for k, v in _SCENARIO_TAG.items()}


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def comparison_tables(reports: Sequence[evaluate.MetricsReport]) -> dict[str, list[list[str]]]:
    """Backbone-by-metric tables, one per (scenario, band).

    S1/S2 tables report mean and stdev across folds; S3 tables put the three
    balancing strategies side by side.
    """
    grouped: dict[tuple[str, str], list[evaluate.MetricsReport]] = {}
    for r in reports:
        grouped.setdefault((r.scenario, r.band), []).append(r)
    tables = {}
    for (scenario, band), rs in sorted(grouped.items()):
        name = f"{_SCENARIO_TAG[scenario]}_{band}"
        backbones = [b for b in models.BACKBONES if any(r.backbone == b for r in rs)]
        if scenario == protocol.S3:
            rows = [["Backbone"] + [f"{s} {m}" for s in balance_mod.STRATEGIES for m in ("RMSE", "MAE")]]
            for b in backbones:
                row = [b]
                for s in balance_mod.STRATEGIES:
                    match = [r for r in rs if r.backbone == b and r.balancing == s]
                    row += [_fmt(match[-1].summary.mean_rmse), _fmt(match[-1].summary.mean_mae)] if match else ["-", "-"]
                rows.append(row)
        else:
            rows = [["Backbone", "RMSE mean", "RMSE stdev", "MAE mean", "MAE stdev"]]
            for b in backbones:
                s = [r for r in rs if r.backbone == b][-1].summary
                rows.append([b, _fmt(s.mean_rmse), _fmt(s.std_rmse), _fmt(s.mean_mae), _fmt(s.std_mae)])
        tables[name] = rows
    return tables


def _markdown(rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
    lines += ["| " + " | ".join(r) + " |" for r in rows[1:]]
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    out = Path(args.out)
    metric_paths = [Path(p) for p in (args.metrics or [out / "metrics.json"])]
    reports = [evaluate.MetricsReport.load(p) for p in metric_paths]
    report_dir = out / "report"
    report_dir.mkdir(parents=True, exist_ok=True)

    for name, rows in comparison_tables(reports).items():
        (report_dir / f"table_{name}.md").write_text(_markdown(rows))
        (report_dir / f"table_{name}.csv").write_text("\n".join(",".join(r) for r in rows) + "\n")

    for path, rep in zip(metric_paths, reports):
        run_dir = path.parent
        pred_files = sorted((run_dir / "predictions").glob("*.csv"))
        if pred_files:
            preds = [p for f in pred_files for p in trainer.read_predictions(f)]
            tag = f"{_SCENARIO_TAG[rep.scenario]}_{rep.band}_{rep.backbone}_{rep.balancing}"
            evaluate.scatter_report(preds, report_dir / f"scatter_{tag}", title=tag)
        _fold_boxplots(run_dir, rep, report_dir)
    print(f"wrote report to {report_dir}")
    return 0


def _fold_boxplots(run_dir: Path, rep: evaluate.MetricsReport, report_dir: Path) -> None:
    """Train-vs-test PMI distributions for the worst and best folds, plus the dataset overview."""
    echo = run_dir / "config.json"
    if not echo.is_file() or not (run_dir / "split.json").is_file():
        return
    cfg = RunConfig(**{k: v for k, v in json.loads(echo.read_text()).items() if k in _FIELDS})
    if not cfg.manifest or not Path(cfg.manifest).is_file():
        return
    manifest = load_manifest(cfg.manifest)
    units = _units(cfg, manifest)
    split = protocol.SplitPlan.load(run_dir / "split.json")
    by_id = {u.unit_id: u for u in units}
    tag = f"{_SCENARIO_TAG[rep.scenario]}_{rep.band}_{rep.backbone}_{rep.balancing}"
    ranked = sorted(range(len(rep.folds)), key=lambda i: rep.folds[i].mae)
    for label, k in (("best", ranked[0]), ("worst", ranked[-1])):
        fold = split.folds[k]
        groups = {
            "train": [by_id[i].pmi_hours for i in fold.train],
            "test": [by_id[i].pmi_hours for i in fold.test],
        }
        evaluate.distribution_boxplot(groups, report_dir / f"box_{tag}_{label}_fold{k}", title=f"{label} fold {k}")
    summary = summarize(manifest)
    groups = {}
    for rec in manifest:
        groups.setdefault(f"{rec.dataset_id}/{rec.band}", []).append(rec.pmi_hours)
    evaluate.distribution_boxplot(dict(sorted(groups.items())), report_dir / "box_dataset", title="PMI by dataset and band")
    (report_dir / "dataset_summary.json").write_text(json.dumps(summary.to_dict(), indent=2) + "\n")


def cmd_synth_stub(args) -> int:
    out = Path(args.out)
    if args.kind == "inventory":
        inv = synth.write_stub_inventory(out, args.per_class, args.bands, args.seed or 0)
        print(f"wrote {len(inv)} stub images and {synth.SIDECAR_NAME} to {out}")
        return 0
    from .manifest import write_manifest

    records = []
    for i, ds in enumerate(args.datasets):
        counts = {c: args.per_class for c in range(1, balance_mod.N_CLASSES + 1)}
        records += synth.write_stub_corpus(
            out, counts, args.subjects, dataset_id=ds, bands=args.bands, seed=(args.seed or 0) + i
        )
    path = write_manifest(records, out / "manifest.csv")
    print(f"wrote {len(records)} stub records to {path}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON file with run settings")
    p.add_argument("--out", help="run directory (default: ./run)")
    p.add_argument("--manifest")
    p.add_argument("--scenario", help="S1, S2 or S3")
    p.add_argument("--band", choices=BAND_MODES)
    p.add_argument("--backbone", choices=models.BACKBONES)
    p.add_argument("--balancing", choices=balance_mod.STRATEGIES)
    p.add_argument("--k", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--train-dataset", dest="train_dataset")
    p.add_argument("--test-dataset", dest="test_dataset")
    p.add_argument("--synthetic-root", dest="synthetic_root")
    p.add_argument("--target-count", dest="target_count", type=int)
    p.add_argument("--pmi-tolerance", dest="pmi_tolerance", type=float)
    p.add_argument("--pmi-cap", dest="pmi_cap", type=float)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    p.add_argument("--weights", dest="pretrained_weights", help="backbone weights file, or 'imagenet'")
    p.add_argument("--margin", dest="margin_factor", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--loss", choices=("mse", "mae"))
    p.add_argument("--normalize-target", dest="normalize_target", action="store_const", const=True)
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="irispmi", description="Post-mortem interval estimation from iris images")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a manifest and print PMI summaries")
    p.add_argument("manifest")
    p.add_argument("--check-images", action="store_true", help="also open images and check iris circles")
    p.add_argument("--pmi-tolerance", type=float)

    for name, helptext in (
        ("split", "write a split plan (split.json)"),
        ("balance", "write an S3 balancing plan (balancing.json)"),
        ("train", "train one model per fold and write checkpoints"),
        ("evaluate", "predict test folds, write prediction CSVs and metrics.json"),
    ):
        _run_flags(sub.add_parser(name, help=helptext))

    p = sub.add_parser("report", help="comparison tables and plots from metrics files")
    p.add_argument("--out", default="run")
    p.add_argument("--metrics", nargs="*", help="metrics.json files (default: <out>/metrics.json)")

    p = sub.add_parser("synth-stub", help="render procedural stub images")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("inventory", "corpus"), default="inventory")
    p.add_argument("--per-class", type=int, default=4)
    p.add_argument("--bands", nargs="+", choices=("NIR", "RGB"), default=["NIR", "RGB"])
    p.add_argument("--subjects", type=int, default=10, help="corpus only")
    p.add_argument("--datasets", nargs="+", default=["stub"], help="corpus only")
    p.add_argument("--seed", type=int, default=0)
    return parser


_RUN_COMMANDS = {"split": cmd_split, "balance": cmd_balance, "train": cmd_train, "evaluate": cmd_evaluate}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            return cmd_validate(args)
        if args.command == "report":
            return cmd_report(args)
        if args.command == "synth-stub":
            return cmd_synth_stub(args)
        cfg = resolve_config(args)
        _persist(cfg)
        return _RUN_COMMANDS[args.command](cfg)
    except (PipelineError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
