"""Command-line interface: dataset tooling, training, evaluation, explanation
panels, the Table-style report with curve figures, calibration, and serving."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import yaml

from . import analytics, calibration
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import Split, load_image, load_manifest, sol_split, write_manifest
from .explain import explain as explain_image
from .explain import explanation_to_json, render_panel
from .losses import LossWeights
from .model import ModelConfig
from .plots import save_curve_plot
from .service import DEFAULT_THRESHOLD, FeedbackStore, ModelPredictor, create_app
from .training import TrainConfig, last_layer_tune, train

_SPLITS = {"train": Split.TRAIN, "val": Split.VAL, "test": Split.TEST}


@click.group()
def main():
    """Prototype-evidence image classifier toolkit."""


@main.group()
def dataset():
    """Manifest validation, splitting, and statistics."""


@dataset.command("validate")
@click.argument("manifest", type=click.Path())
def dataset_validate(manifest):
    index = load_manifest(manifest)
    table = index.counts_per_class_per_split()
    click.echo(f"OK: {len(index.entries)} entries, {index.num_classes} classes")
    for split_name, row in sorted(table.items()):
        click.echo(f"  {split_name}: {sum(row.values())} entries")


@dataset.command("split")
@click.argument("manifest", type=click.Path())
@click.option("--val-frac", type=float, required=True)
@click.option("--test-frac", type=float, required=True)
@click.option("--out", type=click.Path(), default=None,
              help="Write the split manifest here (default: stdout summary only).")
def dataset_split(manifest, val_frac, test_frac, out):
    index = sol_split(load_manifest(manifest), val_frac, test_frac)
    for name, split in _SPLITS.items():
        entries = index.split_entries(split)
        sols = [e.sol for e in entries]
        click.echo(f"{name}: {len(entries)} entries, sols {min(sols)}..{max(sols)}")
    if out:
        write_manifest(index, out)
        click.echo(f"wrote {out}")


@dataset.command("stats")
@click.argument("manifest", type=click.Path())
def dataset_stats(manifest):
    index = load_manifest(manifest)
    table = index.counts_per_class_per_split()
    splits = sorted(table.keys())
    width = max((len(n) for n in index.class_names), default=5)
    click.echo("class".ljust(width) + "".join(s.rjust(12) for s in splits) + "   total".rjust(8))
    for i, name in enumerate(index.class_names):
        counts = [table[s].get(name, 0) for s in splits]
        click.echo(name.ljust(width) + "".join(str(c).rjust(12) for c in counts)
                   + str(sum(counts)).rjust(8))


def _load_run_config(path):
    """Config file with optional train/loss/model sections; flat keys are
    routed by field name (lambda1..lambda3 and margin are loss keys)."""
    raw = {}
    if path:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    train_cfg = dict(raw.get("train", {}))
    loss_cfg = dict(raw.get("loss", {}))
    model_cfg = dict(raw.get("model", {}))
    loss_fields = set(LossWeights.__dataclass_fields__)
    train_fields = set(TrainConfig.__dataclass_fields__)
    model_fields = {"prototypes_per_class", "prototype_dim", "input_size",
                    "pretrained", "backbone_weights"}
    for key, value in raw.items():
        if key in ("train", "loss", "model"):
            continue
        if key in loss_fields:
            loss_cfg[key] = value
        elif key in train_fields:
            train_cfg[key] = value
        elif key in model_fields:
            model_cfg[key] = value
        else:
            raise click.ClickException(f"unknown config key: {key}")
    return train_cfg, loss_cfg, model_cfg


@main.command()
@click.option("--manifest", type=click.Path(), required=True)
@click.option("--backbone", type=click.Choice(["vgg19", "resnet18", "tiny"]),
              default="resnet18", show_default=True)
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.option("--val-frac", type=float, default=None,
              help="Apply a sol split first (requires --test-frac).")
@click.option("--test-frac", type=float, default=None)
@click.option("--lambda1", type=float, default=None)
@click.option("--lambda2", type=float, default=None)
@click.option("--lambda3", type=float, default=None)
@click.option("--margin", type=float, default=None)
@click.option("--pretrained/--no-pretrained", default=None)
@click.option("--last-layer", is_flag=True, default=False,
              help="Run the convex evidence-layer tuning step after training.")
def train_cmd(manifest, backbone, config_path, out_dir, val_frac, test_frac,
              lambda1, lambda2, lambda3, margin, pretrained, last_layer):
    """Train on a manifest and write checkpoints + per-epoch metrics."""
    index = load_manifest(manifest)
    if val_frac is not None or test_frac is not None:
        if val_frac is None or test_frac is None:
            raise click.ClickException("--val-frac and --test-frac go together")
        index = sol_split(index, val_frac, test_frac)
    train_cfg, loss_cfg, model_cfg = _load_run_config(config_path)
    for key, value in (("lambda1", lambda1), ("lambda2", lambda2),
                       ("lambda3", lambda3), ("margin", margin)):
        if value is not None:
            loss_cfg[key] = value
    if pretrained is not None:
        model_cfg["pretrained"] = pretrained
    config = TrainConfig.from_dict(train_cfg)
    weights = LossWeights(**loss_cfg)
    model_config = ModelConfig(class_names=tuple(index.class_names),
                               backbone=backbone, **model_cfg)

    def log(record):
        click.echo(f"epoch {record['epoch']:>4}  total {record['total']:.4f}  "
                   f"val_acc {record['val_acc']:.4f}"
                   + ("  [projected]" if record["projected"] else ""))

    state = train(index, model_config, config, weights, out_dir=out_dir, log=log)
    if last_layer:
        last_layer_tune(state, index, config)
        save_checkpoint(Path(out_dir) / "final.pt", state.model,
                        train_config=config.to_dict(),
                        extra={"epoch": state.epoch, "last_layer_tuned": True})
    click.echo(f"best val acc {state.best_val_acc}  checkpoint {state.best_checkpoint}")


train_cmd.name = "train"
main.add_command(train_cmd, name="train")


@main.command()
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--manifest", type=click.Path(), required=True)
@click.option("--split", type=click.Choice(list(_SPLITS)), default="test", show_default=True)
@click.option("--out-predictions", type=click.Path(), default=None)
@click.option("--out-traces", type=click.Path(), default=None)
@click.option("--threshold", type=float, default=DEFAULT_THRESHOLD, show_default=True)
@click.option("--k-max", type=int, default=10, show_default=True)
def evaluate(checkpoint, manifest, split, out_predictions, out_traces, threshold, k_max):
    """Write line-delimited prediction and evidence-trace records for a split."""
    model, meta = load_checkpoint(checkpoint)
    index = load_manifest(manifest, class_names=list(model.config.class_names))
    records = analytics.collect_predictions(model, index, _SPLITS[split],
                                            meta["calibrator"], threshold)
    report = analytics.accuracy_report(records, threshold)
    acc_at = "-" if report.acc_at_threshold is None else f"{report.acc_at_threshold:.2f}%"
    click.echo(f"{split}: acc {report.acc:.2f}%  acc@{threshold} {acc_at}  "
               f"abstention {report.abstention_rate:.2f}%")
    if out_predictions:
        analytics.write_records(records, out_predictions)
        click.echo(f"wrote {out_predictions}")
    if out_traces:
        traces = analytics.collect_traces(model, index, _SPLITS[split], k_max)
        analytics.write_records(traces, out_traces)
        click.echo(f"wrote {out_traces}")


@main.command("explain")
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--manifest", type=click.Path(), required=True)
@click.option("--image", "image_id", required=True)
@click.option("--k", type=int, default=4, show_default=True)
@click.option("--out", "panel_path", type=click.Path(), default=None)
@click.option("--json", "json_path", type=click.Path(), default=None)
def explain_cmd(checkpoint, manifest, image_id, k, panel_path, json_path):
    """Render the evidence panel and/or JSON for one image."""
    from .dataset import load_sample_image

    model, meta = load_checkpoint(checkpoint)
    index = load_manifest(manifest, class_names=list(model.config.class_names))
    size = model.config.input_size
    entry = index.by_id(image_id)
    image = load_image(entry.path, size)
    loader = lambda sid: load_sample_image(index, sid, size)
    exp = explain_image(image, model, k=k, calibrator=meta["calibrator"],
                        image_loader=loader, image_id=image_id)
    click.echo(f"predicted {exp.predicted_class_name} "
               f"(confidence {exp.confidence:.3f}), {len(exp.items)} evidence items")
    if json_path:
        Path(json_path).write_text(explanation_to_json(exp))
        click.echo(f"wrote {json_path}")
    if panel_path:
        fig = render_panel(exp, image, loader)
        fig.savefig(panel_path, dpi=120)
        click.echo(f"wrote {panel_path}")


@main.command()
@click.option("--predictions", "prediction_specs", multiple=True, required=True,
              help="split=path (repeatable) or a bare path treated as test.")
@click.option("--traces", "traces_path", type=click.Path(), default=None)
@click.option("--threshold", type=float, default=DEFAULT_THRESHOLD, show_default=True)
@click.option("--plots", "plots_dir", type=click.Path(), default=None)
@click.option("--manifest", type=click.Path(), default=None,
              help="Adds the majority-class baseline row.")
@click.option("--out-dir", type=click.Path(), default=None,
              help="Write accuracy.tsv and curve CSVs here.")
@click.option("--model-name", default="model", show_default=True)
@click.option("--k-max", type=int, default=5, show_default=True)
def report(prediction_specs, traces_path, threshold, plots_dir, manifest,
           out_dir, model_name, k_max):
    """Accuracy table (all splits) plus diversity / in-class curves."""
    reports = {}
    counts = {}
    for spec in prediction_specs:
        split, _, path = spec.rpartition("=")
        split = split or "test"
        if split not in analytics.SPLIT_ORDER:
            raise click.ClickException(f"unknown split {split!r} in --predictions")
        records = analytics.read_predictions(path)
        reports[split] = analytics.accuracy_report(records, threshold)
        counts[split] = len(records)

    baseline = None
    class_names = None
    if manifest:
        index = load_manifest(manifest)
        class_names = index.class_names
        baseline = {}
        for name, split in _SPLITS.items():
            try:
                baseline[name] = analytics.most_common_baseline(index, split)
            except ValueError:
                pass

    table = analytics.format_accuracy_table([(model_name, reports)], baseline, counts)
    click.echo(table)

    curves = {}
    if traces_path:
        traces = analytics.read_traces(traces_path)
        div = analytics.diversity_curve(traces, k_max)
        inc = analytics.inclass_curve(traces, k_max)
        curves = {"diversity": div, "inclass": inc}
        classes_in_traces = {t.true_label for t in traces}
        omitted = sorted(classes_in_traces - set(div))
        if omitted:
            click.echo(f"note: no correct traces for classes {omitted}; "
                       "omitted from the diversity curve")
        if class_names is None:
            n = 1 + max(max(classes_in_traces, default=0),
                        max((p.prototype_class for t in traces
                             for p in t.top_prototypes), default=0))
            class_names = [f"class {i}" for i in range(n)]

    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        analytics.write_accuracy_tsv([(model_name, reports)], out / "accuracy.tsv", baseline)
        if curves:
            analytics.write_curves_csv(curves["diversity"], class_names,
                                       out / "diversity_curve.csv")
            analytics.write_curves_csv(curves["inclass"], class_names,
                                       out / "inclass_curve.csv")
        click.echo(f"wrote {out}/accuracy.tsv")

    if plots_dir and curves:
        plots = Path(plots_dir)
        save_curve_plot(curves["diversity"], class_names,
                        "unique source images in top-k", plots / "diversity_curve.png",
                        reference_line=True)
        save_curve_plot(curves["inclass"], class_names,
                        "in-class prototypes in top-k", plots / "inclass_curve.png")
        click.echo(f"wrote plots to {plots}")


@main.command()
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--method", type=click.Choice(["temp", "vector"]), required=True)
@click.option("--manifest", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), default=None,
              help="Output checkpoint (default: update in place).")
def calibrate(checkpoint, method, manifest, out):
    """Fit a calibrator on the VAL split and store it in the checkpoint."""
    import numpy as np

    model, meta = load_checkpoint(checkpoint)
    index = load_manifest(manifest, class_names=list(model.config.class_names))
    records = analytics.collect_predictions(model, index, Split.VAL)
    logits = np.array([r.logits for r in records])
    labels = np.array([r.true_label for r in records])
    kind = "temperature" if method == "temp" else "vector"
    cal = calibration.fit(kind, logits, labels)
    before = calibration.nll(calibration.Calibrator(kind="none"), logits, labels)
    after = calibration.nll(cal, logits, labels)
    click.echo(f"fitted {kind}: val NLL {before:.4f} -> {after:.4f}"
               + (f" (T={cal.temperature:.3f})" if kind == "temperature" else ""))
    target = out or checkpoint
    save_checkpoint(target, model, calibrator=cal,
                    train_config=meta.get("train_config"), extra=meta.get("extra"))
    click.echo(f"wrote {target}")


@main.command()
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--manifest", type=click.Path(), required=True)
@click.option("--port", type=int, default=8000, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--db", "db_path", type=click.Path(), default="feedback.db", show_default=True)
@click.option("--threshold", type=float, default=DEFAULT_THRESHOLD, show_default=True)
@click.option("--static-dir", type=click.Path(), default=None,
              help="Directory of built UI assets served at /ui.")
def serve(checkpoint, manifest, port, host, db_path, threshold, static_dir):
    """Serve classification, explanation, feedback, and review endpoints."""
    import uvicorn

    model, meta = load_checkpoint(checkpoint)
    index = load_manifest(manifest, class_names=list(model.config.class_names))
    predictor = ModelPredictor(model, meta["calibrator"], index,
                               meta["model_version"], threshold)
    app = create_app(predictor, index, FeedbackStore(db_path), static_dir=static_dir)
    click.echo(f"model_version {meta['model_version']}  threshold {threshold}")
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
