"""Experiment orchestration: split, train, ensemble, explain, report.

The run-directory layout (runs/<experiment>/<backbone>/<seed>/ holding
checkpoint.pt, history.csv, metrics.json) is the sole hand-off between
commands. Configs are TOML files mirroring the training fields; command-line
flags win over config values. Artifacts carry no timestamps, so reruns with
identical seeds are byte-identical.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import backbones, ensemble, explain, metrics, sampling, training
from .data import (
    AugmentationConfig,
    DatasetManifest,
    ManifestError,
    load_manifest,
    load_image,
    save_manifest,
    stratified_split,
)

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as f:
        return tomllib.load(f)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialize {type(v)} to TOML")


def _toml_dumps(d: dict, prefix: str = "") -> str:
    scalars, tables = [], []
    for k, v in d.items():
        if isinstance(v, dict):
            tables.append((k, v))
        else:
            scalars.append(f"{k} = {_toml_value(v)}")
    out = "\n".join(scalars)
    for k, v in tables:
        name = f"{prefix}{k}"
        out += f"\n\n[{name}]\n" + _toml_dumps(v, prefix=f"{name}.")
    return out


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = text.split(":")
    if len(parts) != 3:
        raise click.BadParameter("ratios must look like 7:1:2")
    try:
        r = tuple(float(p) for p in parts)
    except ValueError:
        raise click.BadParameter(f"non-numeric ratios: {text}")
    if sum(r) <= 0:
        raise click.BadParameter("ratios must sum to a positive value")
    return r


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError:
        raise click.BadParameter(f"seeds must be comma-separated integers: {text}")


@click.group()
def main() -> None:
    """Knee OA severity classification workbench."""


@main.command("split")
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--ratios", default="7:1:2", show_default=True)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--group-by-subject", is_flag=True, default=False)
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_split(manifest_path, ratios, seed, group_by_subject, out_path):
    """Assign stratified train/val/test splits and write the populated CSV."""
    try:
        manifest = load_manifest(manifest_path)
        result = stratified_split(
            manifest, _parse_ratios(ratios), seed=seed, group_by_subject=group_by_subject
        )
    except (ManifestError, ValueError) as exc:
        raise click.ClickException(str(exc))
    save_manifest(result, out_path)
    counts = {s: sum(1 for r in result.records if r.split == s) for s in ("train", "val", "test")}
    click.echo(f"wrote {out_path}: {counts}")


def _train_one_backbone(
    name: str,
    splits: dict[str, DatasetManifest],
    cfg_base: training.TrainConfig,
    seeds: list[int],
    out_root: Path,
    test_hash: str,
) -> metrics.AggregateResult:
    results = []
    for seed in seeds:
        cfg = training.TrainConfig.from_dict({**cfg_base.to_dict(), "seed": seed})
        spec = backbones.BackboneSpec(name=name)
        model = backbones.create_backbone(spec, init_seed=seed)
        ckpt, history = training.train(model, splits["train"], splits["val"], cfg)
        result = training.evaluate(ckpt, splits["test"])
        run_dir = out_root / name / str(seed)
        training.write_run_dir(run_dir, ckpt, history, result, test_split_sha256=test_hash)
        click.echo(
            f"{name} seed {seed}: test accuracy {result.accuracy:.4f} "
            f"(best val {history.best_val_accuracy:.4f} @ epoch {history.best_epoch})"
        )
        results.append(result)
    agg = metrics.aggregate(results)
    metrics.write_json(agg.to_dict(), out_root / name / "aggregate.json")
    return agg


@main.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--manifest", "manifest_path", type=click.Path(), default=None)
@click.option("--backbone", "backbone_names", multiple=True)
@click.option("--seeds", default=None, help="comma-separated training seeds")
@click.option("--sampling", "sampling_mode", default=None,
              type=click.Choice(["uniform", "inverse_frequency"]))
@click.option("--epochs", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--experiment", default=None, help="experiment directory name")
@click.option("--out", "out_root", type=click.Path(), default=None)
def cmd_train(config_path, manifest_path, backbone_names, seeds, sampling_mode,
              epochs, batch_size, experiment, out_root):
    """Train each backbone for each seed, writing run directories."""
    cfg_file = _load_config(config_path)
    manifest_path = manifest_path or cfg_file.get("manifest")
    out_root = out_root or cfg_file.get("out")
    names = list(backbone_names) or list(cfg_file.get("backbones", []))
    seed_list = _parse_seeds(seeds) if seeds else list(cfg_file.get("seeds", [0]))

    if manifest_path is None:
        raise click.UsageError("a manifest is required (--manifest or config)")
    if out_root is None:
        raise click.UsageError("an output root is required (--out or config)")
    if not names:
        raise click.UsageError("at least one backbone is required (--backbone or config)")

    train_table = dict(cfg_file.get("train", {}))
    if sampling_mode is not None:
        train_table["sampling_mode"] = sampling_mode
    if epochs is not None:
        train_table["epochs"] = epochs
    if batch_size is not None:
        train_table["batch_size"] = batch_size
    try:
        cfg_base = training.TrainConfig.from_dict(train_table)
        for name in names:
            backbones.BackboneSpec(name=name)  # validate before any training
        manifest = load_manifest(manifest_path)
    except (ValueError, ManifestError, TypeError) as exc:
        raise click.ClickException(str(exc))

    splits = {s: manifest.subset(s) for s in ("train", "val", "test")}
    for s, m in splits.items():
        if len(m) == 0:
            raise click.ClickException(f"manifest has no records in split {s!r}")
    test_hash = training.split_fingerprint(splits["test"])

    exp = experiment or (
        "exp2_weighted" if cfg_base.sampling_mode == "inverse_frequency" else "exp1_uniform"
    )
    exp_root = Path(out_root) / exp
    exp_root.mkdir(parents=True, exist_ok=True)
    resolved = {
        "manifest": str(manifest_path),
        "out": str(out_root),
        "experiment": exp,
        "backbones": names,
        "seeds": seed_list,
        "train": cfg_base.to_dict(),
    }
    (exp_root / "config.toml").write_text(_toml_dumps(resolved) + "\n")

    try:
        for name in names:
            agg = _train_one_backbone(name, splits, cfg_base, seed_list, exp_root, test_hash)
            click.echo(
                f"{name}: accuracy {metrics.format_mean_std(agg.mean_accuracy, agg.std_accuracy)} "
                f"over {agg.n_runs} run(s)"
            )
    except training.TrainingError as exc:
        raise click.ClickException(str(exc))


def _member_logits(member_ckpts, images) -> list[np.ndarray]:
    outs = []
    for ckpt in member_ckpts:
        model, _ = backbones.model_from_checkpoint(ckpt)
        outs.append(training._predict(model, images))
    return outs


@main.command("ensemble")
@click.option("--run-dir", "run_dirs", multiple=True, required=True, type=click.Path(exists=True))
@click.option("--strategy", type=click.Choice(["vote", "stack"]), required=True)
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--stack-split", default="val", show_default=True,
              type=click.Choice(["val", "train"]))
@click.option("--seeds", default="0,1,2", show_default=True)
@click.option("--epochs", type=int, default=30, show_default=True)
@click.option("--hidden-dim", type=int, default=64, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_ensemble(run_dirs, strategy, manifest_path, stack_split, seeds, epochs,
                 hidden_dim, out_dir):
    """Fuse trained members by soft voting or a stacker network."""
    out_dir = Path(out_dir)
    manifest = load_manifest(manifest_path)
    test = manifest.subset("test")
    if len(test) == 0:
        raise click.ClickException("manifest has no test split")
    test_hash = training.split_fingerprint(test)

    member_ckpt_paths = []
    for d in run_dirs:
        ckpt_path = Path(d) / "checkpoint.pt"
        metrics_path = Path(d) / "metrics.json"
        if not ckpt_path.exists():
            raise click.ClickException(f"no checkpoint.pt in {d}")
        if metrics_path.exists():
            import json

            recorded = json.loads(metrics_path.read_text()).get("test_split_sha256")
            if recorded is not None and recorded != test_hash:
                raise click.ClickException(
                    f"member {d} was evaluated on a different test split "
                    f"({recorded[:12]} != {test_hash[:12]}); refusing to mix"
                )
        member_ckpt_paths.append(str(ckpt_path))
    member_ckpts = [backbones.load_checkpoint(p) for p in member_ckpt_paths]

    test_cache = training.ImageCache(test)
    test_logits = _member_logits(member_ckpts, test_cache.images)

    if strategy == "vote":
        preds = ensemble.soft_vote_batch(test_logits)
        result = metrics.RunResult.from_predictions(preds.tolist(), test_cache.labels.tolist())
        payload = result.to_dict()
        payload["test_split_sha256"] = test_hash
        metrics.write_json(payload, out_dir / "metrics.json")
        ensemble.write_ensemble_manifest(out_dir / "ensemble.json", member_ckpt_paths, "vote")
        click.echo(f"vote ensemble: test accuracy {result.accuracy:.4f}")
        return

    fit = manifest.subset(stack_split)
    if len(fit) == 0:
        raise click.ClickException(f"manifest has no {stack_split} split")
    fit_cache = training.ImageCache(fit)
    fit_logits = _member_logits(member_ckpts, fit_cache.images)
    fit_inputs = np.concatenate(fit_logits, axis=1)
    test_inputs = np.concatenate(test_logits, axis=1)
    spec = ensemble.StackerSpec(input_dim=fit_inputs.shape[1], hidden_dim=hidden_dim)

    results = []
    stacker_paths = []
    for seed in _parse_seeds(seeds):
        cfg = training.TrainConfig(
            epochs=epochs, seed=seed, augmentation=AugmentationConfig.identity()
        )
        ckpt, _history = ensemble.train_stacker(
            spec, fit_inputs, fit_cache.labels.tolist(), cfg
        )
        preds = ensemble.predict_stacked(ckpt, test_inputs)
        result = metrics.RunResult.from_predictions(preds.tolist(), test_cache.labels.tolist())
        seed_dir = out_dir / str(seed)
        seed_dir.mkdir(parents=True, exist_ok=True)
        torch.save(ckpt, seed_dir / "stacker.pt")
        stacker_paths.append(str(seed_dir / "stacker.pt"))
        payload = result.to_dict()
        payload["test_split_sha256"] = test_hash
        metrics.write_json(payload, seed_dir / "metrics.json")
        click.echo(f"stack seed {seed}: test accuracy {result.accuracy:.4f}")
        results.append(result)
    agg = metrics.aggregate(results)
    metrics.write_json(agg.to_dict(), out_dir / "aggregate.json")
    ensemble.write_ensemble_manifest(
        out_dir / "ensemble.json", member_ckpt_paths, "stack",
        stacker_checkpoint=stacker_paths[0],
    )
    click.echo(
        f"stack ensemble: accuracy {metrics.format_mean_std(agg.mean_accuracy, agg.std_accuracy)}"
    )


@main.command("explain")
@click.option("--checkpoint", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--image", "image_paths", multiple=True, required=True, type=click.Path(exists=True))
@click.option("--target-class", type=click.IntRange(0, 4), default=None,
              help="defaults to the predicted class per image")
@click.option("--n-samples", type=int, default=25, show_default=True)
@click.option("--sigma", type=float, default=0.15, show_default=True)
@click.option("--target-layer", default=None)
@click.option("--alpha", type=float, default=0.5, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--save-csv", is_flag=True, default=False, help="also dump the raw map")
@click.option("--out", "out_dir", required=True, type=click.Path())
def cmd_explain(ckpt_path, image_paths, target_class, n_samples, sigma,
                target_layer, alpha, seed, save_csv, out_dir):
    """Write Smooth-GradCAM++ heatmap overlays for the given images."""
    out_dir = Path(out_dir)
    ckpt = backbones.load_checkpoint(ckpt_path)
    model, _spec = backbones.model_from_checkpoint(ckpt)
    cfg = explain.CamConfig(
        n_samples=n_samples, noise_sigma=sigma, target_layer=target_layer, seed=seed
    )
    for path in image_paths:
        image = load_image(path)
        cls = target_class
        if cls is None:
            cls = int(backbones.forward(model, [image])[0].argmax())
        try:
            sal = explain.smooth_gradcampp(model, image, cls, cfg)
        except explain.TargetLayerError as exc:
            raise click.ClickException(str(exc))
        rgb = explain.overlay(image, sal, alpha)
        stem = Path(path).stem
        out_png = out_dir / f"{stem}_cam_{cls}.png"
        explain.save_overlay_png(rgb, out_png)
        if save_csv:
            np.savetxt(out_dir / f"{stem}_cam_{cls}.csv", sal, delimiter=",")
        click.echo(f"wrote {out_png}")


@main.command("report")
@click.argument("dirs", nargs=-1, type=click.Path(exists=True))
@click.option("--out-csv", type=click.Path(), default=None)
def cmd_report(dirs, out_csv):
    """Tabulate accuracy and per-class F1 for run and ensemble directories."""
    import csv as _csv
    import json

    if not dirs:
        raise click.UsageError("at least one run or ensemble directory is required")
    rows = []
    for d in dirs:
        d = Path(d)
        agg_path = d / "aggregate.json"
        metrics_path = d / "metrics.json"
        if agg_path.exists():
            agg = metrics.AggregateResult.from_dict(json.loads(agg_path.read_text()))
            row = {
                "name": str(d),
                "accuracy": metrics.format_mean_std(agg.mean_accuracy, agg.std_accuracy),
                "_sort": agg.mean_accuracy,
            }
            for c in range(5):
                row[f"f1_class{c}"] = metrics.format_mean_std(agg.mean_f1[c], agg.std_f1[c])
        elif metrics_path.exists():
            result = metrics.RunResult.from_dict(json.loads(metrics_path.read_text()))
            row = {
                "name": str(d),
                "accuracy": f"{result.accuracy:.2f}",
                "_sort": result.accuracy,
            }
            for c in range(5):
                row[f"f1_class{c}"] = f"{result.f1_per_class[c]:.2f}"
        else:
            raise click.ClickException(f"{d} has neither metrics.json nor aggregate.json")
        rows.append(row)
    rows.sort(key=lambda r: -r["_sort"])
    header = ["name", "accuracy"] + [f"f1_class{c}" for c in range(5)]
    click.echo(metrics.render_table(rows, header), nl=False)
    if out_csv:
        with open(out_csv, "w", newline="", encoding="utf-8") as f:
            writer = _csv.writer(f)
            writer.writerow(header)
            for r in rows:
                writer.writerow([r[h] for h in header])


if __name__ == "__main__":
    main()
