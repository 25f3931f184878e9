"""Command line entry point: ``ctxbias <subcommand> -c config.yaml``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training
divergence.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
import sys
import warnings
from pathlib import Path

import click
import numpy as np

from .bias import identify_pairs, load_pairs, save_pairs
from .camviz import image_cams, overlay, save_png
from .config import ConfigError, ExperimentConfig
from .data import (DataError, LabeledDataset, SyntheticConfig, generate_synthetic,
                   load_annotations, partition_train_val, read_matrix, save_image_dataset,
                   write_matrix)
from .evaluation import cosine_similarity_report, cross_dataset_evaluate, evaluate
from .inference import eval_images
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .training import TrainingDivergence, TrainResult, train_stage2, train_standard

log = logging.getLogger("ctxbias")

MANIFEST = "manifest.json"


# -- run directory helpers -----------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _tree_hashes(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): _sha256(p)
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != MANIFEST}


def _write_config_copy(cfg: ExperimentConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump(), encoding="utf-8")


def _manifest(out: Path) -> dict:
    path = out / "data" / MANIFEST
    if not path.exists():
        raise ConfigError(f"{out}: data not prepared (run prepare-data first)")
    return json.loads(path.read_text(encoding="utf-8"))


def load_split(cfg: ExperimentConfig, split: str) -> LabeledDataset:
    out = cfg.output_dir
    manifest = _manifest(out)
    if split not in manifest["splits"]:
        raise DataError(f"split {split!r} was not prepared")
    entry = manifest["splits"][split]
    d = read_matrix(out / "data" / split / "labels.csv", split,
                    image_dir=entry.get("image_dir"))
    d.image_pattern = entry.get("image_pattern", d.image_pattern)
    boxes = out / "data" / split / "boxes.json"
    if boxes.exists():
        raw = json.loads(boxes.read_text(encoding="utf-8"))
        d.boxes = {k: {int(c): tuple(v) for c, v in b.items()} for k, b in raw.items()}
    return d


def train_and_val(cfg: ExperimentConfig):
    train = load_split(cfg, "train")
    frac = cfg["data"]["val_fraction"]
    if frac:
        return partition_train_val(train, 1.0 - float(frac), cfg.seed)
    return train, None


def _ckpt(cfg: ExperimentConfig, name: str) -> Path:
    return cfg.output_dir / "checkpoints" / f"{name}.pt"


def _load_result(cfg: ExperimentConfig, name: str) -> TrainResult:
    return TrainResult.from_state(load_checkpoint(_ckpt(cfg, name)))


def _pairs(cfg: ExperimentConfig, dataset: LabeledDataset):
    path = cfg.output_dir / "pairs.json"
    if not path.exists():
        raise ConfigError(f"{path} missing (run find-pairs first)")
    return load_pairs(path, dataset)


# -- shared options ------------------------------------------------------------

def with_config(fn):
    @click.option("-c", "--config", "config_path", type=click.Path(dir_okay=False),
                  default=None, help="YAML experiment config.")
    @click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                  help="Override a config key (dotted path), e.g. standard.epochs=3.")
    @functools.wraps(fn)
    def wrapper(config_path, overrides, **kw):
        cfg = ExperimentConfig.load(config_path, overrides)
        _write_config_copy(cfg, cfg.output_dir)
        return fn(cfg, **kw)
    return wrapper


@click.group()
@click.option("-v", "--verbose", count=True)
def cli(verbose):
    """Contextual-bias experiments: data, pairs, training, evaluation."""
    level = logging.WARNING - 10 * verbose
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(message)s")


# -- subcommands ---------------------------------------------------------------

@cli.command("prepare-data")
@with_config
def prepare_data(cfg: ExperimentConfig):
    """Generate or ingest datasets into <output>/data."""
    data_dir = cfg.output_dir / "data"
    mpath = data_dir / MANIFEST
    if mpath.exists():
        old = json.loads(mpath.read_text(encoding="utf-8"))
        if old.get("config_hash") == cfg.data_hash() and old.get("files") == _tree_hashes(data_dir):
            click.echo(f"{data_dir}: up to date")
            return
    d = cfg["data"]
    splits = {}
    if d["source"] == "synthetic":
        syn = dict(d["synthetic"])
        n_test = syn.pop("test_images")
        seed = syn.pop("seed", cfg.seed)
        common = dict(syn, pair_specs=tuple(tuple(p) for p in syn["pair_specs"]))
        common.pop("num_images")
        try:
            train = generate_synthetic(SyntheticConfig(num_images=syn["num_images"], seed=2 * seed,
                                                       split="train", prefix="tr", **common))
            test = generate_synthetic(SyntheticConfig(num_images=n_test, seed=2 * seed + 1,
                                                      split="test", prefix="te", **common))
        except TypeError as exc:
            raise ConfigError(f"data.synthetic: {exc}") from exc
        for name, ds in (("train", train), ("test", test)):
            save_image_dataset(ds, data_dir / name)
            splits[name] = {"image_dir": str((data_dir / name / "images").resolve()),
                            "image_pattern": "{id}.png", "size": len(ds)}
    else:
        for name in ("train", "test"):
            if not d[name]:
                continue
            ds = load_annotations(d[name], d["source"] if d["source"] == "coco" else d["format"],
                                  name)
            write_matrix(ds, data_dir / name / "labels.csv")
            img = d.get(f"{name}_images")
            splits[name] = {"image_dir": str(Path(img).resolve()) if img else None,
                            "image_pattern": d["image_pattern"], "size": len(ds)}
    manifest = {"config_hash": cfg.data_hash(), "splits": splits,
                "files": _tree_hashes(data_dir)}
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    click.echo(f"{data_dir}: " + ", ".join(f"{k}={v['size']}" for k, v in splits.items()))


@cli.command("find-pairs")
@with_config
def find_pairs(cfg: ExperimentConfig):
    """Identify the top-K biased (b, c) pairs with the standard model."""
    pc = cfg["pairs"]
    split = pc["split"]
    if split == "auto":
        split = "val" if cfg["data"]["val_fraction"] else "test"
    if split == "val":
        _, dataset = train_and_val(cfg)
        if dataset is None:
            raise ConfigError("pairs.split=val needs data.val_fraction")
    else:
        dataset = load_split(cfg, split)
    out = cfg.output_dir / "pairs.json"
    if pc["source"] == "file":
        pairs = load_pairs(pc["path"], dataset)
    else:
        std = _load_result(cfg, "standard")
        preds = std.predict(dataset, cfg["evaluation"]["batch_size"])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            pairs = identify_pairs(preds, dataset, pc["k"], pc["threshold"], pc["candidates"])
        for w in caught:
            click.echo(f"warning: {w.message}", err=True)
    save_pairs(pairs, out, dataset.category_names)
    click.echo(f"{out}: {len(pairs)} pairs")


def _train(cfg: ExperimentConfig, method: str, tag: str | None = None, **spec_overrides):
    train, val = train_and_val(cfg)
    history = cfg.output_dir / "history.jsonl"
    name = tag or method
    if method == "standard":
        s1 = cfg.standard_config()
        val_pairs = None
        if s1.selection != "last" and (cfg.output_dir / "pairs.json").exists():
            val_pairs = _pairs(cfg, train)
        result = train_standard(train, s1, val if s1.selection != "last" else None, val_pairs,
                                history_path=history, history_tag={"run": name})
    else:
        spec = cfg.method_spec(method, **spec_overrides)
        pairs = _pairs(cfg, train)
        standard = None
        if method != "split_biased":
            path = _ckpt(cfg, "standard")
            standard = load_checkpoint(path, expected_categories=train.num_categories)
        result = train_stage2(spec, standard, train,
                              pairs, val if spec.train.selection != "last" else None,
                              history, cfg.standard_config(), history_tag={"run": name})
    save_checkpoint(result.to_state(), _ckpt(cfg, name))
    return result


@cli.command("train")
@click.option("--method", default=None, help="standard or a stage-2 method (default: config).")
@click.option("--tag", default=None, help="Checkpoint/report name (default: method name).")
@with_config
def train_cmd(cfg: ExperimentConfig, method, tag):
    """Train the standard model or a stage-2 method."""
    method = method or cfg["method"]["name"]
    result = _train(cfg, method, tag)
    last = result.history[-1] if result.history else {}
    click.echo(f"{_ckpt(cfg, tag or method)}: epoch {result.epoch}, loss {last.get('loss', float('nan')):.4f}")


def _evaluate(cfg: ExperimentConfig, name: str):
    test = load_split(cfg, "test")
    result = _load_result(cfg, name)
    pairs = _pairs(cfg, test)
    ev = cfg["evaluation"]
    preds = result.predict(test, ev["batch_size"])
    report = evaluate(preds, test, pairs, ev["metric"], ev["non_biased"])
    reports = cfg.output_dir / "reports"
    report.save(reports, name)
    weight = result.model.fc.weight.detach().double().numpy().T
    extra = {}
    if weight.shape[1] == test.num_categories:
        o_rows = None
        if result.split is not None and 2 * result.split.d_o == weight.shape[0]:
            o_rows = result.split.o_rows.numpy()
        if result.split is None or o_rows is not None:
            extra["cosine_similarity"] = cosine_similarity_report(weight, pairs, o_rows, cfg.seed)
    if ev["external"]:
        ext = ev["external"]
        ext_ds = load_annotations(ext["path"], ext.get("format", "matrix"), "test",
                                  image_dir=ext.get("images"))
        ext_preds = result.predict(ext_ds, ev["batch_size"])
        names = [test.category_names[p.b] for p in pairs]
        extra["external"] = cross_dataset_evaluate(ext_preds, ext_ds, names, test.category_names)
    if extra:
        (reports / f"{name}_extra.json").write_text(
            json.dumps(extra, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report


@cli.command("evaluate")
@click.option("--method", default=None)
@with_config
def evaluate_cmd(cfg: ExperimentConfig, method):
    """Score a checkpoint on the exclusive / co-occur test distributions."""
    name = method or cfg["method"]["name"]
    report = _evaluate(cfg, name)
    agg = report.aggregates
    click.echo(f"{name}: " + "  ".join(f"{k}={v:.4f}" for k, v in agg.items()))


def _floats(text):
    return [float(v) for v in text.split(",")] if text else None


@cli.command("ablate")
@click.option("--lambda2", "lambda2", default=None, help="Comma list (default: config).")
@click.option("--xo-size", "xo_size", default=None, help="Comma list of x_o dimensions.")
@with_config
def ablate(cfg: ExperimentConfig, lambda2, xo_size):
    """Sweep CAM-based lambda2 and feature-split subspace size."""
    lam = _floats(lambda2) if lambda2 else cfg["ablation"]["lambda2"]
    xo = [int(v) for v in _floats(xo_size)] if xo_size else cfg["ablation"]["xo_size"]
    rows = []
    for v in lam or []:
        tag = f"ablate_cam_lambda2_{v:g}"
        _train(cfg, "cam_based", tag, lambda2=float(v))
        rows.append(("lambda2", f"{v:g}", _evaluate(cfg, tag).aggregates))
    for v in xo or []:
        tag = f"ablate_fs_xo_{int(v)}"
        _train(cfg, "feature_split", tag, d_o=int(v))
        rows.append(("xo_size", str(int(v)), _evaluate(cfg, tag).aggregates))
    reports = cfg.output_dir / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    cols = ["exclusive", "cooccur", "all", "non_biased"]
    csv_lines = ["sweep,value," + ",".join(cols)]
    md = ["| Sweep | Value | Exclusive | Co-occur | All | Non-biased |",
          "|---|---|---|---|---|---|"]
    for sweep, val, agg in rows:
        csv_lines.append(f"{sweep},{val}," + ",".join(repr(agg[c]) for c in cols))
        md.append(f"| {sweep} | {val} | " + " | ".join(_pct(agg[c]) for c in cols) + " |")
    (reports / "ablation.csv").write_text("\n".join(csv_lines) + "\n", encoding="utf-8")
    (reports / "ablation.md").write_text("\n".join(md) + "\n", encoding="utf-8")
    click.echo("\n".join(md))


def _pct(v) -> str:
    return "-" if v is None or v != v else f"{100 * v:.1f}"


@cli.command("cam-export")
@click.option("--method", default=None)
@click.option("--ids", required=True, help="Comma-separated test image ids.")
@click.option("--categories", required=True, help="Comma-separated category names or indices.")
@click.option("--scale", default=4, show_default=True, help="Nearest-neighbour upscaling.")
@with_config
def cam_export(cfg: ExperimentConfig, method, ids, categories, scale):
    """Write CAM heatmap overlays (W_o / W_s maps too for split heads)."""
    name = method or cfg["method"]["name"]
    test = load_split(cfg, "test")
    result = _load_result(cfg, name)
    cats = [test.category_index(int(c) if c.isdigit() else c) for c in categories.split(",")]
    rows = []
    for i in ids.split(","):
        try:
            rows.append(test.index_of(i))
        except KeyError as exc:
            raise DataError(str(exc)) from None
    sub = test.subset(rows)
    images = eval_images(sub, result.preprocess)
    out = cfg.output_dir / "figures" / "cam" / name
    out.mkdir(parents=True, exist_ok=True)
    variants = {"": None}
    if result.split is not None:
        variants["_wo"] = result.split.o_rows.numpy()
        variants["_ws"] = result.split.s_rows.numpy()
    written = 0
    for suffix, rows_sel in variants.items():
        maps = image_cams(result.model, images, cats, rows=rows_sel)
        for k, image_id in enumerate(sub.ids):
            for j, c in enumerate(cats):
                save_png(overlay(images[k], maps[k, j]),
                         out / f"{image_id}_{test.category_names[c]}{suffix}.png", scale)
                written += 1
    click.echo(f"{out}: {written} overlays")


@cli.command("report")
@click.argument("run_dirs", nargs=-1, required=True, type=click.Path(file_okay=False))
@click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False),
              help="Where to write comparison.md / comparison.png (default: first run).")
def report_cmd(run_dirs, out_dir):
    """Compare evaluation reports across methods and runs."""
    entries = []
    for rd in run_dirs:
        rd = Path(rd)
        for path in sorted((rd / "reports").glob("*.json")):
            doc = json.loads(path.read_text(encoding="utf-8"))
            if "aggregates" not in doc:
                continue
            label = path.stem if len(run_dirs) == 1 else f"{rd.name}/{path.stem}"
            entries.append((label, doc["aggregates"]))
    if not entries:
        raise DataError("no evaluation reports found")
    out = Path(out_dir or run_dirs[0])
    (out / "reports").mkdir(parents=True, exist_ok=True)
    (out / "figures").mkdir(parents=True, exist_ok=True)
    md = ["| Method | Exclusive | Co-occur | Non-biased | All |", "|---|---|---|---|---|"]
    for label, agg in entries:
        md.append(f"| {label} | {_pct(agg['exclusive'])} | {_pct(agg['cooccur'])} | "
                  f"{_pct(agg.get('non_biased'))} | {_pct(agg['all'])} |")
    (out / "reports" / "comparison.md").write_text("\n".join(md) + "\n", encoding="utf-8")
    _comparison_plot(entries, out / "figures" / "comparison.png")
    click.echo("\n".join(md))


def _comparison_plot(entries, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [e[0] for e in entries]
    fig, axes = plt.subplots(1, 2, figsize=(max(6, 1.2 * len(labels) + 2), 3.5), sharey=True)
    for ax, key, title in zip(axes, ("exclusive", "cooccur"), ("Exclusive", "Co-occur")):
        vals = [100 * (e[1][key] if e[1][key] is not None else np.nan) for e in entries]
        ax.bar(range(len(labels)), vals, color="tab:blue")
        ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
        ax.set_title(title)
        ref = vals[labels.index("standard")] if "standard" in labels else None
        if ref is not None and ref == ref:
            ax.axhline(ref, color="tab:red", lw=1)
    axes[0].set_ylabel("score (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


@cli.command("pipeline")
@click.option("--method", "methods", multiple=True, help="Stage-2 methods (repeatable).")
@with_config
def pipeline(cfg: ExperimentConfig, methods):
    """prepare-data, train standard, find-pairs, then train and evaluate each method."""
    prepare_data.callback.__wrapped__(cfg)
    train_cmd.callback.__wrapped__(cfg, method="standard", tag=None)
    find_pairs.callback.__wrapped__(cfg)
    evaluate_cmd.callback.__wrapped__(cfg, method="standard")
    for m in methods or (cfg["method"]["name"],):
        train_cmd.callback.__wrapped__(cfg, method=m, tag=None)
        evaluate_cmd.callback.__wrapped__(cfg, method=m)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="ctxbias", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except (ConfigError, CheckpointError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except TrainingDivergence as exc:
        click.echo(f"training diverged: {exc}", err=True)
        return 3
    return 0


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
