"""Command-line surface wiring the pipeline stages.

Subcommands: tile, embed, synth, train, predict, evaluate, heatmap.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

File formats owned here:
  slide manifest (json):  {"slides": [{"slide_id": ..., "levels":
                          {"<level>": {"path": ..., "microns_per_pixel": x}}}]}
  tile manifest (tsv):    slide_id, level, x, y, width, height,
                          tissue_fraction, sharpness
  labels (tsv):           slide_id, case_id, label, center
  predictions (tsv):      slide_id, strategy, the three distributions,
                          votes, group, grade (header lists exact columns)
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import TileRef, task_by_name, TaskKind
from .embedding import (EmbeddingStore, encode_bag,
                        import_external, resolve_provider)
from .ensemble import (FinalPrediction, Strategy, TaskOutputs, predict_final)
from .errors import DataError, NancyMilError, NumericalError, UsageError
from .mil import MilModel, forward, distribution, load_checkpoint, \
    save_checkpoint
from .metrics import evaluate_grades
from .preprocess import (PROFILES, QcReport, QcThresholds, morph_cleanup,
                         plan_tiles, qc_filter, tissue_mask_from_rgb)
from .synthetic import SyntheticSpec, generate, save_ground_truth
from .training import (TrainConfig, train_task, write_history)

TILE_MANIFEST_COLUMNS = ("slide_id", "level", "x", "y", "width", "height",
                         "tissue_fraction", "sharpness")
PREDICTION_COLUMNS = (
    "slide_id", "strategy",
    "neu_lo", "neu_hi",
    "nl_0", "nl_1", "nl_hi",
    "nh_lo", "nh_2", "nh_3", "nh_4",
    "vote_neutrophil", "vote_nancy_low", "vote_nancy_high",
    "group", "grade")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out_dir: Path, command: str, args: dict,
                       outputs: list[Path], seed=None) -> Path:
    manifest = {
        "command": command,
        "args": {k: str(v) for k, v in args.items() if v is not None},
        "seed": seed,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "version": __version__,
        "outputs": {str(p): _sha256(p) for p in outputs if p.is_file()},
    }
    path = out_dir / "run_manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return path


def _load_image(path: Path) -> np.ndarray:
    from PIL import Image
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except FileNotFoundError:
        raise DataError(f"cannot read image {path}")
    except OSError as exc:
        raise DataError(f"cannot decode image {path}: {exc}")


def load_slide_manifest(path) -> list[dict]:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"slide manifest not found: {path}")
    except ValueError as exc:
        raise DataError(f"bad slide manifest {path}: {exc}")
    slides = data["slides"] if isinstance(data, dict) and "slides" in data \
        else [data]
    for s in slides:
        if "slide_id" not in s or "levels" not in s:
            raise DataError(f"slide manifest entry missing slide_id/levels: "
                            f"{s}")
    return slides


def read_labels(path) -> dict[str, dict]:
    out = {}
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            if not line.strip():
                continue
            row = dict(zip(header, line.rstrip("\n").split("\t")))
            out[row["slide_id"]] = {
                "case_id": row.get("case_id", row["slide_id"]),
                "label": int(row["label"]),
                "center": row.get("center", ""),
            }
    return out


# --- tile --------------------------------------------------------------------

def cmd_tile(args) -> int:
    profile = PROFILES[args.profile]
    thresholds = QcThresholds(min_tissue=args.min_tissue,
                              min_sharpness=args.min_sharpness)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    slides = load_slide_manifest(args.slide_manifest)
    ds = args.mask_downsample

    manifest_path = out_dir / "tiles.tsv"
    qc_path = out_dir / "qc_report.tsv"
    report = QcReport()
    n_accepted = 0
    with open(manifest_path, "w") as tf, open(qc_path, "w") as qf:
        tf.write("\t".join(TILE_MANIFEST_COLUMNS) + "\n")
        qf.write("\t".join(TILE_MANIFEST_COLUMNS +
                           ("accepted", "reason")) + "\n")
        for slide in slides:
            level_info = slide["levels"].get(str(profile.level))
            if level_info is None:
                raise DataError(f"slide {slide['slide_id']}: no image for "
                                f"level {profile.level}")
            rgb = _load_image(Path(level_info["path"]))
            h, w = rgb.shape[:2]
            from PIL import Image
            small = np.asarray(Image.fromarray(rgb).resize(
                (max(1, w // ds), max(1, h // ds)), Image.BILINEAR))
            mask = morph_cleanup(
                tissue_mask_from_rgb(small, mask_level=profile.level,
                                     downsample=float(ds)),
                radius=args.morph_radius, min_area=args.min_component_area)
            gray = rgb.astype(np.float64).mean(axis=-1)
            for tile in plan_tiles(slide["slide_id"], w, h, profile):
                my0, my1 = tile.y // ds, max(tile.y // ds + 1,
                                             (tile.y + tile.height) // ds)
                mx0, mx1 = tile.x // ds, max(tile.x // ds + 1,
                                             (tile.x + tile.width) // ds)
                row = qc_filter(
                    gray[tile.y:tile.y + tile.height,
                         tile.x:tile.x + tile.width],
                    mask.bits[my0:my1, mx0:mx1], tile, thresholds)
                report.rows.append(row)
                base = (f"{tile.slide_id}\t{tile.level}\t{tile.x}\t{tile.y}\t"
                        f"{tile.width}\t{tile.height}\t"
                        f"{row.tissue_fraction!r}\t{row.sharpness!r}")
                qf.write(f"{base}\t{int(row.accepted)}\t{row.reason.value}\n")
                if row.accepted:
                    tf.write(base + "\n")
                    n_accepted += 1
    write_run_manifest(out_dir, "tile", vars(args),
                       [manifest_path, qc_path], seed=None)
    if n_accepted == 0:
        raise DataError(f"no tiles passed quality control: "
                        f"{report.summary()}")
    print(f"accepted {n_accepted}/{len(report.rows)} tiles "
          f"({args.profile}) -> {manifest_path}")
    return 0


def read_tile_manifest(path) -> dict[str, list[TileRef]]:
    by_slide: dict[str, list[TileRef]] = {}
    try:
        fh = open(path)
    except FileNotFoundError:
        raise DataError(f"tile manifest not found: {path}")
    with fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header[:6]) != TILE_MANIFEST_COLUMNS[:6]:
            raise DataError(f"bad tile manifest header in {path}: {header}")
        for line in fh:
            if not line.strip():
                continue
            p = line.rstrip("\n").split("\t")
            ref = TileRef(slide_id=p[0], level=int(p[1]), x=int(p[2]),
                          y=int(p[3]), width=int(p[4]), height=int(p[5]),
                          microns_per_pixel=1.0)
            by_slide.setdefault(ref.slide_id, []).append(ref)
    return by_slide


# --- embed -------------------------------------------------------------------

def cmd_embed(args) -> int:
    out_dir = Path(args.out)
    provider = resolve_provider(args.provider)
    if isinstance(provider, tuple):  # ("file", path): import an external store
        _, src = provider
        if not (Path(src) / "manifest.json").exists():
            raise DataError(f"file provider: no store at {src}")
        store = import_external(src)
        store.save(out_dir)
        write_run_manifest(out_dir, "embed", vars(args),
                           [out_dir / n for n in
                            ("manifest.json", "payload.bin", "tilerefs.tsv")])
        print(f"imported {len(store)} bags (d={store.dim}) -> {out_dir}")
        return 0

    tiles_by_slide = read_tile_manifest(args.tile_manifest)
    labels = read_labels(args.labels)
    slides = {s["slide_id"]: s for s in load_slide_manifest(args.slide_manifest)}
    from .core import EmbeddingBag
    bags = []
    for slide_id in sorted(tiles_by_slide):
        refs = tiles_by_slide[slide_id]
        if slide_id not in labels:
            raise DataError(f"slide {slide_id} missing from labels file")
        if slide_id not in slides:
            raise DataError(f"slide {slide_id} missing from slide manifest")
        level = refs[0].level
        level_info = slides[slide_id]["levels"].get(str(level))
        if level_info is None:
            raise DataError(f"slide {slide_id}: no image for level {level}")
        rgb = _load_image(Path(level_info["path"]))
        mpp = float(level_info.get("microns_per_pixel", 1.0))
        refs = [TileRef(slide_id=r.slide_id, level=r.level, x=r.x, y=r.y,
                        width=r.width, height=r.height, microns_per_pixel=mpp)
                for r in refs]
        images = [rgb[r.y:r.y + r.height, r.x:r.x + r.width] for r in refs]
        vectors = encode_bag(images, provider)
        lab = labels[slide_id]
        H = np.array(vectors).astype(np.float32).astype(np.float64)
        bags.append(EmbeddingBag(slide_id=slide_id, case_id=lab["case_id"],
                                 tiles=refs, embeddings=H,
                                 label=lab["label"], center=lab["center"]))
    if not bags:
        raise DataError("tile manifest contains no tiles")
    store = EmbeddingStore(bags=bags, profile=args.profile or "")
    store.save(out_dir)
    write_run_manifest(out_dir, "embed", vars(args),
                       [out_dir / n for n in
                        ("manifest.json", "payload.bin", "tilerefs.tsv")])
    print(f"embedded {len(store)} bags (d={store.dim}, "
          f"provider={provider.name}) -> {out_dir}")
    return 0


# --- synth -------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        n_cases_per_grade=tuple(args.cases_per_grade),
        d=args.d, signal_fraction=args.fraction,
        cluster_separation=args.separation, seed=args.seed)
    store, signal = generate(spec)
    out_dir = Path(args.out)
    store.save(out_dir)
    gt_path = out_dir / "ground_truth.json"
    save_ground_truth(signal, gt_path)
    write_run_manifest(out_dir, "synth", vars(args),
                       [out_dir / n for n in
                        ("manifest.json", "payload.bin", "tilerefs.tsv")] +
                       [gt_path], seed=args.seed)
    print(f"generated {len(store)} bags (d={store.dim}) -> {out_dir}")
    return 0


# --- train -------------------------------------------------------------------

def cmd_train(args) -> int:
    overrides = {"seed": args.seed, "learning_rate": args.lr,
                 "max_epochs": args.max_epochs, "patience": args.patience,
                 "folds": args.folds, "balance": args.balance,
                 "attention_dim": args.attention_dim}
    if args.config:
        config = TrainConfig.from_file(args.config, **overrides)
    else:
        config = TrainConfig(**{k: v for k, v in overrides.items()
                                if v is not None})
    store = EmbeddingStore.load(args.store)
    task = task_by_name(args.task)
    result = train_task(store, task, config,
                        drop_placeholder=args.drop_placeholder)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for fr in result.folds:
        ck = out_dir / f"{args.task}_fold{fr.fold}.ckpt"
        save_checkpoint(fr.model, ck)
        hist = out_dir / f"{args.task}_fold{fr.fold}_history.tsv"
        write_history(hist, fr.history)
        outputs += [ck, hist]
    best = result.best
    best_path = out_dir / f"{args.task}_best.ckpt"
    save_checkpoint(best.model, best_path)
    outputs.append(best_path)
    with open(out_dir / f"{args.task}_summary.json", "w") as fh:
        json.dump({"task": args.task,
                   "config": config.to_dict(),
                   "drop_placeholder": args.drop_placeholder,
                   "deployed_fold": best.fold,
                   "fold_val_losses": {fr.fold: fr.best_val_loss
                                       for fr in result.folds}}, fh, indent=1)
    outputs.append(out_dir / f"{args.task}_summary.json")
    write_run_manifest(out_dir, "train", vars(args), outputs,
                       seed=config.seed)
    print(f"trained {args.task}: deployed fold {best.fold} "
          f"(val loss {best.best_val_loss:.4f}) -> {out_dir}")
    return 0


# --- predict -----------------------------------------------------------------

def _format_prediction(slide_id: str, outputs: TaskOutputs,
                       pred: FinalPrediction) -> str:
    # reduced (gate-mode) specialists report 0 for the missing placeholder
    nl = list(outputs.nancy_low) if len(outputs.nancy_low) == 3 else \
        list(outputs.nancy_low) + [0.0]
    nh = list(outputs.nancy_high) if len(outputs.nancy_high) == 4 else \
        [0.0] + list(outputs.nancy_high)
    cells = ([slide_id, pred.strategy.value]
             + [repr(float(x)) for x in outputs.neutrophil]
             + [repr(float(x)) for x in nl]
             + [repr(float(x)) for x in nh]
             + [v.value for v in pred.votes]
             + [pred.group.value, str(pred.grade)])
    return "\t".join(str(c) for c in cells)


def read_fixtures(path) -> dict[str, TaskOutputs]:
    out = {}
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        for line in fh:
            if not line.strip():
                continue
            row = dict(zip(header, line.rstrip("\n").split("\t")))
            out[row["slide_id"]] = TaskOutputs(
                neutrophil=np.array([float(row["neu_lo"]),
                                     float(row["neu_hi"])]),
                nancy_low=np.array([float(row["nl_0"]), float(row["nl_1"]),
                                    float(row["nl_hi"])]),
                nancy_high=np.array([float(row["nh_lo"]), float(row["nh_2"]),
                                     float(row["nh_3"]), float(row["nh_4"])]))
    return out


def slide_outputs(bag_H: np.ndarray, models: dict[TaskKind, MilModel]) \
        -> TaskOutputs:
    dists = {}
    for kind, model in models.items():
        trace = forward(bag_H, model)
        dists[kind] = distribution(trace.p, model.task)
    return TaskOutputs(neutrophil=dists[TaskKind.NEUTROPHIL],
                       nancy_low=dists[TaskKind.NANCY_LOW],
                       nancy_high=dists[TaskKind.NANCY_HIGH])


def cmd_predict(args) -> int:
    strategy = Strategy(args.strategy)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    if args.fixtures:
        fixtures = read_fixtures(args.fixtures)
        for slide_id in sorted(fixtures):
            outputs = fixtures[slide_id]
            rows.append(_format_prediction(
                slide_id, outputs, predict_final(outputs, strategy)))
    else:
        store = EmbeddingStore.load(args.store)
        models = {}
        for kind, path in ((TaskKind.NEUTROPHIL, args.neutrophil),
                           (TaskKind.NANCY_LOW, args.nancy_low),
                           (TaskKind.NANCY_HIGH, args.nancy_high)):
            if path is None:
                raise UsageError(f"missing checkpoint for {kind.value}")
            model = load_checkpoint(path)
            if store.bags and model.d != store.dim:
                raise DataError(f"checkpoint {path}: d={model.d} does not "
                                f"match store dim {store.dim}")
            models[kind] = model
        for bag in sorted(store.bags, key=lambda b: b.slide_id):
            outputs = slide_outputs(bag.embeddings, models)
            rows.append(_format_prediction(
                bag.slide_id, outputs, predict_final(outputs, strategy)))
    with open(out_path, "w") as fh:
        fh.write("\t".join(PREDICTION_COLUMNS) + "\n")
        for row in rows:
            fh.write(row + "\n")
    write_run_manifest(out_path.parent, "predict", vars(args), [out_path])
    print(f"wrote {len(rows)} predictions ({strategy.value}) -> {out_path}")
    return 0


def read_predictions(path) -> dict[str, int]:
    out = {}
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if tuple(header) != PREDICTION_COLUMNS:
            raise DataError(f"bad predictions header in {path}")
        for line in fh:
            if not line.strip():
                continue
            row = dict(zip(header, line.rstrip("\n").split("\t")))
            out[row["slide_id"]] = int(row["grade"])
    return out


# --- evaluate ----------------------------------------------------------------

def cmd_evaluate(args) -> int:
    preds = read_predictions(args.predictions)
    labels = read_labels(args.labels)
    missing = sorted(s for s in preds if s not in labels)
    if missing:
        raise DataError(f"predictions with no label entry: {missing}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    groups = {"overall": sorted(preds)}
    if args.center_column:
        for slide_id in preds:
            center = labels[slide_id].get(args.center_column) or \
                labels[slide_id]["center"]
            if center:
                groups.setdefault(f"center_{center}", []).append(slide_id)

    outputs = []
    for name, slide_ids in sorted(groups.items()):
        true = [labels[s]["label"] for s in slide_ids]
        pred = [preds[s] for s in slide_ids]
        report = evaluate_grades(true, pred, kappa_scheme=args.kappa_scheme)
        rpath = out_dir / f"report_{name}.json"
        with open(rpath, "w") as fh:
            json.dump(report.to_dict(), fh, indent=1)
        outputs.append(rpath)
        from .metrics import confusion
        cm = confusion(true, pred)
        cpath = out_dir / f"confusion_{name}.tsv"
        with open(cpath, "w") as fh:
            fh.write("true\\pred\t" + "\t".join(cm.labels) + "\n")
            for i, lab in enumerate(cm.labels):
                fh.write(lab + "\t" +
                         "\t".join(str(c) for c in cm.counts[i]) + "\n")
        outputs.append(cpath)
        if args.render:
            ipath = out_dir / f"confusion_{name}.png"
            _render_confusion(cm, ipath)
            outputs.append(ipath)
        kappa = "undefined" if report.kappa is None else f"{report.kappa:.4f}"
        print(f"{name}: n={report.n} acc={report.accuracy:.4f} "
              f"kappa[{args.kappa_scheme}]={kappa}")
    write_run_manifest(out_dir, "evaluate", vars(args), outputs)
    return 0


def _render_confusion(cm, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    norm = cm.normalized()
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    for i in range(len(cm.labels)):
        for j in range(len(cm.labels)):
            ax.text(j, i, f"{norm[i, j]:.2f}", ha="center", va="center",
                    fontsize=8)
    ax.set_xticks(range(len(cm.labels)), cm.labels)
    ax.set_yticks(range(len(cm.labels)), cm.labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# --- heatmap -----------------------------------------------------------------

def cmd_heatmap(args) -> int:
    store = EmbeddingStore.load(args.store)
    bag = store.get(args.slide)
    model = load_checkpoint(args.checkpoint)
    if model.d != store.dim:
        raise DataError(f"checkpoint d={model.d} vs store dim {store.dim}")
    trace = forward(bag.embeddings, model)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.mode == "attention":
        score_cols = ["attention"]
        scores = trace.a[:, None]
    else:
        # per-tile class probabilities from the instance logits
        if model.task.link.value == "sigmoid":
            from .mil import _sigmoid
            p_hi = np.array([_sigmoid(s) for s in trace.S[:, 0]])
            scores = np.stack([1.0 - p_hi, p_hi], axis=1)
        else:
            e = np.exp(trace.S - trace.S.max(axis=1, keepdims=True))
            scores = e / e.sum(axis=1, keepdims=True)
        score_cols = list(model.task.classes)

    spath = out_dir / f"{args.slide}_{args.mode}_scores.tsv"
    with open(spath, "w") as fh:
        fh.write("# schema_version=1\n")
        fh.write("# normalization=per-slide-minmax\n")
        fh.write("# colormap=viridis\n")
        fh.write(f"# task={model.task.kind.value} mode={args.mode}\n")
        fh.write("\t".join(("slide_id", "level", "x", "y", "width", "height")
                           + tuple(score_cols)) + "\n")
        for tile, row in zip(bag.tiles, scores):
            fh.write(f"{tile.slide_id}\t{tile.level}\t{tile.x}\t{tile.y}\t"
                     f"{tile.width}\t{tile.height}\t"
                     + "\t".join(repr(float(v)) for v in row) + "\n")
    outputs = [spath]
    for ci, col in enumerate(score_cols):
        ipath = out_dir / f"{args.slide}_{args.mode}_{col}.png"
        _render_heatmap(bag.tiles, scores[:, ci], ipath)
        outputs.append(ipath)
    write_run_manifest(out_dir, "heatmap", vars(args), outputs)
    print(f"wrote {args.mode} overlay for {args.slide} -> {out_dir}")
    return 0


def _render_heatmap(tiles, scores, path, max_extent: int = 1024) -> None:
    """Paint per-tile scores at tile geometry, per-slide min-max normalized,
    viridis colormap."""
    import matplotlib
    matplotlib.use("Agg")
    from matplotlib import colormaps
    from PIL import Image
    x1 = max(t.x + t.width for t in tiles)
    y1 = max(t.y + t.height for t in tiles)
    scale = max(1, int(np.ceil(max(x1, y1) / max_extent)))
    canvas = np.zeros((max(1, y1 // scale), max(1, x1 // scale)))
    lo, hi = float(np.min(scores)), float(np.max(scores))
    span = hi - lo if hi > lo else 1.0
    for t, v in zip(tiles, scores):
        canvas[t.y // scale:max(t.y // scale + 1, (t.y + t.height) // scale),
               t.x // scale:max(t.x // scale + 1, (t.x + t.width) // scale)] \
            = (v - lo) / span
    rgba = colormaps["viridis"](canvas)
    Image.fromarray((rgba[..., :3] * 255).astype(np.uint8)).save(path)


# --- parser ------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="nancymil",
                     description="Weakly supervised attention-MIL pipeline "
                                 "for five-grade histologic activity scoring")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tile", help="tissue detection, QC and tile planning")
    p.add_argument("--slide-manifest", required=True)
    p.add_argument("--profile", choices=sorted(PROFILES), default="T1")
    p.add_argument("--out", required=True)
    p.add_argument("--min-tissue", type=float, default=0.25)
    p.add_argument("--min-sharpness", type=float, default=10.0)
    p.add_argument("--morph-radius", type=int, default=2)
    p.add_argument("--min-component-area", type=int, default=64)
    p.add_argument("--mask-downsample", type=int, default=8)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("embed", help="encode tiles into an embedding store")
    p.add_argument("--tile-manifest")
    p.add_argument("--slide-manifest")
    p.add_argument("--labels")
    p.add_argument("--provider", required=True,
                   help="'synthetic:seed=<n>:d=<n>' or 'file:<path>'")
    p.add_argument("--profile", choices=sorted(PROFILES))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("synth", help="generate a planted-signal store")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--fraction", type=float, default=0.2)
    p.add_argument("--cases-per-grade", type=int, nargs=5,
                   default=[30, 30, 30, 30, 30])
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one task with k-fold CV")
    p.add_argument("--store", required=True)
    p.add_argument("--task", required=True,
                   choices=[k.value for k in TaskKind])
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="json file with TrainConfig fields; "
                                    "flags override")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--folds", type=int)
    p.add_argument("--balance", choices=["oversample", "undersample"])
    p.add_argument("--attention-dim", type=int)
    p.add_argument("--drop-placeholder", action="store_true",
                   help="gate-mode specialist without the group class")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="five-grade predictions per slide")
    p.add_argument("--store")
    p.add_argument("--neutrophil", help="neutrophil checkpoint")
    p.add_argument("--nancy-low", help="nancy-low checkpoint")
    p.add_argument("--nancy-high", help="nancy-high checkpoint")
    p.add_argument("--strategy", choices=[s.value for s in Strategy],
                   default="ensemble")
    p.add_argument("--fixtures",
                   help="tsv of raw distributions; bypasses checkpoints")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="metrics and confusion matrices")
    p.add_argument("--predictions", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kappa-scheme", choices=["quadratic", "linear"],
                   default="quadratic")
    p.add_argument("--center-column", default="center")
    p.add_argument("--no-centers", dest="center_column",
                   action="store_const", const=None)
    p.add_argument("--render", action="store_true",
                   help="also write confusion-matrix images")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("heatmap", help="attention / instance-score overlays")
    p.add_argument("--store", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--slide", required=True)
    p.add_argument("--mode", choices=["attention", "instance"],
                   default="attention")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except NancyMilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
