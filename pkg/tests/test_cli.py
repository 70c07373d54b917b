import json

import numpy as np
import pytest
from PIL import Image

from nancymil.cli import main, read_predictions
from nancymil.core import NANCY_HIGH, NANCY_LOW, NEUTROPHIL
from nancymil.ensemble import TaskOutputs, ensemble_predict, hierarchical_gate
from nancymil.embedding import EmbeddingStore
from nancymil.mil import MilModel, save_checkpoint


def make_slide_image(path, tissue=True):
    """640x640 PNG: textured saturated tissue on the left half, white right."""
    rng = np.random.default_rng(0)
    img = np.full((640, 640, 3), 255, dtype=np.uint8)
    if tissue:
        img[:, :320, 0] = rng.integers(150, 256, (640, 320))
        img[:, :320, 1] = rng.integers(0, 60, (640, 320))
        img[:, :320, 2] = rng.integers(80, 180, (640, 320))
    Image.fromarray(img).save(path)


def make_slide_manifest(path, image_path, slide_id="slideA", level=0):
    manifest = {"slides": [{"slide_id": slide_id,
                            "levels": {str(level): {
                                "path": str(image_path),
                                "microns_per_pixel": 0.17}}}]}
    path.write_text(json.dumps(manifest))


def fixture_row(slide_id, out):
    vals = ([slide_id] + [repr(float(v)) for v in out.neutrophil]
            + [repr(float(v)) for v in out.nancy_low]
            + [repr(float(v)) for v in out.nancy_high])
    return "\t".join(vals)


FIXTURE_HEADER = ("slide_id\tneu_lo\tneu_hi\tnl_0\tnl_1\tnl_hi\t"
                  "nh_lo\tnh_2\tnh_3\tnh_4")


# --- tile --------------------------------------------------------------------

def test_tile_two_tone_slide(tmp_path):
    img = tmp_path / "slide.png"
    make_slide_image(img)
    man = tmp_path / "slides.json"
    make_slide_manifest(man, img)
    out = tmp_path / "tiles"
    assert main(["tile", "--slide-manifest", str(man), "--profile", "T0",
                 "--out", str(out)]) == 0
    lines = (out / "tiles.tsv").read_text().splitlines()
    accepted = lines[1:]
    # only the two left-column tiles sit on tissue
    assert len(accepted) == 2
    assert all(row.split("\t")[2] == "0" for row in accepted)  # x == 0
    qc = (out / "qc_report.tsv").read_text().splitlines()
    assert len(qc) == 1 + 4  # header + one row per planned tile
    assert sum("low_tissue" in row for row in qc) == 2


def test_tile_rerun_is_deterministic(tmp_path):
    img = tmp_path / "slide.png"
    make_slide_image(img)
    man = tmp_path / "slides.json"
    make_slide_manifest(man, img)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    for out in (out1, out2):
        assert main(["tile", "--slide-manifest", str(man), "--profile", "T0",
                     "--out", str(out)]) == 0
    m1 = json.loads((out1 / "run_manifest.json").read_text())
    m2 = json.loads((out2 / "run_manifest.json").read_text())
    assert sorted(m1["outputs"].values()) == sorted(m2["outputs"].values())


def test_tile_blank_slide_exit_2(tmp_path):
    img = tmp_path / "blank.png"
    make_slide_image(img, tissue=False)
    man = tmp_path / "slides.json"
    make_slide_manifest(man, img)
    assert main(["tile", "--slide-manifest", str(man), "--profile", "T0",
                 "--out", str(tmp_path / "out")]) == 2


def test_tile_missing_manifest_exit_2(tmp_path):
    assert main(["tile", "--slide-manifest", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path / "out")]) == 2


def test_bad_subcommand_exit_1():
    assert main(["frobnicate"]) == 1
    assert main(["tile"]) == 1  # missing required flags


# --- embed -------------------------------------------------------------------

def _tiled_slide(tmp_path):
    img = tmp_path / "slide.png"
    make_slide_image(img)
    man = tmp_path / "slides.json"
    make_slide_manifest(man, img)
    out = tmp_path / "tiles"
    assert main(["tile", "--slide-manifest", str(man), "--profile", "T0",
                 "--out", str(out)]) == 0
    labels = tmp_path / "labels.tsv"
    labels.write_text("slide_id\tcase_id\tlabel\tcenter\n"
                      "slideA\tcase1\t3\tcenterA\n")
    return man, out / "tiles.tsv", labels


def test_embed_payload_size_and_determinism(tmp_path):
    man, tiles, labels = _tiled_slide(tmp_path)
    args = ["embed", "--tile-manifest", str(tiles), "--slide-manifest",
            str(man), "--labels", str(labels), "--provider",
            "synthetic:seed=0:d=64", "--profile", "T0"]
    s1, s2 = tmp_path / "emb1", tmp_path / "emb2"
    assert main(args + ["--out", str(s1)]) == 0
    assert main(args + ["--out", str(s2)]) == 0
    # 2 accepted tiles, d=64, float32
    assert (s1 / "payload.bin").stat().st_size == 2 * 64 * 4
    assert (s1 / "payload.bin").read_bytes() == (s2 / "payload.bin").read_bytes()
    store = EmbeddingStore.load(s1)
    bag = store.get("slideA")
    assert bag.label == 3 and bag.case_id == "case1" and bag.n_tiles == 2


def test_embed_file_provider_roundtrip(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "src"), "--seed", "1",
                 "--cases-per-grade", "1", "1", "1", "1", "1"]) == 0
    assert main(["embed", "--provider", f"file:{tmp_path / 'src'}",
                 "--out", str(tmp_path / "dst")]) == 0
    assert (tmp_path / "dst" / "payload.bin").read_bytes() == \
        (tmp_path / "src" / "payload.bin").read_bytes()


def test_embed_file_provider_missing_store(tmp_path):
    assert main(["embed", "--provider", f"file:{tmp_path / 'absent'}",
                 "--out", str(tmp_path / "dst")]) == 2


def test_embed_unknown_provider(tmp_path):
    assert main(["embed", "--provider", "quantum", "--out",
                 str(tmp_path / "o")]) == 1


def test_embed_missing_label(tmp_path):
    man, tiles, labels = _tiled_slide(tmp_path)
    labels.write_text("slide_id\tcase_id\tlabel\tcenter\n"
                      "otherSlide\tcase1\t3\tcenterA\n")
    assert main(["embed", "--tile-manifest", str(tiles), "--slide-manifest",
                 str(man), "--labels", str(labels), "--provider",
                 "synthetic", "--out", str(tmp_path / "emb")]) == 2


# --- synth + train + predict + heatmap pipeline -------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    store = root / "store"
    assert main(["synth", "--out", str(store), "--seed", "0", "--d", "16",
                 "--cases-per-grade", "6", "6", "6", "6", "6"]) == 0
    models = root / "models"
    for task in ("neutrophil", "nancy-low", "nancy-high"):
        assert main(["train", "--store", str(store), "--task", task,
                     "--out", str(models), "--lr", "1e-2", "--max-epochs", "4",
                     "--patience", "4", "--folds", "2", "--seed", "0",
                     "--attention-dim", "8"]) == 0
    return root, store, models


def test_train_outputs(trained):
    _, _, models = trained
    for task in ("neutrophil", "nancy-low", "nancy-high"):
        assert (models / f"{task}_best.ckpt").exists()
        for f in range(2):
            assert (models / f"{task}_fold{f}.ckpt").exists()
            hist = (models / f"{task}_fold{f}_history.tsv").read_text()
            assert hist.splitlines()[0] == \
                "epoch\ttrain_loss\tval_loss\tbest_so_far"
        summary = json.loads((models / f"{task}_summary.json").read_text())
        assert summary["deployed_fold"] in (0, 1)


def test_predict_from_store_and_evaluate(trained, tmp_path):
    root, store, models = trained
    preds = tmp_path / "pred.tsv"
    assert main(["predict", "--store", str(store),
                 "--neutrophil", str(models / "neutrophil_best.ckpt"),
                 "--nancy-low", str(models / "nancy-low_best.ckpt"),
                 "--nancy-high", str(models / "nancy-high_best.ckpt"),
                 "--strategy", "ensemble", "--out", str(preds)]) == 0
    grades = read_predictions(preds)
    assert len(grades) == len(EmbeddingStore.load(store))
    assert all(0 <= g <= 4 for g in grades.values())
    # evaluate against the store's own labels
    labels = tmp_path / "labels.tsv"
    with open(labels, "w") as fh:
        fh.write("slide_id\tcase_id\tlabel\tcenter\n")
        for b in EmbeddingStore.load(store).bags:
            fh.write(f"{b.slide_id}\t{b.case_id}\t{b.label}\t{b.center}\n")
    out = tmp_path / "eval"
    assert main(["evaluate", "--predictions", str(preds), "--labels",
                 str(labels), "--out", str(out)]) == 0
    assert (out / "report_overall.json").exists()
    # two centers in the synthetic data -> overall + 2 center reports
    reports = sorted(p.name for p in out.glob("report_*.json"))
    assert reports == ["report_center_centerA.json",
                       "report_center_centerB.json", "report_overall.json"]


def test_predict_dim_mismatch_exit_2(trained, tmp_path):
    root, store, models = trained
    other = tmp_path / "wrongdim"
    assert main(["synth", "--out", str(other), "--seed", "0", "--d", "32",
                 "--cases-per-grade", "1", "1", "1", "1", "1"]) == 0
    assert main(["predict", "--store", str(other),
                 "--neutrophil", str(models / "neutrophil_best.ckpt"),
                 "--nancy-low", str(models / "nancy-low_best.ckpt"),
                 "--nancy-high", str(models / "nancy-high_best.ckpt"),
                 "--out", str(tmp_path / "p.tsv")]) == 2


def test_predict_empty_store_succeeds(tmp_path):
    empty = tmp_path / "empty"
    EmbeddingStore(bags=[]).save(empty)
    ckpts = {}
    for task in (NEUTROPHIL, NANCY_LOW, NANCY_HIGH):
        p = tmp_path / f"{task.kind.value}.ckpt"
        save_checkpoint(MilModel.init(task, d=8, m=4, seed=0), p)
        ckpts[task.kind.value] = p
    out = tmp_path / "pred.tsv"
    assert main(["predict", "--store", str(empty),
                 "--neutrophil", str(ckpts["neutrophil"]),
                 "--nancy-low", str(ckpts["nancy-low"]),
                 "--nancy-high", str(ckpts["nancy-high"]),
                 "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 1  # header only


def test_heatmap_attention_and_instance(trained, tmp_path):
    root, store, models = trained
    slide = EmbeddingStore.load(store).bags[0].slide_id
    out = tmp_path / "hm"
    assert main(["heatmap", "--store", str(store), "--checkpoint",
                 str(models / "nancy-high_best.ckpt"), "--slide", slide,
                 "--mode", "attention", "--out", str(out)]) == 0
    spath = out / f"{slide}_attention_scores.tsv"
    lines = [l for l in spath.read_text().splitlines()
             if not l.startswith("#")]
    scores = [float(l.split("\t")[-1]) for l in lines[1:]]
    assert sum(scores) == pytest.approx(1.0, abs=1e-9)
    assert (out / f"{slide}_attention_attention.png").exists()

    assert main(["heatmap", "--store", str(store), "--checkpoint",
                 str(models / "nancy-high_best.ckpt"), "--slide", slide,
                 "--mode", "instance", "--out", str(out)]) == 0
    ipath = out / f"{slide}_instance_scores.tsv"
    rows = [l.split("\t") for l in ipath.read_text().splitlines()
            if not l.startswith("#")][1:]
    for r in rows:
        probs = [float(v) for v in r[-4:]]
        assert sum(probs) == pytest.approx(1.0, abs=1e-9)
    for cls in ("Lo", "2", "3", "4"):
        assert (out / f"{slide}_instance_{cls}.png").exists()


def test_heatmap_unknown_slide_exit_2(trained, tmp_path):
    root, store, models = trained
    assert main(["heatmap", "--store", str(store), "--checkpoint",
                 str(models / "neutrophil_best.ckpt"), "--slide", "ghost",
                 "--out", str(tmp_path / "hm")]) == 2


# --- predict via fixtures -----------------------------------------------------

def test_predict_fixtures_matches_oracle(tmp_path):
    rng = np.random.default_rng(4)
    outs = {}
    rows = [FIXTURE_HEADER]
    for i in range(25):
        out = TaskOutputs(neutrophil=rng.dirichlet(np.ones(2)),
                          nancy_low=rng.dirichlet(np.ones(3)),
                          nancy_high=rng.dirichlet(np.ones(4)))
        outs[f"s{i:02d}"] = out
        rows.append(fixture_row(f"s{i:02d}", out))
    fixtures = tmp_path / "fixtures.tsv"
    fixtures.write_text("\n".join(rows) + "\n")
    for strategy, oracle in (("ensemble", ensemble_predict),
                             ("gate", hierarchical_gate)):
        pred_path = tmp_path / f"{strategy}.tsv"
        assert main(["predict", "--fixtures", str(fixtures), "--strategy",
                     strategy, "--out", str(pred_path)]) == 0
        grades = read_predictions(pred_path)
        for slide_id, out in outs.items():
            assert grades[slide_id] == oracle(out).grade


def test_fixtures_where_gate_and_ensemble_disagree(tmp_path):
    # neutrophil says Hi, both specialists say Lo
    out = TaskOutputs(neutrophil=np.array([0.1, 0.9]),
                      nancy_low=np.array([0.5, 0.3, 0.2]),
                      nancy_high=np.array([0.7, 0.1, 0.1, 0.1]))
    fixtures = tmp_path / "f.tsv"
    fixtures.write_text(FIXTURE_HEADER + "\n" + fixture_row("s0", out) + "\n")
    results = {}
    for strategy in ("ensemble", "gate"):
        p = tmp_path / f"{strategy}.tsv"
        assert main(["predict", "--fixtures", str(fixtures), "--strategy",
                     strategy, "--out", str(p)]) == 0
        results[strategy] = read_predictions(p)["s0"]
    assert results["ensemble"] <= 1 < results["gate"]


# --- evaluate ------------------------------------------------------------------

def _write_predictions(path, grades):
    from nancymil.cli import PREDICTION_COLUMNS
    with open(path, "w") as fh:
        fh.write("\t".join(PREDICTION_COLUMNS) + "\n")
        for slide_id, g in grades.items():
            filler = ["0.5", "0.5", "0.3", "0.3", "0.4",
                      "0.25", "0.25", "0.25", "0.25",
                      "Lo", "Lo", "Lo", "Lo"]
            fh.write("\t".join([slide_id, "ensemble"] + filler
                               + [str(g)]) + "\n")


def test_evaluate_perfect_predictions(tmp_path):
    grades = {f"s{i}": i % 5 for i in range(20)}
    preds = tmp_path / "p.tsv"
    _write_predictions(preds, grades)
    labels = tmp_path / "l.tsv"
    with open(labels, "w") as fh:
        fh.write("slide_id\tcase_id\tlabel\tcenter\n")
        for s, g in grades.items():
            fh.write(f"{s}\tc_{s}\t{g}\t\n")
    out = tmp_path / "eval"
    assert main(["evaluate", "--predictions", str(preds), "--labels",
                 str(labels), "--out", str(out), "--no-centers"]) == 0
    report = json.loads((out / "report_overall.json").read_text())
    assert report["accuracy"] == 1.0
    assert report["weighted_kappa"] == pytest.approx(1.0)
    assert report["spearman_rho"] == pytest.approx(1.0)
    cm = (out / "confusion_overall.tsv").read_text().splitlines()
    assert len(cm) == 6  # header + 5 grade rows


def test_evaluate_unmatched_slide_exit_2(tmp_path):
    preds = tmp_path / "p.tsv"
    _write_predictions(preds, {"s0": 1})
    labels = tmp_path / "l.tsv"
    labels.write_text("slide_id\tcase_id\tlabel\tcenter\nother\tc\t1\t\n")
    assert main(["evaluate", "--predictions", str(preds), "--labels",
                 str(labels), "--out", str(tmp_path / "e")]) == 2
