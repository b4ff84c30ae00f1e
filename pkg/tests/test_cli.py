import csv
import json

import numpy as np
import pytest

from conftest import random_bank_weights
from fsd import cli, store
from fsd.filterbank import FilterBank
from fsd.imaging import save_png

SMALL_DESCRIBE = ["--b", "5", "--scales", "2", "--max-iters", "300"]


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def write_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label"])
        w.writerows(rows)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def subset_manifest(src, dst, keep):
    rows = [(str(src.parent / r["path"]), r["label"]) for r in read_csv(src) if keep(r)]
    return write_manifest(dst, rows)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    spec = {
        "count": 16, "size": 48, "noise": 0.04,
        "sources": [
            {"source_id": "real"},
            {"source_id": "gen_gauss3", "kernel": "gauss3"},
            {"source_id": "gen_hblur", "kernel": "hblur"},
        ],
    }
    (root / "spec.json").write_text(json.dumps(spec))
    assert cli.main(["synth-sources", "--spec", str(root / "spec.json"), "--out-dir", str(root / "data")]) == 0
    manifest = root / "data" / "manifest.csv"
    real = subset_manifest(manifest, root / "data" / "real.csv", lambda r: r["label"] == "real")
    bank = root / "bank.json"
    assert cli.main(["train-filters", "--manifest", str(real), "--out", str(bank), "--k", "2", "--m", "3",
                     "--crop", "32", "--max-steps", "20", "--seed", "1"]) == 0
    feats = root / "all.fsdf"
    assert cli.main(["describe", "--manifest", str(manifest), "--bank", str(bank), "--out", str(feats)]
                    + SMALL_DESCRIBE) == 0
    return {"root": root, "manifest": manifest, "real": real, "bank": bank, "features": feats}


class TestTrainFilters:
    def test_constant_images(self, tmp_path, capsys):
        for i in range(3):
            save_png(np.full((40, 40), 0.5), tmp_path / f"c{i}.png")
        m = write_manifest(tmp_path / "m.csv", [(f"c{i}.png", "real") for i in range(3)])
        code, out, _ = run(["train-filters", "--manifest", m, "--out", tmp_path / "b.json", "--k", "2", "--m", "5",
                            "--crop", "32", "--max-steps", "5"], capsys)
        assert code == 0
        le = float(out.splitlines()[0].split("=")[1])
        assert le <= 1e-24  # zero up to rounding of taps that sum to 1
        bank = store.load_model(tmp_path / "b.json", expect="filter_bank").model
        assert bank.k == 2 and bank.m == 5

    def test_missing_manifest(self, tmp_path, capsys):
        code, _, err = run(["train-filters", "--manifest", tmp_path / "nope.csv", "--out", tmp_path / "b.json"], capsys)
        assert code == 2 and "UnreadableFile" in err

    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train-filters"])
        assert exc.value.code == 2

    def test_single_filter_ablation(self, corpus, tmp_path, capsys):
        out = tmp_path / "one.json"
        code, text, _ = run(["train-filters", "--manifest", corpus["real"], "--out", out, "--k=1", "--lambda=0",
                             "--m", "3", "--crop", "32", "--max-steps", "5"], capsys)
        assert code == 0
        mf = store.load_model(out)
        assert mf.model.k == 1 and mf.provenance["config"]["lam"] == 0.0
        assert "L_diversity=" in text


class TestDescribe:
    def test_default_dimension(self, tmp_path, rng, capsys):
        store.save_model(FilterBank(random_bank_weights(rng, 8, 11)), tmp_path / "b.json")
        rows = []
        for i in range(4):
            save_png(rng.random((64, 64)), tmp_path / f"i{i}.png")
            rows.append((f"i{i}.png", "real"))
        m = write_manifest(tmp_path / "m.csv", rows)
        code, _, _ = run(["describe", "--manifest", m, "--bank", tmp_path / "b.json", "--out", tmp_path / "f.fsdf",
                          "--max-iters", "20"], capsys)
        assert code == 0
        x, labels = store.load_features(tmp_path / "f.fsdf")
        assert x.shape == (4, 960) and labels == ["real"] * 4

    def test_worker_count_independent(self, corpus, tmp_path, capsys):
        sub = subset_manifest(corpus["manifest"], tmp_path / "s.csv", lambda r: r["path"].endswith(("00.png", "01.png")))
        outs = []
        for w in (1, 3):
            out = tmp_path / f"w{w}.fsdf"
            code, _, _ = run(["describe", "--manifest", sub, "--bank", corpus["bank"], "--out", out, "--workers", w]
                             + SMALL_DESCRIBE, capsys)
            assert code == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
        assert outs[0] == store.dumps_features(*store.load_features(tmp_path / "w1.fsdf"))

    def test_undersized_image(self, corpus, tmp_path, capsys):
        save_png(np.full((5, 5), 0.3), tmp_path / "tiny.png")
        first = read_csv(corpus["manifest"])[0]
        m = write_manifest(tmp_path / "m.csv", [(str(corpus["manifest"].parent / first["path"]), "real"),
                                                 ("tiny.png", "real")])
        args = ["describe", "--manifest", m, "--bank", corpus["bank"], "--out", tmp_path / "f.fsdf"] + SMALL_DESCRIBE
        code, _, err = run(args, capsys)
        assert code == 1 and "tiny.png" in err and not (tmp_path / "f.fsdf").exists()
        code, _, err = run(args + ["--skip-errors"], capsys)
        assert code == 0 and "tiny.png" in err
        x, _ = store.load_features(tmp_path / "f.fsdf")
        assert x.shape[0] == 1
        meta = json.loads((tmp_path / "f.fsdf.meta.json").read_text())
        assert meta["failures"][0]["path"].endswith("tiny.png") and meta["config"]["seed"] == 0


class TestHeads:
    def test_detector_pipeline(self, corpus, tmp_path, capsys):
        root = corpus["root"]
        real_feats = tmp_path / "real.fsdf"
        assert cli.main(["describe", "--manifest", str(corpus["real"]), "--bank", str(corpus["bank"]),
                         "--out", str(real_feats)] + SMALL_DESCRIBE) == 0
        capsys.readouterr()
        code, out, _ = run(["fit-detector", "--features", real_feats, "--components", "1", "--out", tmp_path / "d.json"],
                           capsys)
        assert code == 0 and out.startswith("threshold=")
        mf = store.load_model(tmp_path / "d.json", expect="detector")
        assert mf.provenance["features"]["b"] == 5
        code, _, _ = run(["detect", "--features", corpus["features"], "--model", tmp_path / "d.json",
                          "--out-scores", tmp_path / "scores.csv"], capsys)
        assert code == 0
        rows = read_csv(tmp_path / "scores.csv")
        assert len(rows) == 48 and set(rows[0]) == {"path", "score", "label"}
        code, out, _ = run(["eval", "--metric", "auc", "--scores", tmp_path / "scores.csv",
                            "--truth", corpus["manifest"], "--out-json", tmp_path / "auc.json"], capsys)
        assert code == 0 and "auc[gen_gauss3]=" in out
        assert json.loads((tmp_path / "auc.json").read_text())["result"]["auc"] > 0.9
        code, out, _ = run(["eval", "--metric", "threshold-sweep", "--scores", tmp_path / "scores.csv",
                            "--truth", corpus["manifest"], "--out-curve", tmp_path / "sweep.csv"], capsys)
        assert code == 0 and len(read_csv(tmp_path / "sweep.csv")) == 101

    def test_attributor_pipeline(self, corpus, tmp_path, capsys):
        known = subset_manifest(corpus["manifest"], tmp_path / "k.csv", lambda r: r["label"] != "gen_hblur")
        kf = tmp_path / "known.fsdf"
        assert cli.main(["describe", "--manifest", str(known), "--bank", str(corpus["bank"]), "--out", str(kf)]
                        + SMALL_DESCRIBE) == 0
        code, out, _ = run(["fit-attributor", "--features-per-source", kf, "--out", tmp_path / "a.json"], capsys)
        assert code == 0 and "sources=gen_gauss3,real" in out
        code, _, _ = run(["attribute", "--features", corpus["features"], "--model", tmp_path / "a.json",
                          "--out", tmp_path / "attr.csv"], capsys)
        assert code == 0
        rows = read_csv(tmp_path / "attr.csv")
        assert set(rows[0]) == {"path", "source", "max_ll", "candidate"}
        assert {r["source"] for r in rows} <= {"real", "gen_gauss3", "unknown"}
        code, out, _ = run(["eval", "--metric", "au-oscr", "--scores", tmp_path / "attr.csv",
                            "--truth", corpus["manifest"], "--known", "real,gen_gauss3"], capsys)
        assert code == 0 and "au_oscr=" in out and "au_crr=" in out

    def test_cluster_and_eval(self, corpus, tmp_path, capsys):
        code, out, _ = run(["cluster", "--features", corpus["features"], "--k", "3", "--standardize",
                            "--out", tmp_path / "c.csv", "--model-out", tmp_path / "km.json", "--elbow", "4"], capsys)
        assert code == 0
        assert store.load_model(tmp_path / "km.json", expect="kmeans").model.k == 3
        assert len(read_csv(tmp_path / "c.elbow.csv")) == 4
        code, out, _ = run(["eval", "--metric", "clustering", "--assignments", tmp_path / "c.csv",
                            "--truth", corpus["manifest"]], capsys)
        assert code == 0 and "nmi=" in out and "purity=" in out
        code, out, _ = run(["eval", "--metric", "clustering", "--features", corpus["features"],
                            "--k-multiple", "2", "--standardize"], capsys)
        assert code == 0 and "k=6" in out

    def test_kind_mismatch_exit_code(self, corpus, tmp_path, capsys):
        code, _, err = run(["detect", "--features", corpus["features"], "--model", corpus["bank"],
                            "--out-scores", tmp_path / "s.csv"], capsys)
        assert code == 1 and "KindMismatch" in err


class TestSynthAndRobustness:
    def test_synth_default(self, tmp_path, capsys):
        code, out, _ = run(["synth-sources", "--out-dir", tmp_path, "--count", "2", "--size", "32"], capsys)
        assert code == 0
        rows = read_csv(tmp_path / "manifest.csv")
        assert len(rows) == 10 and (tmp_path / rows[0]["path"]).exists()
        assert json.loads((tmp_path / "corpus_spec.json").read_text())["scene_seed"] == 1234

    def test_synth_deterministic(self, tmp_path, capsys):
        for d in ("a", "b"):
            run(["synth-sources", "--out-dir", tmp_path / d, "--count", "2", "--size", "32"], capsys)
        assert (tmp_path / "a/real/real_0001.png").read_bytes() == (tmp_path / "b/real/real_0001.png").read_bytes()

    def test_eval_robustness(self, corpus, tmp_path, capsys):
        real_feats = tmp_path / "real.fsdf"
        cli.main(["describe", "--manifest", str(corpus["real"]), "--bank", str(corpus["bank"]),
                  "--out", str(real_feats)] + SMALL_DESCRIBE)
        cli.main(["fit-detector", "--features", str(real_feats), "--components", "1", "--out", str(tmp_path / "d.json")])
        capsys.readouterr()
        code, out, _ = run(["eval-robustness", "--manifest", corpus["manifest"], "--bank", corpus["bank"],
                            "--detector", tmp_path / "d.json", "--qualities", "90", "--max-iters", "300",
                            "--out", tmp_path / "rob.csv"], capsys)
        assert code == 0
        rows = read_csv(tmp_path / "rob.csv")
        assert [r["quality"] for r in rows] == ["None", "90"]

    def test_identical_kernels_negative_control(self, tmp_path, capsys):
        spec = {
            "count": 60, "size": 40, "allow_shared_kernels": True,
            "sources": [{"source_id": "real", "kernel": "gauss3"}, {"source_id": "twin", "kernel": "gauss3"}],
        }
        (tmp_path / "spec.json").write_text(json.dumps(spec))
        run(["synth-sources", "--spec", tmp_path / "spec.json", "--out-dir", tmp_path / "d"], capsys)
        rows = read_csv(tmp_path / "d/manifest.csv")
        train = write_manifest(tmp_path / "train.csv", [(tmp_path / "d" / r["path"], r["label"]) for r in rows
                                                         if r["label"] == "real" and int(r["path"][-8:-4]) < 30])
        test = write_manifest(tmp_path / "test.csv", [(tmp_path / "d" / r["path"], r["label"]) for r in rows
                                                       if not (r["label"] == "real" and int(r["path"][-8:-4]) < 30)])
        bank = tmp_path / "hp.json"
        store.save_model(FilterBank(np.array([[[0, 0.25, 0], [0.25, 0, 0.25], [0, 0.25, 0]]])), bank)
        desc = ["--b", "3", "--scales", "1", "--max-iters", "300"]
        for name, m in (("train", train), ("test", test)):
            assert cli.main(["describe", "--manifest", str(m), "--bank", str(bank), "--out", str(tmp_path / f"{name}.fsdf")]
                            + desc) == 0
        cli.main(["fit-detector", "--features", str(tmp_path / "train.fsdf"), "--components", "1",
                  "--out", str(tmp_path / "d.json")])
        cli.main(["detect", "--features", str(tmp_path / "test.fsdf"), "--model", str(tmp_path / "d.json"),
                  "--out-scores", str(tmp_path / "s.csv")])
        capsys.readouterr()
        code, out, _ = run(["eval", "--metric", "auc", "--scores", tmp_path / "s.csv", "--truth", test], capsys)
        assert code == 0
        auc = float(out.splitlines()[0].split("=")[1])
        assert abs(auc - 0.5) <= 0.1
