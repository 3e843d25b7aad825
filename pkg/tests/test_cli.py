import csv
import dataclasses
import json

import pytest

from copydet import evalkit, globalsim, pipeline, sift, vecindex
from copydet.cli import main
from copydet.errors import MissingEmbeddings, MissingIndex, NoImagesFound
from copydet.imaging import read_image, write_image

from conftest import procedural


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """12 references, 8 attacked queries, 4 attacked distractors, plus index and embeddings."""
    root = tmp_path_factory.mktemp("desk")
    assert main(["synth", "--count", "12", "--output", str(root / "refs")]) == 0
    assert main(["synth", "--count", "4", "--prefix", "other", "--seed-offset", "50000",
                 "--output", str(root / "others")]) == 0
    assert main(["augment", "--references", str(root / "refs"), "--generate", "8", "--seed", "3",
                 "--distractors", str(root / "others"), "--output", str(root / "bench")]) == 0
    assert main(["extract", "--corpus", str(root / "refs"), "--output", str(root / "refs.sft")]) == 0
    assert main(["index", "--features", str(root / "refs.sft"), "--output", str(root / "refs.ldx")]) == 0
    assert main(["embed", "--corpus", str(root / "refs"), "--output", str(root / "refs.gem")]) == 0
    return root


def run_args(desk, out, *extra):
    return ["run", "--queries", str(desk / "bench" / "queries"), "--index", str(desk / "refs.ldx"),
            "--embeddings", str(desk / "refs.gem"), "--ground-truth", str(desk / "bench" / "ground_truth.csv"),
            "--output", str(out), *extra]


class TestExtract:
    def test_three_images(self, tmp_path):
        (tmp_path / "imgs").mkdir()
        for i in range(3):
            write_image(tmp_path / "imgs" / f"a{i}.png", procedural(60 + i, 120, 100))
        assert main(["extract", "--corpus", str(tmp_path / "imgs"), "--output", str(tmp_path / "f.sft")]) == 0
        archive = sift.load_feature_archive(tmp_path / "f.sft")
        assert [f.image_id for f in archive] == ["a0", "a1", "a2"]
        first = (tmp_path / "f.sft").read_bytes()
        assert main(["extract", "--corpus", str(tmp_path / "imgs"), "--output", str(tmp_path / "f.sft"),
                     "--threads", "2"]) == 0
        assert (tmp_path / "f.sft").read_bytes() == first

    def test_corrupt_file_skipped(self, tmp_path, capsys):
        (tmp_path / "imgs").mkdir()
        for i in range(2):
            write_image(tmp_path / "imgs" / f"a{i}.png", procedural(70 + i, 100, 100))
        (tmp_path / "imgs" / "bad.jpg").write_bytes(b"not a jpeg")
        assert main(["extract", "--corpus", str(tmp_path / "imgs"), "--output", str(tmp_path / "f.sft")]) == 1
        assert "skipped 1" in capsys.readouterr().out
        assert len(sift.load_feature_archive(tmp_path / "f.sft")) == 2

    def test_no_images(self, tmp_path, capsys):
        (tmp_path / "empty").mkdir()
        assert main(["extract", "--corpus", str(tmp_path / "empty"), "--output", str(tmp_path / "f.sft")]) == 2
        assert NoImagesFound.__name__ in capsys.readouterr().err

    def test_recursive_sorted_discovery(self, tmp_path):
        for name in ["b/z.png", "a.jpg", "b/a.jpeg", "c.txt"]:
            (tmp_path / name).parent.mkdir(parents=True, exist_ok=True)
            (tmp_path / name).write_bytes(b"")
        assert [i for i, _ in pipeline.discover_images(tmp_path)] == ["a", "b/a", "b/z"]


class TestAugment:
    def test_manifest_rows(self, desk, tmp_path):
        rows = read_csv(desk / "bench" / "manifest.csv")[:5]
        with open(tmp_path / "m.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        for out in ("a", "b"):
            assert main(["augment", "--references", str(desk / "refs"), "--manifest", str(tmp_path / "m.csv"),
                         "--output", str(tmp_path / out)]) == 0
        names = sorted(p.name for p in (tmp_path / "a" / "queries").iterdir())
        assert len(names) == 5 and len(read_csv(tmp_path / "a" / "ground_truth.csv")) == 5
        for n in names:
            assert (tmp_path / "a" / "queries" / n).read_bytes() == (tmp_path / "b" / "queries" / n).read_bytes()

    def test_overlay_rows(self, tmp_path, desk):
        assert main(["augment", "--references", str(desk / "refs"), "--generate", "3", "--kinds", "overlay-paste",
                     "--output", str(tmp_path / "o")]) == 0
        boxes = read_csv(tmp_path / "o" / "overlay_boxes.csv")
        assert len(boxes) == 3
        for row in boxes:
            img = read_image(tmp_path / "o" / "queries" / f"{row['image_id']}.png")
            assert int(row["x"]) + int(row["w"]) <= img.width and int(row["y"]) + int(row["h"]) <= img.height

    def test_distractors_and_gt(self, desk):
        gt = read_csv(desk / "bench" / "ground_truth.csv")
        queries = sorted(p.stem for p in (desk / "bench" / "queries").iterdir())
        assert len(gt) == 8 and len(queries) == 12
        assert sum(q.startswith("d") for q in queries) == 4

    def test_bad_kind(self, desk, tmp_path):
        assert main(["augment", "--references", str(desk / "refs"), "--generate", "1", "--kinds", "warp",
                     "--output", str(tmp_path / "x")]) == 2


class TestPlumbing:
    def test_index_self_match(self, desk):
        index = vecindex.load(desk / "refs.ldx")
        archive = sift.load_feature_archive(desk / "refs.sft")
        hit = vecindex.search(index, archive[4].descriptors[:1], k=1)[0][0]
        assert hit.distance == 0.0

    def test_embed_count(self, desk):
        store = globalsim.load_embeddings(desk / "refs.gem")
        assert len(store) == 12 and store.ids == sorted(store.ids)

    def test_partitioned_index(self, desk, tmp_path):
        assert main(["index", "--features", str(desk / "refs.sft"), "--index-mode", "partitioned", "--nlist", "8",
                     "--output", str(tmp_path / "p.ldx")]) == 0
        assert vecindex.load(tmp_path / "p.ldx").nlist == 8

    def test_train_logs_epochs(self, desk, tmp_path, capsys):
        assert main(["train", "--corpus", str(desk / "refs"), "--copies", "2", "--epochs", "3",
                     "--output", str(tmp_path / "p.npz")]) == 0
        out = capsys.readouterr().out
        assert [l.split()[:2] for l in out.splitlines() if l.startswith("epoch")] == [["epoch", str(i)] for i in range(4)]
        assert globalsim.Projection.load(tmp_path / "p.npz").trained

    def test_detect_overlay(self, desk, tmp_path):
        assert main(["detect-overlay", "--queries", str(desk / "bench" / "queries"),
                     "--output", str(tmp_path / "boxes.csv")]) == 0
        assert read_csv(tmp_path / "boxes.csv") is not None

    def test_config_emitted(self, desk):
        cfg = json.loads((desk / "refs.ldx.config.json").read_text())
        assert cfg["index_mode"] == "flat" and cfg["threads"] == 1
        assert json.loads((desk / "bench" / "config.json").read_text())["seed"] == 3

    def test_config_file_and_override(self, desk, tmp_path):
        pipeline.PipelineConfig(index_mode="partitioned", nlist=4).save(tmp_path / "c.json")
        assert main(["index", "--config", str(tmp_path / "c.json"), "--nlist", "6", "--features",
                     str(desk / "refs.sft"), "--output", str(tmp_path / "i.ldx")]) == 0
        assert vecindex.load(tmp_path / "i.ldx").nlist == 6

    def test_unknown_config_key(self, tmp_path, desk):
        (tmp_path / "c.json").write_text('{"bogus": 1}')
        assert main(["index", "--config", str(tmp_path / "c.json"), "--features", str(desk / "refs.sft"),
                     "--output", str(tmp_path / "i.ldx")]) == 2


class TestRun:
    def test_fixture_run(self, desk, tmp_path, capsys):
        assert main(run_args(desk, tmp_path / "o")) == 0
        ap = float(capsys.readouterr().out.split("micro_ap=")[1])
        assert 0.0 <= ap <= 1.0
        assert (tmp_path / "o" / "pr_curve.csv").exists() and (tmp_path / "o" / "config.json").exists()
        sub = evalkit.load_submission(tmp_path / "o" / "submission.csv")
        gt = evalkit.load_ground_truth(desk / "bench" / "ground_truth.csv")
        assert evalkit.micro_ap(sub, gt).micro_ap == pytest.approx(ap, abs=1e-6)

    def test_empty_queries(self, desk, tmp_path, capsys):
        (tmp_path / "none").mkdir()
        args = run_args(desk, tmp_path / "o")
        args[args.index("--queries") + 1] = str(tmp_path / "none")
        assert main(args) == 0
        assert (tmp_path / "o" / "submission.csv").read_text() == "query_id,reference_id,score\n"
        assert "micro_ap" not in capsys.readouterr().out

    def test_repeatable_and_thread_independent(self, desk, tmp_path):
        for name, threads in (("a", "1"), ("b", "1"), ("c", "3")):
            assert main(run_args(desk, tmp_path / name, "--threads", threads)) == 0
        a = (tmp_path / "a" / "submission.csv").read_bytes()
        assert a == (tmp_path / "b" / "submission.csv").read_bytes() == (tmp_path / "c" / "submission.csv").read_bytes()

    def test_crop_branch_disabled_is_partial_sum(self, desk):
        cfg = pipeline.PipelineConfig(query_dir=str(desk / "bench" / "queries"), index_file=str(desk / "refs.ldx"),
                                      embedding_file=str(desk / "refs.gem"))
        db = pipeline.load_reference_db(cfg)
        queries = pipeline.discover_images(cfg.query_dir)
        full, _ = pipeline.run_queries(queries, db, cfg)
        two, _ = pipeline.run_queries(queries, db, dataclasses.replace(cfg, branches=("global", "local")))
        expect = {(p.query_id, p.reference_id): p.scores[0] + p.scores[1] for p in full if p.recalled[0] or p.recalled[1]}
        assert {(p.query_id, p.reference_id): p.fused for p in two} == expect

    def test_baseline_mode(self, desk, tmp_path):
        args = run_args(desk, tmp_path / "o")
        i = args.index("--embeddings")
        args[i:i + 2] = ["--corpus", str(desk / "refs")]
        assert main(args) == 0
        assert (tmp_path / "o" / "submission.csv").read_bytes() == _full_run_bytes(desk, tmp_path)

    def test_missing_index(self, desk, tmp_path, capsys):
        args = run_args(desk, tmp_path / "o")
        args[args.index("--index") + 1] = str(tmp_path / "nope.ldx")
        assert main(args) == 2
        assert MissingIndex.__name__ in capsys.readouterr().err

    def test_missing_embeddings(self, desk, tmp_path, capsys):
        args = run_args(desk, tmp_path / "o")
        args[args.index("--embeddings") + 1] = str(tmp_path / "nope.gem")
        assert main(args) == 2
        assert MissingEmbeddings.__name__ in capsys.readouterr().err

    def test_eval_subcommand(self, desk, tmp_path, capsys):
        assert main(run_args(desk, tmp_path / "o")) == 0
        ap_run = capsys.readouterr().out.split("micro_ap=")[1].strip()
        assert main(["eval", "--submission", str(tmp_path / "o" / "submission.csv"), "--ground-truth",
                     str(desk / "bench" / "ground_truth.csv"), "--output", str(tmp_path / "pr.csv")]) == 0
        assert capsys.readouterr().out.strip() == f"micro_ap={ap_run}"


def _full_run_bytes(desk, tmp_path):
    assert main(run_args(desk, tmp_path / "ref_run")) == 0
    return (tmp_path / "ref_run" / "submission.csv").read_bytes()
