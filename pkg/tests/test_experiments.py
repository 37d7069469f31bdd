import json
import shutil

import pytest

from conftest import TINY
from mtlvad.cli import main
from mtlvad.core import ConfigError, DatasetRoot, tree_hash, write_json
from mtlvad.experiments import ExperimentManifest, ablate, format_table, report_schema, validate_report

FAST = TINY.replace(epochs=1)


def _manifest(tmp_path, dataset, name="manifest.json", cfg=FAST, **fields):
    d = {"config": cfg.to_dict(), "dataset_root": str(dataset), **fields}
    path = tmp_path / name
    write_json(d, path)
    return path


# ---------------------------------------------------------------------------
# synth


def test_synth_twice_gives_identical_trees(tmp_path, capsys):
    assert main(["synth", "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    for kind in ("unseen_class", "fast_motion", "sudden_direction_change"):
        line = next(x for x in out.splitlines() if kind in x)
        assert int(line.split(":")[1]) >= 1
    assert main(["synth", "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")


def test_synth_refuses_missing_parent_and_non_empty_out(tmp_path, capsys):
    missing = tmp_path / "nope" / "data"
    assert main(["synth", "--out", str(missing)]) == 2
    assert str(missing.parent) in capsys.readouterr().err
    (tmp_path / "full").mkdir()
    (tmp_path / "full" / "keep.txt").write_text("x")
    assert main(["synth", "--out", str(tmp_path / "full")]) == 2
    assert (tmp_path / "full" / "keep.txt").exists()
    assert main(["synth", "--out", str(tmp_path / "full"), "--force"]) == 0
    assert not (tmp_path / "full" / "keep.txt").exists()


def test_bad_config_file_exits_nonzero(tmp_path):
    (tmp_path / "cfg.json").write_text('{"patch_grid": 0}')
    assert main(["synth", "--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / "d")]) == 2
    assert main(["synth", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "d")]) == 2


def test_pseudo_gt_writes_builtin_flow(tiny_dataset, tmp_path, capsys):
    copy = tmp_path / "ds"
    shutil.copytree(tiny_dataset, copy)
    cfg = tmp_path / "cfg.json"
    write_json(TINY.to_dict(), cfg)
    assert main(["pseudo-gt", "--config", str(cfg), "--dataset", str(copy)]) == 0
    counts = json.loads(capsys.readouterr().out)
    n_frames = sum(len(v.frame_indices()) for v in DatasetRoot(copy).train().videos() + DatasetRoot(copy).test().videos())
    assert counts == {"seg": n_frames, "flow": n_frames, "depth": n_frames}


# ---------------------------------------------------------------------------
# manifests


def test_manifest_round_trip_and_validation(tmp_path, tiny_dataset):
    m = ExperimentManifest.load(_manifest(tmp_path, tiny_dataset, branch_selection=["motion"]))
    m.save(tmp_path / "copy.json")
    back = ExperimentManifest.load(tmp_path / "copy.json")
    assert back.to_dict() == m.to_dict()
    with pytest.raises(ConfigError):
        ExperimentManifest.load(_manifest(tmp_path, tmp_path / "missing", "bad.json")).validate()
    with pytest.raises(ConfigError):
        ExperimentManifest.load(_manifest(tmp_path, tiny_dataset, "bad2.json", branch_selection=["optical"])).validate()
    with pytest.raises(ConfigError):
        ExperimentManifest.load(_manifest(tmp_path, tiny_dataset, "bad3.json", colour="red"))


# ---------------------------------------------------------------------------
# train / eval


@pytest.fixture(scope="module")
def trained(tiny_dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    manifest = _manifest(root, tiny_dataset)
    assert main(["train", "--manifest", str(manifest), "--out", str(root / "ckpt")]) == 0
    return root, manifest


def test_train_writes_manifest_copy_and_both_families(trained):
    root, manifest = trained
    ck = root / "ckpt"
    assert sorted(p.name for p in ck.iterdir() if p.is_dir()) == ["appearance_motion", "motion"]
    copy = ExperimentManifest.load(ck / "manifest.json")
    assert copy.to_dict() == ExperimentManifest.load(manifest).to_dict()
    for b in ("appearance_motion", "motion"):
        assert (ck / b / "best" / "manifest.json").is_file()
        assert (ck / b / "train_log.jsonl").is_file()


def test_motion_only_manifest_writes_one_family(tiny_dataset, tmp_path):
    manifest = _manifest(tmp_path, tiny_dataset, branch_selection=["motion"])
    assert main(["train", "--manifest", str(manifest), "--out", str(tmp_path / "ck")]) == 0
    assert sorted(p.name for p in (tmp_path / "ck").iterdir() if p.is_dir()) == ["motion"]


def test_corrupt_checkpoint_refuses_resume(tiny_dataset, tmp_path, capsys):
    manifest = _manifest(tmp_path, tiny_dataset, branch_selection=["motion"])
    assert main(["train", "--manifest", str(manifest), "--out", str(tmp_path / "ck")]) == 0
    mpath = tmp_path / "ck" / "motion" / "last" / "manifest.json"
    d = json.loads(mpath.read_text())
    d["meta"]["epoch"] = 99
    mpath.write_text(json.dumps(d))
    assert main(["train", "--manifest", str(manifest), "--out", str(tmp_path / "ck"), "--resume"]) == 2
    assert "hash" in capsys.readouterr().err


def test_train_refuses_anomalous_training_video(tiny_dataset, tmp_path, capsys):
    copy = tmp_path / "ds"
    shutil.copytree(tiny_dataset, copy)
    vid = DatasetRoot(copy).train().videos()[0]
    lab = json.loads((vid.path / "labels.json").read_text())
    lab["labels"][3] = 1
    write_json(lab, vid.path / "labels.json")
    manifest = _manifest(tmp_path, copy, branch_selection=["motion"])
    assert main(["train", "--manifest", str(manifest), "--out", str(tmp_path / "ck")]) == 2
    assert vid.video_id in capsys.readouterr().err


def test_eval_report_shape_and_schema(trained, tmp_path, capsys):
    root, manifest = trained
    assert main(["eval", "--manifest", str(manifest), "--checkpoints", str(root / "ckpt"), "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert set(report["auc"]) == {"appearance_motion", "motion", "fused"}
    assert all(0.0 <= v <= 1.0 for v in report["auc"].values())
    assert json.loads(capsys.readouterr().out) == report["auc"]
    validate_report(report)
    assert report_schema()["additionalProperties"] is False
    assert len(report["per_video"]) == 6
    assert (tmp_path / "scores.jsonl").is_file()
    assert len(list((tmp_path / "plots").glob("*.png"))) == 6
    assert any((tmp_path / "heatmaps").rglob("*.vadmap"))


def test_report_schema_rejects_tampering(trained, tmp_path):
    import jsonschema

    root, manifest = trained
    main(["eval", "--manifest", str(manifest), "--checkpoints", str(root / "ckpt"), "--out", str(tmp_path),
          "--no-heatmaps"])
    report = json.loads((tmp_path / "report.json").read_text())
    for key, bad in (("auc", {"motion": 1.5}), ("seed", "zero"), ("dataset_hash", "abc")):
        broken = {**report, key: bad}
        with pytest.raises(jsonschema.ValidationError):
            validate_report(broken)


def test_eval_missing_branch_is_named(trained, tiny_dataset, tmp_path, capsys):
    root, _ = trained
    partial = tmp_path / "ck"
    shutil.copytree(root / "ckpt" / "motion", partial / "motion")
    manifest = _manifest(tmp_path, tiny_dataset)
    assert main(["eval", "--manifest", str(manifest), "--checkpoints", str(partial), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "appearance_motion" in err


def test_single_class_video_excluded_with_warning(trained, tiny_dataset, tmp_path):
    root, _ = trained
    copy = tmp_path / "ds"
    shutil.copytree(tiny_dataset, copy)
    normal = DatasetRoot(copy).train().videos()[0]
    shutil.copytree(normal.path, copy / "test" / "all_normal")
    manifest = _manifest(tmp_path, copy, cfg=FAST.replace(auc_mode="per_video"))
    assert main(["eval", "--manifest", str(manifest), "--checkpoints", str(root / "ckpt"), "--out", str(tmp_path / "o"),
                 "--no-heatmaps"]) == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    row = next(r for r in report["per_video"] if r["video_id"] == "all_normal")
    assert row["anomalous_frames"] == 0 and row["auc"]["motion"] is None
    assert any("all_normal" in w for w in report["warnings"])


# ---------------------------------------------------------------------------
# ablations


@pytest.mark.parametrize("ablation,rows", [
    ("attention_mechanisms", ["UNet", "UNet+Att", "UNet+Att+SCSE"]),
    ("attention_position", ["none", "encoder", "decoder", "skip_connection", "final_layer"]),
])
def test_ablation_rows_share_dataset_and_seed(tiny_dataset, tmp_path, ablation, rows, capsys):
    manifest = _manifest(tmp_path, tiny_dataset, ablation=ablation)
    assert main(["ablate", "--manifest", str(manifest), "--out", str(tmp_path / "ab")]) == 0
    result = json.loads((tmp_path / "ab" / "ablation.json").read_text())
    assert [r["row"] for r in result["rows"]] == rows
    assert len({r["dataset_hash"] for r in result["rows"]}) == 1
    assert {r["seed"] for r in result["rows"]} == {FAST.seed}
    assert sorted(r["rank"] for r in result["rows"]) == list(range(1, len(rows) + 1))
    table = capsys.readouterr().out
    assert table == format_table(result)
    assert all(r in table for r in rows)


def test_ablation_reuses_shared_models(tiny_dataset, tmp_path):
    m = ExperimentManifest.load(_manifest(tmp_path, tiny_dataset, ablation="proxy_tasks",
                                          sweep=["Seg", "OFM", "Seg+OFM"]))
    result = ablate(m, tmp_path / "ab")
    assert sorted(p.name for p in (tmp_path / "ab" / "models").iterdir()) == ["ofm", "seg"]
    rows = {r["row"]: r for r in result["rows"]}
    assert rows["Seg+OFM"]["models"] == ["seg", "ofm"]


def test_ablation_needs_two_rows(tiny_dataset, tmp_path, capsys):
    manifest = _manifest(tmp_path, tiny_dataset, ablation="attention_position", sweep=["decoder"])
    assert main(["ablate", "--manifest", str(manifest), "--out", str(tmp_path / "ab")]) == 2
    assert "at least 2" in capsys.readouterr().err


def test_ablation_reuses_matching_models_across_sweeps(tiny_dataset, tmp_path):
    shared = tmp_path / "models"
    a = ablate(ExperimentManifest.load(_manifest(tmp_path, tiny_dataset, "a.json", ablation="attention_position",
                                                 sweep=["none", "decoder"])), tmp_path / "a", models_dir=shared)
    stamp = (shared / "motion_decoder_scse0" / "best" / "manifest.json").stat().st_mtime_ns
    b = ablate(ExperimentManifest.load(_manifest(tmp_path, tiny_dataset, "b.json", ablation="attention_mechanisms",
                                                 sweep=["UNet", "UNet+Att"], eval_tags=None)),
               tmp_path / "b", models_dir=shared)
    assert (shared / "motion_decoder_scse0" / "best" / "manifest.json").stat().st_mtime_ns == stamp
    assert sorted(p.name for p in shared.iterdir()) == ["motion_decoder_scse0", "motion_none_scse0"]
    assert b["final_losses"] == a["final_losses"]
    # a different config is retrained, not reused
    ablate(ExperimentManifest.load(_manifest(tmp_path, tiny_dataset, "c.json", cfg=FAST.replace(seed=1),
                                             ablation="attention_position", sweep=["none", "decoder"])),
           tmp_path / "c", models_dir=shared)
    assert (shared / "motion_decoder_scse0" / "best" / "manifest.json").stat().st_mtime_ns != stamp
