import json

import numpy as np
import pytest

from talkit.cli import main
from talkit.fileio import AnnotationRecord, parse_detections, parse_proposals, write_annotations
from talkit.params import load_checkpoint, save_checkpoint

SMALL = {
    "seed": 3,
    "optim": {"optimizer": "adam", "lr": 0.003, "epochs": 1, "batch_size": 8},
    "lgte": {"groups": 4, "local_groups": 2, "window": 5, "layers": 1},
    "tbr": {"hidden": 8, "stages": 2, "proposals_per_gt": 2},
    "mgfn": {"width": 8, "rates": [1, 2], "source_epochs": 1},
    "brm": {"width": 8, "scales": [8.0, 16.0], "epochs": 1},
    "synth": {"num_videos": 6, "num_classes": 3, "channels": 8, "length": [40, 40],
              "segment_length": [12, 16]},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["gen-synth", "--config", str(cfg), "--out", str(root / "data")]) == 0
    for track, name in (("supervised", "tca.ckpt"), ("weak", "mg.ckpt")):
        assert main(["train", "--track", track, "--config", str(cfg), "--data", str(root / "data"),
                     "--out", str(root / name)]) == 0
    return root


def write_fixture(root):
    write_annotations(root / "gt.json", [AnnotationRecord("v0", 40.0, [(0, 0.0, 10.0), (1, 20.0, 30.0)])],
                      ["a", "b"])
    (root / "perfect.csv").write_text("v0,0,0,10,0.9\nv0,1,20,30,0.8\n")


class TestEval:
    def test_perfect_fixture(self, tmp_path, capsys):
        write_fixture(tmp_path)
        code = main(["eval", "--detections", str(tmp_path / "perfect.csv"),
                     "--annotations", str(tmp_path / "gt.json"), "--json", str(tmp_path / "m.json")])
        out = capsys.readouterr().out
        assert code == 0 and "average mAP 1.0000" in out
        assert json.loads((tmp_path / "m.json").read_text())["average_map"] == 1.0

    def test_proposal_file(self, tmp_path, capsys):
        write_fixture(tmp_path)
        (tmp_path / "p.csv").write_text("v0,0,10,0.9\n")
        assert main(["eval", "--detections", str(tmp_path / "p.csv"),
                     "--annotations", str(tmp_path / "gt.json")]) == 0
        assert "average recall@100  0.5000" in capsys.readouterr().out

    def test_missing_file(self, tmp_path, capsys):
        assert main(["eval", "--detections", str(tmp_path / "nope.csv"),
                     "--annotations", str(tmp_path / "gt.json")]) == 2
        assert capsys.readouterr().err.startswith("error:")

    def test_malformed_detections(self, tmp_path):
        write_fixture(tmp_path)
        (tmp_path / "bad.csv").write_text("v0,0,1\n")
        assert main(["eval", "--detections", str(tmp_path / "bad.csv"),
                     "--annotations", str(tmp_path / "gt.json")]) == 2


class TestMisc:
    def test_print_config(self, capsys):
        assert main(["--print-config"]) == 0
        assert json.loads(capsys.readouterr().out)["mgfn"]["rates"] == [1, 2, 3, 5]

    def test_no_command(self, capsys):
        assert main([]) == 2

    def test_bad_config(self, tmp_path, capsys):
        (tmp_path / "c.json").write_text(json.dumps({"brm": {"scales": []}}))
        assert main(["gen-synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "d")]) == 2
        assert "ConfigError" in capsys.readouterr().err

    def test_train_needs_track(self, workspace, tmp_path):
        assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "x")]) == 2

    def test_grad_check(self, capsys):
        assert main(["grad-check", "--max-coords", "3"]) == 0
        out = capsys.readouterr().out
        assert len(out.splitlines()) == 7 and "tensorcore" in out


class TestPipeline:
    def test_localize_and_eval(self, workspace, tmp_path, capsys):
        dets = tmp_path / "dets.csv"
        assert main(["localize", "--checkpoint", str(workspace / "mg.ckpt"), "--data",
                     str(workspace / "data"), "--out", str(dets)]) == 0
        rows = parse_detections(dets.read_text())
        assert rows and all(0 <= s < e <= 40 and 0 <= c < 3 for _, c, s, e, _ in rows)
        assert main(["eval", "--detections", str(dets), "--annotations",
                     str(workspace / "data" / "annotations_full.json")]) == 0
        assert capsys.readouterr().out.splitlines()[-1].startswith("average mAP")

    def test_export_cas(self, workspace, tmp_path):
        assert main(["export-cas", "--checkpoint", str(workspace / "mg.ckpt"), "--data",
                     str(workspace / "data"), "--out", str(tmp_path / "cas")]) == 0
        assert len(list((tmp_path / "cas").iterdir())) >= 6

    def test_wrong_checkpoint_kind(self, workspace, tmp_path):
        assert main(["localize", "--checkpoint", str(workspace / "tca.ckpt"), "--data",
                     str(workspace / "data"), "--out", str(tmp_path / "d.csv")]) == 2

    def test_refine_with_zero_heads_keeps_boundaries(self, workspace, tmp_path):
        state = load_checkpoint(workspace / "tca.ckpt")
        for name in state:
            if name.startswith("tbr.") and ".conv2." in name:
                state[name] = np.zeros_like(state[name])
        ckpt = tmp_path / "zero.ckpt"
        save_checkpoint(ckpt, state)
        (tmp_path / "zero.ckpt.json").write_text((workspace / "tca.ckpt.json").read_text())
        props = "video0000,3.000000,15.000000,0.800000\nvideo0001,10.500000,22.000000,0.600000\n"
        (tmp_path / "p.csv").write_text(props)
        assert main(["refine", "--checkpoint", str(ckpt), "--data", str(workspace / "data"),
                     "--proposals", str(tmp_path / "p.csv"), "--out", str(tmp_path / "r.csv")]) == 0
        before = parse_proposals(props)
        after = parse_proposals((tmp_path / "r.csv").read_text())
        for b, a in zip(before, after):
            assert a[:3] == b[:3]
            assert a[3] == pytest.approx(0.5 * b[3], abs=1e-6)

    def test_refine_trained(self, workspace, tmp_path):
        (tmp_path / "p.csv").write_text("video0000,3,15,0.8\n")
        assert main(["refine", "--checkpoint", str(workspace / "tca.ckpt"), "--data",
                     str(workspace / "data"), "--proposals", str(tmp_path / "p.csv"),
                     "--out", str(tmp_path / "r.csv"), "--stages", "1"]) == 0
        (row,) = parse_proposals((tmp_path / "r.csv").read_text())
        assert row[0] == "video0000" and row[1] < row[2]


class TestDeterminism:
    def test_fixed_seed_runs_bit_identical(self, workspace, tmp_path):
        cfg = workspace / "small.json"
        for track, name in (("supervised", "tca.ckpt"), ("weak", "mg.ckpt")):
            again = tmp_path / name
            assert main(["train", "--track", track, "--config", str(cfg), "--data",
                         str(workspace / "data"), "--out", str(again)]) == 0
            assert again.read_bytes() == (workspace / name).read_bytes()

    def test_regenerated_data_identical(self, workspace, tmp_path):
        assert main(["gen-synth", "--config", str(workspace / "small.json"), "--out", str(tmp_path)]) == 0
        for f in sorted((workspace / "data" / "features").iterdir()):
            assert (tmp_path / "features" / f.name).read_bytes() == f.read_bytes()

    def test_seed_override_changes_data(self, workspace, tmp_path):
        assert main(["gen-synth", "--config", str(workspace / "small.json"), "--seed", "4",
                     "--out", str(tmp_path)]) == 0
        f = sorted((workspace / "data" / "features").iterdir())[0]
        assert (tmp_path / "features" / f.name).read_bytes() != f.read_bytes()
