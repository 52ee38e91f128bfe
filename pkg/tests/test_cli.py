import re
import subprocess
import sys

import numpy as np
import pytest
import yaml

from maskradar.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, main
from maskradar.container import load_volume, save_volume
from maskradar.detect import parse_detections

TINY = {
    "model": {"widths": [8, 16], "heads": [2, 2], "window": [2, 4, 4], "kernel": [3, 3, 3]},
    "data": {"n_frames": 4, "height": 16, "width": 16, "n_scenes": 4, "split": 0.75},
    "train": {"lr": 1e-3, "checkpoint_every": 2},
}
LOG_RE = re.compile(r"^step=\d+ total=-?\d+\.\d{6} main=-?\d+\.\d{6} aux=-?\d+\.\d{6}$")


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def tiny_cfg(workdir):
    p = workdir / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


@pytest.fixture(scope="module")
def dataset(workdir, tiny_cfg):
    out = workdir / "data"
    assert main(["synth", "--config", str(tiny_cfg), "--seed", "7", "--out", str(out)]) == EXIT_OK
    return out


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


class TestSynth:
    def test_hash_repeatable(self, capsys, workdir, tiny_cfg, dataset):
        code, first = run(capsys, "synth", "--config", tiny_cfg, "--seed", 7, "--out", workdir / "again")
        assert code == EXIT_OK
        h = re.search(r"manifest_hash=(\w+)", first.out).group(1)
        from maskradar.data import manifest_hash
        assert h == manifest_hash(dataset)
        assert (dataset / "config.resolved.yaml").exists()
        assert re.search(r"config_hash=[0-9a-f]{16}", first.out)

    def test_difficulty_zero(self, capsys, workdir, tiny_cfg):
        out = workdir / "easy"
        code, _ = run(capsys, "synth", "--config", tiny_cfg, "--difficulty", 0, "--out", out)
        assert code == EXIT_OK
        m = yaml.safe_load((out / "manifest.yaml").read_text())
        assert all(sc["objects"] == 1 for sc in m["scenes"])

    def test_split(self, dataset):
        m = yaml.safe_load((dataset / "manifest.yaml").read_text())
        assert len(m["split"]["train"]) == 3 and len(m["split"]["test"]) == 1

    def test_missing_parent(self, capsys, workdir, tiny_cfg):
        code, err = run(capsys, "synth", "--config", tiny_cfg, "--out", workdir / "nope" / "d")
        assert code == EXIT_IO and "does not exist" in err.err

    def test_existing_needs_force(self, capsys, workdir, tiny_cfg, dataset):
        code, _ = run(capsys, "synth", "--config", tiny_cfg, "--seed", 7, "--out", dataset)
        assert code != EXIT_OK
        code, _ = run(capsys, "synth", "--config", tiny_cfg, "--seed", 7, "--out", dataset, "--force")
        assert code == EXIT_OK


class TestUsage:
    def test_no_command(self, capsys):
        assert run(capsys, )[0] == EXIT_USAGE

    def test_unknown_flag(self, capsys):
        assert run(capsys, "bench", "--bogus")[0] == EXIT_USAGE

    def test_missing_out(self, capsys, tiny_cfg):
        assert run(capsys, "synth", "--config", tiny_cfg)[0] == EXIT_USAGE

    def test_bench_needs_ten_runs(self, capsys):
        assert run(capsys, "bench", "--runs", 3)[0] == EXIT_USAGE

    def test_bad_config(self, capsys, workdir):
        p = workdir / "bad.yaml"
        p.write_text("model: {widths: [8], heads: [3]}\n")
        code, err = run(capsys, "gradcheck", "--config", p, "--blocks", "linear")
        assert code == EXIT_VALIDATION and "divisible" in err.err

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "maskradar.cli", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "synth" in proc.stdout


@pytest.fixture(scope="module")
def full_run(workdir, tiny_cfg, dataset):
    out = workdir / "run_full"
    assert main(["train", "--config", str(tiny_cfg), "--data", str(dataset), "--steps", "4",
                 "--out", str(out), "--seed", "3"]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def ckpt(workdir, tiny_cfg, dataset):
    out = workdir / "run_infer"
    assert main(["train", "--config", str(tiny_cfg), "--data", str(dataset), "--steps", "1",
                 "--out", str(out)]) == EXIT_OK
    return out / "ckpt_000001.mrnv"


class TestTrain:
    def test_log_format(self, full_run):
        lines = (full_run / "train.log").read_text().splitlines()
        assert len(lines) == 4
        assert all(LOG_RE.match(l) for l in lines)
        assert [int(l.split()[0][5:]) for l in lines] == [1, 2, 3, 4]

    def test_checkpoints(self, full_run):
        names = sorted(p.name for p in full_run.glob("ckpt_*"))
        assert names == ["ckpt_000002.mrnv", "ckpt_000002.yaml", "ckpt_000004.mrnv", "ckpt_000004.yaml"]
        meta = yaml.safe_load((full_run / "ckpt_000004.yaml").read_text())
        assert meta["step"] == 4 and meta["config"]["model"]["widths"] == [8, 16]

    def test_deterministic(self, workdir, tiny_cfg, dataset, full_run):
        out = workdir / "run_again"
        assert main(["train", "--config", str(tiny_cfg), "--data", str(dataset), "--steps", "4",
                     "--out", str(out), "--seed", "3"]) == EXIT_OK
        for name in ("train.log", "ckpt_000004.mrnv", "config.resolved.yaml"):
            assert (out / name).read_bytes() == (full_run / name).read_bytes()

    def test_resume_replays(self, workdir, tiny_cfg, dataset, full_run):
        out = workdir / "run_resume"
        base = ["train", "--config", str(tiny_cfg), "--data", str(dataset), "--out", str(out), "--seed", "3"]
        assert main(base + ["--steps", "2"]) == EXIT_OK
        assert main(base + ["--steps", "4", "--resume"]) == EXIT_OK
        assert (out / "train.log").read_bytes() == (full_run / "train.log").read_bytes()
        assert (out / "ckpt_000004.mrnv").read_bytes() == (full_run / "ckpt_000004.mrnv").read_bytes()

    def test_resume_rejects_other_model(self, capsys, workdir, tiny_cfg, dataset, full_run):
        other = workdir / "other.yaml"
        cfg = yaml.safe_load(tiny_cfg.read_text())
        cfg["model"]["gamma_init"] = 0.2
        other.write_text(yaml.safe_dump(cfg))
        code, err = run(capsys, "train", "--config", other, "--data", dataset, "--out", full_run,
                        "--steps", 6, "--resume", "--seed", 3)
        assert code == EXIT_VALIDATION and "different [model]" in err.err

    def test_alpha_zero_total_is_main(self, workdir, tiny_cfg, dataset):
        out = workdir / "run_alpha0"
        assert main(["train", "--config", str(tiny_cfg), "--data", str(dataset), "--steps", "3",
                     "--alpha", "0", "--out", str(out)]) == EXIT_OK
        for line in (out / "train.log").read_text().splitlines():
            f = dict(tok.split("=") for tok in line.split())
            assert f["total"] == f["main"]

    def test_missing_dataset(self, capsys, workdir, tiny_cfg):
        code, _ = run(capsys, "train", "--config", tiny_cfg, "--data", workdir / "absent", "--out", workdir / "x")
        assert code == EXIT_IO


class TestInferEval:
    def test_untrained_on_zero_input(self, capsys, workdir, ckpt):
        rf = workdir / "zero.mrnv"
        save_volume(rf, "rf", np.zeros((2, 4, 16, 16)))
        code, res = run(capsys, "infer", "--checkpoint", ckpt, "--input", rf, "--out", workdir / "inf0",
                        "--min-score", 0.5)
        assert code == EXIT_OK
        conf = load_volume(workdir / "inf0" / "confmaps.mrnv", "conf")
        assert conf.shape == (4, 16, 16, 3) and conf.max() - conf.min() < 0.2 and conf.max() < 0.5
        assert (workdir / "inf0" / "detections.txt").read_text() == ""

    def test_repeatable_and_sorted(self, capsys, workdir, ckpt, dataset):
        rf = dataset / "scene_000.mrnv"
        outs = []
        for name in ("inf1", "inf2"):
            code, _ = run(capsys, "infer", "--checkpoint", ckpt, "--input", rf, "--out", workdir / name,
                          "--min-score", 0.0, "--dump-maps")
            assert code == EXIT_OK
            outs.append(workdir / name)
        for f in ("confmaps.mrnv", "detections.txt"):
            assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
        dets = parse_detections((outs[0] / "detections.txt").read_text(), ("pedestrian", "cyclist", "car"))
        keys = [(d.frame, -d.score) for d in dets]
        assert dets and keys == sorted(keys)
        pgm = (outs[0] / "maps" / "frame000_car.pgm").read_text().split("\n")
        assert pgm[:3] == ["P2", "16 16", "255"]
        assert len(list((outs[0] / "maps").glob("*.pgm"))) == 4 * 3

    def test_wrong_extents(self, capsys, workdir, ckpt):
        rf = workdir / "odd.mrnv"
        save_volume(rf, "rf", np.zeros((2, 4, 10, 16)))
        assert run(capsys, "infer", "--checkpoint", ckpt, "--input", rf, "--out", workdir / "inf3")[0] == EXIT_VALIDATION

    def test_corrupt_checkpoint(self, capsys, workdir, ckpt):
        bad = workdir / "bad_ckpt.mrnv"
        bad.write_bytes(b"JUNK" + ckpt.read_bytes()[4:])
        (workdir / "bad_ckpt.yaml").write_text(ckpt.with_suffix(".yaml").read_text())
        rf = workdir / "zero.mrnv"
        assert run(capsys, "infer", "--checkpoint", bad, "--input", rf, "--out", workdir / "inf4")[0] == EXIT_IO

    def test_eval_perfect(self, capsys, workdir, dataset):
        ann = dataset / "scene_000.ann.txt"
        dets = workdir / "perfect.txt"
        lines = []
        for line in ann.read_text().splitlines():
            f = dict(tok.split("=") for tok in line.split())
            lines.append(f"frame={f['frame']} row={f['row']} col={f['col']} class={f['class']} score=1.000000")
        dets.write_text("\n".join(lines) + "\n")
        code, res = run(capsys, "eval", "--detections", dets, "--annotations", ann, "--height", 16, "--width", 16)
        assert code == EXIT_OK
        assert "AP: 1.000" in res.out and "AR: 1.000" in res.out
        assert res.out.count("ols:") == 9

    def test_eval_empty(self, capsys, workdir, dataset):
        empty = workdir / "empty.txt"
        empty.write_text("")
        code, res = run(capsys, "eval", "--detections", empty, "--annotations", dataset / "scene_000.ann.txt",
                        "--out", workdir / "ev")
        assert code == EXIT_OK and "AR: 0.000" in res.out
        report = (workdir / "ev" / "report.yaml").read_text()
        assert res.out.startswith(report) and yaml.safe_load(report)["AR"] == 0.0

    def test_eval_class_mismatch(self, capsys, workdir, dataset):
        dets = workdir / "truck.txt"
        dets.write_text("frame=0 row=1 col=1 class=truck score=0.5\n")
        code, err = run(capsys, "eval", "--detections", dets, "--annotations", dataset / "scene_000.ann.txt")
        assert code == EXIT_VALIDATION and "unknown class" in err.err


class TestGradcheckBench:
    def test_pass(self, capsys):
        code, res = run(capsys, "gradcheck", "--blocks", "linear", "layernorm")
        assert code == EXIT_OK
        lines = res.out.strip().splitlines()
        assert len(lines) == 2 and all("status=PASS" in l and "worst=" in l for l in lines)

    def test_corrupt_hook(self, capsys, workdir):
        code, res = run(capsys, "gradcheck", "--blocks", "linear", "conv3d", "--corrupt", "conv3d",
                        "--out", workdir / "gc")
        assert code == EXIT_NUMERIC
        assert "block=conv3d" in res.out and "failed: conv3d" in res.out
        assert "block=linear" in res.out and "status=FAIL" not in res.out.split("block=conv3d")[0]

    def test_unknown_block(self, capsys):
        assert run(capsys, "gradcheck", "--blocks", "nope")[0] == EXIT_USAGE

    def test_bench_table(self, capsys, workdir):
        code, res = run(capsys, "bench", "--frames", 4, "--size", 16, "--channels", 8, "--out", workdir / "bench")
        assert code == EXIT_OK
        rows = {l.split()[0]: l.split() for l in res.out.splitlines()[1:4]}
        assert rows["patch_shift"][-1] == "0" and rows["channel_shift"][-1] == "0"
        assert int(rows["conv3d_3x3x3"][-1]) > 0
        assert rows["patch_shift"][1] == "4x16x16x8" and int(rows["patch_shift"][-2]) > 0
        assert res.out.splitlines()[0].split() == ["op", "extents", "mean_ms", "std_ms", "runs", "bytes_moved", "arith_ops"]
