import json
import struct
import subprocess
import sys

import numpy as np
import pytest
import torch
from PIL import Image

from cpl_exporter import ExportError, ExportSpec, export, write_cpl1
from cpl_exporter.cli import main as cli_main

NUM_CLASSES = 3
IMAGE_SIZE = 32


def make_images(root, per_class=4, classes=NUM_CLASSES, seed=0):
    """Small PNGs in ImageFolder layout; each class gets a distinct hue."""
    rng = np.random.default_rng(seed)
    for c in range(classes):
        cdir = root / f"class_{c}"
        cdir.mkdir(parents=True)
        for i in range(per_class):
            base = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
            base[..., c] = 160
            noise = rng.integers(0, 90, size=base.shape, dtype=np.uint8)
            Image.fromarray(base + noise).save(cdir / f"img_{i}.png")
    return root


@pytest.fixture
def image_root(tmp_path):
    return make_images(tmp_path / "data")


@pytest.fixture
def scripted_model(tmp_path):
    torch.manual_seed(0)
    net = torch.nn.Sequential(
        torch.nn.AdaptiveAvgPool2d(4),
        torch.nn.Flatten(),
        torch.nn.Linear(3 * 16, NUM_CLASSES),
    )
    net.eval()
    path = tmp_path / "tiny.pt"
    example = torch.zeros(1, 3, IMAGE_SIZE, IMAGE_SIZE)
    torch.jit.trace(net, example).save(str(path))
    return path


def read_cpl1(path):
    raw = path.read_bytes()
    assert raw[:4] == b"CPL1"
    n, k = struct.unpack("<II", raw[4:12])
    labels = np.frombuffer(raw[12 : 12 + 4 * n], dtype="<u4")
    logits = np.frombuffer(raw[12 + 4 * n : 12 + 4 * n + 4 * n * k], dtype="<f4").reshape(n, k)
    (meta_len,) = struct.unpack("<I", raw[12 + 4 * n + 4 * n * k : 16 + 4 * n + 4 * n * k])
    meta = json.loads(raw[16 + 4 * n + 4 * n * k :][:meta_len])
    return n, k, labels, logits, meta


def run_primary_cli(*argv):
    return subprocess.run(
        [sys.executable, "-m", "cpkit.cli", *argv], capture_output=True, text=True
    )


class TestExport:
    def test_writes_loadable_file(self, image_root, scripted_model, tmp_path):
        out = tmp_path / "export.cpl"
        spec = ExportSpec(
            model=str(scripted_model), data=str(image_root), out=str(out),
            image_size=IMAGE_SIZE, batch_size=5,
        )
        summary = export(spec)
        assert summary["n"] == 12 and summary["k"] == NUM_CLASSES
        n, k, labels, logits, meta = read_cpl1(out)
        assert (n, k) == (12, NUM_CLASSES)
        assert labels.min() >= 1 and labels.max() <= k
        assert np.all(np.isfinite(logits))
        assert meta["model"] == str(scripted_model)
        assert meta["tags"]["num_images"] == 12

    def test_deterministic_bytes(self, image_root, scripted_model, tmp_path):
        outs = []
        for name in ("a.cpl", "b.cpl"):
            out = tmp_path / name
            export(ExportSpec(model=str(scripted_model), data=str(image_root),
                              out=str(out), image_size=IMAGE_SIZE))
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_labels_csv_with_base_normalization(self, tmp_path, scripted_model):
        flat = tmp_path / "flat"
        flat.mkdir()
        rng = np.random.default_rng(1)
        rows = []
        for i in range(10):
            img = rng.integers(0, 255, size=(IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
            name = f"im{i}.png"
            Image.fromarray(img).save(flat / name)
            rows.append((name, i % NUM_CLASSES))  # 0-based labels
        csv_path = tmp_path / "labels.csv"
        csv_path.write_text("filename,label\n" + "\n".join(f"{n},{l}" for n, l in rows))
        out = tmp_path / "flat.cpl"
        export(ExportSpec(model=str(scripted_model), data=str(flat), out=str(out),
                          labels_csv=str(csv_path), label_base=0, image_size=IMAGE_SIZE))
        _, _, labels, _, _ = read_cpl1(out)
        assert labels.min() == 1  # normalized to the 1-indexed convention
        assert list(labels) == [(l % NUM_CLASSES) + 1 for _, l in rows]

    def test_torchvision_model_resolves(self, image_root, tmp_path):
        out = tmp_path / "tv.cpl"
        # seeded random-init weights: resolution and shape contract, not accuracy
        summary = export(ExportSpec(model="squeezenet1_0", data=str(image_root),
                                    out=str(out), image_size=64, batch_size=4))
        assert summary["k"] == 1000
        n, k, labels, _, _ = read_cpl1(out)
        assert (n, k) == (12, 1000)
        assert labels.max() <= 1000

    def test_unresolvable_model_fails_without_partial_file(self, image_root, tmp_path):
        out = tmp_path / "never.cpl"
        with pytest.raises(ExportError):
            export(ExportSpec(model="no_such_model_xyz", data=str(image_root), out=str(out)))
        assert not out.exists()
        assert not (tmp_path / "never.cpl.tmp").exists()

    def test_missing_dataset_fails(self, scripted_model, tmp_path):
        with pytest.raises(ExportError):
            export(ExportSpec(model=str(scripted_model), data=str(tmp_path / "nope"),
                              out=str(tmp_path / "x.cpl")))

    def test_label_beyond_model_outputs_fails(self, tmp_path, scripted_model):
        flat = tmp_path / "flat"
        flat.mkdir()
        Image.fromarray(np.zeros((8, 8, 3), dtype=np.uint8)).save(flat / "a.png")
        csv_path = tmp_path / "labels.csv"
        csv_path.write_text("filename,label\na.png,9\n")
        out = tmp_path / "bad.cpl"
        with pytest.raises(ExportError, match="only 3 outputs"):
            export(ExportSpec(model=str(scripted_model), data=str(flat), out=str(out),
                              labels_csv=str(csv_path), image_size=IMAGE_SIZE))
        assert not out.exists()


class TestWriter:
    def test_rejects_bad_inputs(self, tmp_path):
        with pytest.raises(ValueError):
            write_cpl1(tmp_path / "x.cpl", np.zeros((2, 2)), np.array([0, 1]))
        with pytest.raises(ValueError):
            write_cpl1(tmp_path / "x.cpl", np.full((1, 2), np.nan), np.array([1]))


class TestCli:
    def test_cli_round_trip(self, image_root, scripted_model, tmp_path, capsys):
        out = tmp_path / "cli.cpl"
        code = cli_main([
            "--model", str(scripted_model), "--data", str(image_root),
            "--out", str(out), "--image-size", str(IMAGE_SIZE),
        ])
        assert code == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["n"] == 12

    def test_cli_error_exit(self, image_root, tmp_path, capsys):
        code = cli_main([
            "--model", "no_such_model_xyz", "--data", str(image_root),
            "--out", str(tmp_path / "x.cpl"),
        ])
        assert code == 1
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "ExportError"


class TestPrimaryHarnessContract:
    """The exporter's output must be consumable by the conformal toolkit CLI,
    and both sides must agree on top-1 accuracy exactly."""

    def test_acceptance_export_loads_and_accuracy_matches(
        self, image_root, scripted_model, tmp_path, capsys
    ):
        out = tmp_path / "contract.cpl"
        summary = export(ExportSpec(model=str(scripted_model), data=str(image_root),
                                    out=str(out), image_size=IMAGE_SIZE))
        assert summary["n"] >= 10

        model_json = tmp_path / "model.json"
        calibrate = run_primary_cli(
            "calibrate", "--records", str(out), "--method", "thr",
            "--alpha", "0.2", "--out", str(model_json),
        )
        assert calibrate.returncode == 0, calibrate.stderr

        evaluate = run_primary_cli(
            "evaluate", "--records", str(out), "--model", str(model_json)
        )
        assert evaluate.returncode == 0, evaluate.stderr
        report = json.loads(evaluate.stdout)
        assert report["accuracy"] == summary["top1_accuracy"]
        print(
            f"PASS exporter contract | n={summary['n']}, "
            f"accuracy {summary['top1_accuracy']:.4f} == harness {report['accuracy']:.4f}"
        )
