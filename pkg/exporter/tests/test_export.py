import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from bagexport.backbones import BACKBONE_DIMS
from bagexport.cli import main
from bagexport.export import ExportJob, export


def _toy_image(path, seed, size=(96, 72)):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=(size[1], size[0], 3), dtype=np.uint8)
    Image.fromarray(arr, "RGB").save(path)


@pytest.fixture(scope="module")
def image_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("patients")
    (root / "patient-a").mkdir()
    for i in range(3):
        _toy_image(root / "patient-a" / f"capture_{i}.png", seed=10 + i)
    (root / "patient-b").mkdir()
    for i in range(2):
        _toy_image(root / "patient-b" / f"img_{i}.png", seed=20 + i)
    sidecar = root / "sidecar.csv"
    sidecar.write_text(
        "patient_id,label,caption\n"
        "patient-a,1,malignant tissue found in region alpha\n"
        "patient-b,0,no malignant tissue found\n")
    return root


def _inspect_via_primary(path) -> dict:
    """Parse a .bagemb through the primary package's CLI (the contract)."""
    proc = subprocess.run(
        [sys.executable, "-m", "graphmil.cli", "inspect", str(path)],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    out = {}
    for line in proc.stdout.splitlines():
        key, _, value = line.partition(": ")
        out[key] = value
    return out


def test_export_round_trips_through_primary_inspect(image_root, tmp_path):
    job = ExportJob(input_root=image_root, output_dir=tmp_path / "out",
                    sidecar=image_root / "sidecar.csv")
    summary = export(job)
    assert summary.d_v == 768
    assert summary.patients_written == ["patient-a", "patient-b"]

    doc_a = _inspect_via_primary(tmp_path / "out" / "patient-a.bagemb")
    assert doc_a["n_patches"] == "3"
    assert doc_a["d_v"] == "768"
    assert doc_a["label"] == "1"
    assert doc_a["caption"] == "malignant tissue found in region alpha"
    doc_b = _inspect_via_primary(tmp_path / "out" / "patient-b.bagemb")
    assert doc_b["n_patches"] == "2"
    assert doc_b["label"] == "0"


def test_reexport_is_byte_identical(image_root, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        export(ExportJob(input_root=image_root, output_dir=out,
                         sidecar=image_root / "sidecar.csv"))
    for name in ("patient-a.bagemb", "patient-b.bagemb", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_manifest_loads_in_primary(image_root, tmp_path):
    out = tmp_path / "out"
    export(ExportJob(input_root=image_root, output_dir=out,
                     sidecar=image_root / "sidecar.csv"))
    doc = json.loads((out / "manifest.json").read_text())
    assert doc["format"] == "graphmil-manifest"
    assert doc["d_v"] == 768
    assert len(doc["bags"]) == 2
    # the primary package accepts the whole dataset unchanged
    from graphmil.bags import load_dataset
    ds = load_dataset(out / "manifest.json")
    assert ds.d_v == 768 and len(ds.bags) == 2


def test_resnet_preset_emits_512(image_root, tmp_path):
    job = ExportJob(input_root=image_root, output_dir=tmp_path / "out",
                    backbone="resnet34")
    summary = export(job)
    assert summary.d_v == 512
    doc = _inspect_via_primary(tmp_path / "out" / "patient-a.bagemb")
    assert doc["d_v"] == "512"
    assert doc["label"] == "None"   # no sidecar


def test_unreadable_image_skipped_and_counted(image_root, tmp_path):
    root = tmp_path / "patients"
    root.mkdir()
    (root / "p1").mkdir()
    _toy_image(root / "p1" / "good.png", seed=1)
    (root / "p1" / "broken.png").write_bytes(b"not an image at all")
    with pytest.warns(UserWarning, match="unreadable"):
        summary = export(ExportJob(input_root=root,
                                   output_dir=tmp_path / "out"))
    assert len(summary.images_skipped) == 1
    doc = _inspect_via_primary(tmp_path / "out" / "p1.bagemb")
    assert doc["n_patches"] == "1"


def test_patient_with_no_usable_images_omitted(image_root, tmp_path):
    root = tmp_path / "patients"
    root.mkdir()
    (root / "empty").mkdir()
    (root / "ok").mkdir()
    _toy_image(root / "ok" / "a.png", seed=2)
    with pytest.warns(UserWarning, match="omitted"):
        summary = export(ExportJob(input_root=root,
                                   output_dir=tmp_path / "out"))
    assert summary.patients_omitted == ["empty"]
    assert summary.patients_written == ["ok"]
    doc = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert len(doc["bags"]) == 1


def test_rows_follow_sorted_filename_order(image_root, tmp_path):
    out1 = tmp_path / "o1"
    export(ExportJob(input_root=image_root, output_dir=out1))
    # renaming a file to sort first must move its embedding to row 0
    root2 = tmp_path / "patients2"
    (root2 / "patient-a").mkdir(parents=True)
    src = image_root / "patient-a"
    names = sorted(p.name for p in src.iterdir())
    for name in names:
        (root2 / "patient-a" / name).write_bytes((src / name).read_bytes())
    moved = root2 / "patient-a" / names[-1]
    moved.rename(root2 / "patient-a" / "aaa_first.png")
    out2 = tmp_path / "o2"
    export(ExportJob(input_root=root2, output_dir=out2))

    def rows(path):
        raw = path.read_bytes()
        import struct
        _, _, _, n, d, _, cap_len = struct.unpack_from("<4sHHIIBI", raw, 0)
        off = 21 + cap_len
        (id_len,) = struct.unpack_from("<H", raw, off)
        off += 2 + id_len
        return np.frombuffer(raw, dtype="<f4", offset=off).reshape(n, d)

    base = rows(out1 / "patient-a.bagemb")
    renamed = rows(out2 / "patient-a.bagemb")
    np.testing.assert_array_equal(renamed[0], base[-1])
    np.testing.assert_array_equal(renamed[1:], base[:-1])


def test_cli_end_to_end(image_root, tmp_path, capsys):
    code = main(["--input", str(image_root), "--output",
                 str(tmp_path / "out"), "--sidecar",
                 str(image_root / "sidecar.csv")])
    assert code == 0
    out = capsys.readouterr().out
    assert "wrote 2 bags (d_v=768)" in out
    assert (tmp_path / "out" / "manifest.json").exists()


def test_cli_missing_input_is_error(tmp_path, capsys):
    assert main(["--input", str(tmp_path / "nope"), "--output",
                 str(tmp_path / "out")]) == 2
    assert "error" in capsys.readouterr().err


def test_backbone_dims_contract():
    assert BACKBONE_DIMS == {"vit_b_16": 768, "resnet34": 512}
