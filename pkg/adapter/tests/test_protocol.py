"""Adapter protocol conformance against the benchmark harness validator."""

import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from lama_adapter.cli import AdapterConfig, mean_fill, serve_case_dir

ADAPTER_STUB_CMD = [sys.executable, "-m", "lama_adapter", "--stub", "mean-fill"]


def make_case_dir(tmp_path, n_items=12, size=96, seed=0):
    rng = np.random.default_rng(seed)
    d = tmp_path / "case"
    d.mkdir()
    for i in range(n_items):
        img = np.full((size, size), 230, np.uint8)
        for _ in range(5):
            y, x = rng.integers(4, size - 20, size=2)
            img[y : y + 12, x : x + 12] = rng.integers(0, 140)
        mask = np.zeros((size, size), np.uint8)
        mask[size // 3 : 2 * size // 3, size // 3 : 2 * size // 3] = 255
        Image.fromarray(img, mode="L").save(d / f"item_{i:03d}_image.png")
        Image.fromarray(mask, mode="L").save(d / f"item_{i:03d}_mask.png")
    return d


class TestMeanFill:
    def test_fill_value_is_boundary_mean(self):
        img = np.full((32, 32), 100, np.uint8)
        img[0:8, :] = 200
        mask = np.zeros((32, 32), bool)
        mask[12:20, 12:20] = True
        out = mean_fill(img, mask)
        assert (out[mask] == 100).all()  # ring is uniform 100
        assert np.array_equal(out[~mask], img[~mask])

    def test_unmasked_pixels_exact(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(48, 48)).astype(np.uint8)
        mask = np.zeros((48, 48), bool)
        mask[10:30, 10:30] = True
        out = mean_fill(img, mask)
        assert np.array_equal(out[~mask], img[~mask])


class TestServeCaseDir:
    def test_stub_writes_all_results(self, tmp_path):
        case = make_case_dir(tmp_path, n_items=3)
        status = serve_case_dir(AdapterConfig(case_dir=case, stub="mean-fill"))
        assert status == 0
        for i in range(3):
            assert (case / f"item_{i:03d}_result.png").exists()
        assert (case / "adapter_meta.json").exists()

    def test_missing_mask_exits_3_naming_item(self, tmp_path, capsys):
        case = make_case_dir(tmp_path, n_items=9)
        (case / "item_007_mask.png").unlink()
        status = serve_case_dir(AdapterConfig(case_dir=case, stub="mean-fill"))
        err = capsys.readouterr().err
        assert status == 3
        assert "item 7" in err
        assert "unprocessed items: 7" in err
        # other items were still served
        assert (case / "item_000_result.png").exists()
        assert not (case / "item_007_result.png").exists()

    def test_checkpoint_load_failure_exits_4(self, tmp_path, capsys):
        case = make_case_dir(tmp_path, n_items=1)
        bogus = tmp_path / "weights.pt"
        bogus.write_bytes(b"not a checkpoint")
        status = serve_case_dir(AdapterConfig(case_dir=case, checkpoint=bogus))
        assert status == 4
        assert "checkpoint load failed" in capsys.readouterr().err
        assert not (case / "item_000_result.png").exists()

    def test_empty_dir_fails(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert serve_case_dir(AdapterConfig(case_dir=empty, stub="mean-fill")) == 3


class TestCommandLine:
    def test_cli_stub_roundtrip(self, tmp_path):
        case = make_case_dir(tmp_path, n_items=2)
        proc = subprocess.run(
            ADAPTER_STUB_CMD + [str(case)], capture_output=True, text=True
        )
        assert proc.returncode == 0, proc.stderr
        assert (case / "item_001_result.png").exists()

    def test_cli_requires_mode(self, tmp_path):
        case = make_case_dir(tmp_path, n_items=1)
        proc = subprocess.run(
            [sys.executable, "-m", "lama_adapter", str(case)], capture_output=True
        )
        assert proc.returncode == 2  # argparse usage error


class TestHarnessConformance:
    def test_stub_passes_harness_validation_end_to_end(self, tmp_path):
        """The primary harness invokes the adapter and validates its output."""
        ravenbench = pytest.importorskip("ravenbench")
        from ravenbench.inpaint import run_external
        from ravenbench.matrixgen import generate_battery, write_battery

        items = generate_battery(0, 12)
        case = tmp_path / "battery"
        write_battery(items, case, 0)
        results = run_external(case, ADAPTER_STUB_CMD, timeout=300)
        ok = len(results) == 12 and all(r.image.shape == (512, 512) for r in results)
        print(f"ACCEPTANCE adapter protocol conformance: {'PASS' if ok else 'FAIL'} "
              f"({len(results)}/12 results validated)")
        assert len(results) == 12
        for res in results:
            assert res.image.shape == (512, 512)
            assert res.substrate_id.startswith("external:")

    def test_missing_mask_detected_before_harness(self, tmp_path):
        pytest.importorskip("ravenbench")
        from ravenbench.inpaint import MissingResultError, run_external
        from ravenbench.matrixgen import generate_battery, write_battery

        items = generate_battery(1, 3)
        case = tmp_path / "battery"
        write_battery(items, case, 1)
        (case / "item_001_mask.png").unlink()
        with pytest.raises(MissingResultError) as exc:
            run_external(case, ADAPTER_STUB_CMD, timeout=120)
        assert exc.value.item_index == 1


@pytest.mark.skipif(
    not pytest.importorskip("importlib.util").find_spec("torch"), reason="torch unavailable"
)
class TestCheckpointPath:
    def test_torchscript_checkpoint_roundtrip(self, tmp_path):
        torch = pytest.importorskip("torch")

        class TrivialInpainter(torch.nn.Module):
            def forward(self, image, mask):
                filled = image * (1.0 - mask) + 0.5 * mask
                return filled

        ckpt = tmp_path / "trivial.pt"
        torch.jit.script(TrivialInpainter()).save(str(ckpt))
        case = make_case_dir(tmp_path, n_items=2)
        status = serve_case_dir(AdapterConfig(case_dir=case, checkpoint=ckpt))
        assert status == 0
        import json

        meta = json.loads((case / "adapter_meta.json").read_text())
        assert meta["mode"] == "checkpoint"
        assert "checkpoint_sha256" in meta
        result = np.asarray(Image.open(case / "item_000_result.png"))
        image = np.asarray(Image.open(case / "item_000_image.png"))
        mask = np.asarray(Image.open(case / "item_000_mask.png")) > 127
        assert np.array_equal(result[~mask], image[~mask])
        assert (np.abs(result[mask].astype(int) - 128) <= 1).all()
