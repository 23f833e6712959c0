import hashlib
import json
import struct

import numpy as np
import pytest

from conftest import tiny_spec
from multiview_rssi import dataset as D
from multiview_rssi import io
from multiview_rssi import models as M
from multiview_rssi import scene as S
from multiview_rssi import training as TR


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


class TestFrameBlob:
    def test_roundtrip(self, tmp_path, rng):
        img = rng.random((3, 5, 7)).astype(np.float32)
        io.write_frame(tmp_path / "f.mvtf", img)
        back = io.read_frame(tmp_path / "f.mvtf")
        assert back.dtype == np.float32 and back.tobytes() == img.tobytes()

    def test_layout(self, tmp_path):
        io.write_frame(tmp_path / "f.mvtf", np.full((1, 2, 3), 0.5, np.float32))
        raw = (tmp_path / "f.mvtf").read_bytes()
        assert raw[:4] == b"MVTF" and raw[4] == 1
        assert struct.unpack("<III", raw[5:17]) == (1, 2, 3)
        assert raw[17:21] == struct.pack("<f", 0.5) and len(raw) == 17 + 4 * 6

    def test_bad_magic(self, tmp_path):
        (tmp_path / "f.mvtf").write_bytes(b"XXXX" + bytes(13))
        with pytest.raises(io.FormatError):
            io.read_frame(tmp_path / "f.mvtf")

    def test_truncated(self, tmp_path):
        io.write_frame(tmp_path / "f.mvtf", np.zeros((3, 4, 4), np.float32))
        raw = (tmp_path / "f.mvtf").read_bytes()
        (tmp_path / "f.mvtf").write_bytes(raw[:-4])
        with pytest.raises(io.FormatError, match="payload"):
            io.read_frame(tmp_path / "f.mvtf")

    def test_rank_checked(self, tmp_path):
        with pytest.raises(ValueError):
            io.write_frame(tmp_path / "f.mvtf", np.zeros((4, 4)))


class TestPnm:
    def test_ppm_with_comment(self, tmp_path):
        pix = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) * 10
        (tmp_path / "a.ppm").write_bytes(b"P6\n# a comment\n3 2\n255\n" + pix.tobytes())
        img = io.load_image(tmp_path / "a.ppm")
        assert img.shape == (3, 2, 3)
        np.testing.assert_allclose(img, pix.transpose(2, 0, 1) / 255.0, rtol=1e-6)

    def test_pgm_16bit(self, tmp_path):
        pix = np.array([[0, 1000], [65535, 7]], dtype=">u2")
        (tmp_path / "a.pgm").write_bytes(b"P5 2 2 65535\n" + pix.tobytes())
        img = io.load_image(tmp_path / "a.pgm")
        np.testing.assert_allclose(img[0], pix / 65535.0, rtol=1e-6)

    def test_ascii_rejected(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P2 1 1 255\n0\n")
        with pytest.raises(io.FormatError):
            io.read_pnm(tmp_path / "a.pgm")


class TestCheckpoint:
    def test_tensor_roundtrip(self, tmp_path, rng):
        tensors = {"a": rng.random((2, 3)).astype(np.float32), "b.c": np.float32(rng.random((4,))),
                   "scalar": np.array(1.5, np.float32)}
        io.save_checkpoint(tmp_path / "c.ckpt", tensors, {"note": "x", "n": [1, 2]})
        back, header = io.load_checkpoint(tmp_path / "c.ckpt")
        assert list(back) == list(tensors) and header == {"note": "x", "n": [1, 2]}
        assert all(back[k].tobytes() == np.asarray(v).tobytes() for k, v in tensors.items())

    def test_rejects_float64(self, tmp_path):
        with pytest.raises(ValueError):
            io.save_checkpoint(tmp_path / "c.ckpt", {"a": np.zeros(2)}, {})

    def test_trailing_bytes(self, tmp_path):
        io.save_checkpoint(tmp_path / "c.ckpt", {"a": np.zeros(2, np.float32)}, {})
        with open(tmp_path / "c.ckpt", "ab") as fh:
            fh.write(b"\0")
        with pytest.raises(io.FormatError, match="trailing"):
            io.load_checkpoint(tmp_path / "c.ckpt")

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "c.ckpt").write_bytes(b"hello world, definitely not a checkpoint")
        with pytest.raises(io.FormatError):
            io.load_checkpoint(tmp_path / "c.ckpt")

    @pytest.mark.parametrize("variant", ["mulvit_tf", "mulvit_twdnn", "sinvit_d"])
    def test_forward_bitwise(self, tmp_path, variant):
        spec = tiny_spec(variant)
        params = M.init_params(spec, seed=7)
        TR.save_model(tmp_path / "m.ckpt", spec, params, TR.Normalizer(-60.0, 3.0))
        spec2, params2, _, _ = TR.load_model(tmp_path / "m.ckpt")
        x = np.random.default_rng(0).random((3, 2, 3, 16, 32)).astype(np.float32)
        assert M.forward(x, spec, params).data.tobytes() == M.forward(x, spec2, params2).data.tobytes()

    def test_train_state_loads_as_model(self, tmp_path):
        spec = tiny_spec()
        rng = np.random.default_rng(0)
        data = TR.TrainData(rng.random((12, 2, 3, 16, 32)).astype(np.float32), rng.normal(-60, 4, 12),
                            np.array(["train"] * 10 + ["val", "test"]))
        cfg = TR.TrainConfig(phase1_epochs=1, phase2_epochs=0, batch_size=4, dropout=0.0)
        res = TR.train(spec, M.init_params(spec), data, cfg, state_path=tmp_path / "s.ckpt")
        _, params, norm, header = TR.load_model(tmp_path / "s.ckpt")
        assert header["kind"] == "train-state" and norm == res.normalizer
        assert TR.params_hash(params) == TR.params_hash(res.final_params)


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    roots = [tmp_path_factory.mktemp(f"gen{i}") for i in range(2)]
    for r in roots:
        D.generate_dataset(S.SceneSpec(), 10, r, seed=4)
    return roots


class TestDatasetGeneration:
    def test_layout(self, generated):
        root = generated[0]
        assert len(list(root.glob("frames/cam*/*.mvtf"))) == 20
        lines = (root / "rssi.csv").read_text().splitlines()
        assert lines[0] == "timestamp_us,rssi_dbm" and len(lines) == 21
        manifest = json.loads((root / "manifest.json").read_text())
        assert manifest["version"] == D.MANIFEST_VERSION and manifest["cameras"] == 2
        assert manifest["config"]["seed"] == 4 and S.SceneSpec.from_dict(manifest["scene"]) == S.SceneSpec()

    def test_byte_identical_across_runs(self, generated):
        assert tree_digest(generated[0]) == tree_digest(generated[1])

    def test_load_matches_simulation(self, generated):
        ds, images = D.load_dataset(generated[0])
        sim = S.simulate(S.SceneSpec(), 10, seed=4)
        idx = [int(f[0].split("/")[-1][:-5]) for f in ds.frames]
        assert images.tobytes() == sim.images[idx].tobytes()
        assert set(ds.split) <= set(TR.SPLITS)

    def test_missing_frame(self, generated, tmp_path):
        import shutil
        root = tmp_path / "copy"
        shutil.copytree(generated[0], root)
        manifest = json.loads((root / "manifest.json").read_text())
        (root / manifest["samples"][0]["frames"][1]).unlink()
        with pytest.raises(D.ManifestError, match="missing"):
            D.load_manifest(root)

    def test_version_mismatch(self, generated, tmp_path):
        import shutil
        root = tmp_path / "copy"
        shutil.copytree(generated[0], root)
        m = json.loads((root / "manifest.json").read_text())
        m["version"] = 99
        (root / "manifest.json").write_text(json.dumps(m))
        with pytest.raises(D.ManifestError, match="version"):
            D.load_manifest(root)

    def test_root_from_environment(self, generated, monkeypatch):
        monkeypatch.setenv(D.DATA_ROOT_ENV, str(generated[0].parent))
        ds, _ = D.load_dataset(generated[0].name)
        assert len(ds) > 0


def test_frames_are_float32_in_unit_range(generated):
    img = io.read_frame(next(generated[0].glob("frames/cam0/*.mvtf")))
    assert img.shape == (3, 48, 64) and 0 <= img.min() and img.max() <= 1

