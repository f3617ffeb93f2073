from collections import OrderedDict

import numpy as np
import pytest
import torch

from cinebrain.formats import (FormatError, load_checkpoint, read_array, read_chunks,
                               read_fmri, read_frame_dir, save_checkpoint, write_array,
                               write_chunks, write_fmri, write_frame_dir)


def test_fmri_roundtrip(tmp_path):
    data = np.random.default_rng(0).standard_normal((2, 5, 3)).astype(np.float32)
    write_fmri(tmp_path / "m", "m", data, 1.3)
    arr, header = read_fmri(tmp_path / "m")
    assert np.array_equal(arr, data)
    assert (header["subjects"], header["trs"], header["voxels"]) == (2, 5, 3)
    # little-endian float32 payload
    assert (tmp_path / "m.f32").read_bytes() == data.astype("<f4").tobytes()


def test_chunks_roundtrip(tmp_path):
    x = torch.rand(2, 32, 3, 4, 4)
    write_chunks(tmp_path / "c", "c", x)
    y, header = read_chunks(tmp_path / "c")
    assert torch.equal(x, y) and header["n_chunks"] == 2


def test_truncated_payload_rejected(tmp_path):
    write_array(tmp_path / "a", np.zeros((4, 4)), {})
    p = tmp_path / "a.f32"
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(FormatError):
        read_array(tmp_path / "a")


def test_bad_json_rejected(tmp_path):
    write_fmri(tmp_path / "m", "m", np.zeros((1, 2, 2)), 1.3)
    (tmp_path / "m.json").write_text("{")
    with pytest.raises(FormatError):
        read_fmri(tmp_path / "m")


def test_frame_dir_roundtrip(tmp_path):
    frames = torch.from_numpy(np.random.default_rng(1).integers(0, 256, (3, 3, 5, 6)) / 255.0).float()
    write_frame_dir(tmp_path / "mv", "mv", frames, fps=24.0)
    back, meta = read_frame_dir(tmp_path / "mv")
    assert meta["frame_count"] == 3 and meta["fps"] == 24.0
    assert torch.allclose(back, frames, atol=1e-6)


def test_checkpoint_roundtrip_and_bytes(tmp_path):
    t = OrderedDict([("w", torch.randn(3, 2)), ("n", torch.tensor(5)),
                     ("d", torch.randn(2, dtype=torch.float64))])
    save_checkpoint(tmp_path / "a.bin", t, {"epoch": 1})
    save_checkpoint(tmp_path / "b.bin", t, {"epoch": 1})
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    back, man = load_checkpoint(tmp_path / "a.bin")
    assert man == {"epoch": 1} and list(back) == ["w", "n", "d"]
    assert all(torch.equal(t[k], back[k]) and t[k].dtype == back[k].dtype for k in t)
    assert not (tmp_path / "a.bin.tmp").exists()


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"garbage!" + bytes(16))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "x.bin")
