from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from cinebrain.stimulus import (VideoChunk, chunk_movie, extract_target, resample_movie,
                                resize_frames, stack_chunks, temporal_indices, uint8_to_unit)


def index_oracle(n_raw, fps, tr):
    """Nearest raw frame for every output instant, exact arithmetic, ties to the later frame."""
    fps, tr = Fraction(fps), Fraction(tr)
    n_tr = int(Fraction(n_raw) / (fps * tr))
    out = []
    for k in range(n_tr * 32):
        pos = Fraction(k) * tr / 32 * fps
        best = min(range(n_raw), key=lambda j: (abs(j - pos), -j))
        out.append(best)
    return out


def test_native_rate_is_identity():
    frames = torch.rand(64, 3, 8, 8)
    out = resample_movie(frames, fps=32 / 1.3, tr_seconds=1.3, height=8, width=8)
    assert torch.equal(out, frames)


def test_30fps_matches_index_oracle():
    got = temporal_indices(39 * 3 + 5, 30.0, 1.3)
    assert got.tolist() == index_oracle(39 * 3 + 5, Fraction(30), Fraction(13, 10))
    assert len(got) == 96


def test_partial_tr_dropped():
    out = resample_movie(torch.rand(33, 3, 8, 8), fps=32 / 1.3, height=8, width=8)
    assert len(chunk_movie(out, "m")) == 1


def test_short_movie_is_empty():
    assert resample_movie(torch.rand(5, 3, 8, 8), fps=32 / 1.3, height=8, width=8).shape[0] == 0


def test_bad_arguments():
    with pytest.raises(ValueError):
        temporal_indices(0, 30, 1.3)
    with pytest.raises(ValueError):
        temporal_indices(10, -1, 1.3)
    with pytest.raises(ValueError):
        chunk_movie(torch.rand(33, 3, 4, 4), "m")
    with pytest.raises(ValueError):
        VideoChunk("m", 0, torch.rand(31, 3, 4, 4))


def test_chunking_examples():
    frames = torch.rand(96, 3, 4, 4)
    chunks = chunk_movie(frames, "m")
    assert [c.chunk_index for c in chunks] == [0, 1, 2]
    assert all(c.target_frame_index == 16 for c in chunks)
    assert torch.equal(extract_target(chunks[1]).pixels, frames[48])
    assert stack_chunks(chunks).shape == (3, 32, 3, 4, 4)
    assert len(chunk_movie(torch.zeros(309 * 32, 3, 1, 1), "m")) == 309


def test_center_crop_then_scale():
    frames = torch.zeros(1, 3, 4, 8)
    frames[..., 2:6] = 1.0  # the central square
    out = resize_frames(frames, 4, 4)
    assert torch.equal(out, torch.ones(1, 3, 4, 4))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 80), st.integers(4, 40), st.integers(4, 40),
       st.floats(5, 60), st.integers(0, 2**31))
def test_values_stay_in_unit_range(n, h, w, fps, seed):
    g = torch.Generator().manual_seed(seed)
    frames = torch.rand(n, 3, h, w, generator=g)
    out = resample_movie(frames, fps=fps, tr_seconds=1.3, height=16, width=16)
    assert out.shape[0] % 32 == 0
    if out.numel():
        assert out.min() >= 0 and out.max() <= 1


def test_uint8_conversion():
    u = np.array([[[[0, 128, 255]]]], dtype=np.uint8)
    out = uint8_to_unit(u)
    assert out.shape == (1, 3, 1, 1)
    assert out[0, :, 0, 0].tolist() == pytest.approx([0, 128 / 255, 1])
    with pytest.raises(TypeError):
        uint8_to_unit(u.astype(np.float32))
