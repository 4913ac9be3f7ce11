import numpy as np
import pytest
import torch

from translearn.features import (DescriptorTable, PoolMode, band_bounds, extract_descriptors, lmp, load_descriptors,
                                 save_descriptors)
from translearn.networks import FeatureLearner


def test_single_avg_band_is_global_average():
    torch.manual_seed(0)
    fmap = torch.randn(3, 256, 8, 4)
    d = lmp(fmap, 1, "avg")
    assert torch.equal(d.vectors, fmap.mean(dim=(2, 3)))
    assert torch.equal(d.vectors, torch.nn.functional.adaptive_avg_pool2d(fmap, 1).flatten(1))


def test_eight_parts_wide_backbone_dim():
    d = lmp(torch.zeros(1, 2048, 8, 4), 8, "max")
    assert d.dim == 16384
    assert lmp(torch.zeros(1, 2048, 8, 4), 1, "avg").dim == 2048


def test_max_dominates_avg_per_band():
    g = torch.Generator().manual_seed(0)
    for _ in range(1000):
        h = int(torch.randint(1, 10, (1,), generator=g))
        parts = int(torch.randint(1, h + 1, (1,), generator=g))
        fmap = torch.randn(1, 3, h, 2, generator=g)
        assert bool((lmp(fmap, parts, "max").vectors >= lmp(fmap, parts, "avg").vectors).all())


@pytest.mark.parametrize("h, p, expected", [
    (8, 8, [(k, k + 1) for k in range(8)]),
    (8, 3, [(0, 3), (3, 6), (6, 8)]),
    (7, 2, [(0, 4), (4, 7)]),
    (5, 1, [(0, 5)]),
])
def test_band_bounds(h, p, expected):
    assert band_bounds(h, p) == expected


def test_band_bounds_cover_rows():
    for h in range(1, 20):
        for p in range(1, h + 1):
            b = band_bounds(h, p)
            assert b[0][0] == 0 and b[-1][1] == h
            assert all(a[1] == c[0] for a, c in zip(b, b[1:]))
            sizes = [e - s for s, e in b]
            assert max(sizes) - min(sizes) <= 1 and sizes == sorted(sizes, reverse=True)


@pytest.mark.parametrize("p", [0, 9])
def test_too_many_parts(p):
    with pytest.raises(ValueError, match="parts"):
        lmp(torch.zeros(1, 2, 8, 4), p)


def test_band_layout_is_top_to_bottom():
    fmap = torch.zeros(1, 2, 4, 1)
    fmap[0, :, 0] = 1.0
    fmap[0, :, 3] = 5.0
    v = lmp(fmap, 2, "max").vectors[0]
    assert v.tolist() == [1.0, 1.0, 5.0, 5.0]


def test_extract_restores_mode_and_state(small_domains):
    src, _ = small_domains
    torch.manual_seed(0)
    C = FeatureLearner(4)
    C.train()
    before = {k: v.clone() for k, v in C.state_dict().items()}
    table = extract_descriptors(C, src.query, parts=2, mode="max", image_size=(64, 32), batch_size=3)
    assert C.training
    assert all(torch.equal(before[k], v) for k, v in C.state_dict().items())
    assert table.vectors.shape == (len(src.query), 512)
    assert table.keys == [str(s.image_path) for s in src.query]
    again = extract_descriptors(C, src.query, parts=2, mode="max", image_size=(64, 32), batch_size=7)
    assert np.allclose(table.vectors, again.vectors, atol=1e-5)


def test_export_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    table = DescriptorTable([f"img{i}.png" for i in range(5)], rng.standard_normal((5, 12)), 4, PoolMode.AVG)
    path, sidecar = save_descriptors(table, tmp_path / "d.bin")
    raw = path.read_bytes()
    assert raw[:4] == b"TLDS" and len(raw) == 20 + 5 * 12 * 4
    assert sidecar.read_text().splitlines()[2] == "2\timg2.png"
    back = load_descriptors(path)
    assert back.keys == table.keys and back.parts == 4 and back.mode is PoolMode.AVG
    assert np.allclose(back.vectors, table.vectors.astype(np.float32))


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ValueError):
        load_descriptors(p)
