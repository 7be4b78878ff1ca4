import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image

from conftest import tiny_model_config
from fusionscope.model import DualBranchNet
from fusionscope.saliency import (AttributionPlugin, GridGeometry, Reduction, SaliencyMap, SaliencySource,
                                  attention_saliency, export_saliency, feature_saliency, get_plugin, import_saliency,
                                  model_saliency, normalize_minmax, overlay, reduce_channels, register_plugin,
                                  save_overlay, upsample)


def test_saliency_map_validation():
    with pytest.raises(ValueError):
        SaliencyMap(np.full((2, 2), 1.5))
    with pytest.raises(ValueError):
        SaliencyMap(np.zeros(4))
    with pytest.raises(ValueError):
        SaliencyMap(np.array([[np.nan]]))
    assert SaliencyMap(np.zeros((3, 3)), "LOCAL").source is SaliencySource.LOCAL


def test_mean_abs_hand_example():
    fmap = np.array([[[1.0, 3.0]], [[-1.0, 1.0]]])  # 2 channels, 1x2 grid
    np.testing.assert_allclose(reduce_channels(fmap, "MEAN_ABS"), [[1.0, 2.0]])
    np.testing.assert_allclose(normalize_minmax(reduce_channels(fmap)), [[0.0, 1.0]])
    np.testing.assert_allclose(reduce_channels(fmap, Reduction.L2), [[np.sqrt(2), np.sqrt(10)]])


def test_constant_maps_give_zero_saliency():
    assert not feature_saliency(np.full((4, 5, 5), 2.0), out=(20, 20)).data.any()
    assert not attention_saliency(np.full((1, 14, 14), 1 / 196)).data.any()


@pytest.mark.parametrize("pos", [(0, 0), (3, 5), (6, 6)])
def test_hot_cell_argmax_within_cell(pos):
    grid = np.zeros((1, 7, 7))
    grid[0][pos] = 1.0
    sal = feature_saliency(grid, out=(224, 224)).data
    r, c = np.unravel_index(np.argmax(sal), sal.shape)
    assert pos[0] * 32 <= r < (pos[0] + 1) * 32 and pos[1] * 32 <= c < (pos[1] + 1) * 32


def test_attention_reference_size_and_argmax():
    alpha = np.random.default_rng(0).random((1, 14, 14)) * 0.5
    alpha[0, 9, 2] = 1.0
    sal = attention_saliency(alpha, (224, 224), image_id="x")
    assert sal.shape == (224, 224) and sal.source is SaliencySource.FUSION_GATE and sal.image_id == "x"
    r, c = np.unravel_index(np.argmax(sal.data), sal.shape)
    assert 9 * 16 <= r < 10 * 16 and 2 * 16 <= c < 3 * 16


def test_geometry_anchored_upsampling():
    grid = np.zeros((4, 4))
    grid[2, 1] = 1.0
    geo = GridGeometry(stride=16.0, offset=0.0)
    up = upsample(grid, (64, 64), geo)
    assert up[32, 16] == 1.0                        # cell centre lands on stride * index
    assert np.unravel_index(np.argmax(up), up.shape) == (32, 16)
    half = GridGeometry.half_pixel(4, 64)
    assert (half.stride, half.offset) == (16.0, 7.5)


def test_output_in_unit_interval_and_input_sized(rng):
    for _ in range(5):
        sal = feature_saliency(rng.normal(size=(8, 5, 6)), "L2", (40, 48))
        assert sal.shape == (40, 48) and sal.data.min() >= 0 and sal.data.max() <= 1


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(1e-3, 1e3), seed=st.integers(0, 1000))
def test_positive_scaling_invariance(scale, seed):
    fmap = np.random.default_rng(seed).normal(size=(3, 6, 6))
    for red in Reduction:
        a = feature_saliency(fmap, red, (24, 24)).data
        b = feature_saliency(fmap * scale, red, (24, 24)).data
        np.testing.assert_allclose(a, b, atol=1e-9)
        grid = reduce_channels(fmap, red)
        assert np.argmax(reduce_channels(fmap * scale, red)) == np.argmax(grid)


def test_reduction_permutation_equivariance(rng):
    fmap = rng.normal(size=(5, 6, 6))
    perm = rng.permutation(36)
    shuffled = fmap.reshape(5, 36)[:, perm].reshape(5, 6, 6)
    for red in Reduction:
        np.testing.assert_allclose(reduce_channels(shuffled, red).ravel(), reduce_channels(fmap, red).ravel()[perm])


# -- overlay ---------------------------------------------------------------


def test_overlay_alpha_extremes(rng):
    img = rng.random((3, 16, 16))
    sal = rng.random((16, 16))
    np.testing.assert_array_equal(overlay(img, sal, 0.0), np.round(np.moveaxis(img, 0, -1) * 255).astype(np.uint8))
    full = overlay(img, np.ones((16, 16)), 1.0)
    import matplotlib
    top = np.round(np.array(matplotlib.colormaps["jet"](1.0)[:3]) * 255).astype(np.uint8)
    assert np.all(full == top)
    with pytest.raises(ValueError):
        overlay(img, sal, 1.5)


def test_overlay_png_deterministic(tmp_path, rng):
    img, sal = rng.random((16, 16)), rng.random((16, 16))
    a = save_overlay(tmp_path / "a.png", img, sal).read_bytes()
    b = save_overlay(tmp_path / "b.png", img, sal).read_bytes()
    assert a == b
    assert np.asarray(Image.open(tmp_path / "a.png")).shape == (16, 16, 3)


# -- export / import ---------------------------------------------------------


def test_export_import_round_trip(tmp_path, rng):
    data = rng.random((30, 40))
    sal = SaliencyMap(data, "LOCAL", "img7")
    path = export_saliency(sal, tmp_path / "sub" / "img7.png", model_hash="abc")
    meta = json.loads((tmp_path / "sub" / "img7.json").read_text())
    assert meta["image_id"] == "img7" and meta["source"] == "LOCAL" and meta["model_hash"] == "abc"
    back = import_saliency(path)
    assert np.abs(back.data - data).max() <= 1 / 65535
    assert back.source is SaliencySource.LOCAL and back.image_id == "img7"
    assert np.argmax(back.data) == np.argmax(data)
    with Image.open(path) as im:
        assert im.mode.startswith("I")  # 16-bit grayscale


def test_quantization_preserves_well_separated_order(tmp_path):
    rng = np.random.default_rng(4)
    for trial in range(10):
        data = rng.random((12, 12))
        gaps = np.diff(np.sort(data.ravel()))
        if gaps.min() <= 2 / 65535:
            continue
        back = import_saliency(export_saliency(SaliencyMap(data), tmp_path / f"{trial}.png")).data
        np.testing.assert_array_equal(np.argsort(back.ravel()), np.argsort(data.ravel()))


def test_import_errors(tmp_path):
    path = export_saliency(SaliencyMap(np.zeros((4, 4))), tmp_path / "a.png")
    side = tmp_path / "a.json"
    side.write_text("{not json")
    with pytest.raises(ValueError, match="corrupt"):
        import_saliency(path)
    side.write_text(json.dumps({"image_id": "a", "source": "LOCAL", "height": 5, "width": 4}))
    with pytest.raises(ValueError, match="shape"):
        import_saliency(path)
    side.unlink()
    with pytest.raises(FileNotFoundError):
        import_saliency(path)


# -- plugins and model sources ------------------------------------------------


def test_plugin_interface():
    plugin = AttributionPlugin("centre", lambda model, image, target: np.pad(np.ones((2, 2)), 3))
    register_plugin(plugin)
    out = get_plugin("centre")(None, np.zeros((3, 8, 8)), 1)
    assert out.source is SaliencySource.EXTERNAL and out.shape == (8, 8)
    bad = AttributionPlugin("bad", lambda m, i, t: np.ones((3, 3)))
    with pytest.raises(ValueError):
        bad(None, np.zeros((3, 8, 8)), 0)
    with pytest.raises(KeyError):
        get_plugin("missing")


@pytest.mark.parametrize("strategy, source", [("gate", "FUSION_GATE"), ("concat", "FUSION_CONCAT"),
                                              ("product", "FUSION_PRODUCT")])
def test_model_saliency_sources(strategy, source):
    model = DualBranchNet(tiny_model_config(strategy=strategy)).eval()
    with torch.no_grad():
        out = model(torch.randn(2, 3, 64, 64))
    for src in ("GLOBAL", "LOCAL", source):
        sal = model_saliency(out, src, 1, (64, 64), image_id="q")
        assert sal.shape == (64, 64) and sal.source.value == src
    if strategy == "gate":
        direct = attention_saliency(out["alpha"][1], (64, 64))
        np.testing.assert_array_equal(model_saliency(out, "FUSION_GATE", 1, (64, 64)).data, direct.data)
    else:
        with pytest.raises(ValueError):
            model_saliency(out, "FUSION_GATE", 0, (64, 64))
