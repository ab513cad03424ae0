import csv
import math

import numpy as np
import pytest

from akid.blocks import ConvolutionLayer
from akid.brain import Brain
from akid.models import LeNet, OneLayerBrain, residual_unit
from akid.observer import (
    DIST_COLUMNS,
    DIST_HEADER,
    PERCENTILES,
    SummarySink,
    export_dot,
    grid_shape,
    normalize_tile,
    percentiles,
    read_ppm,
    tile_images,
    visualize_activation,
    visualize_filters,
    write_ppm,
)
from akid.tensor import Tensor


def brute_percentile(values, p):
    """Closest-rank interpolation written out longhand."""
    s = sorted(float(v) for v in np.ravel(values))
    rank = p / 100 * (len(s) - 1)
    lo = int(math.floor(rank))
    if lo == len(s) - 1:
        return s[-1]
    return s[lo] + (s[lo + 1] - s[lo]) * (rank - lo)


def test_percentiles_examples():
    pct = percentiles(np.arange(101))
    assert pct[0] == 0 and pct[4] == 50 and pct[-1] == 100
    assert percentiles(np.full((3, 3), 2.5)).tolist() == [2.5] * 9
    sym = np.concatenate([np.linspace(-1, 1, 51), -np.linspace(-1, 1, 51)])
    pct = percentiles(sym)
    assert abs(pct[1] + pct[7]) <= 1e-9


def test_percentiles_match_oracles():
    r = np.random.default_rng(0)
    for _ in range(100):
        x = r.normal(size=tuple(r.integers(1, 6, size=r.integers(1, 4))))
        got = percentiles(x)
        assert np.all(np.diff(got) >= 0)
        for p, v in zip(PERCENTILES, got):
            assert abs(v - brute_percentile(x, p)) <= 1e-9
        np.testing.assert_allclose(got, np.percentile(x, PERCENTILES), rtol=0, atol=1e-9)


def test_percentiles_empty():
    with pytest.raises(ValueError):
        percentiles(np.zeros(0))


def test_column_order_reverses_figure_sequence():
    figure = ["maximum", "93%", "84%", "69%", "50%", "31%", "16%", "7%", "minimum"]
    as_columns = ["max" if f == "maximum" else "min" if f == "minimum" else "p" + f[:-1] for f in figure]
    assert list(DIST_COLUMNS) == as_columns[::-1]
    assert ",".join(DIST_HEADER) == "clock,tag,min,p7,p16,p31,p50,p69,p84,p93,max"


def test_sink_csv_and_clock_order(tmp_path):
    sink = SummarySink(tmp_path)
    sink.record_scalar(1, "train/loss", 2.0)
    sink.record_scalar(2, "train/loss", 1.5)
    sink.record_scalar(1, "val/loss", 1.0)
    with pytest.raises(ValueError, match="clock"):
        sink.record_scalar(2, "train/loss", 1.0)
    sink.record_distribution(1, "w", Tensor(np.arange(101.0)))
    sink.close()
    rows = list(csv.reader(open(tmp_path / "scalars.csv")))
    assert rows[0] == ["clock", "tag", "value"]
    assert rows[1:] == [["1", "train/loss", "2.0"], ["2", "train/loss", "1.5"], ["1", "val/loss", "1.0"]]
    drows = list(csv.reader(open(tmp_path / "distributions.csv")))
    assert drows[0] == list(DIST_HEADER)
    assert float(drows[1][6]) == 50.0


def test_memory_only_sink():
    sink = SummarySink(None)
    sink.record_scalar(3, "a", 1.0)
    assert sink.scalar_series("a") == [(3, 1.0)]


@pytest.mark.parametrize("n", range(1, 65))
def test_tile_layout_arithmetic(n):
    rows, cols = grid_shape(n)
    assert cols == math.ceil(math.sqrt(n)) and rows == math.ceil(n / cols)
    img = tile_images(np.random.default_rng(n).normal(size=(n, 3, 4)))
    assert img.shape == (rows * 3 + rows + 1, cols * 4 + cols + 1)


def test_normalization():
    assert normalize_tile(np.full((2, 2), 7.0)).tolist() == [[128, 128], [128, 128]]
    t = normalize_tile(np.array([[-1.0, 0.0], [1.0, 3.0]]))
    assert t.min() == 0 and t.max() == 255


def test_ppm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3)).astype(np.uint8)
    path = write_ppm(tmp_path / "x.ppm", img)
    assert path.read_bytes().startswith(b"P6\n7 5\n255\n")
    np.testing.assert_array_equal(read_ppm(path), img)
    gray = write_ppm(tmp_path / "g.ppm", img[:, :, 0])
    assert read_ppm(gray).shape == (5, 7, 3)


def digits(n=2):
    r = np.random.default_rng(0)
    return [Tensor(r.normal(size=(n, 28, 28, 1)).astype(np.float32)), Tensor(r.integers(0, 10, size=n))]


def test_visualize_filters_32_of_5x5(tmp_path):
    brain = OneLayerBrain(name="brain")
    brain.setup(digits())
    (path,) = visualize_filters(brain, tmp_path, clock=7)
    assert path.name == "brain_conv1_filters_7.ppm"
    assert read_ppm(path).shape == (37, 37, 3)


def test_visualize_filters_rgb():
    brain = Brain(name="b")
    brain.attach(ConvolutionLayer(ksize=[3, 3], out_channel_num=4, name="c"))
    brain.setup([Tensor(np.ones((1, 5, 5, 3)))])
    from akid.observer import filter_tiles

    assert filter_tiles(brain.get("c").variables["weights"].data).shape == (4, 3, 3, 3)


def test_visualize_activation_census_and_determinism(tmp_path):
    brain = LeNet(name="brain", channels=(4, 6), hidden=8)
    batch = digits()
    brain.setup(batch)
    paths = visualize_activation(brain, batch, tmp_path)
    names = [p.name for p in paths]
    assert "brain_relu1_activation_0.ppm" in names
    relu1 = read_ppm(tmp_path / "brain_relu1_activation_0.ppm")
    # 4 maps of 28x28 on a 2x2 grid
    assert relu1.shape == (2 * 28 + 3, 2 * 28 + 3, 3)
    first = [p.read_bytes() for p in paths]
    assert [p.read_bytes() for p in visualize_activation(brain, batch, tmp_path)] == first
    out = brain.get_val_copy()
    out.forward(batch)
    assert np.all(out.data("relu1").data >= 0)


def _nodes_and_edges(dot):
    nodes = [l for l in dot.splitlines() if "[" in l and "->" not in l]
    edges = [l for l in dot.splitlines() if "->" in l]
    return nodes, edges


def test_dot_one_layer_brain():
    dot = export_dot(OneLayerBrain(name="brain"))
    nodes, edges = _nodes_and_edges(dot)
    assert len(nodes) == 6
    assert sum(1 for e in edges if e.split("->")[1].strip().startswith('"loss"')) == 2


def test_dot_empty_and_residual():
    assert export_dot(Brain(name="e")) == 'digraph "e" {\n}\n'
    brain = Brain(name="r")
    brain.attach(ConvolutionLayer(ksize=[3, 3], out_channel_num=2, name="stem"))
    merge = residual_unit(brain, "u", 2)
    _, edges = _nodes_and_edges(export_dot(brain))
    assert sum(1 for e in edges if e.split("->")[1].strip().startswith(f'"{merge}"')) == 2


def test_dot_delayed_edge_is_dashed():
    from akid.blocks import MergeLayer

    brain = Brain(name="fb")
    brain.attach(ConvolutionLayer(ksize=[1, 1], out_channel_num=1, name="c"))
    brain.attach(MergeLayer(name="m", inputs=["c", {"name": "m", "delayed": True}]))
    assert '"m" -> "m" [style=dashed];' in export_dot(brain)
