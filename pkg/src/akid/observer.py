"""Training telemetry and visualization.

* scalar and 9-percentile distribution summaries appended to CSV files,
* filter and feature-map tilings written as binary PPM (P6) images,
* Graphviz DOT export of a brain's block graph.
"""
from __future__ import annotations

import csv
import math
import os
from pathlib import Path
from typing import Iterable

import numpy as np

from akid.blocks import INFERENCE, Block, ConvolutionLayer, SequentialBlock
from akid.brain import SYSTEM_IN, Brain
from akid.tensor import Tensor

# Percentile levels, ascending; read in reverse they are the figure's
# top-to-bottom lines [max, 93, 84, 69, 50, 31, 16, 7, min].
PERCENTILES = (0, 7, 16, 31, 50, 69, 84, 93, 100)
DIST_COLUMNS = ("min", "p7", "p16", "p31", "p50", "p69", "p84", "p93", "max")
SCALAR_HEADER = ("clock", "tag", "value")
DIST_HEADER = ("clock", "tag") + DIST_COLUMNS


def percentiles(values, levels: Iterable[float] = PERCENTILES) -> np.ndarray:
    """Percentiles of the flattened values by linear interpolation between closest ranks.

    Level ``p`` sits at fractional rank ``p / 100 * (n - 1)`` of the sorted data.
    """
    data = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if data.size == 0:
        raise ValueError("percentiles of an empty tensor")
    out = []
    for p in levels:
        rank = p / 100.0 * (data.size - 1)
        lo = int(math.floor(rank))
        hi = min(lo + 1, data.size - 1)
        frac = rank - lo
        out.append(data[lo] + (data[hi] - data[lo]) * frac if frac else data[lo])
    return np.array(out)


class SummarySink:
    """Appends scalar and distribution records to ``scalars.csv`` / ``distributions.csv``.

    Clocks must strictly increase per tag.  With ``log_dir=None`` records are
    only kept in memory.
    """

    def __init__(self, log_dir: str | os.PathLike | None = None):
        self.log_dir = Path(log_dir) if log_dir is not None else None
        self.scalars: list[tuple[int, str, float]] = []
        self.distributions: list[tuple] = []
        self._last: dict[tuple[str, str], int] = {}
        self._files = {}
        if self.log_dir is not None:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            self._files["scalar"] = self._open("scalars.csv", SCALAR_HEADER)
            self._files["dist"] = self._open("distributions.csv", DIST_HEADER)

    def _open(self, fname, header):
        path = self.log_dir / fname
        fresh = not path.exists() or path.stat().st_size == 0
        f = open(path, "a", newline="")
        if fresh:
            csv.writer(f).writerow(header)
            f.flush()
        return f

    @property
    def scalar_path(self) -> Path | None:
        return self.log_dir / "scalars.csv" if self.log_dir else None

    @property
    def distribution_path(self) -> Path | None:
        return self.log_dir / "distributions.csv" if self.log_dir else None

    def _check_clock(self, kind, tag, clock):
        last = self._last.get((kind, tag))
        if last is not None and clock <= last:
            raise ValueError(f"{kind} tag {tag!r}: clock {clock} does not follow {last}")
        self._last[(kind, tag)] = clock

    def record_scalar(self, clock: int, tag: str, value: float) -> None:
        self._check_clock("scalar", tag, clock)
        row = (int(clock), tag, float(value))
        self.scalars.append(row)
        if "scalar" in self._files:
            csv.writer(self._files["scalar"]).writerow([row[0], row[1], repr(row[2])])
            self._files["scalar"].flush()

    def record_distribution(self, clock: int, tag: str, tensor) -> np.ndarray:
        values = tensor.data if isinstance(tensor, Tensor) else tensor
        self._check_clock("dist", tag, clock)
        pct = percentiles(values)
        self.distributions.append((int(clock), tag, *pct.tolist()))
        if "dist" in self._files:
            csv.writer(self._files["dist"]).writerow([int(clock), tag, *[repr(float(v)) for v in pct]])
            self._files["dist"].flush()
        return pct

    def scalar_series(self, tag: str) -> list[tuple[int, float]]:
        return [(c, v) for c, t, v in self.scalars if t == tag]

    def close(self) -> None:
        for f in self._files.values():
            f.close()
        self._files = {}


def record_scalar(sink: SummarySink, clock, tag, value):
    sink.record_scalar(clock, tag, value)


def record_distribution(sink: SummarySink, clock, tag, tensor):
    return sink.record_distribution(clock, tag, tensor)


# tiling -----------------------------------------------------------------------


def grid_shape(n: int) -> tuple[int, int]:
    """``(rows, cols)`` with ``cols = ceil(sqrt(n))`` and ``rows = ceil(n / cols)``."""
    if n < 1:
        raise ValueError("need at least one tile")
    cols = math.ceil(math.sqrt(n))
    return -(-n // cols), cols


def normalize_tile(tile: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant tile becomes mid-gray 128."""
    tile = np.asarray(tile, dtype=np.float64)
    lo, hi = tile.min(), tile.max()
    if hi == lo:
        return np.full(tile.shape, 128, dtype=np.uint8)
    return np.rint((tile - lo) / (hi - lo) * 255.0).astype(np.uint8)


def tile_images(tiles: np.ndarray, pad: int = 1, pad_value: int = 0) -> np.ndarray:
    """Lay ``[n, h, w]`` or ``[n, h, w, 3]`` tiles on a near-square grid.

    Output size is ``rows * h + (rows + 1) * pad`` by ``cols * w + (cols + 1) * pad``.
    """
    tiles = np.asarray(tiles)
    n, h, w = tiles.shape[:3]
    rows, cols = grid_shape(n)
    extra = tiles.shape[3:]
    img = np.full((rows * h + (rows + 1) * pad, cols * w + (cols + 1) * pad) + extra, pad_value, dtype=np.uint8)
    for k in range(n):
        r, c = divmod(k, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        img[y:y + h, x:x + w] = normalize_tile(tiles[k])
    return img


def write_ppm(path, image: np.ndarray) -> Path:
    """Binary PPM (P6); grayscale images are written as equal RGB channels."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"cannot write image of shape {image.shape} as PPM")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image).tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path} is not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PPM is supported")
    pixels = raw[len(raw) - w * h * 3:]
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)


def _file_stem(scope: str) -> str:
    return scope.replace("/", "_")


def iter_blocks(block: Block):
    """Depth-first walk over a block and its sub-blocks."""
    yield block
    for child in getattr(block, "blocks", []):
        yield from iter_blocks(child)


def conv_layers(brain: Brain) -> list[ConvolutionLayer]:
    return [b for b in iter_blocks(brain) if isinstance(b, ConvolutionLayer)]


def filter_tiles(weights: np.ndarray) -> np.ndarray:
    """[kh, kw, cin, cout] -> tiles: RGB when cin == 3, else the first input channel."""
    if weights.shape[2] == 3:
        return weights.transpose(3, 0, 1, 2)
    return weights[:, :, 0, :].transpose(2, 0, 1)


def visualize_filters(brain: Brain, out_dir, clock: int = 0, pad: int = 1) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for layer in conv_layers(brain):
        img = tile_images(filter_tiles(layer.variables["weights"].data), pad=pad)
        paths.append(write_ppm(out_dir / f"{_file_stem(layer.scope)}_filters_{clock}.ppm", img))
    return paths


def visualize_activation(brain: Brain, batch, out_dir, clock: int = 0, pad: int = 1) -> list[Path]:
    """Tile every 4-D block output for example 0 of ``batch`` after an inference pass."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    val = brain.get_val_copy()
    val.forward(list(batch), INFERENCE)
    paths = []
    for block in iter_blocks(val):
        if block is val or isinstance(block, SequentialBlock) or not block.outputs:
            continue
        out = block.outputs[0].data
        if out.ndim != 4:
            continue
        tiles = out[0].transpose(2, 0, 1)
        paths.append(write_ppm(out_dir / f"{_file_stem(block.scope)}_activation_{clock}.ppm", tile_images(tiles, pad=pad)))
    return paths


def export_dot(brain: Brain) -> str:
    """Graphviz digraph: one node per block, one edge per input reference (delayed edges dashed)."""
    lines = [f'digraph "{brain.name}" {{']
    if brain.blocks:
        lines.append(f'  "{SYSTEM_IN}" [shape=box, label="{SYSTEM_IN}"];')
        for b in brain.blocks:
            lines.append(f'  "{b.name}" [label="{b.name}\\n{b.kind}"];')
        for i, b in enumerate(brain.blocks):
            refs = brain.refs[b.name]
            if refs is None:
                src = SYSTEM_IN if i == 0 else brain.blocks[i - 1].name
                lines.append(f'  "{src}" -> "{b.name}";')
                continue
            for r in refs:
                attrs = []
                if list(r.idxs) != [0]:
                    attrs.append(f'label="{",".join(map(str, r.idxs))}"')
                if r.delayed:
                    attrs.append("style=dashed")
                suffix = f" [{', '.join(attrs)}]" if attrs else ""
                lines.append(f'  "{r.name}" -> "{b.name}"{suffix};')
    lines.append("}")
    return "\n".join(lines) + "\n"


class Observer:
    """Visualization front end over a set-up :class:`akid.kid.Kid`."""

    def __init__(self, kid, out_dir=None):
        self.kid = kid
        self.out_dir = Path(out_dir) if out_dir is not None else Path(kid.log_dir or ".") / "visualizations"

    def visualize_filters(self, out_dir=None) -> list[Path]:
        return visualize_filters(self.kid.brain, out_dir or self.out_dir, clock=self.kid.clock)

    def visualize_activation(self, batch=None, out_dir=None) -> list[Path]:
        if batch is None:
            batch = next(self.kid.sensor.val_batches()) if self.kid.sensor.source.num_val else self.kid.sensor.sample_batch()
        return visualize_activation(self.kid.brain, batch, out_dir or self.out_dir, clock=self.kid.clock)

    def export_graph(self, out_dir=None) -> Path:
        path = Path(out_dir or self.out_dir)
        path.mkdir(parents=True, exist_ok=True)
        target = path / f"{self.kid.brain.name}.dot"
        target.write_text(export_dot(self.kid.brain))
        return target
