"""Raster files.

Arrays handed in and out of this module use bottom-origin rows, files are
written top-origin. Frames are portable pixmaps/graymaps read through Pillow.
"""

import logging
from pathlib import Path

import numpy as np
import numpy.typing as npt
from PIL import Image

from .errors import DataError


logger = logging.getLogger("regioncounter.raster")


def read_image(path: Path) -> npt.NDArray[np.float64]:
    "RGB frame as a (3, H, W) float array of 0..255 values."
    try:
        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as e:
        raise DataError(f"Can't read frame image {path}: {e}") from e
    return np.ascontiguousarray(np.flipud(rgb).transpose(2, 0, 1))


def write_gray(path: Path, values: npt.ArrayLike):
    "8-bit graymap; the file type follows the suffix (.pgm for netpbm)."
    arr = np.clip(np.asarray(values), 0, 255).astype(np.uint8)
    Image.fromarray(np.ascontiguousarray(np.flipud(arr))).save(path)


def write_float_raster(path: Path, values: npt.ArrayLike, header: dict[str, object]):
    """`path` with suffix .raw: row-major little-endian float32, top-origin rows.
    A `.txt` header next to it holds one `key value` pair per line.
    """
    path = Path(path).with_suffix(".raw")
    arr = np.flipud(np.asarray(values, dtype=np.float64))
    arr.astype("<f4").tofile(path)
    lines = [f"{key} {value}" for key, value in header.items()]
    path.with_suffix(".txt").write_text("\n".join(lines) + "\n")


def read_float_raster(path: Path) -> tuple[npt.NDArray[np.float64], dict[str, str]]:
    path = Path(path).with_suffix(".raw")
    header = dict[str, str]()
    for line in path.with_suffix(".txt").read_text().splitlines():
        if line.strip():
            key, _, value = line.partition(" ")
            header[key] = value.strip()
    try:
        width, height = int(header["width"]), int(header["height"])
    except (KeyError, ValueError) as e:
        raise DataError(f"Bad raster header for {path}: {e}") from e
    data = np.fromfile(path, dtype="<f4")
    if data.size != width * height:
        raise DataError(f"{path}: {data.size} values, header says {width}x{height}")
    return np.flipud(data.reshape(height, width)).astype(np.float64), header


def write_false_color(path: Path, values: npt.ArrayLike, cmap: str = "jet"):
    "Colour-mapped PNG for eyeballing a density map. Needs matplotlib."
    from matplotlib import colormaps

    arr = np.asarray(values, dtype=np.float64)
    peak = arr.max()
    scaled = arr / peak if peak > 0 else arr
    rgba = colormaps[cmap](scaled, bytes=True)
    Image.fromarray(np.ascontiguousarray(np.flipud(rgba[..., :3]))).save(path)
