"""Versioned on-disk formats.

Every custom format starts with a 4-byte ASCII magic plus a version digit:

* ``.pdoc`` control points: header line ``PDOC1 <kind> <dims...>`` followed
  by a little-endian float64 payload. Kinds: ``grid4`` (origin + h*w*4
  channels), ``contour`` (origin + a*b radii), ``field3`` (h*w*3 values).
* ``.pmap`` dense maps: header line ``PMAP1 <H> <W>`` followed by an
  (H, W, 2) little-endian float32 raster; invalid pixels are stored as NaN.
* ``.pdw`` predictor weights: magic ``PDW1``, six little-endian uint32 shape
  fields (side, hidden, h, w, a, b), then the parameter blocks as
  little-endian float64 in a fixed order.
* ``meta`` / ``run.cfg`` text files: first line ``PMETA1`` / ``PCFG1``,
  then ``key=value`` lines.

Images are 8-bit PNG via Pillow, with a dependency-free binary PGM/PPM
fallback selected by file extension.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from PIL import Image

from .fit import DewarpPredictor
from .geometry import ContourSet, MappingGrid
from .synth import DeformationSpec, SynthSample
from .validation import check_image
from .warp import BackwardMap


class FormatError(ValueError):
    """Raised when a file's magic, version or structure is not as declared."""


# ---------------------------------------------------------------------------
# control points (.pdoc)


def _read_header_line(f) -> list[str]:
    line = bytearray()
    while True:
        ch = f.read(1)
        if not ch:
            raise FormatError("unexpected end of file in header")
        if ch == b"\n":
            break
        line += ch
        if len(line) > 256:
            raise FormatError("header line too long")
    return line.decode("ascii").split()


def save_grid(path: str | Path, grid: MappingGrid) -> None:
    with open(path, "wb") as f:
        f.write(f"PDOC1 grid4 {grid.h} {grid.w}\n".encode("ascii"))
        f.write(grid.origin.astype("<f8").tobytes())
        f.write(grid.points.astype("<f8").tobytes())


def load_grid(path: str | Path) -> MappingGrid:
    with open(path, "rb") as f:
        parts = _read_header_line(f)
        if len(parts) != 4 or parts[0] != "PDOC1" or parts[1] != "grid4":
            raise FormatError(f"not a PDOC1 grid4 file: {path}")
        h, w = int(parts[2]), int(parts[3])
        origin = np.frombuffer(f.read(16), dtype="<f8")
        payload = np.frombuffer(f.read(h * w * 4 * 8), dtype="<f8")
        if origin.size != 2 or payload.size != h * w * 4:
            raise FormatError(f"truncated grid payload: {path}")
    return MappingGrid(points=payload.reshape(h, w, 4).copy(), origin=origin.copy())


def save_contours(path: str | Path, contours: ContourSet) -> None:
    a, b = contours.radii.shape
    with open(path, "wb") as f:
        f.write(f"PDOC1 contour {a} {b}\n".encode("ascii"))
        f.write(contours.origin.astype("<f8").tobytes())
        f.write(contours.radii.astype("<f8").tobytes())


def load_contours(path: str | Path) -> ContourSet:
    with open(path, "rb") as f:
        parts = _read_header_line(f)
        if len(parts) != 4 or parts[0] != "PDOC1" or parts[1] != "contour":
            raise FormatError(f"not a PDOC1 contour file: {path}")
        a, b = int(parts[2]), int(parts[3])
        origin = np.frombuffer(f.read(16), dtype="<f8")
        payload = np.frombuffer(f.read(a * b * 8), dtype="<f8")
        if origin.size != 2 or payload.size != a * b:
            raise FormatError(f"truncated contour payload: {path}")
    return ContourSet(radii=payload.reshape(a, b).copy(), origin=origin.copy())


def save_field3(path: str | Path, field: NDArray) -> None:
    field = np.asarray(field, dtype=float)
    if field.ndim != 3 or field.shape[2] != 3:
        raise ValueError("field must have shape (h, w, 3)")
    with open(path, "wb") as f:
        f.write(f"PDOC1 field3 {field.shape[0]} {field.shape[1]}\n".encode("ascii"))
        f.write(field.astype("<f8").tobytes())


def load_field3(path: str | Path) -> NDArray:
    with open(path, "rb") as f:
        parts = _read_header_line(f)
        if len(parts) != 4 or parts[0] != "PDOC1" or parts[1] != "field3":
            raise FormatError(f"not a PDOC1 field3 file: {path}")
        h, w = int(parts[2]), int(parts[3])
        payload = np.frombuffer(f.read(h * w * 3 * 8), dtype="<f8")
        if payload.size != h * w * 3:
            raise FormatError(f"truncated field payload: {path}")
    return payload.reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# dense maps (.pmap)


def save_map(path: str | Path, bmap: BackwardMap) -> None:
    h, w = bmap.shape
    coords = bmap.coords.astype("<f4")
    coords = np.where(bmap.valid[..., None], coords, np.float32(np.nan))
    with open(path, "wb") as f:
        f.write(f"PMAP1 {h} {w}\n".encode("ascii"))
        f.write(coords.tobytes())


def load_map(path: str | Path) -> BackwardMap:
    with open(path, "rb") as f:
        parts = _read_header_line(f)
        if len(parts) != 3 or parts[0] != "PMAP1":
            raise FormatError(f"not a PMAP1 file: {path}")
        h, w = int(parts[1]), int(parts[2])
        payload = np.frombuffer(f.read(h * w * 2 * 4), dtype="<f4")
        if payload.size != h * w * 2:
            raise FormatError(f"truncated map payload: {path}")
    coords = payload.reshape(h, w, 2).astype(float)
    valid = np.all(np.isfinite(coords), axis=-1)
    coords = np.where(valid[..., None], coords, 0.0)
    return BackwardMap(coords=coords, valid=valid)


# ---------------------------------------------------------------------------
# predictor weights (.pdw)

_PDW_BLOCKS = ("w1", "b1", "wm", "bm", "wc", "bc")


def save_predictor(path: str | Path, predictor: DewarpPredictor) -> None:
    params = predictor._ensure_params()
    h, w = predictor.grid_shape
    a, b = predictor.contour_shape
    with open(path, "wb") as f:
        f.write(b"PDW1")
        f.write(struct.pack("<6I", predictor.input_side, predictor.hidden, h, w, a, b))
        for name in _PDW_BLOCKS:
            f.write(params[name].astype("<f8").tobytes())


def load_predictor(path: str | Path) -> DewarpPredictor:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != b"PDW1":
            raise FormatError(f"not a PDW1 file: {path}")
        side, hidden, h, w, a, b = struct.unpack("<6I", f.read(24))
        predictor = DewarpPredictor(
            grid_shape=(h, w), contour_shape=(a, b), input_side=side, hidden=hidden
        )
        shapes = {
            "w1": (hidden, side * side),
            "b1": (hidden,),
            "wm": (4 * h * w, hidden),
            "bm": (4 * h * w,),
            "wc": (a * b, hidden),
            "bc": (a * b,),
        }
        params = {}
        for name in _PDW_BLOCKS:
            n = int(np.prod(shapes[name]))
            block = np.frombuffer(f.read(n * 8), dtype="<f8")
            if block.size != n:
                raise FormatError(f"truncated parameter block {name!r}: {path}")
            params[name] = block.reshape(shapes[name]).copy()
    predictor.params_ = params
    return predictor


# ---------------------------------------------------------------------------
# images (PNG via Pillow, PGM/PPM fallback)


def write_image(path: str | Path, image: NDArray) -> None:
    img = check_image(image)
    data = np.round(img * 255.0).astype(np.uint8)
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        if data.ndim == 3 and data.shape[2] == 1:
            data = data[..., 0]
        Image.fromarray(data).save(path, format="PNG")
        return
    if suffix in (".pgm", ".ppm"):
        if data.ndim == 3 and data.shape[2] == 1:
            data = data[..., 0]
        if suffix == ".pgm" and data.ndim != 2:
            raise ValueError("PGM stores single-channel images")
        if suffix == ".ppm" and (data.ndim != 3 or data.shape[2] != 3):
            raise ValueError("PPM stores three-channel images")
        code = b"P5" if suffix == ".pgm" else b"P6"
        with open(path, "wb") as f:
            f.write(code + f" {data.shape[1]} {data.shape[0]} 255\n".encode("ascii"))
            f.write(data.tobytes())
        return
    raise ValueError(f"unsupported image extension: {path.suffix}")


def read_image(path: str | Path) -> NDArray:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".png":
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                img = img.convert("RGB" if "A" in img.mode or "P" in img.mode else "L")
            arr = np.asarray(img, dtype=float) / 255.0
        return arr
    if suffix in (".pgm", ".ppm"):
        with open(path, "rb") as f:
            header = f.read(2)
            if header not in (b"P5", b"P6"):
                raise FormatError(f"unsupported netpbm magic {header!r}: {path}")
            fields = []
            while len(fields) < 3:
                tok = b""
                ch = f.read(1)
                while ch.isspace():
                    ch = f.read(1)
                while ch and not ch.isspace():
                    tok += ch
                    ch = f.read(1)
                fields.append(int(tok))
            w, h, maxval = fields
            channels = 1 if header == b"P5" else 3
            data = np.frombuffer(f.read(w * h * channels), dtype=np.uint8)
        arr = data.reshape((h, w) if channels == 1 else (h, w, 3)).astype(float) / maxval
        return arr
    raise ValueError(f"unsupported image extension: {path.suffix}")


# ---------------------------------------------------------------------------
# key=value text files


def write_kv(path: str | Path, magic: str, values: dict) -> None:
    lines = [magic] + [f"{k}={v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_kv(path: str | Path, magic: str) -> dict[str, str]:
    lines = Path(path).read_text(encoding="ascii").splitlines()
    if not lines or lines[0] != magic:
        raise FormatError(f"expected {magic} header in {path}")
    out: dict[str, str] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        if "=" not in line:
            raise FormatError(f"malformed key=value line in {path}: {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# ---------------------------------------------------------------------------
# sample directories


def write_sample(directory: str | Path, sample: SynthSample) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_image(d / "flat.png", sample.flat)
    write_image(d / "warped.png", sample.warped)
    write_image(d / "mask.png", sample.mask.astype(float))
    save_grid(d / "grid.pdoc", sample.gt_grid)
    save_contours(d / "contour.pdoc", sample.gt_contours)
    save_field3(d / "shape3d.pdoc", sample.gt_shape3d)
    save_map(d / "map.pmap", sample.gt_map)
    write_kv(
        d / "meta",
        "PMETA1",
        {
            "family": sample.spec.family,
            "amplitude": repr(sample.spec.amplitude),
            "frequency": repr(sample.spec.frequency),
            "seed": sample.spec.seed,
            "doc_seed": sample.doc_seed,
            "background_seed": sample.background_seed,
            "height": sample.flat.shape[0],
            "width": sample.flat.shape[1],
        },
    )


def load_sample(directory: str | Path) -> SynthSample:
    d = Path(directory)
    meta = read_kv(d / "meta", "PMETA1")
    spec = DeformationSpec(
        family=meta["family"],
        amplitude=float(meta["amplitude"]),
        frequency=float(meta["frequency"]),
        seed=int(meta["seed"]),
    )
    return SynthSample(
        flat=read_image(d / "flat.png"),
        warped=read_image(d / "warped.png"),
        mask=read_image(d / "mask.png") > 0.5,
        gt_grid=load_grid(d / "grid.pdoc"),
        gt_contours=load_contours(d / "contour.pdoc"),
        gt_shape3d=load_field3(d / "shape3d.pdoc"),
        gt_map=load_map(d / "map.pmap"),
        spec=spec,
        doc_seed=int(meta["doc_seed"]),
        background_seed=int(meta["background_seed"]),
    )
