"""File formats: PPM/PGM images, 16-bit depth maps, calibration, datasets.

Depth files are binary PGM (P5) with maxval 65535, big-endian samples,
meters = value / 256, and 0 meaning invalid. RGB images are binary PPM
(P6, maxval 255); thermal images are binary PGM (P5, maxval 255).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import CameraRig, DepthMap, ExtrinsicsSE3, Intrinsics

DEPTH_SCALE = 256.0  # stored value per meter


class DataFormatError(ValueError):
    """A file failed to parse or violated its format contract."""


# -- netpbm codecs ------------------------------------------------------------


def _read_netpbm(path, expected_magic: bytes):
    blob = Path(path).read_bytes()
    if blob[:2] != expected_magic:
        raise DataFormatError(f"{path}: expected {expected_magic.decode()} file")
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        if pos >= len(blob):
            raise DataFormatError(f"{path}: truncated header")
        ch = blob[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            nl = blob.find(b"\n", pos)
            pos = len(blob) if nl < 0 else nl + 1
        elif ch.isdigit():
            end = pos
            while end < len(blob) and blob[end:end + 1].isdigit():
                end += 1
            fields.append(int(blob[pos:end]))
            pos = end
        else:
            raise DataFormatError(f"{path}: unexpected byte {ch!r} in header")
    pos += 1  # single whitespace byte separates header from raster
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise DataFormatError(f"{path}: bad image extents {width}x{height}")
    return blob, pos, width, height, maxval


def write_ppm(path, img: np.ndarray) -> None:
    """Write a [3,H,W] float image in [0,1] as binary PPM."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError("write_ppm expects a [3,H,W] array")
    _, h, w = img.shape
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(data.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    blob, pos, w, h, maxval = _read_netpbm(path, b"P6")
    if maxval != 255:
        raise DataFormatError(f"{path}: only maxval 255 PPM is supported")
    raster = np.frombuffer(blob, dtype=np.uint8, count=3 * w * h, offset=pos)
    if raster.size != 3 * w * h:
        raise DataFormatError(f"{path}: truncated raster")
    return raster.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def write_pgm8(path, img: np.ndarray) -> None:
    """Write a [1,H,W] or [H,W] float image in [0,1] as 8-bit binary PGM."""
    img = np.asarray(img)
    img = img.reshape(img.shape[-2:])
    h, w = img.shape
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm8(path) -> np.ndarray:
    blob, pos, w, h, maxval = _read_netpbm(path, b"P5")
    if maxval != 255:
        raise DataFormatError(f"{path}: expected an 8-bit PGM")
    raster = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    if raster.size != w * h:
        raise DataFormatError(f"{path}: truncated raster")
    return raster.reshape(1, h, w).astype(np.float64) / 255.0


def write_depth_pgm(path, depth: DepthMap) -> None:
    """Quantize a depth map to 16-bit big-endian PGM (1/256 m units)."""
    values = np.clip(np.rint(depth.values * DEPTH_SCALE), 0, 65535)
    values = np.where(depth.valid, np.maximum(values, 1), 0).astype(">u2")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(values.tobytes())


def read_depth_pgm(path) -> DepthMap:
    blob, pos, w, h, maxval = _read_netpbm(path, b"P5")
    if maxval != 65535:
        raise DataFormatError(f"{path}: expected a 16-bit depth PGM")
    raster = np.frombuffer(blob, dtype=">u2", count=w * h, offset=pos)
    if raster.size != w * h:
        raise DataFormatError(f"{path}: truncated raster")
    raster = raster.reshape(h, w)
    return DepthMap(raster.astype(np.float64) / DEPTH_SCALE, raster > 0)


# -- calibration --------------------------------------------------------------


def _parse_intrinsics(tokens: list[str], path) -> Intrinsics:
    if len(tokens) != 6:
        raise DataFormatError(f"{path}: intrinsics line needs 6 values")
    try:
        fx, fy, cx, cy = map(float, tokens[:4])
        w, h = int(tokens[4]), int(tokens[5])
        return Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h)
    except ValueError as exc:
        raise DataFormatError(f"{path}: bad intrinsics: {exc}") from exc


def parse_calibration(path) -> CameraRig:
    """Parse the line-oriented calibration text format.

    Lines: `rgb fx fy cx cy w h`, `thr fx fy cx cy w h`,
    `R r00 .. r22` (row-major, thermal to RGB), `t tx ty tz`.
    `#` starts a comment; blank lines and extra whitespace are fine.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataFormatError(f"cannot read calibration {path}: {exc}") from exc
    rows: list[list[str]] = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            rows.append(line.split())
    if len(rows) != 4 or [r[0] for r in rows] != ["rgb", "thr", "R", "t"]:
        raise DataFormatError(f"{path}: expected lines rgb/thr/R/t in order")
    k_rgb = _parse_intrinsics(rows[0][1:], path)
    k_thr = _parse_intrinsics(rows[1][1:], path)
    if len(rows[2]) != 10 or len(rows[3]) != 4:
        raise DataFormatError(f"{path}: malformed R or t line")
    try:
        r = np.array([float(v) for v in rows[2][1:]]).reshape(3, 3)
        t = np.array([float(v) for v in rows[3][1:]])
    except ValueError as exc:
        raise DataFormatError(f"{path}: bad number in R/t: {exc}") from exc
    try:
        extr = ExtrinsicsSE3(r, t)
    except ValueError as exc:
        raise DataFormatError(f"{path}: {exc}") from exc
    return CameraRig(k_rgb=k_rgb, k_thr=k_thr, e_thr_to_rgb=extr)


def write_calibration(path, rig: CameraRig) -> None:
    def intr(tag: str, k: Intrinsics) -> str:
        return (f"{tag} {float(k.fx)!r} {float(k.fy)!r} "
                f"{float(k.cx)!r} {float(k.cy)!r} {k.width} {k.height}")

    e = rig.e_thr_to_rgb
    lines = [
        intr("rgb", rig.k_rgb),
        intr("thr", rig.k_thr),
        "R " + " ".join(repr(float(v)) for v in e.rotation.ravel()),
        "t " + " ".join(repr(float(v)) for v in e.translation),
        "",
    ]
    Path(path).write_text("\n".join(lines), encoding="utf-8")


# -- dataset layout -----------------------------------------------------------

SPLITS = ("train", "val", "test")
SAMPLE_FILES = ("rgb.ppm", "thr.pgm", "depth_rgb.pgm", "depth_thr.pgm", "calib.txt")


@dataclass
class SampleRecord:
    """One decoded dataset sample."""

    sample_id: str
    i_rgb: np.ndarray
    i_thr: np.ndarray
    d_gt_rgb: DepthMap
    d_gt_thr: DepthMap
    rig: CameraRig
    scenario: str


@dataclass
class DatasetIndex:
    root: Path
    splits: dict[str, list[str]]

    def paths(self, split: str, sample_id: str) -> dict[str, Path]:
        base = self.root / split / sample_id
        return {name: base / name for name in SAMPLE_FILES}


def scenario_of(sample_id: str) -> str:
    tag = sample_id.rsplit("_", 1)[-1]
    if tag not in ("day", "night", "rain"):
        raise DataFormatError(f"sample id {sample_id!r} carries no scenario tag")
    return tag


def write_sample(directory, sample) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_ppm(directory / "rgb.ppm", sample.i_rgb)
    write_pgm8(directory / "thr.pgm", sample.i_thr)
    write_depth_pgm(directory / "depth_rgb.pgm", sample.d_gt_rgb)
    write_depth_pgm(directory / "depth_thr.pgm", sample.d_gt_thr)
    write_calibration(directory / "calib.txt", sample.rig)


def read_sample(directory, sample_id: str) -> SampleRecord:
    directory = Path(directory)
    for name in SAMPLE_FILES:
        if not (directory / name).exists():
            raise DataFormatError(f"{directory} is missing {name}")
    rig = parse_calibration(directory / "calib.txt")
    i_rgb = read_ppm(directory / "rgb.ppm")
    i_thr = read_pgm8(directory / "thr.pgm")
    if i_rgb.shape[1:] != (rig.k_rgb.height, rig.k_rgb.width):
        raise DataFormatError(f"{directory}: rgb extents do not match calibration")
    if i_thr.shape[1:] != (rig.k_thr.height, rig.k_thr.width):
        raise DataFormatError(f"{directory}: thermal extents do not match calibration")
    return SampleRecord(
        sample_id=sample_id,
        i_rgb=i_rgb,
        i_thr=i_thr,
        d_gt_rgb=read_depth_pgm(directory / "depth_rgb.pgm"),
        d_gt_thr=read_depth_pgm(directory / "depth_thr.pgm"),
        rig=rig,
        scenario=scenario_of(sample_id),
    )


def load_dataset_index(root) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise DataFormatError(f"dataset root {root} does not exist")
    splits: dict[str, list[str]] = {}
    for split in SPLITS:
        split_dir = root / split
        if split_dir.is_dir():
            splits[split] = sorted(p.name for p in split_dir.iterdir() if p.is_dir())
        else:
            splits[split] = []
    if not any(splits.values()):
        raise DataFormatError(f"dataset root {root} contains no samples")
    return DatasetIndex(root=root, splits=splits)


def load_split(index: DatasetIndex, split: str) -> list[SampleRecord]:
    if split not in index.splits:
        raise DataFormatError(f"unknown split {split!r}")
    return [read_sample(index.root / split / sid, sid) for sid in index.splits[split]]
