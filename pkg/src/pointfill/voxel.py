"""Binary occupancy volumes: I/O, voxelization, morphology and meshing."""

from __future__ import annotations

import gzip
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
from scipy import ndimage

if TYPE_CHECKING:
    from .cloud import PointCloud


class VolumeFormatError(ValueError):
    """Raised for malformed or inconsistent volume files."""


class UnsupportedFeatureError(VolumeFormatError):
    """Raised when a file uses a feature outside the supported NRRD subset."""


class GridMismatchError(ValueError):
    """Raised when two volumes are not defined on the same grid."""


def _as_triple(values, name: str, cast=float) -> tuple:
    values = tuple(cast(v) for v in values)
    if len(values) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(values)}")
    return values


@dataclass(eq=False)
class VoxelVolume:
    """A binary grid with physical spacing and origin (both in mm).

    ``data`` is indexed ``[i, j, k]`` along x, y, z. The array is copied on
    construction and made read-only. ``meta`` carries non-grid annotations
    (dropped point counts, empty flags) and is ignored by equality.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"volume shape must be positive, got {data.shape}")
        data = data != 0
        data.flags.writeable = False
        self.data = data
        self.spacing = _as_triple(self.spacing, "spacing")
        self.origin = _as_triple(self.origin, "origin")
        if not all(np.isfinite(self.spacing)) or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be strictly positive, got {self.spacing}")
        if not all(np.isfinite(self.origin)):
            raise ValueError(f"origin must be finite, got {self.origin}")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    def same_grid(self, other: VoxelVolume) -> bool:
        return (
            self.shape == other.shape
            and self.spacing == other.spacing
            and self.origin == other.origin
        )

    def like(self, data: np.ndarray, **meta) -> VoxelVolume:
        """New volume on this grid holding ``data``."""
        return VoxelVolume(data, self.spacing, self.origin, meta=dict(meta))

    def empty_like(self) -> VoxelVolume:
        return self.like(np.zeros(self.shape, dtype=bool))

    def __eq__(self, other):
        if not isinstance(other, VoxelVolume):
            return NotImplemented
        return self.same_grid(other) and np.array_equal(self.data, other.data)

    __hash__ = None


def check_same_grid(a: VoxelVolume, b: VoxelVolume) -> None:
    if not a.same_grid(b):
        raise GridMismatchError(
            f"grid mismatch: shape {a.shape} vs {b.shape}, spacing {a.spacing} vs "
            f"{b.spacing}, origin {a.origin} vs {b.origin}"
        )


# --------------------------------------------------------------------------
# file I/O


def _sidecar_paths(path: str | os.PathLike) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        path = path.with_suffix("")
    return path.with_name(path.name + ".json"), path.with_name(path.name + ".raw")


def _atomic_write(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_volume(v: VoxelVolume, path: str | os.PathLike) -> Path:
    """Write ``v`` as a ``<name>.json`` + ``<name>.raw`` sidecar pair.

    Returns the path of the JSON header.
    """
    header_path, raw_path = _sidecar_paths(path)
    header = {
        "shape": [int(s) for s in v.shape],
        "spacing_mm": [float(s) for s in v.spacing],
        "origin_mm": [float(o) for o in v.origin],
        "dtype": "u8",
        "order": "x-fastest",
    }
    raw = np.ravel(v.data, order="F").astype(np.uint8).tobytes()
    header_path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(raw_path, raw)
    _atomic_write(header_path, (json.dumps(header, indent=2) + "\n").encode())
    return header_path


def _load_sidecar(path: Path) -> VoxelVolume:
    header_path, raw_path = _sidecar_paths(path)
    if not header_path.exists():
        raise FileNotFoundError(header_path)
    if not raw_path.exists():
        raise FileNotFoundError(raw_path)
    try:
        header = json.loads(header_path.read_text())
        shape = _as_triple(header["shape"], "shape", int)
        spacing = _as_triple(header["spacing_mm"], "spacing_mm")
        origin = _as_triple(header.get("origin_mm", (0.0, 0.0, 0.0)), "origin_mm")
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"malformed header {header_path}: {exc}") from exc
    if header.get("dtype", "u8") != "u8" or header.get("order", "x-fastest") != "x-fastest":
        raise UnsupportedFeatureError(
            f"{header_path}: only dtype 'u8' with 'x-fastest' order is supported"
        )
    if min(shape) < 1:
        raise VolumeFormatError(f"{header_path}: non-positive shape {shape}")
    if min(spacing) <= 0:
        raise VolumeFormatError(f"{header_path}: non-positive spacing {spacing}")
    payload = np.frombuffer(raw_path.read_bytes(), dtype=np.uint8)
    expected = int(np.prod(shape))
    if payload.size != expected:
        raise VolumeFormatError(
            f"{raw_path}: shape {shape} needs {expected} bytes, payload has {payload.size}"
        )
    data = payload.reshape(shape, order="F") > 0
    return VoxelVolume(data, spacing, origin)


_NRRD_TYPES = {
    "uint8": np.uint8,
    "uchar": np.uint8,
    "unsigned char": np.uint8,
    "uint8_t": np.uint8,
    "short": np.int16,
    "short int": np.int16,
    "signed short": np.int16,
    "signed short int": np.int16,
    "int16": np.int16,
    "int16_t": np.int16,
}


def _parse_vector(text: str) -> list[float]:
    text = text.strip()
    if not (text.startswith("(") and text.endswith(")")):
        raise VolumeFormatError(f"malformed NRRD vector {text!r}")
    return [float(t) for t in text[1:-1].split(",")]


def _load_nrrd(path: Path) -> VoxelVolume:
    raw = path.read_bytes()
    # header ends at the first blank line
    for sep in (b"\n\n", b"\r\n\r\n"):
        cut = raw.find(sep)
        if cut >= 0:
            head, body = raw[:cut], raw[cut + len(sep):]
            break
    else:
        raise VolumeFormatError(f"{path}: no blank line terminating the NRRD header")
    lines = head.decode("ascii", errors="replace").splitlines()
    if not lines or not lines[0].startswith("NRRD"):
        raise VolumeFormatError(f"{path}: missing NRRD magic")
    fields: dict[str, str] = {}
    for line in lines[1:]:
        if not line or line.startswith("#") or ":=" in line:
            continue
        if ":" not in line:
            raise VolumeFormatError(f"{path}: malformed header line {line!r}")
        key, value = line.split(":", 1)
        fields[key.strip().lower()] = value.strip()

    if "data file" in fields or "datafile" in fields:
        raise UnsupportedFeatureError(f"{path}: detached data files are not supported")
    if fields.get("dimension") != "3":
        raise UnsupportedFeatureError(f"{path}: only dimension 3 is supported")
    kind = fields.get("type", "").lower()
    if kind not in _NRRD_TYPES:
        raise UnsupportedFeatureError(f"{path}: unsupported type {kind!r}")
    dtype = np.dtype(_NRRD_TYPES[kind])
    encoding = fields.get("encoding", "").lower()
    if encoding not in ("raw", "gzip", "gz"):
        raise UnsupportedFeatureError(f"{path}: unsupported encoding {encoding!r}")
    try:
        shape = tuple(int(s) for s in fields["sizes"].split())
    except (KeyError, ValueError) as exc:
        raise VolumeFormatError(f"{path}: bad or missing sizes field") from exc
    if len(shape) != 3 or min(shape) < 1:
        raise VolumeFormatError(f"{path}: bad sizes {shape}")

    spacing = [1.0, 1.0, 1.0]
    if "space directions" in fields:
        parts = fields["space directions"].replace(") (", ")|(").split("|")
        vectors = [_parse_vector(p) for p in parts]
        if len(vectors) != 3 or any(len(vec) != 3 for vec in vectors):
            raise VolumeFormatError(f"{path}: malformed space directions")
        for axis, vec in enumerate(vectors):
            off = [abs(c) for i, c in enumerate(vec) if i != axis]
            if max(off) != 0.0:
                raise UnsupportedFeatureError(f"{path}: non-diagonal space directions")
            spacing[axis] = abs(vec[axis])
    elif "spacings" in fields:
        spacing = [float(s) for s in fields["spacings"].split()]
    if min(spacing) <= 0:
        raise VolumeFormatError(f"{path}: non-positive spacing {spacing}")
    origin = [0.0, 0.0, 0.0]
    if "space origin" in fields:
        origin = _parse_vector(fields["space origin"])

    if encoding in ("gzip", "gz"):
        try:
            body = gzip.decompress(body)
        except OSError as exc:
            raise VolumeFormatError(f"{path}: corrupt gzip payload") from exc
    endian = fields.get("endian", "little").lower()
    dtype = dtype.newbyteorder("<" if endian == "little" else ">")
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(body) < expected:
        raise VolumeFormatError(
            f"{path}: shape {shape} needs {expected} bytes, payload has {len(body)}"
        )
    # raw payloads may carry trailing padding; the data is the final block
    body = body[len(body) - expected:] if encoding == "raw" else body[:expected]
    data = np.frombuffer(body, dtype=dtype).reshape(shape, order="F") > 0
    return VoxelVolume(data, spacing, origin)


def load_volume(path: str | os.PathLike) -> VoxelVolume:
    """Read a sidecar (``.json``/``.raw``) or NRRD volume, binarized at > 0."""
    path = Path(path)
    if path.suffix.lower() == ".nrrd":
        if not path.exists():
            raise FileNotFoundError(path)
        return _load_nrrd(path)
    return _load_sidecar(path)


# --------------------------------------------------------------------------
# voxelization


def world_to_index(points: np.ndarray, like: VoxelVolume) -> np.ndarray:
    """Voxel indices of world-space points.

    Voxel boxes are ``(center - s/2, center + s/2]`` so a point sitting on a
    shared face goes to the lower-index voxel.
    """
    u = (np.asarray(points, dtype=np.float64) - np.asarray(like.origin)) / np.asarray(like.spacing)
    return np.ceil(u - 0.5).astype(np.int64)


def voxelize(pc: PointCloud, like: VoxelVolume) -> VoxelVolume:
    """Mark every voxel of ``like``'s grid that contains at least one point.

    Normalized clouds are mapped back to mm through their stored transform.
    Points outside the grid are dropped; their number is stored in
    ``meta["dropped"]``.
    """
    if pc.frame == "normalized":
        if pc.transform is None:
            raise ValueError("normalized cloud carries no inverse transform")
        points = pc.transform.inverse(pc.points)
    else:
        points = pc.points
    idx = world_to_index(points, like)
    inside = np.all((idx >= 0) & (idx < np.asarray(like.shape)), axis=1)
    idx = idx[inside]
    data = np.zeros(like.shape, dtype=bool)
    data[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return like.like(data, dropped=int(len(inside) - np.count_nonzero(inside)))


# --------------------------------------------------------------------------
# morphology


@dataclass(frozen=True)
class StructuringElement:
    """``cross6`` is the L1 ball of ``radius``, ``cube26`` the Chebyshev ball."""

    kind: str = "cube26"
    radius: int = 1

    def __post_init__(self):
        if self.kind not in ("cross6", "cube26"):
            raise ValueError(f"unknown structuring element kind {self.kind!r}")
        if int(self.radius) != self.radius or self.radius < 1:
            raise ValueError(f"radius must be an integer >= 1, got {self.radius}")

    def footprint(self) -> np.ndarray:
        r = self.radius
        grid = np.indices((2 * r + 1,) * 3) - r
        if self.kind == "cube26":
            return np.ones((2 * r + 1,) * 3, dtype=bool)
        return np.abs(grid).sum(axis=0) <= r


def _data(v) -> np.ndarray:
    return v.data if isinstance(v, VoxelVolume) else np.asarray(v, dtype=bool)


def dilate(v: VoxelVolume, se: StructuringElement) -> VoxelVolume:
    return v.like(ndimage.binary_dilation(v.data, structure=se.footprint()))


def erode(v: VoxelVolume, se: StructuringElement) -> VoxelVolume:
    """Erosion treating everything outside the grid as background."""
    return v.like(ndimage.binary_erosion(v.data, structure=se.footprint(), border_value=0))


def binary_closing(v: VoxelVolume, se: StructuringElement | None = None) -> VoxelVolume:
    """Dilation followed by erosion.

    The grid is zero-padded by the element radius first so the result is a
    superset of the input even next to the grid border. Work is confined to
    the foreground bounding box: both elements contain the axis offsets, so
    nothing outside the box survives the erosion.
    """
    se = se or StructuringElement()
    r = se.radius
    nz = np.nonzero(v.data)
    if len(nz[0]) == 0:
        return v.empty_like()
    box = tuple(slice(int(a.min()), int(a.max()) + 1) for a in nz)
    padded = np.pad(v.data[box], r)
    fp = se.footprint()
    closed = ndimage.binary_erosion(
        ndimage.binary_dilation(padded, structure=fp), structure=fp, border_value=0
    )
    out = np.zeros_like(v.data)
    out[box] = closed[r:-r, r:-r, r:-r]
    return v.like(out)


def _connectivity_structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def largest_component(v: VoxelVolume, connectivity: int = 26) -> VoxelVolume:
    """Keep only the largest connected foreground component.

    Equal-size components are resolved in favour of the one holding the
    smallest x-fastest linear index.
    """
    labels, n = ndimage.label(v.data, structure=_connectivity_structure(connectivity))
    if n == 0:
        return v.like(v.data, empty=True)
    sizes = np.bincount(labels.ravel())[1:]
    candidates = np.flatnonzero(sizes == sizes.max()) + 1
    if len(candidates) > 1:
        linear = np.arange(labels.size).reshape(labels.shape, order="F")
        first = ndimage.minimum(linear, labels, candidates)
        keep = candidates[int(np.argmin(first))]
    else:
        keep = candidates[0]
    return v.like(labels == keep, empty=False)


def subtract_overlap(defect: VoxelVolume, defective_input: VoxelVolume) -> VoxelVolume:
    check_same_grid(defect, defective_input)
    return defect.like(defect.data & ~defective_input.data)


# --------------------------------------------------------------------------
# meshing


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) mm
    faces: np.ndarray  # (F, 3) vertex indices

    @property
    def area(self) -> float:
        tri = self.vertices[self.faces]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return float(0.5 * np.linalg.norm(cross, axis=1).sum())

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        return np.sort(e, axis=1)

    def is_watertight(self) -> bool:
        """Every undirected edge is shared by exactly two triangles."""
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        n_edges = len(np.unique(self.edges(), axis=0))
        used = len(np.unique(self.faces))
        return used - n_edges + len(self.faces)


def extract_surface_mesh(v: VoxelVolume) -> TriangleMesh:
    """Iso-surface at level 0.5 in world coordinates (mm)."""
    from skimage.measure import marching_cubes

    if v.count == 0:
        raise ValueError("cannot mesh an empty volume")
    padded = np.pad(v.data, 1).astype(np.float32)
    verts, faces, _, _ = marching_cubes(
        padded, level=0.5, spacing=v.spacing, allow_degenerate=False
    )
    verts = verts.astype(np.float64) + np.asarray(v.origin) - np.asarray(v.spacing)
    return TriangleMesh(verts, faces.astype(np.int64))


def write_stl(mesh: TriangleMesh, path: str | os.PathLike) -> None:
    """Binary little-endian STL, units mm."""
    tri = mesh.vertices[mesh.faces].astype(np.float32)
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.divide(normals, norms, out=np.zeros_like(normals), where=norms > 0)
    record = np.zeros(
        len(tri),
        dtype=[("normal", "<f4", 3), ("verts", "<f4", (3, 3)), ("attr", "<u2")],
    )
    record["normal"] = normals
    record["verts"] = tri
    header = b"pointfill binary STL (mm)".ljust(80, b" ")
    payload = header + struct.pack("<I", len(tri)) + record.tobytes()
    _atomic_write(Path(path), payload)


def read_stl(path: str | os.PathLike) -> np.ndarray:
    """Triangles of a binary STL as an (F, 3, 3) array."""
    raw = Path(path).read_bytes()
    (n,) = struct.unpack_from("<I", raw, 80)
    record = np.frombuffer(
        raw[84:84 + 50 * n],
        dtype=[("normal", "<f4", 3), ("verts", "<f4", (3, 3)), ("attr", "<u2")],
    )
    return record["verts"].astype(np.float64)


def write_mesh_ply(mesh: TriangleMesh, path: str | os.PathLike) -> None:
    lines = [
        "ply",
        "format ascii 1.0",
        "comment units mm",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    _atomic_write(Path(path), ("\n".join(lines) + "\n").encode())
