"""Dataset layout, image/JSON I/O and PLY/OBJ export.

A dataset directory looks like::

    intrinsics.json
    frames/0000.color.png   8-bit RGB
    frames/0000.depth.png   16-bit depth units, 0 = invalid
    frames/0000.mask.png    8-bit, nonzero = region of interest (optional)
    frames/0000.markers.json   [{"id": 0, "corners": [[x, y] x 4]}] (optional)

Synthetic datasets additionally carry ``poses.json`` (camera-to-world ground
truth), ``ground_truth.ply``, ``analytic_report.json`` and ``crop_box.json``.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DatasetLayoutError, InputError
from .labeling import BoundaryLoop
from .mesh import TriangleMesh
from .rgbd import CameraIntrinsics, MarkerCorners, PointCloud, RgbdFrame
from .transforms import RigidTransform

_FRAME_RE = re.compile(r"^(\d{4})\.(color|depth|mask)\.png$|^(\d{4})\.markers\.json$")


# ---------------------------------------------------------------------------
# JSON


def dump_json(payload, path: Path | str | None = None) -> str:
    """Serialise deterministically (sorted keys, fixed indentation, trailing newline)."""
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def load_json(path: Path | str):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetLayoutError(path, "file not found") from None
    except json.JSONDecodeError as exc:
        raise DatasetLayoutError(path, f"invalid JSON: {exc}") from None


def save_poses(path, poses: Sequence[RigidTransform]) -> None:
    dump_json([T.to_json(frame=i) for i, T in enumerate(poses)], path)


def load_poses(path) -> list:
    data = load_json(path)
    if isinstance(data, dict):
        data = [data]
    try:
        return [RigidTransform.from_json(d) for d in data]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetLayoutError(path, f"malformed pose: {exc}") from None


# ---------------------------------------------------------------------------
# images


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            return np.array(im)
    except FileNotFoundError:
        raise DatasetLayoutError(path, "file not found") from None
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DatasetLayoutError(path, f"unreadable image: {exc}") from None


def write_depth_png(path, depth: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(depth, dtype=np.uint16)).save(path)


def read_depth_png(path) -> np.ndarray:
    arr = _read_image(Path(path))
    if arr.ndim != 2 or arr.dtype not in (np.uint16, np.int32, np.uint8):
        raise DatasetLayoutError(path, "depth must be a single-channel 16-bit image")
    if arr.min() < 0 or arr.max() > 65535:
        raise DatasetLayoutError(path, "depth values outside 16-bit range")
    return arr.astype(np.uint16)


def write_color_png(path, color: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(color, dtype=np.uint8), mode="RGB").save(path)


def read_color_png(path) -> np.ndarray:
    arr = _read_image(Path(path))
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4):
        raise DatasetLayoutError(path, "color must be an RGB image")
    return arr[..., :3].astype(np.uint8)


def write_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def read_mask_png(path) -> np.ndarray:
    arr = _read_image(Path(path))
    if arr.ndim == 3:
        arr = arr[..., 0]
    return (arr > 127).astype(np.uint8)


def markers_to_json(markers: Sequence[MarkerCorners]) -> list:
    return [
        {"id": int(m.marker_id), "corners": [[float(x), float(y)] for x, y in m.corners]}
        for m in markers
    ]


def markers_from_json(data, path=None) -> tuple:
    try:
        return tuple(MarkerCorners(int(d["id"]), np.asarray(d["corners"], dtype=float)) for d in data)
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetLayoutError(path, f"malformed marker entry: {exc}") from None


# ---------------------------------------------------------------------------
# dataset directories


def frame_paths(root: Path, index: int) -> dict:
    stem = root / "frames" / f"{index:04d}"
    return {
        "color": stem.with_name(stem.name + ".color.png"),
        "depth": stem.with_name(stem.name + ".depth.png"),
        "mask": stem.with_name(stem.name + ".mask.png"),
        "markers": stem.with_name(stem.name + ".markers.json"),
    }


def save_frames(root, frames: Sequence[RgbdFrame]) -> None:
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    dump_json(frames[0].intrinsics.to_json(), root / "intrinsics.json")
    for i, f in enumerate(frames):
        p = frame_paths(root, i)
        write_color_png(p["color"], f.color)
        write_depth_png(p["depth"], f.depth)
        if f.mask is not None:
            write_mask_png(p["mask"], f.mask)
        dump_json(markers_to_json(f.marker_corners), p["markers"])


def frame_indices(root) -> list:
    """Frame numbers present under ``root/frames``, validated for completeness."""
    root = Path(root)
    frames_dir = root / "frames"
    if not frames_dir.is_dir():
        raise DatasetLayoutError(frames_dir, "missing frames directory")
    found: dict = {}
    for entry in sorted(frames_dir.iterdir()):
        m = _FRAME_RE.match(entry.name)
        if not m:
            continue
        idx = int(m.group(1) or m.group(3))
        found.setdefault(idx, set()).add(m.group(2) or "markers")
    if not found:
        raise DatasetLayoutError(frames_dir, "no frames found")
    for idx, kinds in sorted(found.items()):
        for required in ("color", "depth"):
            if required not in kinds:
                raise DatasetLayoutError(frame_paths(root, idx)[required], "missing file")
    return sorted(found)


def load_frames(root, indices: Sequence[int] | None = None) -> list:
    """Read frames (all, or the given frame numbers) from a dataset directory."""
    root = Path(root)
    intr_path = root / "intrinsics.json"
    try:
        intr = CameraIntrinsics.from_json(load_json(intr_path))
    except InputError as exc:
        raise DatasetLayoutError(intr_path, str(exc)) from None
    available = frame_indices(root)
    if indices is None:
        indices = available
    frames = []
    for idx in indices:
        if idx not in available:
            raise DatasetLayoutError(frame_paths(root, idx)["color"], "frame not present")
        p = frame_paths(root, idx)
        color = read_color_png(p["color"])
        depth = read_depth_png(p["depth"])
        mask = read_mask_png(p["mask"]) if p["mask"].exists() else None
        markers = markers_from_json(load_json(p["markers"]), p["markers"]) if p["markers"].exists() else ()
        try:
            frames.append(RgbdFrame(color, depth, intr, mask, markers, timestamp_index=idx))
        except InputError as exc:
            raise DatasetLayoutError(p["depth"], str(exc)) from None
    return frames


# ---------------------------------------------------------------------------
# PLY / OBJ


def _ply_header(fmt: str, n_vertex: int, props: list, n_face: int | None = None, n_edge: int | None = None) -> str:
    lines = ["ply", f"format {fmt} 1.0", f"element vertex {n_vertex}"]
    lines += [f"property {t} {name}" for name, t in props]
    if n_face is not None:
        lines += [f"element face {n_face}", "property list uchar int vertex_indices"]
    if n_edge is not None:
        lines += [f"element edge {n_edge}", "property int vertex1", "property int vertex2"]
    lines.append("end_header")
    return "\n".join(lines) + "\n"


def _vertex_table(points, normals=None, colors=None, labels=None):
    cols = [np.asarray(points, dtype=float)]
    props = [("x", "double"), ("y", "double"), ("z", "double")]
    if normals is not None:
        cols.append(np.asarray(normals, dtype=float))
        props += [("nx", "double"), ("ny", "double"), ("nz", "double")]
    if colors is not None:
        cols.append(np.asarray(colors, dtype=float))
        props += [("red", "uchar"), ("green", "uchar"), ("blue", "uchar")]
    if labels is not None:
        cols.append(np.asarray(labels, dtype=float)[:, None])
        props += [("label", "int")]
    return props, cols


_NP_TYPES = {"double": "<f8", "float": "<f4", "uchar": "u1", "int": "<i4", "uint": "<u4", "short": "<i2", "ushort": "<u2", "char": "i1"}


def _format_ascii(props, cols) -> list:
    table = np.hstack(cols) if cols else np.zeros((0, 0))
    fmts = ["%d" if t in ("uchar", "int") else "%.17g" for _, t in props]
    return [" ".join(f % v for f, v in zip(fmts, row)) for row in table]


def _write_ply(path, props, cols, faces=None, edges=None, binary=False) -> None:
    n = len(cols[0])
    fmt = "binary_little_endian" if binary else "ascii"
    header = _ply_header(fmt, n, props, None if faces is None else len(faces), None if edges is None else len(edges))
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            dtype = np.dtype([(name, _NP_TYPES[t]) for name, t in props])
            rec = np.empty(n, dtype=dtype)
            table = np.hstack(cols)
            for k, (name, _) in enumerate(props):
                rec[name] = table[:, k]
            fh.write(rec.tobytes())
            if faces is not None:
                frec = np.empty(len(faces), dtype=[("n", "u1"), ("v", "<i4", (3,))])
                frec["n"] = 3
                frec["v"] = faces
                fh.write(frec.tobytes())
            if edges is not None:
                fh.write(np.asarray(edges, dtype="<i4").tobytes())
        else:
            body = _format_ascii(props, cols)
            if faces is not None:
                body += [f"3 {a} {b} {c}" for a, b, c in np.asarray(faces)]
            if edges is not None:
                body += [f"{a} {b}" for a, b in np.asarray(edges)]
            fh.write(("\n".join(body) + ("\n" if body else "")).encode("ascii"))


def write_ply_cloud(path, cloud: PointCloud, binary: bool = False) -> None:
    props, cols = _vertex_table(cloud.points, cloud.normals, cloud.colors, cloud.labels)
    _write_ply(path, props, cols, binary=binary)


def write_ply_mesh(path, mesh: TriangleMesh, binary: bool = False) -> None:
    props, cols = _vertex_table(mesh.vertices, mesh.vertex_normals, None, mesh.vertex_labels)
    _write_ply(path, props, cols, faces=mesh.faces, binary=binary)


def write_ply_polyline(path, loop: BoundaryLoop) -> None:
    n = len(loop)
    edges = np.column_stack([np.arange(n), (np.arange(n) + 1) % n])
    props, cols = _vertex_table(loop.vertices)
    _write_ply(path, props, cols, edges=edges)


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    if mesh.vertex_normals is not None:
        lines += [f"vn {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertex_normals]
        lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in mesh.faces + 1]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in mesh.faces + 1]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path):
    """Read a PLY written by this module (ascii or binary little endian).

    Returns a :class:`TriangleMesh` when the file has faces, otherwise a
    :class:`PointCloud`.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DatasetLayoutError(path, "file not found") from None
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise DatasetLayoutError(path, "not a PLY file")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n") :]
    fmt = None
    elements = []
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property" and elements:
            if parts[1] == "list":
                elements[-1][2].append((parts[4], "list"))
            else:
                elements[-1][2].append((parts[2], parts[1]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise DatasetLayoutError(path, f"unsupported PLY format {fmt}")
    data = {}
    try:
        if fmt == "ascii":
            tokens = body.split()
            pos = 0
            for name, count, props in elements:
                if name == "face":
                    faces = np.empty((count, 3), dtype=np.int64)
                    for i in range(count):
                        if int(tokens[pos]) != 3:
                            raise DatasetLayoutError(path, "only triangle faces are supported")
                        faces[i] = [int(t) for t in tokens[pos + 1 : pos + 4]]
                        pos += 4
                    data[name] = faces
                else:
                    width = len(props)
                    vals = np.array(tokens[pos : pos + count * width], dtype=float).reshape(count, width)
                    pos += count * width
                    data[name] = {p: vals[:, k] for k, (p, _) in enumerate(props)}
        else:
            offset = 0
            for name, count, props in elements:
                if name == "face":
                    rec = np.frombuffer(body, dtype=[("n", "u1"), ("v", "<i4", (3,))], count=count, offset=offset)
                    if count and (rec["n"] != 3).any():
                        raise DatasetLayoutError(path, "only triangle faces are supported")
                    data[name] = rec["v"].astype(np.int64)
                    offset += rec.nbytes
                else:
                    dtype = np.dtype([(p, _NP_TYPES[t]) for p, t in props])
                    rec = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
                    data[name] = {p: rec[p].astype(float) for p, _ in props}
                    offset += rec.nbytes
    except (ValueError, IndexError) as exc:
        raise DatasetLayoutError(path, f"truncated or malformed PLY body: {exc}") from None

    v = data.get("vertex")
    if v is None:
        raise DatasetLayoutError(path, "no vertex element")
    points = np.column_stack([v["x"], v["y"], v["z"]])
    normals = np.column_stack([v["nx"], v["ny"], v["nz"]]) if "nx" in v else None
    labels = v["label"].astype(np.int64) if "label" in v else None
    if "face" in data:
        return TriangleMesh(points, data["face"], labels, normals)
    colors = np.column_stack([v["red"], v["green"], v["blue"]]) if "red" in v else None
    if normals is not None:
        # text round trips may leave normals a few ulps off unit length
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(points, colors, normals, labels)
