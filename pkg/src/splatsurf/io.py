"""Binary PLY, PFM and PNG readers/writers."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
from PIL import Image

GAUSSIAN_PROPS = ("x", "y", "z", "s0", "s1", "s2", "qw", "qx", "qy", "qz", "opacity", "r", "g", "b")


# PLY -------------------------------------------------------------------------


def write_ply(path, vertex: dict[str, np.ndarray], faces: np.ndarray | None = None) -> None:
    """Binary little-endian PLY with float32 vertex properties.

    Faces, if given, are written as ``uchar`` counts followed by ``int32``
    indices.
    """
    names = list(vertex)
    n = len(vertex[names[0]]) if names else 0
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {k}" for k in names]
    if faces is not None:
        header += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    header.append("end_header")
    vdt = np.dtype([(k, "<f4") for k in names])
    varr = np.empty(n, dtype=vdt)
    for k in names:
        varr[k] = vertex[k]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(varr.tobytes())
        if faces is not None:
            fdt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
            farr = np.empty(len(faces), dtype=fdt)
            farr["n"] = 3
            farr["idx"] = faces
            fh.write(farr.tobytes())


def read_ply(path) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    """Read files produced by :func:`write_ply` (float vertex props, triangle faces)."""
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    lines = data[:end].decode("ascii").splitlines()
    if lines[1] != "format binary_little_endian 1.0":
        raise ValueError("only binary little-endian PLY is supported")
    n_vert = n_face = 0
    props, element = [], None
    for line in lines:
        parts = line.split()
        if parts[:1] == ["element"]:
            element = parts[1]
            if element == "vertex":
                n_vert = int(parts[2])
            elif element == "face":
                n_face = int(parts[2])
        elif parts[:1] == ["property"] and element == "vertex":
            props.append(parts[-1])
    vdt = np.dtype([(k, "<f4") for k in props])
    varr = np.frombuffer(data, dtype=vdt, count=n_vert, offset=end)
    vertex = {k: varr[k].astype(np.float64) for k in props}
    faces = None
    if n_face:
        fdt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
        farr = np.frombuffer(data, dtype=fdt, count=n_face, offset=end + vdt.itemsize * n_vert)
        faces = farr["idx"].astype(np.int64)
    return vertex, faces


def write_mesh_ply(path, vertices, faces) -> None:
    v = np.asarray(vertices)
    write_ply(path, {"x": v[:, 0], "y": v[:, 1], "z": v[:, 2]}, np.asarray(faces))


def read_mesh_ply(path):
    vertex, faces = read_ply(path)
    v = np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=-1)
    return v, (faces if faces is not None else np.zeros((0, 3), dtype=np.int64))


# PFM / PNG -------------------------------------------------------------------


def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian PFM (scale -1.0); rows stored bottom-to-top per format."""
    img = np.asarray(image, dtype="<f4")
    color = img.ndim == 3
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"PF\n" if color else b"Pf\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(img).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        w, h = map(int, fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype)
    shape = (h, w, 3) if kind == b"PF" else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float64)


def write_png(path, rgb: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def encode_normals(n: np.ndarray) -> np.ndarray:
    return np.round(255.0 * (np.asarray(n) + 1.0) / 2.0).astype(np.uint8)


def write_normal_png(path, n: np.ndarray) -> None:
    Image.fromarray(encode_normals(n)).save(path)


def read_normal_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0 * 2.0 - 1.0


# JSON ------------------------------------------------------------------------


def _round_floats(obj):
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return obj
        return float(f"{obj:.9g}")
    if isinstance(obj, (np.floating,)):
        return _round_floats(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _round_floats(obj.tolist())
    if isinstance(obj, dict):
        return {str(k): _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def dumps(obj, **kw) -> str:
    """JSON with floats rounded to 9 significant digits and sorted keys."""
    return json.dumps(_round_floats(obj), sort_keys=True, **kw)


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj, indent=2) + "\n")
