"""On-disk layout of a generated scene.

A scene directory holds::

    scene.json           generator spec and seed (enough to rebuild the scene)
    cameras.json         one camera dict per view
    mesh_gt.ply          ground-truth triangle mesh
    view_XXX.png         RGB
    depth_XXX.pfm        z-depth in metres (0 = no surface)
    normal_XXX.pfm       camera-frame unit normals
    normal_XXX.png       the same normals encoded as (n + 1) / 2 for viewing
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .io import (
    read_mesh_ply,
    read_pfm,
    read_png,
    write_json,
    write_mesh_ply,
    write_normal_png,
    write_pfm,
    write_png,
)
from .numerics import InvalidInputError
from .scene import Camera, SyntheticScene, View, ViewBundle, generate_scene


@dataclass
class SceneData:
    scene: SyntheticScene
    views: ViewBundle
    gt_mesh: tuple  # (vertices, faces)


def save_scene_dir(out, scene: SyntheticScene, views: ViewBundle) -> list:
    """Write a scene directory; returns the written file names."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    write_json(out / "scene.json", {"spec": scene.spec, "seed": scene.seed})
    write_json(out / "cameras.json", [v.camera.to_dict() for v in views])
    verts, faces = scene.mesh()
    write_mesh_ply(out / "mesh_gt.ply", verts, faces)
    written += ["scene.json", "cameras.json", "mesh_gt.ply"]
    for k, v in enumerate(views):
        write_png(out / f"view_{k:03d}.png", v.image)
        write_pfm(out / f"depth_{k:03d}.pfm", v.depth)
        write_pfm(out / f"normal_{k:03d}.pfm", v.normal)
        write_normal_png(out / f"normal_{k:03d}.png", v.normal)
        written += [f"view_{k:03d}.png", f"depth_{k:03d}.pfm", f"normal_{k:03d}.pfm", f"normal_{k:03d}.png"]
    return written


def load_scene_dir(path) -> SceneData:
    path = Path(path)
    if not path.is_dir():
        raise InvalidInputError(f"scene directory {path} does not exist")
    try:
        meta = json.loads((path / "scene.json").read_text())
        cams = [Camera.from_dict(d) for d in json.loads((path / "cameras.json").read_text())]
        views = []
        for k, cam in enumerate(cams):
            views.append(View(read_png(path / f"view_{k:03d}.png")[..., :3],
                              read_pfm(path / f"depth_{k:03d}.pfm"),
                              read_pfm(path / f"normal_{k:03d}.pfm"), cam))
        gt_mesh = read_mesh_ply(path / "mesh_gt.ply")
    except (OSError, KeyError, ValueError) as exc:
        raise InvalidInputError(f"incomplete scene directory {path}: {exc}") from exc
    scene = generate_scene(meta["spec"], int(meta["seed"]))
    return SceneData(scene, ViewBundle(views), gt_mesh)


def split_views(views: ViewBundle, holdout: int | None):
    """``(train, held_out_view)``; with ``holdout=None`` all views train."""
    if holdout is None:
        return views, None
    if not 0 <= holdout < len(views):
        raise InvalidInputError(f"holdout index {holdout} outside 0..{len(views) - 1}")
    train = [v for k, v in enumerate(views) if k != holdout]
    return ViewBundle(train), views[holdout]

