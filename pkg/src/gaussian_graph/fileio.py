"""Image and depth files: binary PPM (P6) and raw float32 depth with a JSON header."""

from __future__ import annotations

import json
import os

import numpy as np

from .geometry import load_camera, save_camera


def to_uint8(image) -> np.ndarray:
    """Clamp to [0, 1], scale to 255 and round half up."""
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def write_ppm(path, image, comment: str = "") -> None:
    img = to_uint8(image)
    h, w, _ = img.shape
    header = "P6\n"
    if comment:
        header += f"# {comment}\n"
    header += f"{w} {h}\n255\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    """8-bit P6 image as float in [0, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError("only 8-bit binary PPM (P6) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    img = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)
    return img.astype(np.float64) / 255.0


def write_depth(path, depth, hit=None) -> None:
    """Little-endian float32 raw file plus `<path>.json` header; 0 marks no hit."""
    depth = np.asarray(depth, dtype=np.float64)
    if hit is not None:
        depth = np.where(hit, depth, 0.0)
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(depth.astype("<f4").tobytes())
    with open(str(path) + ".json", "w") as f:
        json.dump({"width": w, "height": h, "dtype": "float32", "byte_order": "little",
                   "no_hit_value": 0.0}, f, indent=2)


def read_depth(path) -> np.ndarray:
    with open(str(path) + ".json") as f:
        hdr = json.load(f)
    raw = np.fromfile(path, dtype="<f4")
    return raw.reshape(hdr["height"], hdr["width"]).astype(np.float64)


def write_view_bundle(out_dir, index: int, view) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "image": os.path.join(out_dir, f"view{index:02d}.ppm"),
        "depth": os.path.join(out_dir, f"view{index:02d}.depth"),
        "camera": os.path.join(out_dir, f"view{index:02d}.camera.json"),
    }
    write_ppm(paths["image"], view.image)
    write_depth(paths["depth"], view.depth, view.hit)
    save_camera(view.camera, paths["camera"])
    return paths


def read_view_bundle(out_dir, index: int):
    from .synth import ViewBundle

    image = read_ppm(os.path.join(out_dir, f"view{index:02d}.ppm"))
    depth = read_depth(os.path.join(out_dir, f"view{index:02d}.depth"))
    cam = load_camera(os.path.join(out_dir, f"view{index:02d}.camera.json"))
    return ViewBundle(image, depth, depth > 0, cam)
