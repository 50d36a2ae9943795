"""Head-pose conditioning images from a software rasterizer.

A rotation+translation pose is drawn as a perspective-projected rectangle
with a fixed edge palette (top red, right green, bottom blue, left yellow),
so the downstream network can read orientation from color layout alone.
The renders here are written next to this script as PNG files.

Run:  python3 demos/pose_raster.py
"""

import math
from pathlib import Path

import numpy as np

from skattn import pngio
from skattn.pose import CameraIntrinsics, PoseRT, rasterize_box_edges, rotation_xyz

out_dir = Path(__file__).parent / "out"
out_dir.mkdir(exist_ok=True)

cam = CameraIntrinsics(fx=64.0, fy=64.0, cx=32.0, cy=32.0)
poses = {
    "identity": (0.0, 0.0, 0.0),
    "yaw30": (0.0, 30.0, 0.0),
    "pitch25": (25.0, 0.0, 0.0),
    "roll40": (0.0, 0.0, 40.0),
    "combined": (15.0, -25.0, 10.0),
}

for name, degs in poses.items():
    rot = rotation_xyz(*[math.radians(v) for v in degs])
    pose = PoseRT(rot, np.array([0.0, 0.0, 5.0]))
    img = rasterize_box_edges(pose, cam)
    path = out_dir / f"pose_{name}.png"
    pngio.write_png(path, img.pixels)
    ys, xs = np.nonzero(img.pixels.any(axis=2))
    print(f"{name:9s} rot(x,y,z)={degs}  drawn bbox x[{xs.min()},{xs.max()}] "
          f"y[{ys.min()},{ys.max()}]  -> {path.name}")

# the same projection by hand, for one corner of the identity pose:
# world (-1.0, -1.4, 0) translated to z=5 lands at
#   u = fx * x/z + cx = 64 * -1.0/5 + 32 = 19.2
#   v = fy * y/z + cy = 64 * -1.4/5 + 32 = 14.08
print("\nidentity top-left corner projects to (19.2, 14.08),"
      " drawn at pixel (19, 14)")
