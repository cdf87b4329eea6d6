"""Write the sphere-scene prompt images referenced by sphere.json."""

from pathlib import Path

from distill3d.camera import CameraPolicy
from distill3d.images import save_png
from distill3d.scenes import AnalyticScene, SphereSpec

here = Path(__file__).parent
scene = AnalyticScene(sphere=SphereSpec(), supersample=4)
policy = CameraPolicy(width=64, height=64)
save_png(scene.render(policy.default_pose()), here / "sphere_rgb.png")
save_png(scene.render_normals(policy.default_pose()), here / "sphere_normal.png")
print(f"wrote {here / 'sphere_rgb.png'} and {here / 'sphere_normal.png'}")
