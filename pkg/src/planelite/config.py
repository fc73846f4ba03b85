"""Pipeline configuration: every threshold and weight in one place."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path


@dataclass
class PipelineConfig:
    """Knobs for every stage. Defaults are the production values.

    Angles are degrees, lengths are meters.
    """

    # plane partition + merging
    merge_angle_deg: float = 8.0          # max normal angle between mergeable planes
    merge_dist: float = 0.05              # max mean vertex-to-plane distance
    merge_center_cos: float = math.cos(math.radians(80.0))  # centroid-ray alignment cap
    alpha: float = 1e-20                  # compactness weight in partition energy
    split_eigenvalue: float = 1e-5        # m^2; split clusters flatter than this survive
    max_clusters: int = 4096
    lloyd_iters: int = 3

    # simplification
    simplify_ratio: float = 0.02          # output/input face budget
    min_cluster_faces: int = 2

    # texture atlas
    texel_density: float = 0.0025         # meters per texel
    atlas_gutter: int = 2                 # texels between packed patches
    atlas_max_dim: int = 16384

    # keyframes + visibility
    keyframe_interval: int = 10
    vis_depth_tol: float = 0.02
    vis_max_angle_deg: float = 75.0
    depth_scale: float | None = None      # None = per-format default

    # joint texture optimization
    lambda2: float = 0.1                  # correction-grid magnitude weight
    grid_width: int = 20                  # control vertices across image width
    grid_height: int = 16                 # control vertices down image height
    max_outer: int = 30
    tol: float = 1e-5                     # relative energy-decrease stop
    inner_gn_steps: int = 1               # Gauss-Newton steps per block per outer iter
    vis_refresh: int = 0                  # outer iters between visibility refreshes; 0 = frozen
    grayscale: bool = False

    # geometry optimization
    lambda3: float = 1.0                  # Laplacian regularizer weight

    # misc
    seed: int = 0
    threads: int = 1

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        positive = {
            "merge_angle_deg": self.merge_angle_deg,
            "merge_dist": self.merge_dist,
            "merge_center_cos": self.merge_center_cos,
            "alpha": self.alpha,
            "split_eigenvalue": self.split_eigenvalue,
            "texel_density": self.texel_density,
            "vis_depth_tol": self.vis_depth_tol,
            "lambda2": self.lambda2,
            "lambda3": self.lambda3,
            "tol": self.tol,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if not 0.0 < self.simplify_ratio < 1.0:
            raise ValueError(f"simplify_ratio must lie in (0, 1), got {self.simplify_ratio}")
        if self.keyframe_interval < 1:
            raise ValueError("keyframe_interval must be >= 1")
        if self.grid_width < 2 or self.grid_height < 2:
            raise ValueError("correction grid needs at least 2x2 control vertices")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.depth_scale is not None and self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, path: str | Path) -> "PipelineConfig":
        data = json.loads(Path(path).read_text())
        return cls(**data)

    def replace(self, **kwargs) -> "PipelineConfig":
        data = asdict(self)
        data.update(kwargs)
        return PipelineConfig(**data)


# deterministic pseudo-color palette for cluster debug dumps
def cluster_color(cluster_id: int) -> tuple[int, int, int]:
    """Deterministic bright RGB color for a cluster id (golden-ratio hue walk)."""
    hue = (cluster_id * 0.618033988749895) % 1.0
    i = int(hue * 6.0)
    f = hue * 6.0 - i
    p, q, t = 0.25, 1.0 - 0.75 * f, 0.25 + 0.75 * f
    rgb = [(1, t, p), (q, 1, p), (p, 1, t), (p, q, 1), (t, p, 1), (1, p, q)][i % 6]
    return tuple(int(round(255 * c)) for c in rgb)
