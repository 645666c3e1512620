"""Synthetic scene rendering with exact z-buffer ground truth.

Scenes are composed of analytic surfaces (fronto-parallel planes, slanted
planes, spheres) textured procedurally as a function of the 3D surface point,
so every view observes consistent intensities. Specular highlights use a
Phong lobe around point lights: their image position depends on the viewing
direction, which reproduces the photo-inconsistent corruption that breaks
pairwise matching. Per-view gain/bias and additive noise are optional.

The reference camera (view 0) sits at the world origin looking along +z;
partner cameras form a ring of the given baseline radius, converged on the
disparity midpoint of the depth range.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import Camera, GrayImage, Intrinsics, Pose, look_at_pose

SPEC_MASK_THRESHOLD = 0.05


@dataclass
class SceneSpec:
    surfaces: list  # dicts: plane/slanted/sphere, see _intersect
    texture: dict = field(default_factory=lambda: {"kind": "sinusoid", "waves": 10})
    lights: list = field(default_factory=list)  # Phong point lights
    view_count: int = 5
    baseline: float = 0.2
    image_size: int = 160
    focal: float = 220.0
    z_min: float = 0.45
    z_max: float = 1.0
    gain_jitter: float = 0.0
    bias_jitter: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


@dataclass
class Scene:
    spec: SceneSpec
    images: list  # GrayImage per view, view 0 = reference
    cameras: list
    gt_depth: np.ndarray  # (H,W) float32, reference view, 0 where no surface
    gt_valid: np.ndarray  # (H,W) bool
    highlight_mask: np.ndarray  # (H,W) bool, reference view specular region

    @property
    def reference(self):
        return self.images[0], self.cameras[0]


def ring_cameras(spec):
    """Reference camera plus a converged ring of partners."""
    s = spec.image_size
    intr = Intrinsics(spec.focal, spec.focal, (s - 1) / 2.0, (s - 1) / 2.0)
    ref = Camera(intr, Pose(np.eye(3), np.zeros(3)))
    cams = [ref]
    z_focus = 2.0 / (1.0 / spec.z_min + 1.0 / spec.z_max)
    count = spec.view_count - 1
    for i in range(count):
        ang = 2.0 * np.pi * i / count
        eye = np.array([spec.baseline * np.cos(ang), spec.baseline * np.sin(ang), 0.0])
        cams.append(Camera(intr, look_at_pose(eye, (0.0, 0.0, z_focus))))
    return cams


def _intersect(surface, origins, dirs):
    """Ray/surface hit: returns (t, normals) with t = +inf where missed."""
    kind = surface["kind"]
    if kind == "plane":
        d = surface["depth"]
        dz = dirs[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (d - origins[..., 2]) / dz
        t = np.where((np.abs(dz) > 1e-12) & (t > 1e-6), t, np.inf)
        n = np.broadcast_to(np.array([0.0, 0.0, -1.0]), dirs.shape)
        return t, n
    if kind == "slanted":
        d, sx, sy = surface["depth"], surface["sx"], surface["sy"]
        den = dirs[..., 2] - sx * dirs[..., 0] - sy * dirs[..., 1]
        num = d + sx * origins[..., 0] + sy * origins[..., 1] - origins[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / den
        t = np.where((np.abs(den) > 1e-12) & (t > 1e-6), t, np.inf)
        n = np.array([sx, sy, -1.0])
        n = np.broadcast_to(n / np.linalg.norm(n), dirs.shape)
        return t, n
    if kind == "sphere":
        c = np.asarray(surface["center"], dtype=np.float64)
        r = surface["radius"]
        oc = origins - c
        # rays are not unit length (pixel grid directions); keep the |d|^2 term
        a = (dirs * dirs).sum(-1)
        b = (oc * dirs).sum(-1)
        q = (oc * oc).sum(-1) - r * r
        disc = b * b - a * q
        with np.errstate(invalid="ignore"):
            root = np.sqrt(np.maximum(disc, 0.0))
        t = np.where(disc >= 0, (-b - root) / a, np.inf)
        t = np.where(t > 1e-6, t, np.inf)
        p = origins + t[..., None] * dirs
        n = np.where(np.isfinite(t)[..., None], (p - c) / r, 0.0)
        return t, n
    raise ValueError(f"unknown surface kind {kind!r}")


def _make_texture(spec, rng):
    kind = spec.texture.get("kind", "sinusoid")
    if kind == "sinusoid":
        waves = spec.texture.get("waves", 10)
        # wavelengths span roughly 8..45 px at the scene's working distance
        lam = rng.uniform(0.025, 0.13, waves)
        omega = 2.0 * np.pi / lam
        dirs = rng.standard_normal((waves, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        phases = rng.uniform(0, 2 * np.pi, waves)
        amps = rng.uniform(0.4, 1.0, waves)
        amps /= amps.sum()

        def tex(points):
            phase = points @ (dirs.T * omega) + phases
            v = (np.sin(phase) * amps).sum(-1)  # in [-1, 1]
            return 0.5 + 0.38 * v

        return tex
    if kind == "checker":
        cell = spec.texture.get("cell", 0.04)
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        v = np.cross(u, rng.standard_normal(3))
        v /= np.linalg.norm(v)

        def tex(points):
            a = np.floor(points @ u / cell) + np.floor(points @ v / cell)
            return np.where(a % 2 == 0, 0.25, 0.75)

        return tex
    if kind == "gradient":
        u = np.array([1.0, 0.5, 0.0])
        u /= np.linalg.norm(u)
        scale = spec.texture.get("scale", 0.5)

        def tex(points):
            return np.clip(0.5 + (points @ u) / scale * 0.4, 0.05, 0.95)

        return tex
    raise ValueError(f"unknown texture kind {kind!r}")


def _specular(points, normals, cam_center, lights):
    total = np.zeros(points.shape[:-1])
    for light in lights:
        lp = np.asarray(light["position"], dtype=np.float64)
        strength = light["strength"]
        shininess = light.get("shininess", 400.0)
        l = lp - points
        l /= np.maximum(np.linalg.norm(l, axis=-1, keepdims=True), 1e-12)
        v = cam_center - points
        v /= np.maximum(np.linalg.norm(v, axis=-1, keepdims=True), 1e-12)
        ndl = (normals * l).sum(-1, keepdims=True)
        r = 2.0 * ndl * normals - l
        total += strength * np.maximum((r * v).sum(-1), 0.0) ** shininess
    return total


def render_scene(spec):
    """Deterministic render of all views plus reference ground truth."""
    if spec.view_count < 2:
        raise ValueError("need at least 2 views")
    rng = np.random.default_rng(spec.seed)
    tex = _make_texture(spec, rng)
    cams = ring_cameras(spec)
    s = spec.image_size
    gains = 1.0 + rng.uniform(-spec.gain_jitter, spec.gain_jitter, spec.view_count)
    biases = rng.uniform(-spec.bias_jitter, spec.bias_jitter, spec.view_count)
    noise_rngs = [np.random.default_rng(seq) for seq in np.random.SeedSequence(
        (spec.seed, 0xB0B)).spawn(spec.view_count)]

    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    images = []
    gt_depth = None
    gt_valid = None
    highlight_mask = np.zeros((s, s), dtype=bool)
    for v, cam in enumerate(cams):
        pix = np.stack([xs, ys, np.ones_like(xs)], axis=-1)
        rays = pix @ cam.intr.inverse().T @ cam.pose.r  # world ray directions
        origin = np.broadcast_to(cam.center(), rays.shape)
        best_t = np.full((s, s), np.inf)
        normals = np.zeros((s, s, 3))
        for surf in spec.surfaces:
            t, n = _intersect(surf, origin, rays)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            normals = np.where(closer[..., None], n, normals)
        hit = np.isfinite(best_t)
        points = origin + np.where(hit, best_t, 0.0)[..., None] * rays
        shade = np.where(hit, tex(points), 0.0)
        spec_term = np.where(hit, _specular(points, normals, cam.center(), spec.lights), 0.0)
        img = gains[v] * shade + biases[v] + spec_term
        if spec.noise_sigma > 0:
            img = img + noise_rngs[v].normal(0.0, spec.noise_sigma, img.shape)
        img = np.clip(np.where(hit, img, 0.0), 0.0, 1.0)
        images.append(GrayImage.full(img.astype(np.float32)))
        if v == 0:
            depth = (points @ cam.pose.r[2] + cam.pose.t[2]).astype(np.float32)
            gt_depth = np.where(hit, depth, 0.0).astype(np.float32)
            gt_valid = hit
            highlight_mask = hit & (spec_term > SPEC_MASK_THRESHOLD)
            inside = gt_depth[gt_valid]
            if inside.size and (inside.min() < spec.z_min - 1e-9 or inside.max() > spec.z_max + 1e-9):
                raise ValueError(
                    f"surfaces outside depth range: gt in [{inside.min():.4f}, "
                    f"{inside.max():.4f}] vs [{spec.z_min}, {spec.z_max}]"
                )
    return Scene(spec, images, cams, gt_depth, gt_valid, highlight_mask)


# ---------------------------------------------------------------------------
# scene presets


def plain_scene_spec(seed=0, **kw):
    """Single textured fronto-parallel plane."""
    kw.setdefault("z_min", 0.55)
    kw.setdefault("z_max", 0.95)
    return SceneSpec(surfaces=[{"kind": "plane", "depth": 0.75}], seed=seed, **kw)


def slanted_scene_spec(seed=0, **kw):
    kw.setdefault("z_min", 0.55)
    kw.setdefault("z_max", 0.95)
    return SceneSpec(
        surfaces=[{"kind": "slanted", "depth": 0.78, "sx": 0.18, "sy": -0.12}],
        seed=seed,
        **kw,
    )


def sphere_scene_spec(seed=0, **kw):
    kw.setdefault("z_min", 0.55)
    kw.setdefault("z_max", 0.95)
    return SceneSpec(
        surfaces=[
            {"kind": "plane", "depth": 0.9},
            {"kind": "sphere", "center": [0.0, 0.0, 0.78], "radius": 0.12},
        ],
        seed=seed,
        **kw,
    )


def specular_scene_spec(seed=0, strength=0.9, **kw):
    """Plane with a strong view-dependent highlight: the pairwise failure case."""
    kw.setdefault("z_min", 0.55)
    kw.setdefault("z_max", 0.95)
    return SceneSpec(
        surfaces=[{"kind": "plane", "depth": 0.72}],
        lights=[
            {"position": [0.02, -0.03, 0.1], "strength": strength, "shininess": 250.0}
        ],
        seed=seed,
        **kw,
    )


def benchmark_scene_spec(seed=7):
    """The standard 9-view evaluation scene: sphere over a slanted backdrop,
    mild per-view gain differences and a faint highlight."""
    return SceneSpec(
        surfaces=[
            {"kind": "slanted", "depth": 0.86, "sx": 0.1, "sy": 0.08},
            {"kind": "sphere", "center": [0.01, -0.01, 0.74], "radius": 0.1},
        ],
        lights=[
            {"position": [0.03, 0.02, 0.12], "strength": 0.35, "shininess": 200.0}
        ],
        view_count=9,
        gain_jitter=0.06,
        bias_jitter=0.02,
        noise_sigma=0.01,
        z_min=0.55,
        z_max=0.95,
        seed=seed,
    )


def save_scene(directory, scene):
    """Write the on-disk layout: images/NN.pgm, cams.txt, gt_depth.pfm,
    spec.json, plus highlight_mask.pgm when the scene has a specular region."""
    import os

    from . import fileio

    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    for i, img in enumerate(scene.images):
        fileio.write_pgm(os.path.join(directory, "images", f"{i:02d}.pgm"), img.data)
    fileio.write_cameras(os.path.join(directory, "cams.txt"), scene.cameras)
    fileio.write_depth_pfm(
        os.path.join(directory, "gt_depth.pfm"), scene.gt_depth, scene.gt_valid
    )
    with open(os.path.join(directory, "spec.json"), "w") as f:
        f.write(scene.spec.to_json())
    if scene.highlight_mask.any():
        fileio.write_pgm(
            os.path.join(directory, "highlight_mask.pgm"),
            scene.highlight_mask.astype(np.float32),
        )


def load_scene(directory):
    """Read a scene directory written by save_scene."""
    import os

    from . import fileio

    with open(os.path.join(directory, "spec.json")) as f:
        spec = SceneSpec.from_json(f.read())
    cams = fileio.read_cameras(os.path.join(directory, "cams.txt"))
    images = []
    for i in range(len(cams)):
        data = fileio.read_pgm(os.path.join(directory, "images", f"{i:02d}.pgm"))
        images.append(GrayImage.full(data))
    gt_depth, gt_valid = fileio.read_depth_pfm(os.path.join(directory, "gt_depth.pfm"))
    mask_path = os.path.join(directory, "highlight_mask.pgm")
    if os.path.exists(mask_path):
        highlight = fileio.read_pgm(mask_path) > 0.5
    else:
        highlight = np.zeros(gt_depth.shape, dtype=bool)
    return Scene(spec, images, cams, gt_depth, gt_valid, highlight)


def training_scene_specs(count=6, seed=100, **kw):
    """Mixed training set: plain/slanted/sphere surfaces, roughly a third with
    specular corruption, varying gain/bias, noise-free by default."""
    specs = []
    makers = [plain_scene_spec, slanted_scene_spec, sphere_scene_spec, specular_scene_spec]
    for i in range(count):
        maker = makers[i % len(makers)]
        specs.append(maker(seed=seed + 31 * i, gain_jitter=0.08, bias_jitter=0.03, **kw))
    return specs
