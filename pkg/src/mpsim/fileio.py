"""Readers and writers for the on-disk formats.

Images are PGM (8-bit binary, maxval 255, scaled to [0,1] floats); depth and
confidence maps are grayscale PFM (little-endian, scale -1.0, bottom-up rows
per the format); heatmaps are binary PPM; point clouds are ASCII PLY. Network
weights use the "MPSW" container and patch caches "MPSP", both little-endian.
"""

import struct

import numpy as np

from .nn import ConvLayer, NetworkWeights

WEIGHTS_MAGIC = b"MPSW"
WEIGHTS_VERSION = 1
PATCHES_MAGIC = b"MPSP"
_FUSION_CODES = {"mean": 0, "concat": 1}
_FUSION_NAMES = {v: k for k, v in _FUSION_CODES.items()}


# ---------------------------------------------------------------------------
# netpbm images


def write_pgm(path, img):
    """Float image in [0,1] -> 8-bit binary PGM."""
    img = np.asarray(img)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _read_pnm_header(f, magic):
    if f.read(2) != magic:
        raise ValueError(f"not a {magic.decode()} file")
    fields = []
    while len(fields) < 3:
        token = b""
        ch = f.read(1)
        while ch.isspace():
            ch = f.read(1)
        if ch == b"#":
            f.readline()
            continue
        while ch and not ch.isspace():
            token += ch
            ch = f.read(1)
        if not token.isdigit():
            raise ValueError(f"bad header token {token!r}")
        fields.append(int(token))
    return fields  # width, height, maxval


def read_pgm(path):
    """8-bit binary PGM -> float32 image in [0,1]."""
    with open(path, "rb") as f:
        w, h, maxval = _read_pnm_header(f, b"P5")
        if maxval != 255:
            raise ValueError(f"only maxval 255 supported, got {maxval}")
        data = np.frombuffer(f.read(w * h), dtype=np.uint8)
    if data.size != w * h:
        raise ValueError("truncated PGM payload")
    return (data.reshape(h, w).astype(np.float32)) / 255.0


def write_ppm(path, rgb):
    """uint8 (H,W,3) image -> binary PPM."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        w, h, maxval = _read_pnm_header(f, b"P6")
        if maxval != 255:
            raise ValueError(f"only maxval 255 supported, got {maxval}")
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# PFM float maps


def write_pfm(path, data):
    """float32 (H,W) map -> grayscale little-endian PFM (scale -1.0)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError("only grayscale PFM supported")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        # PFM stores rows bottom-up
        f.write(np.flipud(data).tobytes())


def read_pfm(path):
    """Grayscale PFM -> float32 (H,W) map (top-down rows)."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic == b"PF":
            raise ValueError("color PFM not supported")
        if magic != b"Pf":
            raise ValueError("not a PFM file")
        w, h = (int(x) for x in f.readline().split())
        scale = float(f.readline())
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * 4), dtype=dt)
    if data.size != w * h:
        raise ValueError("truncated PFM payload")
    return np.flipud(data.reshape(h, w)).astype(np.float32)


def write_depth_pfm(path, depth, mask=None):
    """Depth map with validity -> PFM; invalid pixels are stored as 0."""
    depth = np.asarray(depth, dtype=np.float32)
    if mask is not None:
        depth = np.where(mask, depth, 0.0).astype(np.float32)
    write_pfm(path, depth)


def read_depth_pfm(path):
    """PFM -> (depth, mask) where mask marks strictly positive finite pixels."""
    depth = read_pfm(path)
    mask = np.isfinite(depth) & (depth > 0)
    return depth, mask


# ---------------------------------------------------------------------------
# point clouds


def write_ply(path, points):
    """(N,3) float points -> ASCII PLY."""
    points = np.asarray(points, dtype=np.float64)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(points)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("end_header\n")
        for x, y, z in points:
            f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_ply(path):
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise ValueError("not a PLY file")
        count = None
        for line in f:
            line = line.strip()
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
            elif line == "end_header":
                break
        if count is None:
            raise ValueError("missing vertex element")
        pts = np.loadtxt(f, max_rows=count, ndmin=2) if count else np.zeros((0, 3))
    if pts.shape != (count, 3):
        raise ValueError("truncated PLY payload")
    return pts


# ---------------------------------------------------------------------------
# camera files


def write_cameras(path, cameras):
    """One camera per block: 4 intrinsics, 9 rotation entries (row-major),
    3 translation entries (world-to-camera)."""
    with open(path, "w") as f:
        f.write("# fx fy cx cy / R row-major (9) / t (3), world-to-camera\n")
        for cam in cameras:
            i = cam.intr
            f.write(f"{i.fx:.12g} {i.fy:.12g} {i.cx:.12g} {i.cy:.12g}\n")
            for row in cam.pose.r:
                f.write(" ".join(f"{v:.17g}" for v in row) + "\n")
            f.write(" ".join(f"{v:.17g}" for v in cam.pose.t) + "\n\n")


def read_cameras(path):
    from .geometry import Camera, Intrinsics, Pose

    tokens = []
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0]
            tokens.extend(float(tok) for tok in line.split())
    if len(tokens) % 16:
        raise ValueError(f"camera file holds {len(tokens)} numbers, not blocks of 16")
    cams = []
    for i in range(0, len(tokens), 16):
        fx, fy, cx, cy = tokens[i : i + 4]
        r = np.array(tokens[i + 4 : i + 13]).reshape(3, 3)
        t = np.array(tokens[i + 13 : i + 16])
        cams.append(Camera(Intrinsics(fx, fy, cx, cy), Pose(r, t)))
    return cams


# ---------------------------------------------------------------------------
# network weights ("MPSW")


def save_weights(path, weights):
    """Binary weights container; round-trips bit-exactly."""
    tensors = weights.tensors()
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<I", WEIGHTS_VERSION))
        f.write(struct.pack("<B", _FUSION_CODES[weights.fusion]))
        f.write(struct.pack("<I", len(tensors)))
        for _, t in tensors:
            arr = np.ascontiguousarray(t, dtype="<f4")
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_weights(path):
    with open(path, "rb") as f:
        if f.read(4) != WEIGHTS_MAGIC:
            raise ValueError("not a weights file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != WEIGHTS_VERSION:
            raise ValueError(f"unsupported weights version {version}")
        (fusion_code,) = struct.unpack("<B", f.read(1))
        if fusion_code not in _FUSION_NAMES:
            raise ValueError(f"unknown fusion code {fusion_code}")
        (count,) = struct.unpack("<I", f.read(4))
        tensors = []
        for _ in range(count):
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4")
            if data.size != n:
                raise ValueError("truncated weights payload")
            tensors.append(data.reshape(shape).copy())
    if count != 10:
        raise ValueError(f"expected 10 tensors (5 conv layers), found {count}")
    layers = []
    for i in range(0, 10, 2):
        w, b = tensors[i], tensors[i + 1]
        if w.ndim != 4 or b.ndim != 1:
            raise ValueError(f"tensor pair {i // 2} is not a conv layer")
        layers.append(ConvLayer(w, b))
    fusion = _FUSION_NAMES[fusion_code]
    feature_channels = layers[1].w.shape[0]
    head_in = layers[2].w.shape[1]
    if fusion == "concat":
        if head_in % feature_channels:
            raise ValueError("concat head width is not a multiple of branch output")
        n_at_training = head_in // feature_channels
    else:
        if head_in != feature_channels:
            raise ValueError("mean-fusion head must match branch output channels")
        n_at_training = 0  # informational only; not recorded by the format
    return NetworkWeights(layers[:2], layers[2:], fusion, n_at_training)


# ---------------------------------------------------------------------------
# patch sample caches ("MPSP")


def save_patches(path, samples):
    """Patch samples -> binary cache. samples: iterable of (patches, label)
    with patches (n, side, side) float32."""
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to save")
    n, side = samples[0][0].shape[0], samples[0][0].shape[1]
    with open(path, "wb") as f:
        f.write(PATCHES_MAGIC)
        f.write(struct.pack("<III", len(samples), n, side))
        for patches, label in samples:
            if patches.shape != (n, side, side):
                raise ValueError("inconsistent patch shapes in cache")
            f.write(struct.pack("<B", int(label)))
            f.write(np.ascontiguousarray(patches, dtype="<f4").tobytes())


def load_patches(path):
    """Binary cache -> (patches (N,n,side,side) float32, labels (N,) uint8)."""
    with open(path, "rb") as f:
        if f.read(4) != PATCHES_MAGIC:
            raise ValueError("not a patch cache file")
        count, n, side = struct.unpack("<III", f.read(12))
        patches = np.empty((count, n, side, side), dtype=np.float32)
        labels = np.empty(count, dtype=np.uint8)
        chunk = n * side * side
        for i in range(count):
            (labels[i],) = struct.unpack("<B", f.read(1))
            data = np.frombuffer(f.read(4 * chunk), dtype="<f4")
            if data.size != chunk:
                raise ValueError("truncated patch cache")
            patches[i] = data.reshape(n, side, side)
    return patches, labels
