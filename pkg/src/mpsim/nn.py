"""Minimal CNN engine for the n-way patch similarity network.

Architecture: n Siamese branches with tied weights, each
conv5-tanh-pool2-conv5-tanh-pool2 (32x32 patch -> 64x5x5 features), fused by
channel mean (or concatenation), then a head of conv5-relu-conv1-relu-conv1
ending in 2 class logits per output position. Being fully convolutional, a
128x128 tile yields a 25x25 score grid (one score per 4x4 input region).

Arrays are numpy, channels-first. float32 is the working precision; build the
network with dtype=np.float64 for gradient checking.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import backend as B

BRANCH_CHANNELS = (32, 64)
HEAD_WIDTH = 2048
HEAD_WIDTH_DESK = 256
# intensities arrive in [0,1]; centering them conditions the first tanh layer
INPUT_MEAN = 0.5


class ShapeError(ValueError):
    """Input dimensions violate an operation's contract."""


@dataclass
class ConvLayer:
    w: np.ndarray  # (out, in, k, k)
    b: np.ndarray  # (out,)

    @property
    def kernel_size(self):
        return self.w.shape[2]

    def __post_init__(self):
        if self.w.ndim != 4 or self.w.shape[2] != self.w.shape[3]:
            raise ShapeError(f"conv kernels must be (out,in,k,k), got {self.w.shape}")
        if self.w.shape[2] % 2 != 1:
            raise ShapeError(f"kernel spatial size must be odd, got {self.w.shape[2]}")
        if self.w.shape[0] < 1 or self.b.shape != (self.w.shape[0],):
            raise ShapeError("bias length must equal out-channel count")


@dataclass
class NetworkWeights:
    branch: list  # 2 ConvLayers shared by all streams
    head: list  # 3 ConvLayers
    fusion: str = "mean"  # "mean" | "concat"
    n_at_training: int = 5

    def tensors(self):
        """(name, array) pairs in a fixed serialization order."""
        out = []
        for i, layer in enumerate(self.branch):
            out.append((f"branch{i}.w", layer.w))
            out.append((f"branch{i}.b", layer.b))
        for i, layer in enumerate(self.head):
            out.append((f"head{i}.w", layer.w))
            out.append((f"head{i}.b", layer.b))
        return out

    @property
    def dtype(self):
        return self.branch[0].w.dtype

    @property
    def feature_channels(self):
        return self.branch[-1].w.shape[0]

    def astype(self, dtype):
        return NetworkWeights(
            [ConvLayer(l.w.astype(dtype), l.b.astype(dtype)) for l in self.branch],
            [ConvLayer(l.w.astype(dtype), l.b.astype(dtype)) for l in self.head],
            self.fusion,
            self.n_at_training,
        )


@dataclass
class GradientSet:
    """One gradient array per weight tensor, dims mirroring NetworkWeights."""

    branch: list  # [(gw, gb), ...]
    head: list

    @classmethod
    def zeros_like(cls, weights):
        return cls(
            [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in weights.branch],
            [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in weights.head],
        )

    def tensors(self):
        out = []
        for i, (gw, gb) in enumerate(self.branch):
            out.append((f"branch{i}.w", gw))
            out.append((f"branch{i}.b", gb))
        for i, (gw, gb) in enumerate(self.head):
            out.append((f"head{i}.w", gw))
            out.append((f"head{i}.b", gb))
        return out


def _glorot(rng, shape, dtype):
    fan_in = shape[1] * shape[2] * shape[3]
    fan_out = shape[0] * shape[2] * shape[3]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(dtype)


def make_network(
    fusion="mean",
    n=5,
    branch_channels=BRANCH_CHANNELS,
    head_width=HEAD_WIDTH_DESK,
    seed=0,
    dtype=np.float32,
):
    """Freshly initialized weights. With mean fusion the parameter count is
    independent of n; concat fixes the head input to n * feature channels."""
    if fusion not in ("mean", "concat"):
        raise ValueError(f"unknown fusion mode {fusion!r}")
    if n < 2:
        raise ValueError("need at least 2 views")
    rng = np.random.default_rng(seed)
    c1, c2 = branch_channels
    fused = c2 if fusion == "mean" else n * c2

    def layer(co, ci, k):
        return ConvLayer(_glorot(rng, (co, ci, k, k), dtype), np.zeros(co, dtype))

    branch = [layer(c1, 1, 5), layer(c2, c1, 5)]
    head = [layer(head_width, fused, 5), layer(head_width, head_width, 1), layer(2, head_width, 1)]
    return NetworkWeights(branch, head, fusion, n)


# ---------------------------------------------------------------------------
# elementary operations


def conv2d_valid(x, layer):
    """Valid convolution (no padding, stride 1) of a (C,H,W) tensor."""
    if x.ndim != 3:
        raise ShapeError(f"expected (C,H,W) input, got {x.shape}")
    k = layer.kernel_size
    if x.shape[0] != layer.w.shape[1]:
        raise ShapeError(
            f"input has {x.shape[0]} channels, layer expects {layer.w.shape[1]}"
        )
    if x.shape[1] < k or x.shape[2] < k:
        raise ShapeError(f"input {x.shape[1]}x{x.shape[2]} smaller than kernel {k}")
    return B.conv2d_forward(x[None], layer.w, layer.b)[0]


def maxpool2(x):
    """2x2 max pooling with stride 2 of a (C,H,W) tensor; returns (out, idx)."""
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"pooling needs even spatial extents, got {x.shape}")
    out, idx = B.maxpool2_forward(x[None])
    return out[0], idx[0]


def tanh_act(x):
    return np.tanh(x)


def relu_act(x):
    return np.maximum(x, 0)


def softmax2(logits):
    """Stabilized softmax over axis 1 of (N,2,...) logits."""
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, label):
    """Cross-entropy of a 2-class logit pair against label 0/1.

    Returns (loss, grad) with grad = softmax(logits) - onehot(label).
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (2,):
        raise ShapeError(f"expected 2 logits, got shape {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    loss = lse - logits[label]
    grad = np.exp(logits - lse)
    grad[label] -= 1.0
    return float(loss), grad


# ---------------------------------------------------------------------------
# network forward / backward (batched internals)


def _branch_forward(x, weights, cache=None):
    """x (N,1,H,W) -> pooled features (N,C,h,w); H,W >= 32 and shape-chain even."""
    if x.shape[2] < 32 or x.shape[3] < 32:
        raise ShapeError(f"branch input must be at least 32x32, got {x.shape[2:]}")
    l1, l2 = weights.branch
    xc = x - x.dtype.type(INPUT_MEAN)
    z = B.conv2d_forward(xc, l1.w, l1.b)
    a1 = np.tanh(z)
    if a1.shape[2] % 2 or a1.shape[3] % 2:
        raise ShapeError(f"odd extent {a1.shape[2:]} before pooling; use 4k input sizes")
    p1, i1 = B.maxpool2_forward(a1)
    z = B.conv2d_forward(p1, l2.w, l2.b)
    a2 = np.tanh(z)
    if a2.shape[2] % 2 or a2.shape[3] % 2:
        raise ShapeError(f"odd extent {a2.shape[2:]} before pooling; use 4k input sizes")
    p2, i2 = B.maxpool2_forward(a2)
    if cache is not None:
        cache["x"] = xc
        cache["a1"], cache["i1"], cache["p1"] = a1, i1, p1
        cache["a2"], cache["i2"] = a2, i2
    return p2


def forward_branch(patch, weights):
    """Single grayscale patch (1,H,W) or (H,W) -> feature map (C,h,w)."""
    patch = np.asarray(patch)
    if patch.ndim == 2:
        patch = patch[None]
    if patch.ndim != 3 or patch.shape[0] != 1:
        raise ShapeError(f"expected a single-channel patch, got {patch.shape}")
    return _branch_forward(patch[None].astype(weights.dtype, copy=False), weights)[0]


def fuse(branch_outputs, mode, n_at_training=None):
    """Combine n branch feature maps: elementwise mean or channel concat.

    Mean accepts any n >= 2 (the variable-view contract); concat requires the
    trained n. Accepts a list of (C,h,w) maps or an (N,n,C,h,w) batch.
    """
    batched = isinstance(branch_outputs, np.ndarray) and branch_outputs.ndim == 5
    if batched:
        stack = branch_outputs
    else:
        if len(branch_outputs) < 2:
            raise ShapeError("need at least 2 branch outputs")
        dims = {t.shape for t in branch_outputs}
        if len(dims) != 1:
            raise ShapeError(f"branch outputs disagree in shape: {sorted(dims)}")
        stack = np.stack(branch_outputs)[None]
    n = stack.shape[1]
    if n < 2:
        raise ShapeError("need at least 2 branch outputs")
    if mode == "mean":
        # accumulate in float64 so the result is insensitive to branch order
        fused = stack.mean(axis=1, dtype=np.float64).astype(stack.dtype)
    elif mode == "concat":
        if n_at_training is not None and n != n_at_training:
            raise ShapeError(
                f"concat fusion was trained with n={n_at_training}, got {n} inputs"
            )
        fused = stack.reshape(stack.shape[0], -1, stack.shape[3], stack.shape[4])
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    return fused if batched else fused[0]


def _head_forward(fused, weights, cache=None):
    l3, l4, l5 = weights.head
    if fused.shape[1] != l3.w.shape[1]:
        raise ShapeError(
            f"fused input has {fused.shape[1]} channels, head expects {l3.w.shape[1]}"
        )
    a3 = np.maximum(B.conv2d_forward(fused, l3.w, l3.b), 0)
    a4 = np.maximum(B.conv2d_forward(a3, l4.w, l4.b), 0)
    logits = B.conv2d_forward(a4, l5.w, l5.b)
    if cache is not None:
        cache["fused"], cache["a3"], cache["a4"] = fused, a3, a4
    return logits


def forward_head(fused, weights):
    """Fused feature map (C,h,w) -> class logits (2,h',w')."""
    return _head_forward(np.asarray(fused)[None], weights)[0]


def similarity_forward(patches, weights):
    """n patches (each (H,W) or (1,H,W)) -> match-probability map.

    Output has one score per 4x4 input region, each in [0,1]; a 32x32 input
    gives a single 1x1 score, 128x128 gives 25x25.
    """
    arrs = []
    for p in patches:
        p = np.asarray(p)
        if p.ndim == 2:
            p = p[None]
        arrs.append(p.astype(weights.dtype, copy=False))
    if len(arrs) < 2:
        raise ShapeError("similarity needs at least 2 patches")
    dims = {a.shape for a in arrs}
    if len(dims) != 1:
        raise ShapeError(f"patches disagree in shape: {sorted(dims)}")
    x = np.stack(arrs)  # (n,1,H,W)
    feats = _branch_forward(x, weights)
    fused = fuse(feats[None], weights.fusion, weights.n_at_training)
    logits = _head_forward(fused, weights)
    return softmax2(logits)[0, 1]


def forward_loss(weights, patches, labels):
    """Mean softmax cross-entropy of a batch; patches (N,n,1,h,w) or (N,n,h,w)."""
    logits = _net_forward(weights, patches)
    return _batch_xent(logits, labels)[0]


def _net_forward(weights, patches, caches=None):
    patches = np.asarray(patches)
    if patches.ndim == 4:
        patches = patches[:, :, None]
    n_samples, n_views = patches.shape[:2]
    flat = np.ascontiguousarray(
        patches.reshape(n_samples * n_views, 1, *patches.shape[3:])
    ).astype(weights.dtype, copy=False)
    bcache = {} if caches is not None else None
    feats = _branch_forward(flat, weights, bcache)
    feats = feats.reshape(n_samples, n_views, *feats.shape[1:])
    fused = fuse(feats, weights.fusion, weights.n_at_training)
    hcache = {} if caches is not None else None
    logits = _head_forward(fused, weights, hcache)
    if caches is not None:
        caches["branch"] = bcache
        caches["head"] = hcache
        caches["n_views"] = n_views
    return logits


def _batch_xent(logits, labels):
    """(N,2,1,1) logits + (N,) labels -> (mean loss, dloss/dlogits)."""
    n = logits.shape[0]
    if logits.shape[2:] != (1, 1):
        raise ShapeError(f"training logits must be 1x1 maps, got {logits.shape}")
    l2 = logits.reshape(n, 2).astype(np.float64)
    if not np.all(np.isfinite(l2)):
        raise ValueError("non-finite logits in batch")
    labels = np.asarray(labels)
    m = l2.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(l2 - m).sum(axis=1))
    loss = float((lse - l2[np.arange(n), labels]).mean())
    grad = np.exp(l2 - lse[:, None])
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad.reshape(logits.shape).astype(logits.dtype)


def backward(weights, patches, labels):
    """Loss and parameter gradients for a batch of n-view samples.

    patches (N,n,1,h,w) or (N,n,h,w); labels (N,) of 0/1. Gradients are
    averaged over the batch; tied branch weights accumulate contributions
    from all n streams.
    """
    caches = {}
    logits = _net_forward(weights, patches, caches)
    loss, dlogits = _batch_xent(logits, labels)
    grads = GradientSet.zeros_like(weights)
    gfused = _head_backward(dlogits, weights, caches["head"], grads)
    n_views = caches["n_views"]
    n_samples = gfused.shape[0]
    if weights.fusion == "mean":
        gfeats = np.broadcast_to(
            (gfused / n_views)[:, None], (n_samples, n_views, *gfused.shape[1:])
        )
    else:
        gfeats = gfused.reshape(n_samples, n_views, -1, *gfused.shape[2:])
    gflat = np.ascontiguousarray(gfeats.reshape(n_samples * n_views, *gfeats.shape[2:]))
    _branch_backward(gflat, weights, caches["branch"], grads)
    return loss, grads


def _head_backward(gout, weights, cache, grads):
    l3, l4, l5 = weights.head
    g, gw, gb = B.conv2d_backward(cache["a4"], l5.w, gout)
    grads.head[2][0][...] += gw
    grads.head[2][1][...] += gb
    g *= cache["a4"] > 0
    g, gw, gb = B.conv2d_backward(cache["a3"], l4.w, g)
    grads.head[1][0][...] += gw
    grads.head[1][1][...] += gb
    g *= cache["a3"] > 0
    g, gw, gb = B.conv2d_backward(cache["fused"], l3.w, g)
    grads.head[0][0][...] += gw
    grads.head[0][1][...] += gb
    return g


def _branch_backward(gfeat, weights, cache, grads):
    l1, l2 = weights.branch
    a2, a1 = cache["a2"], cache["a1"]
    g = B.maxpool2_backward(gfeat, cache["i2"], a2.shape[2], a2.shape[3])
    g *= 1.0 - a2 * a2
    g, gw, gb = B.conv2d_backward(cache["p1"], l2.w, g)
    grads.branch[1][0][...] += gw
    grads.branch[1][1][...] += gb
    g = B.maxpool2_backward(g, cache["i1"], a1.shape[2], a1.shape[3])
    g *= 1.0 - a1 * a1
    _, gw, gb = B.conv2d_backward(cache["x"], l1.w, g, need_gx=False)
    grads.branch[0][0][...] += gw
    grads.branch[0][1][...] += gb


# ---------------------------------------------------------------------------
# optimization


def lr_at(iteration, base_lr, decay_factor=0.1, decay_period=100_000):
    """Step-decay schedule: base_lr scaled by decay_factor every decay_period."""
    return base_lr * decay_factor ** (iteration // decay_period)


@dataclass
class SgdState:
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocities: dict = field(default_factory=dict)

    def ensure(self, weights):
        if not self.velocities:
            for name, t in weights.tensors():
                self.velocities[name] = np.zeros_like(t)


def sgd_step(weights, grads, lr, state=None):
    """In-place SGD update w <- w - lr*g, with optional momentum state.

    With state, uses v <- mu*v - lr*(g + wd*w); w <- w + v. lr 0 is a no-op
    (the degenerate step), negative rates are rejected.
    """
    if lr < 0:
        raise ValueError("learning rate must not be negative")
    wt = weights.tensors()
    gt = grads.tensors()
    if state is None:
        for (_, w), (_, g) in zip(wt, gt):
            w -= lr * g
        return weights
    state.ensure(weights)
    for (name, w), (_, g) in zip(wt, gt):
        v = state.velocities[name]
        v *= state.momentum
        if state.weight_decay:
            v -= lr * (g + state.weight_decay * w)
        else:
            v -= lr * g
        w += v
    return weights


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(weights, patches, labels, step=1e-5, backward_fn=backward):
    """Compare analytic gradients against central finite differences.

    Meant for float64 micro-networks. Returns (max_rel_err, per-tensor dict of
    (max_rel_err, flat index)); rel err is |a-n| / max(|a|+|n|, 1e-8).
    """
    _, grads = backward_fn(weights, patches, labels)
    report = {}
    worst = 0.0
    for (name, w), (_, g) in zip(weights.tensors(), grads.tensors()):
        flat = w.reshape(-1)
        tmax, tidx = 0.0, 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp = forward_loss(weights, patches, labels)
            flat[i] = orig - step
            lm = forward_loss(weights, patches, labels)
            flat[i] = orig
            num = (lp - lm) / (2 * step)
            ana = g.reshape(-1)[i]
            rel = abs(ana - num) / max(abs(ana) + abs(num), 1e-8)
            if rel > tmax:
                tmax, tidx = rel, i
        report[name] = (tmax, tidx)
        worst = max(worst, tmax)
    return worst, report
