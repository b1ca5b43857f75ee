"""Compact 1-D convolutional classifier with hand-written backpropagation.

Layout: ``n`` blocks of (conv k, batch norm, ReLU, average pool /2), global
average pooling, a dense layer followed by batch norm producing the feature
vector, and a linear softmax classifier on top. All arithmetic is float64; tensors inside the
network are channels-last ``(B, L, C)``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DEFAULT_LR = 0.0006

CKPT_MAGIC = b"SCCK"
CKPT_VERSION = 1


class StaleTapeError(RuntimeError):
    """Backward called with a tape recorded on an older model state."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ArchDescriptor:
    length: int = 256
    num_classes: int = 6
    channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    feat_dim: int = 64
    in_channels: int = 2

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.length >> len(self.channels) < 1:
            raise ValueError(f"length {self.length} too short for {len(self.channels)} pooling stages")

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        cin = self.in_channels
        for i, c in enumerate(self.channels):
            shapes += [(f"conv{i}", (self.kernel, cin, c)), (f"gamma{i}", (c,)), (f"beta{i}", (c,))]
            cin = c
        d = self.feat_dim
        shapes += [("dense_w", (cin, d)), ("feat_gamma", (d,)), ("feat_beta", (d,))]
        return shapes

    def sizes(self) -> tuple[int, int, int]:
        """(feature params, classifier params, normalization buffers)."""
        n_feat = sum(int(np.prod(s)) for _, s in self.layer_shapes())
        n_cls = self.feat_dim * self.num_classes + self.num_classes
        return n_feat, n_cls, 2 * (sum(self.channels) + self.feat_dim)


def _views(flat: np.ndarray, shapes) -> dict[str, np.ndarray]:
    out, off = {}, 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        out[name] = flat[off:off + n].reshape(shape)
        off += n
    return out


@dataclass
class ModelState:
    arch: ArchDescriptor
    feat_params: np.ndarray
    cls_params: np.ndarray
    buffers: np.ndarray  # running mean then running var, per norm layer
    opt_moments: tuple[np.ndarray, np.ndarray] = None
    cls_moments: tuple[np.ndarray, np.ndarray] = None
    frozen: bool = False
    version: int = 0
    steps: int = field(default=0)

    def __post_init__(self):
        n_feat, n_cls, n_buf = self.arch.sizes()
        if self.feat_params.shape != (n_feat,) or self.cls_params.shape != (n_cls,) \
                or self.buffers.shape != (n_buf,):
            raise ValueError("parameter vector sizes do not match the architecture")
        if self.opt_moments is None:
            self.opt_moments = (np.zeros(n_feat), np.zeros(n_feat))
        if self.cls_moments is None:
            self.cls_moments = (np.zeros(n_cls), np.zeros(n_cls))

    @property
    def feat_dim(self) -> int:
        return self.arch.feat_dim

    def layers(self) -> dict[str, np.ndarray]:
        return _views(self.feat_params, self.arch.layer_shapes())

    def classifier(self) -> tuple[np.ndarray, np.ndarray]:
        d, K = self.arch.feat_dim, self.arch.num_classes
        return self.cls_params[:d * K].reshape(d, K), self.cls_params[d * K:]

    def running_stats(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out, off = [], 0
        for c in (*self.arch.channels, self.arch.feat_dim):
            out.append((self.buffers[off:off + c], self.buffers[off + c:off + 2 * c]))
            off += 2 * c
        return out

    def copy(self) -> "ModelState":
        m = ModelState(self.arch, self.feat_params.copy(), self.cls_params.copy(),
                       self.buffers.copy(),
                       tuple(a.copy() for a in self.opt_moments),
                       tuple(a.copy() for a in self.cls_moments),
                       frozen=False, version=0, steps=self.steps)
        if self.frozen:
            freeze_classifier(m)
        return m

    def reset_optimizer(self):
        self.opt_moments = (np.zeros_like(self.feat_params), np.zeros_like(self.feat_params))
        self.cls_moments = (np.zeros_like(self.cls_params), np.zeros_like(self.cls_params))
        self.steps = 0

    def classifier_hash(self) -> str:
        return hashlib.sha256(self.cls_params.tobytes()).hexdigest()


def init_model(arch: ArchDescriptor, seed: int = 0) -> ModelState:
    """Fan-in scaled uniform weights, unit BN scale, zero biases."""
    rng = np.random.default_rng(seed)
    n_feat, n_cls, _ = arch.sizes()
    feat = np.zeros(n_feat)
    layers = _views(feat, arch.layer_shapes())
    for name, w in layers.items():
        if name.startswith("conv"):
            fan_in = w.shape[0] * w.shape[1]
            w[...] = rng.uniform(-1, 1, w.shape) * np.sqrt(6.0 / fan_in)
        elif "gamma" in name:
            w[...] = 1.0
        elif name == "dense_w":
            w[...] = rng.uniform(-1, 1, w.shape) * np.sqrt(3.0 / w.shape[0])
    cls = np.zeros(n_cls)
    d, K = arch.feat_dim, arch.num_classes
    cls[:d * K] = rng.uniform(-1, 1, d * K) * np.sqrt(3.0 / d)
    bufs = []
    for c in (*arch.channels, arch.feat_dim):
        bufs += [np.zeros(c), np.ones(c)]
    return ModelState(arch, feat, cls, np.concatenate(bufs))


def freeze_classifier(model: ModelState) -> ModelState:
    model.frozen = True
    model.cls_params.setflags(write=False)
    return model


@dataclass
class Tape:
    version: int
    model_id: int
    cache: list = field(default_factory=list)
    pooled: np.ndarray = None
    features: np.ndarray = None
    probs: np.ndarray = None
    pool_len: int = 0
    feat_norm: tuple = None


def _as_input(batch, arch: ArchDescriptor) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        x = batch
    else:
        x = np.stack([r.samples for r in batch])
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (arch.in_channels, arch.length):
        raise ValueError(f"batch shape {x.shape[1:]} does not match architecture "
                         f"({arch.in_channels}, {arch.length})")
    return x.transpose(0, 2, 1)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    B, L, C = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (0, 0)))
    cols = np.stack([xp[:, j:j + L, :] for j in range(k)], axis=2)
    return cols.reshape(B * L, k * C)


def _col2im(dcols: np.ndarray, B: int, L: int, C: int, k: int) -> np.ndarray:
    p = k // 2
    dcols = dcols.reshape(B, L, k, C)
    dxp = np.zeros((B, L + 2 * p, C))
    for j in range(k):
        dxp[:, j:j + L, :] += dcols[:, :, j, :]
    return dxp[:, p:p + L, :]


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _bn_forward(z, gamma, beta, running, train, update_stats):
    axes = tuple(range(z.ndim - 1))
    if train:
        mu = z.mean(axis=axes)
        var = z.var(axis=axes)
        if update_stats:
            rm, rv = running
            M = z.size // z.shape[-1]
            rm *= 1 - BN_MOMENTUM
            rm += BN_MOMENTUM * mu
            rv *= 1 - BN_MOMENTUM
            rv += BN_MOMENTUM * var * M / max(M - 1, 1)
    else:
        mu, var = running
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (z - mu) * inv_std
    return gamma * xhat + beta, xhat, inv_std


def _bn_backward(dy, xhat, inv_std, gamma):
    axes = tuple(range(dy.ndim - 1))
    M = dy.size // dy.shape[-1]
    dgamma = np.sum(dy * xhat, axis=axes)
    dbeta = np.sum(dy, axis=axes)
    dxhat = dy * gamma
    dz = inv_std / M * (M * dxhat - dxhat.sum(axis=axes)
                        - xhat * np.sum(dxhat * xhat, axis=axes))
    return dz, dgamma, dbeta


def forward(model: ModelState, batch, mode: str = "eval", update_stats: bool = True):
    """Run the network on a batch.

    Returns ``(features, probs, tape)``; ``tape`` is None in eval mode. In
    train mode normalization uses batch statistics and, when
    ``update_stats`` is set, folds them into the running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    arch = model.arch
    h = _as_input(batch, arch)
    W = model.layers()
    train = mode == "train"
    if train and h.shape[0] < 2:
        raise ValueError("train-mode batch statistics need at least 2 records")
    tape = Tape(model.version, id(model)) if train else None
    stats = model.running_stats()
    for i in range(len(arch.channels)):
        B, L, C = h.shape
        w = W[f"conv{i}"]
        cols = _im2col(h, arch.kernel)
        z = (cols @ w.reshape(-1, w.shape[2])).reshape(B, L, -1)
        a, xhat, inv_std = _bn_forward(z, W[f"gamma{i}"], W[f"beta{i}"], stats[i],
                                       train, update_stats)
        r = np.maximum(a, 0.0)
        Lo = L // 2
        h = 0.5 * (r[:, 0:2 * Lo:2] + r[:, 1:2 * Lo:2])
        if train:
            tape.cache.append((cols, (B, L, C), xhat, inv_std, a > 0))
    pooled = h.mean(axis=1)
    feats, xhat, inv_std = _bn_forward(pooled @ W["dense_w"], W["feat_gamma"], W["feat_beta"],
                                       stats[-1], train, update_stats)
    Wc, bc = model.classifier()
    probs = softmax(feats @ Wc + bc)
    if train:
        tape.pooled, tape.features, tape.probs = pooled, feats, probs
        tape.pool_len = h.shape[1]
        tape.feat_norm = (xhat, inv_std)
    return feats, probs, tape


def backward(model: ModelState, tape: Tape, dprobs: np.ndarray | None,
             dfeatures: np.ndarray | None = None, with_classifier: bool = False):
    """Gradient of a loss with respect to the feature-extractor parameters.

    ``dprobs`` and ``dfeatures`` are the loss gradients with respect to the
    probabilities and the features of the taped forward pass. With
    ``with_classifier`` the classifier gradient is returned as well.
    """
    if tape is None:
        raise ValueError("backward needs a tape from a train-mode forward")
    if tape.model_id != id(model) or tape.version != model.version:
        raise StaleTapeError("model changed since the forward pass")
    arch = model.arch
    W = model.layers()
    grads = _views(np.zeros_like(model.feat_params), arch.layer_shapes())
    Wc, _ = model.classifier()
    p = tape.probs
    dlogits = np.zeros_like(p) if dprobs is None else \
        p * (dprobs - np.sum(dprobs * p, axis=1, keepdims=True))
    g_cls = np.concatenate([(tape.features.T @ dlogits).ravel(), dlogits.sum(axis=0)])
    dfeat = dlogits @ Wc.T
    if dfeatures is not None:
        dfeat = dfeat + dfeatures
    dlin, grads["feat_gamma"][...], grads["feat_beta"][...] = \
        _bn_backward(dfeat, *tape.feat_norm, W["feat_gamma"])
    grads["dense_w"][...] = tape.pooled.T @ dlin
    dpooled = dlin @ W["dense_w"].T
    Lp = tape.pool_len
    dh = np.repeat(dpooled[:, None, :] / Lp, Lp, axis=1)
    for i in reversed(range(len(arch.channels))):
        cols, (B, L, C), xhat, inv_std, mask = tape.cache[i]
        Lo = L // 2
        dr = np.zeros((B, L, dh.shape[2]))
        dr[:, 0:2 * Lo:2] = 0.5 * dh
        dr[:, 1:2 * Lo:2] = 0.5 * dh
        dz, grads[f"gamma{i}"][...], grads[f"beta{i}"][...] = \
            _bn_backward(dr * mask, xhat, inv_std, W[f"gamma{i}"])
        w = W[f"conv{i}"]
        dz2 = dz.reshape(B * L, -1)
        grads[f"conv{i}"][...] = (cols.T @ dz2).reshape(w.shape)
        if i > 0:
            dh = _col2im(dz2 @ w.reshape(-1, w.shape[2]).T, B, L, C, arch.kernel)
    g_feat = np.concatenate([g.ravel() for g in grads.values()])
    if with_classifier:
        return g_feat, g_cls
    return g_feat


def _adam(param, grad, moments, lr, t):
    m, v = moments
    m *= ADAM_BETA1
    m += (1 - ADAM_BETA1) * grad
    v *= ADAM_BETA2
    v += (1 - ADAM_BETA2) * grad * grad
    mhat = m / (1 - ADAM_BETA1 ** t)
    vhat = v / (1 - ADAM_BETA2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


def opt_step(model: ModelState, grad: np.ndarray, lr: float, step_index: int | None = None,
             cls_grad: np.ndarray | None = None) -> ModelState:
    """One bias-corrected Adam step on the feature extractor.

    ``step_index`` is the 1-based Adam time step; by default the model's own
    counter is advanced. ``cls_grad`` is applied only to an unfrozen head.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != model.feat_params.shape:
        raise ValueError("gradient does not align with feature parameters")
    if not np.all(np.isfinite(grad)) or (cls_grad is not None and not np.all(np.isfinite(cls_grad))):
        raise FloatingPointError("non-finite gradient entries")
    t = model.steps + 1 if step_index is None else step_index
    if t < 1:
        raise ValueError("step_index is 1-based")
    _adam(model.feat_params, grad, model.opt_moments, lr, t)
    if cls_grad is not None and not model.frozen:
        _adam(model.cls_params, cls_grad, model.cls_moments, lr, t)
    model.steps = t
    model.version += 1
    return model


# checkpoint layout: magic, version u16, frozen u8, n_blocks u16, then u32
# length, num_classes, kernel, feat_dim, in_channels, channels..., steps,
# then f32 vectors: feat, cls, buffers, feat m, feat v, cls m, cls v


def _arch_header(arch: ArchDescriptor) -> bytes:
    return struct.pack(f"<H5I{len(arch.channels)}I", len(arch.channels), arch.length,
                       arch.num_classes, arch.kernel, arch.feat_dim, arch.in_channels,
                       *arch.channels)


def save_checkpoint(model: ModelState, path):
    parts = [CKPT_MAGIC, struct.pack("<HB", CKPT_VERSION, int(model.frozen)),
             _arch_header(model.arch), struct.pack("<I", model.steps)]
    for vec in (model.feat_params, model.cls_params, model.buffers, *model.opt_moments,
                *model.cls_moments):
        parts.append(np.asarray(vec, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, expected_arch: ArchDescriptor | None = None) -> ModelState:
    """Load a checkpoint; parameters come back as float64 copies of the f32 file data."""
    data = Path(path).read_bytes()
    try:
        if data[:4] != CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
        version, frozen = struct.unpack_from("<HB", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off = 7
        (n_blocks,) = struct.unpack_from("<H", data, off)
        vals = struct.unpack_from(f"<5I{n_blocks}I", data, off + 2)
        off += 2 + 4 * (5 + n_blocks)
        arch = ArchDescriptor(length=vals[0], num_classes=vals[1], kernel=vals[2],
                              feat_dim=vals[3], in_channels=vals[4], channels=tuple(vals[5:]))
        (steps,) = struct.unpack_from("<I", data, off)
        off += 4
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointError(f"{path}: architecture {arch} does not match {expected_arch}")
    n_feat, n_cls, n_buf = arch.sizes()
    sizes = [n_feat, n_cls, n_buf, n_feat, n_feat, n_cls, n_cls]
    if len(data) != off + 4 * sum(sizes):
        raise CheckpointError(f"{path}: expected {off + 4 * sum(sizes)} bytes, got {len(data)}")
    vecs = []
    for n in sizes:
        vecs.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float64))
        off += 4 * n
    model = ModelState(arch, vecs[0], vecs[1], vecs[2], (vecs[3], vecs[4]), (vecs[5], vecs[6]),
                       steps=steps)
    if frozen:
        freeze_classifier(model)
    return model


def predict(model: ModelState, x: np.ndarray, batch_size: int = 256):
    """Eval-mode features and probabilities for a large array, in fixed chunks."""
    feats, probs = [], []
    for s in range(0, len(x), batch_size):
        f, p, _ = forward(model, x[s:s + batch_size], "eval")
        feats.append(f)
        probs.append(p)
    return np.concatenate(feats), np.concatenate(probs)
