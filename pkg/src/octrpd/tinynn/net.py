"""Network container, loss, optimizer, builders and checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .layers import (
    BatchNorm, Conv, Dense, GlobalAvgPool, GlobalMaxPool, Layer, MaxPool, ReLU, Sequential, Softmax,
    UNetCore, conv_block,
)

PROB_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"OCTRPD-TINYNN-v1\n"


class NonFiniteError(FloatingPointError):
    pass


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def _walk(layer: Layer, prefix=""):
    yield prefix, layer
    for name, child in layer.children():
        yield from _walk(child, f"{prefix}{name}." if prefix or name else name)


class MiniNet:
    """A root layer plus its architecture recipe and Adam state."""

    def __init__(self, root: Layer, arch: dict | None = None):
        self.root = root
        self.arch = arch or {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step = 0

    # -- parameter access -------------------------------------------------
    def layers(self):
        """Leaf layers in definition order."""
        return [layer for _, layer in _walk(self.root) if not layer.children()]

    def named_tensors(self, kind="params"):
        for prefix, layer in _walk(self.root):
            for key, arr in getattr(layer, kind).items():
                yield f"{prefix}{key}", layer, key, arr

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: arr for name, _, _, arr in self.named_tensors("params")}

    def gradients(self) -> dict[str, np.ndarray]:
        return {name: layer.grads[key] for name, layer, key, _ in self.named_tensors("params")}

    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.parameters().values()))

    def state(self) -> dict[str, np.ndarray]:
        """Copy of parameters and buffers (enough to restore the net's function)."""
        out = {name: arr.copy() for name, _, _, arr in self.named_tensors("params")}
        out.update({name: arr.copy() for name, _, _, arr in self.named_tensors("buffers")})
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        for kind in ("params", "buffers"):
            for name, layer, key, arr in self.named_tensors(kind):
                if state[name].shape != arr.shape:
                    raise ValueError(f"{name}: shape {state[name].shape} != {arr.shape}")
                getattr(layer, kind)[key] = np.array(state[name], dtype=np.float64)

    # -- compute ----------------------------------------------------------
    def forward(self, x, training=False):
        x = np.asarray(x, dtype=np.float64)
        # ReLU maps NaN to 0, so a bad input would not reach the output check
        if not np.isfinite(x).all():
            raise NonFiniteError("non-finite value in network input")
        out = self.root.forward(x, training)
        if not np.isfinite(out).all():
            raise NonFiniteError("non-finite activation in forward pass")
        return out

    def backward(self, dout):
        return self.root.backward(dout)

    # -- optimizer --------------------------------------------------------
    def adam_step(self, grads: dict[str, np.ndarray], cfg: AdamConfig = AdamConfig()):
        self.step += 1
        t = self.step
        for name, layer, key, arr in self.named_tensors("params"):
            g = grads[name]
            if g.shape != arr.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {arr.shape} for {name}")
            m = self.adam_m.get(name)
            v = self.adam_v.get(name)
            if m is None:
                m = np.zeros_like(arr)
                v = np.zeros_like(arr)
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            self.adam_m[name], self.adam_v[name] = m, v
            mhat = m / (1 - cfg.beta1 ** t)
            vhat = v / (1 - cfg.beta2 ** t)
            layer.params[key] = arr - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.epsilon)

    def __repr__(self):
        return f"MiniNet({self.arch.get('builder', '?')}, params={self.parameter_count()})"


def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _target_onehot(probs, targets):
    targets = np.asarray(targets)
    c = probs.shape[1]
    if targets.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ValueError(f"targets shape {targets.shape} does not match probabilities {probs.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise IndexError(f"target index out of range [0, {c})")
    return np.moveaxis(np.eye(c)[targets.astype(np.int64)], -1, 1)


def cross_entropy(probs, targets) -> float:
    """Mean over samples (and pixels) of -log p[target], probabilities floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    onehot = _target_onehot(probs, targets)
    picked = (probs * onehot).sum(axis=1)
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def cross_entropy_grad(probs, targets):
    """d(cross_entropy)/d(probs)."""
    probs = np.asarray(probs, dtype=np.float64)
    onehot = _target_onehot(probs, targets)
    n = probs.size // probs.shape[1]
    return -onehot / np.maximum(probs, PROB_FLOOR) / n


def backward(net: MiniNet, batch, targets, loss="cross_entropy"):
    """Training-mode forward + backward; returns (loss, gradients by parameter name)."""
    probs = net.forward(batch, training=True)
    if loss == "cross_entropy":
        value = cross_entropy(probs, targets)
        dout = cross_entropy_grad(probs, targets)
    else:
        value, dout = loss(probs, targets)
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss {value}")
    net.backward(dout)
    return value, {k: g.copy() for k, g in net.gradients().items()}


# ---------------------------------------------------------------------------
# builders

BUILDERS = {}


def _builder(fn):
    BUILDERS[fn.__name__] = fn
    return fn


def _pool_plan(dims, n_blocks):
    plan = []
    cur = list(dims)
    for _ in range(n_blocks):
        size = tuple(2 if c >= 4 and c % 2 == 0 else 1 for c in cur)
        if size == (1,) * len(cur):
            raise ValueError(f"input dims {tuple(dims)} too small for {n_blocks} pooling stages")
        plan.append(size)
        cur = [c // s for c, s in zip(cur, size)]
    return plan


@_builder
def build_classifier3d(input_dims=(16, 64, 128), n_categories=2, width_scale=1.0,
                       n_blocks=4, base_widths=(4, 8, 16, 16), stem_pool=(1, 2, 2), head_pool="avg",
                       seed=0):
    """3-D conv stack: stem pool, n x (conv3d-BN-ReLU-maxpool), global pool, dense, softmax.

    Each pooling stage halves every axis that is still >= 4 and even.
    ``head_pool`` "max" suits detection of small focal findings.
    """
    dims = tuple(int(d) for d in input_dims)
    if len(dims) != 3 or min(dims) < 8:
        raise ValueError(f"input dims must be three extents >= 8, got {dims}")
    if not 3 <= n_blocks <= 5:
        raise ValueError("n_blocks must be within 3..5")
    if len(base_widths) < n_blocks:
        raise ValueError("need one base width per block")
    if head_pool not in ("avg", "max"):
        raise ValueError(f"head_pool must be 'avg' or 'max', got {head_pool!r}")
    rng = np.random.default_rng(seed)
    layers = []
    cur = dims
    if stem_pool and any(s > 1 for s in stem_pool):
        if any(c % s for c, s in zip(cur, stem_pool)):
            raise ValueError(f"input dims {dims} not divisible by stem pool {tuple(stem_pool)}")
        layers.append(MaxPool(stem_pool))
        cur = tuple(c // s for c, s in zip(cur, stem_pool))
    plan = _pool_plan(cur, n_blocks)
    ch = 1
    for i in range(n_blocks):
        w = max(1, int(round(base_widths[i] * width_scale)))
        layers += [Conv(ch, w, 3, 3, rng=rng, input_grad=i > 0), BatchNorm(w), ReLU(), MaxPool(plan[i])]
        ch = w
    layers += [GlobalAvgPool() if head_pool == "avg" else GlobalMaxPool(), Dense(ch, n_categories, rng=rng), Softmax()]
    arch = {"builder": "build_classifier3d",
            "kwargs": {"input_dims": list(dims), "n_categories": n_categories,
                       "width_scale": width_scale, "n_blocks": n_blocks,
                       "base_widths": list(base_widths),
                       "stem_pool": list(stem_pool) if stem_pool else None,
                       "head_pool": head_pool, "seed": seed}}
    net = MiniNet(Sequential(layers), arch)
    net.input_shape = (1,) + dims
    validate_structure(net)
    return net


@_builder
def build_unet2d(input_dims=(64, 128), n_categories=4, depth=3, base_width=8, n_convs=2,
                 skip=True, seed=0):
    h, w = (int(d) for d in input_dims)
    if h % 2 ** depth or w % 2 ** depth:
        raise ValueError(f"input dims {(h, w)} not divisible by 2**{depth}")
    rng = np.random.default_rng(seed)
    core = UNetCore(1, n_categories, depth, base_width, rng, n_convs=n_convs, skip=skip)
    arch = {"builder": "build_unet2d",
            "kwargs": {"input_dims": [h, w], "n_categories": n_categories, "depth": depth,
                       "base_width": base_width, "n_convs": n_convs, "skip": skip, "seed": seed}}
    net = MiniNet(core, arch)
    net.input_shape = (1, h, w)
    validate_structure(net)
    return net


@_builder
def build_sequential(layers_spec, seed=0):
    """Small nets from a list of ``(kind, kwargs)`` pairs; used by tests and gradcheck."""
    rng = np.random.default_rng(seed)
    kinds = {"conv": Conv, "batchnorm": BatchNorm, "relu": ReLU, "maxpool": MaxPool,
             "global_avg_pool": GlobalAvgPool,
             "global_max_pool": GlobalMaxPool, "dense": Dense, "softmax": Softmax}
    layers = []
    for kind, kw in layers_spec:
        cls = kinds[kind]
        kw = dict(kw)
        if cls in (Conv, Dense):
            kw["rng"] = rng
        layers.append(cls(**kw))
    return MiniNet(Sequential(layers),
                   {"builder": "build_sequential",
                    "kwargs": {"layers_spec": [list(x) for x in layers_spec], "seed": seed}})


def from_arch(arch: dict) -> MiniNet:
    return BUILDERS[arch["builder"]](**arch["kwargs"])


def validate_structure(net: MiniNet):
    """Softmax only terminal; every non-terminal conv followed by batchnorm then relu."""
    leaves = net.layers()
    for i, layer in enumerate(leaves):
        if isinstance(layer, Softmax) and i != len(leaves) - 1:
            raise ValueError("softmax must be the terminal layer")
    convs = [i for i, layer in enumerate(leaves) if isinstance(layer, Conv)]
    for i in convs:
        if i == convs[-1] and isinstance(leaves[i + 1], Softmax):
            continue
        if not (isinstance(leaves[i + 1], BatchNorm) and isinstance(leaves[i + 2], ReLU)):
            raise ValueError(f"conv at position {i} is not followed by batchnorm + relu")


# ---------------------------------------------------------------------------
# checkpoints: magic, 8-byte LE header length, JSON header, float64 LE payload


def save_checkpoint(net: MiniNet, path) -> None:
    path = Path(path)
    state = net.state()
    names = sorted(state)
    header = {"arch": net.arch, "step": net.step,
              "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names]}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(state[n], dtype="<f8").tobytes() for n in names)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)
    tmp.replace(path)


def load_checkpoint(path) -> MiniNet:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a tinynn checkpoint")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", raw[off:off + 8])
    off += 8
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    state = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"]))
        state[t["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(t["shape"])
        off += 8 * n
    if off != len(raw):
        raise ValueError(f"{path}: payload length mismatch")
    net = from_arch(header["arch"])
    net.load_state(state)
    net.step = header.get("step", 0)
    return net


def config_dict(cfg) -> dict:
    return asdict(cfg)
