"""Multitask network: shared CNN trunk, scene CNN branch, event BiGRU branch.

The event branch produces frame logits twice over: a frame head (sigmoid per
frame) and a bag head that pools the same logits over time with one of the
MIL operators, then applies a sigmoid. Checkpoint I/O lives here too.
"""

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import milpool, nn
from .errors import InvalidConfig, IoError, ParseError, ShapeError
from .milpool import PoolingKind

CKPT_MAGIC = b"MTLW"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    """Architecture dimensions; defaults give the full-size network.

    scale_factor multiplies the channel and hidden widths (minimum 4) so the
    same topology runs at desk scale.
    """

    n_mels: int = 64
    n_frames: int = 500
    shared_channels: int = 128
    scene_channels: int = 256
    gru_hidden: int = 32  # per direction
    fc_hidden: int = 32
    n_scenes: int = 4
    n_events: int = 25
    scale_factor: float = 1.0
    freq_pools: tuple = (8, 2, 2)
    scene_time_pool: int = 25

    def __post_init__(self):
        for name in (
            "n_mels",
            "n_frames",
            "shared_channels",
            "scene_channels",
            "gru_hidden",
            "fc_hidden",
            "n_scenes",
            "n_events",
            "scene_time_pool",
        ):
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be positive")
        if self.scale_factor <= 0:
            raise InvalidConfig("scale_factor must be positive")
        object.__setattr__(self, "freq_pools", tuple(int(k) for k in self.freq_pools))
        pool_prod = int(np.prod(self.freq_pools))
        if self.n_mels % pool_prod:
            raise InvalidConfig(
                f"n_mels={self.n_mels} not divisible by freq pooling {pool_prod}"
            )
        if self.n_frames % self.scene_time_pool:
            raise InvalidConfig(
                f"n_frames={self.n_frames} not divisible by scene_time_pool="
                f"{self.scene_time_pool}"
            )

    def _scaled(self, width):
        return max(4, int(round(width * self.scale_factor)))

    @property
    def shared_ch(self):
        return self._scaled(self.shared_channels)

    @property
    def scene_ch(self):
        return self._scaled(self.scene_channels)

    @property
    def gru_h(self):
        return self._scaled(self.gru_hidden)

    @property
    def fc_h(self):
        return self._scaled(self.fc_hidden)

    @property
    def freq_out(self):
        return self.n_mels // int(np.prod(self.freq_pools))

    @property
    def event_in(self):
        """Per-frame event-branch input: channels x remaining freq bins."""
        return self.shared_ch * self.freq_out

    @property
    def scene_time_out(self):
        return self.n_frames // self.scene_time_pool

    def shape_chain(self):
        """Landmark shapes along the network, keyed by stage."""
        return {
            "input": (self.n_frames, self.n_mels),
            "shared_out": (self.shared_ch, self.n_frames, self.freq_out),
            "scene_time_out": self.scene_time_out,
            "frame_logits": (self.n_frames, self.n_events),
            "scene_out": self.n_scenes,
            "bag_logits": self.n_events,
        }


@dataclass
class ModelOutput:
    scene_logits: np.ndarray | None = None
    scene_probs: np.ndarray | None = None
    frame_logits: np.ndarray | None = None
    frame_probs: np.ndarray | None = None
    attention_logits: np.ndarray | None = None
    bag_logits: np.ndarray | None = None
    bag_probs: np.ndarray | None = None


class ModelParams:
    """Named parameter arrays plus batch-norm running stats.

    pooling selects the MIL operator for the bag head; None disables the bag
    head entirely (frame head only).
    """

    def __init__(self, arch, pooling, arrays, buffers):
        self.arch = arch
        self.pooling = pooling
        self.arrays = arrays
        self.buffers = buffers

    def copy(self):
        return ModelParams(
            self.arch,
            self.pooling,
            {k: v.copy() for k, v in self.arrays.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def astype(self, dtype):
        return ModelParams(
            self.arch,
            self.pooling,
            {k: v.astype(dtype) for k, v in self.arrays.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )


def glorot_bound(shape):
    """Uniform init bound sqrt(6 / (fan_in + fan_out)) for a weight array."""
    if len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 4:
        recept = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * recept, shape[0] * recept
    else:
        raise ShapeError(f"no fan rule for shape {shape}")
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(arch: ArchConfig, pooling, seed) -> ModelParams:
    """Glorot-uniform weights, zero biases, unit batch-norm scale."""
    if pooling is not None:
        pooling = PoolingKind.parse(pooling)
    rng = np.random.default_rng(seed)
    arrays = {}
    buffers = {}

    def weight(name, shape):
        s = glorot_bound(shape)
        arrays[name] = rng.uniform(-s, s, size=shape).astype(np.float32)

    def bias(name, width):
        arrays[name] = np.zeros(width, dtype=np.float32)

    def bn(name, width):
        arrays[f"{name}.gamma"] = np.ones(width, dtype=np.float32)
        arrays[f"{name}.beta"] = np.zeros(width, dtype=np.float32)
        buffers[f"{name}.run_mean"] = np.zeros(width, dtype=np.float32)
        buffers[f"{name}.run_var"] = np.ones(width, dtype=np.float32)

    def gru(name, d_in, h):
        weight(f"{name}.w_x", (d_in, 3 * h))
        weight(f"{name}.w_h", (h, 3 * h))
        bias(f"{name}.b", 3 * h)

    # Conv layers are bias-free: batch norm's mean subtraction would cancel
    # the bias exactly, leaving a parameter with identically zero gradient.
    c, s = arch.shared_ch, arch.scene_ch
    weight("shared.conv0.w", (c, 1, 3, 3))
    bn("shared.bn0", c)
    for i in (1, 2):
        weight(f"shared.conv{i}.w", (c, c, 3, 3))
        bn(f"shared.bn{i}", c)

    weight("scene.conv0.w", (s, c, 3, 3))
    bn("scene.bn0", s)
    weight("scene.conv1.w", (s, s, 3, 3))
    bn("scene.bn1", s)
    weight("scene.fc0.w", (s, arch.fc_h))
    bias("scene.fc0.b", arch.fc_h)
    weight("scene.fc1.w", (arch.fc_h, arch.n_scenes))
    bias("scene.fc1.b", arch.n_scenes)

    gru("event.gru_f", arch.event_in, arch.gru_h)
    gru("event.gru_b", arch.event_in, arch.gru_h)
    weight("event.fc0.w", (2 * arch.gru_h, arch.fc_h))
    bias("event.fc0.b", arch.fc_h)
    weight("event.fc1.w", (arch.fc_h, arch.n_events))
    bias("event.fc1.b", arch.n_events)
    if pooling is PoolingKind.AT:
        # No bias: the pooling quotient is invariant to a per-class constant
        # shift of the attention logits.
        weight("event.attn.w", (2 * arch.gru_h, arch.n_events))

    return ModelParams(arch, pooling, arrays, buffers)


def _gru_params(params, name):
    a = params.arrays
    return a[f"{name}.w_x"], a[f"{name}.w_h"], a[f"{name}.b"]


def forward(params, features, mode="eval", scene_branch=True, event_branch=True):
    """Run the network on a (B, T, D) feature batch.

    Returns (ModelOutput, cache); the cache feeds backward(). Train mode
    uses batch statistics in the batch-norm layers and updates the running
    stats in params.buffers.
    """
    arch = params.arch
    x = np.asarray(features)
    if x.ndim != 3 or x.shape[1] != arch.n_frames or x.shape[2] != arch.n_mels:
        raise ShapeError(
            f"expected features (B, {arch.n_frames}, {arch.n_mels}), got {x.shape}"
        )
    if mode not in ("train", "eval"):
        raise InvalidConfig(f"mode must be train or eval, got {mode!r}")
    train = mode == "train"
    a = params.arrays
    buf = params.buffers
    cache = {"batch": x.shape[0], "scene": scene_branch, "event": event_branch}
    out = ModelOutput()

    def conv_block(h, name, bn_name):
        h, cache[name] = nn.conv2d_forward(h, a[f"{name}.w"])
        h, cache[bn_name] = nn.batch_norm_forward(
            h,
            a[f"{bn_name}.gamma"],
            a[f"{bn_name}.beta"],
            buf[f"{bn_name}.run_mean"],
            buf[f"{bn_name}.run_var"],
            train,
        )
        if train:
            buf[f"{bn_name}.run_mean"], buf[f"{bn_name}.run_var"] = nn.bn_updated_running(
                cache[bn_name], buf[f"{bn_name}.run_mean"], buf[f"{bn_name}.run_var"]
            )
        h, cache[f"{bn_name}.lrelu"] = nn.leaky_relu_forward(h)
        return h

    h = x[:, None, :, :]
    for i, kf in enumerate(arch.freq_pools):
        h = conv_block(h, f"shared.conv{i}", f"shared.bn{i}")
        h, cache[f"shared.pool{i}"] = nn.max_pool2d_forward(h, 1, kf)
    shared_out = h
    cache["shared_shape"] = shared_out.shape

    if scene_branch:
        g = conv_block(shared_out, "scene.conv0", "scene.bn0")
        g, cache["scene.pool0"] = nn.max_pool2d_forward(g, arch.scene_time_pool, 1)
        g = conv_block(g, "scene.conv1", "scene.bn1")
        g, cache["scene.gmp"] = nn.global_max_pool_forward(g)
        g, cache["scene.fc0"] = nn.linear_forward(g, a["scene.fc0.w"], a["scene.fc0.b"])
        g, cache["scene.fc0.lrelu"] = nn.leaky_relu_forward(g)
        out.scene_logits, cache["scene.fc1"] = nn.linear_forward(
            g, a["scene.fc1.w"], a["scene.fc1.b"]
        )
        out.scene_probs, cache["scene.softmax"] = nn.softmax_forward(out.scene_logits)

    if event_branch:
        bsz, ch, t, fq = shared_out.shape
        feat = shared_out.transpose(0, 2, 1, 3).reshape(bsz, t, ch * fq)
        g, cache["event.bigru"] = nn.gru_bidirectional_forward(
            feat, _gru_params(params, "event.gru_f"), _gru_params(params, "event.gru_b")
        )
        e, cache["event.fc0"] = nn.linear_forward(g, a["event.fc0.w"], a["event.fc0.b"])
        e, cache["event.fc0.lrelu"] = nn.leaky_relu_forward(e)
        out.frame_logits, cache["event.fc1"] = nn.linear_forward(
            e, a["event.fc1.w"], a["event.fc1.b"]
        )
        out.frame_probs, cache["event.frame_sigmoid"] = nn.sigmoid_forward(out.frame_logits)
        if params.pooling is not None:
            attn_flat = None
            if params.pooling is PoolingKind.AT:
                out.attention_logits, cache["event.attn"] = nn.linear_forward(
                    g, a["event.attn.w"]
                )
                attn_flat = out.attention_logits.transpose(1, 0, 2).reshape(t, -1)
            logits_flat = out.frame_logits.transpose(1, 0, 2).reshape(t, -1)
            bag_flat, cache["event.pool"] = milpool.pool_forward(
                params.pooling, logits_flat, attn_flat
            )
            out.bag_logits = bag_flat.reshape(bsz, arch.n_events)
            out.bag_probs, cache["event.bag_sigmoid"] = nn.sigmoid_forward(out.bag_logits)

    return out, cache


def forward_single_task(params, features, task, mode="eval"):
    """Shared trunk plus only the requested branch: 'asc' or 'sed'."""
    if task not in ("asc", "sed"):
        raise InvalidConfig(f"task must be 'asc' or 'sed', got {task!r}")
    return forward(
        params,
        features,
        mode=mode,
        scene_branch=task == "asc",
        event_branch=task == "sed",
    )


def backward(params, cache, d_scene_probs=None, d_frame_probs=None, d_bag_probs=None):
    """Chain upstream probability gradients back to every reachable parameter.

    Returns a dict keyed like params.arrays, containing only the arrays
    touched by the supplied gradients.
    """
    a = params.arrays
    grads = {}

    def put(name, g):
        grads[name] = grads.get(name, 0) + g

    def conv_block_back(d, name, bn_name):
        d = nn.leaky_relu_backward(d, cache[f"{bn_name}.lrelu"])
        d, dgamma, dbeta = nn.batch_norm_backward(d, cache[bn_name])
        put(f"{bn_name}.gamma", dgamma)
        put(f"{bn_name}.beta", dbeta)
        d, dw, _ = nn.conv2d_backward(d, cache[name])
        put(f"{name}.w", dw)
        return d

    d_shared = None

    if d_scene_probs is not None:
        if not cache["scene"]:
            raise ShapeError("scene gradient supplied but scene branch was not run")
        d = nn.softmax_backward(d_scene_probs, cache["scene.softmax"])
        d, dw, db = nn.linear_backward(d, cache["scene.fc1"])
        put("scene.fc1.w", dw)
        put("scene.fc1.b", db)
        d = nn.leaky_relu_backward(d, cache["scene.fc0.lrelu"])
        d, dw, db = nn.linear_backward(d, cache["scene.fc0"])
        put("scene.fc0.w", dw)
        put("scene.fc0.b", db)
        d = nn.global_max_pool_backward(d, cache["scene.gmp"])
        d = conv_block_back(d, "scene.conv1", "scene.bn1")
        d = nn.max_pool2d_backward(d, cache["scene.pool0"])
        d = conv_block_back(d, "scene.conv0", "scene.bn0")
        d_shared = d

    if d_frame_probs is not None or d_bag_probs is not None:
        if not cache["event"]:
            raise ShapeError("event gradient supplied but event branch was not run")
        bsz, ch, t, fq = cache["shared_shape"]
        d_frame_logits = 0
        if d_frame_probs is not None:
            d_frame_logits = nn.sigmoid_backward(d_frame_probs, cache["event.frame_sigmoid"])
        d_attn = None
        if d_bag_probs is not None:
            d_bag_logits = nn.sigmoid_backward(d_bag_probs, cache["event.bag_sigmoid"])
            dx_flat, da_flat = milpool.pool_backward(
                d_bag_logits.reshape(-1), cache["event.pool"]
            )
            d_frame_logits = d_frame_logits + dx_flat.reshape(t, bsz, -1).transpose(1, 0, 2)
            if da_flat is not None:
                d_attn = da_flat.reshape(t, bsz, -1).transpose(1, 0, 2)
        d, dw, db = nn.linear_backward(d_frame_logits, cache["event.fc1"])
        put("event.fc1.w", dw)
        put("event.fc1.b", db)
        d = nn.leaky_relu_backward(d, cache["event.fc0.lrelu"])
        d_gru, dw, db = nn.linear_backward(d, cache["event.fc0"])
        put("event.fc0.w", dw)
        put("event.fc0.b", db)
        if d_attn is not None:
            d2, dw, _ = nn.linear_backward(d_attn, cache["event.attn"])
            put("event.attn.w", dw)
            d_gru = d_gru + d2
        dfeat, g_f, g_b = nn.gru_bidirectional_backward(d_gru, cache["event.bigru"])
        for name, (dwx, dwh, db3) in (("event.gru_f", g_f), ("event.gru_b", g_b)):
            put(f"{name}.w_x", dwx)
            put(f"{name}.w_h", dwh)
            put(f"{name}.b", db3)
        d_ev = dfeat.reshape(bsz, t, ch, fq).transpose(0, 2, 1, 3)
        d_shared = d_ev if d_shared is None else d_shared + d_ev

    if d_shared is not None:
        d = d_shared
        for i in reversed(range(len(params.arch.freq_pools))):
            d = nn.max_pool2d_backward(d, cache[f"shared.pool{i}"])
            d = conv_block_back(d, f"shared.conv{i}", f"shared.bn{i}")

    return grads


# ---------------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(path, params: ModelParams) -> None:
    """Binary checkpoint: magic MTLW, version, JSON header, f32 arrays."""
    header = {
        "version": CKPT_VERSION,
        "arch": asdict(params.arch),
        "pooling": params.pooling.value if params.pooling is not None else None,
        "params": [[k, list(v.shape)] for k, v in params.arrays.items()],
        "buffers": [[k, list(v.shape)] for k, v in params.buffers.items()],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for v in params.arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
        for v in params.buffers.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    if not path.exists():
        raise IoError(f"no such checkpoint: {path}")
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12:
            raise ParseError(f"{path}: truncated checkpoint header")
        magic, version, hlen = struct.unpack("<4sII", head)
        if magic != CKPT_MAGIC:
            raise ParseError(f"{path}: bad magic {magic!r}")
        if version != CKPT_VERSION:
            raise ParseError(f"{path}: unsupported version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arch_dict = dict(header["arch"])
        arch_dict["freq_pools"] = tuple(arch_dict["freq_pools"])
        arch = ArchConfig(**arch_dict)
        pooling = header["pooling"]
        if pooling is not None:
            pooling = PoolingKind.parse(pooling)

        def read_group(entries):
            group = {}
            for name, shape in entries:
                count = int(np.prod(shape)) if shape else 1
                raw = fh.read(4 * count)
                if len(raw) != 4 * count:
                    raise ParseError(f"{path}: truncated array {name}")
                group[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            return group

        arrays = read_group(header["params"])
        buffers = read_group(header["buffers"])
    return ModelParams(arch, pooling, arrays, buffers)
