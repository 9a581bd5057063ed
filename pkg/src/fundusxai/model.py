"""Tiny shared-backbone multi-task CNN with exact manual gradients.

Architecture: three conv blocks (3x3 conv, stride 1, pad 1 -> ReLU -> 2x2
max-pool) with channels (8, 16, 32), global average pool to a 32-d shared
embedding, and one head per task (linear -> batch-norm -> ReLU -> dropout ->
linear) producing a scalar logit passed through a sigmoid.

Everything is float64 numpy. Forward caches every intermediate needed for an
exact reverse pass; the backward pass is hand-derived and validated against
central finite differences. The final pooled conv feature maps (the "F"
tensor feeding global average pooling) and their per-task logit gradients
are exposed for attention mapping.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, asdict

import numpy as np

TASKS = ("hba1c", "kidney", "multi")

CHECKPOINT_VERSION = 1


class BatchTooSmallForBN(ValueError):
    """Train-mode batch statistics need at least 2 samples."""


class StaleCache(ValueError):
    """Forward cache does not match the current model configuration."""


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 3
    conv_channels: tuple[int, int, int] = (8, 16, 32)
    head_hidden: int = 16
    dropout: float = 0.4
    num_tasks: int = 3
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if len(self.conv_channels) != 3:
            raise ValueError("expected exactly 3 conv blocks")

    @property
    def embed_dim(self) -> int:
        return self.conv_channels[-1]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, C*9, H*W) patches for a 3x3/stride-1/pad-1 conv."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    # (B, C, H, W, 3, 3) -> (B, C, 3, 3, H, W) -> (B, C*9, H*W)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * 9, h * w)


def _conv_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray,
                  patches: np.ndarray | None = None):
    b, _, h, width = x.shape
    cout = w.shape[0]
    if patches is None:
        patches = _im2col(x)
    out = np.matmul(w.reshape(cout, -1), patches)
    out += bias[:, None]
    return out.reshape(b, cout, h, width), patches


def _conv_backward(patches: np.ndarray, w: np.ndarray, dout: np.ndarray):
    """Gradients from the cached forward patches; dout is (B, Cout, H, W)."""
    b, cout, h, width = dout.shape
    cin = w.shape[1]
    dout_m = dout.reshape(b, cout, h * width)
    dw = np.matmul(dout_m, patches.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = dout_m.sum(axis=(0, 2))
    # input gradient accumulated shift-by-shift: cheaper than an im2col of dout
    dxp = np.zeros((b, cin, h + 2, width + 2))
    for di in range(3):
        for dj in range(3):
            contrib = np.matmul(w[:, :, di, dj].T, dout_m).reshape(b, cin, h, width)
            dxp[:, :, di : di + h, dj : dj + width] += contrib
    return dxp[:, :, 1 : h + 1, 1 : width + 1], dw, db


def _pool_windows(x: np.ndarray):
    # the four corners of each 2x2 window as strided views, order (0,0),(0,1),(1,0),(1,1)
    return (x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2],
            x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2])


def _pool_forward(x: np.ndarray):
    a, b_, c, d = _pool_windows(x)
    out = np.maximum(np.maximum(a, b_), np.maximum(c, d))
    # first-occurrence argmax in window order, ties resolved to the earliest slot
    idx = np.where(a == out, 0, np.where(b_ == out, 1, np.where(c == out, 2, 3)))
    return out, idx.astype(np.int8)


def _pool_backward(dout: np.ndarray, idx: np.ndarray, in_shape):
    dx = np.zeros(in_shape)
    for k, view in enumerate(_pool_windows(dx)):
        view += dout * (idx == k)
    return dx


class MultiTaskCNN:
    """Shared conv backbone with one small head per task.

    Holds parameters, batch-norm running statistics, a train/eval mode flag
    and the dropout RNG stream. ``forward`` in train mode mutates the running
    statistics and consumes dropout draws; eval mode is a pure function of
    (parameters, input).
    """

    def __init__(self, config: NetConfig, params: dict, buffers: dict, seed: int = 0):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.training = False
        self._dropout_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0]))

    # -- construction ------------------------------------------------------

    @classmethod
    def init(cls, config: NetConfig = NetConfig(), seed: int = 0) -> "MultiTaskCNN":
        """He-uniform weights, zero biases, neutral batch-norm, per-seed deterministic."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1]))
        params: dict[str, np.ndarray] = {}
        buffers: dict[str, np.ndarray] = {}

        def he_uniform(shape, fan_in):
            bound = np.sqrt(6.0 / fan_in)
            return rng.uniform(-bound, bound, size=shape)

        cin = config.in_channels
        for i, cout in enumerate(config.conv_channels, start=1):
            params[f"conv{i}.w"] = he_uniform((cout, cin, 3, 3), cin * 9)
            params[f"conv{i}.b"] = np.zeros(cout)
            cin = cout
        d, hdim = config.embed_dim, config.head_hidden
        for task in TASKS[: config.num_tasks]:
            params[f"head_{task}.fc.w"] = he_uniform((hdim, d), d)
            params[f"head_{task}.fc.b"] = np.zeros(hdim)
            params[f"head_{task}.bn.gamma"] = np.ones(hdim)
            params[f"head_{task}.bn.beta"] = np.zeros(hdim)
            params[f"head_{task}.out.w"] = he_uniform((hdim,), hdim)
            params[f"head_{task}.out.b"] = np.zeros(1)
            buffers[f"head_{task}.bn.running_mean"] = np.zeros(hdim)
            buffers[f"head_{task}.bn.running_var"] = np.ones(hdim)
        return cls(config, params, buffers, seed=seed)

    def clone(self) -> "MultiTaskCNN":
        other = MultiTaskCNN(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )
        other.training = self.training
        return other

    def train(self) -> "MultiTaskCNN":
        self.training = True
        return self

    def eval(self) -> "MultiTaskCNN":
        self.training = False
        return self

    def seed_dropout(self, seed: int) -> None:
        self._dropout_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD0]))

    @property
    def tasks(self) -> tuple[str, ...]:
        return TASKS[: self.config.num_tasks]

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    # -- forward -----------------------------------------------------------

    def forward(self, x: np.ndarray):
        """Run the network on a (B, 3, H, W) batch.

        Returns ``(cache, probs)`` with probs of shape (B, num_tasks). H and W
        must be divisible by 8. Train mode requires B >= 2 for batch norm.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (B, {self.config.in_channels}, H, W), got {x.shape}")
        b, _, h, w = x.shape
        if h % 8 or w % 8:
            raise ValueError(f"input H, W must be divisible by 8, got {h}x{w}")
        if self.training and b < 2:
            raise BatchTooSmallForBN("train-mode batch norm needs batch size >= 2")

        cache: dict = {"training": self.training, "input": x, "blocks": [], "heads": {}}
        cur = x
        for i in range(1, 4):
            pre, patches = _conv_forward(cur, self.params[f"conv{i}.w"],
                                         self.params[f"conv{i}.b"])
            act = np.maximum(pre, 0.0)
            pooled, idx = _pool_forward(act)
            cache["blocks"].append({"patches": patches, "pre": pre, "pool_idx": idx,
                                    "act_shape": act.shape})
            cur = pooled
        feat = cur                       # (B, embed_dim, H/8, W/8)
        emb = feat.mean(axis=(2, 3))     # global average pool
        cache["feat"] = feat
        cache["emb"] = emb

        eps = self.config.bn_eps
        mom = self.config.bn_momentum
        keep = 1.0 - self.config.dropout
        logits = np.empty((b, self.config.num_tasks))
        for t, task in enumerate(self.tasks):
            p = self.params
            a1 = emb @ p[f"head_{task}.fc.w"].T + p[f"head_{task}.fc.b"]
            if self.training:
                mu = a1.mean(axis=0)
                var = a1.var(axis=0)
                rm, rv = self.buffers[f"head_{task}.bn.running_mean"], \
                    self.buffers[f"head_{task}.bn.running_var"]
                self.buffers[f"head_{task}.bn.running_mean"] = (1 - mom) * rm + mom * mu
                self.buffers[f"head_{task}.bn.running_var"] = \
                    (1 - mom) * rv + mom * var * b / (b - 1)
            else:
                mu = self.buffers[f"head_{task}.bn.running_mean"]
                var = self.buffers[f"head_{task}.bn.running_var"]
            ivar = 1.0 / np.sqrt(var + eps)
            xhat = (a1 - mu) * ivar
            y = p[f"head_{task}.bn.gamma"] * xhat + p[f"head_{task}.bn.beta"]
            r = np.maximum(y, 0.0)
            if self.training and self.config.dropout > 0.0:
                mask = (self._dropout_rng.random(r.shape) < keep) / keep
            else:
                mask = None
            d = r * mask if mask is not None else r
            z = d @ p[f"head_{task}.out.w"] + p[f"head_{task}.out.b"][0]
            logits[:, t] = z
            cache["heads"][task] = {"a1": a1, "xhat": xhat, "ivar": ivar, "y": y,
                                    "drop_mask": mask, "d": d}
        cache["logits"] = logits
        return cache, _sigmoid(logits)

    # -- backward ----------------------------------------------------------

    def _head_backward(self, task: str, cache: dict, dz: np.ndarray, grads: dict | None):
        """Backprop one head from dL/dz down to dL/d(embedding).

        When ``grads`` is None only the embedding gradient is returned (used
        for attention maps); otherwise head parameter gradients are filled in.
        """
        hc = cache["heads"][task]
        p = self.params
        dd = dz[:, None] * p[f"head_{task}.out.w"][None, :]
        if grads is not None:
            grads[f"head_{task}.out.w"] = hc["d"].T @ dz
            grads[f"head_{task}.out.b"] = np.array([dz.sum()])
        dr = dd * hc["drop_mask"] if hc["drop_mask"] is not None else dd
        dy = dr * (hc["y"] > 0)
        if grads is not None:
            grads[f"head_{task}.bn.gamma"] = (dy * hc["xhat"]).sum(axis=0)
            grads[f"head_{task}.bn.beta"] = dy.sum(axis=0)
        dxhat = dy * p[f"head_{task}.bn.gamma"]
        if cache["training"]:
            b = dxhat.shape[0]
            xhat = hc["xhat"]
            da1 = hc["ivar"] / b * (
                b * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            da1 = dxhat * hc["ivar"]
        if grads is not None:
            grads[f"head_{task}.fc.w"] = da1.T @ cache["emb"]
            grads[f"head_{task}.fc.b"] = da1.sum(axis=0)
        return da1 @ p[f"head_{task}.fc.w"]

    def backward(self, cache: dict, dlogits: np.ndarray) -> dict:
        """Exact gradients of a scalar loss w.r.t. every parameter.

        ``dlogits`` is dL/dz of shape (B, num_tasks) for the cached forward.
        """
        dlogits = np.asarray(dlogits, dtype=np.float64)
        if dlogits.shape != cache["logits"].shape:
            raise StaleCache(
                f"dlogits shape {dlogits.shape} does not match cache {cache['logits'].shape}")
        if cache["emb"].shape[1] != self.config.embed_dim:
            raise StaleCache("cache embedding width does not match model config")

        grads: dict[str, np.ndarray] = {}
        demb = np.zeros_like(cache["emb"])
        for t, task in enumerate(self.tasks):
            demb += self._head_backward(task, cache, dlogits[:, t], grads)

        feat = cache["feat"]
        _, _, fh, fw = feat.shape
        dcur = np.broadcast_to(demb[:, :, None, None] / (fh * fw), feat.shape).copy()
        for i in range(3, 0, -1):
            blk = cache["blocks"][i - 1]
            dact = _pool_backward(dcur, blk["pool_idx"], blk["act_shape"])
            dpre = dact * (blk["pre"] > 0)
            dcur, dw, db = _conv_backward(blk["patches"], self.params[f"conv{i}.w"], dpre)
            grads[f"conv{i}.w"] = dw
            grads[f"conv{i}.b"] = db
        return grads

    def feature_gradient(self, cache: dict, task: str) -> np.ndarray:
        """d(logit_task)/d(final pooled feature maps), other heads detached."""
        if task not in self.tasks:
            raise ValueError(f"unknown task {task!r}")
        b = cache["logits"].shape[0]
        demb = self._head_backward(task, cache, np.ones(b), grads=None)
        fh, fw = cache["feat"].shape[2:]
        return np.broadcast_to(demb[:, :, None, None] / (fh * fw), cache["feat"].shape).copy()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: MultiTaskCNN) -> None:
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays.update({f"buffer/{k}": v for k, v in model.buffers.items()})
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(model.config)}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> MultiTaskCNN:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        cfg_dict = meta["config"]
        cfg_dict["conv_channels"] = tuple(cfg_dict["conv_channels"])
        config = NetConfig(**cfg_dict)
        params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
        buffers = {k[len("buffer/"):]: data[k] for k in data.files if k.startswith("buffer/")}
    reference = MultiTaskCNN.init(config, seed=0)
    for k, ref in reference.params.items():
        if k not in params or params[k].shape != ref.shape:
            raise ValueError(f"checkpoint parameter {k!r} missing or wrong shape")
    for k, ref in reference.buffers.items():
        if k not in buffers or buffers[k].shape != ref.shape:
            raise ValueError(f"checkpoint buffer {k!r} missing or wrong shape")
    return MultiTaskCNN(config, params, buffers)


def checkpoint_bytes(model: MultiTaskCNN) -> bytes:
    buf = io.BytesIO()
    arrays = {f"param/{k}": v for k, v in model.params.items()}
    arrays.update({f"buffer/{k}": v for k, v in model.buffers.items()})
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(model.config)}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(buf, **arrays)
    return buf.getvalue()
