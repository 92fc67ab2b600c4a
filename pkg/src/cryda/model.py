"""Small CNN encoder plus feed-forward classifier, Adam, and checkpoints.

The default freeze policy keeps convolution kernels at their seeded
initialization and trains only the batch-norm affine parameters of the
encoder together with the classifier.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import BNState, Tensor

BN_POLICIES = {"train-stats": "train", "eval-stats": "eval", "stats-only-adapt": "stats-only"}

CHECKPOINT_MAGIC = b"CRYDACKP"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    n_blocks: int = 4
    channels: tuple = (16, 32, 64, 128)
    kernel_size: int = 3
    pool: int = 2
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != self.n_blocks:
            raise ValueError(f"{self.n_blocks} blocks but {len(self.channels)} channel counts")
        if self.embedding_dim < 8:
            raise ValueError(f"embedding dim must be >= 8, got {self.embedding_dim}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")

    @property
    def embedding_dim(self) -> int:
        return self.channels[-1]


@dataclass
class ModelState:
    cfg: EncoderConfig
    n_classes: int
    params: dict
    bn: dict
    frozen: dict
    heads: tuple = ("cls",)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_t: dict = field(default_factory=dict)
    step: int = 0
    bn_policy: str = "train-stats"

    def trainable(self) -> list:
        return [n for n in self.params if not self.frozen[n]]

    def is_classifier(self, name: str) -> bool:
        return name.split(".")[0] in self.heads

    def n_trainable(self) -> int:
        return int(sum(self.params[n].data.size for n in self.trainable()))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict:
        return {n: t.grad for n, t in self.params.items() if t.grad is not None}

    def clone(self) -> "ModelState":
        return copy.deepcopy(self)


def _block_names(i: int) -> tuple:
    return f"enc{i}.conv", f"enc{i}.bn"


def init_model(cfg: EncoderConfig, n_classes: int, seed: int, heads: tuple = ("cls",),
               bn_momentum: float = 0.1, bn_eps: float = 1e-5) -> ModelState:
    """Seeded He-style initialization.

    All classifier heads start from the same weights, so a symmetric pair of
    heads produces identical logits until training separates them.
    """
    rng = np.random.default_rng([seed, 1701])
    params: dict = {}
    bn: dict = {}
    c_in = cfg.in_channels
    ks = cfg.kernel_size
    for i, c_out in enumerate(cfg.channels):
        conv_name, bn_name = _block_names(i)
        fan_in = c_in * ks * ks
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, ks, ks)).astype(np.float32)
        params[conv_name] = Tensor(w, requires_grad=True, name=conv_name)
        state = BNState.create(c_out, momentum=bn_momentum, eps=bn_eps)
        state.gamma.name, state.beta.name = f"{bn_name}.gamma", f"{bn_name}.beta"
        params[f"{bn_name}.gamma"] = state.gamma
        params[f"{bn_name}.beta"] = state.beta
        bn[bn_name] = state
        c_in = c_out
    D = cfg.embedding_dim
    w = rng.normal(0.0, np.sqrt(2.0 / D), size=(D, n_classes)).astype(np.float32)
    for h in heads:
        params[f"{h}.w"] = Tensor(w.copy(), requires_grad=True, name=f"{h}.w")
        params[f"{h}.b"] = Tensor(np.zeros(n_classes, np.float32), requires_grad=True, name=f"{h}.b")
    state = ModelState(cfg=cfg, n_classes=n_classes, params=params, bn=bn, frozen={}, heads=tuple(heads))
    for n in params:
        set_frozen(state, n, n.endswith(".conv"))
    return state


def set_frozen(state: ModelState, name: str, frozen: bool) -> None:
    """Freeze or unfreeze one parameter; frozen tensors also stop collecting gradients."""
    state.frozen[name] = bool(frozen)
    state.params[name].requires_grad = not frozen


def set_bn_policy(state: ModelState, policy: str) -> ModelState:
    if policy not in BN_POLICIES:
        raise ValueError(f"unknown BN policy {policy!r}; choose from {sorted(BN_POLICIES)}")
    state.bn_policy = policy
    return state


def set_bn_momentum(state: ModelState, momentum: float) -> None:
    for s in state.bn.values():
        s.momentum = momentum


def _as_input(features) -> Tensor:
    if isinstance(features, Tensor):
        x = features
    else:
        arr = np.asarray(features)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float32, copy=False)
        x = Tensor(arr)
    if x.ndim == 3:
        x = Tensor(x.data[:, None])
    return x


def encode(state: ModelState, features, mode: Optional[str] = None) -> Tensor:
    """Embedding ``[B,D]``: the globally mean-pooled output of the last block."""
    mode = mode or BN_POLICIES[state.bn_policy]
    x = _as_input(features)
    if x.ndim != 4 or x.shape[1] != state.cfg.in_channels:
        raise ad.DimensionError(f"encoder expects [B,{state.cfg.in_channels},T,M] features, got {x.shape}")
    x = Tensor(np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)))
    pad = state.cfg.kernel_size // 2
    for i in range(state.cfg.n_blocks):
        conv_name, bn_name = _block_names(i)
        x = ad.conv2d(x, state.params[conv_name], stride=1, padding=pad, channels_last=True)
        x = ad.batchnorm(x, state.bn[bn_name], mode, channels_last=True)
        x = ad.relu(x)
        x = ad.max_pool2d(x, state.cfg.pool, channels_last=True)
    return ad.global_mean_pool(x, channels_last=True)


def head_logits(state: ModelState, emb: Tensor, head: str = "cls") -> Tensor:
    return ad.linear(emb, state.params[f"{head}.w"], state.params[f"{head}.b"])


def forward(state: ModelState, features, mode: Optional[str] = None, head: str = "cls"):
    emb = encode(state, features, mode)
    return emb, head_logits(state, emb, head)


def predict_proba(state: ModelState, features, batch_size: int = 64) -> np.ndarray:
    """Eval-mode class posteriors; with several heads, their own-softmax average."""
    out = []
    for i in range(0, len(features), batch_size):
        with ad.Graph():
            emb = encode(state, features[i : i + batch_size], "eval")
            probs = [ad.softmax(head_logits(state, emb, h)).data for h in state.heads]
        out.append(np.mean(probs, axis=0))
    return np.concatenate(out, axis=0) if out else np.zeros((0, state.n_classes), np.float32)


def embed(state: ModelState, features, batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(features), batch_size):
        with ad.Graph():
            out.append(encode(state, features[i : i + batch_size], "eval").data)
    return np.concatenate(out, axis=0)


def adam_step(state: ModelState, grads: dict, lr_backbone: float, lr_classifier: float,
              names=None, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ModelState:
    """Bias-corrected Adam on trainable parameters (optionally a subset ``names``)."""
    targets = [n for n in state.trainable() if names is None or n in names]
    missing = [n for n in targets if grads.get(n) is None]
    if missing:
        raise ad.ContractError(f"no gradient for trainable parameters: {missing}")
    for n in targets:
        p = state.params[n]
        g = np.asarray(grads[n], dtype=np.float32)
        t = state.adam_t.get(n, 0) + 1
        m = beta1 * state.adam_m.get(n, np.zeros_like(g)) + (1 - beta1) * g
        v = beta2 * state.adam_v.get(n, np.zeros_like(g)) + (1 - beta2) * g * g
        m, v = m.astype(np.float32), v.astype(np.float32)
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        lr = lr_classifier if state.is_classifier(n) else lr_backbone
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + eps)).astype(np.float32)
        state.adam_m[n], state.adam_v[n], state.adam_t[n] = m, v, t
    state.step += 1
    return state


def param_digest(state: ModelState, include_running: bool = False) -> str:
    h = hashlib.sha256()
    for n in sorted(state.params):
        h.update(n.encode())
        h.update(np.ascontiguousarray(state.params[n].data).tobytes())
    if include_running:
        for n in sorted(state.bn):
            h.update(state.bn[n].running_mean.tobytes())
            h.update(state.bn[n].running_var.tobytes())
    return h.hexdigest()


def load_weights_from(dst: ModelState, src: ModelState) -> None:
    """Copy parameter values and running statistics (not optimizer moments)."""
    for n, t in src.params.items():
        dst.params[n].data = t.data.copy()
    for n, s in src.bn.items():
        dst.bn[n].running_mean = s.running_mean.copy()
        dst.bn[n].running_var = s.running_var.copy()


# ---------------------------------------------------------------- checkpoints


def _arrays(state: ModelState) -> list:
    items = [(f"param/{n}", t.data) for n, t in state.params.items()]
    for n, s in state.bn.items():
        items += [(f"running_mean/{n}", s.running_mean), (f"running_var/{n}", s.running_var)]
    for n in state.adam_m:
        items += [(f"adam_m/{n}", state.adam_m[n]), (f"adam_v/{n}", state.adam_v[n])]
    return items


def save_checkpoint(state: ModelState, path) -> None:
    """Write magic, version, a JSON header with shapes, then float32 LE payload."""
    arrays = _arrays(state)
    header = {
        "encoder": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(state.cfg).items()},
        "n_classes": state.n_classes,
        "heads": list(state.heads),
        "frozen": state.frozen,
        "adam_t": state.adam_t,
        "step": state.step,
        "bn_policy": state.bn_policy,
        "bn": {n: {"momentum": s.momentum, "eps": s.eps} for n, s in state.bn.items()},
        "arrays": [[name, list(a.shape)] for name, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in arrays)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)


def load_checkpoint(path) -> ModelState:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: corrupt checkpoint (truncated header)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
        (plen,) = struct.unpack("<Q", raw[16 + hlen : 24 + hlen])
    except (ValueError, struct.error) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header") from exc
    payload = raw[24 + hlen :]
    if len(payload) != plen:
        raise CheckpointError(f"{path}: corrupt checkpoint (payload {len(payload)} of {plen} bytes)")

    enc = header["encoder"]
    cfg = EncoderConfig(**enc)
    state = init_model(cfg, header["n_classes"], seed=0, heads=tuple(header["heads"]))
    arrays = {}
    offset = 0
    for name, shape in header["arrays"]:
        n = int(np.prod(shape)) * 4
        if offset + n > len(payload):
            raise CheckpointError(f"{path}: corrupt checkpoint (array {name} truncated)")
        arrays[name] = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=offset).reshape(shape).astype(np.float32)
        offset += n
    for name, arr in arrays.items():
        kind, key = name.split("/", 1)
        if kind == "param":
            state.params[key].data = arr
        elif kind == "running_mean":
            state.bn[key].running_mean = arr
        elif kind == "running_var":
            state.bn[key].running_var = arr
        elif kind == "adam_m":
            state.adam_m[key] = arr
        elif kind == "adam_v":
            state.adam_v[key] = arr
    for n, s in header["bn"].items():
        state.bn[n].momentum, state.bn[n].eps = s["momentum"], s["eps"]
    for n, fz in header["frozen"].items():
        set_frozen(state, n, fz)
    state.adam_t = {k: int(v) for k, v in header["adam_t"].items()}
    state.step = int(header["step"])
    state.bn_policy = header["bn_policy"]
    return state
