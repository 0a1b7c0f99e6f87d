"""U-shaped point-transformer segmentation network with exact reverse-mode
gradients, written directly against numpy.

Each encoder stage runs grouped vector attention over every point's k
nearest neighbors: attention logits come from an elementwise MLP on
(query - key + positional encoding of the relative coordinates), are
softmax-normalized over the neighborhood per 8-channel group, and weight
(value + positional encoding). Stages are separated by grid pooling (voxel
mean of features and positions). The decoder unpools by voxel membership,
fuses with the stage's skip connection through a linear+ReLU layer, and a
linear head emits per-point class logits.

Double precision throughout; backward returns gradients for every
parameter and is validated against central finite differences.
"""

from __future__ import annotations

import io
import json
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .sampling import knn, voxel_ids

GROUP_CHANNELS = 8

_CKPT_MAGIC = b"SSCKPT\x00"
_CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    input_channels: int = 3
    stage_widths: tuple[int, ...] = (32, 64)
    k_neighbors: int = 8
    pool_voxel_sizes: tuple[float, ...] = (0.05, 0.10)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "pool_voxel_sizes",
                          tuple(float(v) for v in self.pool_voxel_sizes))
        if self.num_classes < 1 or self.input_channels < 1 or self.k_neighbors < 1:
            raise ValueError("counts must be positive")
        if not self.stage_widths or len(self.stage_widths) != len(self.pool_voxel_sizes):
            raise ValueError("need one pool voxel size per encoder stage")
        for w in self.stage_widths:
            if w <= 0 or w % GROUP_CHANNELS:
                raise ValueError(f"stage widths must be positive multiples of {GROUP_CHANNELS}")
        if any(b <= a for a, b in zip(self.pool_voxel_sizes, self.pool_voxel_sizes[1:])) \
                or self.pool_voxel_sizes[0] <= 0:
            raise ValueError("pool voxel sizes must be positive and strictly increasing")

    def to_dict(self) -> dict:
        return {"num_classes": self.num_classes, "input_channels": self.input_channels,
                "stage_widths": list(self.stage_widths), "k_neighbors": self.k_neighbors,
                "pool_voxel_sizes": list(self.pool_voxel_sizes), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(num_classes=d["num_classes"], input_channels=d["input_channels"],
                   stage_widths=tuple(d["stage_widths"]), k_neighbors=d["k_neighbors"],
                   pool_voxel_sizes=tuple(d["pool_voxel_sizes"]), seed=d["seed"])


@dataclass
class Model:
    params: dict[str, np.ndarray]
    config: ModelConfig
    label_space: str = ""
    step: int = 0

    def with_params(self, params: dict[str, np.ndarray]) -> "Model":
        return Model(params=params, config=self.config,
                     label_space=self.label_space, step=self.step)


def _head_fan_in(cfg: ModelConfig) -> int:
    return cfg.stage_widths[0]


def _up_width(cfg: ModelConfig, level: int) -> int:
    return cfg.stage_widths[min(level + 1, len(cfg.stage_widths) - 1)]


def _param_specs(cfg: ModelConfig):
    """(name, shape, fan_in) in fixed definition order; fan_in None = zero init."""
    specs = []
    c_in = cfg.input_channels
    for i, w in enumerate(cfg.stage_widths):
        g = w // GROUP_CHANNELS
        p = f"enc{i}."
        for qkv in ("wq", "wk", "wv"):
            specs.append((p + qkv, (c_in, w), c_in))
            specs.append((p + "b" + qkv[1], (w,), None))
        specs += [
            (p + "pos_w1", (3, w), 3), (p + "pos_b1", (w,), None),
            (p + "pos_w2", (w, w), w), (p + "pos_b2", (w,), None),
            (p + "attn_w1", (w, w), w), (p + "attn_b1", (w,), None),
            (p + "attn_w2", (w, g), w), (p + "attn_b2", (g,), None),
        ]
        c_in = w
    for i in range(len(cfg.stage_widths) - 1, -1, -1):
        w = cfg.stage_widths[i]
        specs.append((f"dec{i}.fuse_w", (_up_width(cfg, i) + w, w), _up_width(cfg, i) + w))
        specs.append((f"dec{i}.fuse_b", (w,), None))
    specs.append(("head.w", (_head_fan_in(cfg), cfg.num_classes), _head_fan_in(cfg)))
    specs.append(("head.b", (cfg.num_classes,), None))
    return specs


def _init_tensor(rng, shape, fan_in):
    if fan_in is None:
        return np.zeros(shape)
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_model(cfg: ModelConfig) -> Model:
    """Deterministically initialized model: uniform +-1/sqrt(fan_in), biases zero."""
    rng = np.random.default_rng(cfg.seed)
    params = {name: _init_tensor(rng, shape, fan)
              for name, shape, fan in _param_specs(cfg)}
    return Model(params=params, config=cfg)


def reinit_head(model: Model, new_num_classes: int, seed: int) -> Model:
    """Fresh seeded head for a new class count; backbone bits untouched."""
    if new_num_classes < 1:
        raise ValueError("new_num_classes must be >= 1")
    cfg = replace(model.config, num_classes=new_num_classes)
    rng = np.random.default_rng(seed)
    params = {k: v for k, v in model.params.items() if not k.startswith("head.")}
    params["head.w"] = _init_tensor(rng, (_head_fan_in(cfg), new_num_classes), _head_fan_in(cfg))
    params["head.b"] = np.zeros(new_num_classes)
    return Model(params=params, config=cfg, label_space=model.label_space, step=model.step)


# ---------------------------------------------------------------------------
# Pooling helpers. Segment means run over a content-canonical point order
# (voxel id, then coordinates), so forward results are bit-identical under
# input permutation for clouds without exactly coincident points.

def _pool_plan(X: np.ndarray, voxel: float):
    ids = voxel_ids(X, voxel)
    order = np.lexsort((X[:, 2], X[:, 1], X[:, 0], ids))
    ids_sorted = ids[order]
    first = np.ones(len(ids), dtype=bool)
    first[1:] = ids_sorted[1:] != ids_sorted[:-1]
    starts = np.flatnonzero(first)
    counts = np.diff(np.append(starts, len(ids)))
    return {"ids": ids, "order": order, "starts": starts, "counts": counts}


def _segment_mean(plan, values: np.ndarray) -> np.ndarray:
    s = np.add.reduceat(values[plan["order"]], plan["starts"], axis=0)
    return s / plan["counts"][:, None]


def _segment_sum(plan, values: np.ndarray) -> np.ndarray:
    return np.add.reduceat(values[plan["order"]], plan["starts"], axis=0)


def _relu(x):
    return np.maximum(x, 0.0)


def _attention_forward(params, prefix, X, F, k):
    p = params
    idx = knn(X, k=min(k, len(X)), include_self=True)
    Q = F @ p[prefix + "wq"] + p[prefix + "bq"]
    K = F @ p[prefix + "wk"] + p[prefix + "bk"]
    V = F @ p[prefix + "wv"] + p[prefix + "bv"]
    rel = X[idx] - X[:, None, :]
    H1 = rel @ p[prefix + "pos_w1"] + p[prefix + "pos_b1"]
    Hr = _relu(H1)
    P = Hr @ p[prefix + "pos_w2"] + p[prefix + "pos_b2"]
    A = Q[:, None, :] - K[idx] + P
    B1 = A @ p[prefix + "attn_w1"] + p[prefix + "attn_b1"]
    Br = _relu(B1)
    L = Br @ p[prefix + "attn_w2"] + p[prefix + "attn_b2"]
    Lm = L - L.max(axis=1, keepdims=True)
    E = np.exp(Lm)
    S = E / E.sum(axis=1, keepdims=True)           # (n, k, groups)
    M = V[idx] + P
    n, kk, w = M.shape
    Mg = M.reshape(n, kk, w // GROUP_CHANNELS, GROUP_CHANNELS)
    O = np.einsum("nkg,nkgc->ngc", S, Mg).reshape(n, w)
    return O, {"idx": idx, "F": F, "rel": rel, "H1": H1, "Hr": Hr, "A": A,
               "B1": B1, "Br": Br, "S": S, "Mg": Mg, "n": n, "k": kk, "w": w}


def _attention_backward(params, prefix, cache, dO, grads):
    p = params
    n, k, w = cache["n"], cache["k"], cache["w"]
    g = w // GROUP_CHANNELS
    idx, F = cache["idx"], cache["F"]
    S, Mg = cache["S"], cache["Mg"]

    dOg = dO.reshape(n, g, GROUP_CHANNELS)
    dS = np.einsum("ngc,nkgc->nkg", dOg, Mg)
    dMg = np.einsum("nkg,ngc->nkgc", S, dOg)
    dM = dMg.reshape(n, k, w)

    inner = (S * dS).sum(axis=1, keepdims=True)
    dL = S * (dS - inner)

    Br, B1, A = cache["Br"], cache["B1"], cache["A"]
    grads[prefix + "attn_w2"] = np.einsum("nkw,nkg->wg", Br, dL)
    grads[prefix + "attn_b2"] = dL.sum(axis=(0, 1))
    dBr = dL @ p[prefix + "attn_w2"].T
    dB1 = dBr * (B1 > 0)
    grads[prefix + "attn_w1"] = np.einsum("nkw,nkv->wv", A, dB1)
    grads[prefix + "attn_b1"] = dB1.sum(axis=(0, 1))
    dA = dB1 @ p[prefix + "attn_w1"].T

    dQ = dA.sum(axis=1)
    dK = np.zeros((n, w))
    np.add.at(dK, idx, -dA)
    dP = dA + dM
    dV = np.zeros((n, w))
    np.add.at(dV, idx, dM)

    Hr, H1, rel = cache["Hr"], cache["H1"], cache["rel"]
    grads[prefix + "pos_w2"] = np.einsum("nkw,nkv->wv", Hr, dP)
    grads[prefix + "pos_b2"] = dP.sum(axis=(0, 1))
    dHr = dP @ p[prefix + "pos_w2"].T
    dH1 = dHr * (H1 > 0)
    grads[prefix + "pos_w1"] = np.einsum("nkt,nkw->tw", rel, dH1)
    grads[prefix + "pos_b1"] = dH1.sum(axis=(0, 1))

    grads[prefix + "wq"] = F.T @ dQ
    grads[prefix + "bq"] = dQ.sum(axis=0)
    grads[prefix + "wk"] = F.T @ dK
    grads[prefix + "bk"] = dK.sum(axis=0)
    grads[prefix + "wv"] = F.T @ dV
    grads[prefix + "bv"] = dV.sum(axis=0)
    return dQ @ p[prefix + "wq"].T + dK @ p[prefix + "wk"].T + dV @ p[prefix + "wv"].T


def _run(model: Model, positions, features, want_cache: bool):
    cfg = model.config
    X = np.ascontiguousarray(positions, dtype=np.float64)
    F = np.ascontiguousarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 3 or F.shape[0] != X.shape[0]:
        raise ValueError("positions must be (n, 3) with matching feature rows")
    if F.ndim != 2 or F.shape[1] != cfg.input_channels:
        raise ValueError(f"expected {cfg.input_channels} feature channels, got {F.shape}")
    if len(X) < cfg.k_neighbors:
        raise ValueError(f"need at least k_neighbors={cfg.k_neighbors} points, got {len(X)}")

    S = len(cfg.stage_widths)
    caches = []
    skips = []
    plans = []
    cur_X, cur_F = X, F
    for i in range(S):
        O, cache = _attention_forward(model.params, f"enc{i}.", cur_X, cur_F,
                                      cfg.k_neighbors)
        skips.append(O)
        caches.append(cache)
        plan = _pool_plan(cur_X, cfg.pool_voxel_sizes[i])
        plans.append(plan)
        cur_X = _segment_mean(plan, cur_X)
        cur_F = _segment_mean(plan, O)

    deep = cur_F                                    # bottleneck features
    dec_caches = []
    for i in range(S - 1, -1, -1):
        up = deep[plans[i]["ids"]]
        cat = np.concatenate([up, skips[i]], axis=1)
        pre = cat @ model.params[f"dec{i}.fuse_w"] + model.params[f"dec{i}.fuse_b"]
        deep = _relu(pre)
        dec_caches.append({"cat": cat, "pre": pre, "up_w": up.shape[1]})

    logits = deep @ model.params["head.w"] + model.params["head.b"]
    if not want_cache:
        return logits
    return logits, {"caches": caches, "skips": skips, "plans": plans,
                    "dec_caches": dec_caches, "final": deep, "S": S}


def forward(model: Model, positions, features) -> np.ndarray:
    """Per-point class logits, shape (n, num_classes)."""
    return _run(model, positions, features, want_cache=False)


def forward_with_cache(model: Model, positions, features):
    """Logits plus the activation cache backward_from_cache consumes."""
    return _run(model, positions, features, want_cache=True)


def backward_from_cache(model: Model, ctx, dlogits) -> dict[str, np.ndarray]:
    """Parameter gradients from a cached forward pass."""
    grads: dict[str, np.ndarray] = {}
    S = ctx["S"]

    dlogits = np.asarray(dlogits, dtype=np.float64)
    grads["head.w"] = ctx["final"].T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    d_deep = dlogits @ model.params["head.w"].T

    # decoder ran deepest-to-shallowest, so its backward walks shallowest-first
    d_skips = [None] * S
    for i in range(S):
        dc = ctx["dec_caches"][S - 1 - i]
        dpre = d_deep * (dc["pre"] > 0)
        grads[f"dec{i}.fuse_w"] = dc["cat"].T @ dpre
        grads[f"dec{i}.fuse_b"] = dpre.sum(axis=0)
        dcat = dpre @ model.params[f"dec{i}.fuse_w"].T
        dup = dcat[:, :dc["up_w"]]
        d_skips[i] = dcat[:, dc["up_w"]:]
        d_deep = _segment_sum(ctx["plans"][i], dup)

    # d_deep now sits at the bottleneck; walk the encoder back up
    d_pooled = d_deep
    for i in range(S - 1, -1, -1):
        plan = ctx["plans"][i]
        dO = d_skips[i] + (d_pooled / plan["counts"][:, None])[plan["ids"]]
        d_pooled = _attention_backward(model.params, f"enc{i}.", ctx["caches"][i],
                                       dO, grads)
    return grads


def forward_backward(model: Model, positions, features, dlogits):
    """Logits plus parameter gradients for the given upstream gradient."""
    logits, ctx = forward_with_cache(model, positions, features)
    return logits, backward_from_cache(model, ctx, dlogits)


def backward(model: Model, positions, features, dlogits) -> dict[str, np.ndarray]:
    """Gradient tensors shaped like each parameter."""
    return forward_backward(model, positions, features, dlogits)[1]


# ---------------------------------------------------------------------------
# Checkpoints: magic, version, JSON header, raw little-endian float64 blocks,
# trailing crc32 of everything before it.

def save_checkpoint(model: Model) -> bytes:
    names = sorted(model.params)
    header = {
        "config": model.config.to_dict(),
        "label_space": model.label_space,
        "step": model.step,
        "tensors": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(_CKPT_MAGIC)
    buf.write(_CKPT_VERSION.to_bytes(2, "little"))
    buf.write(len(hb).to_bytes(4, "little"))
    buf.write(hb)
    for n in names:
        buf.write(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes())
    payload = buf.getvalue()
    return payload + zlib.crc32(payload).to_bytes(4, "little")


def load_checkpoint(blob: bytes) -> Model:
    if len(blob) < len(_CKPT_MAGIC) + 10 or not blob.startswith(_CKPT_MAGIC):
        raise CheckpointError("not a model checkpoint")
    if zlib.crc32(blob[:-4]) != int.from_bytes(blob[-4:], "little"):
        raise CheckpointError("checkpoint payload corrupt (crc mismatch)")
    off = len(_CKPT_MAGIC)
    version = int.from_bytes(blob[off:off + 2], "little")
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off += 2
    hlen = int.from_bytes(blob[off:off + 4], "little")
    off += 4
    try:
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from None
    off += hlen
    cfg = ModelConfig.from_dict(header["config"])
    params = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        chunk = blob[off:off + nbytes]
        if len(chunk) < nbytes:
            raise CheckpointError(f"tensor {spec['name']!r} truncated")
        params[spec["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        off += nbytes
    expect = {n for n, _, _ in _param_specs(cfg)}
    if set(params) != expect:
        raise CheckpointError("checkpoint tensors do not match the config")
    return Model(params=params, config=cfg,
                 label_space=header.get("label_space", ""),
                 step=int(header.get("step", 0)))
