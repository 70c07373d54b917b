"""Attention-MIL model with instance-first classification.

Forward pass per bag of N tile embeddings h_i (rows of H):

    u_i = w^T tanh(V h_i)           unnormalized attention score
    a   = softmax(u) over the bag
    s_i = psi_W h_i + psi_b         per-tile logits (affine head)
    s   = sum_i a_i s_i             slide logits by attention pooling
    p   = sigmoid(s) or softmax(s)  depending on the task link

Gradients are derived by hand (backward below) so the whole chain is
checkable against finite differences; no autodiff framework is involved.
All bag math runs in float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .core import LinkKind, TaskSpec, TaskKind, TASKS, reduced_task
from .errors import DataError, NumericalError

CHECKPOINT_VERSION = 1


@dataclass
class MilModel:
    """Learnable parameters for one task: attention (V, w) and head psi."""

    task: TaskSpec
    d: int
    m: int
    V: np.ndarray      # (m, d)
    w: np.ndarray      # (m,)
    psi_W: np.ndarray  # (C, d)
    psi_b: np.ndarray  # (C,)
    seed: int = 0

    def __post_init__(self):
        C = self.task.head_dim
        expect = {"V": (self.m, self.d), "w": (self.m,),
                  "psi_W": (C, self.d), "psi_b": (C,)}
        for name, shape in expect.items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise DataError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite values in parameter {name}")
            setattr(self, name, arr)

    @classmethod
    def init(cls, task: TaskSpec, d: int, m: int, seed: int = 0) -> "MilModel":
        """Seeded uniform init scaled by 1/sqrt(fan-in); biases zero."""
        rng = np.random.default_rng(seed)
        C = task.head_dim
        V = rng.uniform(-1, 1, size=(m, d)) / np.sqrt(d)
        w = rng.uniform(-1, 1, size=m) / np.sqrt(m)
        psi_W = rng.uniform(-1, 1, size=(C, d)) / np.sqrt(d)
        psi_b = np.zeros(C)
        return cls(task=task, d=d, m=m, V=V, w=w, psi_W=psi_W, psi_b=psi_b,
                   seed=seed)

    def params(self) -> dict[str, np.ndarray]:
        return {"V": self.V, "w": self.w, "psi_W": self.psi_W,
                "psi_b": self.psi_b}

    def copy(self) -> "MilModel":
        return MilModel(task=self.task, d=self.d, m=self.m,
                        V=self.V.copy(), w=self.w.copy(),
                        psi_W=self.psi_W.copy(), psi_b=self.psi_b.copy(),
                        seed=self.seed)


@dataclass
class ForwardTrace:
    """Intermediates of one forward pass, kept for backprop and overlays."""

    u: np.ndarray        # (N,)
    a: np.ndarray        # (N,)
    tanh_Vh: np.ndarray  # (N, m)
    S: np.ndarray        # (N, C) tile logits
    s: np.ndarray        # (C,) slide logits
    p: np.ndarray        # probability: (1,) for sigmoid (P(Hi)), (C,) otherwise


def attention_scores(H: np.ndarray, V: np.ndarray, w: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or V.shape[1] != H.shape[1] or V.shape[0] != w.shape[0]:
        raise DataError(f"shape mismatch: H {H.shape}, V {V.shape}, w {w.shape}")
    return np.tanh(H @ V.T) @ w


def bag_softmax(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    e = np.exp(u - np.max(u))
    return e / e.sum()


def instance_logits(H: np.ndarray, psi_W: np.ndarray,
                    psi_b: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or psi_W.shape[1] != H.shape[1]:
        raise DataError(f"shape mismatch: H {H.shape}, psi_W {psi_W.shape}")
    return H @ psi_W.T + psi_b


def pool(a: np.ndarray, S: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float64) @ np.asarray(S, dtype=np.float64)


def link(s: np.ndarray, task: TaskSpec) -> np.ndarray:
    """Probability from slide logits: (P(Hi),) for sigmoid, full softmax else."""
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    if s.shape != (task.head_dim,):
        raise DataError(f"logits shape {s.shape} vs task head dim "
                        f"{task.head_dim}")
    if task.link is LinkKind.SIGMOID:
        return np.array([_sigmoid(s[0])])
    e = np.exp(s - np.max(s))
    return e / e.sum()


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    z = np.exp(x)
    return z / (1.0 + z)


def _softplus(x: float) -> float:
    return max(x, 0.0) + np.log1p(np.exp(-abs(x)))


def forward(H: np.ndarray, model: MilModel) -> ForwardTrace:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[1] != model.d:
        raise DataError(f"bag dim {H.shape} does not match model d={model.d}")
    t = np.tanh(H @ model.V.T)        # (N, m)
    u = t @ model.w                   # (N,)
    a = bag_softmax(u)
    S = H @ model.psi_W.T + model.psi_b
    s = a @ S
    return ForwardTrace(u=u, a=a, tanh_Vh=t, S=S, s=s, p=link(s, model.task))


def distribution(trace_p: np.ndarray, task: TaskSpec) -> np.ndarray:
    """Probability over task.classes; expands the sigmoid P(Hi) to (1-p, p)."""
    if task.link is LinkKind.SIGMOID:
        p = float(trace_p[0])
        return np.array([1.0 - p, p])
    return np.asarray(trace_p, dtype=np.float64)


def loss_and_grad(s: np.ndarray, target: int, task: TaskSpec):
    """Stable loss from slide logits, plus dL/ds.

    Sigmoid task: BCE from the single logit, L = softplus(s) - y*s with
    y = 1 for the Hi class. Softmax tasks: L = logsumexp(s) - s_target.
    Both equal -log p_target exactly.
    """
    s = np.atleast_1d(np.asarray(s, dtype=np.float64))
    if not 0 <= target < task.n_classes:
        raise DataError(f"target {target} out of range for {task.classes}")
    if task.link is LinkKind.SIGMOID:
        y = float(target)  # class order is (Lo, Hi)
        L = _softplus(s[0]) - y * s[0]
        g = np.array([_sigmoid(s[0]) - y])
        return L, g
    mx = np.max(s)
    lse = mx + np.log(np.sum(np.exp(s - mx)))
    L = lse - s[target]
    g = np.exp(s - lse)
    g[target] -= 1.0
    return L, g


def loss(s: np.ndarray, target: int, task: TaskSpec) -> float:
    return loss_and_grad(s, target, task)[0]


def backward(H: np.ndarray, target: int, model: MilModel,
             trace: ForwardTrace) -> tuple[float, dict[str, np.ndarray]]:
    """Exact analytic gradients of the bag loss w.r.t. all four parameter
    blocks. The chain runs through the softmax-over-bag Jacobian and
    tanh' = 1 - tanh^2."""
    H = np.asarray(H, dtype=np.float64)
    L, g = loss_and_grad(trace.s, target, model.task)  # g = dL/ds, (C,)

    hbar = trace.a @ H                      # (d,) attention-pooled embedding
    g_psi_b = g.copy()
    g_psi_W = np.outer(g, hbar)

    c = trace.S @ g                         # (N,) dL/da_i
    gu = trace.a * (c - trace.a @ c)        # (N,) softmax Jacobian applied
    g_w = trace.tanh_Vh.T @ gu
    G = (gu[:, None] * (1.0 - trace.tanh_Vh ** 2)) * model.w[None, :]
    g_V = G.T @ H

    grads = {"V": g_V, "w": g_w, "psi_W": g_psi_W, "psi_b": g_psi_b}
    for name, arr in grads.items():
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite gradient in {name}")
    return L, grads


def predict(bag_H: np.ndarray, model: MilModel):
    """Deterministic forward pass; returns (distribution over classes, trace)."""
    trace = forward(bag_H, model)
    return distribution(trace.p, model.task), trace


# --- checkpoint serialization -------------------------------------------------
#
# Layout: 4-byte little-endian header length, JSON header (task kind, class
# order, d, m, C, seed, version), then parameters as little-endian float64 in
# the fixed order V, w, psi_W, psi_b. Round-trip is bit-exact.

def save_checkpoint(model: MilModel, path) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "task": model.task.kind.value,
        "classes": list(model.task.classes),
        "link": model.task.link.value,
        "d": model.d,
        "m": model.m,
        "C": model.task.head_dim,
        "seed": model.seed,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    blob = b"".join(
        np.ascontiguousarray(arr, dtype="<f8").tobytes()
        for arr in (model.V, model.w, model.psi_W, model.psi_b))
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(blob)


def load_checkpoint(path) -> MilModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataError(f"checkpoint {path}: truncated header")
    (hlen,) = struct.unpack("<I", raw[:4])
    try:
        header = json.loads(raw[4:4 + hlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise DataError(f"checkpoint {path}: bad header ({exc})") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint {path}: unsupported version "
                        f"{header.get('format_version')}")
    kind = TaskKind(header["task"])
    task = TASKS[kind]
    if list(task.classes) != header["classes"]:
        task = reduced_task(task)
        if list(task.classes) != header["classes"]:
            raise DataError(f"checkpoint {path}: unknown class order "
                            f"{header['classes']}")
    d, m, C = header["d"], header["m"], header["C"]
    sizes = [m * d, m, C * d, C]
    total = sum(sizes) * 8
    body = raw[4 + hlen:]
    if len(body) != total:
        raise DataError(f"checkpoint {path}: payload is {len(body)} bytes, "
                        f"expected {total}")
    flat = np.frombuffer(body, dtype="<f8")
    V, w, psi_W, psi_b = np.split(flat, np.cumsum(sizes)[:-1])
    return MilModel(task=task, d=d, m=m,
                    V=V.reshape(m, d).copy(), w=w.copy(),
                    psi_W=psi_W.reshape(C, d).copy(), psi_b=psi_b.copy(),
                    seed=header["seed"])
