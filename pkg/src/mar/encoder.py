"""Trainable feature head: affine (optionally tanh hidden layer) then unit-norm.

Forward and backward are batched over rows. The single-sample ``forward`` and
``backward`` wrap the batched versions.
"""

import os
import struct
from dataclasses import dataclass

import numpy as np

from mar.errors import DimensionMismatch, MalformedFile, NonFiniteActivation
from mar.geometry import normalize_rows

ENC_MAGIC = b"MARENC01"


@dataclass
class EncoderParams:
    """Weights of the head. Also used as the gradient record."""

    W: np.ndarray
    b: np.ndarray
    W_h: np.ndarray | None = None
    b_h: np.ndarray | None = None

    @property
    def depth(self):
        return 1 if self.W_h is None else 2

    @property
    def d_in(self):
        return self.W.shape[1] if self.W_h is None else self.W_h.shape[1]

    @property
    def d_h(self):
        return 0 if self.W_h is None else self.W_h.shape[0]

    @property
    def d_out(self):
        return self.W.shape[0]

    def names(self):
        return ("W", "b") if self.depth == 1 else ("W", "b", "W_h", "b_h")

    def tensors(self):
        return [getattr(self, name) for name in self.names()]

    def copy(self):
        return EncoderParams(*[None if t is None else t.copy() for t in (self.W, self.b, self.W_h, self.b_h)])

    def zeros_like(self):
        return EncoderParams(*[None if t is None else np.zeros_like(t) for t in (self.W, self.b, self.W_h, self.b_h)])

    def check_finite(self):
        return all(np.all(np.isfinite(t)) for t in self.tensors())


def init_params(d_in, d_out, rng, depth=1, d_h=0):
    """Fan-in uniform init, zero biases."""
    if depth == 1:
        lim = 1.0 / np.sqrt(d_in)
        return EncoderParams(W=rng.uniform(-lim, lim, size=(d_out, d_in)), b=np.zeros(d_out))
    if depth != 2 or d_h <= 0:
        raise ValueError(f"unsupported encoder depth={depth}, d_h={d_h}")
    lim_h = 1.0 / np.sqrt(d_in)
    W_h = rng.uniform(-lim_h, lim_h, size=(d_h, d_in))
    lim = 1.0 / np.sqrt(d_h)
    W = rng.uniform(-lim, lim, size=(d_out, d_h))
    return EncoderParams(W=W, b=np.zeros(d_out), W_h=W_h, b_h=np.zeros(d_h))


@dataclass
class EncoderOutput:
    embedding: np.ndarray
    pre_norm: np.ndarray


@dataclass
class _Cache:
    X: np.ndarray
    H: np.ndarray | None
    V: np.ndarray
    norms: np.ndarray | None
    E: np.ndarray


def forward_batch(params, X, constrained=True):
    """Embed each row of ``X``. Returns ``(E, cache)`` for ``backward_batch``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.d_in:
        raise DimensionMismatch(f"expected inputs of dimension {params.d_in}, got shape {X.shape}")
    H = None
    if params.depth == 2:
        H = np.tanh(X @ params.W_h.T + params.b_h)
        V = H @ params.W.T + params.b
    else:
        V = X @ params.W.T + params.b
    if not np.all(np.isfinite(V)):
        raise NonFiniteActivation("encoder produced non-finite activations")
    if constrained:
        norms = np.linalg.norm(V, axis=1)
        E = normalize_rows(V)
    else:
        norms = None
        E = V
    return E, _Cache(X=X, H=H, V=V, norms=norms, E=E)


def backward_batch(params, cache, G):
    """Chain ``G = dL/dE`` back to a gradient record shaped like ``params``."""
    G = np.asarray(G, dtype=np.float64)
    if G.shape != cache.E.shape:
        raise DimensionMismatch(f"gradient shape {G.shape} does not match embeddings {cache.E.shape}")
    if cache.norms is not None:
        U = cache.E
        # Jacobian of v/|v| is (I - u u^T)/|v|
        G = (G - U * np.sum(U * G, axis=1, keepdims=True)) / cache.norms[:, None]
    grads = params.zeros_like()
    inputs = cache.X if params.depth == 1 else cache.H
    grads.W = G.T @ inputs
    grads.b = G.sum(axis=0)
    if params.depth == 2:
        GH = (G @ params.W) * (1.0 - cache.H**2)
        grads.W_h = GH.T @ cache.X
        grads.b_h = GH.sum(axis=0)
    return grads


def forward(params, x, constrained=True):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionMismatch(f"expected a vector, got shape {x.shape}")
    E, cache = forward_batch(params, x[None, :], constrained)
    return EncoderOutput(embedding=E[0], pre_norm=cache.V[0])


def backward(params, x, grad_wrt_embedding, constrained=True):
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(grad_wrt_embedding, dtype=np.float64)
    if g.shape != (params.d_out,):
        raise DimensionMismatch(f"expected gradient of dimension {params.d_out}, got {g.shape}")
    _, cache = forward_batch(params, x[None, :], constrained)
    return backward_batch(params, cache, g[None, :])


def embed(params, X, constrained=True):
    return forward_batch(params, X, constrained)[0]


def _atomic_write(path, data):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def save_encoder(path, params):
    header = ENC_MAGIC + struct.pack("<4I", params.d_in, params.d_h, params.d_out, params.depth)
    body = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for t in params.tensors())
    _atomic_write(path, header + body)


def load_encoder(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != ENC_MAGIC:
        raise MalformedFile(f"{path}: bad encoder magic")
    if len(data) < 24:
        raise MalformedFile(f"{path}: truncated header")
    d_in, d_h, d_out, depth = struct.unpack("<4I", data[8:24])
    if depth == 1:
        shapes = [(d_out, d_in), (d_out,)]
    elif depth == 2:
        shapes = [(d_out, d_h), (d_out,), (d_h, d_in), (d_h,)]
    else:
        raise MalformedFile(f"{path}: unsupported depth {depth}")
    need = 24 + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(data) != need:
        raise MalformedFile(f"{path}: expected {need} bytes, found {len(data)}")
    offset = 24
    tensors = []
    for shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        tensors.append(arr)
        offset += 8 * count
    return EncoderParams(*tensors)
