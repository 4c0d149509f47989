"""Minimal differentiable networks with explicit reverse-mode gradients.

Dense ReLU networks, a small pre-norm transformer encoder with token
validity masking, and a bias-corrected adaptive-moment optimizer. Float64
throughout; all nets expose the same surface: forward, backward (gradients
of a scalar loss given d(loss)/d(output)), parameters, copy, checkpoints.
"""

from __future__ import annotations

import json
import struct
from typing import List, Sequence

import numpy as np

from .errors import UpdateRejectedError
from .rngutil import derive_rng

LN_EPS = 1e-5


def _he_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _as_batch(x: np.ndarray, width: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != width:
        raise ValueError(f"{what} must have width {width}, got shape {x.shape}")
    return x


class DenseNet:
    """Fully connected net: ReLU on hidden layers, linear output."""

    def __init__(self, widths: Sequence[int], seed: int = 0):
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"widths must be >= 2 positive entries, got {widths}")
        self.widths = [int(w) for w in widths]
        rng = derive_rng(seed, "densenet")
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for w_in, w_out in zip(self.widths[:-1], self.widths[1:]):
            self.weights.append(_he_uniform(rng, w_in, (w_in, w_out)))
            self.biases.append(np.zeros(w_out))
        self._cache = None

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> List[np.ndarray]:
        params = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    def forward(self, x: np.ndarray) -> np.ndarray:
        a = _as_batch(x, self.in_width, "input")
        acts = [a]
        pre = []
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = a @ w + b
            pre.append(z)
            a = z if i == last else np.maximum(z, 0.0)
            acts.append(a)
        self._cache = (acts, pre)
        return a

    def backward(self, d_out: np.ndarray) -> List[np.ndarray]:
        """Parameter gradients for the most recent forward pass, given
        d(loss)/d(output). Order matches parameters()."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        acts, pre = self._cache
        d_out = np.asarray(d_out, dtype=np.float64)
        if d_out.ndim == 1:
            d_out = d_out[None, :]
        grads: List[np.ndarray] = [np.empty(0)] * (2 * self.n_layers)
        da = d_out
        for i in range(self.n_layers - 1, -1, -1):
            dz = da if i == self.n_layers - 1 else da * (pre[i] > 0.0)
            grads[2 * i] = acts[i].T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            if i:
                da = dz @ self.weights[i].T
        return grads

    def copy(self) -> "DenseNet":
        dup = DenseNet.__new__(DenseNet)
        dup.widths = list(self.widths)
        dup.weights = [w.copy() for w in self.weights]
        dup.biases = [b.copy() for b in self.biases]
        dup._cache = None
        return dup

    def load_params_from(self, other: "DenseNet") -> None:
        for dst, src in zip(self.parameters(), other.parameters()):
            dst[...] = src

    def arch(self) -> dict:
        return {"widths": self.widths}

    @classmethod
    def from_arch(cls, arch: dict) -> "DenseNet":
        return cls(arch["widths"], seed=0)


def _layernorm_forward(x, gamma, beta):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, (xhat, inv_std, gamma)


def _layernorm_backward(dy, cache):
    xhat, inv_std, gamma = cache
    dgamma = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbeta = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gamma
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


class TinyTransformer:
    """Pre-norm transformer encoder over per-cluster slot tokens.

    Tokens flagged invalid are excluded from attention keys and from the
    final pooling, so their content cannot influence the output. With no
    valid tokens at all the pooled representation is the zero vector and
    the output reduces to the head bias.
    """

    def __init__(
        self,
        token_width: int,
        out_width: int,
        d_model: int = 32,
        n_heads: int = 2,
        n_layers: int = 2,
        ff_width: int = 64,
        seed: int = 0,
    ):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.token_width = token_width
        self.out_width = out_width
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.ff_width = ff_width
        rng = derive_rng(seed, "transformer")
        d, f = d_model, ff_width
        self._names: List[str] = []
        self._params: List[np.ndarray] = []

        def add(name, arr):
            self._names.append(name)
            self._params.append(arr)

        add("w_in", _he_uniform(rng, token_width, (token_width, d)))
        add("b_in", np.zeros(d))
        for i in range(n_layers):
            add(f"l{i}.ln1_g", np.ones(d))
            add(f"l{i}.ln1_b", np.zeros(d))
            for nm in ("q", "k", "v", "o"):
                add(f"l{i}.w{nm}", _he_uniform(rng, d, (d, d)))
                add(f"l{i}.b{nm}", np.zeros(d))
            add(f"l{i}.ln2_g", np.ones(d))
            add(f"l{i}.ln2_b", np.zeros(d))
            add(f"l{i}.w1", _he_uniform(rng, d, (d, f)))
            add(f"l{i}.b1", np.zeros(f))
            add(f"l{i}.w2", _he_uniform(rng, f, (f, d)))
            add(f"l{i}.b2", np.zeros(d))
        add("lnf_g", np.ones(d))
        add("lnf_b", np.zeros(d))
        add("w_head", _he_uniform(rng, d, (d, out_width)))
        add("b_head", np.zeros(out_width))
        self._index = {n: i for i, n in enumerate(self._names)}
        self._cache = None

    def _p(self, name: str) -> np.ndarray:
        return self._params[self._index[name]]

    @property
    def in_width(self) -> int:
        return self.token_width

    def parameters(self) -> List[np.ndarray]:
        return list(self._params)

    def forward(self, tokens: np.ndarray, valid: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim == 2:
            tokens = tokens[None]
        valid = np.asarray(valid, dtype=bool)
        if valid.ndim == 1:
            valid = valid[None]
        n, k, tw = tokens.shape
        if tw != self.token_width or valid.shape != (n, k):
            raise ValueError(
                f"tokens {tokens.shape} / valid {valid.shape} do not match "
                f"token_width={self.token_width}"
            )
        h, d = self.n_heads, self.d_model
        dh = d // h
        scale = 1.0 / np.sqrt(dh)
        x = tokens @ self._p("w_in") + self._p("b_in")
        layer_caches = []
        for i in range(self.n_layers):
            hn, ln1_cache = _layernorm_forward(x, self._p(f"l{i}.ln1_g"), self._p(f"l{i}.ln1_b"))
            q = hn @ self._p(f"l{i}.wq") + self._p(f"l{i}.bq")
            kk = hn @ self._p(f"l{i}.wk") + self._p(f"l{i}.bk")
            v = hn @ self._p(f"l{i}.wv") + self._p(f"l{i}.bv")
            qh = q.reshape(n, k, h, dh).transpose(0, 2, 1, 3)
            kh = kk.reshape(n, k, h, dh).transpose(0, 2, 1, 3)
            vh = v.reshape(n, k, h, dh).transpose(0, 2, 1, 3)
            scores = np.einsum("nhqd,nhkd->nhqk", qh, kh) * scale
            key_ok = valid[:, None, None, :]
            scores = np.where(key_ok, scores, -np.inf)
            row_max = np.max(np.where(key_ok, scores, -np.inf), axis=-1, keepdims=True)
            row_max = np.where(np.isfinite(row_max), row_max, 0.0)
            expo = np.where(key_ok, np.exp(scores - row_max), 0.0)
            denom = expo.sum(axis=-1, keepdims=True)
            attn = expo / np.where(denom > 0.0, denom, 1.0)
            ctx = np.einsum("nhqk,nhkd->nhqd", attn, vh)
            ctx_flat = ctx.transpose(0, 2, 1, 3).reshape(n, k, d)
            out_proj = ctx_flat @ self._p(f"l{i}.wo") + self._p(f"l{i}.bo")
            x = x + out_proj
            h2, ln2_cache = _layernorm_forward(x, self._p(f"l{i}.ln2_g"), self._p(f"l{i}.ln2_b"))
            z1 = h2 @ self._p(f"l{i}.w1") + self._p(f"l{i}.b1")
            r = np.maximum(z1, 0.0)
            ffn = r @ self._p(f"l{i}.w2") + self._p(f"l{i}.b2")
            x = x + ffn
            layer_caches.append(
                dict(
                    ln1=ln1_cache, hn=hn, qh=qh, kh=kh, vh=vh, attn=attn,
                    ctx_flat=ctx_flat, ln2=ln2_cache, h2=h2, z1=z1, r=r,
                )
            )
        xf, lnf_cache = _layernorm_forward(x, self._p("lnf_g"), self._p("lnf_b"))
        vmask = valid.astype(np.float64)
        counts = np.maximum(vmask.sum(axis=1), 1.0)
        pooled = (xf * vmask[:, :, None]).sum(axis=1) / counts[:, None]
        out = pooled @ self._p("w_head") + self._p("b_head")
        self._cache = dict(
            tokens=tokens, valid=valid, vmask=vmask, counts=counts,
            pooled=pooled, lnf=lnf_cache, layers=layer_caches, shape=(n, k),
        )
        return out

    def backward(self, d_out: np.ndarray) -> List[np.ndarray]:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        c = self._cache
        n, k = c["shape"]
        h, d = self.n_heads, self.d_model
        dh = d // h
        scale = 1.0 / np.sqrt(dh)
        d_out = np.asarray(d_out, dtype=np.float64)
        if d_out.ndim == 1:
            d_out = d_out[None, :]
        grads = {name: np.zeros_like(p) for name, p in zip(self._names, self._params)}

        grads["w_head"] = c["pooled"].T @ d_out
        grads["b_head"] = d_out.sum(axis=0)
        d_pooled = d_out @ self._p("w_head").T
        dxf = d_pooled[:, None, :] * c["vmask"][:, :, None] / c["counts"][:, None, None]
        dx, grads["lnf_g"], grads["lnf_b"] = _layernorm_backward(dxf, c["lnf"])

        for i in range(self.n_layers - 1, -1, -1):
            lc = c["layers"][i]
            # ffn branch
            dffn = dx
            grads[f"l{i}.w2"] = np.einsum("nkf,nkd->fd", lc["r"], dffn)
            grads[f"l{i}.b2"] = dffn.sum(axis=(0, 1))
            dr = dffn @ self._p(f"l{i}.w2").T
            dz1 = dr * (lc["z1"] > 0.0)
            grads[f"l{i}.w1"] = np.einsum("nkd,nkf->df", lc["h2"], dz1)
            grads[f"l{i}.b1"] = dz1.sum(axis=(0, 1))
            dh2 = dz1 @ self._p(f"l{i}.w1").T
            dx2, grads[f"l{i}.ln2_g"], grads[f"l{i}.ln2_b"] = _layernorm_backward(dh2, lc["ln2"])
            dx = dx + dx2
            # attention branch
            dproj = dx
            grads[f"l{i}.wo"] = np.einsum("nkd,nke->de", lc["ctx_flat"], dproj)
            grads[f"l{i}.bo"] = dproj.sum(axis=(0, 1))
            dctx_flat = dproj @ self._p(f"l{i}.wo").T
            dctx = dctx_flat.reshape(n, k, h, dh).transpose(0, 2, 1, 3)
            dattn = np.einsum("nhqd,nhkd->nhqk", dctx, lc["vh"])
            dvh = np.einsum("nhqk,nhqd->nhkd", lc["attn"], dctx)
            attn = lc["attn"]
            dscores = attn * (dattn - (attn * dattn).sum(axis=-1, keepdims=True))
            dscores = dscores * scale
            dqh = np.einsum("nhqk,nhkd->nhqd", dscores, lc["kh"])
            dkh = np.einsum("nhqk,nhqd->nhkd", dscores, lc["qh"])
            dq = dqh.transpose(0, 2, 1, 3).reshape(n, k, d)
            dk = dkh.transpose(0, 2, 1, 3).reshape(n, k, d)
            dv = dvh.transpose(0, 2, 1, 3).reshape(n, k, d)
            hn = lc["hn"]
            grads[f"l{i}.wq"] = np.einsum("nkd,nke->de", hn, dq)
            grads[f"l{i}.bq"] = dq.sum(axis=(0, 1))
            grads[f"l{i}.wk"] = np.einsum("nkd,nke->de", hn, dk)
            grads[f"l{i}.bk"] = dk.sum(axis=(0, 1))
            grads[f"l{i}.wv"] = np.einsum("nkd,nke->de", hn, dv)
            grads[f"l{i}.bv"] = dv.sum(axis=(0, 1))
            dhn = (
                dq @ self._p(f"l{i}.wq").T
                + dk @ self._p(f"l{i}.wk").T
                + dv @ self._p(f"l{i}.wv").T
            )
            dx1, grads[f"l{i}.ln1_g"], grads[f"l{i}.ln1_b"] = _layernorm_backward(dhn, lc["ln1"])
            dx = dx + dx1

        grads["w_in"] = np.einsum("nkt,nkd->td", c["tokens"], dx)
        grads["b_in"] = dx.sum(axis=(0, 1))
        return [grads[name] for name in self._names]

    def copy(self) -> "TinyTransformer":
        dup = TinyTransformer.__new__(TinyTransformer)
        dup.token_width = self.token_width
        dup.out_width = self.out_width
        dup.d_model = self.d_model
        dup.n_heads = self.n_heads
        dup.n_layers = self.n_layers
        dup.ff_width = self.ff_width
        dup._names = list(self._names)
        dup._params = [p.copy() for p in self._params]
        dup._index = dict(self._index)
        dup._cache = None
        return dup

    def load_params_from(self, other: "TinyTransformer") -> None:
        for dst, src in zip(self._params, other._params):
            dst[...] = src

    def arch(self) -> dict:
        return {
            "token_width": self.token_width,
            "out_width": self.out_width,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_layers": self.n_layers,
            "ff_width": self.ff_width,
        }

    @classmethod
    def from_arch(cls, arch: dict) -> "TinyTransformer":
        return cls(**arch, seed=0)


class Adam:
    """Bias-corrected adaptive-moment updates applied in place."""

    def __init__(self, params: Sequence[np.ndarray], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        for g in grads:
            if not np.isfinite(g).all():
                raise UpdateRejectedError("non-finite gradient; update rejected")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their joint norm is at most max_norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        for g in grads:
            g *= factor
    return total


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over all elements and its gradient wrt pred."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, 2.0 * diff / diff.size


def masked_softmax(logits: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Row-wise softmax restricted to valid entries; invalid entries get
    probability exactly zero. Rows with no valid entry come back all zero."""
    logits = np.asarray(logits, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    squeeze = logits.ndim == 1
    if squeeze:
        logits, valid = logits[None], valid[None]
    masked = np.where(valid, logits, -np.inf)
    row_max = np.max(masked, axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    expo = np.where(valid, np.exp(masked - row_max), 0.0)
    denom = expo.sum(axis=-1, keepdims=True)
    probs = expo / np.where(denom > 0.0, denom, 1.0)
    return probs[0] if squeeze else probs


def masked_log_softmax(logits: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Log of masked_softmax; invalid entries are -inf."""
    logits = np.asarray(logits, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    squeeze = logits.ndim == 1
    if squeeze:
        logits, valid = logits[None], valid[None]
    masked = np.where(valid, logits, -np.inf)
    row_max = np.max(masked, axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    expo = np.where(valid, np.exp(masked - row_max), 0.0)
    log_denom = np.log(np.maximum(expo.sum(axis=-1, keepdims=True), 1e-300))
    out = np.where(valid, masked - row_max - log_denom, -np.inf)
    return out[0] if squeeze else out


def param_vector(net) -> np.ndarray:
    return np.concatenate([p.ravel() for p in net.parameters()])


def set_param_vector(net, vec: np.ndarray) -> None:
    vec = np.asarray(vec, dtype=np.float64)
    offset = 0
    for p in net.parameters():
        p[...] = vec[offset: offset + p.size].reshape(p.shape)
        offset += p.size
    if offset != vec.size:
        raise ValueError(f"vector has {vec.size} entries, net needs {offset}")


_NET_CLASSES = {"DenseNet": DenseNet, "TinyTransformer": TinyTransformer}


def save_checkpoint(net, path) -> None:
    """Length-prefixed JSON architecture header + little-endian float64 blob."""
    header = json.dumps({"class": type(net).__name__, "arch": net.arch()}).encode("utf-8")
    blob = param_vector(net).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        blob = np.frombuffer(fh.read(), dtype="<f8")
    cls = _NET_CLASSES.get(header.get("class"))
    if cls is None:
        raise ValueError(f"unknown checkpoint class {header.get('class')!r}")
    net = cls.from_arch(header["arch"])
    set_param_vector(net, blob.astype(np.float64))
    return net
