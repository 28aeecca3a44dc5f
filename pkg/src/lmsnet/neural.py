"""Trainable pieces: parameter store, feature extractor, mask denoiser and
the momentum update transformer for prototypes."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .core import ensure_dir, read_lmt, write_lmt

CLAMP_EPS = 1e-6
MD_VARIANTS = ("a", "b", "c")


class ParamStore:
    """Ordered name -> leaf Tensor mapping with a role tag per entry."""

    def __init__(self):
        self._tensors = {}
        self._roles = {}

    def add(self, name: str, value, role: str = "") -> ad.Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ValueError(f"parameter {name!r} has non-finite entries")
        t = ad.parameter(value, name=name)
        self._tensors[name] = t
        self._roles[name] = role
        return t

    def __getitem__(self, name) -> ad.Tensor:
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __len__(self):
        return len(self._tensors)

    def __iter__(self):
        return iter(self._tensors)

    def items(self):
        return self._tensors.items()

    def role(self, name) -> str:
        return self._roles[name]

    def arrays(self) -> dict:
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, t in self._tensors.items():
            out.add(k, t.data, self._roles[k])
        return out

    def size(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    def save(self, path) -> None:
        ensure_dir(path)
        manifest = {}
        for k, t in self._tensors.items():
            write_lmt(os.path.join(path, f"{k}.lmt"), t.data)
            manifest[k] = {"shape": list(t.data.shape), "role": self._roles[k]}
        with open(os.path.join(path, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1)

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
        store = cls()
        for k, meta in manifest.items():
            arr = read_lmt(os.path.join(path, f"{k}.lmt"))
            if list(arr.shape) != meta["shape"]:
                raise ValueError(f"{k}: manifest shape {meta['shape']} != file shape {arr.shape}")
            store.add(k, arr, meta.get("role", ""))
        return store


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


# -- feature extractor ------------------------------------------------------

BACKBONE_STRIDES = (1, 2, 2)


def init_backbone(store: ParamStore, rng, channels=(16, 32, 32), prefix="backbone"):
    cin = 1
    for i, cout in enumerate(channels):
        store.add(f"{prefix}.conv{i + 1}.w", _he(rng, (3, 3, cin, cout), 9 * cin), "backbone")
        store.add(f"{prefix}.conv{i + 1}.b", np.zeros(cout), "backbone")
        cin = cout


def feature_extract(image, params: ParamStore, prefix="backbone"):
    """Shared-weight backbone: three 3x3 convs (strides 1, 2, 2).

    ReLU follows the first two layers; the last layer is linear so features
    can take either sign. ``image`` is (H, W) or a batch (B, H, W); the result
    is (H/4, W/4, C) or (B, H/4, W/4, C).
    """
    x = ad.as_tensor(image)
    single = x.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    x = ad.reshape(x, x.shape + (1,))
    n = len(BACKBONE_STRIDES)
    for i, stride in enumerate(BACKBONE_STRIDES):
        x = ad.conv2d(x, params[f"{prefix}.conv{i + 1}.w"], params[f"{prefix}.conv{i + 1}.b"], stride)
        if i < n - 1:
            x = ad.relu(x)
    return x[0] if single else x


# -- mask denoiser ----------------------------------------------------------------

@dataclass
class MDWeights:
    convs: list  # [(w, b)] for 5 layers
    variant: str = "c"

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str, variant: str = "c", n_layers: int = 5):
        convs = [(store[f"{prefix}.conv{i + 1}.w"], store[f"{prefix}.conv{i + 1}.b"])
                 for i in range(n_layers)]
        return cls(convs, variant)


def init_md(store: ParamStore, rng, prefix: str, hidden: int = 32, n_layers: int = 5,
            zero_last: bool = True):
    cin = 1
    for i in range(n_layers):
        cout = 1 if i == n_layers - 1 else hidden
        if i == n_layers - 1 and zero_last:
            w = np.zeros((3, 3, cin, cout))
        else:
            w = _he(rng, (3, 3, cin, cout), 9 * cin)
        store.add(f"{prefix}.conv{i + 1}.w", w, "md")
        store.add(f"{prefix}.conv{i + 1}.b", np.zeros(cout), "md")
        cin = cout


def md_forward(u_channel, w: MDWeights):
    """Mask denoiser on one channel (H, W) or a batch of channels (B, H, W).

    Variant "c": sigmoid(CNN(u) + logit(clamp(u))). The inverse-sigmoid skip
    needs the clamp to keep the logit finite; what the clamp cut off is added
    back after the sigmoid, so a zero last layer is an exact identity on [0, 1].
    Variant "b" is sigmoid(CNN(u)); variant "a" is the bare CNN.
    """
    u = ad.as_tensor(u_channel)
    single = u.ndim == 2
    x = ad.reshape(u, ((1,) if single else ()) + u.shape + (1,))
    n = len(w.convs)
    for i, (cw, cb) in enumerate(w.convs):
        x = ad.conv2d(x, cw, cb, 1)
        if i < n - 1:
            x = ad.relu(x)
    r = ad.reshape(x, u.shape)
    if w.variant == "a":
        out = r
    elif w.variant == "b":
        out = ad.sigmoid(r)
    elif w.variant == "c":
        c = ad.clip(u, CLAMP_EPS, 1.0 - CLAMP_EPS)
        out = (ad.logit_skip_sigmoid(r, c) - c) + ad.clip(u, 0.0, 1.0)
    else:
        raise ValueError(f"unknown MD variant {w.variant!r}")
    return ad.plain(out, u_channel, *[t for pair in w.convs for t in pair])


class MaskDenoiser:
    """Applies ``md_forward`` to both channels of a (H, W, 2) field with shared weights."""

    def __init__(self, weights: MDWeights):
        self.weights = weights

    def __call__(self, z):
        z = ad.as_tensor(z)
        batched = ad.transpose(z, (2, 0, 1))
        return ad.transpose(md_forward(batched, self.weights), (1, 2, 0))


# -- momentum update transformer ------------------------------------------------

@dataclass
class MUTWeights:
    ln: list      # [(gamma, beta)] x 3
    attn: dict    # wq, bq, wk, wv, bv, wo, bo (a key bias cancels in the softmax)
    mlp: dict     # w1, b1, w2, b2
    heads: int = 4

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str, heads: int = 4):
        ln = [(store[f"{prefix}.ln{i}.g"], store[f"{prefix}.ln{i}.b"]) for i in (1, 2, 3)]
        attn = {k: store[f"{prefix}.attn.{k}"] for k in ("wq", "bq", "wk", "wv", "bv", "wo", "bo")}
        mlp = {k: store[f"{prefix}.mlp.{k}"] for k in ("w1", "b1", "w2", "b2")}
        return cls(ln, attn, mlp, heads)


def init_mut(store: ParamStore, rng, prefix: str, channels: int = 32, heads: int = 4,
             mlp_ratio: int = 4):
    if channels % heads:
        raise ValueError("channels must be divisible by the number of heads")
    C = channels
    for i in (1, 2, 3):
        store.add(f"{prefix}.ln{i}.g", np.ones(C), "mut")
        store.add(f"{prefix}.ln{i}.b", np.zeros(C), "mut")
    for k in ("q", "k", "v", "o"):
        store.add(f"{prefix}.attn.w{k}", rng.normal(0.0, 1.0 / np.sqrt(C), (C, C)), "mut")
        if k != "k":
            store.add(f"{prefix}.attn.b{k}", np.zeros(C), "mut")
    hidden = mlp_ratio * C
    store.add(f"{prefix}.mlp.w1", rng.normal(0.0, np.sqrt(2.0 / C), (C, hidden)), "mut")
    store.add(f"{prefix}.mlp.b1", np.zeros(hidden), "mut")
    store.add(f"{prefix}.mlp.w2", rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, C)), "mut")
    store.add(f"{prefix}.mlp.b2", np.zeros(C), "mut")


def masking_matrix(p, l1) -> np.ndarray:
    """0 where <p_n, l1> exceeds eps = (min s + mean s) / 2, else -inf."""
    s = np.asarray(p, dtype=np.float64) @ np.asarray(l1, dtype=np.float64)
    eps = 0.5 * (s.min() + s.mean())
    return np.where(s > eps, 0.0, -np.inf)


def _msa(x, attn, heads):
    n, C = x.shape
    d = C // heads

    def split(t):
        return ad.transpose(ad.reshape(t, (n, heads, d)), (1, 0, 2))

    q = split(x @ attn["wq"] + attn["bq"])
    k = split(x @ attn["wk"])
    v = split(x @ attn["wv"] + attn["bv"])
    scores = (q @ ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(d))
    out = ad.softmax(scores, axis=-1) @ v                      # (heads, n, d)
    out = ad.reshape(ad.transpose(out, (1, 0, 2)), (n, C))
    return out @ attn["wo"] + attn["bo"]


def mut_forward(p, l1, w: MUTWeights):
    """Update the representative prototypes and derive a new prototype pair.

    Returns (p_out, (l_fg, l_bg)) with l_bg = -l_fg = -mean of the rows of p_out.
    """
    from .solver import PrototypePair

    pt, lt = ad.as_tensor(p), ad.as_tensor(l1)
    M = masking_matrix(pt.data, lt.data)
    # Each row attends to the single key l1, so its softmax weight is 1 when
    # unmasked; a row masked with -inf receives a zero attended value.
    keep = (M == 0.0).astype(np.float64)[:, None]
    x = ad.layer_norm(keep * lt + pt, *w.ln[0])
    x = ad.layer_norm(_msa(x, w.attn, w.heads) + x, *w.ln[1])
    h = ad.relu(x @ w.mlp["w1"] + w.mlp["b1"]) @ w.mlp["w2"] + w.mlp["b2"]
    x = ad.layer_norm(h + x, *w.ln[2])
    g = ad.mean(x, axis=0)
    return x, PrototypePair(g, -g)
