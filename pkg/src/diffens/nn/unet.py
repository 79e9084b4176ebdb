"""Small periodic U-Net over (B, C, H, W) slabs.

The encoder/decoder structure comes from a NetSpec: each stage is a
residual double-conv block, optionally followed by 2x average-pool
downsampling (mirrored by nearest-neighbor upsampling and a skip
concatenation in the decoder).  A per-stage linear map injects a
sinusoidal time embedding as a channel bias; single-head self-attention
can be enabled at the coarsest resolution.  The final convolution is
bias-free and zero-initialized, so a freshly built or all-zero network
outputs exactly zero.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from ..seeding import rng_for
from . import engine
from .params import ParamStore

_ACTS = {"silu": engine.silu, "relu": engine.relu}


@dataclass(frozen=True)
class NetSpec:
    """Architecture description; serializable into checkpoints."""

    in_channels: int
    out_channels: int
    stages: tuple = ((16, True), (32, True))
    activation: str = "silu"
    temb_width: int = 0
    attention: bool = True

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        stages = tuple((int(c), bool(d)) for c, d in self.stages)
        if not stages or any(c < 1 for c, _ in stages):
            raise ValueError("stages must be a non-empty list of (channels, downsample)")
        object.__setattr__(self, "stages", stages)
        if self.activation not in _ACTS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.temb_width < 0 or self.temb_width % 2:
            raise ValueError("temb_width must be 0 or a positive even number")

    @property
    def n_downs(self) -> int:
        return sum(1 for _, d in self.stages if d)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "stages": [[c, d] for c, d in self.stages],
            "activation": self.activation,
            "temb_width": self.temb_width,
            "attention": self.attention,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(
            in_channels=int(d["in_channels"]),
            out_channels=int(d["out_channels"]),
            stages=tuple((int(c), bool(dn)) for c, dn in d["stages"]),
            activation=d["activation"],
            temb_width=int(d["temb_width"]),
            attention=bool(d["attention"]),
        )


def time_embedding(t, width: int) -> np.ndarray:
    """Interleaved sin/cos embedding with geometric frequencies.

    Frequencies run from 1 down to 1/10000, so integer steps up to a
    few thousand stay distinguishable.  Scalar input gives a (width,)
    vector; a batch gives (B, width).
    """
    if width <= 0 or width % 2:
        raise ValueError("embedding width must be positive and even")
    scalar = np.ndim(t) == 0
    tv = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    if half == 1:
        freqs = np.ones(1)
    else:
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / (half - 1))
    ang = tv[:, None] * freqs[None, :]
    emb = np.empty((tv.size, width))
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang)
    return emb[0] if scalar else emb


class _Conv:
    def __init__(self, store, name, cin, cout, k=3, bias=True, init="normal"):
        self.store = store
        self.w = store.declare(f"{name}.w", (k, k, cin, cout), init, fan_in=k * k * cin)
        self.b = store.declare(f"{name}.b", (cout,), "zeros") if bias else None

    def __call__(self, x):
        b = self.store[self.b] if self.b else None
        return engine.conv2d(x, self.store[self.w], b)


class _Dense:
    def __init__(self, store, name, fin, fout, bias=True, init="normal"):
        self.store = store
        self.w = store.declare(f"{name}.w", (fin, fout), init, fan_in=fin)
        self.b = store.declare(f"{name}.b", (fout,), "zeros") if bias else None

    def __call__(self, x):
        b = self.store[self.b] if self.b else None
        return engine.linear(x, self.store[self.w], b)


class _ResBlock:
    def __init__(self, store, name, cin, cout, temb_width, act):
        self.conv1 = _Conv(store, f"{name}.conv1", cin, cout)
        self.emb = _Dense(store, f"{name}.emb", temb_width, cout) if temb_width else None
        self.conv2 = _Conv(store, f"{name}.conv2", cout, cout)
        self.skip = _Conv(store, f"{name}.skip", cin, cout, k=1) if cin != cout else None
        self.act = act

    def __call__(self, x, temb):
        h = self.conv1(x)
        if self.emb is not None:
            h = engine.add_bias_hw(h, self.emb(temb))
        h = self.act(h)
        h = self.conv2(h)
        s = self.skip(x) if self.skip else x
        return engine.add(h, s)


class _Attention:
    """Single-head self-attention over spatial positions, residual."""

    def __init__(self, store, name, ch):
        self.q = _Dense(store, f"{name}.q", ch, ch, bias=False)
        self.k = _Dense(store, f"{name}.k", ch, ch, bias=False)
        self.v = _Dense(store, f"{name}.v", ch, ch, bias=False)
        self.o = _Dense(store, f"{name}.o", ch, ch, bias=False, init="zeros")
        self.gain = float(ch) ** -0.5

    def __call__(self, x):
        b, h, w, c = x.data.shape
        tok = engine.reshape(x, (b, h * w, c))
        att = engine.softmax_last(
            engine.scale(engine.bmm(self.q(tok), engine.transpose_last2(self.k(tok))), self.gain)
        )
        out = self.o(engine.bmm(att, self.v(tok)))
        return engine.add(x, engine.reshape(out, (b, h, w, c)))


class UNet:
    """Network instance: NetSpec plus a flat parameter store."""

    def __init__(self, spec: NetSpec, init_seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.store = ParamStore(dtype)
        act = _ACTS[spec.activation]
        tw = spec.temb_width
        chans = [c for c, _ in spec.stages]
        self.downs = [d for _, d in spec.stages]
        self.conv_in = _Conv(self.store, "conv_in", spec.in_channels, chans[0])
        self.enc = []
        prev = chans[0]
        for i, ch in enumerate(chans):
            self.enc.append(_ResBlock(self.store, f"enc{i}", prev, ch, tw, act))
            prev = ch
        self.mid = _ResBlock(self.store, "mid", prev, prev, tw, act)
        self.attn = _Attention(self.store, "attn", prev) if spec.attention else None
        self.dec = []
        for i in reversed(range(len(chans))):
            cout = chans[i - 1] if i > 0 else chans[0]
            self.dec.append(_ResBlock(self.store, f"dec{i}", prev + chans[i], cout, tw, act))
            prev = cout
        self.conv_out = _Conv(self.store, "conv_out", prev, spec.out_channels,
                              bias=False, init="zeros")
        self.store.build(rng_for(init_seed))
        self._last = None

    @property
    def n_params(self) -> int:
        return self.store.size

    def _check_input(self, x, t):
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"expected (B, {self.spec.in_channels}, H, W) input, got {x.shape}"
            )
        div = 1 << self.spec.n_downs
        if x.shape[2] % div or x.shape[3] % div:
            raise ValueError(f"spatial sides must be divisible by {div}")
        if self.spec.temb_width and t is None:
            raise ValueError("this network requires a timestep argument")
        if not self.spec.temb_width and t is not None:
            raise ValueError("this network takes no timestep argument")

    def forward(self, x: np.ndarray, t=None) -> engine.Tensor:
        """Graph-building forward; returns the output Tensor (B, out, H, W)."""
        x = np.asarray(x, dtype=self.store.dtype)
        self._check_input(x, t)
        temb = None
        if self.spec.temb_width:
            tv = np.broadcast_to(np.atleast_1d(np.asarray(t)), (x.shape[0],))
            temb = engine.constant(
                time_embedding(tv, self.spec.temb_width), dtype=self.store.dtype
            )
        h = engine.nhwc(engine.constant(x))
        h = self.conv_in(h)
        skips = []
        for blk, down in zip(self.enc, self.downs):
            h = blk(h, temb)
            skips.append(h)
            if down:
                h = engine.avgpool2(h)
        h = self.mid(h, temb)
        if self.attn is not None:
            h = self.attn(h)
        for blk, down, skip in zip(self.dec, reversed(self.downs), reversed(skips)):
            if down:
                h = engine.upsample2(h)
            h = engine.concat_last([h, skip])
            h = blk(h, temb)
        out = engine.nchw(self.conv_out(h))
        self._last = out if out.requires else None
        return out

    def backward(self, upstream: np.ndarray) -> None:
        """Backpropagate an upstream gradient through the last forward."""
        if self._last is None:
            raise RuntimeError("backward called without a recorded forward")
        last, self._last = self._last, None
        last.backward(np.asarray(upstream, dtype=self.store.dtype))

    def predict(self, x: np.ndarray, t=None) -> np.ndarray:
        """Inference forward without building a graph."""
        with engine.no_grad():
            return self.forward(x, t).data


# --------------------------------------------------------------------------
# checkpoint container: u32 header length, JSON header, float32 payload
# --------------------------------------------------------------------------


def save_checkpoint(path, net: UNet, step: int = 0, extra: dict | None = None) -> None:
    header = {
        "spec": net.spec.to_dict(),
        "step": int(step),
        "n_params": net.n_params,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(net.store.params.astype("<f4").tobytes())


def load_checkpoint(path, dtype=np.float32):
    """Returns (net, step, extra)."""
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode())
        payload = np.frombuffer(fh.read(), dtype="<f4")
    spec = NetSpec.from_dict(header["spec"])
    net = UNet(spec, init_seed=0, dtype=dtype)
    if payload.size != net.n_params:
        raise ValueError(
            f"checkpoint has {payload.size} parameters, architecture needs {net.n_params}"
        )
    net.store.set_flat(payload)
    return net, int(header["step"]), header.get("extra", {})
