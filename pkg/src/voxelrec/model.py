"""Encoder, graphics-code split, volume decoder and image decoder.

Spatial bookkeeping for an ``S x S`` input::

    conv5 -> S        STN1 -> S/2      conv5 -> S/2     STN2 -> S/4
    pool  -> S/8      conv5 -> S/8     pool  -> S/16    [FC 3000]  FC -> code

The volume decoder starts from a dense seed grid, runs three
``upsample x2 -> conv3d`` stages and a final single-channel conv with a
PReLU. For 80^3 and 32^3 volumes the features are upsampled once more
before that final conv (40^3 -> 80^3, 16^3 -> 32^3) so the output is
resolved at full resolution; for 30^3 the final conv is unpadded
(32^3 -> 30^3). The image decoder mirrors this in 2D with four stages.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import BatchNorm, Conv, Layer, Linear, PReLU, RReLU, maxpool, upsample_nearest
from .stn import Localisation, SpatialTransformer
from .tensor import Tensor, as_tensor, concat, no_grad, reshape

VOLUME_RESOLUTIONS = (30, 32, 80)
IMAGE_SIZES = (32, 80)
WEIGHT_MAGIC = b"VXRC"
WEIGHT_VERSION = 1

TRACE_LAYERS = ("Image", "E1", "E2", "E3", "Z", "D1", "D2", "D3", "Volume")


@dataclass
class NetworkConfig:
    image_size: int = 32
    frames: int = 1
    volume_res: int = 32
    shape_len: int = 185
    transform_len: int = 15
    use_batchnorm: bool = True
    use_fc3000: bool = False
    fc_width: int = 3000
    encoder_channels: tuple = (32, 64, 128)
    stn_channels: int = 16
    volume_channels: tuple = (128, 64, 32, 16)
    image_channels: tuple = (128, 64, 32, 16, 8)
    rrelu_lower: float = 1.0 / 8.0
    rrelu_upper: float = 1.0 / 3.0
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.volume_channels = tuple(self.volume_channels)
        self.image_channels = tuple(self.image_channels)
        self.validate()

    @property
    def code_len(self) -> int:
        return self.shape_len + self.transform_len

    @property
    def in_channels(self) -> int:
        return 3 * self.frames

    @classmethod
    def faces(cls, desk: bool = True, **kw) -> NetworkConfig:
        size = 32 if desk else 80
        return cls(image_size=size, volume_res=size, **kw)

    @classmethod
    def video(cls, desk: bool = True, **kw) -> NetworkConfig:
        kw.setdefault("use_fc3000", True)
        return cls.faces(desk, frames=5, **kw)

    @classmethod
    def chairs(cls, desk: bool = True, **kw) -> NetworkConfig:
        kw.setdefault("use_fc3000", True)
        return cls(image_size=32 if desk else 80, volume_res=30, shape_len=599, transform_len=1, **kw)

    def volume_geometry(self) -> tuple[int, int, bool]:
        """(seed size, final conv padding, final upsample)."""
        r = self.volume_res
        if r % 16 == 0:
            return r // 16, 1, True
        if (r + 2) % 8 == 0:
            return (r + 2) // 8, 0, False
        raise ValueError(f"volume resolution {r} has no decoder layout")

    def validate(self):
        if self.volume_res not in VOLUME_RESOLUTIONS:
            raise ValueError(f"volume_res must be one of {VOLUME_RESOLUTIONS}, got {self.volume_res}")
        if self.image_size not in IMAGE_SIZES:
            raise ValueError(f"image_size must be one of {IMAGE_SIZES}, got {self.image_size}")
        if self.frames not in (1, 5):
            raise ValueError("frames must be 1 (image) or 5 (video)")
        if self.shape_len < 1 or self.transform_len < 0:
            raise ValueError("code split needs shape_len >= 1 and transform_len >= 0")
        if len(self.encoder_channels) != 3 or len(self.volume_channels) != 4 or len(self.image_channels) != 5:
            raise ValueError("channel plan needs 3 encoder, 4 volume and 5 image decoder widths")
        if not 0 < self.rrelu_lower <= self.rrelu_upper < 1:
            raise ValueError("invalid RReLU bounds")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("encoder_channels", "volume_channels", "image_channels"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> NetworkConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def digest(self) -> bytes:
        """SHA-256 over the architecture fields (the seed is excluded)."""
        arch = self.to_dict()
        arch.pop("seed")
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).digest()


@dataclass
class ActivationTrace:
    layers: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.layers[name]

    def names(self):
        return list(self.layers)


class _Block(Layer):
    """conv -> [batchnorm] -> RReLU"""

    def __init__(self, conv: Conv, norm: BatchNorm | None, act: RReLU):
        self.conv, self.norm, self.act = conv, norm, act

    def __call__(self, x):
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        return self.act(x)

    def parameters(self):
        params = {f"conv.{k}": v for k, v in self.conv.parameters().items()}
        if self.norm is not None:
            params.update({f"bn.{k}": v for k, v in self.norm.parameters().items()})
        return params

    def buffers(self):
        return {} if self.norm is None else {f"bn.{k}": v for k, v in self.norm.buffers().items()}

    def set_training(self, training):
        self.act.set_training(training)
        if self.norm is not None:
            self.norm.set_training(training)


class Model:
    """The full encoder / twin-decoder network."""

    def __init__(self, config: NetworkConfig, rng: np.random.Generator | None = None):
        config.validate()
        self.config = cfg = config
        init_rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        # separate stream for RReLU slope sampling
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.training = True
        self.modules: dict[str, Layer] = {}

        def block(name, in_ch, out_ch, k, rank, padding=None):
            conv = Conv(in_ch, out_ch, k, rank, init_rng, padding=padding)
            norm = BatchNorm(out_ch) if cfg.use_batchnorm else None
            self.modules[name] = _Block(conv, norm, RReLU(self.rng, cfg.rrelu_lower, cfg.rrelu_upper))
            return self.modules[name]

        s = cfg.image_size
        c1, c2, c3 = cfg.encoder_channels
        self.e1 = block("encoder.conv1", cfg.in_channels, c1, 5, 2)
        self.stn1 = self.modules["encoder.stn1"] = SpatialTransformer(
            c1, s, Localisation.STN1, init_rng, cfg.stn_channels, cfg.use_batchnorm)
        self.e2 = block("encoder.conv2", c1, c2, 5, 2)
        self.stn2 = self.modules["encoder.stn2"] = SpatialTransformer(
            c2, s // 2, Localisation.STN2, init_rng, cfg.stn_channels, cfg.use_batchnorm)
        self.e3 = block("encoder.conv3", c2, c3, 5, 2)
        self.enc_flat = c3 * (s // 16) ** 2
        width = self.enc_flat
        if cfg.use_fc3000:
            self.fc_hidden = self.modules["encoder.fc_hidden"] = Linear(width, cfg.fc_width, init_rng)
            self.fc_hidden_act = RReLU(self.rng, cfg.rrelu_lower, cfg.rrelu_upper)
            width = cfg.fc_width
        else:
            self.fc_hidden = None
        self.fc_code = self.modules["encoder.fc_code"] = Linear(width, cfg.code_len, init_rng)

        vseed, self.vol_final_pad, self.vol_final_up = cfg.volume_geometry()
        self.vol_seed = vseed
        v0, v1, v2, v3 = cfg.volume_channels
        self.vol_fc = self.modules["volume_decoder.fc"] = Linear(cfg.shape_len, v0 * vseed**3, init_rng)
        self.d1 = block("volume_decoder.conv1", v0, v1, 3, 3)
        self.d2 = block("volume_decoder.conv2", v1, v2, 3, 3)
        self.d3 = block("volume_decoder.conv3", v2, v3, 3, 3)
        self.vol_out = self.modules["volume_decoder.out"] = Conv(v3, 1, 3, 3, init_rng, padding=self.vol_final_pad)
        self.vol_act = self.modules["volume_decoder.prelu"] = PReLU()

        self.img_seed = s // 16
        i0, i1, i2, i3, i4 = cfg.image_channels
        self.img_fc = self.modules["image_decoder.fc"] = Linear(cfg.code_len, i0 * self.img_seed**2, init_rng)
        self.img_blocks = [
            block(f"image_decoder.conv{i + 1}", a, b, 5, 2)
            for i, (a, b) in enumerate([(i0, i1), (i1, i2), (i2, i3), (i3, i4)])
        ]
        self.img_out = self.modules["image_decoder.out"] = Conv(i4, cfg.in_channels, 5, 2, init_rng)
        self.img_act = self.modules["image_decoder.prelu"] = PReLU()

    # -- parameters --------------------------------------------------------
    def parameters(self) -> dict[str, Tensor]:
        return {f"{m}.{k}": v for m, layer in self.modules.items() for k, v in layer.parameters().items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{m}.{k}": v for m, layer in self.modules.items() for k, v in layer.buffers().items()}

    def state(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, in a fixed order."""
        out = {k: v.data for k, v in self.parameters().items()}
        out.update(self.buffers())
        return out

    def group_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.parameters().items() if k.startswith(prefix)}

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def set_training(self, training: bool):
        self.training = training
        for layer in self.modules.values():
            layer.set_training(training)
        if self.fc_hidden is not None:
            self.fc_hidden_act.set_training(training)

    # -- forward -------------------------------------------------------------
    def _check_input(self, x: Tensor):
        cfg = self.config
        want = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if x.ndim != 4 or x.shape[1:] != want:
            raise ValueError(f"encoder expects N x {want[0]} x {want[1]} x {want[2]} input, got {x.shape}")

    def encode(self, images, trace: bool = False):
        """Images (N x C x S x S) to graphics codes (N x code_len)."""
        x = as_tensor(images, dtype=np.float32) if not isinstance(images, Tensor) else images
        self._check_input(x)
        tr = ActivationTrace()
        if trace:
            tr.layers["Image"] = x.data
        h = self.e1(x)
        if trace:
            tr.layers["E1"] = h.data
        h = self.stn1(h)
        h = self.e2(h)
        if trace:
            tr.layers["E2"] = h.data
        h = self.stn2(h)
        h, _ = maxpool(h, 2)
        h = self.e3(h)
        if trace:
            tr.layers["E3"] = h.data
        h, _ = maxpool(h, 2)
        h = reshape(h, (h.shape[0], -1))
        if self.fc_hidden is not None:
            h = self.fc_hidden_act(self.fc_hidden(h))
        code = self.fc_code(h)
        if trace:
            tr.layers["Z"] = code.data
            return code, tr
        return code

    def split_code(self, code: Tensor) -> tuple[Tensor, Tensor]:
        k = self.config.shape_len
        return code[:, :k], code[:, k:]

    def decode_volume(self, shape_code, trace: ActivationTrace | None = None) -> Tensor:
        """Shape code (N x shape_len) to continuous volumes (N x R x R x R)."""
        z = as_tensor(shape_code, dtype=np.float32)
        if z.ndim != 2 or z.shape[1] != self.config.shape_len:
            raise ValueError(f"volume decoder expects N x {self.config.shape_len} shape code, got {z.shape}")
        v0 = self.config.volume_channels[0]
        s = self.vol_seed
        h = reshape(self.vol_fc(z), (z.shape[0], v0, s, s, s))
        for name, blk in (("D1", self.d1), ("D2", self.d2), ("D3", self.d3)):
            h = blk(upsample_nearest(h, 2))
            if trace is not None:
                trace.layers[name] = h.data
        if self.vol_final_up:
            h = upsample_nearest(h, 2)
        h = self.vol_act(self.vol_out(h))
        r = self.config.volume_res
        out = reshape(h, (h.shape[0], r, r, r))
        if trace is not None:
            trace.layers["Volume"] = out.data
        return out

    def decode_image(self, shape_code, transform_code, trace: ActivationTrace | None = None) -> Tensor:
        """Full code (shape + transformation slots) to an N x C x S x S image."""
        zs = as_tensor(shape_code, dtype=np.float32)
        zt = as_tensor(transform_code, dtype=np.float32)
        cfg = self.config
        if zs.ndim != 2 or zs.shape[1] != cfg.shape_len or zt.shape != (zs.shape[0], cfg.transform_len):
            raise ValueError(
                f"image decoder expects codes of widths {cfg.shape_len}+{cfg.transform_len}, "
                f"got {zs.shape} and {zt.shape}"
            )
        z = concat([zs, zt], axis=1) if cfg.transform_len else zs
        return self._decode_full(z, trace)

    def _decode_full(self, z: Tensor, trace: ActivationTrace | None = None) -> Tensor:
        i0 = self.config.image_channels[0]
        s = self.img_seed
        h = reshape(self.img_fc(z), (z.shape[0], i0, s, s))
        for i, blk in enumerate(self.img_blocks):
            h = blk(upsample_nearest(h, 2))
            if trace is not None:
                trace.layers[f"I{i + 1}"] = h.data
        out = self.img_act(self.img_out(h))
        if trace is not None:
            trace.layers["Reconstruction"] = out.data
        return out

    def forward_trace(self, images, include_image: bool = False) -> ActivationTrace:
        """Inference pass recording every named layer."""
        with no_grad():
            code, tr = self.encode(images, trace=True)
            zs, zt = self.split_code(code)
            self.decode_volume(zs, trace=tr)
            if include_image:
                self.decode_image(zs, zt, trace=tr)
        return tr


def build(config: NetworkConfig, rng: np.random.Generator | None = None) -> Model:
    return Model(config, rng)


def encode(m: Model, images, trace: bool = False):
    return m.encode(images, trace=trace)


def decode_volume(m: Model, shape_code) -> Tensor:
    return m.decode_volume(shape_code)


def decode_image(m: Model, shape_code, transform_code) -> Tensor:
    return m.decode_image(shape_code, transform_code)


# ---------------------------------------------------------------------------
# weight files


class WeightFileError(ValueError):
    pass


def save_weights(m: Model, path) -> None:
    """Write every parameter and buffer as little-endian float32 records."""
    path = Path(path)
    chunks = [WEIGHT_MAGIC, struct.pack("<I", WEIGHT_VERSION), m.config.digest()]
    for name, arr in m.state().items():
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))


def read_weight_records(path) -> tuple[int, bytes, list[tuple[str, np.ndarray]]]:
    blob = Path(path).read_bytes()
    if len(blob) < 40 or blob[:4] != WEIGHT_MAGIC:
        raise WeightFileError(f"{path}: not a weight file (bad magic {blob[:4]!r})")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != WEIGHT_VERSION:
        raise WeightFileError(f"{path}: unsupported weight format version {version}")
    digest = blob[8:40]
    pos = 40
    records = []
    while pos < len(blob):
        try:
            name, arr, pos = _read_record(blob, pos)
        except (struct.error, ValueError, UnicodeDecodeError) as e:
            raise WeightFileError(f"{path}: truncated or corrupt record at byte {pos} ({e})") from None
        records.append((name, arr))
    return version, digest, records


def _read_record(blob: bytes, pos: int) -> tuple[str, np.ndarray, int]:
    (nlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    name = blob[pos:pos + nlen].decode()
    pos += nlen
    (rank,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    dims = struct.unpack_from(f"<{rank}I", blob, pos)
    pos += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
    pos += 4 * count
    return name, arr, pos


def load_weights(path, config: NetworkConfig) -> Model:
    """Build a model for ``config`` and fill it from ``path``.

    Raises :class:`WeightFileError` naming the first layer whose name or
    shape disagrees with the config.
    """
    _, digest, records = read_weight_records(path)
    m = Model(config)
    params = m.parameters()
    buffers = m.buffers()
    expected = [(k, v.data) for k, v in params.items()] + list(buffers.items())
    for i, (name, want) in enumerate(expected):
        if i >= len(records):
            raise WeightFileError(f"weight file ends before layer {name!r}")
        got_name, arr = records[i]
        if got_name != name or arr.shape != want.shape:
            raise WeightFileError(
                f"layer mismatch at {name!r}: file has {got_name!r} with shape {arr.shape}, "
                f"config expects {want.shape}"
            )
    if len(records) != len(expected):
        raise WeightFileError(f"weight file has {len(records) - len(expected)} unexpected extra records")
    if digest != config.digest():
        raise WeightFileError("config digest differs from the one stored in the weight file")
    for name, arr in records:
        if name in params:
            params[name].data = arr.copy()
        else:
            buffers[name][...] = arr
    return m
