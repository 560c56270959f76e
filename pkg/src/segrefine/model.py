"""Dual-branch segmentation network: one shared encoder, two identical decoders.

The encoder is a small residual network. Each stage halves the spatial size
with a stride-2 conv and then applies ``blocks_per_stage`` residual blocks
(conv-norm-relu, conv-norm, skip add, relu). The decoders mirror the stages
with nearest-neighbour upsampling followed by conv-norm-relu, and end in a
1x1 conv producing class logits. There are no encoder-to-decoder skips, so
both decoders see exactly the same bottleneck encoding.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

GROUPS = ("encoder", "decoder_strong", "decoder_weak")
BRANCHES = ("strong", "weak", "both")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_classes: int = 4
    in_channels: int = 1
    input_size: int = 64
    widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    norm_groups: int = 4
    norm_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.widths:
            raise ConfigError("widths must list at least one stage")
        if self.input_size % (2 ** len(self.widths)):
            raise ConfigError(
                f"input size {self.input_size} is not divisible by 2**stages = {2 ** len(self.widths)}"
            )
        for w in self.widths:
            if w % self.norm_groups:
                raise ConfigError(f"stage width {w} not divisible by norm_groups={self.norm_groups}")

    @property
    def stages(self) -> int:
        return len(self.widths)

    def decoder_widths(self) -> list[tuple[int, int]]:
        """(in, out) channels of each decoder block, deepest first."""
        chans = list(self.widths[::-1]) + [self.widths[0]]
        return list(zip(chans[:-1], chans[1:]))


@dataclass
class ParamGroup:
    name: str
    params: dict[str, Tensor] = field(default_factory=dict)
    trainable: bool = True


def _he_conv(rng: np.random.Generator, cout: int, cin: int, k: int, name: str) -> dict[str, Tensor]:
    std = np.sqrt(2.0 / (cin * k * k))
    w = (rng.standard_normal((cout, cin, k, k)) * std).astype(T.get_default_dtype())
    return {
        f"{name}.weight": Tensor(w, requires_grad=True, name=f"{name}.weight"),
        f"{name}.bias": Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias"),
    }


def _norm(c: int, name: str) -> dict[str, Tensor]:
    return {
        f"{name}.gamma": Tensor(np.ones(c), requires_grad=True, name=f"{name}.gamma"),
        f"{name}.beta": Tensor(np.zeros(c), requires_grad=True, name=f"{name}.beta"),
    }


def _decoder_params(cfg: ModelConfig, rng: np.random.Generator, prefix: str) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    for i, (cin, cout) in enumerate(cfg.decoder_widths()):
        params.update(_he_conv(rng, cout, cin, 3, f"{prefix}.up{i}.conv"))
        params.update(_norm(cout, f"{prefix}.up{i}.norm"))
    params.update(_he_conv(rng, cfg.num_classes, cfg.widths[0], 1, f"{prefix}.head"))
    return params


class DualBranchNet:
    def __init__(self, cfg: ModelConfig, groups: dict[str, ParamGroup]):
        self.cfg = cfg
        self.groups = groups

    # -- parameter access -------------------------------------------------
    def param_groups(self) -> list[ParamGroup]:
        return [self.groups[g] for g in GROUPS]

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for g in GROUPS:
            out.update(self.groups[g].params)
        return out

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    def group_digest(self, group: str) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.groups[group].params.items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    # -- forward ----------------------------------------------------------
    def _p(self, group: str, name: str) -> Tensor:
        return self.groups[group].params[f"{group}.{name}"]

    def _conv(self, group, name, x, stride=1, padding=1):
        return T.conv2d(x, self._p(group, f"{name}.weight"), self._p(group, f"{name}.bias"), stride, padding)

    def _gn(self, group, name, x):
        return T.group_norm(
            x, self.cfg.norm_groups, self._p(group, f"{name}.gamma"), self._p(group, f"{name}.beta"), self.cfg.norm_eps
        )

    def encode(self, images: Tensor) -> Tensor:
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1] != cfg.in_channels or images.shape[2:] != (cfg.input_size,) * 2:
            raise ValueError(
                f"expected images of shape (N, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}), got {images.shape}"
            )
        g = "encoder"
        x = images
        for s in range(cfg.stages):
            x = T.relu(self._gn(g, f"stage{s}.down.norm", self._conv(g, f"stage{s}.down.conv", x, stride=2)))
            for b in range(cfg.blocks_per_stage):
                pre = f"stage{s}.block{b}"
                y = T.relu(self._gn(g, f"{pre}.norm1", self._conv(g, f"{pre}.conv1", x)))
                y = self._gn(g, f"{pre}.norm2", self._conv(g, f"{pre}.conv2", y))
                x = T.relu(x + y)
        return x

    def decode(self, encoding: Tensor, branch: str) -> Tensor:
        if branch not in ("strong", "weak"):
            raise ValueError(f"decode branch must be 'strong' or 'weak', got {branch!r}")
        g = f"decoder_{branch}"
        x = encoding
        for i in range(self.cfg.stages):
            x = T.upsample2x_nearest(x)
            x = T.relu(self._gn(g, f"up{i}.norm", self._conv(g, f"up{i}.conv", x)))
        return self._conv(g, "head", x, padding=0)

    def forward(self, images: Tensor, branch: str = "both", return_encoding: bool = False):
        """Run the encoder once and the requested decoder(s) on its output.

        ``branch="both"`` returns ``(strong_logits, weak_logits)``.
        """
        if branch not in BRANCHES:
            raise ValueError(f"branch must be one of {BRANCHES}, got {branch!r}")
        enc = self.encode(images)
        if branch == "both":
            out = (self.decode(enc, "strong"), self.decode(enc, "weak"))
        else:
            out = self.decode(enc, branch)
        return (out, enc) if return_encoding else out

    __call__ = forward


def build_model(cfg: ModelConfig | None = None) -> DualBranchNet:
    """Build a freshly initialised net; independent seeded streams per group."""
    cfg = cfg or ModelConfig()
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    rng_enc, rng_s, rng_w = (np.random.default_rng(s) for s in seeds)

    enc: dict[str, Tensor] = {}
    cin = cfg.in_channels
    for s, w in enumerate(cfg.widths):
        enc.update(_he_conv(rng_enc, w, cin, 3, f"encoder.stage{s}.down.conv"))
        enc.update(_norm(w, f"encoder.stage{s}.down.norm"))
        for b in range(cfg.blocks_per_stage):
            pre = f"encoder.stage{s}.block{b}"
            enc.update(_he_conv(rng_enc, w, w, 3, f"{pre}.conv1"))
            enc.update(_norm(w, f"{pre}.norm1"))
            enc.update(_he_conv(rng_enc, w, w, 3, f"{pre}.conv2"))
            enc.update(_norm(w, f"{pre}.norm2"))
        cin = w

    groups = {
        "encoder": ParamGroup("encoder", enc),
        "decoder_strong": ParamGroup("decoder_strong", _decoder_params(cfg, rng_s, "decoder_strong")),
        "decoder_weak": ParamGroup("decoder_weak", _decoder_params(cfg, rng_w, "decoder_weak")),
    }
    return DualBranchNet(cfg, groups)


def freeze_encoder(net: DualBranchNet) -> None:
    net.groups["encoder"].trainable = False
    net.groups["decoder_strong"].trainable = True
    net.groups["decoder_weak"].trainable = True


def unfreeze_all(net: DualBranchNet) -> None:
    for g in GROUPS:
        net.groups[g].trainable = True


def decoder_pairs(net: DualBranchNet) -> list[tuple[str, Tensor, str, Tensor]]:
    """Zip strong and weak decoder parameters by their branch-relative name."""
    strong = net.groups["decoder_strong"].params
    weak = net.groups["decoder_weak"].params
    s_keys = sorted(k.split(".", 1)[1] for k in strong)
    w_keys = sorted(k.split(".", 1)[1] for k in weak)
    if s_keys != w_keys:
        raise ConfigError("decoders differ in parameter names")
    pairs = []
    for k in s_keys:
        a, b = strong[f"decoder_strong.{k}"], weak[f"decoder_weak.{k}"]
        if a.shape != b.shape:
            raise ConfigError(f"decoder parameter {k} differs in shape: {a.shape} vs {b.shape}")
        pairs.append((f"decoder_strong.{k}", a, f"decoder_weak.{k}", b))
    return pairs


def copy_decoder(net: DualBranchNet, src: str = "weak", dst: str = "strong") -> None:
    """Value-copy one decoder's parameters into the other."""
    if {src, dst} != {"strong", "weak"}:
        raise ValueError(f"copy_decoder needs distinct 'strong'/'weak' branches, got {src!r} -> {dst!r}")
    for s_name, s_param, w_name, w_param in decoder_pairs(net):
        source, target = (w_param, s_param) if src == "weak" else (s_param, w_param)
        target.data = source.data.copy()
        target.grad = None
