"""The denoising network over latent graphs.

The backbone is a stack of node+pair attention blocks (pre-layer-norm,
attention, residual, then a feedforward with residual, separately for the node
and pair channels).  Each block input receives a projected sinusoidal step
embedding.  Conditioning modes:

* ``none``      — self-attention blocks only.
* ``additive``  — unconditional core; the condition latent is added to the
                  final output.
* ``general``   — each module is self-attention, cross-attention over a set of
                  condition vectors, self-attention.
* ``masked-graph`` — as ``general`` but the cross layer attends onto a
                  node-aligned condition graph latent.

Block output projections start at zero so the untrained stack is the identity
on its residual stream; the clean-data prediction of a fresh network is
therefore exactly zero (plus the condition in additive mode).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import Tensor, nn

from .layers import (
    EdgeSelfAttention,
    GeneralCrossAttention,
    GraphCrossAttention,
    _xavier,
    sinusoidal_time_embedding,
)

CONDITIONING_MODES = ("none", "general", "masked-graph", "additive")
BACKBONES = ("edge-transformer", "mpnn")
READOUTS = ("virtual-node", "mean", "sum")


@dataclass(frozen=True)
class LatentGraph:
    """Continuous latents: per-node Z (n, d) and per-pair W (n, n, d)."""

    Z: Tensor
    W: Tensor

    def __post_init__(self):
        if self.Z.ndim != 2 or self.W.ndim != 3:
            raise ValueError("LatentGraph holds a single graph: Z (n, d), W (n, n, d)")
        n, d = self.Z.shape
        if self.W.shape != (n, n, d):
            raise ValueError(f"W must be ({n}, {n}, {d}), got {tuple(self.W.shape)}")

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def d(self) -> int:
        return self.Z.shape[1]


@dataclass(frozen=True)
class DenoiserConfig:
    latent_dim: int = 8
    hidden: int = 64
    depth: int = 2
    heads: int = 1
    time_embed_dim: int = 32
    conditioning: str = "none"
    backbone: str = "edge-transformer"
    readout: str = "mean"
    cond_dim: int = 0  # width of general-condition vectors; 0 = latent_dim
    kernel: str = "hadamard"
    use_rho: bool = True
    activation: str = "relu"
    # positional-encoding hook; no encodings are implemented
    positional_encoding: str = "none"

    def __post_init__(self):
        if self.conditioning not in CONDITIONING_MODES:
            raise ValueError(f"conditioning must be one of {CONDITIONING_MODES}")
        if self.backbone not in BACKBONES:
            raise ValueError(f"backbone must be one of {BACKBONES}")
        if self.readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}")
        if self.backbone == "mpnn" and self.conditioning not in ("masked-graph", "additive"):
            raise ValueError("the mpnn backbone needs a fixed-structure condition")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        return DenoiserConfig(**d)


class ConditioningError(ValueError):
    """Condition kind does not match the configured conditioning mode."""


def _linear(d_out: int, d_in: int, gen: Optional[torch.Generator], zero: bool = False) -> nn.Linear:
    lin = nn.Linear(d_in, d_out, dtype=torch.float64)
    with torch.no_grad():
        if zero:
            lin.weight.zero_()
        else:
            lin.weight.copy_(_xavier(d_out, d_in, gen))
        lin.bias.zero_()
    return lin


def _ffn(d: int, gen: Optional[torch.Generator]) -> nn.Sequential:
    return nn.Sequential(_linear(4 * d, d, gen), nn.ReLU(), _linear(d, 4 * d, gen, zero=True))


class _ChannelNorm(nn.Module):
    """Layer norm over the feature axis for node or pair tensors."""

    def __init__(self, d: int):
        super().__init__()
        self.norm = nn.LayerNorm(d, dtype=torch.float64)

    def forward(self, x):
        return self.norm(x)


class SelfBlock(nn.Module):
    def __init__(self, cfg: DenoiserConfig, gen: Optional[torch.Generator]):
        super().__init__()
        d = cfg.hidden
        self.t_z = _linear(d, cfg.time_embed_dim, gen)
        self.t_w = _linear(d, cfg.time_embed_dim, gen)
        self.ln_z1, self.ln_w1 = _ChannelNorm(d), _ChannelNorm(d)
        self.ln_z2, self.ln_w2 = _ChannelNorm(d), _ChannelNorm(d)
        self.attn = EdgeSelfAttention(d, d, heads=cfg.heads, kernel=cfg.kernel,
                                      use_rho=cfg.use_rho, activation=cfg.activation,
                                      generator=gen)
        self.proj_z = _linear(d, d, gen, zero=True)
        self.proj_w = _linear(d, d, gen, zero=True)
        self.ffn_z = _ffn(d, gen)
        self.ffn_w = _ffn(d, gen)

    def forward(self, Z, W, t_feat, cond, pad):
        if t_feat is not None:
            Z = Z + self.t_z(t_feat).unsqueeze(1)
            W = W + self.t_w(t_feat).unsqueeze(1).unsqueeze(1)
        az, aw = self.attn(self.ln_z1(Z), self.ln_w1(W), pad)
        Z = Z + self.proj_z(az)
        W = W + self.proj_w(aw)
        Z = Z + self.ffn_z(self.ln_z2(Z))
        W = W + self.ffn_w(self.ln_w2(W))
        return Z, W


class GeneralCrossBlock(nn.Module):
    def __init__(self, cfg: DenoiserConfig, gen: Optional[torch.Generator]):
        super().__init__()
        d = cfg.hidden
        d_cond = cfg.cond_dim or cfg.latent_dim
        self.t_z = _linear(d, cfg.time_embed_dim, gen)
        self.t_w = _linear(d, cfg.time_embed_dim, gen)
        self.ln_z1, self.ln_w1 = _ChannelNorm(d), _ChannelNorm(d)
        self.ln_z2, self.ln_w2 = _ChannelNorm(d), _ChannelNorm(d)
        self.attn = GeneralCrossAttention(d, d, d_cond, generator=gen)
        self.proj_z = _linear(d, d, gen, zero=True)
        self.proj_w = _linear(d, d, gen, zero=True)
        self.ffn_z = _ffn(d, gen)
        self.ffn_w = _ffn(d, gen)

    def forward(self, Z, W, t_feat, cond, pad):
        if t_feat is not None:
            Z = Z + self.t_z(t_feat).unsqueeze(1)
            W = W + self.t_w(t_feat).unsqueeze(1).unsqueeze(1)
        az, aw = self.attn(self.ln_z1(Z), self.ln_w1(W), cond, pad)
        Z = Z + self.proj_z(az)
        W = W + self.proj_w(aw)
        Z = Z + self.ffn_z(self.ln_z2(Z))
        W = W + self.ffn_w(self.ln_w2(W))
        return Z, W


class GraphCrossBlock(nn.Module):
    def __init__(self, cfg: DenoiserConfig, gen: Optional[torch.Generator]):
        super().__init__()
        d = cfg.hidden
        self.t_z = _linear(d, cfg.time_embed_dim, gen)
        self.t_w = _linear(d, cfg.time_embed_dim, gen)
        self.ln_z1, self.ln_w1 = _ChannelNorm(d), _ChannelNorm(d)
        self.ln_z2, self.ln_w2 = _ChannelNorm(d), _ChannelNorm(d)
        self.attn = GraphCrossAttention(d, d, kernel=cfg.kernel, use_rho=cfg.use_rho,
                                        activation=cfg.activation, generator=gen)
        self.proj_z = _linear(d, d, gen, zero=True)
        self.proj_w = _linear(d, d, gen, zero=True)
        self.ffn_z = _ffn(d, gen)
        self.ffn_w = _ffn(d, gen)

    def forward(self, Z, W, t_feat, cond, pad):
        Zc, Wc, gc = cond
        if t_feat is not None:
            Z = Z + self.t_z(t_feat).unsqueeze(1)
            W = W + self.t_w(t_feat).unsqueeze(1).unsqueeze(1)
        az, aw = self.attn(self.ln_z1(Z), self.ln_w1(W), Zc, Wc, gc, pad)
        Z = Z + self.proj_z(az)
        W = W + self.proj_w(aw)
        Z = Z + self.ffn_z(self.ln_z2(Z))
        W = W + self.ffn_w(self.ln_w2(W))
        return Z, W


class MpnnBlock(nn.Module):
    """Sum-aggregated neighbor messages gated by condition pair latents.

    Only valid when the graph structure is known (prediction tasks); updates
    the node channel and passes the pair channel through.
    """

    def __init__(self, cfg: DenoiserConfig, gen: Optional[torch.Generator]):
        super().__init__()
        d = cfg.hidden
        self.t_z = _linear(d, cfg.time_embed_dim, gen)
        self.ln = _ChannelNorm(d)
        self.msg = _linear(d, d, gen)
        self.gate = _linear(d, d, gen)
        self.update = _ffn(d, gen)

    def forward(self, Z, W, t_feat, cond, pad):
        Zc, Wc, _ = cond
        if t_feat is not None:
            Z = Z + self.t_z(t_feat).unsqueeze(1)
        zn = self.ln(Z)
        gates = torch.sigmoid(self.gate(Wc))
        msgs = self.msg(zn).unsqueeze(1) * gates
        if pad is not None:
            msgs = msgs * pad.reshape(pad.shape[0], 1, -1, 1)
        m = msgs.sum(dim=2)
        Z = Z + self.update(zn + m)
        if pad is not None:
            Z = Z * pad.unsqueeze(-1)
        return Z, W


class Denoiser(nn.Module):
    """Predicts the clean latent graph from a noised one and the step index."""

    def __init__(self, config: DenoiserConfig, seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        d, dl = config.hidden, config.latent_dim
        self.in_z = _linear(d, dl, gen)
        self.in_w = _linear(d, dl, gen)
        self.time_mlp = nn.Sequential(
            _linear(config.time_embed_dim, config.time_embed_dim, gen), nn.ReLU(),
            _linear(config.time_embed_dim, config.time_embed_dim, gen))
        if config.conditioning == "masked-graph" or config.backbone == "mpnn":
            self.cond_in_z = _linear(d, dl, gen)
            self.cond_in_w = _linear(d, dl, gen)
        blocks: list[nn.Module] = []
        for _ in range(config.depth):
            if config.backbone == "mpnn":
                blocks.append(MpnnBlock(config, gen))
            elif config.conditioning == "general":
                blocks += [SelfBlock(config, gen), GeneralCrossBlock(config, gen),
                           SelfBlock(config, gen)]
            elif config.conditioning == "masked-graph":
                blocks += [SelfBlock(config, gen), GraphCrossBlock(config, gen),
                           SelfBlock(config, gen)]
            else:
                blocks.append(SelfBlock(config, gen))
        self.blocks = nn.ModuleList(blocks)
        self.out_z = _linear(dl, d, gen)
        self.out_w = _linear(dl, d, gen)

    def forward(self, Z: Tensor, W: Tensor, t, cond=None, pad_mask: Optional[Tensor] = None):
        """Batched clean-latent prediction.

        Z (B, n, dl), W (B, n, n, dl); t is an int or a (B,) tensor of step
        indices; cond depends on the conditioning mode (see predict_clean).
        """
        cfg = self.config
        squeeze = Z.ndim == 2
        if squeeze:
            Z, W = Z.unsqueeze(0), W.unsqueeze(0)
            if pad_mask is not None and pad_mask.ndim == 1:
                pad_mask = pad_mask.unsqueeze(0)
        B = Z.shape[0]
        self._check_condition(cond)

        t = torch.as_tensor(t, dtype=Z.dtype, device=Z.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(B)
        t_feat = self.time_mlp(sinusoidal_time_embedding(t, cfg.time_embed_dim,
                                                         dtype=Z.dtype, device=Z.device))

        h_z = self.in_z(Z)
        h_w = self.in_w(W)
        block_cond = None
        add_z = add_w = None
        if cfg.conditioning == "general":
            block_cond = cond if cond.ndim == 3 else cond.unsqueeze(0).expand(B, -1, -1)
        elif cfg.conditioning == "masked-graph":
            Zc, Wc = cond
            if Zc.ndim == 2:
                Zc, Wc = Zc.unsqueeze(0), Wc.unsqueeze(0)
            hc_z = self.cond_in_z(Zc)
            hc_w = self.cond_in_w(Wc)
            # graph-attribute channel for the cross layer: mean over the
            # condition's (real) node latents, a permutation-invariant summary
            if pad_mask is not None:
                denom = pad_mask.sum(dim=1, keepdim=True).to(hc_z.dtype)
                gc = (hc_z * pad_mask.unsqueeze(-1)).sum(dim=1) / denom
            else:
                gc = hc_z.mean(dim=1)
            block_cond = (hc_z, hc_w, gc)
        elif cfg.conditioning == "additive":
            Zc, Wc = cond
            if Zc.ndim == 2:
                Zc, Wc = Zc.unsqueeze(0), Wc.unsqueeze(0)
            add_z, add_w = Zc, Wc
            if cfg.backbone == "mpnn":
                # the mpnn still needs the known structure for its messages
                block_cond = (self.cond_in_z(Zc), self.cond_in_w(Wc), None)

        for block in self.blocks:
            h_z, h_w = block(h_z, h_w, t_feat, block_cond, pad_mask)

        out_z = self.out_z(h_z)
        out_w = self.out_w(h_w)
        if add_z is not None:
            out_z = out_z + add_z
            out_w = out_w + add_w
        if pad_mask is not None:
            out_z = out_z * pad_mask.unsqueeze(-1)
            pair = (pad_mask.unsqueeze(2) & pad_mask.unsqueeze(1)).unsqueeze(-1)
            out_w = out_w * pair
        if squeeze:
            return out_z.squeeze(0), out_w.squeeze(0)
        return out_z, out_w

    def _check_condition(self, cond) -> None:
        mode = self.config.conditioning
        if mode == "none" and cond is not None:
            raise ConditioningError("unconditional denoiser got a condition")
        if mode != "none" and cond is None:
            raise ConditioningError(f"conditioning mode {mode!r} needs a condition")

    def predict_clean(self, latent: LatentGraph, t: int, condition=None) -> LatentGraph:
        """Single-graph convenience wrapper around forward.

        ``condition`` is None, an (m, d_cond) tensor (general mode), or a
        LatentGraph (masked-graph / additive modes).
        """
        cond = condition
        if isinstance(condition, LatentGraph):
            cond = (condition.Z, condition.W)
        Z0, W0 = self.forward(latent.Z, latent.W, t, cond)
        return LatentGraph(Z=Z0, W=W0)


class ZeroDenoiser(nn.Module):
    """A denoiser whose core output is identically zero.

    In additive conditioning this makes the generated latent exactly the
    condition latent; it is the executable extreme case of the error bound.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config

    def forward(self, Z, W, t, cond=None, pad_mask: Optional[Tensor] = None):
        if self.config.conditioning == "additive":
            Zc, Wc = cond
            if Zc.ndim == Z.ndim:
                return Zc.clone(), Wc.clone()
            return Zc.unsqueeze(0).expand_as(Z).clone(), Wc.unsqueeze(0).expand_as(W).clone()
        return torch.zeros_like(Z), torch.zeros_like(W)

    def predict_clean(self, latent: LatentGraph, t: int, condition=None) -> LatentGraph:
        cond = condition
        if isinstance(condition, LatentGraph):
            cond = (condition.Z, condition.W)
        Z0, W0 = self.forward(latent.Z, latent.W, t, cond)
        return LatentGraph(Z=Z0, W=W0)
