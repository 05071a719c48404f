"""Attention layers that jointly update node and augmented-edge channels.

Three mechanisms:

* ``EdgeSelfAttention`` — self-attention where every ordered pair (i, j) keeps
  its own feature vector; the pair feature modulates the attention logit and
  is itself updated.
* ``GeneralCrossAttention`` — node and pair channels each attend over a small
  set of condition vectors (scaled dot product over the condition rows).
* ``GraphCrossAttention`` — keys/values come from a second, node-aligned
  condition graph, with additive node/pair/graph-attribute terms so the layer
  knows the correspondence between the two graphs.

All layers accept either a single graph (``Z: (n, d)``, ``W: (n, n, d)``) or a
batch (``Z: (B, n, d)``, ``W: (B, n, n, d)``) with an optional boolean pad
mask ``(B, n)``; padded positions get exactly zero attention weight and zero
outputs.  Every layer commutes with node permutations.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
from torch import Tensor, nn


def signed_sqrt(x: Tensor) -> Tensor:
    """Odd square root: sqrt(relu(x)) - sqrt(relu(-x)) == sign(x) sqrt(|x|).

    Compresses large magnitudes so attention logits keep moderate gradients.
    """
    return torch.sign(x) * torch.sqrt(torch.abs(x))


def sinusoidal_time_embedding(t, dim: int, dtype=torch.float64, device=None) -> Tensor:
    """Interleaved sin/cos features of the step index.

    Angular wavelengths run geometrically from 1 to 1e4, so t=0 maps to the
    [0, 1, 0, 1, ...] pattern and all steps t <= 1e4 get distinct embeddings.
    """
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f"time embedding dim must be even and >= 2, got {dim}")
    if not torch.is_tensor(t):
        t = torch.as_tensor(t, dtype=dtype, device=device)
    t = t.to(dtype)
    half = dim // 2
    exponents = torch.arange(half, dtype=dtype, device=t.device)
    denom = max(half - 1, 1)
    wavelengths = torch.pow(torch.tensor(1e4, dtype=dtype, device=t.device), exponents / denom)
    angles = t.reshape(-1, 1) / wavelengths
    emb = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).reshape(-1, dim)
    return emb if t.ndim > 0 else emb.squeeze(0)


def _xavier(out_dim: int, in_dim: int, gen: Optional[torch.Generator] = None) -> Tensor:
    bound = math.sqrt(6.0 / (in_dim + out_dim))
    w = torch.empty(out_dim, in_dim, dtype=torch.float64)
    w.uniform_(-bound, bound, generator=gen)
    return w


def _expand(Z: Tensor, W: Tensor, pad: Optional[Tensor]):
    """Normalize inputs to batched form; returns (Z, W, pad, was_batched)."""
    if Z.ndim == 2:
        if W.ndim != 3:
            raise ValueError("single-graph W must be (n, n, d)")
        Z = Z.unsqueeze(0)
        W = W.unsqueeze(0)
        if pad is not None and pad.ndim == 1:
            pad = pad.unsqueeze(0)
        return Z, W, pad, False
    if Z.ndim != 3 or W.ndim != 4:
        raise ValueError(f"bad input ranks: Z {Z.shape}, W {W.shape}")
    return Z, W, pad, True


def _check_pad(pad: Optional[Tensor], B: int, n: int) -> Optional[Tensor]:
    if pad is None:
        return None
    if pad.shape != (B, n):
        raise ValueError(f"pad mask must be ({B}, {n}), got {tuple(pad.shape)}")
    if not bool(pad.any(dim=1).all()):
        raise ValueError("every graph in a batch needs at least one real node")
    return pad.bool()


class EdgeSelfAttention(nn.Module):
    """Self-attention with per-pair features:

        e'_ij   = act(rho(kappa(Q x_i, K x_j) * E_w e_ij) + E_b e_ij)
        alpha_ij = softmax_j(W_A e'_ij)
        x'_i    = sum_j alpha_ij (V x_j + E_v e'_ij)

    ``kernel`` is "hadamard" or "add"; ``simplified`` pins W_A to the all-ones
    vector and E_v to the identity, in which case the hadamard kernel reduces
    to a plain inner-product logit.  Heads split the feature axis for the
    logit/value combination; with one head this is the formula verbatim.
    """

    def __init__(self, d_in: int, d_attn: int, heads: int = 1, kernel: str = "hadamard",
                 use_rho: bool = True, activation: str = "relu", simplified: bool = False,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if kernel not in ("hadamard", "add"):
            raise ValueError(f"unknown kernel {kernel!r}")
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        if d_attn % heads != 0:
            raise ValueError("d_attn must be divisible by heads")
        self.d_in, self.d_attn, self.heads = d_in, d_attn, heads
        self.kernel, self.use_rho, self.activation = kernel, use_rho, activation
        self.simplified = simplified
        self.Q = nn.Parameter(_xavier(d_attn, d_in, generator))
        self.K = nn.Parameter(_xavier(d_attn, d_in, generator))
        self.V = nn.Parameter(_xavier(d_attn, d_in, generator))
        self.E_w = nn.Parameter(_xavier(d_attn, d_in, generator))
        self.E_b = nn.Parameter(_xavier(d_attn, d_in, generator))
        if not simplified:
            self.W_A = nn.Parameter(_xavier(heads, d_attn // heads, generator))
            self.E_v = nn.Parameter(_xavier(d_attn, d_attn, generator))
        else:
            self.register_parameter("W_A", None)
            self.register_parameter("E_v", None)

    def forward(self, Z: Tensor, W: Tensor, pad_mask: Optional[Tensor] = None):
        Z, W, pad, batched = _expand(Z, W, pad_mask)
        B, n, _ = Z.shape
        pad = _check_pad(pad, B, n)
        qx = Z @ self.Q.T
        kx = Z @ self.K.T
        ew = W @ self.E_w.T
        eb = W @ self.E_b.T
        if self.kernel == "hadamard":
            pre = qx.unsqueeze(2) * kx.unsqueeze(1) * ew
        else:
            pre = (qx.unsqueeze(2) + kx.unsqueeze(1)) * ew
        pair_valid = None
        if pad is not None:
            pair_valid = (pad.unsqueeze(2) & pad.unsqueeze(1)).unsqueeze(-1)
            # keep sqrt away from exact zeros on padded pairs: their backward
            # would otherwise produce 0 * inf
            pre = torch.where(pair_valid, pre, torch.ones_like(pre))
        if self.use_rho:
            pre = signed_sqrt(pre)
        e_new = pre + eb
        if self.activation == "relu":
            e_new = torch.relu(e_new)

        h, dh = self.heads, self.d_attn // self.heads
        e_heads = e_new.reshape(B, n, n, h, dh)
        if self.simplified:
            logits = e_heads.sum(dim=-1)
        else:
            logits = torch.einsum("bijhc,hc->bijh", e_heads, self.W_A)
        if pad is not None:
            key_invalid = ~pad.reshape(B, 1, n, 1)
            logits = logits.masked_fill(key_invalid, float("-inf"))
        alpha = torch.softmax(logits, dim=2)

        vx = Z @ self.V.T
        ev = e_new if self.simplified else e_new @ self.E_v.T
        val = vx.reshape(B, 1, n, h, dh) + ev.reshape(B, n, n, h, dh)
        z_new = torch.einsum("bijh,bijhc->bihc", alpha, val).reshape(B, n, self.d_attn)

        if pad is not None:
            z_new = z_new * pad.unsqueeze(-1)
            e_new = e_new * pair_valid
        if not batched:
            return z_new.squeeze(0), e_new.squeeze(0)
        return z_new, e_new


class GeneralCrossAttention(nn.Module):
    """Node and pair channels attend over m condition vectors:

        x'_i  = softmax((Q_h x_i)(K_h c)^T / sqrt(d')) V_h c
        e'_ij = softmax((Q_e e_ij)(K_e c)^T / sqrt(d')) V_e c

    Outputs are convex combinations of the projected condition rows; with a
    single condition the softmax collapses and the update is an addition of
    the projected condition.
    """

    def __init__(self, d_in: int, d_attn: int, d_cond: int,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.d_in, self.d_attn, self.d_cond = d_in, d_attn, d_cond
        self.Q_h = nn.Parameter(_xavier(d_attn, d_in, generator))
        self.Q_e = nn.Parameter(_xavier(d_attn, d_in, generator))
        self.K_h = nn.Parameter(_xavier(d_attn, d_cond, generator))
        self.V_h = nn.Parameter(_xavier(d_attn, d_cond, generator))
        self.K_e = nn.Parameter(_xavier(d_attn, d_cond, generator))
        self.V_e = nn.Parameter(_xavier(d_attn, d_cond, generator))

    def forward(self, Z: Tensor, W: Tensor, cond: Tensor, pad_mask: Optional[Tensor] = None):
        Z, W, pad, batched = _expand(Z, W, pad_mask)
        B, n, _ = Z.shape
        pad = _check_pad(pad, B, n)
        if cond.ndim == 2:
            cond = cond.unsqueeze(0).expand(B, -1, -1)
        if cond.ndim != 3 or cond.shape[0] != B:
            raise ValueError(f"condition must be (m, d_cond) or (B, m, d_cond), got {tuple(cond.shape)}")
        if cond.shape[1] < 1:
            raise ValueError("need at least one condition vector")
        scale = 1.0 / math.sqrt(self.d_attn)

        kh = cond @ self.K_h.T
        vh = cond @ self.V_h.T
        attn_h = torch.softmax((Z @ self.Q_h.T) @ kh.transpose(1, 2) * scale, dim=-1)
        z_new = attn_h @ vh

        ke = cond @ self.K_e.T
        ve = cond @ self.V_e.T
        qe = (W @ self.Q_e.T).reshape(B, n * n, self.d_attn)
        attn_e = torch.softmax(qe @ ke.transpose(1, 2) * scale, dim=-1)
        e_new = (attn_e @ ve).reshape(B, n, n, self.d_attn)

        if pad is not None:
            z_new = z_new * pad.unsqueeze(-1)
            pair_valid = (pad.unsqueeze(2) & pad.unsqueeze(1)).unsqueeze(-1)
            e_new = e_new * pair_valid
        if not batched:
            return z_new.squeeze(0), e_new.squeeze(0)
        return z_new, e_new


class GraphCrossAttention(nn.Module):
    """Cross-attention onto a node-aligned condition graph:

        e'_ij   = act(rho(kappa(Q x_i, K x^c_j) * E_w (e_ij + e^c_ij))
                      + E_b e^c_ij + G_e g^c)
        alpha_ij = softmax_j(W_A e'_ij)
        x'_i    = sum_j alpha_ij (V x^c_j + E_v e'_ij) + W_h x^c_i + G_h g^c

    Keys and values come from the condition graph; the additive x^c_i / e^c_ij
    terms give the layer the node and pair correspondence.  Jointly permuting
    the main and condition graphs commutes with the layer.
    """

    def __init__(self, d_in: int, d_attn: int, kernel: str = "hadamard",
                 use_rho: bool = True, activation: str = "relu",
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if kernel not in ("hadamard", "add"):
            raise ValueError(f"unknown kernel {kernel!r}")
        if activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {activation!r}")
        self.d_in, self.d_attn = d_in, d_attn
        self.kernel, self.use_rho, self.activation = kernel, use_rho, activation
        self.Q = nn.Parameter(_xavier(d_attn, d_in, generator))
        self.K = nn.Parameter(_xavier(d_attn, d_in, generator))
        self.V = nn.Parameter(_xavier(d_attn, d_in, generator))
        self.E_w = nn.Parameter(_xavier(d_attn, d_in, generator))
        self.E_b = nn.Parameter(_xavier(d_attn, d_in, generator))
        self.W_A = nn.Parameter(_xavier(1, d_attn, generator))
        self.E_v = nn.Parameter(_xavier(d_attn, d_attn, generator))
        self.G_e = nn.Parameter(_xavier(d_attn, d_in, generator))
        self.G_h = nn.Parameter(_xavier(d_attn, d_in, generator))
        self.W_h = nn.Parameter(_xavier(d_attn, d_in, generator))

    def forward(self, Z: Tensor, W: Tensor, Zc: Tensor, Wc: Tensor, gc: Optional[Tensor] = None,
                pad_mask: Optional[Tensor] = None):
        Z, W, pad, batched = _expand(Z, W, pad_mask)
        Zc, Wc, _, _ = _expand(Zc, Wc, None)
        B, n, _ = Z.shape
        if Zc.shape != Z.shape or Wc.shape != W.shape:
            raise ValueError("condition graph must match the main graph's node count and width")
        pad = _check_pad(pad, B, n)
        if gc is None:
            gc = torch.zeros(B, self.d_in, dtype=Z.dtype, device=Z.device)
        elif gc.ndim == 1:
            gc = gc.unsqueeze(0).expand(B, -1)

        qx = Z @ self.Q.T
        kx = Zc @ self.K.T
        ew = (W + Wc) @ self.E_w.T
        eb = Wc @ self.E_b.T
        ge = (gc @ self.G_e.T).reshape(B, 1, 1, self.d_attn)
        if self.kernel == "hadamard":
            pre = qx.unsqueeze(2) * kx.unsqueeze(1) * ew
        else:
            pre = (qx.unsqueeze(2) + kx.unsqueeze(1)) * ew
        pair_valid = None
        if pad is not None:
            pair_valid = (pad.unsqueeze(2) & pad.unsqueeze(1)).unsqueeze(-1)
            pre = torch.where(pair_valid, pre, torch.ones_like(pre))
        if self.use_rho:
            pre = signed_sqrt(pre)
        e_new = pre + eb + ge
        if self.activation == "relu":
            e_new = torch.relu(e_new)

        logits = (e_new @ self.W_A.T).squeeze(-1)
        if pad is not None:
            logits = logits.masked_fill(~pad.unsqueeze(1), float("-inf"))
        alpha = torch.softmax(logits, dim=2)

        vx = Zc @ self.V.T
        ev = e_new @ self.E_v.T
        val = vx.unsqueeze(1) + ev
        z_new = torch.einsum("bij,bijc->bic", alpha, val)
        z_new = z_new + Zc @ self.W_h.T + (gc @ self.G_h.T).unsqueeze(1)

        if pad is not None:
            z_new = z_new * pad.unsqueeze(-1)
            e_new = e_new * pair_valid
        if not batched:
            return z_new.squeeze(0), e_new.squeeze(0)
        return z_new, e_new
