"""Graph encoder into the latent space and lightweight linear task decoders.

The encoder embeds node/edge categories (or real features), runs a stack of
node+pair attention blocks, and projects to per-node latents Z and per-pair
latents W.  Graph-level labels ride on an appended virtual node so that the
same encoder realizes both the joint encoding of (graph, label) and the
condition encoding of a label-masked graph.  Every task decoder is a single
linear layer.

Pretraining minimizes reconstruction losses plus a latent regularizer; labels
are randomly masked per step so the masked and unmasked encodings both train.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import Tensor, nn

from .denoiser import LatentGraph, SelfBlock, DenoiserConfig, _linear
from .graphs import Graph, MaskedGraph

REGULARIZATIONS = ("none", "kl", "vq", "latent-layernorm")
RECON_TASKS = ("node", "edge", "edge-from-nodes", "node-from-edges", "pair-from-edge", "graph")


@dataclass(frozen=True)
class EncoderConfig:
    d_v: int
    d_e: int
    d_g: int = 0
    latent_dim: int = 8
    hidden: int = 64
    depth: int = 2
    heads: int = 1
    backbone: str = "edge-transformer"
    regularization: str = "latent-layernorm"
    label_mask_prob: float = 0.5
    use_virtual_node: bool = False
    readout: str = "mean"
    node_kind: str = "categorical"
    edge_kind: str = "categorical"
    label_kind: str = "none"  # none | real | class
    num_classes: int = 0
    recon_tasks: tuple[str, ...] = ("node", "edge")
    kl_weight: float = 1e-5
    vq_codebook_size: int = 64
    vq_commitment: float = 0.25
    kernel: str = "hadamard"
    use_rho: bool = True
    activation: str = "relu"
    node_vocab: Optional[tuple[str, ...]] = None
    edge_vocab: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if self.regularization not in REGULARIZATIONS:
            raise ValueError(f"regularization must be one of {REGULARIZATIONS}")
        if not 0.0 <= self.label_mask_prob <= 1.0:
            raise ValueError("label_mask_prob must be a probability")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")
        for t in self.recon_tasks:
            if t not in RECON_TASKS:
                raise ValueError(f"unknown reconstruction task {t!r}")
        if self.node_vocab is not None:
            object.__setattr__(self, "node_vocab", tuple(self.node_vocab))
        if self.edge_vocab is not None:
            object.__setattr__(self, "edge_vocab", tuple(self.edge_vocab))
        if isinstance(self.recon_tasks, list):
            object.__setattr__(self, "recon_tasks", tuple(self.recon_tasks))

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["recon_tasks"] = list(self.recon_tasks)
        if self.node_vocab is not None:
            d["node_vocab"] = list(self.node_vocab)
        if self.edge_vocab is not None:
            d["edge_vocab"] = list(self.edge_vocab)
        return d

    @staticmethod
    def from_dict(d: dict) -> "EncoderConfig":
        d = dict(d)
        d["recon_tasks"] = tuple(d.get("recon_tasks", ("node", "edge")))
        if d.get("node_vocab") is not None:
            d["node_vocab"] = tuple(d["node_vocab"])
        if d.get("edge_vocab") is not None:
            d["edge_vocab"] = tuple(d["edge_vocab"])
        return EncoderConfig(**d)


class DecoderHead(nn.Module):
    """Exactly one linear layer mapping latents to task outputs."""

    def __init__(self, task: str, in_dim: int, out_dim: int, kind: str,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if kind not in ("categorical-logits", "real"):
            raise ValueError(f"unknown head kind {kind!r}")
        self.task, self.kind = task, kind
        self.linear = _linear(out_dim, in_dim, generator)

    def forward(self, x: Tensor) -> Tensor:
        return self.linear(x)


def gaussian_kl(mu: Tensor, logvar: Tensor) -> Tensor:
    """Per-vector KL(N(mu, diag sigma^2) || N(0, I)) = 0.5 sum(mu^2 + s^2 - 1 - log s^2)."""
    return 0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=-1)


class _EncoderMpnnBlock(nn.Module):
    """Message passing gated by the graph's own pair features."""

    def __init__(self, d: int, gen: Optional[torch.Generator]):
        super().__init__()
        self.ln = nn.LayerNorm(d, dtype=torch.float64)
        self.msg = _linear(d, d, gen)
        self.gate = _linear(d, d, gen)
        self.update = nn.Sequential(_linear(4 * d, d, gen), nn.ReLU(),
                                    _linear(d, 4 * d, gen, zero=True))

    def forward(self, Z, W, t_feat, cond, pad):
        zn = self.ln(Z)
        gates = torch.sigmoid(self.gate(W))
        msgs = self.msg(zn).unsqueeze(1) * gates
        if pad is not None:
            msgs = msgs * pad.reshape(pad.shape[0], 1, -1, 1)
        Z = Z + self.update(zn + msgs.sum(dim=2))
        if pad is not None:
            Z = Z * pad.unsqueeze(-1)
        return Z, W


class GraphEncoder(nn.Module):
    """E: (X, A[, g]) -> LatentGraph (Z, W), deterministic given parameters."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        d, dl = config.hidden, config.latent_dim
        self.node_embed = _linear(d, config.d_v, gen)
        self.edge_embed = _linear(d, config.d_e, gen)
        self.node_mask_emb = nn.Parameter(torch.randn(d, generator=gen, dtype=torch.float64) * 0.1)
        self.edge_mask_emb = nn.Parameter(torch.randn(d, generator=gen, dtype=torch.float64) * 0.1)
        if config.use_virtual_node:
            self.vn_emb = nn.Parameter(torch.randn(d, generator=gen, dtype=torch.float64) * 0.1)
            self.vn_edge_emb = nn.Parameter(torch.randn(d, generator=gen, dtype=torch.float64) * 0.1)
            self.label_mask_emb = nn.Parameter(torch.randn(d, generator=gen, dtype=torch.float64) * 0.1)
            if config.label_kind == "real":
                self.label_embed = nn.Sequential(_linear(d, max(config.d_g, 1), gen), nn.ReLU(),
                                                 _linear(d, d, gen))
            elif config.label_kind == "class":
                emb = nn.Embedding(config.num_classes, d, dtype=torch.float64)
                with torch.no_grad():
                    emb.weight.normal_(0.0, 0.1, generator=gen)
                self.label_embed = emb
        block_cfg = DenoiserConfig(latent_dim=dl, hidden=d, depth=1, heads=config.heads,
                                   kernel=config.kernel, use_rho=config.use_rho,
                                   activation=config.activation)
        if config.backbone == "mpnn":
            self.blocks = nn.ModuleList(_EncoderMpnnBlock(d, gen) for _ in range(config.depth))
        else:
            self.blocks = nn.ModuleList(SelfBlock(block_cfg, gen) for _ in range(config.depth))
        self.out_z = _linear(dl, d, gen)
        self.out_w = _linear(dl, d, gen)
        if config.regularization == "kl":
            self.logvar_z = _linear(dl, d, gen)
            self.logvar_w = _linear(dl, d, gen)
        if config.regularization == "vq":
            self.codebook = nn.Parameter(
                torch.randn(config.vq_codebook_size, dl, generator=gen, dtype=torch.float64) * 0.5)

    @property
    def dtype(self):
        return self.out_z.weight.dtype

    def latent_nodes(self, n: int) -> int:
        """Latent node count for an n-node input (virtual node included)."""
        return n + 1 if self.config.use_virtual_node else n

    def forward(self, X, A, g, node_mask, edge_mask, graph_mask, pad=None, sample_kl=False,
                kl_generator: Optional[torch.Generator] = None):
        """Batched encoding.

        X (B, n, d_v), A (B, n, n, d_e), g (B, d_g); boolean masks mark MASKed
        positions; pad (B, n) marks real nodes.  Returns (Z, W, pad_out, aux)
        where pad_out includes the virtual node and aux carries what the
        regularizer needs.
        """
        cfg = self.config
        B, n = X.shape[0], X.shape[1]
        h_z = self.node_embed(X)
        h_w = self.edge_embed(A)
        if node_mask is not None and node_mask.any():
            h_z = torch.where(node_mask.unsqueeze(-1), self.node_mask_emb.to(h_z.dtype), h_z)
        if edge_mask is not None and edge_mask.any():
            h_w = torch.where(edge_mask.unsqueeze(-1), self.edge_mask_emb.to(h_w.dtype), h_w)

        if cfg.use_virtual_node:
            if cfg.label_kind == "real" and g is not None and g.shape[-1] > 0:
                lab = self.label_embed(g)
            elif cfg.label_kind == "class" and g is not None and g.shape[-1] > 0:
                lab = self.label_embed(g[..., 0].long())
            else:
                lab = self.label_mask_emb.to(h_z.dtype).expand(B, -1)
            if graph_mask is not None:
                gm = graph_mask.reshape(B, 1)
                lab = torch.where(gm, self.label_mask_emb.to(h_z.dtype).expand(B, -1), lab)
            vn = self.vn_emb.to(h_z.dtype) + lab
            h_z = torch.cat([h_z, vn.unsqueeze(1)], dim=1)
            ve = self.vn_edge_emb.to(h_w.dtype).expand(B, n + 1, 1, -1)
            h_w = torch.cat([h_w, ve[:, :n].transpose(1, 2)], dim=1)
            h_w = torch.cat([h_w, ve], dim=2)
            if pad is not None:
                pad = torch.cat([pad, torch.ones(B, 1, dtype=torch.bool, device=pad.device)], dim=1)

        for block in self.blocks:
            h_z, h_w = block(h_z, h_w, None, None, pad)

        Z = self.out_z(h_z)
        W = self.out_w(h_w)
        aux = {}
        if cfg.regularization == "kl":
            aux["logvar_z"] = self.logvar_z(h_z)
            aux["logvar_w"] = self.logvar_w(h_w)
            aux["mu_z"], aux["mu_w"] = Z, W
            if sample_kl:
                ez = torch.randn(Z.shape, generator=kl_generator, dtype=Z.dtype)
                ew = torch.randn(W.shape, generator=kl_generator, dtype=W.dtype)
                Z = Z + (0.5 * aux["logvar_z"]).exp() * ez
                W = W + (0.5 * aux["logvar_w"]).exp() * ew
        elif cfg.regularization == "vq":
            Z, q_loss_z = self._quantize(Z)
            W, q_loss_w = self._quantize(W)
            aux["vq_loss"] = q_loss_z + q_loss_w
        elif cfg.regularization == "latent-layernorm":
            Z = _latent_layernorm(Z)
            W = _latent_layernorm(W)
        if pad is not None:
            Z = Z * pad.unsqueeze(-1)
            pair = (pad.unsqueeze(2) & pad.unsqueeze(1)).unsqueeze(-1)
            W = W * pair
        return Z, W, pad, aux

    def _quantize(self, x: Tensor):
        flat = x.reshape(-1, self.config.latent_dim)
        dist = torch.cdist(flat, self.codebook.to(x.dtype))
        idx = dist.argmin(dim=1)
        quant = self.codebook.to(x.dtype)[idx].reshape(x.shape)
        codebook_loss = (quant - x.detach()).pow(2).mean()
        commit_loss = (x - quant.detach()).pow(2).mean()
        quant = x + (quant - x).detach()  # straight-through
        return quant, codebook_loss + self.config.vq_commitment * commit_loss

    def encode(self, item: Union[Graph, MaskedGraph]) -> LatentGraph:
        """Single-graph deterministic encoding (KL mode returns the mean)."""
        X, A, g, nm, em, gm = _item_tensors(item, self.dtype)
        self._check_vocab(item)
        with torch.no_grad():
            Z, W, _, _ = self.forward(X.unsqueeze(0), A.unsqueeze(0), g.unsqueeze(0),
                                      nm.unsqueeze(0), em.unsqueeze(0), gm.unsqueeze(0))
        return LatentGraph(Z=Z.squeeze(0), W=W.squeeze(0))

    def _check_vocab(self, item: Union[Graph, MaskedGraph]) -> None:
        g = item.base if isinstance(item, MaskedGraph) else item
        if g.d_v != self.config.d_v or g.d_e != self.config.d_e:
            raise ValueError(
                f"graph feature dims (d_v={g.d_v}, d_e={g.d_e}) do not match the "
                f"trained encoder (d_v={self.config.d_v}, d_e={self.config.d_e})")
        if self.config.node_vocab is not None and g.node_vocab is not None \
                and g.node_vocab != self.config.node_vocab:
            raise ValueError(f"unknown node vocabulary {g.node_vocab!r}")
        if self.config.edge_vocab is not None and g.edge_vocab is not None \
                and g.edge_vocab != self.config.edge_vocab:
            raise ValueError(f"unknown edge vocabulary {g.edge_vocab!r}")


def _latent_layernorm(x: Tensor, eps: float = 1e-8) -> Tensor:
    mu = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, keepdim=True, unbiased=False)
    return (x - mu) / torch.sqrt(var + eps)


def _item_tensors(item: Union[Graph, MaskedGraph], dtype):
    if isinstance(item, MaskedGraph):
        g = item.base
        nm = torch.as_tensor(item.node_mask)
        em = torch.as_tensor(item.edge_mask)
        gm = torch.as_tensor(item.graph_mask)
    else:
        g = item
        nm = torch.zeros(g.n, dtype=torch.bool)
        em = torch.zeros(g.n, g.n, dtype=torch.bool)
        gm = torch.tensor(False)
    X = torch.as_tensor(g.X, dtype=dtype)
    A = torch.as_tensor(g.A, dtype=dtype)
    gv = torch.as_tensor(g.g, dtype=dtype)
    return X, A, gv, nm, em, gm


def batch_tensors(items: Sequence[Union[Graph, MaskedGraph]], dtype):
    """Pad a list of (possibly masked) graphs into batched tensors."""
    graphs = [it.base if isinstance(it, MaskedGraph) else it for it in items]
    B = len(items)
    n_max = max(g.n for g in graphs)
    d_v, d_e, d_g = graphs[0].d_v, graphs[0].d_e, graphs[0].d_g
    X = torch.zeros(B, n_max, d_v, dtype=dtype)
    A = torch.zeros(B, n_max, n_max, d_e, dtype=dtype)
    g = torch.zeros(B, d_g, dtype=dtype)
    nm = torch.zeros(B, n_max, dtype=torch.bool)
    em = torch.zeros(B, n_max, n_max, dtype=torch.bool)
    gm = torch.zeros(B, dtype=torch.bool)
    pad = torch.zeros(B, n_max, dtype=torch.bool)
    for b, it in enumerate(items):
        gr = graphs[b]
        X[b, : gr.n] = torch.as_tensor(gr.X, dtype=dtype)
        A[b, : gr.n, : gr.n] = torch.as_tensor(gr.A, dtype=dtype)
        g[b] = torch.as_tensor(gr.g, dtype=dtype)
        pad[b, : gr.n] = True
        if isinstance(it, MaskedGraph):
            nm[b, : gr.n] = torch.as_tensor(it.node_mask)
            em[b, : gr.n, : gr.n] = torch.as_tensor(it.edge_mask)
            gm[b] = bool(it.graph_mask)
    return X, A, g, nm, em, gm, pad


# ---------------------------------------------------------------------------
# decoding and losses
# ---------------------------------------------------------------------------


def readout_vector(Z: Tensor, readout: str, n_real: Optional[int] = None) -> Tensor:
    """Graph-level summary of per-node latents (single graph)."""
    if readout == "virtual-node":
        return Z[-1]
    core = Z if n_real is None else Z[:n_real]
    if readout == "mean":
        return core.mean(dim=0)
    if readout == "sum":
        return core.sum(dim=0)
    raise ValueError(f"unknown readout {readout!r}")


def decode_task(H: LatentGraph, head: DecoderHead, readout: str = "mean",
                n_real: Optional[int] = None) -> Tensor:
    """Apply a task head: node heads map Z rows, edge heads map W entries,
    graph heads map the readout vector.  Categorical heads return logits."""
    n = H.n if n_real is None else n_real
    if head.task == "node":
        return head(H.Z[:n])
    if head.task == "edge":
        return head(H.W[:n, :n])
    if head.task == "graph":
        return head(readout_vector(H.Z, readout, n_real))
    if head.task == "edge-from-nodes":
        zi = H.Z[:n].unsqueeze(1).expand(n, n, -1)
        zj = H.Z[:n].unsqueeze(0).expand(n, n, -1)
        return head(torch.cat([zi, zj], dim=-1))
    if head.task == "node-from-edges":
        return head(H.W[:n, :n].mean(dim=1))
    if head.task == "pair-from-edge":
        return head(H.W[:n, :n])
    raise ValueError(f"unknown head task {head.task!r}")


def make_heads(config: EncoderConfig, seed: int = 0) -> nn.ModuleDict:
    """One linear head per enabled reconstruction/prediction task."""
    gen = torch.Generator().manual_seed(seed)
    dl = config.latent_dim
    heads = nn.ModuleDict()
    node_kind = "categorical-logits" if config.node_kind == "categorical" else "real"
    edge_kind = "categorical-logits" if config.edge_kind == "categorical" else "real"
    for task in config.recon_tasks:
        if task == "node":
            heads[task] = DecoderHead(task, dl, config.d_v, node_kind, gen)
        elif task == "edge":
            heads[task] = DecoderHead(task, dl, config.d_e, edge_kind, gen)
        elif task == "edge-from-nodes":
            heads[task] = DecoderHead(task, 2 * dl, config.d_e, edge_kind, gen)
        elif task == "node-from-edges":
            heads[task] = DecoderHead(task, dl, config.d_v, node_kind, gen)
        elif task == "pair-from-edge":
            heads[task] = DecoderHead(task, dl, 2 * config.d_v, node_kind, gen)
        elif task == "graph":
            out = config.num_classes if config.label_kind == "class" else max(config.d_g, 1)
            kind = "categorical-logits" if config.label_kind == "class" else "real"
            heads[task] = DecoderHead(task, dl, out, kind, gen)
    return heads


def _masked_ce(logits: Tensor, target_onehot: Tensor, valid: Tensor) -> Tensor:
    logp = torch.log_softmax(logits, dim=-1)
    ce = -(target_onehot * logp).sum(dim=-1)
    return (ce * valid).sum() / valid.sum().clamp(min=1)


def _masked_mse(pred: Tensor, target: Tensor, valid: Tensor) -> Tensor:
    se = (pred - target).pow(2).mean(dim=-1)
    return (se * valid).sum() / valid.sum().clamp(min=1)


def reconstruction_losses(X, A, g, Z, W, pad, heads: nn.ModuleDict, config: EncoderConfig,
                          graph_target: Optional[Tensor] = None) -> dict[str, Tensor]:
    """Per-task losses on a batch; cross-entropy for categorical targets, MSE
    for real ones.  Padded positions contribute nothing.  ``graph_target``
    overrides g as the label target (used when g was masked in the input)."""
    B, n = X.shape[0], X.shape[1]
    node_valid = pad.to(X.dtype)
    pair_valid = (pad.unsqueeze(2) & pad.unsqueeze(1)).to(X.dtype)
    Zr, Wr = Z[:, :n], W[:, :n, :n]
    losses: dict[str, Tensor] = {}
    for task, head in heads.items():
        if task == "node":
            out = head(Zr)
            losses[task] = _masked_ce(out, X, node_valid) if head.kind == "categorical-logits" \
                else _masked_mse(out, X, node_valid)
        elif task == "edge":
            out = head(Wr)
            losses[task] = _masked_ce(out, A, pair_valid) if head.kind == "categorical-logits" \
                else _masked_mse(out, A, pair_valid)
        elif task == "edge-from-nodes":
            zi = Zr.unsqueeze(2).expand(B, n, n, -1)
            zj = Zr.unsqueeze(1).expand(B, n, n, -1)
            out = head(torch.cat([zi, zj], dim=-1))
            losses[task] = _masked_ce(out, A, pair_valid) if head.kind == "categorical-logits" \
                else _masked_mse(out, A, pair_valid)
        elif task == "node-from-edges":
            denom = pad.sum(dim=1).to(X.dtype).reshape(B, 1, 1).clamp(min=1)
            row = (Wr * pair_valid.unsqueeze(-1)).sum(dim=2) / denom
            out = head(row)
            losses[task] = _masked_ce(out, X, node_valid) if head.kind == "categorical-logits" \
                else _masked_mse(out, X, node_valid)
        elif task == "pair-from-edge":
            out = head(Wr)
            d_v = config.d_v
            ti = X.unsqueeze(2).expand(B, n, n, d_v)
            tj = X.unsqueeze(1).expand(B, n, n, d_v)
            if head.kind == "categorical-logits":
                losses[task] = 0.5 * (_masked_ce(out[..., :d_v], ti, pair_valid)
                                      + _masked_ce(out[..., d_v:], tj, pair_valid))
            else:
                losses[task] = 0.5 * (_masked_mse(out[..., :d_v], ti, pair_valid)
                                      + _masked_mse(out[..., d_v:], tj, pair_valid))
        elif task == "graph":
            if config.readout == "virtual-node":
                vec = Z[:, -1]
            else:
                vec = _batch_readout(Zr, pad, config.readout)
            out = head(vec)
            target = graph_target if graph_target is not None else g
            if head.kind == "categorical-logits":
                ysel = target[:, 0].long()
                losses[task] = nn.functional.cross_entropy(out, ysel)
            else:
                losses[task] = (out - target).pow(2).mean()
    return losses


def _batch_readout(Z: Tensor, pad: Tensor, readout: str) -> Tensor:
    if readout == "virtual-node":
        return Z[:, -1]
    mask = pad.to(Z.dtype).unsqueeze(-1)
    if readout == "sum":
        return (Z * mask).sum(dim=1)
    if readout == "mean":
        return (Z * mask).sum(dim=1) / mask.sum(dim=1).clamp(min=1)
    raise ValueError(f"unknown readout {readout!r}")


def regularization_loss(aux: dict, mode: str, config: Optional[EncoderConfig] = None) -> Tensor:
    """none / latent-layernorm return 0 (the latter transforms H instead)."""
    if mode in ("none", "latent-layernorm"):
        return torch.tensor(0.0, dtype=torch.float64)
    if mode == "kl":
        kl = gaussian_kl(aux["mu_z"], aux["logvar_z"]).mean() \
            + gaussian_kl(aux["mu_w"], aux["logvar_w"]).mean()
        weight = config.kl_weight if config is not None else 1e-5
        return weight * kl
    if mode == "vq":
        return aux["vq_loss"]
    raise ValueError(f"unknown regularization {mode!r}")


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    encoder: GraphEncoder
    heads: nn.ModuleDict
    loss_curve: list[dict] = field(default_factory=list)


def pretrain_autoencoder(graphs: Sequence[Graph], config: EncoderConfig,
                         epochs: int = 200, batch_size: int = 32, lr: float = 3e-3,
                         warmup: int = 10, seed: int = 0,
                         dtype=torch.float64) -> PretrainResult:
    """Jointly train the encoder and all heads on reconstruction + regularizer.

    With label_mask_prob = p, each example's label is replaced by the MASK
    embedding with independent probability p per step, so the label-masked
    encoding trains alongside the joint one.  Deterministic per seed.
    """
    if not graphs:
        raise ValueError("dataset must be nonempty")
    encoder = GraphEncoder(config, seed=seed).to(dtype)
    heads = make_heads(config, seed=seed + 1).to(dtype)
    params = list(encoder.parameters()) + list(heads.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    sched = _warmup_cosine(opt, warmup, epochs)
    gen = torch.Generator().manual_seed(seed + 2)
    order_gen = np.random.default_rng(seed + 3)

    X, A, g, nm, em, gm, pad = batch_tensors(graphs, dtype)
    N = len(graphs)
    curve = []
    for epoch in range(epochs):
        perm = order_gen.permutation(N)
        epoch_loss = 0.0
        nb = 0
        for start in range(0, N, batch_size):
            idx = torch.as_tensor(perm[start:start + batch_size])
            mask_draw = torch.rand(len(idx), generator=gen, dtype=torch.float64)
            gmask = (mask_draw < config.label_mask_prob) | gm[idx]
            gb = g[idx] * (~gmask).reshape(-1, 1).to(dtype)
            Z, W, pad_out, aux = encoder(X[idx], A[idx], gb, nm[idx], em[idx], gmask,
                                         pad[idx], sample_kl=(config.regularization == "kl"),
                                         kl_generator=gen)
            losses = reconstruction_losses(X[idx], A[idx], g[idx], Z, W, pad[idx], heads,
                                           config, graph_target=g[idx])
            total = sum(losses.values()) + regularization_loss(aux, config.regularization, config)
            if not torch.isfinite(total):
                raise RuntimeError(f"pretraining diverged at epoch {epoch}: loss={total.item()}")
            opt.zero_grad()
            total.backward()
            opt.step()
            epoch_loss += float(total.detach())
            nb += 1
        sched.step()
        curve.append({"epoch": epoch, "loss": epoch_loss / max(nb, 1)})
    return PretrainResult(encoder=encoder, heads=heads, loss_curve=curve)


def _warmup_cosine(opt, warmup: int, total: int):
    def factor(step: int) -> float:
        if warmup > 0 and step < warmup:
            return (step + 1) / warmup
        if total <= warmup:
            return 1.0
        prog = (step - warmup) / max(total - warmup, 1)
        return 0.5 * (1.0 + math.cos(math.pi * min(prog, 1.0)))

    return torch.optim.lr_scheduler.LambdaLR(opt, factor)
