"""Latent diffusion: training objective, reverse-process samplers, and the
prediction-as-conditional-generation pipeline.

Training adds Gaussian noise to frozen encoder latents and fits the denoiser
to recover the clean latent (default) or the noise.  Sampling starts from
Gaussian noise in latent space, iterates generalized reverse steps (ancestral
DDPM at stride 1, or a deterministic DDIM subsequence), then decodes node and
edge categories by argmax of the task-head logits; logits of (i, j) and (j, i)
are averaged before the argmax so decoded undirected graphs are symmetric.

Prediction encodes a partially masked graph as the condition, generates the
full latent conditionally, and decodes only the masked positions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace as dc_replace
from typing import Optional, Sequence, Union

import numpy as np
import torch
from torch import Tensor, nn

from . import schedule as sched_mod
from .autoencoder import DecoderHead, EncoderConfig, GraphEncoder, batch_tensors, readout_vector
from .denoiser import Denoiser, LatentGraph, _linear
from .graphs import Graph, MaskedGraph
from .schedule import NoiseSchedule, ddim_subsequence, ddpm_sigma


class PipelineError(RuntimeError):
    """Configuration mismatch between pipeline pieces (latent dims, heads)."""


@dataclass(frozen=True)
class DiffusionConfig:
    schedule: dict = field(default_factory=lambda: {"T": 1000, "beta_start": 1e-4,
                                                    "beta_end": 0.02, "kind": "linear"})
    parameterization: str = "x0"
    sampler: str = "ddpm"
    ddim_steps: int = 200
    conditioning: str = "none"
    ensemble_k: int = 1
    guidance: str = "none"

    def __post_init__(self):
        if self.parameterization not in ("x0", "eps"):
            raise ValueError("parameterization must be 'x0' or 'eps'")
        if self.sampler not in ("ddpm", "ddim"):
            raise ValueError("sampler must be 'ddpm' or 'ddim'")
        if self.guidance != "none":
            raise ValueError("guidance is not supported")

    def make_schedule(self) -> NoiseSchedule:
        return NoiseSchedule.from_config(self.schedule)

    def to_dict(self) -> dict:
        return {**self.__dict__, "schedule": dict(self.schedule)}

    @staticmethod
    def from_dict(d: dict) -> "DiffusionConfig":
        return DiffusionConfig(**d)


class ConditionEncoder(nn.Module):
    """Embeds raw conditions into vectors the denoiser attends over.

    ``mlp`` handles scalar/vector properties, ``class-embedding`` class ids;
    masked-graph conditions go through the shared graph encoder instead and
    never through this module.
    """

    def __init__(self, kind: str, in_dim: int, out_dim: int, num_classes: int = 0,
                 seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.kind, self.in_dim, self.out_dim = kind, in_dim, out_dim
        self.num_classes = num_classes
        if kind == "mlp":
            self.net = nn.Sequential(_linear(out_dim, in_dim, gen), nn.ReLU(),
                                     _linear(out_dim, out_dim, gen))
        elif kind == "class-embedding":
            emb = nn.Embedding(num_classes, out_dim, dtype=torch.float64)
            with torch.no_grad():
                emb.weight.normal_(0.0, 0.1, generator=gen)
            self.net = emb
        else:
            raise ValueError(f"unknown condition encoder kind {kind!r}")

    def forward(self, y: Tensor) -> Tensor:
        """(B, d_y) or (B,) class ids -> (B, 1, out_dim): one condition row."""
        if self.kind == "class-embedding":
            return self.net(y.reshape(-1).long()).unsqueeze(1)
        if y.ndim == 1:
            y = y.unsqueeze(-1) if self.in_dim == 1 else y.unsqueeze(0)
        return self.net(y).unsqueeze(1)

    def to_config(self) -> dict:
        return {"kind": self.kind, "in_dim": self.in_dim, "out_dim": self.out_dim,
                "num_classes": self.num_classes}


# ---------------------------------------------------------------------------
# latent padding helpers
# ---------------------------------------------------------------------------


def pad_latents(latents: Sequence[LatentGraph], dtype=None):
    """Stack variable-size latents into (Z, W, pad) batch tensors."""
    dtype = dtype or latents[0].Z.dtype
    B = len(latents)
    n_max = max(l.n for l in latents)
    d = latents[0].d
    Z = torch.zeros(B, n_max, d, dtype=dtype)
    W = torch.zeros(B, n_max, n_max, d, dtype=dtype)
    pad = torch.zeros(B, n_max, dtype=torch.bool)
    for b, l in enumerate(latents):
        Z[b, : l.n] = l.Z.to(dtype)
        W[b, : l.n, : l.n] = l.W.to(dtype)
        pad[b, : l.n] = True
    return Z, W, pad


def _alpha_bar_coeffs(t: Tensor, sched: NoiseSchedule, dtype):
    ab = torch.as_tensor(sched.alpha_bars, dtype=dtype)[t.long() - 1]
    return ab.sqrt(), (1.0 - ab).sqrt()


def q_sample_latent(Z0: Tensor, W0: Tensor, t: Tensor, eps_z: Tensor, eps_w: Tensor,
                    sched: NoiseSchedule):
    """Forward marginal applied channelwise; t is a (B,) tensor of steps."""
    s, r = _alpha_bar_coeffs(t, sched, Z0.dtype)
    Zt = s.reshape(-1, 1, 1) * Z0 + r.reshape(-1, 1, 1) * eps_z
    Wt = s.reshape(-1, 1, 1, 1) * W0 + r.reshape(-1, 1, 1, 1) * eps_w
    return Zt, Wt


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def diffusion_training_loss_batch(Z0, W0, t, eps_z, eps_w, denoiser, cond, config: DiffusionConfig,
                                  sched: NoiseSchedule, pad: Optional[Tensor] = None) -> Tensor:
    """Mean squared prediction error over all valid latent entries."""
    Zt, Wt = q_sample_latent(Z0, W0, t, eps_z, eps_w, sched)
    pred_z, pred_w = denoiser(Zt, Wt, t, cond, pad)
    if config.parameterization == "x0":
        tgt_z, tgt_w = Z0, W0
    else:
        tgt_z, tgt_w = eps_z, eps_w
    se_z = (pred_z - tgt_z).pow(2)
    se_w = (pred_w - tgt_w).pow(2)
    if pad is None:
        return (se_z.sum() + se_w.sum()) / (se_z.numel() + se_w.numel())
    node_valid = pad.unsqueeze(-1).to(se_z.dtype)
    pair_valid = (pad.unsqueeze(2) & pad.unsqueeze(1)).unsqueeze(-1).to(se_w.dtype)
    num = (se_z * node_valid).sum() + (se_w * pair_valid).sum()
    den = node_valid.sum() * se_z.shape[-1] + pair_valid.sum() * se_w.shape[-1]
    return num / den


def diffusion_training_loss(H0: LatentGraph, t: int, eps: LatentGraph, denoiser,
                            condition, config: DiffusionConfig, sched: NoiseSchedule) -> Tensor:
    """Single-graph form of the training objective."""
    cond = condition
    if isinstance(condition, LatentGraph):
        cond = (condition.Z.unsqueeze(0), condition.W.unsqueeze(0))
    elif torch.is_tensor(condition) and condition.ndim == 2:
        cond = condition.unsqueeze(0)
    tt = torch.tensor([t])
    return diffusion_training_loss_batch(
        H0.Z.unsqueeze(0), H0.W.unsqueeze(0), tt,
        eps.Z.unsqueeze(0), eps.W.unsqueeze(0), denoiser, cond, config, sched)


@dataclass
class DiffusionTrainResult:
    denoiser: Denoiser
    loss_curve: list[dict] = field(default_factory=list)


def train_diffusion(latents: Sequence[LatentGraph], denoiser, config: DiffusionConfig,
                    conditions: Optional[Sequence] = None, steps: int = 1000,
                    batch_size: int = 32, lr: float = 1e-3, warmup: int = 20,
                    seed: int = 0, dtype=torch.float64,
                    condition_encoder: Optional[ConditionEncoder] = None) -> DiffusionTrainResult:
    """Fit the denoiser on frozen latents; t uniform on [1, T], fresh Gaussian
    noise per step, deterministic per seed.  Raw vector conditions are mapped
    through ``condition_encoder`` (trained jointly) when one is given."""
    if not latents:
        raise ValueError("dataset must be nonempty")
    denoiser = denoiser.to(dtype)
    sched = config.make_schedule()
    Z0_all, W0_all, pad_all = pad_latents(latents, dtype)
    cond_all = None
    if conditions is not None:
        if isinstance(conditions[0], LatentGraph):
            cz, cw, _ = pad_latents(conditions, dtype)
            cond_all = ("latent", cz, cw)
        else:
            stacked = torch.stack([torch.as_tensor(np.asarray(c), dtype=dtype).reshape(-1)
                                   for c in conditions])
            cond_all = ("vector", stacked)
    params = list(denoiser.parameters())
    if condition_encoder is not None:
        condition_encoder = condition_encoder.to(dtype)
        params += list(condition_encoder.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    lr_sched = _warmup_cosine(opt, warmup, steps)
    gen = torch.Generator().manual_seed(seed)
    N = len(latents)
    curve = []
    for step in range(steps):
        idx = torch.randint(0, N, (min(batch_size, N),), generator=gen)
        Z0, W0, pad = Z0_all[idx], W0_all[idx], pad_all[idx]
        cond = None
        if cond_all is not None:
            if cond_all[0] == "latent":
                cond = (cond_all[1][idx], cond_all[2][idx])
            elif condition_encoder is not None:
                cond = condition_encoder(cond_all[1][idx])
            else:
                cond = cond_all[1][idx].unsqueeze(1)
        t = torch.randint(1, sched.T + 1, (len(idx),), generator=gen)
        eps_z = torch.randn(Z0.shape, generator=gen, dtype=dtype)
        eps_w = torch.randn(W0.shape, generator=gen, dtype=dtype)
        loss = diffusion_training_loss_batch(Z0, W0, t, eps_z, eps_w, denoiser, cond,
                                             config, sched, pad)
        if not torch.isfinite(loss):
            raise RuntimeError(f"diffusion training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        lr_sched.step()
        curve.append({"step": step, "loss": float(loss.detach())})
    return DiffusionTrainResult(denoiser=denoiser, loss_curve=curve)


def _warmup_cosine(opt, warmup: int, total: int):
    import math

    def factor(step: int) -> float:
        if warmup > 0 and step < warmup:
            return (step + 1) / warmup
        if total <= warmup:
            return 1.0
        prog = (step - warmup) / max(total - warmup, 1)
        return 0.5 * (1.0 + math.cos(math.pi * min(prog, 1.0)))

    return torch.optim.lr_scheduler.LambdaLR(opt, factor)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def _reverse_steps(config: DiffusionConfig, sched: NoiseSchedule):
    """(t, t_prev, sigma) triples; the last hop goes to t = 0 (clean output)."""
    if config.sampler == "ddpm":
        ts = list(range(sched.T, 0, -1))
    else:
        ts = ddim_subsequence(sched.T, min(config.ddim_steps, sched.T))
    triples = []
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        sigma = ddpm_sigma(t, sched) if config.sampler == "ddpm" else 0.0
        triples.append((t, t_prev, sigma))
    return triples


@torch.no_grad()
def sample_latents(B: int, n: int, latent_dim: int, denoiser, config: DiffusionConfig,
                   cond=None, generator: Optional[torch.Generator] = None,
                   init_noise=None, pad: Optional[Tensor] = None,
                   dtype=torch.float64):
    """Run the reverse chain for B latent graphs of n nodes; returns (Z, W)."""
    sched = config.make_schedule()
    if init_noise is not None:
        Z, W = init_noise
        Z, W = Z.clone().to(dtype), W.clone().to(dtype)
        if Z.ndim == 2:
            Z, W = Z.unsqueeze(0), W.unsqueeze(0)
    else:
        Z = torch.randn(B, n, latent_dim, generator=generator, dtype=dtype)
        W = torch.randn(B, n, n, latent_dim, generator=generator, dtype=dtype)
    if pad is not None:
        Z = Z * pad.unsqueeze(-1)
        W = W * (pad.unsqueeze(2) & pad.unsqueeze(1)).unsqueeze(-1)
    for t, t_prev, sigma in _reverse_steps(config, sched):
        pred_z, pred_w = denoiser(Z, W, t, cond, pad)
        if config.parameterization == "eps":
            x0_z = sched_mod.x0_from_eps(Z, pred_z, t, sched)
            x0_w = sched_mod.x0_from_eps(W, pred_w, t, sched)
        else:
            x0_z, x0_w = pred_z, pred_w
        if sigma > 0.0:
            ez = torch.randn(Z.shape, generator=generator, dtype=dtype)
            ew = torch.randn(W.shape, generator=generator, dtype=dtype)
        else:
            ez = ew = None
        Z = sched_mod.ddim_step(Z, x0_z, t, t_prev, sigma, ez, sched)
        W = sched_mod.ddim_step(W, x0_w, t, t_prev, sigma, ew, sched)
        if pad is not None:
            Z = Z * pad.unsqueeze(-1)
            W = W * (pad.unsqueeze(2) & pad.unsqueeze(1)).unsqueeze(-1)
    return Z, W


def decode_graph(latent: LatentGraph, node_head: DecoderHead, edge_head: DecoderHead,
                 node_vocab, edge_vocab, undirected: bool = True) -> Graph:
    """Argmax decoding of a sampled latent into a categorical graph.

    Edge logits of (i, j) and (j, i) are averaged before the argmax for
    undirected graphs; the MASK category (last index) is excluded from
    decoding; category 0 means "no edge".
    """
    n = latent.n
    node_logits = node_head(latent.Z)
    edge_logits = edge_head(latent.W)
    if undirected:
        edge_logits = 0.5 * (edge_logits + edge_logits.transpose(0, 1))
    node_logits = node_logits[:, :-1]  # never decode the MASK token
    edge_logits = edge_logits[:, :, :-1]
    types = node_logits.argmax(dim=-1).cpu().numpy()
    a_types = edge_logits.argmax(dim=-1).cpu().numpy()
    np.fill_diagonal(a_types, 0)
    X = np.zeros((n, len(node_vocab)))
    X[np.arange(n), types] = 1.0
    A = np.zeros((n, n, len(edge_vocab)))
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    A[ii, jj, a_types] = 1.0
    return Graph(X=X, A=A, node_vocab=tuple(node_vocab), edge_vocab=tuple(edge_vocab),
                 undirected=undirected)


@torch.no_grad()
def sample(n_nodes: int, denoiser, node_head: DecoderHead, edge_head: DecoderHead,
           config: DiffusionConfig, node_vocab, edge_vocab, condition=None,
           generator: Optional[torch.Generator] = None, latent_dim: Optional[int] = None,
           dtype=torch.float64) -> Graph:
    """Generate one graph with the given node count."""
    d = latent_dim if latent_dim is not None else denoiser.config.latent_dim
    cond = _normalize_condition(condition)
    Z, W = sample_latents(1, n_nodes, d, denoiser, config, cond=cond,
                          generator=generator, dtype=dtype)
    return decode_graph(LatentGraph(Z=Z.squeeze(0), W=W.squeeze(0)), node_head, edge_head,
                        node_vocab, edge_vocab)


def _normalize_condition(condition):
    if condition is None:
        return None
    if isinstance(condition, LatentGraph):
        return (condition.Z.unsqueeze(0), condition.W.unsqueeze(0))
    return condition


# ---------------------------------------------------------------------------
# prediction as conditional generation
# ---------------------------------------------------------------------------


def _check_compat(encoder: GraphEncoder, denoiser) -> None:
    if encoder.config.latent_dim != denoiser.config.latent_dim:
        raise PipelineError(
            f"latent_dim mismatch: encoder {encoder.config.latent_dim} vs "
            f"denoiser {denoiser.config.latent_dim}")


@torch.no_grad()
def predict(masked: MaskedGraph, encoder: GraphEncoder, denoiser, head: DecoderHead,
            config: DiffusionConfig, generator: Optional[torch.Generator] = None,
            init_noise=None):
    """Encode the masked graph as the condition, generate the full latent
    conditionally, and decode only the masked positions with the task head.

    With ensemble_k > 1, regression heads return the elementwise median and
    categorical heads a majority vote (lowest index wins ties).
    """
    preds = [p for p, in _predict_group([masked], encoder, denoiser, head, config,
                                        generator, init_noise)]
    return preds[0]


@torch.no_grad()
def predict_many(masked_list: Sequence[MaskedGraph], encoder: GraphEncoder, denoiser,
                 head: DecoderHead, config: DiffusionConfig,
                 generator: Optional[torch.Generator] = None) -> list:
    """Batched prediction; graphs are grouped by node count for the chain."""
    order = {}
    for i, m in enumerate(masked_list):
        order.setdefault(m.n, []).append(i)
    out = [None] * len(masked_list)
    for n, idxs in sorted(order.items()):
        group = [masked_list[i] for i in idxs]
        for i, (p,) in zip(idxs, _predict_group(group, encoder, denoiser, head, config,
                                                generator, None)):
            out[i] = p
    return out


def _predict_group(group: Sequence[MaskedGraph], encoder: GraphEncoder, denoiser,
                   head: DecoderHead, config: DiffusionConfig,
                   generator, init_noise) -> list:
    """All graphs in the group share one node count."""
    _check_compat(encoder, denoiser)
    dtype = encoder.dtype
    B = len(group)
    X, A, g, nm, em, gm, pad = batch_tensors(group, dtype)
    Zc, Wc, pad_lat, _ = encoder(X, A, g, nm, em, gm, pad)
    n_lat = Zc.shape[1]
    d = encoder.config.latent_dim

    cond = (Zc, Wc)
    if denoiser.config.conditioning == "general":
        cond = Zc.mean(dim=1, keepdim=True)  # single condition vector per graph

    ens = []
    for _ in range(max(config.ensemble_k, 1)):
        Z, W = sample_latents(B, n_lat, d, denoiser, config, cond=cond,
                              generator=generator, init_noise=init_noise,
                              pad=pad_lat, dtype=dtype)
        ens.append(_decode_masked(group, Z, W, head, encoder.config))
    return _combine_ensemble(ens, head)


def _decode_masked(group, Z, W, head: DecoderHead, enc_cfg: EncoderConfig) -> list:
    out = []
    for b, m in enumerate(group):
        lat = LatentGraph(Z=Z[b, : _lat_n(m.n, enc_cfg)],
                          W=W[b, : _lat_n(m.n, enc_cfg), : _lat_n(m.n, enc_cfg)])
        if head.task == "graph":
            vec = readout_vector(lat.Z, enc_cfg.readout, n_real=m.n)
            val = head(vec)
            out.append(_finalize(val, head))
        elif head.task == "node":
            rows = torch.nonzero(torch.as_tensor(m.node_mask)).flatten()
            val = head(lat.Z[rows])
            out.append(_finalize(val, head))
        elif head.task == "edge":
            ii, jj = np.nonzero(m.edge_mask)
            val = head(lat.W[ii, jj])
            out.append(_finalize(val, head))
        else:
            raise PipelineError(f"head task {head.task!r} is not predictable")
    return out


def _lat_n(n: int, enc_cfg: EncoderConfig) -> int:
    return n + 1 if enc_cfg.use_virtual_node else n


def _finalize(val: Tensor, head: DecoderHead) -> np.ndarray:
    v = val.detach().cpu().numpy()
    if head.kind == "categorical-logits":
        return np.argmax(v, axis=-1)
    return v


def _combine_ensemble(ens: list, head: DecoderHead) -> list:
    if len(ens) == 1:
        return [(p,) for p in ens[0]]
    combined = []
    for items in zip(*ens):
        stack = np.stack(items)
        if head.kind == "categorical-logits":
            flat = stack.reshape(len(items), -1)
            votes = np.apply_along_axis(lambda c: np.bincount(c).argmax(), 0, flat)
            combined.append((votes.reshape(stack.shape[1:]),))
        else:
            combined.append((np.median(stack, axis=0),))
    return combined


def predict_scalar(masked: MaskedGraph, encoder: GraphEncoder, denoiser, head: DecoderHead,
                   config: DiffusionConfig, generator=None, init_noise=None) -> float:
    """Graph-level regression convenience: a single float."""
    val = predict(masked, encoder, denoiser, head, config, generator, init_noise)
    return float(np.asarray(val).reshape(-1)[0])


# ---------------------------------------------------------------------------
# node-count sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NodeCountSampler:
    """Empirical histogram of training-set sizes."""

    counts: dict[int, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def probs(self) -> dict[int, float]:
        t = self.total
        return {n: c / t for n, c in sorted(self.counts.items())}

    def sample(self, rng: np.random.Generator) -> int:
        ns = sorted(self.counts)
        p = np.array([self.counts[n] for n in ns], dtype=np.float64)
        return int(rng.choice(ns, p=p / p.sum()))


def number_of_nodes_sampler(train_set: Sequence[Graph]) -> NodeCountSampler:
    counts: dict[int, int] = {}
    for g in train_set:
        counts[g.n] = counts.get(g.n, 0) + 1
    return NodeCountSampler(counts=counts)
