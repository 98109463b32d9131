"""Noise-prediction network: LSTM encoder, broadcast fusion, multi-head
self-attention and a per-time-step linear read-out.

Shapes used throughout: ``n`` batch, ``L`` sequence length, ``H`` hidden
width, ``B`` heads, ``d_b`` per-head width, ``D = B * d_b``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_FORMAT = "evdiffusion-checkpoint/1"


@dataclass
class NetworkConfig:
    seq_len: int
    hidden: int = 48
    heads: int = 4
    head_dim: int = 48
    conditional: bool = False
    n_labels: int = 2
    # recorded so checkpoints state the architecture unambiguously
    layer_norm: bool = False
    residual: bool = False

    def __post_init__(self):
        if self.seq_len < 2:
            raise ValueError("seq_len must be >= 2")
        if self.hidden <= 0 or self.hidden % 2:
            raise ValueError(f"hidden width must be positive and even, got {self.hidden}")
        if self.heads <= 0 or self.head_dim <= 0:
            raise ValueError("heads and head_dim must be positive")
        if self.conditional and self.n_labels < 1:
            raise ValueError("conditional model needs n_labels >= 1")
        if self.layer_norm or self.residual:
            raise ValueError("layer_norm/residual variants are not implemented")

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def step_embedding(t, width: int, dtype=torch.float64) -> torch.Tensor:
    """Sinusoidal diffusion-step embedding with interleaved (sin, cos) pairs.

    Element ``2j`` is ``sin(t / 10000**(2j/width))`` and element ``2j+1`` the
    matching cosine. ``t`` may be an int or a 1-D tensor of steps; the result
    has shape ``(width,)`` or ``(len(t), width)``.
    """
    if width % 2:
        raise ValueError(f"embedding width must be even, got {width}")
    scalar = not torch.is_tensor(t) and np.ndim(t) == 0
    steps = torch.as_tensor(t, dtype=dtype).reshape(-1, 1)
    j = torch.arange(width // 2, dtype=dtype)
    freq = torch.pow(torch.tensor(10000.0, dtype=dtype), -2.0 * j / width)
    angle = steps * freq
    emb = torch.stack([torch.sin(angle), torch.cos(angle)], dim=-1).reshape(len(steps), width)
    return emb[0] if scalar else emb


class Denoiser(nn.Module):
    """epsilon_theta(x_t, t[, label]) for univariate sequences of fixed length."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        H, B, db, D = config.hidden, config.heads, config.head_dim, config.model_dim
        self.lstm = nn.LSTM(1, H, batch_first=True)
        self.cond = nn.Linear(config.n_labels, H) if config.conditional else None
        self.w_q = nn.Parameter(torch.empty(B, H, db))
        self.w_k = nn.Parameter(torch.empty(B, H, db))
        self.w_v = nn.Parameter(torch.empty(B, H, db))
        self.w_o = nn.Parameter(torch.empty(D, D))
        self.out = nn.Linear(D, 1)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        H, D = self.config.hidden, self.config.model_dim
        bound_h = 1.0 / math.sqrt(H)
        for p in self.lstm.parameters():
            nn.init.uniform_(p, -bound_h, bound_h)
        with torch.no_grad():
            # gate order (input, forget, cell, output); forget bias 1 in total
            self.lstm.bias_ih_l0[H:2 * H].fill_(1.0)
            self.lstm.bias_hh_l0[H:2 * H].fill_(0.0)
        for w in (self.w_q, self.w_k, self.w_v):
            nn.init.uniform_(w, -bound_h, bound_h)
        nn.init.uniform_(self.w_o, -1.0 / math.sqrt(D), 1.0 / math.sqrt(D))
        linears = [self.out] + ([self.cond] if self.cond is not None else [])
        for lin in linears:
            b = 1.0 / math.sqrt(lin.in_features)
            nn.init.uniform_(lin.weight, -b, b)
            nn.init.uniform_(lin.bias, -b, b)

    # -- pipeline stages ---------------------------------------------------

    def encode_sequence(self, xt: torch.Tensor) -> torch.Tensor:
        """(n, L) -> (n, L, H) hidden states, zero initial state, left to right."""
        if xt.shape[-1] != self.config.seq_len:
            raise ValueError(f"expected length {self.config.seq_len}, got {xt.shape[-1]}")
        g, _ = self.lstm(xt.unsqueeze(-1))
        return g

    def condition_embedding(self, label: torch.Tensor) -> torch.Tensor:
        onehot = F.one_hot(label, self.config.n_labels).to(self.cond.weight.dtype)
        return self.cond(onehot)

    def self_attention(self, fused: torch.Tensor, return_weights: bool = False):
        """(n, L, H) -> (n, L, D) multi-head scaled dot-product attention."""
        db = self.config.head_dim
        q = torch.einsum("nlh,bhd->nbld", fused, self.w_q)
        k = torch.einsum("nlh,bhd->nbld", fused, self.w_k)
        v = torch.einsum("nlh,bhd->nbld", fused, self.w_v)
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(db), dim=-1)
        heads = weights @ v  # (n, B, L, db)
        n, B, L, _ = heads.shape
        concat = heads.permute(0, 2, 1, 3).reshape(n, L, B * db)
        out = concat @ self.w_o
        return (out, weights) if return_weights else out

    def forward(self, xt: torch.Tensor, t: torch.Tensor, label: torch.Tensor | None = None):
        cfg = self.config
        if cfg.conditional and label is None:
            raise ValueError("conditional model requires a label")
        if not cfg.conditional and label is not None:
            raise ValueError("unconditional model does not take a label")
        if label is not None:
            label = torch.as_tensor(label, dtype=torch.long).reshape(-1)
            if label.numel() and (label.min() < 0 or label.max() >= cfg.n_labels):
                raise ValueError(f"label outside vocabulary of size {cfg.n_labels}")
            if label.numel() == 1 and xt.shape[0] > 1:
                label = label.expand(xt.shape[0])
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1 and xt.shape[0] > 1:
            t = t.expand(xt.shape[0])

        g = self.encode_sequence(xt)
        te = step_embedding(t, cfg.hidden, dtype=g.dtype)
        c = self.condition_embedding(label) if label is not None else None
        h = broadcast_fuse(g, c, te)
        o = self.self_attention(h)
        return self.out(o).squeeze(-1)


def broadcast_fuse(hidden: torch.Tensor, cond: torch.Tensor | None, step: torch.Tensor) -> torch.Tensor:
    """Add the condition and step embeddings to every time row of ``hidden``.

    ``hidden`` is (n, L, H) or (L, H); ``cond``/``step`` are (n, H) or (H,).
    """
    width = hidden.shape[-1]
    for name, e in (("condition", cond), ("step", step)):
        if e is not None and e.shape[-1] != width:
            raise ValueError(f"{name} embedding width {e.shape[-1]} != hidden width {width}")
    extra = step if cond is None else cond + step
    return hidden + extra.unsqueeze(-2)


# -- functional wrappers ----------------------------------------------------

def encode_sequence(xt, model: Denoiser) -> torch.Tensor:
    return model.encode_sequence(_as_batch(xt, model))


def self_attention(fused, model: Denoiser) -> torch.Tensor:
    return model.self_attention(torch.as_tensor(fused, dtype=_dtype(model)))


def predict_noise(xt, t: int, label, model: Denoiser) -> torch.Tensor:
    """Noise estimate for a single sequence or a batch; output matches input shape."""
    x = _as_batch(xt, model)
    with torch.no_grad():
        out = model(x, torch.full((x.shape[0],), int(t)), None if label is None else label)
    return out[0] if torch.as_tensor(xt).dim() == 1 else out


def _dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def _as_batch(xt, model: Denoiser) -> torch.Tensor:
    x = torch.as_tensor(xt, dtype=_dtype(model))
    return x.unsqueeze(0) if x.dim() == 1 else x


# -- checkpoint ---------------------------------------------------------------

def parameter_table(model: Denoiser) -> dict[str, torch.Tensor]:
    """Implementation-neutral parameter names.

    LSTM gate blocks are stacked (input, forget, cell, output) along the
    first axis; attention weights are per head, shape (B, H, d_b); linear
    maps are stored (out, in).
    """
    table = {
        "lstm.w_ih": model.lstm.weight_ih_l0,
        "lstm.w_hh": model.lstm.weight_hh_l0,
        "lstm.b_ih": model.lstm.bias_ih_l0,
        "lstm.b_hh": model.lstm.bias_hh_l0,
        "attn.w_q": model.w_q,
        "attn.w_k": model.w_k,
        "attn.w_v": model.w_v,
        "attn.w_o": model.w_o,
        "out.w_c": model.out.weight,
        "out.bias": model.out.bias,
    }
    if model.cond is not None:
        table["cond.weight"] = model.cond.weight
        table["cond.bias"] = model.cond.bias
    return table


def save_checkpoint(path, model: Denoiser, metadata: dict[str, Any] | None = None) -> None:
    tensors = {
        name: {"shape": list(p.shape), "data": p.detach().double().reshape(-1).tolist()}
        for name, p in parameter_table(model).items()
    }
    doc = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "metadata": metadata or {},
        "tensors": tensors,
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path, dtype=torch.float32) -> tuple[Denoiser, dict[str, Any]]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    model = Denoiser(NetworkConfig.from_dict(doc["config"])).to(dtype)
    table = parameter_table(model)
    if set(table) != set(doc["tensors"]):
        raise ValueError("checkpoint parameter names do not match the configuration")
    with torch.no_grad():
        for name, p in table.items():
            entry = doc["tensors"][name]
            if list(p.shape) != entry["shape"]:
                raise ValueError(f"{name}: shape {entry['shape']} != expected {list(p.shape)}")
            p.copy_(torch.tensor(entry["data"], dtype=dtype).reshape(p.shape))
    model.eval()
    return model, doc["metadata"]
