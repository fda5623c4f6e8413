"""Independent reference implementations used to check the fast paths.

Everything here is deliberately naive (scalar loops, float64) and stays
independent of the library code it verifies.
"""
from __future__ import annotations

import math
import random

import numpy as np
import torch
import torch.nn.functional as F


def simam_scalar(x: np.ndarray, e_lambda: float) -> np.ndarray:
    """Line-by-line scalar transcription of the energy attention."""
    x = np.asarray(x, dtype=np.float64)
    batch, channels, height, width = x.shape
    n = height * width - 1
    out = np.empty_like(x)
    for b in range(batch):
        for c in range(channels):
            piece = x[b, c]
            mean = piece.mean()
            d = (piece - mean) ** 2
            v = d.sum() / n
            e_inv = d / (4.0 * (v + e_lambda)) + 0.5
            out[b, c] = piece * (1.0 / (1.0 + np.exp(-e_inv)))
    return out


def _softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def _linear(x: np.ndarray, layer) -> np.ndarray:
    w = layer.weight.detach().cpu().double().numpy()
    b = layer.bias.detach().cpu().double().numpy()
    return x @ w.T + b


def _multi_head(q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int,
                logit_scale: float) -> tuple[np.ndarray, np.ndarray]:
    length, dim = q.shape
    head_dim = dim // heads
    out = np.zeros((length, dim))
    weights = np.zeros((heads, length, length))
    for h in range(heads):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        qh, kh, vh = q[:, sl], k[:, sl], v[:, sl]
        for i in range(length):
            logits = np.array([qh[i] @ kh[j] for j in range(length)]) * logit_scale
            row = _softmax(logits)
            weights[h, i] = row
            acc = np.zeros(head_dim)
            for j in range(length):
                acc += row[j] * vh[j]
            out[i, sl] = acc
    return out, weights


def mhsa_reference(module, tokens: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Triple-loop self-attention; returns (output, per-head weight matrices)."""
    x = tokens.detach().cpu().double().numpy()
    batch, length, dim = x.shape
    outputs = np.zeros((batch, length, dim))
    all_weights = np.zeros((batch, module.num_heads, length, length))
    for b in range(batch):
        qkv = _linear(x[b], module.qkv) * module.proj_scale
        q, k, v = qkv[:, :dim], qkv[:, dim:2 * dim], qkv[:, 2 * dim:]
        merged, weights = _multi_head(q, k, v, module.num_heads, module.logit_scale)
        outputs[b] = _linear(merged, module.proj)
        all_weights[b] = weights
    return outputs, all_weights


def mhga_reference(module, stream: torch.Tensor, guide_q: torch.Tensor,
                   guide_k: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Triple-loop guided attention: q/k from guidance, v from the stream."""
    s = stream.detach().cpu().double().numpy()
    gq = guide_q.detach().cpu().double().numpy()
    gk = guide_k.detach().cpu().double().numpy()
    batch, length, dim = s.shape
    outputs = np.zeros((batch, length, dim))
    all_weights = np.zeros((batch, module.num_heads, length, length))
    for b in range(batch):
        q = _linear(gq[b], module.q_proj) * module.proj_scale
        k = _linear(gk[b], module.k_proj) * module.proj_scale
        v = _linear(s[b], module.v_proj) * module.proj_scale
        merged, weights = _multi_head(q, k, v, module.num_heads, module.logit_scale)
        outputs[b] = _linear(merged, module.proj)
        all_weights[b] = weights
    return outputs, all_weights


def metrics_reference(tp: int, tn: int, fp: int, fn: int) -> dict:
    """Definitional metric formulas, written out independently."""
    total = tp + tn + fp + fn

    def div(num, den):
        return num / den if den > 0 else None

    sen = div(tp, tp + fn)
    ppv = div(tp, tp + fp)
    if sen is None or ppv is None or sen + ppv == 0:
        f1 = None
    else:
        f1 = 2 * ppv * sen / (ppv + sen)
    return {
        "acc": div(tp + tn, total),
        "spe": div(tn, tn + fp),
        "sen": sen,
        "ppv": ppv,
        "npv": div(tn, tn + fn),
        "f1": f1,
    }


# ---------------------------------------------------------------------------
# finite-difference gradient checking

PARAMETER_GROUPS = {
    "backbone_conv": lambda name, p: name.startswith("backbone.") and p.dim() == 4,
    "patch_projection": lambda name, p: name.startswith("hybrid_embed.proj."),
    "class_token": lambda name, p: name == "shared.class_token",
    "positional_encoding": lambda name, p: name == "shared.pos_encoding",
    "focus_projection": lambda name, p: name.startswith("focus_blocks."),
    "self_attention": lambda name, p: ".self_attn." in name,
    "guided_attention": lambda name, p: ".guided_attn." in name,
    "ffn": lambda name, p: ".ffn1." in name or ".ffn2." in name,
    "head": lambda name, p: name.startswith("head."),
}


def central_difference(loss_fn, param: torch.nn.Parameter, flat_index: int,
                       step: float = 1e-3) -> float:
    flat = param.data.view(-1)
    original = flat[flat_index].item()
    with torch.no_grad():
        flat[flat_index] = original + step
        plus = loss_fn().item()
        flat[flat_index] = original - step
        minus = loss_fn().item()
        flat[flat_index] = original
    return (plus - minus) / (2.0 * step)


def gradient_check(model: torch.nn.Module, images: torch.Tensor, labels: torch.Tensor,
                   samples_per_group: int = 5, step: float = 1e-3,
                   seed: int = 0) -> dict[str, list[float]]:
    """Relative errors (autodiff vs central differences) per parameter group.

    Runs at 64-bit precision in eval mode so the loss is a smooth,
    deterministic function of the parameters.
    """
    model = model.double()
    model.eval()
    images = images.double()

    def loss_fn():
        return F.cross_entropy(model(images), labels)

    model.zero_grad()
    loss_fn().backward()

    rng = random.Random(seed)
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    errors: dict[str, list[float]] = {}
    for group, predicate in PARAMETER_GROUPS.items():
        members = [(n, p) for n, p in named if predicate(n, p)]
        if not members:
            continue
        errors[group] = []
        for _ in range(samples_per_group):
            _, param = members[rng.randrange(len(members))]
            index = rng.randrange(param.numel())
            analytic = param.grad.view(-1)[index].item()
            numeric = central_difference(loss_fn, param, index, step)
            denom = max(abs(analytic), abs(numeric), 1e-8)
            errors[group].append(abs(analytic - numeric) / denom)
    model.zero_grad()
    return errors
